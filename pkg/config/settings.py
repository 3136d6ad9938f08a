from pathlib import Path
from typing import Optional

from pydantic_settings import BaseSettings, SettingsConfigDict


class Settings(BaseSettings):
    model_config = SettingsConfigDict(env_prefix="WDS_", env_file=".env", extra="ignore")

    PROJECT_NAME: str = "Weather Design Space"

    # filesystem
    RUNS_DIR: Path = Path("runs")
    DATA_DIR: Path = Path("datasets")

    # logging
    LOG_LEVEL: str = "INFO"
    LOG_FORMAT: str = "%(asctime)s | %(levelname)s | %(name)s | %(message)s"

    # numerics
    DEVICE: str = "cpu"
    TORCH_THREADS: Optional[int] = None
    DETERMINISTIC: bool = True
    STD_EPSILON: float = 1e-8

    # experiment configs: WDS_CFG__optim__lr=0.0005 overrides optim.lr
    CONFIG_ENV_PREFIX: str = "WDS_CFG__"


settings = Settings()
