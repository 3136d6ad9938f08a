import logging
import shutil
from pathlib import Path
from typing import List, Optional

import pandas as pd
import yaml

from app.backend.errors import DataError, RunExistsError
from app.backend.schemas import ExperimentConfig, LoadReport, RunStatus
from config.settings import settings

logger = logging.getLogger(__name__)

HISTORY_COLUMNS = ["phase", "stage", "epoch", "step", "loss", "lr"]


class RunDirectory:
    """Layout of one run's artifacts under ``RUNS_DIR/<run_id>``."""

    def __init__(self, root: Path):
        self.root = Path(root)

    @classmethod
    def for_run(cls, run_id: str, base: Optional[Path] = None) -> "RunDirectory":
        return cls(Path(base or settings.RUNS_DIR) / run_id)

    @property
    def config_path(self) -> Path:
        return self.root / "config.yaml"

    @property
    def hash_path(self) -> Path:
        return self.root / "config_hash"

    @property
    def status_path(self) -> Path:
        return self.root / "status.yaml"

    @property
    def checkpoints(self) -> Path:
        return self.root / "checkpoints"

    @property
    def metrics_path(self) -> Path:
        return self.root / "metrics.csv"

    @property
    def loss_history_path(self) -> Path:
        return self.root / "loss_history.csv"

    @property
    def load_report_path(self) -> Path:
        return self.root / "load_report.txt"

    @property
    def plots(self) -> Path:
        return self.root / "plots"

    @property
    def rollout(self) -> Path:
        return self.root / "rollout"

    @property
    def diagnostics(self) -> Path:
        return self.root / "diagnostics"

    def checkpoint(self, name: str) -> Path:
        return self.checkpoints / f"{name}.pt"

    def exists(self) -> bool:
        return self.config_path.exists() or self.status_path.exists()

    def create(self, config: ExperimentConfig, force: bool = False) -> "RunDirectory":
        if self.exists():
            if not force:
                raise RunExistsError(f"run directory {self.root} already exists (use --force to overwrite)")
            logger.warning("Overwriting existing run directory %s", self.root)
            shutil.rmtree(self.root)
        self.root.mkdir(parents=True, exist_ok=True)
        self.write_config(config)
        return self

    def write_config(self, config: ExperimentConfig) -> None:
        self.root.mkdir(parents=True, exist_ok=True)
        with open(self.config_path, "w") as fh:
            yaml.safe_dump(config.model_dump(mode="json"), fh, sort_keys=False)
        self.hash_path.write_text(config.config_hash() + "\n")

    def read_config(self) -> ExperimentConfig:
        if not self.config_path.exists():
            raise DataError(f"{self.root} has no config.yaml")
        with open(self.config_path) as fh:
            return ExperimentConfig.model_validate(yaml.safe_load(fh))

    def write_status(self, status: RunStatus) -> None:
        self.root.mkdir(parents=True, exist_ok=True)
        with open(self.status_path, "w") as fh:
            yaml.safe_dump(status.model_dump(mode="json"), fh, sort_keys=False)

    def read_status(self) -> Optional[RunStatus]:
        if not self.status_path.exists():
            return None
        with open(self.status_path) as fh:
            return RunStatus.model_validate(yaml.safe_load(fh))

    def validation_path(self, phase: str) -> Path:
        return self.root / f"validation_{phase}.csv"

    def write_loss_history(self, phase: str, history: List[dict]) -> None:
        """Replaces the rows of ``phase`` in loss_history.csv, keeping other phases."""
        frame = pd.DataFrame([r for r in history if r["phase"] == phase], columns=HISTORY_COLUMNS)
        if self.loss_history_path.exists():
            previous = pd.read_csv(self.loss_history_path)
            frame = pd.concat([previous[previous["phase"] != phase], frame], ignore_index=True)
        frame.to_csv(self.loss_history_path, index=False)

    def write_validation(self, phase: str, rows: List[dict]) -> None:
        rows = [r for r in rows if r["phase"] == phase]
        if rows:
            pd.DataFrame(rows).to_csv(self.validation_path(phase), index=False)

    def write_load_report(self, report: LoadReport) -> None:
        self.load_report_path.write_text(report.to_text())

    def write_metrics(self, frame: pd.DataFrame) -> None:
        frame.to_csv(self.metrics_path, index=False)

    def read_metrics(self) -> pd.DataFrame:
        if not self.metrics_path.exists():
            raise DataError(f"{self.root} has no metrics.csv")
        return pd.read_csv(self.metrics_path)
