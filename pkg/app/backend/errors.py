"""Exception hierarchy.

Every error raised on purpose by the package derives from
``WeatherDesignError`` and carries a short ``category`` that the CLI prints
as a machine-parseable prefix.
"""


class WeatherDesignError(Exception):
    category = "error"


class ConfigError(WeatherDesignError, ValueError):
    category = "config"


class GridError(WeatherDesignError, ValueError):
    category = "grid"


class DataError(WeatherDesignError, ValueError):
    category = "data"


class ShapeError(WeatherDesignError, ValueError):
    category = "shape"


class DivergenceError(WeatherDesignError, RuntimeError):
    category = "divergence"


class CheckpointError(WeatherDesignError):
    category = "checkpoint"


class RunExistsError(WeatherDesignError):
    category = "run_exists"
