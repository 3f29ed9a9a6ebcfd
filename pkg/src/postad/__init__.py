"""Spatio-temporal association discrepancy anomaly detection for multivariate time series."""

__version__ = "0.1.0"

from .config import ABLATIONS, TrainConfig, desk_config  # noqa: E402
from .errors import (CheckpointError, DataError, NumericalError, PostError,  # noqa: E402
                     UsageError)
from .estimator import POSTDetector  # noqa: E402
from .model import POSTModel, build_model  # noqa: E402

__all__ = [
    "ABLATIONS", "TrainConfig", "desk_config", "POSTDetector", "POSTModel", "build_model",
    "PostError", "UsageError", "DataError", "CheckpointError", "NumericalError", "__version__",
]
