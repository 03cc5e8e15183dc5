"""Rider time-pressure classification from motorcycle simulator telemetry."""

__version__ = "0.1.0"

from .estimator import MTPSClassifier, TelemetryScaler  # noqa: E402
from .model import MtpsConfig, MTPSModel  # noqa: E402

__all__ = ["MTPSClassifier", "MTPSModel", "MtpsConfig", "TelemetryScaler", "__version__"]
