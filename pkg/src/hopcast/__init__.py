"""Predictor-corrector forecasting with Hopfield-memory error correction,
probabilistic-ensemble baselines and calibration metrics."""

__version__ = "0.1.0"

from .kernels import BACKEND_NAME  # noqa: E402

__all__ = ["__version__", "BACKEND_NAME"]
