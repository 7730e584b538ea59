"""Activation space occlusion sensitivity for two-class multispectral image tiles."""

__version__ = "0.1.0"

from .estimator import ASOS, IIOS  # noqa: E402

__all__ = ["ASOS", "IIOS"]
