"""Multi-future pedestrian trajectory forecasting with an attentive conditional VRNN."""

__version__ = "0.1.0"

from .kernels import BACKEND
