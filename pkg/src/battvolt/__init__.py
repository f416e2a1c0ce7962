"""battvolt: hybrid equivalent-circuit battery voltage modeling.

Three model families over a shared windowed data pipeline: a first-order
Thevenin circuit identified by nonlinear least squares, a stacked-LSTM
baseline, and a hybrid model whose polarization dynamics carry a small
learned correction trained end-to-end through a fixed-step RK4 solver.
"""

__version__ = "0.1.0"

from .kernels import ACTIVE_BACKEND  # noqa: F401
