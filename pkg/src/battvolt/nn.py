"""Learned components: the MLP correction term and the stacked-LSTM baseline.

Both models keep their parameters in a single flat float64 vector (layouts in
kernels.layout) so the optimizer, checkpoints, and compiled kernels all see
the same memory.  Initialization is fully determined by an integer seed.
"""

from dataclasses import dataclass
from typing import Callable

import numpy as np
from scipy.special import erf

from .kernels import _numpy_impl, layout
from . import kernels

_SQRT2 = np.sqrt(2.0)


def gelu(x):
    """Exact-erf GELU: 0.5 x (1 + erf(x / sqrt(2)))."""
    x = np.asarray(x, dtype=np.float64)
    return 0.5 * x * (1.0 + erf(x / _SQRT2))


def gelu_grad(x):
    x = np.asarray(x, dtype=np.float64)
    phi = np.exp(-0.5 * x * x) / np.sqrt(2.0 * np.pi)
    return 0.5 * (1.0 + erf(x / _SQRT2)) + x * phi


@dataclass
class GradientRecord:
    """A recorded forward computation supporting reverse accumulation."""

    n_params: int
    _vjp: Callable


def backward(record: GradientRecord, dl_dout) -> np.ndarray:
    """Reverse-accumulate d(loss)/d(params) given d(loss)/d(outputs)."""
    grad = record._vjp(np.asarray(dl_dout, dtype=np.float64))
    assert grad.shape == (record.n_params,)
    return grad


class MlpCorrection:
    """4 -> 32 -> 32 -> 1 perceptron, GELU hidden activations, linear output.

    The output head starts at exactly zero so a freshly initialized network
    is the identity-preserving correction f == 0.
    """

    SIZES = layout.MLP_SIZES
    N_PARAMS = layout.mlp_param_count()

    def __init__(self, theta: np.ndarray | None = None, seed: int | None = None):
        if theta is None:
            theta = self._init_params(seed if seed is not None else 0)
        theta = np.ascontiguousarray(theta, dtype=np.float64)
        if theta.shape != (self.N_PARAMS,):
            raise ValueError(f"expected {self.N_PARAMS} parameters, got {theta.shape}")
        if not np.all(np.isfinite(theta)):
            raise ValueError("non-finite MLP parameters")
        self.theta = theta

    @classmethod
    def _init_params(cls, seed: int) -> np.ndarray:
        rng = np.random.default_rng(seed)
        theta = np.zeros(cls.N_PARAMS)
        for li, (w, b) in enumerate(layout.mlp_unpack(theta, cls.SIZES)):
            if li == len(cls.SIZES) - 2:
                continue  # output head stays zero
            bound = 1.0 / np.sqrt(w.shape[1])
            w[:] = rng.uniform(-bound, bound, size=w.shape)
            b[:] = 0.0
        return theta

    def forward(self, x) -> np.ndarray:
        """Evaluate rows x (..., 4) -> (...,)."""
        x = np.asarray(x, dtype=np.float64)
        lead = x.shape[:-1]
        y = _numpy_impl.mlp_forward(self.theta, x.reshape(-1, 4))
        return y.reshape(lead)

    def forward_record(self, x) -> tuple[np.ndarray, GradientRecord]:
        x = np.asarray(x, dtype=np.float64).reshape(-1, 4)
        theta = self.theta
        y, a1, h1, a2, h2 = _numpy_impl._mlp_rows(theta, x)

        def vjp(dy):
            grad = np.zeros_like(theta)
            _numpy_impl._mlp_param_grads(theta, x, a1, h1, a2, h2, dy.reshape(-1), grad)
            return grad

        return y, GradientRecord(self.N_PARAMS, vjp)

    def input_grads(self, x) -> np.ndarray:
        """dy/dx per row, shape (..., 4)."""
        x = np.asarray(x, dtype=np.float64)
        lead = x.shape[:-1]
        _, a1, _, a2, _ = _numpy_impl._mlp_rows(self.theta, x.reshape(-1, 4))
        return _numpy_impl._mlp_input_grads(self.theta, a1, a2).reshape(lead + (4,))


def mlp_forward(net: MlpCorrection, v1, i, z, temp):
    """Correction value at one operating point (all inputs normalized)."""
    x = np.stack(np.broadcast_arrays(
        np.asarray(v1, dtype=np.float64),
        np.asarray(i, dtype=np.float64),
        np.asarray(z, dtype=np.float64),
        np.asarray(temp, dtype=np.float64),
    ), axis=-1)
    return net.forward(x)


class LstmBaseline:
    """Two stacked LSTM layers (hidden 32) with a per-step scalar head.

    Separate input-hidden and hidden-hidden bias vectors per layer; gate
    blocks ordered (input, forget, cell, output).
    """

    N_INPUT = layout.LSTM_INPUT
    N_HIDDEN = layout.LSTM_HIDDEN
    N_LAYERS = layout.LSTM_LAYERS
    N_PARAMS = layout.lstm_param_count()

    def __init__(self, params: np.ndarray | None = None, seed: int | None = None):
        if params is None:
            params = self._init_params(seed if seed is not None else 0)
        params = np.ascontiguousarray(params, dtype=np.float64)
        if params.shape != (self.N_PARAMS,):
            raise ValueError(f"expected {self.N_PARAMS} parameters, got {params.shape}")
        if not np.all(np.isfinite(params)):
            raise ValueError("non-finite LSTM parameters")
        self.params = params

    @classmethod
    def _init_params(cls, seed: int) -> np.ndarray:
        rng = np.random.default_rng(seed)
        params = np.zeros(cls.N_PARAMS)
        layers, w_head, b_head = layout.lstm_unpack(params, cls.N_INPUT, cls.N_HIDDEN, cls.N_LAYERS)
        nh = cls.N_HIDDEN
        for w_ih, w_hh, b_ih, b_hh in layers:
            w_ih[:] = rng.uniform(-1.0, 1.0, size=w_ih.shape) / np.sqrt(w_ih.shape[1])
            w_hh[:] = rng.uniform(-1.0, 1.0, size=w_hh.shape) / np.sqrt(w_hh.shape[1])
            b_ih[:] = 0.0
            b_ih[nh : 2 * nh] = 1.0  # forget-gate bias opens the memory path
            b_hh[:] = 0.0
        w_head[:] = rng.uniform(-1.0, 1.0, size=nh) / np.sqrt(nh)
        b_head[0] = 0.0
        return params

    def forward(self, inputs) -> np.ndarray:
        """One window (L, 3) -> voltage trajectory (L,), normalized units."""
        inputs = np.asarray(inputs, dtype=np.float64)
        return kernels.lstm_forward(self.params, inputs[None])[0]

    def forward_batch(self, x) -> np.ndarray:
        return kernels.lstm_forward(self.params, np.asarray(x, dtype=np.float64))

    def forward_record(self, x) -> tuple[np.ndarray, GradientRecord]:
        """Numpy-path forward with a reverse-accumulation record."""
        x = np.asarray(x, dtype=np.float64)
        squeeze = x.ndim == 2
        if squeeze:
            x = x[None]
        params = self.params

        def vjp(dy):
            dyb = np.asarray(dy, dtype=np.float64)
            if squeeze:
                dyb = dyb[None]
            return _numpy_impl.lstm_vjp(params, x, dyb)

        y = _numpy_impl.lstm_forward(params, x)
        return (y[0] if squeeze else y), GradientRecord(self.N_PARAMS, vjp)

    def loss_and_grad(self, x, targets) -> tuple[float, np.ndarray]:
        loss, grad, _ = kernels.lstm_loss_grad(
            self.params, np.asarray(x, dtype=np.float64), np.asarray(targets, dtype=np.float64)
        )
        return loss, grad


def lstm_forward(net: LstmBaseline, inputs) -> np.ndarray:
    return net.forward(inputs)
