"""Flat parameter-vector layouts shared by the numpy and compiled backends.

Both backends index into the same float64 vectors, so the layout here is the
single source of truth.  MLP: weights row-major per layer as (out, in), bias
after each weight block.  LSTM: per layer W_ih (4H, F), W_hh (4H, H), b_ih
(4H,), b_hh (4H,); gate blocks ordered (input, forget, cell, output) along
the 4H axis; scalar head (w, b) last.
"""

import numpy as np

MLP_SIZES = (4, 32, 32, 1)

LSTM_INPUT = 3
LSTM_HIDDEN = 32
LSTM_LAYERS = 2


def mlp_param_count(sizes=MLP_SIZES) -> int:
    return sum((fi + 1) * fo for fi, fo in zip(sizes[:-1], sizes[1:]))


def mlp_unpack(theta: np.ndarray, sizes=MLP_SIZES):
    """Views (no copy) of (W, b) per layer; W has shape (out, in)."""
    layers = []
    off = 0
    for fi, fo in zip(sizes[:-1], sizes[1:]):
        w = theta[off : off + fi * fo].reshape(fo, fi)
        off += fi * fo
        b = theta[off : off + fo]
        off += fo
        layers.append((w, b))
    if off != theta.shape[0]:
        raise ValueError(f"parameter vector has {theta.shape[0]} entries, layout needs {off}")
    return layers


def lstm_param_count(n_input=LSTM_INPUT, n_hidden=LSTM_HIDDEN, n_layers=LSTM_LAYERS) -> int:
    total = 0
    feat = n_input
    for _ in range(n_layers):
        total += 4 * n_hidden * (feat + n_hidden) + 8 * n_hidden
        feat = n_hidden
    return total + n_hidden + 1


def lstm_unpack(params: np.ndarray, n_input=LSTM_INPUT, n_hidden=LSTM_HIDDEN, n_layers=LSTM_LAYERS):
    """Views: list of (W_ih, W_hh, b_ih, b_hh) per layer, then (w_head, b_head)."""
    layers = []
    off = 0
    feat = n_input
    g = 4 * n_hidden
    for _ in range(n_layers):
        w_ih = params[off : off + g * feat].reshape(g, feat)
        off += g * feat
        w_hh = params[off : off + g * n_hidden].reshape(g, n_hidden)
        off += g * n_hidden
        b_ih = params[off : off + g]
        off += g
        b_hh = params[off : off + g]
        off += g
        layers.append((w_ih, w_hh, b_ih, b_hh))
        feat = n_hidden
    w_head = params[off : off + n_hidden]
    off += n_hidden
    b_head = params[off : off + 1]
    off += 1
    if off != params.shape[0]:
        raise ValueError(f"parameter vector has {params.shape[0]} entries, layout needs {off}")
    return layers, w_head, b_head
