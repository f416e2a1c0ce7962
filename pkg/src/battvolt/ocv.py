"""Open-circuit-voltage map: degree-5 Chebyshev polynomial of the first kind.

The SOC axis z in [0, 1] maps affinely onto the Chebyshev domain via
x = 2z - 1.  Inputs outside [0, 1] are clamped before evaluation so the
polynomial cannot blow up when an integrated SOC drifts past a boundary.
"""

import numpy as np

N_COEFFS = 6
DEGREE = N_COEFFS - 1


def validate_coeffs(c) -> np.ndarray:
    c = np.asarray(c, dtype=np.float64)
    if c.shape != (N_COEFFS,):
        raise ValueError(f"expected {N_COEFFS} OCV coefficients, got shape {c.shape}")
    if not np.all(np.isfinite(c)):
        raise ValueError("OCV coefficients must be finite")
    return c


def cheb_basis(x) -> np.ndarray:
    """T_0..T_5 evaluated at x, stacked on the last axis.

    Uses the recurrence T_{k+1}(x) = 2 x T_k(x) - T_{k-1}(x).
    """
    x = np.asarray(x, dtype=np.float64)
    t = np.empty(x.shape + (N_COEFFS,), dtype=np.float64)
    t[..., 0] = 1.0
    t[..., 1] = x
    for k in range(2, N_COEFFS):
        t[..., k] = 2.0 * x * t[..., k - 1] - t[..., k - 2]
    return t


def cheb_basis_deriv(x) -> np.ndarray:
    """d/dx of T_0..T_5 via the differentiated recurrence."""
    x = np.asarray(x, dtype=np.float64)
    t = cheb_basis(x)
    d = np.empty_like(t)
    d[..., 0] = 0.0
    d[..., 1] = 1.0
    for k in range(2, N_COEFFS):
        d[..., k] = 2.0 * t[..., k - 1] + 2.0 * x * d[..., k - 1] - d[..., k - 2]
    return d


def ocv_eval(c, z):
    """OCV(z) = sum_k c_k T_k(2z - 1), with z clamped to [0, 1]."""
    c = validate_coeffs(c)
    z = np.asarray(z, dtype=np.float64)
    x = 2.0 * np.clip(z, 0.0, 1.0) - 1.0
    return cheb_basis(x) @ c


def ocv_grad(c, z):
    """Returns (dOCV/dz, dOCV/dc) at z.

    dOCV/dc_k is simply T_k(2z - 1); dOCV/dz carries the factor 2 from the
    domain map and is zero in the clamped region outside [0, 1].
    """
    c = validate_coeffs(c)
    z = np.asarray(z, dtype=np.float64)
    inside = (z >= 0.0) & (z <= 1.0)
    x = 2.0 * np.clip(z, 0.0, 1.0) - 1.0
    basis = cheb_basis(x)
    dz = 2.0 * (cheb_basis_deriv(x) @ c) * inside
    return dz, basis
