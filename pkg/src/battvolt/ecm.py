"""First-order Thevenin circuit: simulation and nonlinear least-squares fit.

Terminal voltage is V = OCV(z) - R0 I - V1 with the polarization state V1
following dV1/dt = -V1/(R1 C1) + I/C1, advanced by fixed-step RK4 (the same
stage arithmetic the hybrid model uses, so the two coincide exactly when the
learned correction is zero).  Identification runs Levenberg-Marquardt over
the nine parameters (six OCV coefficients plus R0, R1, C1), with the circuit
parameters optimized in log space to stay positive.
"""

import logging
from dataclasses import dataclass, field

import numpy as np

from . import ocv as ocv_mod
from . import kernels
from .errors import DataError
from .pipeline import NormalizationSpec, Window, WindowBatch, denormalize, stack_windows

log = logging.getLogger(__name__)

DEFAULT_DT = 0.1

# Levenberg-Marquardt protocol: multiplicative damping, stop on relative
# cost stagnation or the iteration cap.
LM_LAMBDA0 = 1e-3
LM_LAMBDA_UP = 10.0
LM_LAMBDA_DOWN = 10.0
LM_REL_TOL = 1e-10
LM_MAX_ITER = 200


@dataclass
class EcmParams:
    """Nine identified scalars: OCV Chebyshev coefficients and R0, R1, C1."""

    ocv: np.ndarray
    r0: float
    r1: float
    c1: float

    def __post_init__(self):
        self.ocv = ocv_mod.validate_coeffs(self.ocv)
        for name in ("r0", "r1", "c1"):
            v = getattr(self, name)
            if not (np.isfinite(v) and v > 0):
                raise DataError(f"{name} must be positive and finite, got {v}")

    @property
    def tau1(self) -> float:
        return self.r1 * self.c1

    def copy(self) -> "EcmParams":
        return EcmParams(self.ocv.copy(), self.r0, self.r1, self.c1)

    def as_vector(self) -> np.ndarray:
        return np.concatenate((self.ocv, [self.r0, self.r1, self.c1]))

    @staticmethod
    def from_vector(v) -> "EcmParams":
        v = np.asarray(v, dtype=np.float64)
        return EcmParams(v[:6].copy(), float(v[6]), float(v[7]), float(v[8]))


@dataclass
class FitReport:
    params: EcmParams
    rmse: float
    iterations: int
    converged: bool
    cost_history: list = field(default_factory=list)


def save_params(params: EcmParams, path) -> None:
    with open(path, "w") as fh:
        for k, ck in enumerate(params.ocv):
            fh.write(f"ocv_c{k}={ck:.12g}\n")
        fh.write(f"r0={params.r0:.12g}\n")
        fh.write(f"r1={params.r1:.12g}\n")
        fh.write(f"c1={params.c1:.12g}\n")


def load_params(path) -> EcmParams:
    values = {}
    with open(path) as fh:
        for line in fh:
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            key, _, raw = line.partition("=")
            values[key.strip()] = float(raw)
    try:
        c = np.array([values[f"ocv_c{k}"] for k in range(6)])
        return EcmParams(c, values["r0"], values["r1"], values["c1"])
    except KeyError as exc:
        raise DataError(f"bad ECM parameter file {path}: missing {exc}") from None


def _window_arrays(windows, spec: NormalizationSpec):
    batch = windows if isinstance(windows, WindowBatch) else stack_windows(list(windows))
    i_phys = denormalize(spec, "current", batch.inputs[..., 0])
    z_phys = denormalize(spec, "soc", batch.inputs[..., 2])
    v_meas = denormalize(spec, "voltage", batch.targets)
    return i_phys, z_phys, v_meas


def simulate_arrays(params: EcmParams, i_phys, z_phys, dt: float = DEFAULT_DT) -> np.ndarray:
    """Batched simulation on physical arrays (B, L); V1 starts at 0."""
    v1 = kernels.rc_rk4(np.ascontiguousarray(i_phys, dtype=np.float64), params.r1, params.c1, dt)
    return ocv_mod.ocv_eval(params.ocv, z_phys) - params.r0 * np.asarray(i_phys) - v1


def ecm_simulate(params: EcmParams, window: Window, spec: NormalizationSpec,
                 dt: float = DEFAULT_DT, z_override=None) -> np.ndarray:
    """Predicted voltage trace (volts) for one window.

    z is taken from the window's denormalized soc channel per time step
    unless z_override (a physical SOC trace) is supplied.
    """
    i_phys = denormalize(spec, "current", window.inputs[:, 0])
    z_phys = np.asarray(z_override, dtype=np.float64) if z_override is not None \
        else denormalize(spec, "soc", window.inputs[:, 2])
    return simulate_arrays(params, i_phys[None], z_phys[None], dt)[0]


def jacobian(params: EcmParams, windows, spec: NormalizationSpec,
             dt: float = DEFAULT_DT) -> np.ndarray:
    """Residual Jacobian (N, 9) w.r.t. (c0..c5, r0, r1, c1).

    OCV columns are T_k(2z - 1) and dV/dr0 = -I exactly; the R1/C1 columns
    come from forward sensitivities through the RK4 recursion.
    """
    i_phys, z_phys, _ = _window_arrays(windows, spec)
    _, s_r1, s_c1 = kernels.rc_rk4_sens(
        np.ascontiguousarray(i_phys, dtype=np.float64), params.r1, params.c1, dt
    )
    x = 2.0 * np.clip(z_phys, 0.0, 1.0) - 1.0
    basis = ocv_mod.cheb_basis(x)
    n = i_phys.size
    jac = np.empty((n, 9))
    jac[:, :6] = basis.reshape(n, 6)
    jac[:, 6] = -i_phys.reshape(n)
    jac[:, 7] = -s_r1.reshape(n)
    jac[:, 8] = -s_c1.reshape(n)
    return jac


def _initial_guess(i_phys, z_phys, v_meas) -> EcmParams:
    """OCV by linear least squares against the Chebyshev basis, circuit drops
    ignored; nominal small resistances and a moderate capacitance."""
    x = 2.0 * np.clip(z_phys, 0.0, 1.0) - 1.0
    basis = ocv_mod.cheb_basis(x).reshape(-1, 6)
    coeffs, *_ = np.linalg.lstsq(basis, v_meas.reshape(-1), rcond=None)
    return EcmParams(coeffs, 0.010, 0.010, 1000.0)


def ecm_identify(train, spec: NormalizationSpec, init: EcmParams | None = None,
                 dt: float = DEFAULT_DT, max_iter: int = LM_MAX_ITER) -> FitReport:
    """Joint NLS fit of the nine parameters on the training windows.

    Levenberg-Marquardt on physical-volt residuals, equal weight per sample
    over the concatenated windows.  Non-convergence within max_iter returns
    converged=False with the best parameters found, not an exception.
    """
    i_phys, z_phys, v_meas = _window_arrays(train, spec)
    if i_phys.size == 0:
        raise DataError("no training samples")
    if init is None:
        init = _initial_guess(i_phys, z_phys, v_meas)

    # Optimization vector: 6 OCV coefficients + log(r0), log(r1), log(c1).
    p = np.concatenate((init.ocv, np.log([init.r0, init.r1, init.c1])))

    def unpack(pv) -> EcmParams:
        return EcmParams(pv[:6].copy(), *np.exp(pv[6:]))

    def residual(params):
        return (simulate_arrays(params, i_phys, z_phys, dt) - v_meas).reshape(-1)

    params = unpack(p)
    res = residual(params)
    cost = float(res @ res)
    history = [cost]
    lam = LM_LAMBDA0
    converged = False
    iterations = 0
    for iterations in range(1, max_iter + 1):
        jac = jacobian(params, train, spec, dt)
        # Chain rule onto the log-parameterized circuit entries.
        jac = jac.copy()
        jac[:, 6] *= params.r0
        jac[:, 7] *= params.r1
        jac[:, 8] *= params.c1
        jtj = jac.T @ jac
        jtr = jac.T @ res
        diag = np.diag(jtj).copy()
        diag[diag <= 0] = 1.0
        accepted = False
        while lam < 1e12:
            try:
                step = np.linalg.solve(jtj + lam * np.diag(diag), -jtr)
            except np.linalg.LinAlgError:
                lam *= LM_LAMBDA_UP
                continue
            p_new = p + step
            params_new = unpack(p_new)
            res_new = residual(params_new)
            cost_new = float(res_new @ res_new)
            if np.isfinite(cost_new) and cost_new < cost:
                rel_drop = (cost - cost_new) / max(cost, 1e-300)
                p, params, res, cost = p_new, params_new, res_new, cost_new
                history.append(cost)
                lam = max(lam / LM_LAMBDA_DOWN, 1e-14)
                accepted = True
                if rel_drop < LM_REL_TOL:
                    converged = True
                break
            lam *= LM_LAMBDA_UP
        if not accepted:
            converged = True  # damping exhausted: local minimum to working precision
            break
        if converged:
            break
    else:
        log.warning("LM identification hit the %d-iteration cap", max_iter)

    rmse = float(np.sqrt(cost / res.size))
    return FitReport(params=params, rmse=rmse, iterations=iterations,
                     converged=converged, cost_history=history)
