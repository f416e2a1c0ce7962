"""Hybrid circuit ODE: Thevenin 1RC dynamics plus a learned correction term.

State is (V1, z).  The polarization rate gains f(V1, I, z, T) from a small
MLP whose inputs are normalized (pipeline constants for I, z, T; a fixed
0.1 V scale for V1) and whose output is scaled by 0.01 V/s so the network
works with O(1) quantities.  SOC evolves by coulomb counting with a
learnable efficiency, initialized from the window's supplied SOC channel
and integrated jointly with V1 by fixed-step RK4.  Losses differentiate
end-to-end through the unrolled solver.
"""

from dataclasses import dataclass

import numpy as np

from . import kernels
from .ecm import DEFAULT_DT, EcmParams
from .nn import MlpCorrection
from .pipeline import NormalizationSpec, Window, WindowBatch, denormalize, stack_windows

F_SCALE = 0.01    # V/s: output scale of the learned correction
V1_SCALE = 0.1    # V: polarization input normalization

ETA_LO = 0.95
ETA_SPAN = 0.15   # eta = 0.95 + 0.15 * sigmoid(u), inside the [0.8, 1.1] box

DEFAULT_Q_NOM = 10440.0  # coulombs (2.9 Ah); a config input, not universal


def _sigmoid(u):
    return 1.0 / (1.0 + np.exp(-u))


def eta_from_raw(u: float) -> float:
    return ETA_LO + ETA_SPAN * _sigmoid(u)


def raw_from_eta(eta: float) -> float:
    s = (eta - ETA_LO) / ETA_SPAN
    if not (0.0 < s < 1.0):
        raise ValueError(f"eta {eta} outside the representable range "
                         f"({ETA_LO}, {ETA_LO + ETA_SPAN})")
    return float(np.log(s / (1.0 - s)))


@dataclass
class HybridState:
    v1: float
    z: float


class UdeModel:
    """Circuit parameters + correction network + coulombic efficiency."""

    def __init__(self, ecm: EcmParams, net: MlpCorrection, eta_raw: float | None = None,
                 q_nom: float = DEFAULT_Q_NOM, train_circuit: bool = True):
        if not q_nom > 0:
            raise ValueError(f"q_nom must be positive, got {q_nom}")
        self.ecm = ecm
        self.net = net
        self.eta_raw = raw_from_eta(1.0) if eta_raw is None else float(eta_raw)
        self.q_nom = float(q_nom)
        self.train_circuit = train_circuit

    @property
    def eta(self) -> float:
        return eta_from_raw(self.eta_raw)

    @property
    def n_trainable(self) -> int:
        return self.net.N_PARAMS + 1 + (9 if self.train_circuit else 0)

    def trainable_vector(self) -> np.ndarray:
        parts = [self.net.theta, [self.eta_raw]]
        if self.train_circuit:
            parts.append(np.log([self.ecm.r0, self.ecm.r1, self.ecm.c1]))
            parts.append(self.ecm.ocv)
        return np.concatenate(parts)

    def set_trainable_vector(self, vec: np.ndarray) -> None:
        vec = np.asarray(vec, dtype=np.float64)
        if vec.shape != (self.n_trainable,):
            raise ValueError(f"expected {self.n_trainable} trainables, got {vec.shape}")
        n = self.net.N_PARAMS
        self.net.theta = np.ascontiguousarray(vec[:n])
        self.eta_raw = float(vec[n])
        if self.train_circuit:
            r0, r1, c1 = np.exp(vec[n + 1 : n + 4])
            self.ecm = EcmParams(vec[n + 4 : n + 10].copy(), r0, r1, c1)


def warm_start(ecm_fit: EcmParams, q_nom: float = DEFAULT_Q_NOM, seed: int = 0,
               train_circuit: bool = True) -> UdeModel:
    """Hybrid model that starts exactly as the identified circuit.

    Circuit parameters are copied verbatim, the correction network gets a
    fresh initialization with a zero output head, and eta starts at 1.
    """
    return UdeModel(ecm_fit.copy(), MlpCorrection(seed=seed),
                    q_nom=q_nom, train_circuit=train_circuit)


def hybrid_rhs(model: UdeModel, state: HybridState, i_amps, temp_c,
               spec: NormalizationSpec):
    """(dV1/dt, dz/dt) at one operating point, physical units in and out."""
    i_n = (i_amps - spec.current_mean) / spec.current_std
    t_n = (temp_c - spec.temp_offset) / spec.temp_scale
    z_n = (state.z - spec.soc_center) / spec.soc_scale
    f = model.net.forward(np.array([state.v1 / V1_SCALE, i_n, z_n, t_n]))
    dv1 = -state.v1 / (model.ecm.r1 * model.ecm.c1) + i_amps / model.ecm.c1 + F_SCALE * float(f)
    dz = -model.eta * i_amps / model.q_nom
    return dv1, dz


def _batch_arrays(windows, spec: NormalizationSpec):
    batch = windows if isinstance(windows, WindowBatch) else stack_windows(list(windows))
    i_norm = np.ascontiguousarray(batch.inputs[..., 0])
    t_norm = np.ascontiguousarray(batch.inputs[..., 1])
    i_phys = np.ascontiguousarray(denormalize(spec, "current", i_norm))
    return batch, i_phys, i_norm, t_norm


def simulate_batch(model: UdeModel, windows, spec: NormalizationSpec,
                   dt: float = DEFAULT_DT):
    """Returns (v, v1, z) arrays of shape (B, L), physical units."""
    batch, i_phys, i_norm, t_norm = _batch_arrays(windows, spec)
    return kernels.ude_simulate(
        model.net.theta, model.ecm.ocv, model.ecm.r0, model.ecm.r1, model.ecm.c1,
        model.eta, model.q_nom, i_phys, i_norm, t_norm, batch.init_soc, dt,
        F_SCALE, V1_SCALE, spec.soc_center, spec.soc_scale,
    )


def ude_simulate(model: UdeModel, window: Window, spec: NormalizationSpec,
                 dt: float = DEFAULT_DT) -> np.ndarray:
    """Predicted voltage trace (volts) for one window."""
    return simulate_batch(model, [window], spec, dt)[0][0]


def ude_loss_and_grad(model: UdeModel, windows, spec: NormalizationSpec,
                      dt: float = DEFAULT_DT):
    """Normalized-voltage MSE and its gradient over the trainable vector.

    The gradient covers theta and eta always, plus (log r0, log r1, log c1,
    OCV coefficients) when the model trains its circuit.
    """
    batch, i_phys, i_norm, t_norm = _batch_arrays(windows, spec)
    loss, _, d_theta, d_ocv, d_r0, d_r1, d_c1, d_eta = kernels.ude_loss_grad(
        model.net.theta, model.ecm.ocv, model.ecm.r0, model.ecm.r1, model.ecm.c1,
        model.eta, model.q_nom, i_phys, i_norm, t_norm, batch.init_soc,
        batch.targets, spec.voltage_mean, spec.voltage_std, dt,
        F_SCALE, V1_SCALE, spec.soc_center, spec.soc_scale,
    )
    s = _sigmoid(model.eta_raw)
    d_eta_raw = d_eta * ETA_SPAN * s * (1.0 - s)
    parts = [d_theta, [d_eta_raw]]
    if model.train_circuit:
        parts.append([d_r0 * model.ecm.r0, d_r1 * model.ecm.r1, d_c1 * model.ecm.c1])
        parts.append(d_ocv)
    return loss, np.concatenate(parts)


def ude_loss(model: UdeModel, windows, spec: NormalizationSpec,
             dt: float = DEFAULT_DT) -> float:
    """Loss only (forward pass, no gradient stashes)."""
    batch, i_phys, i_norm, t_norm = _batch_arrays(windows, spec)
    v, _, _ = kernels.ude_simulate(
        model.net.theta, model.ecm.ocv, model.ecm.r0, model.ecm.r1, model.ecm.c1,
        model.eta, model.q_nom, i_phys, i_norm, t_norm, batch.init_soc, dt,
        F_SCALE, V1_SCALE, spec.soc_center, spec.soc_scale,
    )
    err = (v - spec.voltage_mean) / spec.voltage_std - batch.targets
    return float(np.mean(err * err))
