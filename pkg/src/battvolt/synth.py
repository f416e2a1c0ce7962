"""Synthetic labeled cycles from a known higher-order ground-truth cell.

The generator simulates a 2RC Thevenin cell (exact zero-order-hold branch
updates, not RK4) whose second branch is fast (tau2 ~ 3 s), so a 1RC fit
leaves a structured transient residual for the learned correction to absorb.
Resistances scale with cell temperature, which itself rises mildly under
load.  Emitted cycles use the pipeline's CSV schema, so synthetic and real
data share one ingestion path.
"""

from dataclasses import dataclass, field

import numpy as np

from . import ocv as ocv_mod
from .ecm import EcmParams, simulate_arrays
from .errors import DataError
from .pipeline import CycleRecord

# A plausible NCA-like OCV shape spanning ~3.33 V at z=0 to ~4.15 V at z=1.
DEFAULT_TRUTH_OCV = (3.72, 0.41, 0.02, 0.02, 0.0, -0.02)

PROFILES = ("urban", "aggressive", "highway", "constant")
_PROFILE_ID = {name: k for k, name in enumerate(PROFILES)}

HEAT_GAIN = 0.45   # degC per A^2 of sustained load
HEAT_TAU = 90.0    # seconds, thermal lag


@dataclass
class SynthCellSpec:
    """Ground-truth cell: OCV + R0 + RC branches + thermal resistance scaling."""

    ocv: np.ndarray = field(default_factory=lambda: np.array(DEFAULT_TRUTH_OCV))
    r0: float = 0.0305
    branches: tuple = ((0.0178, 852.3), (0.008, 375.0))
    temp_coeff: float = 0.02   # fractional resistance increase per degC below 25
    capacity: float = 3900.0   # coulombs
    noise_std: float = 0.002   # volts

    def __post_init__(self):
        self.ocv = ocv_mod.validate_coeffs(self.ocv)
        if self.r0 <= 0 or self.capacity <= 0:
            raise DataError("r0 and capacity must be positive")
        if len(self.branches) < 1:
            raise DataError("at least one RC branch required")
        for r_i, c_i in self.branches:
            if r_i < 0 or c_i <= 0:
                raise DataError("branch resistances must be >= 0 and capacitances > 0")


def _segment_profile(rng, n, dt, seg_lo, seg_hi, draw_level, smooth_s):
    """Band-limited random telegraph: piecewise levels + moving-average ramps."""
    levels = np.empty(n)
    k = 0
    while k < n:
        seg = int(rng.uniform(seg_lo, seg_hi) / dt)
        levels[k : k + seg] = draw_level(rng)
        k += seg
    win = max(1, int(smooth_s / dt))
    padded = np.concatenate((np.full(win - 1, levels[0]), levels))
    kernel = np.full(win, 1.0 / win)
    return np.convolve(padded, kernel, mode="valid")


def _urban_level(rng):
    u = rng.uniform()
    if u < 0.15:
        return 0.0
    if u < 0.27:
        return rng.uniform(-1.5, -0.4)
    return rng.uniform(1.2, 5.5)


def _aggressive_level(rng):
    u = rng.uniform()
    if u < 0.10:
        return 0.0
    if u < 0.28:
        return rng.uniform(-2.5, -0.5)
    return rng.uniform(1.0, 7.0)


def _highway_level(rng):
    u = rng.uniform()
    if u < 0.06:
        return rng.uniform(-1.0, -0.2)
    if u < 0.22:
        return rng.uniform(5.0, 6.5)
    return rng.uniform(2.8, 4.8)


def synth_current(profile: str, n: int, dt: float, rng) -> np.ndarray:
    if profile == "constant":
        return np.ones(n)
    if profile == "urban":
        return _segment_profile(rng, n, dt, 5.0, 20.0, _urban_level, 2.0)
    if profile == "aggressive":
        return _segment_profile(rng, n, dt, 2.0, 8.0, _aggressive_level, 0.8)
    if profile == "highway":
        return _segment_profile(rng, n, dt, 20.0, 60.0, _highway_level, 5.0)
    raise DataError(f"unknown profile {profile!r}, expected one of {PROFILES}")


def _cell_temperature(i: np.ndarray, ambient: float, dt: float) -> np.ndarray:
    temp = np.empty_like(i)
    temp[0] = ambient
    alpha = dt / HEAT_TAU
    for k in range(i.size - 1):
        target = ambient + HEAT_GAIN * i[k] * i[k]
        temp[k + 1] = temp[k] + alpha * (target - temp[k])
    return temp


def _truth_states(spec: SynthCellSpec, i: np.ndarray, temp: np.ndarray, dt: float,
                  soc0: float):
    """Noiseless terminal voltage and true SOC of the ground-truth cell.

    Branch voltages advance by the exact zero-order-hold solution with
    per-step temperature-scaled resistances; SOC counts coulombs against the
    true capacity (clamped to [0, 1] for the OCV evaluation only).
    """
    n = i.size
    scale = 1.0 + spec.temp_coeff * (25.0 - temp)
    z = np.empty(n)
    z[0] = soc0
    np.cumsum(i[:-1], out=z[1:])
    z[1:] = soc0 - z[1:] * dt / spec.capacity
    drop = spec.r0 * scale * i
    for r_i, c_i in spec.branches:
        if r_i == 0.0:
            continue
        v = 0.0
        vb = np.empty(n)
        vb[0] = 0.0
        for k in range(n - 1):
            rk = r_i * scale[k]
            a = np.exp(-dt / (rk * c_i))
            v = a * v + rk * (1.0 - a) * i[k]
            vb[k + 1] = v
        drop = drop + vb
    voltage = ocv_mod.ocv_eval(spec.ocv, np.clip(z, 0.0, 1.0)) - drop
    return voltage, z


def synth_cycle(spec: SynthCellSpec, profile: str, duration: float, ambient: float,
                seed: int, dt: float = 0.1, soc0: float = 1.0,
                name: str | None = None) -> CycleRecord:
    """One seeded synthetic drive cycle at the given ambient temperature.

    The ampere-hour channel comes from trapezoidal integration of the
    current (cumulative, <= 0 during discharge); the derived SOC is left
    unset so synthetic cycles run through the same pipeline as real ones.
    """
    if duration < 10.0:
        raise DataError("duration must be at least 10 s")
    n = int(round(duration / dt)) + 1
    rng = np.random.default_rng([seed, _PROFILE_ID.get(profile, len(PROFILES))])
    i = synth_current(profile, n, dt, rng)
    temp = _cell_temperature(i, ambient, dt)
    voltage, _ = _truth_states(spec, i, temp, dt, soc0)
    if spec.noise_std > 0:
        voltage = voltage + rng.normal(0.0, spec.noise_std, size=n)
    ah = np.empty(n)
    ah[0] = 0.0
    np.cumsum(0.5 * (i[:-1] + i[1:]), out=ah[1:])
    ah[1:] *= -dt / 3600.0
    return CycleRecord(
        name=name or f"synth-{profile}-{ambient:g}C-s{seed}",
        dt=dt,
        t=np.arange(n) * dt,
        current=i,
        voltage=voltage,
        temp=temp,
        ah=ah,
    )


def write_cycle_csv(cycle: CycleRecord, path) -> None:
    """Emit the pipeline's CSV schema (t,current,voltage,temp,ah)."""
    with open(path, "w") as fh:
        fh.write("t,current,voltage,temp,ah\n")
        for k in range(len(cycle)):
            fh.write(f"{cycle.t[k]:.17g},{cycle.current[k]:.17g},{cycle.voltage[k]:.17g},"
                     f"{cycle.temp[k]:.17g},{cycle.ah[k]:.17g}\n")


def ground_truth_residual(spec: SynthCellSpec, fitted: EcmParams, cycle: CycleRecord,
                          soc0: float = 1.0) -> np.ndarray:
    """Noiseless truth minus the best 1RC simulation, per sample in volts.

    Bounds the improvement any correction of the 1RC polarization can reach
    on this cycle.  The 1RC side consumes the cycle's derived SOC channel,
    matching how the circuit baseline is evaluated.
    """
    if cycle.soc is None:
        raise DataError("derive_soc must run before computing the residual")
    truth, _ = _truth_states(spec, cycle.current, cycle.temp, cycle.dt, soc0)
    v_1rc = simulate_arrays(fitted, cycle.current[None], cycle.soc[None], cycle.dt)[0]
    return truth - v_1rc
