"""Data pipeline: cycle ingestion, SOC derivation, normalization, windowing.

A drive cycle arrives as a CSV with columns t, current, voltage, temp, ah
(units s, A, V, degC, Ah; current positive during discharge; ah cumulative
and <= 0 while discharging).  The pipeline derives a cycle-relative SOC from
the ampere-hour trace, segments the cycle into overlapping windows, and
normalizes with a mixed scheme: empirical z-scores for current/voltage
(training range only), fixed physically-motivated constants for temperature
and SOC.  All operations are pure transforms on immutable inputs.
"""

import csv
import math
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from .errors import DataError

CSV_COLUMNS = ("t", "current", "voltage", "temp", "ah")

# Fixed normalization constants for the bounded state channels.  These are
# never refitted on a target domain: 25 degC maps to 1.0, -20 degC to -0.8,
# and SOC is centered at 0.5 with scale 0.3.
TEMP_OFFSET = 0.0
TEMP_SCALE = 25.0
SOC_CENTER = 0.5
SOC_SCALE = 0.3

TIME_TOLERANCE = 1e-6  # seconds; max deviation from uniform sampling


@dataclass
class CycleRecord:
    """One drive cycle's uniformly sampled signals plus the derived SOC."""

    name: str
    dt: float
    t: np.ndarray
    current: np.ndarray
    voltage: np.ndarray
    temp: np.ndarray
    ah: np.ndarray
    soc: np.ndarray | None = None

    def __len__(self) -> int:
        return len(self.t)


@dataclass(frozen=True)
class NormalizationSpec:
    current_mean: float
    current_std: float
    voltage_mean: float
    voltage_std: float
    temp_offset: float = TEMP_OFFSET
    temp_scale: float = TEMP_SCALE
    soc_center: float = SOC_CENTER
    soc_scale: float = SOC_SCALE

    def __post_init__(self):
        if not (self.current_std > 0 and self.voltage_std > 0):
            raise DataError("normalization requires positive current/voltage std")
        if not (self.temp_scale > 0 and self.soc_scale > 0):
            raise DataError("temp_scale and soc_scale must be positive")


@dataclass(frozen=True)
class Window:
    """A length-L slice of normalized inputs with raw-index provenance.

    inputs columns are (current, temp, soc), all normalized; target is the
    normalized voltage; init_soc is the physical SOC at start_index so a
    state-space model can initialize without re-touching the raw cycle.
    """

    start_index: int
    length: int
    inputs: np.ndarray   # (L, 3)
    target: np.ndarray   # (L,)
    init_soc: float


@dataclass(frozen=True)
class SplitSpec:
    train_fraction: float = 0.8
    guard_windows: int = 0

    def __post_init__(self):
        if not (0.0 < self.train_fraction < 1.0):
            raise DataError("train_fraction must lie in (0, 1)")
        if self.guard_windows < 0:
            raise DataError("guard_windows must be >= 0")

    @staticmethod
    def for_windows(length: int, stride: int, train_fraction: float = 0.8) -> "SplitSpec":
        """Guard band of ceil(L/S) - 1 windows keeps raw samples disjoint."""
        return SplitSpec(train_fraction, math.ceil(length / stride) - 1)


def load_cycle_csv(path, dt: float = 0.1, name: str | None = None) -> CycleRecord:
    """Read one cycle CSV and validate uniform sampling.

    Raises DataError naming the missing column, the first non-numeric cell,
    or the first row whose timestamp breaks uniform dt spacing beyond
    1e-6 s.  The derived SOC is left unset; call derive_soc afterwards.
    """
    path = Path(path)
    if not path.exists():
        raise DataError(f"cycle file not found: {path}")
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = [h.strip() for h in next(reader)]
        except StopIteration:
            raise DataError(f"{path}: empty file") from None
        missing = [c for c in CSV_COLUMNS if c not in header]
        if missing:
            raise DataError(f"{path}: missing column(s) {', '.join(missing)}")
        idx = {c: header.index(c) for c in CSV_COLUMNS}
        cols = {c: [] for c in CSV_COLUMNS}
        for row_i, row in enumerate(reader):
            if not row:
                continue
            for c in CSV_COLUMNS:
                cell = row[idx[c]]
                try:
                    cols[c].append(float(cell))
                except (ValueError, IndexError):
                    raise DataError(
                        f"{path}: non-numeric value {cell!r} in column {c} at row {row_i}"
                    ) from None
    arrays = {c: np.asarray(v, dtype=np.float64) for c, v in cols.items()}
    n = len(arrays["t"])
    if n < 2:
        raise DataError(f"{path}: cycle must contain at least 2 samples, got {n}")
    steps = np.diff(arrays["t"])
    bad = np.nonzero(np.abs(steps - dt) > TIME_TOLERANCE)[0]
    if bad.size:
        raise DataError(f"{path}: non-uniform sampling at row {bad[0] + 1}")
    return CycleRecord(
        name=name or path.stem,
        dt=dt,
        t=arrays["t"],
        current=arrays["current"],
        voltage=arrays["voltage"],
        temp=arrays["temp"],
        ah=arrays["ah"],
    )


def derive_soc(cycle: CycleRecord) -> CycleRecord:
    """Cycle-relative SOC: z = (Ah + b)/b with b = -min(Ah), clipped to [0, 1].

    z is 1.0 where ah is 0 (start of discharge) and 0.0 at the cycle's
    deepest discharge point; it is a per-cycle proxy, not an absolute
    electrochemical state.
    """
    b = -np.min(cycle.ah)
    if not b > 0:
        raise DataError(f"{cycle.name}: no discharge in cycle (min ah = {-b:g})")
    z = np.clip((cycle.ah + b) / b, 0.0, 1.0)
    return replace(cycle, soc=z)


def fit_normalization(cycle: CycleRecord, train_range: tuple[int, int]) -> NormalizationSpec:
    """Empirical current/voltage stats from the training index range only.

    Temperature and SOC use the fixed constants regardless of the data.
    """
    lo, hi = train_range
    if not (0 <= lo < hi <= len(cycle)):
        raise DataError(f"empty or out-of-range train_range {train_range}")
    i_tr = cycle.current[lo:hi]
    v_tr = cycle.voltage[lo:hi]
    i_std = float(np.std(i_tr))
    v_std = float(np.std(v_tr))
    if i_std == 0.0 or v_std == 0.0:
        raise DataError("degenerate signal: zero variance in current or voltage over train range")
    return NormalizationSpec(
        current_mean=float(np.mean(i_tr)),
        current_std=i_std,
        voltage_mean=float(np.mean(v_tr)),
        voltage_std=v_std,
    )


_CHANNELS = ("current", "voltage", "temp", "soc")


def _shift_scale(spec: NormalizationSpec, channel: str) -> tuple[float, float]:
    if channel == "current":
        return spec.current_mean, spec.current_std
    if channel == "voltage":
        return spec.voltage_mean, spec.voltage_std
    if channel == "temp":
        return spec.temp_offset, spec.temp_scale
    if channel == "soc":
        return spec.soc_center, spec.soc_scale
    raise ValueError(f"unknown channel {channel!r}, expected one of {_CHANNELS}")


def normalize(spec: NormalizationSpec, channel: str, x):
    shift, scale = _shift_scale(spec, channel)
    return (np.asarray(x, dtype=np.float64) - shift) / scale


def denormalize(spec: NormalizationSpec, channel: str, x):
    shift, scale = _shift_scale(spec, channel)
    return np.asarray(x, dtype=np.float64) * scale + shift


def window_count(n_samples: int, length: int, stride: int) -> int:
    if not (1 <= stride <= length):
        raise DataError(f"stride must satisfy 1 <= S <= L, got S={stride}, L={length}")
    if length > n_samples:
        raise DataError(f"cycle of {n_samples} samples is shorter than window length {length}")
    return (n_samples - length) // stride + 1


def make_windows(cycle: CycleRecord, spec: NormalizationSpec, length: int, stride: int) -> list[Window]:
    """Overlapping windows of L samples at stride S; window k starts at k*S."""
    if cycle.soc is None:
        raise DataError("derive_soc must run before windowing")
    count = window_count(len(cycle), length, stride)
    i_n = normalize(spec, "current", cycle.current)
    t_n = normalize(spec, "temp", cycle.temp)
    z_n = normalize(spec, "soc", cycle.soc)
    v_n = normalize(spec, "voltage", cycle.voltage)
    windows = []
    for k in range(count):
        s = k * stride
        inputs = np.column_stack((i_n[s : s + length], t_n[s : s + length], z_n[s : s + length]))
        if not (np.all(np.isfinite(inputs)) and np.all(np.isfinite(v_n[s : s + length]))):
            raise DataError(f"non-finite normalized values in window starting at {s}")
        windows.append(
            Window(
                start_index=s,
                length=length,
                inputs=inputs,
                target=v_n[s : s + length].copy(),
                init_soc=float(cycle.soc[s]),
            )
        )
    return windows


def temporal_split(windows: list[Window], split: SplitSpec) -> tuple[list[Window], list[Window]]:
    """Chronological split: first train_fraction of windows train, rest validate.

    The guard band is dropped from the training side of the boundary so the
    validation trajectory stays contiguous, and no raw sample lands in both
    subsets.
    """
    n = len(windows)
    n_train = int(math.floor(split.train_fraction * n))
    keep = n_train - split.guard_windows
    if keep < 1:
        raise DataError(
            f"too few windows ({n}) for split: {n_train} train minus {split.guard_windows} guard"
        )
    if n_train >= n:
        raise DataError(f"too few windows ({n}): validation set would be empty")
    return windows[:keep], windows[n_train:]


def raw_coverage(windows: list[Window]) -> tuple[int, int]:
    """Half-open raw-index interval covered by a chronological window list."""
    if not windows:
        raise DataError("no windows")
    lo = min(w.start_index for w in windows)
    hi = max(w.start_index + w.length for w in windows)
    return lo, hi


@dataclass(frozen=True)
class WindowBatch:
    """Windows stacked into arrays for batched model evaluation."""

    inputs: np.ndarray    # (B, L, 3) normalized (current, temp, soc)
    targets: np.ndarray   # (B, L) normalized voltage
    init_soc: np.ndarray  # (B,) physical
    starts: np.ndarray    # (B,) raw indices

    def __len__(self) -> int:
        return self.inputs.shape[0]

    def subset(self, idx) -> "WindowBatch":
        idx = np.asarray(idx)
        return WindowBatch(self.inputs[idx], self.targets[idx], self.init_soc[idx], self.starts[idx])


def stack_windows(windows: list[Window]) -> WindowBatch:
    if not windows:
        raise DataError("no windows to stack")
    return WindowBatch(
        inputs=np.stack([w.inputs for w in windows]),
        targets=np.stack([w.target for w in windows]),
        init_soc=np.array([w.init_soc for w in windows], dtype=np.float64),
        starts=np.array([w.start_index for w in windows], dtype=np.int64),
    )


def save_normalization(spec: NormalizationSpec, path) -> None:
    fields = (
        ("current_mean", spec.current_mean),
        ("current_std", spec.current_std),
        ("voltage_mean", spec.voltage_mean),
        ("voltage_std", spec.voltage_std),
        ("temp_offset", spec.temp_offset),
        ("temp_scale", spec.temp_scale),
        ("soc_center", spec.soc_center),
        ("soc_scale", spec.soc_scale),
    )
    with open(path, "w") as fh:
        for key, value in fields:
            fh.write(f"{key}={value:.10g}\n")


def load_normalization(path) -> NormalizationSpec:
    values = {}
    with open(path) as fh:
        for line in fh:
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            key, _, raw = line.partition("=")
            values[key.strip()] = float(raw)
    try:
        return NormalizationSpec(**values)
    except TypeError as exc:
        raise DataError(f"bad normalization file {path}: {exc}") from None
