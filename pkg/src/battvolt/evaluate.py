"""Evaluation: overlap-averaged reconstruction, error metrics, zero-shot
transfer, SOC-noise perturbation, and paired statistics across seeds.

All voltage metrics are computed in physical volts.  Matched-condition
evaluation reconstructs window predictions onto the raw timeline by overlap
averaging so each raw sample counts once; transfer evaluation concatenates
window predictions at the cycle level (windows built with the SOURCE
normalization, stride defaulting to the window length so samples are not
double counted).
"""

import csv
import dataclasses
from dataclasses import dataclass

import numpy as np
from scipy.special import ndtr
from scipy.stats import rankdata

from .ecm import DEFAULT_DT, EcmParams, simulate_arrays
from .errors import DataError
from .nn import LstmBaseline
from .pipeline import (CycleRecord, NormalizationSpec, Window, WindowBatch, denormalize,
                       make_windows, normalize, stack_windows)
from .trainer import Checkpoint, rebuild_model
from .ude import UdeModel, simulate_batch


@dataclass
class MetricsReport:
    mae: float       # volts
    p99: float       # volts
    n_samples: int
    condition: str = ""

    def __post_init__(self):
        if self.mae < 0 or self.p99 < 0:
            raise DataError("error metrics cannot be negative")


@dataclass
class AggregateMetrics:
    mae_mean: float
    mae_std: float
    p99_mean: float
    p99_std: float
    n_runs: int


@dataclass
class PairedStats:
    w_statistic: float
    p_value: float
    cohens_d: float
    cv_a: float              # percent
    cv_b: float              # percent
    mean_rel_reduction: float  # percent, of a relative to b


@dataclass
class PerturbationReport:
    sigma_z: float
    mae_values: list
    mae_mean: float
    mae_std: float


def reconstruct(preds, starts, n_samples: int):
    """Overlap-average window predictions onto the raw timeline.

    Returns (values, counts); uncovered indices carry NaN and count 0.
    """
    preds = np.asarray(preds, dtype=np.float64)
    values = np.zeros(n_samples)
    counts = np.zeros(n_samples, dtype=np.int64)
    for pred, s in zip(preds, np.asarray(starts, dtype=np.int64)):
        values[s : s + pred.shape[0]] += pred
        counts[s : s + pred.shape[0]] += 1
    covered = counts > 0
    out = np.full(n_samples, np.nan)
    out[covered] = values[covered] / counts[covered]
    return out, counts


def compute_metrics(pred, meas, condition: str = "") -> MetricsReport:
    """MAE and 99th-percentile absolute error (linear interpolation)."""
    pred = np.asarray(pred, dtype=np.float64)
    meas = np.asarray(meas, dtype=np.float64)
    if pred.shape != meas.shape:
        raise DataError(f"length mismatch: {pred.shape} vs {meas.shape}")
    if pred.size == 0:
        raise DataError("metrics need at least one sample")
    err = np.abs(pred - meas)
    return MetricsReport(
        mae=float(np.mean(err)),
        p99=float(np.percentile(err, 99, method="linear")),
        n_samples=int(err.size),
        condition=condition,
    )


def predict_windows(model, windows, spec: NormalizationSpec, dt: float = DEFAULT_DT) -> np.ndarray:
    """Per-window voltage predictions (B, L) in physical volts.

    Accepts an EcmParams, LstmBaseline, UdeModel, or a Checkpoint (which is
    rebuilt first).
    """
    if isinstance(model, Checkpoint):
        model = rebuild_model(model)
    batch = windows if isinstance(windows, WindowBatch) else stack_windows(list(windows))
    if isinstance(model, EcmParams):
        i_phys = denormalize(spec, "current", batch.inputs[..., 0])
        z_phys = denormalize(spec, "soc", batch.inputs[..., 2])
        return simulate_arrays(model, i_phys, z_phys, dt)
    if isinstance(model, LstmBaseline):
        return denormalize(spec, "voltage", model.forward_batch(batch.inputs))
    if isinstance(model, UdeModel):
        return simulate_batch(model, batch, spec, dt)[0]
    raise DataError(f"cannot predict with object of type {type(model).__name__}")


def _reconstructed_metrics(model, batch: WindowBatch, spec, condition, dt) -> MetricsReport:
    n = int(np.max(batch.starts) + batch.inputs.shape[1])
    meas, counts = reconstruct(denormalize(spec, "voltage", batch.targets), batch.starts, n)
    preds = predict_windows(model, batch, spec, dt)
    rec, _ = reconstruct(preds, batch.starts, n)
    covered = counts > 0
    return compute_metrics(rec[covered], meas[covered], condition)


def aggregate_metrics(reports) -> AggregateMetrics:
    maes = np.array([r.mae for r in reports])
    p99s = np.array([r.p99 for r in reports])
    if maes.size == 0:
        raise DataError("no reports to aggregate")
    ddof = 1 if maes.size > 1 else 0
    return AggregateMetrics(
        mae_mean=float(maes.mean()), mae_std=float(maes.std(ddof=ddof)),
        p99_mean=float(p99s.mean()), p99_std=float(p99s.std(ddof=ddof)),
        n_runs=int(maes.size),
    )


def evaluate_matched(models: dict, val_windows, spec: NormalizationSpec,
                     condition: str = "matched", dt: float = DEFAULT_DT):
    """Overlap-averaged reconstruction metrics per model/seed plus aggregate.

    `models` maps a key (seed or label) to a model or checkpoint; the
    aggregate summarizes the per-key MAE/P99 distribution.
    """
    batch = val_windows if isinstance(val_windows, WindowBatch) else stack_windows(list(val_windows))
    reports = {
        key: _reconstructed_metrics(model, batch, spec, condition, dt)
        for key, model in models.items()
    }
    return reports, aggregate_metrics(reports.values())


def evaluate_transfer(model, target_cycle: CycleRecord, source_spec: NormalizationSpec,
                      length: int = 1024, stride: int | None = None,
                      condition: str = "transfer", dt: float = DEFAULT_DT) -> MetricsReport:
    """Zero-shot cycle-level evaluation under source-domain normalization.

    The target cycle is windowed with the source spec (stride defaults to
    the window length) and metrics come from the concatenated window
    predictions and targets, without overlap averaging.
    """
    if target_cycle.soc is None:
        raise DataError("target cycle needs derive_soc before transfer evaluation")
    stride = length if stride is None else stride
    windows = make_windows(target_cycle, source_spec, length, stride)
    batch = stack_windows(windows)
    preds = predict_windows(model, batch, source_spec, dt)
    meas = denormalize(source_spec, "voltage", batch.targets)
    return compute_metrics(preds.reshape(-1), meas.reshape(-1), condition)


def perturb_soc(model, val_windows, spec: NormalizationSpec, sigma_z: float,
                draws: int = 5, seed: int = 0, condition: str = "",
                dt: float = DEFAULT_DT) -> PerturbationReport:
    """Inference-time Gaussian noise on the SOC input channel.

    Noise is drawn i.i.d. per raw sample (shared across overlapping
    windows), applied in physical z units, clipped to [0, 1], and
    renormalized with the source spec; each window's initial SOC follows its
    perturbed first sample.  sigma_z = 0 bypasses sampling entirely.
    """
    if sigma_z < 0:
        raise DataError("sigma_z must be >= 0")
    windows = list(val_windows)
    batch = stack_windows(windows)
    label = condition or f"sigma_z={sigma_z:g}"
    if sigma_z == 0.0:
        report = _reconstructed_metrics(model, batch, spec, label, dt)
        return PerturbationReport(0.0, [report.mae], report.mae, 0.0)
    if draws < 1:
        raise DataError("draws must be >= 1 for sigma_z > 0")
    lo = int(np.min(batch.starts))
    hi = int(np.max(batch.starts)) + batch.inputs.shape[1]
    maes = []
    for draw in range(draws):
        rng = np.random.default_rng([seed, draw])
        noise = rng.normal(0.0, sigma_z, size=hi - lo)
        perturbed = []
        for w in windows:
            z_phys = denormalize(spec, "soc", w.inputs[:, 2])
            z_new = np.clip(z_phys + noise[w.start_index - lo : w.start_index - lo + w.length],
                            0.0, 1.0)
            inputs = w.inputs.copy()
            inputs[:, 2] = normalize(spec, "soc", z_new)
            perturbed.append(dataclasses.replace(w, inputs=inputs, init_soc=float(z_new[0])))
        report = _reconstructed_metrics(model, stack_windows(perturbed), spec, label, dt)
        maes.append(report.mae)
    arr = np.array(maes)
    std = float(arr.std(ddof=1)) if arr.size > 1 else 0.0
    return PerturbationReport(sigma_z, maes, float(arr.mean()), std)


# ---------------------------------------------------------------------------
# Paired statistics over seeds
# ---------------------------------------------------------------------------

def _exact_two_sided_p(ranks: np.ndarray, w: float) -> float:
    """Exact signed-rank p by dynamic programming over the rank multiset.

    Ranks are doubled so average ranks from ties stay integral; counts stay
    below 2^53 for n <= 50, hence exact in float64.
    """
    r2 = np.rint(2.0 * ranks).astype(np.int64)
    total = int(r2.sum())
    counts = np.zeros(total + 1)
    counts[0] = 1.0
    for r in r2:
        counts[r:] = counts[r:] + counts[: total + 1 - r]
    w2 = int(round(2.0 * w))
    denom = 2.0 ** len(r2)
    p_low = counts[: w2 + 1].sum() / denom
    p_high = counts[total - w2 :].sum() / denom
    return min(1.0, p_low + p_high)


def signed_rank_distribution(ranks) -> np.ndarray:
    """Probability mass of the positive rank sum over 2^n sign patterns,
    indexed by doubled rank sum (for tie-averaged half-integer ranks)."""
    ranks = np.asarray(ranks, dtype=np.float64)
    r2 = np.rint(2.0 * ranks).astype(np.int64)
    total = int(r2.sum())
    counts = np.zeros(total + 1)
    counts[0] = 1.0
    for r in r2:
        counts[r:] = counts[r:] + counts[: total + 1 - r]
    return counts / 2.0 ** len(r2)


EXACT_N_MAX = 50


def wilcoxon_signed_rank(a, b) -> tuple[float, float]:
    """Paired two-sided Wilcoxon signed-rank test.

    W is the smaller of the positive/negative rank sums with zero
    differences dropped; p is exact (dynamic programming) for n <= 50 and a
    normal approximation with continuity correction above.
    """
    d = np.asarray(a, dtype=np.float64) - np.asarray(b, dtype=np.float64)
    if d.ndim != 1 or d.size == 0:
        raise DataError("paired samples of equal nonzero length required")
    d = d[d != 0.0]
    n = d.size
    if n == 0:
        raise DataError("all differences are zero: signed-rank test undefined")
    ranks = rankdata(np.abs(d))
    w_plus = float(ranks[d > 0].sum())
    w_minus = float(ranks[d < 0].sum())
    w = min(w_plus, w_minus)
    if n <= EXACT_N_MAX:
        return w, _exact_two_sided_p(ranks, w)
    mu = n * (n + 1) / 4.0
    _, tie_counts = np.unique(ranks, return_counts=True)
    sigma2 = n * (n + 1) * (2 * n + 1) / 24.0 - np.sum(tie_counts**3 - tie_counts) / 48.0
    zstat = (w - mu + 0.5) / np.sqrt(sigma2)
    return w, min(1.0, 2.0 * float(ndtr(zstat)))


def paired_effect_stats(a, b) -> PairedStats:
    """Paired Cohen's d, per-model coefficients of variation, and the mean
    relative MAE reduction of a with respect to b (a is the proposed model)."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape or a.ndim != 1 or a.size < 2:
        raise DataError("paired samples of equal length >= 2 required")
    d = a - b
    sd = float(d.std(ddof=1))
    if sd == 0.0:
        raise DataError("zero variance of paired differences: effect size undefined")
    w, p = wilcoxon_signed_rank(a, b)
    return PairedStats(
        w_statistic=w,
        p_value=p,
        cohens_d=float(d.mean()) / sd,
        cv_a=100.0 * float(a.std(ddof=1)) / float(a.mean()),
        cv_b=100.0 * float(b.std(ddof=1)) / float(b.mean()),
        mean_rel_reduction=100.0 * float(np.mean((b - a) / b)),
    )


# ---------------------------------------------------------------------------
# CSV export
# ---------------------------------------------------------------------------

REPORT_COLUMNS = ("experiment", "condition", "model", "seed_or_draw", "mae_mV", "p99_mV")


def write_report_csv(rows, path) -> None:
    """Rows of (experiment, condition, model, seed_or_draw, mae_V, p99_V)."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(REPORT_COLUMNS)
        for exp, cond, model, key, mae, p99 in rows:
            writer.writerow([exp, cond, model, key, f"{1e3 * mae:.6f}", f"{1e3 * p99:.6f}"])


SUMMARY_COLUMNS = ("experiment", "condition", "model", "mae_mV_mean", "mae_mV_std",
                   "p99_mV_mean", "p99_mV_std", "n_runs")


def write_summary_csv(rows, path) -> None:
    """Consolidated per-condition table: one row per (condition, model)."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(SUMMARY_COLUMNS)
        for exp, cond, model, agg in rows:
            writer.writerow([
                exp, cond, model,
                f"{1e3 * agg.mae_mean:.6f}", f"{1e3 * agg.mae_std:.6f}",
                f"{1e3 * agg.p99_mean:.6f}", f"{1e3 * agg.p99_std:.6f}", agg.n_runs,
            ])
