"""End-to-end experiment orchestration on synthetic or ingested cycles.

Four settings share one source dataset: (1) matched-condition prediction
with multi-seed training, (2) inference-time SOC-noise sensitivity using the
best checkpoints, (3) zero-shot transfer to colder ambients with the same
current profile, and (4) zero-shot transfer to different drive-profile
archetypes at the source temperature.  Transfer always reuses the source
normalization and the source-trained checkpoints, with no adaptation.
"""

import math
from dataclasses import dataclass, field, replace

import numpy as np

from .ecm import EcmParams, FitReport, ecm_identify
from .errors import ConfigError, DataError
from .evaluate import (AggregateMetrics, MetricsReport, PerturbationReport,
                       aggregate_metrics, evaluate_matched, evaluate_transfer, perturb_soc)
from .pipeline import (CycleRecord, NormalizationSpec, SplitSpec, derive_soc,
                       fit_normalization, load_cycle_csv, make_windows, temporal_split,
                       window_count)
from .synth import SynthCellSpec, synth_cycle
from .trainer import Checkpoint, SeedResult, TrainConfig, run_seeds

MODELS = ("ecm", "lstm", "ude")


@dataclass(frozen=True)
class SynthDataConfig:
    """Everything needed to regenerate the synthetic campaign deterministically."""

    profile: str = "urban"
    duration: float = 2700.0
    ambient: float = 25.0
    data_seed: int = 123
    length: int = 1024
    stride: int = 512
    dt: float = 0.1
    train_fraction: float = 0.8
    capacity: float = 6840.0
    noise_std: float = 0.002
    r2: float = 0.02
    c2: float = 150.0
    temp_coeff: float = 0.02
    temp_targets: tuple = (10.0, 0.0)
    profile_targets: tuple = (("aggressive", 1200.0, 7), ("highway", 1500.0, 8))
    sigma_levels: tuple = (0.01, 0.02, 0.05)
    draws: int = 5
    noise_seed: int = 2024

    def cell(self) -> SynthCellSpec:
        return SynthCellSpec(
            branches=((0.0178, 852.3), (self.r2, self.c2)),
            capacity=self.capacity,
            noise_std=self.noise_std,
            temp_coeff=self.temp_coeff,
        )


@dataclass
class SourceData:
    cycle: CycleRecord
    spec: NormalizationSpec
    windows: list
    train_windows: list
    val_windows: list
    split: SplitSpec


def prepare_source(cycle: CycleRecord, length: int, stride: int,
                   train_fraction: float = 0.8) -> SourceData:
    """Derive SOC, fit normalization on the training raw range, window, split.

    The normalization's empirical statistics come from exactly the raw
    samples the post-guard training windows cover.
    """
    if cycle.soc is None:
        cycle = derive_soc(cycle)
    n_w = window_count(len(cycle), length, stride)
    split = SplitSpec.for_windows(length, stride, train_fraction)
    n_train = int(math.floor(split.train_fraction * n_w))
    keep = n_train - split.guard_windows
    if keep < 1 or n_train >= n_w:
        raise DataError(f"cycle too short for an {train_fraction:.0%} split of {n_w} windows")
    train_hi = (keep - 1) * stride + length
    spec = fit_normalization(cycle, (0, train_hi))
    windows = make_windows(cycle, spec, length, stride)
    train_windows, val_windows = temporal_split(windows, split)
    return SourceData(cycle, spec, windows, train_windows, val_windows, split)


def build_synthetic_source(cfg: SynthDataConfig) -> SourceData:
    cycle = synth_cycle(cfg.cell(), cfg.profile, cfg.duration, cfg.ambient, cfg.data_seed,
                        dt=cfg.dt)
    return prepare_source(cycle, cfg.length, cfg.stride, cfg.train_fraction)


def load_csv_source(path, length: int, stride: int, dt: float = 0.1,
                    train_fraction: float = 0.8) -> SourceData:
    return prepare_source(load_cycle_csv(path, dt), length, stride, train_fraction)


def best_checkpoint(results: dict[int, SeedResult]) -> Checkpoint:
    """Lowest validation loss; ties break toward the smallest seed."""
    best = None
    for seed in sorted(results):
        res = results[seed]
        if res.checkpoint is None:
            continue
        if best is None or res.checkpoint.val_loss < best.val_loss:
            best = res.checkpoint
    if best is None:
        raise ConfigError("no successful training run to select a checkpoint from")
    return best


@dataclass
class MatchedResult:
    """Experiment 1 outputs: fit, per-seed checkpoints, matched metrics."""

    source: SourceData
    ecm_fit: FitReport
    seed_results: dict                  # kind -> {seed: SeedResult}
    matched_reports: dict               # kind -> {key: MetricsReport}
    matched_aggregate: dict             # kind -> AggregateMetrics
    best: dict                          # kind -> Checkpoint
    q_nom: float

    def ecm_params(self) -> EcmParams:
        return self.ecm_fit.params

    def model_for(self, kind: str):
        if kind == "ecm":
            return self.ecm_params()
        return self.best[kind]

    def matched_mae(self, kind: str) -> float:
        """Matched-condition MAE of the model used in transfer/perturbation."""
        if kind == "ecm":
            return self.matched_reports["ecm"]["ecm"].mae
        best_seed = self.best[kind].config.seed
        return self.matched_reports[kind][best_seed].mae


def run_matched_experiment(source: SourceData, seeds, q_nom: float,
                           lstm_config: TrainConfig | None = None,
                           ude_config: TrainConfig | None = None,
                           train_circuit: bool = True) -> MatchedResult:
    """Identify the circuit, train both learners over seeds, evaluate matched."""
    seeds = list(seeds)
    ecm_fit = ecm_identify(source.train_windows, source.spec)
    lstm_config = lstm_config or TrainConfig.lstm_default()
    ude_config = ude_config or TrainConfig.ude_default()

    seed_results = {
        "lstm": run_seeds("lstm", source.train_windows, source.val_windows,
                          lstm_config, seeds, source.spec),
        "ude": run_seeds("ude", source.train_windows, source.val_windows,
                         ude_config, seeds, source.spec, ecm_params=ecm_fit.params,
                         q_nom=q_nom, train_circuit=train_circuit),
    }

    matched_reports = {}
    matched_aggregate = {}
    best = {}
    reports, agg = evaluate_matched({"ecm": ecm_fit.params}, source.val_windows, source.spec)
    matched_reports["ecm"] = reports
    matched_aggregate["ecm"] = agg
    for kind in ("lstm", "ude"):
        ckpts = {seed: res.checkpoint for seed, res in seed_results[kind].items()
                 if res.checkpoint is not None}
        if not ckpts:
            raise ConfigError(f"all {kind} seeds failed")
        reports, agg = evaluate_matched(ckpts, source.val_windows, source.spec)
        matched_reports[kind] = reports
        matched_aggregate[kind] = agg
        best[kind] = best_checkpoint(seed_results[kind])

    return MatchedResult(source, ecm_fit, seed_results, matched_reports,
                         matched_aggregate, best, q_nom)


def run_perturbation_experiment(matched: MatchedResult, sigma_levels=(0.01, 0.02, 0.05),
                                draws: int = 5, noise_seed: int = 2024) -> dict:
    """SOC-noise sensitivity per model: sigma 0 plus each requested level."""
    out: dict[str, list[PerturbationReport]] = {}
    for kind in MODELS:
        model = matched.model_for(kind)
        rows = [perturb_soc(model, matched.source.val_windows, matched.source.spec, 0.0)]
        for sigma in sigma_levels:
            rows.append(perturb_soc(model, matched.source.val_windows, matched.source.spec,
                                    sigma, draws=draws, seed=noise_seed))
        out[kind] = rows
    return out


def run_transfer_experiment(matched: MatchedResult, targets: dict[str, CycleRecord],
                            length: int | None = None) -> dict:
    """Zero-shot cycle-level evaluation on each target, all three models."""
    length = length or matched.source.windows[0].length
    out: dict[str, dict[str, MetricsReport]] = {}
    for label, cycle in targets.items():
        if cycle.soc is None:
            cycle = derive_soc(cycle)
        out[label] = {
            kind: evaluate_transfer(matched.model_for(kind), cycle, matched.source.spec,
                                    length=length, condition=label)
            for kind in MODELS
        }
    return out


def synthetic_temp_targets(cfg: SynthDataConfig) -> dict[str, CycleRecord]:
    """Same profile seed (same current trace), colder ambient temperatures."""
    cell = cfg.cell()
    return {
        f"{cfg.profile}-{ambient:g}C": synth_cycle(cell, cfg.profile, cfg.duration,
                                                   ambient, cfg.data_seed, dt=cfg.dt)
        for ambient in cfg.temp_targets
    }


def synthetic_profile_targets(cfg: SynthDataConfig) -> dict[str, CycleRecord]:
    """Different drive archetypes at the source ambient temperature."""
    cell = cfg.cell()
    return {
        f"{profile}-{cfg.ambient:g}C": synth_cycle(cell, profile, duration,
                                                   cfg.ambient, cfg.data_seed + seed_offset,
                                                   dt=cfg.dt)
        for profile, duration, seed_offset in cfg.profile_targets
    }


# ---------------------------------------------------------------------------
# Row assembly for the CSV exports (evaluate.write_report_csv / summary)
# ---------------------------------------------------------------------------

def matched_report_rows(matched: MatchedResult, condition: str) -> list:
    rows = []
    rep = matched.matched_reports["ecm"]["ecm"]
    rows.append(("1", condition, "ecm", "det", rep.mae, rep.p99))
    for kind in ("lstm", "ude"):
        for seed in sorted(matched.matched_reports[kind]):
            rep = matched.matched_reports[kind][seed]
            rows.append(("1", condition, kind, str(seed), rep.mae, rep.p99))
    return rows


def matched_summary_rows(matched: MatchedResult, condition: str) -> list:
    return [("1", condition, kind, matched.matched_aggregate[kind]) for kind in MODELS]


def perturbation_rows(perturb: dict) -> tuple[list, list]:
    """(report rows, summary rows) across models and noise levels."""
    report_rows = []
    summary_rows = []
    for kind in MODELS:
        for rep in perturb[kind]:
            cond = f"sigma_z={rep.sigma_z:g}"
            for draw, mae in enumerate(rep.mae_values):
                report_rows.append(("2", cond, kind, str(draw), mae, float("nan")))
            agg = AggregateMetrics(rep.mae_mean, rep.mae_std, float("nan"), float("nan"),
                                   len(rep.mae_values))
            summary_rows.append(("2", cond, kind, agg))
    return report_rows, summary_rows


def transfer_rows(transfer: dict, experiment: str) -> tuple[list, list]:
    report_rows = []
    summary_rows = []
    for label in transfer:
        for kind in MODELS:
            rep = transfer[label][kind]
            report_rows.append((experiment, label, kind, "det", rep.mae, rep.p99))
            summary_rows.append((experiment, label, kind, aggregate_metrics([rep])))
    return report_rows, summary_rows
