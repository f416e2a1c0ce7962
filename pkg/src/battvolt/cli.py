"""Command-line surface: ingestion, fitting, training, and the four
evaluation settings, with figure-data CSV export.

All commands resolve a flat key=value config (file via --config, overridable
by flags), regenerate data deterministically from it, and write artifacts
under the output directory:

    <out>/config.resolved            resolved config + its hash
    <out>/source/                    normalization, circuit fit
    <out>/exp1/<model>/<seed>/       checkpoints and training logs
    <out>/exp{1,2,3,4}/*.csv         per-setting metric tables
    <out>/stats/paired_stats.csv
    <out>/plots/*.csv                figure data bundles
    <out>/summary.csv                consolidated table

Exit codes: 0 success, 2 config error, 3 data error, 4 numerical divergence.
"""

import argparse
import dataclasses
import hashlib
import os
import sys
from pathlib import Path

import numpy as np

from . import ecm as ecm_mod
from . import evaluate as ev
from . import experiments as X
from .errors import BattvoltError, ConfigError, DataError, IntegrationDivergedError
from .kernels import ACTIVE_BACKEND
from .pipeline import derive_soc, load_cycle_csv, save_normalization
from .synth import PROFILES, synth_cycle, write_cycle_csv
from .trainer import (Checkpoint, TrainConfig, TrainingDivergedError, load_checkpoint,
                      run_seeds, save_checkpoint)

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_DATA = 3
EXIT_NUMERIC = 4

ENV_OUT = "BATTVOLT_OUT"

_CONFIG_DEFAULTS = {
    "out": "",
    "experiment": "1",
    "model": "ude",
    "seeds": "0,1,2,3,4",
    "source_csv": "",
    "profile": "urban",
    "duration": "2700",
    "ambient": "25",
    "data_seed": "123",
    "length": "1024",
    "stride": "512",
    "dt": "0.1",
    "train_fraction": "0.8",
    "capacity": "6840",
    "noise_std": "0.002",
    "r2": "0.02",
    "c2": "150",
    "temp_coeff": "0.02",
    "temp_targets": "10,0",
    "profile_targets": "aggressive:1200:7,highway:1500:8",
    "transfer_csv": "",
    "sigma_levels": "0.01,0.02,0.05",
    "draws": "5",
    "noise_seed": "2024",
    "train_circuit": "1",
    "lstm.max_epochs": "120",
    "lstm.peak_lr": "1e-3",
    "lstm.weight_decay": "1e-5",
    "lstm.warmup_epochs": "5",
    "lstm.patience": "25",
    "lstm.clip_norm": "1.0",
    "lstm.batch_size": "16",
    "ude.max_epochs": "30",
    "ude.peak_lr": "2e-4",
    "ude.weight_decay": "1e-5",
    "ude.warmup_epochs": "3",
    "ude.patience": "8",
    "ude.clip_norm": "0.5",
    "ude.batch_size": "16",
}


def _read_config_file(path: Path, seen=None) -> dict:
    """Flat key=value lines; include=path splices another file (depth-first,
    later keys override)."""
    seen = seen or set()
    path = path.resolve()
    if path in seen:
        raise ConfigError(f"config include cycle at {path}")
    seen.add(path)
    if not path.exists():
        raise ConfigError(f"config file not found: {path}")
    values: dict[str, str] = {}
    for ln, line in enumerate(path.read_text().splitlines()):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        key, sep, raw = line.partition("=")
        if not sep:
            raise ConfigError(f"{path}:{ln + 1}: expected key=value, got {line!r}")
        key = key.strip()
        raw = raw.strip()
        if key == "include":
            values.update(_read_config_file((path.parent / raw), seen))
        else:
            values[key] = raw
    return values


def _resolve_config(args) -> dict:
    cfg = dict(_CONFIG_DEFAULTS)
    if args.config:
        file_values = _read_config_file(Path(args.config))
        unknown = set(file_values) - set(cfg)
        if unknown:
            raise ConfigError(f"unknown config keys: {', '.join(sorted(unknown))}")
        cfg.update(file_values)
    for flag in ("out", "model", "seeds", "experiment"):
        val = getattr(args, flag, None)
        if val:
            cfg[flag] = str(val)
    if getattr(args, "seed", None) is not None:
        cfg["seeds"] = str(args.seed)
    if getattr(args, "synthetic", None):
        cfg["source_csv"] = ""
        cfg["profile"] = args.synthetic[0]
        cfg["duration"] = args.synthetic[1]
    if not cfg["out"]:
        cfg["out"] = os.environ.get(ENV_OUT, "")
    if not cfg["out"]:
        raise ConfigError("no output directory: pass --out, set out= in the config, "
                          f"or export {ENV_OUT}")
    return cfg


def _config_hash(cfg: dict) -> str:
    canon = "\n".join(f"{k}={cfg[k]}" for k in sorted(cfg))
    return hashlib.sha256(canon.encode()).hexdigest()[:16]


def _write_resolved(cfg: dict, out: Path) -> None:
    out.mkdir(parents=True, exist_ok=True)
    lines = [f"{k}={cfg[k]}" for k in sorted(cfg)]
    lines.append(f"# config_hash={_config_hash(cfg)}")
    (out / "config.resolved").write_text("\n".join(lines) + "\n")


def _seeds(cfg) -> list[int]:
    try:
        return [int(s) for s in cfg["seeds"].split(",") if s.strip() != ""]
    except ValueError:
        raise ConfigError(f"bad seeds list {cfg['seeds']!r}") from None


def _floats(raw) -> list[float]:
    return [float(s) for s in raw.split(",") if s.strip() != ""]


def _synth_config(cfg) -> X.SynthDataConfig:
    targets = []
    for item in cfg["profile_targets"].split(","):
        if not item.strip():
            continue
        try:
            profile, duration, offset = item.split(":")
            targets.append((profile, float(duration), int(offset)))
        except ValueError:
            raise ConfigError(f"bad profile target {item!r}, expected name:duration:seed_offset") from None
    return X.SynthDataConfig(
        profile=cfg["profile"],
        duration=float(cfg["duration"]),
        ambient=float(cfg["ambient"]),
        data_seed=int(cfg["data_seed"]),
        length=int(cfg["length"]),
        stride=int(cfg["stride"]),
        dt=float(cfg["dt"]),
        train_fraction=float(cfg["train_fraction"]),
        capacity=float(cfg["capacity"]),
        noise_std=float(cfg["noise_std"]),
        r2=float(cfg["r2"]),
        c2=float(cfg["c2"]),
        temp_coeff=float(cfg["temp_coeff"]),
        temp_targets=tuple(_floats(cfg["temp_targets"])),
        profile_targets=tuple(targets),
        sigma_levels=tuple(_floats(cfg["sigma_levels"])),
        draws=int(cfg["draws"]),
        noise_seed=int(cfg["noise_seed"]),
    )


def _train_config(cfg, kind: str) -> TrainConfig:
    return TrainConfig(
        max_epochs=int(cfg[f"{kind}.max_epochs"]),
        peak_lr=float(cfg[f"{kind}.peak_lr"]),
        weight_decay=float(cfg[f"{kind}.weight_decay"]),
        warmup_epochs=int(cfg[f"{kind}.warmup_epochs"]),
        patience=int(cfg[f"{kind}.patience"]),
        clip_norm=float(cfg[f"{kind}.clip_norm"]),
        batch_size=int(cfg[f"{kind}.batch_size"]),
    )


def _load_source(cfg) -> X.SourceData:
    if cfg["source_csv"]:
        return X.load_csv_source(cfg["source_csv"], int(cfg["length"]), int(cfg["stride"]),
                                 float(cfg["dt"]), float(cfg["train_fraction"]))
    return X.build_synthetic_source(_synth_config(cfg))


def _require(path: Path, produced_by: str) -> Path:
    if not path.exists():
        raise ConfigError(f"missing prerequisite {path} (run `battvolt {produced_by}` first)")
    return path


# ---------------------------------------------------------------------------
# Commands
# ---------------------------------------------------------------------------

def cmd_ingest(args) -> int:
    cfg = _resolve_config(args) if (args.config or args.out or not (args.csv or args.synthetic)) \
        else dict(_CONFIG_DEFAULTS)
    cycles = []
    if args.csv:
        for path in args.csv:
            cycles.append(load_cycle_csv(path, float(cfg["dt"])))
    else:
        scfg = _synth_config({**cfg, **({"profile": args.synthetic[0],
                                         "duration": args.synthetic[1]} if args.synthetic else {})})
        cycles.append(synth_cycle(scfg.cell(), scfg.profile, scfg.duration, scfg.ambient,
                                  scfg.data_seed, dt=scfg.dt))
    for cycle in cycles:
        cycle = derive_soc(cycle)
        print(f"{cycle.name}: n={len(cycle)} dt={cycle.dt:g}s "
              f"soc_min={cycle.soc.min():.4f} soc_max={cycle.soc.max():.4f} "
              f"temp {cycle.temp.min():.1f}..{cycle.temp.max():.1f} C "
              f"current {cycle.current.min():.2f}..{cycle.current.max():.2f} A")
        if args.dump_csv:
            write_cycle_csv(cycle, args.dump_csv)
            print(f"wrote {args.dump_csv}")
    return EXIT_OK


def cmd_fit_ecm(args) -> int:
    cfg = _resolve_config(args)
    out = Path(cfg["out"])
    _write_resolved(cfg, out)
    source = _load_source(cfg)
    report = ecm_mod.ecm_identify(source.train_windows, source.spec)
    src_dir = out / "source"
    src_dir.mkdir(parents=True, exist_ok=True)
    save_normalization(source.spec, src_dir / "norm_spec.txt")
    ecm_mod.save_params(report.params, src_dir / "ecm_params.txt")
    (src_dir / "ecm_fit.txt").write_text(
        f"rmse_V={report.rmse:.12g}\niterations={report.iterations}\n"
        f"converged={int(report.converged)}\n")
    print(f"identified circuit: r0={report.params.r0 * 1e3:.2f} mOhm "
          f"r1={report.params.r1 * 1e3:.2f} mOhm c1={report.params.c1:.1f} F "
          f"tau1={report.params.tau1:.2f} s rmse={report.rmse * 1e3:.2f} mV "
          f"({report.iterations} iterations, converged={report.converged})")
    return EXIT_OK


def _checkpoint_path(out: Path, kind: str, seed: int) -> Path:
    return out / "exp1" / kind / str(seed) / "checkpoint.txt"


def cmd_train(args) -> int:
    cfg = _resolve_config(args)
    out = Path(cfg["out"])
    _write_resolved(cfg, out)
    kind = cfg["model"]
    if kind not in ("lstm", "ude"):
        raise ConfigError(f"--model must be lstm or ude for training, got {kind!r}")
    source = _load_source(cfg)
    seeds = _seeds(cfg)
    ecm_params = None
    if kind == "ude":
        ecm_params = ecm_mod.load_params(
            _require(out / "source" / "ecm_params.txt", "fit-ecm"))
    results = run_seeds(kind, source.train_windows, source.val_windows,
                        _train_config(cfg, kind), seeds, source.spec,
                        ecm_params=ecm_params, q_nom=float(cfg["capacity"]),
                        train_circuit=bool(int(cfg["train_circuit"])))
    failures = 0
    for seed, res in results.items():
        if res.error is not None:
            print(f"{kind} seed {seed}: FAILED ({res.error})")
            failures += 1
            continue
        seed_dir = out / "exp1" / kind / str(seed)
        seed_dir.mkdir(parents=True, exist_ok=True)
        save_checkpoint(res.checkpoint, seed_dir / "checkpoint.txt")
        res.train_log.to_csv(seed_dir / "trainlog.csv")
        print(f"{kind} seed {seed}: best val {res.checkpoint.val_loss:.6g} "
              f"at epoch {res.checkpoint.epoch}")
    if failures == len(results):
        raise TrainingDivergedError("all seeds failed", None)
    return EXIT_OK


def _load_run_checkpoints(out: Path, kind: str, seeds) -> dict[int, Checkpoint]:
    ckpts = {}
    for seed in seeds:
        path = _require(_checkpoint_path(out, kind, seed), f"train --model {kind}")
        ckpts[seed] = load_checkpoint(path)
    return ckpts


def _matched_result(cfg, out: Path) -> X.MatchedResult:
    """Reassemble a MatchedResult from on-disk training artifacts."""
    source = _load_source(cfg)
    params = ecm_mod.load_params(_require(out / "source" / "ecm_params.txt", "fit-ecm"))
    fit = ecm_mod.FitReport(params=params, rmse=float("nan"), iterations=0, converged=True)
    seeds = _seeds(cfg)
    seed_results = {}
    for kind in ("lstm", "ude"):
        ckpts = _load_run_checkpoints(out, kind, seeds)
        seed_results[kind] = {
            s: X.SeedResult(s, checkpoint=c) for s, c in ckpts.items()
        }
    matched_reports = {}
    matched_aggregate = {}
    best = {}
    reports, agg = ev.evaluate_matched({"ecm": params}, source.val_windows, source.spec)
    matched_reports["ecm"] = reports
    matched_aggregate["ecm"] = agg
    for kind in ("lstm", "ude"):
        ckpts = {s: r.checkpoint for s, r in seed_results[kind].items()}
        reports, agg = ev.evaluate_matched(ckpts, source.val_windows, source.spec)
        matched_reports[kind] = reports
        matched_aggregate[kind] = agg
        best[kind] = X.best_checkpoint(seed_results[kind])
    return X.MatchedResult(source, fit, seed_results, matched_reports,
                           matched_aggregate, best, float(cfg["capacity"]))


def _update_summary(out: Path) -> None:
    """Rebuild summary.csv from whichever per-experiment tables exist."""
    rows = []
    for name in ("exp1/summary_rows.csv", "exp2/summary_rows.csv",
                 "exp3/summary_rows.csv", "exp4/summary_rows.csv"):
        path = out / name
        if path.exists():
            rows.extend(path.read_text().splitlines()[1:])
    header = ",".join(ev.SUMMARY_COLUMNS)
    (out / "summary.csv").write_text("\n".join([header] + rows) + "\n")


def _write_rows(out: Path, exp: str, report_rows, summary_rows) -> None:
    exp_dir = out / exp
    exp_dir.mkdir(parents=True, exist_ok=True)
    ev.write_report_csv(report_rows, exp_dir / "metrics.csv")
    ev.write_summary_csv(summary_rows, exp_dir / "summary_rows.csv")
    _update_summary(out)


def cmd_eval(args) -> int:
    cfg = _resolve_config(args)
    out = Path(cfg["out"])
    matched = _matched_result(cfg, out)
    condition = f"{cfg['profile']}-{float(cfg['ambient']):g}C" if not cfg["source_csv"] \
        else Path(cfg["source_csv"]).stem
    _write_rows(out, "exp1", X.matched_report_rows(matched, condition),
                X.matched_summary_rows(matched, condition))
    for kind in X.MODELS:
        agg = matched.matched_aggregate[kind]
        print(f"{kind}: MAE {1e3 * agg.mae_mean:.2f} +- {1e3 * agg.mae_std:.2f} mV "
              f"(P99 {1e3 * agg.p99_mean:.2f} mV, n={agg.n_runs})")
    return EXIT_OK


def cmd_perturb(args) -> int:
    cfg = _resolve_config(args)
    out = Path(cfg["out"])
    matched = _matched_result(cfg, out)
    scfg = _synth_config(cfg)
    perturb = X.run_perturbation_experiment(matched, scfg.sigma_levels, scfg.draws,
                                            scfg.noise_seed)
    report_rows, summary_rows = X.perturbation_rows(perturb)
    _write_rows(out, "exp2", report_rows, summary_rows)
    for kind in X.MODELS:
        line = " ".join(f"sigma={p.sigma_z:g}:{1e3 * p.mae_mean:.2f}mV" for p in perturb[kind])
        print(f"{kind}: {line}")
    return EXIT_OK


def _transfer_targets(cfg, experiment: str) -> dict:
    if cfg["transfer_csv"]:
        targets = {}
        for item in cfg["transfer_csv"].split(","):
            label, _, path = item.partition(":")
            if not path:
                raise ConfigError(f"bad transfer_csv entry {item!r}, expected label:path")
            targets[label] = derive_soc(load_cycle_csv(path, float(cfg["dt"])))
        return targets
    scfg = _synth_config(cfg)
    if experiment == "3":
        return X.synthetic_temp_targets(scfg)
    return X.synthetic_profile_targets(scfg)


def cmd_transfer(args) -> int:
    cfg = _resolve_config(args)
    if cfg["experiment"] not in ("3", "4"):
        raise ConfigError("transfer requires --experiment 3 (temperature) or 4 (drive cycle)")
    out = Path(cfg["out"])
    matched = _matched_result(cfg, out)
    targets = _transfer_targets(cfg, cfg["experiment"])
    transfer = X.run_transfer_experiment(matched, targets)
    report_rows, summary_rows = X.transfer_rows(transfer, cfg["experiment"])
    _write_rows(out, f"exp{cfg['experiment']}", report_rows, summary_rows)
    for label in transfer:
        line = " ".join(f"{kind}={1e3 * transfer[label][kind].mae:.2f}mV" for kind in X.MODELS)
        print(f"{label}: {line}")
    return EXIT_OK


def cmd_stats(args) -> int:
    cfg = _resolve_config(args)
    out = Path(cfg["out"])
    matched = _matched_result(cfg, out)
    seeds = _seeds(cfg)
    a = np.array([matched.matched_reports["ude"][s].mae for s in seeds])
    b = np.array([matched.matched_reports["lstm"][s].mae for s in seeds])
    stats = ev.paired_effect_stats(a, b)
    stats_dir = out / "stats"
    stats_dir.mkdir(parents=True, exist_ok=True)
    with open(stats_dir / "paired_stats.csv", "w") as fh:
        fh.write("comparison,n,w_statistic,p_value,cohens_d,cv_a_pct,cv_b_pct,"
                 "mean_rel_reduction_pct\n")
        fh.write(f"ude_vs_lstm,{len(seeds)},{stats.w_statistic:.6g},{stats.p_value:.6g},"
                 f"{stats.cohens_d:.6g},{stats.cv_a:.6g},{stats.cv_b:.6g},"
                 f"{stats.mean_rel_reduction:.6g}\n")
    print(f"ude vs lstm over {len(seeds)} seeds: W={stats.w_statistic:g} "
          f"p={stats.p_value:.3g} d={stats.cohens_d:.2f} "
          f"CV {stats.cv_a:.2f}% vs {stats.cv_b:.2f}% "
          f"mean reduction {stats.mean_rel_reduction:.2f}%")
    return EXIT_OK


def cmd_emit_plots(args) -> int:
    cfg = _resolve_config(args)
    out = Path(cfg["out"])
    matched = _matched_result(cfg, out)
    plots = Path(out) / "plots"
    plots.mkdir(parents=True, exist_ok=True)
    source = matched.source
    spec = source.spec

    # Voltage-trace bundle on the reconstructed validation timeline.
    from .pipeline import denormalize, stack_windows
    batch = stack_windows(source.val_windows)
    n = int(np.max(batch.starts) + batch.inputs.shape[1])
    meas, counts = ev.reconstruct(denormalize(spec, "voltage", batch.targets), batch.starts, n)
    traces = {"v_meas": meas}
    for kind in X.MODELS:
        preds = ev.predict_windows(matched.model_for(kind), batch, spec)
        traces[f"v_{kind}"], _ = ev.reconstruct(preds, batch.starts, n)
    covered = np.nonzero(counts > 0)[0]
    with open(plots / "trace_matched.csv", "w") as fh:
        fh.write("t_s,v_meas,v_ecm,v_lstm,v_ude\n")
        for k in covered:
            fh.write(f"{k * source.cycle.dt:.1f},{traces['v_meas'][k]:.6f},"
                     f"{traces['v_ecm'][k]:.6f},{traces['v_lstm'][k]:.6f},"
                     f"{traces['v_ude'][k]:.6f}\n")

    # Seed boxplot bundle.
    with open(plots / "seed_boxplot.csv", "w") as fh:
        fh.write("model,seed,mae_mV\n")
        for kind in ("lstm", "ude"):
            for seed in sorted(matched.matched_reports[kind]):
                fh.write(f"{kind},{seed},{1e3 * matched.matched_reports[kind][seed].mae:.6f}\n")

    # Noise sensitivity curves (needs exp2 artifacts).
    exp2 = out / "exp2" / "summary_rows.csv"
    if exp2.exists():
        lines = exp2.read_text().splitlines()[1:]
        with open(plots / "soc_noise.csv", "w") as fh:
            fh.write("sigma_z,model,mae_mV_mean,mae_mV_std\n")
            for line in lines:
                parts = line.split(",")
                fh.write(f"{parts[1].split('=')[1]},{parts[2]},{parts[3]},{parts[4]}\n")

    # Transfer bars (exp3/exp4 artifacts).
    for exp in ("exp3", "exp4"):
        src = out / exp / "summary_rows.csv"
        if src.exists():
            lines = src.read_text().splitlines()[1:]
            with open(plots / f"transfer_{exp}.csv", "w") as fh:
                fh.write("condition,model,mae_mV\n")
                for line in lines:
                    parts = line.split(",")
                    fh.write(f"{parts[1]},{parts[2]},{parts[3]}\n")
    print(f"plot bundles written to {plots}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="battvolt",
        description="Hybrid equivalent-circuit battery voltage modeling "
                    f"(compute backend: {ACTIVE_BACKEND})")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, synthetic=True):
        p.add_argument("--config", help="flat key=value config file (include= supported)")
        p.add_argument("--out", help="output directory (or set BATTVOLT_OUT)")
        p.add_argument("--seeds", help="comma-separated seed list")
        p.add_argument("--seed", type=int, help="single seed (overrides --seeds)")
        p.add_argument("--model", choices=["ecm", "lstm", "ude"])
        p.add_argument("--experiment", choices=["1", "2", "3", "4"])
        if synthetic:
            p.add_argument("--synthetic", nargs=2, metavar=("PROFILE", "DURATION"),
                           help=f"synthesize the source cycle ({'/'.join(PROFILES)}, seconds)")

    p = sub.add_parser("ingest", help="load/synthesize cycles and print per-cycle stats")
    common(p)
    p.add_argument("--csv", nargs="*", help="cycle CSV files (t,current,voltage,temp,ah)")
    p.add_argument("--dump-csv", help="write the (first) synthesized cycle to this CSV path")
    p.set_defaults(func=cmd_ingest)

    p = sub.add_parser("fit-ecm", help="identify the Thevenin circuit on the training split")
    common(p)
    p.set_defaults(func=cmd_fit_ecm)

    p = sub.add_parser("train", help="train lstm/ude over seeds (ude needs fit-ecm first)")
    common(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="matched-condition evaluation (experiment 1)")
    common(p)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("perturb", help="SOC-noise sensitivity (experiment 2)")
    common(p)
    p.set_defaults(func=cmd_perturb)

    p = sub.add_parser("transfer", help="zero-shot transfer (experiments 3 and 4)")
    common(p)
    p.set_defaults(func=cmd_transfer)

    p = sub.add_parser("stats", help="paired seed statistics: ude vs lstm")
    common(p)
    p.set_defaults(func=cmd_stats)

    p = sub.add_parser("emit-plots", help="write figure-data CSV bundles")
    common(p)
    p.set_defaults(func=cmd_emit_plots)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (IntegrationDivergedError, TrainingDivergedError) as exc:
        print(f"numerical divergence: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except DataError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except BattvoltError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
