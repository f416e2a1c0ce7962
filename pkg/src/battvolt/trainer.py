"""Shared gradient-training loop for the LSTM baseline and the hybrid model.

Adam with decoupled weight decay, global-norm gradient clipping, a linear
warmup followed by cosine decay (per epoch), early stopping on validation
loss, and best-validation checkpointing.  Everything is deterministic given
the config seed; the multi-seed protocol just repeats fit() with each seed.
"""

import csv
import logging
from dataclasses import dataclass, field, replace

import numpy as np

from . import ude as ude_mod
from .ecm import EcmParams
from .errors import BattvoltError, ConfigError, DataError
from .kernels import lstm_forward, lstm_loss_grad
from .nn import LstmBaseline, MlpCorrection
from .pipeline import NormalizationSpec, WindowBatch, stack_windows

log = logging.getLogger(__name__)

ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-8


@dataclass(frozen=True)
class TrainConfig:
    max_epochs: int
    peak_lr: float
    weight_decay: float
    warmup_epochs: int
    patience: int
    clip_norm: float
    batch_size: int = 16
    seed: int = 0

    def __post_init__(self):
        positive = ("max_epochs", "peak_lr", "weight_decay", "warmup_epochs",
                    "patience", "clip_norm", "batch_size")
        for name in positive:
            if not getattr(self, name) > 0:
                raise ConfigError(f"{name} must be positive")
        if self.warmup_epochs >= self.max_epochs:
            raise ConfigError("warmup_epochs must be smaller than max_epochs")

    @staticmethod
    def lstm_default(seed: int = 0, **overrides) -> "TrainConfig":
        cfg = TrainConfig(max_epochs=150, peak_lr=1e-3, weight_decay=1e-5,
                          warmup_epochs=5, patience=30, clip_norm=1.0, seed=seed)
        return replace(cfg, **overrides) if overrides else cfg

    @staticmethod
    def ude_default(seed: int = 0, **overrides) -> "TrainConfig":
        cfg = TrainConfig(max_epochs=30, peak_lr=2e-4, weight_decay=1e-5,
                          warmup_epochs=3, patience=8, clip_norm=0.5, seed=seed)
        return replace(cfg, **overrides) if overrides else cfg


def adam_step(params, grads, m, v, t, lr, weight_decay, clip_norm):
    """One Adam update with decoupled weight decay and global-norm clipping.

    Clipping applies before the moment update; weight decay multiplies the
    parameters by (1 - lr * wd) before the Adam delta.  A non-finite
    gradient skips the step entirely (params, moments, and t untouched).
    Returns (params, m, v, t, grad_norm, skipped).
    """
    grads = np.asarray(grads, dtype=np.float64)
    norm = float(np.sqrt(grads @ grads))
    if not np.isfinite(norm):
        log.warning("non-finite gradient: skipping optimizer step")
        return params, m, v, t, norm, True
    if norm > clip_norm:
        grads = grads * (clip_norm / norm)
    t = t + 1
    m = ADAM_BETA1 * m + (1.0 - ADAM_BETA1) * grads
    v = ADAM_BETA2 * v + (1.0 - ADAM_BETA2) * grads * grads
    m_hat = m / (1.0 - ADAM_BETA1 ** t)
    v_hat = v / (1.0 - ADAM_BETA2 ** t)
    params = params * (1.0 - lr * weight_decay)
    params = params - lr * m_hat / (np.sqrt(v_hat) + ADAM_EPS)
    return params, m, v, t, norm, False


def lr_schedule(config: TrainConfig, epoch: int) -> float:
    """Linear ramp peak/warmup..peak over the warmup epochs, then cosine to 0.

    The ramp is 1-based so epoch 0 already trains at peak/warmup instead of
    a zero-learning-rate no-op.
    """
    if not 0 <= epoch < config.max_epochs:
        raise ConfigError(f"epoch {epoch} outside [0, {config.max_epochs})")
    if epoch < config.warmup_epochs:
        return config.peak_lr * (epoch + 1) / config.warmup_epochs
    span = config.max_epochs - config.warmup_epochs
    return config.peak_lr * 0.5 * (1.0 + np.cos(np.pi * (epoch - config.warmup_epochs) / span))


@dataclass
class TrainLog:
    initial_val_loss: float = float("nan")
    epochs: list = field(default_factory=list)
    train_loss: list = field(default_factory=list)
    val_loss: list = field(default_factory=list)
    lr: list = field(default_factory=list)
    grad_norm_mean: list = field(default_factory=list)
    grad_norm_max: list = field(default_factory=list)

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["epoch", "train_loss", "val_loss", "lr",
                             "grad_norm_mean", "grad_norm_max"])
            for row in zip(self.epochs, self.train_loss, self.val_loss, self.lr,
                           self.grad_norm_mean, self.grad_norm_max):
                writer.writerow([row[0]] + [f"{x:.17g}" for x in row[1:]])


@dataclass
class Checkpoint:
    kind: str                      # "lstm" or "ude"
    params: np.ndarray             # flat trainable vector
    config: TrainConfig
    spec: NormalizationSpec
    val_loss: float
    epoch: int
    ecm: EcmParams | None = None   # hybrid only: circuit snapshot at best epoch
    q_nom: float | None = None
    train_circuit: bool = True


class TrainingDivergedError(BattvoltError):
    """Training loss became non-finite; carries the partial log."""

    def __init__(self, message: str, partial_log: TrainLog):
        super().__init__(message)
        self.partial_log = partial_log


def build_model(kind: str, seed: int, ecm_params: EcmParams | None = None,
                q_nom: float = ude_mod.DEFAULT_Q_NOM, train_circuit: bool = True):
    if kind == "lstm":
        return LstmBaseline(seed=seed)
    if kind == "ude":
        if ecm_params is None:
            raise ConfigError("hybrid model requires identified circuit parameters to warm-start")
        return ude_mod.warm_start(ecm_params, q_nom=q_nom, seed=seed, train_circuit=train_circuit)
    raise ConfigError(f"unknown trainable model kind {kind!r}")


class _LstmAdapter:
    kind = "lstm"

    def __init__(self, model: LstmBaseline, spec: NormalizationSpec):
        self.model = model
        self.spec = spec

    def prepare(self, windows) -> WindowBatch:
        return windows if isinstance(windows, WindowBatch) else stack_windows(list(windows))

    def get_vector(self):
        return self.model.params

    def set_vector(self, vec):
        self.model.params = np.ascontiguousarray(vec)

    def loss_and_grad(self, batch: WindowBatch, idx):
        loss, grad, _ = lstm_loss_grad(self.model.params, batch.inputs[idx], batch.targets[idx])
        return loss, grad

    def val_loss(self, batch: WindowBatch) -> float:
        y = lstm_forward(self.model.params, batch.inputs)
        err = y - batch.targets
        return float(np.mean(err * err))

    def checkpoint_extras(self):
        return {}


class _UdeAdapter:
    kind = "ude"

    def __init__(self, model: ude_mod.UdeModel, spec: NormalizationSpec):
        self.model = model
        self.spec = spec

    def prepare(self, windows) -> WindowBatch:
        return windows if isinstance(windows, WindowBatch) else stack_windows(list(windows))

    def get_vector(self):
        return self.model.trainable_vector()

    def set_vector(self, vec):
        self.model.set_trainable_vector(vec)

    def loss_and_grad(self, batch: WindowBatch, idx):
        return ude_mod.ude_loss_and_grad(self.model, batch.subset(idx), self.spec)

    def val_loss(self, batch: WindowBatch) -> float:
        return ude_mod.ude_loss(self.model, batch, self.spec)

    def checkpoint_extras(self):
        return {"ecm": self.model.ecm.copy(), "q_nom": self.model.q_nom,
                "train_circuit": self.model.train_circuit}


def _adapt(model, spec):
    if isinstance(model, LstmBaseline):
        return _LstmAdapter(model, spec)
    if isinstance(model, ude_mod.UdeModel):
        return _UdeAdapter(model, spec)
    raise ConfigError(f"cannot train object of type {type(model).__name__}")


def fit(model, train_windows, val_windows, config: TrainConfig,
        spec: NormalizationSpec) -> tuple[Checkpoint, TrainLog]:
    """Train to best validation loss with early stopping.

    Deterministic given config.seed (which drives the epoch shuffling; model
    initialization is seeded by the caller).  On return the model holds the
    best-validation parameters, which the checkpoint also carries.
    """
    adapter = _adapt(model, spec)
    train_batch = adapter.prepare(train_windows)
    val_batch = adapter.prepare(val_windows)
    if len(train_batch) == 0 or len(val_batch) == 0:
        raise DataError("both train and validation window sets must be nonempty")

    rng = np.random.default_rng([config.seed, 0x5eed])
    params = adapter.get_vector().copy()
    m = np.zeros_like(params)
    v = np.zeros_like(params)
    t_step = 0

    train_log = TrainLog()
    train_log.initial_val_loss = adapter.val_loss(val_batch)
    best_val = train_log.initial_val_loss
    best_params = params.copy()
    best_epoch = -1
    epochs_since_best = 0

    for epoch in range(config.max_epochs):
        lr = lr_schedule(config, epoch)
        order = rng.permutation(len(train_batch))
        epoch_losses = []
        epoch_norms = []
        for lo in range(0, len(order), config.batch_size):
            idx = order[lo : lo + config.batch_size]
            loss, grad = adapter.loss_and_grad(train_batch, idx)
            if not np.isfinite(loss):
                raise TrainingDivergedError(
                    f"non-finite training loss at epoch {epoch}", train_log)
            params, m, v, t_step, gnorm, skipped = adam_step(
                params, grad, m, v, t_step, lr, config.weight_decay, config.clip_norm)
            if not skipped:
                adapter.set_vector(params)
            epoch_losses.append(loss)
            epoch_norms.append(gnorm if np.isfinite(gnorm) else 0.0)

        val = adapter.val_loss(val_batch)
        if not np.isfinite(val):
            raise TrainingDivergedError(f"non-finite validation loss at epoch {epoch}", train_log)
        train_log.epochs.append(epoch)
        train_log.train_loss.append(float(np.mean(epoch_losses)))
        train_log.val_loss.append(val)
        train_log.lr.append(lr)
        train_log.grad_norm_mean.append(float(np.mean(epoch_norms)))
        train_log.grad_norm_max.append(float(np.max(epoch_norms)))

        if val < best_val:
            best_val = val
            best_params = params.copy()
            best_epoch = epoch
            epochs_since_best = 0
        else:
            epochs_since_best += 1
            if epochs_since_best >= config.patience:
                break

    adapter.set_vector(best_params.copy())
    checkpoint = Checkpoint(kind=adapter.kind, params=best_params, config=config,
                            spec=spec, val_loss=best_val, epoch=best_epoch,
                            **adapter.checkpoint_extras())
    return checkpoint, train_log


@dataclass
class SeedResult:
    seed: int
    checkpoint: Checkpoint | None = None
    train_log: TrainLog | None = None
    error: str | None = None


def run_seeds(kind: str, train_windows, val_windows, config: TrainConfig,
              seeds, spec: NormalizationSpec, ecm_params: EcmParams | None = None,
              q_nom: float = ude_mod.DEFAULT_Q_NOM,
              train_circuit: bool = True) -> dict[int, SeedResult]:
    """Independent fits, one per seed; per-seed failures are isolated."""
    seeds = list(seeds)
    if len(set(seeds)) != len(seeds):
        raise ConfigError(f"duplicate seeds in {seeds}")
    results: dict[int, SeedResult] = {}
    for seed in seeds:
        cfg = replace(config, seed=seed)
        try:
            model = build_model(kind, seed, ecm_params, q_nom, train_circuit)
            ckpt, tlog = fit(model, train_windows, val_windows, cfg, spec)
            results[seed] = SeedResult(seed, ckpt, tlog)
        except BattvoltError as exc:
            log.warning("seed %d failed: %s", seed, exc)
            results[seed] = SeedResult(seed, error=str(exc))
    return results


# ---------------------------------------------------------------------------
# Checkpoint persistence: versioned structured text, exact float round trip
# ---------------------------------------------------------------------------

_MAGIC = "battvolt-checkpoint v1"


def save_checkpoint(ckpt: Checkpoint, path) -> None:
    with open(path, "w") as fh:
        fh.write(_MAGIC + "\n")
        fh.write(f"kind={ckpt.kind}\n")
        fh.write(f"epoch={ckpt.epoch}\n")
        fh.write(f"val_loss={ckpt.val_loss:.17g}\n")
        for key in ("max_epochs", "warmup_epochs", "patience", "batch_size", "seed"):
            fh.write(f"config.{key}={getattr(ckpt.config, key)}\n")
        for key in ("peak_lr", "weight_decay", "clip_norm"):
            fh.write(f"config.{key}={getattr(ckpt.config, key):.17g}\n")
        s = ckpt.spec
        for key in ("current_mean", "current_std", "voltage_mean", "voltage_std",
                    "temp_offset", "temp_scale", "soc_center", "soc_scale"):
            fh.write(f"norm.{key}={getattr(s, key):.17g}\n")
        if ckpt.kind == "ude":
            fh.write(f"q_nom={ckpt.q_nom:.17g}\n")
            fh.write(f"train_circuit={int(ckpt.train_circuit)}\n")
            for k, ck in enumerate(ckpt.ecm.ocv):
                fh.write(f"ecm.ocv_c{k}={ck:.17g}\n")
            fh.write(f"ecm.r0={ckpt.ecm.r0:.17g}\n")
            fh.write(f"ecm.r1={ckpt.ecm.r1:.17g}\n")
            fh.write(f"ecm.c1={ckpt.ecm.c1:.17g}\n")
        fh.write(f"params.n={ckpt.params.size}\n")
        for x in ckpt.params:
            fh.write(f"{x:.17g}\n")


def load_checkpoint(path) -> Checkpoint:
    with open(path) as fh:
        lines = fh.read().splitlines()
    if not lines or lines[0] != _MAGIC:
        raise DataError(f"{path}: not a battvolt checkpoint")
    meta = {}
    i = 1
    while i < len(lines):
        line = lines[i]
        key, _, raw = line.partition("=")
        meta[key] = raw
        i += 1
        if key == "params.n":
            break
    n = int(meta["params.n"])
    params = np.array([float(x) for x in lines[i : i + n]])
    if params.size != n:
        raise DataError(f"{path}: expected {n} parameters, found {params.size}")
    config = TrainConfig(
        max_epochs=int(meta["config.max_epochs"]),
        peak_lr=float(meta["config.peak_lr"]),
        weight_decay=float(meta["config.weight_decay"]),
        warmup_epochs=int(meta["config.warmup_epochs"]),
        patience=int(meta["config.patience"]),
        clip_norm=float(meta["config.clip_norm"]),
        batch_size=int(meta["config.batch_size"]),
        seed=int(meta["config.seed"]),
    )
    spec = NormalizationSpec(
        current_mean=float(meta["norm.current_mean"]),
        current_std=float(meta["norm.current_std"]),
        voltage_mean=float(meta["norm.voltage_mean"]),
        voltage_std=float(meta["norm.voltage_std"]),
        temp_offset=float(meta["norm.temp_offset"]),
        temp_scale=float(meta["norm.temp_scale"]),
        soc_center=float(meta["norm.soc_center"]),
        soc_scale=float(meta["norm.soc_scale"]),
    )
    kind = meta["kind"]
    ecm = None
    q_nom = None
    train_circuit = True
    if kind == "ude":
        ocv_c = np.array([float(meta[f"ecm.ocv_c{k}"]) for k in range(6)])
        ecm = EcmParams(ocv_c, float(meta["ecm.r0"]), float(meta["ecm.r1"]),
                        float(meta["ecm.c1"]))
        q_nom = float(meta["q_nom"])
        train_circuit = bool(int(meta["train_circuit"]))
    return Checkpoint(kind=kind, params=params, config=config, spec=spec,
                      val_loss=float(meta["val_loss"]), epoch=int(meta["epoch"]),
                      ecm=ecm, q_nom=q_nom, train_circuit=train_circuit)


def rebuild_model(ckpt: Checkpoint):
    """Model instance reproducing the checkpointed forward pass exactly."""
    if ckpt.kind == "lstm":
        return LstmBaseline(params=ckpt.params.copy())
    if ckpt.kind == "ude":
        model = ude_mod.UdeModel(ckpt.ecm.copy(), MlpCorrection(seed=0),
                                 q_nom=ckpt.q_nom, train_circuit=ckpt.train_circuit)
        model.set_trainable_vector(ckpt.params.copy())
        return model
    raise DataError(f"unknown checkpoint kind {ckpt.kind!r}")
