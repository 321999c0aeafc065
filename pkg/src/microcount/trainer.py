"""Training protocol: linear warm-up, reduce-on-plateau, early stopping, Adam."""

from __future__ import annotations

import csv
import dataclasses
import json
import math
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .adapters import compute_dataset_stats
from .data import load_arrays
from .evaluator import mae, predict
from .models import ATTENTION_FAMILIES
from .tensor import Tensor, backward, ops, save_checkpoint

# default mini-batch per family (the larger the model, the smaller the batch)
BATCH_SIZES = {"cnn": 128, "resnet": 64, "vit": 64, "crossvit": 64, "transcrowd-g": 64, "transcrowd-t": 64,
               "parallelvit": 32, "deepvit": 32, "xcit": 32}


class TrainConfigError(ValueError):
    pass


class TrainingDiverged(RuntimeError):
    def __init__(self, message, report):
        super().__init__(message)
        self.report = report


@dataclass(frozen=True)
class TrainConfig:
    base_lr: float = 1e-4
    warmup_steps: int = 5000
    lr_min: float | None = None          # warm-up start; base_lr / 100 when None
    warmup: bool | None = None           # None: on for transformer families only
    plateau_patience: int = 5
    plateau_factor: float = 0.5
    plateau_threshold: float = 1e-4      # relative improvement that resets patience
    early_stop_patience: int = 20
    max_epochs: int = 400
    batch_size: int | None = None        # None: per-family default
    seed: int = 0
    loss: str = "l1"
    betas: tuple = (0.9, 0.999)
    eps: float = 1e-8

    def validate(self) -> None:
        if not 0 < self.plateau_factor < 1:
            raise TrainConfigError("plateau_factor must be in (0, 1)")
        if self.plateau_patience < 1 or self.early_stop_patience < 1:
            raise TrainConfigError("patience values must be >= 1")
        if self.max_epochs < 1:
            raise TrainConfigError("max_epochs must be >= 1")
        if self.base_lr <= 0 or self.warmup_steps < 0:
            raise TrainConfigError("base_lr must be > 0 and warmup_steps >= 0")
        if self.loss not in ("l1", "mse"):
            raise TrainConfigError(f"unknown loss {self.loss!r}")
        if self.batch_size is not None and self.batch_size < 1:
            raise TrainConfigError("batch_size must be >= 1")

    @property
    def start_lr(self) -> float:
        return self.base_lr / 100 if self.lr_min is None else self.lr_min

    def replace(self, **changes) -> "TrainConfig":
        return dataclasses.replace(self, **changes)

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["betas"] = list(self.betas)
        return d

    @classmethod
    def from_dict(cls, data: dict) -> "TrainConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise TrainConfigError(f"unknown train keys: {sorted(unknown)}")
        data = dict(data)
        if "betas" in data:
            data["betas"] = tuple(data["betas"])
        return cls(**data)


# -- schedules -----------------------------------------------------------------

def warmup_lr(step: int, config: TrainConfig) -> float:
    """Linear ramp from the start rate to base_lr over warmup_steps."""
    if step < 0:
        raise ValueError("step must be >= 0")
    if config.warmup_steps == 0:
        return config.base_lr
    frac = min(step / config.warmup_steps, 1.0)
    return config.start_lr + (config.base_lr - config.start_lr) * frac


def _improved(value, best, threshold) -> bool:
    return math.isinf(best) or best - value > threshold * abs(best)


class PlateauScheduler:
    """Multiply the rate by ``factor`` after ``patience`` epochs without a
    relative improvement of ``threshold``; any improvement resets the count."""

    def __init__(self, lr: float, patience: int = 5, factor: float = 0.5, threshold: float = 1e-4):
        self.lr, self.patience, self.factor, self.threshold = lr, patience, factor, threshold
        self.best = math.inf
        self.bad_epochs = 0
        self.reductions = 0

    def step(self, val_loss: float) -> float:
        if _improved(val_loss, self.best, self.threshold):
            self.best, self.bad_epochs = val_loss, 0
        else:
            self.bad_epochs += 1
            if self.bad_epochs >= self.patience:
                self.lr *= self.factor
                self.bad_epochs = 0
                self.reductions += 1
        return self.lr


class EarlyStopping:
    """Stop after ``patience`` epochs without improvement or at ``max_epochs``."""

    def __init__(self, patience: int = 20, max_epochs: int = 400, threshold: float = 1e-4):
        self.patience, self.max_epochs, self.threshold = patience, max_epochs, threshold
        self.best = math.inf
        self.bad_epochs = 0
        self.reason = None

    def step(self, epoch: int, val_loss: float) -> str:
        if _improved(val_loss, self.best, self.threshold):
            self.best, self.bad_epochs = val_loss, 0
        else:
            self.bad_epochs += 1
        if self.bad_epochs >= self.patience:
            self.reason = "plateau"
        elif epoch >= self.max_epochs:
            self.reason = "max_epochs"
        return "stop" if self.reason else "continue"


class LRSchedule:
    """Warm-up ramp (when enabled) followed by the plateau scheduler, which
    only starts counting once the ramp has finished."""

    def __init__(self, config: TrainConfig, warmup: bool):
        self.config, self.warmup = config, warmup
        self.plateau = PlateauScheduler(config.base_lr, config.plateau_patience, config.plateau_factor,
                                        config.plateau_threshold)

    def in_warmup(self, step: int) -> bool:
        return self.warmup and step < self.config.warmup_steps

    def lr(self, step: int) -> float:
        return warmup_lr(step, self.config) if self.in_warmup(step) else self.plateau.lr

    def end_epoch(self, step: int, val_loss: float) -> None:
        if not self.in_warmup(step):
            self.plateau.step(val_loss)


# -- loss and optimiser --------------------------------------------------------

def loss(pred, true, kind: str = "l1"):
    """Mean absolute (default) or squared deviation; works on tensors and arrays."""
    if isinstance(pred, Tensor):
        return ops.l1_loss(pred, true) if kind == "l1" else ops.mse_loss(pred, true)
    p, t = np.asarray(pred, np.float64), np.asarray(true, np.float64)
    if p.shape != t.shape:
        raise ValueError(f"prediction shape {p.shape} != target shape {t.shape}")
    d = p - t
    return float(np.mean(np.abs(d)) if kind == "l1" else np.mean(d * d))


class Adam:
    def __init__(self, params, betas=(0.9, 0.999), eps: float = 1e-8):
        self.params = list(params)
        self.b1, self.b2 = betas
        self.eps = eps
        self.t = 0
        self.m = [np.zeros(p.shape) for p in self.params]
        self.v = [np.zeros(p.shape) for p in self.params]

    def step(self, lr: float) -> None:
        self.t += 1
        c1, c2 = 1 - self.b1 ** self.t, 1 - self.b2 ** self.t
        for p, m, v in zip(self.params, self.m, self.v):
            if p.grad is None:
                continue
            g = p.grad.astype(np.float64)
            m *= self.b1
            m += (1 - self.b1) * g
            v *= self.b2
            v += (1 - self.b2) * g * g
            update = lr * (m / c1) / (np.sqrt(v / c2) + self.eps)
            p.data = (p.data - update).astype(p.data.dtype)


# -- training loop -------------------------------------------------------------

@dataclass
class TrainReport:
    epochs: list = field(default_factory=list)      # dicts: epoch, train_loss, val_loss, val_mae, lr
    loss_trace: list = field(default_factory=list)  # per-step training batch loss
    lr_trace: list = field(default_factory=list)    # per-step learning rate
    stop_reason: str = ""
    wall_time: float = 0.0
    initial_val_mae: float = math.nan
    best_epoch: int = 0
    best_val_loss: float = math.inf
    checkpoint: str | None = None
    config: dict = field(default_factory=dict)

    @property
    def final_val_mae(self) -> float:
        return self.epochs[self.best_epoch - 1]["val_mae"] if self.best_epoch else self.initial_val_mae

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["final_val_mae"] = self.final_val_mae
        return d

    def save(self, out_dir) -> dict:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        (out / "train_report.json").write_text(json.dumps(self.to_dict(), indent=1, sort_keys=True))
        with open(out / "loss_curve.csv", "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["epoch", "train_loss", "val_loss", "val_mae", "lr"])
            for e in self.epochs:
                w.writerow([e["epoch"], repr(e["train_loss"]), repr(e["val_loss"]), repr(e["val_mae"]),
                            repr(e["lr"])])
        return {"report": out / "train_report.json", "curve": out / "loss_curve.csv"}


def fit(model, train_data, val_data, config: TrainConfig, out_dir=None, log=None, meta=None) -> TrainReport:
    """Train on in-memory ``(images, counts)`` pairs; restores and (with
    ``out_dir``) checkpoints the best-validation weights. ``meta`` is merged
    into the checkpoint metadata."""
    config.validate()
    x_tr, y_tr = train_data
    x_val, y_val = val_data
    if len(x_tr) == 0 or len(x_val) == 0:
        raise ValueError("train and validation splits must be non-empty")
    family = model.config.family
    batch = config.batch_size or BATCH_SIZES[family]
    warm = family in ATTENTION_FAMILIES if config.warmup is None else config.warmup
    schedule = LRSchedule(config, warm)
    stopper = EarlyStopping(config.early_stop_patience, config.max_epochs, config.plateau_threshold)
    opt = Adam(model.parameters(), config.betas, config.eps)
    rng = np.random.default_rng(config.seed)
    report = TrainReport(config=config.to_dict())
    start = time.perf_counter()
    report.initial_val_mae = mae(predict(model, x_val), y_val)
    best_state = model.state_dict()
    step = 0
    for epoch in range(1, config.max_epochs + 1):
        model.train()
        order = rng.permutation(len(x_tr))
        total = 0.0
        for i in range(0, len(order), batch):
            idx = order[i:i + batch]
            lr = schedule.lr(step)
            model.zero_grad()
            out = loss(model(Tensor(x_tr[idx])), Tensor(y_tr[idx]), config.loss)
            value = float(out.data)
            if not math.isfinite(value):
                report.stop_reason = f"diverged at step {step}"
                report.wall_time = time.perf_counter() - start
                raise TrainingDiverged(f"non-finite loss at epoch {epoch}, step {step}", report)
            backward(out)
            opt.step(lr)
            report.loss_trace.append(value)
            report.lr_trace.append(lr)
            total += value * len(idx)
            step += 1
        val_pred = predict(model, x_val)
        val_loss = loss(val_pred, y_val, config.loss)
        if not math.isfinite(val_loss):
            report.stop_reason = f"diverged at epoch {epoch}"
            raise TrainingDiverged(f"non-finite validation loss at epoch {epoch}", report)
        row = {"epoch": epoch, "train_loss": total / len(order), "val_loss": val_loss,
               "val_mae": mae(val_pred, y_val), "lr": lr}
        report.epochs.append(row)
        if val_loss < report.best_val_loss:
            report.best_val_loss, report.best_epoch = val_loss, epoch
            best_state = model.state_dict()
        if log:
            log(row)
        schedule.end_epoch(step, val_loss)
        if stopper.step(epoch, val_loss) == "stop":
            report.stop_reason = stopper.reason
            break
    model.load_state_dict(best_state)
    report.wall_time = time.perf_counter() - start
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        ckpt = out / "best.ckpt"
        save_checkpoint(ckpt, best_state, {**(meta or {}), "epoch": report.best_epoch,
                                           "val_loss": report.best_val_loss, "model": model.config.to_dict()})
        report.checkpoint = str(ckpt)
        report.save(out)
    return report


def train(model, train_manifest, val_manifest, config: TrainConfig, out_dir=None, stats=None, log=None):
    """Load both splits (normalised with training-split statistics unless
    ``stats`` is given) and run ``fit``. Returns ``(report, stats)``."""
    if len(train_manifest) == 0 or len(val_manifest) == 0:
        raise ValueError("train and validation splits must be non-empty")
    train_names = {str(train_manifest.path(r)) for r in train_manifest}
    if any(str(val_manifest.path(r)) in train_names for r in val_manifest):
        raise ValueError("train and validation splits overlap")
    stats = stats or compute_dataset_stats(train_manifest)
    size = model.config.input_size
    x_tr, y_tr, _ = load_arrays(train_manifest, stats, size)
    x_val, y_val, _ = load_arrays(val_manifest, stats, size)
    report = fit(model, (x_tr, y_tr), (x_val, y_val), config, out_dir, log, {"stats": stats.to_dict()})
    return report, stats
