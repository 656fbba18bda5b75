"""SGD training: standard, incremental sparsity fine-tuning, adversarial."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field

import numpy as np

from . import nn
from .tensor import make_rng


@dataclass
class TrainConfig:
    epochs: int = 20
    batch_size: int = 128
    lr_schedule: tuple = ((0, 0.01),)
    momentum: float = 0.9
    seed: int = 0
    loss: str = "xent"

    def __post_init__(self):
        self.lr_schedule = tuple((int(e), float(lr)) for e, lr in self.lr_schedule)
        if not self.lr_schedule:
            raise ValueError("lr_schedule needs at least one breakpoint")
        epochs = [e for e, _ in self.lr_schedule]
        if any(b <= a for a, b in zip(epochs, epochs[1:])):
            raise ValueError("lr_schedule breakpoints must be strictly increasing")
        if any(lr < 0 for _, lr in self.lr_schedule):
            raise ValueError("learning rates must be non-negative")
        if not 0.0 <= self.momentum < 1.0:
            raise ValueError(f"momentum must lie in [0, 1), got {self.momentum}")
        if self.epochs < 0 or self.batch_size < 1:
            raise ValueError("epochs must be >= 0 and batch_size >= 1")
        if self.loss not in ("xent", "mse"):
            raise ValueError(f"unknown loss {self.loss!r}")

    def lr_at(self, epoch: int) -> float:
        lr = self.lr_schedule[0][1]
        for start, value in self.lr_schedule:
            if epoch >= start:
                lr = value
        return lr


@dataclass
class FinetuneSchedule:
    gamma_start: float = 0.2
    gamma_end: float = 0.08
    delta: float = 0.005
    epochs_per_step: int = 2
    lr: float | None = None

    def __post_init__(self):
        if not (0 < self.gamma_end <= self.gamma_start <= 1):
            raise ValueError("need 0 < gamma_end <= gamma_start <= 1")
        if self.delta <= 0:
            raise ValueError("delta must be positive")
        if self.epochs_per_step < 1:
            raise ValueError("epochs_per_step must be >= 1")

    def stages(self) -> list[float]:
        """Sparsity ratios visited after the start, ending exactly at gamma_end."""
        span = self.gamma_start - self.gamma_end
        n = math.ceil(span / self.delta - 1e-9) if span > 0 else 0
        return [self.gamma_start - i * self.delta for i in range(1, n)] + ([self.gamma_end] if n else [])


@dataclass
class EpochMetrics:
    epoch: int
    split: str
    loss: float
    accuracy: float
    gamma: float | None


@dataclass
class TrainResult:
    model: nn.Model
    metrics: list[EpochMetrics] = field(default_factory=list)
    batch_losses: list[float] = field(default_factory=list)
    velocity: list | None = None


def sgd_step(params, grads, velocity, lr: float, momentum: float):
    """Classical momentum in place: ``v <- mu*v - lr*g; p <- p + v``.

    ``velocity=None`` starts from zeros.  Returns the velocity list.
    """
    if len(params) != len(grads):
        raise ValueError("params and grads differ in length")
    if velocity is None:
        velocity = [np.zeros_like(p) for p in params]
    for p, g, v in zip(params, grads, velocity):
        if p.shape != g.shape or p.shape != v.shape:
            raise ValueError(f"shape mismatch: param {p.shape}, grad {g.shape}, velocity {v.shape}")
        v *= momentum
        v -= lr * g
        p += v
    return velocity


def _batch_loss(model, x, y, loss):
    trace = nn.forward(model, x)
    if loss == "xent":
        losses, g = nn.softmax_cross_entropy_batch(trace.logits, y)
    else:
        losses, g = nn.squared_error_batch(trace.logits, y)
    return trace, losses, g


def evaluate(model, x, y, loss="xent", batch_size=512) -> tuple[float, float]:
    """Mean loss and accuracy (accuracy is NaN for regression)."""
    total, correct = 0.0, 0
    for i in range(0, len(x), batch_size):
        trace, losses, _ = _batch_loss(model, x[i:i + batch_size], y[i:i + batch_size], loss)
        total += losses.sum()
        if loss == "xent":
            correct += int((trace.logits.argmax(axis=1) == y[i:i + batch_size]).sum())
    acc = correct / len(x) if loss == "xent" else float("nan")
    return total / len(x), acc


def _run_epochs(result: TrainResult, x, y, cfg: TrainConfig, n_epochs: int, first_epoch: int,
                rng, perturb=None, lr: float | None = None):
    model = result.model
    n = len(x)
    for e in range(first_epoch, first_epoch + n_epochs):
        step_lr = cfg.lr_at(e) if lr is None else lr
        order = rng.permutation(n)
        tot_loss, correct = 0.0, 0
        for start in range(0, n, cfg.batch_size):
            idx = order[start:start + cfg.batch_size]
            xb, yb = x[idx], y[idx]
            if perturb is not None:
                xb = perturb(model, xb, yb)
            trace, losses, g = _batch_loss(model, xb, yb, cfg.loss)
            grads, _ = nn.backward(model, trace, g / len(idx))
            flat = [gr[k] for gr, p in zip(grads, model.params) for k in p]
            result.velocity = sgd_step(model.param_tensors(), flat, result.velocity, step_lr, cfg.momentum)
            model.touch()
            result.batch_losses.append(float(losses.mean()))
            tot_loss += losses.sum()
            if cfg.loss == "xent":
                correct += int((trace.logits.argmax(axis=1) == yb).sum())
        acc = correct / n if cfg.loss == "xent" else float("nan")
        gamma = model.gammas[0] if model.kwta_layers else None
        result.metrics.append(EpochMetrics(e, "train", tot_loss / n, acc, gamma))
        model.meta.setdefault("history", []).append(f"epoch{e}:lr={step_lr}:gamma={gamma}")


def _xy(dataset):
    x, y = dataset.images, dataset.labels
    if len(x) == 0:
        raise ValueError("dataset is empty")
    return x, y


def train_standard(model: nn.Model, dataset, cfg: TrainConfig, result: TrainResult | None = None) -> TrainResult:
    """Minibatch SGD with momentum; shuffling is seeded from ``cfg.seed``."""
    x, y = _xy(dataset)
    result = result or TrainResult(model)
    first = len([m for m in result.metrics if m.split == "train"])
    _run_epochs(result, x, y, cfg, cfg.epochs, first, make_rng(cfg.seed))
    return result


def finetune_sparsity(model: nn.Model, dataset, sched: FinetuneSchedule, cfg: TrainConfig,
                      result: TrainResult | None = None) -> TrainResult:
    """Lower gamma on every k-WTA layer by ``delta`` per stage, training
    ``epochs_per_step`` epochs after each decrement."""
    if not model.kwta_layers:
        raise ValueError("model has no kwta layers to fine-tune")
    if any(abs(g - sched.gamma_start) > 1e-12 for g in model.gammas):
        raise ValueError(f"model gammas {model.gammas} do not match gamma_start={sched.gamma_start}")
    x, y = _xy(dataset)
    result = result or TrainResult(model)
    rng = make_rng(cfg.seed + 1)
    lr = sched.lr if sched.lr is not None else cfg.lr_schedule[-1][1]
    for gamma in sched.stages():
        model.set_gamma(gamma)
        _run_epochs(result, x, y, cfg, sched.epochs_per_step, len(result.metrics), rng, lr=lr)
    return result


def train_adversarial(model: nn.Model, dataset, attack_cfg, cfg: TrainConfig,
                      result: TrainResult | None = None) -> TrainResult:
    """Replace every minibatch by attack examples crafted on the current weights."""
    from .attacks import check_attack_config, run_attack

    check_attack_config(attack_cfg)
    if attack_cfg.family not in ("fgsm", "pgd", "mifgsm", "none"):
        raise ValueError(f"adversarial training needs a gradient attack, got {attack_cfg.family!r}")
    x, y = _xy(dataset)
    result = result or TrainResult(model)
    attack_rng = make_rng(cfg.seed + 7919)

    def perturb(m, xb, yb):
        return run_attack(m, xb, yb, attack_cfg, attack_rng).x_adv

    first = len(result.metrics)
    _run_epochs(result, x, y, cfg, cfg.epochs, first, make_rng(cfg.seed), perturb=perturb)
    return result


def write_metrics_csv(metrics: list[EpochMetrics], path) -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["epoch", "split", "loss", "accuracy", "gamma"])
        for m in metrics:
            w.writerow([m.epoch, m.split, repr(float(m.loss)), repr(float(m.accuracy)),
                        "" if m.gamma is None else repr(float(m.gamma))])
