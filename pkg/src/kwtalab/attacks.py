"""White-box gradient attacks, random-noise search, transfer attacks and
robust-accuracy evaluation.

Every attack is untargeted under an l-infinity budget and operates on a
batch ``x`` of shape ``(n, *model.input_shape)`` with integer labels ``y``.
Perturbed inputs are always clipped back into the valid pixel range.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np

from . import nn
from .tensor import make_rng

FAMILIES = ("fgsm", "pgd", "mifgsm", "gaussian_noise", "none")


@dataclass
class AttackConfig:
    family: str = "pgd"
    epsilon: float = 0.3
    steps: int = 20
    step_size: float | None = None  # None means epsilon / 10
    random_init: bool = True
    decay: float = 1.0
    n_samples: int = 1000
    sigma: float | None = None  # gaussian_noise only; None means epsilon / 2
    clamp: tuple[float, float] = (0.0, 1.0)

    @property
    def alpha(self) -> float:
        return self.epsilon / 10 if self.step_size is None else self.step_size

    @property
    def noise_sigma(self) -> float:
        return self.epsilon / 2 if self.sigma is None else self.sigma


def check_attack_config(cfg: AttackConfig) -> None:
    if cfg.family not in FAMILIES:
        raise ValueError(f"unknown attack family {cfg.family!r}; choose from {FAMILIES}")
    if cfg.epsilon < 0:
        raise ValueError(f"epsilon must be non-negative, got {cfg.epsilon}")
    if cfg.family in ("pgd", "mifgsm") and cfg.steps < 1:
        raise ValueError(f"{cfg.family} needs at least one step")
    if cfg.family in ("pgd", "mifgsm") and cfg.epsilon > 0 and not cfg.alpha > 0:
        raise ValueError("step size must be positive")
    if cfg.decay < 0:
        raise ValueError("decay must be non-negative")
    if cfg.family == "gaussian_noise" and cfg.n_samples < 1:
        raise ValueError("gaussian_noise needs n_samples >= 1")
    lo, hi = cfg.clamp
    if hi < lo:
        raise ValueError(f"empty clamp range {cfg.clamp}")


@dataclass
class AttackResult:
    """Outcome for a batch: adversarial inputs, per-example success flags
    (prediction differs from the true label) and final losses."""

    x_adv: np.ndarray
    success: np.ndarray
    steps: int
    loss: np.ndarray
    pred: np.ndarray = field(default=None)

    def linf(self, x) -> np.ndarray:
        d = np.abs(self.x_adv - x)
        return d.reshape(len(d), -1).max(axis=1)


def _finish(model, x_adv, y, steps) -> AttackResult:
    losses, _ = nn.softmax_cross_entropy_batch(nn.logits(model, x_adv), y)
    pred = nn.predict(model, x_adv)
    return AttackResult(x_adv, pred != y, steps, losses, pred)


def _prepare(model, x, y, cfg):
    check_attack_config(cfg)
    x = np.asarray(x, dtype=model.dtype)
    if x.shape == model.input_shape:
        raise ValueError("attacks expect a batch; add a leading axis")
    return x, np.asarray(y, dtype=np.int64)


def _project(x_adv, x, eps, clamp):
    x_adv = np.clip(x_adv, x - eps, x + eps)
    return np.clip(x_adv, clamp[0], clamp[1])


def fgsm(model, x, y, cfg: AttackConfig) -> AttackResult:
    """One signed-gradient step of size epsilon."""
    x, y = _prepare(model, x, y, cfg)
    _, g = nn.loss_and_input_grad(model, x, y)
    x_adv = np.clip(x + cfg.epsilon * np.sign(g), cfg.clamp[0], cfg.clamp[1])
    return _finish(model, x_adv, y, 1)


def pgd(model, x, y, cfg: AttackConfig, rng=None, trajectory: list | None = None) -> AttackResult:
    """Iterated signed-gradient ascent projected onto the epsilon ball.

    With ``random_init`` the start point is ``x + U(-eps, eps)``.  If
    ``trajectory`` is a list, every iterate is appended to it.
    """
    x, y = _prepare(model, x, y, cfg)
    eps = cfg.epsilon
    if cfg.random_init:
        rng = rng if rng is not None else make_rng(0)
        x_adv = x + rng.uniform(-eps, eps, size=x.shape)
        x_adv = np.clip(x_adv, cfg.clamp[0], cfg.clamp[1])
    else:
        x_adv = x.copy()
    if trajectory is not None:
        trajectory.append(x_adv)
    for _ in range(cfg.steps):
        _, g = nn.loss_and_input_grad(model, x_adv, y)
        x_adv = _project(x_adv + cfg.alpha * np.sign(g), x, eps, cfg.clamp)
        if trajectory is not None:
            trajectory.append(x_adv)
    return _finish(model, x_adv, y, cfg.steps)


def mifgsm(model, x, y, cfg: AttackConfig, trajectory: list | None = None) -> AttackResult:
    """Momentum iterative attack: accumulate l1-normalised gradients with
    ``decay`` and step along the sign of the accumulator."""
    x, y = _prepare(model, x, y, cfg)
    acc = np.zeros_like(x)
    x_adv = x.copy()
    axes = tuple(range(1, x.ndim))
    for _ in range(cfg.steps):
        _, g = nn.loss_and_input_grad(model, x_adv, y)
        norm = np.abs(g).sum(axis=axes, keepdims=True)
        acc = cfg.decay * acc + np.divide(g, norm, out=np.zeros_like(g), where=norm > 0)
        x_adv = _project(x_adv + cfg.alpha * np.sign(acc), x, cfg.epsilon, cfg.clamp)
        if trajectory is not None:
            trajectory.append(x_adv)
    return _finish(model, x_adv, y, cfg.steps)


def gaussian_noise_attack(model, x, y, cfg: AttackConfig, rng=None, chunk: int = 250) -> AttackResult:
    """Brute-force search with clipped Gaussian noise.

    For each example draw ``n_samples`` perturbations ``N(0, sigma^2)``
    clipped to the epsilon ball and pixel range.  The first sample that
    changes the prediction is returned; otherwise the highest-loss sample.
    """
    x, y = _prepare(model, x, y, cfg)
    rng = rng if rng is not None else make_rng(0)
    sigma = cfg.noise_sigma
    out = np.empty_like(x)
    for i in range(len(x)):
        best, best_loss, found = x[i], -np.inf, False
        drawn = 0
        while drawn < cfg.n_samples and not found:
            m = min(chunk, cfg.n_samples - drawn)
            noise = rng.standard_normal((m,) + x.shape[1:]) * sigma
            cand = _project(x[i] + noise, x[i], cfg.epsilon, cfg.clamp)
            z = nn.logits(model, cand)
            losses, _ = nn.softmax_cross_entropy_batch(z, np.full(m, y[i]))
            flipped = np.flatnonzero(z.argmax(axis=1) != y[i])
            if flipped.size:
                best, found = cand[flipped[0]], True
            elif losses.max() > best_loss:
                j = int(losses.argmax())
                best, best_loss = cand[j], losses[j]
            drawn += m
        out[i] = best
    return _finish(model, out, y, cfg.n_samples)


def run_attack(model, x, y, cfg: AttackConfig, rng=None) -> AttackResult:
    if cfg.family == "none":
        x, y = _prepare(model, x, y, cfg)
        return _finish(model, x.copy(), y, 0)
    if cfg.family == "fgsm":
        return fgsm(model, x, y, cfg)
    if cfg.family == "pgd":
        return pgd(model, x, y, cfg, rng)
    if cfg.family == "mifgsm":
        return mifgsm(model, x, y, cfg)
    if cfg.family == "gaussian_noise":
        return gaussian_noise_attack(model, x, y, cfg, rng)
    raise ValueError(f"unknown attack family {cfg.family!r}")


@dataclass
class RobustReport:
    a_rob: float
    a_std: float
    rows: list[tuple]
    results: list[AttackResult]
    max_linf: float

    def summary(self) -> str:
        return f"A_std={self.a_std:.4f} A_rob={self.a_rob:.4f} n={len(self.rows)}"


def _evaluate(craft_model, eval_model, dataset, cfg, seed, batch_size, keep_results):
    x, y = dataset.images, np.asarray(dataset.labels, dtype=np.int64)
    if len(x) == 0:
        raise ValueError("dataset is empty")
    if tuple(craft_model.input_shape) != tuple(eval_model.input_shape):
        raise ValueError(f"input shapes differ: {craft_model.input_shape} vs {eval_model.input_shape}")
    rng = make_rng(seed)
    rows, results = [], []
    clean_hits = adv_hits = 0
    max_linf = 0.0
    for start in range(0, len(x), batch_size):
        xb, yb = x[start:start + batch_size], y[start:start + batch_size]
        res = run_attack(craft_model, xb, yb, cfg, rng)
        clean = nn.predict(eval_model, xb)
        adv = nn.predict(eval_model, res.x_adv)
        linf = res.linf(np.asarray(xb, dtype=res.x_adv.dtype))
        max_linf = max(max_linf, float(linf.max()))
        clean_hits += int((clean == yb).sum())
        adv_hits += int((adv == yb).sum())
        for j in range(len(xb)):
            rows.append((start + j, int(yb[j]), int(clean[j]), int(adv[j]), float(linf[j]), bool(adv[j] != yb[j])))
        if keep_results:
            results.append(res)
    n = len(x)
    return RobustReport(adv_hits / n, clean_hits / n, rows, results, max_linf)


def evaluate_robust_accuracy(model, dataset, cfg: AttackConfig, seed: int = 0,
                             batch_size: int = 128, keep_results: bool = False) -> RobustReport:
    """Fraction of examples still classified correctly after a per-example
    attack (``a_rob``), alongside clean accuracy (``a_std``)."""
    check_attack_config(cfg)
    return _evaluate(model, model, dataset, cfg, seed, batch_size, keep_results)


def transfer_attack(source_model, target_model, dataset, cfg: AttackConfig, seed: int = 0,
                    batch_size: int = 128) -> RobustReport:
    """Craft on ``source_model`` (white-box), score on ``target_model``.

    The target is only ever run forward.
    """
    check_attack_config(cfg)
    return _evaluate(source_model, target_model, dataset, cfg, seed, batch_size, False)


def write_attack_csv(report: RobustReport, path) -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["example_index", "true_label", "clean_pred", "adv_pred", "linf_norm", "success"])
        for idx, t, c, a, linf, s in report.rows:
            w.writerow([idx, t, c, a, repr(linf), int(s)])
