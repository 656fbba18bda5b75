"""Monte Carlo probes of k-WTA discontinuity geometry.

Each sweep draws random layers ``W`` with i.i.d. N(0, 1/l) entries and zero
bias, and records per-trial outcomes as plain dict rows so they can be
written to CSV verbatim.  Trial ``i`` of a sweep always uses the generator
seeded with ``seed + i``; aggregates therefore do not depend on how trials
are split across workers.
"""

from __future__ import annotations

import csv
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from functools import partial

import numpy as np

from . import nn
from .kwta import ActivationPattern, k_from_gamma, winner_mask
from .tensor import gaussian_matrix, random_unit_vector, trial_rng

GAMMA_MAX = 0.48
ADMISSIBLE_RETRY_BUDGET = 100_000


class ConfigError(ValueError):
    pass


class PreconditionError(ValueError):
    pass


# ---------------------------------------------------------------------------
# reports


@dataclass
class TrialReport:
    config: dict
    trials: int
    successes: int
    seed: int
    stats: dict = field(default_factory=dict)
    rows: list[dict] = field(default_factory=list)

    def __post_init__(self):
        if self.successes > self.trials:
            raise ValueError("success count exceeds trial count")

    @property
    def fraction(self) -> float:
        return self.successes / self.trials if self.trials else float("nan")

    @property
    def stderr(self) -> float:
        p = self.fraction
        return math.sqrt(max(p * (1 - p), 0.0) / self.trials) if self.trials else float("nan")

    def summary_row(self) -> dict:
        row = dict(self.config)
        row.update(trials=self.trials, successes=self.successes, fraction=self.fraction,
                   stderr=self.stderr, seed=self.seed)
        row.update(self.stats)
        return row


def non_decreasing_within(reports: list[TrialReport], sigmas: float = 2.0) -> bool:
    """True if success fractions never drop by more than ``sigmas`` combined
    binomial standard errors between consecutive reports."""
    for a, b in zip(reports, reports[1:]):
        slack = sigmas * math.hypot(a.stderr, b.stderr)
        if b.fraction < a.fraction - slack:
            return False
    return True


def _fmt(v):
    if isinstance(v, (bool, np.bool_)):
        return int(v)
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    if isinstance(v, (list, tuple)):
        return " ".join(str(x) for x in v)
    return v


def write_rows_csv(rows: list[dict], path) -> None:
    """Write dict rows to CSV with a header from the union of keys (first-seen order)."""
    keys: list[str] = []
    for r in rows:
        for k in r:
            if k not in keys:
                keys.append(k)
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(keys)
        for r in rows:
            w.writerow([_fmt(r.get(k, "")) for k in keys])


def run_trials(fn, n: int, seed: int, threads: int = 1) -> list[dict]:
    """Evaluate ``fn(rng, index)`` for ``index in range(n)`` in order."""
    if threads <= 1 or n < 2:
        return [fn(trial_rng(seed, i), i) for i in range(n)]
    with ProcessPoolExecutor(max_workers=threads) as pool:
        return list(pool.map(partial(_seeded_call, fn, seed), range(n), chunksize=max(1, n // (4 * threads))))


def _seeded_call(fn, seed, i):
    return fn(trial_rng(seed, i), i)


# ---------------------------------------------------------------------------
# perpendicular perturbation and dense discontinuities


def perpendicular_perturb(x, beta: float, rng) -> np.ndarray:
    """``x + sqrt(beta)*|x|*u`` with ``u`` a uniform unit vector orthogonal to ``x``.

    The squared perpendicular distance relative to ``|x|^2`` is exactly ``beta``.
    """
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 1 or x.size < 2:
        raise ValueError("need a vector of dimension >= 2 to have an orthogonal direction")
    norm = np.linalg.norm(x)
    if norm == 0:
        raise ValueError("x must be nonzero")
    if not beta > 0:
        raise ValueError(f"beta must be positive, got {beta}")
    unit = x / norm
    while True:
        g = rng.standard_normal(x.size)
        g -= (g @ unit) * unit
        g -= (g @ unit) * unit  # second pass tightens orthogonality to ~1e-16
        gn = np.linalg.norm(g)
        if gn > 1e-8:
            break
    return x + math.sqrt(beta) * norm * (g / gn)


@dataclass
class DenseTrialConfig:
    m: int = 8
    l: int = 4096
    gamma: float = 0.3
    beta: float = 0.25
    trials: int = 1000
    seed: int = 0

    def __post_init__(self):
        if not 0 < self.gamma < GAMMA_MAX:
            raise ConfigError(f"gamma must lie in (0, {GAMMA_MAX}), got {self.gamma}")
        if not 0 < self.beta < 1:
            raise ConfigError(f"beta must lie in (0, 1), got {self.beta}")
        if self.m < 2 or self.l < self.m:
            raise ConfigError(f"need l >= m >= 2, got m={self.m}, l={self.l}")
        if math.floor(self.gamma * self.l) < 1:
            raise ConfigError(f"gamma*l = {self.gamma * self.l} < 1 leaves no winners")
        if self.trials < 1:
            raise ConfigError("trials must be positive")

    @property
    def k(self) -> int:
        return k_from_gamma(self.gamma, self.l)


def _dense_trial(cfg: DenseTrialConfig, rng, i: int) -> dict:
    W = gaussian_matrix(cfg.l, cfg.m, 1.0 / cfg.l, rng)
    x = random_unit_vector(cfg.m, rng)
    xp = perpendicular_perturb(x, cfg.beta, rng)
    a = winner_mask(W @ x, cfg.k)
    b = winner_mask(W @ xp, cfg.k)
    changed = int((a & ~b).sum())
    return {"l": cfg.l, "trial": i, "success": bool(changed), "swapped": changed}


def dense_discontinuity_trial(cfg: DenseTrialConfig, threads: int = 1) -> TrialReport:
    """Fraction of random layers whose activation pattern differs between
    ``x`` and a perpendicular perturbation with ratio ``beta``."""
    rows = run_trials(partial(_dense_trial, cfg), cfg.trials, cfg.seed, threads)
    swapped = np.array([r["swapped"] for r in rows], dtype=float)
    stats = {"mean_swapped": float(swapped.mean()), "max_swapped": float(swapped.max()), "k": cfg.k}
    return TrialReport(asdict(cfg), cfg.trials, sum(r["success"] for r in rows), cfg.seed, stats, rows)


# ---------------------------------------------------------------------------
# disjoint patterns and label fitting


def max_pairwise_cosine(xs) -> float:
    xs = np.asarray(xs, dtype=np.float64)
    if len(xs) < 2:
        return -1.0
    u = xs / np.linalg.norm(xs, axis=1, keepdims=True)
    c = u @ u.T
    np.fill_diagonal(c, -np.inf)
    return float(c.max())


def check_admissible(xs, alpha: float) -> None:
    """Raise unless every pair of points has cosine similarity <= alpha."""
    xs = np.asarray(xs, dtype=np.float64)
    if np.any(np.linalg.norm(xs, axis=1) == 0):
        raise PreconditionError("points must be nonzero")
    c = max_pairwise_cosine(xs)
    if c > alpha:
        raise PreconditionError(f"pairwise cosine {c:.6f} exceeds alpha={alpha}")


def admissible_points(n: int, m: int, alpha: float, rng, budget: int = ADMISSIBLE_RETRY_BUDGET) -> np.ndarray:
    """Rejection-sample ``n`` unit vectors with pairwise cosine <= alpha."""
    pts = []
    tries = 0
    while len(pts) < n:
        if tries >= budget:
            raise ConfigError(f"could not place {n} points with cosine <= {alpha} in R^{m} within {budget} draws")
        tries += 1
        v = random_unit_vector(m, rng)
        if all(v @ p <= alpha for p in pts):
            pts.append(v)
    return np.array(pts)


@dataclass
class DisjointTrialConfig:
    m: int = 16
    l: int = 16384
    k: int = 4
    n_points: int = 10
    alpha: float = 0.5
    trials: int = 100
    seed: int = 0

    def __post_init__(self):
        # alpha = 0.5 is admitted: cosine <= 0.5 implies cosine <= alpha' for every alpha' in (0.5, 1).
        if not 0.5 <= self.alpha < 1:
            raise ConfigError(f"alpha must lie in [0.5, 1), got {self.alpha}")
        if self.n_points < 1:
            raise ConfigError("need at least one point")
        if not 1 <= self.k <= self.l:
            raise ConfigError(f"k must lie in [1, l], got {self.k}")
        if self.m < 1 or self.trials < 1:
            raise ConfigError("m and trials must be positive")


def pattern_masks(W, xs, k: int) -> np.ndarray:
    """Winner masks of ``W x_i`` for each row ``x_i`` (shape ``[N, l]``)."""
    return winner_mask(np.asarray(xs) @ np.asarray(W).T, k)


def fit_labels(W, xs, zs, k: int) -> np.ndarray:
    """Output weights ``v`` with ``<v, phi_k(W x_i)> = z_i`` for every point.

    Needs pairwise disjoint activation patterns.  ``v`` is zero except at one
    winning unit per point (the winner with the largest magnitude), where it
    is ``z_i / (W_t x_i)``.
    """
    W = np.asarray(W, dtype=np.float64)
    xs = np.atleast_2d(np.asarray(xs, dtype=np.float64))
    zs = np.atleast_1d(np.asarray(zs, dtype=np.float64))
    if len(xs) != len(zs):
        raise ValueError("need one label per point")
    Y = xs @ W.T
    masks = winner_mask(Y, k)
    overlap = masks.astype(np.int64) @ masks.T.astype(np.int64)
    np.fill_diagonal(overlap, 0)
    if overlap.any():
        i, j = np.argwhere(overlap)[0]
        raise PreconditionError(f"patterns of points {i} and {j} intersect; enlarge l")
    v = np.zeros(W.shape[0])
    for i in range(len(xs)):
        winners = np.flatnonzero(masks[i])
        t = winners[np.argmax(np.abs(Y[i, winners]))]
        if Y[i, t] == 0:
            raise PreconditionError(f"point {i} has no nonzero winning unit")
        v[t] = zs[i] / Y[i, t]
    return v


def fit_labels_error(W, xs, zs, v, k: int) -> float:
    """Largest relative residual ``|<v, phi_k(W x_i)> - z_i| / max(1, |z_i|)``."""
    Y = np.asarray(xs) @ np.asarray(W).T
    out = np.where(winner_mask(Y, k), Y, 0.0) @ v
    zs = np.asarray(zs, dtype=np.float64)
    return float(np.max(np.abs(out - zs) / np.maximum(1.0, np.abs(zs))))


def _disjoint_trial(cfg: DisjointTrialConfig, with_fit: bool, rng, i: int) -> dict:
    xs = admissible_points(cfg.n_points, cfg.m, cfg.alpha, rng)
    W = gaussian_matrix(cfg.l, cfg.m, 1.0 / cfg.l, rng)
    masks = pattern_masks(W, xs, cfg.k)
    overlap = masks.astype(np.int64) @ masks.T.astype(np.int64)
    iu = np.triu_indices(cfg.n_points, 1)
    pair = overlap[iu]
    disjoint = not pair.any()
    row = {"trial": i, "success": disjoint,
           "mean_intersection": float(pair.mean()) if pair.size else 0.0,
           "max_intersection": int(pair.max()) if pair.size else 0,
           "disjoint_pairs": int((pair == 0).sum())}
    if with_fit:
        zs = rng.uniform(-1.0, 1.0, cfg.n_points)
        if disjoint:
            v = fit_labels(W, xs, zs, cfg.k)
            row["fit_error"] = fit_labels_error(W, xs, zs, v, cfg.k)
        else:
            row["fit_error"] = float("nan")
    return row


def disjoint_pattern_trial(cfg: DisjointTrialConfig, with_fit: bool = True, threads: int = 1) -> TrialReport:
    """Fraction of random layers giving pairwise-disjoint patterns to ``N``
    well-separated points; on disjoint trials also fits random labels."""
    rows = run_trials(partial(_disjoint_trial, cfg, with_fit), cfg.trials, cfg.seed, threads)
    inter = np.array([r["mean_intersection"] for r in rows])
    stats = {"mean_intersection": float(inter.mean()),
             "max_intersection": max(r["max_intersection"] for r in rows),
             "pair_disjoint_fraction": sum(r["disjoint_pairs"] for r in rows)
             / max(1, cfg.trials * cfg.n_points * (cfg.n_points - 1) // 2)}
    if with_fit:
        errs = [r["fit_error"] for r in rows if r["success"]]
        stats["max_fit_error"] = max(errs) if errs else float("nan")
    return TrialReport(asdict(cfg), cfg.trials, sum(r["success"] for r in rows), cfg.seed, stats, rows)


# ---------------------------------------------------------------------------
# Bernoulli data


def bernoulli_p_range(n_points: int, m: int) -> tuple[float, float]:
    """Open interval of p for which the Bernoulli-data result is stated."""
    return 100 * math.log(n_points) / m, 0.5


def bernoulli_experiment(n_points: int, m: int, p: float, l: int, gamma: float, trials: int,
                         seed: int = 0, strict: bool = False, threads: int = 1) -> TrialReport:
    """Fraction of random layers giving every Bernoulli(p) point its own pattern.

    Duplicate or all-zero points are redrawn.  ``strict`` enforces the
    asymptotic lower bound on ``p``; by default only ``0 < p <= 0.5`` is
    required, since that bound is vacuous at desk-scale ``m``.
    """
    if not 0 < gamma < GAMMA_MAX:
        raise ConfigError(f"gamma must lie in (0, {GAMMA_MAX}), got {gamma}")
    lo, hi = bernoulli_p_range(n_points, m)
    if strict and not lo < p < hi:
        raise ConfigError(f"p={p} outside ({lo:.4f}, {hi})")
    if not 0 < p <= hi:
        raise ConfigError(f"p must lie in (0, {hi}], got {p}")
    if n_points < 1 or trials < 1 or l < 1:
        raise ConfigError("n_points, l and trials must be positive")
    k = k_from_gamma(gamma, l)

    rows = run_trials(partial(_bernoulli_trial, n_points, m, p, l, k), trials, seed, threads)
    cfg = {"n_points": n_points, "m": m, "p": p, "l": l, "gamma": gamma, "k": k}
    return TrialReport(cfg, trials, sum(r["success"] for r in rows), seed, {}, rows)


def _bernoulli_trial(n_points, m, p, l, k, rng, i):
    xs = bernoulli_points(n_points, m, p, rng)
    W = gaussian_matrix(l, m, 1.0 / l, rng)
    masks = pattern_masks(W, xs, k)
    distinct = len({r.tobytes() for r in masks}) == n_points
    return {"trial": i, "success": distinct}


def bernoulli_points(n: int, m: int, p: float, rng) -> np.ndarray:
    """``n`` distinct nonzero 0/1 vectors with i.i.d. Bernoulli(p) entries;
    duplicates and the zero vector are redrawn."""
    if n > 2 ** m - 1:
        raise ConfigError(f"only {2 ** m - 1} distinct nonzero binary points exist in dimension {m}")
    if not 0 < p <= 1:
        raise ConfigError(f"p must lie in (0, 1], got {p}")
    pts: list[np.ndarray] = []
    seen = set()
    while len(pts) < n:
        v = (rng.random(m) < p).astype(np.float64)
        key = v.tobytes()
        if v.any() and key not in seen:
            seen.add(key)
            pts.append(v)
    return np.array(pts)


# ---------------------------------------------------------------------------
# jumps at pattern boundaries


@dataclass
class JumpReport:
    found: bool
    t: float = float("nan")
    leaving: int = -1
    entering: int = -1
    x_star: float = float("nan")
    gap: float = float("nan")
    swaps: int = 0
    jump_vector: np.ndarray | None = None

    @property
    def magnitude(self) -> float:
        return abs(self.x_star)

    @property
    def jump_norm(self) -> float:
        return float(np.linalg.norm(self.jump_vector)) if self.jump_vector is not None else float("nan")


def measure_jump(W, x, u, gamma: float, t_max: float = 1.0, n_scan: int = 1024,
                 W_next=None) -> JumpReport:
    """Locate the first activation-pattern change along ``x + t*u``, ``t in (0, t_max]``.

    A uniform scan brackets the first change; bisection then narrows the
    bracket to floating-point resolution.  At the crossing the leaving unit
    ``i`` and entering unit ``j`` share the value ``x_star``; with ``W_next``
    the output jump ``(W_next[:, j] - W_next[:, i]) * x_star`` is reported too.
    """
    W = np.asarray(W, dtype=np.float64)
    x = np.asarray(x, dtype=np.float64)
    u = np.asarray(u, dtype=np.float64)
    if abs(abs(x @ u) - np.linalg.norm(x) * np.linalg.norm(u)) <= 1e-12 * np.linalg.norm(x) * np.linalg.norm(u):
        raise ValueError("direction u must not be parallel to x")
    a, c = W @ x, W @ u
    k = k_from_gamma(gamma, a.size)
    if k == a.size:
        return JumpReport(False)
    base = winner_mask(a, k)
    ts = np.linspace(0.0, t_max, n_scan + 1)[1:]
    masks = winner_mask(a[None, :] + ts[:, None] * c[None, :], k)
    differs = np.flatnonzero((masks != base).any(axis=1))
    if differs.size == 0:
        return JumpReport(False)
    first = differs[0]
    lo = 0.0 if first == 0 else ts[first - 1]
    hi = ts[first]
    for _ in range(200):
        mid = 0.5 * (lo + hi)
        if mid <= lo or mid >= hi:
            break
        if np.array_equal(winner_mask(a + mid * c, k), base):
            lo = mid
        else:
            hi = mid
    after = winner_mask(a + hi * c, k)
    leaving = np.flatnonzero(base & ~after)
    entering = np.flatnonzero(after & ~base)
    i, j = int(leaving[0]), int(entering[0])
    vi, vj = a[i] + hi * c[i], a[j] + hi * c[j]
    x_star = 0.5 * (vi + vj)
    jump = None
    if W_next is not None:
        W_next = np.asarray(W_next, dtype=np.float64)
        jump = (W_next[:, j] - W_next[:, i]) * x_star
    return JumpReport(True, hi, i, j, float(x_star), float(abs(vi - vj)), int(leaving.size), jump)


def first_crossing_exact(a, c, k: int) -> float:
    """Smallest ``t > 0`` at which a loser line ``a_j + t c_j`` overtakes a
    winner line ``a_i + t c_i`` (``inf`` if none).  Reference for tests."""
    a = np.asarray(a, dtype=np.float64)
    c = np.asarray(c, dtype=np.float64)
    win = winner_mask(a, k)
    ai, ci = a[win][:, None], c[win][:, None]
    aj, cj = a[~win][None, :], c[~win][None, :]
    dc = cj - ci
    with np.errstate(divide="ignore", invalid="ignore"):
        t = np.where(dc > 0, (ai - aj) / dc, np.inf)
    t = t[t > 0]
    return float(t.min()) if t.size else float("inf")


def _jump_trial(l: int, m: int, gamma: float, t_max: float, rng, i: int) -> dict:
    W = gaussian_matrix(l, m, 1.0 / l, rng)
    x = random_unit_vector(m, rng)
    u = perpendicular_perturb(x, 1.0, rng) - x
    W_next = gaussian_matrix(10, l, 0.1, rng)
    rep = measure_jump(W, x, u, gamma, t_max=t_max, W_next=W_next)
    return {"gamma": gamma, "trial": i, "found": rep.found, "t": rep.t, "leaving": rep.leaving,
            "entering": rep.entering, "x_star": rep.x_star, "abs_x_star": rep.magnitude,
            "gap": rep.gap, "swaps": rep.swaps, "jump_norm": rep.jump_norm}


def jump_sweep(gammas, l: int = 512, m: int = 32, crossings: int = 200, seed: int = 0,
               t_max: float = 1.0, threads: int = 1) -> list[TrialReport]:
    """Mean ``|x_star|`` at the first pattern change, one report per gamma."""
    reports = []
    for gamma in gammas:
        if not 0 < gamma <= 1:
            raise ConfigError(f"gamma must lie in (0, 1], got {gamma}")
        rows = run_trials(partial(_jump_trial, l, m, gamma, t_max), crossings, seed, threads)
        found = [r for r in rows if r["found"]]
        mags = np.array([r["abs_x_star"] for r in found])
        gaps = np.array([r["gap"] for r in found])
        stats = {"k": k_from_gamma(gamma, l),
                 "mean_abs_x_star": float(mags.mean()) if found else float("nan"),
                 "max_gap": float(gaps.max()) if found else float("nan"),
                 "mean_jump_norm": float(np.mean([r["jump_norm"] for r in found])) if found else float("nan")}
        cfg = {"gamma": gamma, "l": l, "m": m, "t_max": t_max}
        reports.append(TrialReport(cfg, crossings, len(found), seed, stats, rows))
    return reports


# ---------------------------------------------------------------------------
# piecewise linearity of whole networks


@dataclass
class AffineCheck:
    defect: float
    retained: int
    discarded: int

    @property
    def region_too_thin(self) -> bool:
        return self.retained == 0


def _all_masks(trace) -> list:
    return [m for m in trace.masks if m is not None]


def affine_region_check(model, x, n_probes: int, probe_scale: float, rng) -> AffineCheck:
    """Second-difference test of local affinity.

    For random probe pairs ``h1, h2`` (entries uniform in ``+-probe_scale``)
    whose four evaluation points share every activation mask with ``x``,
    returns the largest ``|f(x+h1+h2) - f(x+h1) - f(x+h2) + f(x)|_inf``
    divided by the largest output magnitude among the four points.
    Probes that change any mask are discarded and counted.
    """
    x = np.asarray(x, dtype=model.dtype)
    h1 = rng.uniform(-probe_scale, probe_scale, (n_probes,) + x.shape)
    h2 = rng.uniform(-probe_scale, probe_scale, (n_probes,) + x.shape)
    pts = np.concatenate([x[None], x + h1, x + h2, x + h1 + h2])
    trace = nn.forward(model, pts)
    f = trace.logits
    keep = np.ones(n_probes, dtype=bool)
    for m in _all_masks(trace):
        flat = m.reshape(len(pts), -1)
        same = (flat[1:] == flat[0]).all(axis=1).reshape(3, n_probes)
        keep &= same.all(axis=0)
    f0, f1 = f[0], f[1:1 + n_probes]
    f2, f12 = f[1 + n_probes:1 + 2 * n_probes], f[1 + 2 * n_probes:]
    defect = 0.0
    for p in np.flatnonzero(keep):
        scale = max(np.abs(f0).max(), np.abs(f1[p]).max(), np.abs(f2[p]).max(), np.abs(f12[p]).max(), 1e-300)
        defect = max(defect, float(np.abs(f12[p] - f1[p] - f2[p] + f0).max() / scale))
    return AffineCheck(defect, int(keep.sum()), int((~keep).sum()))


def region_linear_map(model, x) -> tuple[np.ndarray, np.ndarray]:
    """Freeze the masks recorded at ``x`` and probe basis vectors to get the
    affine map ``f(z) = A z + c`` of that region (``z`` flattened)."""
    x = np.asarray(x, dtype=model.dtype)
    trace = nn.forward(model, x[None])
    d = x.size
    basis = np.eye(d).reshape((d,) + x.shape)
    pts = np.concatenate([np.zeros((1,) + x.shape), basis])
    masks = [m[0] if m is not None else None for m in trace.masks]
    out = nn.forward(model, pts, masks=masks).logits
    c = out[0]
    A = (out[1:] - c).T
    return A, c


# ---------------------------------------------------------------------------
# loss landscape


@dataclass
class Landscape:
    eps: np.ndarray
    loss: np.ndarray  # [samples, samples], loss[i, j] at (eps[i], eps[j])
    g1: np.ndarray
    g2: np.ndarray
    fallback: bool

    def rows(self) -> list[dict]:
        n = len(self.eps)
        return [{"eps1": self.eps[i], "eps2": self.eps[j], "loss": self.loss[i, j]}
                for i in range(n) for j in range(n)]


def loss_landscape(model, x, y: int, rng, range_eps: float = 0.04, samples_per_axis: int = 50) -> Landscape:
    """Cross-entropy on the grid ``x + e1*g1 + e2*g2``.

    ``g1`` is the sign of the input gradient (unit l-infinity size); ``g2``
    is a random Gaussian direction orthogonalised against ``g1`` and scaled to
    the same l2 norm.  A zero gradient falls back to a random sign vector.
    """
    x = np.asarray(x, dtype=model.dtype)
    _, grad = nn.loss_and_input_grad(model, x[None], np.array([y]))
    g1 = np.sign(grad[0])
    fallback = not g1.any()
    if fallback:
        g1 = rng.choice([-1.0, 1.0], size=x.shape)
    g2 = rng.standard_normal(x.shape)
    g2 -= (g2.ravel() @ g1.ravel()) / (g1.ravel() @ g1.ravel()) * g1
    g2 *= np.linalg.norm(g1) / np.linalg.norm(g2)
    eps = np.linspace(-range_eps, range_eps, samples_per_axis) if samples_per_axis > 1 else np.zeros(1)
    e1, e2 = np.meshgrid(eps, eps, indexing="ij")
    shape = (-1,) + (1,) * x.ndim
    pts = x + e1.reshape(shape) * g1 + e2.reshape(shape) * g2
    z = nn.logits(model, pts)
    losses, _ = nn.softmax_cross_entropy_batch(z, np.full(len(pts), y))
    return Landscape(eps, losses.reshape(e1.shape), g1, g2, fallback)


def laplacian_sign_changes(grid, rel_tol: float = 1e-9) -> int:
    """Sign flips of the 5-point discrete Laplacian between neighbouring
    interior cells.  Values within ``rel_tol * max|grid|`` of zero count as
    unsigned and never flip."""
    g = np.asarray(grid, dtype=np.float64)
    if g.shape[0] < 3 or g.shape[1] < 3:
        return 0
    lap = g[:-2, 1:-1] + g[2:, 1:-1] + g[1:-1, :-2] + g[1:-1, 2:] - 4 * g[1:-1, 1:-1]
    tol = rel_tol * max(np.abs(g).max(), 1e-300)
    s = np.where(np.abs(lap) > tol, np.sign(lap), 0)
    return int((s[1:, :] * s[:-1, :] < 0).sum() + (s[:, 1:] * s[:, :-1] < 0).sum())


def affine_plane_residual(eps, grid) -> float:
    """Max abs residual of a least-squares plane fit to the grid."""
    e1, e2 = np.meshgrid(eps, eps, indexing="ij")
    A = np.column_stack([np.ones(e1.size), e1.ravel(), e2.ravel()])
    coef, *_ = np.linalg.lstsq(A, np.asarray(grid).ravel(), rcond=None)
    return float(np.abs(A @ coef - np.asarray(grid).ravel()).max())


# ---------------------------------------------------------------------------
# one-dimensional fit demo


@dataclass
class Fit1DResult:
    t: np.ndarray
    pred: np.ndarray
    jumps: np.ndarray
    threshold: float
    model: nn.Model
    train_loss: float

    @property
    def jump_count(self) -> int:
        return int(self.jumps.size)

    def rows(self) -> list[dict]:
        jump_at = set(self.jumps.tolist())
        return [{"t": self.t[i], "pred": self.pred[i], "jump_after": i in jump_at} for i in range(len(self.t))]


def count_jumps(pred, factor: float = 5.0) -> tuple[np.ndarray, float]:
    """Indices ``i`` with ``|pred[i+1] - pred[i]|`` above ``factor`` times the
    median adjacent change (floored at 1e-9 of the output scale)."""
    pred = np.asarray(pred, dtype=np.float64)
    d = np.abs(np.diff(pred))
    if d.size == 0:
        return np.array([], dtype=int), 0.0
    floor = 1e-9 * max(1.0, float(np.abs(pred).max()))
    thr = max(factor * float(np.median(d)), floor)
    return np.flatnonzero(d > thr), thr


def fit_1d_demo(t, v, gamma: float, widths=(128, 128), train_cfg=None, seed: int = 0,
                n_eval: int = 2000, jump_factor: float = 5.0) -> Fit1DResult:
    """Fit ``(t, v)`` samples with a scalar k-WTA MLP by squared loss and count
    output jumps on a dense grid over the sample range."""
    from .tensor import make_rng
    from .training import TrainConfig, train_standard
    from .data import Dataset

    t = np.asarray(t, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    cfg = train_cfg or TrainConfig(epochs=400, batch_size=16, lr_schedule=((0, 0.003), (300, 0.0003)),
                                   momentum=0.9, seed=seed, loss="mse")
    if cfg.loss != "mse":
        raise ValueError("the 1-D fit trains with squared loss")
    specs = nn.mlp_specs(1, widths, 1, "kwta", gamma)
    model = nn.build_model(specs, make_rng(seed), name="fit1d", seed=seed)
    ds = Dataset(t[:, None], v[:, None], "fit1d")
    res = train_standard(model, ds, cfg)
    grid = np.linspace(t.min(), t.max(), n_eval)
    pred = nn.logits(model, grid[:, None])[:, 0]
    jumps, thr = count_jumps(pred, jump_factor)
    return Fit1DResult(grid, pred, jumps, thr, model, res.metrics[-1].loss if res.metrics else float("nan"))
