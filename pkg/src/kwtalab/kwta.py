"""k-Winners-Take-All activation.

``phi_k(y)`` keeps the ``k`` largest entries of ``y`` and zeroes the rest.
When several entries tie for the k-th largest value the ones with smaller
indices are kept first, so exactly ``k`` slots win for every input.

Selection uses ``np.partition`` (linear time) plus an explicit tie pass, and
is bit-identical to a stable full sort on (value descending, index
ascending).
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .tensor import Tensor


@dataclass(frozen=True)
class KwtaConfig:
    gamma: float

    def __post_init__(self):
        check_gamma(self.gamma)


@dataclass(frozen=True)
class ActivationPattern:
    """Winning index set of one layer, sorted ascending."""

    indices: tuple[int, ...]
    n: int

    def __post_init__(self):
        idx = self.indices
        if any(b <= a for a, b in zip(idx, idx[1:])):
            raise ValueError("pattern indices must be strictly increasing")
        if idx and (idx[0] < 0 or idx[-1] >= self.n):
            raise ValueError(f"pattern index out of range for width {self.n}")

    @property
    def k(self) -> int:
        return len(self.indices)

    def __len__(self) -> int:
        return len(self.indices)

    def __contains__(self, j) -> bool:
        return j in set(self.indices)

    def mask(self) -> np.ndarray:
        m = np.zeros(self.n, dtype=bool)
        m[list(self.indices)] = True
        return m

    @classmethod
    def from_mask(cls, mask) -> "ActivationPattern":
        mask = np.asarray(mask, dtype=bool)
        return cls(tuple(int(i) for i in np.flatnonzero(mask)), mask.size)


def check_gamma(gamma: float) -> None:
    if not (0.0 < gamma <= 1.0):
        raise ValueError(f"sparsity ratio must lie in (0, 1], got {gamma}")


def k_from_gamma(gamma: float, n: int) -> int:
    """Number of winners for a layer of width ``n``: ``max(1, floor(gamma*n))``."""
    check_gamma(gamma)
    if n < 1:
        raise ValueError(f"layer width must be positive, got {n}")
    # floor(gamma*n) computed in floats can land one below an exact integer
    # product (e.g. 0.29*100); nudge by a relative ulp-scale guard.
    k = math.floor(gamma * n * (1.0 + 1e-12))
    return min(n, max(1, k))


def _check_k(k: int, n: int) -> None:
    if not (1 <= k <= n):
        raise ValueError(f"k must satisfy 1 <= k <= {n}, got {k}")


def winner_mask(y, k: int) -> np.ndarray:
    """Boolean winner mask along the last axis of ``y``.

    Works on a single vector or on any leading batch shape.
    """
    y = np.asarray(y)
    if y.ndim == 0:
        raise ValueError("k-WTA needs at least a 1-D input")
    n = y.shape[-1]
    _check_k(k, n)
    if np.isnan(y).any():
        raise ValueError("k-WTA input contains NaN")
    if k == n:
        return np.ones(y.shape, dtype=bool)
    rows = y.reshape(-1, n)
    kth = -np.partition(-rows, k - 1, axis=1)[:, k - 1:k]
    above = rows > kth
    tied = rows == kth
    need = k - above.sum(axis=1, keepdims=True)
    take = tied & (np.cumsum(tied, axis=1) <= need)
    return (above | take).reshape(y.shape)


def kwta_forward(y, k: int) -> Tensor:
    y = np.asarray(y)
    return np.where(winner_mask(y, k), y, np.zeros((), dtype=y.dtype))


def activation_pattern(y, k: int) -> ActivationPattern:
    y = np.asarray(y)
    if y.ndim != 1:
        raise ValueError(f"activation_pattern expects a vector, got shape {y.shape}")
    return ActivationPattern.from_mask(winner_mask(y, k))


def kwta_backward(grad_out, pattern: ActivationPattern | np.ndarray) -> Tensor:
    """Pass ``grad_out`` through on winners, zero elsewhere.

    ``pattern`` may be an :class:`ActivationPattern` or a boolean mask of the
    same shape as ``grad_out``.
    """
    grad_out = np.asarray(grad_out)
    mask = pattern.mask() if isinstance(pattern, ActivationPattern) else np.asarray(pattern, dtype=bool)
    if mask.shape != grad_out.shape:
        raise ValueError(f"gradient shape {grad_out.shape} does not match pattern {mask.shape}")
    return np.where(mask, grad_out, np.zeros((), dtype=grad_out.dtype))


def kwta_forward_chw(t, cfg: KwtaConfig) -> Tensor:
    """Apply k-WTA to a C x H x W tensor treated as one long vector."""
    t = np.asarray(t)
    if t.ndim != 3 or min(t.shape) < 1:
        raise ValueError(f"expected a C x H x W tensor, got shape {t.shape}")
    flat = t.reshape(-1)
    k = k_from_gamma(cfg.gamma, flat.size)
    return kwta_forward(flat, k).reshape(t.shape)


def pattern_margin(y, k: int) -> np.ndarray:
    """Gap between the k-th and (k+1)-th largest values along the last axis.

    ``inf`` when ``k`` equals the width (no loser exists).
    """
    y = np.asarray(y)
    n = y.shape[-1]
    _check_k(k, n)
    if k == n:
        return np.full(y.shape[:-1], np.inf)
    part = -np.partition(-y.reshape(-1, n), (k - 1, k), axis=1)
    return (part[:, k - 1] - part[:, k]).reshape(y.shape[:-1])
