"""Dense numeric helpers shared by every other module.

Tensors are plain :class:`numpy.ndarray` objects (C order, float64 unless a
caller opts into float32).  This module adds the few things numpy does not
decide for us: argument validation, the seeding convention used for
reproducible Monte Carlo work, and a checked matrix-vector product.
"""

from __future__ import annotations

import numpy as np

Tensor = np.ndarray

DEFAULT_DTYPE = np.float64


def make_rng(seed: int) -> np.random.Generator:
    """Return a PCG64 generator for ``seed`` (a non-negative integer)."""
    if seed < 0:
        raise ValueError(f"seed must be non-negative, got {seed}")
    return np.random.Generator(np.random.PCG64(seed))


def trial_rng(base_seed: int, trial_index: int) -> np.random.Generator:
    """Independent generator for one trial of a sweep.

    Trial ``i`` always gets ``base_seed + i`` so any partition of a sweep
    across workers sees the same stream per trial.
    """
    return make_rng(base_seed + trial_index)


def as_tensor(data, dtype=DEFAULT_DTYPE) -> Tensor:
    return np.ascontiguousarray(data, dtype=dtype)


def gaussian_matrix(rows: int, cols: int, variance: float, rng: np.random.Generator,
                    dtype=DEFAULT_DTYPE) -> Tensor:
    """``rows x cols`` matrix with i.i.d. N(0, variance) entries."""
    if rows < 1 or cols < 1:
        raise ValueError(f"matrix dimensions must be positive, got {rows}x{cols}")
    if not variance > 0:
        raise ValueError(f"variance must be positive, got {variance}")
    out = rng.standard_normal((rows, cols))
    out *= np.sqrt(variance)
    return out.astype(dtype, copy=False)


def uniform(shape, low: float, high: float, rng: np.random.Generator,
            dtype=DEFAULT_DTYPE) -> Tensor:
    if high < low:
        raise ValueError(f"empty interval [{low}, {high}]")
    return rng.uniform(low, high, size=shape).astype(dtype, copy=False)


def random_unit_vector(m: int, rng: np.random.Generator) -> Tensor:
    """Uniform sample from the unit sphere in R^m."""
    if m < 1:
        raise ValueError(f"dimension must be positive, got {m}")
    v = rng.standard_normal(m)
    norm = np.linalg.norm(v)
    while norm == 0.0:  # pragma: no cover - probability zero
        v = rng.standard_normal(m)
        norm = np.linalg.norm(v)
    return v / norm


def matvec(W: Tensor, x: Tensor) -> Tensor:
    """``W @ x`` for a 2-D ``W`` and 1-D ``x`` with matching inner extent."""
    W = np.asarray(W)
    x = np.asarray(x)
    if W.ndim != 2 or x.ndim != 1:
        raise ValueError(f"matvec expects [l, m] and [m], got {W.shape} and {x.shape}")
    if W.shape[1] != x.shape[0]:
        raise ValueError(f"inner dimensions differ: {W.shape} vs {x.shape}")
    return W @ x
