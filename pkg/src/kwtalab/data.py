"""MNIST IDX ingestion, subsetting and synthetic datasets."""

from __future__ import annotations

import gzip
import os
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

IMAGE_MAGIC = 2051
LABEL_MAGIC = 2049
DATA_DIR_ENV = "KWTALAB_DATA"

MNIST_FILES = {
    "train": ("train-images-idx3-ubyte", "train-labels-idx1-ubyte"),
    "test": ("t10k-images-idx3-ubyte", "t10k-labels-idx1-ubyte"),
}


class IdxFormatError(ValueError):
    pass


class BadMagicError(IdxFormatError):
    pass


class TruncatedFileError(IdxFormatError):
    pass


class CountMismatchError(IdxFormatError):
    pass


@dataclass
class Dataset:
    images: np.ndarray
    labels: np.ndarray
    name: str = ""
    split: str = ""
    tags: dict = field(default_factory=dict)

    def __len__(self):
        return len(self.labels)

    def take(self, idx, name=None) -> "Dataset":
        idx = np.asarray(idx)
        return Dataset(self.images[idx], self.labels[idx], name or self.name, self.split,
                       dict(self.tags, indices=idx))


def _read_bytes(path) -> bytes:
    path = Path(path)
    with open(path, "rb") as f:
        head = f.read(2)
    opener = gzip.open if head == b"\x1f\x8b" else open
    with opener(path, "rb") as f:
        return f.read()


def _parse(buf: bytes, expected_magic: int, path) -> tuple[int, tuple[int, ...], bytes]:
    if len(buf) < 8:
        raise TruncatedFileError(f"{path}: file too short for an IDX header")
    (magic,) = struct.unpack(">i", buf[:4])
    if magic != expected_magic:
        raise BadMagicError(f"{path}: bad magic {magic}, expected {expected_magic}")
    ndim = buf[3]
    header = 4 + 4 * ndim
    if len(buf) < header:
        raise TruncatedFileError(f"{path}: truncated IDX header")
    dims = struct.unpack(f">{ndim}i", buf[4:header])
    body = buf[header:]
    need = int(np.prod(dims))
    if len(body) < need:
        raise TruncatedFileError(f"{path}: expected {need} data bytes, found {len(body)}")
    return dims[0], tuple(dims), body[:need]


def load_idx(images_path, labels_path, name: str = "mnist", split: str = "") -> Dataset:
    """Read an IDX image/label pair (raw or gzipped).

    Pixels are scaled by 1/255 into [0, 1]; images come back as
    ``[n, 1, rows, cols]`` float64.
    """
    n_img, dims, body = _parse(_read_bytes(images_path), IMAGE_MAGIC, images_path)
    n_lab, _, lab_body = _parse(_read_bytes(labels_path), LABEL_MAGIC, labels_path)
    if n_img != n_lab:
        raise CountMismatchError(f"{images_path} has {n_img} images but {labels_path} has {n_lab} labels")
    pixels = np.frombuffer(body, dtype=np.uint8).reshape(dims[0], 1, *dims[1:])
    images = pixels.astype(np.float64) / 255.0
    labels = np.frombuffer(lab_body, dtype=np.uint8).astype(np.int64)
    return Dataset(images, labels, name, split)


def find_mnist_dir(path=None) -> Path:
    """Resolve the MNIST directory from ``path`` or ``$KWTALAB_DATA``."""
    candidate = path or os.environ.get(DATA_DIR_ENV)
    if not candidate:
        raise FileNotFoundError(f"no MNIST directory given; pass a path or set ${DATA_DIR_ENV}")
    candidate = Path(candidate)
    if not candidate.is_dir():
        raise FileNotFoundError(f"MNIST directory {candidate} does not exist")
    return candidate


def _resolve(directory: Path, stem: str) -> Path:
    for name in (stem, stem + ".gz", stem.replace("-idx", ".idx")):
        p = directory / name
        if p.exists():
            return p
    raise FileNotFoundError(f"{stem}[.gz] not found in {directory}")


def load_mnist(split: str = "train", directory=None) -> Dataset:
    directory = find_mnist_dir(directory)
    img, lab = MNIST_FILES[split]
    return load_idx(_resolve(directory, img), _resolve(directory, lab), "mnist", split)


def _class_balanced(labels, tolerance=0.2) -> bool:
    counts = np.bincount(labels)
    counts = counts[counts > 0] if counts.size else counts
    classes = max(len(counts), 1)
    expected = len(labels) / classes
    return bool(np.all(np.abs(counts - expected) <= tolerance * expected))


def subset(ds: Dataset, n: int, seed: int) -> Dataset:
    """Seeded uniform sample of ``n`` examples without replacement.

    For ``n >= 1000`` the class histogram must sit within 20% of uniform;
    one reseeded draw is attempted if the first misses.
    """
    if n < 1 or n > len(ds):
        raise ValueError(f"cannot take {n} examples from a dataset of {len(ds)}")
    rng = np.random.Generator(np.random.PCG64(seed))
    idx = rng.choice(len(ds), size=n, replace=False)
    if n >= 1000 and not _class_balanced(ds.labels[idx]):
        idx = rng.choice(len(ds), size=n, replace=False)
    out = ds.take(idx, f"{ds.name}[{n}]")
    out.tags["seed"] = seed
    return out


def synthetic_blobs(n: int, rng, mu=(3.0, 0.0), sigma: float = 0.5, min_margin: float = 2.0) -> Dataset:
    """Two isotropic Gaussians at +mu (label 1) and -mu (label 0) in 2-D.

    Points closer than ``min_margin / 2`` to the separating hyperplane
    ``<mu, x> = 0`` are redrawn, so the two classes are separated by at
    least ``min_margin`` along ``mu``.
    """
    if n < 1:
        raise ValueError("blob count must be positive")
    mu = np.asarray(mu, dtype=np.float64)
    norm = np.linalg.norm(mu)
    if norm == 0 or min_margin < 0 or norm <= min_margin / 2:
        raise ValueError("degenerate margin: |mu| must exceed min_margin/2 > 0")
    u = mu / norm
    labels = np.arange(n) % 2
    sign = np.where(labels == 1, 1.0, -1.0)[:, None]
    pts = sign * mu + sigma * rng.standard_normal((n, 2))
    for _ in range(1000):
        bad = (sign[:, 0] * (pts @ u)) < min_margin / 2
        if not bad.any():
            break
        pts[bad] = sign[bad] * mu + sigma * rng.standard_normal((int(bad.sum()), 2))
    else:  # pragma: no cover
        raise ValueError("could not draw blobs with the requested margin")
    return Dataset(pts, labels.astype(np.int64), "blobs", tags={"mu": mu.tolist(), "sigma": sigma})


def synthetic_1d(g, n: int, a: float, b: float) -> tuple[np.ndarray, np.ndarray]:
    """``n`` evenly spaced points ``t`` on ``[a, b]`` with values ``g(t)``."""
    if n < 1:
        raise ValueError("need at least one sample")
    if not b > a and n > 1:
        raise ValueError(f"empty interval [{a}, {b}]")
    t = np.linspace(a, b, n)
    v = np.asarray([g(ti) for ti in t], dtype=np.float64)
    return t, v
