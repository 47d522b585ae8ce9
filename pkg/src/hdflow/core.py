"""Linear algebra, similarity search, local PCA and seeded random streams."""

from __future__ import annotations

import hashlib
from dataclasses import dataclass

import numpy as np

__all__ = [
    "DegenerateVectorError",
    "PcaBasis",
    "RngStream",
    "cosine_similarity",
    "knn",
    "pca_basis",
    "project_affine",
]


class DegenerateVectorError(ValueError):
    """A zero-norm vector was passed where a direction is required."""


def _as_vec(a) -> np.ndarray:
    v = np.asarray(a, dtype=np.float64)
    if v.ndim != 1:
        raise ValueError(f"expected a 1-d vector, got shape {v.shape}")
    return v


def cosine_similarity(a, b) -> float:
    a = _as_vec(a)
    b = _as_vec(b)
    if a.shape != b.shape:
        raise ValueError(f"dimension mismatch: {a.shape[0]} vs {b.shape[0]}")
    na = np.linalg.norm(a)
    nb = np.linalg.norm(b)
    if na == 0.0 or nb == 0.0:
        raise DegenerateVectorError("cosine similarity of a zero-norm vector")
    return float(np.clip(a @ b / (na * nb), -1.0, 1.0))


def _similarities(query: np.ndarray, data: np.ndarray, metric: str, norms: np.ndarray | None = None) -> np.ndarray:
    if metric == "cosine":
        qn = np.linalg.norm(query)
        dn = np.linalg.norm(data, axis=1) if norms is None else norms
        if qn == 0.0:
            raise DegenerateVectorError("zero-norm query")
        # zero-norm dataset rows are never similar to anything
        safe = np.where(dn > 0.0, dn, 1.0)
        sims = (data @ query) / (safe * qn)
        return np.where(dn > 0.0, sims, -np.inf)
    if metric == "euclidean":
        # negated distance so that larger is closer, like cosine
        return -np.linalg.norm(data - query, axis=1)
    raise ValueError(f"unknown metric {metric!r}")


def knn(query, dataset, k: int, metric: str = "cosine", norms=None) -> np.ndarray:
    """Indices of the ``k`` most similar rows of ``dataset``, best first.

    Ties are broken by lowest index, so results are deterministic.
    ``norms`` optionally supplies precomputed row norms for the cosine metric.
    """
    query = _as_vec(query)
    data = np.asarray(dataset, dtype=np.float64)
    if data.ndim != 2 or data.shape[0] == 0:
        raise ValueError("knn needs a non-empty 2-d dataset")
    if data.shape[1] != query.shape[0]:
        raise ValueError(f"dimension mismatch: {data.shape[1]} vs {query.shape[0]}")
    if not 1 <= k <= data.shape[0]:
        raise ValueError(f"k={k} out of range for dataset of size {data.shape[0]}")
    neg = -_similarities(query, data, metric, norms)
    if k < data.shape[0]:
        # every row tied with the k-th best stays a candidate, so tie-breaking is unchanged
        kth = np.partition(neg, k - 1)[k - 1]
        cand = np.flatnonzero(neg <= kth)
    else:
        cand = np.arange(data.shape[0])
    # stable sort over ascending candidate indices keeps the lower index first among equals
    return cand[np.argsort(neg[cand], kind="stable")[:k]]


@dataclass(frozen=True)
class PcaBasis:
    mean: np.ndarray
    basis: np.ndarray  # d x r, orthonormal columns
    retained_ratio: float

    @property
    def rank(self) -> int:
        return int(self.basis.shape[1])

    @property
    def dim(self) -> int:
        return int(self.mean.shape[0])


def pca_basis(points, variance_retention: float = 0.99) -> PcaBasis:
    """Local mean and the smallest PCA basis keeping ``variance_retention`` of the variance.

    Computed from the SVD of the centred data matrix. A point cloud with no
    spread gives a rank-0 basis.
    """
    x = np.asarray(points, dtype=np.float64)
    if x.ndim != 2 or x.shape[0] < 2:
        raise ValueError("pca_basis needs at least 2 points")
    if not 0.0 < variance_retention <= 1.0:
        raise ValueError("variance_retention must lie in (0, 1]")
    mean = x.mean(axis=0)
    centred = x - mean
    _, s, vt = np.linalg.svd(centred, full_matrices=False)
    var = s**2
    total = var.sum()
    scale = max(float(np.abs(x).max()), 1.0)
    # numerically-zero spread relative to the data magnitude
    if total <= (1e-14 * scale) ** 2 * x.shape[0]:
        return PcaBasis(mean=mean, basis=np.zeros((x.shape[1], 0)), retained_ratio=1.0)
    cum = np.cumsum(var) / total
    r = int(np.searchsorted(cum, variance_retention - 1e-12) + 1)
    r = min(r, len(var))
    return PcaBasis(mean=mean, basis=vt[:r].T.copy(), retained_ratio=float(min(cum[r - 1], 1.0)))


def project_affine(z, basis: PcaBasis) -> np.ndarray:
    """Orthogonal projection of ``z`` onto the affine span ``mean + span(U)``."""
    z = _as_vec(z)
    if z.shape[0] != basis.dim:
        raise ValueError(f"dimension mismatch: {z.shape[0]} vs {basis.dim}")
    if basis.rank == 0:
        return basis.mean.copy()
    u = basis.basis
    return basis.mean + u @ (u.T @ (z - basis.mean))


def _mix_seed(seed: int, index: int) -> int:
    payload = int(seed).to_bytes(8, "little", signed=False) + int(index).to_bytes(8, "little", signed=False)
    return int.from_bytes(hashlib.blake2b(payload, digest_size=8).digest(), "little")


class RngStream:
    """Seeded, platform-stable random stream (PCG64).

    ``counter`` counts scalar draws taken so far. Streams are single-owner;
    parallel work should use :meth:`child` instead of sharing one stream.
    """

    def __init__(self, seed: int):
        self.seed = int(seed) % (1 << 64)
        self._gen = np.random.Generator(np.random.PCG64(self.seed))
        self.counter = 0

    def __repr__(self) -> str:
        return f"RngStream(seed={self.seed}, counter={self.counter})"

    def _count(self, size) -> None:
        self.counter += int(np.prod(size)) if size is not None else 1

    def normal(self, size=None, scale: float = 1.0):
        self._count(size)
        return self._gen.normal(0.0, scale, size)

    def uniform(self, low=0.0, high=1.0, size=None):
        self._count(size)
        return self._gen.uniform(low, high, size)

    def integers(self, low, high=None, size=None):
        self._count(size)
        return self._gen.integers(low, high, size)

    def permutation(self, n: int) -> np.ndarray:
        self._count(n)
        return self._gen.permutation(n)

    def child(self, index: int) -> "RngStream":
        return RngStream(_mix_seed(self.seed, index))
