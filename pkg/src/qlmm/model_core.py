"""Domain types for clustered mixed-effects data.

A dataset is a list of clusters, each carrying a response vector ``y``
(length ``m_i``), a fixed-effects design ``X`` (``m_i x p``) and a
random-effects design ``Z`` (``m_i x q``).  Clusters are stored
independently, never stacked into one dense ``N x p`` block, so that all
per-cluster operations stream block by block and memory scales with
``max m_i`` rather than ``N``.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

__all__ = [
    "Cluster",
    "ClusteredDataset",
    "FixedEffects",
    "VarComps",
    "validate_dataset",
    "dimensions",
]


def _as_readonly(arr, dtype=np.float64, ndim=None):
    out = np.array(arr, dtype=dtype, copy=True, order="C")
    if ndim is not None and out.ndim != ndim:
        raise ValueError(f"expected a {ndim}-d array, got shape {out.shape}")
    out.setflags(write=False)
    return out


@dataclass(frozen=True)
class Cluster:
    """One cluster: a group of observations sharing a random-effect draw."""

    id: object
    y: np.ndarray
    X: np.ndarray
    Z: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "y", _as_readonly(self.y, ndim=1))
        object.__setattr__(self, "X", _as_readonly(self.X, ndim=2))
        object.__setattr__(self, "Z", _as_readonly(self.Z, ndim=2))

    @property
    def m(self) -> int:
        return self.y.shape[0]


class ClusteredDataset:
    """Ordered collection of clusters with common fixed/random dimensions.

    Immutable after construction; safe to share across workers.  Construction
    is permissive about cross-cluster consistency so that
    :func:`validate_dataset` can report violations as data instead of
    raising.
    """

    def __init__(self, clusters):
        clusters = tuple(clusters)
        if not clusters:
            raise ValueError("dataset needs at least one cluster")
        self._clusters = clusters
        self._cache: dict = {}  # per-dataset memo (e.g. design factorizations)

    @property
    def clusters(self):
        return self._clusters

    @property
    def n(self) -> int:
        return len(self._clusters)

    @property
    def p(self) -> int:
        return self._clusters[0].X.shape[1]

    @property
    def q(self) -> int:
        return self._clusters[0].Z.shape[1]

    @property
    def N(self) -> int:
        return sum(c.m for c in self._clusters)

    @property
    def m(self):
        return [c.m for c in self._clusters]

    def __len__(self) -> int:
        return self.n

    def __iter__(self):
        return iter(self._clusters)

    def __getitem__(self, i) -> Cluster:
        return self._clusters[i]

    def subset(self, indices) -> "ClusteredDataset":
        """New dataset holding the clusters at ``indices`` (order preserved)."""
        return ClusteredDataset([self._clusters[i] for i in indices])

    def stacked_y(self) -> np.ndarray:
        return np.concatenate([c.y for c in self._clusters])

    def stacked_X(self) -> np.ndarray:
        return np.vstack([c.X for c in self._clusters])

    def row_offsets(self) -> np.ndarray:
        """Start row of each cluster in the stacked order, plus the total N."""
        return np.concatenate([[0], np.cumsum([c.m for c in self._clusters])])

    def __repr__(self):
        return (
            f"ClusteredDataset(n={self.n}, p={self.p}, q={self.q}, N={self.N})"
        )


@dataclass(frozen=True)
class FixedEffects:
    """A coefficient vector together with its support."""

    beta: np.ndarray
    support: tuple = field(init=False)

    def __post_init__(self):
        object.__setattr__(self, "beta", _as_readonly(self.beta, ndim=1))
        object.__setattr__(
            self, "support", tuple(np.flatnonzero(self.beta).tolist())
        )

    @property
    def sparsity(self) -> int:
        return len(self.support)


@dataclass(frozen=True)
class VarComps:
    """Noise variance plus basis-expanded random-effect covariance.

    ``psi = sum_j eta[j] * basis[j]``; the basis matrices must be symmetric
    and linearly independent (the Gram check lives in
    :func:`qlmm.varcomp.design_gram`).
    """

    sigma2_e: float
    eta: np.ndarray
    basis: tuple

    def __post_init__(self):
        if not self.sigma2_e > 0:
            raise ValueError("sigma2_e must be positive")
        object.__setattr__(self, "eta", _as_readonly(self.eta, ndim=1))
        mats = tuple(_as_readonly(G, ndim=2) for G in self.basis)
        if len(mats) != self.eta.shape[0]:
            raise ValueError("eta length must match the number of basis matrices")
        for G in mats:
            if G.shape[0] != G.shape[1] or not np.allclose(G, G.T):
                raise ValueError("basis matrices must be symmetric")
        object.__setattr__(self, "basis", mats)

    @property
    def psi(self) -> np.ndarray:
        q = self.basis[0].shape[0]
        out = np.zeros((q, q))
        for coef, G in zip(self.eta, self.basis):
            out += coef * G
        return out


def validate_dataset(dataset: ClusteredDataset) -> list[str]:
    """Structural validation; returns one message per violation (empty = valid)."""
    report = []
    p0, q0 = dataset.p, dataset.q
    for c in dataset.clusters:
        m = c.y.shape[0]
        if m < 1:
            report.append(f"cluster {c.id!r}: empty response vector")
        if c.X.shape[0] != m:
            report.append(
                f"cluster {c.id!r}: X has {c.X.shape[0]} rows but y has length {m}"
            )
        if c.Z.shape[0] != m:
            report.append(
                f"cluster {c.id!r}: Z has {c.Z.shape[0]} rows but y has length {m}"
            )
        if c.X.shape[1] != p0:
            report.append(
                f"cluster {c.id!r}: X has {c.X.shape[1]} columns, expected {p0}"
            )
        if c.Z.shape[1] != q0:
            report.append(
                f"cluster {c.id!r}: Z has {c.Z.shape[1]} columns, expected {q0}"
            )
        for name, arr in (("y", c.y), ("X", c.X), ("Z", c.Z)):
            if arr.size and not np.isfinite(arr).all():
                report.append(f"cluster {c.id!r}: non-finite entries in {name}")
    return report


def dimensions(dataset: ClusteredDataset) -> dict:
    """Global shape summary ``{n, p, q, N, m}`` of a valid dataset."""
    m = dataset.m
    return {
        "n": dataset.n,
        "p": dataset.p,
        "q": dataset.q,
        "N": int(sum(m)),
        "m": m,
    }
