"""Clustered RD data container, kernels and window configuration.

All downstream code assumes the cutoff has been normalized to zero; that
happens exactly once, in :func:`validate_sample`.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Any, Callable, Iterable, Sequence

import numpy as np
from scipy import integrate

from .errors import DegenerateKernel, EmptyInput, InvalidConfig, NonFiniteValue

__all__ = [
    "ClusteredSample",
    "KernelSpec",
    "KernelConstants",
    "WindowConfig",
    "validate_sample",
    "kernel_eval",
    "kernel_constants",
    "get_kernel",
    "UNIFORM",
    "TRIANGULAR",
    "EPANECHNIKOV",
]


def _frozen(a: np.ndarray) -> np.ndarray:
    a = np.ascontiguousarray(a)
    a.setflags(write=False)
    return a


def _id_sort_key(cid: Any) -> tuple:
    # numeric-looking ids sort numerically, everything else lexicographically
    try:
        return (0, float(cid), "")
    except (TypeError, ValueError):
        return (1, 0.0, str(cid))


@dataclass(frozen=True, eq=False)
class ClusteredSample:
    """Observations grouped by cluster, with the cutoff already subtracted.

    Observations are stored flat and contiguous per cluster: cluster ``g``
    occupies ``offsets[g]:offsets[g + 1]``. ``cluster`` maps each observation
    to its cluster index and ``within`` to its position inside the cluster.
    """

    x: np.ndarray
    y: np.ndarray
    cluster: np.ndarray
    within: np.ndarray
    cluster_ids: tuple
    cutoff: float = 0.0
    sizes: np.ndarray = field(init=False)
    offsets: np.ndarray = field(init=False)
    cluster_rank: np.ndarray = field(init=False)
    obs_key: np.ndarray = field(init=False)

    def __post_init__(self) -> None:
        x = np.asarray(self.x, dtype=float)
        y = np.asarray(self.y, dtype=float)
        cluster = np.asarray(self.cluster, dtype=np.int64)
        G = len(self.cluster_ids)
        if x.shape != y.shape or x.shape != cluster.shape or x.ndim != 1:
            raise InvalidConfig("x, y and cluster must be 1-d arrays of equal length")
        if x.size == 0:
            raise EmptyInput("sample has no observations")
        if np.any(np.diff(cluster) < 0) or cluster[0] != 0 or cluster[-1] != G - 1:
            raise InvalidConfig("observations must be grouped by cluster index 0..G-1")
        sizes = np.bincount(cluster, minlength=G)
        if np.any(sizes == 0):
            raise InvalidConfig("every cluster must be nonempty")
        if len(set(self.cluster_ids)) != G:
            raise InvalidConfig("cluster ids must be unique")
        offsets = np.concatenate(([0], np.cumsum(sizes)))
        within = np.arange(x.size) - offsets[cluster]

        order = sorted(range(G), key=lambda g: _id_sort_key(self.cluster_ids[g]))
        rank = np.empty(G, dtype=np.int64)
        rank[order] = np.arange(G)
        # total order used for deterministic tie-breaking: (cluster_id, within index)
        obs_key = np.empty(x.size, dtype=np.int64)
        obs_key[np.lexsort((within, rank[cluster]))] = np.arange(x.size)

        set_ = object.__setattr__
        set_(self, "x", _frozen(x))
        set_(self, "y", _frozen(y))
        set_(self, "cluster", _frozen(cluster))
        set_(self, "within", _frozen(within))
        set_(self, "cluster_ids", tuple(self.cluster_ids))
        set_(self, "sizes", _frozen(sizes))
        set_(self, "offsets", _frozen(offsets))
        set_(self, "cluster_rank", _frozen(rank))
        set_(self, "obs_key", _frozen(obs_key))

    @property
    def n(self) -> int:
        return int(self.x.size)

    @property
    def G(self) -> int:
        return len(self.cluster_ids)

    @property
    def n_g(self) -> tuple[int, ...]:
        return tuple(int(s) for s in self.sizes)

    def rows(self) -> list[tuple[Any, float, float]]:
        """Flat ``(cluster_id, x, y)`` rows in storage order."""
        ids = self.cluster_ids
        return [(ids[g], float(a), float(b)) for g, a, b in zip(self.cluster, self.x, self.y)]

    def with_y(self, y: np.ndarray) -> "ClusteredSample":
        """Same design, new outcomes."""
        return ClusteredSample(self.x, y, self.cluster, self.within, self.cluster_ids, self.cutoff)

    @classmethod
    def from_arrays(cls, cluster_ids: Sequence, x, y, cutoff: float = 0.0) -> "ClusteredSample":
        """Build from per-observation cluster ids (grouping performed here).

        ``x`` must already be normalized; ``cutoff`` is kept for reporting.
        """
        cluster_ids = list(cluster_ids)
        index: dict = {}
        codes = np.fromiter((index.setdefault(c, len(index)) for c in cluster_ids),
                            dtype=np.int64, count=len(cluster_ids))
        order = np.argsort(codes, kind="stable")
        x = np.asarray(x, dtype=float)[order]
        y = np.asarray(y, dtype=float)[order]
        return cls(x, y, codes[order], np.zeros(len(order), dtype=np.int64),
                   tuple(index), cutoff)


def validate_sample(raw: Iterable[tuple[Any, float, float]], cutoff: float = 0.0) -> ClusteredSample:
    """Group ``(cluster_id, x, y)`` rows into a :class:`ClusteredSample`.

    Clusters appear in order of first occurrence and rows keep their input
    order within a cluster. ``x`` is shifted by ``cutoff``.
    """
    rows = list(raw)
    if not rows:
        raise EmptyInput("no rows supplied")
    if not math.isfinite(cutoff):
        raise NonFiniteValue(-1, "cutoff is not finite")
    ids, xs, ys = [], [], []
    for r, (cid, xv, yv) in enumerate(rows):
        try:
            xf, yf = float(xv), float(yv)
        except (TypeError, ValueError) as exc:
            raise NonFiniteValue(r, f"row {r}: x/y not numeric") from exc
        if not (math.isfinite(xf) and math.isfinite(yf)):
            raise NonFiniteValue(r)
        ids.append(cid)
        xs.append(xf - cutoff)
        ys.append(yf)
    return ClusteredSample.from_arrays(ids, xs, ys, cutoff)


@dataclass(frozen=True)
class KernelSpec:
    """Kernel on [-1, 1]. ``func`` must accept numpy arrays for the built-ins;
    custom kernels may be scalar-only but are then slower."""

    kind: str
    func: Callable[[Any], Any]

    def __call__(self, v):
        v = np.asarray(v, dtype=float)
        if self.kind == "custom":
            out = np.vectorize(lambda t: float(self.func(t)), otypes=[float])(v)
        else:
            out = np.asarray(self.func(v), dtype=float)
        return np.where(np.abs(v) <= 1.0, np.maximum(out, 0.0), 0.0)


def _uniform(v):
    return np.full(np.shape(v), 0.5)


def _triangular(v):
    return 1.0 - np.abs(v)


def _epanechnikov(v):
    return 0.75 * (1.0 - np.square(v))


UNIFORM = KernelSpec("uniform", _uniform)
TRIANGULAR = KernelSpec("triangular", _triangular)
EPANECHNIKOV = KernelSpec("epanechnikov", _epanechnikov)
_BUILTIN = {k.kind: k for k in (UNIFORM, TRIANGULAR, EPANECHNIKOV)}


def get_kernel(name: str | KernelSpec) -> KernelSpec:
    if isinstance(name, KernelSpec):
        return name
    try:
        return _BUILTIN[name]
    except KeyError:
        raise InvalidConfig(f"unknown kernel {name!r}; expected one of {sorted(_BUILTIN)}") from None


def kernel_eval(k: KernelSpec, v: float) -> float:
    """k(v), exactly zero outside [-1, 1]."""
    return float(k(v))


@dataclass(frozen=True)
class KernelConstants:
    """One-sided kernel moments and the derived boundary constants.

    mu_bar_j[j] = int_0^1 k(v) v^j dv; ``mu_bar`` is the leading bias
    constant and ``kappa_bar`` the variance constant of the equivalent
    boundary kernel.
    """

    mu_bar_j: tuple[float, float, float, float]
    mu_bar: float
    kappa_bar: float

    @property
    def det(self) -> float:
        m = self.mu_bar_j
        return m[2] * m[0] - m[1] ** 2


def kernel_constants(k: KernelSpec) -> KernelConstants:
    """Compute kernel constants by adaptive quadrature (abs. tol 1e-10)."""

    def quad(f):
        val, _ = integrate.quad(f, 0.0, 1.0, epsabs=1e-10, epsrel=1e-12, limit=200)
        return val

    mu = tuple(quad(lambda v, j=j: kernel_eval(k, v) * v**j) for j in range(4))
    det = mu[2] * mu[0] - mu[1] ** 2
    if det <= 1e-12:
        raise DegenerateKernel(f"mu2*mu0 - mu1^2 = {det:.3g} is not positive")
    mu_bar = (mu[2] ** 2 - mu[1] * mu[3]) / det
    kappa = quad(lambda v: (kernel_eval(k, v) * (mu[2] - mu[1] * v) / det) ** 2)
    return KernelConstants(mu, mu_bar, kappa)


@dataclass(frozen=True)
class WindowConfig:
    h: float
    min_per_side: int = 3

    def __post_init__(self) -> None:
        if not (math.isfinite(self.h) and self.h > 0):
            raise InvalidConfig(f"bandwidth must be positive, got {self.h}")
        if self.min_per_side < 1:
            raise InvalidConfig("min_per_side must be at least 1")
