"""Conditional variance oracle and standard-error estimators.

Five estimators are provided: EHW (heteroskedasticity-robust, ignores
clusters), i.i.d. nearest neighbors, the naive clustered nearest-neighbors
adaptation, clustered regression residuals (CRR) and the clustered
nearest-neighbors estimator (CNN) built on companion clusters.

All nearest-neighbor searches are one-dimensional and run on sorted pools.
Ties are broken by distance, then cluster id, then within-cluster index.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from functools import cached_property
from typing import Any, Callable, Sequence

import numpy as np
from scipy import sparse

from .core import ClusteredSample
from .errors import (
    IncompletePlan,
    InsufficientNeighbors,
    InvalidConfig,
    NoEligibleNeighbor,
    ShapeMismatch,
    TooFewClusters,
)
from .estimator import LocalFit, WeightSet, residuals

__all__ = [
    "SigmaOracle",
    "StdError",
    "CompanionSets",
    "NeighborPlan",
    "oracle_conditional_se",
    "oracle_se2",
    "se_ehw",
    "se_crr",
    "se_nn_iid",
    "se_naive_cnn",
    "naive_residuals",
    "select_companion_clusters",
    "build_neighbor_sets",
    "neighbor_residuals",
    "se_cnn",
    "cnn_se2",
    "neighbor_distance_diag",
    "companion_reuse",
]

SIDES = ("+", "-")


# --------------------------------------------------------------------------
# oracle

@dataclass(frozen=True, eq=False)
class SigmaOracle:
    """Known conditional covariance matrix of each cluster's outcomes."""

    blocks: tuple
    check: bool = True

    def __post_init__(self) -> None:
        blocks = tuple(np.atleast_2d(np.asarray(b, dtype=float)) for b in self.blocks)
        object.__setattr__(self, "blocks", blocks)
        if self.check:
            for g, b in enumerate(blocks):
                if b.shape[0] != b.shape[1]:
                    raise ShapeMismatch(f"block {g} is not square")
                if not np.allclose(b, b.T, atol=1e-12, rtol=0):
                    raise InvalidConfig(f"block {g} is not symmetric")
                if np.linalg.eigvalsh(b).min() < -1e-10:
                    raise InvalidConfig(f"block {g} is not positive semidefinite")

    @property
    def sizes(self) -> np.ndarray:
        return np.array([b.shape[0] for b in self.blocks], dtype=np.int64)

    @classmethod
    def random_effects(cls, sizes: Sequence[int], sigma: float, rho: float) -> "SigmaOracle":
        """sigma^2 on the diagonal and sigma^2 * rho off the diagonal."""
        cache: dict[int, np.ndarray] = {}
        blocks = []
        for m in sizes:
            m = int(m)
            if m not in cache:
                b = np.full((m, m), sigma**2 * rho)
                np.fill_diagonal(b, sigma**2)
                b.setflags(write=False)
                cache[m] = b
            blocks.append(cache[m])
        return cls(tuple(blocks), check=False)


def oracle_se2(weights: WeightSet, sigma: SigmaOracle) -> float:
    """sum_g w_g' Sigma_g w_g."""
    sizes = sigma.sizes
    if int(sizes.sum()) != weights.n:
        raise ShapeMismatch(f"oracle covers {int(sizes.sum())} observations, weights {weights.n}")
    w = weights.w
    terms = []
    start = 0
    for b in sigma.blocks:
        m = b.shape[0]
        wg = w[start:start + m]
        start += m
        if np.any(wg):
            terms.append(float(wg @ b @ wg))
    return math.fsum(terms)


def oracle_conditional_se(weights: WeightSet, sigma: SigmaOracle) -> float:
    se2 = oracle_se2(weights, sigma)
    if se2 < -1e-14:
        raise InvalidConfig(f"oracle variance is negative ({se2:.3g})")
    return math.sqrt(max(se2, 0.0))


# --------------------------------------------------------------------------
# residual-based estimators

@dataclass(frozen=True)
class StdError:
    """Standard error with its raw squared estimate.

    ``negative`` flags a raw ``se2`` below zero; ``value`` is then
    sqrt(max(se2, 0)).
    """

    value: float
    se2: float
    negative: bool = False

    @classmethod
    def from_se2(cls, se2: float) -> "StdError":
        return cls(math.sqrt(max(se2, 0.0)), float(se2), bool(se2 < 0))


def _check_len(name: str, a: np.ndarray, n: int) -> None:
    if a.shape[0] != n:
        raise ShapeMismatch(f"{name} has {a.shape[0]} entries, expected {n}")


def se_ehw(weights: WeightSet, resid: np.ndarray) -> float:
    resid = np.asarray(resid, dtype=float)
    _check_len("residuals", resid, weights.n)
    return math.sqrt(math.fsum((weights.w * resid) ** 2))


def _cluster_sums(cluster: np.ndarray, G: int, v: np.ndarray) -> np.ndarray:
    if v.ndim == 1:
        return np.bincount(cluster, weights=v, minlength=G)
    out = np.zeros((G,) + v.shape[1:])
    np.add.at(out, cluster, v)
    return out


def se_crr(sample: ClusteredSample, weights: WeightSet, fit: LocalFit) -> float:
    """sqrt of sum_g (sum_i w_gi e_gi)^2 with residuals from the same local fit."""
    _check_len("weights", weights.w, sample.n)
    e = residuals(sample, fit)
    s = _cluster_sums(sample.cluster, sample.G, weights.w * e)
    return math.sqrt(math.fsum(s * s))


# --------------------------------------------------------------------------
# 1-d nearest-neighbour search

def _side_code(x: np.ndarray) -> np.ndarray:
    # 0 = treated ("+", x >= 0), 1 = control
    return (x < 0).astype(np.int64)


@dataclass
class _Pool:
    """Sorted candidate pool on one side."""

    x: np.ndarray        # sorted values
    key: np.ndarray      # tie-break key (unique)
    owner: np.ndarray    # cluster index
    ref: np.ndarray      # caller's identifier for each pool element

    @classmethod
    def build(cls, x, key, owner, ref) -> "_Pool":
        order = np.lexsort((key, x))
        return cls(x[order], key[order], owner[order], ref[order])


def _window_knn(
    pool: _Pool,
    qpos: np.ndarray,
    qx: np.ndarray,
    J: int,
    valid: Callable[[np.ndarray, np.ndarray], np.ndarray],
    ties: bool,
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """J nearest valid pool elements for each query.

    ``qpos`` is a position in the pool near which query ``q`` sits; the search
    window around it grows until both out-of-window neighbours are strictly
    farther than the selected J-th distance, which makes the result exact.
    ``valid(q, pos)`` masks admissible candidates. With ``ties`` every
    candidate at the J-th distance is kept, otherwise exactly J are kept
    using the pool key as tie-breaker.

    Returns (query index, pool position, count per query); the count is
    below J where fewer valid candidates exist.
    """
    m = pool.x.size
    nq = qpos.size
    out_q, out_p = [], []
    counts = np.zeros(nq, dtype=np.int64)
    todo = np.arange(nq)
    W = max(2 * J, 4)
    while todo.size:
        W = min(W, m)
        p0 = qpos[todo]
        offs = np.arange(-W, W + 1)
        pos = p0[:, None] + offs[None, :]
        inside = (pos >= 0) & (pos < m)
        posc = np.clip(pos, 0, m - 1)
        qq = np.broadcast_to(todo[:, None], pos.shape)
        ok = inside.copy()
        ok[inside] = valid(qq[inside], posc[inside])
        dist = np.abs(pool.x[posc] - qx[todo][:, None])
        dist = np.where(ok, dist, np.inf)
        key = np.where(ok, pool.key[posc], np.iinfo(np.int64).max)
        # row-wise sort by (dist, key)
        order = np.lexsort((key, dist), axis=1)
        dsort = np.take_along_axis(dist, order, axis=1)
        psort = np.take_along_axis(posc, order, axis=1)
        nvalid = np.isfinite(dsort).sum(axis=1)
        jth = np.where(nvalid >= J, dsort[:, min(J, dsort.shape[1]) - 1], np.inf)
        # exactness: the nearest out-of-window elements must be strictly farther
        left, right = p0 - W - 1, p0 + W + 1
        dl = np.where(left >= 0, np.abs(pool.x[np.clip(left, 0, m - 1)] - qx[todo]), np.inf)
        dr = np.where(right < m, np.abs(pool.x[np.clip(right, 0, m - 1)] - qx[todo]), np.inf)
        full = (left < 0) & (right >= m)
        # strictness also matters without ties: an outside element tied with the J-th could win on key
        done = full | ((dl > jth) & (dr > jth))
        rows = np.flatnonzero(done)
        if rows.size:
            ds, ps = dsort[rows], psort[rows]
            if ties:
                keep = np.isfinite(ds) & (ds <= jth[rows, None])
            else:
                keep = np.isfinite(ds) & (np.arange(ds.shape[1])[None, :] < J)
            r_idx, c_idx = np.nonzero(keep)
            out_q.append(todo[rows][r_idx])
            out_p.append(ps[r_idx, c_idx])
            counts[todo[rows]] = keep.sum(axis=1)
        todo = todo[~done]
        W *= 2
    if out_q:
        q = np.concatenate(out_q)
        p = np.concatenate(out_p)
        order = np.lexsort((pool.key[p], np.abs(pool.x[p] - qx[q]), q))
        q, p = q[order], p[order]
    else:
        q = p = np.zeros(0, dtype=np.int64)
    return q, p, counts


def _csr_from_pairs(q: np.ndarray, vals: np.ndarray, nq: int) -> tuple[np.ndarray, np.ndarray]:
    indptr = np.zeros(nq + 1, dtype=np.int64)
    np.cumsum(np.bincount(q, minlength=nq), out=indptr[1:])
    return indptr, vals.astype(np.int64)


def _window_mask(sample: ClusteredSample, h: float) -> np.ndarray:
    return np.abs(sample.x) <= h


def _iid_neighbors(sample: ClusteredSample, weights: WeightSet, J: int):
    """J nearest same-side in-window units (any cluster), excluding self."""
    if J < 1:
        raise InvalidConfig("J must be at least 1")
    x = sample.x
    inwin = _window_mask(sample, weights.h)
    side = _side_code(x)
    queries = np.flatnonzero(weights.w != 0)
    q_all, n_all = [], []
    for s in (0, 1):
        members = np.flatnonzero(inwin & (side == s))
        qs = queries[side[queries] == s]
        if qs.size == 0:
            continue
        if members.size < J + 1:
            raise InsufficientNeighbors(
                f"side '{SIDES[s]}' has {members.size} in-window units, need at least J+1 = {J + 1}")
        pool = _Pool.build(x[members], sample.obs_key[members], sample.cluster[members], members)
        where = np.empty(sample.n, dtype=np.int64)
        where[pool.ref] = np.arange(pool.ref.size)
        qpos = where[qs]
        q, p, cnt = _window_knn(pool, qpos, x[qs], J, lambda qi, pos: pool.ref[pos] != qs[qi], ties=False)
        q_all.append(qs[q])
        n_all.append(pool.ref[p])
    q = np.concatenate(q_all) if q_all else np.zeros(0, np.int64)
    nb = np.concatenate(n_all) if n_all else np.zeros(0, np.int64)
    return q, nb


def _neighbor_mean_dev(y: np.ndarray, q: np.ndarray, nb: np.ndarray, n: int):
    """y_i minus the mean of its neighbours, and the neighbour counts."""
    cnt = np.bincount(q, minlength=n)
    sums = np.bincount(q, weights=y[nb], minlength=n)
    with np.errstate(invalid="ignore", divide="ignore"):
        dev = np.where(cnt > 0, y - sums / np.maximum(cnt, 1), 0.0)
    return dev, cnt


def se_nn_iid(sample: ClusteredSample, weights: WeightSet, J: int = 3) -> float:
    """Classical nearest-neighbour standard error that ignores clustering."""
    _check_len("weights", weights.w, sample.n)
    q, nb = _iid_neighbors(sample, weights, J)
    dev, cnt = _neighbor_mean_dev(sample.y, q, nb, sample.n)
    sig2 = np.where(cnt > 0, cnt / (cnt + 1.0) * dev**2, 0.0)
    return math.sqrt(math.fsum(weights.w**2 * sig2))


def naive_residuals(sample: ClusteredSample, weights: WeightSet, J: int = 3, y: np.ndarray | None = None):
    """sqrt(|N|/(1+|N|)) (Y - mean over the J nearest same-side units), any cluster.

    Zero for units with zero weight; ``y`` may be 1-d or (n, reps).
    """
    _check_len("weights", weights.w, sample.n)
    y = sample.y if y is None else np.asarray(y, dtype=float)
    _check_len("y", y, sample.n)
    q, nb = _iid_neighbors(sample, weights, J)
    order = np.argsort(q, kind="stable")
    q, nb = q[order], nb[order]
    cnt = np.bincount(q, minlength=sample.n)
    avg = sparse.csr_matrix((np.repeat(1.0 / np.maximum(cnt, 1), cnt), nb, np.r_[0, np.cumsum(cnt)]),
                            shape=(sample.n, sample.n))
    scale = np.sqrt(cnt / (1.0 + cnt))
    if y.ndim == 2:
        scale = scale[:, None]
    return np.where(scale > 0, scale * (y - avg @ y), 0.0)


def se_naive_cnn(sample: ClusteredSample, weights: WeightSet, J: int = 3) -> float:
    """Clustered sum of i.i.d.-style nearest-neighbour residual products.

    Kept as a baseline: it is inconsistent when within-cluster units are
    each other's nearest neighbours.
    """
    ydelta = naive_residuals(sample, weights, J)
    s = _cluster_sums(sample.cluster, sample.G, weights.w * ydelta)
    return math.sqrt(math.fsum(s * s))


# --------------------------------------------------------------------------
# companion clusters

@dataclass(frozen=True, eq=False)
class CompanionSets:
    """Output of companion-cluster selection.

    ``support[side][g]`` holds the (unjittered) support values of cluster g.
    """

    R1: tuple
    R2: tuple
    support: dict
    J: int
    R: int
    L: int
    jittered: bool = False

    def reuse_counts(self) -> np.ndarray:
        return companion_reuse(self.R1, self.R2)


def companion_reuse(R1: Sequence[frozenset], R2: Sequence[frozenset]) -> np.ndarray:
    """#{g~ : g in R1[g~] | R2[g~]} for every cluster g."""
    G = len(R1)
    counts = np.zeros(G, dtype=np.int64)
    for a, b in zip(R1, R2):
        for c in a | b:
            counts[c] += 1
    return counts


def _support_points(sample: ClusteredSample, h: float, L: int):
    """Per side: (values, cluster, position-in-cluster-support) after compression."""
    x = sample.x
    inwin = _window_mask(sample, h)
    side = _side_code(x)
    out = {}
    for s in (0, 1):
        idx = np.flatnonzero(inwin & (side == s))
        if idx.size == 0:
            out[s] = (np.zeros(0), np.zeros(0, np.int64), np.zeros(0, np.int64))
            continue
        cl, xv = sample.cluster[idx], x[idx]
        order = np.lexsort((xv, cl))
        cl, xv = cl[order], xv[order]
        first = np.ones(cl.size, dtype=bool)
        first[1:] = (cl[1:] != cl[:-1]) | (xv[1:] != xv[:-1])
        cl, xv = cl[first], xv[first]                          # distinct values per cluster
        starts = np.flatnonzero(np.r_[True, cl[1:] != cl[:-1]])
        lens = np.diff(np.r_[starts, cl.size])
        take_all = lens <= L
        pick = [np.arange(s0, s0 + l) for s0, l in zip(starts[take_all], lens[take_all])]
        if L == 1:
            probs_idx = lambda l: np.array([(l - 1) // 2])       # lower median
        else:
            probs_idx = lambda l: (np.arange(L) * (l - 1)) // (L - 1)  # lower order statistic
        pick += [s0 + probs_idx(l) for s0, l in zip(starts[~take_all], lens[~take_all])]
        sel = np.sort(np.concatenate(pick))
        cl, xv = cl[sel], xv[sel]
        starts = np.flatnonzero(np.r_[True, cl[1:] != cl[:-1]])
        posin = np.arange(cl.size) - np.repeat(starts, np.diff(np.r_[starts, cl.size]))
        out[s] = (xv, cl, posin)
    return out


def _codes(g: np.ndarray, c: np.ndarray, G: int) -> np.ndarray:
    return g.astype(np.int64) * G + c.astype(np.int64)


def _in_sorted(codes: np.ndarray, table: np.ndarray) -> np.ndarray:
    if table.size == 0:
        return np.zeros(codes.shape, dtype=bool)
    pos = np.searchsorted(table, codes)
    pos = np.minimum(pos, table.size - 1)
    return table[pos] == codes


def select_companion_clusters(
    sample: ClusteredSample,
    h: float,
    J: int = 3,
    R: int | None = None,
    seed: int = 0,
) -> CompanionSets:
    """Choose two disjoint companion-cluster sets for every cluster.

    Each cluster's in-window support on each side is reduced to at most
    ``L = R // (4J)`` points (lower empirical quantiles when it has more
    distinct values). Step 1 collects the clusters owning the J closest
    support values of other clusters to each of the cluster's support
    points; step 2 repeats the search with the step-1 clusters excluded.
    Support values are jittered by ~1e-9 sd(x) when mass points exist.
    """
    if J < 1:
        raise InvalidConfig("J must be at least 1")
    R = 12 * J if R is None else int(R)
    L = R // (4 * J)
    if L < 1:
        raise InvalidConfig(f"R = {R} too small for J = {J}: need R >= 4J")
    G = sample.G
    pts = _support_points(sample, h, L)

    jittered = False
    vals = {s: pts[s][0].copy() for s in (0, 1)}
    if any(np.unique(vals[s]).size < vals[s].size for s in (0, 1)):
        sd = float(np.std(sample.x, ddof=1)) if sample.n > 1 else 1.0
        rng = np.random.default_rng(seed)
        scale = 1e-9 * (sd if sd > 0 else 1.0)
        for s in (0, 1):
            vals[s] = vals[s] + rng.uniform(-scale, scale, size=vals[s].size)
        jittered = True

    pools = {}
    for s in (0, 1):
        xv, cl, posin = pts[s]
        if xv.size == 0:
            continue
        n_cl = np.unique(cl).size
        if n_cl < 2 * J * L:
            raise TooFewClusters(
                SIDES[s], f"side '{SIDES[s]}' has {n_cl} clusters in the window, need at least 2JL = {2 * J * L}")
        key = np.lexsort((posin, sample.cluster_rank[cl]))
        rank = np.empty_like(key)
        rank[key] = np.arange(key.size)
        pools[s] = _Pool.build(vals[s], rank, cl, np.arange(xv.size))

    def run_step(excluded_codes: np.ndarray, users: np.ndarray | None = None) -> np.ndarray:
        found = []
        for s, pool in pools.items():
            qpos = np.arange(pool.x.size)
            if users is not None:
                qpos = qpos[np.isin(pool.owner, users)]
                if qpos.size == 0:
                    continue
            qowner = pool.owner[qpos]

            def valid(qi, pos, pool=pool, qowner=qowner):
                own = pool.owner[pos]
                ok = own != qowner[qi]
                if excluded_codes.size:
                    ok &= ~_in_sorted(_codes(qowner[qi], own, G), excluded_codes)
                return ok

            q, p, cnt = _window_knn(pool, qpos, pool.x[qpos], J, valid, ties=False)
            if np.any(cnt < J):
                raise TooFewClusters(SIDES[s], f"not enough companion candidates on side '{SIDES[s]}'")
            found.append(np.unique(_codes(qowner[q], pool.owner[p], G)))
        return np.unique(np.concatenate(found)) if found else np.zeros(0, np.int64)

    c1 = run_step(np.zeros(0, np.int64))
    c2 = _capped_second_step(run_step, c1, G, R, sample.cluster_rank)

    def to_sets(codes):
        sets = [[] for _ in range(G)]
        for g, c in zip((codes // G).tolist(), (codes % G).tolist()):
            sets[g].append(c)
        return tuple(frozenset(s) for s in sets)

    support = {}
    for s in (0, 1):
        xv, cl, _ = pts[s]
        starts = np.searchsorted(cl, np.arange(G + 1))
        support[SIDES[s]] = tuple(xv[starts[g]:starts[g + 1]] for g in range(G))
    return CompanionSets(to_sets(c1), to_sets(c2), support, J, R, L, jittered)


def _capped_second_step(run_step, c1: np.ndarray, G: int, R: int, rank: np.ndarray) -> np.ndarray:
    """Second companion search, repaired so that no cluster serves more than R others.

    Step 1 alone respects the cap, but excluding the step-1 clusters lets a
    cluster be picked by more step-2 users than the cap allows. Whenever that
    happens the lowest-ranked users keep it, the others are banned from it and
    search again; the result equals the unconstrained search when no cluster
    is oversubscribed.
    """
    use1 = np.bincount(c1 % G, minlength=G)
    banned = np.zeros(0, np.int64)
    c2 = run_step(c1)
    while True:
        users, comp = c2 // G, c2 % G
        total = use1 + np.bincount(comp, minlength=G)
        over = np.flatnonzero(total > R)
        if over.size == 0:
            return c2
        drop = []
        for c in over.tolist():
            mine = users[comp == c]
            mine = mine[np.argsort(rank[mine], kind="stable")]
            drop.extend(_codes(mine[max(R - use1[c], 0):], np.full(len(mine), c)[max(R - use1[c], 0):], G))
        drop = np.unique(np.asarray(drop, dtype=np.int64))
        banned = np.union1d(banned, drop)
        reopen = np.unique(drop // G)
        keep = c2[~np.isin(users, reopen)]
        fresh = run_step(np.union1d(c1, banned), users=reopen)
        c2 = np.union1d(keep, fresh)


# --------------------------------------------------------------------------
# neighbour plan and the CNN estimator

@dataclass(frozen=True, eq=False)
class NeighborPlan:
    """Companion sets plus the two neighbour sets of each covered unit.

    Neighbour sets are stored CSR-style over observation indices:
    ``N[d][0]`` is the indptr (length n + 1), ``N[d][1]`` the neighbour
    observation indices; uncovered units have empty rows.
    """

    R1: tuple
    R2: tuple
    N1: tuple
    N2: tuple
    covered: np.ndarray
    J: int
    R: int
    L: int
    n: int = field(default=0)

    def neighbors(self, d: int, obs: int) -> np.ndarray:
        indptr, idx = self.N1 if d == 1 else self.N2
        return idx[indptr[obs]:indptr[obs + 1]]

    @cached_property
    def _averagers(self) -> tuple[sparse.csr_matrix, sparse.csr_matrix]:
        mats = []
        for indptr, idx in (self.N1, self.N2):
            cnt = np.diff(indptr)
            data = np.repeat(1.0 / np.maximum(cnt, 1), cnt)
            mats.append(sparse.csr_matrix((data, idx, indptr), shape=(self.n, self.n)))
        return mats[0], mats[1]

    def to_dict(self, sample: ClusteredSample) -> dict[str, Any]:
        ids = sample.cluster_ids
        units = []
        for o in np.flatnonzero(self.covered):
            g, i = int(sample.cluster[o]), int(sample.within[o])
            units.append({
                "cluster": str(ids[g]),
                "index": i,
                "N1": [[str(ids[sample.cluster[m]]), int(sample.within[m])] for m in self.neighbors(1, o)],
                "N2": [[str(ids[sample.cluster[m]]), int(sample.within[m])] for m in self.neighbors(2, o)],
            })
        return {
            "J": self.J,
            "R": self.R,
            "L": self.L,
            "companions": [
                {"cluster": str(ids[g]),
                 "R1": sorted(str(ids[c]) for c in self.R1[g]),
                 "R2": sorted(str(ids[c]) for c in self.R2[g])}
                for g in range(len(self.R1))
            ],
            "units": units,
        }


def build_neighbor_sets(
    sample: ClusteredSample,
    h: float,
    companions: CompanionSets,
    J: int | None = None,
    units: np.ndarray | None = None,
) -> NeighborPlan:
    """Neighbour sets drawn from each cluster's companion clusters.

    For each covered unit and d in {1, 2}, N^d holds the J nearest in-window
    units on the same side from clusters in R^d of the unit's cluster, plus
    every unit tied at the J-th distance. ``units`` (boolean mask) selects
    the covered units; by default every in-window unit.
    """
    J = companions.J if J is None else J
    x = sample.x
    n, G = sample.n, sample.G
    inwin = _window_mask(sample, h)
    covered = inwin.copy() if units is None else (np.asarray(units, dtype=bool) & inwin)
    side = _side_code(x)
    csr = []
    for d, comp in ((1, companions.R1), (2, companions.R2)):
        codes = np.array(sorted(g * G + c for g in range(G) for c in comp[g]), dtype=np.int64)
        q_all, n_all = [], []
        for s in (0, 1):
            members = np.flatnonzero(inwin & (side == s))
            qs = np.flatnonzero(covered & (side == s))
            if qs.size == 0:
                continue
            if members.size == 0:
                o = qs[0]
                raise NoEligibleNeighbor(int(sample.cluster[o]), int(sample.within[o]), d)
            pool = _Pool.build(x[members], sample.obs_key[members], sample.cluster[members], members)
            qpos = np.clip(np.searchsorted(pool.x, x[qs]), 0, pool.x.size - 1)
            qcl = sample.cluster[qs]

            def valid(qi, pos, pool=pool, qcl=qcl):
                return _in_sorted(_codes(qcl[qi], pool.owner[pos], G), codes)

            q, p, cnt = _window_knn(pool, qpos, x[qs], J, valid, ties=True)
            bad = np.flatnonzero(cnt < J)
            if bad.size:
                o = qs[bad[0]]
                raise NoEligibleNeighbor(int(sample.cluster[o]), int(sample.within[o]), d)
            q_all.append(qs[q])
            n_all.append(pool.ref[p])
        q = np.concatenate(q_all) if q_all else np.zeros(0, np.int64)
        nb = np.concatenate(n_all) if n_all else np.zeros(0, np.int64)
        order = np.argsort(q, kind="stable")
        csr.append(_csr_from_pairs(q[order], nb[order], n))
    return NeighborPlan(companions.R1, companions.R2, csr[0], csr[1], covered,
                        J, companions.R, companions.L, n)


def neighbor_residuals(plan: NeighborPlan, y: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Y minus the mean over N^1 and over N^2 (zero for uncovered units).

    ``y`` may be 1-d or (n, reps).
    """
    y = np.asarray(y, dtype=float)
    _check_len("y", y, plan.n)
    a1, a2 = plan._averagers
    mask = plan.covered if y.ndim == 1 else plan.covered[:, None]
    return np.where(mask, y - a1 @ y, 0.0), np.where(mask, y - a2 @ y, 0.0)


def cnn_se2(sample: ClusteredSample, weights: WeightSet, plan: NeighborPlan, y: np.ndarray | None = None):
    """Raw CNN variance estimate(s); vectorized over columns of ``y``."""
    _check_len("weights", weights.w, sample.n)
    if plan.n != sample.n:
        raise ShapeMismatch("plan and sample disagree on n")
    if np.any((weights.w != 0) & ~plan.covered):
        raise IncompletePlan("plan does not cover every unit with nonzero weight")
    y = sample.y if y is None else np.asarray(y, dtype=float)
    d1, d2 = neighbor_residuals(plan, y)
    w = weights.w if y.ndim == 1 else weights.w[:, None]
    s1 = _cluster_sums(sample.cluster, sample.G, w * d1)
    s2 = _cluster_sums(sample.cluster, sample.G, w * d2)
    if y.ndim == 1:
        return math.fsum(s1 * s2)
    return (s1 * s2).sum(axis=0)


def se_cnn(sample: ClusteredSample, weights: WeightSet, plan: NeighborPlan) -> StdError:
    """Clustered nearest-neighbours standard error (no bias-correction factor)."""
    return StdError.from_se2(cnn_se2(sample, weights, plan))


def neighbor_distance_diag(sample: ClusteredSample, weights: WeightSet, plan: NeighborPlan) -> float:
    """Largest running-variable distance between a weighted unit and its neighbours."""
    best = 0.0
    x = sample.x
    for indptr, idx in (plan.N1, plan.N2):
        cnt = np.diff(indptr)
        owner = np.repeat(np.arange(plan.n), cnt)
        use = weights.w[owner] != 0
        if np.any(use):
            best = max(best, float(np.max(np.abs(x[owner[use]] - x[idx[use]]))))
    return best
