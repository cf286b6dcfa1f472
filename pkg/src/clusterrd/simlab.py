"""Synthetic clustered RD designs and Monte Carlo studies.

Designs cover the four asymptotic frameworks (continuous or cluster-constant
running variable, small or large clusters) and the heterogeneous-size
example with ``n - floor(n^a)`` singletons plus ``floor(n^b)`` clusters of
size ``floor(n^(a-b))``. Errors follow a random-effects structure, so the
conditional covariance of every cluster is known in closed form.
"""

from __future__ import annotations

import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, fields
from typing import Any, Callable, Iterable, Sequence

import numpy as np
from scipy import special, stats

from .core import ClusteredSample, get_kernel, kernel_constants
from .errors import (
    AllReplicationsFailed,
    ClusterRDError,
    InvalidConfig,
)
from .estimator import local_linear_weights, rd_estimate, residuals, worst_case_bias, lambda_n
from .variance import (
    SigmaOracle,
    build_neighbor_sets,
    cnn_se2,
    oracle_se2,
    se_crr,
    se_ehw,
    se_naive_cnn,
    se_nn_iid,
    select_companion_clusters,
)

__all__ = [
    "DgpConfig",
    "McReport",
    "dgp_generate",
    "cluster_sizes",
    "monte_carlo",
    "variance_limit_check",
    "density_at_cutoff",
    "SE_METHODS",
    "Z_975",
]

Z_975 = 1.959964
SE_METHODS = ("ehw", "nn_iid", "naive_cnn", "crr", "cnn")
FRAMEWORKS = ("I", "II", "III", "IV", "example2")
X_MODES = ("iid_continuous", "within_cluster_correlated", "cluster_constant")
X_BOUND = 2.0
COPULA_CORR = 0.5

_CONTINUOUS = {"iid_continuous", "within_cluster_correlated"}
_ALLOWED_X = {
    "I": _CONTINUOUS,
    "III": _CONTINUOUS,
    "II": {"cluster_constant"},
    "IV": {"cluster_constant"},
    "example2": set(X_MODES),
}
_DEFAULT_X = {"I": "iid_continuous", "III": "iid_continuous", "II": "cluster_constant",
              "IV": "cluster_constant", "example2": "iid_continuous"}


@dataclass(frozen=True)
class DgpConfig:
    """Simulation design.

    Cluster sizes are fixed across replications: ``size_rule="equal"`` uses
    ``n // G`` per cluster (remainder spread over the first clusters),
    ``"range"`` draws sizes in ``[size_min, size_max]`` summing to ``n``
    from the design seed, and ``"example2"`` uses ``a`` and ``b``.
    """

    framework: str = "I"
    n: int = 1000
    G: int | None = None
    size_rule: str = "equal"
    size_min: int = 1
    size_max: int = 5
    x_mode: str | None = None
    tau: float = 0.0
    slope: float = 0.0
    curvature: float = 0.0
    rho: float = 0.0
    sigma: float = 1.0
    a: float = 0.6
    b: float = 0.3
    seed: int = 0

    def __post_init__(self) -> None:
        if self.framework not in FRAMEWORKS:
            raise InvalidConfig(f"framework must be one of {FRAMEWORKS}")
        if self.x_mode is None:
            object.__setattr__(self, "x_mode", _DEFAULT_X[self.framework])
        if self.x_mode not in X_MODES:
            raise InvalidConfig(f"x_mode must be one of {X_MODES}")
        if self.x_mode not in _ALLOWED_X[self.framework]:
            raise InvalidConfig(f"x_mode {self.x_mode!r} is not compatible with framework {self.framework}")
        if self.framework == "example2" and self.size_rule != "example2":
            object.__setattr__(self, "size_rule", "example2")
        if self.size_rule not in ("equal", "range", "example2"):
            raise InvalidConfig(f"unknown size_rule {self.size_rule!r}")
        if self.n < 2:
            raise InvalidConfig("n must be at least 2")
        if not 0 <= self.rho < 1:
            raise InvalidConfig("rho must lie in [0, 1)")
        if not self.sigma > 0:
            raise InvalidConfig("sigma must be positive")
        if self.size_rule == "example2":
            if not (0 < self.b <= self.a < 1):
                raise InvalidConfig("example2 needs 0 < b <= a < 1")
        else:
            if self.G is None or not 1 <= self.G <= self.n:
                raise InvalidConfig("G must be given with 1 <= G <= n")
            if self.size_rule == "range" and not (
                    1 <= self.size_min <= self.size_max and self.G * self.size_min <= self.n <= self.G * self.size_max):
                raise InvalidConfig("size range cannot produce n observations in G clusters")

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> "DgpConfig":
        names = {f.name for f in fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise InvalidConfig(f"unknown design fields: {sorted(unknown)}")
        return cls(**d)


def cluster_sizes(cfg: DgpConfig) -> np.ndarray:
    """Deterministic cluster sizes for a design (independent of replication)."""
    if cfg.size_rule == "example2":
        n = cfg.n
        singles = n - math.floor(n**cfg.a)
        big = math.floor(n**cfg.b)
        size = math.floor(n ** (cfg.a - cfg.b))
        sizes = np.r_[np.ones(singles, dtype=np.int64), np.full(big, size, dtype=np.int64)]
        return sizes[sizes > 0]
    G = int(cfg.G)
    if cfg.size_rule == "equal":
        sizes = np.full(G, cfg.n // G, dtype=np.int64)
        sizes[: cfg.n % G] += 1
        return sizes
    span = cfg.size_max - cfg.size_min
    extra = cfg.n - G * cfg.size_min
    rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 1]))
    slots = rng.choice(G * span, size=extra, replace=False) if extra else np.zeros(0, np.int64)
    return cfg.size_min + np.bincount(slots // max(span, 1), minlength=G).astype(np.int64)


def _trunc_normal_ppf(p: np.ndarray) -> np.ndarray:
    lo, hi = special.ndtr(-X_BOUND), special.ndtr(X_BOUND)
    return special.ndtri(lo + p * (hi - lo))


def density_at_cutoff() -> float:
    """Marginal density of the simulated running variable at zero."""
    return float(stats.norm.pdf(0.0) / (special.ndtr(X_BOUND) - special.ndtr(-X_BOUND)))


def _mu(cfg: DgpConfig, x: np.ndarray) -> np.ndarray:
    return cfg.tau * (x >= 0) + cfg.slope * x + 0.5 * cfg.curvature * x * x * np.sign(x)


def _rep_rng(cfg: DgpConfig, replication: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([cfg.seed, 2, int(replication)]))


def _draw_x(cfg: DgpConfig, sizes: np.ndarray, cluster: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    n, G = int(sizes.sum()), sizes.size
    if cfg.x_mode == "iid_continuous":
        return _trunc_normal_ppf(rng.random(n))
    if cfg.x_mode == "cluster_constant":
        return _trunc_normal_ppf(rng.random(G))[cluster]
    common = rng.standard_normal(G)[cluster]
    z = math.sqrt(COPULA_CORR) * common + math.sqrt(1 - COPULA_CORR) * rng.standard_normal(n)
    return _trunc_normal_ppf(special.ndtr(z))


def dgp_generate(cfg: DgpConfig, replication: int = 0, sizes: np.ndarray | None = None):
    """One synthetic sample, its covariance oracle and the true jump.

    Deterministic in ``(cfg.seed, replication)``.
    """
    sizes = cluster_sizes(cfg) if sizes is None else sizes
    G = sizes.size
    cluster = np.repeat(np.arange(G), sizes)
    rng = _rep_rng(cfg, replication)
    x = _draw_x(cfg, sizes, cluster, rng)
    alpha = rng.standard_normal(G)[cluster]
    u = rng.standard_normal(cluster.size)
    eps = cfg.sigma * (math.sqrt(cfg.rho) * alpha + math.sqrt(1 - cfg.rho) * u)
    y = _mu(cfg, x) + eps
    sample = ClusteredSample(x, y, cluster, np.zeros(cluster.size, np.int64), tuple(range(G)))
    sigma = SigmaOracle.random_effects(sizes, cfg.sigma, cfg.rho)
    return sample, sigma, cfg.tau


# --------------------------------------------------------------------------
# Monte Carlo

@dataclass
class McReport:
    """Aggregated Monte Carlo results (see ``to_dict`` for the JSON layout)."""

    replications: int
    successes: int
    failures: int
    failure_reasons: dict
    tau: float
    h: float
    mean_tau_hat: float
    sd_tau_hat: float
    mean_bias: float
    mc_se_mean: float
    mean_oracle_se: float
    mean_oracle_se2: float
    mean_bias_bound: float
    ks_pvalue: float | None
    methods: dict
    config: dict = field(default_factory=dict)

    def to_dict(self) -> dict[str, Any]:
        return asdict(self)


def _hrule(h_rule, sample) -> float:
    if callable(h_rule):
        return float(h_rule(sample))
    return float(h_rule)


def _one_replication(args) -> dict[str, Any]:
    cfg, r, h_rule, methods, J, R, kernel_name, M, sizes = args
    kernel = get_kernel(kernel_name)
    sample, sigma, tau = dgp_generate(cfg, r, sizes)
    out: dict[str, Any] = {"replication": r}
    try:
        h = _hrule(h_rule, sample)
        w = local_linear_weights(sample, kernel, h)
        tau_hat, fit = rd_estimate(sample, w)
        out["h"] = h
        out["tau_hat"] = tau_hat
        out["cond_mean"] = math.fsum(w.w * _mu(cfg, sample.x))
        out["oracle_se2"] = oracle_se2(w, sigma)
        out["bias_bound"] = worst_case_bias(sample, w, M).b_bar
        se = {}
        if "ehw" in methods:
            se["ehw"] = se_ehw(w, residuals(sample, fit)) ** 2
        if "crr" in methods:
            se["crr"] = se_crr(sample, w, fit) ** 2
        if "nn_iid" in methods:
            se["nn_iid"] = se_nn_iid(sample, w, J) ** 2
        if "naive_cnn" in methods:
            se["naive_cnn"] = se_naive_cnn(sample, w, J) ** 2
        if "cnn" in methods:
            comp = select_companion_clusters(sample, h, J, R, seed=cfg.seed + r)
            plan = build_neighbor_sets(sample, h, comp, J)
            se["cnn"] = cnn_se2(sample, w, plan)
        out["se2"] = se
    except ClusterRDError as exc:
        out["failed"] = type(exc).__name__
    return out


def _mean(v: Sequence[float]) -> float:
    return math.fsum(v) / len(v)


def _sd(v: Sequence[float]) -> float:
    m = _mean(v)
    return math.sqrt(math.fsum((a - m) ** 2 for a in v) / (len(v) - 1)) if len(v) > 1 else 0.0


def run_replications(cfg: DgpConfig, h_rule, se_methods, reps: int, J=3, R=None, kernel="triangular",
                     M=None, threads: int = 1) -> list[dict[str, Any]]:
    """Per-replication records, sorted by replication index."""
    if reps < 1:
        raise InvalidConfig("reps must be at least 1")
    methods = tuple(se_methods)
    bad = set(methods) - set(SE_METHODS)
    if bad:
        raise InvalidConfig(f"unknown SE methods {sorted(bad)}")
    M = abs(cfg.curvature) if M is None else M
    sizes = cluster_sizes(cfg)
    jobs = [(cfg, r, h_rule, methods, J, R, kernel, M, sizes) for r in range(reps)]
    if threads > 1:
        with ProcessPoolExecutor(max_workers=threads) as ex:
            recs = list(ex.map(_one_replication, jobs, chunksize=max(1, reps // (4 * threads))))
    else:
        recs = [_one_replication(j) for j in jobs]
    return sorted(recs, key=lambda d: d["replication"])


def aggregate(recs: list[dict[str, Any]], cfg: DgpConfig, methods: Sequence[str]) -> McReport:
    ok = [r for r in recs if "failed" not in r]
    reasons: dict[str, int] = {}
    for r in recs:
        if "failed" in r:
            reasons[r["failed"]] = reasons.get(r["failed"], 0) + 1
    if not ok:
        raise AllReplicationsFailed(f"all {len(recs)} replications failed: {reasons}")
    tau = cfg.tau
    th = [r["tau_hat"] for r in ok]
    ose = [math.sqrt(max(r["oracle_se2"], 0.0)) for r in ok]
    z = [(r["tau_hat"] - r["cond_mean"]) / s for r, s in zip(ok, ose) if s > 0]
    ks = float(stats.kstest(z, "norm").pvalue) if len(z) >= 5 else None
    mean_ose = _mean(ose)
    mean_ose2 = _mean([r["oracle_se2"] for r in ok])
    per = {}
    for m in methods:
        se2 = [r["se2"][m] for r in ok]
        se = [math.sqrt(max(v, 0.0)) for v in se2]
        cover = [abs(t - tau) <= Z_975 * s for t, s in zip(th, se)]
        per[m] = {
            "coverage": sum(cover) / len(cover),
            "mean_se": _mean(se),
            "mean_se2": _mean(se2),
            "relative_se_bias": _mean(se) / mean_ose - 1.0 if mean_ose > 0 else None,
            "se2_ratio": _mean(se2) / mean_ose2 if mean_ose2 > 0 else None,
            "negative_estimates": sum(v < 0 for v in se2),
        }
    return McReport(
        replications=len(recs),
        successes=len(ok),
        failures=len(recs) - len(ok),
        failure_reasons=dict(sorted(reasons.items())),
        tau=tau,
        h=_mean([r["h"] for r in ok]),
        mean_tau_hat=_mean(th),
        sd_tau_hat=_sd(th),
        mean_bias=_mean(th) - tau,
        mc_se_mean=_sd(th) / math.sqrt(len(th)),
        mean_oracle_se=mean_ose,
        mean_oracle_se2=mean_ose2,
        mean_bias_bound=_mean([r["bias_bound"] for r in ok]),
        ks_pvalue=ks,
        methods=per,
        config=asdict(cfg),
    )


def monte_carlo(cfg: DgpConfig, h_rule: float | Callable = 0.5, se_methods: Iterable[str] = SE_METHODS,
                reps: int = 100, J: int = 3, R: int | None = None, kernel: str = "triangular",
                M: float | None = None, threads: int = 1) -> McReport:
    """Repeated generate/estimate cycles, aggregated into a :class:`McReport`.

    Replications that violate estimation preconditions count as failures
    and are excluded. Results do not depend on ``threads``.
    """
    methods = tuple(se_methods)
    recs = run_replications(cfg, h_rule, methods, reps, J, R, kernel, M, threads)
    return aggregate(recs, cfg, methods)


def variance_limit_check(cfg: DgpConfig, h: float, reps: int = 200, kernel: str = "triangular",
                         limit: str = "auto") -> dict[str, float]:
    """Mean oracle se^2 over replications against its closed-form limit.

    Continuous designs use the two-term limit with the joint density at
    (0, 0); cluster-constant designs use the limit with ``lambda_n / h``.
    """
    if limit == "auto":
        limit = "degenerate" if cfg.x_mode == "cluster_constant" else "continuous"
    if limit not in ("continuous", "degenerate"):
        raise InvalidConfig(f"unknown limit {limit!r}")
    if (limit == "degenerate") != (cfg.x_mode == "cluster_constant"):
        raise InvalidConfig(f"limit {limit!r} does not match x_mode {cfg.x_mode!r}")
    k = get_kernel(kernel)
    kappa = kernel_constants(k).kappa_bar
    sizes = cluster_sizes(cfg)
    vals = []
    sample = None
    for r in range(reps):
        sample, sigma, _ = dgp_generate(cfg, r, sizes)
        w = local_linear_weights(sample, k, h)
        vals.append(oracle_se2(w, sigma))
    n = sample.n
    lam = lambda_n(sample, h)
    fx = density_at_cutoff()
    var = cfg.sigma**2
    cov = cfg.sigma**2 * cfg.rho          # same covariance for every pair of units
    if limit == "continuous":
        f00 = fx**2 / (math.sqrt(1 - COPULA_CORR**2) if cfg.x_mode == "within_cluster_correlated" else 1.0)
        signed_cov = cov + cov - 2 * cov   # (+,+) + (-,-) - (+,-) - (-,+)
        closed = (kappa * 2 * var / fx + lam * signed_cov * f00 / fx**2) / (n * h)
    else:
        closed = kappa / fx * 2 * (var + lam / h * cov) / (n * h)
    mean_se2 = _mean(vals)
    return {"mean_oracle_se2": mean_se2, "closed_form": closed, "ratio": mean_se2 / closed,
            "lambda_n": lam, "n": n, "h": h, "reps": reps}
