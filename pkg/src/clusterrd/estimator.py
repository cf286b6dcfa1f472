"""Local linear RD weights, point estimate, worst-case bias and bandwidths."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .core import (
    TRIANGULAR,
    ClusteredSample,
    KernelConstants,
    KernelSpec,
    WindowConfig,
    kernel_constants,
)
from .errors import (
    DegenerateDesign,
    InsufficientSupport,
    InvalidConfig,
    NegativeM,
    ShapeMismatch,
    ZeroCurvature,
)

__all__ = [
    "SideMoments",
    "WeightSet",
    "LocalFit",
    "BiasBound",
    "side_moments",
    "local_linear_weights",
    "rd_estimate",
    "residuals",
    "worst_case_bias",
    "lambda_n",
    "optimal_bandwidth",
    "plug_in_variance_constants",
    "pilot_bandwidth",
]

DENOM_TOL = 1e-12
SIDES = ("+", "-")


def _side_masks(x: np.ndarray) -> dict[str, np.ndarray]:
    # x == 0 belongs to the treated side
    return {"+": x >= 0, "-": x < 0}


@dataclass(frozen=True)
class SideMoments:
    """S[side][l] = (1/n) sum k_h^side(X) (X/h)^l for l = 0..3."""

    plus: tuple[float, float, float, float]
    minus: tuple[float, float, float, float]

    def __getitem__(self, side: str) -> tuple[float, float, float, float]:
        return self.plus if side == "+" else self.minus


def _kernel_h(sample: ClusteredSample, k: KernelSpec, h: float) -> np.ndarray:
    return k(sample.x / h) / h


def side_moments(sample: ClusteredSample, k: KernelSpec, h: float) -> SideMoments:
    """Kernel-weighted side moments of the scaled running variable."""
    if not h > 0:
        raise InvalidConfig(f"bandwidth must be positive, got {h}")
    kh = _kernel_h(sample, k, h)
    v = sample.x / h
    out = {}
    for side, mask in _side_masks(sample.x).items():
        kv = np.where(mask, kh, 0.0)
        out[side] = tuple(math.fsum(kv * v**l) / sample.n for l in range(4))
    return SideMoments(out["+"], out["-"])


@dataclass(frozen=True, eq=False)
class WeightSet:
    """Per-observation local linear weights, in sample storage order.

    ``w = w_plus - w_minus``; ``slope_plus``/``slope_minus`` are the matching
    weights that produce the side slopes, so every quantity of the local
    fit is linear in y.
    """

    w: np.ndarray
    w_plus: np.ndarray
    w_minus: np.ndarray
    slope_plus: np.ndarray
    slope_minus: np.ndarray
    side_moments: SideMoments
    h: float
    kernel: str

    @property
    def n(self) -> int:
        return int(self.w.size)

    @property
    def nonzero(self) -> np.ndarray:
        return self.w != 0

    def by_cluster(self, sample: ClusteredSample) -> list[np.ndarray]:
        return [self.w[sample.offsets[g]:sample.offsets[g + 1]] for g in range(sample.G)]


def local_linear_weights(
    sample: ClusteredSample,
    k: KernelSpec,
    h: float,
    cfg: WindowConfig | None = None,
) -> WeightSet:
    """Closed-form local linear weights from the 2x2 side normal equations."""
    cfg = cfg or WindowConfig(h)
    if not h > 0:
        raise InvalidConfig(f"bandwidth must be positive, got {h}")
    n = sample.n
    x = sample.x
    kh = _kernel_h(sample, k, h)
    v = x / h
    moments = side_moments(sample, k, h)
    w_side, s_side = {}, {}
    for side, mask in _side_masks(x).items():
        active = mask & (kh > 0)
        if active.sum() < cfg.min_per_side:
            raise InsufficientSupport(
                side, f"side '{side}' has {int(active.sum())} observations with positive kernel weight "
                      f"(need {cfg.min_per_side})")
        if np.unique(x[active]).size < 2:
            raise InsufficientSupport(side, f"side '{side}' has fewer than 2 distinct x values in the window")
        s0, s1, s2, _ = moments[side]
        det = s2 * s0 - s1 * s1
        if det <= DENOM_TOL:
            raise DegenerateDesign(side, f"side '{side}': S2*S0 - S1^2 = {det:.3g}")
        ks = np.where(active, kh, 0.0) / n
        w_side[side] = ks * (s2 - s1 * v) / det
        s_side[side] = ks * (s0 * v - s1) / (det * h)
    w = w_side["+"] - w_side["-"]
    return WeightSet(w, w_side["+"], w_side["-"], s_side["+"], s_side["-"], moments, float(h), k.kind)


@dataclass(frozen=True)
class LocalFit:
    """Intercepts and slopes of the side-specific weighted regressions."""

    b0_plus: float
    b1_plus: float
    b0_minus: float
    b1_minus: float

    @property
    def tau(self) -> float:
        return self.b0_plus - self.b0_minus

    def predict(self, x: np.ndarray) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        return np.where(x >= 0, self.b0_plus + self.b1_plus * x, self.b0_minus + self.b1_minus * x)


def _check_shape(sample: ClusteredSample, weights: WeightSet) -> None:
    if weights.n != sample.n:
        raise ShapeMismatch(f"weights cover {weights.n} observations, sample has {sample.n}")


def rd_estimate(sample: ClusteredSample, weights: WeightSet) -> tuple[float, LocalFit]:
    """tau_hat = sum w_gi Y_gi together with the side regressions."""
    _check_shape(sample, weights)
    y = sample.y
    fit = LocalFit(
        b0_plus=math.fsum(weights.w_plus * y),
        b1_plus=math.fsum(weights.slope_plus * y),
        b0_minus=math.fsum(weights.w_minus * y),
        b1_minus=math.fsum(weights.slope_minus * y),
    )
    return fit.tau, fit


def residuals(sample: ClusteredSample, fit: LocalFit) -> np.ndarray:
    """Residuals from the piecewise linear fit (defined for every observation)."""
    return sample.y - fit.predict(sample.x)


@dataclass(frozen=True)
class BiasBound:
    M: float
    b_bar: float


def worst_case_bias(sample: ClusteredSample, weights: WeightSet, M: float) -> BiasBound:
    """Maximal conditional bias over functions with |mu''| <= M on each side."""
    if M < 0:
        raise NegativeM(f"M must be nonnegative, got {M}")
    _check_shape(sample, weights)
    x = sample.x
    b = -(M / 2.0) * math.fsum(weights.w * x * x * np.sign(x))
    return BiasBound(float(M), b)


def lambda_n(sample: ClusteredSample, h: float) -> float:
    """(h/n) * sum_g n_g (n_g - 1), using full cluster sizes."""
    if not h > 0:
        raise InvalidConfig(f"bandwidth must be positive, got {h}")
    s = sum(int(m) * (int(m) - 1) for m in sample.sizes)
    return h * s / sample.n


def optimal_bandwidth(V: float, M: float, constants: KernelConstants, n: int) -> float:
    """Minimizer of M^2 mu_bar^2 h^4 + V / (n h)."""
    if not M > 0:
        raise ZeroCurvature("M must be positive for a finite optimal bandwidth")
    if not V > 0:
        raise InvalidConfig(f"variance constant must be positive, got {V}")
    if constants.mu_bar == 0:
        raise InvalidConfig("kernel bias constant is zero")
    return (V / (4.0 * M * M * constants.mu_bar**2)) ** 0.2 * n ** -0.2


def pilot_bandwidth(sample: ClusteredSample) -> float:
    return 1.84 * float(np.std(sample.x, ddof=1)) * sample.n ** -0.2


def plug_in_variance_constants(
    sample: ClusteredSample,
    k: KernelSpec,
    h_pilot: float | None = None,
    J: int = 3,
    R: int | None = None,
    seed: int = 0,
    min_per_side: int = 20,
) -> tuple[float, float]:
    """Plug-in estimates of the two AMSE variance constants (V1, V2).

    The density at the cutoff is a triangular-kernel estimate. Variances and
    within-cluster covariances at the cutoff are averages of clustered
    nearest-neighbor product residuals inside the pilot window.
    """
    from .variance import build_neighbor_sets, select_companion_clusters, neighbor_residuals

    h = pilot_bandwidth(sample) if h_pilot is None else float(h_pilot)
    if not h > 0:
        raise InvalidConfig("pilot bandwidth must be positive")
    x, n = sample.x, sample.n
    inwin = np.abs(x) <= h
    sides = _side_masks(x)
    for side, mask in sides.items():
        if (mask & inwin).sum() < min_per_side:
            raise InsufficientSupport(side, f"fewer than {min_per_side} observations within the pilot window")

    f0 = math.fsum(TRIANGULAR(x / h)) / (n * h)
    if f0 <= 0:
        raise InsufficientSupport("+", "density estimate at the cutoff is zero")
    kappa = kernel_constants(k).kappa_bar

    R = 12 * J if R is None else R
    companions = select_companion_clusters(sample, h, J, R, seed=seed)
    plan = build_neighbor_sets(sample, h, companions, J, units=inwin)
    d1, d2 = neighbor_residuals(plan, sample.y)

    var, cov = {}, {}
    cl = sample.cluster
    for side, mask in sides.items():
        idx = np.flatnonzero(mask & inwin)
        var[side] = float(np.mean(d1[idx] * d2[idx]))
        # within-cluster cross products i != j: (sum d1)(sum d2) - sum d1*d2
        s1 = np.bincount(cl[idx], weights=d1[idx], minlength=sample.G)
        s2 = np.bincount(cl[idx], weights=d2[idx], minlength=sample.G)
        cnt = np.bincount(cl[idx], minlength=sample.G)
        diag = np.bincount(cl[idx], weights=d1[idx] * d2[idx], minlength=sample.G)
        pairs = float(np.sum(cnt * (cnt - 1)))
        cov[side] = math.fsum(s1 * s2 - diag) / pairs if pairs > 0 else 0.0

    size_term = sum(int(m) * (int(m) - 1) for m in sample.sizes) / n
    V1 = kappa / f0 * (var["+"] + var["-"])
    V2 = kappa / f0 * sum(var[s] + cov[s] * size_term for s in SIDES)
    return V1, V2
