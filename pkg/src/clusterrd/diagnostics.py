"""Rule-of-thumb statistics for cluster influence on the RD weights."""

from __future__ import annotations

import math
from dataclasses import dataclass, replace

import numpy as np

from .core import ClusteredSample
from .errors import ShapeMismatch, ZeroWeights
from .estimator import WeightSet

__all__ = [
    "ClusterDiagnostics",
    "cluster_weight_ratios",
    "rule_of_thumb",
    "classify",
    "PLAUSIBLE",
    "LARGE_CLUSTERS",
    "ETA_MAX",
    "ETA_SUM",
]

PLAUSIBLE = "frameworks_I_II_plausible"
LARGE_CLUSTERS = "large_cluster_regime"
ETA_MAX = 0.1
ETA_SUM = 10.0


@dataclass(frozen=True)
class ClusterDiagnostics:
    """Per-cluster share of absolute weight cross-products.

    ``w_ratio[g] = (sum_i |w_gi|)^2 / sum_all w^2``; ``w_max`` and ``w_sum``
    are its maximum and total.
    """

    w_ratio: np.ndarray
    w_max: float
    w_sum: float
    eta_max: float = ETA_MAX
    eta_sum: float = ETA_SUM
    verdict: str | None = None

    def as_dict(self) -> dict:
        return {
            "w_max": self.w_max,
            "w_sum": self.w_sum,
            "eta_max": self.eta_max,
            "eta_sum": self.eta_sum,
            "verdict": self.verdict,
        }


def cluster_weight_ratios(weights: WeightSet, sample: ClusteredSample) -> ClusterDiagnostics:
    if weights.n != sample.n:
        raise ShapeMismatch("weights and sample disagree on n")
    w = weights.w
    denom = math.fsum(w * w)
    if denom == 0:
        raise ZeroWeights("all weights are zero")
    # sum_{i,j in g} |w_gi w_gj| = (sum_i |w_gi|)^2
    abs_sum = np.bincount(sample.cluster, weights=np.abs(w), minlength=sample.G)
    sq = abs_sum**2
    ratio = sq / denom
    ratio.setflags(write=False)
    # one division keeps w_sum exactly 1 for singleton clusters
    return ClusterDiagnostics(ratio, float(ratio.max()), math.fsum(sq) / denom)


def rule_of_thumb(diag: ClusterDiagnostics, eta_max: float = ETA_MAX, eta_sum: float = ETA_SUM) -> str:
    """Verdict for the thresholds; both comparisons are inclusive."""
    ok = diag.w_max <= eta_max and diag.w_sum <= eta_sum
    return PLAUSIBLE if ok else LARGE_CLUSTERS


def classify(diag: ClusterDiagnostics, eta_max: float = ETA_MAX, eta_sum: float = ETA_SUM) -> ClusterDiagnostics:
    return replace(diag, eta_max=eta_max, eta_sum=eta_sum, verdict=rule_of_thumb(diag, eta_max, eta_sum))
