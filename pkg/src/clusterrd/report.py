"""End-to-end analysis of one sample and its JSON report."""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, fields
from typing import Any, Iterable

import numpy as np

from .core import ClusteredSample, WindowConfig, get_kernel, kernel_constants
from .diagnostics import ETA_MAX, ETA_SUM, classify, cluster_weight_ratios
from .errors import InvalidConfig
from .estimator import (
    lambda_n,
    local_linear_weights,
    optimal_bandwidth,
    pilot_bandwidth,
    plug_in_variance_constants,
    rd_estimate,
    residuals,
    worst_case_bias,
)
from .variance import (
    StdError,
    build_neighbor_sets,
    neighbor_distance_diag,
    se_cnn,
    se_crr,
    se_ehw,
    se_naive_cnn,
    se_nn_iid,
    select_companion_clusters,
)

__all__ = ["EstimateReport", "analyze_sample", "auto_bandwidth", "dumps", "plot_bins", "SE_METHODS", "Z_975"]

Z_975 = 1.959964
SE_METHODS = ("ehw", "nn_iid", "naive_cnn", "crr", "cnn")


def _se_entry(est: StdError) -> dict[str, Any]:
    return {"value": est.value, "se2": est.se2, "negative_estimate": est.negative}


@dataclass
class EstimateReport:
    """Serializable result of :func:`analyze_sample`.

    ``se`` maps each requested method to ``value``, ``se2``,
    ``negative_estimate`` and the 95% interval ``ci``. Optional fields are
    ``None`` when not computed and are dropped from the JSON form.
    """

    tau_hat: float
    fit: dict
    se: dict
    h: float
    kernel: str
    cutoff: float
    n: int
    G: int
    n_h: int
    G_h: int
    lambda_n: float
    diagnostics: dict
    J: int
    R: int
    seed: int
    bias_bound: dict | None = None
    neighbor_distance: float | None = None
    bandwidth_selection: dict | None = None

    def to_dict(self) -> dict[str, Any]:
        return {k: v for k, v in asdict(self).items() if v is not None}

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> "EstimateReport":
        names = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in d.items() if k in names})


def _plain(obj: Any) -> Any:
    if isinstance(obj, dict):
        return {str(k): _plain(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_plain(v) for v in obj]
    if isinstance(obj, (bool, np.bool_)):
        return bool(obj)
    if isinstance(obj, (int, np.integer)):
        return int(obj)
    if isinstance(obj, (float, np.floating)):
        return float(obj) if math.isfinite(obj) else None
    if isinstance(obj, np.ndarray):
        return _plain(obj.tolist())
    return obj


def _encode(obj: Any, indent: int) -> str:
    pad, inner = "  " * indent, "  " * (indent + 1)
    if isinstance(obj, dict):
        if not obj:
            return "{}"
        items = [f"{inner}{json.dumps(k)}: {_encode(obj[k], indent + 1)}" for k in sorted(obj)]
        return "{\n" + ",\n".join(items) + "\n" + pad + "}"
    if isinstance(obj, list):
        if not obj:
            return "[]"
        return "[\n" + ",\n".join(inner + _encode(v, indent + 1) for v in obj) + "\n" + pad + "]"
    if isinstance(obj, float):
        return format(obj, ".17g") if math.isfinite(obj) else "null"
    return json.dumps(obj)


def dumps(obj: Any) -> str:
    """Deterministic JSON: sorted keys, floats at 17 significant digits,
    non-finite numbers as null."""
    return _encode(_plain(obj), 0)


def auto_bandwidth(sample: ClusteredSample, kernel: str, M: float, J: int, R: int, seed: int) -> dict[str, float]:
    """Plug-in variance constants and the AMSE-optimal bandwidth."""
    k = get_kernel(kernel)
    h_pilot = pilot_bandwidth(sample)
    V1, V2 = plug_in_variance_constants(sample, k, h_pilot, J=J, R=R, seed=seed)
    h = optimal_bandwidth(V2, M, kernel_constants(k), sample.n)
    return {"method": "plug_in", "h_pilot": h_pilot, "V1": V1, "V2": V2, "h": h}


def analyze_sample(
    sample: ClusteredSample,
    h: float,
    kernel: str = "triangular",
    se_methods: Iterable[str] = SE_METHODS,
    J: int = 3,
    R: int | None = None,
    M: float = 0.0,
    seed: int = 0,
    min_per_side: int = 3,
    eta_max: float = ETA_MAX,
    eta_sum: float = ETA_SUM,
    keep_plan: bool = False,
):
    """Weights, estimate, requested SEs and diagnostics for one bandwidth.

    Returns the report, plus the neighbour plan when ``keep_plan`` is set
    (``None`` if CNN was not requested).
    """
    methods = [m for m in SE_METHODS if m in set(se_methods)]
    unknown = set(se_methods) - set(SE_METHODS)
    if unknown:
        raise InvalidConfig(f"unknown SE methods: {sorted(unknown)}")
    R = 12 * J if R is None else R
    k = get_kernel(kernel)
    w = local_linear_weights(sample, k, h, WindowConfig(h, min_per_side))
    tau_hat, fit = rd_estimate(sample, w)

    se: dict[str, StdError] = {}
    plan = None
    if "ehw" in methods:
        se["ehw"] = StdError.from_se2(se_ehw(w, residuals(sample, fit)) ** 2)
    if "nn_iid" in methods:
        se["nn_iid"] = StdError.from_se2(se_nn_iid(sample, w, J) ** 2)
    if "naive_cnn" in methods:
        se["naive_cnn"] = StdError.from_se2(se_naive_cnn(sample, w, J) ** 2)
    if "crr" in methods:
        se["crr"] = StdError.from_se2(se_crr(sample, w, fit) ** 2)
    if "cnn" in methods:
        comp = select_companion_clusters(sample, h, J, R, seed=seed)
        plan = build_neighbor_sets(sample, h, comp, J)
        se["cnn"] = se_cnn(sample, w, plan)

    se_out = {}
    for m in methods:
        entry = _se_entry(se[m])
        half = Z_975 * se[m].value
        entry["ci"] = [tau_hat - half, tau_hat + half]
        se_out[m] = entry

    inwin = np.abs(sample.x) <= h
    diag = classify(cluster_weight_ratios(w, sample), eta_max, eta_sum)
    report = EstimateReport(
        tau_hat=tau_hat,
        fit=asdict(fit),
        se=se_out,
        h=float(h),
        kernel=k.kind,
        cutoff=float(sample.cutoff),
        n=sample.n,
        G=sample.G,
        n_h=int(inwin.sum()),
        G_h=int(np.unique(sample.cluster[inwin]).size),
        lambda_n=lambda_n(sample, h),
        diagnostics=diag.as_dict(),
        J=J,
        R=R,
        seed=seed,
        bias_bound=({"M": M, "b_bar": worst_case_bias(sample, w, M).b_bar} if M > 0 else None),
        neighbor_distance=(neighbor_distance_diag(sample, w, plan) if plan is not None else None),
    )
    return (report, plan) if keep_plan else report


def plot_bins(sample: ClusteredSample, h: float | None = None, bins: int = 20) -> list[dict[str, Any]]:
    """Equal-width bins of x on each side of the cutoff with mean outcomes.

    Bins span ``[-h, 0)`` and ``[0, h]`` when ``h`` is given, else the full
    range of x on each side. Reported edges are in original units.
    """
    x, y, c = sample.x, sample.y, sample.cutoff
    rows = []
    for side, mask in (("-", x < 0), ("+", x >= 0)):
        if not mask.any():
            continue
        if h is not None:
            lo, hi = (-h, 0.0) if side == "-" else (0.0, h)
        else:
            lo, hi = (float(x[mask].min()), 0.0) if side == "-" else (0.0, float(x[mask].max()))
        edges = np.linspace(lo, hi, bins + 1)
        sel = mask & (x >= lo) & (x <= hi)
        idx = np.clip(np.searchsorted(edges, x[sel], side="right") - 1, 0, bins - 1)
        cnt = np.bincount(idx, minlength=bins)
        tot = np.bincount(idx, weights=y[sel], minlength=bins)
        for b in range(bins):
            rows.append({
                "side": side,
                "bin_left": edges[b] + c,
                "bin_right": edges[b + 1] + c,
                "mean_y": tot[b] / cnt[b] if cnt[b] else float("nan"),
                "count": int(cnt[b]),
            })
    return rows
