"""Weight-rank spectra and activation dynamic-range statistics."""
from __future__ import annotations

import re
from dataclasses import dataclass, field
from typing import Dict, List, Mapping, Sequence

import numpy as np

from .errors import GroupingError, StatsError
from .params import ParamSet, weight_matrix

THRESHOLDS = (0.8, 0.9, 0.95)


@dataclass
class RankReport:
    layer: str
    singular_values: np.ndarray
    cumulative_variance: np.ndarray
    members: List[str] = field(default_factory=list)

    def components_at(self, t: float) -> int:
        """Smallest k (1-based) whose cumulative variance reaches ``t``."""
        cv = self.cumulative_variance
        # tiny slack so a curve that reaches t up to rounding still counts
        idx = int(np.searchsorted(cv, t - 1e-12, side="left"))
        return min(idx + 1, len(cv))

    def spectral_entropy(self) -> float:
        p = self.singular_values ** 2
        total = p.sum()
        if total == 0:
            return 0.0
        p = p[p > 0] / total
        return float(-(p * np.log(p)).sum())

    def to_json(self) -> dict:
        return {
            "layer": self.layer,
            "singular_values": [float(s) for s in self.singular_values],
            "cumulative_variance": [float(c) for c in self.cumulative_variance],
            "components_at": {str(t): self.components_at(t) for t in THRESHOLDS},
            "spectral_entropy": self.spectral_entropy(),
        }


def _cumvar(sv: np.ndarray) -> np.ndarray:
    energy = sv ** 2
    total = energy.sum()
    if total == 0:
        return np.ones_like(energy)
    cv = np.cumsum(energy) / total
    cv[-1] = 1.0
    return np.maximum.accumulate(cv)


def singular_spectrum(w: np.ndarray, center: bool = False, layer: str = "") -> RankReport:
    """Singular values (descending) and cumulative squared-singular-value mass of a 2-D matrix."""
    w = np.asarray(w, dtype=np.float64)
    if w.ndim != 2:
        raise StatsError(f"singular_spectrum needs a 2-D matrix, got shape {w.shape}")
    if center:
        w = w - w.mean(axis=0, keepdims=True)
    sv = np.linalg.svd(w, compute_uv=False)
    return RankReport(layer, sv, _cumvar(sv))


def weight_spectrum(params: ParamSet, name: str, center: bool = False) -> RankReport:
    return singular_spectrum(weight_matrix(params[name]), center, layer=name)


def mean_curve(reports: Sequence[RankReport], layer: str) -> RankReport:
    """Pointwise mean of cumulative-variance curves (shorter curves are padded with 1)."""
    if not reports:
        raise GroupingError(f"no layers to average for group {layer!r}")
    n = max(len(r.cumulative_variance) for r in reports)
    curves = np.ones((len(reports), n))
    svs = np.zeros((len(reports), n))
    for i, r in enumerate(reports):
        k = len(r.cumulative_variance)
        curves[i, :k] = r.cumulative_variance
        svs[i, :k] = r.singular_values
    return RankReport(layer, svs.mean(axis=0), curves.mean(axis=0))


_FFN = re.compile(r"^blk\d+\.ffn\d+$")
_QKV = re.compile(r"^blk\d+\.qkv$")


def group_blocks(params: ParamSet, center: bool = False) -> Dict[str, RankReport]:
    """Averaged rank curves over transformer blocks: ``{"ffn": ..., "qkv": ...}``."""
    groups = {"ffn": _FFN, "qkv": _QKV}
    out = {}
    for key, pattern in groups.items():
        names = [n for n in params.weight_names() if pattern.match(n)]
        if not names:
            raise GroupingError(f"no '{key}' block weights found (expected blk<i>.{key}... names)")
        out[key] = mean_curve([weight_spectrum(params, n, center) for n in names], key)
        out[key].members = names
    return out


def mean_components_at(params: ParamSet, t: float = 0.8, center: bool = False) -> float:
    """``components_at(t)`` of the qkv and ffn group curves, averaged over the two groups."""
    g = group_blocks(params, center)
    return 0.5 * (g["qkv"].components_at(t) + g["ffn"].components_at(t))


# ---------------------------------------------------------------------------
# activation statistics


@dataclass
class ActStatsReport:
    layer: str
    min: np.ndarray
    max: np.ndarray
    mean: np.ndarray
    std: np.ndarray
    max_abs: np.ndarray
    outlier_ratio: float

    def to_json(self) -> dict:
        out = {"layer": self.layer, "outlier_ratio": self.outlier_ratio}
        for key in ("min", "max", "mean", "std", "max_abs"):
            out[key] = [float(v) for v in getattr(self, key)]
        return out


def outlier_ratio(max_abs: np.ndarray) -> float:
    """Largest channel max-abs over the median channel max-abs."""
    med = float(np.median(max_abs))
    top = float(np.max(max_abs))
    if med == 0.0:
        return 1.0 if top == 0.0 else float("inf")
    return top / med


def channel_stats(a: np.ndarray, layer: str = "") -> ActStatsReport:
    a = np.asarray(a, dtype=np.float64)
    if a.ndim != 2 or a.shape[0] < 2:
        raise StatsError(f"{layer or 'activations'}: need a samples x channels matrix with >= 2 samples")
    mx = a.max(axis=0)
    mn = a.min(axis=0)
    mean = a.mean(axis=0)
    # clamp the mean into [min, max] against rounding for constant channels
    mean = np.minimum(np.maximum(mean, mn), mx)
    max_abs = np.abs(a).max(axis=0)
    return ActStatsReport(layer, mn, mx, mean, a.std(axis=0), max_abs, outlier_ratio(max_abs))


def activation_stats(activations: Mapping[str, np.ndarray]) -> Dict[str, ActStatsReport]:
    return {name: channel_stats(a, name) for name, a in activations.items()}


def mean_outlier_ratio(reports: Mapping[str, ActStatsReport], sites: Sequence[str] = None) -> float:
    names = list(reports) if sites is None else list(sites)
    return float(np.mean([reports[n].outlier_ratio for n in names]))
