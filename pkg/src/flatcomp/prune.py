"""One-shot pruning: magnitude and Wanda scores, unstructured and N:M masks.

Scores and masks are computed on ``out x in`` matrices (see
:func:`flatcomp.params.weight_matrix`) and stored back in each weight's own
layout. Nothing here computes a gradient.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Dict, Iterable, Mapping, Optional, Sequence

import numpy as np

from .errors import CalibrationError, StructureError
from .params import ParamSet, from_weight_matrix, weight_matrix

SCOPES = ("per_layer", "per_output_row", "global")


@dataclass
class PruneMask:
    """Binary keep-masks (1 = keep) per weight name, in stored weight layout."""

    masks: Dict[str, np.ndarray]
    structure: str = "unstructured"  # or "nm(N,M)"
    target_sparsity: float = 0.0
    scoring: str = "magnitude"

    def sparsity(self) -> float:
        total = sum(m.size for m in self.masks.values())
        kept = sum(int(m.sum()) for m in self.masks.values())
        return 1.0 - kept / total if total else 0.0


def magnitude_scores(w: np.ndarray) -> np.ndarray:
    return np.abs(w)


def wanda_norms(activations: np.ndarray) -> np.ndarray:
    """Column l2 norms of a ``samples x in`` activation matrix.

    Squares are accumulated sample by sample so the result does not depend on
    numpy's reduction order.
    """
    a = np.asarray(activations, dtype=np.float64)
    acc = np.zeros(a.shape[1:])
    for row in a:
        acc += row * row
    return np.sqrt(acc)


def wanda_calib(activations: Mapping[str, np.ndarray]) -> Dict[str, np.ndarray]:
    return {name: wanda_norms(a) for name, a in activations.items()}


def wanda_scores(w: np.ndarray, norms: np.ndarray) -> np.ndarray:
    """``|W_ij| * ||X_j||`` for ``w`` given as ``out x in``."""
    norms = np.asarray(norms, dtype=np.float64)
    if norms.ndim != 1 or norms.shape[0] != w.shape[1]:
        raise CalibrationError(f"calibration has {norms.shape} norms for {w.shape[1]} input features")
    return np.abs(w) * norms[None, :]


def _prune_lowest(scores: np.ndarray, k: int) -> np.ndarray:
    """Keep-mask over a flat score vector pruning the ``k`` lowest (ties: lowest index first)."""
    mask = np.ones(scores.size)
    if k > 0:
        order = np.argsort(scores, kind="stable")
        mask[order[:k]] = 0.0
    return mask


def unstructured_mask(scores: Mapping[str, np.ndarray], sparsity: float,
                      scope: str = "per_layer", scoring: str = "magnitude") -> PruneMask:
    """Zero the ``floor(sparsity * group_size)`` lowest scores within each comparison group.

    ``scores`` are ``out x in`` matrices; rows are the groups for
    ``per_output_row``, whole matrices for ``per_layer`` and all layers at once
    for ``global`` (flattened in mapping order). Returned masks are ``out x in``.
    """
    if not 0.0 <= sparsity < 1.0:
        raise ValueError(f"sparsity must be in [0, 1), got {sparsity}")
    if scope not in SCOPES:
        raise ValueError(f"unknown scope {scope!r}")
    masks = {}
    if scope == "global":
        names = list(scores)
        flat = np.concatenate([np.ravel(scores[n]) for n in names]) if names else np.zeros(0)
        keep = _prune_lowest(flat, math.floor(sparsity * flat.size))
        offset = 0
        for n in names:
            s = np.asarray(scores[n])
            masks[n] = keep[offset:offset + s.size].reshape(s.shape)
            offset += s.size
    else:
        for name, s in scores.items():
            s = np.asarray(s, dtype=np.float64)
            if scope == "per_layer":
                masks[name] = _prune_lowest(s.ravel(), math.floor(sparsity * s.size)).reshape(s.shape)
            else:
                k = math.floor(sparsity * s.shape[1])
                masks[name] = np.stack([_prune_lowest(row, k) for row in s])
    return PruneMask(masks, "unstructured", sparsity, scoring)


def nm_mask(scores: Mapping[str, np.ndarray], n: int, m: int, scoring: str = "magnitude") -> PruneMask:
    """Keep the ``n`` highest of every ``m`` consecutive input weights per output row.

    Ties keep the lower index.
    """
    if not 0 < n < m:
        raise StructureError(f"N:M requires 0 < N < M, got {n}:{m}")
    masks = {}
    for name, s in scores.items():
        s = np.asarray(s, dtype=np.float64)
        rows, cols = s.shape
        if cols % m:
            raise StructureError(f"{name}: M={m} does not divide input dimension {cols}")
        groups = s.reshape(rows, cols // m, m)
        # stable sort on negated scores keeps the lower index first among ties
        order = np.argsort(-groups, axis=-1, kind="stable")
        keep = np.zeros_like(groups)
        np.put_along_axis(keep, order[..., :n], 1.0, axis=-1)
        masks[name] = keep.reshape(rows, cols)
    return PruneMask(masks, f"nm({n},{m})", 1.0 - n / m, scoring)


def parse_nm(text: str):
    """``"16:32"`` -> ``(16, 32)``."""
    try:
        n, m = (int(t) for t in text.split(":"))
    except ValueError as exc:
        raise StructureError(f"cannot parse N:M pattern {text!r}") from exc
    return n, m


def apply_mask(params: ParamSet, mask: PruneMask) -> ParamSet:
    """``w * mask`` for masked weights; biases and norm parameters untouched."""
    arrays = {}
    for name, arr in params.items():
        if name in mask.masks:
            if params.role(name) != "weight":
                raise StructureError(f"mask given for non-weight parameter {name!r}")
            mk = mask.masks[name]
            if mk.shape != arr.shape:
                raise StructureError(f"{name}: mask shape {mk.shape} vs weight {arr.shape}")
            arrays[name] = arr * mk
        else:
            arrays[name] = arr
    unknown = set(mask.masks) - set(params)
    if unknown:
        raise StructureError(f"mask names not in parameters: {sorted(unknown)}")
    return params.with_arrays(arrays)


def prunable(params: ParamSet, exclude: Sequence[str] = ()) -> list:
    return [n for n in params.weight_names() if n not in exclude]


def prune(params: ParamSet, *, scoring: str = "magnitude", sparsity: float = 0.5,
          nm: Optional[str] = None, scope: Optional[str] = None,
          activations: Optional[Mapping[str, np.ndarray]] = None,
          exclude: Sequence[str] = ()) -> PruneMask:
    """Score every prunable weight and build a mask in stored layout.

    Magnitude compares per layer by default, Wanda per output row. With
    ``nm="N:M"`` the structured pattern replaces ``sparsity``.
    """
    names = prunable(params, exclude)
    if scoring == "magnitude":
        scores = {n: magnitude_scores(weight_matrix(params[n])) for n in names}
        scope = scope or "per_layer"
    elif scoring == "wanda":
        if activations is None:
            raise CalibrationError("wanda scoring needs calibration activations")
        missing = [n for n in names if n not in activations]
        if missing:
            raise CalibrationError(f"no calibration activations for {missing}")
        scores = {n: wanda_scores(weight_matrix(params[n]), wanda_norms(activations[n])) for n in names}
        scope = scope or "per_output_row"
    else:
        raise ValueError(f"unknown scoring {scoring!r}")
    if nm is not None:
        n, m = parse_nm(nm) if isinstance(nm, str) else nm
        mat_mask = nm_mask(scores, n, m, scoring)
    else:
        mat_mask = unstructured_mask(scores, sparsity, scope, scoring)
    mat_mask.masks = {n: from_weight_matrix(mk, params[n].shape) for n, mk in mat_mask.masks.items()}
    return mat_mask
