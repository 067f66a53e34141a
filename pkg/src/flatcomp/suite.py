"""Compression sweeps over a frozen checkpoint: FP, one-shot pruning, PTQ."""
from __future__ import annotations

from dataclasses import dataclass, field
from decimal import ROUND_HALF_EVEN, Decimal
from typing import List, Optional, Sequence

import numpy as np

from .checkpoint import Checkpoint
from .data import Dataset
from .models import ModelSpec, accuracy, collect_activations, site_names
from .params import ParamSet
from .prune import apply_mask, prune
from .quant import QuantConfig, calibrate_activations, parse_wa, ptq_apply

CENT = Decimal("0.01")


@dataclass(frozen=True)
class ResultRow:
    task: str
    method: str
    finetune_opt: str
    config: str
    top1: Decimal
    drop_from_fp: Decimal
    seed: int


@dataclass
class SuiteConfig:
    task: str = "mnist"
    finetune_opt: str = ""
    seed: int = 0
    prune_scorings: Sequence[str] = ("magnitude", "wanda")
    sparsities: Sequence[float] = ()
    nm_patterns: Sequence[str] = ()
    quant_configs: Sequence[str] = ()
    granularity: str = "per_tensor"
    act_range_mode: str = "minmax"
    percentile: float = 99.99
    calib_size: int = 128
    # None -> skip the first and last weight layer (input embedding / classifier)
    prune_exclude: Optional[Sequence[str]] = None

    @classmethod
    def from_dict(cls, d: dict) -> "SuiteConfig":
        known = set(cls.__dataclass_fields__)
        return cls(**{k: v for k, v in d.items() if k in known})


def top1_percent(correct: int, total: int) -> Decimal:
    return (Decimal(100 * correct) / Decimal(total)).quantize(CENT, rounding=ROUND_HALF_EVEN)


def calibration_slice(train: Dataset, size: int, seed: int) -> Dataset:
    """First ``size`` training samples under the run seed's shuffle."""
    order = np.random.default_rng(seed).permutation(len(train))
    return train.subset(order[:size], f"{train.source}:calib{size}@seed{seed}")


def default_exclude(spec: ModelSpec) -> List[str]:
    sites = site_names(spec)
    return [sites[0], sites[-1]] if len(sites) > 1 else []


def run_compression_suite(ckpt: Checkpoint, suite: SuiteConfig, test: Dataset,
                          calib: Dataset) -> List[ResultRow]:
    """Evaluate FP accuracy, then every requested pruning and quantization cell.

    Rows come out in a fixed order: FP, unstructured sparsities per scoring,
    N:M patterns per scoring, quantization configs. The checkpoint is not
    modified.
    """
    spec = ModelSpec.from_dict(ckpt.manifest["model"])
    params: ParamSet = ckpt.params
    opt = suite.finetune_opt or ckpt.manifest.get("optimizer", {}).get("optimizer", "")
    x, y = test.images, test.labels
    fp = top1_percent(*accuracy(spec, params, x, y))

    def row(method, config, top1):
        return ResultRow(suite.task, method, opt, config, top1, top1 - fp, suite.seed)

    rows = [row("FP32", "FP32", fp)]
    calib_x = calib.images[:suite.calib_size]
    acts = None
    exclude = default_exclude(spec) if suite.prune_exclude is None else list(suite.prune_exclude)

    if suite.sparsities or suite.nm_patterns:
        if "wanda" in suite.prune_scorings:
            acts = collect_activations(spec, params, calib_x)
        for scoring in suite.prune_scorings:
            for s in suite.sparsities:
                mask = prune(params, scoring=scoring, sparsity=float(s), activations=acts, exclude=exclude)
                pruned = apply_mask(params, mask)
                rows.append(row(scoring, f"unstructured@{float(s):.2f}",
                                top1_percent(*accuracy(spec, pruned, x, y))))
            for pattern in suite.nm_patterns:
                mask = prune(params, scoring=scoring, nm=pattern, activations=acts, exclude=exclude)
                pruned = apply_mask(params, mask)
                rows.append(row(scoring, f"nm{pattern}", top1_percent(*accuracy(spec, pruned, x, y))))

    ranges_cache = {}
    for label in suite.quant_configs:
        w_bits, a_bits = parse_wa(label)
        cfg = QuantConfig(w_bits=w_bits, a_bits=a_bits, weight_granularity=suite.granularity,
                          act_range_mode=suite.act_range_mode, percentile=suite.percentile,
                          calib_size=suite.calib_size)
        ranges = None
        if a_bits < 16:
            if "ranges" not in ranges_cache:
                ranges_cache["ranges"] = calibrate_activations(spec, params, calib_x, cfg)
            ranges = ranges_cache["ranges"]
        qm = ptq_apply(spec, params, cfg, ranges)
        tag = label.upper() + ("" if suite.granularity == "per_tensor" else "-pc")
        rows.append(row("BasePTQ", tag, top1_percent(*qm.accuracy(x, y))))
    return rows
