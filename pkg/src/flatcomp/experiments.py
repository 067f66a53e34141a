"""Pretrain -> fine-tune (Adam vs SAM) -> measure -> compress, per seed.

The desk-scale transfer protocol: a tiny ViT is pretrained on the odd MNIST
digits, then fully fine-tuned on all ten digits once with Adam and once with
SAM-Adam at the same learning rate. Each fine-tuned model is measured
(sharpness, weight rank, activation outliers) and pushed through the
compression suite.
"""
from __future__ import annotations

import time
from dataclasses import asdict, dataclass, field
from typing import Dict, List, Optional, Sequence

import numpy as np

from .analysis import ActStatsReport, RankReport, activation_stats, group_blocks, mean_outlier_ratio
from .data import Dataset, load_mnist_dir
from .models import ModelSpec, build, collect_activations, loss_fn
from .optim import config_from_dict, init_state, train_step
from .params import ParamSet
from .sharpness import SharpnessReport, lambda_max
from .suite import ResultRow, SuiteConfig, calibration_slice, run_compression_suite
from .train import RunManifest, TrainResult, finetune


@dataclass
class StudyConfig:
    data_dir: str = "data/mnist5k"
    model: dict = field(default_factory=lambda: {"kind": "tiny_vit", "dim": 64, "heads": 4, "depth": 2})
    pretrain_classes: Sequence[int] = (1, 3, 5, 7, 9)
    pretrain_epochs: int = 3
    pretrain_batch_size: int = 32
    pretrain_lr: float = 1e-3
    epochs: int = 5
    batch_size: int = 8
    lr: float = 1e-3
    rho: float = 0.05
    optimizers: Sequence[str] = ("adam", "sam-adam")
    sharpness_samples: int = 512
    sharpness_tol: float = 1e-3
    sharpness_max_iters: int = 100
    calib_size: int = 128
    rank_threshold: float = 0.8
    sparsities: Sequence[float] = (0.5,)
    nm_patterns: Sequence[str] = ("16:32",)
    quant_configs: Sequence[str] = ("W8A8", "W4A16", "W5A16", "W6A16", "W8A16")
    granularity: str = "per_tensor"
    act_range_mode: str = "minmax"

    @classmethod
    def from_dict(cls, d: dict) -> "StudyConfig":
        known = set(cls.__dataclass_fields__)
        return cls(**{k: v for k, v in d.items() if k in known})

    def to_dict(self) -> dict:
        d = asdict(self)
        return {k: list(v) if isinstance(v, tuple) else v for k, v in d.items()}

    def optimizer_dict(self, name: str) -> dict:
        d = {"optimizer": name, "lr": self.lr}
        if name.startswith("sam-"):
            d["rho"] = self.rho
        return d


@dataclass
class RunOutcome:
    """Measurements of one fine-tuned model."""

    optimizer: str
    train: TrainResult
    sharpness: SharpnessReport
    rows: List[ResultRow]
    rank_groups: Dict[str, RankReport]
    components: float
    act_stats: Dict[str, ActStatsReport]
    outlier: float

    def loss(self, method: str, config: str) -> float:
        """Accuracy lost by a compression cell, in points (positive = worse than FP)."""
        for r in self.rows:
            if r.method == method and r.config == config:
                return float(-r.drop_from_fp)
        raise KeyError((method, config))

    def summary(self) -> dict:
        return {
            "optimizer": self.optimizer,
            "lambda_max": self.sharpness.lambda_max,
            "lambda_iterations": self.sharpness.iterations,
            "components_at": self.components,
            "outlier_ratio": self.outlier,
            "step_seconds_mean": float(np.mean(self.train.step_seconds)) if self.train.step_seconds else 0.0,
            "history": self.train.checkpoint.manifest["history"],
        }


@dataclass
class SeedOutcome:
    seed: int
    pre_sharpness: SharpnessReport
    runs: Dict[str, RunOutcome]
    seconds: float = 0.0

    def summary(self) -> dict:
        return {
            "seed": self.seed,
            "pre_lambda_max": self.pre_sharpness.lambda_max,
            "runs": {k: r.summary() for k, r in self.runs.items()},
            "seconds": self.seconds,
        }


def load_data(cfg: StudyConfig):
    return load_mnist_dir(cfg.data_dir, "train"), load_mnist_dir(cfg.data_dir, "test")


def pretrain(cfg: StudyConfig, spec: ModelSpec, train: Dataset, seed: int) -> ParamSet:
    m = RunManifest("pretrain", spec.to_dict(), {"optimizer": "adam", "lr": cfg.pretrain_lr},
                    epochs=cfg.pretrain_epochs, batch_size=cfg.pretrain_batch_size, seed=seed)
    return finetune(m, train.with_classes(cfg.pretrain_classes)).params


def measure_sharpness(cfg: StudyConfig, spec: ModelSpec, params: ParamSet, test: Dataset,
                      seed: int) -> SharpnessReport:
    ev = test.head(cfg.sharpness_samples)
    return lambda_max(loss_fn(spec), params, (ev.images, ev.labels), tol=cfg.sharpness_tol,
                      max_iters=cfg.sharpness_max_iters, seed=seed, eval_set_id=ev.source)


def run_seed(cfg: StudyConfig, seed: int, train: Dataset, test: Dataset, log=None) -> SeedOutcome:
    t0 = time.perf_counter()
    spec = ModelSpec.from_dict({**cfg.model, "seed": seed})
    pre = pretrain(cfg, spec, train, seed)
    pre_sharp = measure_sharpness(cfg, spec, pre, test, seed)
    calib = calibration_slice(train, cfg.calib_size, seed)
    runs = {}
    for opt in cfg.optimizers:
        manifest = RunManifest(f"finetune-{opt}-seed{seed}", spec.to_dict(), cfg.optimizer_dict(opt),
                               epochs=cfg.epochs, batch_size=cfg.batch_size, seed=seed)
        res = finetune(manifest, train, test, init=pre)
        suite = SuiteConfig(task="mnist", finetune_opt=opt, seed=seed, sparsities=cfg.sparsities,
                            nm_patterns=cfg.nm_patterns, quant_configs=cfg.quant_configs,
                            granularity=cfg.granularity, act_range_mode=cfg.act_range_mode,
                            calib_size=cfg.calib_size)
        rows = run_compression_suite(res.checkpoint, suite, test, calib)
        groups = group_blocks(res.params)
        stats = activation_stats(collect_activations(spec, res.params, calib.images))
        runs[opt] = RunOutcome(
            optimizer=opt,
            train=res,
            sharpness=measure_sharpness(cfg, spec, res.params, test, seed),
            rows=rows,
            rank_groups=groups,
            components=0.5 * (groups["qkv"].components_at(cfg.rank_threshold)
                              + groups["ffn"].components_at(cfg.rank_threshold)),
            act_stats=stats,
            outlier=mean_outlier_ratio(stats),
        )
        if log:
            log(f"seed {seed} {opt}: lambda_max={runs[opt].sharpness.lambda_max:.3f} "
                f"top1={rows[0].top1}")
    return SeedOutcome(seed, pre_sharp, runs, time.perf_counter() - t0)


def step_overhead(cfg: StudyConfig, train: Dataset, steps: int = 200, block: int = 20,
                  seed: int = 0, warmup: int = 10) -> Dict[str, float]:
    """Mean wall-clock seconds per training step for Adam and SAM-Adam.

    Steps alternate in blocks of ``block`` between the two optimizers so that
    drift in machine load hits both alike. Returns per-optimizer means and
    their ratio.
    """
    spec = ModelSpec.from_dict({**cfg.model, "seed": seed})
    objective = loss_fn(spec)
    rng = np.random.default_rng(seed)
    runs = {}
    for name in ("adam", "sam-adam"):
        opt = config_from_dict(cfg.optimizer_dict(name))
        runs[name] = {"cfg": opt, "state": init_state(opt), "w": build(spec), "t": []}

    def batch():
        idx = rng.integers(0, len(train), cfg.batch_size)
        return train.images[idx], train.labels[idx]

    def one(run, record):
        b = batch()
        t0 = time.perf_counter()
        run["w"], _ = train_step(objective, run["w"], b, run["cfg"], run["state"])
        if record:
            run["t"].append(time.perf_counter() - t0)

    for run in runs.values():
        for _ in range(warmup):
            one(run, False)
    while min(len(r["t"]) for r in runs.values()) < steps:
        for run in runs.values():
            for _ in range(block):
                one(run, True)
    out = {name: float(np.mean(r["t"][:steps])) for name, r in runs.items()}
    out["ratio"] = out["sam-adam"] / out["adam"]
    out["steps"] = steps
    return out


def run_study(cfg: StudyConfig, seeds: Sequence[int], log=None,
              data: Optional[tuple] = None) -> List[SeedOutcome]:
    train, test = data if data is not None else load_data(cfg)
    return [run_seed(cfg, s, train, test, log) for s in seeds]
