"""Fine-tuning loop with cosine learning-rate decay and reproducible manifests."""
from __future__ import annotations

import hashlib
import math
import time
from dataclasses import asdict, dataclass, field
from typing import List, Optional

import numpy as np

from . import __version__
from .checkpoint import Checkpoint, dumps
from .data import Dataset
from .errors import SpecError
from .models import ModelSpec, accuracy, build, loss_fn
from .optim import config_from_dict, init_state, train_step
from .params import ParamSet


@dataclass
class RunManifest:
    """Everything needed to reproduce a training run bit-for-bit."""

    experiment_id: str
    model: dict
    optimizer: dict
    epochs: int = 5
    batch_size: int = 8
    schedule: str = "cosine"
    seed: int = 0
    datasets: dict = field(default_factory=dict)
    init: Optional[str] = None
    toolkit_version: str = __version__
    history: List[dict] = field(default_factory=list)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "RunManifest":
        known = set(cls.__dataclass_fields__)
        return cls(**{k: v for k, v in d.items() if k in known})

    @property
    def spec(self) -> ModelSpec:
        return ModelSpec.from_dict(self.model)


@dataclass
class TrainResult:
    checkpoint: Checkpoint
    step_seconds: List[float]

    @property
    def params(self) -> ParamSet:
        return self.checkpoint.params


def lr_at(base_lr: float, step: int, total: int, schedule: str = "cosine") -> float:
    if schedule == "constant" or total <= 0:
        return base_lr
    if schedule != "cosine":
        raise ValueError(f"unknown schedule {schedule!r}")
    return base_lr * 0.5 * (1.0 + math.cos(math.pi * step / total))


def params_digest(params: ParamSet) -> str:
    h = hashlib.sha256()
    for name, arr in params.items():
        h.update(name.encode())
        h.update(arr.tobytes())
    return h.hexdigest()[:16]


def finetune(manifest: RunManifest, train: Dataset, test: Optional[Dataset] = None,
             init: Optional[ParamSet] = None) -> TrainResult:
    """Train all parameters for ``manifest.epochs`` epochs.

    Starts from ``init`` when given, else from ``build(manifest.spec)``.
    Per-epoch mean train loss and test top-1 are appended to the manifest
    history; wall-clock step times are returned separately so the checkpoint
    stays deterministic.
    """
    spec = manifest.spec
    if tuple(train.images.shape[1:]) != tuple(spec.input_shape):
        raise SpecError(f"dataset geometry {train.images.shape[1:]} does not match model {spec.input_shape}")
    if init is not None and manifest.init is None:
        manifest.init = params_digest(init)
    params = init if init is not None else build(spec)
    cfg = config_from_dict(manifest.optimizer)
    state = init_state(cfg)
    base_lr = cfg.base.lr if hasattr(cfg, "base") else cfg.lr
    objective = loss_fn(spec)
    rng = np.random.default_rng(manifest.seed)
    n, bs = len(train), manifest.batch_size
    steps_per_epoch = math.ceil(n / bs)
    total = manifest.epochs * steps_per_epoch
    step_seconds: List[float] = []
    manifest.datasets.setdefault("train", train.source)
    if test is not None:
        manifest.datasets.setdefault("test", test.source)

    step = 0
    for epoch in range(manifest.epochs):
        order = rng.permutation(n)
        losses = []
        for start in range(0, n, bs):
            idx = order[start:start + bs]
            batch = (train.images[idx], train.labels[idx])
            lr = lr_at(base_lr, step, total, manifest.schedule)
            t0 = time.perf_counter()
            params, loss = train_step(objective, params, batch, cfg, state, lr)
            step_seconds.append(time.perf_counter() - t0)
            losses.append(loss)
            step += 1
        record = {"epoch": epoch + 1, "train_loss": float(np.mean(losses))}
        if test is not None:
            correct, count = accuracy(spec, params, test.images, test.labels)
            record["test_top1"] = 100.0 * correct / count
        manifest.history.append(record)

    ckpt = Checkpoint(manifest.to_dict(), params)
    return TrainResult(ckpt, step_seconds)


def checkpoint_digest(ckpt: Checkpoint) -> str:
    return hashlib.sha256(dumps(ckpt)).hexdigest()
