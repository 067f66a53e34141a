"""SGD, Adam and the SAM wrapper.

Steps are functional in the weights (a new :class:`ParamSet` comes back) and
mutate only the optimizer state object owned by the caller's loop.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Union

import numpy as np

from .params import ParamSet
from .tensor import value_and_grad


@dataclass(frozen=True)
class SgdConfig:
    lr: float = 0.05
    momentum: float = 0.0

    def __post_init__(self):
        if not self.lr > 0:
            raise ValueError(f"lr must be positive, got {self.lr}")
        if not 0.0 <= self.momentum < 1.0:
            raise ValueError(f"momentum must be in [0, 1), got {self.momentum}")


@dataclass(frozen=True)
class AdamConfig:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    def __post_init__(self):
        if not self.lr > 0 or not self.eps > 0:
            raise ValueError("lr and eps must be positive")
        if not (0.0 <= self.beta1 < 1.0 and 0.0 <= self.beta2 < 1.0):
            raise ValueError("betas must lie in [0, 1)")


@dataclass(frozen=True)
class SamConfig:
    rho: float = 0.05
    base: Union[SgdConfig, AdamConfig] = field(default_factory=AdamConfig)

    def __post_init__(self):
        if self.rho < 0:
            raise ValueError(f"rho must be nonnegative, got {self.rho}")


BaseConfig = Union[SgdConfig, AdamConfig]
OptimConfig = Union[SgdConfig, AdamConfig, SamConfig]


@dataclass
class SgdState:
    velocity: Optional[ParamSet] = None


@dataclass
class AdamState:
    m: Optional[ParamSet] = None
    v: Optional[ParamSet] = None
    t: int = 0


@dataclass
class PerturbationState:
    """The applied SAM perturbation and the gradient norm it was built from."""

    epsilon_hat: ParamSet
    grad_norm: float


@dataclass
class SamState:
    base: Union[SgdState, AdamState]
    perturbation: Optional[PerturbationState] = None
    loss: float = float("nan")


def init_state(cfg: OptimConfig):
    if isinstance(cfg, SamConfig):
        return SamState(base=init_state(cfg.base))
    if isinstance(cfg, AdamConfig):
        return AdamState()
    return SgdState()


def sgd_step(w: ParamSet, grads: ParamSet, cfg: SgdConfig, state: SgdState,
             lr: Optional[float] = None) -> ParamSet:
    lr = cfg.lr if lr is None else lr
    if cfg.momentum == 0.0:
        return w.axpy(-lr, grads)
    if state.velocity is None:
        state.velocity = grads.copy()
    else:
        state.velocity = state.velocity.scale(cfg.momentum).axpy(1.0, grads)
    return w.axpy(-lr, state.velocity)


def adam_step(w: ParamSet, grads: ParamSet, cfg: AdamConfig, state: AdamState,
              lr: Optional[float] = None) -> ParamSet:
    """Adam with bias correction."""
    lr = cfg.lr if lr is None else lr
    b1, b2 = cfg.beta1, cfg.beta2
    if state.m is None:
        state.m, state.v = w.zeros_like(), w.zeros_like()
    state.t += 1
    state.m = state.m.zip_map(grads, lambda m, g: b1 * m + (1 - b1) * g)
    state.v = state.v.zip_map(grads, lambda v, g: b2 * v + (1 - b2) * g * g)
    c1, c2 = 1 - b1 ** state.t, 1 - b2 ** state.t
    step = state.m.zip_map(state.v, lambda m, v: (m / c1) / (np.sqrt(v / c2) + cfg.eps))
    return w.axpy(-lr, step)


def base_step(w, grads, cfg: BaseConfig, state, lr=None) -> ParamSet:
    if isinstance(cfg, AdamConfig):
        return adam_step(w, grads, cfg, state, lr)
    return sgd_step(w, grads, cfg, state, lr)


def sam_perturb(w: ParamSet, grads: ParamSet, rho: float) -> PerturbationState:
    """Worst-case first-order perturbation ``rho * g / ||g||`` (global l2 norm)."""
    w.check_aligned(grads)
    norm = grads.norm()
    if norm == 0.0:
        return PerturbationState(grads.zeros_like(), 0.0)
    return PerturbationState(grads.scale(rho / norm), norm)


def sam_step(loss_fn, w: ParamSet, batch, cfg: SamConfig, state: SamState,
             lr: Optional[float] = None) -> ParamSet:
    """One SAM update: gradient at ``w``, ascend to ``w + eps_hat``, descend from ``w``.

    Two forward/backward passes on the same batch. ``state.loss`` is the
    unperturbed loss.
    """
    loss, g = value_and_grad(lambda p: loss_fn(p, batch), w)
    pert = sam_perturb(w, g, cfg.rho)
    _, g_sam = value_and_grad(lambda p: loss_fn(p, batch), w.axpy(1.0, pert.epsilon_hat))
    state.perturbation = pert
    state.loss = loss
    # the perturbed copy is discarded; the base update starts from the original w
    return base_step(w, g_sam, cfg.base, state.base, lr)


def train_step(loss_fn, w: ParamSet, batch, cfg: OptimConfig, state, lr: Optional[float] = None):
    """Dispatch one optimisation step; returns ``(new_weights, loss_at_w)``."""
    if isinstance(cfg, SamConfig):
        new = sam_step(loss_fn, w, batch, cfg, state, lr)
        return new, state.loss
    loss, g = value_and_grad(lambda p: loss_fn(p, batch), w)
    return base_step(w, g, cfg, state, lr), loss


def config_from_dict(d: dict) -> OptimConfig:
    """Build an optimizer config from flat keys: ``optimizer`` in {sgd, adam, sam-sgd, sam-adam}."""
    name = d.get("optimizer", "adam")
    base_name = name.split("-", 1)[1] if name.startswith("sam-") else name
    if base_name == "adam":
        base = AdamConfig(lr=float(d.get("lr", 1e-3)), beta1=float(d.get("beta1", 0.9)),
                          beta2=float(d.get("beta2", 0.999)), eps=float(d.get("adam_eps", 1e-8)))
    elif base_name == "sgd":
        base = SgdConfig(lr=float(d.get("lr", 0.05)), momentum=float(d.get("momentum", 0.0)))
    else:
        raise ValueError(f"unknown optimizer {name!r}")
    if name.startswith("sam-"):
        return SamConfig(rho=float(d.get("rho", 0.05)), base=base)
    return base


def config_to_dict(cfg: OptimConfig) -> dict:
    if isinstance(cfg, SamConfig):
        inner = config_to_dict(cfg.base)
        inner["optimizer"] = "sam-" + inner["optimizer"]
        inner["rho"] = cfg.rho
        return inner
    if isinstance(cfg, AdamConfig):
        return {"optimizer": "adam", "lr": cfg.lr, "beta1": cfg.beta1, "beta2": cfg.beta2,
                "adam_eps": cfg.eps}
    return {"optimizer": "sgd", "lr": cfg.lr, "momentum": cfg.momentum}
