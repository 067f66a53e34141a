"""Top Hessian eigenvalue (sharpness) by power iteration on finite-difference HVPs."""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from typing import List, Optional

import numpy as np

from .params import ParamSet
from .tensor import hvp


@dataclass
class SharpnessReport:
    lambda_max: float
    iterations: int
    converged: bool
    rayleigh_history: List[float] = field(default_factory=list)
    eval_set_id: str = ""
    seed: int = 0

    def to_json(self) -> dict:
        return {
            "lambda_max": self.lambda_max,
            "iterations": self.iterations,
            "converged": self.converged,
            "eval_set_id": self.eval_set_id,
            "seed": self.seed,
        }

    def dumps(self) -> str:
        return json.dumps(self.to_json(), indent=2)


def default_step(w: ParamSet) -> float:
    """HVP difference step ``1e-3 * (1 + ||w|| / sqrt(dim))``."""
    return 1e-3 * (1.0 + w.norm() / math.sqrt(max(w.size, 1)))


def lambda_max(loss_fn, w: ParamSet, eval_set, tol: float = 1e-3, max_iters: int = 100,
               seed: int = 0, h: Optional[float] = None, eval_set_id: str = "") -> SharpnessReport:
    """Power iteration for the dominant Hessian eigenvalue of ``loss_fn(w, eval_set)``.

    Converges to the eigenvalue of largest magnitude; its Rayleigh quotient is
    reported with its sign. Stops when the relative change of the Rayleigh
    quotient drops below ``tol``.
    """
    if tol <= 0:
        raise ValueError("tol must be positive")
    if max_iters < 1:
        raise ValueError("max_iters must be >= 1")
    h = default_step(w) if h is None else h
    rng = np.random.default_rng(seed)
    v = w.from_flat(rng.standard_normal(w.size))
    v = v.scale(1.0 / v.norm())

    def closure(p):
        return loss_fn(p, eval_set)

    history: List[float] = []
    converged = False
    for _ in range(max_iters):
        hv = hvp(closure, w, v, h)
        hv_norm = hv.norm()
        if hv_norm < 1e-12:
            history.append(0.0)
            converged = True
            break
        history.append(v.dot(hv))
        v = hv.scale(1.0 / hv_norm)
        if len(history) > 1:
            last, prev = history[-1], history[-2]
            if abs(last - prev) / max(abs(last), 1e-12) < tol:
                converged = True
                break
    return SharpnessReport(
        lambda_max=history[-1],
        iterations=len(history),
        converged=converged,
        rayleigh_history=history,
        eval_set_id=eval_set_id,
        seed=seed,
    )
