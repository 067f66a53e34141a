"""Named, ordered parameter collections.

A :class:`ParamSet` is the flat optimisation state of a model. Gradients,
optimizer moments and SAM perturbations all share the same structure, so most
arithmetic here is "zip by name".
"""
from __future__ import annotations

from typing import Callable, Dict, Iterable, Iterator, Optional, Tuple

import numpy as np

from .errors import StructureError

ROLES = ("weight", "bias", "norm")


class ParamSet:
    """Ordered mapping ``name -> float64 array`` with a role tag per entry.

    Only ``role == "weight"`` entries are touched by pruning and quantization.
    """

    def __init__(self, entries: Iterable[Tuple[str, np.ndarray, str]] = ()):
        self._arrays: Dict[str, np.ndarray] = {}
        self._roles: Dict[str, str] = {}
        for name, arr, role in entries:
            self.add(name, arr, role)

    def add(self, name: str, arr, role: str = "weight") -> None:
        if name in self._arrays:
            raise StructureError(f"duplicate parameter name {name!r}")
        if role not in ROLES:
            raise StructureError(f"unknown role {role!r} for {name!r}")
        self._arrays[name] = np.asarray(arr, dtype=np.float64)
        self._roles[name] = role

    # mapping protocol
    def __getitem__(self, name: str) -> np.ndarray:
        return self._arrays[name]

    def __contains__(self, name: object) -> bool:
        return name in self._arrays

    def __iter__(self) -> Iterator[str]:
        return iter(self._arrays)

    def __len__(self) -> int:
        return len(self._arrays)

    def __repr__(self) -> str:
        body = ", ".join(f"{n}:{'x'.join(map(str, a.shape))}" for n, a in self._arrays.items())
        return f"ParamSet({body})"

    def names(self) -> list:
        return list(self._arrays)

    def items(self):
        return self._arrays.items()

    def role(self, name: str) -> str:
        return self._roles[name]

    def roles(self) -> Dict[str, str]:
        return dict(self._roles)

    def weight_names(self) -> list:
        return [n for n, r in self._roles.items() if r == "weight"]

    @property
    def size(self) -> int:
        """Total number of scalars (the optimisation dimension)."""
        return int(sum(a.size for a in self._arrays.values()))

    # structure-preserving constructors
    def with_arrays(self, arrays: Dict[str, np.ndarray]) -> "ParamSet":
        """A new set with the same names/roles and the given values."""
        out = ParamSet()
        for name in self._arrays:
            arr = np.asarray(arrays[name], dtype=np.float64)
            if arr.shape != self._arrays[name].shape:
                raise StructureError(
                    f"{name}: shape {arr.shape} does not match {self._arrays[name].shape}"
                )
            out._arrays[name] = arr
            out._roles[name] = self._roles[name]
        return out

    def map(self, fn: Callable[[np.ndarray], np.ndarray]) -> "ParamSet":
        return self.with_arrays({n: fn(a) for n, a in self._arrays.items()})

    def zip_map(self, other: "ParamSet", fn) -> "ParamSet":
        self.check_aligned(other)
        return self.with_arrays({n: fn(a, other[n]) for n, a in self._arrays.items()})

    def copy(self) -> "ParamSet":
        return self.map(np.array)

    def zeros_like(self) -> "ParamSet":
        return self.map(np.zeros_like)

    def axpy(self, alpha: float, other: "ParamSet") -> "ParamSet":
        """``self + alpha * other`` as a new set."""
        return self.zip_map(other, lambda a, b: a + alpha * b)

    def scale(self, alpha: float) -> "ParamSet":
        return self.map(lambda a: alpha * a)

    def dot(self, other: "ParamSet") -> float:
        self.check_aligned(other)
        return float(sum(np.vdot(a, other[n]) for n, a in self._arrays.items()))

    def norm(self) -> float:
        """Global l2 norm over all entries concatenated."""
        return float(np.sqrt(sum(np.vdot(a, a) for a in self._arrays.values())))

    def flat(self) -> np.ndarray:
        if not self._arrays:
            return np.zeros(0)
        return np.concatenate([a.ravel() for a in self._arrays.values()])

    def from_flat(self, vec: np.ndarray) -> "ParamSet":
        vec = np.asarray(vec, dtype=np.float64)
        if vec.size != self.size:
            raise StructureError(f"flat vector has {vec.size} entries, expected {self.size}")
        arrays, offset = {}, 0
        for name, a in self._arrays.items():
            arrays[name] = vec[offset:offset + a.size].reshape(a.shape).copy()
            offset += a.size
        return self.with_arrays(arrays)

    def check_aligned(self, other: "ParamSet") -> None:
        if list(self._arrays) != list(other):
            raise StructureError("parameter sets have different names or order")
        for name, a in self._arrays.items():
            if a.shape != other[name].shape:
                raise StructureError(f"{name}: shape {a.shape} vs {other[name].shape}")

    def bit_equal(self, other: "ParamSet") -> bool:
        if list(self._arrays) != list(other) or self._roles != other.roles():
            return False
        return all(
            a.shape == other[n].shape and a.tobytes() == other[n].tobytes()
            for n, a in self._arrays.items()
        )

    def max_abs_diff(self, other: "ParamSet") -> float:
        self.check_aligned(other)
        return max((float(np.max(np.abs(a - other[n]), initial=0.0)) for n, a in self._arrays.items()),
                   default=0.0)


def weight_matrix(w: np.ndarray) -> np.ndarray:
    """View a stored weight as an ``out x in`` matrix.

    Linear weights are stored ``in x out`` (so a layer is ``x @ W``); conv
    kernels are ``F x C x kh x kw`` and flatten to ``F x (C*kh*kw)``.
    """
    if w.ndim == 2:
        return w.T
    if w.ndim == 4:
        return w.reshape(w.shape[0], -1)
    raise StructureError(f"no out x in view for a {w.ndim}-d weight")


def from_weight_matrix(mat: np.ndarray, shape: Tuple[int, ...]) -> np.ndarray:
    """Inverse of :func:`weight_matrix` for a tensor of the given stored shape."""
    if len(shape) == 2:
        return np.ascontiguousarray(mat.T)
    if len(shape) == 4:
        return np.ascontiguousarray(mat).reshape(shape)
    raise StructureError(f"no out x in view for a {len(shape)}-d weight")


def output_axis(ndim: int) -> Optional[int]:
    """Axis of the stored weight that indexes output channels."""
    return {2: 1, 4: 0}.get(ndim)
