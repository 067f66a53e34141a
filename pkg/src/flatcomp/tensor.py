"""Dense float64 tensors with tape-based reverse-mode differentiation.

Forward primitives run eagerly on numpy arrays. While a :class:`Tape` is
active (``with Tape() as tape:``) every primitive that touches a traced input
appends a record ``(output, inputs, vjp)``; :meth:`Tape.backward` replays the
records in reverse and is allowed exactly once.

Hessian-vector products are central differences of gradients, see :func:`hvp`.
"""
from __future__ import annotations

import threading
from dataclasses import dataclass
from typing import Callable, Dict, Mapping, Optional, Sequence, Tuple, Union

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import ConsumedTapeError, DimensionError
from .params import ParamSet

_local = threading.local()


@dataclass
class PassCounter:
    """Counts traced forward passes (tapes opened) and backward replays."""

    forward: int = 0
    backward: int = 0

    def reset(self) -> None:
        self.forward = 0
        self.backward = 0

    def snapshot(self) -> Tuple[int, int]:
        return self.forward, self.backward


pass_counter = PassCounter()


class Tensor:
    """An n-d float64 value, optionally traced for differentiation."""

    __slots__ = ("data", "traced")
    __array_priority__ = 100

    def __init__(self, data, traced: bool = False):
        self.data = np.asarray(data, dtype=np.float64)
        self.traced = traced

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def __repr__(self) -> str:
        tag = ", traced" if self.traced else ""
        return f"Tensor(shape={self.shape}{tag})"

    def __add__(self, other):
        return add(self, _as_tensor(other))

    def __sub__(self, other):
        return sub(self, _as_tensor(other))

    def __mul__(self, other):
        if np.isscalar(other):
            return scale(self, float(other))
        return mul(self, _as_tensor(other))

    __rmul__ = __mul__

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, _as_tensor(other))


ArrayLike = Union[Tensor, np.ndarray, float]


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def leaf(data) -> Tensor:
    """A traced input (parameter) tensor."""
    return Tensor(np.asarray(data, dtype=np.float64), traced=True)


class Tape:
    """Ordered record of primitive applications for one forward pass."""

    def __init__(self):
        self.records: list = []
        self.consumed = False
        self._prev: Optional[Tape] = None

    def __enter__(self) -> "Tape":
        self._prev = getattr(_local, "tape", None)
        _local.tape = self
        pass_counter.forward += 1
        return self

    def __exit__(self, *exc) -> None:
        _local.tape = self._prev
        self._prev = None

    def backward(self, loss: Tensor, wrt: Mapping[str, Tensor]) -> Dict[str, np.ndarray]:
        """Gradients of scalar ``loss`` w.r.t. each tensor in ``wrt``.

        Inputs that do not influence ``loss`` get zero gradients.
        """
        if self.consumed:
            raise ConsumedTapeError("tape already consumed by a previous backward pass")
        if loss.data.size != 1:
            raise DimensionError(f"backward needs a scalar loss, got shape {loss.shape}")
        self.consumed = True
        pass_counter.backward += 1
        grads: Dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
        for out, inputs, vjp in reversed(self.records):
            g = grads.pop(id(out), None)
            if g is None:
                continue
            for inp, gi in zip(inputs, vjp(g)):
                if gi is None or not inp.traced:
                    continue
                key = id(inp)
                if key in grads:
                    grads[key] = grads[key] + gi
                else:
                    grads[key] = gi
        self.records = []
        return {
            name: np.array(grads.get(id(t), np.zeros_like(t.data)), dtype=np.float64).reshape(t.shape)
            for name, t in wrt.items()
        }


def active_tape() -> Optional[Tape]:
    return getattr(_local, "tape", None)


def _emit(out_data: np.ndarray, inputs: Sequence[Tensor], vjp: Callable) -> Tensor:
    tape = active_tape()
    out = Tensor(out_data)
    if tape is not None and any(t.traced for t in inputs):
        out.traced = True
        tape.records.append((out, tuple(inputs), vjp))
    return out


# ---------------------------------------------------------------------------
# elementwise and structural primitives


def add(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise DimensionError(f"add: shapes {a.shape} and {b.shape} differ")
    return _emit(a.data + b.data, (a, b), lambda g: (g, g))


def sub(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise DimensionError(f"sub: shapes {a.shape} and {b.shape} differ")
    return _emit(a.data - b.data, (a, b), lambda g: (g, -g))


def mul(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise DimensionError(f"mul: shapes {a.shape} and {b.shape} differ")
    ad, bd = a.data, b.data
    return _emit(ad * bd, (a, b), lambda g: (g * bd, g * ad))


def scale(a: Tensor, c: float) -> Tensor:
    return _emit(a.data * c, (a,), lambda g: (g * c,))


def add_bias(x: Tensor, b: Tensor) -> Tensor:
    """``x + b`` where ``b`` matches the trailing dimensions of ``x``."""
    k = b.ndim
    if x.shape[x.ndim - k:] != b.shape:
        raise DimensionError(f"add_bias: bias {b.shape} does not match trailing dims of {x.shape}")
    lead = tuple(range(x.ndim - k))
    return _emit(x.data + b.data, (x, b), lambda g: (g, g.sum(axis=lead)))


def add_channel_bias(x: Tensor, b: Tensor) -> Tensor:
    """Per-channel bias for ``x[N, F, H, W]`` and ``b[F]``."""
    if x.ndim != 4 or b.shape != (x.shape[1],):
        raise DimensionError(f"add_channel_bias: bias {b.shape} vs input {x.shape}")
    return _emit(x.data + b.data[:, None, None], (x, b), lambda g: (g, g.sum(axis=(0, 2, 3))))


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    old = x.shape
    return _emit(x.data.reshape(shape), (x,), lambda g: (g.reshape(old),))


def transpose(x: Tensor, axes: Sequence[int]) -> Tensor:
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    return _emit(x.data.transpose(axes), (x,), lambda g: (g.transpose(inv),))


def take(x: Tensor, index: int) -> Tensor:
    """``x[index]`` along the leading axis."""
    shape = x.shape

    def vjp(g):
        full = np.zeros(shape)
        full[index] = g
        return (full,)

    return _emit(x.data[index], (x,), vjp)


def total(x: Tensor) -> Tensor:
    """Sum of all entries, as a scalar tensor."""
    shape = x.shape
    return _emit(np.asarray(x.data.sum()), (x,), lambda g: (np.broadcast_to(g, shape).copy(),))


def mean(x: Tensor, axis: int) -> Tensor:
    axis = axis % x.ndim
    n = x.shape[axis]
    shape = x.shape

    def vjp(g):
        return (np.broadcast_to(np.expand_dims(g, axis) / n, shape).copy(),)

    return _emit(x.data.mean(axis=axis), (x,), vjp)


def relu(x: Tensor) -> Tensor:
    pos = x.data > 0
    return _emit(np.where(pos, x.data, 0.0), (x,), lambda g: (g * pos,))


_GELU_C = np.sqrt(2.0 / np.pi)


def gelu(x: Tensor) -> Tensor:
    """tanh-approximated GELU (smooth everywhere)."""
    xd = x.data
    inner = _GELU_C * (xd + 0.044715 * xd ** 3)
    t = np.tanh(inner)
    out = 0.5 * xd * (1.0 + t)

    def vjp(g):
        d_inner = _GELU_C * (1.0 + 3 * 0.044715 * xd ** 2)
        return (g * (0.5 * (1.0 + t) + 0.5 * xd * (1.0 - t * t) * d_inner),)

    return _emit(out, (x,), vjp)


# ---------------------------------------------------------------------------
# linear algebra


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """``a @ b`` for ``a[..., m, k]`` and ``b[k, n]`` or ``b[..., k, n]`` (same batch)."""
    ad, bd = a.data, b.data
    if ad.ndim < 2 or bd.ndim < 2 or ad.shape[-1] != bd.shape[-2] or (
        bd.ndim > 2 and ad.shape[:-2] != bd.shape[:-2]
    ):
        raise DimensionError(f"matmul: cannot multiply shapes {ad.shape} and {bd.shape}")
    out = ad @ bd

    def vjp(g):
        ga = g @ np.swapaxes(bd, -1, -2)
        if bd.ndim == 2:
            gb = ad.reshape(-1, ad.shape[-1]).T @ g.reshape(-1, g.shape[-1])
        else:
            gb = np.swapaxes(ad, -1, -2) @ g
        return ga, gb

    return _emit(out, (a, b), vjp)


def _same_pads(size: int, k: int, stride: int) -> Tuple[int, int]:
    out = -(-size // stride)
    total_pad = max((out - 1) * stride + k - size, 0)
    return total_pad // 2, total_pad - total_pad // 2


def conv_geometry(hw: Tuple[int, int], kernel: Tuple[int, int], stride: int, padding: str):
    """Padding amounts and output spatial size for a conv layer."""
    (h, w), (kh, kw) = hw, kernel
    if stride < 1:
        raise DimensionError(f"conv2d: stride must be positive, got {stride}")
    if padding == "valid":
        if kh > h or kw > w:
            raise DimensionError(f"conv2d: kernel {kh}x{kw} larger than input {h}x{w}")
        pads = ((0, 0), (0, 0))
    elif padding == "same":
        pads = (_same_pads(h, kh, stride), _same_pads(w, kw, stride))
    else:
        raise DimensionError(f"conv2d: unknown padding {padding!r}")
    ho = (h + sum(pads[0]) - kh) // stride + 1
    wo = (w + sum(pads[1]) - kw) // stride + 1
    return pads, (ho, wo)


def im2col(x: np.ndarray, kernel: Tuple[int, int], stride: int = 1, padding: str = "valid") -> np.ndarray:
    """Rows are receptive fields: ``(N*H'*W') x (C*kh*kw)``."""
    n, c = x.shape[:2]
    pads, (ho, wo) = conv_geometry(x.shape[2:], kernel, stride, padding)
    if any(p for pair in pads for p in pair):
        x = np.pad(x, ((0, 0), (0, 0)) + pads)
    win = sliding_window_view(x, kernel, axis=(2, 3))[:, :, ::stride, ::stride][:, :, :ho, :wo]
    return win.transpose(0, 2, 3, 1, 4, 5).reshape(n * ho * wo, c * kernel[0] * kernel[1])


def conv2d(x: Tensor, w: Tensor, stride: int = 1, padding: str = "valid") -> Tensor:
    """Cross-correlation of ``x[N,C,H,W]`` with ``w[F,C,kh,kw]``."""
    if x.ndim != 4 or w.ndim != 4 or x.shape[1] != w.shape[1]:
        raise DimensionError(f"conv2d: incompatible input {x.shape} and kernel {w.shape}")
    n, c, h, wd = x.shape
    f, _, kh, kw = w.shape
    pads, (ho, wo) = conv_geometry((h, wd), (kh, kw), stride, padding)
    cols = im2col(x.data, (kh, kw), stride, padding)
    wmat = w.data.reshape(f, -1)
    out = (cols @ wmat.T).reshape(n, ho, wo, f).transpose(0, 3, 1, 2)

    def vjp(g):
        gt = g.transpose(0, 2, 3, 1).reshape(-1, f)
        gw = (gt.T @ cols).reshape(w.shape)
        gcols = (gt @ wmat).reshape(n, ho, wo, c, kh, kw)
        hp, wp = h + sum(pads[0]), wd + sum(pads[1])
        gxp = np.zeros((n, c, hp, wp))
        for i in range(kh):
            for j in range(kw):
                gxp[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride] += (
                    gcols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
                )
        gx = gxp[:, :, pads[0][0]:pads[0][0] + h, pads[1][0]:pads[1][0] + wd]
        return gx, gw

    return _emit(out, (x, w), vjp)


# ---------------------------------------------------------------------------
# normalisation, softmax, loss


def layernorm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    d = x.shape[-1]
    if gamma.shape != (d,) or beta.shape != (d,):
        raise DimensionError(f"layernorm: gamma {gamma.shape} / beta {beta.shape} vs last dim {d}")
    xd = x.data
    xc = xd - xd.mean(axis=-1, keepdims=True)
    rstd = 1.0 / np.sqrt((xc * xc).mean(axis=-1, keepdims=True) + eps)
    xhat = xc * rstd
    gd = gamma.data
    lead = tuple(range(x.ndim - 1))

    def vjp(g):
        gx_hat = g * gd
        gx = rstd * (
            gx_hat
            - gx_hat.mean(axis=-1, keepdims=True)
            - xhat * (gx_hat * xhat).mean(axis=-1, keepdims=True)
        )
        return gx, (g * xhat).sum(axis=lead), g.sum(axis=lead)

    return _emit(xhat * gd + beta.data, (x, gamma, beta), vjp)


def _softmax(z: np.ndarray) -> np.ndarray:
    e = np.exp(z - z.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


def softmax(x: Tensor) -> Tensor:
    y = _softmax(x.data)

    def vjp(g):
        return (y * (g - (g * y).sum(axis=-1, keepdims=True)),)

    return _emit(y, (x,), vjp)


def cross_entropy(logits: Tensor, labels) -> Tensor:
    """Mean negative log-likelihood of integer ``labels`` under ``softmax(logits)``."""
    z = logits.data
    if z.ndim != 2:
        raise DimensionError(f"cross_entropy: logits must be B x C, got {z.shape}")
    labels = np.asarray(labels, dtype=np.int64)
    b, c = z.shape
    if labels.shape != (b,):
        raise DimensionError(f"cross_entropy: {labels.shape[0] if labels.ndim else 0} labels for {b} rows")
    if b and (labels.min() < 0 or labels.max() >= c):
        raise IndexError(f"label out of range [0, {c})")
    zmax = z.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(z - zmax).sum(axis=-1)) + zmax[:, 0]
    rows = np.arange(b)
    loss = np.mean(lse - z[rows, labels])

    def vjp(g):
        p = _softmax(z)
        p[rows, labels] -= 1.0
        return (p * (g / b),)

    return _emit(np.asarray(loss), (logits,), vjp)


# ---------------------------------------------------------------------------
# gradients over ParamSets


LossFn = Callable[[Mapping[str, Tensor]], Tensor]


def value_and_grad(loss_fn: LossFn, params: ParamSet) -> Tuple[float, ParamSet]:
    """One traced forward pass of ``loss_fn`` and one backward pass."""
    leaves = {name: leaf(arr) for name, arr in params.items()}
    with Tape() as tape:
        loss = loss_fn(leaves)
    grads = tape.backward(loss, leaves)
    return loss.item(), params.with_arrays(grads)


def backward(loss: Tensor, tape: Tape, params: Mapping[str, Tensor]) -> Dict[str, np.ndarray]:
    return tape.backward(loss, params)


def hvp(loss_fn: LossFn, w: ParamSet, v: ParamSet, h: float = 1e-3) -> ParamSet:
    """Central-difference Hessian-vector product ``H(w) v``.

    The probe direction is ``v / ||v||`` so ``h`` is a step length in weight
    space; the result is rescaled by ``||v||``. ``w`` is never mutated.
    """
    if h <= 0:
        raise ValueError("hvp step h must be positive")
    vnorm = v.norm()
    if vnorm == 0.0:
        return w.zeros_like()
    unit = v.scale(1.0 / vnorm)
    _, g_plus = value_and_grad(loss_fn, w.axpy(h, unit))
    _, g_minus = value_and_grad(loss_fn, w.axpy(-h, unit))
    return g_plus.zip_map(g_minus, lambda a, b: (a - b) * (vnorm / (2.0 * h)))
