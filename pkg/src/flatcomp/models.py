"""Toy-scale classifiers: an MLP, a two-layer CNN and a small ViT.

Parameters live in a :class:`~flatcomp.params.ParamSet`; the architecture is a
:class:`ModelSpec`. Forward passes accept an optional ``hook(site, array)``
called on the input of every linear/conv layer ("site" = the layer's weight
name). Returning an array replaces the input; this is how activation
collection and activation fake-quantization attach to the model.
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field, replace
from typing import Callable, Dict, Mapping, Optional, Sequence, Tuple

import numpy as np

from . import tensor as T
from .errors import CalibrationError, DimensionError, SpecError
from .params import ParamSet
from .tensor import Tensor

KINDS = ("mlp", "tiny_cnn", "tiny_vit")

Hook = Callable[[str, np.ndarray], Optional[np.ndarray]]


@dataclass(frozen=True)
class ModelSpec:
    kind: str = "mlp"
    num_classes: int = 10
    seed: int = 0
    input_shape: Tuple[int, int, int] = (1, 28, 28)
    # mlp
    widths: Tuple[int, ...] = (256, 128)
    # tiny_cnn
    channels: Tuple[int, ...] = (8, 16)
    kernel: int = 3
    stride: int = 2
    padding: str = "valid"
    # tiny_vit
    patch: int = 7
    dim: int = 48
    depth: int = 2
    heads: int = 3
    mlp_ratio: int = 4

    @classmethod
    def mlp(cls, sizes: Sequence[int], seed: int = 0, **kw) -> "ModelSpec":
        """MLP from full layer sizes ``[in, hidden..., classes]``; input is ``1 x 1 x in``."""
        sizes = list(sizes)
        kw.setdefault("input_shape", (1, 1, sizes[0]) if sizes[0] != 784 else (1, 28, 28))
        return cls(kind="mlp", widths=tuple(sizes[1:-1]), num_classes=sizes[-1], seed=seed, **kw)

    @classmethod
    def from_dict(cls, d: Mapping) -> "ModelSpec":
        d = dict(d)
        for key in ("input_shape", "widths", "channels"):
            if key in d:
                d[key] = tuple(d[key])
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise SpecError(f"unknown model spec keys: {sorted(unknown)}")
        return cls(**d)

    def to_dict(self) -> dict:
        d = asdict(self)
        for key in ("input_shape", "widths", "channels"):
            d[key] = list(d[key])
        return d

    def with_seed(self, seed: int) -> "ModelSpec":
        return replace(self, seed=seed)

    @property
    def input_dim(self) -> int:
        return int(np.prod(self.input_shape))

    @property
    def num_tokens(self) -> int:
        _, h, w = self.input_shape
        return (h // self.patch) * (w // self.patch)


def _validate(spec: ModelSpec) -> None:
    if spec.kind not in KINDS:
        raise SpecError(f"unknown model kind {spec.kind!r}; expected one of {KINDS}")
    if spec.num_classes < 1 or len(spec.input_shape) != 3 or min(spec.input_shape) < 1:
        raise SpecError("num_classes and input_shape must be positive")
    c, h, w = spec.input_shape
    if spec.kind == "mlp":
        if any(n < 1 for n in spec.widths):
            raise SpecError(f"mlp widths must be positive: {spec.widths}")
    elif spec.kind == "tiny_cnn":
        if not spec.channels or any(n < 1 for n in spec.channels) or spec.stride < 1:
            raise SpecError("tiny_cnn needs positive channels and stride")
        hw = (h, w)
        try:
            for _ in spec.channels:
                _, hw = T.conv_geometry(hw, (spec.kernel, spec.kernel), spec.stride, spec.padding)
        except DimensionError as exc:
            raise SpecError(f"tiny_cnn geometry: {exc}") from exc
    else:
        if spec.patch < 1 or h % spec.patch or w % spec.patch:
            raise SpecError(f"patch size {spec.patch} must divide the image sides {h}x{w}")
        if spec.heads < 1 or spec.dim % spec.heads:
            raise SpecError(f"dim {spec.dim} must be divisible by heads {spec.heads}")
        if spec.depth < 0 or spec.mlp_ratio < 1:
            raise SpecError("depth must be >= 0 and mlp_ratio >= 1")


def _cnn_out_hw(spec: ModelSpec) -> Tuple[int, int]:
    hw = spec.input_shape[1:]
    for _ in spec.channels:
        _, hw = T.conv_geometry(hw, (spec.kernel, spec.kernel), spec.stride, spec.padding)
    return hw


def param_layout(spec: ModelSpec) -> list:
    """``(name, shape, role)`` for every parameter, in canonical order."""
    _validate(spec)
    c, h, w = spec.input_shape
    out = []

    def linear(name, fan_in, fan_out):
        out.append((name, (fan_in, fan_out), "weight"))
        out.append((f"{name}.bias", (fan_out,), "bias"))

    if spec.kind == "mlp":
        sizes = [spec.input_dim, *spec.widths]
        for i, (a, b) in enumerate(zip(sizes[:-1], sizes[1:])):
            linear(f"fc{i}", a, b)
        linear("head", sizes[-1], spec.num_classes)
    elif spec.kind == "tiny_cnn":
        cin = c
        for i, f in enumerate(spec.channels):
            out.append((f"conv{i}", (f, cin, spec.kernel, spec.kernel), "weight"))
            out.append((f"conv{i}.bias", (f,), "bias"))
            cin = f
        ho, wo = _cnn_out_hw(spec)
        linear("head", cin * ho * wo, spec.num_classes)
    else:
        d, hidden = spec.dim, spec.dim * spec.mlp_ratio
        linear("embed", c * spec.patch ** 2, d)
        out.append(("pos", (spec.num_tokens, d), "bias"))
        for i in range(spec.depth):
            p = f"blk{i}"
            out += [(f"{p}.ln1.gamma", (d,), "norm"), (f"{p}.ln1.beta", (d,), "norm")]
            linear(f"{p}.qkv", d, 3 * d)
            linear(f"{p}.proj", d, d)
            out += [(f"{p}.ln2.gamma", (d,), "norm"), (f"{p}.ln2.beta", (d,), "norm")]
            linear(f"{p}.ffn1", d, hidden)
            linear(f"{p}.ffn2", hidden, d)
        linear("head", d, spec.num_classes)
    return out


def vit_param_count(spec: ModelSpec) -> int:
    """Closed-form parameter count of a tiny_vit spec."""
    c = spec.input_shape[0]
    d, r, k = spec.dim, spec.mlp_ratio, spec.num_classes
    embed = c * spec.patch ** 2 * d + d
    pos = spec.num_tokens * d
    block = 4 * d + (3 * d * d + 3 * d) + (d * d + d) + (r * d * d + r * d) + (r * d * d + d)
    return embed + pos + spec.depth * block + d * k + k


def build(spec: ModelSpec) -> ParamSet:
    """Initialise parameters: Glorot-uniform weights, zero biases, unit norm scales."""
    rng = np.random.default_rng(spec.seed)
    params = ParamSet()
    for name, shape, role in param_layout(spec):
        if role == "weight":
            if len(shape) == 4:
                rf = shape[2] * shape[3]
                fan_in, fan_out = shape[1] * rf, shape[0] * rf
            else:
                fan_in, fan_out = shape
            bound = math.sqrt(6.0 / (fan_in + fan_out))
            arr = rng.uniform(-bound, bound, size=shape)
        elif name.endswith(".gamma"):
            arr = np.ones(shape)
        else:
            arr = np.zeros(shape)
        params.add(name, arr, role)
    return params


# ---------------------------------------------------------------------------
# forward


def _site(name: str, x: Tensor, hook: Optional[Hook]) -> Tensor:
    if hook is None:
        return x
    replaced = hook(name, x.data)
    return x if replaced is None else Tensor(replaced)


def _linear(p, name: str, x: Tensor, hook) -> Tensor:
    x = _site(name, x, hook)
    return T.add_bias(T.matmul(x, p[name]), p[f"{name}.bias"])


def _as_tensors(params) -> Dict[str, Tensor]:
    if isinstance(params, ParamSet):
        return {n: Tensor(a) for n, a in params.items()}
    return {n: (a if isinstance(a, Tensor) else Tensor(a)) for n, a in params.items()}


def _check_input(spec: ModelSpec, x: np.ndarray) -> np.ndarray:
    if x.ndim == 2 and x.shape[1] == spec.input_dim:
        return x.reshape((x.shape[0],) + tuple(spec.input_shape))
    if x.ndim == 4 and x.shape[1:] == tuple(spec.input_shape):
        return x
    raise DimensionError(f"input {x.shape} does not match model input {tuple(spec.input_shape)}")


def forward_logits(spec: ModelSpec, params, x, hook: Optional[Hook] = None) -> Tensor:
    """Class logits ``B x num_classes``; traced when a tape is active and params are leaves."""
    p = _as_tensors(params)
    xt = x if isinstance(x, Tensor) else Tensor(x)
    shaped = _check_input(spec, xt.data)
    if shaped.shape != xt.shape:
        xt = T.reshape(xt, shaped.shape)
    b = xt.shape[0]

    if spec.kind == "mlp":
        h = T.reshape(xt, (b, spec.input_dim))
        for i in range(len(spec.widths)):
            h = T.relu(_linear(p, f"fc{i}", h, hook))
        return _linear(p, "head", h, hook)

    if spec.kind == "tiny_cnn":
        h = xt
        for i in range(len(spec.channels)):
            name = f"conv{i}"
            h = _site(name, h, hook)
            h = T.conv2d(h, p[name], spec.stride, spec.padding)
            h = T.relu(T.add_channel_bias(h, p[f"{name}.bias"]))
        h = T.reshape(h, (b, -1))
        return _linear(p, "head", h, hook)

    return _vit_forward(spec, p, xt, hook)


def patchify(x: Tensor, patch: int) -> Tensor:
    """``B x C x H x W`` -> ``B x tokens x (C*patch*patch)``, row-major over patches."""
    b, c, h, w = x.shape
    gh, gw = h // patch, w // patch
    x = T.reshape(x, (b, c, gh, patch, gw, patch))
    x = T.transpose(x, (0, 2, 4, 1, 3, 5))
    return T.reshape(x, (b, gh * gw, c * patch * patch))


def _vit_forward(spec: ModelSpec, p, x: Tensor, hook) -> Tensor:
    b = x.shape[0]
    d, nh = spec.dim, spec.heads
    dh = d // nh
    ntok = spec.num_tokens
    h = _linear(p, "embed", patchify(x, spec.patch), hook)
    h = T.add_bias(h, p["pos"])
    for i in range(spec.depth):
        pre = f"blk{i}"
        a = T.layernorm(h, p[f"{pre}.ln1.gamma"], p[f"{pre}.ln1.beta"])
        qkv = _linear(p, f"{pre}.qkv", a, hook)
        qkv = T.transpose(T.reshape(qkv, (b, ntok, 3, nh, dh)), (2, 0, 3, 1, 4))
        q, k, v = T.take(qkv, 0), T.take(qkv, 1), T.take(qkv, 2)
        scores = T.scale(T.matmul(q, T.transpose(k, (0, 1, 3, 2))), 1.0 / math.sqrt(dh))
        att = T.matmul(T.softmax(scores), v)
        att = T.reshape(T.transpose(att, (0, 2, 1, 3)), (b, ntok, d))
        h = T.add(h, _linear(p, f"{pre}.proj", att, hook))
        a = T.layernorm(h, p[f"{pre}.ln2.gamma"], p[f"{pre}.ln2.beta"])
        a = T.gelu(_linear(p, f"{pre}.ffn1", a, hook))
        h = T.add(h, _linear(p, f"{pre}.ffn2", a, hook))
    return _linear(p, "head", T.mean(h, axis=1), hook)


def loss_fn(spec: ModelSpec, hook: Optional[Hook] = None):
    """``fn(params, batch) -> scalar Tensor`` (mean cross-entropy) for ``batch = (x, y)``."""

    def fn(params, batch):
        x, y = batch
        return T.cross_entropy(forward_logits(spec, params, x, hook), y)

    return fn


def predict(spec: ModelSpec, params, x: np.ndarray, hook: Optional[Hook] = None,
            batch_size: int = 500) -> np.ndarray:
    """Argmax class per sample; evaluated in fixed-size chunks."""
    p = _as_tensors(params)
    preds = [
        forward_logits(spec, p, x[i:i + batch_size], hook).data.argmax(axis=1)
        for i in range(0, len(x), batch_size)
    ]
    return np.concatenate(preds) if preds else np.zeros(0, dtype=np.int64)


def accuracy(spec: ModelSpec, params, x: np.ndarray, y, hook: Optional[Hook] = None) -> Tuple[int, int]:
    """``(correct, total)`` on the given samples."""
    y = np.asarray(y)
    return int((predict(spec, params, x, hook) == y).sum()), int(len(y))


# ---------------------------------------------------------------------------
# activations


def site_names(spec: ModelSpec) -> list:
    """Weight names whose inputs are quantization / calibration sites, in forward order."""
    return [n for n, _, r in param_layout(spec) if r == "weight"]


def site_matrix(spec: ModelSpec, name: str, x: np.ndarray) -> np.ndarray:
    """Flatten a site's input to ``rows x in_features`` aligned with the weight's ``in`` axis."""
    if spec.kind == "tiny_cnn" and name.startswith("conv"):
        k = spec.kernel
        return T.im2col(x, (k, k), spec.stride, spec.padding)
    return x.reshape(-1, x.shape[-1])


def collect_activations(spec: ModelSpec, params, calib_x: np.ndarray,
                        batch_size: int = 256) -> Dict[str, np.ndarray]:
    """Input matrices of every linear/conv layer gathered over ``calib_x``."""
    if calib_x is None or len(calib_x) == 0:
        raise CalibrationError("calibration slice is empty")
    gathered: Dict[str, list] = {n: [] for n in site_names(spec)}

    def hook(name, arr):
        gathered[name].append(site_matrix(spec, name, arr))

    p = _as_tensors(params)
    for i in range(0, len(calib_x), batch_size):
        forward_logits(spec, p, calib_x[i:i + batch_size], hook)
    return {n: np.concatenate(rows, axis=0) for n, rows in gathered.items()}
