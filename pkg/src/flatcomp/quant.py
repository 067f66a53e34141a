"""Post-training symmetric uniform quantization (simulated).

Weights are quantized once, statically; activations at every linear/conv input
are clipped to a calibrated range and fake-quantized during forward.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass
from typing import Dict, Optional, Union

import numpy as np

from .checkpoint import Checkpoint
from .errors import CalibrationError, ConfigurationError
from .models import ModelSpec, accuracy, collect_activations, forward_logits, site_names
from .params import ParamSet, from_weight_matrix, output_axis, weight_matrix

GRANULARITIES = ("per_tensor", "per_channel")


@dataclass(frozen=True)
class QuantConfig:
    w_bits: int = 8
    a_bits: int = 16  # 16 = activations left in full precision
    weight_granularity: str = "per_tensor"
    act_range_mode: str = "minmax"  # or "percentile"
    percentile: float = 99.99
    calib_size: int = 128

    def __post_init__(self):
        if not 2 <= self.w_bits <= 8:
            raise ConfigurationError(f"w_bits must be in [2, 8], got {self.w_bits}")
        if not 2 <= self.a_bits <= 16:
            raise ConfigurationError(f"a_bits must be in [2, 16], got {self.a_bits}")
        if self.weight_granularity not in GRANULARITIES:
            raise ConfigurationError(f"unknown granularity {self.weight_granularity!r}")
        if self.act_range_mode not in ("minmax", "percentile"):
            raise ConfigurationError(f"unknown activation range mode {self.act_range_mode!r}")
        if not 0 < self.percentile <= 100 or self.calib_size < 1:
            raise ConfigurationError("percentile must be in (0, 100] and calib_size positive")

    @property
    def label(self) -> str:
        return f"W{self.w_bits}A{self.a_bits}"

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class QuantizedTensor:
    q: np.ndarray  # integer levels
    scale: Union[float, np.ndarray]  # scalar, or one scale per output channel
    bits: int
    granularity: str = "per_tensor"
    axis: Optional[int] = None  # channel axis of ``q`` when per_channel


def qmax(bits: int) -> int:
    return 2 ** (bits - 1) - 1


def round_half_away(x: np.ndarray) -> np.ndarray:
    return np.sign(x) * np.floor(np.abs(x) + 0.5)


def _scale_for(max_abs, bits):
    return np.where(max_abs > 0, max_abs / qmax(bits), 1.0)


def quantize_symmetric(x: np.ndarray, bits: int, granularity: str = "per_tensor",
                       axis: int = 0) -> QuantizedTensor:
    """Symmetric uniform quantization with levels ``-(2^(b-1)-1) .. 2^(b-1)-1``.

    ``per_channel`` uses one scale per index of ``axis``.
    """
    if bits < 2:
        raise ConfigurationError(f"bits must be >= 2, got {bits}")
    x = np.asarray(x, dtype=np.float64)
    lim = qmax(bits)
    dtype = np.int8 if bits <= 8 else np.int32
    if granularity == "per_tensor":
        s = float(_scale_for(np.max(np.abs(x), initial=0.0), bits))
        q = np.clip(round_half_away(x / s), -lim, lim)
        return QuantizedTensor(q.astype(dtype), s, bits, "per_tensor")
    if granularity != "per_channel":
        raise ConfigurationError(f"unknown granularity {granularity!r}")
    axis = axis % x.ndim
    reduce_axes = tuple(i for i in range(x.ndim) if i != axis)
    max_abs = np.max(np.abs(x), axis=reduce_axes, initial=0.0)
    s = _scale_for(max_abs, bits)
    shape = [1] * x.ndim
    shape[axis] = -1
    q = np.clip(round_half_away(x / s.reshape(shape)), -lim, lim)
    return QuantizedTensor(q.astype(dtype), s, bits, "per_channel", axis)


def dequantize(qt: QuantizedTensor) -> np.ndarray:
    q = qt.q.astype(np.float64)
    if qt.granularity == "per_tensor":
        return q * float(qt.scale)
    shape = [1] * q.ndim
    shape[qt.axis] = -1
    return q * np.asarray(qt.scale).reshape(shape)


def fake_quant(x: np.ndarray, clip: float, bits: int) -> np.ndarray:
    """Clip to ``[-clip, clip]`` and round onto the ``bits`` grid of step ``clip / qmax``."""
    if clip <= 0:
        return np.zeros_like(x)
    s = clip / qmax(bits)
    return round_half_away(np.clip(x, -clip, clip) / s) * s


def quantize_weight(w: np.ndarray, bits: int, granularity: str) -> QuantizedTensor:
    """Quantize a stored weight with per-channel scales along its output axis."""
    mat = weight_matrix(w)
    qt = quantize_symmetric(mat, bits, granularity, axis=0)
    qt.q = from_weight_matrix(qt.q, w.shape)
    if granularity == "per_channel":
        qt.axis = 1 if w.ndim == 2 else 0
    return qt


# ---------------------------------------------------------------------------
# activation calibration


def act_clip(values: np.ndarray, mode: str = "minmax", percentile: float = 99.99) -> float:
    a = np.abs(np.asarray(values, dtype=np.float64)).ravel()
    if a.size == 0:
        raise CalibrationError("no activation values to calibrate")
    if mode == "minmax":
        return float(a.max())
    return float(np.percentile(a, percentile))


def calibrate_activations(spec: ModelSpec, params: ParamSet, calib_x: np.ndarray,
                          cfg: QuantConfig) -> Dict[str, float]:
    """Static clip value per activation site from the first ``calib_size`` samples."""
    if calib_x is None or len(calib_x) == 0:
        raise CalibrationError("calibration slice is empty")
    acts = collect_activations(spec, params, calib_x[:cfg.calib_size])
    return {name: act_clip(a, cfg.act_range_mode, cfg.percentile) for name, a in acts.items()}


# ---------------------------------------------------------------------------
# quantized model


class QuantizedModel:
    """Statically quantized model: dequantized weights plus fixed activation ranges."""

    def __init__(self, spec: ModelSpec, params: ParamSet, qweights: Dict[str, QuantizedTensor],
                 cfg: QuantConfig, ranges: Optional[Dict[str, float]]):
        self.spec = spec
        self.params = params
        self.qweights = qweights
        self.cfg = cfg
        self.ranges = dict(ranges) if ranges is not None else None

    def _hook(self):
        if self.cfg.a_bits >= 16:
            return None
        bits, ranges = self.cfg.a_bits, self.ranges

        def hook(name, x):
            return fake_quant(x, ranges[name], bits)

        return hook

    def logits(self, x) -> np.ndarray:
        return forward_logits(self.spec, self.params, x, self._hook()).data

    def accuracy(self, x, y):
        return accuracy(self.spec, self.params, x, y, self._hook())


def ptq_apply(spec: ModelSpec, params: ParamSet, cfg: QuantConfig,
              ranges: Optional[Dict[str, float]] = None) -> QuantizedModel:
    """Replace weights by their quantize-dequantize image; attach activation ranges."""
    if cfg.a_bits < 16:
        if ranges is None:
            raise ConfigurationError(f"{cfg.label} needs an activation range table")
        missing = [s for s in site_names(spec) if s not in ranges]
        if missing:
            raise ConfigurationError(f"no activation range for sites {missing}")
    qweights = {n: quantize_weight(params[n], cfg.w_bits, cfg.weight_granularity)
                for n in params.weight_names()}
    deq = params.with_arrays({n: dequantize(qweights[n]) if n in qweights else a
                              for n, a in params.items()})
    return QuantizedModel(spec, deq, qweights, cfg, ranges)


def parse_wa(label: str):
    """``"W8A8"`` -> ``(8, 8)``."""
    text = label.upper()
    if not text.startswith("W") or "A" not in text:
        raise ConfigurationError(f"cannot parse quantization config {label!r}")
    w, a = text[1:].split("A", 1)
    return int(w), int(a)


# ---------------------------------------------------------------------------
# persistence


def to_checkpoint(qm: QuantizedModel, manifest: dict) -> Checkpoint:
    """Integer levels (i8), scales (f64) and activation clip values as companion tensors."""
    extras = {}
    for name, qt in qm.qweights.items():
        if qt.bits > 8:
            raise ConfigurationError("only up to 8-bit weights fit the i8 checkpoint storage")
        extras[f"{name}.q"] = np.asarray(qt.q, dtype=np.int8)
        extras[f"{name}.scale"] = np.atleast_1d(np.asarray(qt.scale, dtype=np.float64))
    for site, c in (qm.ranges or {}).items():
        extras[f"act_range.{site}"] = np.array([c], dtype=np.float64)
    meta = dict(manifest, quantization=qm.cfg.to_dict())
    return Checkpoint(meta, qm.params, extras)


def from_checkpoint(ckpt: Checkpoint) -> QuantizedModel:
    """Rebuild the quantized simulation saved by :func:`to_checkpoint`."""
    if "quantization" not in ckpt.manifest:
        raise ConfigurationError("checkpoint carries no quantization metadata")
    cfg = QuantConfig(**ckpt.manifest["quantization"])
    spec = ModelSpec.from_dict(ckpt.manifest["model"])
    params = ckpt.params
    qweights = {}
    for name in params.weight_names():
        q = ckpt.extras.get(f"{name}.q")
        if q is None:
            raise ConfigurationError(f"missing quantized levels for {name!r}")
        scale = ckpt.extras[f"{name}.scale"]
        if cfg.weight_granularity == "per_tensor":
            qt = QuantizedTensor(q.copy(), float(scale[0]), cfg.w_bits, "per_tensor")
        else:
            qt = QuantizedTensor(q.copy(), scale.copy(), cfg.w_bits, "per_channel", output_axis(q.ndim))
        qweights[name] = qt
    deq = params.with_arrays({n: dequantize(qweights[n]) if n in qweights else a
                              for n, a in params.items()})
    ranges = {k[len("act_range."):]: float(v[0]) for k, v in ckpt.extras.items()
              if k.startswith("act_range.")} or None
    return QuantizedModel(spec, deq, qweights, cfg, ranges)
