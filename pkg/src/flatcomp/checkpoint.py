"""CRFT checkpoint files.

Layout (all integers little-endian)::

    b"CRFT" | u32 version | u32 manifest_len | manifest (UTF-8 JSON)
    u32 tensor_count
    per tensor: u16 name_len | name (UTF-8) | u8 dtype (0=f64, 1=i8) | u8 ndim
                | u32 dims[ndim] | payload (row-major)

Parameter roles live in the manifest under ``"roles"``. Masks are companion
tensors ``<weight>.mask``; quantized weights are ``<weight>.q`` (i8) with
``<weight>.scale`` (f64) and activation clip values ``act_range.<site>``.
"""
from __future__ import annotations

import io
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, Optional

import numpy as np

from .errors import FormatError, VersionError
from .params import ParamSet

MAGIC = b"CRFT"
VERSION = 1
_DTYPES = {0: np.dtype("<f8"), 1: np.dtype("i1")}
_CODES = {np.dtype("float64"): 0, np.dtype("int8"): 1}


@dataclass
class Checkpoint:
    manifest: dict
    params: ParamSet
    extras: Dict[str, np.ndarray] = field(default_factory=dict)


def _manifest_bytes(manifest: dict) -> bytes:
    return json.dumps(manifest, sort_keys=True, separators=(",", ":")).encode("utf-8")


def _write_tensor(buf, name: str, arr: np.ndarray) -> None:
    arr = np.asarray(arr)
    code = _CODES.get(arr.dtype)
    if code is None:
        raise FormatError(f"{name}: unsupported dtype {arr.dtype}")
    raw_name = name.encode("utf-8")
    buf.write(struct.pack("<H", len(raw_name)))
    buf.write(raw_name)
    buf.write(struct.pack("<BB", code, arr.ndim))
    buf.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
    buf.write(np.ascontiguousarray(arr, dtype=_DTYPES[code]).tobytes())


def dumps(ckpt: Checkpoint) -> bytes:
    manifest = dict(ckpt.manifest)
    manifest["roles"] = ckpt.params.roles()
    body = _manifest_bytes(manifest)
    buf = io.BytesIO()
    buf.write(MAGIC)
    buf.write(struct.pack("<II", VERSION, len(body)))
    buf.write(body)
    tensors = list(ckpt.params.items()) + list(ckpt.extras.items())
    buf.write(struct.pack("<I", len(tensors)))
    for name, arr in tensors:
        _write_tensor(buf, name, arr)
    return buf.getvalue()


def save(ckpt: Checkpoint, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(dumps(ckpt))
    return path


class _Reader:
    def __init__(self, raw: bytes):
        self.raw, self.pos = raw, 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.raw):
            raise FormatError("checkpoint truncated")
        out = self.raw[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def loads(raw: bytes) -> Checkpoint:
    r = _Reader(raw)
    if r.take(4) != MAGIC:
        raise FormatError("not a CRFT checkpoint (bad magic)")
    (version,) = r.unpack("<I")
    if version != VERSION:
        raise VersionError(f"unsupported checkpoint version {version} (this build reads {VERSION})")
    (mlen,) = r.unpack("<I")
    try:
        manifest = json.loads(r.take(mlen).decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatError("checkpoint manifest is not valid UTF-8 JSON") from exc
    roles = manifest.pop("roles", {})
    (count,) = r.unpack("<I")
    params, extras = ParamSet(), {}
    for _ in range(count):
        (nlen,) = r.unpack("<H")
        name = r.take(nlen).decode("utf-8")
        code, ndim = r.unpack("<BB")
        if code not in _DTYPES:
            raise FormatError(f"{name}: unknown dtype code {code}")
        dims = r.unpack(f"<{ndim}I") if ndim else ()
        dt = _DTYPES[code]
        n = int(np.prod(dims)) if ndim else 1
        arr = np.frombuffer(r.take(n * dt.itemsize), dtype=dt).reshape(dims)
        arr = arr.astype(np.float64 if code == 0 else np.int8)
        if name in roles:
            params.add(name, arr, roles[name])
        else:
            extras[name] = arr
    if r.pos != len(raw):
        raise FormatError("trailing bytes after tensor table")
    return Checkpoint(manifest, params, extras)


def load(path) -> Checkpoint:
    return loads(Path(path).read_bytes())


def masks_to_extras(masks: Dict[str, np.ndarray]) -> Dict[str, np.ndarray]:
    return {f"{name}.mask": np.asarray(m).astype(np.int8) for name, m in masks.items()}


def masks_from_extras(extras: Dict[str, np.ndarray]) -> Dict[str, np.ndarray]:
    return {name[:-5]: arr.astype(np.float64) for name, arr in extras.items() if name.endswith(".mask")}
