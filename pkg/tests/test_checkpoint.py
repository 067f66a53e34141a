import struct

import numpy as np
import pytest

from flatcomp.checkpoint import (Checkpoint, dumps, load, loads, masks_from_extras, masks_to_extras,
                                 save)
from flatcomp.errors import FormatError, VersionError
from flatcomp.models import ModelSpec, build
from flatcomp.prune import prune


def _ckpt():
    spec = ModelSpec(kind="tiny_vit", dim=16, heads=2, depth=1, seed=3)
    return Checkpoint({"model": spec.to_dict(), "seed": 3}, build(spec))


def test_bit_exact_roundtrip(tmp_path):
    ck = _ckpt()
    back = load(save(ck, tmp_path / "m.crft"))
    assert back.params.bit_equal(ck.params)
    assert back.params.roles() == ck.params.roles()
    assert back.manifest == ck.manifest
    assert dumps(back) == dumps(ck)


def test_special_values_survive():
    ck = _ckpt()
    name = ck.params.weight_names()[0]
    arr = ck.params[name].copy()
    arr.flat[:4] = [np.inf, -0.0, 5e-324, np.nan]
    ck = Checkpoint(ck.manifest, ck.params.with_arrays({**dict(ck.params.items()), name: arr}))
    got = loads(dumps(ck)).params[name]
    assert got.tobytes() == arr.tobytes()


def test_masks_roundtrip():
    ck = _ckpt()
    mask = prune(ck.params, sparsity=0.5, exclude=[])
    ck2 = Checkpoint(ck.manifest, ck.params, masks_to_extras(mask.masks))
    back = masks_from_extras(loads(dumps(ck2)).extras)
    assert set(back) == set(mask.masks)
    for n, m in mask.masks.items():
        np.testing.assert_array_equal(back[n], m)


def test_wrong_version():
    raw = bytearray(dumps(_ckpt()))
    raw[4:8] = struct.pack("<I", 99)
    with pytest.raises(VersionError):
        loads(bytes(raw))


def test_bad_magic():
    with pytest.raises(FormatError):
        loads(b"XXXX" + dumps(_ckpt())[4:])


@pytest.mark.parametrize("cut", [3, 10, 40, -1])
def test_truncation(cut):
    raw = dumps(_ckpt())
    with pytest.raises(FormatError):
        loads(raw[:cut])


def test_trailing_bytes():
    with pytest.raises(FormatError):
        loads(dumps(_ckpt()) + b"\0")


def test_unsupported_dtype():
    ck = _ckpt()
    with pytest.raises(FormatError):
        dumps(Checkpoint(ck.manifest, ck.params, {"x": np.zeros(2, dtype=np.float32)}))
