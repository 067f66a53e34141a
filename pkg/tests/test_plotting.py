from decimal import Decimal

import numpy as np

from flatcomp import plotting
from flatcomp.analysis import channel_stats, group_blocks
from flatcomp.models import ModelSpec, build
from flatcomp.suite import ResultRow

PNG = b"\x89PNG\r\n\x1a\n"


def _is_png(path):
    return path.exists() and path.read_bytes()[:8] == PNG


def test_rank_curves(tmp_path):
    g = {s: group_blocks(build(ModelSpec(kind="tiny_vit", dim=8, heads=2, depth=2, seed=s))) for s in (0, 1)}
    assert _is_png(plotting.rank_curves({"a": g[0], "b": g[1]}, tmp_path / "r.png"))


def test_activation_ranges(tmp_path):
    rng = np.random.default_rng(0)
    stats = {"adam": channel_stats(rng.standard_normal((20, 6))),
             "sam": channel_stats(rng.standard_normal((20, 6)))}
    assert _is_png(plotting.activation_ranges(stats, tmp_path / "a.png"))


def test_suite_drops(tmp_path):
    rows = [ResultRow("t", m, o, c, Decimal("90"), Decimal(d), 0)
            for m, c, d in (("FP32", "FP32", "0"), ("magnitude", "u", "-2.5"), ("BasePTQ", "W4A16", "0.1"))
            for o in ("adam", "sam-adam")]
    assert _is_png(plotting.suite_drops(rows, tmp_path / "s.png"))


def test_training_and_sharpness(tmp_path):
    hist = [{"epoch": 1, "train_loss": 1.0, "test_top1": 80.0}, {"epoch": 2, "train_loss": 0.5, "test_top1": 90.0}]
    assert _is_png(plotting.training_curves({"adam": hist}, tmp_path / "t.png"))
    assert _is_png(plotting.sharpness_bars({"adam": [100.0, 120.0], "sam": [9.0, 9.5]}, tmp_path / "l.png"))


def test_output_is_byte_stable(tmp_path):
    vals = {"x": [1.0, 2.0]}
    a = plotting.sharpness_bars(vals, tmp_path / "a.png").read_bytes()
    b = plotting.sharpness_bars(vals, tmp_path / "b.png").read_bytes()
    assert a == b
