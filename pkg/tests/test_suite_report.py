from decimal import Decimal

import numpy as np
import pytest

from flatcomp.checkpoint import Checkpoint
from flatcomp.data import synth_dataset
from flatcomp.errors import ReportError
from flatcomp.models import ModelSpec, build
from flatcomp.report import (COLUMNS, emit_report, parse_csv, parse_json, parse_report, render,
                             to_csv, to_json, to_markdown)
from flatcomp.suite import (ResultRow, SuiteConfig, calibration_slice, default_exclude,
                            run_compression_suite, top1_percent)
from flatcomp.train import RunManifest, checkpoint_digest, finetune


@pytest.fixture(scope="module")
def trained():
    data = synth_dataset("blobs", 600, 4, 0.3, seed=2)
    spec = ModelSpec(kind="mlp", widths=(32, 32), num_classes=4, input_shape=(1, 1, 2), seed=2)
    m = RunManifest("t", spec.to_dict(), {"optimizer": "adam", "lr": 1e-2}, epochs=2, batch_size=16, seed=2)
    return finetune(m, data).checkpoint, data


def _suite(**kw):
    return SuiteConfig(task="blobs", seed=2, **kw)


def test_fp_only(trained):
    ck, data = trained
    rows = run_compression_suite(ck, _suite(), data, data)
    assert len(rows) == 1
    r = rows[0]
    assert r.method == "FP32" and r.drop_from_fp == 0 and r.finetune_opt == "adam"


def test_sparsity_zero_equals_fp(trained):
    ck, data = trained
    rows = run_compression_suite(ck, _suite(sparsities=(0.0,)), data, data)
    assert all(r.top1 == rows[0].top1 for r in rows)


def test_drop_identity_and_row_order(trained):
    ck, data = trained
    suite = _suite(sparsities=(0.3, 0.6), nm_patterns=("2:4",), quant_configs=("W8A8", "W3A16"))
    rows = run_compression_suite(ck, suite, data, calibration_slice(data, 64, 2))
    fp = rows[0].top1
    for r in rows:
        assert r.drop_from_fp == r.top1 - fp
        if r.top1 <= fp:
            assert r.top1 + abs(r.drop_from_fp) == fp
        assert r.top1 == r.top1.quantize(Decimal("0.01"))
    assert [(r.method, r.config) for r in rows] == [
        ("FP32", "FP32"),
        ("magnitude", "unstructured@0.30"), ("magnitude", "unstructured@0.60"), ("magnitude", "nm2:4"),
        ("wanda", "unstructured@0.30"), ("wanda", "unstructured@0.60"), ("wanda", "nm2:4"),
        ("BasePTQ", "W8A8"), ("BasePTQ", "W3A16")]


def test_table_shaped_grid(trained):
    """Two fine-tuning methods x five quantization configs -> ten data rows, stable order."""
    ck, data = trained
    m = RunManifest.from_dict({**ck.manifest, "optimizer": {"optimizer": "sam-adam", "lr": 1e-2, "rho": 0.05},
                               "history": [], "datasets": {}})
    ck_sam = finetune(m, data).checkpoint
    configs = ("W8A8", "W4A16", "W5A16", "W6A16", "W8A16")
    rows = []
    for c in (ck, ck_sam):
        rows += [r for r in run_compression_suite(c, _suite(quant_configs=configs), data, data) if r.method != "FP32"]
    assert len(rows) == 10
    assert [(r.finetune_opt, r.config) for r in rows] == [(o, c) for o in ("adam", "sam-adam") for c in configs]
    assert len(parse_csv(to_csv(rows))) == 10


def test_pruning_grid_size(trained):
    ck, data = trained
    suite = _suite(sparsities=(0.1, 0.2, 0.3, 0.4, 0.5))
    assert len(run_compression_suite(ck, suite, data, data)) == 1 + 2 * 5


def test_suite_is_pure(trained):
    ck, data = trained
    before = checkpoint_digest(ck)
    run_compression_suite(ck, _suite(sparsities=(0.5,), quant_configs=("W4A8",)), data, data)
    assert checkpoint_digest(ck) == before


def test_default_exclude():
    assert default_exclude(ModelSpec.mlp([4, 3, 3, 2])) == ["fc0", "head"]
    assert default_exclude(ModelSpec(kind="tiny_vit", dim=8, heads=2, depth=1))[0] == "embed"


def test_top1_rounding():
    assert top1_percent(1, 3) == Decimal("33.33")
    assert top1_percent(2, 3) == Decimal("66.67")
    assert top1_percent(0, 5) == Decimal("0.00")


def test_w8_loses_no_more_than_w4_per_channel(mnist_train, mnist_test):
    """Seed-averaged over five small MLPs."""
    test = mnist_test.head(500)
    drops = {"W8A16-pc": [], "W4A16-pc": []}
    for seed in range(5):
        spec = ModelSpec.mlp([784, 64, 10], seed=seed)
        m = RunManifest("t", spec.to_dict(), {"optimizer": "adam", "lr": 1e-3}, epochs=1, batch_size=32, seed=seed)
        ck = finetune(m, mnist_train).checkpoint
        rows = run_compression_suite(ck, SuiteConfig(quant_configs=("W8A16", "W4A16"), granularity="per_channel",
                                                     seed=seed), test, mnist_train)
        for r in rows[1:]:
            drops[r.config].append(float(r.drop_from_fp))
    assert np.mean(drops["W8A16-pc"]) >= np.mean(drops["W4A16-pc"])


# --- reports ---------------------------------------------------------------

def _rows():
    mk = lambda m, c, t, fp, opt, seed: ResultRow("mnist", m, opt, c, Decimal(t), Decimal(t) - Decimal(fp), seed)
    return [mk("FP32", "FP32", "92.10", "92.10", "adam", 0),
            mk("magnitude", "unstructured@0.50", "89.00", "92.10", "adam", 0),
            mk("BasePTQ", "W4A16", "92.30", "92.10", "adam", 0),
            mk("FP32", "FP32", "93.00", "93.00", "sam-adam", 0),
            mk("magnitude", "unstructured@0.50", "91.55", "93.00", "sam-adam", 0)]


def test_csv_header_and_roundtrip():
    text = to_csv(_rows())
    assert text.splitlines()[0] == ",".join(COLUMNS)
    assert parse_csv(text) == _rows()
    assert parse_json(to_json(_rows())) == _rows()


def test_signed_drop_in_markdown():
    md = to_markdown(_rows())
    assert "89.00 (-3.10)" in md and "92.30 (+0.20)" in md
    assert md.count("\n") == 2 + 3


def test_single_fp_row_csv():
    assert len(to_csv([_rows()[0]]).splitlines()) == 2


def test_fp_only_markdown():
    md = to_markdown([_rows()[0]])
    assert "| mnist | FP32 | adam | 0 | 92.10 |" in md


def test_empty_and_unknown_format():
    with pytest.raises(ReportError):
        render([], "csv")
    with pytest.raises(ReportError):
        render(_rows(), "xlsx")
    with pytest.raises(ReportError):
        parse_csv("a,b\n1,2\n")


@pytest.mark.parametrize("fmt,suffix", [("csv", ".csv"), ("json", ".json")])
def test_emit_and_parse_files(tmp_path, fmt, suffix):
    path = emit_report(_rows(), fmt, tmp_path / f"r{suffix}")
    assert parse_report(path) == _rows()
