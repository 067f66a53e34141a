import json
import subprocess
import sys

import pytest

from flatcomp.checkpoint import load
from flatcomp.cli import main, parse_args
from flatcomp.report import parse_report

BLOBS = ["--dataset", "blobs", "--synth-n", "300", "--synth-noise", "0.2", "--seed", "1"]


@pytest.fixture(scope="module")
def trained(tmp_path_factory):
    out = tmp_path_factory.mktemp("train")
    rc = main(["train", *BLOBS, "--out", str(out), "--model-kind", "mlp", "--widths", "32",
               "--num-classes", "3", "--epochs", "2", "--lr", "0.01", "--optimizer", "sam-adam", "--rho", "0.05"])
    assert rc == 0
    return out


def test_train_outputs(trained):
    for name in ("model.crft", "manifest.json", "timing.json", "train.resolved.json", "figures/training.png"):
        assert (trained / name).exists(), name
    ck = load(trained / "model.crft")
    assert ck.manifest["optimizer"]["optimizer"] == "sam-adam"
    assert ck.manifest["optimizer"]["rho"] == 0.05


def test_eval(trained, tmp_path):
    assert main(["eval", *BLOBS, "--checkpoint", str(trained / "model.crft"), "--out", str(tmp_path)]) == 0
    res = json.loads((tmp_path / "eval.json").read_text())
    assert float(res["top1"]) >= 90.0


def test_prune_and_quantize(trained, tmp_path):
    ck = str(trained / "model.crft")
    assert main(["prune", *BLOBS, "--checkpoint", ck, "--sparsity", "0.5", "--exclude", "head",
                 "--out", str(tmp_path)]) == 0
    assert (tmp_path / "pruned.crft").exists() and (tmp_path / "prune.json").exists()
    assert main(["quantize", *BLOBS, "--checkpoint", ck, "--wa", "W4A8", "--out", str(tmp_path)]) == 0
    assert load(tmp_path / "quantized.crft").manifest["quantization"]["w_bits"] == 4


def test_sharpness(trained, tmp_path):
    assert main(["sharpness", *BLOBS, "--checkpoint", str(trained / "model.crft"), "--samples", "64",
                 "--out", str(tmp_path)]) == 0
    rep = json.loads((tmp_path / "sharpness.json").read_text())
    assert {"lambda_max", "iterations", "converged", "eval_set_id", "seed"} <= set(rep)


def test_suite_and_report(trained, tmp_path):
    ck = str(trained / "model.crft")
    assert main(["suite", *BLOBS, "--checkpoint", ck, "--sparsities", "0.5", "--nm-patterns", "1:2",
                 "--quant-configs", "W8A8", "W4A16", "--exclude", "--out", str(tmp_path / "s")]) == 0
    rows = parse_report(tmp_path / "s" / "results.csv")
    assert len(rows) == 1 + 2 * 2 + 2
    for name in ("results.md", "results.json", "figures/results.png"):
        assert (tmp_path / "s" / name).exists()
    assert main(["report", "--inputs", str(tmp_path / "s" / "results.csv"), str(tmp_path / "s" / "results.json"),
                 "--out", str(tmp_path / "r")]) == 0
    assert len(parse_report(tmp_path / "r" / "report.csv")) == 2 * len(rows)


def test_suite_csv_is_reproducible(trained, tmp_path):
    args = ["suite", *BLOBS, "--checkpoint", str(trained / "model.crft"), "--sparsities", "0.3",
            "--nm-patterns", "--quant-configs", "W6A8", "--no-figures"]
    main([*args, "--out", str(tmp_path / "a")])
    main([*args, "--out", str(tmp_path / "b")])
    assert (tmp_path / "a" / "results.csv").read_bytes() == (tmp_path / "b" / "results.csv").read_bytes()


def test_analyze_activations(trained, tmp_path):
    assert main(["analyze", "activations", *BLOBS, "--checkpoint", str(trained / "model.crft"),
                 "--out", str(tmp_path)]) == 0
    assert (tmp_path / "activations.json").exists() and (tmp_path / "figures" / "activations.png").exists()


def test_analyze_rank_vit(tmp_path):
    out = tmp_path / "vit"
    assert main(["train", "--test-limit", "10", "--out", str(out), "--model-kind", "tiny_vit",
                 "--dim", "8", "--heads", "2", "--depth", "1", "--epochs", "0", "--no-figures"]) == 0
    assert main(["analyze", "rank", "--checkpoint", str(out / "model.crft"), "--out", str(tmp_path)]) == 0
    rank = json.loads((tmp_path / "rank.json").read_text())
    assert rank
    header = (tmp_path / "rank.csv").read_text().splitlines()[0]
    assert header == "label,layer,k,cumulative_variance"


def test_config_file_overrides_defaults(tmp_path):
    cfg = tmp_path / "c.json"
    cfg.write_text(json.dumps({"lr": 0.3, "epochs": 7, "bogus": 1}))
    args = parse_args(["train", "--config", str(cfg), "--epochs", "2"])
    assert args.lr == 0.3 and args.epochs == 2
    assert args.ignored_config_keys == ["bogus"]


def test_resolved_manifest_written(tmp_path):
    main(["train", *BLOBS, "--model-kind", "mlp", "--widths", "8", "--num-classes", "3", "--epochs", "0",
          "--no-figures", "--out", str(tmp_path)])
    res = json.loads((tmp_path / "train.resolved.json").read_text())
    assert res["seed"] == 1 and res["command"] == "train" and "toolkit_version" in res


def test_errors_exit_nonzero(tmp_path, capsys):
    assert main(["eval", *BLOBS, "--checkpoint", str(tmp_path / "missing.crft"), "--out", str(tmp_path)]) != 0
    bad = tmp_path / "bad.json"
    bad.write_text("[1, 2]")
    assert main(["train", "--config", str(bad), "--out", str(tmp_path)]) == 2


def test_console_entry_help():
    out = subprocess.run([sys.executable, "-m", "flatcomp.cli", "--help"], capture_output=True, text=True)
    assert out.returncode == 0
    for cmd in ("train", "prune", "quantize", "sharpness", "analyze", "eval", "suite", "report"):
        assert cmd in out.stdout
