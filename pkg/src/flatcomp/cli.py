"""Command-line driver.

Every subcommand accepts ``--config`` (flat JSON; keys are the long option
names with dashes turned into underscores), ``--seed`` and ``--out``. Flags
given on the command line win over file keys. Each run writes its resolved
settings to ``<out>/<command>.resolved.json``.
"""
from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from pathlib import Path
from typing import Dict, List

import numpy as np

from . import __version__
from .analysis import activation_stats, group_blocks, mean_outlier_ratio
from .checkpoint import Checkpoint, load, masks_to_extras, save
from .data import load_mnist_dir, synth_dataset
from .errors import ConfigurationError, FlatcompError
from .models import ModelSpec, accuracy, collect_activations, loss_fn
from .prune import apply_mask, prune
from .quant import QuantConfig, calibrate_activations, parse_wa, ptq_apply, to_checkpoint
from .report import FORMATS, emit_report, parse_report
from .sharpness import lambda_max
from .suite import (SuiteConfig, calibration_slice, default_exclude, run_compression_suite,
                    top1_percent)
from .train import RunManifest, finetune

log = logging.getLogger("flatcomp")

EXT = {"csv": ".csv", "markdown": ".md", "json": ".json"}


# ---------------------------------------------------------------------------
# shared pieces


def _write_json(path: Path, obj) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return path


def _datasets(args):
    """(train, test) for the configured data source."""
    if args.dataset == "mnist":
        train = load_mnist_dir(args.data_dir, "train")
        test = load_mnist_dir(args.data_dir, "test")
    else:
        # one draw split in half so both halves share the same class centres
        n = args.synth_n
        full = synth_dataset(args.dataset, 2 * n, args.synth_classes, args.synth_noise, args.seed,
                             features=args.synth_features)
        train = full.subset(np.arange(n), f"{full.source}:train")
        test = full.subset(np.arange(n, 2 * n), f"{full.source}:test")
        test.split = "test"
    if args.test_limit:
        test = test.head(args.test_limit)
    return train, test


def _spec_from_args(args, input_shape) -> ModelSpec:
    d = {"kind": args.model_kind, "seed": args.seed, "input_shape": list(input_shape),
         "num_classes": args.num_classes}
    for key in ("widths", "channels", "kernel", "stride", "padding", "patch", "dim", "depth",
                "heads", "mlp_ratio"):
        value = getattr(args, key)
        if value is not None:
            d[key] = value
    return ModelSpec.from_dict(d)


def _ckpt_spec(ckpt: Checkpoint) -> ModelSpec:
    return ModelSpec.from_dict(ckpt.manifest["model"])


def _opt_label(ckpt: Checkpoint, fallback: str) -> str:
    return ckpt.manifest.get("optimizer", {}).get("optimizer", fallback)


def _calib(args, train):
    return calibration_slice(train, args.calib_size, args.seed)


# ---------------------------------------------------------------------------
# commands


def cmd_train(args) -> int:
    train, test = _datasets(args)
    if args.classes:
        train = train.with_classes(args.classes)
        test = test.with_classes(args.classes)
    init = None
    if args.init:
        base = load(args.init)
        spec = _ckpt_spec(base).with_seed(args.seed)
        init = base.params
    else:
        spec = _spec_from_args(args, train.images.shape[1:])
    opt = {"optimizer": args.optimizer}
    for key in ("lr", "rho", "momentum"):
        if getattr(args, key) is not None:
            opt[key] = getattr(args, key)
    manifest = RunManifest(args.experiment_id or f"{args.optimizer}-seed{args.seed}", spec.to_dict(), opt,
                           epochs=args.epochs, batch_size=args.batch_size, schedule=args.schedule,
                           seed=args.seed)
    res = finetune(manifest, train, test, init=init)
    out = Path(args.out)
    save(res.checkpoint, out / "model.crft")
    _write_json(out / "manifest.json", res.checkpoint.manifest)
    timing = {"steps": len(res.step_seconds),
              "step_seconds_mean": float(np.mean(res.step_seconds)) if res.step_seconds else 0.0}
    _write_json(out / "timing.json", timing)
    if not args.no_figures and manifest.history:
        from .plotting import training_curves
        training_curves({args.optimizer: manifest.history}, out / "figures" / "training.png")
    last = manifest.history[-1] if manifest.history else {}
    print(json.dumps({"checkpoint": str(out / "model.crft"), **last, **timing}))
    return 0


def cmd_eval(args) -> int:
    ckpt = load(args.checkpoint)
    _, test = _datasets(args)
    top1 = top1_percent(*accuracy(_ckpt_spec(ckpt), ckpt.params, test.images, test.labels))
    result = {"checkpoint": args.checkpoint, "top1": str(top1), "samples": len(test)}
    _write_json(Path(args.out) / "eval.json", result)
    print(json.dumps(result))
    return 0


def cmd_prune(args) -> int:
    ckpt = load(args.checkpoint)
    spec = _ckpt_spec(ckpt)
    train, test = _datasets(args)
    acts = None
    if args.scoring == "wanda":
        acts = collect_activations(spec, ckpt.params, _calib(args, train).images)
    exclude = default_exclude(spec) if args.exclude is None else args.exclude
    mask = prune(ckpt.params, scoring=args.scoring, sparsity=args.sparsity, nm=args.nm,
                 scope=args.scope, activations=acts, exclude=exclude)
    pruned = apply_mask(ckpt.params, mask)
    fp = top1_percent(*accuracy(spec, ckpt.params, test.images, test.labels))
    top1 = top1_percent(*accuracy(spec, pruned, test.images, test.labels))
    manifest = dict(ckpt.manifest, pruning={"scoring": mask.scoring, "structure": mask.structure,
                                            "target_sparsity": mask.target_sparsity})
    out = Path(args.out)
    save(Checkpoint(manifest, pruned, masks_to_extras(mask.masks)), out / "pruned.crft")
    result = {"structure": mask.structure, "scoring": mask.scoring, "sparsity": mask.sparsity(),
              "fp_top1": str(fp), "top1": str(top1), "drop_from_fp": str(top1 - fp)}
    _write_json(out / "prune.json", result)
    print(json.dumps(result))
    return 0


def cmd_quantize(args) -> int:
    ckpt = load(args.checkpoint)
    spec = _ckpt_spec(ckpt)
    train, test = _datasets(args)
    w_bits, a_bits = parse_wa(args.wa)
    cfg = QuantConfig(w_bits=w_bits, a_bits=a_bits, weight_granularity=args.granularity,
                      act_range_mode=args.act_range_mode, percentile=args.percentile,
                      calib_size=args.calib_size)
    ranges = None
    if a_bits < 16:
        ranges = calibrate_activations(spec, ckpt.params, _calib(args, train).images, cfg)
    qm = ptq_apply(spec, ckpt.params, cfg, ranges)
    fp = top1_percent(*accuracy(spec, ckpt.params, test.images, test.labels))
    top1 = top1_percent(*qm.accuracy(test.images, test.labels))
    out = Path(args.out)
    save(to_checkpoint(qm, ckpt.manifest), out / "quantized.crft")
    result = {"config": cfg.label, "granularity": cfg.weight_granularity, "fp_top1": str(fp),
              "top1": str(top1), "drop_from_fp": str(top1 - fp)}
    _write_json(out / "quantize.json", result)
    print(json.dumps(result))
    return 0


def cmd_sharpness(args) -> int:
    ckpt = load(args.checkpoint)
    spec = _ckpt_spec(ckpt)
    _, test = _datasets(args)
    ev = test.head(args.samples)
    rep = lambda_max(loss_fn(spec), ckpt.params, (ev.images, ev.labels), tol=args.tol,
                     max_iters=args.max_iters, seed=args.seed, eval_set_id=ev.source)
    _write_json(Path(args.out) / "sharpness.json", rep.to_json())
    print(rep.dumps())
    return 0


def _labelled(paths: List[str]) -> Dict[str, Checkpoint]:
    out = {}
    for p in paths:
        ckpt = load(p)
        label = _opt_label(ckpt, Path(p).stem)
        if label in out:
            label = f"{label}:{p}"
        out[label] = ckpt
    return out


def _write_rank_csv(path: Path, groups) -> Path:
    """Long-format curve table: label, layer, k, cumulative_variance."""
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["label", "layer", "k", "cumulative_variance"])
        for label, g in groups.items():
            for layer, rep in g.items():
                for k, cv in enumerate(rep.cumulative_variance, start=1):
                    w.writerow([label, layer, k, repr(float(cv))])
    return path


def cmd_analyze_rank(args) -> int:
    ckpts = _labelled(args.checkpoint)
    groups = {label: group_blocks(c.params, args.center) for label, c in ckpts.items()}
    result = {label: {k: {**r.to_json(), "members": r.members} for k, r in g.items()}
              for label, g in groups.items()}
    summary = {label: 0.5 * (g["qkv"].components_at(args.threshold) + g["ffn"].components_at(args.threshold))
               for label, g in groups.items()}
    out = Path(args.out)
    _write_rank_csv(out / "rank.csv", groups)
    _write_json(out / "rank.json", {"threshold": args.threshold, "mean_components_at": summary,
                                    "groups": result})
    if not args.no_figures:
        from .plotting import rank_curves
        rank_curves(groups, out / "figures" / "rank.png", args.threshold)
    print(json.dumps({"mean_components_at": summary}))
    return 0


def cmd_analyze_activations(args) -> int:
    ckpts = _labelled(args.checkpoint)
    train, _ = _datasets(args)
    calib = _calib(args, train)
    stats = {label: activation_stats(collect_activations(_ckpt_spec(c), c.params, calib.images))
             for label, c in ckpts.items()}
    summary = {label: mean_outlier_ratio(s) for label, s in stats.items()}
    out = Path(args.out)
    _write_json(out / "activations.json", {
        "mean_outlier_ratio": summary,
        "sites": {label: {k: r.to_json() for k, r in s.items()} for label, s in stats.items()},
    })
    if not args.no_figures:
        from .plotting import activation_ranges
        site = args.site or next(iter(next(iter(stats.values()))))
        activation_ranges({label: s[site] for label, s in stats.items()},
                          out / "figures" / "activations.png")
    print(json.dumps({"mean_outlier_ratio": summary}))
    return 0


def _emit_all(rows, out: Path, formats, stem="results", figures=True) -> None:
    for fmt in formats:
        emit_report(rows, fmt, out / f"{stem}{EXT[fmt]}")
    if figures:
        from .plotting import suite_drops
        suite_drops(rows, out / "figures" / f"{stem}.png")


def cmd_suite(args) -> int:
    train, test = _datasets(args)
    calib = _calib(args, train)
    rows = []
    for path in args.checkpoint:
        ckpt = load(path)
        suite = SuiteConfig(task=args.task, finetune_opt=_opt_label(ckpt, ""), seed=args.seed,
                            prune_scorings=args.scorings, sparsities=args.sparsities,
                            nm_patterns=args.nm_patterns, quant_configs=args.quant_configs,
                            granularity=args.granularity, act_range_mode=args.act_range_mode,
                            percentile=args.percentile, calib_size=args.calib_size,
                            prune_exclude=args.exclude)
        rows.extend(run_compression_suite(ckpt, suite, test, calib))
    _emit_all(rows, Path(args.out), args.formats, figures=not args.no_figures)
    print(Path(args.out, "results.csv").read_text() if "csv" in args.formats else f"{len(rows)} rows")
    return 0


def cmd_report(args) -> int:
    rows = []
    for path in args.inputs:
        rows.extend(parse_report(path))
    # deterministic assembly: group by task, seed, optimizer; keep cell order within a group
    rows.sort(key=lambda r: (r.task, r.seed, r.finetune_opt))
    _emit_all(rows, Path(args.out), args.formats, stem="report", figures=not args.no_figures)
    print(f"{len(rows)} rows -> {args.out}")
    return 0


def cmd_study(args) -> int:
    from .experiments import StudyConfig, run_study

    cfg = StudyConfig(data_dir=args.data_dir, epochs=args.epochs, batch_size=args.batch_size,
                      lr=args.lr if args.lr is not None else 1e-3,
                      rho=args.rho if args.rho is not None else 0.05,
                      sharpness_samples=args.samples, calib_size=args.calib_size,
                      sparsities=args.sparsities, nm_patterns=args.nm_patterns,
                      quant_configs=args.quant_configs, granularity=args.granularity)
    out = Path(args.out)
    seeds = args.seeds if args.seeds else [args.seed]
    outcomes = run_study(cfg, seeds, log=log.info)
    rows = []
    for o in outcomes:
        for opt, run in o.runs.items():
            rows.extend(run.rows)
            save(run.train.checkpoint, out / f"seed{o.seed}" / f"{opt}.crft")
    _write_json(out / "study.json", {"config": cfg.to_dict(), "seeds": [o.summary() for o in outcomes]})
    _emit_all(rows, out, args.formats, figures=not args.no_figures)
    if not args.no_figures:
        from .plotting import activation_ranges, rank_curves, sharpness_bars, training_curves
        first = outcomes[0]
        rank_curves({k: r.rank_groups for k, r in first.runs.items()}, out / "figures" / "rank.png")
        _write_rank_csv(out / "rank.csv", {k: r.rank_groups for k, r in first.runs.items()})
        site = next(iter(next(iter(first.runs.values())).act_stats))
        activation_ranges({k: r.act_stats[site] for k, r in first.runs.items()},
                          out / "figures" / "activations.png")
        training_curves({k: r.train.checkpoint.manifest["history"] for k, r in first.runs.items()},
                        out / "figures" / "training.png")
        lam = {"pre-FT": [o.pre_sharpness.lambda_max for o in outcomes]}
        for opt in cfg.optimizers:
            lam[opt] = [o.runs[opt].sharpness.lambda_max for o in outcomes]
        sharpness_bars(lam, out / "figures" / "sharpness.png")
    print(json.dumps([o.summary() for o in outcomes], default=str)[:2000])
    return 0


# ---------------------------------------------------------------------------
# parser


def _common(p, data=True):
    p.add_argument("--config", help="flat JSON file of option defaults")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", default="runs/out", help="output directory")
    p.add_argument("--no-figures", action="store_true", help="skip matplotlib output")
    if data:
        p.add_argument("--dataset", choices=["mnist", "blobs", "spiral"], default="mnist")
        p.add_argument("--data-dir", default="data/mnist5k", help="directory of IDX files")
        p.add_argument("--test-limit", type=int, default=0, help="evaluate on the first N test samples")
        p.add_argument("--synth-n", type=int, default=600)
        p.add_argument("--synth-classes", type=int, default=3)
        p.add_argument("--synth-noise", type=float, default=0.5)
        p.add_argument("--synth-features", type=int, default=2)


def _calib_args(p):
    p.add_argument("--calib-size", type=int, default=128)


def _quant_args(p):
    p.add_argument("--granularity", choices=["per_tensor", "per_channel"], default="per_tensor")
    p.add_argument("--act-range-mode", choices=["minmax", "percentile"], default="minmax")
    p.add_argument("--percentile", type=float, default=99.99)


def _sweep_args(p):
    p.add_argument("--sparsities", type=float, nargs="*", default=[0.5])
    p.add_argument("--nm-patterns", nargs="*", default=["16:32"])
    p.add_argument("--quant-configs", nargs="*", default=["W8A8", "W4A16", "W8A16"])
    p.add_argument("--formats", nargs="+", choices=FORMATS, default=list(FORMATS))


def build_parser():
    parser = argparse.ArgumentParser(prog="flatcomp", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=__version__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)
    leaves = {}

    p = sub.add_parser("train", help="train or fine-tune a model")
    _common(p)
    p.add_argument("--model-kind", choices=["mlp", "tiny_cnn", "tiny_vit"], default="tiny_vit")
    p.add_argument("--num-classes", type=int, default=10)
    p.add_argument("--widths", type=int, nargs="+")
    p.add_argument("--channels", type=int, nargs="+")
    p.add_argument("--kernel", type=int)
    p.add_argument("--stride", type=int)
    p.add_argument("--padding", choices=["valid", "same"])
    p.add_argument("--patch", type=int)
    p.add_argument("--dim", type=int)
    p.add_argument("--depth", type=int)
    p.add_argument("--heads", type=int)
    p.add_argument("--mlp-ratio", type=int)
    p.add_argument("--optimizer", choices=["sgd", "adam", "sam-sgd", "sam-adam"], default="adam")
    p.add_argument("--lr", type=float)
    p.add_argument("--rho", type=float)
    p.add_argument("--momentum", type=float)
    p.add_argument("--epochs", type=int, default=5)
    p.add_argument("--batch-size", type=int, default=8)
    p.add_argument("--schedule", choices=["cosine", "constant"], default="cosine")
    p.add_argument("--init", help="checkpoint to fine-tune from")
    p.add_argument("--classes", type=int, nargs="+", help="train on these labels only")
    p.add_argument("--experiment-id")
    p.set_defaults(func=cmd_train)
    leaves["train"] = p

    p = sub.add_parser("eval", help="top-1 accuracy of a checkpoint")
    _common(p)
    p.add_argument("--checkpoint", required=True)
    p.set_defaults(func=cmd_eval)
    leaves["eval"] = p

    p = sub.add_parser("prune", help="one-shot pruning")
    _common(p)
    _calib_args(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--scoring", choices=["magnitude", "wanda"], default="magnitude")
    p.add_argument("--sparsity", type=float, default=0.5)
    p.add_argument("--nm", help="N:M pattern, e.g. 16:32 (overrides --sparsity)")
    p.add_argument("--scope", choices=["per_layer", "per_output_row", "global"])
    p.add_argument("--exclude", nargs="*", help="weights left dense (default: first and last layer)")
    p.set_defaults(func=cmd_prune)
    leaves["prune"] = p

    p = sub.add_parser("quantize", help="post-training quantization")
    _common(p)
    _calib_args(p)
    _quant_args(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--wa", default="W8A8", help="e.g. W4A16, W8A8")
    p.set_defaults(func=cmd_quantize)
    leaves["quantize"] = p

    p = sub.add_parser("sharpness", help="top Hessian eigenvalue")
    _common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--samples", type=int, default=512, help="first N test samples form the eval set")
    p.add_argument("--tol", type=float, default=1e-3)
    p.add_argument("--max-iters", type=int, default=100)
    p.set_defaults(func=cmd_sharpness)
    leaves["sharpness"] = p

    p = sub.add_parser("analyze", help="weight-rank or activation analysis")
    asub = p.add_subparsers(dest="analysis", required=True)
    q = asub.add_parser("rank", help="explained-variance curves of block weights")
    _common(q, data=False)
    q.add_argument("--checkpoint", nargs="+", required=True)
    q.add_argument("--threshold", type=float, default=0.8)
    q.add_argument("--center", action="store_true")
    q.set_defaults(func=cmd_analyze_rank)
    leaves["analyze rank"] = q
    q = asub.add_parser("activations", help="per-channel activation ranges")
    _common(q)
    _calib_args(q)
    q.add_argument("--checkpoint", nargs="+", required=True)
    q.add_argument("--site", help="site to plot (default: first)")
    q.set_defaults(func=cmd_analyze_activations)
    leaves["analyze activations"] = q

    p = sub.add_parser("suite", help="compression sweep over checkpoints")
    _common(p)
    _calib_args(p)
    _quant_args(p)
    _sweep_args(p)
    p.add_argument("--checkpoint", nargs="+", required=True)
    p.add_argument("--task", default="mnist")
    p.add_argument("--scorings", nargs="+", default=["magnitude", "wanda"])
    p.add_argument("--exclude", nargs="*", help="weights left dense (default: first and last layer)")
    p.set_defaults(func=cmd_suite)
    leaves["suite"] = p

    p = sub.add_parser("report", help="merge result files into CSV/Markdown/JSON and a figure")
    _common(p, data=False)
    p.add_argument("--inputs", nargs="+", required=True)
    p.add_argument("--formats", nargs="+", choices=FORMATS, default=list(FORMATS))
    p.set_defaults(func=cmd_report)
    leaves["report"] = p

    p = sub.add_parser("study", help="pretrain, fine-tune with Adam and SAM, measure and compress")
    _common(p)
    _calib_args(p)
    _sweep_args(p)
    p.add_argument("--granularity", choices=["per_tensor", "per_channel"], default="per_tensor")
    p.add_argument("--seeds", type=int, nargs="*")
    p.add_argument("--epochs", type=int, default=5)
    p.add_argument("--batch-size", type=int, default=8)
    p.add_argument("--lr", type=float)
    p.add_argument("--rho", type=float)
    p.add_argument("--samples", type=int, default=512)
    p.set_defaults(func=cmd_study, quant_configs=["W8A8", "W4A16", "W5A16", "W6A16", "W8A16"])
    leaves["study"] = p
    return parser, leaves


def _leaf_key(args) -> str:
    return f"analyze {args.analysis}" if args.command == "analyze" else args.command


def parse_args(argv=None):
    """Parse twice: once to find ``--config``, then with file keys as defaults."""
    parser, leaves = build_parser()
    args = parser.parse_args(argv)
    leaf = leaves[_leaf_key(args)]
    ignored = []
    if args.config:
        try:
            cfg = json.loads(Path(args.config).read_text(encoding="utf-8"))
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigurationError(f"cannot read config {args.config}: {exc}") from exc
        if not isinstance(cfg, dict):
            raise ConfigurationError("config file must hold a flat JSON object")
        known = {a.dest for a in leaf._actions}
        ignored = sorted(k for k in cfg if k.replace("-", "_") not in known)
        leaf.set_defaults(**{k.replace("-", "_"): v for k, v in cfg.items()
                             if k.replace("-", "_") in known and k != "config"})
        args = parser.parse_args(argv)
    args.ignored_config_keys = ignored
    return args


def resolved(args) -> dict:
    d = {k: v for k, v in vars(args).items() if k != "func"}
    d["toolkit_version"] = __version__
    return d


def main(argv=None) -> int:
    try:
        args = parse_args(argv)
    except FlatcompError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s")
    out = Path(args.out)
    _write_json(out / f"{_leaf_key(args).replace(' ', '-')}.resolved.json", resolved(args))
    try:
        return args.func(args)
    except (FlatcompError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
