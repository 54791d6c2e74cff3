"""``dethub`` command line: synth-data, train, eval, ablate, plot.

Relative output paths are resolved under ``$DETHUB_OUTPUT_ROOT`` when set.
Failures print one JSON object on stderr and exit with 2 (config), 3 (data)
or 4 (numeric).
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

import yaml

from . import __version__
from .config import apply_overrides, describe_keys, dump_config, flatten, from_dict, load_config
from .data import SynthSpec, synth_conflict_datasets, write_synth_dataset
from .errors import ConfigError, DataError, DethubError

OUTPUT_ROOT_ENV = "DETHUB_OUTPUT_ROOT"


def resolve_out(path: str | None, default: str) -> Path:
    p = Path(path or default)
    root = os.environ.get(OUTPUT_ROOT_ENV)
    if root and not p.is_absolute():
        p = Path(root) / p
    return p


def write_manifest(out: Path, command: str, args: argparse.Namespace, **extra) -> None:
    """Record what is needed to reproduce the invocation."""
    out.mkdir(parents=True, exist_ok=True)
    options = {k: v for k, v in vars(args).items() if k != "func"}
    manifest = {"command": command, "version": __version__, "options": options, **extra}
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2, default=str), encoding="utf-8")


def cmd_synth_data(args) -> int:
    out = resolve_out(args.out, "data")
    try:
        spec = SynthSpec.with_datasets(args.datasets, num_images=args.num_images)
        val_spec = SynthSpec.with_datasets(args.datasets, num_images=args.val_images)
        train_sets = synth_conflict_datasets(spec, args.seed)
        val_sets = synth_conflict_datasets(val_spec, args.seed + 1000, image_offset=1_000_000)
        for tr, va in zip(train_sets, val_sets):
            write_synth_dataset(out / tr.descriptor.name, tr, "train")
            write_synth_dataset(out / va.descriptor.name, va, "val")
    except OSError as exc:
        raise DataError(f"cannot write datasets under {out}: {exc}") from exc
    datasets = {d.descriptor.name: list(d.descriptor.categories) for d in train_sets}
    write_manifest(out, "synth-data", args, datasets=datasets)
    print(json.dumps({"out": str(out), "datasets": datasets}))
    return 0


def _config(args):
    cfg = load_config(args.config, args.set or [])
    if getattr(args, "dataset", None):
        cfg = from_dict(apply_overrides(cfg.to_dict(), {"datasets": [str(p) for p in args.dataset]}))
    return cfg.validate()


def cmd_train(args) -> int:
    from .engine.train import train

    cfg = _config(args)
    out = resolve_out(args.out, "runs/train")
    out.mkdir(parents=True, exist_ok=True)
    dump_config(cfg, out / "config.yaml")
    write_manifest(out, "train", args, config_hash=cfg.config_hash(), seed=cfg.train.seed)
    result = train(cfg, out, resume=args.resume)
    print(json.dumps({"checkpoint": str(result.checkpoint), "metrics": str(result.metrics_path),
                      "final_loss": result.final_loss}))
    return 0


def cmd_eval(args) -> int:
    from .engine.checkpoint import read_manifest
    from .engine.evaluate import evaluate
    from .engine.runtime import load_dataset_dir

    manifest = read_manifest(args.checkpoint)
    data = apply_overrides(manifest["config"], args.set or [])
    cfg = from_dict(data).validate()
    bundle = load_dataset_dir(args.dataset, args.split or cfg.eval.split, cfg)
    out = resolve_out(args.out, "runs/eval")
    out.mkdir(parents=True, exist_ok=True)
    report = evaluate(args.checkpoint, bundle, top_k=args.top_k,
                      predictions_path=out / f"predictions-{bundle.name}.jsonl")
    path = out / f"report-{bundle.name}.json"
    report.write(path)
    write_manifest(out, "eval", args, config_hash=manifest["config_hash"])
    print(json.dumps({"report": str(path), "AP": report.AP, "AP50": report.AP50, "AP75": report.AP75}))
    return 0


def cmd_ablate(args) -> int:
    from .engine.ablation import PRESETS, ToyScale, preset, run_ablation

    names = sorted(PRESETS) if "all" in args.grid else args.grid
    scale = ToyScale(args.train_images, args.val_images, args.steps_per_dataset, args.data_seed)
    extra = flatten(apply_overrides({}, args.set or []))
    out = resolve_out(args.out, "runs/ablate")
    write_manifest(out, "ablate", args)
    summary = {}
    for name in names:
        spec = preset(name, scale=scale, seeds=tuple(args.seeds))
        if extra:
            spec = preset(name, scale=scale, seeds=tuple(args.seeds), base={**spec.base, **extra})
        table = run_ablation(spec, out, workers=args.workers)
        failed = sum(r["status"] != "ok" for r in table.rows)
        summary[name] = {"csv": str(out / f"{name}.csv"), "rows": len(table.rows), "failed": failed}
    print(json.dumps(summary))
    return 0


def cmd_plot(args) -> int:
    from .plotting import plot

    out = resolve_out(args.out, f"plots/{args.kind}.png")
    path = plot(args.kind, args.inputs, out, args.labels)
    print(json.dumps({"figure": str(path)}))
    return 0


def build_parser() -> argparse.ArgumentParser:
    epilog = "config keys (override with --set key=value):\n" + describe_keys()
    fmt = argparse.RawDescriptionHelpFormatter
    parser = argparse.ArgumentParser(prog="dethub", description=__doc__, epilog=epilog,
                                     formatter_class=fmt)
    parser.add_argument("--version", action="version", version=__version__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth-data", help="write synthetic conflicting-taxonomy datasets")
    p.add_argument("--out")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--datasets", type=int, default=2, help="2 gives A, B; 3 adds C")
    p.add_argument("--num-images", type=int, default=200)
    p.add_argument("--val-images", type=int, default=50)
    p.set_defaults(func=cmd_synth_data)

    def add_config(p):
        p.add_argument("--config", help="YAML config file")
        p.add_argument("--set", action="append", metavar="KEY=VALUE", help="dotted-key override")

    p = sub.add_parser("train", help="train one model on every configured dataset",
                       epilog=epilog, formatter_class=fmt)
    add_config(p)
    p.add_argument("--dataset", action="append", type=Path, help="dataset directory (repeatable)")
    p.add_argument("--out")
    p.add_argument("--resume", help="checkpoint or run directory to continue from")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint on one dataset")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--dataset", required=True, type=Path)
    p.add_argument("--split")
    p.add_argument("--top-k", type=int)
    p.add_argument("--set", action="append", metavar="KEY=VALUE")
    p.add_argument("--out")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("ablate", help="run toy-scale ablation grids")
    p.add_argument("--grid", action="append", default=None,
                   help="modes, queries, components, layers, kernels, lengths, combinations or all")
    p.add_argument("--set", action="append", metavar="KEY=VALUE", help="override on every cell")
    p.add_argument("--seeds", type=int, nargs="+", default=[0])
    p.add_argument("--steps-per-dataset", type=int, default=30)
    p.add_argument("--train-images", type=int, default=16)
    p.add_argument("--val-images", type=int, default=4)
    p.add_argument("--data-seed", type=int, default=0)
    p.add_argument("--workers", type=int, default=1)
    p.add_argument("--out")
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("plot", help="render figures from metrics, tables or reports")
    p.add_argument("kind", choices=["loss-curve", "ablation-bars", "joint-vs-separate"])
    p.add_argument("inputs", nargs="+")
    p.add_argument("--labels", nargs="+")
    p.add_argument("--out")
    p.set_defaults(func=cmd_plot)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.command == "ablate" and not args.grid:
        args.grid = ["all"]
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except DethubError as exc:
        print(json.dumps(exc.to_json()), file=sys.stderr)
        return exc.exit_status
    except yaml.YAMLError as exc:
        print(json.dumps(ConfigError(str(exc)).to_json()), file=sys.stderr)
        return ConfigError.exit_status


if __name__ == "__main__":
    sys.exit(main())
