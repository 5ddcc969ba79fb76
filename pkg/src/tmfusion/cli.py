"""Command-line entry point: ``tmfusion {synth,train,eval,grid-search,select}``.

Exit codes: 0 success, 1 configuration or validation error, 2 runtime error.
Flags given on the command line override the matching config-file fields.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from .data import SyntheticSpec, class_distribution, complementary_spec, generate_synthetic, load_manifest
from .errors import ConfigError, DimensionError, LoadError, TmfError
from .pipeline import (
    FUSION_METHODS,
    apply_overrides,
    evaluate_run,
    load_config,
    load_grid_spec,
    run_grid_search,
    run_training,
    select_models,
    write_eval_outputs,
    write_selection,
)

EXIT_OK, EXIT_CONFIG, EXIT_RUNTIME = 0, 1, 2


def _load_spec(path: str | None, seed: int | None) -> SyntheticSpec:
    if path is None:
        spec = complementary_spec()
    else:
        try:
            obj = json.loads(Path(path).read_text(encoding="utf-8"))
        except FileNotFoundError:
            raise ConfigError(f"spec file {path} does not exist") from None
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: {exc}") from None
        try:
            spec = SyntheticSpec.from_dict(obj)
        except (TypeError, KeyError) as exc:
            raise ConfigError(f"invalid synthetic spec: {exc}") from None
    if seed is not None:
        spec.seed = seed
    spec.validate()
    return spec


def cmd_synth(args) -> int:
    spec = _load_spec(args.config, args.seed)
    out = Path(args.out or "synthetic")
    result = generate_synthetic(spec, out)
    for split, path in result.manifests.items():
        dist = class_distribution(load_manifest(path))
        print(f"{split}: {dist.total} videos -> {path}")
        print(dist.format_table())
    print(f"oracle: {result.oracle}")
    return EXIT_OK


def cmd_train(args) -> int:
    cfg = apply_overrides(load_config(args.config), args.seed, args.out, args.workers, args.fusion)
    if args.manifest:
        cfg.train_manifest = str(Path(args.manifest).resolve())
    result = run_training(cfg)
    m = result.metrics
    print(f"run written to {result.out_dir}")
    for name, entry in m["modalities"].items():
        print(f"  {name}: " + ", ".join(f"{k} {v:.4f}" for k, v in entry.items()))
    line = f"  fusion ({cfg.fusion.method}): train_accuracy {m['train_accuracy']:.4f}"
    if "val_accuracy" in m:
        line += f", val_accuracy {m['val_accuracy']:.4f}"
    print(line)
    return EXIT_OK


def cmd_eval(args) -> int:
    if not args.checkpoint or not args.manifest:
        raise ConfigError("eval needs --checkpoint (a run directory) and --manifest")
    result = evaluate_run(args.checkpoint, args.manifest, args.fusion)
    default = "eval" if not args.fusion else f"eval_{args.fusion}"
    out = Path(args.out) if args.out else Path(args.checkpoint) / default
    title = f"{Path(args.manifest).name} ({args.fusion or 'trained fusion'})"
    write_eval_outputs(result, out, title)
    print(result.report.to_text(title), end="")
    print(f"reports written to {out}")
    return EXIT_OK


def cmd_grid_search(args) -> int:
    if not args.grid:
        raise ConfigError("grid-search needs --grid (a search spec file)")
    spec = load_grid_spec(args.grid)
    if args.seed is not None:
        spec.seed = args.seed
    cfg = apply_overrides(load_config(args.config), None, args.out, args.workers, args.fusion)
    rows = run_grid_search(spec, cfg)
    ok = [r for r in rows if r["status"] == "ok"]
    print(f"{len(ok)}/{len(rows)} trials succeeded; results in {Path(cfg.out) / 'trials.csv'}")
    for r in rows[:5]:
        value = f"{r['metric']:.4f}" if r["status"] == "ok" else r["error"]
        print(f"  #{r['rank']} trial {r['trial']}: {value}  {json.dumps(r['params'], sort_keys=True)}")
    return EXIT_OK if ok else EXIT_RUNTIME


def cmd_select(args) -> int:
    if not args.models or not args.manifest:
        raise ConfigError("select needs --models and --manifest")
    rows = select_models(args.models, args.manifest, args.k, args.accuracy_weight, args.dissimilarity_weight)
    print(write_selection(rows, args.out or "selection"), end="")
    return EXIT_OK


class _Parser(argparse.ArgumentParser):
    # usage errors are configuration errors, not argparse's default status 2
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_CONFIG, f"{self.prog}: error: {message}\n")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="tmfusion", description="Temporal and multimodal fusion experiments.")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, config_help: str):
        p.add_argument("--config", help=config_help)
        p.add_argument("--seed", type=int)
        p.add_argument("--out", help="output directory")
        p.add_argument("--workers", type=int)
        p.add_argument("--manifest")
        p.add_argument("--checkpoint", help="run directory written by train")
        p.add_argument("--fusion", choices=FUSION_METHODS)
        return p

    p = common(sub.add_parser("synth", help="generate a synthetic dataset"), "synthetic spec (JSON)")
    p.set_defaults(func=cmd_synth)
    p = common(sub.add_parser("train", help="train heads and fusion"), "experiment config (JSON)")
    p.set_defaults(func=cmd_train)
    p = common(sub.add_parser("eval", help="evaluate a run on a manifest"), "unused")
    p.set_defaults(func=cmd_eval)
    p = common(sub.add_parser("grid-search", help="random hyper-parameter search"), "base experiment config")
    p.add_argument("--grid", help="search spec (JSON)")
    p.set_defaults(func=cmd_grid_search)
    p = common(sub.add_parser("select", help="pick complementary runs"), "unused")
    p.add_argument("--models", nargs="+", help="run directories")
    p.add_argument("-k", "--k", type=int, default=2)
    p.add_argument("--accuracy-weight", type=float, default=1.0)
    p.add_argument("--dissimilarity-weight", type=float, default=1.0)
    p.set_defaults(func=cmd_select)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.command in ("train", "grid-search") and not args.config:
        print(f"error: {args.command} needs --config", file=sys.stderr)
        return EXIT_CONFIG
    try:
        return args.func(args)
    except (ConfigError, LoadError, DimensionError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (TmfError, OSError, ValueError) as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
