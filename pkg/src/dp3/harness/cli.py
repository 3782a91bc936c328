"""``dp3`` command line: gen-demos, train, eval, ablate, schema."""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import yaml

from ..numerics import CheckpointError
from ..policy import Dp3Policy
from .config import ConfigError, json_schema, load_config
from .dataset import DatasetError, load_dataset, save_dataset
from .runner import ABLATION_AXES, config_path, generate_demos, run_ablation, run_eval, run_train

log = logging.getLogger("dp3")


def _add_config(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", type=Path, help="YAML experiment config (defaults apply when omitted)")
    p.add_argument(
        "--override",
        action="append",
        default=[],
        metavar="KEY=VALUE",
        help="dotted config override, repeatable (e.g. diffusion.prediction_mode=epsilon)",
    )


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="dp3", description="3D diffusion policy experiments on Reach3D")
    ap.add_argument("-v", "--verbose", action="count", default=0)
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-demos", help="roll the scripted expert and write a dataset")
    _add_config(p)
    p.add_argument("--out", type=Path, required=True)

    p = sub.add_parser("train", help="train a policy on a dataset")
    _add_config(p)
    p.add_argument("--data", type=Path, required=True)
    p.add_argument("--out", type=Path, required=True, help="checkpoint path")
    p.add_argument("--resume", action="store_true", help="continue from the periodic save at --out")

    p = sub.add_parser("eval", help="evaluate a checkpoint over the configured targets")
    _add_config(p)
    p.add_argument("--ckpt", type=Path, required=True)
    p.add_argument("--out", type=Path, required=True, help="report directory")

    p = sub.add_parser("ablate", help="train and evaluate the on/off cross product of axes")
    _add_config(p)
    p.add_argument("--axes", required=True, help=f"comma list from {','.join(ABLATION_AXES)}")
    p.add_argument("--out", type=Path, required=True)

    sub.add_parser("schema", help="print the config JSON schema")
    return ap


def _cmd_gen_demos(args) -> int:
    cfg = load_config(args.config, args.override)
    episodes = generate_demos(cfg)
    args.out.parent.mkdir(parents=True, exist_ok=True)
    save_dataset(args.out, episodes)
    config_path(args.out).write_text(cfg.to_yaml())
    print(f"wrote {len(episodes)} episodes ({sum(len(e) for e in episodes)} steps) to {args.out}")
    return 0


def _cmd_train(args) -> int:
    cfg = load_config(args.config, args.override)
    episodes = load_dataset(args.data)
    result = run_train(cfg, episodes, args.out, resume=args.resume)
    note = " (stopped on plateau)" if result.stopped_early else ""
    print(f"trained {len(result.losses)} epochs, final loss {result.losses[-1]:.6f}{note}; checkpoint {args.out}")
    return 0


def _cmd_eval(args) -> int:
    cfg = load_config(args.config, args.override)
    policy, _ = Dp3Policy.load(args.ckpt)
    report = run_eval(cfg, policy, args.out)
    print(f"success rate {report.success_rate:.4f} ({report.successes}/{report.episodes}); report in {args.out}")
    return 0


def _cmd_ablate(args) -> int:
    raw = yaml.safe_load(args.config.read_text()) if args.config else {}
    axes = [a.strip() for a in args.axes.split(",") if a.strip()]
    run_ablation(raw or {}, axes, args.out, args.override)
    sys.stdout.write((args.out / "ablation.txt").read_text())
    return 0


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    level = logging.WARNING - 10 * min(args.verbose, 2)
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s")
    handlers = {
        "gen-demos": _cmd_gen_demos,
        "train": _cmd_train,
        "eval": _cmd_eval,
        "ablate": _cmd_ablate,
    }
    if args.command == "schema":
        print(json.dumps(json_schema(), indent=2, sort_keys=True))
        return 0
    try:
        return handlers[args.command](args)
    except ConfigError as exc:
        print(f"dp3: {exc}", file=sys.stderr)
        return 2
    except (DatasetError, CheckpointError, OSError, yaml.YAMLError) as exc:
        print(f"dp3: {exc}", file=sys.stderr)
        return 1
    except FloatingPointError as exc:
        print(f"dp3: training aborted: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    raise SystemExit(main())
