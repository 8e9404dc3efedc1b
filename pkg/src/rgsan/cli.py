"""Command-line entry points: ``rgsan <command> ...``."""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from .metrics import results_json, results_table
from .rws import select_target_index
from .scene import SceneError, load_scene
from .synth import DatasetError, SynthConfig, generate_dataset, read_dataset, write_dataset
from .text import TreeError, read_tree
from .train import TrainConfig, evaluate, grad_check, infer, load_checkpoint, save_checkpoint, train

CHECKPOINT_NAME = "checkpoint.pt"


def _gen_scenes(args):
    config = SynthConfig()
    if args.config:
        config = SynthConfig.from_dict(json.loads(Path(args.config).read_text()))
    samples = generate_dataset(config, args.count)
    write_dataset(samples, args.out)
    print(f"wrote {len(samples)} samples to {args.out}")


def _train(args):
    config = TrainConfig.from_file(args.config)
    samples = read_dataset(args.data)
    eval_samples = read_dataset(args.eval_data) if args.eval_data else None
    ckpt = train(config, samples, eval_samples, log_every=args.log_every)
    out = Path(args.out)
    save_checkpoint(ckpt, out / CHECKPOINT_NAME)
    (out / "history.json").write_text(json.dumps(ckpt.history, indent=1))
    print(f"trained {ckpt.step} steps ({ckpt.epoch} epochs); checkpoint at {out / CHECKPOINT_NAME}")


def _resolve_ckpt(path):
    path = Path(path)
    return path / CHECKPOINT_NAME if path.is_dir() else path


def _eval(args):
    report = evaluate(load_checkpoint(_resolve_ckpt(args.ckpt)), read_dataset(args.data))
    if not args.per_sample:
        report.pop("per_sample")
    print(results_json(report))
    print(results_table(report))


def _infer(args):
    out = infer(load_checkpoint(_resolve_ckpt(args.ckpt)), load_scene(args.scene), read_tree(args.tree))
    print(json.dumps(out))


def _select_target(args):
    tree = read_tree(args.tree)
    i = select_target_index(tree)
    print(i, tree.tokens[i])


def _grad_check(args):
    report = grad_check(seed=args.seed)
    for name, err in sorted(report.errors.items()):
        print(f"{err:.3e}  {'ok' if err < report.tolerance else 'FAIL'}  {name}")
    print(f"max relative error {max(report.errors.values()):.3e} over {len(report.errors)} groups "
          f"in {report.seconds:.2f}s")
    if not report.ok:
        print("failing groups: " + ", ".join(report.failed), file=sys.stderr)
        return 1
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="rgsan", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-scenes", help="generate a synthetic referring dataset")
    p.add_argument("--config", help="JSON file with SynthConfig fields")
    p.add_argument("--out", required=True)
    p.add_argument("--count", type=int, required=True)
    p.set_defaults(func=_gen_scenes)

    p = sub.add_parser("train", help="train a model")
    p.add_argument("--config", required=True, help="JSON file with TrainConfig fields")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--eval-data")
    p.add_argument("--log-every", type=int, default=0)
    p.set_defaults(func=_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint on a dataset")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--per-sample", action="store_true")
    p.set_defaults(func=_eval)

    p = sub.add_parser("infer", help="segment one scene for one expression tree")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--scene", required=True)
    p.add_argument("--tree", required=True)
    p.set_defaults(func=_infer)

    p = sub.add_parser("select-target", help="print the target token chosen from a dependency tree")
    p.add_argument("--tree", required=True)
    p.set_defaults(func=_select_target)

    p = sub.add_parser("grad-check", help="compare analytic and finite-difference gradients")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=_grad_check)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        return args.func(args) or 0
    except (SceneError, TreeError, DatasetError, ValueError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
