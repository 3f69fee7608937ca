"""Command line entry point: ``poseforest {synth,train,infer,eval,inspect}``."""
from __future__ import annotations

import argparse
import json
import sys
import time
from pathlib import Path

import numpy as np

from .dataset import load_manifest
from .depthcore import DepthFormatError
from .evaluation import EvalConfig, evaluate
from .forest import Forest, ForestError
from .inference import InferenceConfig, JointCountMismatch, infer_batch, read_predictions, write_predictions
from .synthdata import JOINT_NAMES, default_camera, generate_dataset, parse_scenario_mix
from .training import TrainingConfig, load_config, train_forest

EXIT_OK, EXIT_USAGE, EXIT_IO, EXIT_CONFIG, EXIT_MISMATCH, EXIT_CORRUPT = 0, 2, 3, 4, 5, 6


class CliError(Exception):
    def __init__(self, code: int, message: str):
        super().__init__(message)
        self.code = code


def _positive_int(text: str) -> int:
    v = int(text)
    if v <= 0:
        raise argparse.ArgumentTypeError(f"expected a positive integer, got {text}")
    return v


def _manifest(path: str):
    p = Path(path)
    if p.is_dir():
        p = p / "manifest.json"
    try:
        return load_manifest(p)
    except (OSError, DepthFormatError, KeyError, ValueError) as exc:
        raise CliError(EXIT_IO, f"cannot load dataset {p}: {exc}") from None


def _load_forest(path: str) -> Forest:
    try:
        return Forest.load(path)
    except OSError as exc:
        raise CliError(EXIT_IO, f"cannot read model {path}: {exc}") from None
    except ForestError as exc:
        raise CliError(EXIT_CORRUPT, f"corrupt model {path}: {exc}") from None


def cmd_synth(args) -> None:
    try:
        mix = parse_scenario_mix(args.scenario_mix)
    except ValueError as exc:
        raise CliError(EXIT_USAGE, str(exc)) from None
    size = (args.width, args.height)
    try:
        manifest = generate_dataset(None, args.count, mix, default_camera(*size), args.seed,
                                    args.out, image_size=size, noise_mm=args.noise_mm)
    except OSError as exc:
        raise CliError(EXIT_IO, str(exc)) from None
    print(manifest)


def cmd_train(args) -> None:
    data = _manifest(args.data)
    try:
        config = load_config(args.config) if args.config else TrainingConfig()
        if args.seed is not None:
            config.seed = args.seed
        config.validate()
    except OSError as exc:
        raise CliError(EXIT_IO, f"cannot read config: {exc}") from None
    except ValueError as exc:
        raise CliError(EXIT_CONFIG, f"bad training config: {exc}") from None
    start = time.perf_counter()
    try:
        forest = train_forest(data, config, args.threads)
    except ValueError as exc:
        raise CliError(EXIT_CONFIG, str(exc)) from None
    elapsed = time.perf_counter() - start
    try:
        forest.save(args.out)
    except OSError as exc:
        raise CliError(EXIT_IO, f"cannot write model: {exc}") from None
    for i, tree in enumerate(forest.trees):
        print(f"tree {i}: {tree.node_count} nodes, {tree.leaf_count} leaves, depth {tree.depth()}")
    print(f"training time {elapsed:.1f}s")


def cmd_infer(args) -> None:
    forest = _load_forest(args.model)
    data = _manifest(args.data)
    config = InferenceConfig(n_votes=args.n_votes, max_hypotheses=args.max_hypotheses,
                             seed=args.seed)
    try:
        results = infer_batch(data, forest, config, args.threads)
    except JointCountMismatch as exc:
        raise CliError(EXIT_MISMATCH, str(exc)) from None
    try:
        write_predictions(args.out, results)
        if args.timing:
            Path(args.timing).write_text(json.dumps(
                {r.id: round(r.wall_ms, 3) for r in results}, indent=1) + "\n")
    except OSError as exc:
        raise CliError(EXIT_IO, f"cannot write predictions: {exc}") from None
    print(f"{len(results)} images -> {args.out}")


def cmd_eval(args) -> None:
    data = _manifest(args.data)
    try:
        records = read_predictions(args.pred)
    except (OSError, json.JSONDecodeError) as exc:
        raise CliError(EXIT_IO, f"cannot read predictions: {exc}") from None
    names = JOINT_NAMES if data.joint_count == len(JOINT_NAMES) else None
    try:
        report = evaluate(records, data, EvalConfig(args.radius, not args.visible_only), names)
    except ValueError as exc:
        raise CliError(EXIT_MISMATCH, str(exc)) from None
    except (KeyError, IndexError, TypeError) as exc:
        raise CliError(EXIT_MISMATCH, f"predictions do not fit the dataset: {exc!r}") from None
    if args.out:
        try:
            report.write(args.out)
        except OSError as exc:
            raise CliError(EXIT_IO, f"cannot write report: {exc}") from None
    print(report.table())
    print(f"mAP={report.mean_ap:.6f}")


def summarize(forest: Forest) -> str:
    lines = [f"{len(forest.trees)} trees, {forest.joint_count} joints, K={forest.k}"]
    for i, t in enumerate(forest.trees):
        per_leaf = t.counts.max(axis=1) if t.leaf_count else np.zeros(1, int)
        nonempty = t.weights[t.counts > 0] if t.leaf_count else np.zeros(0)
        lines.append(f"tree {i}: {t.node_count} nodes, {t.leaf_count} leaves, depth {t.depth()}, "
                     f"max votes per leaf {int(per_leaf.max())}, "
                     f"mean vote weight {float(nonempty.mean()) if nonempty.size else 0.0:.4f}")
    names = JOINT_NAMES if forest.joint_count == len(JOINT_NAMES) else \
        [f"joint{j}" for j in range(forest.joint_count)]
    lines.append(f"{'joint':<12} {'lambda':>7} {'b':>7}")
    for n, lam, b in zip(names, forest.lambdas, forest.bandwidths):
        lines.append(f"{n:<12} {lam:7.3f} {b:7.3f}")
    return "\n".join(lines)


def cmd_inspect(args) -> None:
    print(summarize(_load_forest(args.model)))


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="poseforest", description=__doc__)
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("synth", help="render a labelled synthetic dataset")
    s.add_argument("--count", type=_positive_int, required=True)
    s.add_argument("--scenario-mix", default=None,
                   help='e.g. "standing:1,arms-crossed:2" (default: all scenarios equally)')
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out", required=True)
    s.add_argument("--width", type=_positive_int, default=160)
    s.add_argument("--height", type=_positive_int, default=120)
    s.add_argument("--noise-mm", type=float, default=0.0)
    s.set_defaults(func=cmd_synth)

    t = sub.add_parser("train", help="train a forest on a dataset")
    t.add_argument("--data", required=True, help="manifest.json or its directory")
    t.add_argument("--config", help="key = value training config")
    t.add_argument("--seed", type=int, default=None, help="overrides the config seed")
    t.add_argument("--out", required=True)
    t.add_argument("--threads", type=_positive_int, default=None)
    t.set_defaults(func=cmd_train)

    i = sub.add_parser("infer", help="joint hypotheses for every image of a dataset")
    i.add_argument("--model", required=True)
    i.add_argument("--data", required=True)
    i.add_argument("--out", required=True)
    i.add_argument("--n-votes", type=_positive_int, default=200)
    i.add_argument("--max-hypotheses", type=_positive_int, default=5)
    i.add_argument("--seed", type=int, default=0)
    i.add_argument("--timing", help="also write per-image wall times (ms) to this JSON file")
    i.add_argument("--threads", type=_positive_int, default=None)
    i.set_defaults(func=cmd_infer)

    e = sub.add_parser("eval", help="per-joint AP and mAP of a prediction file")
    e.add_argument("--pred", required=True)
    e.add_argument("--data", required=True)
    e.add_argument("--radius", type=float, default=0.1)
    e.add_argument("--out", help="directory for report.json, report.txt and PR curves")
    e.add_argument("--visible-only", action="store_true",
                   help="ignore occluded joints instead of counting them")
    e.set_defaults(func=cmd_eval)

    n = sub.add_parser("inspect", help="summarise a forest file")
    n.add_argument("--model", required=True)
    n.set_defaults(func=cmd_inspect)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code in (0, None) else EXIT_USAGE
    if getattr(args, "radius", 1.0) <= 0:
        print("poseforest: --radius must be positive", file=sys.stderr)
        return EXIT_USAGE
    try:
        args.func(args)
    except CliError as exc:
        print(f"poseforest: {exc}", file=sys.stderr)
        return exc.code
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
