"""Command-line entry point.

Exit codes: 0 success, 1 usage/configuration error, 2 data error,
3 numerical abort.
"""

from __future__ import annotations

import argparse
import logging
import os
import sys
from dataclasses import fields
from pathlib import Path

import numpy as np

from .checkpoint import load_model
from .data import SplitSpec, discover_pairs, load_all, read_gray, split, synthetic_disk_sample
from .errors import BusnetError, ConfigError, DataError
from .metrics import aggregate, aggregate_macro, binarize, confusion, format_table
from .train import DATASET_ENV, RunConfig, evaluate, make_distance_maps, predict, train

log = logging.getLogger("busnet")


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(1, f"{self.prog}: error: {message}\n")


def _convert(kind: str, raw: str):
    kind = kind.replace(" | None", "")
    if kind == "bool":
        if raw.lower() in ("1", "true", "yes", "on"):
            return True
        if raw.lower() in ("0", "false", "no", "off"):
            return False
        raise ConfigError(f"not a boolean: {raw!r}")
    if raw.lower() == "none":
        return None
    try:
        return {"int": int, "float": float}.get(kind, str)(raw)
    except ValueError:
        raise ConfigError(f"cannot parse {raw!r} as {kind}") from None


def read_key_values(path) -> dict[str, str]:
    values = {}
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config file {path}: {exc}") from exc
    for n, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{path}:{n}: expected key=value")
        key, raw = (s.strip() for s in line.split("=", 1))
        values[key.replace("-", "_")] = raw
    return values


def run_config_from(args: argparse.Namespace) -> RunConfig:
    types = {f.name: str(f.type) for f in fields(RunConfig)}
    values = {}
    if args.config:
        for key, raw in read_key_values(args.config).items():
            if key not in types:
                raise ConfigError(f"unknown config key {key!r}")
            values[key] = _convert(types[key], raw)
    for name in types:
        flag = getattr(args, name, None)
        if flag is not None:
            values[name] = flag
    if values.get("data_root") is None and os.environ.get(DATASET_ENV):
        values["data_root"] = os.environ[DATASET_ENV]
    return RunConfig(**values)


def _add_run_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="key=value file; flags override its entries")
    for f in fields(RunConfig):
        kind = str(f.type).replace(" | None", "")
        flag = "--" + f.name.replace("_", "-")
        if kind == "bool":
            p.add_argument(flag, dest=f.name, action=argparse.BooleanOptionalAction, default=None)
        else:
            p.add_argument(flag, dest=f.name, default=None,
                           type={"int": int, "float": float}.get(kind, str),
                           help=f"default: {f.default}")


def _samples_for(args, config: RunConfig):
    root = args.data_root or os.environ.get(DATASET_ENV)
    if not root:
        raise DataError(f"no dataset root given (--data-root or ${DATASET_ENV})")
    samples = load_all(discover_pairs(root), config.image_size)
    train_s, test_s = split(samples, SplitSpec(args.train_fraction, args.seed, not args.no_stratify))
    return {"train": train_s, "test": test_s, "all": samples}[args.split]


def cmd_train(args) -> int:
    config = run_config_from(args)
    if args.synthetic_disk:
        sample = synthetic_disk_sample(config.image_size, seed=config.seed)
        result = train(config, [sample], [])
    else:
        result = train(config)
    print(f"steps={result.steps}")
    print(f"checkpoint={result.checkpoint_path}")
    print(f"curves={result.curves_path}")
    if result.history:
        last = result.history[-1]["report"]
        print(format_table([("final " + result.history[-1]["split"], last)]))
    return 0


def cmd_evaluate(args) -> int:
    model, _ = load_model(args.checkpoint, force=args.force)
    config = RunConfig(image_size=model.config.image_size)
    samples = _samples_for(args, config)
    ev = evaluate(model, samples, args.threshold)
    lines = ev.micro.records("micro.") + ev.macro.records("macro.")
    text = "\n".join(lines) + "\n"
    print(format_table([("micro", ev.micro), ("macro", ev.macro)]))
    print(text, end="")
    if args.out:
        Path(args.out).write_text(text)
    return 0


def cmd_predict(args) -> int:
    model, _ = load_model(args.checkpoint, force=args.force)
    predict(model, args.image, args.out, args.prob, args.threshold)
    return 0


def cmd_make_distance_maps(args) -> int:
    root = args.data_root or os.environ.get(DATASET_ENV)
    if not root:
        raise DataError(f"no dataset root given (--data-root or ${DATASET_ENV})")
    manifest = make_distance_maps(root, args.out_dir, args.d, args.image_size)
    print(f"manifest={manifest}")
    return 0


def cmd_metrics(args) -> int:
    pred_dir, gt_dir = Path(args.pred), Path(args.gt)
    counts = []
    for gt_path in sorted(p for p in gt_dir.rglob("*") if p.is_file()):
        rel = gt_path.relative_to(gt_dir)
        pred_path = pred_dir / rel
        if not pred_path.exists():
            raise DataError(f"no prediction for {rel}")
        gt = read_gray(gt_path) > 127
        pred = binarize(read_gray(pred_path) / 255.0, args.threshold)
        counts.append(confusion(pred, gt.astype(np.uint8)))
    if not counts:
        raise DataError(f"no ground-truth masks under {gt_dir}")
    micro, macro = aggregate(counts), aggregate_macro(counts)
    print(format_table([("micro", micro), ("macro", macro)]))
    print("\n".join(micro.records("micro.") + macro.records("macro.")))
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="busnet", description="UNet++ with LSTM channel attention for breast ultrasound segmentation")
    parser.add_argument("-v", "--verbose", action="count", default=0)
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("train", help="train a model")
    _add_run_flags(p)
    p.add_argument("--synthetic-disk", action="store_true",
                   help="train on one synthetic disk sample instead of a dataset")
    p.set_defaults(func=cmd_train)

    def eval_flags(q):
        q.add_argument("--checkpoint", required=True)
        q.add_argument("--threshold", type=float, default=0.5)
        q.add_argument("--force", action="store_true", help="ignore a config hash mismatch")

    p = sub.add_parser("evaluate", help="score a checkpoint on a dataset split")
    eval_flags(p)
    p.add_argument("--data-root")
    p.add_argument("--split", choices=("train", "test", "all"), default="test")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--train-fraction", type=float, default=0.8)
    p.add_argument("--no-stratify", action="store_true")
    p.add_argument("--out", help="also write the name=value records here")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("predict", help="segment one image")
    eval_flags(p)
    p.add_argument("image")
    p.add_argument("out")
    p.add_argument("--prob", help="optional 8-bit probability map output")
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("make-distance-maps", help="export distance-class maps")
    p.add_argument("--data-root")
    p.add_argument("--out-dir", required=True)
    p.add_argument("-d", type=int, default=5, help="distance threshold in pixels")
    p.add_argument("--image-size", type=int, default=128)
    p.set_defaults(func=cmd_make_distance_maps)

    p = sub.add_parser("metrics", help="score externally produced masks")
    p.add_argument("--pred", required=True, help="directory of predicted masks")
    p.add_argument("--gt", required=True, help="directory of ground-truth masks, same names")
    p.add_argument("--threshold", type=float, default=0.5)
    p.set_defaults(func=cmd_metrics)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.WARNING - 10 * min(args.verbose, 2),
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except BusnetError as exc:
        print(f"busnet: {exc}", file=sys.stderr)
        return exc.exit_code


if __name__ == "__main__":
    sys.exit(main())
