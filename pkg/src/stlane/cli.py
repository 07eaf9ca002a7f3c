"""``stlane`` command line: synth, train, eval, predict, count, viz.

Exit codes: 0 success, 1 validation error (bad flags, config, data or
checkpoint), 2 runtime failure (e.g. training diverged).
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

import numpy as np

from . import model as net
from .checkpoint import load_checkpoint
from .complexity import count_params
from .data import CHALLENGES, DatasetIndex, load_dataset, synthesize, to_uint8, write_png
from .metrics import PRCurveConfig, mean_average_precision, metrics
from .nn import NonFiniteError
from .train import TrainConfig, evaluate, train
from .viz import STAGES, attention_heatmaps, overlay, visualize_activation

log = logging.getLogger("stlane")


class UsageError(ValueError):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(message)


def _int_list(text: str) -> tuple[int, ...]:
    try:
        return tuple(int(t) for t in text.split(",") if t.strip())
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None


def _challenges(text: str) -> tuple[str, ...]:
    items = tuple(t.strip() for t in text.split(",") if t.strip())
    for c in items:
        if c not in CHALLENGES:
            raise argparse.ArgumentTypeError(f"unknown challenge {c!r}; choose from {', '.join(CHALLENGES)}")
    return items


def _positive(text: str) -> int:
    v = int(text)
    if v < 1:
        raise argparse.ArgumentTypeError(f"must be >= 1, got {v}")
    return v


def _shared() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(add_help=False)
    g = p.add_argument_group("model and run")
    g.add_argument("--variant", choices=("tem", "st", "stfc"), default="st")
    g.add_argument("--extractor", choices=("lstm", "gru"), default="lstm")
    g.add_argument("--frames", type=_positive, default=5, help="frames per sequence N (default 5)")
    g.add_argument("--height", type=_positive, default=128)
    g.add_argument("--width", type=_positive, default=256)
    g.add_argument("--channel-divisor", type=_positive, default=1,
                   help="divide the 64/128/256/512 channel schedule (desk-scale runs)")
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--config", type=Path, help="flat key=value file; its values override flags")
    g.add_argument("-v", "--verbose", action="store_true")
    return p


def build_parser() -> argparse.ArgumentParser:
    shared = _shared()
    parser = _Parser(prog="stlane", description="Multi-frame lane segmentation with spatial-temporal attention.")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("synth", parents=[shared], help="generate a synthetic dataset")
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--num", type=_positive, default=10, help="number of clips")
    p.add_argument("--clip-length", type=_positive, help="frames rendered per clip (default: --frames)")
    p.add_argument("--strides", type=_int_list, default=(1,), help="sampling strides, e.g. 1,2,3")
    p.add_argument("--challenges", type=_challenges, default=(), help=f"comma list from {','.join(CHALLENGES)}")

    p = sub.add_parser("train", parents=[shared], help="train from a dataset index")
    p.add_argument("--index", type=Path, required=True)
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--val-index", type=Path)
    p.add_argument("--epochs", type=int, default=50)
    p.add_argument("--lr", type=float, default=0.01)
    p.add_argument("--decay", type=float, default=0.95)
    p.add_argument("--momentum", type=float, default=0.9)
    p.add_argument("--batch-size", type=_positive, default=64, help="default 64; 4 is recommended on a CPU")
    p.add_argument("--target-f1", type=float, help="stop once the monitored F1 reaches this")
    p.add_argument("--init", type=Path, help="start from this checkpoint")

    p = sub.add_parser("eval", parents=[shared], help="evaluate a checkpoint")
    p.add_argument("--checkpoint", type=Path, required=True)
    p.add_argument("--index", type=Path, required=True)
    p.add_argument("--V", dest="V", type=_positive, default=100, help="thresholds per image for mAP")
    p.add_argument("--grid", choices=("quantile", "fixed"), default="quantile")
    p.add_argument("--batch-size", type=_positive, default=4)

    p = sub.add_parser("predict", parents=[shared], help="write mask and red-overlay PNGs")
    p.add_argument("--checkpoint", type=Path, required=True)
    p.add_argument("--index", type=Path, required=True)
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--batch-size", type=_positive, default=4)

    p = sub.add_parser("count", parents=[shared], help="print parameter and MAC counts")
    p.add_argument("--backbone-only", action="store_true", help="single-frame encoder+decoder only")

    p = sub.add_parser("viz", parents=[shared], help="write activation and attention heatmaps")
    p.add_argument("--index", type=Path, required=True)
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--checkpoint", type=Path, help="default: seeded initialization")
    p.add_argument("--entry", type=int, default=0, help="0-based index entry")
    p.add_argument("--stage", choices=STAGES, default="Up_ConvBlock_4")
    return parser


def apply_config_file(args: argparse.Namespace, parser: argparse.ArgumentParser) -> None:
    """Override ``args`` with ``key=value`` lines (``#`` comments, blank lines allowed)."""
    if args.config is None:
        return
    if not args.config.is_file():
        raise UsageError(f"config file not found: {args.config}")
    sub = parser._subparsers._group_actions[0].choices[args.command]  # type: ignore[union-attr]
    actions = {a.dest: a for a in sub._actions}
    for line_no, raw in enumerate(args.config.read_text().splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise UsageError(f"{args.config}:{line_no}: expected key=value, got {raw!r}")
        key, value = (s.strip() for s in line.split("=", 1))
        dest = key.lstrip("-").replace("-", "_")
        action = actions.get(dest)
        if action is None or dest in ("help", "config"):
            raise UsageError(f"{args.config}:{line_no}: unknown key {key!r} for {args.command}")
        if action.const is True and action.nargs == 0:
            parsed = value.lower() in ("1", "true", "yes", "on")
        else:
            try:
                parsed = action.type(value) if action.type else value
            except (argparse.ArgumentTypeError, ValueError) as exc:
                raise UsageError(f"{args.config}:{line_no}: bad value for {key}: {exc}") from None
            if action.choices is not None and parsed not in action.choices:
                raise UsageError(f"{args.config}:{line_no}: {key} must be one of {list(action.choices)}")
        setattr(args, dest, parsed)


def model_config(args) -> net.ModelConfig:
    return net.ModelConfig(variant=args.variant, extractor=args.extractor, frames=args.frames,
                           height=args.height, width=args.width, channel_divisor=args.channel_divisor)


def _load(index_path: Path, config: net.ModelConfig):
    if not index_path.is_file():
        raise UsageError(f"index not found: {index_path}")
    result = load_dataset(DatasetIndex.read(index_path), config.frames, config.height, config.width)
    if result.failures:
        print(f"skipped={result.failures}", file=sys.stderr)
    if not result.sequences:
        raise UsageError(f"{index_path}: no usable entries")
    return result.sequences


def _checkpoint(path: Path):
    if not path.is_file():
        raise UsageError(f"checkpoint not found: {path}")
    return load_checkpoint(path)


def cmd_synth(args) -> int:
    index = synthesize(args.out, args.num, args.seed, args.height, args.width, args.frames,
                       clip_length=args.clip_length, strides=args.strides, challenges=args.challenges)
    print(f"entries={len(index.entries)}")
    print(f"index={args.out / 'index.txt'}")
    return 0


def cmd_train(args) -> int:
    config = model_config(args)
    tcfg = TrainConfig(lr0=args.lr, decay=args.decay, momentum=args.momentum, batch_size=args.batch_size,
                       epochs=args.epochs, seed=args.seed, target_f1=args.target_f1)
    params = None
    if args.init is not None:
        params, init_cfg = _checkpoint(args.init)
        if init_cfg != config:
            raise UsageError(f"--init checkpoint is {init_cfg}, flags ask for {config}")
    train_set = _load(args.index, config)
    val_set = _load(args.val_index, config) if args.val_index else None
    result = train(train_set, config, tcfg, args.out, val_set, params)
    if result.halted:
        print("error: training halted on a non-finite loss or gradient", file=sys.stderr)
        return 2
    print(f"epochs_run={len(result.history)}")
    print(f"best_f1={result.best_f1:.6f}")
    print(f"checkpoint={result.checkpoint}")
    return 0


def cmd_eval(args) -> int:
    params, config = _checkpoint(args.checkpoint)
    seqs = _load(args.index, config)
    counts, probs = evaluate(params, config, seqs, args.batch_size)
    m = metrics(counts)
    mAP = mean_average_precision(probs, [s.mask for s in seqs], PRCurveConfig(V=args.V, grid=args.grid))
    print(f"model={config.name}")
    print(f"sequences={len(seqs)}")
    for line in m.as_lines():
        print(line)
    print(f"mAP={mAP:.6f}")
    return 0


def cmd_predict(args) -> int:
    params, config = _checkpoint(args.checkpoint)
    seqs = _load(args.index, config)
    args.out.mkdir(parents=True, exist_ok=True)
    for i in range(0, len(seqs), args.batch_size):
        chunk = seqs[i:i + args.batch_size]
        logits = net.forward(np.stack([s.frames for s in chunk]), params, config).logits
        for k, (seq, pred) in enumerate(zip(chunk, net.predict_mask(logits))):
            j = i + k
            write_png(args.out / f"mask_{j:04d}.png", pred * np.uint8(255))
            write_png(args.out / f"overlay_{j:04d}.png", overlay(seq.frames[-1], pred))
    print(f"predicted={len(seqs)}")
    print(f"out={args.out}")
    return 0


def cmd_count(args) -> int:
    report = count_params(model_config(args), backbone_only=args.backbone_only)
    print(report.table())
    for line in report.key_values():
        print(line)
    return 0


def cmd_viz(args) -> int:
    if args.checkpoint is not None:
        params, config = _checkpoint(args.checkpoint)
    else:
        config = model_config(args)
        params = net.init_parameters(config, args.seed)
    seqs = _load(args.index, config)
    if not 0 <= args.entry < len(seqs):
        raise UsageError(f"--entry {args.entry} out of range (0..{len(seqs) - 1})")
    seq = seqs[args.entry]
    paths = visualize_activation(seq, params, config, args.stage, args.out)
    trace = net.forward(seq.frames, params, config).trace
    paths += attention_heatmaps(trace, config.grid, args.out, (config.height, config.width))
    write_png(args.out / "input_last.png", to_uint8(seq.frames[-1]))
    for p in paths:
        print(f"wrote={p}")
    return 0


COMMANDS = {"synth": cmd_synth, "train": cmd_train, "eval": cmd_eval, "predict": cmd_predict,
            "count": cmd_count, "viz": cmd_viz}


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        apply_config_file(args, parser)
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                            format="%(levelname)s %(name)s: %(message)s")
        return COMMANDS[args.command](args)
    except NonFiniteError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except (OSError, RuntimeError, MemoryError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
