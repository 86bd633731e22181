"""Command line entry point: generate, train, eval, predict.

Exit codes: 0 success, 2 input or validation error, 3 numerical failure,
4 checkpoint/dataset incompatibility.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .attention import write_map_csv, write_map_pgm
from .autodiff import NumericalError
from .metrics import Taxonomy
from .model import ModelDims
from .question import tokenize
from .shapeworld import CATEGORIES, DEFAULT_PROPORTIONS, GeneratorConfig, cell_features, read_image, write_dataset
from .training import (
    CompatibilityError,
    TrainConfig,
    check_compatible,
    dataset_vocabularies,
    evaluate,
    load_checkpoint,
    load_split,
    save_checkpoint,
    train,
)

EXIT_OK, EXIT_INPUT, EXIT_NUMERIC, EXIT_COMPAT = 0, 2, 3, 4


class InputError(ValueError):
    """Bad flags, config entries or paths."""


def parse_proportions(text: str) -> dict[str, float]:
    """``object=0.7,number=0.1,...`` -> dict; must name every category and sum to 1."""
    out = {}
    for part in text.split(","):
        key, sep, val = part.partition("=")
        key = key.strip()
        if not sep or key not in CATEGORIES or key in out:
            raise InputError(f"bad proportion entry {part!r}; expected category=fraction for {', '.join(CATEGORIES)}")
        try:
            out[key] = float(val)
        except ValueError:
            raise InputError(f"bad fraction in {part!r}") from None
        if not 0 <= out[key] <= 1:
            raise InputError(f"fraction out of [0, 1] in {part!r}")
    if set(out) != set(CATEGORIES):
        raise InputError(f"proportions must name all of {', '.join(CATEGORIES)}")
    if abs(sum(out.values()) - 1) > 1e-6:
        raise InputError(f"proportions sum to {sum(out.values()):.6g}, not 1")
    return out


def read_config_file(path: str | Path) -> dict[str, str]:
    """key=value lines; blank lines and ``#`` comments ignored. Keys use flag spelling."""
    out = {}
    try:
        lines = Path(path).read_text(encoding="utf-8").splitlines()
    except OSError as e:
        raise InputError(f"cannot read config {path}: {e}") from None
    for n, line in enumerate(lines, 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, val = line.partition("=")
        if not sep:
            raise InputError(f"{path}:{n}: expected key=value")
        out[key.strip().lstrip("-").replace("-", "_")] = val.strip()
    return out


def _add_common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="key=value file supplying defaults; explicit flags win")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="abccnn", description="Question-guided attention VQA on synthetic scenes.")
    parser.add_argument("--version", action="version", version=f"abccnn {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    g = sub.add_parser("generate", help="write a shapeworld dataset")
    g.add_argument("--out", required=True, help="output directory")
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--train", type=int, default=2000, help="training QA pairs")
    g.add_argument("--test", type=int, default=400, help="test QA pairs")
    g.add_argument("--grid", type=int, default=3, help="grid side N")
    g.add_argument("--cell-size", type=int, default=20, help="pixels per cell side")
    g.add_argument("--min-objects", type=int, default=2)
    g.add_argument("--max-objects", type=int, default=5)
    g.add_argument(
        "--proportions",
        default=",".join(f"{k}={v}" for k, v in DEFAULT_PROPORTIONS.items()),
        help="category fractions, e.g. object=0.7,number=0.1,color=0.15,location=0.05",
    )
    _add_common(g)

    d = ModelDims()
    t = sub.add_parser("train", help="train a model on a dataset")
    t.add_argument("--data", required=True, help="dataset directory")
    t.add_argument("--out", required=True, help="run directory for checkpoint and history")
    t.add_argument("--seed", type=int, default=0)
    t.add_argument("--epochs", type=int, default=50)
    t.add_argument("--batch-size", type=int, default=64)
    t.add_argument("--lr", type=float, default=0.1, help="global scale on the adadelta update")
    t.add_argument("--reduced", type=int, default=d.reduced, help="channels after reduction")
    t.add_argument("--embed", type=int, default=d.embed, help="word embedding size")
    t.add_argument("--question", type=int, default=d.question, help="LSTM state size")
    t.add_argument("--hidden", type=int, default=d.hidden, help="fused feature size")
    t.add_argument("--kernel", type=int, default=d.kernel, help="odd spatial extent of the question kernel")
    t.add_argument("--no-att", action="store_true", help="uniform attention map (ablation)")
    t.add_argument("--keep-epochs", action="store_true", help="also keep epoch-NNN.ckpt for every epoch")
    _add_common(t)

    e = sub.add_parser("eval", help="score a checkpoint on a dataset split")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--data", required=True)
    e.add_argument("--split", default="test", choices=["train", "test"])
    e.add_argument("--report", help="JSON report path (default: report-<split>.json next to the checkpoint)")
    e.add_argument("--jobs", type=int, default=1, help="evaluation threads; results do not depend on it")
    _add_common(e)

    p = sub.add_parser("predict", help="answer one question about one image")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--image", required=True, help="PPM/PNG image whose sides are divisible by N")
    p.add_argument("--question", required=True)
    p.add_argument("--out", default=".", help="directory for attention.csv and attention.pgm")
    _add_common(p)
    return parser


def _config_defaults(subparser: argparse.ArgumentParser, command: str, path: str) -> dict:
    values = read_config_file(path)
    actions = {a.dest: a for a in subparser._actions if a.dest not in ("help", "config")}
    unknown = sorted(set(values) - set(actions))
    if unknown:
        raise InputError(f"unknown config keys for {command}: {', '.join(unknown)}")
    defaults = {}
    for key, raw in values.items():
        a = actions[key]
        if isinstance(a, argparse._StoreTrueAction):
            if raw.lower() not in ("true", "false", "1", "0", "yes", "no"):
                raise InputError(f"config key {key} expects a boolean")
            defaults[key] = raw.lower() in ("true", "1", "yes")
            continue
        try:
            defaults[key] = a.type(raw) if a.type else raw
        except ValueError:
            raise InputError(f"config key {key}: bad value {raw!r}") from None
        if a.choices and defaults[key] not in a.choices:
            raise InputError(f"config key {key}: {raw!r} not in {list(a.choices)}")
        a.required = False  # supplied by the file; a flag may still override it
    return defaults


def parse_args(argv: list[str] | None = None) -> argparse.Namespace:
    argv = sys.argv[1:] if argv is None else list(argv)
    parser = build_parser()
    # find the subcommand and any --config before the real parse, so the file can fill required options
    pre = argparse.ArgumentParser(add_help=False)
    pre.add_argument("command", nargs="?")
    pre.add_argument("--config")
    known, _ = pre.parse_known_args(argv)
    subparsers = parser._subparsers._group_actions[0].choices
    if known.config and known.command in subparsers:
        sub = subparsers[known.command]
        sub.set_defaults(**_config_defaults(sub, known.command, known.config))
    return parser.parse_args(argv)


# ---------------------------------------------------------------- subcommands


def cmd_generate(args) -> int:
    cfg = GeneratorConfig(
        seed=args.seed,
        n_train=args.train,
        n_test=args.test,
        grid=args.grid,
        cell_size=args.cell_size,
        min_objects=args.min_objects,
        max_objects=args.max_objects,
        proportions=parse_proportions(args.proportions),
    )
    if min(cfg.n_train, cfg.n_test) < 1 or cfg.grid < 1 or cfg.cell_size < 1:
        raise InputError("split sizes, grid and cell size must be positive")
    if not 1 <= cfg.min_objects <= cfg.max_objects <= cfg.grid**2:
        raise InputError(f"object counts must satisfy 1 <= min <= max <= {cfg.grid**2}")
    manifest = write_dataset(cfg, args.out)
    print(f"wrote {manifest['n_train']} train / {manifest['n_test']} test items to {args.out} (seed {cfg.seed})")
    return EXIT_OK


def _require_dataset(path: str) -> Path:
    data = Path(path)
    for name in ("train.jsonl", "test.jsonl", "taxonomy.txt"):
        if not (data / name).is_file():
            raise InputError(f"{data} is not a dataset directory (missing {name})")
    return data


def _grid_of(data: Path) -> int:
    manifest = data / "manifest.json"
    return int(json.loads(manifest.read_text(encoding="utf-8"))["grid"]) if manifest.exists() else 3


def cmd_train(args) -> int:
    data = _require_dataset(args.data)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    grid = _grid_of(data)
    dims = ModelDims(
        grid=grid,
        reduced=args.reduced,
        embed=args.embed,
        question=args.question,
        hidden=args.hidden,
        kernel=args.kernel,
        attention=not args.no_att,
    )
    cfg = TrainConfig(batch_size=args.batch_size, lr=args.lr, epochs=args.epochs, seed=args.seed, dims=dims)
    cache: dict = {}
    tr = load_split(data, "train", grid, cache)
    te = load_split(data, "test", grid, cache)
    qvocab, avocab = dataset_vocabularies(data, tr)
    missing = sorted(set(tr.answers) - set(avocab.words))
    if missing:
        raise InputError(f"answer vocabulary lacks training answers: {missing[:5]}")

    def on_epoch(epoch, model, hist):
        row = hist.rows[-1]
        print(f"epoch {epoch:3d}  loss {row['loss']:.4f}  train {row['train_acc']:.4f}  test {row['val_acc']:.4f}", flush=True)
        extra = {"epoch": epoch}
        save_checkpoint(model, cfg, out / "model.ckpt", extra)
        if args.keep_epochs:
            save_checkpoint(model, cfg, out / f"epoch-{epoch:03d}.ckpt", extra)
        (out / "history.csv").write_text(hist.to_csv(), encoding="utf-8")

    model, hist = train(cfg, tr, te, qvocab, avocab, on_epoch)
    if cfg.epochs == 0:
        save_checkpoint(model, cfg, out / "model.ckpt", {"epoch": 0})
        (out / "history.csv").write_text(hist.to_csv(), encoding="utf-8")
    report = evaluate(model, te, Taxonomy.load(data / "taxonomy.txt"))
    print("test", report.format())
    return EXIT_OK


def cmd_eval(args) -> int:
    data = _require_dataset(args.data)
    ckpt = Path(args.checkpoint)
    if not ckpt.is_file():
        raise InputError(f"no checkpoint at {ckpt}")
    if args.jobs < 1:
        raise InputError("--jobs must be >= 1")
    model, _, header = load_checkpoint(ckpt)
    qvocab, avocab = dataset_vocabularies(data)
    check_compatible(header, qvocab, avocab)
    if _grid_of(data) != model.dims.grid:
        raise CompatibilityError(f"checkpoint grid {model.dims.grid} does not match dataset grid {_grid_of(data)}")
    split = load_split(data, args.split, model.dims.grid)
    if split.features.shape[1] != model.dims.channels:
        raise CompatibilityError("feature size differs between checkpoint and dataset")
    report = evaluate(model, split, Taxonomy.load(data / "taxonomy.txt"), jobs=args.jobs)
    path = Path(args.report) if args.report else ckpt.parent / f"report-{args.split}.json"
    path.write_text(json.dumps(report.to_dict(), indent=2, sort_keys=True) + "\n", encoding="utf-8")
    print(args.split, report.format())
    print(f"report written to {path}")
    return EXIT_OK


def cmd_predict(args) -> int:
    ckpt = Path(args.checkpoint)
    if not ckpt.is_file():
        raise InputError(f"no checkpoint at {ckpt}")
    model, _, _ = load_checkpoint(ckpt)
    try:
        image = read_image(args.image)
    except OSError as e:
        raise InputError(f"cannot read image {args.image}: {e}") from None
    feats = cell_features(image, model.dims.grid)
    tokens = tokenize(args.question)
    out = model.forward(model.make_batch(feats[None], [tokens]))
    probs = out["probs"].data[0]
    best = int(np.argmax(probs))
    m = out["m"].data[0]
    dest = Path(args.out)
    dest.mkdir(parents=True, exist_ok=True)
    write_map_csv(m, dest / "attention.csv")
    write_map_pgm(m, dest / "attention.pgm")
    print(f"{model.avocab.words[best]} {probs[best]:.4f}")
    return EXIT_OK


COMMANDS = {"generate": cmd_generate, "train": cmd_train, "eval": cmd_eval, "predict": cmd_predict}


def main(argv: list[str] | None = None) -> int:
    try:
        args = parse_args(argv)
    except InputError as e:
        print(f"abccnn: error: {e}", file=sys.stderr)
        return EXIT_INPUT
    except SystemExit as e:  # argparse: --help, --version and usage errors
        return int(e.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return COMMANDS[args.command](args)
    except CompatibilityError as e:
        print(f"abccnn: incompatible: {e}", file=sys.stderr)
        return EXIT_COMPAT
    except NumericalError as e:
        print(f"abccnn: numerical failure: {e}", file=sys.stderr)
        return EXIT_NUMERIC
    except (ValueError, OSError, KeyError) as e:
        print(f"abccnn: error: {e}", file=sys.stderr)
        return EXIT_INPUT


if __name__ == "__main__":
    sys.exit(main())
