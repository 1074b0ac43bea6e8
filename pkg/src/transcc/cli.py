"""Command-line interface.

Subcommands: generate-data, train, eval, predict, gradcheck, count-params.
Exit codes: 0 success, 1 runtime error (any package error), 2 usage error
(argparse). Every RunConfig key is overridable by a flag of the same name
with dashes; precedence is defaults < --config file < flags.
"""

from __future__ import annotations

import argparse
import sys
from dataclasses import fields
from pathlib import Path

import numpy as np

from .config import RunConfig, config_text, load_config_file, make_run_config, parse_value
from .data import (
    PhantomConfig,
    generate_dataset,
    load_dataset,
    read_pgm,
    write_pgm,
)
from .errors import TransccError
from .gradcheck import run_suite
from .model import TransCC, VARIANTS, count_params
from .tensor import Tensor
from .training import evaluate, load_checkpoint, train_model

__all__ = ["main"]

_CONFIG_KEYS = [f.name for f in fields(RunConfig)]


def _flag(key: str) -> str:
    return "--" + key.replace("_", "-")


def _add_config_flags(parser: argparse.ArgumentParser, keys: list[str]) -> None:
    for key in keys:
        if key == "variant":
            parser.add_argument(_flag(key), dest=key, choices=VARIANTS, default=None)
        else:
            parser.add_argument(_flag(key), dest=key, metavar="V", default=None)


def _collect_run_config(args: argparse.Namespace, keys: list[str]) -> RunConfig:
    file_values = load_config_file(args.config) if getattr(args, "config", None) else {}
    overrides = {}
    for key in keys:
        raw = getattr(args, key, None)
        if raw is None:
            continue
        overrides[key] = raw if key == "variant" else parse_value(key, str(raw))
    return make_run_config(file_values, overrides)


def _cmd_generate_data(args: argparse.Namespace) -> int:
    cfg = PhantomConfig(
        image_size=args.size,
        vessels_min=args.vessels_min,
        vessels_max=args.vessels_max,
        width_min=args.width_min,
        width_max=args.width_max,
        contrast=args.contrast,
        noise_sigma=args.noise_sigma,
        distractors=args.distractors,
        seed=args.seed,
    )
    manifest = generate_dataset(
        Path(args.out), args.count, cfg, train_fraction=args.train_fraction
    )
    print(f"wrote {args.count} samples, manifest {manifest}")
    return 0


def _cmd_train(args: argparse.Namespace) -> int:
    run = _collect_run_config(args, _CONFIG_KEYS)
    run.model_config().validate()
    dataset = load_dataset(Path(args.data))
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "config.txt").write_text(config_text(run))
    model = TransCC(run.model_config(), seed=run.seed)
    trace = train_model(
        model,
        dataset,
        iterations=run.iterations,
        batch_size=run.batch_size,
        lr=run.lr,
        seed=run.seed,
        out_dir=out_dir,
        checkpoint_every=run.checkpoint_every,
    )
    if trace:
        print(f"trained {len(trace)} iterations, final loss {trace[-1][1]:.6f}")
    else:
        print("trained 0 iterations")
    print(f"checkpoint {out_dir / 'checkpoint_final.tcc'}")
    return 0


def _cmd_eval(args: argparse.Namespace) -> int:
    model = load_checkpoint(Path(args.checkpoint))
    dataset = load_dataset(Path(args.data))
    report = evaluate(model, dataset, split=args.split)
    print(report.format_table())
    out = Path(args.out)
    out.write_text("".join(line + "\n" for line in report.csv_lines()))
    print(f"csv {out}")
    return 0


def _cmd_predict(args: argparse.Namespace) -> int:
    model = load_checkpoint(Path(args.checkpoint))
    values, maxval = read_pgm(Path(args.image))
    image = (values / maxval).astype(np.float32)
    probs = model.eval()(Tensor(image[None, None])).data
    mask = probs[0, 1] > 0.5
    write_pgm(Path(args.out), mask.astype(np.uint8) * 255, 255)
    print(f"wrote {args.out} ({int(mask.sum())} foreground pixels)")
    return 0


def _cmd_gradcheck(args: argparse.Namespace) -> int:
    results = run_suite(seeds=tuple(range(args.seeds)), include_model=not args.skip_model)
    width = max(len(r.name) for r in results)
    failed = False
    for r in results:
        status = "ok" if r.ok else "FAIL"
        print(f"{r.name:<{width}}  max_rel_err {r.max_rel_err:.3e}  tol {r.tolerance:.0e}  {status}")
        failed |= not r.ok
    return 1 if failed else 0


def _cmd_count_params(args: argparse.Namespace) -> int:
    run = _collect_run_config(args, _CONFIG_KEYS)
    model = TransCC(run.model_config(), seed=run.seed)
    counts = count_params(model)
    width = max(len(name) for name in counts)
    for name, value in counts.items():
        print(f"{name:<{width}}  {value:>12,}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="transcc",
        description="Vessel-segmentation transformer: data, training, evaluation.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    gen = sub.add_parser("generate-data", help="write a synthetic phantom dataset")
    gen.add_argument("--out", required=True)
    gen.add_argument("--count", type=int, default=64)
    gen.add_argument("--seed", type=int, default=0)
    gen.add_argument("--size", type=int, default=224)
    gen.add_argument("--vessels-min", type=int, default=1)
    gen.add_argument("--vessels-max", type=int, default=4)
    gen.add_argument("--width-min", type=float, default=2.0)
    gen.add_argument("--width-max", type=float, default=6.0)
    gen.add_argument("--contrast", type=float, default=0.9)
    gen.add_argument("--noise-sigma", type=float, default=0.03)
    gen.add_argument("--distractors", type=int, default=3)
    gen.add_argument("--train-fraction", type=float, default=0.8)
    gen.set_defaults(func=_cmd_generate_data)

    train = sub.add_parser("train", help="train a variant on a dataset")
    train.add_argument("--data", required=True)
    train.add_argument("--out", required=True)
    train.add_argument("--config", default=None)
    _add_config_flags(train, _CONFIG_KEYS)
    train.set_defaults(func=_cmd_train)

    ev = sub.add_parser("eval", help="evaluate a checkpoint on a dataset split")
    ev.add_argument("--checkpoint", required=True)
    ev.add_argument("--data", required=True)
    ev.add_argument("--split", default="test")
    ev.add_argument("--out", default="metrics.csv")
    ev.set_defaults(func=_cmd_eval)

    pred = sub.add_parser("predict", help="segment one image with a checkpoint")
    pred.add_argument("--checkpoint", required=True)
    pred.add_argument("--image", required=True)
    pred.add_argument("--out", required=True)
    pred.set_defaults(func=_cmd_predict)

    grad = sub.add_parser("gradcheck", help="finite-difference gradient suite")
    grad.add_argument("--seeds", type=int, default=2)
    grad.add_argument("--skip-model", action="store_true")
    grad.set_defaults(func=_cmd_gradcheck)

    count = sub.add_parser("count-params", help="parameter accounting per module")
    count.add_argument("--config", default=None)
    _add_config_flags(count, _CONFIG_KEYS)
    count.set_defaults(func=_cmd_count_params)

    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except TransccError as err:
        print(f"error: {err}", file=sys.stderr)
        return 1
    except OSError as err:
        print(f"error: {err}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
