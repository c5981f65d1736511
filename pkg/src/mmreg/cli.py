"""Command-line entry point.

Subcommands cover the whole workflow: ``synth`` makes phantom datasets
with known ground truth, ``augment`` expands a dataset with elastic
deformations, ``train`` fits a registration network, ``register`` maps
one pair (with a trained model or by per-pair optimisation),
``evaluate`` scores predicted fields against a dataset, and ``report``
re-exports a saved report as CSV.

Exit codes: 0 on success, 1 for usage errors (bad flags or parameter
values), 2 for data or computation failures (unreadable files, missing
inputs, diverging optimisation).
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from . import pipeline, synthdata
from .augment import build_augmented_set
from .dataio import load_dataset, save_dataset
from .errors import DataError, NanLossError, ParameterError
from .evalstats import EvalConfig, EvalReport, evaluate_pairs
from .field import load_ddf, save_ddf, upsample_field, warp_bilinear
from .imagecore import (
    LUMA_WEIGHTS,
    load_pgm,
    load_png,
    resize_bilinear,
    save_pgm,
    to_gray_saturation,
    to_gray_weighted,
)
from .losses import LossConfig
from .synthdata import Artifact

_THREAD_LIMITER = None  # keeps threadpoolctl limits alive for the process


class _Parser(argparse.ArgumentParser):
    # usage problems exit 1, not argparse's default 2
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(1, f"{self.prog}: error: {message}\n")


def _parse_mix(text: str, what: str) -> list[tuple[str, float]]:
    """low:medium:high weight triple, e.g. '40:40:20'."""
    parts = text.split(":")
    if len(parts) != 3:
        raise ParameterError(f"{what} must be three colon-separated weights (low:medium:high), got {text!r}")
    try:
        weights = [float(p) for p in parts]
    except ValueError:
        raise ParameterError(f"{what}: not all numbers in {text!r}")
    return [(name, w) for name, w in zip(("low", "medium", "high"), weights) if w > 0.0]


def _parse_ints(text: str, n: int, what: str) -> tuple[int, ...]:
    parts = text.split(",")
    if len(parts) != n:
        raise ParameterError(f"{what} needs {n} comma-separated integers, got {text!r}")
    try:
        return tuple(int(p) for p in parts)
    except ValueError:
        raise ParameterError(f"{what}: not all integers in {text!r}")


def _parse_lr(text: str) -> float | tuple[float, float, float]:
    parts = text.split(",")
    try:
        values = tuple(float(p) for p in parts)
    except ValueError:
        raise ParameterError(f"--lr: not all numbers in {text!r}")
    if len(values) == 1:
        return values[0]
    if len(values) != 3:
        raise ParameterError(f"--lr needs one value or three comma-separated values, got {text!r}")
    return values


def _parse_size(text: str) -> tuple[int, int]:
    w, sep, h = text.lower().partition("x")
    if not sep:
        raise ParameterError(f"size must look like WIDTHxHEIGHT, got {text!r}")
    try:
        return int(w), int(h)
    except ValueError:
        raise ParameterError(f"size: not integers in {text!r}")


def _parse_binarize(text: str) -> tuple[str, float | None]:
    if text == "otsu":
        return "otsu", None
    if text.startswith("fixed:"):
        try:
            return "fixed", float(text[len("fixed:") :])
        except ValueError:
            raise ParameterError(f"bad fixed threshold in {text!r}")
    raise ParameterError(f"--binarize must be 'otsu' or 'fixed:T', got {text!r}")


def _load_input_image(path: str, gray_weights: str | None, saturation: bool):
    """PGM loads as-is; PNG converts to gray by luma, custom weights, or saturation."""
    if str(path).lower().endswith(".pgm"):
        if gray_weights is not None or saturation:
            raise ParameterError(f"{path}: gray-conversion options apply only to PNG inputs")
        return load_pgm(path)
    rgb = load_png(path)
    if saturation:
        return to_gray_saturation(rgb)
    if gray_weights is None:
        return to_gray_weighted(rgb, LUMA_WEIGHTS)
    parts = gray_weights.split(",")
    if len(parts) != 3:
        raise ParameterError(f"--gray-weights needs three comma-separated numbers, got {gray_weights!r}")
    try:
        weights = tuple(float(p) for p in parts)
    except ValueError:
        raise ParameterError(f"--gray-weights: not numbers in {gray_weights!r}")
    return to_gray_weighted(rgb, weights)


# default artifact geometry per kind: (count, size in pixels)
_ARTIFACT_DEFAULTS = {"none": (0, 0.0), "tears": (2, 3.0), "holes": (3, 5.0)}


def _cmd_synth(args) -> int:
    levels = synthdata.DEFAULT_BENCHMARK_MIX if args.levels is None else _parse_mix(args.levels, "--levels")
    width, height = _parse_size(args.size)
    count, size = _ARTIFACT_DEFAULTS[args.artifacts]
    records = synthdata.generate_benchmark_set(
        n=args.n,
        levels=levels,
        seed=args.seed,
        width=width,
        height=height,
        artifact=Artifact(kind=args.artifacts, count=count, size=size),
        out_dir=args.out,
    )
    print(f"wrote {len(records)} phantom pairs to {args.out}")
    return 0


def _cmd_augment(args) -> int:
    records = load_dataset(args.input)
    levels = [("low", 1.0), ("medium", 1.0), ("high", 1.0)] if args.levels is None \
        else _parse_mix(args.levels, "--levels")
    out = build_augmented_set(records, args.per_pair, levels, args.seed, mode=args.mode)
    if args.include_originals:
        out = records + out
    save_dataset(args.out, out)
    print(f"wrote {len(out)} records to {args.out}")
    return 0


def _cmd_train(args) -> int:
    records = load_dataset(args.data)
    try:
        with open(args.config, "r", encoding="utf-8") as f:
            doc = json.load(f)
    except json.JSONDecodeError as exc:
        raise DataError(f"{args.config}: not valid JSON ({exc})")
    if not isinstance(doc, dict):
        raise DataError(f"{args.config}: expected a JSON object")
    if doc.get("split") is None:
        # no split: train and validate on the whole dataset
        doc = {**doc, "split": [len(records), 0, 0]}
        train_recs = val_recs = records
        cfg = pipeline.TrainConfig.from_json_dict(doc)
    else:
        cfg = pipeline.TrainConfig.from_json_dict(doc)
        train_recs, val_recs, _ = pipeline.split_dataset(records, cfg)
    init = None
    if args.resume is not None:
        params, state = pipeline.load_checkpoint(args.resume)
        if state is None:
            raise DataError(f"{args.resume}: checkpoint has no optimiser state, cannot resume")
        init = (params, state)
    train_fn = pipeline.train_unsupervised if cfg.mode == "unsupervised" else pipeline.train_supervised
    result = train_fn(train_recs, val_recs, cfg, init=init, start_epoch=args.start_epoch)
    pipeline.save_checkpoint(args.out, result.params, result.state)
    if args.log is not None:
        result.log.to_csv(args.log)
    last = result.log.epochs[-1] if result.log.epochs else result.log.baseline
    print(
        f"saved model to {args.out}; epoch {last.epoch}: val_loss {last.val_loss:.5f}, "
        f"val_dice_median {last.val_dice_median:.4f}, val_mi_median {last.val_mi_median:.4f}"
    )
    return 0


def _cmd_register(args) -> int:
    if (args.model is None) == (not args.direct):
        raise ParameterError("exactly one of --model or --direct is required")
    fixed = _load_input_image(args.fixed, args.gray_weights, args.saturation)
    moving = _load_input_image(args.moving, args.gray_weights, args.saturation)
    if fixed.shape != moving.shape:
        raise ParameterError(f"fixed {fixed.shape} and moving {moving.shape} have different sizes")
    orig_moving = moving
    if args.resize is not None:
        w, h = _parse_size(args.resize)
        fixed = resize_bilinear(fixed, w, h)
        moving = resize_bilinear(moving, w, h)
    if args.model is not None:
        params, _ = pipeline.load_checkpoint(args.model)
        fld = pipeline.register_with_model(params, fixed, moving)
    else:
        cfg = pipeline.DirectConfig(
            loss=LossConfig(reg_weight=args.reg_weight, bins=args.bins, parzen_width=args.parzen_width),
            lr=_parse_lr(args.lr),
            iterations=_parse_ints(args.iterations, 3, "--iterations"),
        )
        fld, losses = pipeline.register_direct(fixed, moving, cfg)
        logging.getLogger(__name__).info(
            "direct optimisation: %d iterations, loss %.5f -> %.5f", len(losses), losses[0], losses[-1]
        )
    if args.full_res and fld.shape[:2] != orig_moving.shape:
        h0, w0 = orig_moving.shape
        fld = upsample_field(fld, w0, h0)
        warped = warp_bilinear(orig_moving, fld)
    else:
        warped = warp_bilinear(moving, fld)
    save_ddf(fld, args.out)
    if args.warped is not None:
        save_pgm(warped, args.warped)
    print(f"wrote field to {args.out}" + (f" and warped image to {args.warped}" if args.warped else ""))
    return 0


def _cmd_evaluate(args) -> int:
    records = load_dataset(args.pairs)
    fields = []
    for rec in records:
        path = Path(args.fields) / f"{rec.id}.ddf"
        if not path.is_file():
            raise DataError(f"no field for pair {rec.id}: expected {path}")
        fields.append(load_ddf(path))
    method, threshold = _parse_binarize(args.binarize)
    report = evaluate_pairs(records, fields, EvalConfig(bins=args.bins, method=method, threshold=threshold))
    report.to_csv(args.out)
    if args.json is not None:
        report.to_json(args.json)
    agg = report.aggregates
    print(
        f"evaluated {len(records)} pairs: dice median {agg['dice_before']['median']:.4f} -> "
        f"{agg['dice_after']['median']:.4f}, mi median {agg['mi_before']['median']:.4f} -> "
        f"{agg['mi_after']['median']:.4f}; report at {args.out}"
    )
    return 0


def _cmd_report(args) -> int:
    report = EvalReport.from_json(args.input)
    wrote = []
    if args.violin is not None:
        report.violin_csv(args.violin)
        wrote.append(args.violin)
    if args.csv is not None:
        report.to_csv(args.csv)
        wrote.append(args.csv)
    if not wrote:
        raise ParameterError("nothing to do: pass --violin and/or --csv")
    for family, test in report.tests.items():
        print(f"{family}: U {test['u']:.1f}, p {test['p']:.3g} ({test['method']})")
    print("wrote " + ", ".join(str(w) for w in wrote))
    return 0


def _apply_threads(n: int | None) -> None:
    if n is None:
        return
    global _THREAD_LIMITER
    try:
        from threadpoolctl import threadpool_limits

        _THREAD_LIMITER = threadpool_limits(limits=n)
    except ImportError:
        logging.getLogger(__name__).warning("threadpoolctl unavailable, --threads ignored")


def build_parser() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    common.add_argument("--threads", type=int, default=None, help="cap BLAS/OpenMP worker threads")
    common.add_argument("--verbose", action="store_true", help="log progress to stderr")

    parser = _Parser(prog="mmreg", description=__doc__.split("\n\n")[1])
    sub = parser.add_subparsers(dest="command", required=True, metavar="COMMAND")

    p = sub.add_parser("synth", parents=[common], help="generate a phantom dataset with ground-truth fields")
    p.add_argument("--n", type=int, default=40, help="number of pairs (default 40)")
    p.add_argument("--size", default="128x96", help="image size WIDTHxHEIGHT (default 128x96)")
    p.add_argument("--levels", default=None, help="low:medium:high mix weights, e.g. 40:40:20")
    p.add_argument("--out", required=True, help="output dataset directory")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--artifacts", choices=("none", "tears", "holes"), default="none")
    p.set_defaults(func=_cmd_synth)

    p = sub.add_parser("augment", parents=[common], help="expand a dataset with elastic deformations")
    p.add_argument("--in", dest="input", required=True, help="input dataset directory")
    p.add_argument("--per-pair", type=int, default=4, help="augmented records per input pair")
    p.add_argument("--mode", choices=("unsupervised", "supervised"), default="unsupervised")
    p.add_argument("--levels", default=None, help="low:medium:high mix weights, e.g. 1:1:1")
    p.add_argument("--out", required=True, help="output dataset directory")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--include-originals", action="store_true", help="copy the input pairs into the output too")
    p.set_defaults(func=_cmd_augment)

    p = sub.add_parser("train", parents=[common], help="train a registration network on a dataset")
    p.add_argument("--config", required=True, help="training config JSON (mode, epochs, lr, split, ...)")
    p.add_argument("--data", required=True, help="dataset directory")
    p.add_argument("--out", required=True, help="model checkpoint to write (.netp)")
    p.add_argument("--log", default=None, help="training-log CSV to write")
    p.add_argument("--resume", default=None, help="checkpoint to continue from")
    p.add_argument("--start-epoch", type=int, default=0, help="first epoch index when resuming")
    p.set_defaults(func=_cmd_train)

    p = sub.add_parser("register", parents=[common], help="register one fixed/moving pair")
    p.add_argument("--fixed", required=True, help="fixed image (PNG or PGM)")
    p.add_argument("--moving", required=True, help="moving image (PNG or PGM)")
    p.add_argument("--out", required=True, help="displacement field to write (.ddf)")
    p.add_argument("--warped", default=None, help="optional warped moving image (.pgm)")
    p.add_argument("--model", default=None, help="trained checkpoint (.netp)")
    p.add_argument("--direct", action="store_true", help="optimise this pair from scratch instead")
    p.add_argument("--gray-weights", default=None, help="PNG gray conversion weights r,g,b")
    p.add_argument("--saturation", action="store_true", help="use the saturation channel for PNG inputs")
    p.add_argument("--resize", default=None, help="process at WIDTHxHEIGHT")
    p.add_argument("--full-res", action="store_true", help="upsample the field back to the input size")
    p.add_argument("--iterations", default="60,40,300", help="direct mode: per-stage iteration counts")
    p.add_argument("--lr", default="0.1,0.03,0.005", help="direct mode: step size, one value or three per-stage values")
    p.add_argument("--reg-weight", type=float, default=7.0)
    p.add_argument("--bins", type=int, default=32)
    p.add_argument("--parzen-width", type=float, default=0.75)
    p.set_defaults(func=_cmd_register)

    p = sub.add_parser("evaluate", parents=[common], help="score predicted fields against a dataset")
    p.add_argument("--pairs", required=True, help="dataset directory")
    p.add_argument("--fields", required=True, help="directory of <pair-id>.ddf predictions")
    p.add_argument("--bins", type=int, default=32)
    p.add_argument("--binarize", default="otsu", help="'otsu' or 'fixed:T'")
    p.add_argument("--out", required=True, help="CSV report to write")
    p.add_argument("--json", default=None, help="optional JSON report (reloadable by 'report')")
    p.set_defaults(func=_cmd_evaluate)

    p = sub.add_parser("report", parents=[common], help="re-export a saved JSON report")
    p.add_argument("--in", dest="input", required=True, help="JSON report from 'evaluate'")
    p.add_argument("--violin", default=None, help="per-pair metric CSV for distribution plots")
    p.add_argument("--csv", default=None, help="aggregate CSV")
    p.set_defaults(func=_cmd_report)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return 0 if exc.code in (0, None) else int(exc.code)
    logging.basicConfig(
        level=logging.INFO if args.verbose else logging.WARNING,
        format="%(levelname)s %(name)s: %(message)s",
    )
    _apply_threads(args.threads)
    try:
        return args.func(args)
    except ParameterError as exc:
        print(f"mmreg: error: {exc}", file=sys.stderr)
        return 1
    except (DataError, NanLossError, OSError) as exc:
        print(f"mmreg: error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
