"""Command-line entry point: ``ecndnet {train,denoise,eval,bench,inspect}``.

Exit codes: 0 success, 1 usage error, 2 data or I/O error, 3 training diverged.
Progress goes to stderr; tables and results go to stdout.
"""

from __future__ import annotations

import argparse
import contextlib
import logging
import os
import sys
from pathlib import Path

from threadpoolctl import threadpool_limits

from . import checkpoint, data, evaluation, network, training
from .errors import CheckpointFormatError, ConfigError, DataError, TrainingDivergedError

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_DIVERGED = 0, 1, 2, 3

log = logging.getLogger("ecndnet")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.format_usage()}{self.prog}: error: {message}")


def _int_list(text: str) -> list[int]:
    try:
        return [int(t) for t in text.split(",") if t.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None


def _float_list(text: str) -> list[float]:
    try:
        return [float(t) for t in text.split(",") if t.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}") from None


def _default_threads() -> int:
    env = os.environ.get("ECNDNET_THREADS")
    if env:
        try:
            return max(1, int(env))
        except ValueError:
            pass
    return os.cpu_count() or 1


def build_parser() -> argparse.ArgumentParser:
    fmt = argparse.ArgumentDefaultsHelpFormatter
    parser = _Parser(prog="ecndnet", description="Train and run ECNDNet grayscale denoisers.", formatter_class=fmt)
    parser.add_argument("--threads", type=int, default=_default_threads(),
                        help="BLAS threads (env ECNDNET_THREADS); 1 guarantees bit-reproducible results")
    parser.add_argument("-v", "--verbose", action="store_true", help="debug logging")
    sub = parser.add_subparsers(dest="command", parser_class=_Parser)

    p = sub.add_parser("train", help="train a model on a directory of PNGs", formatter_class=fmt)
    p.add_argument("--data", required=True, help="directory of clean training PNGs")
    p.add_argument("--out", required=True, help="checkpoint path, rewritten after every epoch")
    p.add_argument("--sigma", type=float, default=25.0, help="noise level on the 0-255 scale")
    p.add_argument("--epochs", type=int, default=180)
    p.add_argument("--batch", type=int, default=128, help="mini-batch size")
    p.add_argument("--patch", type=int, default=40)
    p.add_argument("--stride", type=int, default=10)
    p.add_argument("--variant", choices=["crnet", "crrnet", "crrbnet", "ecndnet"], default="ecndnet")
    p.add_argument("--depth", type=int, default=17)
    p.add_argument("--width", type=int, default=64)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--lr-start", type=float, default=1e-3)
    p.add_argument("--lr-end", type=float, default=1e-8)
    p.add_argument("--resume", default=None, help="continue from this checkpoint")
    p.add_argument("--augment", action="store_true", help="random flips/rotations of training patches")

    p = sub.add_parser("denoise", help="denoise one PNG", formatter_class=fmt)
    p.add_argument("--model", required=True)
    p.add_argument("--in", dest="input", required=True)
    p.add_argument("--out", required=True)

    p = sub.add_parser("eval", help="average PSNR over a directory of clean PNGs", formatter_class=fmt)
    p.add_argument("--model", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--sigma", type=_float_list, default=[15.0, 25.0, 50.0], help="comma-separated noise levels")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--csv", default=None, help="also write per-image results here")

    p = sub.add_parser("bench", help="median denoising time per image size", formatter_class=fmt)
    p.add_argument("--model", required=True)
    p.add_argument("--sizes", type=_int_list, default=[256, 512, 1024], help="comma-separated square sizes")
    p.add_argument("--reps", type=int, default=10)
    p.add_argument("--seed", type=int, default=0)

    p = sub.add_parser("inspect", help="print the layer schedule of an architecture", formatter_class=fmt)
    p.add_argument("--variant", choices=["crnet", "crrnet", "crrbnet", "ecndnet"], default="ecndnet",
                   help="architecture variant")
    p.add_argument("--depth", type=int, default=17, help="number of convolution layers")
    p.add_argument("--width", type=int, default=64, help="channels per hidden layer")
    return parser


def cmd_inspect(args, out) -> int:
    spec = network.ArchitectureSpec.for_variant(args.variant, args.depth, args.width)
    rfs = network.receptive_fields(spec)
    print(f"{spec.variant.label}: depth {spec.depth}, width {spec.width}, "
          f"residual skip {'yes' if spec.variant.residual else 'no'}", file=out)
    print(f"{'layer':>5}  {'kind':<20} {'dilation':>8} {'in':>4} {'out':>4} {'rf':>4}", file=out)
    for k, (ls, rf) in enumerate(zip(spec.layers, rfs), start=1):
        print(f"{k:>5}  {ls.kind.label:<20} {ls.dilation:>8} {ls.in_channels:>4} {ls.out_channels:>4} {rf:>4}",
              file=out)
    print("receptive fields: " + " ".join(map(str, rfs)), file=out)
    print(f"parameters: {network.param_count(spec)}", file=out)
    return EXIT_OK


def cmd_train(args, out) -> int:
    if args.epochs < 1:
        raise UsageError("--epochs must be at least 1")
    if args.batch < 1:
        raise UsageError("--batch must be at least 1")
    images = [img for _, img in data.load_dataset(args.data)]

    start_epoch = 0
    if args.resume:
        ckpt = checkpoint.load_checkpoint(args.resume)
        model, state = ckpt.model, ckpt.adam or training.AdamState()
        config = ckpt.config or training.TrainConfig()
        config.epochs = args.epochs
        start_epoch = ckpt.epoch
        log.info("resuming %s from epoch %d", args.resume, start_epoch)
    else:
        config = training.TrainConfig(
            sigma=args.sigma, epochs=args.epochs, batch_size=args.batch, lr_start=args.lr_start,
            lr_end=args.lr_end, patch_size=args.patch, stride=args.stride, seed=args.seed, augment=args.augment,
        )
        model = network.build_variant(args.variant, args.depth, args.width, args.seed)
        state = training.AdamState()

    patches = data.build_patch_set(images, config.sigma, config.seed, config.patch_size, config.stride,
                                   config.augment)
    log.info("%d patches, %d parameters", len(patches), model.num_parameters())
    metrics = None
    for epoch in range(start_epoch, config.epochs):
        metrics = training.train_epoch(model, patches, state, config, epoch)
        print(f"epoch {epoch + 1}/{config.epochs} loss {metrics.mean_loss:.6f} lr {metrics.lr:.3e}",
              file=sys.stderr)
        checkpoint.save_checkpoint(args.out, model, state, config, epoch + 1)
    if metrics is not None:
        print(f"final_loss {metrics.mean_loss:.6f}", file=out)
    print(f"checkpoint {args.out}", file=out)
    return EXIT_OK


def cmd_denoise(args, out) -> int:
    model = checkpoint.load_checkpoint(args.model).model
    noisy = data.load_image(args.input)
    data.save_image(network.denoise(model, noisy), args.out)
    print(f"wrote {args.out}", file=out)
    return EXIT_OK


def cmd_eval(args, out) -> int:
    model = checkpoint.load_checkpoint(args.model).model
    reports = evaluation.evaluate_set(model, args.data, args.sigma, args.seed)
    print(evaluation.format_table(reports, f"{model.variant.label} on {args.data}"), file=out)
    if args.csv:
        try:
            Path(args.csv).write_text(evaluation.to_csv(reports))
        except OSError as exc:
            raise DataError(f"cannot write {args.csv}: {exc}") from exc
    return EXIT_OK


def cmd_bench(args, out) -> int:
    if args.reps < 3:
        raise UsageError("--reps must be at least 3")
    model = checkpoint.load_checkpoint(args.model).model
    result = evaluation.benchmark_runtime(model, [(s, s) for s in args.sizes], args.reps, args.seed)
    print(evaluation.format_bench(result), file=out)
    return EXIT_OK


COMMANDS = {"train": cmd_train, "denoise": cmd_denoise, "eval": cmd_eval, "bench": cmd_bench,
            "inspect": cmd_inspect}


def run(argv=None, out=None) -> int:
    out = out or sys.stdout
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if args.command is None:
            raise UsageError(parser.format_usage() + "ecndnet: error: a subcommand is required")
        if args.threads < 1:
            raise UsageError("--threads must be at least 1")
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return EXIT_USAGE
    except SystemExit as exc:  # --help
        return EXIT_OK if not exc.code else EXIT_USAGE

    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING, stream=sys.stderr,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        with threadpool_limits(limits=args.threads) if args.threads else contextlib.nullcontext():
            return COMMANDS[args.command](args, out)
    except UsageError as exc:
        print(f"ecndnet {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except ConfigError as exc:
        print(f"ecndnet {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except TrainingDivergedError as exc:
        print(f"ecndnet {args.command}: training diverged: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    except (DataError, CheckpointFormatError) as exc:
        print(f"ecndnet {args.command}: {exc}", file=sys.stderr)
        return EXIT_DATA


def main() -> None:
    sys.exit(run())
