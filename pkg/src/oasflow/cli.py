"""Command-line entry point: ``oasflow <subcommand> ...``.

Exit status is 0 on success, 1 on a usage error and 2 when the command itself
fails; failures print a one-line message to stderr.
"""

from __future__ import annotations

import argparse
import contextlib
import logging
import os
import sys
from pathlib import Path


EXIT_OK, EXIT_USAGE, EXIT_FAILURE = 0, 1, 2


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.format_usage()}{self.prog}: error: {message}")


def _thread_limit():
    """Cap BLAS threads when OASFLOW_THREADS is set."""
    value = os.environ.get("OASFLOW_THREADS")
    if not value:
        return contextlib.nullcontext()
    try:
        n = int(value)
    except ValueError:
        raise UsageError(f"OASFLOW_THREADS must be a positive integer, got {value!r}") from None
    if n < 1:
        raise UsageError(f"OASFLOW_THREADS must be a positive integer, got {value!r}")
    from threadpoolctl import threadpool_limits

    return threadpool_limits(limits=n)


# --------------------------------------------------------------------------- #
# subcommands


def cmd_train_toy(args) -> int:
    from .io.checkpoint import save_checkpoint
    from .training.trainer import TrainConfig, train_toy

    cfg = TrainConfig(steps=args.steps, seed=args.seed, batch=args.batch, lr=args.lr,
                      correlation=args.corr, occlusion=not args.no_occlusion,
                      val_size=args.val_size, val_every=args.val_every)
    with contextlib.ExitStack() as stack:
        sink = stack.enter_context(open(args.metrics, "w")) if args.metrics else sys.stdout
        report = train_toy(cfg, metrics_out=sink)
    if args.out:
        save_checkpoint(args.out, report.net.params)
    print(f"final val_epe {report.final_val_epe:.4f} (zero-flow baseline {report.zero_flow_epe:.4f}, "
          f"ratio {report.final_val_epe / report.zero_flow_epe:.3f}); occ correlation {report.occ_corr:.3f}",
          file=sys.stderr)
    return EXIT_OK


def cmd_infer(args) -> int:
    from .io.checkpoint import load_checkpoint
    from .io.flo import write_flo
    from .io.images import read_image
    from .network import OASNet, config_from_params
    from .tensor import ShapeError, Tensor

    params = load_checkpoint(args.ckpt)
    net = OASNet(config_from_params(params, args.corr), params=params)
    im1, im2 = read_image(args.im1), read_image(args.im2)
    if im1.shape != im2.shape:
        raise ShapeError(f"images differ in size: {im1.shape[2:]} vs {im2.shape[2:]}")
    est = net.estimate_flow(Tensor(im1), Tensor(im2))
    write_flo(args.out, est.flow.data)
    return EXIT_OK


def cmd_eval(args) -> int:
    from .io.flo import read_flo
    from .training.metrics import epe

    print(f"{epe(read_flo(args.pred), read_flo(args.gt)):.6f}")
    return EXIT_OK


def cmd_viz(args) -> int:
    from .io.flo import read_flo
    from .io.images import write_image
    from .io.viz import flow_to_color

    write_image(args.out, flow_to_color(read_flo(args.flow), max_mag=args.max_mag))
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    from .gradcheck import model_check, op_checks

    results = op_checks(args.seed) + [model_check(args.seed)]
    for r in results:
        skipped = f", {r.skipped} kink-straddling skipped" if r.skipped else ""
        print(f"{'ok  ' if r.passed else 'FAIL'} {r.name:28s} max rel-err {r.max_rel_err:.3e} "
              f"(limit {r.threshold:g}; {r.checked} elements{skipped})")
    worst = max(r.max_rel_err for r in results)
    print(f"max rel-err {worst:.3e}")
    return EXIT_OK if all(r.passed for r in results) else EXIT_FAILURE


def cmd_ablate(args) -> int:
    from .training.ablation import ghost_prone_config, run_ablation

    base = ghost_prone_config(steps=args.steps, batch=args.batch, val_size=args.val_size)
    report = run_ablation(base, seeds=range(1, args.seeds + 1), log=lambda msg: print(msg, file=sys.stderr))
    print(report.format_table())
    for name, ok in report.directional_checks().items():
        print(f"{'ok  ' if ok else 'FAIL'} {name}")
    if args.csv:
        Path(args.csv).write_text(report.to_csv())
    return EXIT_OK


def cmd_demo_ghosting(args) -> int:
    from .demo import NCC_DUPLICATE, run_ghosting_demo, write_ghosting_images

    result = run_ghosting_demo()
    for path in write_ghosting_images(result, args.out, ext=args.ext):
        print(path)
    print(f"duplicate patch NCC {result.duplicate_ncc:.3f}, frame-1 reference NCC {result.reference_ncc:.3f}")
    print(f"best match at d=0: warping {result.zero_offset_warping:.3f}, sampling {result.zero_offset_sampling:.3f}")
    if args.self_test:
        if not result.duplicated:
            print(f"self-test failed: warped target shows no duplicated patch (NCC <= {NCC_DUPLICATE})",
                  file=sys.stderr)
            return EXIT_FAILURE
        print("self-test passed: warped target contains a duplicated patch")
    return EXIT_OK


def cmd_params(args) -> int:
    from .network import NetConfig, closed_form_count, count_parameters, init_params, parameter_ledger

    cfg = NetConfig(correlation=args.corr, occlusion=not args.no_occlusion, share_decoder=args.share_decoder)
    params = init_params(cfg)
    for name, shape, size in parameter_ledger(params):
        print(f"{name:28s} {'x'.join(map(str, shape)):>16s} {size:>10d}")
    print(f"total {count_parameters(params)} (closed form {closed_form_count(cfg)})")
    return EXIT_OK


# --------------------------------------------------------------------------- #


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="oasflow", description="Occlusion-aware coarse-to-fine optical flow toolkit.")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def corr_flag(p):
        p.add_argument("--corr", choices=("sampling", "warping"), default="sampling",
                       help="cost volume construction (default: sampling)")

    p = sub.add_parser("train-toy", help="train on synthetic scenes")
    p.add_argument("--steps", type=int, default=2000)
    p.add_argument("--seed", type=int, default=1)
    p.add_argument("--batch", type=int, default=TRAIN_DEFAULTS["batch"])
    p.add_argument("--lr", type=float, default=TRAIN_DEFAULTS["lr"])
    p.add_argument("--val-size", type=int, default=TRAIN_DEFAULTS["val_size"])
    p.add_argument("--val-every", type=int, default=TRAIN_DEFAULTS["val_every"])
    p.add_argument("--no-occlusion", action="store_true", help="bypass the occlusion-aware module")
    p.add_argument("--out", help="checkpoint path (.oasn)")
    p.add_argument("--metrics", help="write JSON-line metrics here instead of stdout")
    corr_flag(p)
    p.set_defaults(func=cmd_train_toy)

    p = sub.add_parser("infer", help="estimate flow between two images")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--im1", required=True)
    p.add_argument("--im2", required=True)
    p.add_argument("--out", required=True, help="output .flo")
    corr_flag(p)
    p.set_defaults(func=cmd_infer)

    p = sub.add_parser("eval", help="mean end-point error between two .flo files")
    p.add_argument("--pred", required=True)
    p.add_argument("--gt", required=True)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("viz", help="colour-code a .flo file")
    p.add_argument("--flow", required=True)
    p.add_argument("--out", required=True, help=".png or .ppm")
    p.add_argument("--max-mag", type=float, default=None)
    p.set_defaults(func=cmd_viz)

    p = sub.add_parser("gradcheck", help="finite-difference check of every adjoint and the full loss")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("ablate", help="train the correlation x occlusion grid on ghost-prone scenes")
    p.add_argument("--steps", type=int, default=1500)
    p.add_argument("--seeds", type=int, default=5)
    p.add_argument("--batch", type=int, default=TRAIN_DEFAULTS["batch"])
    p.add_argument("--val-size", type=int, default=TRAIN_DEFAULTS["val_size"])
    p.add_argument("--csv", help="also write the per-seed results as CSV")
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("demo-ghosting", help="render the warping ghost on a built-in scene")
    p.add_argument("--out", default="ghosting")
    p.add_argument("--ext", choices=(".ppm", ".png"), default=".ppm")
    p.add_argument("--self-test", action="store_true", help="fail unless the warped target shows a duplicate")
    p.set_defaults(func=cmd_demo_ghosting)

    p = sub.add_parser("params", help="print the parameter ledger")
    p.add_argument("--no-occlusion", action="store_true")
    p.add_argument("--share-decoder", action="store_true")
    corr_flag(p)
    p.set_defaults(func=cmd_params)
    return parser


def _train_defaults() -> dict:
    from .training.trainer import TrainConfig

    cfg = TrainConfig()
    return {"batch": cfg.batch, "lr": cfg.lr, "val_size": cfg.val_size, "val_every": cfg.val_every}


TRAIN_DEFAULTS = _train_defaults()


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return EXIT_USAGE
    except SystemExit as exc:  # --help
        return int(exc.code or 0)
    if args.verbose:
        logging.basicConfig(level=logging.INFO, stream=sys.stderr, format="%(message)s")
    try:
        with _thread_limit():
            return args.func(args)
    except UsageError as exc:
        print(f"oasflow: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (OSError, ValueError, KeyError, RuntimeError) as exc:
        print(f"oasflow {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_FAILURE


if __name__ == "__main__":
    sys.exit(main())
