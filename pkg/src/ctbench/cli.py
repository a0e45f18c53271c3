"""Command line pipeline: gen-dataset, train, infer, evaluate, report.

Common flags: --config FILE, --seed N, --threads N, --out PATH, and
--set section.key=value for any other config override.  Exit codes:
0 success, 1 usage error, 2 data or I/O error, 3 numerical failure.

Only the standard library is imported at module level; --threads pins
the usual thread-count environment variables before numpy loads, which
is what makes `--threads 1` runs bitwise reproducible.
"""

import argparse
import os
import sys

_THREAD_VARS = (
    "OMP_NUM_THREADS",
    "OPENBLAS_NUM_THREADS",
    "MKL_NUM_THREADS",
    "NUMEXPR_NUM_THREADS",
    "VECLIB_MAXIMUM_THREADS",
    "NUMBA_NUM_THREADS",
)


class _Parser(argparse.ArgumentParser):
    """argparse that exits 1 on usage errors instead of 2."""

    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        raise SystemExit(1)


def _build_parser():
    parser = _Parser(prog="ctbench",
                     description="CT reconstruction surrogate workbench")
    sub = parser.add_subparsers(dest="command", metavar="COMMAND")

    def common(p, out_help):
        p.add_argument("--config", metavar="FILE",
                       help="configuration file (defaults apply when absent)")
        p.add_argument("--seed", type=int, metavar="N",
                       help="override the corpus seed")
        p.add_argument("--threads", type=int, metavar="N",
                       help="pin BLAS/numba thread counts")
        p.add_argument("--set", action="append", default=[], metavar="S.K=V",
                       dest="overrides", help="override one config value")
        p.add_argument("--out", required=True, metavar="PATH", help=out_help)

    p = sub.add_parser("gen-dataset", help="simulate the FBP/MBIR corpus")
    common(p, "dataset output directory")

    p = sub.add_parser("train", help="fit one DL-MBIR network")
    common(p, "directory for weights and loss curve")
    p.add_argument("--manifest", required=True, metavar="FILE")
    p.add_argument("--z", required=True, type=int, choices=(1, 3, 5),
                   help="number of input slices")

    p = sub.add_parser("infer", help="apply trained weights to an FBP stack")
    common(p, "output slice-stack file")
    p.add_argument("--weights", required=True, metavar="FILE")
    p.add_argument("--volume", required=True, metavar="FILE",
                   help="FBP slice-stack container, HU")

    p = sub.add_parser("evaluate", help="metrics, NPS, difference images, plots")
    common(p, "evaluation output directory")
    p.add_argument("--manifest", required=True, metavar="FILE")
    p.add_argument("--weights", required=True, nargs="+", metavar="FILE",
                   help="one weight file per trained Z")

    p = sub.add_parser("report", help="render one summary page from evaluate output")
    common(p, "directory holding the evaluate outputs")
    return parser


def _pin_threads(n):
    for var in _THREAD_VARS:
        os.environ[var] = str(n)


def _config_overrides(args):
    overrides = {}
    for item in args.overrides:
        key, sep, value = item.partition("=")
        section, dot, name = key.partition(".")
        if not sep or not dot or not section or not name:
            print(f"ctbench: error: bad --set {item!r}, expected section.key=value",
                  file=sys.stderr)
            raise SystemExit(1)
        overrides[(section.strip(), name.strip())] = value.strip()
    if args.seed is not None:
        overrides[("corpus", "seed")] = str(args.seed)
    return overrides


def _load_config(args):
    from .config import load_config
    if args.config is not None and not os.path.exists(args.config):
        raise OSError(f"config file not found: {args.config}")
    return load_config(args.config, _config_overrides(args))


def _cmd_gen_dataset(args):
    from .dataset import gen_dataset
    cfg = _load_config(args)
    manifest = gen_dataset(cfg, args.out)
    print(f"wrote {len(manifest.volumes)} volumes under {manifest.root}")
    return 0


def _cmd_train(args):
    from .dataset import (_derive_seed, assemble_pairs, read_manifest,
                          validate_manifest)
    from .nnet import save_weights, train
    cfg = _load_config(args)
    manifest = read_manifest(args.manifest)
    validate_manifest(manifest)
    pairs = assemble_pairs(manifest, args.z, split="train")
    seed = _derive_seed(cfg.getint("corpus", "seed"), 4, args.z)
    params, curve = train(pairs, cfg.net_spec(args.z), cfg.train_config(seed))
    os.makedirs(args.out, exist_ok=True)
    weights_path = os.path.join(args.out, f"weights_z{args.z}.ctw")
    save_weights(weights_path, params)
    loss_path = os.path.join(args.out, f"loss_z{args.z}.csv")
    with open(loss_path, "w") as fh:
        fh.write("epoch,loss\n")
        for epoch, loss in enumerate(curve):
            fh.write(f"{epoch},{float(loss)!r}\n")
    print(f"trained Z={args.z} on {len(pairs.ids)} pairs, "
          f"final loss {curve[-1]:.6g}; wrote {weights_path}")
    return 0


def _cmd_infer(args):
    from .core import SliceStack, read_container, write_container
    from .nnet import infer_volume, load_weights
    params = load_weights(args.weights)
    stack = read_container(args.volume)
    if not isinstance(stack, SliceStack):
        raise ValueError(f"{args.volume} is not a slice stack")
    factor = 2 ** params.spec.depth
    h, w = stack.slices[0].height, stack.slices[0].width
    if h % factor or w % factor:
        raise ValueError(
            f"volume is {w}x{h} but the network needs multiples of {factor}")
    out = infer_volume(params, stack)
    parent = os.path.dirname(os.path.abspath(args.out))
    os.makedirs(parent, exist_ok=True)
    write_container(args.out, out)
    print(f"wrote {out.n_slices} slices to {args.out}")
    return 0


def _cmd_evaluate(args):
    from .dataset import read_manifest, validate_manifest
    from .evaluate import evaluate
    cfg = _load_config(args)
    manifest = read_manifest(args.manifest)
    validate_manifest(manifest)
    report, _, distances = evaluate(manifest, args.weights, args.out, cfg)
    for method, (psnr_db, _, roi_std) in report.aggregate().items():
        print(f"{method}: mean PSNR {psnr_db:.2f} dB, ROI std {roi_std:.2f} HU")
    for method, dist in distances.items():
        print(f"{method}: NPS distance to MBIR {dist:.4g}")
    return 0


def _cmd_report(args):
    from .evaluate import report_page
    path = report_page(args.out)
    print(f"wrote {path}")
    return 0


_COMMANDS = {
    "gen-dataset": _cmd_gen_dataset,
    "train": _cmd_train,
    "infer": _cmd_infer,
    "evaluate": _cmd_evaluate,
    "report": _cmd_report,
}


def _exit_code(exc):
    from .core import ContainerError, NumericalError
    seen = set()
    node = exc
    while node is not None and id(node) not in seen:
        if isinstance(node, NumericalError):
            return 3
        seen.add(id(node))
        node = node.__cause__ or node.__context__
    if isinstance(exc, (ContainerError, ValueError, TypeError, KeyError, OSError,
                        RuntimeError)):
        return 2
    raise exc


def main(argv=None):
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    if args.command is None:
        parser.print_usage(sys.stderr)
        print("ctbench: error: a command is required", file=sys.stderr)
        return 1
    if args.threads is not None:
        if args.threads < 1:
            print("ctbench: error: --threads must be >= 1", file=sys.stderr)
            return 1
        _pin_threads(args.threads)
    try:
        return _COMMANDS[args.command](args)
    except SystemExit as exc:
        return int(exc.code or 0)
    except Exception as exc:
        code = _exit_code(exc)
        print(f"ctbench: error: {exc}", file=sys.stderr)
        return code


if __name__ == "__main__":
    sys.exit(main())
