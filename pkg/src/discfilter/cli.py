"""Command line: ``discfilter {generate,fit,eval,sweep,long,gradcheck}``.

Every subcommand reads an optional config file (``key = value`` lines) and
``--set key=value`` overrides. Exit codes: 0 success, 1 invalid input,
2 numerical failure, 3 file error. ``DISCFILTER_THREADS`` caps the BLAS
thread count.
"""

import os

_THREADS = os.environ.get("DISCFILTER_THREADS")
if _THREADS:
    # must happen before numpy loads its BLAS
    for _var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
        os.environ[_var] = _THREADS

import argparse  # noqa: E402
import logging  # noqa: E402
import sys  # noqa: E402
from pathlib import Path  # noqa: E402

import numpy as np  # noqa: E402

from . import io  # noqa: E402
from .adjoint import gradcheck  # noqa: E402
from .dns import SolverError, generate_dataset  # noqa: E402
from .evaluation import (  # noqa: E402
    RouteFailure,
    convergence_sweep,
    error_curve,
    fit_cell,
    time_averaged_error,
)
from .filterbank import build_filter_matrix  # noqa: E402
from .inference import Route, SingularSystemError, TrainingDivergedError  # noqa: E402
from .stencils import make_grid  # noqa: E402


EXIT_OK, EXIT_INVALID, EXIT_NUMERICAL, EXIT_IO = 0, 1, 2, 3

IDENTITY_FILTER = "none"  # W = I, only for M = N


def load_config(args) -> io.ExperimentConfig:
    overrides = {}
    for item in args.set or []:
        key, sep, value = item.partition("=")
        if not sep:
            raise io.ConfigError(f"--set expects key=value, got {item!r}")
        overrides[key.strip()] = value.strip()
    text = Path(args.config).read_text() if args.config else ""
    return io.ExperimentConfig.from_text(text, args.config or "<defaults>", overrides)


def filter_for(cfg, name, M):
    """Filter matrix (or None for the identity filter) mapping N to M points."""
    if name == IDENTITY_FILTER:
        if M != cfg.N:
            raise io.ConfigError("the identity filter needs M = N")
        return None
    return build_filter_matrix(cfg.filter_spec(name), make_grid(M), make_grid(cfg.N))


def _filter_weights(cfg, name, M):
    W = filter_for(cfg, name, M)
    return np.eye(cfg.N) if W is None else W


def _check_M(ds, M, label):
    if ds.M != M:
        raise io.ConfigError(f"{label}: dataset has M = {ds.M}, config expects {M}")


# Subcommands -----------------------------------------------------------------

def cmd_generate(args, cfg):
    out = Path(args.out or cfg.output)
    M, name = cfg.M[0], cfg.filters[0]
    W = filter_for(cfg, name, M)
    for ds_name in args.dataset:
        n_IC, n_t, T = cfg.dataset_size(ds_name)
        ds = generate_dataset(ds_name, make_grid(cfg.N), W, cfg.ic_spec(), cfg.solver(),
                              n_IC=n_IC, n_t=n_t, T=T, keep_fine=not args.filtered_only)
        folder = out / ds_name
        io.save_dataset(folder, ds, {"filter": name, "h0": cfg.h0, "T": T,
                                     "max_frequency": cfg.max_frequency,
                                     "noise": cfg.noise, "abs_tol": cfg.abs_tol,
                                     "rel_tol": cfg.rel_tol})
        cfg.save(folder / "config.txt")
        print(f"{ds_name}: Ubar {ds.Ubar.shape[0]} x {ds.Ubar.shape[1]} -> {folder}")
    return EXIT_OK


def cmd_fit(args, cfg):
    route = Route(args.route)
    M, name = cfg.M[0], cfg.filters[0]
    need_fine = route is Route.INTRUSIVE
    train = io.load_dataset(args.train, need_fine=need_fine)
    valid = io.load_dataset(args.valid)
    _check_M(train, M, args.train)
    _check_M(valid, M, args.valid)
    if need_fine and train.U.shape[0] != cfg.N:
        raise io.ConfigError(f"{args.train}: fine data has N = {train.U.shape[0]}, "
                             f"config expects {cfg.N}")
    W = _filter_weights(cfg, name, M) if need_fine else None
    found = fit_cell(route, train, valid, W, make_grid(cfg.N), make_grid(M),
                     cfg.lambda_grid, cfg.eval_config(), cfg.optimizer(),
                     cfg.embedded_pairs)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    io.write_matrix(out, found.best.matrix)
    io.write_grid_csv(out.with_suffix(".csv"), found.table)
    io.write_manifest(out.with_suffix(".txt"),
                      {"route": route.value, "M": M, "filter": name,
                       "train": args.train, "valid": args.valid,
                       **{k: v for k, v in found.best.hyperparams.items()
                          if np.isscalar(v)}})
    print(f"{route.value}: valid error {found.best.hyperparams.get('valid_error'):.6g} "
          f"-> {out}")
    return EXIT_OK


def cmd_eval(args, cfg):
    op = io.read_matrix(args.operator)
    ds = io.load_dataset(args.dataset)
    if op.shape != (ds.M, ds.M):
        raise io.ConfigError(f"operator is {op.shape[0]} x {op.shape[1]}, dataset has "
                             f"M = {ds.M}")
    curve = error_curve(op, ds, cfg.eval_config(), route=Path(args.operator).stem)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    io.write_curve_csv(out, curve)
    if args.svg:
        io.write_svg(args.svg, {curve.route: (curve.times, curve.errors)},
                     xlabel="t", ylabel="relative error", title=ds.name)
    print(f"time-averaged error {time_averaged_error(curve):.6g} -> {out}")
    return EXIT_OK


def cmd_sweep(args, cfg):
    train = io.load_dataset(args.train, need_fine=True)
    valid = io.load_dataset(args.valid, need_fine=True)
    test = io.load_dataset(args.test, need_fine=True)
    filters = {name: cfg.filter_spec(name) for name in cfg.filters}
    res = convergence_sweep(cfg.M, cfg.routes, filters, train, valid, test,
                            fine=make_grid(cfg.N), grid=cfg.lambda_grid,
                            cfg=cfg.eval_config(), opt=cfg.optimizer(),
                            embedded_pairs=cfg.embedded_pairs)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    io.write_sweep_csv(out, res)
    if args.svg:
        series = {}
        for row in res.rows:
            x, y = series.setdefault(f"{row['filter']} {row['route']}", ([], []))
            x.append(row["M"])
            y.append(row["avg_error"])
        io.write_svg(args.svg, series, xlabel="M", ylabel="time-averaged test error")
    for row in res.rows:
        print(f"{row['filter']:9s} {row['route']:9s} M={row['M']:4d} "
              f"{row['avg_error']:.4g}")
    return EXIT_OK


def cmd_long(args, cfg):
    ds = io.load_dataset(args.dataset)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    series = {}
    for item in args.operator:
        label, _, path = item.rpartition("=")
        label = label or Path(path).stem
        op = io.read_matrix(path)
        if op.shape != (ds.M, ds.M):
            raise io.ConfigError(f"{path}: operator is {op.shape[0]} x {op.shape[1]}, "
                                 f"dataset has M = {ds.M}")
        curve = error_curve(op, ds, cfg.eval_config(), route=label)
        io.write_curve_csv(out / f"{label}.csv", curve)
        series[label] = (curve.times, curve.errors)
        final = curve.errors[-1]
        print(f"{label:12s} t={curve.times[-1]:g}: error {final:.4g}"
              + (f" (failed at t={curve.failed_at:.4g})" if curve.failed_at else ""))
    io.write_svg(out / "long.svg", series, xlabel="t", ylabel="relative error",
                 title=ds.name)
    return EXIT_OK


def cmd_gradcheck(args, cfg):
    worst_fd, worst_stride = gradcheck(args.instances, args.max_size, args.seed)
    ok = worst_fd < 1e-5 and worst_stride < 1e-13
    print(f"max relative discrepancy vs finite differences: {worst_fd:.3e}")
    print(f"max checkpoint-stride discrepancy: {worst_stride:.3e}")
    print("PASS" if ok else "FAIL")
    return EXIT_OK if ok else EXIT_NUMERICAL


# Entry point -----------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="key = value config file")
    common.add_argument("--set", action="append", metavar="KEY=VALUE",
                        help="override a config entry (repeatable)")
    common.add_argument("-v", "--verbose", action="count", default=0)

    parser = argparse.ArgumentParser(prog="discfilter", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("generate", parents=[common], help="fine-grid datasets")
    p.add_argument("--dataset", nargs="+", default=["train", "valid", "test"],
                   choices=["train", "valid", "test", "long"])
    p.add_argument("--out", help="output folder (default: config 'output')")
    p.add_argument("--filtered-only", action="store_true",
                   help="store only the filtered snapshots")
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("fit", parents=[common], help="infer one operator")
    p.add_argument("--route", required=True, choices=[r.value for r in Route])
    p.add_argument("--train", required=True)
    p.add_argument("--valid", required=True)
    p.add_argument("--out", required=True, help="operator file (.dfm)")
    p.set_defaults(func=cmd_fit)

    p = sub.add_parser("eval", parents=[common], help="error curve of one operator")
    p.add_argument("--operator", required=True)
    p.add_argument("--dataset", required=True)
    p.add_argument("--out", required=True, help="curve CSV")
    p.add_argument("--svg")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("sweep", parents=[common], help="test error against M")
    p.add_argument("--train", required=True)
    p.add_argument("--valid", required=True)
    p.add_argument("--test", required=True)
    p.add_argument("--out", required=True, help="sweep CSV")
    p.add_argument("--svg")
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("long", parents=[common], help="long-horizon error curves")
    p.add_argument("--dataset", required=True)
    p.add_argument("--operator", required=True, action="append", metavar="[LABEL=]PATH")
    p.add_argument("--out", required=True, help="output folder")
    p.set_defaults(func=cmd_long)

    p = sub.add_parser("gradcheck", parents=[common], help="adjoint gradient check")
    p.add_argument("--instances", type=int, default=20)
    p.add_argument("--max-size", type=int, default=8)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_gradcheck)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.WARNING - 10 * min(args.verbose, 2),
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = load_config(args)
        return args.func(args, cfg)
    except (SolverError, SingularSystemError, RouteFailure, TrainingDivergedError,
            FloatingPointError, np.linalg.LinAlgError) as exc:
        print(f"discfilter: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    except (OSError, io.MatrixFormatError) as exc:
        print(f"discfilter: file error: {exc}", file=sys.stderr)
        return EXIT_IO
    except ValueError as exc:
        print(f"discfilter: invalid input: {exc}", file=sys.stderr)
        return EXIT_INVALID


if __name__ == "__main__":
    sys.exit(main())
