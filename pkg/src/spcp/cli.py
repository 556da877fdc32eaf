"""Command-line front end.

Subcommands: factorize, benchmark, generate, joint, master, worker.
Exit codes: 0 success, 2 usage or missing input, 3 nothing to run,
4 numerical abort.  All commands are deterministic given their full flag
set including seeds.
"""

from __future__ import annotations

import argparse
import csv
import json
import os
import statistics
import sys
import time
from dataclasses import dataclass, field, replace

import numpy as np

from . import datagen, joint
from .distributed import connect_workers, master_run, serve_tcp_worker
from .mttkrp import (
    CapacityError,
    FlopCounter,
    build_plan,
    factor_pair,
    mttkrp_dfacto,
    mttkrp_gigatensor,
    mttkrp_naive,
    mttkrp_toolbox,
)
from .solvers import SolverAbort, SolverConfig, solve, stats_to_csv
from .sparse_core import ParseError, build_views, nnzc, parse_tensor, write_tensor

ALL_KERNELS = ("dfacto", "naive", "toolbox", "gigatensor")
EXIT_OK, EXIT_USAGE, EXIT_NOTHING, EXIT_NUMERIC = 0, 2, 3, 4


@dataclass
class RunReport:
    """What a command did: flag echo, per-iteration rows, kernel comparison
    rows (each with a computed correctness diff), and an environment note."""

    config: dict
    stats_rows: list = field(default_factory=list)
    kernel_table: list = field(default_factory=list)
    environment: str = ""

    def kernel_markdown(self) -> str:
        head = "| kernel | mode | median ms | flops | max abs diff vs dfacto | status |"
        sep = "|---|---|---|---|---|---|"
        lines = [head, sep]
        for row in self.kernel_table:
            diff = "" if row["max_abs_diff"] is None else f"{row['max_abs_diff']:.3e}"
            ms = "" if row["median_ms"] is None else f"{row['median_ms']:.3f}"
            lines.append(
                f"| {row['kernel']} | {row['mode']} | {ms} | {row['flops']} "
                f"| {diff} | {row['status']} |")
        return "\n".join(lines)


def _pin_threads(n: int) -> str:
    try:
        import threadpoolctl

        threadpoolctl.threadpool_limits(limits=n)
        return f"threads pinned to {n} (threadpoolctl)"
    except ImportError:
        return f"threads requested {n} (threadpoolctl unavailable)"


def _load_tensor(path: str, index_base: int):
    if not os.path.exists(path):
        raise FileNotFoundError(path)
    with open(path) as fh:
        tensor, merged = parse_tensor(fh, index_base)
    return tensor, merged


def _write_model(model, out_dir: str) -> None:
    os.makedirs(out_dir, exist_ok=True)
    for name, arr in zip(("A", "B", "C"), model.factors()):
        np.savetxt(os.path.join(out_dir, f"{name}.csv"), arr,
                   delimiter=",", fmt="%.17g")
    np.savetxt(os.path.join(out_dir, "weights.csv"), model.weights,
               delimiter=",", fmt="%.17g")


def _parse_int_list(text: str, n: int, flag: str):
    parts = text.split(",")
    if len(parts) != n:
        raise ValueError(f"{flag} expects {n} comma-separated values")
    return [int(p) for p in parts]


# ---------------------------------------------------------------------------
# factorize

def cmd_factorize(args) -> int:
    env = _pin_threads(args.threads)
    tensor, merged = _load_tensor(args.tensor, args.index_base)
    config = SolverConfig(rank=args.rank, reg=args.reg, max_iters=args.iters,
                          tol=args.tol, algorithm=args.algo, seed=args.seed)
    model, history = solve(tensor, config)
    os.makedirs(args.out, exist_ok=True)
    _write_model(model, args.out)
    stats_to_csv(history, os.path.join(args.out, "stats.csv"))
    final = history[-1]
    print(f"{args.algo} rank={args.rank} iters={final.iteration} "
          f"objective={final.objective:.6e} fit={final.fit:.6f} "
          f"(nnz={tensor.nnz}, merged_duplicates={merged}; {env})")
    return EXIT_OK


# ---------------------------------------------------------------------------
# benchmark

def run_kernel_benchmark(tensor, rank: int, kernels, repeat: int,
                         modes=(1, 2, 3), seed: int = 0):
    """Benchmark the requested kernels against the two-SpMV reference.

    Every row reports a computed max-abs-diff against the dfacto output for
    the same mode; flop-counter formulas are asserted on every run."""
    rng = np.random.default_rng(seed)
    A, B, C = (rng.random((d, rank)) for d in tensor.dims)
    views = build_views(tensor)
    rows = []
    for mode in modes:
        plan = build_plan(views, mode)
        xn = views.flattening(mode)
        paired_nnzc = plan.m_pattern.nnz
        f1, f2 = factor_pair((A, B, C), mode)
        reference = mttkrp_dfacto(plan, f1, f2)
        for kernel in kernels:
            counter = FlopCounter()
            times = []
            result = None
            status = "ok"
            try:
                for _ in range(repeat):
                    counter.reset()
                    t0 = time.perf_counter()
                    if kernel == "dfacto":
                        result = mttkrp_dfacto(plan, f1, f2, counter)
                    elif kernel == "naive":
                        result = mttkrp_naive(xn, f1, f2, counter)
                    elif kernel == "toolbox":
                        result = mttkrp_toolbox(tensor, f1, f2, counter, mode=mode)
                    elif kernel == "gigatensor":
                        result = mttkrp_gigatensor(xn, f1, f2, counter)
                    else:
                        raise ValueError(f"unknown kernel {kernel!r}")
                    times.append((time.perf_counter() - t0) * 1e3)
            except CapacityError:
                rows.append({"kernel": kernel, "mode": mode, "median_ms": None,
                             "flops": 0, "max_abs_diff": None,
                             "status": "skipped (memory cap)"})
                continue
            expected = {
                "dfacto": (paired_nnzc + tensor.nnz) * rank,
                "naive": (xn.ncols + tensor.nnz) * rank,
                "toolbox": 5 * tensor.nnz * rank,
                "gigatensor": 5 * tensor.nnz * rank,
            }[kernel]
            assert counter.multiply_adds == expected, (
                f"{kernel} flop counter {counter.multiply_adds} != {expected}")
            rows.append({
                "kernel": kernel, "mode": mode,
                "median_ms": statistics.median(times),
                "flops": counter.multiply_adds,
                "max_abs_diff": float(np.max(np.abs(result - reference))),
                "status": status,
            })
    return rows


def _benchmark_tensor(args):
    if args.tensor:
        tensor, _ = _load_tensor(args.tensor, args.index_base)
        return tensor
    if args.synth:
        i, j, k, nnz, seed = _parse_int_list(args.synth, 5, "--synth")
        return datagen.gen_preferential(datagen.GenSpec((i, j, k), nnz, seed=seed))
    raise ValueError("one of --tensor or --synth is required")


def cmd_benchmark(args) -> int:
    env = _pin_threads(args.threads)
    kernels = [k for k in args.kernels.split(",") if k]
    for k in kernels:
        if k not in ALL_KERNELS:
            raise ValueError(f"unknown kernel {k!r}; choose from {ALL_KERNELS}")
    if not kernels or args.repeat < 1:
        print("nothing to run", file=sys.stderr)
        return EXIT_NOTHING
    tensor = _benchmark_tensor(args)
    modes = [int(m) for m in args.modes.split(",")]
    rows = run_kernel_benchmark(tensor, args.rank, kernels, args.repeat,
                                modes=modes, seed=args.seed)
    ran = [r for r in rows if r["status"] == "ok"]
    report = RunReport(config=vars(args), kernel_table=rows, environment=env)
    print(f"tensor dims={tensor.dims} nnz={tensor.nnz} rank={args.rank} "
          f"repeat={args.repeat} ({env})")
    print(report.kernel_markdown())
    if args.out:
        with open(args.out, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["kernel", "mode", "median_ms", "flops",
                        "max_abs_diff_vs_dfacto", "status"])
            for r in rows:
                w.writerow([r["kernel"], r["mode"], r["median_ms"], r["flops"],
                            r["max_abs_diff"], r["status"]])
    if not ran:
        print("all kernels skipped", file=sys.stderr)
        return EXIT_NOTHING
    return EXIT_OK


# ---------------------------------------------------------------------------
# generate

def cmd_generate(args) -> int:
    if bool(args.synth) == bool(args.planted):
        raise ValueError("exactly one of --synth or --planted is required")
    if args.synth:
        i, j, k, nnz, seed = _parse_int_list(args.synth, 5, "--synth")
        spec = datagen.GenSpec((i, j, k), nnz, seed=seed, values=args.values)
        tensor = datagen.gen_preferential(spec)
        write_tensor(tensor, args.out, index_base=args.index_base)
        print(f"wrote {args.out}: dims={tensor.dims} nnz={tensor.nnz}")
        return EXIT_OK
    i, j, k, nnz, rank, seed = _parse_int_list(args.planted, 6, "--planted")
    spec = datagen.GenSpec((i, j, k), nnz, seed=seed, rank=rank, noise=args.noise)
    tensor, truth = datagen.gen_planted(spec)
    write_tensor(tensor, args.out, index_base=args.index_base)
    if args.factors_out:
        _write_model(truth, args.factors_out)
    print(f"wrote {args.out}: dims={tensor.dims} nnz={tensor.nnz} rank={rank}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# joint

def _parse_grid(text: str):
    return [float(v) for v in text.split(",") if v != ""]


def cmd_joint(args) -> int:
    env = _pin_threads(args.threads)
    tensor, _ = _load_tensor(args.tensor, args.index_base)
    if not os.path.exists(args.ratings):
        raise FileNotFoundError(args.ratings)
    with open(args.ratings) as fh:
        records = joint.parse_ratings(fh, args.index_base)
    if args.normalize_ratings:
        records = joint.normalize_ratings(records)
    train, val, test = joint.split_ratings(records, args.seed)
    dims = (tensor.dims[0], tensor.dims[1])
    y_train = joint.RatingsMatrix.from_records(train, dims=dims)
    y_val = joint.RatingsMatrix.from_records(val, dims=dims)
    y_test = joint.RatingsMatrix.from_records(test, dims=dims)
    x_train = tensor if args.no_restrict_tensor else joint.restrict_to_pairs(tensor, train)
    clamp = None
    if args.clamp:
        lo, hi = (float(v) for v in args.clamp.split(","))
        clamp = (lo, hi)
    base = joint.JointConfig(rank=args.rank, algorithm=args.algo,
                             max_iters=args.iters, tol=args.tol,
                             seed=args.seed, clamp=clamp)
    mu_grid = _parse_grid(args.mu_grid)
    lambda_grid = _parse_grid(args.lambda_grid)
    rows, best = joint.evaluate_grid(y_train, y_val, y_test, x_train, base,
                                     mu_grid, lambda_grid)
    os.makedirs(args.out, exist_ok=True)
    joint.report_to_csv(rows, os.path.join(args.out, "report.csv"))
    with open(os.path.join(args.out, "selected.json"), "w") as fh:
        json.dump(best, fh, indent=2)
    print(f"best on validation: mu={best['mu']:g} lambda={best['lam']:g} "
          f"val_mse={best['val_mse']:.6f} test_mse={best['test_mse']:.6f} ({env})")
    return EXIT_OK


# ---------------------------------------------------------------------------
# distributed

def cmd_master(args) -> int:
    tensor, _ = _load_tensor(args.tensor, args.index_base)
    config = SolverConfig(rank=args.rank, reg=args.reg, max_iters=args.iters,
                          tol=args.tol, algorithm=args.algo, seed=args.seed)
    transports = connect_workers(args.workers.split(","))
    try:
        model, history = master_run(tensor, config, transports)
    finally:
        for tr in transports:
            tr.close()
    os.makedirs(args.out, exist_ok=True)
    _write_model(model, args.out)
    stats_to_csv(history, os.path.join(args.out, "stats.csv"))
    final = history[-1]
    print(f"distributed {args.algo} workers={len(transports)} "
          f"iters={final.iteration} objective={final.objective:.6e} "
          f"fit={final.fit:.6f}")
    return EXIT_OK


def cmd_worker(args) -> int:
    host, port = args.listen.rsplit(":", 1)

    def announce(addr):
        print(f"listening on {addr[0]}:{addr[1]}", flush=True)

    serve_tcp_worker(host, int(port), ready_callback=announce)
    return EXIT_OK


# ---------------------------------------------------------------------------
# parser

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="spcp",
        description="Sparse CP factorization toolkit (two-SpMV MTTKRP kernel, "
                    "ALS/GD solvers, distributed mode, joint rating model)")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--index-base", type=int, choices=(0, 1), default=1)
        p.add_argument("--threads", type=int, default=1)
        p.add_argument("--seed", type=int, default=0)

    p = sub.add_parser("factorize", help="factorize a tensor file")
    p.add_argument("--tensor", required=True)
    p.add_argument("--rank", type=int, required=True)
    p.add_argument("--algo", choices=("als", "gd"), default="als")
    p.add_argument("--reg", type=float, default=0.0)
    p.add_argument("--iters", type=int, default=100)
    p.add_argument("--tol", type=float, default=1e-6)
    p.add_argument("--out", required=True)
    common(p)
    p.set_defaults(func=cmd_factorize)

    p = sub.add_parser("benchmark", help="compare MTTKRP kernels")
    p.add_argument("--tensor")
    p.add_argument("--synth", help="I,J,K,nnz,seed preferential tensor")
    p.add_argument("--rank", type=int, default=10)
    p.add_argument("--kernels", default=",".join(ALL_KERNELS))
    p.add_argument("--repeat", type=int, default=3)
    p.add_argument("--modes", default="1,2,3")
    p.add_argument("--out")
    common(p)
    p.set_defaults(func=cmd_benchmark)

    p = sub.add_parser("generate", help="write synthetic tensor files")
    p.add_argument("--synth", help="I,J,K,nnz,seed preferential tensor")
    p.add_argument("--planted", help="I,J,K,nnz,rank,seed planted tensor")
    p.add_argument("--noise", type=float, default=0.0)
    p.add_argument("--values", choices=("ones", "uniform"), default="ones")
    p.add_argument("--out", required=True)
    p.add_argument("--factors-out")
    common(p)
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("joint", help="joint rating + tensor model grid search")
    p.add_argument("--ratings", required=True)
    p.add_argument("--tensor", required=True)
    p.add_argument("--rank", type=int, required=True)
    p.add_argument("--algo", choices=("als", "gd"), default="als")
    p.add_argument("--iters", type=int, default=100)
    p.add_argument("--tol", type=float, default=1e-6)
    p.add_argument("--mu-grid", default=",".join(str(v) for v in joint.DEFAULT_MU_GRID))
    p.add_argument("--lambda-grid",
                   default=",".join(str(v) for v in joint.DEFAULT_LAMBDA_GRID))
    p.add_argument("--normalize-ratings", action="store_true")
    p.add_argument("--clamp", help="lo,hi prediction clamp for MSE")
    p.add_argument("--no-restrict-tensor", action="store_true",
                   help="keep tensor entries for pairs outside the train split")
    p.add_argument("--out", required=True)
    common(p)
    p.set_defaults(func=cmd_joint)

    p = sub.add_parser("master", help="drive distributed workers")
    p.add_argument("--workers", required=True, help="host:port,host:port,...")
    p.add_argument("--tensor", required=True)
    p.add_argument("--rank", type=int, required=True)
    p.add_argument("--algo", choices=("als", "gd"), default="als")
    p.add_argument("--reg", type=float, default=0.0)
    p.add_argument("--iters", type=int, default=100)
    p.add_argument("--tol", type=float, default=1e-6)
    p.add_argument("--out", required=True)
    common(p)
    p.set_defaults(func=cmd_master)

    p = sub.add_parser("worker", help="serve one distributed run")
    p.add_argument("--listen", required=True, help="host:port (port 0 = ephemeral)")
    p.set_defaults(func=cmd_worker)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (FileNotFoundError, ParseError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except SolverAbort as exc:
        print(f"numerical abort: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
