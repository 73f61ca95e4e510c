"""Command-line harness reproducing the scaling and solver experiments.

Subcommands::

    htucker bench      runtime grids over tensor dimension and rank -> CSV
    htucker cookie-cg  truncated CG traces on the coarse diffusion problem
    htucker cookie-mg  multigrid cycle traces plus the best-per-cap summary
    htucker tensor     info/convert for serialized tensor files

Outputs are CSV files (plots are regenerated externally); every file
starts with comment lines recording the schema version, the seed, the
git revision and a hash of the effective configuration.  The environment
variable ``HT_THREADS`` caps how many workers of the distributed backend
compute concurrently.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import subprocess
import sys
import time

import numpy as np

from . import arith, cookie
from .arith import TruncationControl
from .bench import BenchSpec, GuardRailRefusal, run_bench
from .format import deserialize, serialize, storage_size
from .solvers import SolverConfig, cg_solve, multigrid_solve
from .tree import build_balanced_tree

BENCH_SCHEMA = "htucker-bench-v1"
CG_SCHEMA = "htucker-cg-trace-v1"
MG_SCHEMA = "htucker-mg-trace-v1"
MG_SUMMARY_SCHEMA = "htucker-mg-summary-v1"


def _git_revision() -> str:
    try:
        out = subprocess.run(["git", "rev-parse", "--short", "HEAD"],
                             capture_output=True, text=True, timeout=5, check=False)
        return out.stdout.strip() or "unknown"
    except OSError:
        return "unknown"


def _config_hash(config: dict) -> str:
    blob = json.dumps(config, sort_keys=True, default=str).encode()
    return hashlib.sha256(blob).hexdigest()[:16]


def _write_csv(path, schema: str, config: dict, header: list[str],
               rows, extra_comments=()) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(f"# schema={schema}\n")
        fh.write(f"# seed={config.get('seed', 'none')}\n")
        fh.write(f"# git={_git_revision()}\n")
        fh.write(f"# config_sha256={_config_hash(config)}\n")
        for line in extra_comments:
            fh.write(f"# {line}\n")
        fh.write(",".join(header) + "\n")
        for row in rows:
            fh.write(",".join(_fmt(v) for v in row) + "\n")
    print(f"wrote {path}", file=sys.stderr)


def _fmt(value) -> str:
    if value is None:
        return ""
    if isinstance(value, float):
        return repr(value)
    return str(value)


def _int_list(text: str) -> list[int]:
    return [int(part) for part in text.split(",") if part]


# -- bench ------------------------------------------------------------------


def cmd_bench(args) -> int:
    rows_all = []
    config = {"ops": args.ops, "d": args.d, "n": args.n, "k": args.k,
              "reps": args.reps, "backend": args.backend, "seed": args.seed}
    for op in args.ops.split(","):
        spec = BenchSpec(operation=op, d_values=_int_list(args.d), n=args.n,
                         k_values=_int_list(args.k), repetitions=args.reps,
                         backend=args.backend, seed=args.seed, force=args.force)
        try:
            rows_all.extend(run_bench(spec))
        except GuardRailRefusal as exc:
            print(f"refused: {exc}", file=sys.stderr)
            return 2
    header = ["op", "d", "n", "k", "rep", "backend", "seconds",
              "parallel_seconds", "median_seconds"]
    _write_csv(args.out, BENCH_SCHEMA, config, header,
               [(r.op, r.d, r.n, r.k, r.rep, r.backend, r.seconds,
                 r.parallel_seconds, r.median_seconds) for r in rows_all])
    return 0


# -- cookie experiments -------------------------------------------------------


def _load_problem(args) -> cookie.CookieProblem:
    problem = (cookie.CookieProblem.from_file(args.problem)
               if args.problem else cookie.CookieProblem())
    if args.caps:
        problem.caps = _int_list(args.caps)
    if args.eps is not None:
        problem.eps = args.eps
    if getattr(args, "levels", None) is not None:
        problem.max_level = args.levels
    return problem


def cmd_cookie_cg(args) -> int:
    problem = _load_problem(args)
    grids = problem.param_grids
    matrices = cookie.assemble_stiffness(0)
    operator = cookie.build_ht_operator(matrices, grids)
    rhs = cookie.build_rhs_htensor(cookie.assemble_rhs(0), grids)

    rows, comments = [], []
    for cap in problem.caps:
        cfg = SolverConfig(
            truncation=TruncationControl.accuracy(problem.eps, max_rank=cap),
            eps_stop=problem.eps_stop, max_cg_steps=problem.max_cg_steps)
        t0 = time.perf_counter()
        _, trace = cg_solve(operator, rhs, cfg)
        print(f"cap {cap}: floor {trace.floor:.3e} "
              f"({len(trace.entries) - 1} steps, {time.perf_counter() - t0:.1f}s)",
              file=sys.stderr)
        if trace.aborted:
            comments.append(f"abort cap={cap}: {trace.aborted}")
        rows.extend((cap, *row) for row in trace.csv_rows())
    config = {"problem": problem.__dict__, "seed": "deterministic"}
    _write_csv(args.out, CG_SCHEMA, config,
               ["cap", "step", "true_rel_residual", "internal_residual",
                "max_rank", "seconds"], rows, comments)
    return 0


def cmd_cookie_mg(args) -> int:
    problem = _load_problem(args)
    grids = problem.param_grids
    hierarchy_data = cookie.build_hierarchy(problem.max_level)
    hierarchy = []
    from .solvers import GridLevel

    for lvl in hierarchy_data:
        hierarchy.append(GridLevel(
            op=cookie.build_ht_operator(lvl.matrices, grids),
            spatial_dim=cookie.SPATIAL_DIM,
            restrict=lvl.restrict, prolong=lvl.prolong))
    rhs = cookie.build_rhs_htensor(hierarchy_data[-1].rhs, grids)

    rows, summary, comments = [], [], []
    for cap in problem.caps:
        cfg = SolverConfig(
            truncation=TruncationControl.accuracy(problem.eps, max_rank=cap),
            eps_stop=problem.eps_stop,
            max_cg_steps=problem.max_cg_steps,
            smoothing_steps=problem.smoothing_steps,
            lambda_min=problem.lambda_min,
            coarse_max_cg_steps=problem.coarse_max_cg_steps,
            coarse_eps_factor=problem.coarse_eps_factor)
        for grid in hierarchy:
            grid.omega = None  # re-resolve per cap (truncation control differs)
        t0 = time.perf_counter()
        _, trace = multigrid_solve(hierarchy, rhs, cfg, cycles=args.cycles)
        print(f"cap {cap}: floor {trace.floor:.3e} "
              f"({args.cycles} cycles, {time.perf_counter() - t0:.1f}s)",
              file=sys.stderr)
        if trace.aborted:
            comments.append(f"abort cap={cap}: {trace.aborted}")
        rows.extend((cap, *row) for row in trace.csv_rows())
        summary.append((cap, trace.floor))
    config = {"problem": problem.__dict__, "cycles": args.cycles, "seed": "deterministic"}
    _write_csv(args.out, MG_SCHEMA, config,
               ["cap", "step", "true_rel_residual", "internal_residual",
                "max_rank", "seconds"], rows, comments)
    summary_path = args.summary_out or _with_suffix(args.out, "-summary")
    _write_csv(summary_path, MG_SUMMARY_SCHEMA, config,
               ["cap", "best_rel_residual"], summary)
    return 0


def _with_suffix(path: str, suffix: str) -> str:
    if path.endswith(".csv"):
        return path[:-4] + suffix + ".csv"
    return path + suffix


# -- tensor files -------------------------------------------------------------


def cmd_tensor(args) -> int:
    with open(args.input, "rb") as fh:
        tensor = deserialize(fh.read())
    if args.action == "info":
        ranks = tensor.ranks
        print(f"dimension:    {tensor.tree.d}")
        print(f"shape:        {tensor.shape}")
        print(f"ranks:        min {min(ranks.values())}, max {max(ranks.values())}")
        print(f"storage:      {storage_size(tensor)} floats")
        print(f"frobenius:    {arith.norm(tensor):.12e}")
        return 0
    if not args.out:
        print("convert needs --out", file=sys.stderr)
        return 2
    with open(args.out, "wb") as fh:
        fh.write(serialize(tensor))
    print(f"wrote {args.out}", file=sys.stderr)
    return 0


# -- entry point --------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="htucker",
        description="scaling benchmarks and model-problem solvers for "
                    "tree-format tensor arithmetic")
    sub = parser.add_subparsers(dest="command", required=True)

    p_bench = sub.add_parser("bench", help="runtime grids -> CSV")
    p_bench.add_argument("--ops", default="inner_product",
                         help="comma list of operations")
    p_bench.add_argument("--d", default="8,16,32,64,128,256",
                         help="comma list of tensor dimensions")
    p_bench.add_argument("--n", type=int, default=1024, help="leaf size")
    p_bench.add_argument("--k", default="30", help="comma list of ranks")
    p_bench.add_argument("--reps", type=int, default=3)
    p_bench.add_argument("--backend", choices=("serial", "dist"), default="dist")
    p_bench.add_argument("--seed", type=int, default=0)
    p_bench.add_argument("--out", default="bench.csv")
    p_bench.add_argument("--force", action="store_true",
                         help="override the 2 GiB allocation guard")
    p_bench.set_defaults(func=cmd_bench)

    p_cg = sub.add_parser("cookie-cg", help="coarse-grid truncated CG traces")
    p_cg.add_argument("--problem", help="problem description JSON")
    p_cg.add_argument("--caps", help="comma list of rank caps (overrides file)")
    p_cg.add_argument("--eps", type=float, help="truncation accuracy (overrides file)")
    p_cg.add_argument("--out", default="cookie-cg.csv")
    p_cg.set_defaults(func=cmd_cookie_cg)

    p_mg = sub.add_parser("cookie-mg", help="multigrid traces and summary")
    p_mg.add_argument("--problem", help="problem description JSON")
    p_mg.add_argument("--caps", help="comma list of rank caps (overrides file)")
    p_mg.add_argument("--eps", type=float, help="truncation accuracy (overrides file)")
    p_mg.add_argument("--levels", type=int, help="finest grid level (overrides file)")
    p_mg.add_argument("--cycles", type=int, default=10)
    p_mg.add_argument("--out", default="cookie-mg.csv")
    p_mg.add_argument("--summary-out", dest="summary_out")
    p_mg.set_defaults(func=cmd_cookie_mg)

    p_tensor = sub.add_parser("tensor", help="inspect/convert tensor files")
    p_tensor.add_argument("action", choices=("info", "convert"))
    p_tensor.add_argument("--in", dest="input", required=True)
    p_tensor.add_argument("--out")
    p_tensor.set_defaults(func=cmd_tensor)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
