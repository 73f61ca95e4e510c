"""Benchmark harness for the scaling experiments.

Runs one arithmetic operation over grids of tensor dimension ``d`` and
rank ``k`` on either backend and emits CSV rows.  For the distributed
backend two times are recorded per repetition:

* ``seconds`` -- controller wall time, which on a desk machine mostly
  measures how many cores it has;
* ``parallel_seconds`` -- the protocol makespan: per-worker CPU time
  accumulated along the actual message dataflow (receives join with
  ``max``).  This is the wall time of the run under the intended
  deployment of one dedicated processor per tree node, and it is the
  quantity the level-wise scaling statements are about.

Desk-scale guard rails: runs whose predicted allocation exceeds 2 GB are
refused unless forced.
"""

from __future__ import annotations

import statistics
import time
from dataclasses import dataclass, field

import numpy as np

from . import arith, dist
from .arith import TruncationControl
from .format import random_htensor, random_htoperator, storage_size
from .tree import build_balanced_tree

OPERATIONS = ("evaluate", "inner_product", "orthogonalize", "truncate",
              "apply_operator", "add")

GUARD_BYTES = 2 * 1024**3


class GuardRailRefusal(RuntimeError):
    """Raised when a benchmark would exceed the desk-scale memory guard."""


@dataclass
class BenchSpec:
    """One benchmark grid: ``operation`` over ``d_values x k_values``."""

    operation: str
    d_values: list[int]
    n: int
    k_values: list[int]
    repetitions: int = 3
    backend: str = "serial"
    seed: int = 0
    force: bool = False

    def __post_init__(self):
        if self.operation not in OPERATIONS:
            raise ValueError(f"unknown operation {self.operation!r}; "
                             f"pick one of {OPERATIONS}")
        if self.backend not in ("serial", "dist"):
            raise ValueError(f"unknown backend {self.backend!r}")
        if (self.repetitions < 1 or self.n < 1
                or any(d < 2 for d in self.d_values) or any(k < 1 for k in self.k_values)):
            raise ValueError("benchmark grid values must be positive (d >= 2)")


@dataclass
class BenchRow:
    op: str
    d: int
    n: int
    k: int
    rep: int
    backend: str
    seconds: float
    parallel_seconds: float | None
    median_seconds: float = field(default=float("nan"))


def predicted_bytes(op: str, d: int, n: int, k: int) -> int:
    """Rough peak allocation of one benchmark case, in bytes."""
    tensor = 8 * (d * n * k + max(d - 2, 0) * k**3 + k**2)
    if op == "apply_operator":
        operator = 8 * (d * k * n * n + max(d - 2, 0) * k**3 + k**2)
        product = 8 * (d * n * k**2 + max(d - 2, 0) * k**6 + k**4)
        return tensor + operator + product
    if op in ("inner_product", "add"):
        return 3 * tensor
    return 2 * tensor


def check_guard(spec: BenchSpec) -> None:
    worst = max(predicted_bytes(spec.operation, d, spec.n, k)
                for d in spec.d_values for k in spec.k_values)
    if worst > GUARD_BYTES and not spec.force:
        raise GuardRailRefusal(
            f"predicted allocation {worst / 1024**3:.2f} GiB exceeds the "
            f"{GUARD_BYTES / 1024**3:.0f} GiB guard rail; rerun with --force to override")


def _run_case_serial(op: str, tensors, rng) -> tuple[float, None]:
    a, c, operator = tensors
    idx = tuple(rng.integers(0, s) for s in a.shape) if op == "evaluate" else None
    t0 = time.perf_counter()
    if op == "evaluate":
        arith.evaluate_entry(a, idx)
    elif op == "inner_product":
        arith.inner_product(a, c)
    elif op == "orthogonalize":
        arith.orthogonalize(a)
    elif op == "truncate":
        arith.truncate(a, TruncationControl.fixed_rank(max(1, a.max_rank // 2)))
    elif op == "add":
        arith.add(a, c)
    elif op == "apply_operator":
        arith.apply_operator(operator, a)
    return time.perf_counter() - t0, None


def _run_case_dist(op: str, tensors, rng, topo) -> tuple[float, float]:
    a, c, operator = tensors
    ha = dist.scatter(topo, a)
    if op == "evaluate":
        idx = tuple(rng.integers(0, s) for s in a.shape)
        dist.dist_evaluate(ha, idx)
    elif op == "inner_product":
        hc = dist.scatter(topo, c)
        dist.dist_inner_product(ha, hc)
    elif op == "orthogonalize":
        dist.dist_orthogonalize(ha)
    elif op == "truncate":
        dist.dist_orthogonalize(ha)  # paper-style: truncation timed on top
        dist.dist_truncate(ha, TruncationControl.fixed_rank(max(1, a.max_rank // 2)))
    elif op == "add":
        hc = dist.scatter(topo, c)
        dist.dist_add(ha, hc)
    elif op == "apply_operator":
        hop = dist.scatter_operator(topo, operator)
        dist.dist_apply_operator(hop, ha)
    timing = topo.last_timing
    return timing.wall_seconds, timing.makespan_seconds


def run_bench(spec: BenchSpec) -> list[BenchRow]:
    """Execute the grid and return per-repetition rows with group medians."""
    check_guard(spec)
    rows: list[BenchRow] = []
    rng = np.random.default_rng(spec.seed)
    for d in spec.d_values:
        tree = build_balanced_tree(d)
        topo = dist.spawn_topology(tree) if spec.backend == "dist" else None
        try:
            for k in spec.k_values:
                a = random_htensor(tree, spec.n, k, seed=spec.seed)
                c = (random_htensor(tree, spec.n, k, seed=spec.seed + 1)
                     if spec.operation in ("inner_product", "add") else None)
                operator = (random_htoperator(tree, spec.n, spec.n, k, seed=spec.seed + 2)
                            if spec.operation == "apply_operator" else None)
                group: list[BenchRow] = []
                for rep in range(spec.repetitions):
                    if spec.backend == "serial":
                        seconds, par = _run_case_serial(spec.operation, (a, c, operator), rng)
                    else:
                        seconds, par = _run_case_dist(spec.operation, (a, c, operator),
                                                      rng, topo)
                    group.append(BenchRow(spec.operation, d, spec.n, k, rep,
                                          spec.backend, seconds, par))
                median = statistics.median(r.seconds for r in group)
                median_par = (statistics.median(r.parallel_seconds for r in group)
                              if spec.backend == "dist" else None)
                for r in group:
                    r.median_seconds = median_par if median_par is not None else median
                rows.extend(group)
        finally:
            if topo is not None:
                topo.shutdown()
    return rows


def tensor_bytes_estimate(d: int, n: int, k: int) -> int:
    tree = build_balanced_tree(d)
    return 8 * storage_size(random_htensor(tree, n, min(k, n), seed=0))


def loglog_slope(xs, ys) -> float:
    """Least-squares slope of log(y) against log(x)."""
    lx, ly = np.log(np.asarray(xs, float)), np.log(np.asarray(ys, float))
    return float(np.polyfit(lx, ly, 1)[0])


def fit_log2_model(d_values, times) -> tuple[float, float, float]:
    """Fit ``t = a + b log2(d)``; returns ``(a, b, r_squared)``."""
    x = np.log2(np.asarray(d_values, float))
    y = np.asarray(times, float)
    coeffs = np.polyfit(x, y, 1)
    pred = np.polyval(coeffs, x)
    ss_res = float(np.sum((y - pred) ** 2))
    ss_tot = float(np.sum((y - np.mean(y)) ** 2))
    r2 = 1.0 if ss_tot == 0 else 1.0 - ss_res / ss_tot
    return float(coeffs[1]), float(coeffs[0]), r2


def linear_slope(d_values, times) -> float:
    """Least-squares slope of ``t`` against ``d`` (seconds per unit d)."""
    return float(np.polyfit(np.asarray(d_values, float), np.asarray(times, float), 1)[0])
