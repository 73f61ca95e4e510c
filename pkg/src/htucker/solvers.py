"""Truncated iterative solvers in tree-format arithmetic.

The conjugate-gradient loop, the Richardson smoother and the V-cycle
multigrid step follow their reference listings line by line, with a
truncation after every operator application and every tensor addition.
Because of those truncations the internal residual can drift away from
the exact one, so every trace entry carries an independently recomputed
true residual ``|A X_j - B| / |B|`` next to the internal value.

Solvers are single-threaded orchestrators; the tensor arithmetic they
drive is chosen by a backend object -- :class:`SerialBackend` calls
:mod:`htucker.arith` directly, :class:`DistBackend` routes every
operation through a running worker topology.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from . import arith, dist
from .arith import TruncationControl
from .format import HTensor, HTOperator, random_htensor


class SerialBackend:
    """Run solver arithmetic with the serial reference implementation."""

    def lift(self, tensor: HTensor) -> HTensor:
        return tensor

    def retrieve(self, tensor: HTensor) -> HTensor:
        return tensor

    def lift_operator(self, op: HTOperator) -> HTOperator:
        return op

    def apply(self, op, x):
        return arith.apply_operator(op, x)

    def add(self, x, y):
        return arith.add(x, y)

    def scale(self, x, alpha: float):
        return arith.scale(x, alpha)

    def truncate(self, x, ctl: TruncationControl):
        return arith.truncate(x, ctl)

    def inner_product(self, x, y) -> float:
        return arith.inner_product(x, y)

    def norm(self, x) -> float:
        return arith.norm(x)

    def leaf_map(self, x, dim: int, matrix):
        leaf = x.tree.leaf_for_dim(dim)
        leaves = dict(x.leaves)
        leaves[leaf.index] = np.asarray(matrix @ x.leaves[leaf.index])
        return HTensor(x.tree, leaves, x.transfer, x.root_matrix)

    def max_rank(self, x) -> int:
        return x.max_rank


class DistBackend:
    """Run solver arithmetic on a worker topology (one worker per node)."""

    def __init__(self, topology: dist.Topology):
        self.topology = topology

    def lift(self, tensor: HTensor):
        return dist.scatter(self.topology, tensor)

    def retrieve(self, handle) -> HTensor:
        return dist.gather(handle)

    def lift_operator(self, op: HTOperator):
        return dist.scatter_operator(self.topology, op)

    def apply(self, op, x):
        return dist.dist_apply_operator(op, x)

    def add(self, x, y):
        return dist.dist_add(x, y)

    def scale(self, x, alpha: float):
        return dist.dist_scale(x, alpha)

    def truncate(self, x, ctl: TruncationControl):
        dist.dist_truncate(x, ctl)
        return x

    def inner_product(self, x, y) -> float:
        return dist.dist_inner_product(x, y)

    def norm(self, x) -> float:
        return dist.dist_norm(x)

    def leaf_map(self, x, dim: int, matrix):
        return dist.dist_leaf_map(x, dim, np.asarray(matrix))

    def max_rank(self, x) -> int:
        return dist.gather(x).max_rank


@dataclass
class SolverConfig:
    """Knobs shared by the iterative solvers.

    ``truncation`` governs every in-loop truncation (typically an absolute
    accuracy plus a hard rank cap).  ``eps_stop`` is the lower bound EPS
    on the internal residual norm, ``max_cg_steps`` the step bound.  The
    smoother runs ``smoothing_steps`` pre- and post-iterations with
    relaxation ``omega``; ``omega=None`` resolves ``2 / (lambda_min +
    lambda_max)`` from the supplied or estimated spectral bounds.

    ``coarse_max_cg_steps`` and ``coarse_eps_factor`` bound the work of
    the coarsest-grid solve inside multigrid: the coarse CG stops at
    ``max(eps_stop, coarse_eps_factor * |rhs|)``.
    """

    truncation: TruncationControl
    eps_stop: float = 1e-8
    max_cg_steps: int = 25
    smoothing_steps: int = 5
    omega: float | None = None
    lambda_min: float | None = None
    lambda_max: float | None = None
    coarse_max_cg_steps: int | None = None
    coarse_eps_factor: float = 0.0


@dataclass
class TraceEntry:
    step: int
    true_rel_residual: float
    internal_residual: float
    max_rank: int
    seconds: float


@dataclass
class ConvergenceTrace:
    entries: list[TraceEntry] = field(default_factory=list)
    aborted: str | None = None

    def record(self, step, true_rel, internal, max_rank, seconds):
        self.entries.append(TraceEntry(step, true_rel, internal, max_rank, seconds))

    @property
    def floor(self) -> float:
        return min(e.true_rel_residual for e in self.entries)

    def csv_rows(self) -> list[tuple]:
        return [(e.step, e.true_rel_residual, e.internal_residual, e.max_rank, e.seconds)
                for e in self.entries]


def _true_residual(backend, op, x, b_neg, norm_b: float, ctl: TruncationControl) -> float:
    """Independent residual |A x - b| / |b|, recomputed in tree arithmetic.

    Never reads the solver's internal residual; the only approximation is
    the solver's own truncation control applied to ``A x``.
    """
    ax = backend.truncate(backend.apply(op, x), ctl)
    return backend.norm(backend.add(ax, b_neg)) / norm_b


def cg_solve(op: HTOperator, rhs: HTensor, cfg: SolverConfig,
             backend=None) -> tuple[HTensor, ConvergenceTrace]:
    """Conjugate gradients with truncation after every add and apply.

    The operator must be symmetric positive definite (caller-asserted).
    Starts from ``X_0 = rhs``; stops when the internal residual norm
    drops to ``eps_stop`` or after ``max_cg_steps`` steps.  A non-positive
    curvature ``<D, A D>`` (possible under aggressive truncation) aborts
    and returns the current iterate with a diagnostic on the trace.
    """
    backend = backend or SerialBackend()
    a = backend.lift_operator(op)
    b = backend.lift(rhs)
    trace = ConvergenceTrace()
    x = _cg_loop(a, b, cfg, backend, trace)
    return backend.retrieve(x), trace


def _cg_loop(a, b, cfg: SolverConfig, backend, trace: ConvergenceTrace | None):
    """The CG iteration over backend-lifted values.

    When ``trace`` is given, each step additionally recomputes the true
    residual; that measurement never feeds back into the iteration.
    """
    ctl = cfg.truncation
    t0 = time.perf_counter()
    if trace is not None:
        b_neg = backend.scale(b, -1.0)
        norm_b = backend.norm(b)

    x = b
    r = backend.truncate(backend.add(b, backend.scale(backend.apply(a, x), -1.0)), ctl)
    d = r
    rr = backend.inner_product(r, r)
    if trace is not None:
        trace.record(0, _true_residual(backend, a, x, b_neg, norm_b, ctl),
                     np.sqrt(max(0.0, rr)), backend.max_rank(x),
                     time.perf_counter() - t0)

    j = 0
    while np.sqrt(max(0.0, rr)) > cfg.eps_stop and j < cfg.max_cg_steps:
        z = backend.truncate(backend.apply(a, d), ctl)
        dz = backend.inner_product(d, z)
        if dz <= 0.0:
            if trace is not None:
                trace.aborted = f"non-positive curvature <D,AD> = {dz:.3e} at step {j}"
            break
        alpha = rr / dz
        x = backend.truncate(backend.add(x, backend.scale(d, alpha)), ctl)
        r_new = backend.truncate(backend.add(r, backend.scale(z, -alpha)), ctl)
        rr_new = backend.inner_product(r_new, r_new)
        beta = rr_new / rr
        d = backend.truncate(backend.add(backend.scale(d, beta), r_new), ctl)
        r, rr = r_new, rr_new
        j += 1
        if trace is not None:
            trace.record(j, _true_residual(backend, a, x, b_neg, norm_b, ctl),
                         np.sqrt(max(0.0, rr)), backend.max_rank(x),
                         time.perf_counter() - t0)
    return x


def resolve_omega(op: HTOperator, cfg: SolverConfig, backend=None) -> float:
    """Relaxation factor ``2 / (lambda_min + lambda_max)``.

    Uses the configured bounds; a missing ``lambda_max`` is estimated by
    power iteration, a missing ``lambda_min`` is a configuration error
    (cheap automatic estimation of the smallest eigenvalue is not
    provided).
    """
    if cfg.omega is not None:
        return cfg.omega
    if cfg.lambda_min is None:
        raise ValueError("omega resolution needs lambda_min (or an explicit omega)")
    lam_max = cfg.lambda_max
    if lam_max is None:
        lam_max, _ = power_iteration_lambda_max(op, cfg, backend=backend)
    return 2.0 / (cfg.lambda_min + lam_max)


def richardson_step(op, x, rhs, cfg: SolverConfig, backend=None, omega: float | None = None):
    """One Richardson step ``X - omega (A X - B)`` with truncations.

    Operates on backend-lifted values; ``omega`` may be pre-resolved by
    the caller (the multigrid driver does this once per level).
    """
    backend = backend or SerialBackend()
    if omega is None:
        if cfg.omega is None:
            raise ValueError("richardson_step needs omega (set cfg.omega or resolve it)")
        omega = cfg.omega
    ctl = cfg.truncation
    z = backend.truncate(backend.apply(op, x), ctl)
    z = backend.truncate(backend.add(z, backend.scale(rhs, -1.0)), ctl)
    return backend.truncate(backend.add(x, backend.scale(z, -omega)), ctl)


@dataclass
class GridLevel:
    """One level of a grid hierarchy for semi-coarsened multigrid.

    ``restrict``/``prolong`` map this level's spatial leaf to/from the
    next coarser level; they are ``None`` on the coarsest level.  The
    ``omega`` slot caches the smoother relaxation for this level.
    """

    op: HTOperator
    spatial_dim: int
    restrict: object | None = None
    prolong: object | None = None
    omega: float | None = None


def multigrid_step(hierarchy: list[GridLevel], level: int, x, rhs,
                   cfg: SolverConfig, backend=None):
    """One V-cycle step for ``A X = B`` on ``hierarchy[level]``.

    On the coarsest level the defect equation is solved with the
    truncated CG algorithm (which starts from its right-hand side); on
    finer levels: pre-smoothing, truncated residual, spatial restriction,
    one recursive step, prolongated correction with truncation, and
    post-smoothing.
    """
    backend = backend or SerialBackend()
    ctl = cfg.truncation
    grid = hierarchy[level]
    if level == 0:
        coarse_cfg = SolverConfig(
            truncation=cfg.truncation,
            eps_stop=max(cfg.eps_stop, cfg.coarse_eps_factor * backend.norm(rhs)),
            max_cg_steps=cfg.coarse_max_cg_steps or cfg.max_cg_steps,
        )
        return _cg_loop(grid.op, rhs, coarse_cfg, backend, trace=None)
    omega = grid.omega if grid.omega is not None else cfg.omega
    if omega is None:
        raise ValueError(f"level {level} has no resolved omega")
    for _ in range(cfg.smoothing_steps):
        x = richardson_step(grid.op, x, rhs, cfg, backend, omega=omega)
    residual = backend.truncate(
        backend.add(rhs, backend.scale(backend.apply(grid.op, x), -1.0)), ctl)
    defect = backend.leaf_map(residual, grid.spatial_dim, grid.restrict)
    correction = multigrid_step(hierarchy, level - 1, defect, defect, cfg, backend)
    prolonged = backend.leaf_map(correction, grid.spatial_dim, grid.prolong)
    x = backend.truncate(backend.add(x, prolonged), ctl)
    for _ in range(cfg.smoothing_steps):
        x = richardson_step(grid.op, x, rhs, cfg, backend, omega=omega)
    return x


def multigrid_solve(hierarchy: list[GridLevel], rhs: HTensor, cfg: SolverConfig,
                    cycles: int = 10, backend=None) -> tuple[HTensor, ConvergenceTrace]:
    """Run V-cycles on the finest level, starting from the zero tensor.

    Resolves each level's smoother relaxation once up front and records
    the independently recomputed true residual after every cycle.
    """
    backend = backend or SerialBackend()
    ctl = cfg.truncation
    t0 = time.perf_counter()
    for level_idx, grid in enumerate(hierarchy):
        if level_idx > 0 and grid.omega is None:
            grid.omega = resolve_omega(grid.op, cfg, backend=None)

    top = len(hierarchy) - 1
    op_lifted = backend.lift_operator(hierarchy[top].op)
    hier_lifted = [
        GridLevel(backend.lift_operator(g.op) if i != top else op_lifted,
                  g.spatial_dim, g.restrict, g.prolong, g.omega)
        for i, g in enumerate(hierarchy)
    ]
    b = backend.lift(rhs)
    b_neg = backend.scale(b, -1.0)
    norm_b = backend.norm(b)
    x = backend.scale(b, 0.0)

    trace = ConvergenceTrace()
    trace.record(0, _true_residual(backend, op_lifted, x, b_neg, norm_b, ctl),
                 float("nan"), backend.max_rank(x), time.perf_counter() - t0)
    for cycle in range(1, cycles + 1):
        x = multigrid_step(hier_lifted, top, x, b, cfg, backend)
        trace.record(cycle,
                     _true_residual(backend, op_lifted, x, b_neg, norm_b, ctl),
                     float("nan"), backend.max_rank(x), time.perf_counter() - t0)
    return backend.retrieve(x), trace


def power_iteration_lambda_max(op: HTOperator, cfg: SolverConfig | None = None,
                               backend=None, seed: int = 0, rel_tol: float = 1e-2,
                               max_iters: int = 200) -> tuple[float, bool]:
    """Largest-eigenvalue estimate by truncated power iteration.

    For a symmetric PSD operator returns ``(estimate, converged)``.  With
    ``x`` normalized and ``y = A x``, the Rayleigh quotient ``lam = <x, y>``
    carries the eigenvalue-residual bound ``|A x - lam x| = sqrt(|y|^2 -
    lam^2)``; the iteration stops once that residual drops to ``rel_tol``
    relative to the estimate.  The best estimate is returned with
    ``converged=False`` if the budget runs out.
    """
    backend = backend or SerialBackend()
    ctl = cfg.truncation if cfg is not None else TruncationControl.accuracy(1e-10, max_rank=20)
    from .tree import build_balanced_tree

    tree = build_balanced_tree(op.tree.d)
    x = backend.lift(random_htensor(tree, list(op.col_sizes), 1, seed=seed))
    x = backend.scale(x, 1.0 / backend.norm(x))
    lam = 0.0
    for _ in range(max_iters):
        y = backend.truncate(backend.apply(op, x), ctl)
        lam = backend.inner_product(x, y)
        norm_y = backend.norm(y)
        if norm_y == 0.0:
            return 0.0, True
        residual = np.sqrt(max(0.0, norm_y**2 - lam**2))
        x = backend.scale(y, 1.0 / norm_y)
        if lam > 0 and residual <= rel_tol * lam:
            return float(lam), True
    return float(lam), False
