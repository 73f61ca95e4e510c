"""The nine-parameter diffusion model problem on the square ``[0, 7]^2``.

Nine unit-square inclusions ("cookies") sit on a 3x3 grid of midpoints;
the diffusion coefficient is 1 outside and ``1 + alpha_mu`` on cookie
``mu``.  A bilinear Q1 discretization on structured square grids (cookie
edges align with every grid level) gives a stiffness matrix with exact
affine parameter structure

    ``A(alpha) = A_0 + sum_mu alpha_mu A_mu``,

which this module turns into a tree-format operator over ``d = 10``
dimensions: one dimension per parameter grid, the spatial unknowns last.
The right-hand side (unit load) is the same for every parameter
combination, hence a rank-1 tensor.

Grid levels: level ``l`` has mesh width ``2**-l``, ``7 * 2**l - 1`` inner
points per side (36 inner points on level 0, 3025 on level 3), inner
nodes numbered lexicographically with x fastest and homogeneous Dirichlet
rows and columns eliminated.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp

from .arith import eval_inner_row
from .format import GeneralizedMatrix, HTensor, HTOperator
from .tree import DimensionTree, build_balanced_tree

N_PARAMS = 9
SPATIAL_DIM = 10
COOKIE_CENTERS = [
    (1.5, 1.5), (3.5, 1.5), (5.5, 1.5),
    (1.5, 3.5), (3.5, 3.5), (5.5, 3.5),
    (1.5, 5.5), (3.5, 5.5), (5.5, 5.5),
]

# Q1 element stiffness of the Laplacian on any square, counterclockwise
# local nodes; mesh-width independent in 2D.
ELEMENT_STIFFNESS = np.array(
    [[4, -1, -2, -1],
     [-1, 4, -1, -2],
     [-2, -1, 4, -1],
     [-1, -2, -1, 4]], dtype=float) / 6.0


@dataclass(frozen=True)
class StructuredGrid:
    """Structured square grid on ``[0, 7]^2`` at refinement ``level``."""

    level: int

    @property
    def h(self) -> float:
        return 2.0 ** (-self.level)

    @property
    def cells_per_side(self) -> int:
        return 7 * 2**self.level

    @property
    def inner_per_side(self) -> int:
        return self.cells_per_side - 1

    @property
    def inner_count(self) -> int:
        return self.inner_per_side**2

    def inner_index(self, ix: int, iy: int) -> int | None:
        """Inner-node index of grid point ``(ix, iy)`` (corner coords),
        or ``None`` for boundary points."""
        m = self.inner_per_side
        if 1 <= ix <= m and 1 <= iy <= m:
            return (iy - 1) * m + (ix - 1)
        return None


def _cell_in_cookie(grid: StructuredGrid, cx: int, cy: int) -> int | None:
    """Cookie index (0-based) containing cell ``(cx, cy)``, or ``None``.

    Cookie edges lie on grid lines at every level, so the cell center
    decides membership exactly.
    """
    x = (cx + 0.5) * grid.h
    y = (cy + 0.5) * grid.h
    for mu, (cxm, cym) in enumerate(COOKIE_CENTERS):
        if max(abs(x - cxm), abs(y - cym)) < 0.5:
            return mu
    return None


def assemble_stiffness(level: int) -> list[sp.csr_matrix]:
    """Stiffness matrices ``[A_0, A_1, ..., A_9]`` on grid ``level``.

    ``A_0`` assembles the Laplacian over all elements (coefficient 1
    everywhere); ``A_mu`` assembles only the elements inside cookie
    ``mu``.  Dirichlet boundary rows/columns are eliminated.
    """
    grid = StructuredGrid(level)
    n = grid.inner_count
    rows: list[list[int]] = [[] for _ in range(N_PARAMS + 1)]
    cols: list[list[int]] = [[] for _ in range(N_PARAMS + 1)]
    vals: list[list[float]] = [[] for _ in range(N_PARAMS + 1)]

    for cy in range(grid.cells_per_side):
        for cx in range(grid.cells_per_side):
            corners = [(cx, cy), (cx + 1, cy), (cx + 1, cy + 1), (cx, cy + 1)]
            idx = [grid.inner_index(ix, iy) for ix, iy in corners]
            targets = [0]
            mu = _cell_in_cookie(grid, cx, cy)
            if mu is not None:
                targets.append(mu + 1)
            for a in range(4):
                if idx[a] is None:
                    continue
                for b in range(4):
                    if idx[b] is None:
                        continue
                    for t in targets:
                        rows[t].append(idx[a])
                        cols[t].append(idx[b])
                        vals[t].append(ELEMENT_STIFFNESS[a, b])

    return [
        sp.csr_matrix((vals[t], (rows[t], cols[t])), shape=(n, n))
        for t in range(N_PARAMS + 1)
    ]


def assemble_rhs(level: int) -> np.ndarray:
    """Consistent Q1 load vector for the unit source.

    Every element contributes ``h**2 / 4`` to each of its four nodes, so
    interior inner nodes carry the value ``h**2``.
    """
    grid = StructuredGrid(level)
    b = np.zeros(grid.inner_count)
    quarter = grid.h**2 / 4.0
    for cy in range(grid.cells_per_side):
        for cx in range(grid.cells_per_side):
            for ix, iy in [(cx, cy), (cx + 1, cy), (cx + 1, cy + 1), (cx, cy + 1)]:
                k = grid.inner_index(ix, iy)
                if k is not None:
                    b[k] += quarter
    return b


def prolongation(fine_level: int) -> sp.csr_matrix:
    """Bilinear interpolation from level ``fine_level - 1`` inner nodes.

    Coarse-coinciding fine nodes copy their value, edge midpoints average
    the two ends, cell centers average the four corners; contributions
    from Dirichlet boundary nodes drop out.  The restriction is the
    transpose, which with nested Q1 spaces satisfies the Galerkin
    identity against the directly assembled matrices.
    """
    if fine_level < 1:
        raise ValueError("prolongation needs a coarser level below")
    fine = StructuredGrid(fine_level)
    coarse = StructuredGrid(fine_level - 1)
    rows, cols, vals = [], [], []
    for iy in range(1, fine.inner_per_side + 1):
        for ix in range(1, fine.inner_per_side + 1):
            fi = fine.inner_index(ix, iy)
            xs = [ix // 2] if ix % 2 == 0 else [(ix - 1) // 2, (ix + 1) // 2]
            ys = [iy // 2] if iy % 2 == 0 else [(iy - 1) // 2, (iy + 1) // 2]
            w = 1.0 / (len(xs) * len(ys))
            for cyy in ys:
                for cxx in xs:
                    ci = coarse.inner_index(cxx, cyy)
                    if ci is not None:
                        rows.append(fi)
                        cols.append(ci)
                        vals.append(w)
    return sp.csr_matrix((vals, (rows, cols)),
                         shape=(fine.inner_count, coarse.inner_count))


def parameter_grid(points: int, lo: float = 0.5, hi: float = 1.5) -> np.ndarray:
    """Equidistant parameter sample values (default the unit interval
    around 1 used throughout the model problem)."""
    return np.linspace(lo, hi, points)


# -- tree-format operator and right-hand side ------------------------------


def _params_of(node) -> list[int]:
    return [mu for mu in node.dims if mu <= N_PARAMS]


def _contains_spatial(node) -> bool:
    return node.interval[1] == SPATIAL_DIM


def build_ht_operator(matrices: list[sp.csr_matrix], param_grids: list[np.ndarray],
                      compress: bool = True) -> HTOperator:
    """Tree-format operator of the affine family ``A_0 + sum alpha_mu A_mu``.

    With ``compress=False`` this is the plain rank-10 construction: each
    parameter leaf holds ten diagonal columns (all ones except column
    ``mu + 1``, which carries the parameter values), the spatial leaf
    holds ``A_0 .. A_9`` as sparse columns, and every transfer tensor is
    the identity-diagonal.

    With ``compress=True`` the redundant all-ones columns are removed
    exactly: parameter leaves keep rank 2 and each remaining node keeps
    one column for the partial sum absorbed so far plus one pass-through
    slot per parameter still outside its mode set, giving the minimal
    ranks of the affine family (at most 10, reached only at the spatial
    leaf).  Both variants represent the same operator exactly.
    """
    if len(param_grids) != N_PARAMS or len(matrices) != N_PARAMS + 1:
        raise ValueError("expected 9 parameter grids and 10 matrices")
    tree = build_balanced_tree(SPATIAL_DIM)
    if not compress:
        return _build_raw_operator(tree, matrices, param_grids)
    return _build_compressed_operator(tree, matrices, param_grids)


def _build_raw_operator(tree, matrices, param_grids) -> HTOperator:
    k = N_PARAMS + 1
    leaves: dict[int, list[GeneralizedMatrix]] = {}
    for mu in range(1, N_PARAMS + 1):
        grid = np.asarray(param_grids[mu - 1], dtype=float)
        cols = []
        for j in range(k):
            if j == mu:
                cols.append(GeneralizedMatrix.diagonal(grid))
            else:
                cols.append(GeneralizedMatrix.diagonal(np.ones(grid.size)))
        leaves[tree.leaf_for_dim(mu).index] = cols
    leaves[tree.leaf_for_dim(SPATIAL_DIM).index] = [
        GeneralizedMatrix.csr(m) for m in matrices
    ]
    diag = np.zeros((k, k, k))
    for j in range(k):
        diag[j, j, j] = 1.0
    transfer = {node.index: diag.copy() for node in tree.inner_nodes}
    return HTOperator(tree, leaves, transfer, np.eye(k))


def _build_compressed_operator(tree, matrices, param_grids) -> HTOperator:
    # Column labels per node: entry 0 is the combined/ones column, the
    # rest are parameter slots in ascending order.  For parameter-only
    # nodes the slots are the owned parameters; for spatial nodes the
    # parameters still *outside* the node.
    def labels(node) -> list[int]:
        if _contains_spatial(node):
            outside = [mu for mu in range(1, N_PARAMS + 1) if mu not in set(node.dims)]
            return [0] + outside
        return [0] + _params_of(node)

    leaves: dict[int, list[GeneralizedMatrix]] = {}
    for mu in range(1, N_PARAMS + 1):
        grid = np.asarray(param_grids[mu - 1], dtype=float)
        leaves[tree.leaf_for_dim(mu).index] = [
            GeneralizedMatrix.diagonal(np.ones(grid.size)),
            GeneralizedMatrix.diagonal(grid),
        ]
    leaves[tree.leaf_for_dim(SPATIAL_DIM).index] = [
        GeneralizedMatrix.csr(m) for m in matrices
    ]

    transfer: dict[int, np.ndarray] = {}
    root_matrix = None
    for node in tree.nodes:
        if node.is_leaf:
            continue
        s1, s2 = tree.sons(node.index)
        lab_t, lab_1, lab_2 = labels(node), labels(s1), labels(s2)
        pos_t = {m: i for i, m in enumerate(lab_t)}
        pos_1 = {m: i for i, m in enumerate(lab_1)}
        pos_2 = {m: i for i, m in enumerate(lab_2)}
        core = np.zeros((len(lab_t), len(lab_1), len(lab_2)))
        if _contains_spatial(s1):
            raise AssertionError("spatial dimension must sit in the right son")
        if _contains_spatial(node):
            # column 0 absorbs the left son's parameters into the partial sum
            core[0, 0, 0] = 1.0
            for mu in _params_of(s1):
                core[0, pos_1[mu], pos_2[mu]] = 1.0
            for nu in lab_t[1:]:
                core[pos_t[nu], 0, pos_2[nu]] = 1.0
        else:
            core[0, 0, 0] = 1.0
            for mu in _params_of(s1):
                core[pos_t[mu], pos_1[mu], 0] = 1.0
            for mu in _params_of(s2):
                core[pos_t[mu], 0, pos_2[mu]] = 1.0
        if node.is_root:
            root_matrix = core[0]
        else:
            transfer[node.index] = core
    return HTOperator(tree, leaves, transfer, root_matrix)


def build_rhs_htensor(rhs: np.ndarray, param_grids: list[np.ndarray]) -> HTensor:
    """Rank-1 right-hand side: ones on every parameter leaf, the load
    vector on the spatial leaf."""
    tree = build_balanced_tree(SPATIAL_DIM)
    leaves = {}
    for mu in range(1, N_PARAMS + 1):
        leaves[tree.leaf_for_dim(mu).index] = np.ones((len(param_grids[mu - 1]), 1))
    leaves[tree.leaf_for_dim(SPATIAL_DIM).index] = np.asarray(rhs, dtype=float).reshape(-1, 1)
    transfer = {node.index: np.ones((1, 1, 1)) for node in tree.inner_nodes}
    return HTensor(tree, leaves, transfer, np.ones((1, 1)))


@dataclass
class CookieLevel:
    """Assembled data of one grid level."""

    level: int
    matrices: list[sp.csr_matrix]
    rhs: np.ndarray
    prolong: sp.csr_matrix | None = None  # from the next coarser level

    @property
    def restrict(self) -> sp.csr_matrix | None:
        return None if self.prolong is None else self.prolong.T.tocsr()


def build_hierarchy(max_level: int) -> list[CookieLevel]:
    """Levels 0..max_level with per-level matrices, loads and transfers."""
    levels = []
    for level in range(max_level + 1):
        levels.append(CookieLevel(
            level=level,
            matrices=assemble_stiffness(level),
            rhs=assemble_rhs(level),
            prolong=prolongation(level) if level > 0 else None,
        ))
    return levels


def restrict_spatial(x: HTensor, restrict) -> HTensor:
    """Replace the spatial leaf frame by its restriction; no rank change
    and no communication (a single-leaf operation)."""
    return _spatial_map(x, restrict)


def prolongate_spatial(x: HTensor, prolong) -> HTensor:
    """Replace the spatial leaf frame by its prolongation."""
    return _spatial_map(x, prolong)


def _spatial_map(x: HTensor, matrix) -> HTensor:
    leaf = x.tree.leaf_for_dim(SPATIAL_DIM)
    leaves = dict(x.leaves)
    leaves[leaf.index] = np.asarray(matrix @ x.leaves[leaf.index])
    return HTensor(x.tree, leaves, x.transfer, x.root_matrix)


# -- evaluation over the parameter directions ------------------------------


def _upward_spatial_pass(x: HTensor, leaf_values: dict[int, np.ndarray]) -> np.ndarray:
    """Upward combination where parameter leaves contribute row vectors
    and the spatial subtree carries full spatial columns."""
    tree = x.tree
    values = dict(leaf_values)
    for level in reversed(tree.levels_top_down()):
        for idx in level:
            node = tree.node(idx)
            if node.is_leaf:
                continue
            v1, v2 = values[node.sons[0]], values[node.sons[1]]
            if node.is_root:
                return v2 @ (x.root_matrix.T @ v1)
            core = x.transfer[idx]
            if _contains_spatial(node):
                values[idx] = np.einsum("qjl,j,nl->nq", core, v1, v2)
            else:
                values[idx] = eval_inner_row(core, v1, v2)
    raise AssertionError("unreachable")


def extract_solution(x: HTensor, param_indices) -> np.ndarray:
    """Spatial vector at one parameter-index combination (0-based).

    Parameter leaves contribute one row each, the spatial leaf its full
    frame; the result is the corresponding linear combination of spatial
    frame columns.
    """
    tree = x.tree
    param_indices = tuple(int(i) for i in param_indices)
    if len(param_indices) != N_PARAMS:
        raise ValueError(f"need {N_PARAMS} parameter indices")
    leaf_values = {}
    for mu in range(1, N_PARAMS + 1):
        leaf = tree.leaf_for_dim(mu)
        frame = x.leaves[leaf.index]
        if not 0 <= param_indices[mu - 1] < frame.shape[0]:
            raise IndexError(f"parameter index {param_indices[mu - 1]} out of "
                             f"bounds for dimension {mu} of size {frame.shape[0]}")
        leaf_values[leaf.index] = frame[param_indices[mu - 1], :]
    leaf_values[tree.leaf_for_dim(SPATIAL_DIM).index] = x.leaves[
        tree.leaf_for_dim(SPATIAL_DIM).index]
    return _upward_spatial_pass(x, leaf_values)


def parameter_mean(x: HTensor, weights: list[np.ndarray] | None = None) -> np.ndarray:
    """Weighted contraction over all parameter grids (default uniform).

    With all weight mass on single indices this coincides with
    :func:`extract_solution` at those indices.
    """
    tree = x.tree
    leaf_values = {}
    for mu in range(1, N_PARAMS + 1):
        leaf = tree.leaf_for_dim(mu)
        frame = x.leaves[leaf.index]
        w = (np.full(frame.shape[0], 1.0 / frame.shape[0]) if weights is None
             else np.asarray(weights[mu - 1], dtype=float))
        if w.shape != (frame.shape[0],):
            raise ValueError(f"weight length {w.shape} mismatches dimension {mu} "
                             f"of size {frame.shape[0]}")
        leaf_values[leaf.index] = w @ frame
    leaf_values[tree.leaf_for_dim(SPATIAL_DIM).index] = x.leaves[
        tree.leaf_for_dim(SPATIAL_DIM).index]
    return _upward_spatial_pass(x, leaf_values)


def dense_parameter_matrix(matrices: list[sp.csr_matrix], alphas) -> np.ndarray:
    """Dense ``A(alpha)`` for one parameter combination (test oracle)."""
    out = matrices[0].toarray()
    for mu in range(N_PARAMS):
        out = out + float(alphas[mu]) * matrices[mu + 1].toarray()
    return out


# -- problem description files ---------------------------------------------


@dataclass
class CookieProblem:
    """Experiment description consumed by the CLI (JSON on disk)."""

    max_level: int = 0
    points_per_parameter: int = 10
    parameter_range: tuple[float, float] = (0.5, 1.5)
    caps: list[int] = field(default_factory=lambda: [20, 30, 40, 50])
    eps: float = 1e-4
    eps_stop: float = 1e-8
    max_cg_steps: int = 25
    cycles: int = 10
    smoothing_steps: int = 5
    lambda_min: float = 0.4
    coarse_max_cg_steps: int = 25
    coarse_eps_factor: float = 0.0

    @property
    def param_grids(self) -> list[np.ndarray]:
        lo, hi = self.parameter_range
        return [parameter_grid(self.points_per_parameter, lo, hi)
                for _ in range(N_PARAMS)]

    @staticmethod
    def from_file(path) -> "CookieProblem":
        with open(path, encoding="utf-8") as fh:
            raw = json.load(fh)
        known = {f for f in CookieProblem.__dataclass_fields__}
        unknown = set(raw) - known
        if unknown:
            raise ValueError(f"unknown problem fields: {sorted(unknown)}")
        if "parameter_range" in raw:
            raw["parameter_range"] = tuple(raw["parameter_range"])
        return CookieProblem(**raw)

    def to_file(self, path) -> None:
        data = {k: getattr(self, k) for k in self.__dataclass_fields__}
        data["parameter_range"] = list(data["parameter_range"])
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(data, fh, indent=2)
            fh.write("\n")
