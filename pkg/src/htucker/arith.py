"""Serial reference arithmetic for tree-format tensors.

Every operation is split into *node kernels* (the computation one tree
node performs on its own data plus what its neighbors hand it) and a
serial driver that walks the tree level by level.  The distributed
backend in :mod:`htucker.dist` reuses the identical node kernels, so the
two backends perform the same floating-point contractions in the same
order.

Conventions: transfer tensors are indexed ``B[i, j, l]`` with ``i`` the
node's own rank index and ``j, l`` the left/right son indices; composite
indices follow :mod:`htucker.kernels` (last mode fastest).
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .format import HTensor, HTOperator
from .kernels import (
    mode_multiply,
    reduced_qr,
    sym_eig_desc,
    transfer_dematricize_23,
    transfer_matricize_23,
)


@dataclass(frozen=True)
class TruncationControl:
    """How to pick the per-node target ranks when truncating.

    ``eps`` prescribes an absolute Frobenius-norm error bound for the
    whole truncation; the per-node budget is ``eps**2 / (2 d - 2)``, the
    standard split of the squared error over the ``2 d - 2`` non-root
    nodes.  ``max_rank`` caps the kept rank (one integer or a per-node-id
    dict) and may be combined with ``eps``.  At least one of the two must
    be set.
    """

    eps: float | None = None
    max_rank: int | dict | None = None

    def __post_init__(self):
        if self.eps is None and self.max_rank is None:
            raise ValueError("truncation needs eps and/or max_rank")
        if self.eps is not None and self.eps <= 0:
            raise ValueError("eps must be positive")

    @staticmethod
    def fixed_rank(max_rank) -> "TruncationControl":
        return TruncationControl(eps=None, max_rank=max_rank)

    @staticmethod
    def accuracy(eps: float, max_rank=None) -> "TruncationControl":
        return TruncationControl(eps=eps, max_rank=max_rank)

    def cap_for(self, node_id: int) -> int | None:
        if self.max_rank is None:
            return None
        if isinstance(self.max_rank, dict):
            return int(self.max_rank[node_id])
        return int(self.max_rank)


def select_rank(eigenvalues: np.ndarray, ctl: TruncationControl, node_id: int,
                non_root_count: int) -> int:
    """Kept rank for one node given the descending eigenvalues of its Gram.

    In accuracy mode keeps the smallest rank whose discarded eigenvalue
    tail stays within the per-node budget; a cap (if any) is applied on
    top.  Always keeps at least one column; ties at the cut keep the
    earlier column (the eigenvalues arrive stably sorted).
    """
    k = len(eigenvalues)
    if ctl.eps is None:
        r = k
    else:
        budget = ctl.eps**2 / non_root_count
        tails = np.concatenate([np.cumsum(eigenvalues[::-1])[::-1], [0.0]])
        r = int(np.searchsorted(-tails, -budget, side="left"))
    cap = ctl.cap_for(node_id)
    if cap is not None:
        r = min(r, cap)
    return max(1, min(r, k))


# ---------------------------------------------------------------------------
# node kernels (shared with the distributed backend)
# ---------------------------------------------------------------------------


def eval_inner_row(core: np.ndarray, row1: np.ndarray, row2: np.ndarray) -> np.ndarray:
    """Combine son frame rows into this node's frame row."""
    return np.einsum("qjl,j,l->q", core, row1, row2)


def eval_root(root_matrix: np.ndarray, row1: np.ndarray, row2: np.ndarray) -> float:
    return float(row1 @ root_matrix @ row2)


def phi_leaf(u: np.ndarray, v: np.ndarray) -> np.ndarray:
    return u.T @ v


def phi_inner(core_a: np.ndarray, core_c: np.ndarray,
              phi1: np.ndarray, phi2: np.ndarray) -> np.ndarray:
    """Inner-product matrix of one node from its sons' matrices.

    Three-stage contraction; each stage is quartic in the ranks, matching
    the per-node cost of the level-wise algorithm.
    """
    t1 = np.tensordot(core_a, phi1, axes=([1], [0]))  # (k_t, k_s2, kc_s1)
    t2 = np.tensordot(t1, phi2, axes=([1], [0]))      # (k_t, kc_s1, kc_s2)
    return np.tensordot(t2, core_c, axes=([1, 2], [1, 2]))


def phi_root(root_a: np.ndarray, root_c: np.ndarray,
             phi1: np.ndarray, phi2: np.ndarray) -> float:
    return float(np.sum((phi1.T @ root_a @ phi2) * root_c))


def orth_leaf(u: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    return reduced_qr(u)


def orth_inner(core: np.ndarray, r1: np.ndarray, r2: np.ndarray
               ) -> tuple[np.ndarray, np.ndarray]:
    """Absorb the sons' R factors, then re-orthonormalize this node.

    Returns the new transfer tensor (whose mode-(2,3) matricization has
    orthonormal columns) and the R factor to pass to the father.  The
    node rank may shrink to the structural bound ``k_s1 * k_s2``.
    """
    core = mode_multiply(core, 2, r1)
    core = mode_multiply(core, 3, r2)
    q, r = reduced_qr(transfer_matricize_23(core))
    return transfer_dematricize_23(q, r1.shape[0], r2.shape[0]), r


def orth_root(root_matrix: np.ndarray, r1: np.ndarray, r2: np.ndarray) -> np.ndarray:
    return r1 @ root_matrix @ r2.T


def gram_children(core: np.ndarray, gram: np.ndarray
                  ) -> tuple[np.ndarray, np.ndarray]:
    """Reduced Gram matrices of the two sons from the node's own.

    The root seeds the recursion with the 1x1 Gram ``[[1]]`` and its
    coupling matrix viewed as a ``(1, k_t1, k_t2)`` transfer tensor.
    """
    t1 = np.tensordot(gram, core, axes=([1], [0]))          # (k_t, k1, k2)
    g1 = np.tensordot(core, t1, axes=([0, 2], [0, 2]))      # (k1, k1)
    g2 = np.tensordot(core, t1, axes=([0, 1], [0, 1]))      # (k2, k2)
    return (g1 + g1.T) / 2.0, (g2 + g2.T) / 2.0


def truncate_inner(core: np.ndarray, q_own: np.ndarray,
                   q1: np.ndarray, q2: np.ndarray) -> np.ndarray:
    """Rotate-and-crop a transfer tensor with truncated eigenvector blocks.

    All three factors are orthogonal columns, so the son-side inverses of
    the frame transformation are plain transposes.
    """
    core = mode_multiply(core, 1, q_own.T)
    core = mode_multiply(core, 2, q1.T)
    return mode_multiply(core, 3, q2.T)


def add_leaf(u: np.ndarray, v: np.ndarray) -> np.ndarray:
    return np.concatenate([u, v], axis=1)


def add_inner(core_a: np.ndarray, core_c: np.ndarray) -> np.ndarray:
    ka, ja, la = core_a.shape
    kc, jc, lc = core_c.shape
    out = np.zeros((ka + kc, ja + jc, la + lc))
    out[:ka, :ja, :la] = core_a
    out[ka:, ja:, la:] = core_c
    return out


def add_root(root_a: np.ndarray, root_c: np.ndarray) -> np.ndarray:
    ja, la = root_a.shape
    jc, lc = root_c.shape
    out = np.zeros((ja + jc, la + lc))
    out[:ja, :la] = root_a
    out[ja:, la:] = root_c
    return out


def apply_leaf(columns, u: np.ndarray) -> np.ndarray:
    """Leaf frame of an operator-tensor product.

    Output column ``(r, l)`` (operator index ``r`` slow) is operator
    column ``r`` applied to frame column ``l``.
    """
    return np.concatenate([w.matmat(u) for w in columns], axis=1)


def apply_inner(core_op: np.ndarray, core: np.ndarray) -> np.ndarray:
    """Kronecker transfer tensor of a product, operator index slow."""
    kp, kq, kr = core_op.shape
    ki, kj, kl = core.shape
    out = np.einsum("pqr,ijl->piqjrl", core_op, core)
    return out.reshape(kp * ki, kq * kj, kr * kl)


def apply_root(root_op: np.ndarray, root_matrix: np.ndarray) -> np.ndarray:
    return np.kron(root_op, root_matrix)


# ---------------------------------------------------------------------------
# serial drivers
# ---------------------------------------------------------------------------


def evaluate_entry(tensor: HTensor, index) -> float:
    """Evaluate one tensor entry (0-based multi-index).

    Leaf rows are selected and combined upward through the transfer
    tensors; cubic in the ranks per node.
    """
    tree = tensor.tree
    index = tuple(int(i) for i in index)
    shape = tensor.shape
    if len(index) != tree.d or any(not 0 <= i < n for i, n in zip(index, shape)):
        raise IndexError(f"index {index} out of bounds for shape {shape}")
    rows: dict[int, np.ndarray] = {}
    for level in reversed(tree.levels_top_down()):
        for idx in level:
            node = tree.node(idx)
            if node.is_leaf:
                rows[idx] = tensor.leaves[idx][index[node.dim - 1], :]
            elif node.is_root:
                return eval_root(tensor.root_matrix, rows[node.sons[0]], rows[node.sons[1]])
            else:
                rows[idx] = eval_inner_row(tensor.transfer[idx],
                                           rows[node.sons[0]], rows[node.sons[1]])
    raise AssertionError("unreachable")


def inner_product(a: HTensor, c: HTensor) -> float:
    """Entrywise inner product of two tensors on the same tree.

    The leaf sizes must match; the ranks may differ.
    """
    _check_compatible(a, c)
    tree = a.tree
    phis: dict[int, np.ndarray] = {}
    for level in reversed(tree.levels_top_down()):
        for idx in level:
            node = tree.node(idx)
            if node.is_leaf:
                phis[idx] = phi_leaf(a.leaves[idx], c.leaves[idx])
            elif node.is_root:
                return phi_root(a.root_matrix, c.root_matrix,
                                phis[node.sons[0]], phis[node.sons[1]])
            else:
                phis[idx] = phi_inner(a.transfer[idx], c.transfer[idx],
                                      phis[node.sons[0]], phis[node.sons[1]])
    raise AssertionError("unreachable")


def norm(a: HTensor) -> float:
    """Frobenius norm; clamps round-off-negative squared norms to zero."""
    return math.sqrt(max(0.0, inner_product(a, a)))


def orthogonalize(a: HTensor) -> HTensor:
    """Re-represent the same tensor with orthonormal non-root frames.

    Leaves are QR-factorized, the R factors travel to the fathers, inner
    nodes absorb them and QR-factorize their own mode-(2,3) matricization,
    and the root absorbs the final two factors.  Ranks can only shrink.
    """
    tree = a.tree
    leaves: dict[int, np.ndarray] = {}
    transfer: dict[int, np.ndarray] = {}
    rfactors: dict[int, np.ndarray] = {}
    root_matrix = a.root_matrix
    for level in reversed(tree.levels_top_down()):
        for idx in level:
            node = tree.node(idx)
            if node.is_leaf:
                leaves[idx], rfactors[idx] = orth_leaf(a.leaves[idx])
            elif node.is_root:
                root_matrix = orth_root(a.root_matrix,
                                        rfactors[node.sons[0]], rfactors[node.sons[1]])
            else:
                transfer[idx], rfactors[idx] = orth_inner(
                    a.transfer[idx], rfactors[node.sons[0]], rfactors[node.sons[1]])
    return HTensor(tree, leaves, transfer, root_matrix, orthogonal=True)


def compute_bhat(a: HTensor) -> dict[int, np.ndarray]:
    """Reduced Gram matrix per non-root node, computed root-downward.

    Requires an orthogonal tensor: only then do the eigenpairs of these
    matrices give the singular values and right-rotations of the node
    matricizations.  The root seeds the recursion with the scalar 1.
    """
    if not a.orthogonal:
        raise ValueError("tensor is not orthogonal; call orthogonalize() first")
    tree = a.tree
    bhat: dict[int, np.ndarray] = {}
    for level in tree.levels_top_down():
        for idx in level:
            node = tree.node(idx)
            if node.is_leaf:
                continue
            if node.is_root:
                core = a.root_matrix[None, :, :]
                own = np.ones((1, 1))
            else:
                core = a.transfer[idx]
                own = bhat[idx]
            bhat[node.sons[0]], bhat[node.sons[1]] = gram_children(core, own)
    return bhat


def truncate(a: HTensor, ctl: TruncationControl) -> HTensor:
    """Truncate down to lower ranks, orthogonalizing first if needed.

    Per non-root node the reduced Gram matrix is eigendecomposed, the
    kept rank chosen by ``ctl``, and the truncated eigenvector blocks are
    applied: leaves rotate their frames, inner nodes rotate-and-crop
    their transfer tensors, the root absorbs its sons' blocks.  The
    result is generally *not* orthogonal.
    """
    if not a.orthogonal:
        a = orthogonalize(a)
    tree = a.tree
    bhat = compute_bhat(a)
    non_root_count = len(tree.nodes) - 1
    qs: dict[int, np.ndarray] = {}
    for node in tree.non_root:
        q, lam = sym_eig_desc(bhat[node.index])
        r = select_rank(lam, ctl, node.index, non_root_count)
        qs[node.index] = q[:, :r]
    leaves = {leaf.index: a.leaves[leaf.index] @ qs[leaf.index] for leaf in tree.leaves}
    transfer = {
        node.index: truncate_inner(a.transfer[node.index], qs[node.index],
                                   qs[node.sons[0]], qs[node.sons[1]])
        for node in tree.inner_nodes
    }
    t1, t2 = tree.root.sons
    root_matrix = qs[t1].T @ a.root_matrix @ qs[t2]
    return HTensor(tree, leaves, transfer, root_matrix, orthogonal=False)


def add(a: HTensor, c: HTensor) -> HTensor:
    """Representation of ``a + c``: frames concatenate, transfers embed
    block-diagonally.  No floating-point arithmetic is performed and the
    ranks add exactly node by node."""
    _check_compatible(a, c)
    tree = a.tree
    leaves = {leaf.index: add_leaf(a.leaves[leaf.index], c.leaves[leaf.index])
              for leaf in tree.leaves}
    transfer = {node.index: add_inner(a.transfer[node.index], c.transfer[node.index])
                for node in tree.inner_nodes}
    return HTensor(tree, leaves, transfer, add_root(a.root_matrix, c.root_matrix))


def scale(a: HTensor, alpha: float) -> HTensor:
    """Scale by ``alpha`` (applied to the root matrix; ranks unchanged)."""
    return HTensor(tree=a.tree, leaves=a.leaves, transfer=a.transfer,
                   root_matrix=alpha * a.root_matrix, orthogonal=a.orthogonal)


def subtract(a: HTensor, c: HTensor) -> HTensor:
    return add(a, scale(c, -1.0))


def apply_operator(op: HTOperator, a: HTensor) -> HTensor:
    """Apply a tree-format operator: ranks multiply node by node.

    Leaf frames become column-wise operator images; every transfer tensor
    is the Kronecker product of the operator's and the tensor's (operator
    rank index slow), materialized eagerly.
    """
    tree = a.tree
    if op.tree.d != tree.d:
        raise ValueError(f"operator dimension {op.tree.d} != tensor dimension {tree.d}")
    if op.col_sizes != a.shape:
        raise ValueError(f"operator column sizes {op.col_sizes} do not match tensor "
                         f"shape {a.shape}")
    leaves = {leaf.index: apply_leaf(op.leaves[leaf.index], a.leaves[leaf.index])
              for leaf in tree.leaves}
    transfer = {node.index: apply_inner(op.transfer[node.index], a.transfer[node.index])
                for node in tree.inner_nodes}
    return HTensor(tree, leaves, transfer, apply_root(op.root_matrix, a.root_matrix))


def _check_compatible(a: HTensor, c: HTensor) -> None:
    if a.tree.d != c.tree.d:
        raise ValueError(f"tensor dimensions differ: {a.tree.d} vs {c.tree.d}")
    if a.shape != c.shape:
        raise ValueError(f"tensor shapes differ: {a.shape} vs {c.shape}")
