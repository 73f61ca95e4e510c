"""Tensor and operator containers in the hierarchical low-rank tree format.

An :class:`HTensor` stores, over a shared :class:`~htucker.tree.DimensionTree`,

* one explicit frame ``U`` of shape ``(n_mu, k)`` per leaf,
* one transfer tensor ``B`` of shape ``(k_t, k_s1, k_s2)`` per inner node,
* one root matrix of shape ``(k_t1, k_t2)`` (the root rank is implicitly 1).

The column ``i`` of a non-leaf node's (never materialized) frame is the
linear combination ``sum_{j,l} B[i, j, l] * (U_s1[:, j] (x) U_s2[:, l])`` of
Kronecker products of its sons' frame columns; expanding this recursively
from the leaves reconstructs the full tensor (:func:`to_dense`).

An :class:`HTOperator` has the same tree structure, but each leaf frame
column is a :class:`GeneralizedMatrix` acting ``R^{n_mu} -> R^{m_mu}``, so
sparse stiffness matrices and diagonal parameter actions are stored without
densifying.

Tensors are immutable by convention: all arithmetic produces new values.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp

from .tree import DimensionTree, build_balanced_tree

DENSE_CAP_DEFAULT = 10**7

_MAGIC = b"HT01"


class ParseError(ValueError):
    """Raised on malformed serialized tensors; carries the byte offset."""

    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (byte offset {offset})")
        self.offset = offset


def _as_f64(arr) -> np.ndarray:
    out = np.asarray(arr, dtype=np.float64)
    return out


class HTensor:
    """A tensor in hierarchical low-rank tree format.

    Attributes:
        tree: the shared dimension tree.
        leaves: leaf frames keyed by node id, each ``(n_mu, k_leaf)``.
        transfer: transfer tensors keyed by inner node id.
        root_matrix: the ``(k_t1, k_t2)`` coupling matrix of the root sons.
        orthogonal: cached flag; True promises every non-root frame has
            orthonormal columns.
    """

    def __init__(
        self,
        tree: DimensionTree,
        leaves: dict[int, np.ndarray],
        transfer: dict[int, np.ndarray],
        root_matrix: np.ndarray,
        orthogonal: bool = False,
    ):
        self.tree = tree
        self.leaves = {i: _as_f64(u) for i, u in leaves.items()}
        self.transfer = {i: _as_f64(b) for i, b in transfer.items()}
        self.root_matrix = _as_f64(root_matrix)
        self.orthogonal = orthogonal
        self.validate()

    # -- structure ---------------------------------------------------------

    def rank(self, node_id: int) -> int:
        node = self.tree.node(node_id)
        if node.is_root:
            return 1
        if node.is_leaf:
            return self.leaves[node_id].shape[1]
        return self.transfer[node_id].shape[0]

    @property
    def ranks(self) -> dict[int, int]:
        """Representation rank per non-root node id."""
        return {n.index: self.rank(n.index) for n in self.tree.non_root}

    @property
    def max_rank(self) -> int:
        return max(self.ranks.values())

    @property
    def shape(self) -> tuple[int, ...]:
        return tuple(self.leaves[self.tree.leaf_for_dim(mu).index].shape[0]
                     for mu in range(1, self.tree.d + 1))

    def validate(self) -> None:
        """Check the shape-chaining invariant along every tree edge."""
        tree = self.tree
        for node in tree.nodes:
            if node.is_leaf:
                if node.index not in self.leaves:
                    raise ValueError(f"missing leaf frame for node {node.index}")
                continue
            s1, s2 = tree.sons(node.index)
            k1, k2 = self.rank(s1.index), self.rank(s2.index)
            if node.is_root:
                got = self.root_matrix.shape
            else:
                got = self.transfer[node.index].shape[1:]
            if got != (k1, k2):
                raise ValueError(
                    f"rank chain broken at node {node.index}: transfer sees {got}, "
                    f"sons have ranks ({k1}, {k2})"
                )

    def copy(self) -> "HTensor":
        return HTensor(
            self.tree,
            {i: u.copy() for i, u in self.leaves.items()},
            {i: b.copy() for i, b in self.transfer.items()},
            self.root_matrix.copy(),
            orthogonal=self.orthogonal,
        )

    def __repr__(self) -> str:
        return (f"HTensor(d={self.tree.d}, shape={self.shape}, "
                f"max_rank={self.max_rank}, orthogonal={self.orthogonal})")


@dataclass(frozen=True)
class GeneralizedMatrix:
    """A linear map ``R^n -> R^m`` stored as dense, diagonal or sparse CSR.

    The diagonal variant is square by construction; CSR data is held as a
    ``scipy.sparse.csr_matrix`` with sorted, in-bounds indices.
    """

    kind: str  # "dense" | "diagonal" | "csr"
    data: object

    @staticmethod
    def dense(mat) -> "GeneralizedMatrix":
        return GeneralizedMatrix("dense", _as_f64(mat))

    @staticmethod
    def diagonal(vec) -> "GeneralizedMatrix":
        return GeneralizedMatrix("diagonal", _as_f64(vec).ravel())

    @staticmethod
    def csr(mat) -> "GeneralizedMatrix":
        m = sp.csr_matrix(mat, dtype=np.float64)
        m.sort_indices()
        return GeneralizedMatrix("csr", m)

    @property
    def shape(self) -> tuple[int, int]:
        if self.kind == "diagonal":
            n = self.data.shape[0]
            return (n, n)
        return self.data.shape

    def matmat(self, block: np.ndarray) -> np.ndarray:
        """Apply to the columns of ``block`` (shape ``(n, k)``)."""
        if self.kind == "diagonal":
            return self.data[:, None] * block
        if self.kind == "csr":
            return np.asarray(self.data @ block)
        return self.data @ block

    def to_dense(self) -> np.ndarray:
        if self.kind == "diagonal":
            return np.diag(self.data)
        if self.kind == "csr":
            return self.data.toarray()
        return np.asarray(self.data)


class HTOperator:
    """A linear operator in the same tree format as :class:`HTensor`.

    Leaf node ``mu`` stores a list of :class:`GeneralizedMatrix` columns,
    all with one shared shape ``(m_mu, n_mu)``; transfer tensors and the
    root matrix work exactly as for tensors.
    """

    def __init__(
        self,
        tree: DimensionTree,
        leaves: dict[int, list[GeneralizedMatrix]],
        transfer: dict[int, np.ndarray],
        root_matrix: np.ndarray,
    ):
        self.tree = tree
        self.leaves = leaves
        self.transfer = {i: _as_f64(b) for i, b in transfer.items()}
        self.root_matrix = _as_f64(root_matrix)
        self.validate()

    def rank(self, node_id: int) -> int:
        node = self.tree.node(node_id)
        if node.is_root:
            return 1
        if node.is_leaf:
            return len(self.leaves[node_id])
        return self.transfer[node_id].shape[0]

    @property
    def ranks(self) -> dict[int, int]:
        return {n.index: self.rank(n.index) for n in self.tree.non_root}

    def leaf_shape(self, node_id: int) -> tuple[int, int]:
        return self.leaves[node_id][0].shape

    @property
    def row_sizes(self) -> tuple[int, ...]:
        return tuple(self.leaf_shape(self.tree.leaf_for_dim(mu).index)[0]
                     for mu in range(1, self.tree.d + 1))

    @property
    def col_sizes(self) -> tuple[int, ...]:
        return tuple(self.leaf_shape(self.tree.leaf_for_dim(mu).index)[1]
                     for mu in range(1, self.tree.d + 1))

    def validate(self) -> None:
        tree = self.tree
        for node in tree.nodes:
            if node.is_leaf:
                cols = self.leaves.get(node.index)
                if not cols:
                    raise ValueError(f"missing leaf columns for node {node.index}")
                shapes = {c.shape for c in cols}
                if len(shapes) != 1:
                    raise ValueError(f"leaf {node.index} mixes column shapes {shapes}")
                continue
            s1, s2 = tree.sons(node.index)
            k1, k2 = self.rank(s1.index), self.rank(s2.index)
            got = self.root_matrix.shape if node.is_root else self.transfer[node.index].shape[1:]
            if got != (k1, k2):
                raise ValueError(
                    f"rank chain broken at operator node {node.index}: {got} vs ({k1}, {k2})"
                )

    def __repr__(self) -> str:
        return (f"HTOperator(d={self.tree.d}, rows={self.row_sizes}, "
                f"cols={self.col_sizes}, max_rank={max(self.ranks.values())})")


# -- constructors --------------------------------------------------------


def _uniform_ranks(tree: DimensionTree, k) -> dict[int, int]:
    if isinstance(k, dict):
        return {n.index: int(k[n.index]) for n in tree.non_root}
    return {n.index: int(k) for n in tree.non_root}


def _leaf_sizes(tree: DimensionTree, n) -> dict[int, int]:
    if np.isscalar(n):
        return {leaf.index: int(n) for leaf in tree.leaves}
    sizes = list(n)
    if len(sizes) != tree.d:
        raise ValueError(f"need {tree.d} leaf sizes, got {len(sizes)}")
    return {tree.leaf_for_dim(mu).index: int(sizes[mu - 1]) for mu in range(1, tree.d + 1)}


def random_htensor(tree: DimensionTree, n, k, seed: int) -> HTensor:
    """Random tensor with i.i.d. uniform ``[-1, 1]`` entries.

    Uses numpy's PCG64 generator seeded with ``seed``: the same seed gives
    a bit-identical tensor.  ``n`` is one size or a per-dimension list;
    ``k`` is one rank or a per-node-id dict (root excluded).
    """
    rng = np.random.default_rng(np.random.PCG64(seed))
    ranks = _uniform_ranks(tree, k)
    sizes = _leaf_sizes(tree, n)
    leaves: dict[int, np.ndarray] = {}
    transfer: dict[int, np.ndarray] = {}
    for node in tree.nodes:
        if node.is_leaf:
            n_mu, k_mu = sizes[node.index], ranks[node.index]
            if k_mu > n_mu:
                raise ValueError(f"leaf rank {k_mu} exceeds size {n_mu} at node {node.index}")
            leaves[node.index] = rng.uniform(-1.0, 1.0, size=(n_mu, k_mu))
            continue
        s1, s2 = tree.sons(node.index)
        k1, k2 = ranks[s1.index], ranks[s2.index]
        if node.is_root:
            root_matrix = rng.uniform(-1.0, 1.0, size=(k1, k2))
            continue
        k_t = ranks[node.index]
        if k_t > k1 * k2:
            raise ValueError(
                f"rank {k_t} at node {node.index} exceeds structural bound {k1 * k2}"
            )
        transfer[node.index] = rng.uniform(-1.0, 1.0, size=(k_t, k1, k2))
    return HTensor(tree, leaves, transfer, root_matrix)


def random_htoperator(tree: DimensionTree, m, n, k, seed: int) -> HTOperator:
    """Random operator with dense leaf columns; used by tests and benchmarks."""
    rng = np.random.default_rng(np.random.PCG64(seed))
    ranks = _uniform_ranks(tree, k)
    rows = _leaf_sizes(tree, m)
    cols = _leaf_sizes(tree, n)
    leaves: dict[int, list[GeneralizedMatrix]] = {}
    transfer: dict[int, np.ndarray] = {}
    for node in tree.nodes:
        if node.is_leaf:
            leaves[node.index] = [
                GeneralizedMatrix.dense(
                    rng.uniform(-1.0, 1.0, size=(rows[node.index], cols[node.index]))
                )
                for _ in range(ranks[node.index])
            ]
            continue
        s1, s2 = tree.sons(node.index)
        k1, k2 = ranks[s1.index], ranks[s2.index]
        if node.is_root:
            root_matrix = rng.uniform(-1.0, 1.0, size=(k1, k2))
            continue
        transfer[node.index] = rng.uniform(-1.0, 1.0, size=(ranks[node.index], k1, k2))
    return HTOperator(tree, leaves, transfer, root_matrix)


def identity_htoperator(tree: DimensionTree, n) -> HTOperator:
    """The rank-1 identity operator (diagonal ones at every leaf)."""
    sizes = _leaf_sizes(tree, n)
    leaves = {leaf.index: [GeneralizedMatrix.diagonal(np.ones(sizes[leaf.index]))]
              for leaf in tree.leaves}
    transfer = {node.index: np.ones((1, 1, 1)) for node in tree.inner_nodes}
    return HTOperator(tree, leaves, transfer, np.ones((1, 1)))


# -- dense reconstruction -------------------------------------------------


def to_dense(tensor: HTensor, cap: int = DENSE_CAP_DEFAULT) -> np.ndarray:
    """Expand to a full ``numpy`` array (the brute-force test oracle).

    Refuses when the entry count exceeds ``cap`` (default ``1e7``): the
    dense expansion is for desk-scale validation only.
    """
    total = int(np.prod(tensor.shape, dtype=np.int64))
    if total > cap:
        raise ValueError(f"dense expansion of {total} entries exceeds cap {cap}")
    frames = _expanded_frames(tensor, up_to_root=True)
    return frames[0].reshape(tensor.shape)


def _expanded_frames(tensor: HTensor, up_to_root: bool = False) -> dict[int, np.ndarray]:
    """Explicit frames ``U_t`` per node id, bottom-up.

    For node ``t`` spanning sizes ``(n_a, ..., n_b)`` the frame has shape
    ``(n_a * ... * n_b, k_t)`` with the composite row index in the global
    convention.  With ``up_to_root`` the root entry holds the full tensor
    as one column.
    """
    tree = tensor.tree
    frames: dict[int, np.ndarray] = {}
    for level in reversed(tree.levels_top_down()):
        for idx in level:
            node = tree.node(idx)
            if node.is_leaf:
                frames[idx] = tensor.leaves[idx]
                continue
            s1, s2 = node.sons
            u1, u2 = frames[s1], frames[s2]
            if node.is_root:
                if not up_to_root:
                    continue
                full = np.einsum("jl,aj,bl->ab", tensor.root_matrix, u1, u2)
                frames[idx] = full.reshape(-1, 1)
                continue
            core = tensor.transfer[idx]
            frames[idx] = np.einsum("qjl,aj,bl->abq", core, u1, u2).reshape(
                u1.shape[0] * u2.shape[0], core.shape[0]
            )
    return frames


def operator_to_dense_matrix(op: HTOperator, cap: int = DENSE_CAP_DEFAULT) -> np.ndarray:
    """Expand an operator to its full ``(prod m, prod n)`` matrix (oracle).

    Internally views the operator as a plain tensor over the paired
    ``(row, col)`` leaf indices (row slower), expands it densely and
    unshuffles the pairs into matrix form.
    """
    rows, cols = op.row_sizes, op.col_sizes
    total = int(np.prod([m * n for m, n in zip(rows, cols)], dtype=np.int64))
    if total > cap:
        raise ValueError(f"dense operator of {total} entries exceeds cap {cap}")
    leaves = {}
    for leaf in op.tree.leaves:
        stacked = [gm.to_dense().reshape(-1) for gm in op.leaves[leaf.index]]
        leaves[leaf.index] = np.stack(stacked, axis=1)
    paired = HTensor(op.tree, leaves, op.transfer, op.root_matrix)
    dense = to_dense(paired, cap=cap)
    d = op.tree.d
    interleaved = dense.reshape([s for mn in zip(rows, cols) for s in mn])
    perm = list(range(0, 2 * d, 2)) + list(range(1, 2 * d, 2))
    return interleaved.transpose(perm).reshape(int(np.prod(rows)), int(np.prod(cols)))


# -- construction from a dense tensor -------------------------------------


def hosvd_from_dense(dense: np.ndarray, tree: DimensionTree, ranks=None) -> HTensor:
    """Hierarchical SVD of a dense tensor down to ``ranks``.

    Per non-root node the frame is taken as the top left singular vectors
    of the node's matricization (singular values descending); transfer
    tensors are the Kronecker-basis projections of the father frames onto
    the sons, and the root matrix is the projection of the full tensor.
    Requested ranks above the available matrix rank are clamped.

    ``ranks`` is one integer, a per-node-id dict, or None for exact
    (full-rank) decomposition.  The result is orthogonal by construction.
    """
    from .kernels import matricize

    dense = _as_f64(dense)
    if dense.ndim != tree.d:
        raise ValueError(f"tensor has {dense.ndim} dimensions, tree expects {tree.d}")
    want = _uniform_ranks(tree, ranks) if ranks is not None else None

    frames: dict[int, np.ndarray] = {}
    actual: dict[int, int] = {}
    for node in tree.non_root:
        mat = matricize(dense, set(node.dims))
        u, sigma, _ = np.linalg.svd(mat, full_matrices=False)
        avail = min(mat.shape)
        r = avail if want is None else min(want[node.index], avail)
        r = max(1, r)
        frames[node.index] = u[:, :r]
        actual[node.index] = r

    leaves = {leaf.index: frames[leaf.index] for leaf in tree.leaves}
    transfer: dict[int, np.ndarray] = {}
    for node in tree.inner_nodes:
        s1, s2 = node.sons
        n1 = frames[s1].shape[0]
        n2 = frames[s2].shape[0]
        u_t = frames[node.index].reshape(n1, n2, actual[node.index])
        transfer[node.index] = np.einsum("abi,aj,bl->ijl", u_t, frames[s1], frames[s2])
    t1, t2 = tree.root.sons
    full = matricize(dense, set(tree.node(t1).dims))
    root_matrix = frames[t1].T @ full @ frames[t2]
    return HTensor(tree, leaves, transfer, root_matrix, orthogonal=True)


# -- storage and serialization --------------------------------------------


def storage_size(tensor: HTensor) -> int:
    """Number of stored floats: ``sum n_mu k_mu + sum k_t k_s1 k_s2 + k_t1 k_t2``."""
    count = sum(u.size for u in tensor.leaves.values())
    count += sum(b.size for b in tensor.transfer.values())
    count += tensor.root_matrix.size
    return int(count)


def serialized_size(tensor: HTensor) -> int:
    """Exact byte length of :func:`serialize` output.

    16-byte header, then the leaf-size and rank index tables, then the
    float payload.
    """
    d = tensor.tree.d
    return 16 + 8 * d + 8 * (2 * d - 1) + 8 * storage_size(tensor)


def serialize(tensor: HTensor) -> bytes:
    """Serialize to the binary tensor-file format.

    Layout (all little-endian): magic ``HT01``; u32 ``d``; u64 reserved
    zero (pads the header to 16 bytes); ``d`` u64 leaf sizes in dimension
    order; ``2d - 1`` u64 ranks in breadth-first node-id order (root entry
    is 1); the node arrays in id order as f64 -- matrices column-major,
    transfer tensors with mode 1 fastest.
    """
    tree = tensor.tree
    d = tree.d
    out = bytearray()
    out += _MAGIC
    out += struct.pack("<I", d)
    out += struct.pack("<Q", 0)
    for mu in range(1, d + 1):
        out += struct.pack("<Q", tensor.leaves[tree.leaf_for_dim(mu).index].shape[0])
    for node in tree.nodes:
        out += struct.pack("<Q", tensor.rank(node.index))
    for node in tree.nodes:
        if node.is_root:
            arr = tensor.root_matrix
        elif node.is_leaf:
            arr = tensor.leaves[node.index]
        else:
            arr = tensor.transfer[node.index]
        out += arr.ravel(order="F").astype("<f8").tobytes()
    return bytes(out)


def deserialize(blob: bytes) -> HTensor:
    """Inverse of :func:`serialize`; raises :class:`ParseError` with the
    byte offset of the first problem."""
    if len(blob) < 4 or blob[:4] != _MAGIC:
        raise ParseError("bad magic", 0)
    if len(blob) < 16:
        raise ParseError("truncated header", len(blob))
    (d,) = struct.unpack_from("<I", blob, 4)
    if d < 2:
        raise ParseError(f"invalid dimension {d}", 4)
    tree = build_balanced_tree(d)
    offset = 16
    need = 8 * d + 8 * (2 * d - 1)
    if len(blob) < offset + need:
        raise ParseError("truncated index tables", len(blob))
    sizes = list(struct.unpack_from(f"<{d}Q", blob, offset))
    offset += 8 * d
    ranks = list(struct.unpack_from(f"<{2 * d - 1}Q", blob, offset))
    offset += 8 * (2 * d - 1)
    if ranks[0] != 1:
        raise ParseError(f"root rank must be 1, found {ranks[0]}", offset - 8 * (2 * d - 1))

    def read(shape: tuple[int, ...]) -> np.ndarray:
        nonlocal offset
        count = int(np.prod(shape))
        nbytes = 8 * count
        if len(blob) < offset + nbytes:
            raise ParseError("truncated payload", len(blob))
        arr = np.frombuffer(blob, dtype="<f8", count=count, offset=offset)
        offset += nbytes
        return arr.reshape(shape, order="F").copy()

    leaves: dict[int, np.ndarray] = {}
    transfer: dict[int, np.ndarray] = {}
    root_matrix = None
    for node in tree.nodes:
        if node.is_root:
            s1, s2 = node.sons
            root_matrix = read((ranks[s1], ranks[s2]))
        elif node.is_leaf:
            leaves[node.index] = read((sizes[node.dim - 1], ranks[node.index]))
        else:
            s1, s2 = node.sons
            transfer[node.index] = read((ranks[node.index], ranks[s1], ranks[s2]))
    if offset != len(blob):
        raise ParseError(f"{len(blob) - offset} trailing bytes", offset)
    return HTensor(tree, leaves, transfer, root_matrix)
