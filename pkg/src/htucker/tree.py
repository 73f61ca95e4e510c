"""Balanced binary dimension trees over the mode set ``{1, ..., d}``.

Every other part of the library (tensor storage, the distributed worker
topology, the solvers) is built on top of one shared tree per dimension
``d``.  A node of the tree owns a contiguous interval of modes; a non-leaf
node splits its interval ``{mu, ..., nu}`` at ``floor((mu + nu - 1) / 2)``,
which minimizes the number of tree levels: the depth is ``ceil(log2(d))``.

Node ids are assigned breadth first (root = 0, each level left to right),
so level-wise scheduling and wire messages can address nodes by a plain
integer without ever transmitting intervals.
"""

from __future__ import annotations

from dataclasses import dataclass


@dataclass(frozen=True)
class TreeNode:
    """One node of a dimension tree.

    ``interval`` is the inclusive mode range ``(mu, nu)`` with 1-based
    modes.  ``sons`` is ``None`` for leaves, otherwise the (left, right)
    node ids.  ``father`` is ``None`` only for the root.
    """

    index: int
    interval: tuple[int, int]
    father: int | None
    sons: tuple[int, int] | None
    level: int

    @property
    def is_leaf(self) -> bool:
        return self.sons is None

    @property
    def is_root(self) -> bool:
        return self.father is None

    @property
    def dims(self) -> range:
        """The modes owned by this node, as a 1-based range."""
        return range(self.interval[0], self.interval[1] + 1)

    @property
    def dim(self) -> int:
        """The single mode of a leaf node."""
        if not self.is_leaf:
            raise ValueError(f"node {self.index} is not a leaf")
        return self.interval[0]


def _split(mu: int, nu: int) -> int:
    # balanced split point of {mu, ..., nu}
    return (mu + nu - 1) // 2


class DimensionTree:
    """Balanced dimension tree for tensors of dimension ``d >= 2``.

    Immutable after construction; safe to share across threads.
    """

    def __init__(self, d: int):
        if d < 2:
            raise ValueError(f"tensor dimension must be >= 2, got {d}")
        self.d = d
        self.nodes: list[TreeNode] = []
        self._build()
        self.depth = max(n.level for n in self.nodes)
        self._levels: list[list[int]] = [[] for _ in range(self.depth + 1)]
        for n in self.nodes:
            self._levels[n.level].append(n.index)
        self._leaf_of_dim = {n.dim: n.index for n in self.nodes if n.is_leaf}

    def _build(self) -> None:
        # Breadth-first construction: queue of (interval, father, level).
        pending: list[tuple[tuple[int, int], int | None, int]] = [((1, self.d), None, 0)]
        entries: list[tuple[tuple[int, int], int | None, int, tuple[int, int] | None]] = []
        while pending:
            (mu, nu), father, level = pending.pop(0)
            idx = len(entries)
            if mu == nu:
                entries.append(((mu, nu), father, level, None))
                continue
            split = _split(mu, nu)
            # son ids are assigned when the sons are popped; reserve slots by
            # counting what is already queued
            entries.append(((mu, nu), father, level, (-1, -1)))
            pending.append(((mu, split), idx, level + 1))
            pending.append(((split + 1, nu), idx, level + 1))
        # second pass resolves son ids from the father links
        sons: dict[int, list[int]] = {}
        for idx, (_, father, _, _) in enumerate(entries):
            if father is not None:
                sons.setdefault(father, []).append(idx)
        for idx, (interval, father, level, marker) in enumerate(entries):
            son_pair = tuple(sons[idx]) if marker is not None else None
            self.nodes.append(TreeNode(idx, interval, father, son_pair, level))

    # -- queries ---------------------------------------------------------

    def __len__(self) -> int:
        return len(self.nodes)

    @property
    def root(self) -> TreeNode:
        return self.nodes[0]

    def node(self, index: int) -> TreeNode:
        return self.nodes[index]

    def sons(self, index: int) -> tuple[TreeNode, TreeNode]:
        pair = self.nodes[index].sons
        if pair is None:
            raise ValueError(f"node {index} is a leaf")
        return self.nodes[pair[0]], self.nodes[pair[1]]

    def leaf_for_dim(self, mu: int) -> TreeNode:
        """The leaf node owning mode ``mu`` (1-based)."""
        return self.nodes[self._leaf_of_dim[mu]]

    @property
    def leaves(self) -> list[TreeNode]:
        """All leaves, ordered by their mode."""
        return [self.leaf_for_dim(mu) for mu in range(1, self.d + 1)]

    @property
    def inner_nodes(self) -> list[TreeNode]:
        """Non-root non-leaf nodes, by index."""
        return [n for n in self.nodes if not n.is_leaf and not n.is_root]

    @property
    def non_root(self) -> list[TreeNode]:
        return self.nodes[1:]

    def levels_top_down(self) -> list[list[int]]:
        """Node ids grouped by level, root level first."""
        return [list(level) for level in self._levels]

    def edges(self) -> list[tuple[int, int]]:
        """All (father, son) pairs."""
        return [(n.father, n.index) for n in self.nodes if n.father is not None]

    def __eq__(self, other: object) -> bool:
        return isinstance(other, DimensionTree) and other.d == self.d

    def __hash__(self) -> int:
        return hash(("DimensionTree", self.d))

    def __repr__(self) -> str:
        return f"DimensionTree(d={self.d}, nodes={len(self.nodes)}, depth={self.depth})"


def build_balanced_tree(d: int) -> DimensionTree:
    """Build the balanced dimension tree for dimension ``d``.

    Deterministic: two calls with the same ``d`` produce identical trees.
    The node count is always ``2 d - 1`` and the depth ``ceil(log2(d))``.
    """
    return DimensionTree(d)


def nodes_at_level(tree: DimensionTree, level: int) -> list[int]:
    """Node ids on ``level``, left to right.

    Level 0 is the root; for ``d = 2**p`` the leaves all sit on level ``p``
    and level ``l`` holds exactly ``2**l`` nodes.
    """
    if level < 0 or level > tree.depth:
        raise ValueError(f"level {level} out of range [0, {tree.depth}]")
    return list(tree.levels_top_down()[level])
