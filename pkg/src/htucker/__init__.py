"""Hierarchical low-rank tensor arithmetic over balanced dimension trees.

The package provides the serial reference arithmetic (:mod:`htucker.arith`),
a message-passing backend with one worker per tree node
(:mod:`htucker.dist`), truncated iterative solvers (:mod:`htucker.solvers`),
the nine-parameter diffusion model problem (:mod:`htucker.cookie`) and a
benchmark/experiment CLI (``htucker``, see :mod:`htucker.cli`).
"""

from .arith import (
    TruncationControl,
    add,
    apply_operator,
    compute_bhat,
    evaluate_entry,
    inner_product,
    norm,
    orthogonalize,
    scale,
    subtract,
    truncate,
)
from .format import (
    GeneralizedMatrix,
    HTensor,
    HTOperator,
    ParseError,
    deserialize,
    hosvd_from_dense,
    identity_htoperator,
    operator_to_dense_matrix,
    random_htensor,
    random_htoperator,
    serialize,
    serialized_size,
    storage_size,
    to_dense,
)
from .tree import DimensionTree, build_balanced_tree, nodes_at_level

__all__ = [
    "DimensionTree",
    "GeneralizedMatrix",
    "HTensor",
    "HTOperator",
    "ParseError",
    "TruncationControl",
    "add",
    "apply_operator",
    "build_balanced_tree",
    "compute_bhat",
    "deserialize",
    "evaluate_entry",
    "hosvd_from_dense",
    "identity_htoperator",
    "inner_product",
    "nodes_at_level",
    "norm",
    "operator_to_dense_matrix",
    "orthogonalize",
    "random_htensor",
    "random_htoperator",
    "scale",
    "serialize",
    "serialized_size",
    "storage_size",
    "subtract",
    "to_dense",
    "truncate",
]

__version__ = "0.1.0"
