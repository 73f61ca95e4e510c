"""Dense numerical primitives shared by the tensor arithmetic.

This module fixes the two global conventions everything else relies on:

* Composite indices.  For a mode subset ``s = {mu_1 < mu_2 < ...}`` the
  composite index runs with the *last* listed mode varying fastest, i.e.
  ``pos = sum_mu idx(i_mu) * prod(n_nu for nu in s after mu)``.  This is
  exactly numpy's C order over the modes sorted ascending, and it makes
  ``(u (x) v)(i, j) = u(i) * v(j)`` under ``numpy.kron``.

* Determinism.  ``reduced_qr`` sign-fixes the R factor to a non-negative
  diagonal so identical inputs give identical outputs bit for bit, and
  ``sym_eig_desc`` clamps round-off-negative eigenvalues of Gram matrices
  to zero so square roots never produce NaN.

All functions are pure and operate on float64 ``numpy.ndarray`` values.
"""

from __future__ import annotations

import numpy as np


def reduced_qr(mat: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Reduced QR decomposition with a sign-fixed, non-negative R diagonal.

    Rank-deficient input is allowed; R may then carry zero diagonal
    entries.  Returns ``(q, r)`` with ``q`` of shape ``(m, min(m, n))``.
    """
    q, r = np.linalg.qr(np.asarray(mat, dtype=np.float64), mode="reduced")
    signs = np.where(np.diag(r) < 0.0, -1.0, 1.0)
    return q * signs, r * signs[:, None]


def sym_eig_desc(mat: np.ndarray, rtol: float = 1e-12) -> tuple[np.ndarray, np.ndarray]:
    """Eigendecomposition of a symmetric PSD matrix, eigenvalues descending.

    Negative eigenvalues are clamped to zero after the decomposition: the
    inputs here are Gram matrices, hence PSD up to round-off, and the
    callers take square roots of the eigenvalues.

    Raises ``ValueError`` if ``mat`` is non-symmetric beyond ``rtol``
    relative to its norm.
    """
    mat = np.asarray(mat, dtype=np.float64)
    scale = max(1.0, float(np.abs(mat).max(initial=0.0)))
    if mat.shape[0] != mat.shape[1]:
        raise ValueError(f"matrix is not square: {mat.shape}")
    if np.abs(mat - mat.T).max(initial=0.0) > rtol * scale:
        raise ValueError("matrix is not symmetric within tolerance")
    vals, vecs = np.linalg.eigh((mat + mat.T) / 2.0)
    order = np.argsort(-vals, kind="stable")
    vals = np.maximum(vals[order], 0.0)
    return vecs[:, order], vals


def composite_strides(sizes: list[int] | tuple[int, ...]) -> list[int]:
    """Strides of the composite index over ``sizes`` (last size fastest)."""
    strides = [1] * len(sizes)
    for i in range(len(sizes) - 2, -1, -1):
        strides[i] = strides[i + 1] * sizes[i + 1]
    return strides


def matricize(tensor: np.ndarray, row_dims: set[int] | list[int]) -> np.ndarray:
    """Matricization of ``tensor`` with rows from the 1-based modes ``row_dims``.

    Row and column composite indices both follow the global convention
    (ascending modes, last fastest), so for contiguous mode sets this is a
    pure reshape.
    """
    d = tensor.ndim
    rows = sorted(row_dims)
    if not rows or any(mu < 1 or mu > d for mu in rows):
        raise ValueError(f"invalid mode subset {row_dims} for a {d}-dimensional tensor")
    cols = [mu for mu in range(1, d + 1) if mu not in set(rows)]
    perm = [mu - 1 for mu in rows + cols]
    nrow = int(np.prod([tensor.shape[mu - 1] for mu in rows]))
    return tensor.transpose(perm).reshape(nrow, -1)


def dematricize(mat: np.ndarray, row_dims: set[int] | list[int], shape: tuple[int, ...]) -> np.ndarray:
    """Inverse of :func:`matricize` for the full shape ``shape``."""
    rows = sorted(row_dims)
    cols = [mu for mu in range(1, len(shape) + 1) if mu not in set(rows)]
    perm = [mu - 1 for mu in rows + cols]
    inv = np.argsort(perm)
    inter = [shape[p] for p in perm]
    return mat.reshape(inter).transpose(inv)


def mode_multiply(core: np.ndarray, mode: int, mat: np.ndarray) -> np.ndarray:
    """Contract ``mat`` (shape ``(new, old)``) into ``core`` along ``mode`` (1-based).

    ``result[..., i, ...] = sum_j mat[i, j] * core[..., j, ...]``.
    """
    if mode < 1 or mode > core.ndim:
        raise ValueError(f"mode {mode} out of range for ndim {core.ndim}")
    if mat.shape[1] != core.shape[mode - 1]:
        raise ValueError(
            f"shape mismatch: matrix {mat.shape} against mode-{mode} size {core.shape[mode - 1]}"
        )
    moved = np.tensordot(mat, core, axes=([1], [mode - 1]))
    return np.moveaxis(moved, 0, mode - 1)


def transfer_matricize_23(core: np.ndarray) -> np.ndarray:
    """Group modes 2 and 3 of a transfer tensor as rows (mode 3 fastest).

    For a transfer tensor ``B`` of shape ``(k_t, k_1, k_2)`` this returns
    the ``(k_1 * k_2, k_t)`` matrix whose column ``i`` holds the son-side
    coefficients of the node's ``i``-th frame column.
    """
    k_t, k1, k2 = core.shape
    return core.transpose(1, 2, 0).reshape(k1 * k2, k_t)


def transfer_dematricize_23(mat: np.ndarray, k1: int, k2: int) -> np.ndarray:
    """Inverse of :func:`transfer_matricize_23` given the son ranks."""
    k_t = mat.shape[1]
    return mat.reshape(k1, k2, k_t).transpose(2, 0, 1)


# -- brute-force dense helpers (test oracles) ----------------------------


def dense_inner(a: np.ndarray, b: np.ndarray) -> float:
    """Entrywise inner product of two equal-shape dense tensors."""
    return float(np.dot(a.ravel(), b.ravel()))


def dense_norm(a: np.ndarray) -> float:
    return float(np.linalg.norm(a.ravel()))


def dense_rank_truncation_tails(tensor: np.ndarray, row_dims: set[int]) -> np.ndarray:
    """Squared singular-value tail sums of one matricization.

    ``tails[r]`` is ``sum(sigma_i**2 for i > r)``; entry 0 is the squared
    Frobenius norm.  Used to bound achievable truncation errors.
    """
    sigma = np.linalg.svd(matricize(tensor, row_dims), compute_uv=False)
    tails = np.concatenate([np.cumsum((sigma**2)[::-1])[::-1], [0.0]])
    return tails
