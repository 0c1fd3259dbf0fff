"""Block Jacobi approximation of explicit linear operators.

Operators are dense 2-D numpy arrays mapping ``V`` (columns) to ``W`` (rows).
Spaces are split into contiguous index blocks by a :class:`DirectSumDecomposition`.
Block indices are zero-based.

This module is the oracle for the convolutional operators: a group convolution
materialized as a matrix must equal :func:`jacobi_approx` of the materialized
standard convolution.
"""

from dataclasses import dataclass
from functools import cached_property

import numpy as np

from .errors import ConfigurationError


@dataclass(frozen=True)
class DirectSumDecomposition:
    block_dims: tuple

    def __post_init__(self):
        dims = tuple(int(b) for b in self.block_dims)
        if not dims or any(b <= 0 for b in dims):
            raise ConfigurationError(f"block sizes must be positive, got {self.block_dims}")
        object.__setattr__(self, "block_dims", dims)

    @classmethod
    def uniform(cls, total_dim, blocks):
        if total_dim % blocks:
            raise ConfigurationError(f"{blocks} blocks do not divide dimension {total_dim}")
        return cls((total_dim // blocks,) * blocks)

    @property
    def total_dim(self):
        return sum(self.block_dims)

    @property
    def num_blocks(self):
        return len(self.block_dims)

    @cached_property
    def offsets(self):
        return np.concatenate([[0], np.cumsum(self.block_dims)]).astype(int)

    def span(self, k):
        if not 0 <= k < self.num_blocks:
            raise ConfigurationError(f"block index {k} out of range 0..{self.num_blocks - 1}")
        return slice(self.offsets[k], self.offsets[k + 1])


def _check_vector(x, decomp):
    x = np.asarray(x, dtype=np.float64)
    if x.shape != (decomp.total_dim,):
        raise ConfigurationError(f"vector of length {x.shape} does not match dimension {decomp.total_dim}")
    return x


def _check_operator(A, row_decomp, col_decomp):
    A = np.asarray(A, dtype=np.float64)
    if A.shape != (row_decomp.total_dim, col_decomp.total_dim):
        raise ConfigurationError(
            f"operator shape {A.shape} does not match decompositions "
            f"({row_decomp.total_dim}, {col_decomp.total_dim})"
        )
    return A


def restrict(x, decomp, k):
    """R_k x: the k-th block of ``x``."""
    return _check_vector(x, decomp)[decomp.span(k)].copy()


def prolong(xk, decomp, k):
    """R_k^T x_k: embed a block vector with zeros elsewhere."""
    xk = np.asarray(xk, dtype=np.float64)
    span = decomp.span(k)
    if xk.shape != (decomp.block_dims[k],):
        raise ConfigurationError(f"block {k} has dimension {decomp.block_dims[k]}, got {xk.shape}")
    out = np.zeros(decomp.total_dim)
    out[span] = xk
    return out


def block_entry(A, row_decomp, col_decomp, i, j):
    """A_ij = R~_i A R_j^T."""
    A = _check_operator(A, row_decomp, col_decomp)
    return A[row_decomp.span(i), col_decomp.span(j)].copy()


def local_operator(A, row_decomp, col_decomp, k):
    if row_decomp.num_blocks != col_decomp.num_blocks:
        raise ConfigurationError("row and column decompositions have different block counts")
    return block_entry(A, row_decomp, col_decomp, k, k)


def jacobi_approx(A, row_decomp, col_decomp):
    """M = sum_k R~_k^T A_k R_k, i.e. the block-diagonal part of ``A``."""
    A = _check_operator(A, row_decomp, col_decomp)
    if row_decomp.num_blocks != col_decomp.num_blocks:
        raise ConfigurationError("row and column decompositions have different block counts")
    M = np.zeros_like(A)
    for k in range(row_decomp.num_blocks):
        rows, cols = row_decomp.span(k), col_decomp.span(k)
        M[rows, cols] = A[rows, cols]
    return M


def jacobi_apply(A, row_decomp, col_decomp, x):
    """Evaluate ``M x`` blockwise, without assembling ``M``."""
    x = _check_vector(x, col_decomp)
    y = np.zeros(row_decomp.total_dim)
    for k in range(row_decomp.num_blocks):
        Ak = local_operator(A, row_decomp, col_decomp, k)
        y += prolong(Ak @ restrict(x, col_decomp, k), row_decomp, k)
    return y


def materialize(op, in_shape):
    """Dense matrix of a linear map on arrays of ``in_shape``, built from basis vectors.

    Column ``j`` is ``op(e_j)`` flattened in row-major order.
    """
    size = int(np.prod(in_shape))
    cols = []
    for j in range(size):
        e = np.zeros(size)
        e[j] = 1.0
        cols.append(np.asarray(op(e.reshape(in_shape)), dtype=np.float64).ravel())
    return np.stack(cols, axis=1)
