"""Matrix storage, norms, the NMF objective and index partitioning.

A *matrix* throughout the package is either a C-contiguous ``float64``
:class:`numpy.ndarray` (dense, row-major) or a :class:`scipy.sparse.csr_array`
(or ``csr_matrix``).  Factor matrices ``U`` (m x k) and ``V`` (n x k) are
always dense.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence, Union

import numpy as np
import scipy.sparse as sp

from .exceptions import DegenerateInputError, InvalidConfigError, ShapeError

Matrix = Union[np.ndarray, sp.csr_array, sp.csr_matrix]

__all__ = [
    "Matrix",
    "OpCounter",
    "Partition",
    "as_matrix",
    "check_csr",
    "col_block",
    "frobenius_norm",
    "is_sparse",
    "make_partition",
    "matmul",
    "partition_indices",
    "relative_error",
    "row_block",
    "rowwise_matmul",
    "to_dense",
]


@dataclass
class OpCounter:
    """Accumulates counted scalar multiplications of instrumented kernels."""

    mults: int = 0
    gathers: int = 0

    def add(self, n: int) -> None:
        self.mults += int(n)

    def reset(self) -> None:
        self.mults = 0
        self.gathers = 0


def _count(counter: OpCounter | None, n: int) -> None:
    if counter is not None:
        counter.add(n)


def is_sparse(A) -> bool:
    return sp.issparse(A)


def check_csr(A) -> None:
    """Raise ``ValueError`` unless ``A`` satisfies the CSR structural invariants.

    Row pointers must be nondecreasing and end at ``nnz``; column indices must
    lie in ``[0, cols)`` and be strictly increasing within every row.
    """
    indptr, indices = A.indptr, A.indices
    rows, cols = A.shape
    if indptr.shape[0] != rows + 1 or indptr[0] != 0:
        raise ValueError("CSR row pointer array has the wrong length or origin")
    if np.any(np.diff(indptr) < 0):
        raise ValueError("CSR row pointers must be nondecreasing")
    if indptr[-1] != indices.shape[0] or indices.shape[0] != A.data.shape[0]:
        raise ValueError("final CSR row pointer must equal nnz")
    if indices.size and (indices.min() < 0 or indices.max() >= cols):
        raise ValueError("CSR column index out of range")
    if indices.size > 1:
        step = np.diff(indices)
        # a decrease is legal only where a new row starts
        row_starts = np.zeros(indices.size - 1, dtype=bool)
        starts = indptr[1:-1]
        starts = starts[(starts > 0) & (starts < indices.size)]
        row_starts[starts - 1] = True
        if np.any((step <= 0) & ~row_starts):
            raise ValueError("CSR column indices must be strictly increasing per row")


def as_matrix(A) -> Matrix:
    """Coerce ``A`` to package storage: float64 C-order dense or canonical CSR."""
    if sp.issparse(A):
        A = sp.csr_array(A, dtype=np.float64)
        A.sum_duplicates()
        A.sort_indices()
        check_csr(A)
        return A
    A = np.ascontiguousarray(A, dtype=np.float64)
    if A.ndim != 2:
        raise ShapeError(f"expected a 2-D matrix, got ndim={A.ndim}")
    return A


def to_dense(A) -> np.ndarray:
    if sp.issparse(A):
        return np.ascontiguousarray(A.toarray(), dtype=np.float64)
    return np.ascontiguousarray(A, dtype=np.float64)


def frobenius_norm(A) -> float:
    """Square root of the sum of squared entries (dense or CSR)."""
    data = A.data if sp.issparse(A) else np.asarray(A, dtype=np.float64).ravel()
    return float(np.sqrt(np.sum(np.square(data))))


def _check_factor_shapes(M, U, V) -> None:
    m, n = M.shape
    if U.ndim != 2 or V.ndim != 2:
        raise ShapeError("factors must be 2-D")
    if U.shape[0] != m or V.shape[0] != n or U.shape[1] != V.shape[1]:
        raise ShapeError(
            f"factor shapes {U.shape}, {V.shape} do not conform to M {M.shape}"
        )


def residual_norm(M, U, V) -> float:
    """``||M - U V^T||_F`` without densifying a sparse ``M``."""
    _check_factor_shapes(M, U, V)
    if not sp.issparse(M):
        R = np.asarray(M) - U @ V.T
        return float(np.sqrt(np.sum(R * R)))
    coo = M.tocoo()
    rows, cols, vals = coo.row, coo.col, coo.data
    on_pattern = np.empty(vals.shape[0])
    chunk = 1 << 16
    for s in range(0, vals.shape[0], chunk):
        e = s + chunk
        on_pattern[s:e] = np.einsum("ij,ij->i", U[rows[s:e]], V[cols[s:e]])
    inside = np.sum((vals - on_pattern) ** 2)
    # mass of U V^T that falls outside the sparsity pattern
    outside = np.sum((U.T @ U) * (V.T @ V)) - np.sum(on_pattern**2)
    return float(np.sqrt(max(inside + max(outside, 0.0), 0.0)))


def relative_error(M, U, V) -> float:
    """Relative reconstruction error ``||M - U V^T||_F / ||M||_F``.

    Raises
    ------
    DegenerateInputError
        If ``M`` has zero Frobenius norm.
    """
    norm_m = frobenius_norm(M)
    if norm_m == 0.0:
        raise DegenerateInputError("relative error undefined for a zero-norm M")
    return residual_norm(M, U, V) / norm_m


def matmul(A, B, transpose_a: bool = False, transpose_b: bool = False,
           counter: OpCounter | None = None):
    """Exact product ``op(A) @ op(B)`` with multiply counting.

    A sparse operand is consumed through its CSR (or transposed CSC) structure
    and never densified.
    """
    opA = A.T if transpose_a else A
    opB = B.T if transpose_b else B
    if opA.shape[1] != opB.shape[0]:
        raise ShapeError(
            f"inner dimensions differ: {opA.shape} x {opB.shape}"
        )
    if sp.issparse(opA):
        _count(counter, opA.nnz * opB.shape[1])
        out = opA @ opB
        return np.ascontiguousarray(out) if not sp.issparse(out) else out
    if sp.issparse(opB):
        _count(counter, opB.nnz * opA.shape[0])
        return np.ascontiguousarray((opB.T @ np.asarray(opA).T).T)
    _count(counter, opA.shape[0] * opA.shape[1] * opB.shape[1])
    return np.asarray(opA) @ np.asarray(opB)


def rowwise_matmul(A, B, counter: OpCounter | None = None):
    """``A @ B`` where each output row depends only on the matching row of ``A``.

    BLAS GEMM may round a row differently depending on how many rows are in
    the call.  Row-partitioned kernels use this routine so that a node owning
    rows ``I_r`` computes bit-identical rows to a single node owning all rows.
    """
    if A.shape[1] != B.shape[0]:
        raise ShapeError(f"inner dimensions differ: {A.shape} x {B.shape}")
    if sp.issparse(A):
        # CSR row traversal is row-local already
        _count(counter, A.nnz * B.shape[1])
        return np.ascontiguousarray(A @ np.asarray(B))
    _count(counter, A.shape[0] * A.shape[1] * B.shape[1])
    return np.einsum("ij,jk->ik", A, B)


def partition_indices(item_count: int, node_count: int) -> list[range]:
    """Split ``range(item_count)`` into ``node_count`` contiguous ranges.

    The first ``item_count % node_count`` ranges receive one extra item, so
    sizes differ by at most one.  Empty ranges are legal.
    """
    if node_count < 1:
        raise InvalidConfigError("node_count must be at least 1")
    if item_count < 0:
        raise InvalidConfigError("item_count must be nonnegative")
    base, extra = divmod(item_count, node_count)
    out, start = [], 0
    for r in range(node_count):
        size = base + (1 if r < extra else 0)
        out.append(range(start, start + size))
        start += size
    return out


@dataclass(frozen=True)
class Partition:
    """Row sets ``I_r`` and column sets ``J_r`` owned by each of ``node_count`` nodes."""

    node_count: int
    row_sets: tuple[range, ...] = field(default_factory=tuple)
    col_sets: tuple[range, ...] = field(default_factory=tuple)

    @property
    def shape(self) -> tuple[int, int]:
        return (sum(len(r) for r in self.row_sets), sum(len(c) for c in self.col_sets))

    @classmethod
    def from_widths(cls, m: int, widths: Sequence[int]) -> "Partition":
        """Balanced rows but explicit column widths (imbalanced workloads)."""
        cols, start = [], 0
        for w in widths:
            if w < 0:
                raise InvalidConfigError("column widths must be nonnegative")
            cols.append(range(start, start + int(w)))
            start += int(w)
        return cls(len(widths), tuple(partition_indices(m, len(widths))), tuple(cols))


def make_partition(m: int, n: int, node_count: int) -> Partition:
    return Partition(
        node_count,
        tuple(partition_indices(m, node_count)),
        tuple(partition_indices(n, node_count)),
    )


def row_block(M, rows: range):
    """Rows ``I_r`` of ``M`` as an independent (node-private) matrix."""
    block = M[rows.start:rows.stop]
    if sp.issparse(block):
        return sp.csr_array(block, copy=True)
    return np.array(block, order="C", copy=True)


def col_block(M, cols: range):
    """Columns ``J_r`` of ``M`` as an independent matrix (CSR stays CSR)."""
    block = M[:, cols.start:cols.stop]
    if sp.issparse(block):
        return sp.csr_array(block, copy=True)
    return np.array(block, order="C", copy=True)
