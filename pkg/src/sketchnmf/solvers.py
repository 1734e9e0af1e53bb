"""Per-iteration updates for the NLS subproblem ``min_{U >= 0} ||A - U B||_F``.

Unsketched baselines (:func:`mu_update`, :func:`hals_update`) take ``(M, U, V)``.
Sketched single-step solvers (:func:`pgd_step`, :func:`pcd_step`) take the
sketched pair ``A = M S`` (rows x d) and ``B = V^T S`` (k x d).  The V
subproblem reuses every routine on the transposed problem.

All routines return new arrays and leave their inputs untouched.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np

from .exceptions import InvalidConfigError, ShapeError
from .matcore import OpCounter, matmul, rowwise_matmul

__all__ = [
    "EtaSchedule",
    "MuSchedule",
    "ZeroColumnWarning",
    "clamp_bound",
    "clamp_domain",
    "exact_gradient",
    "hals_update",
    "mu_update",
    "pcd_step",
    "pgd_step",
    "projected_gradient_norm",
    "sketched_gradient",
]

MU_FLOOR = 1e-16


class ZeroColumnWarning(RuntimeWarning):
    """A coordinate update was skipped because its curvature is zero."""


@dataclass(frozen=True)
class EtaSchedule:
    """Diminishing PGD step ``eta_t = eta0 / (1 + gamma t)``."""

    eta0: float = 0.01
    gamma: float = 0.01

    def __post_init__(self):
        if self.eta0 <= 0 or self.gamma < 0:
            raise InvalidConfigError("EtaSchedule needs eta0 > 0 and gamma >= 0")

    def __call__(self, t: int) -> float:
        return self.eta0 / (1.0 + self.gamma * t)


@dataclass(frozen=True)
class MuSchedule:
    """Growing proximal weight ``mu_t = alpha + beta t``."""

    alpha: float = 1.0
    beta: float = 1.0

    def __post_init__(self):
        if self.alpha < 0 or self.beta < 0:
            raise InvalidConfigError("MuSchedule needs alpha >= 0 and beta >= 0")

    def __call__(self, t: int) -> float:
        return self.alpha + self.beta * t


def _count(counter, n):
    if counter is not None:
        counter.add(n)


def _coordinate_sweep(U, center, AB, G, mu, counter=None):
    """One Gauss-Seidel pass over columns ``j = 0..k-1``.

    Column ``j`` solves its scalar least-squares problem with columns
    ``l < j`` already replaced and ``l > j`` still old; ``mu`` pulls toward
    ``center``.  Pure elementwise vector work, so every row is computed
    identically no matter how many rows the caller holds.
    """
    rows, k = U.shape
    W = np.array(U, dtype=np.float64, order="F", copy=True)
    for j in range(k):
        denom = G[j, j] + mu
        if denom <= 0.0:
            warnings.warn(f"column {j} has zero curvature; left unchanged", ZeroColumnWarning,
                          stacklevel=3)
            continue
        acc = mu * center[:, j] + AB[:, j] if mu else AB[:, j].copy()
        for l in range(k):
            if l != j:
                acc -= G[l, j] * W[:, l]
        np.maximum(acc / denom, 0.0, out=W[:, j])
    _count(counter, k * k * rows + k * rows)
    return np.ascontiguousarray(W)


def _check_sketched(U, A, B):
    if U.shape[0] != A.shape[0] or B.shape[0] != U.shape[1] or A.shape[1] != B.shape[1]:
        raise ShapeError(f"shapes U{U.shape}, A{A.shape}, B{B.shape} do not conform")


def mu_update(M, U, V, counter: OpCounter | None = None) -> np.ndarray:
    """Multiplicative update ``U * (M V) / (U V^T V)``; the denominator is floored."""
    if U.shape[0] != M.shape[0] or V.shape[0] != M.shape[1] or U.shape[1] != V.shape[1]:
        raise ShapeError("MU update shapes do not conform")
    MV = matmul(M, V, counter=counter)
    VtV = matmul(V, V, transpose_a=True, counter=counter)
    denom = matmul(U, VtV, counter=counter)
    return U * MV / np.maximum(denom, MU_FLOOR)


def hals_update(M, U, V, counter: OpCounter | None = None) -> np.ndarray:
    """One HALS sweep: exact nonnegative coordinate minimisation per column of ``U``.

    Columns whose ``(V^T V)_jj`` is zero are skipped with a
    :class:`ZeroColumnWarning`.
    """
    if U.shape[0] != M.shape[0] or V.shape[0] != M.shape[1] or U.shape[1] != V.shape[1]:
        raise ShapeError("HALS update shapes do not conform")
    MV = matmul(M, V, counter=counter)
    VtV = matmul(V, V, transpose_a=True, counter=counter)
    return _coordinate_sweep(U, U, MV, VtV, 0.0, counter)


def pgd_step(U, A, B, eta: float, counter: OpCounter | None = None) -> np.ndarray:
    """One projected gradient step ``max(U - 2 eta (U B B^T - A B^T), 0)``.

    Cost is ``k d (rows + k)`` multiplies for the two products plus ``rows k^2``
    for applying the Gram matrix.
    """
    _check_sketched(U, A, B)
    if eta <= 0:
        raise InvalidConfigError("step size must be positive")
    G = matmul(B, B, transpose_b=True, counter=counter)
    AB = rowwise_matmul(A, B.T, counter)
    grad = rowwise_matmul(U, G, counter) - AB
    _count(counter, U.size)
    return np.maximum(U - (2.0 * eta) * grad, 0.0)


def pcd_step(U, U_prev, A, B, mu: float, counter: OpCounter | None = None) -> np.ndarray:
    """Proximal coordinate descent sweep on ``||A - U B||^2 + mu ||U - U_prev||^2``.

    ``U_prev`` is the proximal centre (the iterate at the start of the outer
    iteration).  With ``mu = 0`` and an unsketched pair this is exactly one
    HALS sweep.
    """
    _check_sketched(U, A, B)
    if U_prev.shape != U.shape:
        raise ShapeError("proximal centre must match U")
    if mu < 0:
        raise InvalidConfigError("mu must be nonnegative")
    G = matmul(B, B, transpose_b=True, counter=counter)
    AB = rowwise_matmul(A, B.T, counter)
    return _coordinate_sweep(U, U_prev, AB, G, float(mu), counter)


def clamp_bound(M) -> float:
    """Entrywise cap ``sqrt(2 ||M||_F)`` that keeps iterates bounded."""
    from .matcore import frobenius_norm

    return float(np.sqrt(2.0 * frobenius_norm(M)))


def clamp_domain(X: np.ndarray, bound: float) -> np.ndarray:
    if bound <= 0:
        raise InvalidConfigError("clamp bound must be positive")
    return np.minimum(X, bound)


def exact_gradient(M, U, V) -> np.ndarray:
    """``2 (U V^T V - M V)``, gradient of ``||M - U V^T||^2`` in ``U``."""
    return 2.0 * (U @ (V.T @ V) - matmul(M, V))


def sketched_gradient(M, U, V, S) -> np.ndarray:
    """``2 (U B B^T - A B^T)`` with ``A = M S`` and ``B = V^T S``."""
    from .sketch import sketch_gram, sketch_right

    A = sketch_right(M, S)
    B = sketch_gram(V, S)
    return 2.0 * (U @ (B @ B.T) - A @ B.T)


def projected_gradient_norm(M, U, V) -> float:
    """Mean of ``min(x, |g|)`` over all entries of ``U`` and ``V``.

    Zero exactly at stationary points of the nonnegative problem.
    """
    gU = exact_gradient(M, U, V)
    gV = 2.0 * (V @ (U.T @ U) - matmul(M, U, transpose_a=True))
    total = np.sum(np.minimum(U, np.abs(gU))) + np.sum(np.minimum(V, np.abs(gV)))
    return float(total / (U.size + V.size))
