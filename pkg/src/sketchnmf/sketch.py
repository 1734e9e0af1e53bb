"""Seed-deterministic sketch matrices and the products they feed.

Every sketch is a pure function of ``(seed, round, n, d, kind, stream)``.
The generator is Philox (counter-based) keyed by a hash of ``(seed, stream)``
with the round in the counter, so any node can materialise round ``t`` without
replaying rounds ``0 .. t-1`` and no sketch ever has to be transmitted.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from enum import IntEnum
from functools import lru_cache

import numpy as np
import scipy.sparse as sp

from .exceptions import InvalidSketchSizeError, ShapeError
from .matcore import OpCounter, rowwise_matmul

__all__ = [
    "GAUSSIAN",
    "SUBSAMPLING",
    "SketchMatrix",
    "Stream",
    "gen_gaussian_sketch",
    "gen_sketch",
    "gen_subsampling_sketch",
    "keyed_rng",
    "sketch_gram",
    "sketch_right",
]

GAUSSIAN = "gaussian"
SUBSAMPLING = "subsampling"
SKETCH_KINDS = (GAUSSIAN, SUBSAMPLING)


class Stream(IntEnum):
    """Independent sketch sequences; each becomes part of the generator key."""

    U = 0  # S^t, U-subproblem (columns of M)
    V = 1  # S'^t, V-subproblem (rows of M)
    S1 = 2  # secure protocols, local U-subproblem
    S2 = 3  # secure protocols, shared V-subproblem
    INIT = 16
    SCHEDULER = 17


@lru_cache(maxsize=256)
def _stream_key(seed: int, stream: int) -> tuple[int, int]:
    words = np.random.SeedSequence(entropy=(seed, stream)).generate_state(2, np.uint64)
    return int(words[0]), int(words[1])


def keyed_rng(seed: int, round: int, stream: int) -> np.random.Generator:
    """Philox generator for ``(seed, stream, round)``.

    The key is a hash of ``(seed, stream)``; the round occupies the upper
    128 counter bits, so every round owns a disjoint block of ``2**128``
    counter values and any round is reachable in O(1).
    """
    if round < 0:
        raise ValueError("round must be nonnegative")
    key = np.array(_stream_key(int(seed) & 0xFFFFFFFFFFFFFFFF, int(stream)), dtype=np.uint64)
    counter = np.array([0, 0, round & 0xFFFFFFFFFFFFFFFF, round >> 64], dtype=np.uint64)
    return np.random.Generator(np.random.Philox(counter=counter, key=key))


@dataclass(frozen=True, eq=False)
class SketchMatrix:
    """An ``n x d`` random sketch ``S`` with ``E[S S^T] = I``.

    Gaussian sketches carry the dense payload.  Subsampling sketches carry
    ``indices`` (source rows holding a nonzero) and ``columns`` (the sketch
    column of each nonzero), all nonzeros equal to ``scale``.
    """

    kind: str
    n: int
    d: int
    seed: int
    round: int
    stream: int = Stream.U
    dense: np.ndarray | None = field(default=None, repr=False)
    indices: np.ndarray | None = field(default=None, repr=False)
    columns: np.ndarray | None = field(default=None, repr=False)
    scale: float = 1.0

    @property
    def shape(self) -> tuple[int, int]:
        return (self.n, self.d)

    def to_dense(self) -> np.ndarray:
        if self.kind == GAUSSIAN:
            return self.dense.copy()
        S = np.zeros((self.n, self.d))
        S[self.indices, self.columns] = self.scale
        return S

    def restrict(self, rows: range) -> "SketchMatrix":
        """Rows ``rows`` of ``S`` (``S_{J_r:}``), keeping all ``d`` columns."""
        if rows.start < 0 or rows.stop > self.n:
            raise ShapeError(f"row range {rows} outside sketch with n={self.n}")
        n_sub = len(rows)
        if self.kind == GAUSSIAN:
            return SketchMatrix(GAUSSIAN, n_sub, self.d, self.seed, self.round,
                                self.stream, dense=self.dense[rows.start:rows.stop])
        keep = (self.indices >= rows.start) & (self.indices < rows.stop)
        return SketchMatrix(SUBSAMPLING, n_sub, self.d, self.seed, self.round,
                            self.stream, indices=self.indices[keep] - rows.start,
                            columns=self.columns[keep], scale=self.scale)

    def compact(self) -> "SketchMatrix":
        """Drop all-zero columns (only meaningful after :meth:`restrict`)."""
        if self.kind == GAUSSIAN or self.indices.shape[0] == self.d:
            return self
        order = np.argsort(self.columns, kind="stable")
        return SketchMatrix(SUBSAMPLING, self.n, int(order.shape[0]), self.seed,
                            self.round, self.stream, indices=self.indices[order],
                            columns=np.arange(order.shape[0]), scale=self.scale)

    def identical_to(self, other: "SketchMatrix") -> bool:
        """Bit-exact equality of kind, shape and payload."""
        if (self.kind, self.n, self.d) != (other.kind, other.n, other.d):
            return False
        if self.kind == GAUSSIAN:
            return bool(np.array_equal(self.dense, other.dense))
        return (self.scale == other.scale
                and np.array_equal(self.indices, other.indices)
                and np.array_equal(self.columns, other.columns))


def _check_size(n: int, d: int) -> None:
    if not 1 <= d <= n:
        raise InvalidSketchSizeError(f"sketch size must satisfy 1 <= d <= n, got d={d}, n={n}")


def gen_gaussian_sketch(seed: int, round: int, n: int, d: int,
                        stream: int = Stream.U) -> SketchMatrix:
    """i.i.d. ``N(0, 1/d)`` entries."""
    _check_size(n, d)
    rng = keyed_rng(seed, round, stream)
    payload = rng.standard_normal((n, d)) / np.sqrt(d)
    return SketchMatrix(GAUSSIAN, n, d, int(seed), int(round), int(stream), dense=payload)


def _sample_without_replacement(rng: np.random.Generator, n: int, d: int) -> np.ndarray:
    if n > 1024 and 8 * d <= n:
        # partial Fisher-Yates over a lazily materialised pool
        pool: dict[int, int] = {}
        draws = rng.integers(np.arange(d), n).tolist()
        out = np.empty(d, dtype=np.int64)
        for i, j in enumerate(draws):
            vi, vj = pool.get(i, i), pool.get(j, j)
            out[i] = vj
            pool[j] = vi
        return out
    return rng.permutation(n)[:d].astype(np.int64)


def gen_subsampling_sketch(seed: int, round: int, n: int, d: int,
                           stream: int = Stream.U) -> SketchMatrix:
    """Columns ``sqrt(n/d) e_i`` with ``d`` distinct source indices ``i``.

    The ``sqrt(n/d)`` scale makes ``E[S S^T] = I``; without it the
    expectation is ``(d/n) I``.
    """
    _check_size(n, d)
    rng = keyed_rng(seed, round, stream)
    idx = _sample_without_replacement(rng, n, d)
    return SketchMatrix(SUBSAMPLING, n, d, int(seed), int(round), int(stream),
                        indices=idx, columns=np.arange(d), scale=float(np.sqrt(n / d)))


def gen_sketch(kind: str, seed: int, round: int, n: int, d: int,
               stream: int = Stream.U) -> SketchMatrix:
    if kind == GAUSSIAN:
        return gen_gaussian_sketch(seed, round, n, d, stream)
    if kind == SUBSAMPLING:
        return gen_subsampling_sketch(seed, round, n, d, stream)
    raise ValueError(f"unknown sketch kind {kind!r}; expected one of {SKETCH_KINDS}")


def sketch_right(M_block, S: SketchMatrix, counter: OpCounter | None = None) -> np.ndarray:
    """``A = M_block @ S`` (``|I_r| x d``).

    Subsampling sketches gather and scale at most ``d`` columns of
    ``M_block``; Gaussian sketches use a dense, row-local product.
    """
    if M_block.shape[1] != S.n:
        raise ShapeError(f"M block has {M_block.shape[1]} columns, sketch has n={S.n}")
    rows = M_block.shape[0]
    if S.kind == GAUSSIAN:
        return rowwise_matmul(M_block, S.dense, counter)
    out = np.zeros((rows, S.d))
    picked = M_block[:, S.indices]
    if sp.issparse(picked):
        picked = picked.toarray()
    out[:, S.columns] = picked * S.scale
    if counter is not None:
        counter.add(rows * S.indices.shape[0])
        counter.gathers += int(S.indices.shape[0])
    return out


def sketch_gram(V_block: np.ndarray, S_rows: SketchMatrix,
                counter: OpCounter | None = None) -> np.ndarray:
    """Local summand ``V_{J_r:}^T S_{J_r:}`` (``k x d``) of ``B = V^T S``."""
    if V_block.shape[0] != S_rows.n:
        raise ShapeError(f"V block has {V_block.shape[0]} rows, sketch rows n={S_rows.n}")
    k = V_block.shape[1]
    if S_rows.kind == GAUSSIAN:
        if counter is not None:
            counter.add(k * S_rows.n * S_rows.d)
        # accumulate over rows in a fixed order so the k x d summand is reproducible
        return np.einsum("jk,jd->kd", V_block, S_rows.dense)
    out = np.zeros((k, S_rows.d))
    out[:, S_rows.columns] = V_block[S_rows.indices].T * S_rows.scale
    if counter is not None:
        counter.add(k * S_rows.indices.shape[0])
    return out
