"""In-process cluster simulator and the distributed SANLS algorithm.

Nodes never share mutable state.  They meet only at

* :meth:`SyncCluster.all_reduce_sum`, a barrier collective that sums node
  contributions in ascending node order (so the floating-point result does
  not depend on scheduling), and
* :class:`AsyncChannel`, a per-client FIFO push/reply transport whose
  cross-client delivery order is chosen by a seeded scheduler.

Everything that crosses either one is an :class:`Envelope`; sketch matrices
never do, every node regenerates them from the shared seed.
"""

from __future__ import annotations

import struct
import threading
import time
from collections import deque
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from enum import IntEnum
from typing import Sequence

import numpy as np

from .exceptions import (
    BarrierTimeoutError,
    InvalidConfigError,
    ProtocolClosedError,
    ProtocolViolationError,
    ShapeError,
)
from .matcore import OpCounter, Partition, as_matrix, col_block, make_partition, relative_error, row_block
from .sanls import (
    RunConfig,
    RunTrace,
    check_nonnegative,
    init_factors,
    init_scale,
    sketched_update,
    transpose,
)
from .sketch import Stream, gen_sketch, keyed_rng, sketch_gram, sketch_right
from .solvers import clamp_bound, clamp_domain, hals_update, mu_update

__all__ = [
    "SERVER_ID",
    "AsyncChannel",
    "DSANLSNode",
    "Envelope",
    "HALSNode",
    "NodeState",
    "SyncCluster",
    "Tag",
    "all_reduce_sum",
    "dsanls_iteration",
    "dsanls_run",
]

SERVER_ID = 0xFFFFFFFF
_HEADER = struct.Struct("<IIQII")


class Tag(IntEnum):
    ALL_REDUCE = 0  # AllReduceContribution
    CLIENT_PUSH = 1  # ClientPush U_(r)
    SERVER_REPLY = 2  # ServerReply U


@dataclass(frozen=True, eq=False)
class Envelope:
    """One message.  ``payload`` is always a plain 2-D float64 array."""

    sender: int
    payload: np.ndarray
    tag: Tag
    timestamp: int = 0

    def __post_init__(self):
        p = self.payload
        if not isinstance(p, np.ndarray) or p.ndim != 2:
            raise ProtocolViolationError(
                f"envelope payload must be a 2-D ndarray, got {type(p).__name__}"
            )
        if p.dtype != np.float64:
            raise ProtocolViolationError("envelope payload must be float64")
        object.__setattr__(self, "tag", Tag(self.tag))

    @property
    def shape(self) -> tuple[int, int]:
        return self.payload.shape

    @property
    def nbytes(self) -> int:
        """Payload bytes (the fixed 24-byte header is not counted)."""
        return int(self.payload.size * 8)

    def encode(self) -> bytes:
        """Little-endian ``u32 tag, u32 sender, u64 ts, u32 rows, u32 cols, f64[]``."""
        rows, cols = self.payload.shape
        head = _HEADER.pack(int(self.tag), int(self.sender), int(self.timestamp), rows, cols)
        return head + np.ascontiguousarray(self.payload, dtype="<f8").tobytes()

    @classmethod
    def decode(cls, buf: bytes) -> "Envelope":
        if len(buf) < _HEADER.size:
            raise ProtocolViolationError("truncated envelope header")
        tag, sender, ts, rows, cols = _HEADER.unpack_from(buf)
        body = buf[_HEADER.size:]
        if len(body) != rows * cols * 8:
            raise ProtocolViolationError(
                f"envelope body has {len(body)} bytes, header promises {rows * cols * 8}"
            )
        try:
            tag = Tag(tag)
        except ValueError as exc:
            raise ProtocolViolationError(f"unknown envelope tag {tag}") from exc
        payload = np.frombuffer(body, dtype="<f8").astype(np.float64).reshape(rows, cols)
        return cls(sender, payload, tag, ts)


def all_reduce_sum(contributions: Sequence[np.ndarray | None]) -> np.ndarray:
    """Sum of per-node contributions, accumulated left to right by node id."""
    if len(contributions) == 0 or any(c is None for c in contributions):
        missing = [r for r, c in enumerate(contributions) if c is None]
        raise BarrierTimeoutError(f"all-reduce missing contributions from nodes {missing}")
    shape = contributions[0].shape
    for r, c in enumerate(contributions):
        if c.shape != shape:
            raise ShapeError(f"node {r} contributed {c.shape}, expected {shape}")
    total = np.array(contributions[0], dtype=np.float64, copy=True)
    for c in contributions[1:]:
        total = total + c
    return total


class SyncCluster:
    """Barrier collectives for ``node_count`` simulated nodes.

    Every contribution is wrapped in an :class:`Envelope` and appended to
    :attr:`log`; per-node bytes are tallied under the caller's ``label``.
    ``workers > 1`` runs node-local phases on a thread pool; results are
    identical to the default single-threaded round-robin mode.
    """

    def __init__(self, node_count: int, workers: int = 1, timeout: float | None = None):
        if node_count < 1:
            raise InvalidConfigError("node_count must be >= 1")
        self.node_count = node_count
        self.workers = workers
        self.timeout = timeout
        self.clock = 0
        self.log: list[Envelope] = []
        self.bytes_sent = np.zeros(node_count, dtype=np.int64)
        self.bytes_by_label: dict[str, np.ndarray] = {}
        self.record_payloads = True

    def map(self, fn, items):
        """Apply ``fn`` to every node's item, preserving node order."""
        if self.workers <= 1:
            return [fn(x) for x in items]
        with ThreadPoolExecutor(max_workers=self.workers) as pool:
            return list(pool.map(fn, items))

    def _account(self, label: str, r: int, nbytes: int) -> None:
        self.bytes_sent[r] += nbytes
        per = self.bytes_by_label.setdefault(label, np.zeros(self.node_count, dtype=np.int64))
        per[r] += nbytes

    def all_reduce_sum(self, contributions: Sequence[np.ndarray | None], label: str = "") -> np.ndarray:
        if len(contributions) != self.node_count:
            raise BarrierTimeoutError(
                f"barrier expected {self.node_count} contributions, got {len(contributions)}"
            )
        total = all_reduce_sum(contributions)
        for r, c in enumerate(contributions):
            env = Envelope(r, np.asarray(c, dtype=np.float64), Tag.ALL_REDUCE, self.clock)
            self._account(label, r, env.nbytes)
            if self.record_payloads:
                self.log.append(env)
        self.clock += 1
        return total

    def all_reduce_mean(self, contributions, label: str = "") -> np.ndarray:
        return self.all_reduce_sum(contributions, label) / self.node_count

    def all_gather_rows(self, blocks: Sequence[np.ndarray], label: str = "") -> np.ndarray:
        """Concatenate row blocks; each node is charged for the full result it receives."""
        if len(blocks) != self.node_count:
            raise BarrierTimeoutError("all-gather missing contributions")
        full = np.vstack(blocks)
        for r, b in enumerate(blocks):
            env = Envelope(r, np.asarray(b, dtype=np.float64), Tag.ALL_REDUCE, self.clock)
            if self.record_payloads:
                self.log.append(env)
            self._account(label, r, full.size * 8)
        self.clock += 1
        return full


class AsyncChannel:
    """Client/server transport: per-client FIFO queues plus a seeded interleaver.

    Each pushed message carries a ``ready_time`` (simulated arrival).  The
    server receives the earliest message; among exact ties the scheduler
    picks at random from ``scheduler_seed``, except that a client passed over
    ``fairness`` times in a row is served next.
    """

    def __init__(self, n_clients: int, scheduler_seed: int = 0, fairness: int | None = None,
                 payload_shape: tuple[int, int] | None = None):
        if n_clients < 1:
            raise InvalidConfigError("need at least one client")
        self.n_clients = n_clients
        self.fairness = n_clients if fairness is None else fairness
        self.payload_shape = payload_shape
        self._rng = keyed_rng(scheduler_seed, 0, Stream.SCHEDULER)
        self._inbox = [deque() for _ in range(n_clients)]
        self._outbox = [deque() for _ in range(n_clients)]
        self._starved = [0] * n_clients
        self._cond = threading.Condition()
        self.closed = False
        self.clock = 0
        self.pushed = 0
        self.delivered = 0
        self.log: list[Envelope] = []
        self.delivery_order: list[int] = []

    def _check(self, env: Envelope, tag: Tag) -> None:
        if env.tag != tag:
            raise ProtocolViolationError(f"expected tag {tag.name}, got {env.tag.name}")
        if self.payload_shape is not None and env.shape != tuple(self.payload_shape):
            raise ProtocolViolationError(
                f"payload shape {env.shape} violates contract {self.payload_shape}"
            )

    def client_push(self, env: Envelope, ready_time: float = 0.0) -> None:
        with self._cond:
            if self.closed:
                raise ProtocolClosedError("push after shutdown")
            if not 0 <= env.sender < self.n_clients:
                raise ProtocolViolationError(f"unknown client {env.sender}")
            self._check(env, Tag.CLIENT_PUSH)
            self._inbox[env.sender].append((float(ready_time), env))
            self.log.append(env)
            self.pushed += 1
            self._cond.notify_all()

    def pending(self) -> int:
        return sum(len(q) for q in self._inbox)

    def _select(self) -> int:
        heads = [(q[0][0], r) for r, q in enumerate(self._inbox) if q]
        earliest = min(t for t, _ in heads)
        tied = [r for t, r in heads if t == earliest]
        starving = [r for r in tied if self._starved[r] >= self.fairness]
        if starving:
            pick = max(starving, key=lambda r: self._starved[r])
        elif len(tied) == 1:
            pick = tied[0]
        else:
            pick = tied[int(self._rng.integers(len(tied)))]
        for r in tied:
            self._starved[r] = 0 if r == pick else self._starved[r] + 1
        return pick

    def server_recv(self, block: bool = False, timeout: float | None = None):
        """Next ``(ready_time, Envelope)``, or ``None`` if nothing is (or will be) pending."""
        with self._cond:
            if block:
                self._cond.wait_for(lambda: self.pending() or self.closed, timeout)
            if not self.pending():
                return None
            r = self._select()
            item = self._inbox[r].popleft()
            self.delivered += 1
            self.delivery_order.append(r)
            return item

    def server_reply(self, node: int, env: Envelope) -> None:
        with self._cond:
            if self.closed:
                raise ProtocolClosedError("reply after shutdown")
            self._check(env, Tag.SERVER_REPLY)
            self._outbox[node].append(env)
            self.log.append(env)
            self.clock += 1
            self._cond.notify_all()

    def client_recv(self, node: int, block: bool = False, timeout: float | None = None):
        """Next reply for ``node``; ``None`` once the channel is closed and drained."""
        with self._cond:
            if block:
                self._cond.wait_for(lambda: self._outbox[node] or self.closed, timeout)
            if self._outbox[node]:
                return self._outbox[node].popleft()
            return None

    def close(self) -> None:
        with self._cond:
            self.closed = True
            self._cond.notify_all()


@dataclass
class NodeState:
    """Data and factor blocks owned by node ``r``."""

    r: int
    rows: range
    cols: range
    M_rows: object  # M_{I_r:}
    M_cols_T: object  # (M_{:J_r})^T
    U_block: np.ndarray
    V_block: np.ndarray
    seed: int
    t: int = 0
    counter: OpCounter = field(default_factory=OpCounter)


class DSANLSNode:
    """Node-local half of each DSANLS phase.

    A phase is ``contribution -> cluster all-reduce -> finish``; the sketch
    is regenerated locally from ``(seed, t)`` in both halves of the phase.
    """

    def __init__(self, state: NodeState, config: RunConfig, m: int, n: int,
                 bound: float | None = None):
        self.state = state
        self.config = config
        self.m, self.n = m, n
        self.d, self.d_prime = config.sketch_sizes(m, n)
        self.bound = bound
        self._A = None

    def sketch_u(self, t: int):
        return gen_sketch(self.config.sketch, self.state.seed, t, self.n, self.d, Stream.U)

    def sketch_v(self, t: int):
        return gen_sketch(self.config.sketch, self.state.seed, t, self.m, self.d_prime, Stream.V)

    def u_contribution(self, t: int) -> np.ndarray:
        s = self.state
        S = self.sketch_u(t)
        self._A = sketch_right(s.M_rows, S, s.counter)
        return sketch_gram(s.V_block, S.restrict(s.cols), s.counter)

    def u_finish(self, B: np.ndarray, t: int) -> None:
        s = self.state
        U = sketched_update(s.U_block, self._A, B, self.config, t, s.counter)
        s.U_block = clamp_domain(U, self.bound) if self.bound is not None else U
        self._A = None

    def v_contribution(self, t: int) -> np.ndarray:
        s = self.state
        S = self.sketch_v(t)
        self._A = sketch_right(s.M_cols_T, S, s.counter)
        return sketch_gram(s.U_block, S.restrict(s.rows), s.counter)

    def v_finish(self, B: np.ndarray, t: int) -> None:
        s = self.state
        V = sketched_update(s.V_block, self._A, B, self.config, t, s.counter)
        s.V_block = clamp_domain(V, self.bound) if self.bound is not None else V
        self._A = None
        s.t = t + 1


class HALSNode:
    """Unsketched distributed baseline: all-gather the fixed factor, then update."""

    def __init__(self, state: NodeState, config: RunConfig, bound: float | None = None):
        self.state = state
        self.config = config
        self.bound = bound
        self.update = hals_update if config.method == "hals" else mu_update

    def u_step(self, V_full):
        s = self.state
        U = self.update(s.M_rows, s.U_block, V_full, s.counter)
        s.U_block = clamp_domain(U, self.bound) if self.bound is not None else U

    def v_step(self, U_full):
        s = self.state
        V = self.update(s.M_cols_T, s.V_block, U_full, s.counter)
        s.V_block = clamp_domain(V, self.bound) if self.bound is not None else V
        s.t += 1


def dsanls_iteration(nodes: Sequence[DSANLSNode], cluster: SyncCluster, t: int) -> None:
    """One outer iteration on every node: U-phase then V-phase."""
    B = cluster.all_reduce_sum(cluster.map(lambda nd: nd.u_contribution(t), nodes), label="U")
    cluster.map(lambda nd: nd.u_finish(B, t), nodes)
    Bp = cluster.all_reduce_sum(cluster.map(lambda nd: nd.v_contribution(t), nodes), label="V")
    cluster.map(lambda nd: nd.v_finish(Bp, t), nodes)


def _hals_iteration(nodes: Sequence[HALSNode], cluster: SyncCluster) -> None:
    V_full = cluster.all_gather_rows([nd.state.V_block for nd in nodes], label="U")
    cluster.map(lambda nd: nd.u_step(V_full), nodes)
    U_full = cluster.all_gather_rows([nd.state.U_block for nd in nodes], label="V")
    cluster.map(lambda nd: nd.v_step(U_full), nodes)


def build_states(M, config: RunConfig, partition: Partition, U0=None, V0=None) -> list[NodeState]:
    """Distribute ``M`` and the initial factors.

    The initial factors (and the uniform scale they are drawn with) are set up
    once at launch together with the seed broadcast; node ``r`` keeps rows
    ``I_r`` of ``U0`` and ``J_r`` of ``V0``.
    """
    m, n = M.shape
    if U0 is None or V0 is None:
        U0, V0 = init_factors(m, n, config.k, config.seed, init_scale(M, config.k))
    Mt = transpose(M)
    states = []
    for r in range(partition.node_count):
        I, J = partition.row_sets[r], partition.col_sets[r]
        states.append(NodeState(
            r=r, rows=I, cols=J,
            M_rows=row_block(M, I),
            M_cols_T=row_block(Mt, J),
            U_block=np.array(U0[I.start:I.stop], dtype=float),
            V_block=np.array(V0[J.start:J.stop], dtype=float),
            seed=config.seed,
        ))
    return states


def assemble(states: Sequence[NodeState]) -> tuple[np.ndarray, np.ndarray]:
    U = np.vstack([s.U_block for s in states])
    V = np.vstack([s.V_block for s in states])
    return U, V


def dsanls_run(M, config: RunConfig, node_count: int, workers: int = 1,
               partition: Partition | None = None, U0=None, V0=None,
               record_payloads: bool = False, monitor: bool = True):
    """Run DSANLS (sketched methods) or the all-gather MU/HALS baseline on ``node_count`` nodes.

    Returns ``(U, V, trace, cluster)``.  ``trace.mults`` is the busiest node's
    cumulative multiply count and ``trace.bytes_comm`` the busiest node's
    cumulative bytes sent.  Errors are computed by the simulator on the
    assembled factors when ``monitor`` is set (otherwise recorded as NaN).
    """
    M = as_matrix(M)
    check_nonnegative(M)
    m, n = M.shape
    if config.k > min(m, n):
        raise InvalidConfigError(f"k={config.k} exceeds min(m, n)")
    partition = partition or make_partition(m, n, node_count)
    if partition.node_count != node_count or partition.shape != (m, n):
        raise InvalidConfigError("partition does not match M and node_count")
    states = build_states(M, config, partition, U0, V0)
    bound = clamp_bound(M) if config.clamp else None
    cluster = SyncCluster(node_count, workers=workers)
    cluster.record_payloads = record_payloads
    if config.sketched:
        nodes = [DSANLSNode(s, config, m, n, bound) for s in states]
        step = lambda t: dsanls_iteration(nodes, cluster, t)  # noqa: E731
    else:
        nodes = [HALSNode(s, config, bound) for s in states]
        step = lambda t: _hals_iteration(nodes, cluster)  # noqa: E731

    def err():
        return relative_error(M, *assemble(states)) if monitor else float("nan")

    trace = RunTrace(method=f"d{config.method}")
    start = time.perf_counter()
    trace.append(0, err(), 0.0, 0, 0)
    for t in range(config.T):
        step(t)
        elapsed = time.perf_counter() - start
        trace.append(t + 1, err(), 1e3 * elapsed,
                     max(s.counter.mults for s in states), int(cluster.bytes_sent.max()))
        if config.time_budget_s is not None and elapsed >= config.time_budget_s:
            break
    U, V = assemble(states)
    return U, V, trace, cluster
