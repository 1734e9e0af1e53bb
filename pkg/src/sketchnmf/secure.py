"""Secure federated NMF over a column partition ``M = [M_{:J_1}, ..., M_{:J_N}]``.

Party ``r`` privately holds ``M_{:J_r}`` and ``V_{J_r:}`` and keeps a full
local copy ``U_(r)``.  Only ``U_(r)``, its sketch ``S_2 U_(r)`` and server
averages of ``U`` ever leave a party; :func:`privacy_audit` checks that on a
recorded message trace.

Protocols
---------
``syn-sd``
    ``T2`` local ANLS iterations, then the parties average ``U_(r)``.
``syn-ssd`` with flags ``U``, ``V`` or ``UV``
    ``V``: the U-update uses the sketched pair ``(M_{:J_r} S_1, V_{J_r:} S_1)``.
    ``U``: every inner iteration all-reduces ``S_2 U_(r)`` (``d2 x k``) and the
    V-update uses the sketched pair ``(S_2 M_{:J_r}, mean S_2 U)``.
``asyn-sd`` / ``asyn-ssd-v``
    A server mixes client pushes with weight ``rho / (rho + t)``.

The module also ships the eavesdropper's tool :func:`sketch_recovery_attack`,
which is never called from protocol code.
"""

from __future__ import annotations

import threading
import time
from dataclasses import dataclass, field, fields, replace
from typing import Iterable, Sequence

import numpy as np
import scipy.linalg
import scipy.sparse as sp

from .cluster import SERVER_ID, AsyncChannel, Envelope, SyncCluster, Tag
from .exceptions import (
    DataCorruptionError,
    InvalidConfigError,
    InvalidSketchSizeError,
    ProtocolViolationError,
    ShapeError,
)
from .matcore import OpCounter, Partition, as_matrix, col_block, frobenius_norm, partition_indices
from .sanls import RunTrace, check_nonnegative, init_factors, init_scale, transpose
from .sketch import SKETCH_KINDS, SUBSAMPLING, SketchMatrix, Stream, gen_sketch, sketch_gram, sketch_right
from .solvers import MuSchedule, EtaSchedule, hals_update, mu_update, pcd_step, pgd_step

__all__ = [
    "PROTOCOLS",
    "AuditRecord",
    "AuditReport",
    "DelayModel",
    "PartyState",
    "Recovered",
    "RelaxationState",
    "SecureConfig",
    "SecureResult",
    "Underdetermined",
    "asyn_client_round",
    "asyn_client_run",
    "asyn_run",
    "asyn_server_update",
    "audit_protocol",
    "make_parties",
    "privacy_audit",
    "run_protocol",
    "s1_for",
    "s2_for",
    "sketch_recovery_attack",
    "syn_sd_run",
    "syn_ssd_run",
]

PROTOCOLS = ("syn-sd", "syn-ssd-u", "syn-ssd-v", "syn-ssd-uv", "asyn-sd", "asyn-ssd-v")


@dataclass(frozen=True)
class SecureConfig:
    """Protocol parameters shared by every party.

    ``solver`` is the unsketched local update (``hals`` or ``mu``);
    ``sketched_solver`` (``pcd`` or ``pgd``) handles sketched pairs.  ``d1``
    is per party (at most its block width), ``d2`` at most ``m``; unset
    sizes are ``d_frac`` of the dimension being sketched.
    """

    k: int = 10
    T1: int = 20
    T2: int = 5
    T: int = 5
    solver: str = "hals"
    sketched_solver: str = "pcd"
    sketch: str = SUBSAMPLING
    d1: int | None = None
    d2: int | None = None
    d_frac: float = 0.1
    alpha: float = 1.0
    beta: float = 1.0
    eta0: float = 0.01
    gamma: float = 0.01
    rho: float = 10.0
    seed: int = 0
    max_updates: int | None = None
    sim_time_budget: float | None = None

    def __post_init__(self):
        if self.k < 1 or self.T1 < 1 or self.T2 < 1 or self.T < 1:
            raise InvalidConfigError("k, T1, T2 and T must all be >= 1")
        if self.solver not in ("hals", "mu"):
            raise InvalidConfigError("solver must be 'hals' or 'mu'")
        if self.sketched_solver not in ("pcd", "pgd"):
            raise InvalidConfigError("sketched_solver must be 'pcd' or 'pgd'")
        if self.sketch not in SKETCH_KINDS:
            raise InvalidConfigError(f"sketch must be one of {SKETCH_KINDS}")
        if not 0 < self.d_frac <= 1:
            raise InvalidConfigError("d_frac must lie in (0, 1]")
        if self.rho <= 0:
            raise InvalidConfigError("rho must be positive")

    def replace(self, **changes) -> "SecureConfig":
        return replace(self, **changes)

    @classmethod
    def field_names(cls) -> tuple[str, ...]:
        return tuple(f.name for f in fields(cls))

    def d1_for(self, width: int) -> int:
        d1 = self.d1 if self.d1 is not None else max(1, int(round(self.d_frac * width)))
        if not 1 <= d1 <= width:
            raise InvalidSketchSizeError(f"d1={d1} must lie in [1, block width {width}]")
        return d1

    def d2_for(self, m: int) -> int:
        d2 = self.d2 if self.d2 is not None else max(1, int(round(self.d_frac * m)))
        if not 1 <= d2 <= m:
            raise InvalidSketchSizeError(f"d2={d2} must lie in [1, m={m}]")
        return d2


@dataclass(frozen=True)
class DelayModel:
    """Simulated compute time: ``per_column`` seconds per owned column per local iteration."""

    per_column: float = 1e-3

    def cost(self, width: int, iterations: int = 1) -> float:
        return self.per_column * width * iterations


@dataclass
class PartyState:
    """Everything party ``r`` owns.  Nothing here is shared by reference."""

    r: int
    cols: range
    M_cols: object  # M_{:J_r}, m x |J_r|
    M_cols_T: object
    V_block: np.ndarray
    U_local: np.ndarray
    t1: int = 0
    t2: int = 0
    sketch_rows: int | None = None
    counter: OpCounter = field(default_factory=OpCounter)
    clock: float = 0.0
    record_private: bool = True
    private_history: list = field(default_factory=list, repr=False)

    @property
    def m(self) -> int:
        return self.M_cols.shape[0]

    @property
    def width(self) -> int:
        return len(self.cols)

    def remember_v(self) -> None:
        if self.record_private:
            self.private_history.append(self.V_block.copy())

    def private_values(self) -> np.ndarray:
        """Nonzero entries of ``M_{:J_r}`` and every ``V_{J_r:}`` iterate it has held."""
        data = self.M_cols.data if sp.issparse(self.M_cols) else np.asarray(self.M_cols).ravel()
        parts = [data] + [v.ravel() for v in self.private_history] + [self.V_block.ravel()]
        vals = np.concatenate(parts)
        return np.unique(vals[vals != 0])


def make_parties(M, widths: Sequence[int] | int, config: SecureConfig,
                 record_private: bool = True) -> list[PartyState]:
    """Split ``M`` by columns and initialise each party locally.

    ``widths`` is a party count (balanced split) or explicit column widths.
    Every party draws the same uniform ``U0``, ``V0`` pattern from the shared
    seed, scaled by ``sqrt(mean(M_{:J_r}) / k)`` of its own block, and keeps
    rows ``J_r`` of ``V0``.
    """
    M = as_matrix(M)
    check_nonnegative(M)
    m, n = M.shape
    if isinstance(widths, (int, np.integer)):
        cols = partition_indices(n, int(widths))
    else:
        cols = Partition.from_widths(m, widths).col_sets
    if sum(len(c) for c in cols) != n:
        raise InvalidConfigError("column widths must sum to n")
    if any(len(c) == 0 for c in cols):
        raise InvalidConfigError("every party needs at least one column")
    if config.k > m:
        raise InvalidConfigError(f"k={config.k} exceeds m={m}")
    parties = []
    for r, J in enumerate(cols):
        Mc = col_block(M, J)
        scale = init_scale(Mc, config.k)
        U0, V0 = init_factors(m, n, config.k, config.seed, scale)
        p = PartyState(r=r, cols=J, M_cols=Mc, M_cols_T=transpose(Mc),
                       V_block=np.array(V0[J.start:J.stop]), U_local=U0,
                       record_private=record_private)
        parties.append(p)
    return parties


@dataclass
class SecureResult:
    U: np.ndarray
    V_blocks: list
    trace: RunTrace
    log: list
    parties: list
    server_updates: int = 0
    sim_time: float = 0.0
    bytes_by_label: dict = field(default_factory=dict)

    @property
    def V(self) -> np.ndarray:
        return np.vstack(self.V_blocks)


def _local_update(config: SecureConfig):
    return hals_update if config.solver == "hals" else mu_update


def _sketched_step(F, A, B, config: SecureConfig, t: int, counter):
    if config.sketched_solver == "pgd":
        return pgd_step(F, A, B, EtaSchedule(config.eta0, config.gamma)(t), counter)
    return pcd_step(F, F, A, B, MuSchedule(config.alpha, config.beta)(t), counter)


def monitored_error(parties: Sequence[PartyState], U: np.ndarray | None = None) -> float:
    """Global relative error as an outside observer would compute it.

    Uses each party's own ``U_(r)`` unless a common ``U`` is given.  This is
    simulator instrumentation and never enters the message trace.
    """
    num = den = 0.0
    for p in parties:
        Uc = p.U_local if U is None else U
        Md = p.M_cols.toarray() if sp.issparse(p.M_cols) else p.M_cols
        R = Md - Uc @ p.V_block.T
        num += float(np.sum(R * R))
        den += frobenius_norm(p.M_cols) ** 2
    return float(np.sqrt(num / den))


def s1_for(width: int, config: SecureConfig, t: int) -> SketchMatrix:
    """``S_1^t`` (``|J_r| x d1``); parties with equal widths hold identical copies."""
    return gen_sketch(config.sketch, config.seed, t, width, config.d1_for(width), Stream.S1)


def s2_for(m: int, config: SecureConfig, t: int) -> SketchMatrix:
    """``S_2^t`` stored transposed (``m x d2``), shared by every party."""
    return gen_sketch(config.sketch, config.seed, t, m, config.d2_for(m), Stream.S2)


def _u_update(p: PartyState, config: SecureConfig, t: int, sketch_v: bool) -> None:
    if sketch_v:
        S1 = s1_for(p.width, config, t)
        A = sketch_right(p.M_cols, S1, p.counter)
        B = sketch_gram(p.V_block, S1, p.counter)
        p.U_local = _sketched_step(p.U_local, A, B, config, t, p.counter)
    else:
        p.U_local = _local_update(config)(p.M_cols, p.U_local, p.V_block, p.counter)


def _v_update(p: PartyState, config: SecureConfig) -> None:
    p.V_block = _local_update(config)(p.M_cols_T, p.V_block, p.U_local, p.counter)
    p.remember_v()


def _barrier(parties: Sequence[PartyState]) -> float:
    now = max(p.clock for p in parties)
    for p in parties:
        p.clock = now
    return now


def syn_ssd_run(parties: list[PartyState], config: SecureConfig, sketch_u: bool = True,
                sketch_v: bool = True, delay: DelayModel | None = None,
                monitor: bool = True) -> SecureResult:
    """Synchronous secure protocol; with both flags off this is Syn-SD.

    Inner iteration ``t`` (counted from 0 over all rounds) regenerates
    ``S_1^t`` and ``S_2^t`` from ``(seed, t)``, so every party uses the same
    sketches.  Stops after ``T1`` outer rounds or when the next barrier would
    pass ``config.sim_time_budget``.
    """
    delay = delay or DelayModel()
    N = len(parties)
    m, k = parties[0].m, config.k
    d2 = config.d2_for(m) if sketch_u else None
    for p in parties:
        if p.U_local.shape != (m, k):
            raise ShapeError("party U copy must be m x k")
        p.sketch_rows = d2
        p.remember_v()
    cluster = SyncCluster(N)
    trace = RunTrace(method=_protocol_name(sketch_u, sketch_v))
    start = time.perf_counter()

    def record():
        err = monitored_error(parties) if monitor else float("nan")
        trace.append(parties[0].t2, err, 1e3 * (time.perf_counter() - start),
                     max(p.counter.mults for p in parties), int(cluster.bytes_sent.max()))

    record()
    rounds = 0
    for t1 in range(config.T1):
        if config.sim_time_budget is not None:
            # the barrier lands when the slowest party finishes its T2 iterations
            finish = max(p.clock + delay.cost(p.width, config.T2) for p in parties)
            if finish > config.sim_time_budget:
                break
        for t2 in range(config.T2):
            t = t1 * config.T2 + t2
            for p in parties:
                _u_update(p, config, t, sketch_v)
                p.clock += delay.cost(p.width)
            if sketch_u:
                S2 = s2_for(m, config, t)
                contrib = [np.ascontiguousarray(sketch_gram(p.U_local, S2, p.counter).T) for p in parties]
                _barrier(parties)
                SU = cluster.all_reduce_mean(contrib, label="inner")
                for p in parties:
                    A = sketch_right(p.M_cols_T, S2, p.counter)
                    p.V_block = _sketched_step(p.V_block, A, np.ascontiguousarray(SU.T), config, t, p.counter)
                    p.remember_v()
            else:
                for p in parties:
                    _v_update(p, config)
            for p in parties:
                p.t2 += 1
        _barrier(parties)
        U = cluster.all_reduce_mean([p.U_local for p in parties], label="outer")
        for p in parties:
            p.U_local = U.copy()
            p.t1 += 1
        rounds += 1
        record()
    return SecureResult(
        U=parties[0].U_local.copy(), V_blocks=[p.V_block.copy() for p in parties],
        trace=trace, log=cluster.log, parties=parties, server_updates=rounds * N,
        sim_time=max(p.clock for p in parties), bytes_by_label=cluster.bytes_by_label,
    )


def syn_sd_run(parties: list[PartyState], config: SecureConfig, delay: DelayModel | None = None,
               monitor: bool = True) -> SecureResult:
    """Syn-SD: local ANLS for ``T2`` iterations, then average ``U_(r)``."""
    return syn_ssd_run(parties, config, sketch_u=False, sketch_v=False, delay=delay, monitor=monitor)


def _protocol_name(sketch_u: bool, sketch_v: bool) -> str:
    if not (sketch_u or sketch_v):
        return "syn-sd"
    return "syn-ssd-" + ("u" if sketch_u else "") + ("v" if sketch_v else "")


@dataclass(frozen=True)
class RelaxationState:
    """Server state: ``U`` and the update counter ``t``."""

    rho: float
    t: int
    U: np.ndarray

    def __post_init__(self):
        if self.rho <= 0:
            raise InvalidConfigError("rho must be positive")
        if self.t < 0:
            raise InvalidConfigError("update counter must be nonnegative")

    @property
    def omega(self) -> float:
        return self.rho / (self.rho + self.t)


def asyn_server_update(state: RelaxationState, U_r: np.ndarray) -> RelaxationState:
    """``U <- (1 - w) U + w U_(r)`` with ``w = rho / (rho + t)``; returns the next state."""
    U_r = np.asarray(U_r, dtype=np.float64)
    if U_r.shape != state.U.shape:
        raise ProtocolViolationError(f"client pushed {U_r.shape}, server holds {state.U.shape}")
    if U_r.size and U_r.min() < 0:
        raise ProtocolViolationError("client pushed a negative U")
    w = state.omega
    U = (1.0 - w) * state.U + w * U_r
    return RelaxationState(state.rho, state.t + 1, U)


def asyn_client_round(party: PartyState, U: np.ndarray | None, config: SecureConfig,
                      mode: str = "sd") -> np.ndarray:
    """``T`` local (V, U) update pairs starting from ``U`` (or the party's own copy)."""
    if mode not in ("sd", "ssd-v"):
        raise InvalidConfigError("client mode must be 'sd' or 'ssd-v'")
    if U is not None:
        party.U_local = np.array(U, dtype=np.float64)
    for _ in range(config.T):
        _v_update(party, config)
        _u_update(party, config, party.t2, sketch_v=(mode == "ssd-v"))
        party.t2 += 1
    party.t1 += 1
    return party.U_local


def asyn_client_run(party: PartyState, channel: AsyncChannel, config: SecureConfig,
                    mode: str = "sd", timeout: float | None = 30.0) -> np.ndarray:
    """Client loop for a threaded deployment; returns the last ``V_{J_r:}``.

    The first round starts from the party's own initial ``U_(r)``; later
    rounds restart from the freshest server reply.  Shutdown ends the loop.
    """
    from .exceptions import ProtocolClosedError

    U = None
    while True:
        U_r = asyn_client_round(party, U, config, mode)
        try:
            channel.client_push(Envelope(party.r, U_r.copy(), Tag.CLIENT_PUSH, party.t1))
        except ProtocolClosedError:
            break
        reply = channel.client_recv(party.r, block=True, timeout=timeout)
        if reply is None:
            break
        U = reply.payload
    return party.V_block


def asyn_run(parties: list[PartyState], config: SecureConfig, mode: str = "sd",
             delay: DelayModel | None = None, scheduler_seed: int | None = None,
             monitor: bool = True, threaded: bool = False) -> SecureResult:
    """Asyn-SD / Asyn-SSD-V with a serialized server.

    In the default simulated mode each client's round costs
    ``delay.cost(width, T)`` simulated seconds and the channel delivers pushes
    in simulated-arrival order.  The run stops after ``max_updates`` server
    updates or once ``sim_time_budget`` would be exceeded (default:
    ``T1 * N`` updates).  ``threaded=True`` runs clients on real threads;
    delivery order is then up to the OS scheduler.
    """
    delay = delay or DelayModel()
    N = len(parties)
    m, k = parties[0].m, config.k
    max_updates = config.max_updates if config.max_updates is not None else config.T1 * N
    seed = config.seed if scheduler_seed is None else scheduler_seed
    channel = AsyncChannel(N, scheduler_seed=seed, payload_shape=(m, k))
    for p in parties:
        p.remember_v()
    # the first server update has weight 1, so the server's U0 is never observable
    state = RelaxationState(config.rho, 0, np.zeros((m, k)))
    trace = RunTrace(method=f"asyn-{mode}")
    start = time.perf_counter()

    def record(U):
        err = monitored_error(parties, U) if monitor else float("nan")
        trace.append(state.t, err, 1e3 * (time.perf_counter() - start),
                     max(p.counter.mults for p in parties), 8 * m * k * channel.pushed)

    if monitor:
        trace.append(0, monitored_error(parties), 0.0, 0, 0)
    now = 0.0
    if threaded:
        workers = [threading.Thread(target=asyn_client_run, args=(p, channel, config, mode), daemon=True)
                   for p in parties]
        for w in workers:
            w.start()
        while state.t < max_updates:
            item = channel.server_recv(block=True, timeout=30.0)
            if item is None:
                break
            _, env = item
            state = asyn_server_update(state, env.payload)
            channel.server_reply(env.sender, Envelope(SERVER_ID, state.U.copy(), Tag.SERVER_REPLY, state.t))
            record(state.U)
        channel.close()
        for w in workers:
            w.join(timeout=30.0)
    else:
        for p in parties:
            U_r = asyn_client_round(p, None, config, mode)
            p.clock = delay.cost(p.width, config.T)
            channel.client_push(Envelope(p.r, U_r.copy(), Tag.CLIENT_PUSH, p.t1), ready_time=p.clock)
        while state.t < max_updates:
            item = channel.server_recv()
            if item is None:
                break
            arrival, env = item
            if config.sim_time_budget is not None and arrival > config.sim_time_budget:
                break
            now = arrival
            state = asyn_server_update(state, env.payload)
            channel.server_reply(env.sender, Envelope(SERVER_ID, state.U.copy(), Tag.SERVER_REPLY, state.t))
            record(state.U)
            p = parties[env.sender]
            reply = channel.client_recv(p.r)
            U_r = asyn_client_round(p, reply.payload, config, mode)
            p.clock = now + delay.cost(p.width, config.T)
            channel.client_push(Envelope(p.r, U_r.copy(), Tag.CLIENT_PUSH, p.t1), ready_time=p.clock)
        channel.close()
    return SecureResult(
        U=state.U.copy(), V_blocks=[p.V_block.copy() for p in parties], trace=trace,
        log=channel.log, parties=parties, server_updates=state.t, sim_time=now,
        bytes_by_label={"push": np.array([8 * m * k * sum(1 for e in channel.log
                                                             if e.sender == p.r) for p in parties])},
    )


def run_protocol(M, protocol: str, widths, config: SecureConfig, delay: DelayModel | None = None,
                 monitor: bool = True, record_private: bool = True) -> SecureResult:
    """Build parties from ``M`` and run one of :data:`PROTOCOLS`."""
    if protocol not in PROTOCOLS:
        raise InvalidConfigError(f"protocol must be one of {PROTOCOLS}")
    parties = make_parties(M, widths, config, record_private=record_private)
    if protocol == "syn-sd":
        return syn_sd_run(parties, config, delay, monitor)
    if protocol.startswith("syn-ssd-"):
        flags = protocol.rsplit("-", 1)[1]
        return syn_ssd_run(parties, config, "u" in flags, "v" in flags, delay, monitor)
    return asyn_run(parties, config, "sd" if protocol == "asyn-sd" else "ssd-v", delay, monitor=monitor)


# -- privacy audit ---------------------------------------------------------

PARTY_TAGS = frozenset({Tag.ALL_REDUCE, Tag.CLIENT_PUSH})


@dataclass(frozen=True)
class AuditRecord:
    sender: int
    tag: Tag
    rows: int
    cols: int
    violation: bool
    reason: str = ""

    def to_line(self) -> str:
        sender = "server" if self.sender == SERVER_ID else str(self.sender)
        line = (f"sender={sender} tag={self.tag.name} rows={self.rows} cols={self.cols} "
                f"violation={int(self.violation)}")
        return f"{line} reason={self.reason}" if self.reason else line


@dataclass
class AuditReport:
    records: list = field(default_factory=list)

    @property
    def violations(self) -> list:
        return [r for r in self.records if r.violation]

    @property
    def ok(self) -> bool:
        return not self.violations

    def extend(self, other: "AuditReport") -> None:
        self.records.extend(other.records)

    def to_text(self) -> str:
        lines = [r.to_line() for r in self.records]
        lines.append(f"summary envelopes={len(self.records)} violations={len(self.violations)}")
        return "\n".join(lines) + "\n"


def _allowed_shapes(party: PartyState, k: int) -> set:
    shapes = {(party.m, k)}
    if party.sketch_rows is not None:
        shapes.add((party.sketch_rows, k))
    return shapes


def privacy_audit(trace: Iterable[Envelope], party: PartyState,
                  allowed_shapes: set | None = None) -> AuditReport:
    """Check every envelope sent by ``party``.

    Violations: a tag other than an all-reduce contribution or client push, a
    payload shape outside ``allowed_shapes`` (default ``m x k`` plus
    ``d2 x k`` when the party sketched ``U``), or any nonzero entry of
    ``M_{:J_r}`` or of a ``V_{J_r:}`` iterate appearing verbatim.
    """
    secrets = party.private_values()
    k = party.U_local.shape[1]
    shapes = allowed_shapes if allowed_shapes is not None else _allowed_shapes(party, k)
    report = AuditReport()
    for env in trace:
        if env.sender != party.r:
            continue
        reasons = []
        if env.tag not in PARTY_TAGS:
            reasons.append("tag")
        if env.shape not in shapes:
            reasons.append("shape")
        vals = env.payload.ravel()
        vals = vals[vals != 0]
        if vals.size and secrets.size and np.isin(vals, secrets).any():
            reasons.append("private-value")
        report.records.append(AuditRecord(env.sender, env.tag, *env.shape, bool(reasons), ",".join(reasons)))
    return report


def audit_protocol(trace: Sequence[Envelope], parties: Sequence[PartyState]) -> AuditReport:
    """Audit every party plus the server's replies (tag and ``m x k`` shape only)."""
    report = AuditReport()
    for p in parties:
        report.extend(privacy_audit(trace, p))
    m, k = parties[0].m, parties[0].U_local.shape[1]
    for env in trace:
        if env.sender == SERVER_ID:
            bad = env.tag != Tag.SERVER_REPLY or env.shape != (m, k)
            report.records.append(AuditRecord(env.sender, env.tag, *env.shape, bad, "shape" if bad else ""))
    # envelopes from senders that are neither a party nor the server
    known = {p.r for p in parties} | {SERVER_ID}
    for env in trace:
        if env.sender not in known:
            report.records.append(AuditRecord(env.sender, env.tag, *env.shape, True, "unknown-sender"))
    return report


# -- sketch recovery attack ------------------------------------------------

@dataclass(frozen=True)
class Recovered:
    M: np.ndarray
    rank: int


@dataclass(frozen=True)
class Underdetermined:
    rank: int
    n: int


def sketch_recovery_attack(pairs: Sequence[tuple], consistency_tol: float = 1e-6):
    """Recover ``M`` from observed ``(S_i, M S_i)`` pairs when the stacked ``S`` has rank ``n``.

    Parameters
    ----------
    pairs : sequence of (SketchMatrix or ndarray, ndarray)
        Sketches ``n x d_i`` and their products ``m x d_i``.
    consistency_tol : float
        Relative residual above which the pairs are declared mutually
        inconsistent.

    Returns
    -------
    Recovered or Underdetermined
        ``Recovered(M_hat, n)`` solves ``M [S_1 ... S_p] = [M S_1 ... M S_p]``
        by Gaussian elimination on ``n`` pivot-selected columns; otherwise the
        achieved rank of the stacked sketch.

    Raises
    ------
    DataCorruptionError
        If no ``M`` reproduces all products.
    """
    if not pairs:
        raise InvalidConfigError("need at least one (S, M S) pair")
    Ss, Ps = [], []
    for S, P in pairs:
        S = S.to_dense() if isinstance(S, SketchMatrix) else np.asarray(S, dtype=np.float64)
        P = np.asarray(P, dtype=np.float64)
        if P.ndim != 2 or S.ndim != 2 or P.shape[1] != S.shape[1]:
            raise ShapeError("each product must have as many columns as its sketch")
        Ss.append(S)
        Ps.append(P)
    n, m = Ss[0].shape[0], Ps[0].shape[0]
    if any(S.shape[0] != n for S in Ss) or any(P.shape[0] != m for P in Ps):
        raise ShapeError("all pairs must share the source dimension n and row count m")
    S_all, P_all = np.hstack(Ss), np.hstack(Ps)
    rank = int(np.linalg.matrix_rank(S_all))
    if rank < n:
        return Underdetermined(rank, n)
    _, _, piv = scipy.linalg.qr(S_all, mode="economic", pivoting=True)
    basis = np.sort(piv[:n])
    # M S_b = P_b  <=>  S_b^T M^T = P_b^T, an n x n system solved by LU elimination
    M_hat = scipy.linalg.solve(S_all[:, basis].T, P_all[:, basis].T).T
    resid = np.linalg.norm(M_hat @ S_all - P_all)
    ref = max(np.linalg.norm(P_all), np.finfo(float).tiny)
    if resid > consistency_tol * ref:
        raise DataCorruptionError(f"sketch pairs are inconsistent (relative residual {resid / ref:.2e})")
    return Recovered(M_hat, rank)
