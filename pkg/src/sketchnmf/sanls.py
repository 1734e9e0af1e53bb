"""Single-machine drivers: alternating MU/HALS and sketched ANLS (SANLS).

These define the reference semantics: the distributed runtime in
:mod:`sketchnmf.cluster` reproduces :func:`sanls_run` bit-for-bit on one node.
"""

from __future__ import annotations

import csv
import time
from dataclasses import dataclass, field, fields, replace
from pathlib import Path

import numpy as np
import scipy.sparse as sp

from .exceptions import DegenerateInputError, InvalidConfigError, NegativeEntryError
from .matcore import OpCounter, as_matrix, relative_error
from .sketch import SKETCH_KINDS, SUBSAMPLING, Stream, gen_sketch, keyed_rng, sketch_gram, sketch_right
from .solvers import (
    EtaSchedule,
    MuSchedule,
    clamp_bound,
    clamp_domain,
    hals_update,
    mu_update,
    pcd_step,
    pgd_step,
)

__all__ = [
    "METHODS",
    "RunConfig",
    "RunTrace",
    "check_nonnegative",
    "init_factors",
    "init_scale",
    "nmf_run",
    "run",
    "sanls_run",
    "sketched_update",
    "transpose",
]

METHODS = ("mu", "hals", "sanls-pgd", "sanls-pcd")
SKETCHED_METHODS = ("sanls-pgd", "sanls-pcd")
ASYMMETRY_RATIO = 10
TRACE_HEADER = ("t", "rel_err", "wall_ms", "mults", "bytes_comm")


@dataclass(frozen=True)
class RunConfig:
    """Parameters of one factorisation run.

    ``d`` / ``d_prime`` are the sketch sizes of the U- and V-subproblems; when
    left ``None`` they are ``d_frac`` times ``n`` and ``m`` respectively.
    """

    k: int = 10
    T: int = 100
    method: str = "sanls-pcd"
    sketch: str = SUBSAMPLING
    d: int | None = None
    d_prime: int | None = None
    d_frac: float = 0.1
    eta0: float = 0.01
    gamma: float = 0.01
    alpha: float = 1.0
    beta: float = 1.0
    seed: int = 0
    clamp: bool = False
    inner_steps: int = 1
    time_budget_s: float | None = None

    def __post_init__(self):
        if self.k < 1:
            raise InvalidConfigError("k must be >= 1")
        if self.T < 1:
            raise InvalidConfigError("T must be >= 1")
        if self.method not in METHODS:
            raise InvalidConfigError(f"method must be one of {METHODS}, got {self.method!r}")
        if self.sketch not in SKETCH_KINDS:
            raise InvalidConfigError(f"sketch must be one of {SKETCH_KINDS}")
        if not 0 < self.d_frac <= 1:
            raise InvalidConfigError("d_frac must lie in (0, 1]")
        if self.inner_steps < 1:
            raise InvalidConfigError("inner_steps must be >= 1")

    @property
    def eta(self) -> EtaSchedule:
        return EtaSchedule(self.eta0, self.gamma)

    @property
    def mu(self) -> MuSchedule:
        return MuSchedule(self.alpha, self.beta)

    @property
    def sketched(self) -> bool:
        return self.method in SKETCHED_METHODS

    def sketch_sizes(self, m: int, n: int) -> tuple[int, int]:
        """Resolve ``(d, d')`` for an ``m x n`` input and validate them.

        A strongly rectangular input (one side at least ten times the other)
        leaves the short side's subproblem unsketched.
        """
        d = self.d if self.d is not None else max(1, int(round(self.d_frac * n)))
        dp = self.d_prime if self.d_prime is not None else max(1, int(round(self.d_frac * m)))
        if m * ASYMMETRY_RATIO <= n:
            dp = m
        elif n * ASYMMETRY_RATIO <= m:
            d = n
        if not 1 <= d <= n:
            raise InvalidConfigError(f"need 1 <= d <= n, got d={d}, n={n}")
        if not 1 <= dp <= m:
            raise InvalidConfigError(f"need 1 <= d' <= m, got d'={dp}, m={m}")
        return d, dp

    def replace(self, **changes) -> "RunConfig":
        return replace(self, **changes)

    @classmethod
    def field_names(cls) -> tuple[str, ...]:
        return tuple(f.name for f in fields(cls))


@dataclass
class RunTrace:
    """Per-iteration record; ``mults`` and ``bytes_comm`` are cumulative."""

    t: list[int] = field(default_factory=list)
    rel_err: list[float] = field(default_factory=list)
    wall_ms: list[float] = field(default_factory=list)
    mults: list[int] = field(default_factory=list)
    bytes_comm: list[int] = field(default_factory=list)
    method: str = ""

    def append(self, t, rel_err, wall_ms, mults, bytes_comm) -> None:
        self.t.append(int(t))
        self.rel_err.append(float(rel_err))
        self.wall_ms.append(float(wall_ms))
        self.mults.append(int(mults))
        self.bytes_comm.append(int(bytes_comm))

    def __len__(self) -> int:
        return len(self.t)

    @property
    def final_error(self) -> float:
        return self.rel_err[-1]

    def first_reaching(self, target: float) -> int | None:
        """First iteration whose relative error is ``<= target``."""
        for t, e in zip(self.t, self.rel_err):
            if e <= target:
                return t
        return None

    def wall_ms_reaching(self, target: float) -> float | None:
        """Wall-clock milliseconds at the first record with error ``<= target``."""
        for e, ms in zip(self.rel_err, self.wall_ms):
            if e <= target:
                return ms
        return None

    def rows(self):
        return zip(self.t, self.rel_err, self.wall_ms, self.mults, self.bytes_comm)

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(TRACE_HEADER)
            for t, e, ms, mu, b in self.rows():
                w.writerow([t, repr(e), f"{ms:.3f}", mu, b])

    @classmethod
    def from_csv(cls, path) -> "RunTrace":
        trace = cls(method=Path(path).stem)
        with open(path, newline="") as fh:
            reader = csv.reader(fh)
            header = tuple(next(reader))
            if header != TRACE_HEADER:
                raise ValueError(f"{path}: unexpected trace header {header}")
            for row in reader:
                trace.append(int(row[0]), float(row[1]), float(row[2]), int(row[3]), int(row[4]))
        return trace


def check_nonnegative(M) -> None:
    data = M.data if sp.issparse(M) else M
    if data.size and np.min(data) < 0:
        raise NegativeEntryError("NMF input must be entrywise nonnegative")


def transpose(M):
    """``M^T`` in package storage (CSR stays CSR)."""
    if sp.issparse(M):
        return sp.csr_array(M.T)
    return np.ascontiguousarray(M.T)


def init_scale(M, k: int) -> float:
    """Upper end ``sqrt(mean(M) / k)`` of the uniform initialisation interval."""
    m, n = M.shape
    total = float(M.sum())
    if total <= 0:
        raise DegenerateInputError("cannot initialise factors for an all-zero M")
    return float(np.sqrt(total / (m * n) / k))


def init_factors(m: int, n: int, k: int, seed: int, scale: float):
    """``U0, V0`` i.i.d. uniform on ``[0, scale]``, reproducible from ``seed``."""
    rng = keyed_rng(seed, 0, Stream.INIT)
    U = rng.uniform(0.0, scale, size=(m, k))
    V = rng.uniform(0.0, scale, size=(n, k))
    return U, V


def sketched_update(F, A, B, config: RunConfig, t: int, counter: OpCounter | None = None):
    """``config.inner_steps`` PGD or PCD steps on the sketched pair ``(A, B)``."""
    out = F
    for _ in range(config.inner_steps):
        if config.method == "sanls-pgd":
            out = pgd_step(out, A, B, config.eta(t), counter)
        else:
            out = pcd_step(out, F, A, B, config.mu(t), counter)
    return out


def _prepare(M, config: RunConfig):
    M = as_matrix(M)
    check_nonnegative(M)
    m, n = M.shape
    if config.k > min(m, n):
        raise InvalidConfigError(f"k={config.k} exceeds min(m, n)={min(m, n)}")
    return M, m, n


def _bytes_per_iter(config: RunConfig, m: int, n: int) -> int:
    if config.sketched:
        d, dp = config.sketch_sizes(m, n)
        return 8 * config.k * (d + dp)
    return 8 * config.k * (m + n)


def nmf_run(M, config: RunConfig, U0=None, V0=None):
    """Two-block coordinate descent with MU or HALS updates.

    Returns ``(U, V, trace)``; the trace has ``T + 1`` records, the first taken
    before any update.
    """
    if config.method not in ("mu", "hals"):
        raise InvalidConfigError("nmf_run handles 'mu' and 'hals'; use sanls_run for sketched methods")
    M, m, n = _prepare(M, config)
    Mt = transpose(M)
    if U0 is None or V0 is None:
        U0, V0 = init_factors(m, n, config.k, config.seed, init_scale(M, config.k))
    U, V = np.array(U0, dtype=float), np.array(V0, dtype=float)
    update = mu_update if config.method == "mu" else hals_update
    bound = clamp_bound(M) if config.clamp else None
    counter = OpCounter()
    per_iter = _bytes_per_iter(config, m, n)
    trace = RunTrace(method=config.method)
    start = time.perf_counter()
    trace.append(0, relative_error(M, U, V), 0.0, 0, 0)
    for t in range(config.T):
        U = update(M, U, V, counter)
        if bound is not None:
            U = clamp_domain(U, bound)
        V = update(Mt, V, U, counter)
        if bound is not None:
            V = clamp_domain(V, bound)
        elapsed = time.perf_counter() - start
        trace.append(t + 1, relative_error(M, U, V), 1e3 * elapsed, counter.mults, per_iter * (t + 1))
        if config.time_budget_s is not None and elapsed >= config.time_budget_s:
            break
    return U, V, trace


def sanls_run(M, config: RunConfig, U0=None, V0=None):
    """Sketched ANLS: one PGD/PCD step per subproblem per outer iteration.

    Round ``t`` draws ``S^t`` (``n x d``, stream U) and ``S'^t``
    (``m x d'``, stream V) from the run seed.  The V-subproblem sees the
    freshly updated ``U^{t+1}``.
    """
    if not config.sketched:
        raise InvalidConfigError("sanls_run handles 'sanls-pgd' and 'sanls-pcd'")
    M, m, n = _prepare(M, config)
    Mt = transpose(M)
    d, dp = config.sketch_sizes(m, n)
    if U0 is None or V0 is None:
        U0, V0 = init_factors(m, n, config.k, config.seed, init_scale(M, config.k))
    U, V = np.array(U0, dtype=float), np.array(V0, dtype=float)
    bound = clamp_bound(M) if config.clamp else None
    counter = OpCounter()
    per_iter = _bytes_per_iter(config, m, n)
    trace = RunTrace(method=config.method)
    start = time.perf_counter()
    trace.append(0, relative_error(M, U, V), 0.0, 0, 0)
    for t in range(config.T):
        S = gen_sketch(config.sketch, config.seed, t, n, d, Stream.U)
        A = sketch_right(M, S, counter)
        B = sketch_gram(V, S, counter)
        U = sketched_update(U, A, B, config, t, counter)
        if bound is not None:
            U = clamp_domain(U, bound)
        Sp = gen_sketch(config.sketch, config.seed, t, m, dp, Stream.V)
        Ap = sketch_right(Mt, Sp, counter)
        Bp = sketch_gram(U, Sp, counter)
        V = sketched_update(V, Ap, Bp, config, t, counter)
        if bound is not None:
            V = clamp_domain(V, bound)
        elapsed = time.perf_counter() - start
        trace.append(t + 1, relative_error(M, U, V), 1e3 * elapsed, counter.mults, per_iter * (t + 1))
        if config.time_budget_s is not None and elapsed >= config.time_budget_s:
            break
    return U, V, trace


def run(M, config: RunConfig, U0=None, V0=None):
    """Dispatch to :func:`nmf_run` or :func:`sanls_run` by ``config.method``."""
    if config.sketched:
        return sanls_run(M, config, U0, V0)
    return nmf_run(M, config, U0, V0)
