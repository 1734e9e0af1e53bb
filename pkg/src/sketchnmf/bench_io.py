"""Dataset ingestion and generation, flat config files and trace reports."""

from __future__ import annotations

import os
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable

import numpy as np
import scipy.io
import scipy.sparse as sp

from .exceptions import InvalidConfigError, MatrixMarketError, NegativeEntryError
from .matcore import Matrix, as_matrix
from .sanls import RunConfig, RunTrace

__all__ = [
    "SEED_ENV",
    "DatasetSpec",
    "MMHeader",
    "gen_synthetic",
    "load_dataset",
    "parse_config",
    "read_config",
    "read_matrix_market",
    "read_matrix_market_header",
    "summarize_traces",
    "write_matrix_market",
]

SEED_ENV = "SKETCHNMF_SEED"
_FIELDS = ("real", "integer", "pattern")
_SYMMETRIES = ("general", "symmetric")


@dataclass(frozen=True)
class MMHeader:
    """Declared shape and entry count of a Matrix Market file."""

    rows: int
    cols: int
    nnz: int
    format: str
    field: str
    symmetry: str

    @property
    def sparsity(self) -> float:
        """Fraction of zero cells, ``1 - nnz / (rows * cols)``."""
        return 1.0 - self.nnz / (self.rows * self.cols)


def read_matrix_market_header(path) -> MMHeader:
    """Parse only the banner and size line; the body is never read."""
    try:
        rows, cols, nnz, fmt, field, symmetry = scipy.io.mminfo(str(path))
    except (ValueError, IndexError) as exc:
        raise MatrixMarketError(f"{path}: malformed Matrix Market header ({exc})") from exc
    if fmt not in ("coordinate", "array"):
        raise MatrixMarketError(f"{path}: unsupported format {fmt!r}")
    if field not in _FIELDS:
        raise MatrixMarketError(f"{path}: unsupported field {field!r}; need real values")
    if symmetry not in _SYMMETRIES:
        raise MatrixMarketError(f"{path}: unsupported symmetry {symmetry!r}")
    return MMHeader(int(rows), int(cols), int(nnz), fmt, field, symmetry)


def read_matrix_market(path) -> Matrix:
    """Load a Matrix Market file: CSR for coordinate format, dense for array format.

    Raises
    ------
    MatrixMarketError
        Malformed header, unsupported field, or a body whose entry count
        differs from the header's.
    NegativeEntryError
        Any stored value is negative.
    """
    header = read_matrix_market_header(path)
    try:
        raw = scipy.io.mmread(str(path))
    except (ValueError, OverflowError, IndexError) as exc:
        raise MatrixMarketError(f"{path}: {exc}") from exc
    if header.format == "coordinate":
        coo = sp.coo_array(raw)
        if header.symmetry == "general" and coo.nnz != header.nnz:
            raise MatrixMarketError(f"{path}: header declares {header.nnz} entries, body has {coo.nnz}")
        M = as_matrix(sp.csr_array(coo))
        data = M.data
    else:
        M = as_matrix(np.asarray(raw))
        data = M.ravel()
    if data.size and np.min(data) < 0:
        raise NegativeEntryError(f"{path}: negative entries are outside the NMF input domain")
    return M


def write_matrix_market(path, M) -> None:
    """Write ``M`` (coordinate for sparse, array for dense) with round-trip precision."""
    M = as_matrix(M)
    with open(path, "wb") as fh:
        scipy.io.mmwrite(fh, sp.coo_array(M) if sp.issparse(M) else M, precision=17)


def gen_synthetic(m: int, n: int, k: int, noise: float = 0.0, seed: int = 0,
                  sparse: bool = False):
    """Planted factorisation ``M = max(U* V*^T + noise G, 0)``.

    ``U*``, ``V*`` are i.i.d. uniform on ``[0, 1]`` and ``G`` standard normal,
    all drawn from one generator seeded with ``seed``.

    Returns
    -------
    M : ndarray or csr_array
    U_star : ndarray, shape (m, k)
    V_star : ndarray, shape (n, k)
    """
    if k < 1 or k > min(m, n):
        raise InvalidConfigError(f"need 1 <= k* <= min(m, n), got {k}")
    if noise < 0:
        raise InvalidConfigError("noise level must be nonnegative")
    rng = np.random.default_rng(seed)
    U = rng.uniform(0.0, 1.0, size=(m, k))
    V = rng.uniform(0.0, 1.0, size=(n, k))
    M = U @ V.T
    if noise > 0:
        M = np.maximum(M + noise * rng.standard_normal((m, n)), 0.0)
    M = np.ascontiguousarray(M)
    return (sp.csr_array(M) if sparse else M), U, V


@dataclass(frozen=True)
class DatasetSpec:
    """Either a Matrix Market ``path`` or the parameters of a synthetic instance."""

    path: str | None = None
    m: int = 0
    n: int = 0
    k_star: int = 1
    noise: float = 0.0
    seed: int = 0
    sparse: bool = False

    def __post_init__(self):
        if self.path is None:
            if self.k_star < 1:
                raise InvalidConfigError("synthetic k* must be >= 1")
            if self.noise < 0:
                raise InvalidConfigError("synthetic noise must be >= 0")

    @property
    def synthetic(self) -> bool:
        return self.path is None


def load_dataset(spec: DatasetSpec) -> Matrix:
    if spec.synthetic:
        return gen_synthetic(spec.m, spec.n, spec.k_star, spec.noise, spec.seed, spec.sparse)[0]
    M = read_matrix_market(spec.path)
    if spec.sparse and not sp.issparse(M):
        return sp.csr_array(M)
    return M


def _coerce(name: str, raw: str, kind):
    text = raw.strip()
    if kind is bool:
        if text.lower() in ("1", "true", "yes", "on"):
            return True
        if text.lower() in ("0", "false", "no", "off"):
            return False
        raise InvalidConfigError(f"{name}: expected a boolean, got {raw!r}")
    if text.lower() in ("none", ""):
        return None
    try:
        return kind(text)
    except ValueError as exc:
        raise InvalidConfigError(f"{name}: cannot parse {raw!r}") from exc


_KINDS = {"k": int, "T": int, "d": int, "d_prime": int, "seed": int, "inner_steps": int,
          "method": str, "sketch": str, "clamp": bool,
          "d_frac": float, "eta0": float, "gamma": float, "alpha": float, "beta": float,
          "time_budget_s": float}


def parse_config(lines: Iterable[str], base: RunConfig | None = None,
                 env: dict | None = None) -> RunConfig:
    """Build a :class:`RunConfig` from ``key=value`` lines.

    Keys must be :class:`RunConfig` field names; ``#`` starts a comment.  The
    environment variable ``SKETCHNMF_SEED`` overrides ``seed``.
    """
    values = {}
    names = set(RunConfig.field_names())
    for lineno, line in enumerate(lines, 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise InvalidConfigError(f"line {lineno}: expected key=value")
        key, raw = (s.strip() for s in line.split("=", 1))
        if key not in names:
            raise InvalidConfigError(f"line {lineno}: unknown key {key!r}")
        values[key] = _coerce(key, raw, _KINDS[key])
    env = os.environ if env is None else env
    if env.get(SEED_ENV):
        values["seed"] = _coerce(SEED_ENV, env[SEED_ENV], int)
    base = base or RunConfig()
    return base.replace(**values)


def read_config(path, base: RunConfig | None = None, env: dict | None = None) -> RunConfig:
    with open(path) as fh:
        return parse_config(fh, base, env)


SUMMARY_COLUMNS = ("method", "iters", "final_rel_err", "best_rel_err", "wall_ms", "mults", "bytes_comm")


def summarize_traces(traces: Iterable[RunTrace], target: float | None = None) -> list[dict]:
    """One summary row per trace; with ``target``, also the first iteration reaching it."""
    rows = []
    for tr in traces:
        row = {
            "method": tr.method,
            "iters": tr.t[-1] if tr.t else 0,
            "final_rel_err": tr.final_error,
            "best_rel_err": float(np.min(tr.rel_err)),
            "wall_ms": tr.wall_ms[-1],
            "mults": tr.mults[-1],
            "bytes_comm": tr.bytes_comm[-1],
        }
        if target is not None:
            row["iters_to_target"] = tr.first_reaching(target)
        rows.append(row)
    return rows


def format_summary(rows: list[dict]) -> str:
    """Fixed-width text table."""
    if not rows:
        return ""
    cols = list(rows[0].keys())
    cells = [[_fmt(r[c]) for c in cols] for r in rows]
    widths = [max(len(c), *(len(row[i]) for row in cells)) for i, c in enumerate(cols)]
    out = ["  ".join(c.ljust(w) for c, w in zip(cols, widths))]
    out += ["  ".join(v.ljust(w) for v, w in zip(row, widths)) for row in cells]
    return "\n".join(out) + "\n"


def _fmt(v) -> str:
    if isinstance(v, float):
        return f"{v:.6g}"
    return "-" if v is None else str(v)


def trace_paths(paths) -> list[Path]:
    out = []
    for p in map(Path, paths):
        out.extend(sorted(p.glob("*.csv")) if p.is_dir() else [p])
    return out
