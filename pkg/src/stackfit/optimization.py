"""Linear programming and equality-constrained least squares.

The LP solver is a dense two-phase primal simplex on a full tableau. It
works on the standard form ``min c.x  s.t.  A x = b, x >= 0`` produced by
:func:`to_standard_form`; general bounds, free variables and ``<=`` rows are
rewritten first and the solution is mapped back afterwards.
"""
from __future__ import annotations

import enum
import math
import re
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.linalg.blas import dger

__all__ = [
    "LE",
    "EQ",
    "LinearProgram",
    "LpSolution",
    "LpStatus",
    "SingularSystem",
    "SolverConfig",
    "VariableMap",
    "format_lp",
    "gauss_solve",
    "parse_lp",
    "solve",
    "solve_linear_eq_constrained_lsq",
    "to_standard_form",
    "verify_solution",
    "write_lp",
]

LE = "<="
EQ = "="


class SingularSystem(np.linalg.LinAlgError):
    """The linear system has no unique solution at the pivot tolerance."""


class LpStatus(enum.Enum):
    OPTIMAL = "optimal"
    INFEASIBLE = "infeasible"
    UNBOUNDED = "unbounded"
    MAX_ITERATIONS = "max_iterations"


@dataclass
class LinearProgram:
    """``min objective.x`` subject to ``A x (<=|=) rhs`` and ``lower <= x <= upper``.

    ``lower``/``upper`` default to ``0``/``+inf``. Use ``-np.inf`` for a free
    lower bound.
    """

    objective: np.ndarray
    A: np.ndarray = None
    senses: list = None
    rhs: np.ndarray = None
    lower: np.ndarray = None
    upper: np.ndarray = None
    names: list = None

    def __post_init__(self):
        self.objective = np.asarray(self.objective, dtype=float).reshape(-1)
        n = self.objective.size
        if self.A is None:
            self.A = np.zeros((0, n))
        self.A = np.asarray(self.A, dtype=float).reshape(-1, n)
        m = self.A.shape[0]
        self.senses = [LE] * m if self.senses is None else list(self.senses)
        self.rhs = np.zeros(m) if self.rhs is None else np.asarray(self.rhs, dtype=float).reshape(-1)
        self.lower = np.zeros(n) if self.lower is None else np.asarray(self.lower, dtype=float).reshape(-1).copy()
        self.upper = np.full(n, np.inf) if self.upper is None else np.asarray(self.upper, dtype=float).reshape(-1).copy()
        if len(self.senses) != m or self.rhs.size != m:
            raise ValueError("senses and rhs must have one entry per constraint row")
        if self.lower.size != n or self.upper.size != n:
            raise ValueError("bounds must have one entry per variable")
        if any(s not in (LE, EQ) for s in self.senses):
            raise ValueError(f"relations must be {LE!r} or {EQ!r}")
        if np.any(self.lower > self.upper):
            raise ValueError("lower bound exceeds upper bound")
        if np.any(self.lower == np.inf) or np.any(self.upper == -np.inf):
            raise ValueError("infinite bound on the wrong side")

    @property
    def num_vars(self) -> int:
        return self.objective.size

    @property
    def num_constraints(self) -> int:
        return self.A.shape[0]

    def constraints(self):
        """Iterate over ``(row, relation, rhs)`` triples."""
        for i in range(self.num_constraints):
            yield self.A[i], self.senses[i], float(self.rhs[i])


@dataclass(frozen=True)
class SolverConfig:
    feas_tol: float = 1e-9
    pivot_tol: float = 1e-10
    max_iterations: int | None = None  # None -> 50 * (vars + rows) of the standard form
    anti_cycling: bool = True
    bland_after: int = 50  # consecutive degenerate pivots before switching to Bland's rule

    def __post_init__(self):
        if not (self.feas_tol > 0 and self.pivot_tol > 0):
            raise ValueError("tolerances must be positive")


@dataclass
class LpSolution:
    status: LpStatus
    x: np.ndarray | None = None
    objective_value: float | None = None
    iterations: int = 0

    @property
    def optimal(self) -> bool:
        return self.status is LpStatus.OPTIMAL


@dataclass
class VariableMap:
    """Recovers original variables: ``x = shift + T @ x_std``."""

    T: np.ndarray
    shift: np.ndarray
    objective_offset: float = 0.0

    def recover(self, x_std) -> np.ndarray:
        return self.shift + self.T @ np.asarray(x_std, dtype=float)


def to_standard_form(lp: LinearProgram) -> tuple[LinearProgram, VariableMap]:
    """Rewrite ``lp`` with equality rows and nonnegative variables only.

    Variable columns are laid out as: one column per original variable (two
    for free variables, the second being the negated copy), then one slack
    per ``<=`` row, then one slack per finite two-sided bound.
    """
    n = lp.num_vars
    cols, tmap, shift = [], [], np.zeros(n)
    bound_rows = []  # (std column, ub - lb)
    for j in range(n):
        lo, hi = lp.lower[j], lp.upper[j]
        if np.isfinite(lo):
            shift[j] = lo
            tmap.append((j, len(cols), 1.0))
            if np.isfinite(hi):
                bound_rows.append((len(cols), hi - lo))
            cols.append((j, 1.0))
        elif np.isfinite(hi):
            shift[j] = hi
            tmap.append((j, len(cols), -1.0))
            cols.append((j, -1.0))
        else:
            tmap.append((j, len(cols), 1.0))
            cols.append((j, 1.0))
            tmap.append((j, len(cols), -1.0))
            cols.append((j, -1.0))

    m = lp.num_constraints
    le_rows = [i for i, s in enumerate(lp.senses) if s == LE]
    n_struct = len(cols)
    n_std = n_struct + len(le_rows) + len(bound_rows)
    m_std = m + len(bound_rows)

    A = np.zeros((m_std, n_std))
    b = np.zeros(m_std)
    c = np.zeros(n_std)
    for k, (j, sgn) in enumerate(cols):
        A[:m, k] = sgn * lp.A[:, j]
        c[k] = sgn * lp.objective[j]
    b[:m] = lp.rhs - lp.A @ shift
    for k, i in enumerate(le_rows):
        A[i, n_struct + k] = 1.0
    for k, (col, width) in enumerate(bound_rows):
        r = m + k
        A[r, col] = 1.0
        A[r, n_struct + len(le_rows) + k] = 1.0
        b[r] = width

    T = np.zeros((n, n_std))
    for j, k, sgn in tmap:
        T[j, k] = sgn
    std = LinearProgram(c, A, [EQ] * m_std, b)
    return std, VariableMap(T, shift, float(lp.objective @ shift))


# --- simplex core ---------------------------------------------------------

class _Tableau:
    """Dense tableau ``[B^-1 A | B^-1 b]`` plus a reduced-cost row.

    The original rows are kept so the tableau can be rebuilt from the basis
    ("reinversion") to shed accumulated rounding.
    """

    def __init__(self, A, b, basis, c):
        self.A = np.asarray(A, dtype=float)
        self.b = np.asarray(b, dtype=float)
        self.m, self.n = self.A.shape
        self.basis = np.array(basis, dtype=int)
        self.c = np.asarray(c, dtype=float)
        self.T = np.zeros((self.m + 1, self.n + 1), order="F")
        self.T[: self.m, : self.n] = self.A
        self.T[: self.m, self.n] = self.b
        self.set_costs(self.c)

    def set_costs(self, c):
        self.c = np.asarray(c, dtype=float)
        m, n = self.m, self.n
        cb = self.c[self.basis]
        self.T[m, :n] = self.c - cb @ self.T[:m, :n]
        self.T[m, n] = -(cb @ self.T[:m, n])

    def reinvert(self) -> bool:
        m, n = self.m, self.n
        if m == 0:
            return True
        try:
            X = np.linalg.solve(self.A[:, self.basis], np.column_stack([self.A, self.b]))
        except np.linalg.LinAlgError:
            return False
        self.T[:m, :] = X
        self.T[:m, self.basis] = np.eye(m)
        np.maximum(self.T[:m, n], 0.0, out=self.T[:m, n])
        self.set_costs(self.c)
        return True

    def pivot(self, r, q):
        T = self.T
        T[r] /= T[r, q]
        col = T[:, q].copy()
        col[r] = 0.0
        # in-place rank-1 update; T is Fortran-ordered so BLAS does not copy
        self.T = T = dger(-1.0, col, T[r].copy(), a=T, overwrite_a=1)
        T[:, q] = 0.0
        T[r, q] = 1.0
        self.basis[r] = q

    def drop_rows(self, keep, n_keep):
        """Keep rows ``keep`` and the first ``n_keep`` columns."""
        self.A = self.A[keep][:, :n_keep]
        self.b = self.b[keep]
        self.basis = self.basis[keep]
        self.c = self.c[:n_keep]
        T = np.vstack([self.T[keep][:, list(range(n_keep)) + [self.n]], np.zeros((1, n_keep + 1))])
        self.T = np.asfortranarray(T)
        self.m, self.n = len(keep), n_keep
        self.set_costs(self.c)


# a reinversion costs about as much as m pivots, so large tableaus refresh less often
REINVERT_EVERY = 250


def _ratio_row(tab: _Tableau, col, cfg: SolverConfig, bland: bool):
    """Leaving row for entering column ``col``; None if the column is unbounded."""
    m = tab.m
    rhs = tab.T[:m, -1]
    # tiny pivots blow up the tableau; Bland mode is stricter since it cannot pick
    tol = max(cfg.pivot_tol, (1e-7 if bland else 1e-9) * float(np.max(np.abs(col))))
    rows = np.flatnonzero(col > tol)
    if rows.size == 0:
        return None, 0.0
    ratios = rhs[rows] / col[rows]
    best = ratios.min()
    if bland:
        ties = rows[ratios <= best + 1e-12 * (1.0 + abs(best))]
        r = int(ties[np.argmin(tab.basis[ties])])
    else:
        # Harris two-pass: allow feas_tol slack, then take the largest pivot
        relaxed = ((rhs[rows] + cfg.feas_tol) / col[rows]).min()
        cand = rows[ratios <= relaxed]
        r = int(cand[np.argmax(col[cand])])
    return r, float(rhs[r] / col[r])


def _run(tab: _Tableau, cfg: SolverConfig, budget: int, allowed: int):
    """Iterate on ``tab`` using columns ``< allowed``. Returns (status, iterations)."""
    m = tab.m
    bland = False
    degenerate = 0
    it = 0
    since = 0
    verified = False
    while True:
        T = tab.T
        red = T[m, :allowed]
        if bland:
            cand = np.flatnonzero(red < -cfg.pivot_tol)
            q = int(cand[0]) if cand.size else -1
        else:
            q = int(np.argmin(red))
            if red[q] >= -cfg.pivot_tol:
                q = -1
        if q >= 0:
            r, step = _ratio_row(tab, T[:m, q], cfg, bland)
        if q < 0 or r is None:
            # confirm the verdict on a freshly rebuilt tableau
            if verified or since == 0 or not tab.reinvert():
                return (LpStatus.OPTIMAL if q < 0 else LpStatus.UNBOUNDED), it
            verified, since = True, 0
            continue
        if it >= budget:
            return LpStatus.MAX_ITERATIONS, it
        tab.pivot(r, q)
        T = tab.T
        np.maximum(T[:m, -1], 0.0, out=T[:m, -1])
        it += 1
        since += 1
        verified = False
        if since >= max(REINVERT_EVERY, m) and tab.reinvert():
            since = 0
        if step <= cfg.feas_tol:
            degenerate += 1
            if cfg.anti_cycling and degenerate >= cfg.bland_after:
                bland = True
        else:
            degenerate = 0
            bland = False


def _dual_cleanup(tab: _Tableau, cfg: SolverConfig, budget: int):
    """Dual simplex pivots restoring primal feasibility of a dual-feasible basis."""
    m, n = tab.m, tab.n
    it = 0
    while it < budget:
        T = tab.T
        rhs = T[:m, -1]
        r = int(np.argmin(rhs))
        if rhs[r] >= -cfg.feas_tol:
            np.maximum(rhs, 0.0, out=T[:m, -1])
            return LpStatus.OPTIMAL, it
        row = T[r, :n]
        cand = np.flatnonzero(row < -cfg.pivot_tol)
        if cand.size == 0:
            return LpStatus.INFEASIBLE, it
        ratios = np.maximum(T[m, cand], 0.0) / -row[cand]
        q = int(cand[np.argmin(ratios)])
        tab.pivot(r, q)
        it += 1
    return LpStatus.MAX_ITERATIONS, it


def _perturbation(b, rows):
    """Small distinct positive offsets for the slack-basic rows (breaks degenerate ties)."""
    k = np.arange(len(b), dtype=float)
    frac = (k * 0.6180339887498949) % 1.0
    d = 1e-7 * (1.0 + np.abs(b)) * (1.0 + frac)
    out = np.zeros_like(b)
    out[rows] = d[rows]
    return out


def _simplex_standard(A, b, c, cfg: SolverConfig, perturb: bool = True):
    """Solve ``min c.x, A x = b, x >= 0``. Returns (status, x, iterations).

    ``<=``-derived rows (those starting with a slack in the basis) are relaxed
    by a tiny perturbation to escape degenerate vertices; the true right-hand
    side is restored at the end and any resulting infeasibility repaired with
    dual simplex pivots.
    """
    A = np.array(A, dtype=float)
    b = np.array(b, dtype=float)
    c = np.asarray(c, dtype=float)
    m, n = A.shape
    budget = cfg.max_iterations if cfg.max_iterations is not None else 50 * (n + m)
    if m == 0:
        if np.any(c < -cfg.pivot_tol):
            return LpStatus.UNBOUNDED, None, 0
        return LpStatus.OPTIMAL, np.zeros(n), 0

    neg = b < 0
    A[neg] *= -1.0
    b[neg] *= -1.0

    # reuse identity columns (slacks) as the starting basis where possible
    basis = [-1] * m
    nnz = np.count_nonzero(A, axis=0)
    for j in np.flatnonzero(nnz == 1):
        i = int(np.flatnonzero(A[:, j])[0])
        if basis[i] < 0 and A[i, j] == 1.0:
            basis[i] = int(j)
    slack_rows = [i for i in range(m) if basis[i] >= 0]
    art_rows = [i for i in range(m) if basis[i] < 0]
    n_art = len(art_rows)
    A_full = np.hstack([A, np.zeros((m, n_art))])
    for k, i in enumerate(art_rows):
        A_full[i, n + k] = 1.0
        basis[i] = n + k
    b_work = b + _perturbation(b, slack_rows) if perturb else b

    iters = 0
    keep = list(range(m))
    if n_art:
        c1 = np.zeros(n + n_art)
        c1[n:] = 1.0
        tab = _Tableau(A_full, b_work, basis, c1)
        status, it = _run(tab, cfg, budget, n + n_art)
        iters += it
        if status is LpStatus.MAX_ITERATIONS:
            return status, None, iters
        if status is LpStatus.UNBOUNDED or -tab.T[tab.m, -1] > cfg.feas_tol * max(1.0, float(np.max(b))):
            if perturb:
                return _retry(A, b, c, cfg, iters)
            return LpStatus.INFEASIBLE, None, iters
        # drive zero-level artificials out of the basis; drop redundant rows
        keep = []
        for r in range(m):
            if tab.basis[r] >= n:
                row = tab.T[r, :n]
                cand = np.flatnonzero(np.abs(row) > cfg.pivot_tol)
                if cand.size == 0:
                    continue
                tab.pivot(r, int(cand[np.argmax(np.abs(row[cand]))]))
            keep.append(r)
        tab.c = np.concatenate([c, np.zeros(n_art)])
        tab.drop_rows(keep, n)
    else:
        tab = _Tableau(A_full, b_work, basis, c)

    tab.set_costs(c)
    status, it = _run(tab, cfg, max(budget - iters, 0), n)
    iters += it
    if status is LpStatus.MAX_ITERATIONS:
        return status, None, iters
    if status is not LpStatus.OPTIMAL:
        return _retry(A, b, c, cfg, iters) if perturb else (status, None, iters)

    if perturb:
        tab.b = b[keep]
        if not tab.reinvert():
            return _retry(A, b, c, cfg, iters)
        status, it = _dual_cleanup(tab, cfg, max(budget - iters, 0))
        iters += it
        if status is not LpStatus.OPTIMAL:
            return _retry(A, b, c, cfg, iters)
        # the repaired basis must still price out
        if np.min(tab.T[tab.m, :n]) < -cfg.pivot_tol:
            status, it = _run(tab, cfg, max(budget - iters, 0), n)
            iters += it
            if status is not LpStatus.OPTIMAL:
                return _retry(A, b, c, cfg, iters)

    x = np.zeros(n)
    x[tab.basis] = tab.T[: tab.m, -1]
    return LpStatus.OPTIMAL, x, iters


def _retry(A, b, c, cfg, iters):
    status, x, it = _simplex_standard(A, b, c, cfg, perturb=False)
    return status, x, iters + it


def solve(lp: LinearProgram, cfg: SolverConfig | None = None) -> LpSolution:
    """Solve ``lp`` with the two-phase simplex method."""
    cfg = cfg or SolverConfig()
    std, vmap = to_standard_form(lp)
    status, xs, iters = _simplex_standard(std.A, std.rhs, std.objective, cfg)
    if status is not LpStatus.OPTIMAL:
        return LpSolution(status, iterations=iters)
    x = vmap.recover(xs)
    return LpSolution(status, x, float(lp.objective @ x), iters)


def verify_solution(lp: LinearProgram, sol: LpSolution, tol: float = 1e-7) -> bool:
    if sol.status is not LpStatus.OPTIMAL or sol.x is None:
        return False
    x = np.asarray(sol.x, dtype=float)
    if x.shape != (lp.num_vars,) or not np.all(np.isfinite(x)):
        return False
    if np.any(x < lp.lower - tol) or np.any(x > lp.upper + tol):
        return False
    if lp.num_constraints:
        lhs = lp.A @ x
        eq = np.array([s == EQ for s in lp.senses])
        if np.any(lhs[~eq] > lp.rhs[~eq] + tol):
            return False
        if np.any(np.abs(lhs[eq] - lp.rhs[eq]) > tol):
            return False
    return abs(float(lp.objective @ x) - sol.objective_value) <= tol * (1.0 + abs(sol.objective_value))


# --- equality-constrained least squares ------------------------------------

def gauss_solve(M, rhs, pivot_tol: float = 1e-10) -> np.ndarray:
    """Solve ``M x = rhs`` by Gaussian elimination with partial pivoting.

    Raises :class:`SingularSystem` when a pivot falls below
    ``pivot_tol * max|M|``.
    """
    M = np.array(M, dtype=float)
    x = np.array(rhs, dtype=float).reshape(-1)
    n = M.shape[0]
    if M.shape != (n, n) or x.size != n:
        raise ValueError("need a square system")
    thresh = pivot_tol * max(float(np.max(np.abs(M))), np.finfo(float).tiny)
    for k in range(n):
        p = k + int(np.argmax(np.abs(M[k:, k])))
        if abs(M[p, k]) <= thresh:
            raise SingularSystem(f"pivot {abs(M[p, k]):.3g} in column {k} below tolerance")
        if p != k:
            M[[k, p]] = M[[p, k]]
            x[[k, p]] = x[[p, k]]
        f = M[k + 1:, k] / M[k, k]
        M[k + 1:, k:] -= np.outer(f, M[k, k:])
        x[k + 1:] -= f * x[k]
    for k in range(n - 1, -1, -1):
        x[k] = (x[k] - M[k, k + 1:] @ x[k + 1:]) / M[k, k]
    return x


def solve_linear_eq_constrained_lsq(rows, gauge, pivot_tol: float = 1e-10) -> np.ndarray:
    """``argmin sum_i (rows_i . theta)**2`` subject to ``g . theta = rhs``.

    Solved through the Lagrangian stationarity system
    ``[[2 D^T D, g], [g^T, 0]] [theta; mu] = [0; rhs]``.
    """
    D = np.asarray(rows, dtype=float)
    g, g_rhs = gauge
    g = np.asarray(g, dtype=float).reshape(-1)
    k = g.size
    if D.ndim != 2 or D.shape[1] != k:
        raise ValueError(f"design rows must have {k} columns")
    if D.shape[0] < k - 1:
        raise ValueError(f"need at least {k - 1} rows, got {D.shape[0]}")
    if not np.any(g):
        raise ValueError("gauge vector must be nonzero")
    K = np.zeros((k + 1, k + 1))
    K[:k, :k] = 2.0 * D.T @ D
    K[:k, k] = g
    K[k, :k] = g
    rhs = np.zeros(k + 1)
    rhs[k] = g_rhs
    return gauss_solve(K, rhs, pivot_tol)[:k]


# --- CPLEX LP text format -------------------------------------------------

def _names(lp: LinearProgram):
    return list(lp.names) if lp.names else [f"x{j + 1}" for j in range(lp.num_vars)]


def _fmt(v: float) -> str:
    return repr(float(v))


def _linexpr(coefs, names) -> str:
    terms = []
    for v, name in zip(coefs, names):
        if v == 0:
            continue
        sign = "-" if v < 0 else "+"
        terms.append(f"{sign} {_fmt(abs(v))} {name}")
    if not terms:
        return "0 " + names[0]
    s = " ".join(terms)
    return s[2:] if s.startswith("+ ") else s


def format_lp(lp: LinearProgram) -> str:
    """Render ``lp`` in CPLEX-LP text (see README for the grammar subset)."""
    names = _names(lp)
    out = ["\\ stackfit linear program", "Minimize", f" obj: {_linexpr(lp.objective, names)}", "Subject To"]
    for i, (row, sense, rhs) in enumerate(lp.constraints()):
        out.append(f" c{i + 1}: {_linexpr(row, names)} {sense} {_fmt(rhs)}")
    out.append("Bounds")
    for j, name in enumerate(names):
        lo, hi = lp.lower[j], lp.upper[j]
        if lo == -np.inf and hi == np.inf:
            out.append(f" {name} free")
        elif lo == 0 and hi == np.inf:
            continue
        else:
            los = "-inf" if lo == -np.inf else _fmt(lo)
            his = "+inf" if hi == np.inf else _fmt(hi)
            out.append(f" {los} <= {name} <= {his}")
    out.append("End")
    return "\n".join(out) + "\n"


def write_lp(lp: LinearProgram, path) -> None:
    Path(path).write_text(format_lp(lp), encoding="ascii", newline="\n")


_TERM = re.compile(r"([+-])?\s*([0-9.eE+\-]+|inf)\s+([A-Za-z_][\w.]*)")


def _parse_expr(expr: str, index: dict) -> np.ndarray:
    coefs = np.zeros(len(index))
    for sign, val, name in _TERM.findall(expr):
        coefs[index[name]] += (-1.0 if sign == "-" else 1.0) * float(val)
    return coefs


def parse_lp(text: str, names: list) -> LinearProgram:
    """Parse the output of :func:`format_lp` back into a :class:`LinearProgram`.

    ``names`` fixes the column order (the format does not list variables).
    """
    index = {n: j for j, n in enumerate(names)}
    n = len(names)
    section = None
    obj = np.zeros(n)
    rows, senses, rhs = [], [], []
    lower, upper = np.zeros(n), np.full(n, np.inf)
    for raw in text.splitlines():
        line = raw.strip()
        if not line or line.startswith("\\"):
            continue
        key = line.lower()
        if key in ("minimize", "subject to", "bounds", "end"):
            section = key
            continue
        if section == "minimize":
            obj = _parse_expr(line.split(":", 1)[1], index)
        elif section == "subject to":
            body = line.split(":", 1)[1]
            m = re.match(r"(.*)\s(<=|=)\s(\S+)$", body)
            if not m:
                raise ValueError(f"bad constraint line: {raw!r}")
            rows.append(_parse_expr(m.group(1), index))
            senses.append(m.group(2))
            rhs.append(float(m.group(3)))
        elif section == "bounds":
            parts = line.split()
            if len(parts) == 2 and parts[1] == "free":
                lower[index[parts[0]]] = -np.inf
            elif len(parts) == 5:
                j = index[parts[2]]
                lower[j], upper[j] = float(parts[0]), float(parts[4])
            else:
                raise ValueError(f"bad bounds line: {raw!r}")
    A = np.array(rows) if rows else np.zeros((0, n))
    return LinearProgram(obj, A, senses, rhs, lower, upper, list(names))
