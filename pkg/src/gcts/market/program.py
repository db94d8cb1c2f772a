"""Convex dispatch programs and the HiGHS-backed solver.

Programs have the form

    min  0.5 x'Qx + c'x + offset
    s.t. row_lo <= A x <= row_hi,  col_lo <= x <= col_hi

with ``Q`` diagonal.  Duals follow the convention ``y = d(obj)/d(rhs)``:
a binding upper row has ``y <= 0``, a binding lower row ``y >= 0``, and
stationarity reads ``Qx + c - A'y - z = 0``.

Linear programs go to HiGHS (simplex); programs with a quadratic term go to
Clarabel (interior point).  After every solve the KKT system on the active
set is solved exactly and the polished point is kept when its residuals
are no worse than the solver's.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field

import clarabel
import highspy
import numpy as np
import scipy.linalg as sla
import scipy.sparse as sp

log = logging.getLogger(__name__)

INF = np.inf


class InfeasibleError(RuntimeError):
    """The program has no feasible point."""

    def __init__(self, message: str, report: dict | None = None):
        super().__init__(message)
        self.report = report or {}


@dataclass
class DispatchProgram:
    """Variables and constraints of one clearing problem.

    ``var_blocks``/``row_blocks`` name contiguous index ranges so callers can
    pull ``g``, ``s``, ``theta`` and the matching duals back out.
    """

    c: np.ndarray
    q_diag: np.ndarray
    A: sp.csr_matrix
    row_lo: np.ndarray
    row_hi: np.ndarray
    col_lo: np.ndarray
    col_hi: np.ndarray
    offset: float = 0.0
    var_blocks: dict[str, slice] = field(default_factory=dict)
    row_blocks: dict[str, slice] = field(default_factory=dict)

    @property
    def n(self) -> int:
        return len(self.c)

    @property
    def m(self) -> int:
        return self.A.shape[0]

    def objective(self, x: np.ndarray) -> float:
        return float(0.5 * x @ (self.q_diag * x) + self.c @ x + self.offset)


class ProgramBuilder:
    """Incremental assembly of a :class:`DispatchProgram`."""

    def __init__(self):
        self._vars: list[tuple[str, int, np.ndarray, np.ndarray, np.ndarray, np.ndarray]] = []
        self._rows: list[tuple[str, sp.spmatrix | dict, np.ndarray, np.ndarray]] = []
        self.offset = 0.0

    def add_vars(self, name, n, lo, hi, cost=0.0, q=0.0):
        def full(v):
            return np.broadcast_to(np.asarray(v, dtype=float), (n,)).copy()
        self._vars.append((name, n, full(lo), full(hi), full(cost), full(q)))

    def var_slices(self) -> dict[str, slice]:
        out, pos = {}, 0
        for name, n, *_ in self._vars:
            out[name] = slice(pos, pos + n)
            pos += n
        return out

    def add_rows(self, name, parts: dict[str, np.ndarray | sp.spmatrix], lo, hi):
        """``parts`` maps a variable-block name to its coefficient block."""
        m = None
        for blk in parts.values():
            m = blk.shape[0]
            break
        if m is None:
            raise ValueError("row block needs at least one coefficient block")
        lo = np.broadcast_to(np.asarray(lo, dtype=float), (m,)).copy()
        hi = np.broadcast_to(np.asarray(hi, dtype=float), (m,)).copy()
        self._rows.append((name, parts, lo, hi))

    def build(self) -> DispatchProgram:
        vs = self.var_slices()
        n = sum(v[1] for v in self._vars)
        blocks, lo, hi, row_blocks, pos = [], [], [], {}, 0
        for name, parts, rlo, rhi in self._rows:
            m = len(rlo)
            row = []
            for vname, (_, nv, *_rest) in zip(vs, self._vars):
                blk = parts.get(vname)
                row.append(sp.csr_matrix(blk) if blk is not None else sp.csr_matrix((m, nv)))
            blocks.append(sp.hstack(row, format="csr") if row else sp.csr_matrix((m, 0)))
            lo.append(rlo)
            hi.append(rhi)
            row_blocks[name] = slice(pos, pos + m)
            pos += m
        A = sp.vstack(blocks, format="csr") if blocks else sp.csr_matrix((0, n))
        cat = (lambda xs: np.concatenate(xs) if xs else np.zeros(0))
        return DispatchProgram(
            c=cat([v[4] for v in self._vars]),
            q_diag=cat([v[5] for v in self._vars]),
            A=A,
            row_lo=cat(lo),
            row_hi=cat(hi),
            col_lo=cat([v[2] for v in self._vars]),
            col_hi=cat([v[3] for v in self._vars]),
            offset=self.offset,
            var_blocks=vs,
            row_blocks=row_blocks,
        )


@dataclass
class ProgramResult:
    x: np.ndarray
    row_dual: np.ndarray
    col_dual: np.ndarray
    objective: float
    status: str
    polished: bool = False
    kkt: dict = field(default_factory=dict)

    def var(self, prog: DispatchProgram, name: str) -> np.ndarray:
        return self.x[prog.var_blocks[name]]

    def dual(self, prog: DispatchProgram, name: str) -> np.ndarray:
        return self.row_dual[prog.row_blocks[name]]


def _to_highs_inf(v):
    v = np.asarray(v, dtype=float).copy()
    v[v == INF] = highspy.kHighsInf
    v[v == -INF] = -highspy.kHighsInf
    return v


def _highs_solve(prog: DispatchProgram, tol: float):
    """Solve a linear program; returns (x, y, z, status, active set)."""
    h = highspy.Highs()
    h.setOptionValue("output_flag", False)
    h.setOptionValue("threads", 1)
    h.setOptionValue("primal_feasibility_tolerance", tol)
    h.setOptionValue("dual_feasibility_tolerance", tol)
    lp = highspy.HighsLp()
    lp.num_col_ = prog.n
    lp.num_row_ = prog.m
    lp.col_cost_ = prog.c.astype(float)
    lp.col_lower_ = _to_highs_inf(prog.col_lo)
    lp.col_upper_ = _to_highs_inf(prog.col_hi)
    lp.row_lower_ = _to_highs_inf(prog.row_lo)
    lp.row_upper_ = _to_highs_inf(prog.row_hi)
    lp.offset_ = float(prog.offset)
    Ac = prog.A.tocsc()
    Ac.sort_indices()
    lp.a_matrix_.format_ = highspy.MatrixFormat.kColwise
    lp.a_matrix_.start_ = Ac.indptr.astype(np.int32)
    lp.a_matrix_.index_ = Ac.indices.astype(np.int32)
    lp.a_matrix_.value_ = Ac.data.astype(float)
    lp.a_matrix_.num_col_ = prog.n
    lp.a_matrix_.num_row_ = prog.m
    h.passModel(lp)
    h.run()
    status = h.modelStatusToString(h.getModelStatus())
    if status != "Optimal":
        return None, None, None, status, None
    sol = h.getSolution()
    active = None
    basis = h.getBasis()
    if basis.valid:
        B = highspy.HighsBasisStatus
        code = {B.kLower: -1, B.kUpper: 1}
        active = (np.array([code.get(st, 0) for st in basis.row_status]),
                  np.array([code.get(st, 0) for st in basis.col_status]))
    return np.array(sol.col_value), np.array(sol.row_dual), np.array(sol.col_dual), status, active


def _clarabel_solve(prog: DispatchProgram, tol: float):
    """Solve a QP; returns (x, y, z, status, None).

    Rows and column bounds become Clarabel cone rows ``A x + s = b``:
    equalities in the zero cone, each finite one-sided bound in the
    nonnegative cone.
    """
    n = prog.n
    A = sp.vstack([prog.A.tocsr(), sp.identity(n, format="csr")], format="csr")
    lo = np.r_[prog.row_lo, prog.col_lo]
    hi = np.r_[prog.row_hi, prog.col_hi]
    eq = np.flatnonzero(np.isfinite(lo) & (lo == hi))
    up = np.flatnonzero(np.isfinite(hi) & ~(lo == hi))
    dn = np.flatnonzero(np.isfinite(lo) & ~(lo == hi))
    Ak = sp.vstack([A[eq], A[up], -A[dn]], format="csc")
    b = np.r_[lo[eq], hi[up], -lo[dn]]
    cones = []
    if eq.size:
        cones.append(clarabel.ZeroConeT(int(eq.size)))
    if up.size + dn.size:
        cones.append(clarabel.NonnegativeConeT(int(up.size + dn.size)))
    P = sp.diags(prog.q_diag, format="csc")
    settings = clarabel.DefaultSettings()
    settings.verbose = False
    settings.tol_gap_abs = settings.tol_gap_rel = settings.tol_feas = min(tol, 1e-10)
    settings.tol_ktratio = 1e-8
    # light regularisation and extra refinement give ~1e-10 KKT residuals on dispatch programs
    settings.static_regularization_constant = 1e-10
    settings.iterative_refinement_reltol = settings.iterative_refinement_abstol = 1e-14
    settings.iterative_refinement_max_iter = 50
    settings.max_iter = 500
    solver = clarabel.DefaultSolver(sp.triu(P, format="csc"), prog.c.astype(float), Ak, b, cones, settings)
    res = solver.solve()
    status = str(res.status)
    if status not in ("Solved", "AlmostSolved"):
        return None, None, None, "Infeasible" if "Infeasible" in status else status, None
    x = np.array(res.x)
    zc = np.array(res.z)
    # Clarabel stationarity is Px + q + Ak' zc = 0; map back to y = d(obj)/d(rhs)
    dual = np.zeros(prog.m + n)
    k = 0
    for idx, sign in ((eq, -1.0), (up, -1.0), (dn, 1.0)):
        np.add.at(dual, idx, sign * zc[k:k + idx.size])
        k += idx.size
    return x, dual[:prog.m], dual[prog.m:], "Optimal", None


def kkt_residuals(prog: DispatchProgram, x, y, z) -> dict[str, float]:
    """Primal/dual feasibility, complementarity and stationarity residuals."""
    ax = prog.A @ x
    prim = max(
        float(np.max(np.maximum(prog.row_lo - ax, 0), initial=0.0)),
        float(np.max(np.maximum(ax - prog.row_hi, 0), initial=0.0)),
        float(np.max(np.maximum(prog.col_lo - x, 0), initial=0.0)),
        float(np.max(np.maximum(x - prog.col_hi, 0), initial=0.0)),
    )
    stat = prog.q_diag * x + prog.c - prog.A.T @ y - z

    def sign_and_cs(mult, act, lo, hi):
        # positive part must sit on an active lower bound, negative on an upper one
        pos, neg = np.maximum(mult, 0), np.maximum(-mult, 0)
        with np.errstate(invalid="ignore"):
            gap_lo = np.where(np.isfinite(lo), act - lo, np.inf)
            gap_hi = np.where(np.isfinite(hi), hi - act, np.inf)
        bad_pos = np.where(np.isinf(gap_lo), pos, pos * np.minimum(gap_lo, 1.0))
        bad_neg = np.where(np.isinf(gap_hi), neg, neg * np.minimum(gap_hi, 1.0))
        return float(np.max(np.concatenate([bad_pos, bad_neg]), initial=0.0))

    cs = max(sign_and_cs(y, ax, prog.row_lo, prog.row_hi), sign_and_cs(z, x, prog.col_lo, prog.col_hi))
    return {
        "primal": prim,
        "stationarity": float(np.max(np.abs(stat), initial=0.0)),
        "complementarity": cs,
    }


def _active_codes(prog: DispatchProgram, x, tol: float = 1e-9):
    """Active-set codes (-1 lower, +1 upper, 0 free) of a primal point."""
    ax = prog.A @ x

    def codes(v, lo, hi):
        at_lo = np.isfinite(lo) & (np.abs(v - np.where(np.isfinite(lo), lo, 0)) <= tol * (1 + np.abs(v)))
        at_hi = np.isfinite(hi) & (np.abs(v - np.where(np.isfinite(hi), hi, 0)) <= tol * (1 + np.abs(v)))
        return np.where(at_lo, -1, np.where(at_hi, 1, 0))

    return codes(ax, prog.row_lo, prog.row_hi), codes(x, prog.col_lo, prog.col_hi)


def _primal_dual_codes(prog: DispatchProgram, x, y, z, tol: float = 1e-7):
    """Active-set estimate from an interior-point pair: a side is active when
    its slack is tiny or its multiplier is clearly nonzero."""
    ax = prog.A @ x

    def codes(v, lo, hi, mult):
        near_lo = np.isfinite(lo) & ((v - np.where(np.isfinite(lo), lo, 0) <= tol * (1 + np.abs(v))) | (mult > tol))
        near_hi = np.isfinite(hi) & ((np.where(np.isfinite(hi), hi, 0) - v <= tol * (1 + np.abs(v))) | (mult < -tol))
        both = near_lo & near_hi
        return np.where(both, np.where(mult >= 0, -1, 1), np.where(near_lo, -1, np.where(near_hi, 1, 0)))

    return codes(ax, prog.row_lo, prog.row_hi, y), codes(x, prog.col_lo, prog.col_hi, z)


def _qp_vertex(prog: DispatchProgram, x, tol: float = 1e-7):
    """Exact vertex solutions of a QP from an interior-point estimate ``x``.

    The strictly convex (quadratic) variables are unique at the optimum, so
    they are held near ``x`` and the remaining linear program, costed at
    the gradient, is solved by simplex for a deterministic vertex of the
    optimal face.  Each vertex yields two candidates: duals from a
    feasibility LP (stationarity with sign-restricted multipliers), and an
    exact KKT solve on the vertex's active set with the quadratic variables
    released.  All candidates are returned.
    """
    quad = prog.q_diag != 0
    xq = np.clip(x[quad], prog.col_lo[quad], prog.col_hi[quad])
    out = []
    for width in (0.0, 1e-7, 1e-5):
        lo, hi = prog.col_lo.copy(), prog.col_hi.copy()
        pad = width * (1 + np.abs(xq))
        lo[quad] = np.maximum(xq - pad, prog.col_lo[quad])
        hi[quad] = np.minimum(xq + pad, prog.col_hi[quad])
        lp = DispatchProgram(prog.c + prog.q_diag * x, np.zeros(prog.n), prog.A, prog.row_lo, prog.row_hi, lo, hi)
        xv, *_, status, _ = _highs_solve(lp, tol)
        if status != "Optimal":
            continue
        pol = _polish(prog, _active_codes(prog, xv))
        if pol is not None:
            out.append(pol)
        if width == 0.0:
            dual = _vertex_duals(prog, xv, tol)
            if dual is not None:
                out.append((xv, *dual))
    return out


def _vertex_duals(prog: DispatchProgram, xv, tol: float):
    def sign_bounds(act, lo, hi):
        # multiplier >= 0 at an active lower side, <= 0 at an active upper side, 0 if slack
        near_lo = np.isfinite(lo) & (act - lo <= tol * (1 + np.abs(np.where(np.isfinite(lo), lo, 0))))
        near_hi = np.isfinite(hi) & (hi - act <= tol * (1 + np.abs(np.where(np.isfinite(hi), hi, 0))))
        return np.where(near_lo, INF, 0.0), np.where(near_hi, -INF, 0.0)

    ax = prog.A @ xv
    y_hi, y_lo = sign_bounds(ax, prog.row_lo, prog.row_hi)
    z_hi, z_lo = sign_bounds(xv, prog.col_lo, prog.col_hi)
    n, m = prog.n, prog.m
    dual = DispatchProgram(
        c=np.zeros(m + n), q_diag=np.zeros(m + n),
        A=sp.hstack([prog.A.T, sp.identity(n)], format="csr"),
        row_lo=prog.q_diag * xv + prog.c, row_hi=prog.q_diag * xv + prog.c,
        col_lo=np.r_[y_lo, z_lo], col_hi=np.r_[y_hi, z_hi],
    )
    for dtol in (1e-9, 1e-7):
        yz, *_, status, _ = _highs_solve(dual, dtol)
        if status == "Optimal":
            return yz[:m], yz[m:]
    return None


def _fix_bound_columns(prog: DispatchProgram, x, z, tol: float = 1e-7):
    """Re-solve with every column that sits at a bound under a clearly nonzero
    multiplier fixed there.

    Very large linear costs (prohibitive bid prices) make interior-point
    tolerances loose in absolute terms; removing those columns leaves a
    well-scaled problem.  Returns candidate (x, y, z) triples for ``prog``.
    """
    lo, hi = prog.col_lo, prog.col_hi
    with np.errstate(invalid="ignore"):
        at_lo = np.isfinite(lo) & (x - lo <= tol * (1 + np.abs(lo))) & (z > tol)
        at_hi = np.isfinite(hi) & (hi - x <= tol * (1 + np.abs(hi))) & (z < -tol)
    if not (at_lo | at_hi).any():
        return []
    lo2, hi2 = lo.copy(), hi.copy()
    hi2[at_lo] = lo[at_lo]
    lo2[at_hi] = hi[at_hi]
    sub = DispatchProgram(prog.c, prog.q_diag, prog.A, prog.row_lo, prog.row_hi, lo2, hi2, prog.offset,
                          prog.var_blocks, prog.row_blocks)
    x2, y2, _, status, _ = _clarabel_solve(sub, 1e-9)
    if status != "Optimal":
        return []
    # duals of the fixed columns follow from stationarity of the full program
    z2 = prog.q_diag * x2 + prog.c - prog.A.T @ y2
    return [(x2, y2, z2)] + _qp_vertex(sub, x2)


def _independent(C: np.ndarray, tol: float = 1e-10) -> np.ndarray:
    """Indices of a maximal linearly independent subset of the rows of ``C``."""
    if C.shape[0] == 0:
        return np.arange(0)
    _, R, piv = sla.qr(C.T, mode="economic", pivoting=True)
    d = np.abs(np.diag(R))
    rank = int(np.sum(d > tol * max(d[0], 1.0)))
    return np.sort(piv[:rank])


def _polish(prog: DispatchProgram, active):
    """Exact KKT solve with the given rows/columns held at their bounds.

    Degenerate active sets (dependent constraints) are reduced to an
    independent subset; the dropped constraints get zero multipliers.
    """
    row_code, col_code = (np.array(c, dtype=int) for c in active)
    # equalities and fixed columns are always active, whatever the basis says
    row_code[(prog.row_lo == prog.row_hi) & (row_code == 0)] = -1
    col_code[(prog.col_lo == prog.col_hi) & (col_code == 0)] = -1
    act_rows = np.flatnonzero(row_code)
    act_cols = np.flatnonzero(col_code)
    rhs_rows = np.where(row_code[act_rows] < 0, prog.row_lo[act_rows], prog.row_hi[act_rows])
    rhs_cols = np.where(col_code[act_cols] < 0, prog.col_lo[act_cols], prog.col_hi[act_cols])
    n, ma, mc = prog.n, len(act_rows), len(act_cols)
    if not np.all(np.isfinite(rhs_rows)) or not np.all(np.isfinite(rhs_cols)):
        return None
    Aa = prog.A[act_rows].toarray() if ma else np.zeros((0, n))
    E = np.zeros((mc, n))
    E[np.arange(mc), act_cols] = 1.0
    C = np.vstack([Aa, E])
    b = np.concatenate([rhs_rows, rhs_cols])
    keep = _independent(C)
    Ck, k = C[keep], len(keep)
    K = np.zeros((n + k, n + k))
    K[:n, :n] = np.diag(prog.q_diag)
    K[:n, n:] = -Ck.T
    K[n:, :n] = Ck
    rhs = np.concatenate([-prog.c, b[keep]])
    try:
        sol = np.linalg.solve(K, rhs)
    except np.linalg.LinAlgError:
        return None
    if not np.all(np.isfinite(sol)) or np.max(np.abs(K @ sol - rhs), initial=0.0) > 1e-8 * max(1.0, np.max(np.abs(rhs), initial=0.0)):
        return None
    x = sol[:n]
    if np.max(np.abs(C @ x - b), initial=0.0) > 1e-8 * max(1.0, np.max(np.abs(b), initial=0.0)):
        return None
    mult = np.zeros(ma + mc)
    mult[keep] = sol[n:]
    y = np.zeros(prog.m)
    y[act_rows] = mult[:ma]
    z = np.zeros(n)
    z[act_cols] = mult[ma:]
    return x, y, z


def solve_program(prog: DispatchProgram, tol: float = 1e-9, audit_tol: float = 1e-6) -> ProgramResult:
    """Solve, polish on the active set, and audit the KKT conditions.

    Raises :class:`InfeasibleError` when the solver reports infeasibility.
    """
    quadratic = bool(np.any(prog.q_diag != 0))
    x, y, z, status, active = (_clarabel_solve if quadratic else _highs_solve)(prog, tol)
    if status != "Optimal":
        raise InfeasibleError(f"solver status: {status}", {"status": status})
    raw = kkt_residuals(prog, x, y, z)
    best, polished = (x, y, z), False
    scale = max(1.0, float(np.max(np.abs(prog.c), initial=0.0)))
    if quadratic:
        found = _qp_vertex(prog, x)
        pd = _polish(prog, _primal_dual_codes(prog, x, y, z))
        if pd is not None:
            found.append(pd)
        cands = [(max(kkt_residuals(prog, *c).values()), k) for k, c in enumerate(found)]
        if not cands or min(cands)[0] > 1e-9 * scale:
            # degenerate active sets: re-derive sign-consistent duals at each point
            for xc, *_ in list(found):
                dual = _vertex_duals(prog, xc, 1e-7)
                if dual is not None:
                    found.append((xc, *dual))
                    cands.append((max(kkt_residuals(prog, *found[-1]).values()), len(found) - 1))
        if not cands or min(cands)[0] > 1e-8:
            for c in _fix_bound_columns(prog, x, z):
                found.append(c)
                cands.append((max(kkt_residuals(prog, *c).values()), len(found) - 1))
        if cands:
            err, k = min(cands)
            # a vertex is preferred whenever it is accurate: it is deterministic
            if err <= max(max(raw.values()), 1e-7 * scale):
                best, polished, raw = found[k], True, kkt_residuals(prog, *found[k])
                active = None
    if active is not None:
        pol = _polish(prog, active)
        if pol is not None:
            res = kkt_residuals(prog, *pol)
            if max(res.values()) <= max(max(raw.values()), 1e-9):
                best, polished, raw = pol, True, res
    x, y, z = best
    x = np.clip(x, prog.col_lo, prog.col_hi)
    if raw["primal"] > audit_tol or raw["stationarity"] > audit_tol * scale or raw["complementarity"] > audit_tol * scale:
        log.warning("KKT audit residuals above tolerance: %s", raw)
    return ProgramResult(x, y, z, prog.objective(x), status, polished, raw)
