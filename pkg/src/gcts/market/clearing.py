"""Look-ahead clearing (JED, GCTS, CTS) and per-area real-time dispatch.

All programs are written in MW and $/h: susceptances are scaled by the MVA
base so that balance duals are LMPs in $/MWh and angle variables stay in
radians.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Mapping

import numpy as np
import scipy.sparse as sp

from ..bids import BidBook, bid_rank_check, stacked_incidence, validate_bids
from ..netmodel import (
    AreaPartition,
    PowerNetwork,
    SusceptanceBlocks,
    branch_incidence,
    build_susceptance,
    slack_bus,
)
from .program import InfeasibleError, ProgramBuilder, solve_program, DispatchProgram

TIE_BREAK_EPS = 1e-6


@dataclass
class ClearingSolution:
    """Primal and dual values of one solved dispatch program.

    Bus-indexed arrays follow ``bus_ids``; branch arrays follow
    ``branch_index`` (positions in ``net.branches``); generator arrays follow
    ``gen_index``.  ``eta`` is signed: positive when the from->to limit
    binds.  For a single-area real-time solve ``area`` is set and only that
    area's buses, generators and internal branches are covered.
    """

    mechanism: str
    net: PowerNetwork
    part: AreaPartition
    area: int | None
    gen_index: np.ndarray
    g: np.ndarray
    bus_ids: np.ndarray
    loads: np.ndarray
    theta: np.ndarray
    lmp: np.ndarray
    branch_index: np.ndarray
    flow_mw: np.ndarray
    limit_mw: np.ndarray
    eta: np.ndarray
    xi_lower: np.ndarray
    xi_upper: np.ndarray
    internal_cost: float
    interface_cost: float = 0.0
    book: BidBook | None = None
    s: np.ndarray | None = None
    theta_bar: np.ndarray | None = None
    boundary_price: np.ndarray | None = None
    theta_bar_gradient: np.ndarray | None = None
    interchange: dict = field(default_factory=dict)
    proxies: dict = field(default_factory=dict)
    proxy_injection: np.ndarray | None = None
    relaxation_mw: float = 0.0
    kkt: dict = field(default_factory=dict)
    objective: float = float("nan")

    @property
    def total_cost(self) -> float:
        return self.internal_cost + self.interface_cost

    @property
    def relaxed(self) -> bool:
        return self.relaxation_mw > 0

    @property
    def price_gap(self) -> np.ndarray | None:
        """Boundary marginal price gap per bid ($/MWh), in the units of the bid price."""
        if self.boundary_price is None:
            return None
        return -(stacked_incidence(self.book, self.part).T @ self.boundary_price)

    def flow_of(self, branch) -> float:
        k = self.net.branches.index(branch)
        pos = np.flatnonzero(self.branch_index == k)
        return float(self.flow_mw[pos[0]])

    def tie_flows(self) -> np.ndarray:
        return np.array([self.flow_of(br) for br in self.part.tie_lines])

    def tie_eta(self) -> np.ndarray:
        out = []
        for br in self.part.tie_lines:
            k = self.net.branches.index(br)
            pos = np.flatnonzero(self.branch_index == k)
            out.append(float(self.eta[pos[0]]) if pos.size else 0.0)
        return np.array(out)

    def area_net_export(self) -> dict[int, float]:
        """Net MW leaving each area across tie-lines (from the flows)."""
        out = {a: 0.0 for a in self.part.areas}
        area_of = self.net.bus_area
        for br in self.part.tie_lines:
            f = self.flow_of(br)
            out[area_of[br.from_bus]] += f
            out[area_of[br.to_bus]] -= f
        return out


def _cost_arrays(net: PowerNetwork, gen_index):
    gens = [net.generators[k] for k in gen_index]
    c1 = np.array([g.cost.c1 for g in gens], dtype=float)
    q = np.array([2.0 * g.cost.c2 for g in gens], dtype=float)
    c0 = float(sum(g.cost.c0 for g in gens))
    lo = np.array([g.g_min_mw for g in gens], dtype=float)
    hi = np.array([g.g_max_mw for g in gens], dtype=float)
    return c1, q, c0, lo, hi


def generation_cost(net: PowerNetwork, g, gen_index=None) -> float:
    gen_index = range(len(net.generators)) if gen_index is None else gen_index
    return float(sum(net.generators[k].cost(x) for k, x in zip(gen_index, g)))


def _solve_or_relax(prog: DispatchProgram, relax_block: str | None, relax: bool):
    """Solve; on infeasibility optionally widen the ``relax_block`` rows by
    the smallest uniform MW slack that restores feasibility."""
    try:
        return prog, solve_program(prog), 0.0
    except InfeasibleError:
        if not relax or relax_block is None:
            raise
    sl = prog.row_blocks[relax_block]
    rows = np.arange(prog.m)[sl]
    A = prog.A.tocsr()
    n = prog.n
    # split each line row into an upper and a lower row so t enters with opposite signs
    Au = A[rows]
    upper = sp.hstack([Au, sp.csr_matrix(-np.ones((len(rows), 1)))])
    lower = sp.hstack([Au, sp.csr_matrix(np.ones((len(rows), 1)))])
    other = np.setdiff1d(np.arange(prog.m), rows)
    Ao = sp.hstack([A[other], sp.csr_matrix((len(other), 1))])
    aux = DispatchProgram(
        c=np.r_[np.zeros(n), 1.0],
        q_diag=np.zeros(n + 1),
        A=sp.vstack([Ao, upper, lower], format="csr"),
        row_lo=np.r_[prog.row_lo[other], np.full(len(rows), -np.inf), prog.row_lo[rows]],
        row_hi=np.r_[prog.row_hi[other], prog.row_hi[rows], np.full(len(rows), np.inf)],
        col_lo=np.r_[prog.col_lo, 0.0],
        col_hi=np.r_[prog.col_hi, np.inf],
    )
    try:
        res = solve_program(aux)
    except InfeasibleError as exc:
        raise InfeasibleError("infeasible even with relaxed flow limits (generator limits cannot meet the nodal balance)",
                              {"stage": "relaxation", **exc.report}) from exc
    t = float(res.x[-1]) * (1 + 1e-9) + 1e-9
    relaxed = DispatchProgram(prog.c, prog.q_diag, prog.A, prog.row_lo.copy(), prog.row_hi.copy(),
                              prog.col_lo, prog.col_hi, prog.offset, prog.var_blocks, prog.row_blocks)
    relaxed.row_lo[sl] -= t
    relaxed.row_hi[sl] += t
    return relaxed, solve_program(relaxed), t


def _boundary_rows(blocks: SusceptanceBlocks, reference: int | None):
    """Reduced boundary matrix placed into full-theta columns (MW/rad), ref row dropped."""
    net, part = blocks.net, blocks.part
    order = part.boundary_order
    r = blocks.boundary_reference_index(reference)
    keep = np.arange(len(order)) != r
    Ybar = blocks.boundary_matrix * net.base_mva
    full = np.zeros((int(keep.sum()), net.n_bus))
    full[:, blocks.idx(order)] = Ybar[keep]
    return full, keep


def _look_ahead(net: PowerNetwork, part: AreaPartition, book: BidBook | None, mechanism: str,
                blocks: SusceptanceBlocks | None = None, reference: int | None = None,
                eps: float = TIE_BREAK_EPS, relax: bool = False) -> ClearingSolution:
    blocks = build_susceptance(net, part) if blocks is None else blocks
    n, nb = net.n_bus, len(net.generators)
    gen_index = np.arange(nb)
    c1, q, c0, glo, ghi = _cost_arrays(net, gen_index)
    slack = net.bus_index[slack_bus(net, part)]
    B = blocks.Y * net.base_mva
    Hmw = blocks.H * net.base_mva
    limits = np.array([br.limit_mw for br in net.branches])

    pb = ProgramBuilder()
    pb.offset = c0
    pb.add_vars("g", nb, glo, ghi, c1, q)
    with_bids = mechanism == "GCTS"
    if with_bids:
        validate_bids(book, part)
        M = stacked_incidence(book, part)
        pb.add_vars("s", len(book), 0.0, book.s_max, book.dpi + eps * book.ids)
    th_lo = np.full(n, -np.inf)
    th_hi = np.full(n, np.inf)
    th_lo[slack] = th_hi[slack] = 0.0
    pb.add_vars("theta", n, th_lo, th_hi)
    pb.add_rows("balance", {"g": net.gen_bus_matrix, "theta": -B}, net.loads, net.loads)
    pb.add_rows("lines", {"theta": Hmw}, -limits, limits)
    if with_bids:
        Yrows, keep = _boundary_rows(blocks, reference)
        pb.add_rows("boundary", {"theta": Yrows, "s": -M[keep]}, 0.0, 0.0)
    prog = pb.build()
    prog, res, t = _solve_or_relax(prog, "lines", relax)

    theta = res.var(prog, "theta")
    g = res.var(prog, "g")
    flows = Hmw @ theta
    eta = -res.dual(prog, "lines")
    sol = ClearingSolution(
        mechanism=mechanism, net=net, part=part, area=None,
        gen_index=gen_index, g=g, bus_ids=net.bus_ids, loads=net.loads, theta=theta,
        lmp=res.dual(prog, "balance"), branch_index=np.arange(len(net.branches)),
        flow_mw=flows, limit_mw=limits + t, eta=eta,
        xi_lower=np.maximum(res.col_dual[prog.var_blocks["g"]], 0),
        xi_upper=np.maximum(-res.col_dual[prog.var_blocks["g"]], 0),
        internal_cost=generation_cost(net, g), relaxation_mw=t, kkt=res.kkt, objective=res.objective,
    )
    order = part.boundary_order
    sol.theta_bar = theta[blocks.idx(order)]
    if with_bids:
        s = res.var(prog, "s")
        sol.book, sol.s = book, s
        sol.interface_cost = float(book.dpi @ s)
        price = np.zeros(len(order))
        price[keep] = res.dual(prog, "boundary")
        sol.boundary_price = price
    return sol


def solve_jed(net: PowerNetwork, part: AreaPartition | None = None, blocks=None, relax: bool = False) -> ClearingSolution:
    """Joint economic dispatch over the whole interconnection."""
    part = AreaPartition.from_network(net) if part is None else part
    return _look_ahead(net, part, None, "JED", blocks=blocks, relax=relax)


def solve_gcts_n_area(net: PowerNetwork, part: AreaPartition, book: BidBook, blocks=None,
                      reference: int | None = None, eps: float = TIE_BREAK_EPS) -> ClearingSolution:
    """GCTS clearing for any number of areas.

    Minimises generation cost plus the bid cost subject to the full DC
    network and to the boundary equation ``Ybar theta_bar = M s``.  The
    boundary marginal prices are the multipliers of that equation, pinned
    to zero at the reference boundary bus.
    """
    if len(part.areas) < 2:
        raise ValueError("GCTS needs at least two areas")
    blocks = build_susceptance(net, part) if blocks is None else blocks
    try:
        return _look_ahead(net, part, book, "GCTS", blocks=blocks, reference=reference, eps=eps)
    except InfeasibleError as exc:
        r = blocks.boundary_reference_index(reference)
        if not bid_rank_check(stacked_incidence(book, part), r):
            raise InfeasibleError("GCTS infeasible: the bid set does not span the boundary state "
                                  "(incidence matrix lacks full row rank)",
                                  {**exc.report, "rank_deficient": True}) from exc
        raise


def solve_gcts(net: PowerNetwork, part: AreaPartition, book: BidBook, blocks=None,
               reference: int | None = None, eps: float = TIE_BREAK_EPS) -> ClearingSolution:
    return solve_gcts_n_area(net, part, book, blocks=blocks, reference=reference, eps=eps)


def recover_boundary_state(blocks: SusceptanceBlocks, book: BidBook, s, reference: int | None = None) -> np.ndarray:
    """Boundary angles implied by cleared bids (reference boundary bus at 0)."""
    M = stacked_incidence(book, blocks.part)
    inj = M @ np.asarray(s, dtype=float) if len(book) else np.zeros(M.shape[0])
    return blocks.solve_boundary(inj / blocks.net.base_mva, reference)


# -- CTS -----------------------------------------------------------------

def default_proxies(part: AreaPartition) -> dict[tuple[int, int], int]:
    """Smallest boundary bus on each side of each interface."""
    prox = {}
    adj: dict[tuple[int, int], set] = {}
    area_of = {b: a for a in part.areas for b in part.boundary_buses[a]}
    for br in part.tie_lines:
        a, b = area_of[br.from_bus], area_of[br.to_bus]
        adj.setdefault((a, b), set()).add(br.from_bus)
        adj.setdefault((b, a), set()).add(br.to_bus)
    for a in part.areas:
        for b in part.areas:
            if a == b:
                continue
            cands = adj.get((a, b)) or part.boundary_buses[a]
            prox[(a, b)] = min(cands)
    return prox


def resolve_proxies(part: AreaPartition, proxy: Mapping | None) -> dict[tuple[int, int], int]:
    prox = default_proxies(part)
    if proxy:
        for key, bus in proxy.items():
            if isinstance(key, tuple):
                area = key[0]
                targets = [key]
            else:
                area = key
                targets = [(key, b) for b in part.areas if b != key]
            if area not in part.areas:
                raise ValueError(f"proxy given for unknown area {area}")
            if bus not in part.area_buses(area):
                raise ValueError(f"proxy bus {bus} is not in area {area}")
            for t in targets:
                prox[t] = int(bus)
    return prox


def proxy_incidence(net: PowerNetwork, part: AreaPartition, book: BidBook, prox) -> np.ndarray:
    """Bus x bid matrix of proxy-model equivalent injections (+1 at the
    buy-from side's proxy, -1 at the sell-to side's proxy)."""
    M = np.zeros((net.n_bus, len(book)))
    for k, b in enumerate(book):
        sell_a, buy_a = b.sell_to[0], b.buy_from[0]
        M[net.bus_index[prox[(buy_a, sell_a)]], k] += 1.0
        M[net.bus_index[prox[(sell_a, buy_a)]], k] -= 1.0
    return M


def _interface_pairs(part: AreaPartition):
    area_of = {b: a for a in part.areas for b in part.boundary_buses[a]}
    limits: dict[tuple[int, int], float] = {}
    for br in part.tie_lines:
        a, b = sorted((area_of[br.from_bus], area_of[br.to_bus]))
        limits[(a, b)] = limits.get((a, b), 0.0) + br.limit_mw
    return limits


def _pair_coefficients(book: BidBook, pair) -> np.ndarray:
    a, b = pair
    coef = np.zeros(len(book))
    for k, bid in enumerate(book):
        if bid.buy_from[0] == a and bid.sell_to[0] == b:
            coef[k] = 1.0
        elif bid.buy_from[0] == b and bid.sell_to[0] == a:
            coef[k] = -1.0
    return coef


def _area_laplacian(net: PowerNetwork) -> np.ndarray:
    internal = [br for br in net.branches if net.bus_area[br.from_bus] == net.bus_area[br.to_bus]]
    H = branch_incidence(net, internal)
    return (H.T @ (H / np.array([br.susceptance_pu for br in internal])[:, None])) if internal else np.zeros((net.n_bus,) * 2), internal


def solve_cts(net: PowerNetwork, part: AreaPartition, book: BidBook, proxy: Mapping | None = None,
              eps: float = TIE_BREAK_EPS) -> ClearingSolution:
    """Proxy-bus CTS clearing, solved as one coupled program.

    Each area sees only its own network; cleared bids appear as injections
    at the proxy buses and the pairwise interchange is capped by the summed
    tie-line limits of the interface.
    """
    validate_bids(book, part)
    prox = resolve_proxies(part, proxy)
    n, ng = net.n_bus, len(net.generators)
    gen_index = np.arange(ng)
    c1, q, c0, glo, ghi = _cost_arrays(net, gen_index)
    Yint, internal = _area_laplacian(net)
    base = net.base_mva
    Hint = branch_incidence(net, internal) * base
    lim_int = np.array([br.limit_mw for br in internal])
    Mp = proxy_incidence(net, part, book, prox)

    pb = ProgramBuilder()
    pb.offset = c0
    pb.add_vars("g", ng, glo, ghi, c1, q)
    pb.add_vars("s", len(book), 0.0, book.s_max, book.dpi + eps * book.ids)
    th_lo, th_hi = np.full(n, -np.inf), np.full(n, np.inf)
    for a in part.areas:
        r = net.bus_index[min(part.area_buses(a))]
        th_lo[r] = th_hi[r] = 0.0
    pb.add_vars("theta", n, th_lo, th_hi)
    pb.add_rows("balance", {"g": net.gen_bus_matrix, "theta": -Yint * base, "s": -Mp}, net.loads, net.loads)
    if internal:
        pb.add_rows("lines", {"theta": Hint}, -lim_int, lim_int)
    pairs = _interface_pairs(part)
    if pairs and len(book):
        C = np.vstack([_pair_coefficients(book, p) for p in pairs])
        F = np.array(list(pairs.values()))
        pb.add_rows("interface", {"s": C}, -F, F)
    prog = pb.build()
    res = solve_program(prog)

    g, s, theta = res.var(prog, "g"), res.var(prog, "s"), res.var(prog, "theta")
    idx_int = np.array([net.branches.index(br) for br in internal], dtype=int)
    eta = -res.dual(prog, "lines") if internal else np.zeros(0)
    sol = ClearingSolution(
        mechanism="CTS", net=net, part=part, area=None, gen_index=gen_index, g=g,
        bus_ids=net.bus_ids, loads=net.loads, theta=theta, lmp=res.dual(prog, "balance"),
        branch_index=idx_int, flow_mw=Hint @ theta, limit_mw=lim_int, eta=eta,
        xi_lower=np.maximum(res.col_dual[prog.var_blocks["g"]], 0),
        xi_upper=np.maximum(-res.col_dual[prog.var_blocks["g"]], 0),
        internal_cost=generation_cost(net, g), interface_cost=float(book.dpi @ s),
        book=book, s=s, proxies=prox, kkt=res.kkt, objective=res.objective,
    )
    sol.interchange = {p: float(_pair_coefficients(book, p) @ s) for p in pairs}
    sol.proxy_injection = Mp @ s
    return sol


def proxy_schedule(sol: ClearingSolution) -> np.ndarray:
    """Per-bus equivalent injection implied by the proxy model (MW)."""
    Mp = proxy_incidence(sol.net, sol.part, sol.book, sol.proxies)
    return Mp @ sol.s


def net_export(sol: ClearingSolution) -> dict[int, float]:
    """Net scheduled export of each area implied by the cleared bids."""
    out = {a: 0.0 for a in sol.part.areas}
    if sol.s is None:
        return sol.area_net_export()
    for bid, x in zip(sol.book, sol.s):
        out[bid.buy_from[0]] += x
        out[bid.sell_to[0]] -= x
    return out


# -- real time ------------------------------------------------------------

def _area_branches(net: PowerNetwork, area: int):
    return [k for k, br in enumerate(net.branches)
            if net.bus_area[br.from_bus] == area and net.bus_area[br.to_bus] == area]


def solve_realtime(net: PowerNetwork, part: AreaPartition, theta_bar, area: int,
                   loads=None, blocks: SusceptanceBlocks | None = None, relax: bool = True) -> ClearingSolution:
    """Local dispatch of ``area`` with every boundary angle held fixed.

    ``theta_bar`` follows ``part.boundary_order``; ``loads`` (MW per bus of
    ``net``) replace the forecast when given.  Infeasibility is handled by
    relaxing the area's line limits by the minimal uniform slack.
    """
    blocks = build_susceptance(net, part) if blocks is None else blocks
    loads = net.loads if loads is None else np.asarray(loads, dtype=float)
    base = net.base_mva
    order = part.boundary_order
    theta_bar = np.asarray(theta_bar, dtype=float)
    A = part.area_buses(area)
    inner = part.interior_buses[area]
    iA, iI, iB = blocks.idx(A), blocks.idx(inner), blocks.idx(order)
    gen_index = np.array([k for k, gen in enumerate(net.generators) if net.bus_area[gen.bus] == area], dtype=int)
    c1, q, c0, glo, ghi = _cost_arrays(net, gen_index)
    B = blocks.Y * base
    G = net.gen_bus_matrix[np.ix_(iA, gen_index)]
    lines = _area_branches(net, area)
    Hmw = blocks.H[lines] * base
    lim = np.array([net.branches[k].limit_mw for k in lines])
    const_flow = Hmw[:, iB] @ theta_bar

    pb = ProgramBuilder()
    pb.offset = c0
    pb.add_vars("g", len(gen_index), glo, ghi, c1, q)
    pb.add_vars("theta", len(inner), -np.inf, np.inf)
    rhs = loads[iA] + B[np.ix_(iA, iB)] @ theta_bar
    pb.add_rows("balance", {"g": G, "theta": -B[np.ix_(iA, iI)]}, rhs, rhs)
    if lines:
        pb.add_rows("lines", {"theta": Hmw[:, iI], "g": np.zeros((len(lines), len(gen_index)))},
                    -lim - const_flow, lim - const_flow)
    prog = pb.build()
    prog, res, t = _solve_or_relax(prog, "lines" if lines else None, relax)

    g = res.var(prog, "g")
    th_int = res.var(prog, "theta")
    lam = res.dual(prog, "balance")
    eta = -res.dual(prog, "lines") if lines else np.zeros(0)
    theta = np.zeros(len(A))
    pos = {b: i for i, b in enumerate(A)}
    for b, v in zip(inner, th_int):
        theta[pos[b]] = v
    for b, v in zip(order, theta_bar):
        if b in pos:
            theta[pos[b]] = v
    flows = Hmw[:, iI] @ th_int + const_flow
    grad = B[np.ix_(iA, iB)].T @ lam + (Hmw[:, iB].T @ eta if lines else 0.0)
    return ClearingSolution(
        mechanism="RT", net=net, part=part, area=area, gen_index=gen_index, g=g,
        bus_ids=np.array(A), loads=loads[iA], theta=theta, lmp=lam,
        branch_index=np.array(lines, dtype=int), flow_mw=flows, limit_mw=lim + t, eta=eta,
        xi_lower=np.maximum(res.col_dual[prog.var_blocks["g"]], 0),
        xi_upper=np.maximum(-res.col_dual[prog.var_blocks["g"]], 0),
        internal_cost=generation_cost(net, g, gen_index), theta_bar=theta_bar,
        theta_bar_gradient=np.asarray(grad, dtype=float), relaxation_mw=t, kkt=res.kkt,
        objective=res.objective,
    )


def solve_realtime_proxy(net: PowerNetwork, part: AreaPartition, area: int, proxy_injection,
                         loads=None, relax: bool = True) -> ClearingSolution:
    """Real-time dispatch of one area under the proxy model (CTS).

    ``proxy_injection`` is the per-bus MW the area exports at its proxy
    buses (the cleared CTS schedule); only the area's own branches exist.
    """
    loads = net.loads if loads is None else np.asarray(loads, dtype=float)
    base = net.base_mva
    A = part.area_buses(area)
    iA = np.array([net.bus_index[b] for b in A])
    gen_index = np.array([k for k, gen in enumerate(net.generators) if net.bus_area[gen.bus] == area], dtype=int)
    c1, q, c0, glo, ghi = _cost_arrays(net, gen_index)
    lines = _area_branches(net, area)
    branches = [net.branches[k] for k in lines]
    H = branch_incidence(net, branches)[:, iA] * base
    Y = H.T @ (H / (base * np.array([br.susceptance_pu for br in branches]))[:, None]) if lines else np.zeros((len(A),) * 2)
    lim = np.array([br.limit_mw for br in branches])
    G = net.gen_bus_matrix[np.ix_(iA, gen_index)]

    pb = ProgramBuilder()
    pb.offset = c0
    pb.add_vars("g", len(gen_index), glo, ghi, c1, q)
    th_lo, th_hi = np.full(len(A), -np.inf), np.full(len(A), np.inf)
    th_lo[0] = th_hi[0] = 0.0
    pb.add_vars("theta", len(A), th_lo, th_hi)
    rhs = loads[iA] + np.asarray(proxy_injection, dtype=float)[iA]
    pb.add_rows("balance", {"g": G, "theta": -Y}, rhs, rhs)
    if lines:
        pb.add_rows("lines", {"theta": H}, -lim, lim)
    prog = pb.build()
    prog, res, t = _solve_or_relax(prog, "lines" if lines else None, relax)
    g = res.var(prog, "g")
    theta = res.var(prog, "theta")
    return ClearingSolution(
        mechanism="RT-proxy", net=net, part=part, area=area, gen_index=gen_index, g=g,
        bus_ids=np.array(A), loads=loads[iA], theta=theta, lmp=res.dual(prog, "balance"),
        branch_index=np.array(lines, dtype=int), flow_mw=H @ theta if lines else np.zeros(0),
        limit_mw=lim + t, eta=-res.dual(prog, "lines") if lines else np.zeros(0),
        xi_lower=np.maximum(res.col_dual[prog.var_blocks["g"]], 0),
        xi_upper=np.maximum(-res.col_dual[prog.var_blocks["g"]], 0),
        internal_cost=generation_cost(net, g, gen_index), relaxation_mw=t, kkt=res.kkt,
        objective=res.objective,
    )


# -- separate (pre-CTS) clearing -------------------------------------------

def solve_separate_clearing(net: PowerNetwork, part: AreaPartition, book: BidBook,
                            sell_side_price=None, split: float = 0.5) -> np.ndarray:
    """Conventional split-bid clearing: each area clears the bids alone.

    A bid's price is split as ``dpi = pi_sell + pi_buy``; the sell-to area
    sees ``pi_sell`` and the buy-from area ``pi_buy``.  ``sell_side_price``
    gives ``pi_sell`` per bid; otherwise ``pi_sell = split * dpi``.  With a
    given sell-side price ``pi_buy`` may be negative, meaning the buy-from
    area is paid to release the power.  Each
    area solves its local dispatch with the cleared bids as boundary
    injections, and only quantities cleared in every area are scheduled
    (element-wise minimum).
    """
    validate_bids(book, part)
    dpi = book.dpi
    pi_sell = split * dpi if sell_side_price is None else np.asarray(sell_side_price, dtype=float)
    pi_buy = dpi - pi_sell
    prox = resolve_proxies(part, None)
    cleared = []
    for area in part.areas:
        involved = np.array([b.sell_to[0] == area or b.buy_from[0] == area for b in book])
        price = np.where([b.sell_to[0] == area for b in book], pi_sell, pi_buy)
        # the area only models its own side: injections at its own boundary buses
        sub = _separate_area_program(net, part, book, area, price, prox)
        s = np.where(involved, sub, np.inf)
        cleared.append(s)
    s_hat = np.min(np.vstack(cleared), axis=0) if cleared else np.zeros(len(book))
    s_hat[~np.isfinite(s_hat)] = 0.0
    return s_hat


def _separate_area_program(net, part, book, area, price, prox):
    base = net.base_mva
    A = part.area_buses(area)
    iA = np.array([net.bus_index[b] for b in A])
    gen_index = np.array([k for k, gen in enumerate(net.generators) if net.bus_area[gen.bus] == area], dtype=int)
    c1, q, c0, glo, ghi = _cost_arrays(net, gen_index)
    lines = _area_branches(net, area)
    branches = [net.branches[k] for k in lines]
    H = branch_incidence(net, branches)[:, iA] * base
    Y = H.T @ (H / (base * np.array([br.susceptance_pu for br in branches]))[:, None]) if lines else np.zeros((len(A),) * 2)
    lim = np.array([br.limit_mw for br in branches])
    # own-side incidence: +1 where the area supplies the bid, -1 where it receives it
    Ma = np.zeros((len(A), len(book)))
    pos = {b: i for i, b in enumerate(A)}
    for k, bid in enumerate(book):
        if bid.buy_from[0] == area:
            Ma[pos[bid.buy_from[1]], k] += 1.0
        if bid.sell_to[0] == area:
            Ma[pos[bid.sell_to[1]], k] -= 1.0
    involved = np.abs(Ma).sum(axis=0) > 0
    pb = ProgramBuilder()
    pb.offset = c0
    pb.add_vars("g", len(gen_index), glo, ghi, c1, q)
    pb.add_vars("s", len(book), 0.0, np.where(involved, book.s_max, 0.0), price + TIE_BREAK_EPS * book.ids)
    th_lo, th_hi = np.full(len(A), -np.inf), np.full(len(A), np.inf)
    th_lo[0] = th_hi[0] = 0.0
    pb.add_vars("theta", len(A), th_lo, th_hi)
    G = net.gen_bus_matrix[np.ix_(iA, gen_index)]
    pb.add_rows("balance", {"g": G, "theta": -Y, "s": -Ma}, net.loads[iA], net.loads[iA])
    if lines:
        pb.add_rows("lines", {"theta": H}, -lim, lim)
    pairs = _interface_pairs(part)
    pair_rows = [p for p in pairs if area in p]
    if pair_rows and len(book):
        C = np.vstack([_pair_coefficients(book, p) for p in pair_rows])
        F = np.array([pairs[p] for p in pair_rows])
        pb.add_rows("interface", {"s": C}, -F, F)
    prog = pb.build()
    res = solve_program(prog)
    return res.var(prog, "s")
