"""Study drivers: w-sweeps, bid-price sweeps, Monte-Carlo comparison of
JED, CTS and GCTS, loop-flow audits and surplus comparisons.

Every driver is deterministic for a given input and seed.  Monte-Carlo
load draws use a counter-based generator and are shared by all
mechanisms within a run.
"""
from __future__ import annotations

import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from typing import Iterable, Mapping, Sequence

import numpy as np
from scipy.special import ndtri

from .bids import BidBook, stacked_incidence
from .caseio import ScenarioConfig, StitchConfig, stitch
from .market.clearing import (
    ClearingSolution,
    recover_boundary_state,
    solve_cts,
    solve_gcts_n_area,
    solve_jed,
    solve_realtime,
    solve_realtime_proxy,
    solve_separate_clearing,
)
from .market.program import InfeasibleError
from .netmodel import AreaPartition, PowerNetwork, SusceptanceBlocks, branch_incidence, build_susceptance, dc_power_flow
from .settlement import local_surplus

MECHANISMS = ("JED", "CTS", "GCTS")
OVERFLOW_TOL = 1e-6


# -- loop-flow audit ---------------------------------------------------------

@dataclass
class LoopFlowAudit:
    """Exact-network check of a dispatch.

    ``overflow_ratio`` is the mean of (|flow| - limit)/limit over overflowed
    lines, in percent.  ``discrepancy_pct`` compares, per area, the boundary
    exchange the area's own model assumed with the exchange the exact
    network produces, as a percentage of the area's tie-line capacity.
    """

    flows_mw: np.ndarray
    overflow_lines: int
    overflow_ratio: float
    discrepancy_pct: dict[int, float] = field(default_factory=dict)


def exact_flows(net: PowerNetwork, g_full, loads) -> np.ndarray:
    """Branch flows (MW, ``net.branches`` order) of a dispatch on the full network."""
    inj = net.gen_bus_matrix @ np.asarray(g_full, dtype=float) - np.asarray(loads, dtype=float)
    theta = dc_power_flow(net, inj)
    return net.base_mva * (branch_incidence(net) @ theta)


def _tie_exports(net: PowerNetwork, part: AreaPartition, tie_flows) -> np.ndarray:
    """Per-bus MW leaving through tie-lines."""
    out = np.zeros(net.n_bus)
    for br, f in zip(part.tie_lines, tie_flows):
        out[net.bus_index[br.from_bus]] += f
        out[net.bus_index[br.to_bus]] -= f
    return out


def _model_exports(sol: ClearingSolution, blocks: SusceptanceBlocks | None) -> np.ndarray:
    """Per-bus boundary exchange each area's model assumes under ``sol``."""
    net, part = sol.net, sol.part
    if sol.mechanism == "CTS":
        return np.asarray(sol.proxy_injection, dtype=float)
    if sol.mechanism == "GCTS":
        blocks = build_susceptance(net, part) if blocks is None else blocks
        order = part.boundary_order
        Ht = branch_incidence(net, part.tie_lines)[:, blocks.idx(order)]
        return _tie_exports(net, part, net.base_mva * (Ht @ sol.theta_bar))
    return _tie_exports(net, part, sol.tie_flows())


def audit_loop_flow(sol: ClearingSolution, net: PowerNetwork | None = None, part: AreaPartition | None = None,
                    g_full=None, loads=None, blocks: SusceptanceBlocks | None = None) -> LoopFlowAudit:
    """Recompute flows of a mechanism's dispatch on the exact network.

    ``g_full`` (MW per generator of ``net``) and ``loads`` default to the
    look-ahead values in ``sol``; pass real-time values to audit a scenario.
    """
    net = sol.net if net is None else net
    part = sol.part if part is None else part
    g_full = sol.g if g_full is None else g_full
    loads = net.loads if loads is None else loads
    flows = exact_flows(net, g_full, loads)
    lim = np.array([br.limit_mw for br in net.branches])
    finite = np.isfinite(lim)
    excess = np.zeros_like(flows)
    excess[finite] = np.abs(flows[finite]) - lim[finite]
    over = finite & (excess > OVERFLOW_TOL * np.maximum(1.0, np.where(finite, lim, 1.0)))
    ratio = float(np.mean(excess[over] / lim[over]) * 100.0) if over.any() else 0.0

    tie_pos = [net.branches.index(br) for br in part.tie_lines]
    exact = _tie_exports(net, part, flows[tie_pos])
    model = _model_exports(sol, blocks)
    disc = {}
    area_of = net.bus_area
    for a in part.areas:
        rows = [net.bus_index[b] for b in part.area_buses(a)]
        cap = sum(br.limit_mw for br in part.tie_lines if a in (area_of[br.from_bus], area_of[br.to_bus]))
        gap = float(np.sum(np.abs(exact[rows] - model[rows])))
        if not math.isfinite(cap) or cap <= 0:
            cap = max(float(np.sum(np.abs(model[rows]))), 1.0)
        disc[a] = 100.0 * gap / cap
    return LoopFlowAudit(flows, int(over.sum()), ratio, disc)


# -- look-ahead --------------------------------------------------------------

def look_ahead(net: PowerNetwork, part: AreaPartition, book: BidBook, mechanism: str,
               blocks: SusceptanceBlocks | None = None, proxy: Mapping | None = None) -> ClearingSolution:
    mechanism = mechanism.upper()
    if mechanism == "JED":
        return solve_jed(net, part, blocks=blocks)
    if mechanism == "GCTS":
        return solve_gcts_n_area(net, part, book, blocks=blocks)
    if mechanism == "CTS":
        return solve_cts(net, part, book, proxy=proxy)
    raise ValueError(f"unknown mechanism {mechanism!r}")


def isolated_cost(net: PowerNetwork, part: AreaPartition) -> float:
    """Total generation cost with every tie-line open (no interchange)."""
    total = 0.0
    for a in part.areas:
        buses = set(part.area_buses(a))
        sub = PowerNetwork(
            tuple(b for b in net.buses if b.id in buses),
            tuple(br for br in net.branches if br.from_bus in buses and br.to_bus in buses),
            tuple(g for g in net.generators if g.bus in buses), net.base_mva)
        total += solve_jed(sub).internal_cost
    return total


# -- real-time Monte Carlo ---------------------------------------------------

def sample_loads(net: PowerNetwork, scenario: ScenarioConfig) -> np.ndarray:
    """``n_samples x n_bus`` realised loads: forecast plus Gaussian error with
    standard deviation ``load_sigma_fraction`` x forecast, truncated at 0."""
    rng = np.random.Generator(np.random.Philox(key=scenario.rng_seed))
    u = rng.random((scenario.n_samples, net.n_bus))
    z = ndtri(np.clip(u, 1e-16, 1.0 - 1e-16))
    d = net.loads
    return np.maximum(d + scenario.load_sigma_fraction * d * z, 0.0)


@dataclass
class ScenarioOutcome:
    cost: float
    relaxed: bool
    overflow_lines: int
    overflow_ratio: float
    discrepancy_pct: dict[int, float]


def _realtime_one(net, part, blocks, sol: ClearingSolution, loads) -> ScenarioOutcome:
    mech = sol.mechanism
    if mech == "JED":
        rt = solve_jed(net.with_loads(loads), part, blocks=blocks, relax=True)
        g_full, cost, relaxed = rt.g, rt.internal_cost, rt.relaxed
        audit = audit_loop_flow(rt, g_full=g_full, loads=loads, blocks=blocks)
    else:
        g_full = np.zeros(len(net.generators))
        cost, relaxed = sol.interface_cost, False
        for a in part.areas:
            if mech == "GCTS":
                rt = solve_realtime(net, part, sol.theta_bar, a, loads=loads, blocks=blocks)
            else:
                rt = solve_realtime_proxy(net, part, a, sol.proxy_injection, loads=loads)
            g_full[rt.gen_index] = rt.g
            cost += rt.internal_cost
            relaxed |= rt.relaxed
        audit = audit_loop_flow(sol, g_full=g_full, loads=loads, blocks=blocks)
    return ScenarioOutcome(float(cost), bool(relaxed), audit.overflow_lines, audit.overflow_ratio, audit.discrepancy_pct)


def _scenario_task(args):
    k, net, part, sols, loads = args
    blocks = build_susceptance(net, part)
    out = {}
    for name, sol in sols.items():
        try:
            out[name] = _realtime_one(net, part, blocks, sol, loads)
        except InfeasibleError:
            out[name] = None
    return k, out


@dataclass
class ComparisonRow:
    """One mechanism's line in a JED/CTS/GCTS comparison table."""

    mechanism: str
    net_export_mw: dict[int, float]
    look_ahead_generation_cost: float
    look_ahead_total_cost: float | None
    avg_realtime_total_cost: float
    overflow_scenarios: int
    mean_overflow_lines: float
    mean_overflow_ratio_pct: float
    mean_tie_discrepancy_pct: dict[int, float]
    relaxed_scenarios: int = 0
    infeasible_scenarios: int = 0
    n_samples: int = 0

    @property
    def net_interchange_mw(self) -> float:
        """Total MW moved between areas (half the summed absolute net exports)."""
        return 0.5 * sum(abs(v) for v in self.net_export_mw.values())

    def record(self) -> dict:
        rec = {
            "mechanism": self.mechanism,
            "net_interchange_mw": self.net_interchange_mw,
            "look_ahead_generation_cost": self.look_ahead_generation_cost,
            "look_ahead_total_cost": "--" if self.look_ahead_total_cost is None else self.look_ahead_total_cost,
            "avg_realtime_total_cost": self.avg_realtime_total_cost,
            "overflow_scenarios": self.overflow_scenarios,
            "mean_overflow_lines": self.mean_overflow_lines,
            "mean_overflow_ratio_pct": self.mean_overflow_ratio_pct,
        }
        for a, v in sorted(self.net_export_mw.items()):
            rec[f"net_export_area{a}_mw"] = v
        for a, v in sorted(self.mean_tie_discrepancy_pct.items()):
            rec[f"tie_discrepancy_area{a}_pct"] = v
        rec.update(relaxed_scenarios=self.relaxed_scenarios, infeasible_scenarios=self.infeasible_scenarios,
                   n_samples=self.n_samples)
        return rec


@dataclass
class ComparisonResult:
    rows: list[ComparisonRow]
    costs: dict[str, np.ndarray]
    look_ahead: dict[str, ClearingSolution]
    relaxed: dict[str, np.ndarray] = field(default_factory=dict)

    def records(self) -> list[dict]:
        return [r.record() for r in self.rows]

    def wins(self, a: str, b: str) -> int:
        """Scenarios in which mechanism ``a`` had a strictly lower real-time cost than ``b``."""
        x, y = self.costs[a], self.costs[b]
        return int(np.sum(np.isfinite(x) & np.isfinite(y) & (x < y)))


def compare_mechanisms(net: PowerNetwork, part: AreaPartition, book: BidBook, scenario: ScenarioConfig,
                       mechanisms: Sequence[str] = MECHANISMS, proxy: Mapping | None = None,
                       workers: int = 1) -> ComparisonResult:
    """Look-ahead clearing per mechanism, then real-time dispatch on shared load draws."""
    blocks = build_susceptance(net, part)
    mechanisms = [m.upper() for m in mechanisms]
    sols = {m: look_ahead(net, part, book, m, blocks=blocks, proxy=proxy) for m in mechanisms}
    draws = sample_loads(net, scenario)
    tasks = [(k, net, part, sols, draws[k]) for k in range(len(draws))]
    if workers > 1 and len(tasks) > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(_scenario_task, tasks))
    else:
        results = [_scenario_task(t) for t in tasks]
    results.sort(key=lambda kv: kv[0])

    rows, costs, relaxed = [], {}, {}
    for m in mechanisms:
        outs = [r[1][m] for r in results]
        ok = [o for o in outs if o is not None]
        c = np.array([o.cost if o is not None else np.nan for o in outs])
        costs[m] = c
        relaxed[m] = np.array([o is not None and o.relaxed for o in outs])
        sol = sols[m]
        exports = {a: 0.0 for a in part.areas}
        if m == "JED":
            exports = sol.area_net_export()
        else:
            for bid, x in zip(book, sol.s):
                exports[bid.buy_from[0]] += x
                exports[bid.sell_to[0]] -= x
        disc_keys = part.areas
        rows.append(ComparisonRow(
            mechanism=m,
            net_export_mw={a: float(v) for a, v in exports.items()},
            look_ahead_generation_cost=sol.internal_cost,
            look_ahead_total_cost=None if m == "JED" else sol.total_cost,
            avg_realtime_total_cost=float(np.mean(c[np.isfinite(c)])) if ok else math.nan,
            overflow_scenarios=sum(o.overflow_lines > 0 for o in ok),
            mean_overflow_lines=float(np.mean([o.overflow_lines for o in ok])) if ok else 0.0,
            mean_overflow_ratio_pct=float(np.mean([o.overflow_ratio for o in ok if o.overflow_lines]))
            if any(o.overflow_lines for o in ok) else 0.0,
            mean_tie_discrepancy_pct={a: float(np.mean([o.discrepancy_pct[a] for o in ok])) if ok else 0.0
                                      for a in disc_keys},
            relaxed_scenarios=sum(o.relaxed for o in ok),
            infeasible_scenarios=len(outs) - len(ok),
            n_samples=len(outs),
        ))
    return ComparisonResult(rows, costs, sols, relaxed)


def run_realtime_mc(config: StitchConfig, book: BidBook, scenario: ScenarioConfig,
                    mechanisms: Sequence[str] = MECHANISMS, proxy: Mapping | None = None,
                    workers: int = 1) -> ComparisonResult:
    """Monte-Carlo comparison on a stitched configuration (costs scaled by ``scenario.w``)."""
    net, part = stitch(config, scenario.w)
    if scenario.uniform_dpi is not None:
        book = book.with_uniform(scenario.uniform_dpi)
    return compare_mechanisms(net, part, book, scenario, mechanisms, proxy, workers)


# -- sweeps ------------------------------------------------------------------

def boundary_residual(sol: ClearingSolution, blocks: SusceptanceBlocks) -> float:
    """Max |Ybar theta_bar - M s| in per unit, reference row excluded."""
    M = stacked_incidence(sol.book, sol.part)
    r = blocks.boundary_reference_index()
    keep = np.arange(len(sol.theta_bar)) != r
    res = blocks.boundary_matrix @ sol.theta_bar - M @ sol.s / sol.net.base_mva
    return float(np.max(np.abs(res[keep]), initial=0.0))


@dataclass
class WSweepRow:
    w: float
    status: str
    s: np.ndarray | None = None
    tie_flows_mw: np.ndarray | None = None
    boundary_price: np.ndarray | None = None
    internal_cost: float = math.nan
    interface_cost: float = math.nan
    boundary_residual_pu: float = math.nan
    imports: dict[int, float] = field(default_factory=dict)
    exports: dict[int, float] = field(default_factory=dict)

    @property
    def total_cost(self) -> float:
        return self.internal_cost + self.interface_cost


def run_w_sweep(config: StitchConfig, book: BidBook, ws: Iterable[float]) -> list[WSweepRow]:
    """GCTS clearing of ``book`` for each cost weight ``w``.

    ``imports[a]`` / ``exports[a]`` total the cleared MW of bids delivering
    into / out of area ``a``.  Infeasible points are recorded, not raised.
    """
    rows = []
    for w in ws:
        net, part = stitch(config, w)
        blocks = build_susceptance(net, part)
        try:
            sol = solve_gcts_n_area(net, part, book, blocks=blocks)
        except InfeasibleError as exc:
            rows.append(WSweepRow(float(w), f"infeasible: {exc}"))
            continue
        imports = {a: 0.0 for a in part.areas}
        exports = {a: 0.0 for a in part.areas}
        for bid, x in zip(book, sol.s):
            imports[bid.sell_to[0]] += x
            exports[bid.buy_from[0]] += x
        rows.append(WSweepRow(
            float(w), "optimal", sol.s.copy(), sol.tie_flows(), sol.boundary_price.copy(),
            sol.internal_cost, sol.interface_cost, boundary_residual(sol, blocks), imports, exports))
    return rows


def w_sweep_records(rows: Sequence[WSweepRow], book: BidBook, part: AreaPartition) -> list[dict]:
    out = []
    for r in rows:
        rec: dict = {"w": r.w, "status": r.status}
        if r.s is not None:
            rec.update({f"s{b.id}": x for b, x in zip(book, r.s)})
            rec.update({f"tie{k + 1}_mw": f for k, f in enumerate(r.tie_flows_mw)})
            rec.update({f"price_bus{b}": p for b, p in zip(part.boundary_order, r.boundary_price)})
            rec.update(internal_cost=r.internal_cost, interface_cost=r.interface_cost, total_cost=r.total_cost,
                       boundary_residual_pu=r.boundary_residual_pu)
        out.append(rec)
    return out


@dataclass
class SweepPoint:
    w: float
    dpi: float
    cost_gcts: float
    cost_jed: float
    status: str = "optimal"

    @property
    def gap(self) -> float:
        return self.cost_gcts - self.cost_jed

    @property
    def relative_gap(self) -> float:
        return self.gap / abs(self.cost_jed) if self.cost_jed else self.gap

    def record(self) -> dict:
        return {"w": self.w, "dpi": self.dpi, "cost_gcts": self.cost_gcts, "cost_jed": self.cost_jed,
                "gap": self.gap, "relative_gap": self.relative_gap, "status": self.status}


def run_dpi_sweep(config: StitchConfig, book: BidBook, dpis: Iterable[float],
                  ws: Iterable[float] = (1.0,)) -> list[SweepPoint]:
    """Generation-cost gap of GCTS to JED with every bid priced at each ``dpi``."""
    dpis = list(dpis)
    points = []
    for w in ws:
        net, part = stitch(config, w)
        blocks = build_susceptance(net, part)
        jed = solve_jed(net, part, blocks=blocks).internal_cost
        for d in dpis:
            try:
                sol = solve_gcts_n_area(net, part, book.with_uniform(d), blocks=blocks)
                points.append(SweepPoint(float(w), float(d), sol.internal_cost, jed))
            except InfeasibleError:
                points.append(SweepPoint(float(w), float(d), math.nan, jed, "infeasible"))
    return points


def closing_threshold(points: Sequence[SweepPoint], w: float, rel_tol: float = 1e-4) -> float:
    """Largest ``dpi`` at which the relative gap for weight ``w`` is within ``rel_tol``
    (0 when it never closes)."""
    ok = [p.dpi for p in points if p.w == w and p.status == "optimal" and p.relative_gap <= rel_tol]
    return max(ok, default=0.0)


# -- surplus -----------------------------------------------------------------

@dataclass
class SurplusComparison:
    s_gcts: np.ndarray
    s_separate: np.ndarray
    gcts: dict[int, float]
    separate: dict[int, float]

    def advantage(self) -> dict[int, float]:
        return {a: self.gcts[a] - self.separate[a] for a in self.gcts}


def jed_sell_side_price(net: PowerNetwork, part: AreaPartition, book: BidBook,
                        blocks: SusceptanceBlocks | None = None) -> np.ndarray:
    """Per-bid JED LMP at the bid's sell-to bus."""
    jed = solve_jed(net, part, blocks=blocks)
    return np.array([jed.lmp[net.bus_index[b.sell_to[1]]] for b in book])


def surplus_comparison(net: PowerNetwork, part: AreaPartition, book: BidBook, sell_side_price=None,
                       split: float = 0.5, utility: Mapping[int, float] | None = None,
                       loads=None) -> SurplusComparison:
    """Local surplus of every area under GCTS versus separate clearing.

    Both schedules are dispatched in real time with the boundary state
    they imply.  ``sell_side_price`` and ``split`` configure the separate
    clearing (see :func:`solve_separate_clearing`).
    """
    blocks = build_susceptance(net, part)
    gc = solve_gcts_n_area(net, part, book, blocks=blocks)
    s_hat = solve_separate_clearing(net, part, book, sell_side_price=sell_side_price, split=split)
    theta_sep = recover_boundary_state(blocks, book, s_hat)
    utility = utility or {}
    out = {}
    for name, tb in (("gcts", gc.theta_bar), ("separate", theta_sep)):
        out[name] = {a: local_surplus(solve_realtime(net, part, tb, a, loads=loads, blocks=blocks),
                                      utility.get(a, 0.0)).total for a in part.areas}
    return SurplusComparison(gc.s.copy(), s_hat, out["gcts"], out["separate"])
