"""Real-time settlement of interface bids and revenue-adequacy auditing.

Interface bids pay each area the sensitivity of its real-time optimal cost
to the cleared quantity (``mu``) plus that area's share of the tie-line
congestion price (``rho``).  A tie-line's congestion price is split evenly
between its two terminal areas.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.linalg as sla

from .bids import BidBook, stacked_incidence
from .market.clearing import ClearingSolution, solve_realtime
from .netmodel import SingularMatrixError, SusceptanceBlocks, tie_shift_factors

AUDIT_TOL = 1e-6


class AuditError(AssertionError):
    def __init__(self, message: str, residual: float):
        super().__init__(f"{message} (residual {residual:.3e})")
        self.residual = residual


def interface_price_mu(rt: ClearingSolution, blocks: SusceptanceBlocks, M: np.ndarray,
                       reference: int | None = None) -> np.ndarray:
    """Price per bid ($/MWh) charged by ``rt.area``: the derivative of its
    real-time optimal cost w.r.t. each cleared bid quantity."""
    grad = rt.theta_bar_gradient
    if grad is None:
        raise ValueError("real-time solution carries no boundary-angle sensitivity")
    r = blocks.boundary_reference_index(reference)
    keep = np.arange(len(grad)) != r
    Yr = blocks.boundary_matrix[np.ix_(keep, keep)] * blocks.net.base_mva
    try:
        w = sla.solve(Yr, grad[keep], assume_a="sym")
    except sla.LinAlgError as exc:
        raise SingularMatrixError("boundary equivalent matrix is singular", float(np.linalg.cond(Yr))) from exc
    return M[keep].T @ w


def congestion_price_rho(look_ahead: ClearingSolution, S: np.ndarray, M: np.ndarray,
                         tie_mask: np.ndarray | None = None) -> np.ndarray:
    """Tie-line congestion price per bid, ``M' S' eta_bar``.

    ``tie_mask`` (0/1 per tie-line) restricts the sum to a subset of ties;
    it is how an area's share is formed.
    """
    eta_bar = look_ahead.tie_eta()
    if tie_mask is not None:
        eta_bar = eta_bar * np.asarray(tie_mask, dtype=float)
    return M.T @ (S.T @ eta_bar)


def tie_rent(look_ahead: ClearingSolution) -> np.ndarray:
    """Per tie-line congestion rent f_bar*|eta_bar| in $/h."""
    lim = np.array([br.limit_mw for br in look_ahead.part.tie_lines])
    return _rent(lim, look_ahead.tie_eta())


def _rent(limit_mw: np.ndarray, eta: np.ndarray) -> np.ndarray:
    """limit*|eta| per line; lines with a zero price earn nothing even if unlimited."""
    out = np.zeros(len(eta))
    bind = eta != 0
    out[bind] = limit_mw[bind] * np.abs(eta[bind])
    return out


@dataclass
class AreaSettlement:
    area: int
    bus_ids: np.ndarray
    lmp: np.ndarray
    mu: np.ndarray
    rho_share: np.ndarray
    internal_rent: float
    tie_rent_share: float
    net_revenue: float
    energy_revenue: float
    interface_revenue: float

    @property
    def payments(self) -> np.ndarray:
        """Per-bid payment rate ($/MWh) owed to this area."""
        return self.mu + self.rho_share

    @property
    def residual(self) -> float:
        return self.net_revenue - (self.internal_rent + self.tie_rent_share)


@dataclass
class SettlementReport:
    book: BidBook
    s: np.ndarray
    rho: np.ndarray
    areas: dict[int, AreaSettlement] = field(default_factory=dict)
    realtime: dict[int, ClearingSolution] = field(default_factory=dict)

    def records(self):
        """Flat rows for CSV/JSON: one per (area, bid)."""
        rows = []
        for a, st in self.areas.items():
            for k, bid in enumerate(self.book):
                rows.append({
                    "area": a, "bid": bid.id, "cleared_mw": self.s[k], "mu": st.mu[k],
                    "rho_share": st.rho_share[k], "payment": st.payments[k],
                    "internal_rent": st.internal_rent, "tie_rent_share": st.tie_rent_share,
                    "net_revenue": st.net_revenue,
                })
        return rows


def internal_rent(rt: ClearingSolution) -> float:
    return float(np.sum(_rent(rt.limit_mw, rt.eta)))


def settle(look_ahead: ClearingSolution, blocks: SusceptanceBlocks, loads=None,
           realtime: dict[int, ClearingSolution] | None = None) -> SettlementReport:
    """Run every area's real-time dispatch at the GCTS boundary state and settle.

    ``loads`` are realised bus loads (default: forecast).  Pre-computed
    real-time solutions may be passed through ``realtime``.
    """
    from .market.clearing import recover_boundary_state

    part, net, book = look_ahead.part, look_ahead.net, look_ahead.book
    M = stacked_incidence(book, part)
    S = tie_shift_factors(blocks)
    theta_bar = recover_boundary_state(blocks, book, look_ahead.s)
    rho = congestion_price_rho(look_ahead, S, M)
    rents = tie_rent(look_ahead)
    report = SettlementReport(book, look_ahead.s.copy(), rho)
    area_of = net.bus_area
    for a in part.areas:
        rt = (realtime or {}).get(a)
        if rt is None:
            rt = solve_realtime(net, part, theta_bar, a, loads=loads, blocks=blocks)
        mask = np.array([(area_of[br.from_bus] == a) + (area_of[br.to_bus] == a) for br in part.tie_lines], dtype=float)
        rho_a = 0.5 * congestion_price_rho(look_ahead, S, M, mask)
        mu = interface_price_mu(rt, blocks, M)
        gen_inj = np.zeros(len(rt.bus_ids))
        pos = {b: i for i, b in enumerate(rt.bus_ids)}
        for k, g in zip(rt.gen_index, rt.g):
            gen_inj[pos[net.generators[k].bus]] += g
        energy = float((rt.loads - gen_inj) @ rt.lmp)
        interface = float(look_ahead.s @ (mu + rho_a))
        report.areas[a] = AreaSettlement(
            area=a, bus_ids=rt.bus_ids, lmp=rt.lmp, mu=mu, rho_share=rho_a,
            internal_rent=internal_rent(rt), tie_rent_share=float(0.5 * rents @ mask),
            net_revenue=energy + interface, energy_revenue=energy, interface_revenue=interface,
        )
        report.realtime[a] = rt
    return report


def revenue_adequacy_audit(report: SettlementReport, tol: float = AUDIT_TOL, raise_on_failure: bool = True) -> dict:
    """Check net revenue == internal rent + tie-rent share >= 0 for every area."""
    out = {}
    for a, st in report.areas.items():
        rhs = st.internal_rent + st.tie_rent_share
        ok = abs(st.residual) <= tol and rhs >= -tol
        out[a] = {"net_revenue": st.net_revenue, "congestion_rent": rhs, "residual": st.residual, "ok": ok}
        if raise_on_failure and not ok:
            raise AuditError(f"revenue adequacy failed in area {a}", st.residual)
    return out


@dataclass
class SurplusReport:
    area: int
    consumer: float
    supplier: float
    transmission: float

    @property
    def total(self) -> float:
        return self.consumer + self.supplier + self.transmission


def local_surplus(rt: ClearingSolution, utility: float = 0.0) -> SurplusReport:
    """Consumer + supplier + transmission surplus of one area's real-time market."""
    net = rt.net
    pos = {b: i for i, b in enumerate(rt.bus_ids)}
    gen_lmp = np.array([rt.lmp[pos[net.generators[k].bus]] for k in rt.gen_index])
    cost = sum(net.generators[k].cost(g) for k, g in zip(rt.gen_index, rt.g))
    return SurplusReport(
        area=rt.area,
        consumer=float(utility - rt.lmp @ rt.loads),
        supplier=float(gen_lmp @ rt.g - cost),
        transmission=internal_rent(rt),
    )
