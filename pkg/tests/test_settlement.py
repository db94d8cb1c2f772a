import numpy as np
import pytest

from gcts.bids import stacked_incidence
from gcts.caseio import ScenarioConfig
from gcts.experiments import sample_loads
from gcts.market import InfeasibleError, solve_gcts, solve_realtime
from gcts.netmodel import build_susceptance, tie_shift_factors
from gcts.settlement import (
    AuditError,
    congestion_price_rho,
    local_surplus,
    revenue_adequacy_audit,
    settle,
    tie_rent,
)
from gcts.synthetic import SyntheticSpec, feasible_network, random_bids
from oracles import mu_finite_difference

TOL = 1e-6


def synthetic_instances(n, spec=SyntheticSpec(), offset=0):
    for seed in range(offset, offset + n):
        net, part = feasible_network(seed, spec)
        book = random_bids(np.random.Generator(np.random.Philox(5000 + seed)), part)
        yield net, part, book


def check_identity(report):
    audit = revenue_adequacy_audit(report, raise_on_failure=False)
    for a, row in audit.items():
        assert abs(row["residual"]) <= TOL, (a, row)
        assert row["congestion_rent"] >= -TOL


@pytest.mark.parametrize("spec", [SyntheticSpec(), SyntheticSpec(n_areas=2, n_ties=3),
                                  SyntheticSpec(n_areas=3, n_ties=3, line_limit_scale=0.5)],
                         ids=["one-tie", "three-tie", "three-area"])
def test_revenue_identity_on_synthetic_instances(spec):
    solved = 0
    for net, part, book in synthetic_instances(10, spec):
        blocks = build_susceptance(net, part)
        try:
            sol = solve_gcts(net, part, book, blocks=blocks)
        except InfeasibleError:
            continue  # rank-deficient bid topologies
        check_identity(settle(sol, blocks))
        solved += 1
    assert solved >= 5


def test_revenue_identity_default_configs(two_area, three_area):
    for cfg in (two_area, three_area):
        sol = solve_gcts(cfg.net, cfg.part, cfg.book, blocks=cfg.blocks)
        check_identity(settle(sol, cfg.blocks))


def test_revenue_identity_with_realised_loads(two_area):
    sol = solve_gcts(two_area.net, two_area.part, two_area.book, blocks=two_area.blocks)
    loads = sample_loads(two_area.net, ScenarioConfig(n_samples=3, load_sigma_fraction=0.02, rng_seed=4))
    for d in loads:
        try:
            check_identity(settle(sol, two_area.blocks, loads=d))
        except InfeasibleError:
            continue


def test_rent_split_conserves_tie_rent(two_area, three_area):
    for cfg in (two_area, three_area):
        sol = solve_gcts(cfg.net, cfg.part, cfg.book, blocks=cfg.blocks)
        report = settle(sol, cfg.blocks)
        total = sum(st.tie_rent_share for st in report.areas.values())
        assert total == pytest.approx(tie_rent(sol).sum(), abs=1e-9)
        rho_sum = sum(st.rho_share for st in report.areas.values())
        np.testing.assert_allclose(rho_sum, report.rho, atol=1e-9)


def test_rho_is_linear_in_tie_mask(three_area):
    sol = solve_gcts(three_area.net, three_area.part, three_area.book, blocks=three_area.blocks)
    S = tie_shift_factors(three_area.blocks)
    M = stacked_incidence(three_area.book, three_area.part)
    n = len(three_area.part.tie_lines)
    full = congestion_price_rho(sol, S, M)
    parts = [congestion_price_rho(sol, S, M, np.eye(n)[k]) for k in range(n)]
    np.testing.assert_allclose(np.sum(parts, axis=0), full, atol=1e-9)


def congested_instance():
    spec = SyntheticSpec(n_areas=2, n_ties=2, tie_limit=(5.0, 15.0))
    for net, part, book in synthetic_instances(30, spec, offset=100):
        blocks = build_susceptance(net, part)
        try:
            sol = solve_gcts(net, part, book.with_uniform(0.0, 1e3), blocks=blocks)
        except InfeasibleError:
            continue
        if np.any(sol.tie_eta() != 0):
            return sol, blocks
    pytest.skip("no congested tie in the sampled instances")


def test_bid_payments_for_tie_congestion_equal_tie_rent():
    sol, blocks = congested_instance()
    S = tie_shift_factors(blocks)
    M = stacked_incidence(sol.book, sol.part)
    rho = congestion_price_rho(sol, S, M)
    assert float(sol.s @ rho) == pytest.approx(tie_rent(sol).sum(), rel=1e-6, abs=1e-6)


def test_mu_matches_finite_differences():
    checked = 0
    for net, part, book in synthetic_instances(15, SyntheticSpec(n_areas=2, n_ties=2), offset=200):
        blocks = build_susceptance(net, part)
        try:
            sol = solve_gcts(net, part, book, blocks=blocks)
        except InfeasibleError:
            continue
        report = settle(sol, blocks)
        for k in range(len(book)):
            for a in part.areas:
                fd = mu_finite_difference(net, part, blocks, book, sol.s, k, a)
                if fd is not None:
                    assert fd == pytest.approx(report.areas[a].mu[k], rel=1e-3, abs=1e-6)
                    checked += 1
    assert checked >= 5


def test_audit_raises_on_broken_identity(two_area):
    sol = solve_gcts(two_area.net, two_area.part, two_area.book, blocks=two_area.blocks)
    report = settle(sol, two_area.blocks)
    a = two_area.part.areas[0]
    report.areas[a].net_revenue += 1.0
    with pytest.raises(AuditError):
        revenue_adequacy_audit(report)
    assert not revenue_adequacy_audit(report, raise_on_failure=False)[a]["ok"]


def test_settlement_records(two_area):
    sol = solve_gcts(two_area.net, two_area.part, two_area.book, blocks=two_area.blocks)
    rows = settle(sol, two_area.blocks).records()
    assert len(rows) == len(two_area.part.areas) * len(two_area.book)
    assert {"area", "bid", "mu", "rho_share", "payment"} <= set(rows[0])


def test_local_surplus_arithmetic(two_area):
    sol = solve_gcts(two_area.net, two_area.part, two_area.book, blocks=two_area.blocks)
    net = two_area.net
    for a in two_area.part.areas:
        rt = solve_realtime(net, two_area.part, sol.theta_bar, a, blocks=two_area.blocks)
        rep = local_surplus(rt, utility=1e5)
        cost = sum(net.generators[k].cost(g) for k, g in zip(rt.gen_index, rt.g))
        pos = {b: i for i, b in enumerate(rt.bus_ids)}
        paid = sum(rt.lmp[pos[net.generators[k].bus]] * g for k, g in zip(rt.gen_index, rt.g))
        assert rep.consumer == pytest.approx(1e5 - rt.lmp @ rt.loads)
        assert rep.supplier == pytest.approx(paid - cost)
        assert rep.total == pytest.approx(rep.consumer + rep.supplier + rep.transmission)


def test_three_area_transit_settlement(three_area):
    # area 2 sits between areas 1 and 3 on the boundary tree and carries transit
    sol = solve_gcts(three_area.net, three_area.part, three_area.book, blocks=three_area.blocks)
    report = settle(sol, three_area.blocks)
    check_identity(report)
    assert set(report.areas) == {1, 2, 3}
    assert all(np.all(np.isfinite(st.mu)) for st in report.areas.values())


def four_bus(tie_limit=np.inf, c_cheap=10.0, c_dear=20.0):
    """Areas {1, 2} and {3, 4} joined by tie 2-3; cheap supply in area 1, dear in area 2."""
    from gcts.netmodel import AreaPartition, Branch, Bus, CostCurve, Generator, PowerNetwork

    buses = (Bus(1, 1), Bus(2, 1, 30.0, True), Bus(3, 2, 0.0, True), Bus(4, 2, 30.0))
    branches = (Branch(1, 2, 0.1), Branch(2, 3, 0.1, tie_limit, True), Branch(3, 4, 0.1))
    gens = (Generator(1, 0.0, 100.0, CostCurve(0, c_cheap, 0)), Generator(4, 0.0, 100.0, CostCurve(0, c_dear, 0)))
    net = PowerNetwork(buses, branches, gens)
    return net, AreaPartition.from_network(net)


def export_book(dpi=1.0, s_max=100.0):
    from gcts.bids import BidBook, InterfaceBid

    return BidBook((InterfaceBid(1, sell_to=(2, 3), buy_from=(1, 2), dpi=dpi, s_max=s_max),))


def test_rho_for_single_binding_tie():
    net, part = four_bus(tie_limit=10.0)
    blocks = build_susceptance(net, part)
    sol = solve_gcts(net, part, export_book(), blocks=blocks)
    eta = sol.tie_eta()[0]
    # the tie binds; its price is the area price spread less the bid price
    assert abs(eta) == pytest.approx(20.0 - 10.0 - 1.0, abs=1e-6)
    rho = congestion_price_rho(sol, tie_shift_factors(blocks), stacked_incidence(sol.book, part))
    # one MW of the bid is one MW on the tie in its from->to direction
    assert rho[0] == pytest.approx(eta, abs=1e-9)
    assert float(sol.s @ rho) == pytest.approx(10.0 * abs(eta), abs=1e-6)
    check_identity(settle(sol, blocks))


def test_rho_zero_without_tie_congestion():
    net, part = four_bus()
    blocks = build_susceptance(net, part)
    sol = solve_gcts(net, part, export_book(), blocks=blocks)
    rho = congestion_price_rho(sol, tie_shift_factors(blocks), stacked_incidence(sol.book, part))
    np.testing.assert_array_equal(rho, 0.0)


def test_mu_uncongested_linear_costs():
    # a fully cleared 10 MW bid leaves both generators strictly inside their limits
    net, part = four_bus()
    blocks = build_susceptance(net, part)
    book = export_book(s_max=10.0)
    sol = solve_gcts(net, part, book, blocks=blocks)
    assert sol.s[0] == pytest.approx(10.0)
    report = settle(sol, blocks)
    assert report.areas[1].mu[0] == pytest.approx(10.0, abs=1e-6)
    assert report.areas[2].mu[0] == pytest.approx(-20.0, abs=1e-6)
    wide = export_book()  # the real-time cost does not depend on the bid cap
    for a in part.areas:
        fd = mu_finite_difference(net, part, blocks, wide, sol.s, 0, a, h=0.01)
        assert fd == pytest.approx(report.areas[a].mu[0], abs=1e-4)


def test_mu_zero_for_free_power():
    net, part = four_bus(c_cheap=0.0, c_dear=0.0)
    blocks = build_susceptance(net, part)
    sol = solve_gcts(net, part, export_book(dpi=0.0), blocks=blocks)
    report = settle(sol, blocks)
    for st in report.areas.values():
        np.testing.assert_allclose(st.mu, 0.0, atol=1e-9)


def test_supplier_surplus_two_bus_example():
    from gcts.netmodel import AreaPartition, Branch, Bus, CostCurve, Generator, PowerNetwork

    # marginal cost 6 + 0.08 g is 10 at g = 50, and c(50) = 400
    buses = (Bus(1, 1, 50.0, True), Bus(2, 2, 0.0, True))
    gens = (Generator(1, 0.0, 100.0, CostCurve(0, 6.0, 0.04)), Generator(2, 0.0, 100.0, CostCurve(0, 1.0, 0)))
    net = PowerNetwork(buses, (Branch(1, 2, 0.1, 100.0, True),), gens)
    part = AreaPartition.from_network(net)
    rt = solve_realtime(net, part, np.zeros(2), 1)
    rep = local_surplus(rt, utility=1000.0)
    assert rt.g[0] == pytest.approx(50.0)
    assert rep.supplier == pytest.approx(100.0, abs=1e-6)
    assert rep.consumer == pytest.approx(1000.0 - 500.0, abs=1e-6)
    assert rep.transmission == pytest.approx(0.0)
