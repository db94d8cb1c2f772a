import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from gcts.netmodel import (
    AreaPartition,
    Branch,
    Bus,
    CostCurve,
    Generator,
    NetworkStructureError,
    PowerNetwork,
    SingularMatrixError,
    branch_incidence,
    build_susceptance,
    dc_power_flow,
    kron_reduce,
    merge_parallel,
    tie_shift_factors,
)
from gcts.synthetic import SyntheticSpec, random_network


def dense_laplacian(net):
    """Independent nodal matrix built from the branch list."""
    A = np.zeros((len(net.branches), net.n_bus))
    for k, br in enumerate(net.branches):
        A[k, net.bus_index[br.from_bus]] = 1.0
        A[k, net.bus_index[br.to_bus]] = -1.0
    b = np.array([1.0 / br.reactance_pu for br in net.branches])
    return A.T @ np.diag(b) @ A, A, b


def full_tie_flows(net, part, injection_pu, ref_bus):
    """Tie flows (pu) from a full-network solve with ``ref_bus`` at angle 0."""
    Y, A, b = dense_laplacian(net)
    r = net.bus_index[ref_bus]
    keep = np.arange(net.n_bus) != r
    theta = np.zeros(net.n_bus)
    theta[keep] = np.linalg.solve(Y[np.ix_(keep, keep)], injection_pu[keep])
    ties = [net.branches.index(br) for br in part.tie_lines]
    return (b[:, None] * A @ theta[:, None]).ravel()[ties]


def reduced_tie_flows(blocks, injection_pu):
    """Tie flows (pu) from the boundary equivalent fed with Kron-equivalent injections."""
    net, part = blocks.net, blocks.part
    eq = []
    for a in part.areas:
        kron = blocks.equivalents[a]
        p_b = injection_pu[[net.bus_index[x] for x in kron.boundary]]
        p_i = injection_pu[[net.bus_index[x] for x in kron.interior]]
        eq.append(kron.equivalent_injection(p_i, p_b))
    theta_bar = blocks.solve_boundary(np.concatenate(eq))
    Ht = branch_incidence(net, part.tie_lines)[:, blocks.idx(part.boundary_order)]
    return Ht @ theta_bar


def two_bus(limit=np.inf):
    buses = (Bus(1, 1, 0.0), Bus(2, 2, 50.0))
    branches = (Branch(1, 2, 0.1, limit, is_tie_line=True),)
    gens = (Generator(1, 0.0, 100.0, CostCurve(0, 10.0, 0)), Generator(2, 0.0, 100.0, CostCurve(0, 20.0, 0)))
    return PowerNetwork(buses, branches, gens)


def test_susceptance_matches_dense_oracle(rng):
    for _ in range(10):
        net, part = random_network(rng, SyntheticSpec(n_areas=3, n_ties=4))
        blocks = build_susceptance(net, part)
        Y, _, _ = dense_laplacian(net)
        np.testing.assert_allclose(blocks.Y, Y, atol=1e-12)
        np.testing.assert_allclose(blocks.Y.sum(axis=1), 0.0, atol=1e-10)


def test_kron_exact_on_random_networks(rng):
    worst = 0.0
    for _ in range(100):
        spec = SyntheticSpec(n_areas=int(rng.integers(2, 4)), n_ties=int(rng.integers(1, 5)), min_buses=3, max_buses=6)
        net, part = random_network(rng, spec)
        if net.n_bus > 20:
            continue
        blocks = build_susceptance(net, part)
        p = rng.normal(size=net.n_bus)
        p -= p.mean()
        exact = full_tie_flows(net, part, p, part.reference_boundary_bus)
        worst = max(worst, float(np.max(np.abs(reduced_tie_flows(blocks, p) - exact))))
    assert worst <= 1e-9


def test_kron_equivalent_is_symmetric_laplacian(rng):
    net, part = random_network(rng, SyntheticSpec(n_areas=2, n_ties=3))
    blocks = build_susceptance(net, part)
    for a in part.areas:
        kron = kron_reduce(blocks, a)
        np.testing.assert_allclose(kron.y_eq, kron.y_eq.T, atol=1e-12)
        # transfer of a uniform interior injection carries the full amount
        if kron.interior:
            np.testing.assert_allclose(kron.transfer.sum(axis=0), 1.0, atol=1e-10)


def test_shift_factors_match_finite_differences(rng):
    net, part = random_network(rng, SyntheticSpec(n_areas=3, n_ties=4))
    blocks = build_susceptance(net, part)
    S = tie_shift_factors(blocks)
    Ht = branch_incidence(net, part.tie_lines)[:, blocks.idx(part.boundary_order)]
    base = rng.normal(size=len(part.boundary_order))
    f0 = Ht @ blocks.solve_boundary(base)
    h = 1e-6
    for j in range(len(part.boundary_order)):
        e = np.zeros_like(base)
        e[j] = h
        fd = (Ht @ blocks.solve_boundary(base + e) - f0) / h
        np.testing.assert_allclose(S[:, j], fd, atol=1e-6)
    assert np.all(S[:, blocks.boundary_reference_index()] == 0)


def test_dc_power_flow_two_bus():
    net = two_bus()
    theta = dc_power_flow(net, np.array([50.0, -50.0]))
    flow = net.base_mva * branch_incidence(net) @ theta
    assert flow[0] == pytest.approx(50.0)


def test_partition_bookkeeping(rng):
    net, part = random_network(rng, SyntheticSpec(n_areas=3, n_ties=3))
    assert len(part.tie_lines) == sum(br.is_tie_line for br in net.branches)
    for a in part.areas:
        assert set(part.area_buses(a)) == {b.id for b in net.buses if b.area == a}
    assert part.reference_boundary_bus == part.boundary_buses[part.areas[0]][0]


def test_merge_parallel_adds_susceptance_and_limits():
    merged = merge_parallel([Branch(1, 2, 0.2, 30.0), Branch(2, 1, 0.2, 20.0)])
    assert len(merged) == 1
    assert merged[0].susceptance_pu == pytest.approx(10.0)
    assert merged[0].limit_mw == pytest.approx(50.0)


def test_disconnected_network_rejected():
    buses = (Bus(1, 1), Bus(2, 1), Bus(3, 2))
    net = PowerNetwork(buses, (Branch(1, 2, 0.1),), (Generator(1, 0.0, 10.0),))
    with pytest.raises(NetworkStructureError):
        build_susceptance(net, AreaPartition.from_network(net))


def test_invalid_components_rejected():
    with pytest.raises(ValueError):
        Branch(1, 2, 0.0)
    with pytest.raises(ValueError):
        Branch(1, 1, 0.1)
    with pytest.raises(ValueError):
        Generator(1, 10.0, 5.0)
    with pytest.raises(ValueError):
        CostCurve(0, 1, -1)


def test_singular_error_carries_condition():
    err = SingularMatrixError("x", 1e18)
    assert err.condition == 1e18


@settings(max_examples=30, deadline=None)
@given(st.floats(0.01, 1.0), st.floats(0.01, 1.0), st.floats(-2.0, 2.0))
def test_series_equivalent_of_chain(x1, x2, p):
    # 1 -(x1)- 2 -(x2)- 3 with 2 interior: equivalent reactance is x1 + x2
    buses = (Bus(1, 1), Bus(2, 1), Bus(3, 1), Bus(4, 2))
    branches = (Branch(1, 2, x1), Branch(2, 3, x2), Branch(1, 4, 0.1, is_tie_line=True),
                Branch(3, 4, 0.1, is_tie_line=True))
    net = PowerNetwork(buses, branches, (Generator(4, 0.0, 10.0),))
    part = AreaPartition.from_network(net)
    kron = kron_reduce(build_susceptance(net, part), 1)
    b = 1.0 / (x1 + x2)
    np.testing.assert_allclose(kron.y_eq, [[b + 10, -b], [-b, b + 10]], rtol=1e-10)
    # injection at the interior bus splits by the inverse reactance ratio
    np.testing.assert_allclose(kron.equivalent_injection([p]), [p * x2 / (x1 + x2), p * x1 / (x1 + x2)], atol=1e-12)
