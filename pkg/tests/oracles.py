"""Independent reference computations used by the tests."""
import cvxpy as cp
import numpy as np

from gcts.market import InfeasibleError, recover_boundary_state, solve_realtime


def ptdf_dispatch(net):
    """DC-OPF in PTDF form over the whole network, solved with cvxpy.

    Shares nothing with the package except the network data: the PTDF is
    built from a dense incidence matrix with the lowest bus as slack.
    Returns (cost, generation).
    """
    n = net.n_bus
    A = np.zeros((len(net.branches), n))
    for k, br in enumerate(net.branches):
        A[k, net.bus_index[br.from_bus]] = 1.0
        A[k, net.bus_index[br.to_bus]] = -1.0
    b = np.array([1.0 / br.reactance_pu for br in net.branches])
    B = A.T @ (b[:, None] * A)
    X = np.zeros((n, n))
    X[1:, 1:] = np.linalg.inv(B[1:, 1:])
    ptdf = (b[:, None] * A) @ X
    G = np.zeros((n, len(net.generators)))
    for k, gen in enumerate(net.generators):
        G[net.bus_index[gen.bus], k] = 1.0
    c1 = np.array([gen.cost.c1 for gen in net.generators])
    c2 = np.array([gen.cost.c2 for gen in net.generators])
    c0 = sum(gen.cost.c0 for gen in net.generators)
    lo = np.array([gen.g_min_mw for gen in net.generators])
    hi = np.array([gen.g_max_mw for gen in net.generators])
    lim = np.array([br.limit_mw for br in net.branches])
    d = np.array([bus.load_mw for bus in net.buses])

    g = cp.Variable(len(net.generators))
    flows = ptdf @ (G @ g - d)
    cons = [cp.sum(g) == d.sum(), g >= lo, g <= hi]
    finite = np.isfinite(lim)
    if finite.any():
        cons.append(cp.abs(flows[np.flatnonzero(finite)]) <= lim[finite])
    prob = cp.Problem(cp.Minimize(c1 @ g + cp.sum(cp.multiply(c2, cp.square(g))) + c0), cons)
    prob.solve(solver=cp.CLARABEL, tol_gap_abs=1e-10, tol_gap_rel=1e-10, tol_feas=1e-10)
    if prob.status != cp.OPTIMAL:
        raise RuntimeError(f"oracle status {prob.status}")
    return float(prob.value), np.asarray(g.value)


def realtime_cost(net, part, blocks, book, s, area):
    theta = recover_boundary_state(blocks, book, s)
    return solve_realtime(net, part, theta, area, blocks=blocks, relax=False).internal_cost


def mu_finite_difference(net, part, blocks, book, s, k, area, h=1e-3, kink_tol=1e-4):
    """Central difference of an area's real-time cost in bid ``k``.

    Returns None when the point is not interior: a perturbation is
    infeasible or the two one-sided slopes disagree (active-set change).
    """
    if not (h < s[k] < book.s_max[k] - h):
        return None
    up, down = s.copy(), s.copy()
    up[k] += h
    down[k] -= h
    try:
        c0 = realtime_cost(net, part, blocks, book, s, area)
        cu = realtime_cost(net, part, blocks, book, up, area)
        cd = realtime_cost(net, part, blocks, book, down, area)
    except InfeasibleError:
        return None
    fwd, bwd = (cu - c0) / h, (c0 - cd) / h
    if abs(fwd - bwd) > kink_tol * max(1.0, abs(fwd)):
        return None
    return (cu - cd) / (2 * h)
