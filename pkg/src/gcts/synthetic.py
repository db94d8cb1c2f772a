"""Seeded random multi-area test systems.

Used by the property tests and acceptance checks.  Every generated system
is connected, has convex quadratic costs, and is accepted only if each
area can serve its own load in isolation and the joint dispatch is
feasible; rejected draws are replaced deterministically.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .bids import BidBook, InterfaceBid, symmetric_bids
from .market.program import InfeasibleError
from .netmodel import AreaPartition, Branch, Bus, CostCurve, Generator, PowerNetwork


@dataclass(frozen=True)
class SyntheticSpec:
    n_areas: int = 2
    n_ties: int = 1
    min_buses: int = 4
    max_buses: int = 12
    line_limit_scale: float = 1.0
    tie_limit: tuple[float, float] = (10.0, 60.0)
    gen_per_bus: float = 0.5


def _area(rng: np.random.Generator, area: int, first_id: int, n: int, spec: SyntheticSpec):
    ids = list(range(first_id, first_id + n))
    loads = np.where(rng.random(n) < 0.7, rng.uniform(5.0, 40.0, n), 0.0)
    loads[0] = max(loads[0], 5.0)
    buses = [Bus(b, area, float(d)) for b, d in zip(ids, loads)]

    # random spanning tree plus a few chords
    edges = set()
    for k in range(1, n):
        edges.add((ids[int(rng.integers(0, k))], ids[k]))
    for _ in range(int(rng.integers(0, n // 2 + 1))):
        u, v = sorted(rng.choice(ids, 2, replace=False).tolist())
        if (u, v) not in edges and (v, u) not in edges:
            edges.add((u, v))
    total = float(loads.sum())
    branches = []
    for u, v in sorted(edges):
        lim = spec.line_limit_scale * rng.uniform(0.4, 1.2) * total
        branches.append(Branch(int(u), int(v), float(rng.uniform(0.05, 0.3)), float(lim)))

    n_gen = max(2, int(round(spec.gen_per_bus * n)))
    at = rng.choice(ids, size=n_gen, replace=n_gen > n)
    caps = rng.uniform(0.5, 1.5, n_gen)
    caps *= 1.8 * total / caps.sum()
    gens = [Generator(int(b), 0.0, float(c),
                      CostCurve(0.0, float(rng.uniform(10.0, 40.0)), float(rng.uniform(0.005, 0.05))))
            for b, c in zip(at, caps)]
    return ids, buses, branches, gens


def random_network(rng: np.random.Generator, spec: SyntheticSpec = SyntheticSpec()) -> tuple[PowerNetwork, AreaPartition]:
    """One unscreened draw (may be infeasible)."""
    buses, branches, gens, area_ids = [], [], [], []
    first = 1
    for a in range(1, spec.n_areas + 1):
        n = int(rng.integers(spec.min_buses, spec.max_buses + 1))
        ids, b, br, g = _area(rng, a, first, n, spec)
        buses += b
        branches += br
        gens += g
        area_ids.append(ids)
        first += n
    # ties: a path through the areas first so the interconnection is connected
    pairs = [(a, a + 1) for a in range(spec.n_areas - 1)]
    while len(pairs) < spec.n_ties:
        a, b = sorted(rng.choice(spec.n_areas, 2, replace=False).tolist())
        pairs.append((a, b))
    used = set()
    for a, b in pairs:
        for _ in range(20):
            u, v = int(rng.choice(area_ids[a])), int(rng.choice(area_ids[b]))
            if (u, v) not in used:
                break
        used.add((u, v))
        branches.append(Branch(u, v, float(rng.uniform(0.05, 0.3)),
                               float(rng.uniform(*spec.tie_limit)), is_tie_line=True))
    boundary = {x for br in branches if br.is_tie_line for x in (br.from_bus, br.to_bus)}
    buses = [Bus(b.id, b.area, b.load_mw, b.id in boundary) for b in buses]
    net = PowerNetwork(tuple(buses), tuple(branches), tuple(gens))
    return net, AreaPartition.from_network(net)


def _screen(net: PowerNetwork, part: AreaPartition) -> bool:
    """Joint dispatch and autarky (empty bid book) must both be feasible."""
    from .market.clearing import solve_gcts, solve_jed

    try:
        solve_jed(net, part)
        solve_gcts(net, part, BidBook())
    except InfeasibleError:
        return False
    return True


def feasible_network(seed: int, spec: SyntheticSpec = SyntheticSpec(), max_draws: int = 50):
    """First screened draw from a stream seeded by ``seed``."""
    rng = np.random.Generator(np.random.Philox(seed))
    for _ in range(max_draws):
        net, part = random_network(rng, spec)
        if _screen(net, part):
            return net, part
    raise RuntimeError(f"no feasible draw for seed {seed} after {max_draws} attempts")


def random_bids(rng: np.random.Generator, part: AreaPartition, dpi: tuple[float, float] = (0.0, 3.0),
                s_max: tuple[float, float] = (10.0, 80.0)) -> BidBook:
    """Symmetric bids over every cross-area boundary pair, random prices and caps."""
    base = symmetric_bids(part, 0.0, 0.0)
    return BidBook(tuple(InterfaceBid(b.id, b.sell_to, b.buy_from, float(rng.uniform(*dpi)),
                                      float(rng.uniform(*s_max))) for b in base))
