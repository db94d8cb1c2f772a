"""DC network model of a multi-area interconnection.

Angles are radians, susceptances per unit (1/x), and every public quantity
at an API boundary is in MW.  The nodal matrix is partitioned per area into
interior and boundary blocks; a boundary bus is one that terminates a
tie-line.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from functools import cached_property
from typing import Iterable, Mapping, Sequence

import numpy as np
import scipy.linalg as sla

PIVOT_TOL = 1e-10


class NetworkStructureError(ValueError):
    """Raised for disconnected networks or inconsistent partitions."""


class SingularMatrixError(ArithmeticError):
    """Raised when a block that must be factorised is (numerically) singular."""

    def __init__(self, message: str, condition: float):
        super().__init__(f"{message} (condition estimate {condition:.3e})")
        self.condition = condition


@dataclass(frozen=True)
class CostCurve:
    """Convex generator cost c0 + c1*g + c2*g**2 in $/h with g in MW."""

    c0: float = 0.0
    c1: float = 0.0
    c2: float = 0.0

    def __post_init__(self):
        if self.c2 < 0:
            raise ValueError(f"cost curve must be convex, got c2={self.c2}")

    @property
    def kind(self) -> str:
        return "quadratic" if self.c2 > 0 else "linear"

    def __call__(self, g):
        g = np.asarray(g, dtype=float)
        return self.c0 + self.c1 * g + self.c2 * g * g

    def marginal(self, g):
        return self.c1 + 2.0 * self.c2 * np.asarray(g, dtype=float)

    def scaled(self, w: float) -> "CostCurve":
        """Scale the energy terms (c1, c2) by ``w``; c0 is left alone."""
        return CostCurve(self.c0, self.c1 * w, self.c2 * w)


@dataclass(frozen=True)
class Bus:
    id: int
    area: int = 1
    load_mw: float = 0.0
    is_boundary: bool = False


@dataclass(frozen=True)
class Branch:
    from_bus: int
    to_bus: int
    reactance_pu: float
    limit_mw: float = np.inf
    is_tie_line: bool = False

    def __post_init__(self):
        if self.from_bus == self.to_bus:
            raise ValueError(f"branch {self.from_bus}-{self.to_bus} is a self loop")
        if not self.reactance_pu > 0:
            raise ValueError(f"branch {self.from_bus}-{self.to_bus}: reactance must be > 0")
        if not self.limit_mw > 0:
            raise ValueError(f"branch {self.from_bus}-{self.to_bus}: limit must be > 0")

    @property
    def susceptance_pu(self) -> float:
        return 1.0 / self.reactance_pu

    @property
    def key(self) -> tuple[int, int]:
        return (min(self.from_bus, self.to_bus), max(self.from_bus, self.to_bus))


@dataclass(frozen=True)
class Generator:
    bus: int
    g_min_mw: float
    g_max_mw: float
    cost: CostCurve = field(default_factory=CostCurve)

    def __post_init__(self):
        if self.g_min_mw > self.g_max_mw:
            raise ValueError(f"generator at bus {self.bus}: g_min > g_max")


def merge_parallel(branches: Iterable[Branch]) -> tuple[Branch, ...]:
    """Merge branches sharing a bus pair: susceptances add, limits add.

    The first branch's orientation is kept.  Output order follows the first
    appearance of each pair.
    """
    merged: dict[tuple[int, int], list] = {}
    for br in branches:
        k = br.key
        if k in merged:
            first, b, lim, tie = merged[k]
            merged[k] = [first, b + br.susceptance_pu, lim + br.limit_mw, tie or br.is_tie_line]
        else:
            merged[k] = [br, br.susceptance_pu, br.limit_mw, br.is_tie_line]
    out = []
    for first, b, lim, tie in merged.values():
        out.append(Branch(first.from_bus, first.to_bus, 1.0 / b, lim, tie))
    return tuple(out)


@dataclass(frozen=True)
class PowerNetwork:
    """Buses, branches and generators of one area or a whole interconnection.

    Buses are stored sorted by id; that order defines every bus-indexed
    vector in the package.  Parallel branches are merged on construction.
    """

    buses: tuple[Bus, ...]
    branches: tuple[Branch, ...]
    generators: tuple[Generator, ...]
    base_mva: float = 100.0

    def __post_init__(self):
        buses = tuple(sorted(self.buses, key=lambda b: b.id))
        ids = [b.id for b in buses]
        if len(set(ids)) != len(ids):
            raise NetworkStructureError("duplicate bus ids")
        object.__setattr__(self, "buses", buses)
        object.__setattr__(self, "branches", merge_parallel(self.branches))
        object.__setattr__(self, "generators", tuple(self.generators))
        known = set(ids)
        for br in self.branches:
            if br.from_bus not in known or br.to_bus not in known:
                raise NetworkStructureError(f"branch {br.from_bus}-{br.to_bus} references an unknown bus")
        for gen in self.generators:
            if gen.bus not in known:
                raise NetworkStructureError(f"generator references unknown bus {gen.bus}")
        if not self.generators:
            raise NetworkStructureError("network has no generators")

    @cached_property
    def bus_ids(self) -> np.ndarray:
        return np.array([b.id for b in self.buses], dtype=int)

    @cached_property
    def bus_index(self) -> dict[int, int]:
        return {b.id: i for i, b in enumerate(self.buses)}

    @cached_property
    def bus_area(self) -> dict[int, int]:
        return {b.id: b.area for b in self.buses}

    @property
    def n_bus(self) -> int:
        return len(self.buses)

    @property
    def loads(self) -> np.ndarray:
        return np.array([b.load_mw for b in self.buses], dtype=float)

    @cached_property
    def gen_bus_matrix(self) -> np.ndarray:
        """Dense bus x generator incidence (1 where generator k sits at bus i)."""
        G = np.zeros((self.n_bus, len(self.generators)))
        for k, gen in enumerate(self.generators):
            G[self.bus_index[gen.bus], k] = 1.0
        return G

    def with_loads(self, loads_mw: Sequence[float]) -> "PowerNetwork":
        loads_mw = np.asarray(loads_mw, dtype=float)
        if loads_mw.shape != (self.n_bus,):
            raise ValueError("load vector length does not match bus count")
        buses = tuple(Bus(b.id, b.area, float(d), b.is_boundary) for b, d in zip(self.buses, loads_mw))
        return PowerNetwork(buses, self.branches, self.generators, self.base_mva)

    def with_generators(self, generators: Sequence[Generator]) -> "PowerNetwork":
        return PowerNetwork(self.buses, self.branches, tuple(generators), self.base_mva)

    def components(self) -> list[list[int]]:
        """Connected components (bus-id lists) of the undirected branch graph."""
        parent = {b: b for b in self.bus_index}

        def find(x):
            while parent[x] != x:
                parent[x] = parent[parent[x]]
                x = parent[x]
            return x

        for br in self.branches:
            ra, rb = find(br.from_bus), find(br.to_bus)
            if ra != rb:
                parent[max(ra, rb)] = min(ra, rb)
        groups: dict[int, list[int]] = {}
        for b in self.bus_index:
            groups.setdefault(find(b), []).append(b)
        return sorted((sorted(g) for g in groups.values()), key=lambda g: g[0])

    def check_connected(self) -> None:
        comps = self.components()
        if len(comps) > 1:
            desc = "; ".join(f"{{{', '.join(map(str, c[:6]))}{', ...' if len(c) > 6 else ''}}}" for c in comps)
            raise NetworkStructureError(f"network is disconnected into {len(comps)} components: {desc}")


@dataclass(frozen=True)
class AreaPartition:
    """Bus-to-area assignment with boundary-bus and tie-line bookkeeping."""

    areas: tuple[int, ...]
    boundary_buses: Mapping[int, tuple[int, ...]]
    interior_buses: Mapping[int, tuple[int, ...]]
    tie_lines: tuple[Branch, ...]

    @classmethod
    def from_network(cls, net: PowerNetwork) -> "AreaPartition":
        area_of = net.bus_area
        areas = tuple(sorted(set(area_of.values())))
        boundary = {a: set() for a in areas}
        ties = []
        for br in net.branches:
            a, b = area_of[br.from_bus], area_of[br.to_bus]
            if a != b:
                ties.append(br)
                boundary[a].add(br.from_bus)
                boundary[b].add(br.to_bus)
        interior = {a: [] for a in areas}
        for bus in net.buses:
            if bus.id not in boundary[bus.area]:
                interior[bus.area].append(bus.id)
        ties.sort(key=lambda br: br.key)
        return cls(
            areas=areas,
            boundary_buses={a: tuple(sorted(boundary[a])) for a in areas},
            interior_buses={a: tuple(sorted(interior[a])) for a in areas},
            tie_lines=tuple(ties),
        )

    @property
    def boundary_order(self) -> tuple[int, ...]:
        """All boundary buses, area by area, each area sorted by id."""
        return tuple(b for a in self.areas for b in self.boundary_buses[a])

    @property
    def reference_boundary_bus(self) -> int:
        """Lowest boundary bus id of the first area."""
        return self.boundary_buses[self.areas[0]][0]

    def area_buses(self, area: int) -> tuple[int, ...]:
        return tuple(sorted(self.interior_buses[area] + self.boundary_buses[area]))

    def area_of(self, bus: int) -> int:
        for a in self.areas:
            if bus in self.boundary_buses[a] or bus in self.interior_buses[a]:
                return a
        raise KeyError(bus)

    def is_boundary(self, bus: int) -> bool:
        return any(bus in self.boundary_buses[a] for a in self.areas)


def slack_bus(net: PowerNetwork, part: AreaPartition) -> int:
    """Global angle reference: lowest bus id in the first area."""
    return min(part.area_buses(part.areas[0]))


def branch_incidence(net: PowerNetwork, branches: Sequence[Branch] | None = None) -> np.ndarray:
    """Per-unit flow matrix H with flow_pu = H @ theta (rows follow ``branches``)."""
    branches = net.branches if branches is None else branches
    H = np.zeros((len(branches), net.n_bus))
    for k, br in enumerate(branches):
        b = br.susceptance_pu
        H[k, net.bus_index[br.from_bus]] = b
        H[k, net.bus_index[br.to_bus]] = -b
    return H


def _factor(A: np.ndarray, what: str):
    if A.size == 0:
        return None
    lu, piv = sla.lu_factor(A, check_finite=True)
    if np.min(np.abs(np.diag(lu))) < PIVOT_TOL:
        raise SingularMatrixError(f"{what} is singular", float(np.linalg.cond(A)))
    return lu, piv


@dataclass(frozen=True)
class KronEquivalent:
    """Boundary equivalent of one area after eliminating its interior buses.

    ``y_eq`` is the Schur complement on the area's boundary buses (it keeps
    the tie-line susceptances on its diagonal).  ``transfer`` maps interior
    net injections to equivalent boundary injections.
    """

    area: int
    boundary: tuple[int, ...]
    interior: tuple[int, ...]
    y_eq: np.ndarray
    transfer: np.ndarray

    def equivalent_injection(self, interior_injection: np.ndarray, boundary_injection=None) -> np.ndarray:
        out = self.transfer @ np.asarray(interior_injection, dtype=float)
        if boundary_injection is not None:
            out = out + np.asarray(boundary_injection, dtype=float)
        return out


@dataclass(frozen=True)
class SusceptanceBlocks:
    """Per-unit nodal susceptance matrix of a partitioned network.

    ``Y`` is indexed by ``net.buses`` order; :meth:`block` extracts the
    interior/boundary blocks of any area pair by bus id.
    """

    net: PowerNetwork
    part: AreaPartition
    Y: np.ndarray
    H: np.ndarray

    def idx(self, bus_ids: Sequence[int]) -> np.ndarray:
        return np.array([self.net.bus_index[b] for b in bus_ids], dtype=int)

    def sub(self, rows: Sequence[int], cols: Sequence[int]) -> np.ndarray:
        return self.Y[np.ix_(self.idx(rows), self.idx(cols))]

    def block(self, area_i: int, kind_i: str, area_j: int, kind_j: str) -> np.ndarray:
        """Block Y_{xy} with kind 'interior' or 'boundary' for each side."""
        pick = {"interior": self.part.interior_buses, "boundary": self.part.boundary_buses}
        return self.sub(pick[kind_i][area_i], pick[kind_j][area_j])

    @cached_property
    def equivalents(self) -> dict[int, KronEquivalent]:
        return {a: kron_reduce(self, a) for a in self.part.areas}

    @cached_property
    def boundary_matrix(self) -> np.ndarray:
        """Assembled boundary-equivalent matrix: Kron blocks on the diagonal,
        tie-line blocks off the diagonal.  Rows follow ``part.boundary_order``."""
        order = self.part.boundary_order
        Ybar = self.sub(order, order).copy()
        pos = 0
        for a in self.part.areas:
            n = len(self.part.boundary_buses[a])
            Ybar[pos:pos + n, pos:pos + n] = self.equivalents[a].y_eq
            pos += n
        return Ybar

    def boundary_reference_index(self, reference: int | None = None) -> int:
        ref = self.part.reference_boundary_bus if reference is None else reference
        return self.part.boundary_order.index(ref)

    def solve_boundary(self, injection: np.ndarray, reference: int | None = None) -> np.ndarray:
        """Boundary angles from equivalent injections with the reference pinned at 0."""
        r = self.boundary_reference_index(reference)
        keep = np.arange(len(self.part.boundary_order)) != r
        Yr = self.boundary_matrix[np.ix_(keep, keep)]
        fac = _factor(Yr, "boundary equivalent matrix")
        theta = np.zeros(len(keep))
        if fac is not None:
            theta[keep] = sla.lu_solve(fac, np.asarray(injection, dtype=float)[keep])
        return theta


def build_susceptance(net: PowerNetwork, part: AreaPartition) -> SusceptanceBlocks:
    """Assemble the per-unit DC nodal matrix and branch flow matrix."""
    net.check_connected()
    n = net.n_bus
    Y = np.zeros((n, n))
    for br in net.branches:
        i, j = net.bus_index[br.from_bus], net.bus_index[br.to_bus]
        b = br.susceptance_pu
        Y[i, j] -= b
        Y[j, i] -= b
        Y[i, i] += b
        Y[j, j] += b
    return SusceptanceBlocks(net, part, Y, branch_incidence(net))


def kron_reduce(blocks: SusceptanceBlocks, area: int) -> KronEquivalent:
    """Eliminate the interior buses of ``area`` (Schur complement)."""
    part = blocks.part
    bnd, inner = part.boundary_buses[area], part.interior_buses[area]
    Ybb = blocks.sub(bnd, bnd)
    if not inner:
        return KronEquivalent(area, bnd, inner, Ybb, np.zeros((len(bnd), 0)))
    Yii = blocks.sub(inner, inner)
    Ybi = blocks.sub(bnd, inner)
    fac = _factor(Yii, f"interior block of area {area}")
    X = sla.lu_solve(fac, Ybi.T)  # Yii^-1 Yib
    y_eq = Ybb - Ybi @ X
    y_eq = 0.5 * (y_eq + y_eq.T)
    return KronEquivalent(area, bnd, inner, y_eq, -X.T)


def tie_shift_factors(blocks: SusceptanceBlocks, reference: int | None = None) -> np.ndarray:
    """Shift factors of tie-line flows w.r.t. equivalent boundary injections.

    Rows follow ``part.tie_lines``, columns ``part.boundary_order``; the
    reference column is zero (injections are balanced at the reference).
    """
    part = blocks.part
    order = part.boundary_order
    r = blocks.boundary_reference_index(reference)
    keep = np.arange(len(order)) != r
    Yr = blocks.boundary_matrix[np.ix_(keep, keep)]
    Hbar = branch_incidence(blocks.net, part.tie_lines)[:, blocks.idx(order)]
    S = np.zeros((len(part.tie_lines), len(order)))
    fac = _factor(Yr, "boundary equivalent matrix")
    if fac is not None:
        S[:, keep] = sla.lu_solve(fac, Hbar[:, keep].T, trans=1).T
    return S


def dc_flows(blocks: SusceptanceBlocks, theta: np.ndarray, branches: Sequence[Branch] | None = None) -> np.ndarray:
    """Branch flows in MW for bus angles ``theta`` (radians, ``net.buses`` order)."""
    H = blocks.H if branches is None else branch_incidence(blocks.net, branches)
    return blocks.net.base_mva * (H @ np.asarray(theta, dtype=float))


def dc_power_flow(net: PowerNetwork, injection_mw: np.ndarray, slack: int | None = None) -> np.ndarray:
    """Solve B theta = P for a balanced injection vector; slack angle is 0.

    Any imbalance lands on the slack bus.
    """
    part = AreaPartition.from_network(net)
    blocks = build_susceptance(net, part)
    slack = slack_bus(net, part) if slack is None else slack
    s = net.bus_index[slack]
    keep = np.arange(net.n_bus) != s
    theta = np.zeros(net.n_bus)
    fac = _factor(blocks.Y[np.ix_(keep, keep)], "reduced nodal matrix")
    theta[keep] = sla.lu_solve(fac, np.asarray(injection_mw, dtype=float)[keep] / net.base_mva)
    return theta
