"""Interface bids and their boundary incidence matrices.

A bid withdraws power at its ``buy_from`` boundary bus and injects the same
amount at its ``sell_to`` boundary bus.  In the stacked incidence matrix a
bid's column carries +1 on the buy-from row (the area supplies power there)
and -1 on the sell-to row.
"""
from __future__ import annotations

import warnings
from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np

from .netmodel import AreaPartition


class BidValidationError(ValueError):
    pass


@dataclass(frozen=True)
class InterfaceBid:
    id: int
    sell_to: tuple[int, int]   # (area, bus)
    buy_from: tuple[int, int]  # (area, bus)
    dpi: float
    s_max: float

    def __post_init__(self):
        object.__setattr__(self, "sell_to", (int(self.sell_to[0]), int(self.sell_to[1])))
        object.__setattr__(self, "buy_from", (int(self.buy_from[0]), int(self.buy_from[1])))
        if self.sell_to[0] == self.buy_from[0]:
            raise BidValidationError(f"bid {self.id}: both ends lie in area {self.sell_to[0]}")
        if self.s_max < 0:
            raise BidValidationError(f"bid {self.id}: s_max must be >= 0")


@dataclass(frozen=True)
class BidBook:
    bids: tuple[InterfaceBid, ...] = ()

    def __post_init__(self):
        bids = tuple(sorted(self.bids, key=lambda b: b.id))
        ids = [b.id for b in bids]
        if len(set(ids)) != len(ids):
            raise BidValidationError("duplicate bid ids")
        object.__setattr__(self, "bids", bids)
        for b in bids:
            if b.dpi < 0:
                warnings.warn(f"bid {b.id} has a negative price {b.dpi}", stacklevel=3)

    def __len__(self):
        return len(self.bids)

    def __iter__(self):
        return iter(self.bids)

    @property
    def ids(self) -> np.ndarray:
        return np.array([b.id for b in self.bids], dtype=int)

    @property
    def dpi(self) -> np.ndarray:
        return np.array([b.dpi for b in self.bids], dtype=float)

    @property
    def s_max(self) -> np.ndarray:
        return np.array([b.s_max for b in self.bids], dtype=float)

    def with_uniform(self, dpi: float | None = None, s_max: float | None = None) -> "BidBook":
        return BidBook(tuple(
            InterfaceBid(b.id, b.sell_to, b.buy_from,
                         b.dpi if dpi is None else float(dpi),
                         b.s_max if s_max is None else float(s_max))
            for b in self.bids))


def validate_bids(book: BidBook, part: AreaPartition) -> None:
    for b in book:
        for area, bus in (b.sell_to, b.buy_from):
            if area not in part.boundary_buses:
                raise BidValidationError(f"bid {b.id}: unknown area {area}")
            if bus not in part.boundary_buses[area]:
                raise BidValidationError(f"bid {b.id}: bus {bus} is not a boundary bus of area {area}")


def build_incidence(book: BidBook, part: AreaPartition) -> list[np.ndarray]:
    """Per-area incidence matrices, rows in ``part.boundary_buses[area]`` order."""
    validate_bids(book, part)
    mats = []
    for area in part.areas:
        rows = {bus: r for r, bus in enumerate(part.boundary_buses[area])}
        M = np.zeros((len(rows), len(book)))
        for k, b in enumerate(book):
            if b.buy_from[0] == area:
                M[rows[b.buy_from[1]], k] += 1.0
            if b.sell_to[0] == area:
                M[rows[b.sell_to[1]], k] -= 1.0
        mats.append(M)
    return mats


def stacked_incidence(book: BidBook, part: AreaPartition) -> np.ndarray:
    """Stacked M = [M_1; ...; M_n], rows in ``part.boundary_order``."""
    mats = build_incidence(book, part)
    if not mats:
        return np.zeros((0, len(book)))
    return np.vstack(mats)


def bid_rank_check(M: np.ndarray, reference_row: int, tol: float = 1e-9) -> bool:
    """True iff ``M`` has full row rank once the reference row is dropped."""
    M = np.asarray(M, dtype=float)
    reduced = np.delete(M, reference_row, axis=0)
    if reduced.shape[0] == 0:
        return True
    if reduced.shape[1] == 0:
        return False
    return int(np.linalg.matrix_rank(reduced, tol=tol)) == reduced.shape[0]


def symmetric_bids(part: AreaPartition, dpi: float, s_max: float,
                   pairs: Iterable[tuple[tuple[int, int], tuple[int, int]]] | None = None) -> BidBook:
    """One bid per direction for every pair of boundary buses in different areas."""
    if pairs is None:
        pairs = []
        order = [(a, b) for a in part.areas for b in part.boundary_buses[a]]
        for i, u in enumerate(order):
            for v in order[i + 1:]:
                if u[0] != v[0]:
                    pairs.append((u, v))
    bids = []
    for u, v in pairs:
        bids.append(InterfaceBid(len(bids) + 1, sell_to=v, buy_from=u, dpi=dpi, s_max=s_max))
        bids.append(InterfaceBid(len(bids) + 1, sell_to=u, buy_from=v, dpi=dpi, s_max=s_max))
    return BidBook(tuple(bids))


def cleared_status(s: Sequence[float], s_max: Sequence[float], tol: float = 1e-6) -> list[str]:
    out = []
    for x, cap in zip(s, s_max):
        if x <= tol:
            out.append("rejected")
        elif x >= cap - tol:
            out.append("full")
        else:
            out.append("partial")
    return out
