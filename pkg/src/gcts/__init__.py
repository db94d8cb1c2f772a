"""Coordinated interchange scheduling for multi-area DC power markets."""
from .bids import BidBook, InterfaceBid
from .netmodel import AreaPartition, Branch, Bus, CostCurve, Generator, PowerNetwork

__version__ = "0.1.0"

__all__ = ["AreaPartition", "BidBook", "Branch", "Bus", "CostCurve", "Generator", "InterfaceBid", "PowerNetwork"]
