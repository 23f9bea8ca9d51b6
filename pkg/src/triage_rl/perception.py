"""Binary perception vectors and per-agent type blindness.

Layout of the 76-bit state vector (four bits per cell, one-hot over
road/grass/stone/car):

    bits 0..3      current cell
    bits 4..75     rows row+1 .. row+6, three cells per row, left to right

Rows past the end of the episode are all-zero blocks.  With the absolute view
the three cells are lanes 0, 1, 2; with the egocentric view they are the lanes
left of, at and right of the agent, and off-grid cells are all-zero blocks.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable

import numpy as np

from . import _kernels
from .gridworld import CellType, Grid, Position

STATE_DIM = _kernels.STATE_DIM
OPTION_DIM = STATE_DIM + 2
VIEWS = ("absolute", "egocentric")


@dataclass(frozen=True)
class PerceptionMask:
    """Cell types an agent perceives as road."""

    blind_types: frozenset = frozenset()

    def __init__(self, blind_types: Iterable = ()):
        types = frozenset(CellType(t) for t in blind_types) - {CellType.ROAD}
        object.__setattr__(self, "blind_types", types)

    def union(self, other: "PerceptionMask") -> "PerceptionMask":
        return PerceptionMask(self.blind_types | other.blind_types)

    def as_array(self) -> np.ndarray:
        out = np.zeros(4, dtype=np.bool_)
        for t in self.blind_types:
            out[int(t)] = True
        return out

    def apply(self, grid: Grid) -> Grid:
        """Rewrite blind cells to road."""
        cells = np.where(self.as_array()[grid.cells], np.int8(CellType.ROAD), grid.cells)
        return Grid(cells=cells, traffic=grid.traffic)

    def to_list(self) -> list[str]:
        return sorted(t.name.lower() for t in self.blind_types)

    @classmethod
    def from_names(cls, names: Iterable[str]) -> "PerceptionMask":
        return cls(CellType[n.upper()] for n in names)


PERFECT = PerceptionMask()


def _check_view(view: str) -> bool:
    if view not in VIEWS:
        raise ValueError(f"unknown view {view!r}; expected one of {VIEWS}")
    return view == "egocentric"


def featurize(grid: Grid, pos: Position, mask: PerceptionMask = PERFECT,
              view: str = "absolute") -> np.ndarray:
    out = np.zeros(STATE_DIM)
    _kernels.featurize(grid.cells, pos.row, pos.lane, mask.as_array(), _check_view(view), out)
    return out


def featurize_path(grid: Grid, lanes, mask: PerceptionMask = PERFECT,
                   view: str = "absolute") -> np.ndarray:
    """Features of (t, lanes[t]) for every t, stacked as rows."""
    ego = _check_view(view)
    blind = mask.as_array()
    out = np.zeros((len(lanes), STATE_DIM))
    for t, lane in enumerate(lanes):
        _kernels.featurize(grid.cells, t, int(lane), blind, ego, out[t])
    return out


def option_featurize(s: np.ndarray, d: int) -> np.ndarray:
    out = np.zeros(s.shape[0] + 2)
    out[:-2] = s
    out[-1 if d else -2] = 1.0
    return out
