"""Three-lane driving world: episode generation, legality, dynamics, costs."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from enum import IntEnum

import numpy as np

from . import _kernels


class ContractViolation(ValueError):
    """A caller broke a documented precondition."""


class CellType(IntEnum):
    ROAD = 0
    GRASS = 1
    STONE = 2
    CAR = 3


class TrafficLevel(IntEnum):
    NO_CAR = 0
    LIGHT = 1
    HEAVY = 2


class Action(IntEnum):
    LEFT = 0
    MIDDLE = 1
    RIGHT = 2

    @property
    def shift(self) -> int:
        return int(self) - 1


N_LANES = 3
START_LANE = 1

CELL_NAMES = {c: c.name.lower() for c in CellType}
TRAFFIC_NAMES = {t: t.name.lower().replace("_", "-") for t in TrafficLevel}


def _default_costs():
    return np.array([0.0, 2.0, 4.0, 10.0])


def _default_cell_probs():
    # rows: no-car, light, heavy; columns: road, grass, stone, car
    return np.array([
        [0.7, 0.2, 0.1, 0.0],
        [0.6, 0.2, 0.1, 0.1],
        [0.5, 0.2, 0.1, 0.2],
    ])


def _default_traffic_chain():
    return np.array([
        [0.6, 0.4, 0.0],
        [0.2, 0.6, 0.2],
        [0.0, 0.4, 0.6],
    ])


@dataclass
class EnvConfig:
    """Tables driving generation and costs; scenarios may override any field."""

    horizon: int = 20
    cell_costs: np.ndarray = field(default_factory=_default_costs)
    cell_probs: np.ndarray = field(default_factory=_default_cell_probs)
    traffic_transition: np.ndarray = field(default_factory=_default_traffic_chain)
    initial_traffic: TrafficLevel = TrafficLevel.LIGHT

    def __post_init__(self):
        self.cell_costs = np.asarray(self.cell_costs, dtype=float)
        self.cell_probs = np.asarray(self.cell_probs, dtype=float)
        self.traffic_transition = np.asarray(self.traffic_transition, dtype=float)
        if self.horizon < 1:
            raise ContractViolation(f"horizon must be >= 1, got {self.horizon}")
        if np.any(self.cell_costs < 0):
            raise ContractViolation("cell costs must be nonnegative")
        for name, table in (("cell_probs", self.cell_probs), ("traffic_transition", self.traffic_transition)):
            if not np.allclose(table.sum(axis=1), 1.0):
                raise ContractViolation(f"{name} rows must sum to 1")


DEFAULT_ENV = EnvConfig()


def cell_cost(cell: CellType, config: EnvConfig = DEFAULT_ENV) -> float:
    return float(config.cell_costs[int(cell)])


@dataclass(frozen=True)
class Position:
    row: int
    lane: int


@dataclass(frozen=True, eq=False)
class Grid:
    """A materialized episode: ``cells[row, lane]`` and per-row traffic."""

    cells: np.ndarray
    traffic: np.ndarray

    def __post_init__(self):
        cells = np.ascontiguousarray(self.cells, dtype=np.int8)
        traffic = np.ascontiguousarray(self.traffic, dtype=np.int8)
        if cells.ndim != 2 or cells.shape[1] != N_LANES or cells.shape[0] < 2:
            raise ContractViolation(f"bad grid shape {cells.shape}")
        if traffic.shape != (cells.shape[0],):
            raise ContractViolation("traffic must have one level per row")
        cells.setflags(write=False)
        traffic.setflags(write=False)
        object.__setattr__(self, "cells", cells)
        object.__setattr__(self, "traffic", traffic)

    @property
    def row_count(self) -> int:
        return self.cells.shape[0]

    @property
    def horizon(self) -> int:
        return self.cells.shape[0] - 1

    def __eq__(self, other):
        if not isinstance(other, Grid):
            return NotImplemented
        return np.array_equal(self.cells, other.cells) and np.array_equal(self.traffic, other.traffic)

    def __hash__(self):
        return hash((self.cells.tobytes(), self.traffic.tobytes()))

    def to_dict(self) -> dict:
        return {
            "horizon": self.horizon,
            "rows": [[CELL_NAMES[CellType(c)] for c in row] for row in self.cells],
            "traffic": [TRAFFIC_NAMES[TrafficLevel(t)] for t in self.traffic],
        }

    @classmethod
    def from_dict(cls, doc: dict) -> "Grid":
        by_name = {v: k for k, v in CELL_NAMES.items()}
        traffic_by_name = {v: k for k, v in TRAFFIC_NAMES.items()}
        grid = cls(
            cells=np.array([[by_name[c] for c in row] for row in doc["rows"]], dtype=np.int8),
            traffic=np.array([traffic_by_name[t] for t in doc["traffic"]], dtype=np.int8),
        )
        if "horizon" in doc and doc["horizon"] != grid.horizon:
            raise ContractViolation("horizon does not match row count")
        return grid

    def to_json(self) -> str:
        return json.dumps(self.to_dict())

    @classmethod
    def from_json(cls, text: str) -> "Grid":
        return cls.from_dict(json.loads(text))


def _sample_categorical(rng: np.random.Generator, probs: np.ndarray, size) -> np.ndarray:
    cdf = np.cumsum(probs)
    cdf[-1] = 1.0
    return np.searchsorted(cdf, rng.random(size), side="right")


def sample_cells(rng: np.random.Generator, level: TrafficLevel, n: int,
                 config: EnvConfig = DEFAULT_ENV) -> np.ndarray:
    """Draw ``n`` independent cell types under one traffic level."""
    return _sample_categorical(rng, config.cell_probs[int(level)], n).astype(np.int8)


def generate_episode(rng: np.random.Generator, horizon: int | None = None,
                     config: EnvConfig = DEFAULT_ENV) -> Grid:
    horizon = config.horizon if horizon is None else horizon
    if horizon < 1:
        raise ContractViolation(f"horizon must be >= 1, got {horizon}")
    n_rows = horizon + 1
    traffic = np.empty(n_rows, dtype=np.int8)
    traffic[0] = int(config.initial_traffic)
    steps = rng.random(n_rows - 1)
    cdfs = np.cumsum(config.traffic_transition, axis=1)
    cdfs[:, -1] = 1.0
    for r in range(1, n_rows):
        traffic[r] = np.searchsorted(cdfs[traffic[r - 1]], steps[r - 1], side="right")
    u = rng.random((n_rows, N_LANES))
    cell_cdfs = np.cumsum(config.cell_probs, axis=1)
    cell_cdfs[:, -1] = 1.0
    cells = np.empty((n_rows, N_LANES), dtype=np.int8)
    for r in range(n_rows):
        cells[r] = np.searchsorted(cell_cdfs[traffic[r]], u[r], side="right")
    return Grid(cells=cells, traffic=traffic)


def legal_mask(lane: int) -> np.ndarray:
    return np.array([lane > 0, True, lane < N_LANES - 1])


def legal_actions(pos: Position) -> set[Action]:
    if not 0 <= pos.lane < N_LANES:
        raise ContractViolation(f"lane out of bounds: {pos.lane}")
    return {a for a, ok in zip(Action, legal_mask(pos.lane)) if ok}


def step(grid: Grid, pos: Position, action: Action,
         config: EnvConfig = DEFAULT_ENV) -> tuple[Position, float, bool]:
    if pos.row >= grid.horizon:
        raise ContractViolation(f"cannot step past the horizon from row {pos.row}")
    if not legal_mask(pos.lane)[int(action)]:
        raise ContractViolation(f"illegal action {Action(action).name} in lane {pos.lane}")
    nxt = Position(pos.row + 1, pos.lane + int(action) - 1)
    cost = float(config.cell_costs[grid.cells[nxt.row, nxt.lane]])
    return nxt, cost, nxt.row == grid.horizon


def path_cost(grid: Grid, actions, start_lane: int = START_LANE,
              config: EnvConfig = DEFAULT_ENV) -> float:
    pos, total = Position(0, start_lane), 0.0
    for a in actions:
        pos, cost, _ = step(grid, pos, Action(a), config)
        total += cost
    return total


def optimal_plan(grid: Grid, start: Position = Position(0, START_LANE), horizon: int | None = None,
                 config: EnvConfig = DEFAULT_ENV) -> tuple[float, list[Action]]:
    """Exact minimum-cost action sequence on the true grid (no control costs)."""
    if horizon is not None and horizon != grid.horizon:
        raise ContractViolation("planner horizon must match the grid")
    cost, actions = _kernels.plan(grid.cells, config.cell_costs, start.row, start.lane)
    return float(cost), [Action(int(a)) for a in actions]
