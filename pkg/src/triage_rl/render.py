"""Text and SVG pictures of one episode: cells, the driven path, the optimal plan."""

from __future__ import annotations

from dataclasses import dataclass
from xml.sax.saxutils import escape

from .gridworld import START_LANE, CellType, ContractViolation, Grid

TAGS = ("human", "machine", "n/a")
TAG_COLORS = {"human": "#f28e2b", "machine": "#4e79a7", "n/a": "#555555"}
OVERLAY_COLOR = "#e15759"
CELL_COLORS = {CellType.ROAD: "#d9d9d9", CellType.GRASS: "#8cc084",
               CellType.STONE: "#9c755f", CellType.CAR: "#2f2f2f"}
CELL_CHARS = {CellType.ROAD: ".", CellType.GRASS: "g", CellType.STONE: "s", CellType.CAR: "C"}
TAG_CHARS = {"human": "H", "machine": "M", "n/a": "*"}


@dataclass
class RenderedTrajectory:
    grid: Grid
    lanes: list[int]
    controllers: list[str]
    overlay: list[int] | None = None

    def __post_init__(self):
        self.lanes = [int(x) for x in self.lanes]
        self.controllers = [_tag(c) for c in self.controllers]
        h = self.grid.horizon
        if len(self.lanes) != h + 1 or len(self.controllers) != h:
            raise ContractViolation(f"path needs {h + 1} lanes and {h} controller tags")
        for lanes in (self.lanes, self.overlay or []):
            if lanes and lanes[0] != START_LANE:
                raise ContractViolation("paths start in the middle lane")
            if any(abs(b - a) > 1 or not 0 <= b <= 2 for a, b in zip(lanes, lanes[1:])):
                raise ContractViolation("path moves more than one lane per row")
        if self.overlay is not None and len(self.overlay) != h + 1:
            raise ContractViolation("overlay must cover every row")


def _tag(c) -> str:
    if isinstance(c, str):
        if c not in TAGS:
            raise ContractViolation(f"unknown controller tag {c!r}")
        return c
    return TAGS[int(c)]


def lanes_from_actions(actions, start: int = START_LANE) -> list[int]:
    lanes = [start]
    for a in actions:
        lanes.append(lanes[-1] + int(a) - 1)
    return lanes


def render_text(traj: RenderedTrajectory) -> str:
    """One line per row, farthest row on top.

    Each cell prints as its type letter followed by a marker: ``H``/``M`` for
    the controller that drove into it, ``*`` for an untagged path, ``o`` for
    the optimal plan, ``+`` where both paths coincide, a space otherwise.
    """
    lines = []
    for row in range(traj.grid.row_count - 1, -1, -1):
        cells = []
        for lane in range(3):
            mark = " "
            on_path = traj.lanes[row] == lane
            on_plan = traj.overlay is not None and traj.overlay[row] == lane
            if on_path:
                mark = "S" if row == 0 else TAG_CHARS[traj.controllers[row - 1]]
            if on_plan:
                mark = "+" if on_path else "o"
            cells.append(CELL_CHARS[CellType(traj.grid.cells[row, lane])] + mark)
        lines.append(f"{row:3d} |{' '.join(cells)}|")
    return "\n".join(lines) + "\n"


def render_svg(traj: RenderedTrajectory, cell: int = 24, title: str | None = None) -> str:
    """Standalone SVG; row 0 at the bottom, one path segment per step."""
    rows = traj.grid.row_count
    width, height = 3 * cell, rows * cell
    pad = 4

    def center(row, lane):
        return pad + lane * cell + cell / 2, pad + (rows - 1 - row) * cell + cell / 2

    out = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{width + 2 * pad}" '
           f'height="{height + 2 * pad}" viewBox="0 0 {width + 2 * pad} {height + 2 * pad}">']
    if title:
        out.append(f"<title>{escape(title)}</title>")
    for row in range(rows):
        for lane in range(3):
            x, y = pad + lane * cell, pad + (rows - 1 - row) * cell
            color = CELL_COLORS[CellType(traj.grid.cells[row, lane])]
            out.append(f'<rect x="{x}" y="{y}" width="{cell}" height="{cell}" fill="{color}" '
                       f'stroke="#ffffff" stroke-width="1"/>')
    if traj.overlay is not None:
        pts = " ".join("%g,%g" % center(r, l) for r, l in enumerate(traj.overlay))
        out.append(f'<polyline class="optimal" points="{pts}" fill="none" stroke="{OVERLAY_COLOR}" '
                   f'stroke-width="3" stroke-dasharray="6,3"/>')
    for t, tag in enumerate(traj.controllers):
        (x1, y1), (x2, y2) = center(t, traj.lanes[t]), center(t + 1, traj.lanes[t + 1])
        out.append(f'<line class="{tag.replace("/", "")}" x1="{x1:g}" y1="{y1:g}" x2="{x2:g}" y2="{y2:g}" '
                   f'stroke="{TAG_COLORS[tag]}" stroke-width="4" stroke-linecap="round"/>')
    x0, y0 = center(0, traj.lanes[0])
    out.append(f'<circle cx="{x0:g}" cy="{y0:g}" r="{cell / 5:g}" fill="#000000"/>')
    out.append("</svg>")
    return "\n".join(out) + "\n"


def render_trajectory(grid: Grid, lanes, controllers, overlay=None) -> tuple[str, str]:
    """Text art and SVG document of one episode."""
    traj = RenderedTrajectory(grid, list(lanes), list(controllers),
                              None if overlay is None else [int(x) for x in overlay])
    return render_text(traj), render_svg(traj)

