"""Plain SVG plots of the field, driven trajectories and planned paths."""

from __future__ import annotations

from pathlib import Path
from typing import Sequence

import numpy as np

from .world import WorldMap

SCALE = 60.0  # pixels per metre
MARGIN = 20.0
ROBOT_COLORS = ("#d62728", "#2ca02c", "#1f77b4", "#9467bd", "#ff7f0e")
PLANNER_COLORS = {"navfn": "#ff7f0e", "astar": "#1f77b4", "thetastar": "#d62728"}


def shade(color: str, amount: float) -> str:
    """Blend ``color`` towards white by ``amount`` in [0, 1]."""
    rgb = [int(color[i:i + 2], 16) for i in (1, 3, 5)]
    mixed = [round(c + (255 - c) * amount) for c in rgb]
    return "#" + "".join(f"{c:02x}" for c in mixed)


class Canvas:
    def __init__(self, world_map: WorldMap):
        self.map = world_map
        self.x0, self.y0, self.x1, self.y1 = world_map.bounds
        self.width = (self.x1 - self.x0) * SCALE + 2 * MARGIN
        self.height = (self.y1 - self.y0) * SCALE + 2 * MARGIN
        self.items: list[str] = []

    def px(self, x: float, y: float) -> tuple[float, float]:
        return MARGIN + (x - self.x0) * SCALE, MARGIN + (self.y1 - y) * SCALE

    def points(self, xy) -> str:
        return " ".join("{:.2f},{:.2f}".format(*self.px(x, y)) for x, y in xy)

    def field(self) -> None:
        w, h = (self.x1 - self.x0) * SCALE, (self.y1 - self.y0) * SCALE
        self.items.append(f'<rect x="{MARGIN}" y="{MARGIN}" width="{w:.2f}" height="{h:.2f}" '
                          'fill="#ffffff" stroke="#000000" stroke-width="2"/>')
        for m in self.map.machines:
            self.items.append(f'<polygon class="machine" points="{self.points(m.corners())}" '
                              'fill="#808080" stroke="#404040"/>')

    def polyline(self, xy, color: str, width: float = 1.5, cls: str = "trajectory") -> None:
        self.items.append(f'<polyline class="{cls}" points="{self.points(xy)}" fill="none" '
                          f'stroke="{color}" stroke-width="{width}"/>')

    def marker(self, x: float, y: float, color: str, label: str = "") -> None:
        cx, cy = self.px(x, y)
        self.items.append(f'<circle class="waypoint" cx="{cx:.2f}" cy="{cy:.2f}" r="5" fill="{color}"/>')
        if label:
            self.items.append(f'<text x="{cx + 7:.2f}" y="{cy - 7:.2f}" font-size="12">{label}</text>')

    def text(self, x: float, y: float, s: str, color: str = "#000000") -> None:
        self.items.append(f'<text x="{x:.2f}" y="{y:.2f}" font-size="14" fill="{color}">{s}</text>')

    def render(self) -> str:
        head = (f'<svg xmlns="http://www.w3.org/2000/svg" width="{self.width:.0f}" height="{self.height:.0f}" '
                f'viewBox="0 0 {self.width:.2f} {self.height:.2f}">')
        return "\n".join([head, *self.items, "</svg>"]) + "\n"


def path_svg(records: Sequence, world_map: WorldMap) -> str:
    """Field, waypoints and one polyline per robot and repetition for a single path id."""
    canvas = Canvas(world_map)
    canvas.field()
    reps = sorted({r.repetition for r in records})
    for r in sorted(records, key=lambda r: (r.robot_id, r.repetition)):
        base = ROBOT_COLORS[r.robot_id % len(ROBOT_COLORS)]
        lighter = 0.6 * reps.index(r.repetition) / max(len(reps), 1)
        if len(r.trajectory):
            canvas.polyline(np.asarray(r.trajectory)[:, 1:3], shade(base, lighter))
    seen = set()
    for r in records:
        if r.robot_id in seen:
            continue
        seen.add(r.robot_id)
        for i, wp in enumerate(r.waypoints):
            canvas.marker(wp.x, wp.y, ROBOT_COLORS[r.robot_id % len(ROBOT_COLORS)], f"R{r.robot_id + 1}.{i + 1}")
    return canvas.render()


def plot_paths(records: Sequence, world_map: WorldMap, out_dir: str | Path) -> list[Path]:
    """One SVG per path id; returns the written files."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    by_path: dict[int, list] = {}
    for r in records:
        by_path.setdefault(r.path_id, []).append(r)
    written = []
    for path_id, recs in sorted(by_path.items()):
        f = out / f"path{path_id:02d}.svg"
        f.write_text(path_svg(recs, world_map))
        written.append(f)
    return written


def planner_svg(world_map: WorldMap, paths: Sequence, costmap=None) -> str:
    """Planned paths over the field, optionally with the lethal cells of the costmap shaded."""
    canvas = Canvas(world_map)
    canvas.field()
    if costmap is not None:
        res = costmap.resolution
        for r, c in np.argwhere(costmap.lethal & (costmap.distance > 0)):
            x, y = costmap.origin[0] + c * res, costmap.origin[1] + (r + 1) * res
            px, py = canvas.px(x, y)
            canvas.items.append(f'<rect x="{px:.2f}" y="{py:.2f}" width="{res * SCALE:.2f}" '
                                f'height="{res * SCALE:.2f}" fill="#e0e0e0"/>')
    for i, p in enumerate(paths):
        color = PLANNER_COLORS.get(p.planner_id, ROBOT_COLORS[i % len(ROBOT_COLORS)])
        canvas.polyline(p.points, color, width=2.5, cls=f"path {p.planner_id}")
        canvas.text(MARGIN + 8, MARGIN + 20 + 18 * i, f"{p.planner_id}: {p.length:.2f} m", color)
    if paths:
        canvas.marker(*paths[0].start, "#000000", "start")
        canvas.marker(*paths[0].goal, "#000000", "goal")
    return canvas.render()
