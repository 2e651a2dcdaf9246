"""Static occupancy costmap with exponential inflation."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .world import WorldMap

LETHAL = 254
INSCRIBED = 253
MAX_INFLATED = 252


@dataclass(frozen=True)
class Costmap:
    cost: np.ndarray  # (rows, cols) uint8, row index grows with y
    lethal: np.ndarray  # (rows, cols) bool
    distance: np.ndarray  # (rows, cols) metres from cell centre to nearest obstacle
    resolution: float
    origin: tuple[float, float]  # world coordinates of the lower-left grid corner
    robot_radius: float
    inflation_radius: float

    @property
    def rows(self) -> int:
        return self.cost.shape[0]

    @property
    def cols(self) -> int:
        return self.cost.shape[1]

    # width/height in cells
    width = cols
    height = rows

    def world_to_cell(self, x: float, y: float) -> tuple[int, int]:
        """(row, col) containing the point."""
        return (int(math.floor((y - self.origin[1]) / self.resolution)),
                int(math.floor((x - self.origin[0]) / self.resolution)))

    def cell_center(self, row: int, col: int) -> tuple[float, float]:
        return (self.origin[0] + (col + 0.5) * self.resolution,
                self.origin[1] + (row + 0.5) * self.resolution)

    def in_bounds(self, row: int, col: int) -> bool:
        return 0 <= row < self.rows and 0 <= col < self.cols

    def is_lethal_at(self, x: float, y: float) -> bool:
        r, c = self.world_to_cell(x, y)
        return not self.in_bounds(r, c) or bool(self.lethal[r, c])

    def cost_at(self, x, y) -> np.ndarray:
        """Cost of the cells containing the given points; outside the grid is LETHAL."""
        x, y = np.asarray(x, dtype=float), np.asarray(y, dtype=float)
        c = np.floor((x - self.origin[0]) / self.resolution).astype(np.int64)
        r = np.floor((y - self.origin[1]) / self.resolution).astype(np.int64)
        inside = (r >= 0) & (r < self.rows) & (c >= 0) & (c < self.cols)
        out = np.full(x.shape, LETHAL, dtype=np.int64)
        out[inside] = self.cost[r[inside], c[inside]]
        return out


def inflation_cost(d, robot_radius: float, inflation_radius: float):
    """253 * exp(-k (d - robot_radius)) with k chosen so the cost is 1 at the inflation radius."""
    k = math.log(INSCRIBED) / (inflation_radius - robot_radius)
    return INSCRIBED * np.exp(-k * (np.asarray(d, dtype=float) - robot_radius))


def build_costmap(world: WorldMap, resolution: float = 0.05, robot_radius: float = 0.23,
                  inflation_radius: float = 0.6) -> Costmap:
    if not resolution > 0:
        raise ValueError("resolution must be positive")
    if not 0 < robot_radius < inflation_radius:
        raise ValueError("need 0 < robot_radius < inflation_radius")
    x0, y0, x1, y1 = world.bounds
    cols = int(round((x1 - x0) / resolution))
    rows = int(round((y1 - y0) / resolution))
    xs = x0 + (np.arange(cols) + 0.5) * resolution
    ys = y0 + (np.arange(rows) + 0.5) * resolution
    gx, gy = np.meshgrid(xs, ys)
    dist = world.obstacle_distance(gx, gy)

    cost = np.zeros((rows, cols), dtype=np.uint8)
    band = (dist > robot_radius) & (dist <= inflation_radius)
    inflated = np.clip(np.rint(inflation_cost(dist[band], robot_radius, inflation_radius)), 1, MAX_INFLATED)
    cost[band] = inflated.astype(np.uint8)
    lethal = dist <= robot_radius
    cost[lethal] = INSCRIBED
    cost[dist <= 0] = LETHAL
    return Costmap(cost=cost, lethal=lethal, distance=dist, resolution=resolution, origin=(x0, y0),
                   robot_radius=robot_radius, inflation_radius=inflation_radius)
