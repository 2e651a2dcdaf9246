"""Global planners over a Costmap: NavFn-style Dijkstra, grid A* and Theta*.

All three search the same 8-connected graph of non-lethal cells.  Vertices sit
at cell centres, except that the start and goal cells use the exact start and
goal points.  Diagonal moves may not cut a lethal corner.  Edge costs are
Euclidean, so plan cost equals polyline length.
"""

from __future__ import annotations

import heapq
import math
from dataclasses import dataclass

import numpy as np
from numba import njit

from .costmap import Costmap

NEIGHBORS = ((-1, -1), (-1, 0), (-1, 1), (0, -1), (0, 1), (1, -1), (1, 0), (1, 1))
PLANNERS = ("navfn", "astar", "thetastar")


class NoPathError(RuntimeError):
    pass


@dataclass(frozen=True)
class PlannedPath:
    points: np.ndarray  # (K, 2) world frame, first = start, last = goal
    planner_id: str
    cost: float = 0.0
    expansions: int = 0

    @property
    def length(self) -> float:
        if len(self.points) < 2:
            return 0.0
        return float(np.hypot(*np.diff(self.points, axis=0).T).sum())

    @property
    def start(self) -> np.ndarray:
        return self.points[0]

    @property
    def goal(self) -> np.ndarray:
        return self.points[-1]


@njit(cache=True)
def _los_cells(blocked, x0, y0, x1, y1):
    """Closed-square supercover test in cell units; True if no touched cell is blocked."""
    rows, cols = blocked.shape
    eps = 1e-9
    xmin, xmax = min(x0, x1), max(x0, x1)
    dx, dy = x1 - x0, y1 - y0
    c_lo = int(math.ceil(xmin - eps)) - 1
    c_hi = int(math.floor(xmax + eps))
    for c in range(c_lo, c_hi + 1):
        xa = max(xmin, float(c))
        xb = min(xmax, float(c + 1))
        if xa > xb:
            if xa - xb > eps:
                continue
            xa = xb
        if abs(dx) < 1e-15:
            ya, yb = min(y0, y1), max(y0, y1)
        else:
            t0 = y0 + (xa - x0) * dy / dx
            t1 = y0 + (xb - x0) * dy / dx
            ya, yb = min(t0, t1), max(t0, t1)
        r_lo = int(math.ceil(ya - eps)) - 1
        r_hi = int(math.floor(yb + eps))
        for r in range(r_lo, r_hi + 1):
            if r < 0 or r >= rows or c < 0 or c >= cols:
                return False
            if blocked[r, c]:
                return False
    return True


def line_of_sight(costmap: Costmap, a, b) -> bool:
    """True iff every cell the segment a-b touches (supercover) is non-lethal."""
    ox, oy = costmap.origin
    res = costmap.resolution
    return bool(_los_cells(costmap.lethal, (a[0] - ox) / res, (a[1] - oy) / res,
                           (b[0] - ox) / res, (b[1] - oy) / res))


class _Graph:
    def __init__(self, costmap: Costmap, start, goal):
        self.cm = costmap
        self.blocked = costmap.lethal
        self.rows, self.cols = costmap.lethal.shape
        self.start = (float(start[0]), float(start[1]))
        self.goal = (float(goal[0]), float(goal[1]))
        sr, sc = costmap.world_to_cell(*self.start)
        gr, gc = costmap.world_to_cell(*self.goal)
        for name, (r, c) in (("start", (sr, sc)), ("goal", (gr, gc))):
            if not costmap.in_bounds(r, c):
                raise NoPathError(f"{name} outside costmap")
            if self.blocked[r, c]:
                raise NoPathError(f"{name} lies in a lethal cell")
        self.s = sr * self.cols + sc
        self.g = gr * self.cols + gc

    def pos(self, idx: int) -> tuple[float, float]:
        if idx == self.s:
            return self.start
        if idx == self.g:
            return self.goal
        r, c = divmod(idx, self.cols)
        return self.cm.cell_center(r, c)

    def los(self, a, b) -> bool:
        return line_of_sight(self.cm, a, b)

    def neighbors(self, idx: int):
        """Valid (neighbor index, edge cost) pairs."""
        r, c = divmod(idx, self.cols)
        blocked = self.blocked
        rows, cols = self.rows, self.cols
        special = idx == self.s or idx == self.g
        pu = self.pos(idx)
        out = []
        for dr, dc in NEIGHBORS:
            nr, nc = r + dr, c + dc
            if nr < 0 or nr >= rows or nc < 0 or nc >= cols or blocked[nr, nc]:
                continue
            if dr and dc and (blocked[nr, c] or blocked[r, nc]):
                continue
            v = nr * cols + nc
            pv = self.pos(v)
            if (special or v == self.s or v == self.g) and not self.los(pu, pv):
                continue
            out.append((v, math.hypot(pv[0] - pu[0], pv[1] - pu[1])))
        return out

    def trivial(self, planner_id: str) -> PlannedPath | None:
        if self.s != self.g:
            return None
        pts = [self.start] if self.start == self.goal else [self.start, self.goal]
        path = np.array(pts)
        return PlannedPath(path, planner_id, cost=float(math.dist(self.start, self.goal)))

    def points(self, chain: list[int]) -> np.ndarray:
        return np.array([self.pos(i) for i in chain])


def dijkstra_plan(costmap: Costmap, start, goal) -> PlannedPath:
    """Wavefront potential from the goal, then steepest descent from the start."""
    gr = _Graph(costmap, start, goal)
    if (p := gr.trivial("navfn")) is not None:
        return p
    pot = {gr.g: 0.0}
    done = set()
    heap = [(0.0, gr.g)]
    expansions = 0
    while heap:
        d, u = heapq.heappop(heap)
        if u in done:
            continue
        done.add(u)
        expansions += 1
        if u == gr.s:
            break
        for v, c in gr.neighbors(u):
            nd = d + c
            if nd < pot.get(v, math.inf):
                pot[v] = nd
                heapq.heappush(heap, (nd, v))
    if gr.s not in done:
        raise NoPathError("goal unreachable")

    chain = [gr.s]
    u = gr.s
    while u != gr.g:
        best = None
        for v, c in gr.neighbors(u):
            if v not in done:
                continue
            key = (pot[v] + c, v)
            if best is None or key < best:
                best = key
        u = best[1]
        chain.append(u)
    return PlannedPath(gr.points(chain), "navfn", cost=pot[gr.s], expansions=expansions)


def _chain(parent: dict, s: int, g: int) -> list[int]:
    chain = [g]
    while chain[-1] != s:
        chain.append(parent[chain[-1]])
    return chain[::-1]


def astar_plan(costmap: Costmap, start, goal) -> PlannedPath:
    """8-connected A* with the Euclidean heuristic; ties go to the smaller heuristic."""
    gr = _Graph(costmap, start, goal)
    if (p := gr.trivial("astar")) is not None:
        return p
    gx, gy = gr.goal

    def h(idx):
        x, y = gr.pos(idx)
        return math.hypot(gx - x, gy - y)

    g = {gr.s: 0.0}
    parent = {gr.s: gr.s}
    closed = set()
    hs = h(gr.s)
    heap = [(hs, hs, gr.s)]
    expansions = 0
    while heap:
        _, _, u = heapq.heappop(heap)
        if u in closed:
            continue
        if u == gr.g:
            break
        closed.add(u)
        expansions += 1
        gu = g[u]
        for v, c in gr.neighbors(u):
            if v in closed:
                continue
            ng = gu + c
            if ng < g.get(v, math.inf):
                g[v] = ng
                parent[v] = u
                hv = h(v)
                heapq.heappush(heap, (ng + hv, hv, v))
    if gr.g not in g:
        raise NoPathError("goal unreachable")
    return PlannedPath(gr.points(_chain(parent, gr.s, gr.g)), "astar", cost=g[gr.g], expansions=expansions)


def theta_star_plan(costmap: Costmap, start, goal) -> PlannedPath:
    """Basic Theta*: each relaxation first tries the parent of the expanded vertex.

    Vertices are re-opened whenever their cost improves, which keeps the
    result no longer than the 8-connected optimum.
    """
    gr = _Graph(costmap, start, goal)
    if (p := gr.trivial("thetastar")) is not None:
        return p
    gx, gy = gr.goal
    pos_cache: dict[int, tuple[float, float]] = {}

    def pos(idx):
        p = pos_cache.get(idx)
        if p is None:
            p = pos_cache[idx] = gr.pos(idx)
        return p

    def h(idx):
        x, y = pos(idx)
        return math.hypot(gx - x, gy - y)

    ox, oy = costmap.origin
    res = costmap.resolution
    blocked = costmap.lethal

    def los(a, b):
        pa, pb = pos(a), pos(b)
        return _los_cells(blocked, (pa[0] - ox) / res, (pa[1] - oy) / res, (pb[0] - ox) / res, (pb[1] - oy) / res)

    g = {gr.s: 0.0}
    parent = {gr.s: gr.s}
    hs = h(gr.s)
    heap = [(hs, hs, gr.s, 0.0)]
    expansions = 0
    while heap:
        _, _, u, gu = heapq.heappop(heap)
        if gu > g[u]:
            continue
        if u == gr.g:
            break
        expansions += 1
        pu = parent[u]
        ppx, ppy = pos(pu)
        gp = g[pu]
        for v, c in gr.neighbors(u):
            if v == pu:
                continue
            vx, vy = pos(v)
            if los(pu, v):
                cand, par = gp + math.hypot(vx - ppx, vy - ppy), pu
            else:
                cand, par = gu + c, u
            if cand < g.get(v, math.inf):
                g[v] = cand
                parent[v] = par
                hv = h(v)
                heapq.heappush(heap, (cand + hv, hv, v, cand))
    if gr.g not in g:
        raise NoPathError("goal unreachable")
    return PlannedPath(gr.points(_chain(parent, gr.s, gr.g)), "thetastar", cost=g[gr.g], expansions=expansions)


def plan(costmap: Costmap, start, goal, planner: str = "thetastar") -> PlannedPath:
    funcs = {"navfn": dijkstra_plan, "astar": astar_plan, "thetastar": theta_star_plan}
    try:
        return funcs[planner](costmap, start, goal)
    except KeyError:
        raise ValueError(f"unknown planner {planner!r}, expected one of {PLANNERS}") from None


def segment_count(points: np.ndarray, tol: float = 1e-9) -> int:
    """Number of straight segments after merging collinear consecutive points."""
    if len(points) < 2:
        return 0
    d = np.diff(points, axis=0)
    d = d[np.hypot(d[:, 0], d[:, 1]) > tol]
    if len(d) == 0:
        return 0
    turns = 0
    for a, b in zip(d[:-1], d[1:]):
        cross = a[0] * b[1] - a[1] * b[0]
        if abs(cross) > tol * np.hypot(*a) * np.hypot(*b) or a @ b < 0:
            turns += 1
    return turns + 1
