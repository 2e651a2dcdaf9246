"""Bundled maps and a seeded random map generator."""

from __future__ import annotations

import json
import math
from importlib import resources

import numpy as np

from .world import Machine, WorldMap, _rects_overlap

MACHINE_LENGTH = 0.7
MACHINE_WIDTH = 0.35


def data_path(name: str):
    return resources.files("robotino_nav") / "data" / name


def load_bundled_map(name: str = "default_map.json") -> WorldMap:
    return WorldMap.from_dict(json.loads(data_path(name).read_text()))


def random_map(rng: np.random.Generator, n_machines: int, width: float = 12.0, height: float = 6.0,
               margin: float = 0.3, max_tries: int = 10_000) -> WorldMap:
    """Place ``n_machines`` non-overlapping machines with random pose."""
    machines: list[Machine] = []
    corners: list[np.ndarray] = []
    tries = 0
    while len(machines) < n_machines:
        tries += 1
        if tries > max_tries:
            raise RuntimeError("could not place machines")
        theta = rng.choice([0.0, 45.0, 90.0, 135.0])
        m = Machine(
            id=f"M{len(machines) + 1}",
            x=float(rng.uniform(-width / 2 + 1.0, width / 2 - 1.0)),
            y=float(rng.uniform(-height / 2 + 1.0, height / 2 - 1.0)),
            theta=math.radians(theta),
            length=float(rng.uniform(0.6, 2.0)),
            width=float(rng.uniform(0.3, 0.8)),
        )
        c = m.corners()
        if np.any(np.abs(c[:, 0]) > width / 2 - margin) or np.any(np.abs(c[:, 1]) > height / 2 - margin):
            continue
        if any(_rects_overlap(c, o) for o in corners):
            continue
        machines.append(m)
        corners.append(c)
    return WorldMap(width=width, height=height, machines=tuple(machines))
