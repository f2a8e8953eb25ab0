"""Running and terminal costs over outputs.

Kernel signatures shared by every cost (compiled into the rollout engine):

    running(y, u, t, p, grid) -> float
    terminal(y, p, grid) -> float

`p` is the cost's float64 parameter vector and `grid` a uint8 occupancy grid
(a 1x1 dummy for costs that do not use a map).
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from numba import njit

from .dynamics import wrap_angle

_NO_GRID = np.zeros((1, 1), dtype=np.uint8)
_NO_GRID.flags.writeable = False


# ---------------------------------------------------------------------------
# Costmap
# ---------------------------------------------------------------------------

@njit(cache=True, inline="always")
def _cell_index(q):
    # half-open cells; snap values within rounding noise of a boundary onto it
    k = round(q)
    if abs(q - k) <= 1e-9 * max(1.0, abs(q)):
        return int(k)
    return int(math.floor(q))


@njit(cache=True, inline="always")
def occupancy(grid, origin_x, origin_y, resolution, x, y):
    if not (math.isfinite(x) and math.isfinite(y)):
        return 1
    i = _cell_index((x - origin_x) / resolution)
    j = _cell_index((y - origin_y) / resolution)
    if i < 0 or j < 0 or j >= grid.shape[0] or i >= grid.shape[1]:
        return 1
    return grid[j, i]


@dataclass(frozen=True, eq=False)
class Costmap2D:
    """Binary occupancy grid; row j covers y in [oy + j*res, oy + (j+1)*res)."""

    width: float = 11.0
    height: float = 11.0
    resolution: float = 0.1
    origin: tuple = (-5.5, -5.5)
    grid: np.ndarray = field(default=None)

    def __post_init__(self):
        if not (self.width > 0 and self.height > 0 and self.resolution > 0):
            raise ValueError("costmap width, height and resolution must be > 0")
        shape = (round(self.height / self.resolution), round(self.width / self.resolution))
        grid = np.zeros(shape, np.uint8) if self.grid is None else np.array(self.grid, dtype=np.uint8)
        if grid.shape != shape:
            raise ValueError(f"grid shape {grid.shape} does not match map size {shape}")
        if np.any(grid > 1):
            raise ValueError("grid cells must be 0 or 1")
        grid.flags.writeable = False
        object.__setattr__(self, "grid", grid)
        object.__setattr__(self, "origin", (float(self.origin[0]), float(self.origin[1])))

    @property
    def shape(self):
        return self.grid.shape

    def lookup(self, x: float, y: float) -> int:
        return int(occupancy(self.grid, self.origin[0], self.origin[1], self.resolution, float(x), float(y)))

    def with_obstacle(self, x_min, y_min, x_max, y_max) -> "Costmap2D":
        """Copy of the map with every cell whose centre lies in the box marked occupied."""
        grid = self.grid.copy()
        rows, cols = grid.shape
        xs = self.origin[0] + (np.arange(cols) + 0.5) * self.resolution
        ys = self.origin[1] + (np.arange(rows) + 0.5) * self.resolution
        mask = (ys[:, None] >= y_min) & (ys[:, None] <= y_max) & (xs[None, :] >= x_min) & (xs[None, :] <= x_max)
        grid[mask] = 1
        return Costmap2D(self.width, self.height, self.resolution, self.origin, grid)

    def __eq__(self, other):
        if not isinstance(other, Costmap2D):
            return NotImplemented
        return (self.width, self.height, self.resolution, self.origin) == (
            other.width, other.height, other.resolution, other.origin) and np.array_equal(self.grid, other.grid)

    __hash__ = None

    # file format -----------------------------------------------------------
    def dumps(self) -> str:
        lines = [
            "costmap 1",
            f"width_m {self.width!r}",
            f"height_m {self.height!r}",
            f"resolution {self.resolution!r}",
            f"origin {self.origin[0]!r} {self.origin[1]!r}",
            "cells",
        ]
        lines += ["".join("1" if c else "0" for c in row) for row in self.grid]
        return "\n".join(lines) + "\n"

    def save(self, path):
        Path(path).write_text(self.dumps())

    @classmethod
    def loads(cls, text: str) -> "Costmap2D":
        lines = text.splitlines()
        if not lines or lines[0].strip() != "costmap 1":
            raise ValueError("line 1: expected 'costmap 1' header")
        header = {}
        i = 1
        while i < len(lines) and lines[i].strip() != "cells":
            parts = lines[i].split()
            if parts:
                header[parts[0]] = parts[1:]
            i += 1
        missing = {"width_m", "height_m", "resolution", "origin"} - header.keys()
        if missing:
            raise ValueError(f"costmap header missing {sorted(missing)}")
        try:
            width = float(header["width_m"][0])
            height = float(header["height_m"][0])
            res = float(header["resolution"][0])
            origin = (float(header["origin"][0]), float(header["origin"][1]))
        except (IndexError, ValueError) as exc:
            raise ValueError(f"bad costmap header: {exc}") from exc
        rows = []
        for n, line in enumerate(lines[i + 1:], start=i + 2):
            line = line.strip()
            if not line:
                continue
            if set(line) - {"0", "1"}:
                raise ValueError(f"line {n}: cells must be 0/1")
            rows.append([c == "1" for c in line])
        return cls(width, height, res, origin, np.array(rows, dtype=np.uint8).reshape(len(rows), -1))

    @classmethod
    def load(cls, path) -> "Costmap2D":
        return cls.loads(Path(path).read_text())


# ---------------------------------------------------------------------------
# Cost base class
# ---------------------------------------------------------------------------

class CostFunction:
    name = "cost"
    running = None
    terminal = None

    def param_vector(self) -> np.ndarray:
        return np.zeros(1)

    def grid(self) -> np.ndarray:
        return _NO_GRID

    def running_cost(self, y, u, t: int = 0) -> float:
        y = np.asarray(y, np.float32)
        u = np.asarray(u, np.float32)
        if not (np.all(np.isfinite(y)) and np.all(np.isfinite(u))):
            raise ValueError("running_cost needs finite y and u")
        return float(type(self).running(y, u, int(t), self.param_vector(), self.grid()))

    def terminal_cost(self, y) -> float:
        y = np.asarray(y, np.float32)
        if not np.all(np.isfinite(y)):
            raise ValueError("terminal_cost needs finite y")
        return float(type(self).terminal(y, self.param_vector(), self.grid()))

    def __repr__(self):
        return f"{type(self).__name__}({getattr(self, 'params', '')!r})"


@njit(cache=True, inline="always")
def _zero_terminal(y, p, grid):
    return 0.0


# ---------------------------------------------------------------------------
# Road cost for the unicycle
# ---------------------------------------------------------------------------

@njit(cache=True, inline="always")
def _road_running(y, u, t, p, grid):
    width = p[0]
    c_lin = p[1]
    c_quad = p[2]
    d = abs(y[1])
    if d <= width:
        return c_lin * d
    excess = d - width
    return c_lin * width + c_quad * excess * excess


@dataclass(frozen=True)
class RoadCostParams:
    width: float = 2.0
    linear_coeff: float = 1.0
    quadratic_coeff: float = 1.0


class RoadCost(CostFunction):
    """Keep a unicycle on a road along the x axis.

    |y| is penalised linearly up to the road half-width and quadratically
    beyond it, joined continuously at |y| = width.
    """

    name = "road"
    running = _road_running
    terminal = _zero_terminal

    def __init__(self, params: RoadCostParams | None = None, **kwargs):
        self.params = params or RoadCostParams(**kwargs)
        p = self.params
        if not (p.width > 0 and p.linear_coeff > 0 and p.quadratic_coeff > 0):
            raise ValueError("road cost width and coefficients must be > 0")

    def param_vector(self):
        p = self.params
        return np.array([p.width, p.linear_coeff, p.quadratic_coeff])


# ---------------------------------------------------------------------------
# Circle track for the 2-D double integrator
# ---------------------------------------------------------------------------

@njit(cache=True, inline="always")
def _circle_running(y, u, t, p, grid):
    px = np.float64(y[0])
    py = np.float64(y[1])
    vx = np.float64(y[2])
    vy = np.float64(y[3])
    r2 = px * px + py * py
    cost = 0.0
    if r2 <= p[0] * p[0]:
        cost += p[2]
    if r2 >= p[1] * p[1]:
        cost += p[2]
    cost += p[4] * abs(p[3] - math.sqrt(vx * vx + vy * vy))
    cost += p[6] * abs(p[5] - (px * vy - py * vx))
    return cost


@dataclass(frozen=True)
class CircleTrackCostParams:
    inner_radius: float = 1.875
    outer_radius: float = 2.125
    off_track_penalty: float = 1000.0
    speed_target: float = 2.0
    speed_coeff: float = 2.0
    momentum_target: float = 4.0
    momentum_coeff: float = 2.0


class CircleTrackCost(CostFunction):
    """Stay inside an annulus while holding speed and angular momentum."""

    name = "circle_track"
    running = _circle_running
    terminal = _zero_terminal

    def __init__(self, params: CircleTrackCostParams | None = None, **kwargs):
        self.params = params or CircleTrackCostParams(**kwargs)
        if not self.params.inner_radius < self.params.outer_radius:
            raise ValueError("inner_radius must be < outer_radius")

    def param_vector(self):
        p = self.params
        return np.array([p.inner_radius, p.outer_radius, p.off_track_penalty, p.speed_target,
                         p.speed_coeff, p.momentum_target, p.momentum_coeff])


# ---------------------------------------------------------------------------
# Differential-drive navigation: goal distance, goal heading, costmap obstacles
# ---------------------------------------------------------------------------

@njit(cache=True, inline="always")
def _nav_running(y, u, t, p, grid):
    dx = np.float64(y[0]) - p[0]
    dy = np.float64(y[1]) - p[1]
    dth = wrap_angle(np.float64(y[2]) - p[2])
    cost = p[3] * (dx * dx + dy * dy) + p[4] * dth * dth
    if p[5] != 0.0:
        cost += p[5] * occupancy(grid, p[6], p[7], p[8], np.float64(y[0]), np.float64(y[1]))
    return cost


@dataclass(frozen=True)
class DiffDriveNavCostParams:
    goal: tuple = (2.0, 2.0, math.pi / 2)
    dist_coeff: float = 5.0
    angle_coeff: float = 5.0
    obstacle_cost: float = 20.0
    costmap: Costmap2D = field(default_factory=Costmap2D)


class DiffDriveNavCost(CostFunction):
    """Quadratic goal-position and goal-heading terms plus a per-step obstacle term.

    Obstacle term: obstacle_cost * occupancy of the nearest cell under the robot,
    charged every timestep; positions outside the map count as occupied.
    """

    name = "diff_drive_nav"
    running = _nav_running
    terminal = _zero_terminal

    def __init__(self, params: DiffDriveNavCostParams | None = None, **kwargs):
        self.params = params or DiffDriveNavCostParams(**kwargs)
        p = self.params
        if min(p.dist_coeff, p.angle_coeff, p.obstacle_cost) < 0:
            raise ValueError("navigation cost coefficients must be >= 0")

    def param_vector(self):
        p = self.params
        m = p.costmap
        return np.array([*p.goal, p.dist_coeff, p.angle_coeff, p.obstacle_cost,
                         m.origin[0], m.origin[1], m.resolution])

    def grid(self):
        return self.params.costmap.grid


# ---------------------------------------------------------------------------
# Generic quadratic cost
# ---------------------------------------------------------------------------

@njit(cache=True, inline="always")
def _quadratic_running(y, u, t, p, grid):
    n_y = int(p[0])
    n_u = int(p[1])
    cost = 0.0
    for i in range(n_y):
        e = np.float64(y[i]) - p[2 + i]
        cost += p[2 + n_y + i] * e * e
    base = 2 + 3 * n_y
    for j in range(n_u):
        cost += p[base + j] * np.float64(u[j]) * np.float64(u[j])
    return cost


@njit(cache=True, inline="always")
def _quadratic_terminal(y, p, grid):
    n_y = int(p[0])
    cost = 0.0
    for i in range(n_y):
        e = np.float64(y[i]) - p[2 + i]
        cost += p[2 + 2 * n_y + i] * e * e
    return cost


@dataclass(frozen=True)
class QuadraticCostParams:
    target: tuple
    weights: tuple
    terminal_weights: tuple | None = None
    control_weights: tuple | None = None


class QuadraticCost(CostFunction):
    """sum_i w_i (y_i - r_i)^2 (+ optional control penalty); works with any model."""

    name = "quadratic"
    running = _quadratic_running
    terminal = _quadratic_terminal

    def __init__(self, params: QuadraticCostParams | None = None, *, n_u: int | None = None, **kwargs):
        self.params = params or QuadraticCostParams(**kwargs)
        p = self.params
        self._target = np.asarray(p.target, float).reshape(-1)
        n_y = self._target.size
        self._weights = np.broadcast_to(np.asarray(p.weights, float), (n_y,)).copy()
        tw = p.weights if p.terminal_weights is None else p.terminal_weights
        self._terminal = np.broadcast_to(np.asarray(tw, float), (n_y,)).copy()
        cw = () if p.control_weights is None else p.control_weights
        self._control = np.asarray(cw, float).reshape(-1)
        if n_u is not None and self._control.size == 0:
            self._control = np.zeros(n_u)
        if np.any(self._weights < 0) or np.any(self._terminal < 0) or np.any(self._control < 0):
            raise ValueError("quadratic cost weights must be >= 0")

    def param_vector(self):
        n_y = self._target.size
        return np.concatenate([[n_y, self._control.size], self._target, self._weights,
                               self._terminal, self._control])


COSTS = {cls.name: cls for cls in (RoadCost, CircleTrackCost, DiffDriveNavCost, QuadraticCost)}


def make_cost(kind: str, params: dict | None = None) -> CostFunction:
    params = dict(params or {})
    if kind == "diff_drive_nav":
        cm = params.pop("costmap", None)
        if isinstance(cm, (str, Path)):
            params["costmap"] = Costmap2D.load(cm)
        elif isinstance(cm, dict):
            cm = dict(cm)
            boxes = cm.pop("obstacles", ())
            costmap = Costmap2D(**cm)
            for box in boxes:
                costmap = costmap.with_obstacle(*box)
            params["costmap"] = costmap
        elif cm is not None:
            params["costmap"] = cm
        if "goal" in params:
            params["goal"] = tuple(float(g) for g in params["goal"])
    try:
        cls = COSTS[kind]
    except KeyError:
        raise ValueError(f"unknown cost kind {kind!r}; expected one of {sorted(COSTS)}") from None
    return cls(**params)

