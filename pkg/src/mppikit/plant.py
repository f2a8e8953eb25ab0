"""MPC harness: state exchange, replanning cadence and control publication.

`Plant` sits between a controller and the system it drives. `update_state`
ingests measurements and publishes the control for that instant;
`run_control_iteration` replans from the latest snapshot. Both may be called
from different threads. `run_control_loop` drives a `SimulatedSystem` over
simulated time for closed-loop experiments.
"""
from __future__ import annotations

import csv
import math
import threading
from dataclasses import dataclass, field

import numpy as np

from .controllers import ControllerSolution
from .core import FLOAT, NonFiniteError, as_vector
from .costs import CostFunction
from .dynamics import DynamicsModel

_EPS = 1e-9


@dataclass(frozen=True)
class PublishedControl:
    t: float
    control: np.ndarray
    index: int
    stale: bool
    solution: ControllerSolution


class Plant:
    """Replanning wrapper around a controller.

    Published controls use a zero-order hold on the latest solution: at time t the
    control at index floor((t - t_solution) / dt) is used, clipped to the last
    entry (and flagged stale) once the solution's horizon has run out.
    """

    def __init__(self, controller, replan_rate: float, dt_min: float, feedback=None, pub_control=None):
        if not replan_rate > 0:
            raise ValueError(f"replan_rate must be > 0, got {replan_rate}")
        if not dt_min > 0:
            raise ValueError(f"dt_min must be > 0, got {dt_min}")
        self.controller = controller
        self.replan_rate = float(replan_rate)
        self.dt_min = float(dt_min)
        self.feedback = feedback
        self.pub_control = pub_control
        self._lock = threading.Lock()
        self._solve_lock = threading.Lock()
        self.state: np.ndarray | None = None
        self.time: float | None = None
        self.solution: ControllerSolution | None = None
        self.solution_time: float | None = None
        self.last_published: PublishedControl | None = None
        self.num_solves = 0

    # -- state ingestion / publication ----------------------------------------
    def _store(self, x, t: float) -> np.ndarray:
        x = as_vector(x, self.controller.dynamics.dims.n_x, "state")
        with self._lock:
            if self.time is not None and t < self.time:
                raise ValueError(f"stale state update: t={t} is earlier than the current time {self.time}")
            self.state, self.time = x, float(t)
        return x

    def control_at(self, t: float, solution: ControllerSolution | None = None,
                   solution_time: float | None = None) -> tuple[np.ndarray, int, bool]:
        """Zero-order-hold lookup; returns (control, index, stale)."""
        if solution is None:
            with self._lock:
                solution, solution_time = self.solution, self.solution_time
        if solution is None:
            raise RuntimeError("no solution has been computed yet")
        U = solution.controls.controls
        idx = math.floor((t - solution_time) / solution.controls.dt + _EPS)
        idx = max(idx, 0)
        stale = idx >= U.shape[0]
        if stale:
            idx = U.shape[0] - 1
        return U[idx], idx, stale

    def update_state(self, x, t: float) -> PublishedControl | None:
        """Store a state snapshot and publish the control for time t (None before the first solve)."""
        x = self._store(x, t)
        with self._lock:
            solution, t_sol = self.solution, self.solution_time
        if solution is None:
            return None
        u, idx, stale = self.control_at(t, solution, t_sol)
        if self.feedback is not None:
            ref = solution.states[min(idx, solution.states.shape[0] - 1)]
            u = (u.astype(np.float64) + self.feedback.k(x, ref)).astype(FLOAT)
        published = PublishedControl(float(t), np.array(u, FLOAT), idx, stale, solution)
        self.last_published = published
        if self.pub_control is not None:
            self.pub_control(published)
        return published

    # -- replanning ------------------------------------------------------------
    def run_control_iteration(self) -> ControllerSolution:
        """Shift the mean by the time since the last solve, then solve from the latest snapshot."""
        with self._solve_lock:
            with self._lock:
                if self.state is None:
                    raise RuntimeError("run_control_iteration needs a state snapshot; call update_state first")
                x, t, t_prev = self.state, self.time, self.solution_time
            if t_prev is not None:
                self.controller.shift_control_sequence(max(0.0, t - t_prev), self.dt_min)
            solution = self.controller.compute_control(x)
            with self._lock:
                self.solution, self.solution_time = solution, t
                self.num_solves += 1
            return solution

    def run_control_loop(self, sim: "SimulatedSystem", duration: float, log_path=None) -> "TrajectoryLog":
        """Closed loop over simulated time; replans every 1/replan_rate seconds.

        Solves happen at simulation steps, so a replan rate above 1/sim.dt
        gives one solve per step.
        """
        log = None
        for log in self.iter_control_loop(sim, duration):
            pass
        if log_path is not None:
            log.to_csv(log_path)
        return log

    def iter_control_loop(self, sim: "SimulatedSystem", duration: float):
        """Step-by-step form of run_control_loop; yields the (growing) log after every sim step."""
        if not duration > 0:
            raise ValueError(f"duration must be > 0, got {duration}")
        steps = max(1, int(round(duration / sim.dt)))
        period = 1.0 / self.replan_rate
        d = sim.dynamics.dims
        log = TrajectoryLog.empty(steps, d.n_x, d.n_u, sim.dynamics)
        # Each loop is a fresh simulated timeline starting at t = 0.
        with self._lock:
            self.state = self.time = self.solution = self.solution_time = None
        next_solve = 0.0
        for k in range(steps):
            t = k * sim.dt
            if t >= next_solve - _EPS:
                self._store(sim.state, t)
                solution = self.run_control_iteration()
                log.solve_ms.append(solution.solve_ms)
                while next_solve <= t + _EPS:
                    next_solve += period
            published = self.update_state(sim.state, t)
            log.times[k] = t
            log.states[k] = sim.state
            log.controls[k] = published.control
            try:
                log.costs[k] = sim.step(published.control)
            except NonFiniteError as exc:
                raise NonFiniteError(f"simulation diverged at step {k} (t={t:.6g}): {exc}", timestep=k) from exc
            if k == steps - 1:
                log.final_state = sim.state.copy()
            yield log


class SimulatedSystem:
    """Euler-stepped copy of a dynamics model with optional Gaussian state disturbance.

    The disturbance is added to the true state only, never to any controller model.
    `step` returns the running cost of the new output when a cost is attached.
    """

    def __init__(self, dynamics: DynamicsModel, x0, dt: float, cost: CostFunction | None = None,
                 disturbance_std=0.0, seed: int = 0):
        if not dt > 0:
            raise ValueError(f"dt must be > 0, got {dt}")
        self.dynamics = dynamics
        self.dt = float(dt)
        self.cost = cost
        self.state = np.array(as_vector(x0, dynamics.dims.n_x, "initial state"))
        self.disturbance_std = np.broadcast_to(np.asarray(disturbance_std, np.float64), (dynamics.dims.n_x,))
        self.rng = np.random.default_rng(seed)
        self.output = None

    def step(self, u) -> float:
        x_next, y = self.dynamics.step(self.state, u, self.dt)
        if np.any(self.disturbance_std > 0):
            x_next = x_next + (self.disturbance_std * self.rng.standard_normal(x_next.size)).astype(FLOAT)
        if not np.all(np.isfinite(x_next)):
            raise NonFiniteError("simulated state became non-finite")
        self.state = np.array(x_next, FLOAT)
        self.output = y
        return 0.0 if self.cost is None else self.cost.running_cost(y, u)


@dataclass
class TrajectoryLog:
    times: np.ndarray
    states: np.ndarray
    controls: np.ndarray
    costs: np.ndarray
    state_names: tuple
    control_names: tuple
    solve_ms: list = field(default_factory=list)
    final_state: np.ndarray | None = None

    @classmethod
    def empty(cls, steps: int, n_x: int, n_u: int, dynamics: DynamicsModel) -> "TrajectoryLog":
        return cls(np.zeros(steps), np.zeros((steps, n_x), FLOAT), np.zeros((steps, n_u), FLOAT),
                   np.zeros(steps), tuple(dynamics.state_names), tuple(dynamics.control_names))

    def __len__(self):
        return self.times.shape[0]

    @property
    def total_cost(self) -> float:
        return float(self.costs.sum())

    @property
    def num_solves(self) -> int:
        return len(self.solve_ms)

    def header(self) -> list[str]:
        return (["t"] + [f"x_{n}" for n in self.state_names] + [f"u_{n}" for n in self.control_names]
                + ["running_cost"])

    def to_csv(self, path):
        """Columns: t, x_<state>..., u_<control>..., running_cost."""
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(self.header())
            for k in range(len(self)):
                w.writerow([repr(float(self.times[k]))] + [repr(float(v)) for v in self.states[k]]
                           + [repr(float(v)) for v in self.controls[k]] + [repr(float(self.costs[k]))])
