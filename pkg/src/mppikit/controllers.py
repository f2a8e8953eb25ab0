"""Sampling-based optimizers: MPPI, DMD-MPC, CEM and Tube-MPPI.

Every controller keeps a mean control sequence (T, n_u) that warm-starts the
next solve. Each optimization iteration draws fresh noise about the current
mean, rolls it out, turns the costs into weights and applies the update law.
"""
from __future__ import annotations

import math
import time
from dataclasses import dataclass

import numpy as np

from .core import FLOAT, ControlTrajectory, OutputTrajectory, ScenarioConfig, as_vector
from .costs import CostFunction, make_cost
from .dynamics import DynamicsModel, make_dynamics
from .engine import AUTO, RolloutEngine, RolloutResult, WeightResult, compute_weights, weighted_update
from .feedback import PidGains, PIDFeedback
from .sampling import GaussianSampler, GaussianSamplerConfig

TAIL_FILLS = ("last", "zero")


@dataclass(frozen=True, eq=False)
class ControllerSolution:
    """Immutable result of one solve."""

    controls: ControlTrajectory
    states: np.ndarray             # (T+1, n_x) from rolling U* out of x0
    outputs: OutputTrajectory      # (T, n_y)
    weights: WeightResult
    solve_ms: float
    costs: np.ndarray              # (M,) sample costs of the final iteration
    rollout: RolloutResult | None = None

    @property
    def first_control(self) -> np.ndarray:
        return self.controls.controls[0]


class MPPIController:
    name = "mppi"

    def __init__(self, dynamics: DynamicsModel, cost: CostFunction, *, dt: float, horizon: int,
                 num_samples: int, lambda_: float = 1.0, iterations: int = 1,
                 sampler: GaussianSampler | None = None, strategy: str = AUTO, workers: int | None = None,
                 visualization_fraction: float = 0.0, tail_fill: str = "last"):
        if horizon < 1:
            raise ValueError(f"horizon must be >= 1, got {horizon}")
        if num_samples < 1:
            raise ValueError(f"num_samples must be >= 1, got {num_samples}")
        if iterations < 1:
            raise ValueError(f"iterations must be >= 1, got {iterations}")
        if not lambda_ > 0:
            raise ValueError(f"lambda must be > 0, got {lambda_}")
        if tail_fill not in TAIL_FILLS:
            raise ValueError(f"tail_fill must be one of {TAIL_FILLS}, got {tail_fill!r}")
        self.dynamics = dynamics
        self.cost = cost
        self.dt = float(dt)
        self.horizon = int(horizon)
        self.num_samples = int(num_samples)
        self.lambda_ = float(lambda_)
        self.iterations = int(iterations)
        self.sampler = sampler or GaussianSampler()
        self.tail_fill = tail_fill
        self.engine = RolloutEngine(dynamics, cost, dt, strategy=strategy, workers=workers,
                                    visualization_fraction=visualization_fraction)
        self.mean = np.zeros((self.horizon, dynamics.dims.n_u), FLOAT)
        self.clock = time.perf_counter   # used for solve_ms; injectable for reproducible logs

    # -- mean bookkeeping ----------------------------------------------------
    @property
    def control_trajectory(self) -> ControlTrajectory:
        return ControlTrajectory(self.mean, self.dt)

    def set_mean(self, controls):
        arr = np.array(controls.controls if isinstance(controls, ControlTrajectory) else controls, FLOAT)
        if arr.shape != self.mean.shape:
            raise ValueError(f"mean must be {self.mean.shape}, got {arr.shape}")
        self.mean = arr

    def reset(self, seed: int | None = None):
        self.mean = np.zeros_like(self.mean)
        self.sampler.reset(seed)

    def shift_steps(self, elapsed: float, dt_min: float) -> int:
        """Whole control steps covered by `elapsed`, quantized to dt_min.

        Both roundings use Python's round(), so exact halves go to the even
        neighbour: 0.05 s at dt_min = 0.02 s is 2 quanta, not 3.
        """
        if elapsed < 0:
            raise ValueError(f"elapsed must be >= 0, got {elapsed}")
        if not dt_min > 0:
            raise ValueError(f"dt_min must be > 0, got {dt_min}")
        quanta = round(elapsed / dt_min)
        return int(round(quanta * dt_min / self.dt))

    def _shifted(self, mean: np.ndarray, steps: int) -> np.ndarray:
        T = mean.shape[0]
        if steps <= 0:
            return mean.copy()
        if steps >= T:
            return np.zeros_like(mean)
        out = np.empty_like(mean)
        out[:T - steps] = mean[steps:]
        out[T - steps:] = mean[-1] if self.tail_fill == "last" else 0.0
        return out

    def shift_control_sequence(self, elapsed: float, dt_min: float) -> np.ndarray:
        """Advance the mean by the elapsed time; returns the new mean."""
        self.mean = self._shifted(self.mean, self.shift_steps(elapsed, dt_min))
        return self.mean

    # -- optimization --------------------------------------------------------
    def _weights(self, costs: np.ndarray) -> WeightResult:
        return compute_weights(costs, self.lambda_)

    def _update(self, mean: np.ndarray, perturbations: np.ndarray, weights: WeightResult) -> np.ndarray:
        return weighted_update(mean, perturbations, weights)

    def _optimize(self, x0s: np.ndarray, means: np.ndarray):
        """Run the iterations for S systems sharing noise; returns (means, weights, result)."""
        S = means.shape[0]
        for _ in range(self.iterations):
            batch = self.sampler.generate_samples(means, self.num_samples)
            result = self.engine.rollout(self.engine.request(x0s, batch, self.lambda_))
            weights = [self._weights(result.costs[s]) for s in range(S)]
            means = np.stack([self._update(means[s], batch.perturbations[s], weights[s]) for s in range(S)])
        return means, weights, result

    def _solution(self, x0, mean, weights, result, system, t0) -> ControllerSolution:
        states, outputs = self.engine.simulate(x0, mean)
        states.flags.writeable = False
        return ControllerSolution(ControlTrajectory(mean, self.dt), states, OutputTrajectory(outputs),
                                  weights, (self.clock() - t0) * 1e3,
                                  np.array(result.costs[system]), result)

    def compute_control(self, x0) -> ControllerSolution:
        t0 = self.clock()
        x0 = as_vector(x0, self.dynamics.dims.n_x, "initial state")
        means, weights, result = self._optimize(x0[None], self.mean[None])
        self.mean = means[0]
        return self._solution(x0, self.mean, weights[0], result, 0, t0)


class DMDMPCController(MPPIController):
    """MPPI with a step size: U_new = (1 - gamma_t) U_old + gamma_t * (MPPI average).

    gamma may be a scalar or one value per timestep.
    """

    name = "dmd"

    def __init__(self, *args, gamma=1.0, **kwargs):
        super().__init__(*args, **kwargs)
        g = np.asarray(gamma, dtype=np.float64)
        if g.ndim == 1 and g.shape[0] != self.horizon:
            raise ValueError(f"per-timestep gamma needs {self.horizon} entries, got {g.shape[0]}")
        if g.ndim > 1 or not np.all(g >= 0) or not np.all(np.isfinite(g)):
            raise ValueError(f"gamma must be a finite scalar or vector >= 0, got {gamma}")
        self.gamma = g

    def _update(self, mean, perturbations, weights):
        avg = weighted_update(mean, perturbations, weights).astype(np.float64)
        g = self.gamma if self.gamma.ndim == 0 else self.gamma[:, None]
        return ((1.0 - g) * mean.astype(np.float64) + g * avg).astype(FLOAT)


class CEMController(MPPIController):
    """Uniform weights 1/k on the k = ceil(elite_fraction * M) cheapest samples.

    The new mean is the elite average; the sampling variance stays fixed.
    Equal costs are ordered by sample index.
    """

    name = "cem"

    def __init__(self, *args, elite_fraction: float = 0.1, **kwargs):
        super().__init__(*args, **kwargs)
        if not 0 < elite_fraction <= 1:
            raise ValueError(f"elite_fraction must be in (0, 1], got {elite_fraction}")
        self.elite_fraction = float(elite_fraction)

    def elite_count(self, num_samples: int) -> int:
        return max(1, math.ceil(round(self.elite_fraction * num_samples, 9)))

    def _weights(self, costs):
        J = np.asarray(costs, np.float64)
        k = self.elite_count(J.size)
        elite = np.argsort(J, kind="stable")[:k]
        w = np.zeros(J.size)
        w[elite] = 1.0 / k
        return WeightResult(float(J[elite[0]]), float(k), w)


class TubeMPPIController(MPPIController):
    """MPPI on a nominal and a real system with shared noise, plus tracking feedback.

    The nominal state is never set from measurements except on the first call or
    when it drifts more than `reset_bound` (Euclidean) from the real state. Between
    solves it advances through the model under the nominal optimal control.
    """

    name = "tube"

    def __init__(self, *args, feedback: PIDFeedback, reset_bound: float = math.inf, **kwargs):
        super().__init__(*args, **kwargs)
        if feedback is None:
            raise ValueError("Tube-MPPI needs a feedback controller")
        if not reset_bound > 0:
            raise ValueError(f"reset_bound must be > 0, got {reset_bound}")
        self.feedback = feedback
        self.reset_bound = float(reset_bound)
        self.nominal_state: np.ndarray | None = None
        self.real_mean = np.zeros_like(self.mean)
        self.nominal_solution: ControllerSolution | None = None
        self.real_solution: ControllerSolution | None = None
        self.resets = 0

    def reset(self, seed: int | None = None):
        super().reset(seed)
        self.real_mean = np.zeros_like(self.mean)
        self.nominal_state = None
        self.nominal_solution = self.real_solution = None
        self.feedback.reset()

    def shift_control_sequence(self, elapsed, dt_min):
        steps = self.shift_steps(elapsed, dt_min)
        if steps > 0 and self.nominal_state is not None:
            # Advance the nominal system through the model under the pre-shift mean.
            # Past the horizon the mean has expired, so the remaining steps use zero control.
            controls = np.zeros((steps, self.mean.shape[1]), FLOAT)
            n = min(steps, self.horizon)
            controls[:n] = self.mean[:n]
            states, _ = self.engine.simulate(self.nominal_state, controls)
            self.nominal_state = as_vector(states[-1], self.dynamics.dims.n_x, "nominal state")
        self.mean = self._shifted(self.mean, steps)
        self.real_mean = self._shifted(self.real_mean, steps)
        return self.mean

    def _tube_solve(self, x_real):
        t0 = self.clock()
        x_real = as_vector(x_real, self.dynamics.dims.n_x, "real state")
        if self.nominal_state is None or np.linalg.norm(
                self.nominal_state.astype(np.float64) - x_real) > self.reset_bound:
            if self.nominal_state is not None:
                self.resets += 1
            self.nominal_state = x_real
            self.feedback.reset()
        x_nom = self.nominal_state
        means, weights, result = self._optimize(np.stack([x_nom, x_real]), np.stack([self.mean, self.real_mean]))
        self.mean, self.real_mean = means[0], means[1]
        nominal = self._solution(x_nom, self.mean, weights[0], result, 0, t0)
        real = self._solution(x_real, self.real_mean, weights[1], result, 1, t0)
        self.nominal_solution, self.real_solution = nominal, real
        return x_real, real, nominal

    def tube_compute_control(self, x_real):
        """Returns (real solution, nominal solution, applied control).

        applied = nominal U*_0 + feedback(x_real, nominal state); the call
        advances the feedback controller's own history.
        """
        x_real, real, nominal = self._tube_solve(x_real)
        fb = self.feedback.k(x_real, self.nominal_state)
        applied = (self.mean[0].astype(np.float64) + fb).astype(FLOAT)
        return real, nominal, applied

    def compute_control(self, x0) -> ControllerSolution:
        """Solves both systems and returns the nominal solution without applying feedback.

        Inside a Plant, pass a feedback controller to the plant to track the
        nominal states of the published solution.
        """
        return self._tube_solve(x0)[2]


CONTROLLERS = {c.name: c for c in (MPPIController, DMDMPCController, CEMController, TubeMPPIController)}


def make_controller(config: ScenarioConfig, *, dynamics: DynamicsModel | None = None,
                    cost: CostFunction | None = None, strategy: str = AUTO, workers: int | None = None,
                    seed: int | None = None):
    """Build the controller described by a scenario config."""
    dynamics = dynamics or make_dynamics(config.dynamics, dict(config.dynamics_params))
    cost = cost or make_cost(config.cost, dict(config.cost_params))
    sampler = GaussianSampler(GaussianSamplerConfig(
        std=config.control_std, zero_mean_fraction=config.zero_mean_fraction,
        include_mean_sample=config.include_mean_sample, importance_sampling=config.importance_sampling,
        seed=config.seed if seed is None else seed), workers=workers or 1)
    params = dict(config.controller_params)
    kwargs = dict(dt=config.dt, horizon=config.horizon, num_samples=config.num_samples,
                  lambda_=config.lambda_, iterations=config.iterations, sampler=sampler,
                  strategy=strategy, workers=workers,
                  visualization_fraction=float(params.pop("visualization_fraction", 0.0)),
                  tail_fill=params.pop("tail_fill", "last"))
    kind = config.controller
    if kind == "tube":
        n_x, n_u = dynamics.dims.n_x, dynamics.dims.n_u
        gains = PidGains.create(n_x, n_u, config.dt, params.pop("k_p", 0.0), params.pop("k_i", 0.0),
                                params.pop("k_d", 0.0))
        kwargs["feedback"] = PIDFeedback(gains, params.pop("integral_limit", None))
        kwargs["reset_bound"] = float(params.pop("reset_bound", math.inf))
    elif kind == "dmd":
        kwargs["gamma"] = params.pop("gamma", 1.0)
    elif kind == "cem":
        kwargs["elite_fraction"] = float(params.pop("elite_fraction", 0.1))
    elif kind != "mppi":
        raise ValueError(f"unknown controller kind {kind!r}; expected one of {sorted(CONTROLLERS)}")
    if params:
        raise ValueError(f"unknown {kind} controller parameters: {sorted(params)}")
    return CONTROLLERS[kind](dynamics, cost, **kwargs)
