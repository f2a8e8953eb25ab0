"""Data-parallel rollout evaluation, strategy auto-selection and the weight transform.

Two evaluation strategies over the same compiled model kernels:

* split: phase 1 propagates every (system, sample) sequentially in time and
  stores all outputs; phase 2 evaluates running costs in parallel over
  (system, sample, timestep); a final pass sums each sample's costs.
* fused: one sequential time loop per (system, sample) that steps and costs
  together and keeps no trajectories.

Both accumulate a sample's cost in float64, t ascending, from float32 stage
costs, so they agree bit-for-bit on the same request.
"""
from __future__ import annotations

import math
import statistics
import time
from contextlib import contextmanager
from dataclasses import dataclass, field

import numba
import numpy as np
from numba import njit, prange

from .core import FLOAT, NonFiniteError
from .costs import CostFunction
from .dynamics import DynamicsModel
from .sampling import NoiseBatch, importance_weight_adjustment

SPLIT = "split"
FUSED = "fused"
AUTO = "auto"
STRATEGIES = (SPLIT, FUSED, AUTO)

AUTOTUNE_WARMUP = 2


# ---------------------------------------------------------------------------
# Kernel construction
# ---------------------------------------------------------------------------

def _build_kernels(step, running, terminal, n_x, n_u, n_y):
    @njit(parallel=True)
    def fused(x0, V, dt, pd, pc, grid, costs, bad):
        S, M, T, _ = V.shape
        for k in prange(S * M):
            s = k // M
            m = k - s * M
            # np.empty plus a copy loop lets LLVM treat x as unaliased; x0[s].copy() runs ~2x slower.
            x = np.empty(n_x, np.float32)
            for i in range(n_x):
                x[i] = x0[s, i]
            xn = np.empty(n_x, np.float32)
            y = np.zeros(n_y, np.float32)
            u = np.empty(n_u, np.float32)
            uc = np.empty(n_u, np.float32)
            xd = np.empty(n_x, np.float32)
            J = 0.0
            b = -1
            for t in range(T):
                # Copying beats taking a view of V per step (no refcounting in the loop).
                for j in range(n_u):
                    u[j] = V[s, m, t, j]
                step(x, u, dt, pd, uc, xd, xn, y)
                for i in range(n_x):
                    x[i] = xn[i]
                    if not math.isfinite(xn[i]):
                        b = t
                c = np.float32(running(y, u, t, pc, grid))
                if not math.isfinite(c):
                    b = t
                if b >= 0:
                    break
                J += c
            if b < 0:
                c = np.float32(terminal(y, pc, grid))
                if not math.isfinite(c):
                    b = T
                J += c
            costs[s, m] = J
            bad[s, m] = b

    @njit(parallel=True)
    def split_dynamics(x0, V, dt, pd, Y, bad):
        S, M, T, _ = V.shape
        for k in prange(S * M):
            s = k // M
            m = k - s * M
            x = np.empty(n_x, np.float32)
            for i in range(n_x):
                x[i] = x0[s, i]
            xn = np.empty(n_x, np.float32)
            y = np.zeros(n_y, np.float32)
            u = np.empty(n_u, np.float32)
            uc = np.empty(n_u, np.float32)
            xd = np.empty(n_x, np.float32)
            b = -1
            for t in range(T):
                for j in range(n_u):
                    u[j] = V[s, m, t, j]
                step(x, u, dt, pd, uc, xd, xn, y)
                for i in range(n_x):
                    x[i] = xn[i]
                    if b < 0 and not math.isfinite(xn[i]):
                        b = t
                for i in range(n_y):
                    Y[s, m, t, i] = y[i]
            bad[s, m] = b

    @njit(parallel=True)
    def split_costs(Y, V, pc, grid, C):
        S, M, T, _ = V.shape
        for k in prange(S * M * T):
            s = k // (M * T)
            r = k - s * M * T
            m = r // T
            t = r - m * T
            C[s, m, t] = np.float32(running(Y[s, m, t], V[s, m, t], t, pc, grid))

    @njit(parallel=True)
    def split_reduce(C, Y, pc, grid, costs, bad):
        S, M, T = C.shape
        for k in prange(S * M):
            s = k // M
            m = k - s * M
            J = 0.0
            b = bad[s, m]
            for t in range(T):
                c = C[s, m, t]
                if b < 0 and not math.isfinite(c):
                    b = t
                J += c
            c = np.float32(terminal(Y[s, m, T - 1], pc, grid))
            if b < 0 and not math.isfinite(c):
                b = T
            costs[s, m] = J + c
            bad[s, m] = b

    @njit
    def simulate(x0, V, dt, pd, X, Y):
        K, T, _ = V.shape
        uc = np.empty(n_u, np.float32)
        xd = np.empty(n_x, np.float32)
        y = np.zeros(n_y, np.float32)
        for k in range(K):
            for i in range(n_x):
                X[k, 0, i] = x0[k, i]
            for t in range(T):
                step(X[k, t], V[k, t], dt, pd, uc, xd, X[k, t + 1], y)
                for i in range(n_y):
                    Y[k, t, i] = y[i]

    return {"fused": fused, "split_dynamics": split_dynamics, "split_costs": split_costs,
            "split_reduce": split_reduce, "simulate": simulate}


_KERNELS: dict = {}


def kernels_for(dynamics: DynamicsModel, cost: CostFunction) -> dict:
    d = dynamics.dims
    key = (dynamics.step_kernel, type(cost).running, type(cost).terminal, d.n_x, d.n_u, d.n_y)
    k = _KERNELS.get(key)
    if k is None:
        k = _KERNELS[key] = _build_kernels(*key)
    return k


@contextmanager
def worker_threads(workers: int | None):
    if workers is None:
        yield
        return
    workers = max(1, min(int(workers), numba.config.NUMBA_NUM_THREADS))
    previous = numba.get_num_threads()
    numba.set_num_threads(workers)
    try:
        yield
    finally:
        numba.set_num_threads(previous)


def max_workers() -> int:
    return numba.config.NUMBA_NUM_THREADS


# ---------------------------------------------------------------------------
# Requests and results
# ---------------------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class RolloutRequest:
    """Initial states (S, n_x) plus the noise batch whose controls are rolled out."""

    initial_states: np.ndarray
    batch: NoiseBatch
    dynamics: DynamicsModel
    cost: CostFunction
    dt: float
    lambda_: float = 1.0

    def __post_init__(self):
        x0 = np.atleast_2d(np.asarray(self.initial_states, dtype=FLOAT))
        d = self.dynamics.dims
        if x0.shape[0] not in (1, 2) or x0.shape[1] != d.n_x:
            raise ValueError(f"initial_states must be (S in {{1,2}}, {d.n_x}), got {x0.shape}")
        if x0.shape[0] != self.batch.num_systems:
            raise ValueError(f"{x0.shape[0]} initial states for a batch of {self.batch.num_systems} systems")
        if self.batch.controls.shape[-1] != d.n_u:
            raise ValueError(f"batch control width {self.batch.controls.shape[-1]} != n_u={d.n_u}")
        if not np.all(np.isfinite(x0)):
            raise NonFiniteError("initial state is not finite")
        if not self.dt > 0:
            raise ValueError(f"dt must be > 0, got {self.dt}")
        object.__setattr__(self, "initial_states", np.ascontiguousarray(x0))

    @property
    def num_systems(self) -> int:
        return self.initial_states.shape[0]


@dataclass(frozen=True, eq=False)
class RolloutResult:
    costs: np.ndarray                    # (S, M) float64, terminal and importance terms included
    strategy: str
    outputs: np.ndarray | None = None    # (S, M, T, n_y) when the split strategy stored them
    retained_indices: np.ndarray | None = None   # (S, k) lowest-cost samples kept by fused
    retained_outputs: np.ndarray | None = None   # (S, k, T, n_y)


@dataclass
class StrategyChoice:
    kind: str
    timings_ms: dict = field(default_factory=dict)
    forced: bool = False


def _raise_bad(bad, what):
    s, m = np.argwhere(bad >= 0)[0]
    t = int(bad[s, m])
    raise NonFiniteError(f"non-finite {what} in system {s}, sample {m} at timestep {t}",
                         sample=int(m), timestep=t)


def _finish(req: RolloutRequest, costs: np.ndarray) -> np.ndarray:
    if req.batch.importance.any():
        costs = costs + importance_weight_adjustment(req.batch, req.lambda_)
    return costs


def rollout_split(req: RolloutRequest, workers: int | None = None) -> RolloutResult:
    k = kernels_for(req.dynamics, req.cost)
    V = req.batch.controls
    S, M, T, _ = V.shape
    n_y = req.dynamics.dims.n_y
    Y = np.empty((S, M, T, n_y), FLOAT)
    C = np.empty((S, M, T), FLOAT)
    costs = np.empty((S, M))
    bad = np.empty((S, M), np.int64)
    pd = req.dynamics.param_vector()
    pc = req.cost.param_vector()
    grid = req.cost.grid()
    with worker_threads(workers):
        k["split_dynamics"](req.initial_states, V, float(req.dt), pd, Y, bad)
        if np.any(bad >= 0):
            _raise_bad(bad, "state")
        k["split_costs"](Y, V, pc, grid, C)
        k["split_reduce"](C, Y, pc, grid, costs, bad)
    if np.any(bad >= 0):
        _raise_bad(bad, "cost")
    return RolloutResult(_finish(req, costs), SPLIT, outputs=Y)


def rollout_fused(req: RolloutRequest, workers: int | None = None,
                  retain_fraction: float = 0.0) -> RolloutResult:
    k = kernels_for(req.dynamics, req.cost)
    V = req.batch.controls
    S, M, T, _ = V.shape
    costs = np.empty((S, M))
    bad = np.empty((S, M), np.int64)
    pd = req.dynamics.param_vector()
    with worker_threads(workers):
        k["fused"](req.initial_states, V, float(req.dt), pd, req.cost.param_vector(), req.cost.grid(),
                   costs, bad)
    if np.any(bad >= 0):
        _raise_bad(bad, "state or cost")
    costs = _finish(req, costs)
    if retain_fraction <= 0:
        return RolloutResult(costs, FUSED)
    keep = math.ceil(round(retain_fraction * M, 9))
    idx = np.argsort(costs, axis=1, kind="stable")[:, :keep]
    n_x, n_y = req.dynamics.dims.n_x, req.dynamics.dims.n_y
    out = np.empty((S, keep, T, n_y), FLOAT)
    for s in range(S):
        x0 = np.repeat(req.initial_states[s:s + 1], keep, axis=0)
        X = np.empty((keep, T + 1, n_x), FLOAT)
        k["simulate"](x0, np.ascontiguousarray(V[s, idx[s]]), float(req.dt), pd, X, out[s])
    return RolloutResult(costs, FUSED, retained_indices=idx, retained_outputs=out)


def fused_scratch_bytes(dynamics: DynamicsModel, cost: CostFunction) -> int:
    """Per-sample working memory of the fused loop (float32 state, output and control scratch)."""
    d = dynamics.dims
    extra = getattr(dynamics, "scratch_bytes", 0) + getattr(cost, "scratch_bytes", 0)
    return 4 * (3 * d.n_x + d.n_u + d.n_y) + extra


def auto_select_strategy(req: RolloutRequest, trials: int = 3, *, override: str | None = None,
                         clock=time.perf_counter, runners: dict | None = None,
                         scratch_budget: int | None = None, workers: int | None = None) -> StrategyChoice:
    """Time both strategies and pick the lower median (split wins ties).

    Protocol: AUTOTUNE_WARMUP untimed runs, then max(3, trials) timed runs per
    strategy. `override` short-circuits the timing. If the fused loop's scratch
    exceeds `scratch_budget` bytes per worker, split is chosen without timing.
    """
    if override is not None:
        if override not in (SPLIT, FUSED):
            raise ValueError(f"override must be {SPLIT!r} or {FUSED!r}, got {override!r}")
        return StrategyChoice(override, forced=True)
    if scratch_budget is not None:
        per_worker = fused_scratch_bytes(req.dynamics, req.cost) * math.ceil(
            req.batch.num_samples * req.num_systems / max(1, workers or max_workers()))
        if per_worker > scratch_budget:
            return StrategyChoice(SPLIT, forced=True)
    runners = runners or {SPLIT: lambda: rollout_split(req, workers),
                          FUSED: lambda: rollout_fused(req, workers)}
    n = max(3, int(trials))
    timings = {}
    for name in (SPLIT, FUSED):
        run = runners[name]
        for _ in range(AUTOTUNE_WARMUP):
            run()
        samples = []
        for _ in range(n):
            t0 = clock()
            run()
            samples.append((clock() - t0) * 1e3)
        timings[name] = statistics.median(samples)
    kind = SPLIT if timings[SPLIT] <= timings[FUSED] else FUSED
    return StrategyChoice(kind, timings)


class RolloutEngine:
    """Runs rollouts with a fixed strategy, auto-tuning on first use when asked to."""

    def __init__(self, dynamics: DynamicsModel, cost: CostFunction, dt: float, *,
                 strategy: str = AUTO, workers: int | None = None, autotune_trials: int = 3,
                 scratch_budget: int | None = None, visualization_fraction: float = 0.0):
        if strategy not in STRATEGIES:
            raise ValueError(f"strategy must be one of {STRATEGIES}, got {strategy!r}")
        if not 0.0 <= visualization_fraction <= 1.0:
            raise ValueError("visualization_fraction must be in [0, 1]")
        self.dynamics = dynamics
        self.cost = cost
        self.dt = float(dt)
        self.workers = workers
        self.autotune_trials = autotune_trials
        self.scratch_budget = scratch_budget
        self.visualization_fraction = visualization_fraction
        self.choice = None if strategy == AUTO else StrategyChoice(strategy, forced=True)

    def set_strategy(self, strategy: str):
        """Force a strategy, overriding any automatic choice."""
        if strategy == AUTO:
            self.choice = None
        else:
            self.choice = auto_select_strategy(None, override=strategy)

    @property
    def strategy(self) -> str | None:
        return None if self.choice is None else self.choice.kind

    def request(self, initial_states, batch: NoiseBatch, lambda_: float) -> RolloutRequest:
        return RolloutRequest(initial_states, batch, self.dynamics, self.cost, self.dt, lambda_)

    def rollout(self, req: RolloutRequest) -> RolloutResult:
        if self.choice is None:
            self.choice = auto_select_strategy(req, self.autotune_trials, scratch_budget=self.scratch_budget,
                                               workers=self.workers)
        if self.choice.kind == SPLIT:
            return rollout_split(req, self.workers)
        return rollout_fused(req, self.workers, self.visualization_fraction)

    def simulate(self, x0, controls) -> tuple[np.ndarray, np.ndarray]:
        """Roll one control sequence (T, n_u) from x0; returns states (T+1, n_x), outputs (T, n_y)."""
        k = kernels_for(self.dynamics, self.cost)
        d = self.dynamics.dims
        V = np.ascontiguousarray(np.asarray(controls, FLOAT)[None])
        T = V.shape[1]
        X = np.empty((1, T + 1, d.n_x), FLOAT)
        Y = np.empty((1, T, d.n_y), FLOAT)
        k["simulate"](np.asarray(x0, FLOAT).reshape(1, d.n_x), V, self.dt, self.dynamics.param_vector(), X, Y)
        return X[0], Y[0]


# ---------------------------------------------------------------------------
# Weight transform and update law
# ---------------------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class WeightResult:
    baseline: float
    normalizer: float
    weights: np.ndarray


def compute_weights(costs, lambda_: float) -> WeightResult:
    """w_m = exp(-(J_m - rho) / lambda) / eta with rho = min J (computed on the caller's thread)."""
    if not lambda_ > 0:
        raise ValueError(f"lambda must be > 0, got {lambda_}")
    J = np.asarray(costs, dtype=np.float64).reshape(-1)
    if J.size == 0 or not np.all(np.isfinite(J)):
        raise ValueError("costs must be a non-empty vector of finite values")
    rho = float(J.min())
    e = np.exp(-(J - rho) / lambda_)
    eta = float(e.sum())
    return WeightResult(rho, eta, e / eta)


def weighted_update(mean, perturbations, weights) -> np.ndarray:
    """U*_t = u_t + sum_m w_m eps^m_t. `perturbations` is (M, T, n_u) or a single-system NoiseBatch."""
    if isinstance(perturbations, NoiseBatch):
        perturbations = perturbations.perturbations[0]
    w = weights.weights if isinstance(weights, WeightResult) else np.asarray(weights, np.float64)
    eps = np.asarray(perturbations)
    if eps.shape[0] != w.shape[0]:
        raise ValueError(f"{w.shape[0]} weights for {eps.shape[0]} perturbations")
    delta = np.zeros(eps.shape[1:])
    _weighted_sum(np.ascontiguousarray(w, np.float64),
                  np.ascontiguousarray(eps).reshape(eps.shape[0], -1), delta.reshape(-1))
    return (np.asarray(mean, np.float64) + delta).astype(FLOAT)


@njit(cache=True)
def _weighted_sum(w, eps, out):
    # float64 accumulation, samples in index order
    for m in range(eps.shape[0]):
        wm = w[m]
        if wm == 0.0:
            continue
        for k in range(eps.shape[1]):
            out[k] += wm * eps[m, k]


def export_sample_trajectories(result: RolloutResult, fraction: float, system: int = 0) -> np.ndarray:
    """The ceil(fraction*M) lowest-cost output trajectories, cheapest first."""
    if not 0.0 <= fraction <= 1.0:
        raise ValueError(f"fraction must be in [0, 1], got {fraction}")
    M = result.costs.shape[1]
    k = math.ceil(round(fraction * M, 9))
    if result.outputs is not None:
        order = np.argsort(result.costs[system], kind="stable")[:k]
        return result.outputs[system, order]
    if result.retained_indices is not None and result.retained_indices.shape[1] >= k:
        return result.retained_outputs[system, :k]
    if k == 0:
        return np.empty((0, 0, 0), FLOAT)
    raise ValueError(f"{k} sample trajectories requested but the rollout did not retain them; "
                     "configure visualization_fraction on the engine")
