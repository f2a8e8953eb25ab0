"""Dynamics models x_{t+1} = F(x_t, u_t), y_t = G(x_t, u_t).

Every model exposes its physics as numba kernels so the rollout engine can
compile them straight into its loops:

    deriv(x, u, p, xdot)      continuous-time state derivative
    observe(x, u, p, y)       output map (defaults to y = x)

`p` is the float32 vector from :meth:`DynamicsModel.param_vector`. Its first
2*n_u entries are the lower and upper control bounds; model parameters follow.
The discrete step is clamp-then-Euler, then angular states are wrapped to
(-pi, pi].

Kernels are declared inline="always" so numba splices them into the rollout
loops; as plain calls their array-argument overhead dominated the loop body.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from functools import cached_property

import numpy as np
from numba import njit

from .core import FLOAT, ModelDims, NonFiniteError, as_vector

PI = math.pi
TWO_PI = 2.0 * math.pi


@njit(cache=True, inline="always")
def wrap_angle(a):
    return a - TWO_PI * math.ceil((a - PI) / TWO_PI)


@njit(cache=True, inline="always")
def _identity_observe(x, u, p, y):
    for i in range(y.size):
        y[i] = x[i]


def build_step(deriv, observe, n_u, angular):
    """Compile the discrete step for a (deriv, observe) pair.

    The returned kernel writes into caller-owned scratch `uc` (clamped control)
    and `xdot` so rollouts never allocate inside the time loop.
    """
    ang = np.asarray(angular, dtype=np.int64)
    n_ang = ang.size

    @njit(inline="always")
    def step(x, u, dt, p, uc, xdot, x_next, y):
        for j in range(n_u):
            lo = p[j]
            hi = p[n_u + j]
            v = u[j]
            if v < lo:
                v = lo
            elif v > hi:
                v = hi
            uc[j] = v
        deriv(x, uc, p, xdot)
        for i in range(x.size):
            x_next[i] = x[i] + dt * xdot[i]
        for k in range(n_ang):
            i = ang[k]
            x_next[i] = wrap_angle(x_next[i])
        observe(x_next, uc, p, y)

    return step


class DynamicsModel:
    """Base class. Subclasses set the name tuples, `Params`, and `deriv`."""

    name = "dynamics"
    state_names: tuple = ()
    control_names: tuple = ()
    output_names: tuple | None = None
    angular_states: tuple = ()
    Params = None

    deriv = None
    observe = _identity_observe

    def __init__(self, params=None, **kwargs):
        if params is None:
            params = self.Params(**kwargs) if self.Params is not None else None
        elif kwargs:
            raise TypeError("pass either a params record or keyword overrides, not both")
        self.params = params
        self._check_params()

    def _check_params(self):
        pass

    @property
    def dims(self) -> ModelDims:
        outputs = self.output_names if self.output_names is not None else self.state_names
        return ModelDims(len(self.state_names), len(self.control_names), len(outputs))

    def control_bounds(self) -> tuple[np.ndarray, np.ndarray]:
        n_u = self.dims.n_u
        return np.full(n_u, -np.inf, FLOAT), np.full(n_u, np.inf, FLOAT)

    def model_parameters(self) -> tuple:
        return ()

    def param_vector(self) -> np.ndarray:
        lo, hi = self.control_bounds()
        return np.concatenate([lo, hi, np.asarray(self.model_parameters(), dtype=FLOAT)]).astype(FLOAT)

    @cached_property
    def step_kernel(self):
        key = (type(self).deriv, type(self).observe, self.dims.n_u, self.angular_indices)
        cached = _STEP_CACHE.get(key)
        if cached is None:
            cached = _STEP_CACHE[key] = build_step(*key)
        return cached

    @property
    def angular_indices(self) -> tuple:
        return tuple(self.state_names.index(n) for n in self.angular_states)

    # -- python-facing API ---------------------------------------------------
    def state_derivative(self, x, u) -> np.ndarray:
        d = self.dims
        x = as_vector(x, d.n_x, "state")
        u = as_vector(u, d.n_u, "control")
        out = np.empty(d.n_x, FLOAT)
        type(self).deriv(x, u, self.param_vector(), out)
        return out

    def step(self, x, u, dt: float) -> tuple[np.ndarray, np.ndarray]:
        """One clamp-then-Euler step; returns (x_next, y)."""
        if not dt > 0:
            raise ValueError(f"dt must be > 0, got {dt}")
        d = self.dims
        x = as_vector(x, d.n_x, "state")
        u = as_vector(u, d.n_u, "control")
        x_next = np.empty(d.n_x, FLOAT)
        y = np.empty(d.n_y, FLOAT)
        self.step_kernel(x, u, float(dt), self.param_vector(), np.empty(d.n_u, FLOAT),
                         np.empty(d.n_x, FLOAT), x_next, y)
        bad = np.flatnonzero(~np.isfinite(x_next))
        if bad.size:
            ch = int(bad[0])
            raise NonFiniteError(f"{self.name}: state channel {self.state_names[ch]} became non-finite",
                                 channel=ch)
        return x_next, y

    def clamp_control(self, u) -> np.ndarray:
        lo, hi = self.control_bounds()
        return np.clip(np.asarray(u, FLOAT), lo, hi)

    def state_from_named_values(self, values: dict) -> np.ndarray:
        x = np.zeros(self.dims.n_x, FLOAT)
        for key, val in values.items():
            if key not in self.state_names:
                raise KeyError(f"unknown state name {key!r}; valid names: {', '.join(self.state_names)}")
            x[self.state_names.index(key)] = val
        return as_vector(x, self.dims.n_x, "state")

    def zero_state(self) -> np.ndarray:
        return as_vector(np.zeros(self.dims.n_x), self.dims.n_x, "state")

    def zero_control(self) -> np.ndarray:
        return as_vector(np.zeros(self.dims.n_u), self.dims.n_u, "control")

    def interpolate_states(self, x_a, x_b, t: float) -> np.ndarray:
        """Linear blend; angular channels follow the shorter arc."""
        if not 0.0 <= t <= 1.0:
            raise ValueError(f"t must lie in [0, 1], got {t}")
        d = self.dims
        a = as_vector(x_a, d.n_x, "state").astype(np.float64)
        b = as_vector(x_b, d.n_x, "state").astype(np.float64)
        if t == 0.0:
            return as_vector(a, d.n_x, "state")
        out = a + t * (b - a)
        for i in self.angular_indices:
            out[i] = wrap_angle(a[i] + t * wrap_angle(b[i] - a[i]))
        return as_vector(out, d.n_x, "state")

    def __repr__(self):
        return f"{type(self).__name__}({self.params!r})"


_STEP_CACHE: dict = {}


# ---------------------------------------------------------------------------
# Unicycle
# ---------------------------------------------------------------------------

@njit(cache=True, inline="always")
def _unicycle_deriv(x, u, p, xdot):
    xdot[0] = u[0] * math.cos(x[2])
    xdot[1] = u[0] * math.sin(x[2])
    xdot[2] = u[1]


@dataclass(frozen=True)
class UnicycleParams:
    pass


class Unicycle(DynamicsModel):
    name = "unicycle"
    state_names = ("X", "Y", "YAW")
    control_names = ("VEL", "YAW_DOT")
    angular_states = ("YAW",)
    Params = UnicycleParams
    deriv = _unicycle_deriv


# ---------------------------------------------------------------------------
# Cart-pole (frictionless, point-mass pole, theta = 0 hangs down)
# ---------------------------------------------------------------------------

@njit(cache=True, inline="always")
def _cartpole_deriv(x, u, p, xdot):
    m_c = p[2]
    m_p = p[3]
    length = p[4]
    g = p[5]
    th = x[2]
    th_dot = x[3]
    s = math.sin(th)
    c = math.cos(th)
    denom = m_c + m_p * s * s
    xdot[0] = x[1]
    xdot[1] = (u[0] + m_p * s * (length * th_dot * th_dot + g * c)) / denom
    xdot[2] = th_dot
    xdot[3] = (-u[0] * c - m_p * length * th_dot * th_dot * c * s - (m_c + m_p) * g * s) / (length * denom)


@dataclass(frozen=True)
class CartpoleParams:
    cart_mass: float = 1.0
    pole_mass: float = 1.0
    pole_length: float = 1.0
    gravity: float = 9.81
    max_force: float = np.inf


class Cartpole(DynamicsModel):
    name = "cartpole"
    state_names = ("POS_X", "VEL_X", "THETA", "THETA_DOT")
    control_names = ("FORCE",)
    angular_states = ("THETA",)
    Params = CartpoleParams
    deriv = _cartpole_deriv

    def _check_params(self):
        p = self.params
        for f in ("cart_mass", "pole_mass", "pole_length"):
            if not getattr(p, f) > 0:
                raise ValueError(f"cartpole {f} must be > 0")
        if not p.max_force > 0:
            raise ValueError("cartpole max_force must be > 0")

    def control_bounds(self):
        f = self.params.max_force
        return np.array([-f], FLOAT), np.array([f], FLOAT)

    def model_parameters(self):
        p = self.params
        return (p.cart_mass, p.pole_mass, p.pole_length, p.gravity)


# ---------------------------------------------------------------------------
# Differential drive (v, omega controls)
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class DiffDriveParams:
    wheel_radius: float = 1.0
    wheel_length: float = 1.0
    min_velocity: float = -0.35
    max_velocity: float = 0.5
    min_rotation: float = -0.5
    max_rotation: float = 0.5


class DiffDrive(DynamicsModel):
    """Unicycle kinematics with (v, omega) clamped to the robot limits.

    Wheel radius/length are kept for a wheel-speed control variant; the default
    (v, omega) controls do not use them.
    """

    name = "diff_drive"
    state_names = ("X", "Y", "YAW")
    control_names = ("VEL", "YAW_DOT")
    angular_states = ("YAW",)
    Params = DiffDriveParams
    deriv = _unicycle_deriv

    def _check_params(self):
        p = self.params
        if not p.min_velocity < p.max_velocity:
            raise ValueError("diff drive min_velocity must be < max_velocity")
        if not p.min_rotation < p.max_rotation:
            raise ValueError("diff drive min_rotation must be < max_rotation")

    def control_bounds(self):
        p = self.params
        return (np.array([p.min_velocity, p.min_rotation], FLOAT),
                np.array([p.max_velocity, p.max_rotation], FLOAT))

    def model_parameters(self):
        return (self.params.wheel_radius, self.params.wheel_length)


# ---------------------------------------------------------------------------
# 2-D double integrator
# ---------------------------------------------------------------------------

@njit(cache=True, inline="always")
def _double_integrator_deriv(x, u, p, xdot):
    xdot[0] = x[2]
    xdot[1] = x[3]
    xdot[2] = u[0]
    xdot[3] = u[1]


@dataclass(frozen=True)
class DoubleIntegrator2DParams:
    pass


class DoubleIntegrator2D(DynamicsModel):
    name = "double_integrator"
    state_names = ("POS_X", "POS_Y", "VEL_X", "VEL_Y")
    control_names = ("ACCEL_X", "ACCEL_Y")
    Params = DoubleIntegrator2DParams
    deriv = _double_integrator_deriv


MODELS = {cls.name: cls for cls in (Unicycle, Cartpole, DiffDrive, DoubleIntegrator2D)}


def make_dynamics(kind: str, params: dict | None = None) -> DynamicsModel:
    try:
        cls = MODELS[kind]
    except KeyError:
        raise ValueError(f"unknown dynamics kind {kind!r}; expected one of {sorted(MODELS)}") from None
    return cls(**(params or {}))

