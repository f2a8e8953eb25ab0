"""Feedback controllers that push the real system back toward a reference trajectory."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .core import FLOAT


def _gain(value, n_u: int, n_x: int, name: str) -> np.ndarray:
    arr = np.asarray(value, dtype=np.float64)
    if arr.ndim == 0:
        arr = float(arr) * np.eye(n_u, n_x)
    if arr.shape != (n_u, n_x):
        raise ValueError(f"{name} must be ({n_u}, {n_x}) or a scalar, got {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise ValueError(f"{name} must be finite")
    return arr


@dataclass
class PidGains:
    """Full n_u x n_x gain matrices; a scalar g means g * eye(n_u, n_x)."""

    k_p: np.ndarray
    k_i: np.ndarray
    k_d: np.ndarray
    dt: float

    @classmethod
    def create(cls, n_x: int, n_u: int, dt: float, k_p=0.0, k_i=0.0, k_d=0.0) -> "PidGains":
        if not dt > 0:
            raise ValueError(f"dt must be > 0, got {dt}")
        return cls(_gain(k_p, n_u, n_x, "k_p"), _gain(k_i, n_u, n_x, "k_i"), _gain(k_d, n_u, n_x, "k_d"), dt)


@dataclass
class PidState:
    integral: np.ndarray
    prev_error: np.ndarray
    initialized: bool = False

    @classmethod
    def zeros(cls, n_x: int) -> "PidState":
        return cls(np.zeros(n_x), np.zeros(n_x), False)

    def reset(self):
        self.integral[:] = 0.0
        self.prev_error[:] = 0.0
        self.initialized = False


@dataclass
class PIDFeedback:
    """u_fb = K_p e + K_i * integral(e dt) + K_d (e - e_prev) / dt, with e = x_ref - x.

    The derivative acts on the error and is zero on the first call after a reset.
    `integral_limit` optionally clamps each integral channel (no clamp by default).
    """

    gains: PidGains
    integral_limit: float | None = None
    state: PidState = field(default=None)

    def __post_init__(self):
        if self.state is None:
            self.state = PidState.zeros(self.gains.k_p.shape[1])

    def feedback(self, x, x_ref, state: PidState | None = None) -> tuple[np.ndarray, PidState]:
        """Pure form: returns (u_fb, updated copy of `state`)."""
        g = self.gains
        state = self.state if state is None else state
        e = np.asarray(x_ref, np.float64) - np.asarray(x, np.float64)
        integral = state.integral + e * g.dt
        if self.integral_limit is not None:
            integral = np.clip(integral, -self.integral_limit, self.integral_limit)
        deriv = (e - state.prev_error) / g.dt if state.initialized else np.zeros_like(e)
        u = g.k_p @ e + g.k_i @ integral + g.k_d @ deriv
        return u.astype(FLOAT), PidState(integral, e, True)

    def k(self, x, x_ref) -> np.ndarray:
        """Stateful form: updates the controller's own history."""
        u, self.state = self.feedback(x, x_ref, self.state)
        return u

    def compute_feedback_gains(self, trajectory=None):
        # PID gains are persistent; nothing to recompute for a new trajectory.
        return None

    def reset(self):
        self.state = PidState.zeros(self.gains.k_p.shape[1])
