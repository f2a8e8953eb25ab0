"""Gaussian control sampling.

Noise is drawn from counter-based Philox streams keyed by the sampler seed. Each
generate call gets its own generation index, and each fixed-size block of
samples its own stream, so sample m's noise depends only on
(seed, generation, m) and never on how many workers produced it.
"""
from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from .core import FLOAT, ControlTrajectory

BLOCK = 1024


@dataclass(frozen=True)
class GaussianSamplerConfig:
    std: object = 0.2
    zero_mean_fraction: float = 0.0
    include_mean_sample: bool = False
    importance_sampling: bool = False
    seed: int = 0

    def __post_init__(self):
        std = np.asarray(self.std, dtype=float)
        if std.size == 0 or not np.all(std > 0) or not np.all(np.isfinite(std)):
            raise ValueError(f"std must be finite and > 0 everywhere, got {self.std}")
        if not 0.0 <= self.zero_mean_fraction <= 1.0:
            raise ValueError(f"zero_mean_fraction must be in [0, 1], got {self.zero_mean_fraction}")


@dataclass(frozen=True, eq=False)
class NoiseBatch:
    """One set of M sampled control sequences for S systems sharing the noise.

    noise:          (M, T, n_u) raw draws epsilon ~ N(0, std^2); zero for the mean sample
    controls:       (S, M, T, n_u) sampled controls v
    perturbations:  (S, M, T, n_u) v - mean, the quantity the update law averages
    """

    noise: np.ndarray
    controls: np.ndarray
    perturbations: np.ndarray
    means: np.ndarray
    std: np.ndarray
    zero_mean: np.ndarray
    mean_sample: np.ndarray
    importance: np.ndarray
    generation: int

    @property
    def num_samples(self) -> int:
        return self.noise.shape[0]

    @property
    def horizon(self) -> int:
        return self.noise.shape[1]

    @property
    def num_systems(self) -> int:
        return self.controls.shape[0]

    def with_systems(self, systems) -> "NoiseBatch":
        """View restricted to the given system indices."""
        idx = list(systems)
        return NoiseBatch(self.noise, self.controls[idx], self.perturbations[idx], self.means[idx],
                          self.std, self.zero_mean, self.mean_sample, self.importance, self.generation)


def zero_mean_count(fraction: float, num_samples: int, include_mean_sample: bool) -> int:
    k = math.ceil(round(fraction * num_samples, 9))
    return min(k, num_samples - (1 if include_mean_sample else 0))


def _as_means(mean) -> np.ndarray:
    if isinstance(mean, ControlTrajectory):
        return mean.controls[None].astype(FLOAT)
    if isinstance(mean, (list, tuple)) and mean and isinstance(mean[0], ControlTrajectory):
        return np.stack([m.controls for m in mean]).astype(FLOAT)
    arr = np.asarray(mean, dtype=FLOAT)
    if arr.ndim == 2:
        arr = arr[None]
    if arr.ndim != 3:
        raise ValueError(f"mean must be (T, n_u) or (S, T, n_u), got shape {arr.shape}")
    return arr


class NoiseCache:
    """Holds the most recent standard-normal draw so samplers with the same seed
    stepping in lockstep (e.g. a parameter sweep) generate it only once."""

    def __init__(self):
        self._key = None
        self._value = None

    def get(self, key, make):
        if key != self._key:
            value = make()
            value.flags.writeable = False
            self._key, self._value = key, value
        return self._value


class GaussianSampler:
    """Samples v = mean + eps (or 0 + eps for the zero-mean share), eps ~ N(0, std_t^2)."""

    name = "gaussian"

    def __init__(self, config: GaussianSamplerConfig | None = None, workers: int = 1,
                 cache: "NoiseCache | None" = None, **kwargs):
        self.config = config or GaussianSamplerConfig(**kwargs)
        self.workers = max(1, int(workers))
        self.cache = cache
        self._generation = 0

    @property
    def seed(self) -> int:
        return self.config.seed

    def reset(self, seed: int | None = None):
        if seed is not None:
            self.config = GaussianSamplerConfig(**{**self.config.__dict__, "seed": seed})
        self._generation = 0

    def std_matrix(self, horizon: int, n_u: int) -> np.ndarray:
        std = np.asarray(self.config.std, dtype=FLOAT)
        if std.ndim <= 1:
            std = np.broadcast_to(std.reshape(1, -1), (horizon, n_u))
        elif std.shape != (horizon, n_u):
            raise ValueError(f"time-varying std must be ({horizon}, {n_u}), got {std.shape}")
        return np.ascontiguousarray(std, dtype=FLOAT)

    def _draw(self, generation: int, num_samples: int, horizon: int, n_u: int) -> np.ndarray:
        z = np.empty((num_samples, horizon, n_u), dtype=FLOAT)
        key = np.uint64(self.config.seed & 0xFFFFFFFFFFFFFFFF)

        def fill(block):
            lo = block * BLOCK
            hi = min(num_samples, lo + BLOCK)
            bg = np.random.Philox(key=int(key), counter=[0, 0, block, generation])
            np.random.Generator(bg).standard_normal(out=z[lo:hi], dtype=FLOAT)

        blocks = range((num_samples + BLOCK - 1) // BLOCK)
        if self.workers > 1 and len(blocks) > 1:
            with ThreadPoolExecutor(self.workers) as pool:
                list(pool.map(fill, blocks))
        else:
            for b in blocks:
                fill(b)
        return z

    def generate_samples(self, mean, num_samples: int) -> NoiseBatch:
        """Draw `num_samples` control sequences about `mean` (one or S systems)."""
        if num_samples < 1:
            raise ValueError(f"num_samples must be >= 1, got {num_samples}")
        means = _as_means(mean)
        S, T, n_u = means.shape
        cfg = self.config
        generation = self._generation
        self._generation += 1

        std = self.std_matrix(T, n_u)
        if self.cache is None:
            noise = self._draw(generation, num_samples, T, n_u)
            noise *= std[None]
        else:
            z = self.cache.get((cfg.seed, generation, num_samples, T, n_u),
                               lambda: self._draw(generation, num_samples, T, n_u))
            noise = z * std[None]

        mean_sample = np.zeros(num_samples, bool)
        zero_mean = np.zeros(num_samples, bool)
        start = 0
        if cfg.include_mean_sample:
            mean_sample[0] = True
            noise[0] = 0.0
            start = 1
        k = zero_mean_count(cfg.zero_mean_fraction, num_samples, cfg.include_mean_sample)
        zero_mean[start:start + k] = True

        controls = means[:, None, :, :] + noise[None]
        if k:
            perturbations = np.broadcast_to(noise[None], controls.shape).copy()
            controls[:, zero_mean] = noise[zero_mean][None]
            perturbations[:, zero_mean] = controls[:, zero_mean] - means[:, None]
        else:
            # Every system shares the same perturbations: a read-only view, no copy.
            perturbations = np.broadcast_to(noise[None], controls.shape)
        importance = np.full(num_samples, bool(cfg.importance_sampling))
        for arr in (noise, controls, perturbations, means, std, zero_mean, mean_sample, importance):
            if arr.flags.writeable:
                arr.flags.writeable = False
        return NoiseBatch(noise, controls, perturbations, means, std, zero_mean, mean_sample,
                          importance, generation)


def read_control_sample(batch: NoiseBatch, m: int, t: int, y=None, system: int = 0) -> np.ndarray:
    """Control of sample m at time t. `y` is accepted for output-conditioned
    distributions; the Gaussian sampler ignores it."""
    M, T = batch.num_samples, batch.horizon
    if not (0 <= m < M and 0 <= t < T and 0 <= system < batch.num_systems):
        raise IndexError(f"sample index (system={system}, m={m}, t={t}) out of range "
                         f"(S={batch.num_systems}, M={M}, T={T})")
    return batch.controls[system, m, t]


def importance_weight_adjustment(batch: NoiseBatch, lambda_: float, enabled=None) -> np.ndarray:
    """Per-sample additive cost lambda * sum_t u_t^T Sigma_t^-1 eps_t, shape (S, M).

    u_t is the system's mean control, eps_t = v_t - u_t and Sigma_t = diag(std_t^2).
    `enabled` overrides the batch's per-sample flags.
    """
    mask = batch.importance if enabled is None else np.broadcast_to(np.asarray(enabled, bool),
                                                                    (batch.num_samples,))
    out = np.zeros((batch.num_systems, batch.num_samples))
    if not mask.any():
        return out
    scaled_mean = batch.means.astype(np.float64) / batch.std.astype(np.float64) ** 2  # (S, T, n_u)
    eps = batch.perturbations[:, mask].astype(np.float64)  # (S, k, T, n_u)
    out[:, mask] = lambda_ * np.einsum("stj,sktj->sk", scaled_mean, eps)
    return out
