"""Shared types: model dimensions, validated vectors/trajectories and the scenario config.

Hot-path arrays are float32. Per-trajectory cost accumulation happens in float64
inside the rollout engine.
"""
from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Mapping, Sequence

import numpy as np
import yaml

FLOAT = np.float32

CONTROLLER_KINDS = ("mppi", "dmd", "cem", "tube")
DYNAMICS_KINDS = ("unicycle", "cartpole", "diff_drive", "double_integrator")
COST_KINDS = ("road", "diff_drive_nav", "circle_track", "quadratic")


class ConfigError(ValueError):
    """Invalid or unparsable scenario configuration."""

    def __init__(self, message: str, key: str | None = None, line: int | None = None):
        self.key = key
        self.line = line
        where = []
        if key is not None:
            where.append(f"key '{key}'")
        if line is not None:
            where.append(f"line {line}")
        super().__init__(f"{message} ({', '.join(where)})" if where else message)


class NonFiniteError(FloatingPointError):
    """A state, output or cost became NaN/Inf."""

    def __init__(self, message: str, *, sample: int | None = None,
                 timestep: int | None = None, channel: int | None = None):
        self.sample = sample
        self.timestep = timestep
        self.channel = channel
        super().__init__(message)


@dataclass(frozen=True)
class ModelDims:
    n_x: int
    n_u: int
    n_y: int

    def __post_init__(self):
        for name in ("n_x", "n_u", "n_y"):
            if int(getattr(self, name)) < 1:
                raise ValueError(f"{name} must be >= 1, got {getattr(self, name)}")


def as_vector(values, dim: int, what: str = "vector") -> np.ndarray:
    """Return a read-only float32 copy of `values`, checking length and finiteness."""
    arr = np.array(values, dtype=FLOAT).reshape(-1)
    if arr.shape != (dim,):
        raise ValueError(f"{what} must have {dim} entries, got {arr.size}")
    bad = np.flatnonzero(~np.isfinite(arr))
    if bad.size:
        raise NonFiniteError(f"{what} has non-finite entry at index {bad[0]}", channel=int(bad[0]))
    arr.flags.writeable = False
    return arr


def state_vector(values, dims: ModelDims) -> np.ndarray:
    return as_vector(values, dims.n_x, "state")


def control_vector(values, dims: ModelDims) -> np.ndarray:
    return as_vector(values, dims.n_u, "control")


def output_vector(values, dims: ModelDims) -> np.ndarray:
    return as_vector(values, dims.n_y, "output")


def _frozen_matrix(values, width: int, what: str) -> np.ndarray:
    arr = np.array(values, dtype=FLOAT)
    if arr.ndim == 1 and width == 1:
        arr = arr[:, None]
    if arr.ndim != 2 or arr.shape[1] != width or arr.shape[0] < 1:
        raise ValueError(f"{what} must have shape (T>=1, {width}), got {arr.shape}")
    if not np.all(np.isfinite(arr)):
        t, c = np.argwhere(~np.isfinite(arr))[0]
        raise NonFiniteError(f"{what} non-finite at t={t}, channel={c}", timestep=int(t), channel=int(c))
    arr.flags.writeable = False
    return arr


@dataclass(frozen=True)
class ControlTrajectory:
    """T control vectors spaced `dt` seconds apart."""

    controls: np.ndarray
    dt: float

    def __init__(self, controls, dt: float):
        if not dt > 0:
            raise ValueError(f"dt must be > 0, got {dt}")
        arr = np.asarray(controls)
        width = arr.shape[1] if arr.ndim == 2 else 1
        object.__setattr__(self, "controls", _frozen_matrix(arr, width, "controls"))
        object.__setattr__(self, "dt", float(dt))

    @property
    def horizon(self) -> int:
        return self.controls.shape[0]

    @property
    def n_u(self) -> int:
        return self.controls.shape[1]

    @classmethod
    def zeros(cls, horizon: int, n_u: int, dt: float) -> "ControlTrajectory":
        return cls(np.zeros((horizon, n_u), dtype=FLOAT), dt)

    def __eq__(self, other):
        if not isinstance(other, ControlTrajectory):
            return NotImplemented
        return self.dt == other.dt and np.array_equal(self.controls, other.controls)

    __hash__ = None


@dataclass(frozen=True)
class OutputTrajectory:
    outputs: np.ndarray

    def __init__(self, outputs):
        arr = np.asarray(outputs)
        width = arr.shape[1] if arr.ndim == 2 else 1
        object.__setattr__(self, "outputs", _frozen_matrix(arr, width, "outputs"))

    def __len__(self):
        return self.outputs.shape[0]

    def __eq__(self, other):
        if not isinstance(other, OutputTrajectory):
            return NotImplemented
        return np.array_equal(self.outputs, other.outputs)

    __hash__ = None


# ---------------------------------------------------------------------------
# Scenario configuration
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class ScenarioConfig:
    """Everything needed to build a controller, its models and a plant.

    Defaults follow the differential-drive benchmark table (dt=0.02 s, T=100,
    lambda=1.0, control std 0.2).
    """

    dt: float = 0.02
    horizon: int = 100
    num_samples: int = 1024
    lambda_: float = 1.0
    iterations: int = 1
    seed: int = 0
    control_std: tuple = (0.2,)
    zero_mean_fraction: float = 0.0
    include_mean_sample: bool = False
    importance_sampling: bool = False
    controller: str = "mppi"
    controller_params: Mapping[str, Any] = field(default_factory=dict)
    dynamics: str = "diff_drive"
    dynamics_params: Mapping[str, Any] = field(default_factory=dict)
    cost: str = "diff_drive_nav"
    cost_params: Mapping[str, Any] = field(default_factory=dict)
    replan_rate: float = 50.0
    dt_min: float = 0.02
    initial_state: tuple = ()   # empty means the model's zero state


# key path in the YAML file -> (field name, converter)
_SCALAR_KEYS = {
    ("dt",): ("dt", float),
    ("horizon",): ("horizon", int),
    ("num_samples",): ("num_samples", int),
    ("lambda",): ("lambda_", float),
    ("iterations",): ("iterations", int),
    ("seed",): ("seed", int),
    ("sampling", "std"): ("control_std", lambda v: tuple(float(s) for s in np.atleast_1d(v))),
    ("sampling", "zero_mean_fraction"): ("zero_mean_fraction", float),
    ("sampling", "include_mean_sample"): ("include_mean_sample", bool),
    ("sampling", "importance_sampling"): ("importance_sampling", bool),
    ("plant", "replan_rate"): ("replan_rate", float),
    ("plant", "dt_min"): ("dt_min", float),
    ("plant", "initial_state"): ("initial_state", lambda v: tuple(float(s) for s in np.atleast_1d(v))),
}
_KIND_SECTIONS = {"controller": "controller", "dynamics": "dynamics", "cost": "cost"}
_FIELD_TO_KEY = {f: ".".join(k) for k, (f, _) in _SCALAR_KEYS.items()}
_FIELD_TO_KEY.update({"controller": "controller.kind", "dynamics": "dynamics.kind", "cost": "cost.kind"})


def _line_index(text: str) -> dict[tuple, int]:
    """Map every key path in a YAML document to its 1-based line number."""
    lines: dict[tuple, int] = {}
    root = yaml.compose(text, Loader=yaml.SafeLoader)

    def walk(node, prefix):
        if isinstance(node, yaml.MappingNode):
            for key_node, value_node in node.value:
                path = prefix + (str(key_node.value),)
                lines[path] = key_node.start_mark.line + 1
                walk(value_node, path)

    if root is not None:
        walk(root, ())
    return lines


def validate(config: ScenarioConfig) -> list[str]:
    """Return every violated invariant (empty list means the config is valid)."""
    errors = []

    def check(ok, fld, msg):
        if not ok:
            errors.append(f"{_FIELD_TO_KEY.get(fld, fld)}: {msg}")

    check(config.dt > 0, "dt", f"must be > 0, got {config.dt}")
    check(config.horizon >= 1, "horizon", f"must be >= 1, got {config.horizon}")
    check(config.num_samples >= 1, "num_samples", f"must be >= 1, got {config.num_samples}")
    check(config.lambda_ > 0, "lambda_", f"must be > 0, got {config.lambda_}")
    check(config.iterations >= 1, "iterations", f"must be >= 1, got {config.iterations}")
    check(len(config.control_std) >= 1 and all(s > 0 for s in config.control_std),
          "control_std", f"entries must be > 0, got {list(config.control_std)}")
    check(0.0 <= config.zero_mean_fraction <= 1.0, "zero_mean_fraction",
          f"must be in [0, 1], got {config.zero_mean_fraction}")
    check(config.replan_rate > 0, "replan_rate", f"must be > 0, got {config.replan_rate}")
    check(config.dt_min > 0, "dt_min", f"must be > 0, got {config.dt_min}")
    check(all(math.isfinite(v) for v in config.initial_state), "initial_state",
          f"entries must be finite, got {list(config.initial_state)}")
    check(config.controller in CONTROLLER_KINDS, "controller",
          f"unknown kind {config.controller!r}; expected one of {CONTROLLER_KINDS}")
    check(config.dynamics in DYNAMICS_KINDS, "dynamics",
          f"unknown kind {config.dynamics!r}; expected one of {DYNAMICS_KINDS}")
    check(config.cost in COST_KINDS, "cost", f"unknown kind {config.cost!r}; expected one of {COST_KINDS}")

    cp = config.controller_params
    if "gamma" in cp:
        g = np.atleast_1d(np.asarray(cp["gamma"], dtype=float))
        check(bool(np.all(g >= 0)), "controller.gamma", f"must be >= 0, got {cp['gamma']}")
    if "elite_fraction" in cp:
        ef = float(cp["elite_fraction"])
        check(0 < ef <= 1 and np.ceil(ef * config.num_samples) >= 1, "controller.elite_fraction",
              f"must be in (0, 1], got {ef}")
    return errors


def parse_scenario(text: str) -> ScenarioConfig:
    """Parse a YAML scenario document; see docs in README for the key schema."""
    try:
        data = yaml.safe_load(text)
        lines = _line_index(text)
    except yaml.YAMLError as exc:
        mark = getattr(exc, "problem_mark", None)
        raise ConfigError(f"YAML parse error: {getattr(exc, 'problem', exc)}",
                          line=None if mark is None else mark.line + 1) from exc
    if data is None:
        data = {}
    if not isinstance(data, dict):
        raise ConfigError("top level must be a mapping", line=1)

    values: dict[str, Any] = {}
    sections = {"sampling", "plant", *_KIND_SECTIONS}
    for key, val in data.items():
        path = (str(key),)
        if path in _SCALAR_KEYS:
            _convert(values, path, val, lines)
        elif key in sections:
            if not isinstance(val, dict):
                raise ConfigError("section must be a mapping", key=key, line=lines.get(path))
            extra = {}
            for sub, subval in val.items():
                subpath = (str(key), str(sub))
                if subpath in _SCALAR_KEYS:
                    _convert(values, subpath, subval, lines)
                elif key in _KIND_SECTIONS and sub == "kind":
                    values[_KIND_SECTIONS[key]] = str(subval)
                elif key in _KIND_SECTIONS:
                    extra[str(sub)] = subval
                else:
                    raise ConfigError("unknown key", key=".".join(subpath), line=lines.get(subpath))
            if key in _KIND_SECTIONS:
                values[f"{_KIND_SECTIONS[key]}_params"] = extra
        else:
            raise ConfigError("unknown key", key=str(key), line=lines.get(path))

    config = ScenarioConfig(**values)
    errors = validate(config)
    if errors:
        first_key = errors[0].split(":", 1)[0]
        raise ConfigError("; ".join(errors), key=first_key, line=lines.get(tuple(first_key.split("."))))
    return config


def _convert(values, path, raw, lines):
    fld, conv = _SCALAR_KEYS[path]
    try:
        if conv is bool and not isinstance(raw, bool):
            raise TypeError("expected true/false")
        values[fld] = conv(raw)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"bad value {raw!r}: {exc}", key=".".join(path), line=lines.get(path)) from exc


def load_scenario(path) -> ScenarioConfig:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read {path}: {exc}") from exc
    return parse_scenario(text)


def scenario_to_dict(config: ScenarioConfig) -> dict:
    out: dict[str, Any] = {}
    for path, (fld, _) in _SCALAR_KEYS.items():
        val = getattr(config, fld)
        if isinstance(val, tuple):
            val = list(val)
        node = out
        for part in path[:-1]:
            node = node.setdefault(part, {})
        node[path[-1]] = val
    for section, fld in _KIND_SECTIONS.items():
        node = out.setdefault(section, {})
        node["kind"] = getattr(config, fld)
        node.update(_plain(dict(getattr(config, f"{fld}_params"))))
    return out


def _plain(obj):
    if isinstance(obj, dict):
        return {k: _plain(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple, np.ndarray)):
        return [_plain(v) for v in obj]
    if isinstance(obj, np.generic):
        return obj.item()
    return obj


def dump_scenario(config: ScenarioConfig, path=None) -> str:
    text = yaml.safe_dump(scenario_to_dict(config), sort_keys=False)
    if path is not None:
        Path(path).write_text(text)
    return text


def replace(config: ScenarioConfig, **changes) -> ScenarioConfig:
    return dataclasses.replace(config, **changes)
