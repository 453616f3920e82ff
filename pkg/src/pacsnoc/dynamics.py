"""System models, noise models, datasets and closed-loop rollouts.

States are carried with arbitrary leading batch axes, shape ``(..., n)``.
A rollout over a dataset therefore simulates every noise sequence at once,
and a controller whose parameters carry an extra leading axis simulates a
whole population of controllers in one pass.
"""
from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Protocol, Sequence

import numpy as np

from . import autodiff as ad
from .errors import ConfigurationError, NumericalDivergenceError

__all__ = [
    "SystemModel", "ScalarLTI", "RobotConfig", "TwoRobotSystem", "build_robot_system",
    "StepNoise", "NoiseModel", "NoiseDataset", "generate_dataset",
    "Trajectory", "simulate", "rollout", "make_rng",
]


def make_rng(seed: int, *stream: int) -> np.random.Generator:
    """Philox generator keyed on ``(seed, *stream)``; independent streams per key."""
    return np.random.Generator(np.random.Philox(np.random.SeedSequence([int(seed), *map(int, stream)])))


class SystemModel(Protocol):
    state_dim: int
    input_dim: int

    @property
    def nominal_initial_state(self) -> np.ndarray: ...

    def f(self, t: int, xs: Sequence, us: Sequence):
        """Nominal next state from histories ``x_{t-1:0}``, ``u_{t-1:0}``."""


@dataclass(frozen=True)
class ScalarLTI:
    """x_t = a x_{t-1} + b u_{t-1} + w_t."""

    a: float = 0.8
    b: float = 0.1
    x_bar: float = 2.0
    state_dim: int = field(default=1, init=False)
    input_dim: int = field(default=1, init=False)

    @property
    def nominal_initial_state(self) -> np.ndarray:
        return np.array([self.x_bar])

    def f(self, t, xs, us):
        return self.a * xs[-1] + self.b * us[-1]


@dataclass(frozen=True)
class RobotConfig:
    """Two point-mass robots in the plane, each pulled to its target by a P law.

    These are engineering defaults: the P law with critical linear damping
    (kp = 1, c1 = 2, unit mass) brings each robot to rest at its target
    without overshoot, and on the way the two robots collide in the gap
    between the obstacles.
    """

    masses: tuple[float, float] = (1.0, 1.0)
    drag_linear: float = 2.0
    drag_quadratic: float = 0.1
    kp: float = 1.0
    dt: float = 0.05
    starts: tuple[tuple[float, float], tuple[float, float]] = ((-2.0, -2.0), (2.0, -2.0))
    targets: tuple[tuple[float, float], tuple[float, float]] = ((2.0, 2.0), (-2.0, 2.0))
    # cost-side geometry lives here too so one JSON describes a scenario
    obstacles: tuple[tuple[float, float, float], ...] = ((-2.5, 0.0, 1.5), (2.5, 0.0, 1.5))
    safe_distance: float = 0.5
    nu: float = 0.1
    obstacle_margin: float = 0.3
    q_position: float = 1.0
    q_velocity: float = 1.0
    r_input: float = 0.01
    collision_weight: float = 100.0
    obstacle_weight: float = 10.0

    @classmethod
    def from_dict(cls, d: dict) -> "RobotConfig":
        kw = dict(d)
        for key in ("masses", "starts", "targets", "obstacles"):
            if key in kw:
                kw[key] = _as_tuple(kw[key])
        try:
            return cls(**kw)
        except TypeError as exc:
            raise ConfigurationError(f"bad robot config: {exc}") from None

    def to_dict(self) -> dict:
        return json.loads(json.dumps(self.__dict__))


def _as_tuple(x):
    if isinstance(x, (list, tuple)):
        return tuple(_as_tuple(v) for v in x)
    return float(x)


class TwoRobotSystem:
    """8 states ``[p1x, p1y, v1x, v1y, p2x, p2y, v2x, v2y]``, 4 force inputs.

    Explicit Euler on
    ``m dv/dt = -kp (p - p_target) - c1 v - c2 |v| v + u`` (per axis),
    so the proportional prestabilizer is part of ``f``.
    """

    state_dim = 8
    input_dim = 4
    POS = np.array([0, 1, 4, 5])
    VEL = np.array([2, 3, 6, 7])

    def __init__(self, config: RobotConfig = RobotConfig()):
        c = config
        if any(m <= 0 for m in c.masses) or c.dt <= 0:
            raise ConfigurationError("robot masses and time step must be positive")
        self.config = c
        dt = c.dt
        inv_m = np.repeat(1.0 / np.asarray(c.masses, dtype=float), 2)
        A = np.eye(8)
        A[self.POS, self.VEL] += dt
        A[self.VEL, self.POS] += -dt * c.kp * inv_m
        A[self.VEL, self.VEL] += -dt * c.drag_linear * inv_m
        B = np.zeros((8, 4))
        B[self.VEL, np.arange(4)] = dt * inv_m
        target = np.zeros(8)
        target[self.POS] = np.ravel(c.targets)
        self.x_target = target
        self._At = A.T
        self._Bt = B.T
        self._offset = (np.eye(8) - A) @ target  # equilibrium sits at the target
        self._sel_vel = np.zeros((8, 4))
        self._sel_vel[self.VEL, np.arange(4)] = 1.0
        self._c2 = c.drag_quadratic
        x0 = np.zeros(8)
        x0[self.POS] = np.ravel(c.starts)
        self._x_bar = x0

    @property
    def nominal_initial_state(self) -> np.ndarray:
        return self._x_bar.copy()

    def f(self, t, xs, us):
        x, u = xs[-1], us[-1]
        v = ad.matmul(x, self._sel_vel)
        force = u - self._c2 * (ad.abs(v) * v)
        return ad.matmul(x, self._At) + ad.matmul(force, self._Bt) + self._offset

    def positions(self, states: np.ndarray) -> np.ndarray:
        """``(..., 2, 2)`` robot-by-axis positions."""
        p = np.asarray(states)[..., self.POS]
        return p.reshape(p.shape[:-1] + (2, 2))


def build_robot_system(config: RobotConfig | dict | None = None) -> TwoRobotSystem:
    if config is None:
        config = RobotConfig()
    elif isinstance(config, dict):
        config = RobotConfig.from_dict(config)
    return TwoRobotSystem(config)


# ---------------------------------------------------------------- noise

@dataclass(frozen=True)
class StepNoise:
    """One time step's disturbance law: independent Gaussian or exactly zero."""

    mean: tuple[float, ...]
    var: tuple[float, ...] | None = None  # None means degenerate zero

    @property
    def is_zero(self) -> bool:
        return self.var is None

    def to_dict(self) -> dict:
        return {"kind": "zero" if self.is_zero else "gaussian", "mean": list(self.mean),
                "var": None if self.var is None else list(self.var)}


@dataclass(frozen=True)
class NoiseModel:
    """Per-step laws ``D_0 .. D_T``."""

    steps: tuple[StepNoise, ...]

    @property
    def horizon(self) -> int:
        return len(self.steps) - 1

    @property
    def dim(self) -> int:
        return len(self.steps[0].mean)

    @classmethod
    def iid_gaussian(cls, mean, var, horizon: int) -> "NoiseModel":
        step = StepNoise(tuple(np.atleast_1d(mean).astype(float)), tuple(np.atleast_1d(var).astype(float)))
        return cls((step,) * (horizon + 1))

    @classmethod
    def first_step_only(cls, mean, var, horizon: int) -> "NoiseModel":
        first = StepNoise(tuple(np.atleast_1d(mean).astype(float)), tuple(np.atleast_1d(var).astype(float)))
        zero = StepNoise(tuple(0.0 for _ in first.mean))
        return cls((first,) + (zero,) * horizon)

    @classmethod
    def zero(cls, dim: int, horizon: int) -> "NoiseModel":
        return cls((StepNoise(tuple(0.0 for _ in range(dim))),) * (horizon + 1))

    def sample(self, rng: np.random.Generator, s: int) -> np.ndarray:
        out = np.zeros((s, self.horizon + 1, self.dim))
        for t, step in enumerate(self.steps):
            if step.is_zero:
                continue
            mu = np.asarray(step.mean)
            sd = np.sqrt(np.asarray(step.var))
            out[:, t, :] = mu + sd * rng.standard_normal((s, self.dim))
        return out

    def to_dict(self) -> dict:
        return {"steps": [st.to_dict() for st in self.steps]}


@dataclass(frozen=True)
class NoiseDataset:
    """``s`` noise sequences of shape ``(T+1, n)``, stored read-only."""

    sequences: np.ndarray
    seed: int | None = None
    source: str = ""

    def __post_init__(self):
        seq = np.array(self.sequences, dtype=float)
        if seq.ndim != 3 or seq.shape[0] < 1:
            raise ConfigurationError("dataset must have shape (s>=1, T+1, n)")
        seq.flags.writeable = False
        object.__setattr__(self, "sequences", seq)

    @property
    def s(self) -> int:
        return self.sequences.shape[0]

    @property
    def horizon(self) -> int:
        return self.sequences.shape[1] - 1

    @property
    def dim(self) -> int:
        return self.sequences.shape[2]

    def __len__(self):
        return self.s

    def subset(self, idx) -> "NoiseDataset":
        return NoiseDataset(self.sequences[np.atleast_1d(idx)], self.seed, self.source)

    def with_horizon(self, horizon: int) -> "NoiseDataset":
        """Truncate or zero-pad every sequence to ``horizon + 1`` steps."""
        T1 = horizon + 1
        seq = np.zeros((self.s, T1, self.dim))
        keep = min(T1, self.horizon + 1)
        seq[:, :keep] = self.sequences[:, :keep]
        return NoiseDataset(seq, self.seed, self.source)

    def save_csv(self, path: str | Path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["n", "T", "s", "seed"])
            w.writerow([self.dim, self.horizon, self.s, "" if self.seed is None else self.seed])
            for row in self.sequences.reshape(-1, self.dim):
                w.writerow([repr(float(v)) for v in row])

    @classmethod
    def load_csv(cls, path: str | Path) -> "NoiseDataset":
        with open(path, newline="") as fh:
            r = csv.reader(fh)
            next(r)
            n, T, s, seed = next(r)
            vals = np.array([[float(v) for v in row] for row in r])
        n, T, s = int(n), int(T), int(s)
        if vals.shape != (s * (T + 1), n):
            raise ConfigurationError(f"{path}: expected {s * (T + 1)} rows of {n} values")
        return cls(vals.reshape(s, T + 1, n), int(seed) if seed else None, str(path))


def generate_dataset(noise: NoiseModel, s: int, seed: int, stream: int = 0) -> NoiseDataset:
    """Draw ``s`` independent sequences; ``(seed, stream)`` fixes the draw."""
    if int(s) < 1:
        raise ConfigurationError(f"s must be >= 1, got {s}")
    seq = noise.sample(make_rng(seed, stream), int(s))
    return NoiseDataset(seq, seed=int(seed), source=json.dumps({"stream": stream, **noise.to_dict()}))


# ---------------------------------------------------------------- rollouts

@dataclass(frozen=True)
class Trajectory:
    """States and inputs stacked along the time axis: ``(..., T+1, n)``."""

    states: np.ndarray
    inputs: np.ndarray

    def __post_init__(self):
        if self.states.shape[-2] != self.inputs.shape[-2]:
            raise ValueError("states and inputs must have equal length")

    @property
    def horizon(self) -> int:
        return self.states.shape[-2] - 1


def _check_finite(arr, t: int, what: str) -> None:
    v = np.asarray(ad.value(arr))
    if not np.isfinite(v).all():
        idx = None
        if v.ndim > 1:
            rows = ~np.isfinite(v.reshape(-1, v.shape[-1])).all(axis=-1)
            idx = int(np.flatnonzero(rows)[0])
        raise NumericalDivergenceError(f"non-finite {what} at time step {t}", step=t, index=idx)


def simulate(system: SystemModel, controller, noise: np.ndarray, check: bool = True):
    """Closed-loop simulation returning the raw per-step lists ``(xs, us)``.

    ``noise`` has shape ``(T+1, n)`` or ``(B, T+1, n)``. List entries may be
    :class:`autodiff.Var` when the controller parameters are on a tape.
    """
    noise = np.asarray(noise, dtype=float)
    if noise.shape[-1] != system.state_dim:
        raise ConfigurationError(
            f"noise dimension {noise.shape[-1]} != state dimension {system.state_dim}")
    if getattr(controller, "input_dim", system.input_dim) != system.input_dim:
        raise ConfigurationError("controller output dimension does not match the system input")
    if getattr(controller, "state_dim", system.state_dim) != system.state_dim:
        raise ConfigurationError("controller input dimension does not match the system state")
    x_bar = np.asarray(system.nominal_initial_state, dtype=float)
    policy = controller.start(system)
    xs, us = [], []
    for t in range(noise.shape[-2]):
        w = noise[..., t, :]
        x = x_bar + w if t == 0 else system.f(t, xs, us) + w
        if check:
            _check_finite(x, t, "state")
        xs.append(x)
        u = policy(t, xs, us)
        if check:
            _check_finite(u, t, "input")
        us.append(u)
    return xs, us


def rollout(system: SystemModel, controller, noise_seq: np.ndarray) -> Trajectory:
    xs, us = simulate(system, controller, noise_seq)
    shape = np.broadcast_shapes(*(np.shape(ad.value(x)) for x in xs))
    states = np.stack([np.broadcast_to(ad.value(x), shape) for x in xs], axis=-2)
    ushape = np.broadcast_shapes(*(np.shape(ad.value(u)) for u in us))
    inputs = np.stack([np.broadcast_to(ad.value(u), ushape) for u in us], axis=-2)
    return Trajectory(states, inputs)
