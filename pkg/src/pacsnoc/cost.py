"""Stage costs, finite-horizon cost, the tanh cap, and empirical cost."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .dynamics import NoiseDataset, RobotConfig, SystemModel, Trajectory, simulate
from .errors import ConfigurationError, NumericalDivergenceError

__all__ = [
    "QuadraticCost", "RobotCost", "CostTransform",
    "fh_cost", "fh_cost_from_lists", "transform_cost", "empirical_cost",
    "per_sequence_costs", "default_gamma", "collision_penalty",
]


class QuadraticCost:
    """``(x - x_target)' Q (x - x_target) + u' R u``; Q, R given as diagonals or matrices."""

    kind = "quadratic"

    def __init__(self, q, r, target=None):
        self.q = np.atleast_1d(np.asarray(q, dtype=float))
        self.r = np.atleast_1d(np.asarray(r, dtype=float))
        n = self.q.shape[0]
        self.target = np.zeros(n) if target is None else np.asarray(target, dtype=float)
        for name, m in (("Q", self.q), ("R", self.r)):
            eig = m if m.ndim == 1 else np.linalg.eigvalsh(0.5 * (m + m.T))
            if np.any(eig < -1e-12):
                raise ConfigurationError(f"{name} must be positive semidefinite")

    @staticmethod
    def _form(m, v):
        if m.ndim == 1:
            return ad.sum(m * ad.square(v), axis=-1)
        return ad.sum(ad.matmul(v, m) * v, axis=-1)

    def __call__(self, x, u):
        return self._form(self.q, x - self.target) + self._form(self.r, u)


def collision_penalty(d, safe_distance: float, nu: float):
    """``(d + nu)^-2`` for ``d < safe_distance``, else 0 (discontinuous at the threshold)."""
    mask = ad.value(d) < safe_distance
    return ad.where(mask, ad.reciprocal(ad.square(d + nu)), 0.0)


def _norm_last(v):
    sq = ad.sum(ad.square(v), axis=-1)
    pos = ad.value(sq) > 0
    return ad.where(pos, ad.sqrt(ad.where(pos, sq, 1.0)), 0.0)


class RobotCost:
    """Quadratic tracking plus inter-robot collision and obstacle penalties.

    The obstacle term mirrors the collision term: for each robot and obstacle,
    with ``g`` the distance to the obstacle surface clamped at zero,
    ``(g + nu)^-2`` whenever ``g`` is below ``obstacle_margin``.
    """

    kind = "robot-composite"

    def __init__(self, config: RobotConfig, x_target: np.ndarray):
        c = config
        q = np.tile([c.q_position, c.q_position, c.q_velocity, c.q_velocity], 2)
        self.quadratic = QuadraticCost(q, np.full(4, c.r_input), x_target)
        self.safe_distance = c.safe_distance
        self.nu = c.nu
        self.obstacles = np.asarray(c.obstacles, dtype=float).reshape(-1, 3)
        self.obstacle_margin = c.obstacle_margin
        self.collision_weight = c.collision_weight
        self.obstacle_weight = c.obstacle_weight
        self._diff = np.zeros((8, 2))
        self._diff[[0, 1], [0, 1]] = 1.0
        self._diff[[4, 5], [0, 1]] = -1.0
        self._pos = [np.zeros((8, 2)), np.zeros((8, 2))]
        self._pos[0][[0, 1], [0, 1]] = 1.0
        self._pos[1][[4, 5], [0, 1]] = 1.0

    def distance(self, x):
        return _norm_last(ad.matmul(x, self._diff))

    def collision_term(self, x):
        return collision_penalty(self.distance(x), self.safe_distance, self.nu)

    def obstacle_term(self, x):
        total = 0.0
        for sel in self._pos:
            p = ad.matmul(x, sel)
            for cx, cy, rad in self.obstacles:
                gap = ad.clip(_norm_last(p - np.array([cx, cy])) - rad, 0.0, np.inf)
                total = total + collision_penalty(gap, self.obstacle_margin, self.nu)
        return total

    def __call__(self, x, u):
        return (self.quadratic(x, u)
                + self.collision_weight * self.collision_term(x)
                + self.obstacle_weight * self.obstacle_term(x))


@dataclass(frozen=True)
class CostTransform:
    """``C tanh(L / gamma)``: maps ``[0, inf)`` into ``[0, C)``."""

    gamma: float
    C: float = 1.0

    def __post_init__(self):
        if not (self.gamma > 0 and self.C > 0):
            raise ConfigurationError("transform needs gamma > 0 and C > 0")

    def __call__(self, L):
        return self.C * ad.tanh(L * (1.0 / self.gamma))


def transform_cost(ct: CostTransform, L):
    return ct(L)


def default_gamma(stage, x_bar, input_dim: int) -> float:
    """Stage cost at the nominal initial state with zero input, or 1 if that is 0."""
    g = float(np.asarray(stage(np.asarray(x_bar, dtype=float), np.zeros(input_dim))))
    return g if g > 0 else 1.0


def fh_cost_from_lists(stage, xs: Sequence, us: Sequence, check: bool = True):
    """Time-averaged stage cost; divides by ``max(T, 1)``."""
    total = 0.0
    for t, (x, u) in enumerate(zip(xs, us)):
        lt = stage(x, u)
        if check and not np.all(np.isfinite(ad.value(lt))):
            raise NumericalDivergenceError(f"non-finite stage cost at time step {t}", step=t)
        total = total + lt
    return total * (1.0 / max(len(xs) - 1, 1))


def fh_cost(stage, traj: Trajectory):
    xs = np.moveaxis(traj.states, -2, 0)
    us = np.moveaxis(traj.inputs, -2, 0)
    out = fh_cost_from_lists(stage, list(xs), list(us))
    return float(out) if np.ndim(out) == 0 else out


def per_sequence_costs(system: SystemModel, controller, stage, dataset: NoiseDataset | np.ndarray,
                       transform: CostTransform | None = None):
    """FH cost (optionally capped) of every sequence: shape ``(..., s)``."""
    noise = dataset.sequences if isinstance(dataset, NoiseDataset) else np.asarray(dataset)
    try:
        xs, us = simulate(system, controller, noise)
        L = fh_cost_from_lists(stage, xs, us)
    except NumericalDivergenceError as exc:
        raise NumericalDivergenceError(f"{exc} (sequence {exc.index})", exc.step, exc.index) from None
    return transform(L) if transform is not None else L


def empirical_cost(system: SystemModel, controller, stage, dataset: NoiseDataset,
                   transform: CostTransform | None = None):
    """Mean over the dataset's sequences of the (optionally capped) FH cost."""
    L = per_sequence_costs(system, controller, stage, dataset, transform)
    out = ad.mean(L, axis=-1)
    if ad.is_var(out):
        return out
    return float(out) if np.ndim(out) == 0 else np.asarray(out)
