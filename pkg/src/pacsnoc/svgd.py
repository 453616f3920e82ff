"""Gradients of the empirical cost and Stein variational gradient descent.

Gradients come from the reverse-mode tape in :mod:`pacsnoc.autodiff`, run
through the rollout, stage cost, cap and (for RENs) the realization map. The
affine/scalar-LTI pairing additionally has a forward-sensitivity path used as
an independent check and as the fast path for grid-sized batches.
"""
from __future__ import annotations

import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

import numpy as np
from scipy.spatial.distance import pdist

from . import autodiff as ad
from .controllers import GAIN_BOUNDS, AffineArchitecture, ControllerParams
from .cost import CostTransform, QuadraticCost, empirical_cost
from .dynamics import NoiseDataset, ScalarLTI, make_rng
from .errors import NumericalDivergenceError, TrainingDivergedError

__all__ = [
    "GradientReport", "ClosedLoopObjective", "grad_empirical_cost", "affine_lti_value_and_grad",
    "rbf_kernel", "svgd_direction", "AdaGrad", "svgd_step", "SVGDConfig", "ParticleEnsemble",
    "train_svgd", "adam_minimize",
]


@dataclass
class GradientReport:
    gradient: np.ndarray
    value: float
    evaluations: int = 1
    fd_residual: float | None = None

    def __post_init__(self):
        if not np.all(np.isfinite(self.gradient)):
            bad = int(np.flatnonzero(~np.isfinite(self.gradient))[0])
            raise NumericalDivergenceError(f"non-finite gradient entry at coordinate {bad}", index=bad)


class ClosedLoopObjective:
    """``theta -> L(theta, S)`` for a fixed plant, architecture, stage cost and dataset."""

    def __init__(self, system, arch, stage, dataset: NoiseDataset, transform: CostTransform | None = None,
                 workers: int = 1):
        self.system = system
        self.arch = arch
        self.stage = stage
        self.dataset = dataset
        self.transform = transform
        self.workers = workers
        self._analytic = (isinstance(arch, AffineArchitecture) and isinstance(system, ScalarLTI)
                          and isinstance(stage, QuadraticCost) and stage.q.ndim == 1 and stage.r.ndim == 1)

    def _cost(self, theta):
        ctrl = self.arch.build(theta, self.system)
        return empirical_cost(self.system, ctrl, self.stage, self.dataset, self.transform)

    def value(self, theta) -> float:
        return float(self._cost(np.asarray(theta, dtype=float)))

    def value_and_grad(self, theta) -> tuple[float, np.ndarray]:
        """Reverse-mode gradient through the closed loop."""
        v, g = ad.value_and_grad(self._cost, np.asarray(theta, dtype=float))
        GradientReport(g, v)  # validates finiteness
        return v, g

    def values(self, thetas: np.ndarray, chunk: int = 1024) -> np.ndarray:
        thetas = np.atleast_2d(np.asarray(thetas, dtype=float))
        if isinstance(self.arch, AffineArchitecture):
            out = []
            for i in range(0, len(thetas), chunk):
                ctrl = self.arch.build_batch(thetas[i:i + chunk])
                out.append(np.atleast_1d(empirical_cost(self.system, ctrl, self.stage, self.dataset,
                                                        self.transform)))
            return np.concatenate(out)
        return np.array(self._map(self.value, thetas))

    def values_and_grads(self, thetas: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        thetas = np.atleast_2d(np.asarray(thetas, dtype=float))
        if self._analytic:
            return affine_lti_value_and_grad(self.system, self.stage, self.dataset, thetas, self.transform)
        out = self._map(self.value_and_grad, thetas)
        return np.array([o[0] for o in out]), np.stack([o[1] for o in out])

    def _map(self, fn, thetas):
        if self.workers > 1 and len(thetas) > 1:
            with ProcessPoolExecutor(self.workers) as pool:
                return list(pool.map(fn, thetas))
        return [fn(th) for th in thetas]


def grad_empirical_cost(system, arch, theta, stage, dataset: NoiseDataset,
                        transform: CostTransform | None = None) -> GradientReport:
    obj = ClosedLoopObjective(system, arch, stage, dataset, transform)
    v, g = obj.value_and_grad(theta)
    return GradientReport(g, v)


def affine_lti_value_and_grad(system: ScalarLTI, stage: QuadraticCost, dataset: NoiseDataset,
                              thetas: np.ndarray, transform: CostTransform | None = None,
                              bounds: tuple[float, float] = GAIN_BOUNDS):
    """Forward sensitivities of the scalar closed loop for a batch of ``[k, beta]``.

    Returns ``(values (N,), grads (N, 2))``.
    """
    thetas = np.atleast_2d(np.asarray(thetas, dtype=float))
    w = dataset.sequences[..., 0]  # (s, T+1)
    k = thetas[:, 0:1]
    beta = thetas[:, 1:2]
    kp = np.clip(k, *bounds)
    dkp = ((k >= bounds[0]) & (k <= bounds[1])).astype(float)
    q, r = float(stage.q[0]), float(stage.r[0])
    xt = float(stage.target[0])
    a, b = system.a, system.b
    N, s = len(thetas), w.shape[0]
    x = np.broadcast_to(system.x_bar + w[:, 0], (N, s)).copy()
    dx_k = np.zeros((N, s))
    dx_b = np.zeros((N, s))
    L = np.zeros((N, s))
    dL_k = np.zeros((N, s))
    dL_b = np.zeros((N, s))
    T1 = w.shape[1]
    for t in range(T1):
        u = -(kp * x + beta)
        du_k = -(dkp * x + kp * dx_k)
        du_b = -(kp * dx_b + 1.0)
        e = x - xt
        L += q * e * e + r * u * u
        dL_k += 2 * q * e * dx_k + 2 * r * u * du_k
        dL_b += 2 * q * e * dx_b + 2 * r * u * du_b
        if t + 1 < T1:
            x = a * x + b * u + w[:, t + 1]
            dx_k = a * dx_k + b * du_k
            dx_b = a * dx_b + b * du_b
    div = max(T1 - 1, 1)
    L, dL_k, dL_b = L / div, dL_k / div, dL_b / div
    if transform is not None:
        th = np.tanh(L / transform.gamma)
        scale = transform.C * (1 - th * th) / transform.gamma
        L, dL_k, dL_b = transform.C * th, scale * dL_k, scale * dL_b
    return L.mean(axis=1), np.stack([dL_k.mean(axis=1), dL_b.mean(axis=1)], axis=1)


# ---------------------------------------------------------------- SVGD

def rbf_kernel(X: np.ndarray) -> tuple[np.ndarray, float]:
    """``exp(-|x - y|^2 / h)`` with ``h = median(|x - y|)^2 / log(K + 1)``; ``h = 1`` if degenerate."""
    K = len(X)
    sq = np.sum((X[:, None, :] - X[None, :, :]) ** 2, axis=-1)
    h = 1.0
    if K > 1:
        med = float(np.median(pdist(X)))
        if med > 0:
            h = med * med / math.log(K + 1)
    return np.exp(-sq / h), h


def svgd_direction(X: np.ndarray, scores: np.ndarray) -> tuple[np.ndarray, float]:
    """``phi(x_i) = mean_j [k(x_j, x_i) score(x_j) + grad_{x_j} k(x_j, x_i)]``."""
    Kxy, h = rbf_kernel(X)
    repulse = (2.0 / h) * (X * Kxy.sum(axis=1, keepdims=True) - Kxy @ X)
    return (Kxy @ scores + repulse) / len(X), h


class AdaGrad:
    """Per-coordinate step scaling with an exponentially averaged square-gradient history."""

    def __init__(self, alpha: float = 0.9, fudge: float = 1e-6):
        self.alpha = alpha
        self.fudge = fudge
        self.hist = None

    def scale(self, phi: np.ndarray) -> np.ndarray:
        if self.hist is None:
            self.hist = phi * phi
        else:
            self.hist = self.alpha * self.hist + (1 - self.alpha) * phi * phi
        return phi / (self.fudge + np.sqrt(self.hist))


def svgd_step(particles: np.ndarray, posterior, step_size: float, optimizer: AdaGrad | None = None,
              scores=None):
    """One SVGD move. Returns ``(new_particles, info)``.

    Without ``optimizer`` the move is ``x + step_size * phi(x)``.
    """
    X = np.asarray(particles, dtype=float)
    if scores is None:
        scores, costs = posterior.scores(X)
    else:
        costs = None
    phi, h = svgd_direction(X, scores)
    delta = optimizer.scale(phi) if optimizer is not None else phi
    X_new = X + step_size * delta
    project = getattr(getattr(posterior, "prior", None), "project", None)
    if project is not None and step_size != 0:
        X_new = project(X_new)
    info = {"bandwidth": h, "costs": costs, "score_norm": np.linalg.norm(scores, axis=1)}
    return X_new, info


@dataclass
class SVGDConfig:
    K: int = 16
    iterations: int = 500
    step_size: float = 0.05
    seed: int = 0
    alpha: float = 0.9
    divergence_factor: float = 10.0


@dataclass
class ParticleEnsemble:
    particles: np.ndarray
    iteration: int = 0
    seed: int = 0
    tag: str = ""
    hyperparameters: dict = field(default_factory=dict)

    @property
    def K(self) -> int:
        return len(self.particles)

    def sample(self, seed: int, stream: int = 23) -> tuple[int, np.ndarray]:
        """Uniform choice of one particle."""
        i = int(make_rng(seed, stream).integers(self.K))
        return i, self.particles[i].copy()

    def to_records(self) -> list[dict]:
        return [ControllerParams(self.tag, p, self.hyperparameters, seed=self.seed,
                                 provenance={"particle": i, "iteration": self.iteration}).to_dict()
                for i, p in enumerate(self.particles)]


def _blew_up(value: float, best: float, first: float, factor: float) -> bool:
    """10x over the best so far and worse than the start; near-zero optima do not trip it."""
    return value > factor * best and value > first


def train_svgd(config: SVGDConfig, posterior, arch=None, init: np.ndarray | None = None,
               callback=None) -> tuple[ParticleEnsemble, list[dict]]:
    """Prior-initialized SVGD towards the Gibbs posterior; returns the ensemble and a per-iteration log."""
    rng = make_rng(config.seed, 3)
    X = posterior.prior.sample(rng, config.K) if init is None else np.array(init, dtype=float)
    opt = AdaGrad(config.alpha)
    log = []
    best = first = math.inf
    for it in range(config.iterations):
        scores, costs = posterior.scores(X)
        mean_cost = float(np.mean(costs))
        if it == 0:
            first = mean_cost
        best = min(best, mean_cost)
        if not np.isfinite(mean_cost) or _blew_up(mean_cost, best, first, config.divergence_factor):
            raise TrainingDivergedError(
                f"SVGD diverged at iteration {it}: mean cost {mean_cost:.4g} vs best {best:.4g}", step=it)
        X, info = svgd_step(X, posterior, config.step_size, opt, scores=scores)
        log.append({"iteration": it, "mean_cost": mean_cost, "max_grad_norm": float(np.max(info["score_norm"])),
                    "bandwidth": info["bandwidth"]})
        if callback is not None:
            callback(it, X, log[-1])
    tag = getattr(arch, "tag", "")
    hyper = arch.hyperparameters() if arch is not None else {}
    return ParticleEnsemble(X, config.iterations, config.seed, tag, hyper), log


def adam_minimize(value_and_grad, theta0: np.ndarray, lr: float, iterations: int, project=None,
                  betas: tuple[float, float] = (0.9, 0.999), divergence_factor: float = 10.0,
                  callback=None) -> tuple[np.ndarray, list[dict]]:
    """Plain Adam; keeps the best iterate and aborts if the cost blows up 10x over the best."""
    theta = np.array(theta0, dtype=float)
    m = np.zeros_like(theta)
    v = np.zeros_like(theta)
    b1, b2 = betas
    best, best_theta = math.inf, theta.copy()
    first = None
    log = []
    for it in range(1, iterations + 1):
        val, g = value_and_grad(theta)
        first = val if first is None else first
        if not np.isfinite(val) or _blew_up(val, best, first, divergence_factor):
            raise TrainingDivergedError(f"training diverged at iteration {it}: cost {val:.4g}", step=it)
        if val < best:
            best, best_theta = val, theta.copy()
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        theta = theta - lr * (m / (1 - b1 ** it)) / (np.sqrt(v / (1 - b2 ** it)) + 1e-8)
        if project is not None:
            theta = project(theta)
        log.append({"iteration": it, "cost": float(val), "grad_norm": float(np.linalg.norm(g))})
        if callback is not None:
            callback(it, theta, log[-1])
    val = value_and_grad(theta)[0]
    if val < best:
        best, best_theta = val, theta.copy()
    return best_theta, log
