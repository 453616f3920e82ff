"""Priors, the Gibbs posterior, and high-probability bounds on the true cost.

All empirical costs handled here are the capped ones (values in ``[0, C)``).
Normalizations are done in log space: at ``lambda ~ 80`` the weights
``exp(-lambda L)`` underflow long before their ratios become uninformative.
"""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from typing import Callable

import numpy as np
from scipy import stats
from scipy.special import logsumexp

from .dynamics import make_rng
from .errors import ConfigurationError, InsufficientSamplesError, NumericalDivergenceError, PreconditionError

__all__ = [
    "Factor", "Prior", "GibbsPosterior", "BoundCertificate", "GridSpec", "GridPosterior",
    "lambda_star", "theorem1_bound", "qstar_bound_exact", "min_prior_samples",
    "hoeffding_term", "qstar_bound_empirical", "build_grid_posterior", "sample_grid",
    "free_energy", "discrete_gibbs",
]


# ---------------------------------------------------------------- priors

@dataclass(frozen=True)
class Factor:
    """One independent coordinate: ``gaussian`` (a=mean, b=variance) or ``uniform`` (a=lo, b=hi)."""

    kind: str
    a: float
    b: float

    def __post_init__(self):
        if self.kind == "gaussian" and not self.b > 0:
            raise ConfigurationError("Gaussian variance must be positive")
        if self.kind == "uniform" and not self.b > self.a:
            raise ConfigurationError("uniform needs lo < hi")
        if self.kind not in ("gaussian", "uniform"):
            raise ConfigurationError(f"unknown prior factor {self.kind!r}")

    @property
    def dist(self):
        if self.kind == "gaussian":
            return stats.norm(self.a, math.sqrt(self.b))
        return stats.uniform(self.a, self.b - self.a)

    def interval(self, coverage: float) -> tuple[float, float]:
        """Central interval holding ``coverage`` of the mass (the support for uniforms)."""
        if self.kind == "uniform":
            return self.a, self.b
        return tuple(float(v) for v in self.dist.interval(coverage))


class Prior:
    """Product of independent Gaussian / uniform factors over theta."""

    def __init__(self, factors):
        self.factors = tuple(factors)
        kinds = np.array([f.kind for f in self.factors])
        self._gauss = kinds == "gaussian"
        a = np.array([f.a for f in self.factors], dtype=float)
        b = np.array([f.b for f in self.factors], dtype=float)
        self._mean = np.where(self._gauss, a, 0.0)
        self._var = np.where(self._gauss, b, 1.0)
        self._lo = np.where(self._gauss, -np.inf, a)
        self._hi = np.where(self._gauss, np.inf, b)
        width = np.where(self._gauss, 1.0, b - a)
        self._const = float(np.sum(np.where(self._gauss, -0.5 * np.log(2 * np.pi * self._var), -np.log(width))))

    @classmethod
    def spherical_gaussian(cls, d: int, variance: float, mean: float = 0.0) -> "Prior":
        return cls([Factor("gaussian", mean, variance)] * d)

    @property
    def dim(self) -> int:
        return len(self.factors)

    @property
    def mean(self) -> np.ndarray:
        mid = 0.5 * (np.where(self._gauss, 0.0, self._lo) + np.where(self._gauss, 0.0, self._hi))
        return np.where(self._gauss, self._mean, mid)

    def log_density(self, theta: np.ndarray) -> np.ndarray:
        theta = np.asarray(theta, dtype=float)
        quad = -0.5 * np.sum(np.where(self._gauss, (theta - self._mean) ** 2 / self._var, 0.0), axis=-1)
        inside = np.all(np.where(self._gauss, True, (theta >= self._lo) & (theta <= self._hi)), axis=-1)
        return np.where(inside, quad + self._const, -np.inf)

    def grad_log_density(self, theta: np.ndarray) -> np.ndarray:
        """Zero on uniform coordinates (flat inside the support)."""
        theta = np.asarray(theta, dtype=float)
        return np.where(self._gauss, -(theta - self._mean) / self._var, 0.0)

    def project(self, theta: np.ndarray) -> np.ndarray:
        """Clamp uniform coordinates back into their support."""
        return np.clip(theta, self._lo, self._hi)

    def sample(self, rng: np.random.Generator, n: int | None = None) -> np.ndarray:
        shape = (self.dim,) if n is None else (n, self.dim)
        z = rng.standard_normal(shape)
        u = rng.random(shape)
        lo = np.where(self._gauss, 0.0, self._lo)
        hi = np.where(self._gauss, 0.0, self._hi)
        return np.where(self._gauss, self._mean + np.sqrt(self._var) * z, lo + (hi - lo) * u)

    def to_dict(self) -> dict:
        return {"factors": [asdict(f) for f in self.factors]}

    @classmethod
    def from_dict(cls, d: dict) -> "Prior":
        return cls([Factor(**f) for f in d["factors"]])


# ---------------------------------------------------------------- posterior

class GibbsPosterior:
    """Unnormalized ``log P(theta) - lambda * L(theta, S)``.

    ``objective`` must expose ``value(theta)`` and ``value_and_grad(theta)``
    returning the capped empirical cost; ``values(thetas)`` is used when
    present for batched evaluation.
    """

    def __init__(self, prior: Prior, objective, lam: float):
        if lam < 0:
            raise ConfigurationError("lambda must be nonnegative")
        self.prior = prior
        self.objective = objective
        self.lam = float(lam)

    def log_density(self, theta: np.ndarray) -> float:
        lp = float(self.prior.log_density(theta))
        if self.lam == 0:
            return lp
        return lp - self.lam * float(self.objective.value(theta))

    def score(self, theta: np.ndarray) -> tuple[np.ndarray, float]:
        """Gradient of the unnormalized log density, and the cost at theta."""
        L, g = self.objective.value_and_grad(theta)
        return self.prior.grad_log_density(theta) - self.lam * np.asarray(g), L

    def scores(self, thetas: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        batched = getattr(self.objective, "values_and_grads", None)
        if batched is not None:
            L, G = batched(thetas)
            return self.prior.grad_log_density(thetas) - self.lam * G, L
        out = [self.score(th) for th in thetas]
        return np.stack([o[0] for o in out]), np.array([o[1] for o in out])


# ---------------------------------------------------------------- bounds

def _check_delta(delta: float, name: str = "delta") -> None:
    if not 0 < delta < 1:
        raise ConfigurationError(f"{name} must lie in (0, 1), got {delta}")


def lambda_star(s: int, delta: float, C: float = 1.0) -> float:
    """``sqrt(8 s ln(1/delta)) / C``: minimizes ``C + ln(1/delta)/lambda + lambda C^2/(8 s)``."""
    _check_delta(delta)
    if s < 1 or C <= 0:
        raise ConfigurationError("need s >= 1 and C > 0")
    return math.sqrt(8.0 * s * math.log(1.0 / delta)) / C


def theorem1_bound(emp_cost: float, log_density_ratio: float, lam: float, delta: float, C: float, s: int) -> float:
    """Randomized PAC-Bayes bound for one draw theta ~ Q."""
    _check_delta(delta)
    if lam <= 0:
        raise ConfigurationError("lambda must be positive")
    return emp_cost + (log_density_ratio + math.log(1.0 / delta)) / lam + lam * C * C / (8.0 * s)


def qstar_bound_exact(log_z: float, lam: float, delta: float, C: float, s: int) -> float:
    """Bound for draws from the Gibbs posterior given ``ln Z``."""
    _check_delta(delta)
    return (math.log(1.0 / delta) - log_z) / lam + lam * C * C / (8.0 * s)


def min_prior_samples(lam: float, C: float, delta_hat: float) -> int:
    """Smallest ``n_p`` with ``n_p >= (e^{lambda C} - 1)^2 ln(1/delta_hat) / 2``."""
    _check_delta(delta_hat, "delta_hat")
    return int(math.ceil(math.expm1(lam * C) ** 2 * math.log(1.0 / delta_hat) / 2.0))


def hoeffding_term(lam: float, C: float, delta_hat: float, n_p: int) -> float:
    return -math.expm1(-lam * C) * math.sqrt(math.log(1.0 / delta_hat) / (2.0 * n_p))


@dataclass
class BoundCertificate:
    """Everything needed to audit one computed bound."""

    mode: str
    bound: float
    lam: float
    delta: float
    C: float
    s: int
    delta_hat: float | None = None
    n_p: int | None = None
    n_p_required: int | None = None
    z_hat: float | None = None
    hoeffding: float | None = None
    z_lower: float | None = None
    log_z: float | None = None
    probability: float = 0.0
    seeds: dict = field(default_factory=dict)
    extra: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.probability == 0.0:
            p = 1.0 - self.delta
            if self.delta_hat is not None:
                p *= 1.0 - self.delta_hat
            self.probability = p

    @property
    def statement(self) -> str:
        return (f"true cost <= {self.bound:.6g} with probability >= {self.probability:.4g} "
                f"over the draw of the dataset and of theta" +
                (" and of the prior samples" if self.delta_hat is not None else ""))

    def to_dict(self) -> dict:
        d = asdict(self)
        d["statement"] = self.statement
        return d

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2)


def qstar_bound_empirical(prior: Prior, cost_fn: Callable[[np.ndarray], np.ndarray], lam: float,
                          delta: float, delta_hat: float, C: float, s: int, n_p: int,
                          seed: int, stream: int = 7) -> BoundCertificate:
    """Bound with ``Z`` replaced by a Hoeffding lower confidence bound from ``n_p`` prior draws.

    ``cost_fn`` maps an ``(N, d)`` batch of parameters to capped empirical costs.
    """
    _check_delta(delta)
    _check_delta(delta_hat, "delta_hat")
    required = min_prior_samples(lam, C, delta_hat)
    if n_p < required:
        raise PreconditionError(f"n_p={n_p} is below the required minimum {required}", required=required)
    thetas = prior.sample(make_rng(seed, stream), n_p)
    costs = np.asarray(cost_fn(thetas), dtype=float)
    if costs.shape != (n_p,) or not np.all(np.isfinite(costs)):
        raise NumericalDivergenceError("cost evaluator returned invalid values")
    # math.fsum gives an order-independent, exactly rounded reduction
    z_hat = math.fsum(np.exp(-lam * costs)) / n_p
    hoeff = hoeffding_term(lam, C, delta_hat, n_p)
    z_low = z_hat - hoeff
    if z_low <= 0:
        raise InsufficientSamplesError(
            f"insufficient samples: corrected partition estimate {z_low:.3g} <= 0")
    bound = (math.log(1.0 / delta) - math.log(z_low)) / lam + lam * C * C / (8.0 * s)
    return BoundCertificate(mode="qstar-empirical", bound=bound, lam=lam, delta=delta, C=C, s=s,
                            delta_hat=delta_hat, n_p=n_p, n_p_required=required, z_hat=z_hat,
                            hoeffding=hoeff, z_lower=z_low, log_z=math.log(z_low),
                            seeds={"prior_samples": seed, "stream": stream})


# ---------------------------------------------------------------- discrete posteriors

def discrete_gibbs(log_prior_mass: np.ndarray, costs: np.ndarray, lam: float) -> tuple[np.ndarray, float]:
    """Normalized Gibbs masses on a finite support and ``ln Z``."""
    logw = log_prior_mass - lam * costs
    log_z = float(logsumexp(logw) - logsumexp(log_prior_mass))
    logq = logw - logsumexp(logw)
    return np.exp(logq), log_z


def free_energy(q: np.ndarray, prior_mass: np.ndarray, costs: np.ndarray, lam: float) -> float:
    """``E_Q[L] + KL(Q || P) / lambda`` over a shared finite support.

    Returns ``inf`` when Q puts mass where the discretized prior has none.
    """
    q = np.ravel(q)
    p = np.ravel(prior_mass) / np.sum(prior_mass)
    c = np.ravel(costs)
    on = q > 0
    if np.any(on & (p <= 0)):
        return math.inf
    kl = float(np.sum(q[on] * (np.log(q[on]) - np.log(p[on]))))
    return float(np.sum(q[on] * c[on])) + kl / lam


@dataclass(frozen=True)
class GridSpec:
    """Rectangular grid over (beta, k); axes are ``(lo, hi, steps)``."""

    beta: tuple[float, float, int]
    k: tuple[float, float, int]

    @classmethod
    def covering(cls, prior: Prior, steps: int = 200, coverage: float = 0.99) -> "GridSpec":
        """Per-axis central intervals whose product holds at least ``coverage`` of the prior.

        theta is ``[k, beta]``; each Gaussian axis gets ``coverage ** (1/2)`` so
        the product of the two axes reaches ``coverage``.
        """
        per_axis = coverage ** 0.5
        k_lo, k_hi = prior.factors[0].interval(per_axis)
        b_lo, b_hi = prior.factors[1].interval(per_axis)
        return cls((b_lo, b_hi, steps), (k_lo, k_hi, steps))

    def edges(self):
        be = np.linspace(self.beta[0], self.beta[1], int(self.beta[2]) + 1)
        ke = np.linspace(self.k[0], self.k[1], int(self.k[2]) + 1)
        return be, ke

    def centers(self):
        be, ke = self.edges()
        return 0.5 * (be[1:] + be[:-1]), 0.5 * (ke[1:] + ke[:-1])

    @property
    def cell_area(self) -> float:
        return ((self.beta[1] - self.beta[0]) / self.beta[2]) * ((self.k[1] - self.k[0]) / self.k[2])

    def thetas(self) -> np.ndarray:
        """Cell-center parameters ``[k, beta]``, beta-major: shape ``(nb * nk, 2)``."""
        bc, kc = self.centers()
        B, K = np.meshgrid(bc, kc, indexing="ij")
        return np.stack([K.ravel(), B.ravel()], axis=1)


@dataclass
class GridPosterior:
    """Discretized Gibbs posterior over (beta, k); arrays are ``(n_beta, n_k)``."""

    spec: GridSpec
    mass: np.ndarray
    prior_mass: np.ndarray
    costs: np.ndarray
    lam: float
    log_z: float
    prior_tag: str = ""

    @property
    def beta_centers(self) -> np.ndarray:
        return self.spec.centers()[0]

    @property
    def k_centers(self) -> np.ndarray:
        return self.spec.centers()[1]

    def prior_coverage(self, prior: Prior) -> float:
        """Continuous prior probability of the gridded rectangle."""
        cov = 1.0
        for f, (lo, hi, _) in ((prior.factors[1], self.spec.beta), (prior.factors[0], self.spec.k)):
            cov *= float(f.dist.cdf(hi) - f.dist.cdf(lo))
        return cov

    def mode(self) -> tuple[float, float]:
        i, j = np.unravel_index(np.argmax(self.mass), self.mass.shape)
        return float(self.beta_centers[i]), float(self.k_centers[j])

    def bound(self, delta: float, C: float, s: int) -> BoundCertificate:
        value = qstar_bound_exact(self.log_z, self.lam, delta, C, s)
        return BoundCertificate(mode="qstar-exact", bound=value, lam=self.lam, delta=delta, C=C, s=s,
                                log_z=self.log_z, extra={"grid": asdict(self.spec), "prior": self.prior_tag})

    def rows(self):
        """(beta, k, mass) triples for CSV export."""
        bc, kc = self.spec.centers()
        for i, b in enumerate(bc):
            for j, k in enumerate(kc):
                yield float(b), float(k), float(self.mass[i, j])

    def marginals(self) -> tuple[np.ndarray, np.ndarray]:
        return self.mass.sum(axis=1), self.mass.sum(axis=0)


def build_grid_posterior(prior: Prior, cost_fn: Callable[[np.ndarray], np.ndarray], lam: float,
                         spec: GridSpec, prior_tag: str = "", costs: np.ndarray | None = None) -> GridPosterior:
    """Cell mass proportional to ``P(center) exp(-lambda L(center)) * area``, normalized in log space.

    Pass precomputed ``costs`` (shape ``(n_beta, n_k)``) to reuse one cost grid across lambdas.
    """
    thetas = spec.thetas()
    shape = (int(spec.beta[2]), int(spec.k[2]))
    if costs is None:
        costs = np.asarray(cost_fn(thetas), dtype=float).reshape(shape)
    log_p = prior.log_density(thetas).reshape(shape) + math.log(spec.cell_area)
    if not np.any(np.isfinite(log_p)):
        raise NumericalDivergenceError("grid holds no prior mass; widen the region")
    log_p_norm = log_p - logsumexp(log_p)
    mass, log_z = discrete_gibbs(log_p_norm, costs, lam)
    if not np.isfinite(log_z) or not np.isclose(mass.sum(), 1.0, atol=1e-9):
        raise NumericalDivergenceError("grid posterior normalization underflowed")
    return GridPosterior(spec=spec, mass=mass, prior_mass=np.exp(log_p_norm), costs=costs,
                         lam=float(lam), log_z=log_z, prior_tag=prior_tag)


def sample_grid(gp: GridPosterior, seed: int, n: int | None = None, stream: int = 11) -> np.ndarray:
    """Inverse-CDF draw of cells, then uniform jitter inside the cell. Returns ``[k, beta]``."""
    rng = make_rng(seed, stream)
    m = 1 if n is None else n
    cdf = np.cumsum(gp.mass.ravel())
    cdf /= cdf[-1]
    cells = np.minimum(np.searchsorted(cdf, rng.random(m), side="right"), cdf.size - 1)
    i, j = np.unravel_index(cells, gp.mass.shape)
    be, ke = gp.spec.edges()
    jitter = rng.random((m, 2))
    beta = be[i] + jitter[:, 0] * (be[i + 1] - be[i])
    k = ke[j] + jitter[:, 1] * (ke[j + 1] - ke[j])
    out = np.stack([k, beta], axis=1)
    return out[0] if n is None else out
