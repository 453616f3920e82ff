"""Parameterized controllers that are stabilizing for every parameter vector.

Two architectures are provided:

* ``affine``: ``u = -(k x + beta)`` for the scalar LTI plant, with the gain
  projected into the stabilizing interval before use.
* ``ren``: an internal-model controller. The disturbance is reconstructed
  from the known dynamics and fed to a recurrent equilibrium network whose
  realization is rescaled until a small-gain certificate holds, so the
  operator is l2-stable whatever the raw parameters are.
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from typing import Any

import numpy as np

from . import autodiff as ad
from .errors import ConfigurationError, NumericalDivergenceError

__all__ = [
    "GAIN_BOUNDS", "project_gain", "AffineController", "AffineArchitecture",
    "RenArchitecture", "RenController", "InternalModelController",
    "realize_ren", "ren_act", "l2_gain_probe", "ControllerParams", "architecture_from",
]

GAIN_BOUNDS = (-2.0 + 1e-3, 18.0 - 1e-3)


def project_gain(k, bounds: tuple[float, float] = GAIN_BOUNDS):
    return ad.clip(k, *bounds)


class AffineController:
    """``u = -(k x + beta)`` with ``k`` clamped into ``bounds``.

    ``k`` and ``beta`` may be arrays; they broadcast against the state, so an
    ``(N, 1, 1)`` gain simulates ``N`` controllers at once.
    """

    state_dim = 1
    input_dim = 1

    def __init__(self, k, beta, bounds: tuple[float, float] = GAIN_BOUNDS):
        self.k = k
        self.beta = beta
        self.bounds = bounds

    @property
    def projected_gain(self):
        return project_gain(self.k, self.bounds)

    def act(self, x):
        return -(self.projected_gain * x + self.beta)

    def start(self, system):
        return lambda t, xs, us: self.act(xs[-1])


@dataclass(frozen=True)
class AffineArchitecture:
    """theta = [k, beta]."""

    tag: str = field(default="affine", init=False)
    num_params: int = field(default=2, init=False)

    def build(self, theta, system=None) -> AffineController:
        return AffineController(theta[0], theta[1])

    def build_batch(self, thetas: np.ndarray) -> AffineController:
        thetas = np.asarray(thetas, dtype=float)
        return AffineController(thetas[:, 0, None, None], thetas[:, 1, None, None])

    def hyperparameters(self) -> dict:
        return {}


def _act(name: str):
    if name == "tanh":
        return ad.tanh
    if name == "relu":
        return ad.relu
    if name == "identity":
        return lambda z: z
    raise ConfigurationError(f"unknown activation {name!r}")


@dataclass(frozen=True)
class RenArchitecture:
    """Explicit-equilibrium REN driving an internal-model controller.

    ``excite_nominal`` adds the nominal initial state to the reconstructed
    noise at ``t = 0`` before it enters the network, so the network sees the
    full initial condition instead of only its random part.
    """

    n_xi: int
    n_zeta: int
    n_in: int
    n_out: int
    activation: str = "tanh"
    eps: float = 1e-3
    excite_nominal: bool = True
    tag: str = field(default="ren", init=False)

    def __post_init__(self):
        if min(self.n_xi, self.n_zeta, self.n_in, self.n_out) < 1:
            raise ConfigurationError("REN dimensions must be positive")
        _act(self.activation)

    def blocks(self) -> list[tuple[str, tuple[int, int], int]]:
        nx, nz, n, m = self.n_xi, self.n_zeta, self.n_in, self.n_out
        return [
            ("A", (nx, nx), nx * nx),
            ("B1", (nx, nz), nx * nz),
            ("B2", (nx, n), nx * n),
            ("C1", (nz, nx), nz * nx),
            ("D11", (nz, nz), nz * (nz - 1) // 2),
            ("D12", (nz, n), nz * n),
            ("C2", (m, nx), m * nx),
            ("D21", (m, nz), m * nz),
            ("D22", (m, n), m * n),
        ]

    @property
    def num_params(self) -> int:
        return sum(size for _, _, size in self.blocks())

    def hyperparameters(self) -> dict:
        return {"n_xi": self.n_xi, "n_zeta": self.n_zeta, "n_in": self.n_in, "n_out": self.n_out,
                "activation": self.activation, "eps": self.eps, "excite_nominal": self.excite_nominal}

    def unpack(self, theta) -> dict[str, Any]:
        if np.shape(ad.value(theta)) != (self.num_params,):
            raise ConfigurationError(
                f"REN expects {self.num_params} parameters, got shape {np.shape(ad.value(theta))}")
        out, pos = {}, 0
        nz = self.n_zeta
        for name, shape, size in self.blocks():
            chunk = theta[pos:pos + size]
            pos += size
            if name == "D11":
                rows, cols = np.tril_indices(nz, -1)
                scatter = np.zeros((nz * nz, size))
                scatter[rows * nz + cols, np.arange(size)] = 1.0
                out[name] = ad.reshape(ad.matmul(scatter, chunk), shape) if size else np.zeros(shape)
            else:
                out[name] = ad.reshape(chunk, shape)
        return out

    def realize(self, theta) -> "RenController":
        return realize_ren(theta, self)

    def build(self, theta, system) -> "InternalModelController":
        return InternalModelController(self.realize(theta), excite_nominal=self.excite_nominal)


def _certificate(a, b, c, d):
    if d >= 1:
        return np.inf
    return a + b * c / (1.0 - d)


def realize_ren(theta, arch: RenArchitecture) -> "RenController":
    """Unpack ``theta`` and shrink (A, B1, C1, D11) by the largest ``rho <= 1``
    for which ``||A|| + ||B1|| ||C1|| / (1 - ||D11||) <= 1 - eps`` and
    ``||D11|| <= 1 - eps``. Gradients flow through ``rho``."""
    m = arch.unpack(theta)
    eps = arch.eps
    na, nb, nc, nd = (ad.spectral_norm(m[k]) for k in ("A", "B1", "C1", "D11"))
    a, b, c, d = (float(ad.value(v)) for v in (na, nb, nc, nd))
    if not (d <= 1 - eps and _certificate(a, b, c, d) <= 1 - eps):
        # g(rho) = rho a + rho^2 bc / (1 - rho d) is increasing on [0, 1/d); its
        # crossing of 1 - eps is the smaller root of a quadratic in rho
        alpha = nb * nc - na * nd
        beta = na + (1 - eps) * nd
        disc = ad.square(beta) + 4.0 * (1 - eps) * alpha
        root = 2.0 * (1 - eps) / (beta + ad.sqrt(disc))
        candidates = [root]
        if d > 0:
            candidates.append((1 - eps) / nd)
        rho = ad.minimum_of(*candidates) * (1.0 - 1e-10)
        for k in ("A", "B1", "C1", "D11"):
            m[k] = m[k] * rho
    return RenController(**m, activation=arch.activation, eps=eps)


@dataclass
class RenController:
    """Realized REN. Matrices may live on an autodiff tape."""

    A: Any
    B1: Any
    B2: Any
    C1: Any
    D11: Any
    D12: Any
    C2: Any
    D21: Any
    D22: Any
    activation: str = "tanh"
    eps: float = 1e-3

    def __post_init__(self):
        self._sigma = _act(self.activation)
        self._t = {k: getattr(self, k).T for k in ("A", "B1", "B2", "C1", "D11", "D12", "C2", "D21", "D22")}

    @property
    def n_xi(self) -> int:
        return np.shape(ad.value(self.A))[0]

    @property
    def n_zeta(self) -> int:
        return np.shape(ad.value(self.D11))[0]

    @property
    def input_dim(self) -> int:
        return np.shape(ad.value(self.B2))[1]

    @property
    def output_dim(self) -> int:
        return np.shape(ad.value(self.C2))[0]

    def norms(self) -> dict[str, float]:
        return {k: float(np.linalg.norm(np.asarray(ad.value(getattr(self, k))), 2))
                for k in ("A", "B1", "B2", "C1", "D11", "D12", "C2", "D21", "D22")}

    def certificate(self) -> float:
        """Left side of the small-gain inequality for the realized matrices."""
        n = self.norms()
        return _certificate(n["A"], n["B1"], n["C1"], n["D11"])

    def certified(self) -> bool:
        n = self.norms()
        return n["D11"] <= 1 - self.eps and self.certificate() <= 1 - self.eps

    def _constants(self):
        n = self.norms()
        g = self.certificate()
        den = 1.0 - n["D11"]
        b_w = n["B2"] + n["B1"] * n["D12"] / den
        c_xi = n["C2"] + n["D21"] * n["C1"] / den
        c_w = n["D22"] + n["D21"] * n["D12"] / den
        return g, b_w, c_xi, c_w

    def gain_bound(self) -> float:
        """l2 gain bound from the small-gain constants."""
        g, b_w, c_xi, c_w = self._constants()
        return c_xi * b_w / (1.0 - g) + c_w

    def state_bound(self, input_sup: float) -> float:
        """Bound on ``sup_t |xi_t|`` when ``|w_t| <= input_sup`` for all t."""
        g, b_w, _, _ = self._constants()
        return b_w * input_sup / (1.0 - g)

    def initial_state(self, batch_shape: tuple = ()) -> np.ndarray:
        return np.zeros(tuple(batch_shape) + (self.n_xi,))

    def solve_equilibrium(self, xi, w):
        """zeta = C1 xi + D11 sigma(zeta) + D12 w, exact because D11 is strictly lower triangular."""
        t = self._t
        v = ad.matmul(xi, t["C1"]) + ad.matmul(w, t["D12"])
        zeta = v
        for _ in range(self.n_zeta - 1):
            zeta = v + ad.matmul(self._sigma(zeta), t["D11"])
        return zeta

    def step(self, xi, w):
        """One step: returns ``(u_t, xi_{t+1})``."""
        t = self._t
        s = self._sigma(self.solve_equilibrium(xi, w))
        xi_next = ad.matmul(xi, t["A"]) + ad.matmul(s, t["B1"]) + ad.matmul(w, t["B2"])
        u = ad.matmul(xi, t["C2"]) + ad.matmul(s, t["D21"]) + ad.matmul(w, t["D22"])
        return u, xi_next

    def run(self, inputs: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Drive the network with ``inputs`` of shape ``(..., L, n)``; returns (u, xi) stacked in time."""
        inputs = np.asarray(inputs, dtype=float)
        xi = self.initial_state(inputs.shape[:-2])
        us, xis = [], []
        for k in range(inputs.shape[-2]):
            xis.append(ad.value(xi))
            u, xi = self.step(xi, inputs[..., k, :])
            us.append(ad.value(u))
        return np.stack(us, axis=-2), np.stack(xis, axis=-2)


class InternalModelController:
    """``w_hat_t = x_t - f_t(x_{t-1:0}, u_{t-1:0})`` (``x_0 - x_bar`` at t=0), ``u_t = M(w_hat_{t:0})``."""

    def __init__(self, ren: RenController, excite_nominal: bool = True):
        self.ren = ren
        self.excite_nominal = excite_nominal
        self.input_dim = ren.output_dim

    def start(self, system) -> "InternalModelState":
        if self.ren.input_dim != system.state_dim:
            raise ConfigurationError("REN input dimension must equal the plant state dimension")
        return InternalModelState(self, system)


class InternalModelState:
    """Rollout-local memory: reconstructed noise, REN state."""

    def __init__(self, controller: InternalModelController, system):
        self.controller = controller
        self.system = system
        self.w_hat: list = []
        self.xi = None

    def __call__(self, t, xs, us):
        return ren_act(self.controller, self, self.system, xs, us)


def ren_act(ctrl: InternalModelController, state: InternalModelState, system, xs, us):
    """Reconstruct ``w_hat_t``, advance the REN one step and return ``u_t``."""
    t = len(xs) - 1
    x_bar = np.asarray(system.nominal_initial_state, dtype=float)
    if t == 0:
        w = xs[0] - x_bar
    else:
        w = xs[t] - system.f(t, xs[:t], us[:t])
    state.w_hat.append(w)
    excitation = w + x_bar if (t == 0 and ctrl.excite_nominal) else w
    if state.xi is None:
        state.xi = ctrl.ren.initial_state(np.shape(ad.value(excitation))[:-1])
    u, state.xi = ctrl.ren.step(state.xi, excitation)
    if not np.all(np.isfinite(ad.value(u))):
        raise NumericalDivergenceError(f"non-finite REN output at time step {t}", step=t)
    return u


def l2_gain_probe(ren: RenController, probes: np.ndarray) -> float:
    """Largest ``||u||_2 / ||w||_2`` over probe input sequences ``(P, L, n)``; zero-energy probes are skipped."""
    probes = np.asarray(probes, dtype=float)
    if probes.ndim == 2:
        probes = probes[None]
    energy_in = np.sqrt(np.sum(probes ** 2, axis=(-2, -1)))
    keep = energy_in > 0
    if not np.any(keep):
        return 0.0
    u, _ = ren.run(probes[keep])
    energy_out = np.sqrt(np.sum(u ** 2, axis=(-2, -1)))
    return float(np.max(energy_out / energy_in[keep]))


def architecture_from(tag: str, hyper: dict | None = None):
    hyper = hyper or {}
    if tag == "affine":
        return AffineArchitecture()
    if tag == "ren":
        return RenArchitecture(**hyper)
    raise ConfigurationError(f"unknown architecture {tag!r}")


FORMAT_VERSION = 1


@dataclass
class ControllerParams:
    """Serializable controller: architecture tag, hyperparameters, flat theta."""

    tag: str
    theta: np.ndarray
    hyperparameters: dict = field(default_factory=dict)
    seed: int | None = None
    provenance: dict = field(default_factory=dict)

    def __post_init__(self):
        self.theta = np.asarray(self.theta, dtype=float).ravel()
        arch = self.architecture()
        if self.theta.size != arch.num_params:
            raise ConfigurationError(
                f"{self.tag} expects {arch.num_params} parameters, got {self.theta.size}")

    def architecture(self):
        return architecture_from(self.tag, self.hyperparameters)

    def build(self, system):
        return self.architecture().build(self.theta, system)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["theta"] = [float(v) for v in self.theta]
        d["format_version"] = FORMAT_VERSION
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ControllerParams":
        if d.get("format_version", FORMAT_VERSION) != FORMAT_VERSION:
            raise ConfigurationError(f"unsupported controller format {d.get('format_version')}")
        return cls(tag=d["tag"], theta=np.asarray(d["theta"]), hyperparameters=d.get("hyperparameters", {}),
                   seed=d.get("seed"), provenance=d.get("provenance", {}))

    def save(self, path) -> None:
        with open(path, "w") as fh:
            json.dump(self.to_dict(), fh, indent=2)

    @classmethod
    def load(cls, path) -> "ControllerParams":
        with open(path) as fh:
            return cls.from_dict(json.load(fh))
