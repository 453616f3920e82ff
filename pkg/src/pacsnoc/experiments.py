"""Scenario assembly and the experiment drivers behind the CLI.

Two scenarios are wired up: the scalar LTI plant with an affine controller,
and the two-robot corridor with an internal-model REN controller. Every
driver takes an :class:`ExperimentConfig` and returns plain data (controller
params, certificates, CSV rows) so the CLI only does I/O.

Seeds: the training set of size ``s`` is drawn from ``(seed, TRAIN_STREAM)``
and the test set from ``(test_seed, TEST_STREAM)`` with ``test_seed != seed``,
so the two never share a noise draw.
"""
from __future__ import annotations

import copy
import math
import time
from dataclasses import asdict, dataclass, field
from decimal import Decimal
from typing import Any

import numpy as np
from scipy.linalg import solve_discrete_are
from scipy.optimize import minimize

from .controllers import GAIN_BOUNDS, AffineArchitecture, ControllerParams, RenArchitecture
from .cost import CostTransform, QuadraticCost, RobotCost, default_gamma
from .dynamics import (NoiseDataset, NoiseModel, RobotConfig, ScalarLTI, build_robot_system,
                       generate_dataset, make_rng, simulate)
from .errors import ConfigurationError, UnsupportedScenarioError
from .pacbayes import (BoundCertificate, Factor, GibbsPosterior, GridSpec, Prior, build_grid_posterior,
                       lambda_star, qstar_bound_empirical, sample_grid)
from .svgd import ClosedLoopObjective, ParticleEnsemble, SVGDConfig, adam_minimize, train_svgd

SCHEMA_VERSION = 1
TRAIN_STREAM = 0
TEST_STREAM = 1

LTI_DEFAULTS = {"a": 0.8, "b": 0.1, "x_bar": 2.0, "q": 5.0, "r": 0.003}
LTI_NOISE = {"kind": "iid", "mean": 0.3, "var": 0.09}
ROBOT_NOISE = {"kind": "first-step", "mean": 0.0, "var": 0.04}

# robot desk-scale profiles; the LTI scenario is cheap and ignores them
PROFILES = {
    "paper": {"T": 100, "s": 30, "svgd": {"K": 16, "iterations": 1000}, "evaluation": {"test_size": 500}},
    "ci": {"T": 40, "s": 10, "svgd": {"K": 8, "iterations": 800}, "evaluation": {"test_size": 500}},
}


def lqr_gain(a: float, b: float, q: float, r: float) -> float:
    """Infinite-horizon LQR gain ``k`` for ``u = -k x``."""
    p = float(solve_discrete_are(np.array([[a]]), np.array([[b]]), np.array([[q]]), np.array([[r]]))[0, 0])
    return a * b * p / (r + b * b * p)


@dataclass
class ExperimentConfig:
    """Everything one run needs; round-trips through JSON."""

    scenario: str = "lti"
    system: dict = field(default_factory=dict)
    noise: dict = field(default_factory=dict)
    s: int = 8
    T: int = 10
    prior: dict = field(default_factory=dict)
    delta: float = 0.2
    delta_hat: float = 0.1
    C: float = 1.0
    gamma: float | None = None
    svgd: dict = field(default_factory=dict)
    training: dict = field(default_factory=dict)
    evaluation: dict = field(default_factory=dict)
    certify: dict = field(default_factory=dict)
    bound_study: dict = field(default_factory=dict)
    ren: dict = field(default_factory=dict)
    seed: int = 0
    out: str = "out"
    profile: str | None = None
    schema_version: int = SCHEMA_VERSION

    def __post_init__(self):
        if self.schema_version != SCHEMA_VERSION:
            raise ConfigurationError(f"unsupported schema_version {self.schema_version}")
        if self.scenario not in ("lti", "robots"):
            raise ConfigurationError(f"unknown scenario {self.scenario!r}")
        if int(self.s) < 1 or int(self.T) < 0:
            raise ConfigurationError("need s >= 1 and T >= 0")
        for name in ("delta", "delta_hat"):
            v = getattr(self, name)
            if not 0 < v < 1:
                raise ConfigurationError(f"{name} must lie in (0, 1), got {v}")

    @classmethod
    def lti(cls, **kw) -> "ExperimentConfig":
        base = dict(scenario="lti", system=dict(LTI_DEFAULTS), noise=dict(LTI_NOISE), s=8, T=10,
                    prior={"tag": "P_N"},
                    svgd={"K": 16, "iterations": 300, "step_size": 0.05},
                    training={"iterations": 500, "benchmark_size": 1024},
                    evaluation={"test_size": 1024},
                    certify={"mode": "exact", "grid_steps": 200, "coverage": 0.99, "n_p": 100000},
                    bound_study={"s_values": [8, 32, 128, 512], "deltas": [0.1, 0.2, 0.4],
                                 "priors": ["P_N", "P_U"], "samples": 10})
        base.update(kw)
        return cls(**base)

    @classmethod
    def robots(cls, profile: str = "ci", **kw) -> "ExperimentConfig":
        base = dict(scenario="robots", system=RobotConfig().to_dict(), noise=dict(ROBOT_NOISE),
                    prior={"variance": 49.0},
                    svgd={"step_size": 0.05},
                    training={"iterations": 600, "lr": 0.01, "init_scale": 0.1},
                    evaluation={"bounded_steps": 400, "state_limit": 100.0},
                    certify={"mode": "empirical", "n_p": 200},
                    ren={"n_xi": 8, "n_zeta": 8})
        cfg = cls(**base)
        cfg = cfg.with_profile(profile)
        return cfg.updated(kw)

    def with_profile(self, profile: str | None) -> "ExperimentConfig":
        if profile is None:
            return self
        if profile not in PROFILES:
            raise ConfigurationError(f"unknown profile {profile!r}")
        out = copy.deepcopy(self)
        out.profile = profile
        if self.scenario == "robots":
            p = PROFILES[profile]
            out.T, out.s = p["T"], p["s"]
            out.svgd = {**out.svgd, **p["svgd"]}
            out.evaluation = {**out.evaluation, **p["evaluation"]}
        return out

    def updated(self, kw: dict) -> "ExperimentConfig":
        """Copy with top-level fields replaced; dict fields are merged one level deep."""
        d = self.to_dict()
        for k, v in kw.items():
            if k not in d:
                raise ConfigurationError(f"unknown config field {k!r}")
            d[k] = {**d[k], **v} if isinstance(d[k], dict) and isinstance(v, dict) else v
        return ExperimentConfig(**d)

    def to_dict(self) -> dict:
        return copy.deepcopy(asdict(self))

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        """Scenario defaults first, then the profile, then the file's own fields."""
        d = dict(d)
        if "schema_version" not in d:
            raise ConfigurationError("config needs a schema_version field")
        scenario = d.get("scenario", "lti")
        profile = d.pop("profile", None)
        if scenario == "robots":
            base = cls.robots(profile or "ci")
        elif scenario == "lti":
            base = cls.lti().with_profile(profile)
        else:
            raise ConfigurationError(f"unknown scenario {scenario!r}")
        return base.updated(d)

    @property
    def test_seed(self) -> int:
        return int(self.evaluation.get("test_seed", self.seed + 1))


# ---------------------------------------------------------------- scenario assembly

@dataclass
class Scenario:
    system: Any
    stage: Any
    noise: NoiseModel
    arch: Any
    transform: CostTransform
    config: ExperimentConfig

    def dataset(self, s: int | None = None, seed: int | None = None, stream: int = TRAIN_STREAM) -> NoiseDataset:
        cfg = self.config
        return generate_dataset(self.noise, cfg.s if s is None else s, cfg.seed if seed is None else seed, stream)

    def test_dataset(self, size: int | None = None) -> NoiseDataset:
        cfg = self.config
        n = int(size or cfg.evaluation.get("test_size", 1024))
        return generate_dataset(self.noise, n, cfg.test_seed, TEST_STREAM)

    def objective(self, dataset: NoiseDataset, transformed: bool = True) -> ClosedLoopObjective:
        return ClosedLoopObjective(self.system, self.arch, self.stage, dataset,
                                   self.transform if transformed else None)


def _noise_model(spec: dict, dim: int, T: int) -> NoiseModel:
    mean = np.broadcast_to(np.asarray(spec.get("mean", 0.0), dtype=float), (dim,))
    var = np.broadcast_to(np.asarray(spec.get("var", 0.0), dtype=float), (dim,))
    kind = spec.get("kind", "iid")
    if kind == "iid":
        return NoiseModel.iid_gaussian(mean, var, T)
    if kind == "first-step":
        return NoiseModel.first_step_only(mean, var, T)
    if kind == "zero":
        return NoiseModel.zero(dim, T)
    raise ConfigurationError(f"unknown noise kind {kind!r}")


def build_scenario(cfg: ExperimentConfig) -> Scenario:
    if cfg.scenario == "lti":
        p = {**LTI_DEFAULTS, **cfg.system}
        system = ScalarLTI(p["a"], p["b"], p["x_bar"])
        stage = QuadraticCost([p["q"]], [p["r"]])
        arch = AffineArchitecture()
        noise = _noise_model(cfg.noise, 1, cfg.T)
        x_bar = np.array([p["x_bar"]])
        m = 1
    else:
        system = build_robot_system(RobotConfig.from_dict(cfg.system))
        stage = RobotCost(system.config, system.x_target)
        arch = RenArchitecture(cfg.ren.get("n_xi", 8), cfg.ren.get("n_zeta", 8), 8, 4)
        noise = _noise_model(cfg.noise, 8, cfg.T)
        x_bar = system.nominal_initial_state
        m = 4
    gamma = cfg.gamma if cfg.gamma is not None else default_gamma(stage, x_bar, m)
    return Scenario(system, stage, noise, arch, CostTransform(gamma, cfg.C), cfg)


def lti_prior(tag: str, cfg: ExperimentConfig | None = None) -> Prior:
    """``P_N``: Gaussian on both; ``P_U``: Gaussian gain, uniform offset. theta is ``[k, beta]``."""
    p = {**LTI_DEFAULTS, **(cfg.system if cfg is not None else {})}
    k0 = lqr_gain(p["a"], p["b"], p["q"], p["r"])
    k_fac = Factor("gaussian", k0, 1.0)
    if tag == "P_N":
        return Prior([k_fac, Factor("gaussian", 3.0, 1.5 ** 2)])
    if tag == "P_U":
        return Prior([k_fac, Factor("uniform", -5.0, 5.0)])
    raise ConfigurationError(f"unknown LTI prior {tag!r}; use P_N or P_U")


def make_prior(sc: Scenario) -> Prior:
    cfg = sc.config
    if cfg.scenario == "lti":
        return lti_prior(cfg.prior.get("tag", "P_N"), cfg)
    return Prior.spherical_gaussian(sc.arch.num_params, float(cfg.prior.get("variance", 49.0)),
                                    float(cfg.prior.get("mean", 0.0)))


# ---------------------------------------------------------------- training

def _lti_minimize(obj: ClosedLoopObjective, theta0, fix_beta: float | None = None):
    """L-BFGS-B on the affine parameters; the gain is box-constrained to the projection interval."""
    lo, hi = GAIN_BOUNDS[0] + 1e-3, GAIN_BOUNDS[1] - 1e-3
    log = []

    if fix_beta is None:
        def fun(th):
            v, g = obj.value_and_grad(th)
            log.append({"iteration": len(log), "cost": v, "grad_norm": float(np.linalg.norm(g))})
            return v, g
        x0, bounds = np.asarray(theta0, dtype=float), [(lo, hi), (None, None)]
    else:
        def fun(k):
            v, g = obj.value_and_grad(np.array([k[0], fix_beta]))
            log.append({"iteration": len(log), "cost": v, "grad_norm": float(abs(g[0]))})
            return v, g[:1]
        x0, bounds = np.asarray(theta0[:1], dtype=float), [(lo, hi)]
    res = minimize(fun, x0, jac=True, method="L-BFGS-B", bounds=bounds,
                   options={"ftol": 1e-15, "gtol": 1e-10, "maxiter": 1000})
    theta = res.x if fix_beta is None else np.array([res.x[0], fix_beta])
    return theta, log


def train_empirical(cfg: ExperimentConfig, dataset: NoiseDataset | None = None):
    """Minimize the uncapped empirical cost from a seeded start. Returns params and training log."""
    sc = build_scenario(cfg)
    data = dataset if dataset is not None else sc.dataset()
    obj = sc.objective(data, transformed=False)
    rng = make_rng(cfg.seed, 5)
    if cfg.scenario == "lti":
        theta0 = make_prior(sc).mean + 0.1 * rng.standard_normal(2)
        theta0[0] = np.clip(theta0[0], GAIN_BOUNDS[0] + 1e-3, GAIN_BOUNDS[1] - 1e-3)
        theta, log = _lti_minimize(obj, theta0)
    else:
        tr = cfg.training
        theta0 = float(tr.get("init_scale", 0.1)) * rng.standard_normal(sc.arch.num_params)
        theta, log = adam_minimize(obj.value_and_grad, theta0, float(tr.get("lr", 0.01)),
                                   int(tr.get("iterations", 600)))
    params = ControllerParams(sc.arch.tag, theta, sc.arch.hyperparameters(), seed=cfg.seed,
                              provenance={"kind": "empirical", "s": data.s, "T": data.horizon})
    return params, log


def train_benchmark(cfg: ExperimentConfig):
    """Oracle controller: offset cancels the noise mean, gain fit on a large dataset."""
    if cfg.scenario != "lti":
        raise UnsupportedScenarioError("the benchmark controller is defined for the LTI scenario only")
    sc = build_scenario(cfg)
    p = {**LTI_DEFAULTS, **cfg.system}
    # decimal division so that e.g. 0.3 / 0.1 gives exactly 3
    beta = float(Decimal(repr(float(cfg.noise.get("mean", LTI_NOISE["mean"])))) / Decimal(repr(float(p["b"]))))
    n = int(cfg.training.get("benchmark_size", 1024))
    data = sc.dataset(s=n, stream=TRAIN_STREAM + 100)
    obj = sc.objective(data, transformed=False)
    theta, log = _lti_minimize(obj, np.array([make_prior(sc).mean[0], beta]), fix_beta=beta)
    params = ControllerParams("affine", theta, {}, seed=cfg.seed,
                              provenance={"kind": "benchmark", "s": n, "T": cfg.T})
    return params, log


def svgd_config(cfg: ExperimentConfig) -> SVGDConfig:
    s = cfg.svgd
    return SVGDConfig(K=int(s.get("K", 16)), iterations=int(s.get("iterations", 300)),
                      step_size=float(s.get("step_size", 0.05)), seed=int(s.get("seed", cfg.seed)),
                      alpha=float(s.get("alpha", 0.9)))


def train_pac(cfg: ExperimentConfig, dataset: NoiseDataset | None = None, callback=None):
    """SVGD towards the Gibbs posterior at ``lambda*``. Returns (ensemble, log, lambda)."""
    sc = build_scenario(cfg)
    data = dataset if dataset is not None else sc.dataset()
    lam = float(cfg.svgd.get("lam", lambda_star(data.s, cfg.delta, cfg.C)))
    post = GibbsPosterior(make_prior(sc), sc.objective(data), lam)
    ens, log = train_svgd(svgd_config(cfg), post, sc.arch, callback=callback)
    return ens, log, lam


def sample_particle(ens: ParticleEnsemble, seed: int) -> ControllerParams:
    i, theta = ens.sample(seed)
    return ControllerParams(ens.tag, theta, ens.hyperparameters, seed=ens.seed,
                            provenance={"kind": "svgd-sample", "particle": i, "iteration": ens.iteration})


# ---------------------------------------------------------------- certification

def grid_spec(cfg: ExperimentConfig, prior: Prior) -> GridSpec:
    c = cfg.certify
    return GridSpec.covering(prior, int(c.get("grid_steps", 200)), float(c.get("coverage", 0.99)))


def grid_posterior(cfg: ExperimentConfig, dataset: NoiseDataset | None = None, lam: float | None = None):
    if cfg.scenario != "lti":
        raise UnsupportedScenarioError("the gridded posterior needs the two-parameter LTI scenario")
    sc = build_scenario(cfg)
    data = dataset if dataset is not None else sc.dataset()
    prior = make_prior(sc)
    lam = lambda_star(data.s, cfg.delta, cfg.C) if lam is None else lam
    obj = sc.objective(data)
    return build_grid_posterior(prior, obj.values, lam, grid_spec(cfg, prior), cfg.prior.get("tag", ""))


def certify(cfg: ExperimentConfig, mode: str | None = None, dataset: NoiseDataset | None = None) -> BoundCertificate:
    """Bound for the Gibbs posterior at ``lambda*``: exact grid (LTI) or the sampled-prior estimate.

    ``certify.lam`` overrides ``lambda*``. The sampled estimate needs
    ``n_p >~ e^{2 lambda C}`` prior draws, so at ``lambda*`` it usually fails
    its precondition; a smaller ``lam`` keeps it usable.
    """
    mode = mode or cfg.certify.get("mode", "exact")
    sc = build_scenario(cfg)
    data = dataset if dataset is not None else sc.dataset()
    lam = float(cfg.certify.get("lam", lambda_star(data.s, cfg.delta, cfg.C)))
    seeds = {"train": cfg.seed, "train_stream": TRAIN_STREAM}
    if mode == "exact":
        cert = grid_posterior(cfg, data, lam).bound(cfg.delta, cfg.C, data.s)
    elif mode == "empirical":
        obj = sc.objective(data)
        cert = qstar_bound_empirical(make_prior(sc), obj.values, lam, cfg.delta, cfg.delta_hat, cfg.C,
                                     data.s, int(cfg.certify.get("n_p", 100000)), seed=cfg.seed)
    else:
        raise ConfigurationError(f"unknown certificate mode {mode!r}; use exact or empirical")
    cert.seeds.update(seeds)
    cert.extra.update({"scenario": cfg.scenario, "prior": cfg.prior, "gamma": sc.transform.gamma})
    return cert


# ---------------------------------------------------------------- evaluation

def min_robot_distance(sc: Scenario, states: np.ndarray) -> np.ndarray:
    """Smallest inter-robot distance along each trajectory; ``states`` is ``(s, T+1, 8)``."""
    d = np.linalg.norm(states[..., 0:2] - states[..., 4:6], axis=-1)
    return d.min(axis=-1)


def collision_rate(sc: Scenario, controller, dataset: NoiseDataset) -> float:
    """Fraction of trajectories whose inter-robot distance drops below the safe distance."""
    xs, _ = simulate(sc.system, controller, dataset.sequences)
    d = min_robot_distance(sc, np.stack(xs, axis=-2))
    return float(np.mean(d < sc.system.config.safe_distance))


@dataclass
class EvaluationReport:
    train_cost: float
    train_cost_transformed: float
    test_cost: float
    test_size: int
    seeds: dict
    train_collision_pct: float | None = None
    test_collision_pct: float | None = None
    certificate: str | None = None
    controller: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return asdict(self)


def evaluate(params: ControllerParams, cfg: ExperimentConfig, certificate: str | None = None,
             dataset: NoiseDataset | None = None) -> EvaluationReport:
    sc = build_scenario(cfg)
    if params.tag != sc.arch.tag:
        raise ConfigurationError(f"controller architecture {params.tag!r} does not match scenario "
                                 f"{cfg.scenario!r} ({sc.arch.tag!r})")
    if params.tag == "ren" and params.hyperparameters != sc.arch.hyperparameters():
        raise ConfigurationError("controller hyperparameters do not match the scenario")
    train = dataset if dataset is not None else sc.dataset()
    test = sc.test_dataset()
    ctrl = params.build(sc.system)
    raw = sc.objective(train, transformed=False)
    report = EvaluationReport(
        train_cost=raw.value(params.theta),
        train_cost_transformed=sc.objective(train).value(params.theta),
        test_cost=sc.objective(test, transformed=False).value(params.theta),
        test_size=test.s,
        seeds={"train": cfg.seed, "train_stream": TRAIN_STREAM, "test": cfg.test_seed, "test_stream": TEST_STREAM},
        certificate=certificate,
        controller={"tag": params.tag, "provenance": params.provenance},
    )
    if cfg.scenario == "robots":
        report.train_collision_pct = 100.0 * collision_rate(sc, ctrl, train)
        report.test_collision_pct = 100.0 * collision_rate(sc, ctrl, test)
    return report


def baseline_params(cfg: ExperimentConfig) -> ControllerParams:
    """The controller that adds nothing on top of the plant's own stabilization."""
    sc = build_scenario(cfg)
    if cfg.scenario == "lti":
        return ControllerParams("affine", np.zeros(2), {}, provenance={"kind": "zero"})
    return ControllerParams("ren", np.zeros(sc.arch.num_params), sc.arch.hyperparameters(),
                            provenance={"kind": "zero"})


def bounded_rollout(params: ControllerParams, cfg: ExperimentConfig, steps: int | None = None) -> dict:
    """Roll the test set out to ``steps`` and report the largest state norm reached."""
    sc = build_scenario(cfg)
    steps = int(steps or cfg.evaluation.get("bounded_steps", 400))
    test = sc.test_dataset().with_horizon(steps)
    xs, us = simulate(sc.system, params.build(sc.system), test.sequences, check=False)
    X = np.stack(xs, axis=-2)
    finite = bool(np.all(np.isfinite(X)))
    peak = float(np.max(np.linalg.norm(X, axis=-1))) if finite else math.inf
    limit = float(cfg.evaluation.get("state_limit", 100.0))
    return {"steps": steps, "trajectories": test.s, "finite": finite, "max_state_norm": peak,
            "state_limit": limit, "bounded": finite and peak <= limit}


# ---------------------------------------------------------------- bound study

_PRIOR_INDEX = {"P_N": 0, "P_U": 1}


def _cell_seed(cfg: ExperimentConfig, *key: int) -> int:
    return int(make_rng(cfg.seed, 17, *key).integers(2 ** 31))


def bound_cell(cfg: ExperimentConfig, s: int, delta: float, prior_tag: str, samples: int,
               test_obj: ClosedLoopObjective, rep: int = 0, costs_cache: dict | None = None) -> dict:
    """One bound-study cell: fresh Q* at ``lambda*(s, delta)``, its bound, and sampled true costs."""
    c = cfg.updated({"prior": {"tag": prior_tag}, "s": s, "delta": delta})
    sc = build_scenario(c)
    data = sc.dataset(s=s, stream=1000 + s + 100000 * rep)
    prior = make_prior(sc)
    spec = grid_spec(c, prior)
    key = (s, prior_tag, rep)
    costs = None if costs_cache is None else costs_cache.get(key)
    lam = lambda_star(s, delta, c.C)
    gp = build_grid_posterior(prior, sc.objective(data).values, lam, spec, prior_tag, costs=costs)
    if costs_cache is not None:
        costs_cache[key] = gp.costs
    thetas = sample_grid(gp, _cell_seed(cfg, s, int(round(delta * 1000)), _PRIOR_INDEX.get(prior_tag, 99), rep), samples)
    true = test_obj.values(thetas)
    cert = gp.bound(delta, c.C, s)
    return {"s": s, "delta": delta, "prior": prior_tag, "rep": rep, "lam": lam, "bound": cert.bound,
            "true_costs": true.tolist(), "thetas": thetas.tolist()}


def bound_study(cfg: ExperimentConfig, progress=None) -> list[dict]:
    """Sweep over (s, delta, prior); the true cost is approximated on the test set."""
    if cfg.scenario != "lti":
        raise UnsupportedScenarioError("the bound study runs on the LTI scenario")
    bs = cfg.bound_study
    sc = build_scenario(cfg)
    test_obj = sc.objective(sc.test_dataset())
    cache: dict = {}
    rows = []
    for s in bs.get("s_values", [8, 32, 128, 512]):
        for prior_tag in bs.get("priors", ["P_N", "P_U"]):
            for delta in bs.get("deltas", [0.1, 0.2, 0.4]):
                t0 = time.perf_counter()
                row = bound_cell(cfg, int(s), float(delta), prior_tag, int(bs.get("samples", 10)), test_obj,
                                 costs_cache=cache)
                row["seconds"] = time.perf_counter() - t0
                rows.append(row)
                if progress is not None:
                    progress(row)
    return rows


def violation_study(cfg: ExperimentConfig, s: int = 8, delta: float = 0.2, prior_tag: str = "P_N",
                    repetitions: int = 50) -> dict:
    """Repeat one cell on independent training sets; fraction of sampled controllers above their bound."""
    sc = build_scenario(cfg)
    test_obj = sc.objective(sc.test_dataset())
    samples = int(cfg.bound_study.get("samples", 10))
    viol = 0
    total = 0
    for rep in range(repetitions):
        row = bound_cell(cfg, s, delta, prior_tag, samples, test_obj, rep=rep + 1)
        viol += int(np.sum(np.asarray(row["true_costs"]) > row["bound"]))
        total += samples
    return {"s": s, "delta": delta, "prior": prior_tag, "repetitions": repetitions,
            "draws": total, "violations": viol, "fraction": viol / total}


def study_rows_csv(rows: list[dict]) -> tuple[list[str], list[list]]:
    """Flatten bound-study rows into a header and CSV rows (one column per sampled true cost)."""
    n = max(len(r["true_costs"]) for r in rows) if rows else 0
    header = ["s", "delta", "prior", "lambda", "bound"] + [f"true_cost_{i}" for i in range(n)]
    body = [[r["s"], r["delta"], r["prior"], r["lam"], r["bound"], *r["true_costs"]] for r in rows]
    return header, body
