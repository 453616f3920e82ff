"""Acceptance checks, one test per criterion.

Each test records a ``CRITERION n: PASS|FAIL ...`` line; the lines are printed
in the terminal summary (see conftest.py) and immediately with ``-s``.
Run alone with ``python3 -m pytest tests/test_acceptance.py -v``.
"""
from __future__ import annotations

import math
import time

import numpy as np
import pytest

from pacsnoc import experiments as ex
from pacsnoc.controllers import AffineArchitecture, InternalModelController, RenArchitecture, realize_ren
from pacsnoc.cost import CostTransform, QuadraticCost
from pacsnoc.dynamics import NoiseModel, ScalarLTI, build_robot_system, generate_dataset
from pacsnoc.pacbayes import GibbsPosterior, Prior, free_energy, lambda_star, min_prior_samples
from pacsnoc.svgd import ClosedLoopObjective, SVGDConfig, affine_lti_value_and_grad, svgd_step, train_svgd

RESULTS: dict[int, str] = {}


def record(n: int, ok: bool, detail: str) -> None:
    line = f"CRITERION {n}: {'PASS' if ok else 'FAIL'}  {detail}"
    RESULTS[n] = line
    print(line, flush=True)
    assert ok, line


@pytest.fixture(scope="module")
def study():
    cfg = ex.ExperimentConfig.lti()
    t0 = time.perf_counter()
    rows = ex.bound_study(cfg)
    return cfg, rows, time.perf_counter() - t0


def test_criterion_1_bound_validity(study):
    cfg, rows, t_grid = study
    t0 = time.perf_counter()
    viol = ex.violation_study(cfg, s=8, delta=0.2, prior_tag="P_N", repetitions=50)
    elapsed = t_grid + time.perf_counter() - t0
    bad = [(r["s"], r["delta"], r["prior"]) for r in rows if max(r["true_costs"]) > r["bound"]]
    ok = not bad and all(len(r["true_costs"]) == 10 for r in rows) \
        and viol["fraction"] <= 0.2 + 0.1 and elapsed <= 600
    record(1, ok, f"{len(rows)} cells, cells with a violation: {bad or 'none'}; "
                  f"50-rep violation fraction {viol['fraction']:.3f} (limit 0.3); {elapsed:.0f}s")


def test_criterion_2_bound_trends(study):
    _, rows, _ = study
    b = {(r["s"], r["delta"], r["prior"]): r["bound"] for r in rows}
    s_vals = sorted({k[0] for k in b})
    deltas = sorted({k[1] for k in b})
    fails = []
    for s in s_vals:
        for d in deltas:
            if not b[(s, d, "P_N")] < b[(s, d, "P_U")]:
                fails.append(f"prior s={s} d={d}")
    for p in ("P_N", "P_U"):
        for d in deltas:
            seq = [b[(s, d, p)] for s in s_vals]
            if not all(x > y for x, y in zip(seq, seq[1:])):
                fails.append(f"s-trend {p} d={d}")
        for s in s_vals:
            seq = [b[(s, d, p)] for d in deltas]
            if not all(x > y for x, y in zip(seq, seq[1:])):
                fails.append(f"delta-trend {p} s={s}")
    record(2, not fails, f"strict trends over {len(b)} cells; failures: {fails or 'none'}")


def test_criterion_3_lambda_star():
    lam = lambda_star(8, 0.2, 1.0)
    f = lambda l: 1.0 + math.log(1 / 0.2) / l + l / (8 * 8)
    sweep = np.logspace(-2, 3, 1000)
    vals = np.array([f(l) for l in sweep])
    ok = abs(lam - 10.1482) <= 1e-3 and f(lam) <= vals.min()
    record(3, ok, f"lambda*={lam:.5f} (target 10.1482 +- 1e-3); f(lambda*)={f(lam):.8f} "
                  f"<= sweep min {vals.min():.8f}")


def test_criterion_4_hoeffding_estimator():
    n_min = min_prior_samples(1.0, 1.0, 0.1)
    diffs = {}
    for lam in (1.0, 3.0):
        cfg = ex.ExperimentConfig.lti(certify={"lam": lam, "n_p": 100000})
        exact = ex.certify(cfg, "exact").bound
        emp = ex.certify(cfg, "empirical").bound
        diffs[lam] = abs(emp - exact)
    ok = n_min == 4 and all(d <= 1e-2 for d in diffs.values())
    record(4, ok, f"n_p minimum {n_min} (want 4); |empirical - exact| at n_p=1e5: "
                  + ", ".join(f"lambda={k:g}: {v:.2e}" for k, v in diffs.items()))


def test_criterion_5_gibbs_optimality():
    cfg = ex.ExperimentConfig.lti()
    gp = ex.grid_posterior(cfg)
    assert gp.mass.shape == (200, 200)
    lam = gp.lam
    f_star = free_energy(gp.mass, gp.prior_mass, gp.costs, lam)
    rng = np.random.default_rng(0)
    worst = math.inf
    for i in range(1000):
        eps = 10.0 ** rng.uniform(-3, 0.5)
        q = gp.mass * np.exp(eps * rng.standard_normal(gp.mass.shape))
        q /= q.sum()
        worst = min(worst, free_energy(q, gp.prior_mass, gp.costs, lam) - f_star)
    record(5, worst >= 0.0, f"F(Q*)={f_star:.6f}; smallest F(Q)-F(Q*) over 1000 perturbations {worst:.3e}")


def _lti_objective(arch, s=8, seed=0, transform=True):
    sys = ScalarLTI(0.8, 0.1, 2.0)
    data = generate_dataset(NoiseModel.iid_gaussian([0.3], [0.09], 10), s, seed)
    return ClosedLoopObjective(sys, arch, QuadraticCost([5.0], [0.003]), data,
                               CostTransform(20.0) if transform else None)


def test_criterion_6_gradients():
    arch = RenArchitecture(2, 2, 1, 1)
    obj = _lti_objective(arch, s=4, seed=1)
    rng = np.random.default_rng(2)
    h = 1e-5
    worst_fd = 0.0
    for _ in range(20):
        th = rng.normal(size=arch.num_params)
        _, g = obj.value_and_grad(th)
        fd = np.array([(obj.value(th + h * e) - obj.value(th - h * e)) / (2 * h) for e in np.eye(len(th))])
        worst_fd = max(worst_fd, float((np.abs(g - fd) / np.maximum(np.abs(fd), 1e-6)).max()))
    aff = _lti_objective(AffineArchitecture())
    thetas = np.column_stack([rng.uniform(-1.9, 17.9, 50), rng.uniform(-6, 6, 50)])
    va, ga = affine_lti_value_and_grad(aff.system, aff.stage, aff.dataset, thetas, aff.transform)
    worst_an = 0.0
    for th, v, g in zip(thetas, va, ga):
        v2, g2 = aff.value_and_grad(th)
        worst_an = max(worst_an, abs(v - v2) / abs(v2), float(np.linalg.norm(g - g2) / np.linalg.norm(g2)))
    ok = worst_fd <= 1e-4 and worst_an <= 1e-9
    record(6, ok, f"REN vs finite differences worst rel err {worst_fd:.2e} (<=1e-4); "
                  f"analytic vs reverse-mode {worst_an:.2e} (<=1e-9)")


class _Quadratic:
    def __init__(self, m, A):
        self.m, self.A = np.asarray(m, float), np.asarray(A, float)

    def value(self, th):
        d = np.asarray(th) - self.m
        return float(0.5 * d @ self.A @ d)

    def value_and_grad(self, th):
        d = np.asarray(th) - self.m
        return float(0.5 * d @ self.A @ d), self.A @ d


def test_criterion_7_svgd():
    post = GibbsPosterior(ex.lti_prior("P_N"), _lti_objective(AffineArchitecture()), 10.0)
    x = np.array([[6.5, 1.0]])
    new, _ = svgd_step(x, post, 1e-3)
    score, _ = post.score(x[0])
    single = float(np.max(np.abs(new[0] - (x[0] + 1e-3 * score))))

    A = np.array([[2.0, 0.6], [0.6, 1.0]])
    m = np.array([1.0, -0.5])
    gauss = GibbsPosterior(Prior.spherical_gaussian(2, 1.0), _Quadratic(m, A), 1.0)
    cov = np.linalg.inv(np.eye(2) + A)
    mean = cov @ A @ m
    ens, _ = train_svgd(SVGDConfig(K=30, iterations=3000, step_size=0.05, seed=0), gauss)
    mean_err = float(np.linalg.norm(ens.particles.mean(axis=0) - mean))
    cov_err = float(np.linalg.norm(np.cov(ens.particles.T) - cov) / np.linalg.norm(cov))
    ok = single <= 1e-12 and mean_err <= 0.05 and cov_err <= 0.15
    record(7, ok, f"single-particle deviation {single:.1e}; conjugate mean err {mean_err:.4f}, "
                  f"cov err {100 * cov_err:.1f}%")


def test_criterion_8_stability():
    arch = RenArchitecture(8, 8, 8, 4)
    rng = np.random.default_rng(8)
    scales = 10.0 ** rng.uniform(-3, 3, 10 ** 4)
    failed = sum(not realize_ren(sc * rng.normal(size=arch.num_params), arch).certified() for sc in scales)
    small = RenArchitecture(4, 4, 2, 2)
    rollouts = []
    for sc in (0.1, 3.0, 100.0):
        ren = realize_ren(sc * rng.normal(size=small.num_params), small)
        w = rng.uniform(-1.0, 1.0, size=(10 ** 5, 2))
        _, xi = ren.run(w)
        peak = float(np.max(np.linalg.norm(xi, axis=-1))) if np.all(np.isfinite(xi)) else math.inf
        rollouts.append((peak, ren.state_bound(math.sqrt(2.0))))
    ok = failed == 0 and all(p <= b for p, b in rollouts)
    record(8, ok, f"{failed}/10000 certificates failed; 1e5-step peaks vs bound: "
                  + ", ".join(f"{p:.3g}<={b:.3g}" for p, b in rollouts))


@pytest.mark.slow
def test_criterion_9_robots():
    t0 = time.perf_counter()
    cfg = ex.ExperimentConfig.robots("ci")
    base = ex.evaluate(ex.baseline_params(cfg), cfg)
    emp, _ = ex.train_empirical(cfg)
    ens, _, _ = ex.train_pac(cfg)
    pac = ex.sample_particle(ens, cfg.seed)
    parts = []
    ok = True
    for name, p in (("empirical", emp), ("svgd", pac)):
        r = ex.evaluate(p, cfg)
        bnd = ex.bounded_rollout(p, cfg)
        good = r.test_cost < base.test_cost and r.train_collision_pct == 0.0 and bnd["bounded"]
        ok &= good
        parts.append(f"{name}: test {r.test_cost:.1f} (baseline {base.test_cost:.1f}), "
                     f"train collisions {r.train_collision_pct:.0f}%, 400-step peak {bnd['max_state_norm']:.2f}")
    elapsed = time.perf_counter() - t0
    ok = ok and elapsed <= 3600
    record(9, ok, "; ".join(parts) + f"; {elapsed:.0f}s")


def _reconstruction_error(sys, arch, noise, seed):
    ctrl = arch.build(np.random.default_rng(seed).normal(size=arch.num_params), sys)
    assert isinstance(ctrl, InternalModelController)
    policy = ctrl.start(sys)
    xs, us = [], []
    for t in range(noise.shape[0]):
        x = sys.nominal_initial_state + noise[0] if t == 0 else sys.f(t, xs, us) + noise[t]
        xs.append(x)
        us.append(policy(t, xs, us))
    return float(np.max(np.abs(np.stack(policy.w_hat) - noise)))


def test_criterion_10_noise_reconstruction():
    lti_noise = generate_dataset(NoiseModel.iid_gaussian([0.3], [0.09], 100), 1, seed=3).sequences[0]
    e_lti = _reconstruction_error(ScalarLTI(0.8, 0.1, 2.0), RenArchitecture(2, 2, 1, 1), lti_noise, 1)
    rob_noise = generate_dataset(NoiseModel.iid_gaussian(np.zeros(8), 0.04 * np.ones(8), 100), 1,
                                 seed=4).sequences[0]
    e_rob = _reconstruction_error(build_robot_system(), RenArchitecture(8, 8, 8, 4), rob_noise, 2)
    record(10, max(e_lti, e_rob) <= 1e-9, f"max |w - w_hat|: LTI {e_lti:.1e}, robots {e_rob:.1e} (<=1e-9)")


if __name__ == "__main__":
    raise SystemExit(pytest.main([__file__, "-v", "-s"]))
