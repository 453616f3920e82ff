from __future__ import annotations

import numpy as np
import pytest

from pacsnoc import autodiff as ad
from pacsnoc.controllers import AffineArchitecture, RenArchitecture
from pacsnoc.cost import CostTransform, QuadraticCost
from pacsnoc.dynamics import NoiseModel, ScalarLTI, generate_dataset
from pacsnoc.errors import NumericalDivergenceError, TrainingDivergedError
from pacsnoc.experiments import ExperimentConfig, build_scenario, lti_prior
from pacsnoc.pacbayes import GibbsPosterior, GridSpec, Prior, build_grid_posterior, lambda_star
from pacsnoc.svgd import (AdaGrad, ClosedLoopObjective, GradientReport, SVGDConfig, adam_minimize,
                          affine_lti_value_and_grad, grad_empirical_cost, rbf_kernel, svgd_direction, svgd_step,
                          train_svgd)


class GaussianTarget:
    """``lambda L(theta) = 0.5 (theta - m)' A (theta - m)`` with lambda = 1."""

    def __init__(self, m, A):
        self.m = np.asarray(m, dtype=float)
        self.A = np.asarray(A, dtype=float)

    def value(self, th):
        d = np.asarray(th) - self.m
        return float(0.5 * d @ self.A @ d)

    def value_and_grad(self, th):
        d = np.asarray(th) - self.m
        return float(0.5 * d @ self.A @ d), self.A @ d


def _lti_objective(s=8, seed=0, transform=True):
    sys = ScalarLTI(0.8, 0.1, 2.0)
    data = generate_dataset(NoiseModel.iid_gaussian([0.3], [0.09], 10), s, seed)
    return ClosedLoopObjective(sys, AffineArchitecture(), QuadraticCost([5.0], [0.003]), data,
                               CostTransform(20.0) if transform else None)


def test_analytic_matches_reverse_mode():
    rng = np.random.default_rng(0)
    for transform in (False, True):
        obj = _lti_objective(transform=transform)
        thetas = np.column_stack([rng.uniform(-1.9, 17.9, 100), rng.uniform(-6, 6, 100)])
        va, ga = affine_lti_value_and_grad(obj.system, obj.stage, obj.dataset, thetas, obj.transform)
        for th, v, g in zip(thetas, va, ga):
            v2, g2 = obj.value_and_grad(th)
            assert abs(v - v2) <= 1e-9 * max(abs(v2), 1e-300)
            assert np.linalg.norm(g - g2) <= 1e-9 * np.linalg.norm(g2)


def test_gradient_zero_at_minimum_of_quadratic():
    x = np.array([1.0, -2.0, 0.5])
    v, g = ad.value_and_grad(lambda t: ad.sum(ad.square(t - x)), x.copy())
    assert np.linalg.norm(g) <= 1e-8


def test_ren_gradient_finite_differences():
    sys = ScalarLTI(0.8, 0.1, 2.0)
    arch = RenArchitecture(2, 2, 1, 1)
    data = generate_dataset(NoiseModel.iid_gaussian([0.3], [0.09], 10), 4, seed=1)
    obj = ClosedLoopObjective(sys, arch, QuadraticCost([5.0], [0.003]), data, CostTransform(20.0))
    rng = np.random.default_rng(2)
    h = 1e-5
    worst = 0.0
    for _ in range(20):
        th = rng.normal(size=arch.num_params)
        _, g = obj.value_and_grad(th)
        fd = np.empty_like(th)
        for i in range(len(th)):
            e = np.zeros_like(th)
            e[i] = h
            fd[i] = (obj.value(th + e) - obj.value(th - e)) / (2 * h)
        rel = np.abs(g - fd) / np.maximum(np.abs(fd), 1e-6)
        worst = max(worst, float(rel.max()))
    assert worst <= 1e-4


def test_transformed_gradient_chain_rule_bound():
    raw = _lti_objective(transform=False)
    capped = _lti_objective(transform=True)
    rng = np.random.default_rng(3)
    for _ in range(30):
        th = np.array([rng.uniform(-1.9, 17.9), rng.uniform(-6, 6)])
        g_raw = raw.value_and_grad(th)[1]
        g_cap = capped.value_and_grad(th)[1]
        assert np.linalg.norm(g_cap) <= (1.0 / 20.0) * np.linalg.norm(g_raw) * (1 + 1e-12)


def test_gradient_report_rejects_non_finite():
    with pytest.raises(NumericalDivergenceError):
        GradientReport(np.array([1.0, np.nan]), 0.0)


def test_grad_empirical_cost_wrapper():
    obj = _lti_objective()
    rep = grad_empirical_cost(obj.system, obj.arch, np.array([7.0, 3.0]), obj.stage, obj.dataset, obj.transform)
    assert rep.gradient.shape == (2,)
    assert rep.value == pytest.approx(obj.value([7.0, 3.0]))


def test_single_particle_is_gradient_ascent():
    prior = lti_prior("P_N")
    post = GibbsPosterior(prior, _lti_objective(), 10.0)
    x = np.array([[6.5, 1.0]])
    new, _ = svgd_step(x, post, 1e-3)
    score, _ = post.score(x[0])
    np.testing.assert_allclose(new[0], x[0] + 1e-3 * score, rtol=0, atol=1e-12)


def test_zero_step_identity():
    prior = lti_prior("P_N")
    post = GibbsPosterior(prior, _lti_objective(), 10.0)
    X = prior.sample(np.random.default_rng(0), 6)
    new, _ = svgd_step(X, post, 0.0)
    assert new.tobytes() == X.tobytes()


def test_degenerate_bandwidth_fallback():
    X = np.ones((4, 3))
    _, h = rbf_kernel(X)
    assert h == 1.0
    _, h1 = rbf_kernel(X[:1])
    assert h1 == 1.0


def test_permutation_equivariance():
    rng = np.random.default_rng(4)
    X = rng.normal(size=(7, 3))
    S = rng.normal(size=(7, 3))
    p = rng.permutation(7)
    a, _ = svgd_direction(X, S)
    b, _ = svgd_direction(X[p], S[p])
    np.testing.assert_allclose(a[p], b, atol=1e-14)


def test_conjugate_gaussian_recovered():
    prior = Prior.spherical_gaussian(2, 1.0)
    A = np.array([[2.0, 0.6], [0.6, 1.0]])
    m = np.array([1.0, -0.5])
    post = GibbsPosterior(prior, GaussianTarget(m, A), 1.0)
    prec = np.eye(2) + A
    cov = np.linalg.inv(prec)
    mean = cov @ A @ m
    ens, _ = train_svgd(SVGDConfig(K=30, iterations=3000, step_size=0.05, seed=0), post)
    X = ens.particles
    assert np.linalg.norm(X.mean(axis=0) - mean) <= 0.05
    emp = np.cov(X.T)
    assert np.linalg.norm(emp - cov) / np.linalg.norm(cov) <= 0.15


def test_zero_iterations_equals_prior_samples():
    prior = lti_prior("P_N")
    post = GibbsPosterior(prior, _lti_objective(), 10.0)
    ens, log = train_svgd(SVGDConfig(K=5, iterations=0, seed=3), post)
    from pacsnoc.dynamics import make_rng
    np.testing.assert_array_equal(ens.particles, prior.sample(make_rng(3, 3), 5))
    assert log == []


def test_reproducible_ensemble():
    prior = lti_prior("P_N")
    post = GibbsPosterior(prior, _lti_objective(), 10.0)
    a, _ = train_svgd(SVGDConfig(K=6, iterations=20, seed=1), post)
    b, _ = train_svgd(SVGDConfig(K=6, iterations=20, seed=1), post)
    assert a.particles.tobytes() == b.particles.tobytes()
    assert a.sample(9) [0] == b.sample(9)[0]


def test_mean_cost_descends_early():
    prior = lti_prior("P_N")
    post = GibbsPosterior(prior, _lti_objective(), lambda_star(8, 0.2))
    _, log = train_svgd(SVGDConfig(K=16, iterations=11, step_size=0.005, seed=0), post)
    costs = [r["mean_cost"] for r in log]
    assert all(b <= a + 1e-12 for a, b in zip(costs, costs[1:]))


def test_uniform_prior_particles_stay_in_support():
    prior = lti_prior("P_U")
    post = GibbsPosterior(prior, _lti_objective(), 30.0)
    ens, _ = train_svgd(SVGDConfig(K=16, iterations=100, step_size=0.2, seed=0), post)
    assert np.all(np.abs(ens.particles[:, 1]) <= 5.0)


def test_sampled_particle_in_grid_high_mass_region():
    cfg = ExperimentConfig.lti(s=8)
    sc = build_scenario(cfg)
    data = sc.dataset()
    prior = lti_prior("P_N")
    lam = lambda_star(8, 0.2)
    post = GibbsPosterior(prior, sc.objective(data), lam)
    ens, _ = train_svgd(SVGDConfig(K=16, iterations=300, step_size=0.05, seed=0), post)
    gp = build_grid_posterior(prior, sc.objective(data).values, lam, GridSpec.covering(prior, 200))
    be, ke = gp.spec.edges()
    median = np.median(gp.mass)
    for seed in range(5):
        _, th = ens.sample(seed)
        i = np.searchsorted(be, th[1]) - 1
        j = np.searchsorted(ke, th[0]) - 1
        assert gp.mass[i, j] > median


def test_divergence_detector():
    class Exploding:
        def __init__(self):
            self.n = 0

        def values_and_grads(self, th):
            self.n += 1
            return np.full(len(th), 10.0 ** self.n), np.zeros_like(th)

    post = GibbsPosterior(Prior.spherical_gaussian(2, 1.0), Exploding(), 1.0)
    with pytest.raises(TrainingDivergedError):
        train_svgd(SVGDConfig(K=3, iterations=10), post)


def test_adam_minimizes_quadratic():
    target = np.array([1.0, -3.0])
    f = lambda th: (float(np.sum((th - target) ** 2)), 2 * (th - target))
    th, log = adam_minimize(f, np.zeros(2), 0.05, 2000)
    np.testing.assert_allclose(th, target, atol=1e-3)
    assert log[-1]["cost"] < log[0]["cost"]


def test_adagrad_scale_shape():
    opt = AdaGrad()
    out = opt.scale(np.array([[3.0, -4.0]]))
    np.testing.assert_allclose(np.abs(out), 1.0, atol=1e-6)
