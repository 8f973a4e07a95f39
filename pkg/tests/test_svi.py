import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from gfg import modelfile, oracle, svi
from gfg.distributions import Normal, kl_normal
from gfg.errors import DivergenceError, OwnershipError, UnsupportedError
from gfg.graph import build_graph

POST = Normal(1.0, 1 / math.sqrt(2))
LOG_Z = float(Normal(0.0, math.sqrt(2)).log_prob(2.0))

PRIOR_ONLY = {
    "nodes": [{"name": "z", "kind": "latent", "distribution": "normal", "params": {"loc": 0.5, "scale": 2.0}}],
    "links": [],
}


def theta_model(values):
    return {
        "nodes": [
            {"name": "theta", "kind": "variable_param", "init": 0.0},
            {"name": "x", "kind": "observed", "distribution": "normal", "params": {"loc": "theta", "scale": 1.0},
             "value": [float(v) for v in values]},
        ],
        "links": [{"from": "theta", "to": "x"}],
        "collections": [{"name": "data", "members": ["x"], "index": {"name": "i", "range": [1, len(values)]}}],
    }


def se(x):
    return np.std(x, ddof=1) / math.sqrt(len(x))


def test_log_evidence_constant():
    assert LOG_Z == pytest.approx(-2.26551, abs=1e-5)


def test_elbo_at_exact_posterior_is_log_evidence(models):
    phi = {"z.loc": POST.loc, "z.log_scale": math.log(POST.scale)}
    draws = svi.elbo_samples(models["conjugate"], phi=phi, rng=np.random.default_rng(0), samples=1000)
    # log p(z, x) - log q(z) is constant in z when q is the posterior
    assert np.allclose(draws, LOG_Z, atol=1e-12)


def test_elbo_at_prior_is_log_evidence_minus_kl(models):
    draws = svi.elbo_samples(models["conjugate"], rng=np.random.default_rng(1), samples=100_000)
    expected = LOG_Z - kl_normal(Normal(0.0, 1.0), POST)
    assert abs(draws.mean() - expected) <= 3 * se(draws)
    assert draws.mean() < LOG_Z


def test_elbo_without_observations_and_q_equal_p():
    g = build_graph(PRIOR_ONLY)
    phi = {"z.loc": 0.5, "z.log_scale": math.log(2.0)}
    draws = svi.elbo_samples(g, phi=phi, rng=np.random.default_rng(2), samples=500)
    assert np.allclose(draws, 0.0, atol=1e-12)


def test_elbo_estimate_is_taped(models):
    est = svi.elbo_estimate(models["conjugate"], rng=np.random.default_rng(3))
    assert set(est.tape.leaves) == {"phi:z.loc", "phi:z.log_scale"}


def test_latent_free_gradient_is_exact():
    data = [1.0, 2.5, -0.5]
    g = build_graph(theta_model(data))
    grad = svi.grad_reparam(g, theta={"theta": 0.25}, rng=np.random.default_rng(0))
    assert grad.phi == {}
    assert grad.theta["theta"] == pytest.approx(sum(x - 0.25 for x in data), abs=1e-12)


def test_reparam_needs_continuous_latents(models):
    with pytest.raises(UnsupportedError):
        svi.grad_reparam(models["coin"])


def test_reparam_matches_finite_differences_with_common_random_numbers(models):
    g = models["conjugate"]
    cfg = svi.SviConfig(mc_samples=256)
    phi = {"z.loc": 0.3, "z.log_scale": -0.2}
    grad = svi.grad_reparam(g, cfg=cfg, phi=phi, rng=np.random.default_rng(8))
    h = 1e-5
    for key in phi:
        up, down = dict(phi), dict(phi)
        up[key] += h
        down[key] -= h
        f_up = svi.elbo_samples(g, cfg=cfg, phi=up, rng=np.random.default_rng(8)).mean()
        f_down = svi.elbo_samples(g, cfg=cfg, phi=down, rng=np.random.default_rng(8)).mean()
        fd = (f_up - f_down) / (2 * h)
        assert abs(grad.phi[key] - fd) <= 1e-3 * abs(fd), key


def test_score_function_has_zero_mean():
    logits = np.array([0.4, -0.3])
    probs = np.exp(logits) / np.exp(logits).sum()
    g = build_graph({
        "nodes": [{"name": "k", "kind": "latent", "distribution": "categorical", "params": {"probs": list(probs)}}],
        "links": [],
    })
    phi = {"k.logits.0": logits[0], "k.logits.1": logits[1]}
    grad = svi.grad_reinforce(g, cfg=svi.SviConfig(mc_samples=100_000), phi=phi, rng=np.random.default_rng(4),
                              per_sample=True)
    for draws in grad.phi.values():
        assert abs(draws.mean()) <= 3 * se(draws)


def test_baseline_keeps_mean_and_cuts_variance(models):
    g = models["coin"]
    phi = {"z.logits.0": 0.4, "z.logits.1": -0.3}
    cfg = svi.SviConfig(mc_samples=100_000)
    b = float(svi.elbo_samples(g, cfg=cfg, phi=phi, rng=np.random.default_rng(10)).mean())
    plain = svi.grad_reinforce(g, cfg=cfg, phi=phi, rng=np.random.default_rng(11), per_sample=True)
    based = svi.grad_reinforce(g, cfg=cfg, baseline=b, phi=phi, rng=np.random.default_rng(12), per_sample=True)
    for key in phi:
        x, y = plain.phi[key], based.phi[key]
        assert abs(x.mean() - y.mean()) <= 3 * math.hypot(se(x), se(y))
        assert y.var() < x.var()


def test_moving_average_baseline():
    b = svi.MovingAverageBaseline(decay=0.5)
    b.update(4.0)
    assert b.value == 4.0
    b.update(2.0)
    assert b.value == 3.0


def test_sga_step_examples():
    assert svi.sga_step(0.0, 1.0, 0.1) == pytest.approx(0.1)
    assert svi.sga_step({"w": 1.5}, {"w": 0.0}, 0.3) == {"w": 1.5}
    opt = svi.SGA(svi.Constant(0.1))
    W = {"w": 1.0}
    for _ in range(2):
        W = opt.step(W, {"w": 2.0})
    assert W["w"] == pytest.approx(1.0 + 2 * 0.1 * 2.0)


def test_adam_first_step_moves_by_rate():
    opt = svi.Adam(svi.Constant(0.01))
    W = opt.step({"a": 0.0, "b": 0.0}, {"a": 5.0, "b": -0.001})
    assert W["a"] == pytest.approx(0.01, rel=1e-6)
    assert W["b"] == pytest.approx(-0.01, rel=1e-4)


def test_robbins_monro_examples():
    assert svi.validate_robbins_monro(svi.RobbinsMonro(1.0, 1.0))
    assert not svi.validate_robbins_monro(svi.RobbinsMonro(1.0, 0.5))
    assert not svi.validate_robbins_monro(svi.Constant(0.1))
    assert svi.RobbinsMonro(2.0, 1.0).rate(4) == 0.5


def test_config_rejects_bad_values():
    with pytest.raises(ValueError):
        svi.SviConfig(mc_samples=0)
    with pytest.raises(ValueError):
        svi.SviConfig(lr_schedule=svi.RobbinsMonro(1.0, 0.4))
    with pytest.raises(ValueError):
        svi.SviConfig(optimizer="lbfgs")


def test_theta_learning_recovers_sample_mean():
    data = np.random.default_rng(2024).normal(3.0, 1.0, size=100)
    g = build_graph(theta_model(data))
    cfg = svi.SviConfig(steps=200, mc_samples=1, lr_schedule=svi.Constant(0.005), optimizer="sga")
    fitted = svi.fit(g, cfg=cfg)
    assert abs(fitted.theta["theta"] - data.mean()) <= 1e-3


def test_zero_steps_returns_initial_parameters(models):
    phi = {"z.loc": 0.2, "z.log_scale": -0.1}
    fitted = svi.fit(models["conjugate"], cfg=svi.SviConfig(steps=0), phi=phi)
    assert fitted.phi == phi
    assert fitted.elbo == []


def test_fit_is_deterministic(models):
    cfg = svi.SviConfig(steps=50, seed=5)
    assert svi.fit(models["coin"], cfg=cfg).phi == svi.fit(models["coin"], cfg=cfg).phi


def test_non_finite_objective_raises():
    g = build_graph({
        "nodes": [{"name": "b", "kind": "latent", "distribution": "bernoulli", "params": {"probs": 1.0}}],
        "links": [],
    })
    with pytest.raises(DivergenceError):
        svi.fit(g, cfg=svi.SviConfig(steps=5))


def test_ownership_is_checked(models):
    g = models["two_collection_gaussian"]
    with pytest.raises(OwnershipError):
        svi.fit(g, q=[svi.mean_field(g, ["z_a"])])
    with pytest.raises(OwnershipError):
        svi.fit(g, q=[svi.mean_field(g), svi.mean_field(g, ["z_b"], owner="B")])


def test_exact_posterior_is_stationary(models):
    g = models["conjugate"]
    start = {"z.loc": POST.loc, "z.log_scale": math.log(POST.scale)}
    cfg = svi.SviConfig(steps=500, mc_samples=64, lr_schedule=svi.Constant(1e-3), optimizer="sga")
    stay = svi.fit(g, cfg=cfg, phi=start).phi
    assert all(abs(stay[k] - start[k]) <= 0.02 for k in start)
    moved = svi.fit(g, cfg=cfg).phi
    assert abs(moved["z.loc"]) > 0.2


def test_estimators_agree_on_continuous_model(models):
    g = models["conjugate"]
    phi = {"z.loc": -0.4, "z.log_scale": 0.3}
    cfg = svi.SviConfig(mc_samples=100_000)
    a = svi.grad_reparam(g, cfg=cfg, phi=phi, rng=np.random.default_rng(20), per_sample=True)
    b = svi.grad_reinforce(g, cfg=cfg, phi=phi, rng=np.random.default_rng(21), per_sample=True)
    for key in phi:
        x, y = a.phi[key], b.phi[key]
        assert abs(x.mean() - y.mean()) <= 3 * math.hypot(se(x), se(y)), key


def test_fit_tracks_discrete_posterior(models):
    exact = oracle.enumerate_posterior(models["coin"]).marginals["z"]
    fitted = svi.fit(models["coin"]).posterior()["z"]["probs"]
    assert oracle.total_variation(fitted, exact) <= 0.05


@settings(max_examples=100, deadline=None)
@given(st.lists(st.floats(-100, 100), max_size=40))
def test_monotone_smooth_is_a_non_decreasing_projection(trace):
    out = svi.monotone_smooth(trace)
    assert len(out) == len(trace)
    assert all(a <= b + 1e-9 for a, b in zip(out, out[1:]))
    assert sum(out) == pytest.approx(sum(trace), abs=1e-6)
    assert svi.monotone_smooth(out) == pytest.approx(out, abs=1e-9)
    if all(a <= b for a, b in zip(trace, trace[1:])):
        assert out == pytest.approx(trace)


def test_bundled_models_fit_quickly():
    g = modelfile.load("discrete_pair")
    fitted = svi.fit(g, cfg=svi.SviConfig(steps=20))
    assert len(fitted.elbo) == len(fitted.elbo_smoothed) == 20
