"""Gaussian landmark NLL / MSE data terms."""

import numpy as np
import pytest

import handfit.dual as dm
from handfit.likelihood import (
    SIGMA_INIT,
    SIGMA_MAX,
    SIGMA_MIN,
    LandmarkDistribution,
    LandmarkObservation,
    clamp_sigma,
    mse_loss,
    nll_loss,
    nll_sigma_grad,
)


def obs_from(positions, visible=None):
    vis = np.ones(21, dtype=bool) if visible is None else visible
    return LandmarkObservation(positions=positions, visibility=vis, source_id="t")


def test_perfect_fit_unit_sigma_is_zero():
    mu = np.random.default_rng(0).uniform(0, 224, size=(21, 2))
    dist = LandmarkDistribution(mu=mu, sigma=np.ones(21))
    assert nll_loss(dist, obs_from(mu.copy())) == 0.0


def test_unit_sigma_reduces_to_half_sse():
    rng = np.random.default_rng(1)
    mu = rng.uniform(0, 224, size=(21, 2))
    obs = obs_from(mu + rng.normal(scale=5.0, size=(21, 2)))
    dist = LandmarkDistribution(mu=mu, sigma=np.ones(21))
    sse = np.sum((mu - obs.positions) ** 2)
    assert nll_loss(dist, obs) == pytest.approx(0.5 * sse, rel=1e-12)
    assert nll_loss(dist, obs) == pytest.approx(21 * mse_loss(dist, obs), rel=1e-12)


def test_mse_examples():
    mu = np.full((21, 2), 100.0)
    pos = mu.copy()
    pos[5] += [3.0, 4.0]
    vis = np.zeros(21, dtype=bool)
    vis[5] = True
    dist = LandmarkDistribution(mu=mu, sigma=np.ones(21))
    assert mse_loss(dist, obs_from(pos, vis)) == pytest.approx(12.5, abs=1e-12)
    assert mse_loss(dist, obs_from(mu.copy())) == 0.0


def test_no_visible_joints_warns_and_returns_zero():
    mu = np.zeros((21, 2))
    dist = LandmarkDistribution(mu=mu, sigma=np.ones(21))
    obs = obs_from(np.full((21, 2), np.nan), np.zeros(21, dtype=bool))
    with pytest.warns(RuntimeWarning):
        assert mse_loss(dist, obs) == 0.0
    with pytest.warns(RuntimeWarning):
        assert nll_loss(dist, obs) == 0.0


def test_sigma_stationary_at_mle():
    mu = np.full((21, 2), 112.0)
    pos = mu.copy()
    pos[3] += [10.0, 10.0]  # per-coordinate residual 10 -> sigma* = 10
    vis = np.zeros(21, dtype=bool)
    vis[3] = True
    obs = obs_from(pos, vis)
    sigma = np.full(21, 10.0)
    grad = nll_sigma_grad(mu, sigma, obs)
    assert abs(grad[3]) < 1e-12

    h = 1e-6
    log_s = np.log(10.0)
    f = lambda ls: nll_loss(mu, obs, sigma=np.where(np.arange(21) == 3,
                                                    np.exp(ls), 10.0))
    fd = (f(log_s + h) - f(log_s - h)) / (2 * h)
    assert abs(fd) < 1e-6


def test_optimal_nll_monotone_in_residual():
    vis = np.zeros(21, dtype=bool)
    vis[0] = True
    vals = []
    for r in (2.0, 5.0, 11.0, 30.0):
        mu = np.zeros((21, 2))
        pos = mu.copy()
        pos[0] = [r, 0.0]
        sigma = np.full(21, np.clip(r / np.sqrt(2), SIGMA_MIN, SIGMA_MAX))
        vals.append(nll_loss(mu, obs_from(pos, vis), sigma=sigma))
    assert np.all(np.diff(vals) > 0)


def test_large_sigma_downweights_gradient():
    mu = np.full((21, 2), 50.0)
    pos = mu + 8.0
    obs = obs_from(pos)
    norms = []
    for s in (1.0, 2.0, 4.0, 16.0):
        jet = dm.Jet.seed(mu, np.arange(42).reshape(21, 2), 42)
        out = nll_loss(jet, obs, sigma=np.full(21, s))
        norms.append(np.linalg.norm(out.tan))
    assert np.all(np.diff(norms) < 0)


def test_mu_gradients_match_fd():
    rng = np.random.default_rng(7)
    mu = rng.uniform(0, 224, size=(21, 2))
    obs = obs_from(mu + rng.normal(scale=6.0, size=(21, 2)))
    sigma = rng.uniform(1.0, 20.0, size=21)

    jet = dm.Jet.seed(mu, np.arange(42).reshape(21, 2), 42)
    got = nll_loss(jet, obs, sigma=sigma).tan

    h = 1e-5
    fd = np.zeros(42)
    for k in range(42):
        up, dn = mu.ravel().copy(), mu.ravel().copy()
        up[k] += h
        dn[k] -= h
        fd[k] = (nll_loss(up.reshape(21, 2), obs, sigma=sigma)
                 - nll_loss(dn.reshape(21, 2), obs, sigma=sigma)) / (2 * h)
    denom = np.maximum(np.abs(fd), 1e-4)
    assert np.max(np.abs(got - fd) / denom) < 1e-4


def test_sigma_grad_matches_fd_through_clamp():
    rng = np.random.default_rng(8)
    mu = rng.uniform(0, 224, size=(21, 2))
    obs = obs_from(mu + rng.normal(scale=12.0, size=(21, 2)))
    sigma = np.full(21, SIGMA_INIT)
    sigma[2] = 0.3    # below the clamp: gradient must gate to zero
    sigma[4] = 90.0   # above the clamp
    got = nll_sigma_grad(mu, sigma, obs)
    assert got[2] == 0.0 and got[4] == 0.0

    h = 1e-6
    for j in (0, 2, 4, 11):
        def f(ls):
            s = sigma.copy()
            s[j] = np.exp(ls)
            return nll_loss(mu, obs, sigma=s)
        fd = (f(np.log(sigma[j]) + h) - f(np.log(sigma[j]) - h)) / (2 * h)
        assert abs(got[j] - fd) < 1e-5 * max(1.0, abs(fd))


def test_clamp_sigma_values_and_gating():
    np.testing.assert_allclose(clamp_sigma(np.array([0.3, 10.0, 100.0])),
                               [SIGMA_MIN, 10.0, SIGMA_MAX])
    jet = dm.Jet.seed(np.array([0.3, 10.0, 100.0]), np.arange(3), 3)
    out = clamp_sigma(jet)
    assert out.tan[0, 0] == 0.0
    assert out.tan[1, 1] == 1.0
    assert out.tan[2, 2] == 0.0


def test_observation_validation():
    with pytest.raises(ValueError):
        LandmarkObservation(positions=np.zeros((20, 2)),
                            visibility=np.ones(21, dtype=bool))
    bad = np.zeros((21, 2))
    bad[0, 0] = np.nan
    with pytest.raises(ValueError):
        LandmarkObservation(positions=bad, visibility=np.ones(21, dtype=bool))
    vis = np.ones(21, dtype=bool)
    vis[0] = False
    ok = LandmarkObservation(positions=bad, visibility=vis)  # hidden NaN is fine
    assert ok.n_visible == 20


def test_distribution_validation():
    with pytest.raises(ValueError):
        LandmarkDistribution(mu=np.zeros((21, 2)), sigma=np.full(21, 0.1))
    with pytest.raises(ValueError):
        LandmarkDistribution(mu=np.full((21, 2), np.inf), sigma=np.ones(21))
