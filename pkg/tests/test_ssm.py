import numpy as np
import pytest

from deepmide.domain import GaussianBelief
from deepmide.exceptions import NumericalError
from deepmide.kernel import KernelParams, build_propagator
from deepmide.likelihood import filter_nll
from deepmide.ssm import (forecast, initial_belief, kf_update, run_filter, safe_cholesky,
                         step_loglik)

from oracles import joint_gaussian_filter, random_problem


def rel(a, b):
    a, b = np.asarray(a), np.asarray(b)
    return np.max(np.abs(a - b)) / max(np.max(np.abs(b)), 1e-300)


def test_filter_matches_joint_gaussian_oracle(rng):
    for _ in range(50):
        m0, P0, Ks, Q, R, obs = random_problem(rng)
        state = run_filter(GaussianBelief(m0, P0), Ks, Q, obs, R, keep_history=True)
        means, covs, ll = joint_gaussian_filter(m0, P0, Ks, Q, R, obs)
        for (_, post), m, C in zip(state.history, means, covs):
            assert rel(post.mean, m) < 1e-8
            assert rel(post.cov, C) < 1e-8
        assert abs(state.loglik - ll) <= 1e-8 * abs(ll)


def test_filter_nll_agrees_with_run_filter(rng):
    m0, P0, Ks, Q, R, obs = random_problem(rng, 3, 2, 5)
    state = run_filter(GaussianBelief(m0, P0), Ks, Q, obs, R)
    res = filter_nll(Ks, Q, R, [z for z, _ in obs], [i for _, i in obs], m0, P0)
    assert res.nll == pytest.approx(-state.loglik, rel=1e-12)
    assert res.n_scored == sum(len(i) for _, i in obs)
    burned = filter_nll(Ks, Q, R, [z for z, _ in obs], [i for _, i in obs], m0, P0, burn=2)
    assert burned.nll == pytest.approx(res.step_nll[2:].sum(), rel=1e-12)


def test_filter_nll_adjoints(rng):
    m0, P0, Ks, Q, R, obs = random_problem(rng, 2, 2, 4, missing=0.3)
    zs, idxs = [z for z, _ in obs], [i for _, i in obs]
    res = filter_nll(Ks, Q, R, zs, idxs, m0, P0, burn=1, grad=True)
    h = 1e-6

    def nll(Ks_, Q_, R_):
        return filter_nll(Ks_, Q_, R_, zs, idxs, m0, P0, burn=1).nll

    for t in range(len(Ks)):
        for (a, b) in [(0, 1), (2, 3), (1, 1)]:
            Kp = [K.copy() for K in Ks]
            Km = [K.copy() for K in Ks]
            Kp[t][a, b] += h
            Km[t][a, b] -= h
            fd = (nll(Kp, Q, R) - nll(Km, Q, R)) / (2 * h)
            assert res.K_bar[t][a, b] == pytest.approx(fd, rel=1e-5, abs=1e-7)
    # symmetric perturbations of the covariances
    for M, bar, which in ((Q, res.Q_bar, 0), (R, res.R_bar, 1)):
        E = np.zeros_like(M)
        E[0, 1] = E[1, 0] = 1.0
        E[2, 2] = 1.0
        args_p = [Ks, Q, R]
        args_m = [Ks, Q, R]
        args_p[1 + which] = M + h * E
        args_m[1 + which] = M - h * E
        fd = (nll(*args_p) - nll(*args_m)) / (2 * h)
        assert (bar * E).sum() == pytest.approx(fd, rel=1e-5, abs=1e-7)


def test_all_missing_step_is_a_pure_prediction(rng):
    m0, P0, Ks, Q, R, _ = random_problem(rng, 2, 1, 2)
    obs = [(np.zeros(0), np.zeros(0, int))] * 2
    state = run_filter(GaussianBelief(m0, P0), Ks, Q, obs, R)
    expect = Ks[1] @ Ks[0] @ m0
    np.testing.assert_allclose(state.belief.mean, expect)
    assert state.loglik == 0.0


def test_forecast_moments_by_recursion(rng):
    m0, P0, Ks, Q, R, _ = random_problem(rng, 2, 2, 3)
    fd = forecast(GaussianBelief(m0, P0), Ks, Q, R)
    m, C = m0, P0
    for h, K in enumerate(Ks):
        m, C = K @ m, K @ C @ K.T + Q
        np.testing.assert_allclose(fd.latent_mean[h], m, atol=1e-12)
        np.testing.assert_allclose(fd.obs_cov[h], C + R, atol=1e-12)
    lo, hi = fd.interval(0.95)
    sd = np.sqrt(np.diagonal(fd.obs_cov, axis1=1, axis2=2))
    np.testing.assert_allclose(hi - fd.obs_mean, 1.959963984540054 * sd, rtol=1e-12)
    for C in fd.obs_cov:
        assert np.linalg.eigvalsh(C).min() > 0
    with pytest.raises(ValueError):
        forecast(GaussianBelief(m0, P0), [], Q, R)


def test_initial_belief_lifts_observations():
    b = initial_belief(np.array([1.0, 2.0]), np.array([0, 3]), 4, 2.0)
    np.testing.assert_array_equal(b.mean, [1, 0, 0, 2])
    np.testing.assert_array_equal(np.diag(b.cov), [2, 2, 2, 2])


def test_safe_cholesky_jitter_and_failure():
    v = np.array([1.0, 1.0])
    S = np.outer(v, v)  # singular PSD
    L = safe_cholesky(S)
    assert np.allclose(L @ L.T, S, atol=1e-6)
    with pytest.raises(NumericalError, match="min eigenvalue"):
        safe_cholesky(np.diag([1.0, -1.0]))


def test_step_loglik_scalar_values():
    assert step_loglik(np.array([0.0]), np.array([[1.0]])) == pytest.approx(-0.9189385332, abs=1e-9)
    assert step_loglik(np.array([2.0]), np.array([[4.0]])) == pytest.approx(
        -0.5 * np.log(2 * np.pi) - 0.5 * np.log(4) - 0.5, abs=1e-12)
    assert step_loglik(np.zeros(0), np.zeros((0, 0))) == 0.0


def test_exact_observation_limit(rng):
    N = 4
    b = GaussianBelief(rng.standard_normal(N), np.eye(N) * 2.0)
    z = rng.standard_normal(N)
    post, _, _ = kf_update(b, z, np.arange(N), 1e-12 * np.eye(N))
    np.testing.assert_allclose(post.mean, z, atol=1e-9)


def test_identity_forecast_variance_grows(rng):
    N = 3
    A = rng.standard_normal((N, N))
    b = GaussianBelief(rng.standard_normal(N), A @ A.T)
    Q = 0.1 * np.eye(N)
    R = 0.2 * np.eye(N)
    fd = forecast(b, [np.eye(N)] * 5, Q, R)
    np.testing.assert_allclose(fd.obs_mean[0], b.mean)
    np.testing.assert_allclose(fd.obs_cov[0], R + b.cov + Q)
    assert np.all(np.diff(np.diagonal(fd.latent_cov, axis1=1, axis2=2), axis=0) >= 0)


def test_forecast_matches_joint_marginalization(rng):
    m0, P0, Ks, Q, R, obs = random_problem(rng, 3, 1, 3)
    hist = run_filter(GaussianBelief(m0, P0), Ks, Q, obs, R)
    Kf = [build_propagator(t, rng.uniform(-2, 2, (1, 2)), rng.uniform(-5, 5, (3, 2)),
                           KernelParams(8.0, 3.0)) for t in range(3)]
    fd = forecast(hist.belief, Kf, Q, R)
    # future steps appended as unobserved steps to the joint oracle
    none = (np.zeros(0), np.zeros(0, int))
    for h in range(3):
        means, covs, _ = joint_gaussian_filter(m0, P0, Ks + Kf[:h + 1], Q, R, obs + [none] * (h + 1))
        assert rel(fd.latent_mean[h], means[-1]) < 1e-10
        assert rel(fd.latent_cov[h], covs[-1]) < 1e-10


def test_sequential_scalar_updates_match_joint_update(rng):
    N = 4
    A = rng.standard_normal((N, N))
    b = GaussianBelief(rng.standard_normal(N), A @ A.T + np.eye(N))
    R = np.diag(rng.uniform(0.1, 0.5, N))
    z = rng.standard_normal(N)
    idx = np.arange(N)
    joint, nu, S = kf_update(b, z, idx, R)
    ll_joint = step_loglik(nu, S)
    cur, ll_seq = b, 0.0
    for k in rng.permutation(N):
        cur, nu_k, S_k = kf_update(cur, z[[k]], [k], R[[k]][:, [k]])
        ll_seq += step_loglik(nu_k, S_k)
    np.testing.assert_allclose(cur.mean, joint.mean, atol=1e-9)
    np.testing.assert_allclose(cur.cov, joint.cov, atol=1e-9)
    assert ll_seq == pytest.approx(ll_joint, abs=1e-9)


def test_update_never_increases_covariance(rng):
    m0, P0, Ks, Q, R, obs = random_problem(rng, 3, 2, 5)
    state = run_filter(GaussianBelief(m0, P0), Ks, Q, obs, R, keep_history=True)
    for pred, post in state.history:
        d = pred.cov - post.cov
        assert np.linalg.eigvalsh(d).min() >= -1e-8 * np.abs(pred.cov).max()
        assert np.abs(post.cov - post.cov.T).max() <= 1e-12 * np.abs(post.cov).max()
