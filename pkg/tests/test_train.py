import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from deepmide.exceptions import ConfigurationError, DataError
from deepmide.simulate import SimulationConfig, simulate_process
from deepmide.train import (ModelConfig, TrainingConfig, batch_objective, composite_gradient_check,
                            kf_gradients, offline_fit, online_update, prepare, random_instance,
                            softplus, softplus_inv, tile_starts)


@given(st.floats(1e-6, 50.0))
def test_softplus_inverse(y):
    assert softplus(softplus_inv(y)) == pytest.approx(y, rel=1e-9)


def test_tile_starts_cover_range():
    s, L = tile_starts(0, 100, 30, 8)
    np.testing.assert_array_equal(s, [0, 30, 60, 90])
    np.testing.assert_array_equal(L, [30, 30, 30, 10])
    s, L = tile_starts(0, 95, 30, 8, offset=1)
    np.testing.assert_array_equal(s, [1, 31, 61])


def test_training_config_validation():
    with pytest.raises(ConfigurationError):
        TrainingConfig(subseq_len=6, burn=6)
    with pytest.raises(ConfigurationError):
        TrainingConfig(momentum=1.0)
    with pytest.raises(ConfigurationError):
        TrainingConfig(lr_phi=0)
    with pytest.raises(ConfigurationError):
        ModelConfig(ell_same=-1).omega0()


@pytest.mark.parametrize("seed", range(5))
def test_composite_gradient_omega_and_phi(seed):
    rep = composite_gradient_check(seed, n_coords=40)
    assert rep.n_coords >= 46
    assert rep.passed, rep.lines()


def test_theta_gradients_finite_differences():
    rng = np.random.default_rng(5)
    n, P, W = 2, 2, 6
    coords = rng.uniform(-10, 10, (n, 2))
    Z = rng.standard_normal((W, n * P))
    Z[3, 1] = np.nan
    idxs = [np.flatnonzero(np.isfinite(z)) for z in Z]
    omega = np.array([9.0, 4.0, 0.3, 8.0, 0.6, 10.0])
    thetas = rng.uniform(-3, 3, (W - 1, P, 2))
    for normalize in (False, True):
        g = kf_gradients(Z, idxs, omega, thetas, coords, normalize, 1.0, burn=1)
        h = 1e-6
        for k in range(W - 1):
            for p in range(P):
                for c in range(2):
                    tp, tm = thetas.copy(), thetas.copy()
                    tp[k, p, c] += h
                    tm[k, p, c] -= h
                    fp = kf_gradients(Z, idxs, omega, tp, coords, normalize, 1.0, 1, grad=False).nll
                    fm = kf_gradients(Z, idxs, omega, tm, coords, normalize, 1.0, 1, grad=False).nll
                    assert g.theta[k, p, c] == pytest.approx((fp - fm) / (2 * h), rel=1e-5, abs=1e-8)


def test_kf_gradients_needs_one_theta_per_transition():
    with pytest.raises(DataError):
        kf_gradients(np.zeros((4, 2)), [np.arange(2)] * 4, np.ones(6), np.zeros((4, 1, 2)),
                     np.zeros((2, 2)))


def test_fixed_theta_objective_ignores_extractor():
    model, panel, maps = random_instance(0)
    data = prepare(model, panel, maps)
    theta = np.zeros((len(panel), 2, 2))
    a = batch_objective(model, data, [0], [len(panel)], 1, grad=True, theta_fixed=theta)
    model.extractor.params.flat[:] += 1.0
    b = batch_objective(model, data, [0], [len(panel)], 1, grad=True, theta_fixed=theta)
    assert a.loss == b.loss and a.g_phi is None


@pytest.fixture(scope="module")
def short_truth():
    cfg = SimulationConfig(T=400, burn_in=50, raster_width=12, raster_height=12, seed=11)
    return simulate_process(cfg)


@pytest.fixture(scope="module")
def short_model(short_truth):
    panel = short_truth.panel()
    cfg = TrainingConfig(subseq_len=36, max_epochs=2, seed=1)
    return offline_fit(panel.slice(0, 300), short_truth.maps, ModelConfig(box_cox_lambda=0.5),
                       cfg=cfg)


def test_offline_fit_log_and_determinism(short_truth, short_model):
    assert [r["epoch"] for r in short_model.log] == [1, 2]
    assert all(np.isfinite(r["train_nll"]) and np.isfinite(r["val_nll"]) for r in short_model.log)
    again = offline_fit(short_truth.panel().slice(0, 300), short_truth.maps, ModelConfig(box_cox_lambda=0.5),
                        cfg=TrainingConfig(subseq_len=36, max_epochs=2, seed=1))
    assert again.phi_checksum() == short_model.phi_checksum()
    np.testing.assert_array_equal(again.w, short_model.w)


def test_online_update_freezes_extractor(short_truth, short_model):
    before = short_model.phi_checksum()
    w_before = short_model.w.copy()
    new = online_update(short_model, short_truth.panel().slice(250, 400), short_truth.maps,
                        TrainingConfig(subseq_len=36, online_iterations=5))
    assert new.phi_checksum() == before
    assert short_model.phi_checksum() == before
    np.testing.assert_array_equal(short_model.w, w_before)
    assert not np.array_equal(new.w, w_before)
    assert online_update(short_model, short_truth.panel().slice(0, 0), short_truth.maps) is short_model


def test_online_update_tracks_a_noise_regime_change():
    # same advection and maps, process noise doubled in the recent window
    base = SimulationConfig(T=700, burn_in=50, raster_width=12, raster_height=12, seed=4)
    loud = SimulationConfig(T=700, burn_in=50, raster_width=12, raster_height=12, seed=4,
                            sigma_eta=2 * base.sigma_eta)
    t0, t1 = simulate_process(base), simulate_process(loud)
    np.testing.assert_array_equal(t0.theta, t1.theta)
    model = offline_fit(t0.panel().slice(0, 400), t0.maps, ModelConfig(box_cox_lambda=0.5),
                        cfg=TrainingConfig(subseq_len=48, max_epochs=1, seed=0),
                        theta=t0.theta[:400])
    cfg = TrainingConfig(subseq_len=48, online_iterations=60)
    start = model.omega["sigma_eta"]
    moved = online_update(model, t1.panel().slice(400, 700), t1.maps, cfg).omega["sigma_eta"]
    target = loud.sigma_eta
    assert (moved - start) / (target - start) >= 0.3
    quiet = online_update(model, t0.panel().slice(400, 700), t0.maps, cfg).omega["sigma_eta"]
    assert moved > quiet


def test_sigma_eps_profile_peaks_at_truth():
    # one height, so the kernel has no cross-height time dependence;
    # every parameter except sigma_eps and the advection are held at truth
    cfg = SimulationConfig(T=600, burn_in=50, raster_width=12, raster_height=12, seed=2,
                           heights=[100.0], height_gains=[1.0], height_veer_deg=[0.0], sigma_eps=0.3)
    tr = simulate_process(cfg)
    Z = tr.transformed[:, :, 0]
    idxs = [np.arange(Z.shape[1])] * cfg.T
    om = cfg.omega
    grid = np.arange(0.1, 0.55, 0.05)
    nll = []
    for s in grid:
        omega = [om["ell_same"], om["ell_cross"], s, om["ell_eps"], om["sigma_eta"], om["ell_eta"]]
        total = 0.0
        for a in range(0, cfg.T - 60, 60):
            # the transition into Z[k] is driven by the advection at k
            total += kf_gradients(Z[a:a + 60], idxs[a:a + 60], omega, tr.theta[a + 1:a + 60],
                                  cfg.coords, True, 1.0, burn=5, grad=False).nll
        nll.append(total)
    best = grid[int(np.argmin(nll))]
    assert abs(best - cfg.sigma_eps) <= 0.05 + 1e-9


def test_scalar_sigma_eps_gradient_closed_form():
    # K = I (one site, flat kernel), sigma_eta tiny, one scored step:
    # z1 ~ N(m0, P0 + q + s^2), so dNLL/ds = s (1/v - nu^2/v^2)
    coords = np.zeros((1, 2))
    omega = np.array([1e6, 1e6, 0.4, 5.0, 1e-4, 5.0])
    Z = np.array([[0.3], [1.1]])
    g = kf_gradients(Z, [np.array([0])] * 2, omega, np.zeros((1, 1, 2)), coords, False, 0.5)
    v = 0.5 + 1e-8 + 0.16
    nu = 1.1 - 0.3
    assert g.omega[2] == pytest.approx(0.4 * (1 / v - nu ** 2 / v ** 2), rel=1e-6)


def test_theta_gradient_vanishes_for_flat_kernel():
    rng = np.random.default_rng(8)
    Z = rng.standard_normal((4, 4))
    omega = np.array([1e6, 1e6, 0.3, 8.0, 0.6, 10.0])
    g = kf_gradients(Z, [np.arange(4)] * 4, omega, rng.uniform(-3, 3, (3, 2, 2)),
                     rng.uniform(-10, 10, (2, 2)), False, 1.0)
    assert np.abs(g.theta).max() <= 1e-6


def test_small_instance_gradients_within_1e4():
    rng = np.random.default_rng(21)
    n, P, W = 2, 2, 5
    coords = rng.uniform(-8, 8, (n, 2))
    Z = rng.standard_normal((W, n * P))
    idxs = [np.arange(n * P)] * W
    omega = np.array([9.0, 4.0, 0.3, 8.0, 0.6, 10.0])
    thetas = rng.uniform(-2, 2, (W - 1, P, 2))
    g = kf_gradients(Z, idxs, omega, thetas, coords, True, 1.0)
    for k in range(6):
        h = 1e-6 * omega[k]
        op, om_ = omega.copy(), omega.copy()
        op[k] += h
        om_[k] -= h
        fd = (kf_gradients(Z, idxs, op, thetas, coords, True, 1.0, grad=False).nll
              - kf_gradients(Z, idxs, om_, thetas, coords, True, 1.0, grad=False).nll) / (2 * h)
        assert abs(g.omega[k] - fd) <= 1e-4 * max(abs(fd), 1e-8)
