import numpy as np
import pytest

from deepmide.exceptions import ConfigurationError, DataError
from deepmide.io import load_model, read_observations, read_sites, save_model, write_observations
from deepmide.maps import WeatherMapStream, iso, parse_iso
from deepmide.preprocess import DiurnalDetrender, asymmetry
from deepmide.simulate import (SimulationConfig, raster_geometry, read_fixture, simulate_process,
                               write_fixture)
from deepmide.train import random_instance

SMALL = dict(T=300, burn_in=30, raster_width=16, raster_height=16)


def test_simulation_is_deterministic():
    a = simulate_process(SimulationConfig(seed=5, **SMALL))
    b = simulate_process(SimulationConfig(seed=5, **SMALL))
    c = simulate_process(SimulationConfig(seed=6, **SMALL))
    np.testing.assert_array_equal(a.speeds, b.speeds)
    np.testing.assert_array_equal(a.maps.data, b.maps.data)
    assert not np.array_equal(a.speeds, c.speeds)


def test_truth_shapes_and_bounds():
    tr = simulate_process(SimulationConfig(seed=1, **SMALL))
    assert tr.speeds.shape == (300, 3, 3)
    assert tr.theta.shape == (300, 3, 2)
    assert np.all(tr.speeds >= 0)
    assert np.abs(tr.theta).max() <= 30.0
    assert tr.maps.data.shape == (300, 3, 16, 16)
    np.testing.assert_array_equal(tr.maps.times, tr.times)


def test_simulation_config_errors():
    with pytest.raises(ConfigurationError):
        SimulationConfig(site_ids=["a"])
    with pytest.raises(ConfigurationError):
        SimulationConfig(height_gains=[1.0])
    with pytest.raises(ConfigurationError):
        simulate_process(SimulationConfig(schedule="wavy", **SMALL))
    with pytest.raises(ConfigurationError):
        simulate_process(SimulationConfig(theta_max=2.0, **SMALL))
    with pytest.raises(ConfigurationError):
        simulate_process(SimulationConfig(normalize=False, ell_same=40.0, ell_cross=40.0, **SMALL))


def phase_shift(a, b):
    """Integer (dy, dx) maximizing the circular cross-correlation sum a(x) b(x + d)."""
    c = np.fft.ifft2(np.conj(np.fft.fft2(a)) * np.fft.fft2(b)).real
    dy, dx = np.unravel_index(np.argmax(c), c.shape)
    ny, nx = a.shape
    return (dy + ny // 2) % ny - ny // 2, (dx + nx // 2) % nx - nx // 2


def test_tracer_channel_moves_against_advection():
    # constant advection of exactly two pixels per step; the field value at s
    # is read from s + theta, so the pattern shifts by -theta
    cfg = SimulationConfig(schedule="constant", theta_const=[0.0, 0.0], seed=3, **SMALL)
    bbox = raster_geometry(cfg)
    px = (bbox[2] - bbox[0]) / cfg.raster_width
    py = (bbox[3] - bbox[1]) / cfg.raster_height
    cfg = SimulationConfig(schedule="constant", theta_const=[2 * px, py], seed=3,
                           height_gains=[1.0, 1.0, 1.0], height_veer_deg=[0, 0, 0], **SMALL)
    tr = simulate_process(cfg)
    f0, f1 = tr.maps.data[10, 0], tr.maps.data[11, 0]
    assert phase_shift(f0, f1) == (-1, -2)


def test_asymmetry_sign_on_simulated_field():
    # the state at s is read from s + theta, so patterns travel toward -theta
    cfg = SimulationConfig(schedule="constant", theta_const=[12.0, 3.0], seed=9, T=3000, burn_in=50,
                           site_coords=[[-24.0, -6.0], [0.0, 0.0], [24.0, 6.0]],
                           raster_width=12, raster_height=12, height_gains=[1, 1, 1],
                           height_veer_deg=[0, 0, 0])
    tr = simulate_process(cfg)
    resid = DiurnalDetrender().fit(tr.transformed, tr.times).transform(tr.transformed, tr.times)
    # S2 sits 2 steps downstream of S3, so delta(S2, S3, 2) is the small one
    assert asymmetry(resid, 0, 1, 2, 2).value < 0
    assert asymmetry(resid, 0, 2, 1, 2).value > 0


def test_fixture_round_trip(tmp_path):
    tr = simulate_process(SimulationConfig(seed=2, **SMALL))
    digest = write_fixture(tr, tmp_path / "fx")
    assert {"obs.csv", "sites.csv", "truth.json", "maps/stream.json"} <= set(digest)
    fx = read_fixture(tmp_path / "fx")
    np.testing.assert_array_equal(fx.panel.values, tr.speeds)
    np.testing.assert_array_equal(fx.theta, tr.theta)
    np.testing.assert_array_equal(fx.maps.data, tr.maps.data)
    np.testing.assert_allclose(fx.panel.sites.coords, tr.sites.coords, atol=1e-9)
    assert fx.omega == tr.config.omega
    assert write_fixture(tr, tmp_path / "fx2") == digest


def test_map_stream_alignment_and_errors(tmp_path):
    tr = simulate_process(SimulationConfig(seed=2, **SMALL))
    m = tr.maps
    np.testing.assert_array_equal(m.align(m.times[[3, 5]] + 300), [3, 5])
    with pytest.raises(DataError):
        m.align([m.times[0] - 1])
    with pytest.raises(DataError):
        m.align([m.times[-1] + m.step_seconds])
    with pytest.raises(DataError):
        WeatherMapStream(m.times[:2], m.data[:2] * np.nan, m.channels, m.bbox, 600)
    assert parse_iso(iso(1622505600)) == 1622505600
    assert parse_iso("2021-06-01T00:00:00") == 1622505600


def test_observation_csv_round_trip_with_gaps(tmp_path):
    tr = simulate_process(SimulationConfig(seed=2, **SMALL))
    panel = tr.panel()
    mask = panel.mask.copy()
    mask[5, 1, 2] = False
    panel = type(panel)(panel.times, panel.values, mask, panel.sites, panel.heights)
    write_observations(tmp_path / "obs.csv", panel)
    back = read_observations(tmp_path / "obs.csv", panel.sites)
    np.testing.assert_array_equal(back.mask, mask)
    np.testing.assert_array_equal(back.values[mask], panel.values[mask])


@pytest.mark.parametrize("body, match", [
    ("2021-06-01T00:00:00Z,S9,100,5.0\n", "unknown site"),
    ("2021-06-01T00:00:00Z,S1,100,5.0\n2021-06-01T00:00:00Z,S1,100,6.0\n", ":3: duplicate"),
    ("yesterday,S1,100,5.0\n", ":2:"),
    ("2021-06-01T00:00:00Z,S1,100\n", "expected 4 fields"),
])
def test_observation_csv_errors(tmp_path, body, match):
    (tmp_path / "s.csv").write_text("site_id,lat,lon\nS1,39.5,-73.5\n")
    sites = read_sites(tmp_path / "s.csv")
    (tmp_path / "o.csv").write_text("timestamp,site_id,height_m,wind_speed_mps\n" + body)
    with pytest.raises(DataError, match=match):
        read_observations(tmp_path / "o.csv", sites)


def test_bad_headers(tmp_path):
    (tmp_path / "s.csv").write_text("id,lat,lon\nS1,1,2\n")
    with pytest.raises(DataError, match="expected header"):
        read_sites(tmp_path / "s.csv")
    with pytest.raises(DataError):
        read_sites(tmp_path / "missing.csv")


def test_checkpoint_round_trip(tmp_path):
    model, panel, maps = random_instance(3)
    model.log = [{"epoch": 1, "train_nll": 1.5, "val_nll": 1.6, "lr": 0.001}]
    save_model(model, tmp_path / "m.bin")
    back = load_model(tmp_path / "m.bin")
    assert back.phi_checksum() == model.phi_checksum()
    np.testing.assert_array_equal(back.w, model.w)
    np.testing.assert_array_equal(back.omega_array(), model.omega_array())
    np.testing.assert_array_equal(back.extractor.input_std, model.extractor.input_std)
    assert back.box_cox == model.box_cox and back.log == model.log
    th = model.extractor.forward(maps.data, [[0, 1, 2]])
    np.testing.assert_array_equal(back.extractor.forward(maps.data, [[0, 1, 2]]), th)
    raw = (tmp_path / "m.bin").read_bytes()
    (tmp_path / "bad.bin").write_bytes(raw[:-8])
    with pytest.raises(DataError, match="not a valid model checkpoint"):
        load_model(tmp_path / "bad.bin")
    (tmp_path / "bad.bin").write_bytes(b"XXXXXXXX" + raw[8:])
    with pytest.raises(DataError):
        load_model(tmp_path / "bad.bin")
