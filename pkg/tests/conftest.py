import numpy as np
import pytest

from deepmide.domain import HeightLevels, ObservationPanel, SiteSet
from deepmide.maps import WeatherMapStream


def make_panel(values, step=600, start=1_600_000_000, mask=None, heights=None):
    values = np.asarray(values, dtype=float)
    T, m, G = values.shape
    mask = np.isfinite(values) if mask is None else mask
    sites = SiteSet.from_arrays([f"S{i}" for i in range(m)], [[10.0 * i, 0.0] for i in range(m)])
    hl = HeightLevels(tuple(heights or [100.0 + 40.0 * g for g in range(G)]))
    times = start + step * np.arange(T, dtype=np.int64)
    return ObservationPanel(times, values, mask, sites, hl)


def make_maps(times, shape=(3, 12, 12), seed=0, step=600):
    rng = np.random.default_rng(seed)
    data = rng.standard_normal((len(times),) + shape).astype(np.float32)
    return WeatherMapStream(np.asarray(times), data, [f"c{i}" for i in range(shape[0])],
                            [-40.0, -40.0, 40.0, 40.0], step)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


ACCEPTANCE = {}


def record_acceptance(number: int, title: str, ok: bool, detail: str = ""):
    ACCEPTANCE[number] = f"criterion {number} {title}: {'PASS' if ok else 'FAIL'}" + (f" ({detail})" if detail else "")
    print(ACCEPTANCE[number])


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance")
        for k in sorted(ACCEPTANCE):
            terminalreporter.write_line(ACCEPTANCE[k])
