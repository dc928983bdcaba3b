"""Index spaces, stacking conventions and the core containers.

The latent state is stacked height-major: all ``n`` sites for the first
height, then all sites for the second height, and so on.  With that
ordering the propagator is a ``P x P`` grid of ``n x n`` blocks.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .exceptions import ConfigurationError, DataError

EARTH_RADIUS_KM = 6371.0088


@dataclass(frozen=True)
class Site:
    id: str
    coords: tuple[float, float]  # planar km (east, north)

    def __post_init__(self):
        if not np.all(np.isfinite(self.coords)):
            raise ConfigurationError(f"site {self.id!r} has non-finite coordinates")


@dataclass(frozen=True)
class SiteSet:
    sites: tuple[Site, ...]

    def __post_init__(self):
        ids = [s.id for s in self.sites]
        if len(set(ids)) != len(ids):
            dup = sorted({i for i in ids if ids.count(i) > 1})
            raise ConfigurationError(f"duplicate site ids: {dup}")

    @classmethod
    def from_arrays(cls, ids: Sequence[str], coords) -> "SiteSet":
        coords = np.asarray(coords, dtype=float).reshape(-1, 2)
        if len(ids) != len(coords):
            raise ConfigurationError("ids and coords differ in length")
        return cls(tuple(Site(str(i), (float(c[0]), float(c[1]))) for i, c in zip(ids, coords)))

    @property
    def ids(self) -> list[str]:
        return [s.id for s in self.sites]

    @property
    def coords(self) -> np.ndarray:
        return np.array([s.coords for s in self.sites], dtype=float).reshape(-1, 2)

    def index(self, site_id: str) -> int:
        return self.ids.index(site_id)

    def __len__(self):
        return len(self.sites)


@dataclass(frozen=True)
class HeightLevels:
    heights: tuple[float, ...]

    def __post_init__(self):
        h = np.asarray(self.heights, dtype=float)
        if h.size < 1:
            raise ConfigurationError("at least one height level is required")
        if np.any(np.diff(h) <= 0):
            raise ConfigurationError("heights must be strictly increasing")

    def __len__(self):
        return len(self.heights)


@dataclass(frozen=True)
class LatentIndexer:
    """Bijection between (height p, site j) and the flat latent index.

    Indices are zero-based here; ``flat(p, j) = p * n + j``.
    """

    n: int
    P: int

    @property
    def size(self) -> int:
        return self.n * self.P

    def flat(self, p: int, j: int) -> int:
        if not (0 <= p < self.P and 0 <= j < self.n):
            raise IndexError(f"(p={p}, j={j}) outside {self.P} heights x {self.n} sites")
        return p * self.n + j

    def inverse(self, k: int) -> tuple[int, int]:
        if not 0 <= k < self.size:
            raise IndexError(f"flat index {k} outside [0, {self.size})")
        return divmod(k, self.n)


def build_indexer(sites: SiteSet, heights: HeightLevels) -> LatentIndexer:
    if len(sites) == 0:
        raise ConfigurationError("empty site set")
    return LatentIndexer(n=len(sites), P=len(heights))


def pairwise_distances(coords) -> np.ndarray:
    """Euclidean distance matrix (km) between planar site coordinates."""
    if isinstance(coords, SiteSet):
        coords = coords.coords
    xy = np.asarray(coords, dtype=float).reshape(-1, 2)
    diff = xy[:, None, :] - xy[None, :, :]
    return np.sqrt((diff ** 2).sum(-1))


def project_latlon(lat, lon, lat0: float | None = None, lon0: float | None = None):
    """Equirectangular projection to planar km about (lat0, lon0).

    The reference defaults to the centroid of the given points.
    """
    lat = np.asarray(lat, dtype=float)
    lon = np.asarray(lon, dtype=float)
    lat0 = float(lat.mean()) if lat0 is None else lat0
    lon0 = float(lon.mean()) if lon0 is None else lon0
    k = np.pi / 180.0 * EARTH_RADIUS_KM
    x = (lon - lon0) * k * np.cos(np.deg2rad(lat0))
    y = (lat - lat0) * k
    return np.stack([x, y], axis=-1)


def unproject_xy(xy, lat0: float, lon0: float):
    xy = np.asarray(xy, dtype=float).reshape(-1, 2)
    k = np.pi / 180.0 * EARTH_RADIUS_KM
    lat = xy[:, 1] / k + lat0
    lon = xy[:, 0] / (k * np.cos(np.deg2rad(lat0))) + lon0
    return lat, lon


@dataclass
class ObservationPanel:
    """Wind speeds indexed ``(time, site, height)`` with an observed mask.

    ``times`` holds integer epoch seconds (UTC) on a uniform grid.
    Entries where ``mask`` is False carry NaN in ``values``.
    """

    times: np.ndarray
    values: np.ndarray
    mask: np.ndarray
    sites: SiteSet
    heights: HeightLevels

    def __post_init__(self):
        self.times = np.asarray(self.times, dtype=np.int64)
        self.values = np.asarray(self.values, dtype=float)
        self.mask = np.asarray(self.mask, dtype=bool)
        T = self.times.size
        shape = (T, len(self.sites), len(self.heights))
        if self.values.shape != shape or self.mask.shape != shape:
            raise DataError(f"panel arrays must have shape {shape}, got {self.values.shape}")
        if T > 1:
            steps = np.diff(self.times)
            if np.any(steps <= 0) or np.any(steps != steps[0]):
                raise DataError("panel times must be strictly increasing with a uniform step")
        obs = self.values[self.mask]
        if np.any(~np.isfinite(obs)) or np.any(obs < 0):
            raise DataError("observed wind speeds must be finite and non-negative")
        self.values = np.where(self.mask, self.values, np.nan)

    @property
    def step_seconds(self) -> int:
        return int(self.times[1] - self.times[0]) if self.times.size > 1 else 600

    @property
    def shape(self):
        return self.values.shape

    def __len__(self):
        return self.times.size

    def slice(self, start: int, stop: int) -> "ObservationPanel":
        return ObservationPanel(self.times[start:stop], self.values[start:stop],
                                self.mask[start:stop], self.sites, self.heights)

    def stacked(self, t: int) -> np.ndarray:
        """Observation vector at step t in latent (height-major) order."""
        return self.values[t].T.reshape(-1)

    def stacked_mask(self, t: int) -> np.ndarray:
        return self.mask[t].T.reshape(-1)


@dataclass
class GaussianBelief:
    mean: np.ndarray
    cov: np.ndarray

    def check(self, rtol: float = 1e-10) -> None:
        c = self.cov
        scale = max(np.abs(c).max(), 1e-300)
        if np.abs(c - c.T).max() > rtol * scale:
            raise DataError("belief covariance is not symmetric")
        lam = np.linalg.eigvalsh(c).min()
        if lam < -1e-8 * np.trace(c) / c.shape[0]:
            raise DataError(f"belief covariance is not PSD (min eigenvalue {lam:.3g})")


@dataclass(frozen=True)
class ObservationMap:
    """Selection of observed latent coordinates.

    ``index`` lists the flat latent index of each observed row; the dense
    ``H`` matrix is available for callers that want it.
    """

    index: np.ndarray
    size: int
    skip: bool = field(default=False)

    @property
    def H(self) -> np.ndarray:
        H = np.zeros((self.index.size, self.size))
        H[np.arange(self.index.size), self.index] = 1.0
        return H


def observation_map(mask_t, indexer: LatentIndexer) -> ObservationMap:
    """Map for one time step; ``mask_t`` has shape (m, G) in panel order."""
    mask_t = np.asarray(mask_t, dtype=bool)
    if mask_t.shape != (indexer.n, indexer.P):
        raise DataError(f"mask shape {mask_t.shape} != ({indexer.n}, {indexer.P})")
    idx = np.flatnonzero(mask_t.T.reshape(-1))
    return ObservationMap(index=idx, size=indexer.size, skip=idx.size == 0)
