"""Observation/site CSV files and the binary model checkpoint.

Observation CSV columns are ``timestamp,site_id,height_m,wind_speed_mps``
(ISO-8601 UTC timestamps, empty speed = missing).  Site CSV columns are
``site_id,lat,lon``.

A checkpoint is::

    b"DMIDECK1" | uint64 LE n | n bytes of UTF-8 JSON | uint64 LE k | k float64 LE

where the JSON holds everything except the flat network parameters.
"""

from __future__ import annotations

import csv
import json
import struct
from pathlib import Path

import numpy as np

from .domain import HeightLevels, ObservationPanel, SiteSet, project_latlon, unproject_xy
from .exceptions import DataError
from .extractor import ExtractorConfig, NetworkParams, PhysicsExtractor
from .maps import iso, parse_iso
from .preprocess import BoxCoxParam
from .train import FittedModel

OBS_HEADER = ["timestamp", "site_id", "height_m", "wind_speed_mps"]
SITE_HEADER = ["site_id", "lat", "lon"]
MAGIC = b"DMIDECK1"


def _open_csv(path, header):
    path = Path(path)
    try:
        f = path.open(newline="")
    except OSError as exc:
        raise DataError(f"cannot open {path}: {exc}") from exc
    reader = csv.reader(f)
    first = next(reader, None)
    if first is None or [h.strip() for h in first] != header:
        f.close()
        raise DataError(f"{path}: expected header {','.join(header)}")
    return f, reader


def read_sites(path, lat0=None, lon0=None) -> SiteSet:
    """Sites projected to planar km about ``(lat0, lon0)`` (their centroid by default)."""
    f, reader = _open_csv(path, SITE_HEADER)
    ids, lat, lon = [], [], []
    with f:
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            try:
                ids.append(row[0].strip())
                lat.append(float(row[1]))
                lon.append(float(row[2]))
            except (IndexError, ValueError) as exc:
                raise DataError(f"{path}:{lineno}: malformed site row {row!r}") from exc
    if not ids:
        raise DataError(f"{path}: no sites")
    return SiteSet.from_arrays(ids, project_latlon(lat, lon, lat0, lon0))


def write_sites(path, sites: SiteSet, lat0: float, lon0: float) -> None:
    lat, lon = unproject_xy(sites.coords, lat0, lon0)
    with Path(path).open("w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(SITE_HEADER)
        for sid, a, b in zip(sites.ids, lat, lon):
            w.writerow([sid, repr(float(a)), repr(float(b))])


def read_observations(path, sites: SiteSet) -> ObservationPanel:
    """Long-format CSV to a panel on the uniform time grid it spans."""
    f, reader = _open_csv(path, OBS_HEADER)
    recs = []
    with f:
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != 4:
                raise DataError(f"{path}:{lineno}: expected 4 fields, found {len(row)}")
            try:
                t = parse_iso(row[0])
                h = float(row[2])
                v = float(row[3]) if row[3].strip() else np.nan
            except ValueError as exc:
                raise DataError(f"{path}:{lineno}: {exc}") from exc
            recs.append((t, row[1].strip(), h, v, lineno))
    if not recs:
        raise DataError(f"{path}: no observations")
    times = np.unique([r[0] for r in recs])
    heights = np.unique([r[2] for r in recs])
    if times.size > 1:
        steps = np.diff(times)
        step = int(steps.min())
        if np.any(steps % step):
            raise DataError(f"{path}: timestamps are not on a uniform grid")
        times = np.arange(times[0], times[-1] + step, step, dtype=np.int64)
    values = np.full((times.size, len(sites), heights.size), np.nan)
    seen = np.zeros(values.shape, dtype=bool)
    ids = {s: i for i, s in enumerate(sites.ids)}
    t_pos = {int(t): k for k, t in enumerate(times)}
    h_pos = {float(h): k for k, h in enumerate(heights)}
    for t, sid, h, v, lineno in recs:
        if sid not in ids:
            raise DataError(f"{path}:{lineno}: unknown site {sid!r}")
        key = (t_pos[t], ids[sid], h_pos[h])
        if seen[key]:
            raise DataError(f"{path}:{lineno}: duplicate observation for {sid} at {iso(t)}, {h:g} m")
        seen[key] = True
        values[key] = v
    mask = np.isfinite(values)
    return ObservationPanel(times, values, mask, sites, HeightLevels(tuple(float(h) for h in heights)))


def _fmt(x: float) -> str:
    return repr(float(x))


def write_observations(path, panel: ObservationPanel) -> None:
    with Path(path).open("w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(OBS_HEADER)
        for k, t in enumerate(panel.times):
            stamp = iso(t)
            for i, sid in enumerate(panel.sites.ids):
                for g, h in enumerate(panel.heights.heights):
                    v = panel.values[k, i, g]
                    w.writerow([stamp, sid, f"{h:g}", _fmt(v) if panel.mask[k, i, g] else ""])


# --------------------------------------------------------------------------
# checkpoint
# --------------------------------------------------------------------------

def _descriptor(model: FittedModel) -> dict:
    ext = model.extractor
    return {
        "format": 1,
        "sites": {"ids": model.sites.ids, "coords": model.sites.coords.tolist()},
        "heights": list(model.heights.heights),
        "step_seconds": int(model.step_seconds),
        "w": model.w.tolist(),
        "omega_scale": np.asarray(model.omega_scale).tolist(),
        "omega": model.omega,
        "box_cox": {"lmbda": model.box_cox.lmbda, "offset": model.box_cox.offset},
        "diurnal_coef": model.diurnal_coef.tolist(),
        "init_var": np.asarray(model.init_var).tolist(),
        "normalize": bool(model.normalize),
        "extractor": ext.config.to_dict(),
        "input_mean": ext.input_mean.tolist(),
        "input_std": ext.input_std.tolist(),
        "log": model.log,
    }


def save_model(model: FittedModel, path) -> None:
    meta = json.dumps(_descriptor(model), sort_keys=True).encode("utf-8")
    flat = np.ascontiguousarray(model.extractor.params.flat, dtype="<f8")
    path = Path(path)
    try:
        with path.open("wb") as f:
            f.write(MAGIC)
            f.write(struct.pack("<Q", len(meta)))
            f.write(meta)
            f.write(struct.pack("<Q", flat.size))
            f.write(flat.tobytes())
    except OSError as exc:
        raise DataError(f"cannot write {path}: {exc}") from exc


def load_model(path) -> FittedModel:
    path = Path(path)
    try:
        raw = path.read_bytes()
    except OSError as exc:
        raise DataError(f"cannot read {path}: {exc}") from exc
    try:
        if raw[:8] != MAGIC:
            raise ValueError("bad magic")
        (n,) = struct.unpack_from("<Q", raw, 8)
        meta = json.loads(raw[16:16 + n].decode("utf-8"))
        (k,) = struct.unpack_from("<Q", raw, 16 + n)
        flat = np.frombuffer(raw, dtype="<f8", count=k, offset=24 + n).astype(float)
        if 24 + n + 8 * k != len(raw):
            raise ValueError("trailing or missing bytes")
    except (ValueError, struct.error, UnicodeDecodeError) as exc:
        raise DataError(f"{path}: not a valid model checkpoint ({exc})") from exc
    ecfg = ExtractorConfig(**meta["extractor"])
    ext = PhysicsExtractor(ecfg, NetworkParams(ecfg, flat),
                           np.array(meta["input_mean"]), np.array(meta["input_std"]))
    return FittedModel(
        sites=SiteSet.from_arrays(meta["sites"]["ids"], meta["sites"]["coords"]),
        heights=HeightLevels(tuple(meta["heights"])),
        step_seconds=int(meta["step_seconds"]),
        w=np.array(meta["w"], dtype=float),
        extractor=ext,
        box_cox=BoxCoxParam(**meta["box_cox"]),
        diurnal_coef=np.array(meta["diurnal_coef"], dtype=float),
        init_var=np.array(meta["init_var"], dtype=float),
        normalize=bool(meta["normalize"]),
        omega_scale=np.array(meta["omega_scale"], dtype=float),
        log=meta["log"],
    )


def write_training_log(path, log) -> None:
    with Path(path).open("w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(["epoch", "train_nll", "val_nll", "lr"])
        for row in log:
            w.writerow([row["epoch"], _fmt(row["train_nll"]), _fmt(row["val_nll"]), _fmt(row["lr"])])
