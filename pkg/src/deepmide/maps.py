"""Weather-map raster streams and their on-disk format.

A stream directory holds ``stream.json`` (channel names, width, height,
bbox, step_seconds) and one ``<ISO8601>.f32`` file per time step with
``C*H*W`` little-endian float32 values, channel-major then row-major.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from datetime import datetime, timezone
from pathlib import Path

import numpy as np

from .exceptions import DataError

ISO_FMT = "%Y-%m-%dT%H:%M:%SZ"


def iso(epoch: int) -> str:
    return datetime.fromtimestamp(int(epoch), tz=timezone.utc).strftime(ISO_FMT)


def parse_iso(text: str) -> int:
    text = text.strip()
    if text.endswith("Z"):
        text = text[:-1] + "+00:00"
    dt = datetime.fromisoformat(text)
    if dt.tzinfo is None:
        dt = dt.replace(tzinfo=timezone.utc)
    return int(dt.timestamp())


@dataclass
class WeatherMapStream:
    times: np.ndarray  # epoch seconds (T,)
    data: np.ndarray  # (T, C, H, W) float32
    channels: list
    bbox: list
    step_seconds: int

    def __post_init__(self):
        self.times = np.asarray(self.times, dtype=np.int64)
        self.data = np.asarray(self.data, dtype=np.float32)
        if self.data.ndim != 4 or self.data.shape[0] != self.times.size:
            raise DataError("map data must be (T, C, H, W) aligned with times")
        if self.data.shape[1] != len(self.channels):
            raise DataError("channel names do not match the data")
        if not np.all(np.isfinite(self.data)):
            raise DataError("weather maps contain non-finite values")
        if np.any(np.diff(self.times) <= 0):
            raise DataError("map times must be strictly increasing")

    @property
    def shape(self):
        return self.data.shape[1:]

    def __len__(self):
        return self.times.size

    def align(self, times) -> np.ndarray:
        """Index of the map serving each requested time (step-held: the
        latest map at or before the time)."""
        times = np.asarray(times, dtype=np.int64)
        pos = np.searchsorted(self.times, times, side="right") - 1
        if np.any(pos < 0):
            raise DataError(f"no weather map at or before {iso(times[pos < 0][0])}")
        late = times - self.times[pos] >= self.step_seconds
        if np.any(late):
            raise DataError(f"weather map missing for {iso(times[late][0])}")
        return pos

    def write(self, path) -> None:
        path = Path(path)
        path.mkdir(parents=True, exist_ok=True)
        C, H, W = self.shape
        meta = {"channels": list(self.channels), "width": W, "height": H,
                "bbox": [float(b) for b in self.bbox], "step_seconds": int(self.step_seconds)}
        (path / "stream.json").write_text(json.dumps(meta, indent=2) + "\n")
        for t, frame in zip(self.times, self.data):
            (path / f"{iso(t)}.f32").write_bytes(frame.astype("<f4").tobytes())

    @classmethod
    def read(cls, path) -> "WeatherMapStream":
        path = Path(path)
        try:
            meta = json.loads((path / "stream.json").read_text())
        except (OSError, ValueError) as exc:
            raise DataError(f"cannot read {path / 'stream.json'}: {exc}") from exc
        C, H, W = len(meta["channels"]), int(meta["height"]), int(meta["width"])
        files = sorted(path.glob("*.f32"), key=lambda p: parse_iso(p.stem))
        if not files:
            raise DataError(f"no .f32 frames in {path}")
        frames = []
        for f in files:
            raw = np.frombuffer(f.read_bytes(), dtype="<f4")
            if raw.size != C * H * W:
                raise DataError(f"{f}: expected {C * H * W} values, found {raw.size}")
            frames.append(raw.reshape(C, H, W))
        times = [parse_iso(f.stem) for f in files]
        return cls(np.array(times), np.stack(frames), list(meta["channels"]),
                   list(meta["bbox"]), int(meta["step_seconds"]))
