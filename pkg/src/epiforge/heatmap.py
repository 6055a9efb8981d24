"""Heatmap sequences, parameter tracks and their on-disk formats.

A heatmap sequence is a float array of shape (T, L, h, w): one L-channel
grid per simulated day. The binary ``HMS1`` layout is::

    b"HMS1" | u16 version | u32 T | u32 L | u32 h | u32 w | f32[T*L*h*w]

all little-endian, values in (t, channel, row, col) order. Metadata (channel
names, parameter tracks, seeds) lives in a ``<name>.meta.json`` sidecar.
"""

from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

CHANNELS = ("cumulative_positive_tested", "current_hospitalized", "current_asymptomatic_free")

HMS_MAGIC = b"HMS1"
HMS_VERSION = 1
_HEADER = struct.Struct("<4sHIIII")


class HeatmapFormatError(ValueError):
    pass


@dataclass(eq=False)
class HeatmapSequence:
    values: np.ndarray
    channel_names: tuple[str, ...] = CHANNELS

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float32)
        if self.values.ndim != 4 or min(self.values.shape) < 1:
            raise ValueError(f"heatmap values must be 4-d with positive dims, got {self.values.shape}")
        if not np.all(np.isfinite(self.values)):
            raise ValueError("heatmap values must be finite")
        self.channel_names = tuple(self.channel_names)
        if len(self.channel_names) != self.values.shape[1]:
            raise ValueError("one channel name per channel required")

    @property
    def dims(self) -> tuple[int, int, int, int]:
        return tuple(self.values.shape)

    @property
    def T(self) -> int:
        return self.values.shape[0]

    @property
    def grid(self) -> tuple[int, int]:
        return self.values.shape[2], self.values.shape[3]

    def channel(self, name: str) -> np.ndarray:
        return self.values[:, self.channel_names.index(name)]

    def citywide(self, name: str = CHANNELS[0]) -> np.ndarray:
        """Per-day total of one channel over all blocks (float64)."""
        return self.channel(name).astype(np.float64).sum(axis=(1, 2))

    def crop(self, r0: int, c0: int, rh: int, rw: int) -> "HeatmapSequence":
        return HeatmapSequence(self.values[:, :, r0:r0 + rh, c0:c0 + rw].copy(), self.channel_names)

    def __eq__(self, other):
        return (isinstance(other, HeatmapSequence) and self.channel_names == other.channel_names
                and np.array_equal(self.values, other.values))


@dataclass(eq=False)
class ParamTrack:
    """Per-day exogenous inputs of one run."""

    r0: np.ndarray
    lockdown: np.ndarray
    gamma: float
    population: np.ndarray | None = field(default=None)

    def __post_init__(self):
        self.r0 = np.asarray(self.r0, dtype=np.float64).reshape(-1)
        self.lockdown = np.asarray(self.lockdown, dtype=np.int8).reshape(-1)
        if self.lockdown.size != self.r0.size:
            raise ValueError("R0 and lockdown tracks must have equal length")
        if not 0.0 <= self.gamma <= 1.0:
            raise ValueError("gamma must lie in [0, 1]")
        if self.population is not None:
            self.population = np.asarray(self.population, dtype=np.float32)

    @property
    def T(self) -> int:
        return self.r0.size

    @classmethod
    def constant(cls, r0: float, T: int, gamma: float = 0.0) -> "ParamTrack":
        return cls(np.full(T, float(r0)), np.zeros(T, np.int8), gamma)

    def crop(self, r0: int, c0: int, rh: int, rw: int) -> "ParamTrack":
        pop = None if self.population is None else self.population[r0:r0 + rh, c0:c0 + rw].copy()
        return ParamTrack(self.r0.copy(), self.lockdown.copy(), self.gamma, pop)

    def to_dict(self) -> dict:
        out = {"r0": self.r0.tolist(), "lockdown": self.lockdown.tolist(), "gamma": self.gamma}
        if self.population is not None:
            out["population"] = self.population.tolist()
        return out

    @classmethod
    def from_dict(cls, data: dict) -> "ParamTrack":
        return cls(np.asarray(data["r0"]), np.asarray(data["lockdown"]), float(data["gamma"]),
                   None if data.get("population") is None else np.asarray(data["population"]))

    def digest(self) -> str:
        h = hashlib.sha256()
        h.update(self.r0.tobytes())
        h.update(self.lockdown.tobytes())
        h.update(struct.pack("<d", self.gamma))
        return h.hexdigest()[:16]


def encode_hms(values: np.ndarray) -> bytes:
    values = np.asarray(values)
    if values.ndim != 4:
        raise HeatmapFormatError("HMS1 stores 4-d arrays")
    T, L, h, w = values.shape
    return _HEADER.pack(HMS_MAGIC, HMS_VERSION, T, L, h, w) + np.ascontiguousarray(values, dtype="<f4").tobytes()


def decode_hms(blob: bytes) -> np.ndarray:
    if len(blob) < _HEADER.size:
        raise HeatmapFormatError("truncated HMS1 header")
    magic, version, T, L, h, w = _HEADER.unpack_from(blob)
    if magic != HMS_MAGIC:
        raise HeatmapFormatError(f"bad magic {magic!r}")
    if version != HMS_VERSION:
        raise HeatmapFormatError(f"unsupported HMS1 version {version}")
    n = T * L * h * w
    body = blob[_HEADER.size:]
    if len(body) != 4 * n:
        raise HeatmapFormatError(f"expected {4 * n} payload bytes, found {len(body)}")
    return np.frombuffer(body, dtype="<f4").astype(np.float32).reshape(T, L, h, w)


def meta_path(path) -> Path:
    path = Path(path)
    return path.with_name(path.stem + ".meta.json")


def save_sequence(path, seq: HeatmapSequence, track: ParamTrack | None = None, **meta) -> None:
    path = Path(path)
    path.write_bytes(encode_hms(seq.values))
    doc = {"channels": list(seq.channel_names)}
    if track is not None:
        doc.update({"r0_track": track.r0.tolist(), "gamma": track.gamma, "lockdown_track": track.lockdown.tolist(),
                    "track_digest": track.digest()})
        if track.population is not None:
            doc["population"] = track.population.tolist()
    doc.update(meta)
    meta_path(path).write_text(json.dumps(doc, indent=1, sort_keys=True))


def load_sequence(path) -> tuple[HeatmapSequence, ParamTrack | None, dict]:
    path = Path(path)
    values = decode_hms(path.read_bytes())
    mp = meta_path(path)
    meta = json.loads(mp.read_text()) if mp.exists() else {}
    names = tuple(meta.get("channels", CHANNELS[: values.shape[1]]))
    track = None
    if "r0_track" in meta:
        track = ParamTrack(np.asarray(meta["r0_track"]), np.asarray(meta["lockdown_track"]), float(meta["gamma"]),
                           None if meta.get("population") is None else np.asarray(meta["population"]))
    return HeatmapSequence(values, names), track, meta
