"""Divide-and-conquer emulation of grids larger than the emulator was built for.

A fixed-size emulator is trained on overlapping sub-regions of a large city.
At inference every region is rolled out on its own cropped seed frames, and
each block of the merged grid is the mean over all regions that contain it.
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .dataset import ChannelNormalizer, WindowSet, make_windows
from .emulator import EmulatorNet, ShapeError, rollout_batch
from .heatmap import HeatmapSequence, ParamTrack


@dataclass(frozen=True)
class TileSpec:
    region: tuple[int, int]
    stride: tuple[int, int]
    grid: tuple[int, int]

    def __post_init__(self):
        (rh, rw), (sh, sw), (h, w) = self.region, self.stride, self.grid
        if not (1 <= rh <= h and 1 <= rw <= w):
            raise ValueError(f"region {self.region} must fit inside grid {self.grid}")
        if sh < 1 or sw < 1:
            raise ValueError("strides must be >= 1")
        if sh > rh or sw > rw:
            # wider steps would skip blocks between neighbouring regions
            raise ValueError(f"stride {self.stride} exceeds region {self.region}; some blocks would be uncovered")

    @classmethod
    def identity(cls, grid: tuple[int, int]) -> "TileSpec":
        return cls(tuple(grid), (1, 1), tuple(grid))

    @classmethod
    def parse(cls, text: str, grid: tuple[int, int]) -> "TileSpec":
        """Parse ``"<rh>x<rw>:<sh>x<sw>"``."""
        try:
            region, stride = text.split(":")
            rh, rw = (int(v) for v in region.lower().split("x"))
            sh, sw = (int(v) for v in stride.lower().split("x"))
        except ValueError:
            raise ValueError(f"tile spec {text!r} is not of the form <rh>x<rw>:<sh>x<sw>") from None
        return cls((rh, rw), (sh, sw), tuple(grid))


def _origins(size: int, region: int, stride: int) -> list[int]:
    out = list(range(0, size - region + 1, stride))
    if out[-1] != size - region:
        out.append(size - region)
    return out


def enumerate_regions(spec: TileSpec) -> list[tuple[int, int]]:
    """Region origins in canonical row-major order."""
    rows = _origins(spec.grid[0], spec.region[0], spec.stride[0])
    cols = _origins(spec.grid[1], spec.region[1], spec.stride[1])
    return [(r, c) for r in rows for c in cols]


def coverage_counts(spec: TileSpec) -> np.ndarray:
    counts = np.zeros(spec.grid, dtype=np.int64)
    rh, rw = spec.region
    for r, c in enumerate_regions(spec):
        counts[r:r + rh, c:c + rw] += 1
    return counts


def crop_regions(seq: HeatmapSequence, track: ParamTrack, spec: TileSpec) -> list[tuple[HeatmapSequence, ParamTrack]]:
    if seq.grid != tuple(spec.grid):
        raise ShapeError(f"sequence grid {seq.grid} differs from tiling grid {tuple(spec.grid)}")
    rh, rw = spec.region
    return [(seq.crop(r, c, rh, rw), track.crop(r, c, rh, rw)) for r, c in enumerate_regions(spec)]


def extract_region_dataset(sequences: Sequence, spec: TileSpec, H: int,
                           normalizer: ChannelNormalizer | None = None, use_population: bool = False,
                           population_scale: float = 1.0) -> WindowSet:
    """Training windows of every region of every sequence.

    ``sequences`` holds (HeatmapSequence, ParamTrack) pairs or objects with
    ``sequence`` and ``track`` attributes.
    """
    sets = []
    for item in sequences:
        seq, track = (item.sequence, item.track) if hasattr(item, "sequence") else item
        for rseq, rtrack in crop_regions(seq, track, spec):
            sets.append(make_windows(rseq, rtrack, H, normalizer, use_population, population_scale))
    return WindowSet.concat(sets)


def tiled_rollout(net: EmulatorNet, seed_frames: np.ndarray, track: ParamTrack, T: int, spec: TileSpec,
                  threads: int = 1, order: Sequence[int] | None = None) -> HeatmapSequence:
    """Roll out every region independently and average overlapping predictions.

    ``order`` permutes the evaluation order of regions (useful for checking
    that it does not matter); the merge always runs in canonical order.
    """
    seed_frames = np.asarray(seed_frames)
    if seed_frames.ndim != 4 or seed_frames.shape[2:] != tuple(spec.grid):
        raise ShapeError(f"seed frames {seed_frames.shape} do not match tiling grid {tuple(spec.grid)}")
    regions = enumerate_regions(spec)
    rh, rw = spec.region
    crops = np.stack([seed_frames[:, :, r:r + rh, c:c + rw] for r, c in regions])
    tracks = [track.crop(r, c, rh, rw) for r, c in regions]
    order = list(range(len(regions))) if order is None else list(order)
    if sorted(order) != list(range(len(regions))):
        raise ValueError("order must be a permutation of the region indices")

    # regions are evaluated one per batch row; each row's arithmetic does not depend on its neighbours
    def run(chunk):
        return chunk, rollout_batch(net, crops[chunk], [tracks[i] for i in chunk], T)

    threads = max(1, min(threads, len(order)))
    chunks = [order[i::threads] for i in range(threads)]
    results: list[np.ndarray | None] = [None] * len(regions)
    if threads == 1:
        done = [run(chunks[0])]
    else:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            done = list(pool.map(run, chunks))
    for chunk, out in done:
        for i, region_out in zip(chunk, out):
            results[i] = region_out

    L = seed_frames.shape[1]
    total = np.zeros((T, L) + tuple(spec.grid), dtype=np.float64)
    for (r, c), out in zip(regions, results):
        total[:, :, r:r + rh, c:c + rw] += out
    merged = total / coverage_counts(spec)
    return HeatmapSequence(merged.astype(np.float32), net.channel_names)
