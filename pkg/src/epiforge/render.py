"""Heatmap snapshots as PNG images and raw grids as CSV."""

from __future__ import annotations

import csv
from pathlib import Path
from typing import Sequence

import numpy as np
from matplotlib import colormaps
from PIL import Image

from .heatmap import HeatmapSequence

CSV_FIELDS = ("day", "channel", "row", "col", "value")


def color_scale(seq: HeatmapSequence, channel: int, days: Sequence[int]) -> tuple[float, float]:
    """(low, high) shared by every rendered day of one channel."""
    vals = seq.values[list(days), channel]
    return float(vals.min()), float(vals.max())


def to_rgb(grid: np.ndarray, low: float, high: float, cmap: str = "viridis", pixels: int = 16) -> np.ndarray:
    span = high - low
    unit = np.zeros_like(grid, dtype=np.float64) if span <= 0 else (grid - low) / span
    rgb = (colormaps[cmap](np.clip(unit, 0.0, 1.0))[..., :3] * 255).round().astype(np.uint8)
    return np.repeat(np.repeat(rgb, pixels, axis=0), pixels, axis=1)


def render_heatmap_images(seq: HeatmapSequence, days: Sequence[int], out_dir, cmap: str = "viridis",
                          pixels: int = 16) -> list[Path]:
    """One PNG per requested day and channel, plus ``grids.csv`` with the raw values."""
    days = list(days)
    if not days:
        raise ValueError("no days requested")
    bad = [d for d in days if not 0 <= d < seq.T]
    if bad:
        raise ValueError(f"days {bad} outside [0, {seq.T})")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    written = []
    for c, name in enumerate(seq.channel_names):
        low, high = color_scale(seq, c, days)
        for d in days:
            path = out / f"{name}_day{d:03d}.png"
            Image.fromarray(to_rgb(seq.values[d, c], low, high, cmap, pixels)).save(path)
            written.append(path)
    written.append(write_csv(seq, days, out / "grids.csv"))
    return written


def write_csv(seq: HeatmapSequence, days: Sequence[int], path) -> Path:
    path = Path(path)
    with path.open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(CSV_FIELDS)
        for d in days:
            for c, name in enumerate(seq.channel_names):
                grid = seq.values[d, c]
                for r in range(grid.shape[0]):
                    for col in range(grid.shape[1]):
                        # repr of the widened float32 round-trips exactly
                        w.writerow((d, name, r, col, repr(float(grid[r, col]))))
    return path


def read_csv(path) -> dict[tuple[int, str], np.ndarray]:
    """Grids keyed by (day, channel name)."""
    cells: dict[tuple[int, str], dict[tuple[int, int], float]] = {}
    with Path(path).open(newline="") as fh:
        for row in csv.DictReader(fh):
            cells.setdefault((int(row["day"]), row["channel"]), {})[(int(row["row"]), int(row["col"]))] = float(row["value"])
    out = {}
    for key, vals in cells.items():
        h = 1 + max(r for r, _ in vals)
        w = 1 + max(c for _, c in vals)
        grid = np.zeros((h, w), np.float32)
        for (r, c), v in vals.items():
            grid[r, c] = v
        out[key] = grid
    return out
