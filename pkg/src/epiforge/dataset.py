"""Simulation corpora: generation, stratified splitting, normalization, windowing."""

from __future__ import annotations

import hashlib
import json
import logging
import math
import warnings
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from typing import Iterator, NamedTuple, Sequence

import numpy as np

from .heatmap import HeatmapSequence, ParamTrack

log = logging.getLogger(__name__)

# parameter planes appended after the data channels
PARAM_PLANES = ("gamma", "r0", "lockdown")


@dataclass(frozen=True)
class ParamPoint:
    """One point of a parameter grid: an R0 track spec, lockdown windows and gamma."""

    r0: float | tuple = 2.0
    lockdowns: tuple[tuple[int, int], ...] = ()
    gamma: float = 0.0

    def key(self) -> str:
        return json.dumps({"r0": self.r0, "lockdowns": [list(w) for w in self.lockdowns], "gamma": self.gamma},
                          sort_keys=True)

    def r0_track(self, T: int) -> np.ndarray:
        from .scenario import build_r0_track

        return build_r0_track(self.r0, T)

    def lockdown_track(self, T: int) -> np.ndarray:
        lock = np.zeros(T, dtype=bool)
        for start, length in self.lockdowns:
            lock[start:start + length] = True
        return lock


class Sample(NamedTuple):
    sequence: HeatmapSequence
    track: ParamTrack
    point: ParamPoint
    replicate: int
    seed: int


def derive_seed(seed: int, point: ParamPoint, replicate: int) -> int:
    """``seed XOR hash(point, replicate)`` as an unsigned 64-bit integer."""
    digest = hashlib.blake2b(f"{point.key()}|{replicate}".encode(), digest_size=8).digest()
    return (seed ^ int.from_bytes(digest, "little")) & (2**64 - 1)


def default_r0_grid() -> list[ParamPoint]:
    return [ParamPoint(r0=round(1.0 + 0.1 * i, 1)) for i in range(31)]


def plan_dataset(param_grid: Sequence[ParamPoint], replicates: int | None = None, seed: int = 0,
                 total: int | None = None) -> list[tuple[ParamPoint, int, int]]:
    """List the (point, replicate, seed) runs of a corpus.

    Either ``replicates`` per point, or ``total`` runs spread as evenly as
    possible over the grid (earlier points get the extra replicate).
    """
    if not param_grid:
        raise ValueError("parameter grid is empty")
    n = len(param_grid)
    if total is not None:
        reps = [total // n + (1 if i < total % n else 0) for i in range(n)]
    else:
        if replicates is None or replicates < 1:
            raise ValueError("need replicates >= 1 or a total")
        reps = [replicates] * n
    return [(pt, r, derive_seed(seed, pt, r)) for pt, k in zip(param_grid, reps) for r in range(k)]


def _run_one(args):
    from .abm import EpidemicParams, run_simulation

    city, point, replicate, seed, T, I0, scale, disease = args
    params = EpidemicParams(
        r0_track=point.r0_track(T), gamma=point.gamma, lockdown_track=point.lockdown_track(T),
        I0=I0, seed=seed, transmission_scale=scale, disease=disease,
    )
    res = run_simulation(city, params)
    return Sample(res.sequence, res.track, point, replicate, seed)


def generate_dataset(city, param_grid: Sequence[ParamPoint], replicates: int | None = None, seed: int = 0, *,
                     T: int = 100, I0: int = 100, total: int | None = None, transmission_scale: float | None = None,
                     disease=None, workers: int = 1) -> list[Sample]:
    """Run the simulator once per (grid point, replicate) with derived seeds."""
    from .abm import DiseaseParams, EpidemicParams, resolve_transmission_scale

    disease = disease or DiseaseParams()
    if transmission_scale is None:
        probe = EpidemicParams.constant(2.0, T, I0=I0, disease=disease)
        transmission_scale = resolve_transmission_scale(city, probe)
    jobs = [(city, pt, r, s, T, I0, transmission_scale, disease)
            for pt, r, s in plan_dataset(param_grid, replicates, seed, total)]
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            return list(pool.map(_run_one, jobs))
    return [_run_one(j) for j in jobs]


class TrainSplit(list):
    """Marker type: the only split a normalizer may be fitted on."""


class Splits(NamedTuple):
    train: TrainSplit
    val: list
    test: list


def _largest_remainder(n: int, ratios: np.ndarray) -> np.ndarray:
    raw = n * ratios
    out = np.floor(raw).astype(int)
    short = n - out.sum()
    order = np.argsort(-(raw - out), kind="stable")
    out[order[:short]] += 1
    return out


def split_dataset(samples: Sequence[Sample], ratios=(0.8, 0.1, 0.1), seed: int = 0) -> Splits:
    """Stratified split: replicates of every parameter point are spread over the splits.

    Totals follow the ratios by largest remainder. A point with at least as
    many replicates as there are nonzero ratios appears in every such split.
    """
    ratios = np.asarray(ratios, dtype=float)
    if ratios.shape != (3,) or np.any(ratios < 0) or not math.isclose(ratios.sum(), 1.0, abs_tol=1e-9):
        raise ValueError("ratios must be three nonnegative numbers summing to 1")
    rng = np.random.Generator(np.random.PCG64(seed))
    groups: dict[str, list[int]] = {}
    for i, s in enumerate(samples):
        groups.setdefault(s.point.key(), []).append(i)
    keys = list(groups)
    positive = np.flatnonzero(ratios > 0)

    quota = {}
    for k in keys:
        n = len(groups[k])
        q = np.floor(n * ratios).astype(int)
        if n >= positive.size:
            q[positive] = np.maximum(q[positive], 1)
        while q.sum() > n:
            q[np.argmax(q)] -= 1
        quota[k] = q
    deficit = _largest_remainder(len(samples), ratios) - sum(quota.values())
    for idx in rng.permutation(len(keys)):
        k = keys[idx]
        while quota[k].sum() < len(groups[k]):
            s = int(np.lexsort((-ratios, -np.where(ratios > 0, deficit, -np.inf)))[0])
            quota[k][s] += 1
            deficit[s] -= 1

    parts = ([], [], [])
    for k in keys:
        members = [groups[k][i] for i in rng.permutation(len(groups[k]))]
        start = 0
        for s in range(3):
            parts[s].extend(members[start:start + quota[k][s]])
            start += quota[k][s]
    train, val, test = ([samples[i] for i in sorted(p)] for p in parts)
    return Splits(TrainSplit(train), val, test)


@dataclass(frozen=True, eq=False)
class ChannelNormalizer:
    """Divide each channel by its training-set mean; zero-mean channels are dropped."""

    means: np.ndarray
    active: np.ndarray

    @property
    def scale(self) -> np.ndarray:
        return np.where(self.active, self.means, 1.0)

    def apply(self, values: np.ndarray) -> np.ndarray:
        """Normalize an array whose axis 1 is the channel axis."""
        shape = (1, -1) + (1,) * (values.ndim - 2)
        out = values / self.scale.reshape(shape)
        return np.where(self.active.reshape(shape), out, 0.0).astype(values.dtype)

    def invert(self, values: np.ndarray) -> np.ndarray:
        shape = (1, -1) + (1,) * (values.ndim - 2)
        out = values * self.scale.reshape(shape)
        return np.where(self.active.reshape(shape), out, 0.0).astype(values.dtype)


def fit_normalizer(train: TrainSplit) -> ChannelNormalizer:
    if not isinstance(train, TrainSplit):
        raise TypeError("normalizer can only be fitted on the training split (a TrainSplit)")
    if len(train) == 0:
        raise ValueError("training split is empty")
    seqs = [s.sequence if isinstance(s, Sample) else s for s in train]
    total = np.zeros(seqs[0].values.shape[1])
    count = 0
    for seq in seqs:
        v = seq.values.astype(np.float64)
        total += v.sum(axis=(0, 2, 3))
        count += v.shape[0] * v.shape[2] * v.shape[3]
    means = total / count
    active = means > 0
    for c in np.flatnonzero(~active):
        warnings.warn(f"channel {seqs[0].channel_names[c]} has zero training mean and is dropped", stacklevel=2)
    return ChannelNormalizer(means, active)


@dataclass(frozen=True)
class TrainingWindow:
    predictor: np.ndarray  # (H, L + P, h, w)
    target: np.ndarray  # (L, h, w)
    target_day: int


@dataclass
class WindowSet:
    """A stack of training windows, stored channels-last for the network.

    ``predictors`` has shape (n, H, h, w, L + P) and ``targets`` (n, h, w, L).
    """

    predictors: np.ndarray
    targets: np.ndarray
    target_days: np.ndarray
    n_data: int

    def __len__(self) -> int:
        return self.predictors.shape[0]

    def __getitem__(self, i) -> TrainingWindow:
        return TrainingWindow(np.moveaxis(self.predictors[i], -1, 1), np.moveaxis(self.targets[i], -1, 0),
                              int(self.target_days[i]))

    def __iter__(self) -> Iterator[TrainingWindow]:
        return (self[i] for i in range(len(self)))

    @classmethod
    def concat(cls, sets: Sequence["WindowSet"]) -> "WindowSet":
        return cls(np.concatenate([s.predictors for s in sets]), np.concatenate([s.targets for s in sets]),
                   np.concatenate([s.target_days for s in sets]), sets[0].n_data)

    def subset(self, idx) -> "WindowSet":
        return WindowSet(self.predictors[idx], self.targets[idx], self.target_days[idx], self.n_data)


def param_planes(track: ParamTrack, grid: tuple[int, int], use_population: bool = False,
                 population_scale: float = 1.0) -> np.ndarray:
    """Per-day parameter planes, shape (T, h, w, P), spatially constant except population."""
    T = track.T
    h, w = grid
    cols = [np.full(T, track.gamma), track.r0, track.lockdown.astype(np.float64)]
    planes = np.broadcast_to(np.stack(cols, axis=1)[:, None, None, :], (T, h, w, len(cols)))
    if use_population:
        if track.population is None:
            raise ValueError("track has no population plane")
        pop = np.broadcast_to(track.population[None, :, :, None] / population_scale, (T, h, w, 1))
        planes = np.concatenate([planes, pop], axis=-1)
    return np.ascontiguousarray(planes, dtype=np.float32)


def make_windows(seq: HeatmapSequence, track: ParamTrack, H: int, normalizer: ChannelNormalizer | None = None,
                 use_population: bool = False, population_scale: float = 1.0) -> WindowSet:
    """All T - H (predictor, next-day target) pairs of one sequence."""
    T = seq.T
    if T <= H:
        raise ValueError(f"sequence length {T} must exceed lookback {H}")
    if track.T < T:
        raise ValueError("parameter track shorter than sequence")
    values = seq.values if normalizer is None else normalizer.apply(seq.values)
    data = np.moveaxis(values, 1, -1).astype(np.float32)  # (T, h, w, L)
    planes = param_planes(track, seq.grid, use_population, population_scale)[:T]
    full = np.concatenate([data, planes], axis=-1)
    idx = np.arange(T - H)[:, None] + np.arange(H)[None, :]
    return WindowSet(full[idx], data[H:].copy(), np.arange(H, T), data.shape[-1])
