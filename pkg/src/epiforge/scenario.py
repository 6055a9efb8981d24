"""R0 track construction and simulator/emulator scenario comparisons."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np

from .city import CityConfig
from .heatmap import HeatmapSequence, ParamTrack


def build_r0_track(spec, T: int) -> np.ndarray:
    """Per-day R0 values for days 0..T-1.

    ``spec`` is a number (constant track), a ramp given as
    ``("ramp", values, breakpoints)`` or ``{"values": ..., "breakpoints": ...}``
    (linear interpolation between breakpoints, held flat outside them), or an
    explicit per-day sequence of length at least T.
    """
    if T < 1:
        raise ValueError("T must be >= 1")
    if isinstance(spec, (int, float, np.floating, np.integer)):
        return np.full(T, float(spec))
    if isinstance(spec, dict):
        values, breaks = spec["values"], spec["breakpoints"]
    elif isinstance(spec, (tuple, list)) and len(spec) == 3 and spec[0] == "ramp":
        _, values, breaks = spec
    else:
        arr = np.asarray(spec, dtype=np.float64).reshape(-1)
        if arr.size < T:
            raise ValueError(f"explicit R0 track has {arr.size} days, need {T}")
        return arr[:T].copy()
    values = np.asarray(values, dtype=np.float64)
    breaks = np.asarray(breaks, dtype=np.float64)
    if values.shape != breaks.shape or values.size < 1:
        raise ValueError("ramp needs one value per breakpoint")
    if np.any(np.diff(breaks) <= 0):
        raise ValueError("ramp breakpoints must be strictly increasing")
    return np.interp(np.arange(T, dtype=np.float64), breaks, values)


def ramp(start: float, peak: float, end: float, T: int, peak_day: int | None = None) -> tuple:
    """Ramp spec rising linearly from ``start`` to ``peak`` then back to ``end`` at day T."""
    peak_day = T // 2 if peak_day is None else peak_day
    return ("ramp", (float(start), float(peak), float(end)), (0, int(peak_day), int(T)))


@dataclass(frozen=True)
class Scenario:
    name: str = "scenario"
    city: CityConfig = field(default_factory=CityConfig)
    T: int = 100
    r0: object = 2.0
    lockdowns: tuple[tuple[int, int], ...] = ()
    gamma: float = 0.0
    seeds: tuple[int, ...] = (0,)
    I0: int = 100
    transmission_scale: float | None = None

    def __post_init__(self):
        if self.T < 1:
            raise ValueError("T must be >= 1")
        for start, length in self.lockdowns:
            if length < 0 or start < 0 or (length > 0 and start + length > self.T):
                raise ValueError(f"lockdown window ({start}, {length}) does not fit in [0, {self.T})")
        if not self.seeds:
            raise ValueError("at least one seed required")
        build_r0_track(self.r0, self.T)

    def track(self, population: np.ndarray | None = None) -> ParamTrack:
        lock = np.zeros(self.T, np.int8)
        for start, length in self.lockdowns:
            lock[start:start + length] = 1
        return ParamTrack(build_r0_track(self.r0, self.T), lock, self.gamma, population)


class ScenarioOutcome(NamedTuple):
    track: ParamTrack
    simulated: list[HeatmapSequence]
    emulated: list[HeatmapSequence]
    metrics: dict


def daily_new(curve: np.ndarray) -> np.ndarray:
    return np.diff(curve, prepend=0.0)


def peak_day(curve: np.ndarray) -> int:
    """Day of the largest daily increase of a cumulative curve."""
    return int(np.argmax(daily_new(curve)))


def snapshot_days(T: int, every: int = 10) -> list[int]:
    return list(range(0, T, every))


def _summary(seqs: list[HeatmapSequence]) -> dict:
    curves = np.stack([[s.citywide(c) for c in s.channel_names] for s in seqs])  # (runs, L, T)
    cum = curves[:, 0]
    return {
        "mean_curves": {name: curves[:, i].mean(axis=0).tolist() for i, name in enumerate(seqs[0].channel_names)},
        "peak_days": [peak_day(c) for c in cum],
        "mean_peak_day": float(np.mean([peak_day(c) for c in cum])),
        "final_cumulative": cum[:, -1].tolist(),
    }


def run_scenario(scenario: Scenario, mode: str = "both", net=None, city=None) -> ScenarioOutcome:
    """Run the simulator and/or the emulator on one shared parameter track.

    The emulator is seeded with the simulator's first H days for each seed.
    """
    from .abm import EpidemicParams, resolve_transmission_scale, run_simulation
    from .city import block_population_map, generate_city
    from .emulator import rollout

    if mode not in ("simulator", "emulator", "both", "sim", "emu"):
        raise ValueError(f"unknown mode {mode!r}")
    want_sim = mode in ("simulator", "sim", "both")
    want_emu = mode in ("emulator", "emu", "both")
    if want_emu and net is None:
        raise ValueError("emulator modes need a trained net")
    city = city if city is not None else generate_city(scenario.city)
    track = scenario.track(block_population_map(city).astype(np.float32))
    base = EpidemicParams(track.r0, scenario.gamma, track.lockdown, scenario.I0, 0, scenario.transmission_scale)
    base = base.replace(transmission_scale=resolve_transmission_scale(city, base))
    H = net.lookback if want_emu else 0
    sims, emus = [], []
    for seed in scenario.seeds:
        params = base.replace(seed=seed)
        if want_sim:
            sims.append(run_simulation(city, params).sequence)
        if want_emu:
            if want_sim:
                seed_frames = sims[-1].values[:H]
            else:
                head = params.replace(r0_track=track.r0[:H], lockdown_track=track.lockdown[:H])
                seed_frames = run_simulation(city, head).sequence.values
            emus.append(rollout(net, seed_frames, track, scenario.T))
    metrics = {"name": scenario.name, "track_digest": track.digest(), "seeds": list(scenario.seeds),
               "snapshot_days": snapshot_days(scenario.T)}
    if sims:
        metrics["simulator"] = _summary(sims)
    if emus:
        metrics["emulator"] = _summary(emus)
    if sims and emus:
        fin_s = np.array(metrics["simulator"]["final_cumulative"])
        fin_e = np.array(metrics["emulator"]["final_cumulative"])
        metrics["final_relative_error"] = float(np.mean(np.abs(fin_e - fin_s) / np.maximum(fin_s, 1.0)))
        metrics["peak_day_difference"] = abs(metrics["emulator"]["mean_peak_day"] - metrics["simulator"]["mean_peak_day"])
    return ScenarioOutcome(track, sims, emus, metrics)


def lockdown_points(n: int, r0_values, gamma: float, seed: int = 0, length_range: tuple[int, int] = (3, 45),
                    start: int = 10, random_start: bool = False, start_range: tuple[int, int] = (5, 15)) -> list:
    """Grid points with one lockdown each; lengths uniform on ``length_range`` (inclusive)."""
    from .dataset import ParamPoint

    rng = np.random.Generator(np.random.PCG64(seed))
    r0_values = list(r0_values)
    points = []
    for i in range(n):
        length = int(rng.integers(length_range[0], length_range[1] + 1))
        s = int(rng.integers(start_range[0], start_range[1] + 1)) if random_start else start
        points.append(ParamPoint(r0=float(r0_values[i % len(r0_values)]), lockdowns=((s, length),), gamma=gamma))
    return points


def ramp_points(peaks, T: int, start: float = 1.0, end: float = 1.0) -> list:
    from .dataset import ParamPoint

    return [ParamPoint(r0=ramp(start, p, end, T)) for p in peaks]
