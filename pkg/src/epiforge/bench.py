"""Wall-clock comparison of the simulator and the emulator."""

from __future__ import annotations

import math
import statistics
import time
from dataclasses import asdict, dataclass, field
from typing import Callable, Sequence

import numpy as np

NO_BREAK_EVEN = "no break-even"


def break_even_runs(t_train: float, t_sim: float, t_inf: float) -> int | None:
    """Smallest run count at which training plus inference costs no more than simulating."""
    if t_inf >= t_sim:
        return None
    return math.ceil(t_train / (t_sim - t_inf))


def cost_fraction_runs(t_train: float, t_sim: float, t_inf: float, fraction: float) -> int | None:
    """Smallest n with ``t_train + n * t_inf <= fraction * n * t_sim``."""
    if not 0 < fraction <= 1:
        raise ValueError("fraction must lie in (0, 1]")
    if t_inf >= fraction * t_sim:
        return None
    return math.ceil(t_train / (fraction * t_sim - t_inf))


def median_time(fn: Callable[[], object], repeats: int = 5, warmup: int = 1) -> float:
    for _ in range(warmup):
        fn()
    times = []
    for _ in range(repeats):
        start = time.perf_counter()
        fn()
        times.append(time.perf_counter() - start)
    return statistics.median(times)


@dataclass
class BenchReport:
    t_sim: float
    t_train: float
    t_inf: float
    t_inf_tiled: float | None = None
    population_sweep: list[dict] = field(default_factory=list)

    def __post_init__(self):
        for name in ("t_sim", "t_train", "t_inf"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")

    @property
    def break_even(self) -> int | None:
        return break_even_runs(self.t_train, self.t_sim, self.t_inf)

    def runs_for_fraction(self, fraction: float) -> int | None:
        return cost_fraction_runs(self.t_train, self.t_sim, self.t_inf, fraction)

    @property
    def speedup(self) -> float:
        return self.t_sim / self.t_inf

    def linear_fit(self) -> tuple[float, float, float]:
        """Slope, intercept and R^2 of simulator seconds against population."""
        n = np.array([r["population"] for r in self.population_sweep], dtype=float)
        t = np.array([r["t_sim"] for r in self.population_sweep], dtype=float)
        slope, intercept = np.polyfit(n, t, 1)
        resid = t - (slope * n + intercept)
        ss_tot = float(np.sum((t - t.mean()) ** 2))
        r2 = 1.0 - float(np.sum(resid ** 2)) / ss_tot if ss_tot > 0 else 1.0
        return float(slope), float(intercept), r2

    def inference_spread(self) -> float:
        """(max - min) / min of emulator inference time across the population sweep."""
        t = [r["t_inf"] for r in self.population_sweep]
        return (max(t) - min(t)) / min(t)

    def to_dict(self) -> dict:
        out = asdict(self)
        be = self.break_even
        out["break_even_runs"] = NO_BREAK_EVEN if be is None else be
        out["half_cost_runs"] = self.runs_for_fraction(0.5)
        out["quarter_cost_runs"] = self.runs_for_fraction(0.25)
        if len(self.population_sweep) >= 2:
            slope, intercept, r2 = self.linear_fit()
            out["sim_linear_fit"] = {"slope": slope, "intercept": intercept, "r2": r2}
            out["inference_spread"] = self.inference_spread()
        return out


def run_benchmark(net, *, train_seconds: float, populations: Sequence[int] = (25_000, 50_000, 100_000, 200_000),
                  sim_grid: tuple[int, int] = (20, 20), sweep_grid: tuple[int, int] = (10, 10), T: int = 100,
                  r0: float = 2.5, I0: int = 100, tile: str = "10x10:2x2", repeats: int = 5, seed: int = 0,
                  threads: int = 1, sim_population: int | None = None) -> BenchReport:
    """Time simulator runs, 10x10 inference, tiled inference and a population sweep.

    ``net`` must be a 10x10-capable emulator; ``train_seconds`` is the measured
    wall time of its training.
    """
    from .abm import EpidemicParams, resolve_transmission_scale, run_simulation
    from .city import CityConfig, block_population_map, generate_city
    from .emulator import rollout
    from .heatmap import ParamTrack
    from .tiling import TileSpec, tiled_rollout

    H = net.lookback

    def sim_setup(grid, population):
        city = generate_city(CityConfig(grid_rows=grid[0], grid_cols=grid[1], total_population_target=population,
                                        seed=seed))
        probe = EpidemicParams.constant(r0, T, I0=I0, seed=seed)
        params = probe.replace(transmission_scale=resolve_transmission_scale(city, probe))
        return city, params

    def emu_inputs(city, params):
        res = run_simulation(city, params.replace(r0_track=params.r0_track[:H], lockdown_track=params.lockdown_track[:H]))
        track = ParamTrack.constant(r0, T, params.gamma)
        if net.use_population:
            track.population = block_population_map(city).astype(np.float32)
        return res.sequence.values, track

    big_pop = sim_population or 400 * sim_grid[0] * sim_grid[1] // 2
    city, params = sim_setup(sim_grid, big_pop)
    t_sim = median_time(lambda: run_simulation(city, params), repeats)
    seeds_big, track_big = emu_inputs(city, params)
    spec = TileSpec.parse(tile, sim_grid)
    t_tiled = median_time(lambda: tiled_rollout(net, seeds_big, track_big, T, spec, threads=threads), repeats)

    sweep = []
    for n in populations:
        c, p = sim_setup(sweep_grid, n)
        ts = median_time(lambda: run_simulation(c, p), repeats)
        seeds, track = emu_inputs(c, p)
        ti = median_time(lambda: rollout(net, seeds, track, T), repeats)
        sweep.append({"population": n, "t_sim": ts, "t_inf": ti})
    t_inf = statistics.median(r["t_inf"] for r in sweep)
    return BenchReport(t_sim, train_seconds, t_inf, t_tiled, sweep)
