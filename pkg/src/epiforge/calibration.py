"""Estimate R0 from an observed heatmap sequence with Bayesian optimization.

The surrogate is a zero-mean Gaussian process with a squared-exponential
kernel on inputs rescaled to [0, 1] and standardized outputs. Expected
improvement is maximized by scanning a dense grid.
"""

from __future__ import annotations

import logging
import math
import time
from dataclasses import dataclass, field
from typing import Callable

import numpy as np
from scipy.stats import norm

from .heatmap import CHANNELS, HeatmapSequence, ParamTrack

log = logging.getLogger(__name__)

LENGTH_SCALES = (0.1, 0.2, 0.5, 1.0)
NOISE = 1e-4
GRID_POINTS = 1000
INITIAL_POINTS = 5


class CalibrationError(ValueError):
    pass


@dataclass(eq=False)
class CalibProblem:
    """What is observed, what is known, and how candidates are evaluated."""

    observed: HeatmapSequence
    city: object
    gamma: float = 0.0
    lockdown: np.ndarray | None = None
    bounds: tuple[float, float] = (1.0, 4.0)
    budget: int = 15
    inner: str = "simulator"
    seed: int = 0
    net: object = None
    I0: int = 100
    transmission_scale: float | None = None
    disease: object = None
    per_block: bool = False

    def __post_init__(self):
        lo, hi = self.bounds
        if not lo < hi:
            raise CalibrationError(f"bounds must satisfy low < high, got {self.bounds}")
        if self.budget < 3:
            raise CalibrationError("budget must be at least 3 evaluations")
        if self.inner not in ("simulator", "emulator"):
            raise CalibrationError(f"inner model must be 'simulator' or 'emulator', not {self.inner!r}")
        if self.inner == "emulator" and self.net is None:
            raise CalibrationError("emulator inner model needs a trained net")
        if self.lockdown is None:
            self.lockdown = np.zeros(self.observed.T, np.int8)

    @property
    def T(self) -> int:
        return self.observed.T

    def track(self, r0: float) -> ParamTrack:
        return ParamTrack(np.full(self.T, float(r0)), self.lockdown, self.gamma)


def forward_model(r0: float, problem: CalibProblem) -> HeatmapSequence:
    if problem.inner == "simulator":
        from .abm import EpidemicParams, run_simulation

        params = EpidemicParams(
            r0_track=np.full(problem.T, float(r0)), gamma=problem.gamma, lockdown_track=problem.lockdown,
            I0=problem.I0, seed=problem.seed, transmission_scale=problem.transmission_scale,
            **({} if problem.disease is None else {"disease": problem.disease}),
        )
        return run_simulation(problem.city, params).sequence
    from .emulator import rollout

    net = problem.net
    track = problem.track(r0)
    if net.use_population:
        from .city import block_population_map

        track.population = block_population_map(problem.city).astype(np.float32)
    return rollout(net, problem.observed.values[: net.lookback], track, problem.T)


def objective(r0: float, problem: CalibProblem) -> float:
    """MSE between observed and modeled cumulative positives, in units of the observed peak."""
    lo, hi = problem.bounds
    if not lo <= r0 <= hi:
        raise CalibrationError(f"candidate R0 {r0} outside bounds {problem.bounds}")
    model = forward_model(r0, problem)
    name = CHANNELS[0]
    if problem.per_block:
        obs = problem.observed.channel(name).astype(np.float64)
        mod = model.channel(name).astype(np.float64)
    else:
        obs = problem.observed.citywide(name)
        mod = model.citywide(name)
    peak = float(np.max(obs))
    if peak <= 0:
        raise CalibrationError("observed sequence has no positive cases to match")
    return float(np.mean(((mod - obs) / peak) ** 2))


@dataclass
class GPState:
    x: np.ndarray
    y: np.ndarray
    length_scale: float
    signal_var: float = 1.0
    noise_var: float = NOISE
    jitter: float = 0.0
    y_mean: float = 0.0
    y_std: float = 1.0
    chol: np.ndarray | None = field(default=None, repr=False)
    alpha: np.ndarray | None = field(default=None, repr=False)

    def predict(self, xq: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Posterior mean and standard deviation in standardized units."""
        ks = se_kernel(xq, self.x, self.length_scale, self.signal_var)
        mu = ks @ self.alpha
        v = np.linalg.solve(self.chol, ks.T) if self.chol.shape[0] else np.zeros((0, xq.size))
        var = np.maximum(self.signal_var - np.sum(v * v, axis=0), 1e-300)
        return mu, np.sqrt(var)


def se_kernel(a: np.ndarray, b: np.ndarray, length_scale: float, signal_var: float = 1.0) -> np.ndarray:
    d = a[:, None] - b[None, :]
    return signal_var * np.exp(-0.5 * (d / length_scale) ** 2)


def _cholesky(K: np.ndarray, base: float) -> tuple[np.ndarray, float] | None:
    jitter = 0.0
    base = max(base, 1e-10)
    for _ in range(8):
        try:
            return np.linalg.cholesky(K + jitter * np.eye(K.shape[0])), jitter
        except np.linalg.LinAlgError:
            jitter = base if jitter == 0.0 else jitter * 10
    return None


def fit_gp(x: np.ndarray, y: np.ndarray, length_scales=LENGTH_SCALES, noise: float = NOISE) -> GPState | None:
    """Pick the length scale with the highest marginal likelihood; None if every covariance is singular."""
    y_mean = float(np.mean(y))
    y_std = float(np.std(y)) or 1.0
    ys = (y - y_mean) / y_std
    best, best_ll = None, -math.inf
    for ls in length_scales:
        K = se_kernel(x, x, ls) + noise * np.eye(x.size)
        fac = _cholesky(K, noise)
        if fac is None:
            continue
        L, jitter = fac
        alpha = np.linalg.solve(L.T, np.linalg.solve(L, ys))
        ll = -0.5 * ys @ alpha - np.sum(np.log(np.diag(L))) - 0.5 * x.size * math.log(2 * math.pi)
        if ll > best_ll:
            best_ll = ll
            best = GPState(x.copy(), ys, ls, 1.0, noise, jitter, y_mean, y_std, L, alpha)
    return best


def expected_improvement(mu: np.ndarray, sd: np.ndarray, best: float, xi: float = 0.01) -> np.ndarray:
    """EI for minimization."""
    imp = best - mu - xi
    z = imp / sd
    return imp * norm.cdf(z) + sd * norm.pdf(z)


def _refine(x: np.ndarray, y: np.ndarray) -> float:
    """Midpoint of the widest gap next to the best point, in [0, 1] coordinates."""
    pts = np.unique(np.concatenate([x, [0.0, 1.0]]))
    b = x[np.argmin(y)]
    i = int(np.searchsorted(pts, b))
    gaps = []
    if i > 0:
        gaps.append((pts[i] - pts[i - 1], 0.5 * (pts[i] + pts[i - 1])))
    if i + 1 < pts.size:
        gaps.append((pts[i + 1] - pts[i], 0.5 * (pts[i + 1] + pts[i])))
    return max(gaps)[1]


def minimize_bo(f: Callable[[float], float], bounds: tuple[float, float], budget: int,
                n_initial: int = INITIAL_POINTS, grid_points: int = GRID_POINTS,
                length_scales=LENGTH_SCALES) -> tuple[float, list[dict]]:
    """Minimize a scalar function on an interval; returns (best x, history)."""
    lo, hi = bounds
    if not lo < hi:
        raise CalibrationError("bounds must satisfy low < high")
    history: list[dict] = []
    xs: list[float] = []
    ys: list[float] = []

    def evaluate(u: float, kind: str, **info):
        x = min(max(lo + u * (hi - lo), lo), hi)
        start = time.perf_counter()
        val = float(f(x))
        if not math.isfinite(val):
            raise CalibrationError(f"objective returned {val} at {x}")
        xs.append(u)
        ys.append(val)
        best = min(ys)
        history.append({"x": x, "value": val, "kind": kind, "best_so_far": best,
                        "seconds": time.perf_counter() - start, **info})

    for u in np.linspace(0.0, 1.0, min(n_initial, budget)):
        evaluate(float(u), "initial")
    grid = np.linspace(0.0, 1.0, grid_points)
    while len(xs) < budget:
        x = np.asarray(xs)
        y = np.asarray(ys)
        gp = fit_gp(x, y, length_scales)
        if gp is None:
            evaluate(_refine(x, y), "grid-fallback")
            continue
        mu, sd = gp.predict(grid)
        ei = expected_improvement(mu, sd, float(np.min(gp.y)))
        # never re-evaluate a point already in the design
        taken = np.min(np.abs(grid[:, None] - x[None, :]), axis=1) < 0.5 / (grid_points - 1)
        ei[taken] = -np.inf
        if not np.any(np.isfinite(ei)) or np.max(ei) <= 0:
            evaluate(_refine(x, y), "grid-fallback", length_scale=gp.length_scale)
            continue
        evaluate(float(grid[int(np.argmax(ei))]), "expected-improvement",
                 length_scale=gp.length_scale, jitter=gp.jitter)
    return history[int(np.argmin(ys))]["x"], history


def bayes_optimize(problem: CalibProblem) -> tuple[float, list[dict]]:
    """Return the best evaluated R0 and the per-evaluation history."""
    est, hist = minimize_bo(lambda r: objective(r, problem), problem.bounds, problem.budget)
    log.info("%s-inner estimate R0=%.4f after %d evaluations", problem.inner, est, len(hist))
    return est, hist
