"""Stochastic daily-step epidemic simulation over a :class:`~epiforge.city.City`.

Each agent carries a two-part health state: a virus state (healthy,
infected-symptomatic, infected-asymptomatic, recovered, dead) and a mobility
state (free, out-of-city, quarantined, isolated, hospitalized). One call to
:func:`step_day` advances every agent by one day:

1. movement: free agents go home, to school or work if their role asks for
   it, and to their block's community venue with a fixed daily probability.
   Under lockdown, agents whose compliance draw is below ``gamma`` stay home.
2. contacts: inside every venue each infectious visitor meets up to
   ``max_contacts`` co-visitors (all of them in small venues); a healthy
   contact is infected with :func:`transmission_probability`.
3. progression: symptomatic agents test positive at symptom onset and are
   hospitalized (if a bed is free and their viral load is high) or isolated;
   at the end of the peak period an agent dies or starts recovering; after the
   recovery period it becomes recovered and free.
4. statistics are tallied per home block.

An infected agent is infectious from the day after infection up to and
including its peak day, and only while free.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np

from .city import (
    GAP_FACTOR,
    HOSPITAL,
    STUDENT,
    WORKER,
    City,
)
from .heatmap import CHANNELS, HeatmapSequence, ParamTrack

# virus states
H, IF_SYMPTOMATIC, IF_ASYMPTOMATIC, R, D = range(5)
VIRUS_NAMES = ("H", "IF_symptomatic", "IF_asymptomatic", "R", "D")
# mobility states
F, O, Q, I, HP = range(5)
MOBILITY_NAMES = ("F", "O", "Q", "I", "HP")

NEVER = np.iinfo(np.int32).max
REFERENCE_R0 = 2.0


class SimulationError(ValueError):
    pass


@dataclass(frozen=True)
class DiseaseParams:
    viral_load_a: float = 2.0
    viral_load_b: float = 5.0
    asymptomatic_threshold: float = 0.3
    incubation_days: int = 5
    peak_mean: float = 7.0
    peak_std: float = 2.0
    recovery_mean: float = 14.0
    recovery_std: float = 3.0
    base_fatality: float = 0.02
    hospital_threshold: float = 0.6
    max_contacts: int = 15
    community_visit_prob: float = 0.3
    out_of_city_prob: float = 0.0
    out_of_city_return_prob: float = 0.001


@dataclass(frozen=True, eq=False)
class EpidemicParams:
    r0_track: np.ndarray
    gamma: float = 0.0
    lockdown_track: np.ndarray | None = None
    I0: int = 10
    seed: int = 0
    # per-unit-R0 transmissibility; None means "calibrate for this city"
    transmission_scale: float | None = None
    disease: DiseaseParams = field(default_factory=DiseaseParams)

    def __post_init__(self):
        r0 = np.asarray(self.r0_track, dtype=np.float64).reshape(-1)
        object.__setattr__(self, "r0_track", r0)
        if r0.size < 1:
            raise SimulationError("T must be at least 1")
        if not np.all(r0 > 0):
            raise SimulationError("R0(t) must be positive")
        lock = self.lockdown_track
        lock = np.zeros(r0.size, dtype=bool) if lock is None else np.asarray(lock, dtype=bool).reshape(-1)
        if lock.size != r0.size:
            raise SimulationError("lockdown track length differs from R0 track length")
        object.__setattr__(self, "lockdown_track", lock)
        if not 0.0 <= self.gamma <= 1.0:
            raise SimulationError("gamma must lie in [0, 1]")
        if self.I0 < 0:
            raise SimulationError("I0 must be nonnegative")
        if not 0 <= self.seed < 2**64:
            raise SimulationError("seed must be an unsigned 64-bit integer")

    @property
    def T(self) -> int:
        return int(self.r0_track.size)

    @classmethod
    def constant(cls, r0: float, T: int, **kw) -> "EpidemicParams":
        return cls(r0_track=np.full(T, float(r0)), **kw)

    def replace(self, **kw) -> "EpidemicParams":
        return dataclasses.replace(self, **kw)

    def track(self, population: np.ndarray | None = None) -> ParamTrack:
        return ParamTrack(
            r0=self.r0_track.copy(),
            lockdown=self.lockdown_track.astype(np.int8),
            gamma=float(self.gamma),
            population=population,
        )


@dataclass
class AgentStates:
    virus: np.ndarray
    mobility: np.ndarray
    viral_load: np.ndarray
    day_infected: np.ndarray
    incubation: np.ndarray
    peak_offset: np.ndarray
    recovery_offset: np.ndarray
    will_die: np.ndarray
    tested_positive: np.ndarray
    hospital: np.ndarray

    @classmethod
    def healthy(cls, n: int) -> "AgentStates":
        return cls(
            virus=np.full(n, H, np.int8),
            mobility=np.full(n, F, np.int8),
            viral_load=np.full(n, np.nan),
            day_infected=np.full(n, NEVER, np.int32),
            incubation=np.zeros(n, np.int32),
            peak_offset=np.zeros(n, np.int32),
            recovery_offset=np.zeros(n, np.int32),
            will_die=np.zeros(n, bool),
            tested_positive=np.zeros(n, bool),
            hospital=np.full(n, -1, np.int32),
        )

    def copy(self) -> "AgentStates":
        return AgentStates(**{f.name: getattr(self, f.name).copy() for f in dataclasses.fields(self)})

    def __len__(self) -> int:
        return int(self.virus.size)

    @property
    def infected(self) -> np.ndarray:
        return (self.virus == IF_SYMPTOMATIC) | (self.virus == IF_ASYMPTOMATIC)

    @property
    def onset_day(self) -> np.ndarray:
        return self.day_infected.astype(np.int64) + self.incubation

    @property
    def peak_day(self) -> np.ndarray:
        return self.onset_day + self.peak_offset

    @property
    def recovery_day(self) -> np.ndarray:
        return self.peak_day + self.recovery_offset


class DailyStats(NamedTuple):
    """Per-block counts for one day, each an array of length K."""

    new_positive: np.ndarray
    cumulative_positive_tested: np.ndarray
    current_hospitalized: np.ndarray
    current_asymptomatic_free: np.ndarray
    recovered: np.ndarray
    deaths: np.ndarray
    current_infected: np.ndarray
    healthy: np.ndarray


class DiseaseCourse(NamedTuple):
    viral_load: np.ndarray
    is_asymptomatic: np.ndarray
    incubation_days: np.ndarray
    peak_day_offset: np.ndarray
    recovery_day_offset: np.ndarray
    will_die: np.ndarray


class SimulationResult(NamedTuple):
    sequence: HeatmapSequence
    track: ParamTrack
    stats: dict[str, np.ndarray]


def transmission_probability(duration, gap_class, r0_t, calib):
    """Infection probability for one contact.

    ``1 - exp(-calib * R0 * duration / (8 * gap_factor))`` with gap factors
    1, 2, 4 for close, medium and far contacts. Vectorizes over all arguments.
    """
    exposure = np.asarray(duration, dtype=float) / (8.0 * GAP_FACTOR[np.asarray(gap_class)])
    return -np.expm1(-calib * np.asarray(r0_t, dtype=float) * exposure)


def sample_disease_course(rng, disease: DiseaseParams, age, comorbid) -> DiseaseCourse:
    """Draw disease courses for ``len(age)`` newly infected agents."""
    age = np.asarray(age, dtype=float)
    comorbid = np.asarray(comorbid, dtype=bool)
    n = age.size
    vl = rng.beta(disease.viral_load_a, disease.viral_load_b, size=n)
    asym = vl < disease.asymptomatic_threshold
    peak = np.maximum(1, np.rint(rng.normal(disease.peak_mean, disease.peak_std, size=n))).astype(np.int32)
    recov = np.maximum(1, np.rint(rng.normal(disease.recovery_mean, disease.recovery_std, size=n))).astype(np.int32)
    p_die = np.clip(disease.base_fatality * (1 + age / 50) * np.where(comorbid, 2.0, 1.0), 0.0, 1.0)
    # asymptomatic courses are never fatal
    die = (rng.random(n) < p_die) & ~asym
    return DiseaseCourse(vl, asym, np.full(n, disease.incubation_days, np.int32), peak, recov, die)


def _infect(states: AgentStates, city: City, idx: np.ndarray, day: int, disease: DiseaseParams, rng) -> None:
    course = sample_disease_course(rng, disease, city.age[idx], city.comorbid[idx])
    states.virus[idx] = np.where(course.is_asymptomatic, IF_ASYMPTOMATIC, IF_SYMPTOMATIC)
    states.viral_load[idx] = course.viral_load
    states.day_infected[idx] = day
    states.incubation[idx] = course.incubation_days
    states.peak_offset[idx] = course.peak_day_offset
    states.recovery_offset[idx] = course.recovery_day_offset
    states.will_die[idx] = course.will_die


def seed_infections(city: City, I0: int, rng, disease: DiseaseParams | None = None) -> AgentStates:
    """Infect ``I0`` distinct agents chosen uniformly; they are infectious on day 0."""
    if I0 > city.n_agents:
        raise SimulationError(f"I0={I0} exceeds population {city.n_agents}")
    if I0 < 0:
        raise SimulationError("I0 must be nonnegative")
    states = AgentStates.healthy(city.n_agents)
    idx = np.sort(rng.choice(city.n_agents, size=I0, replace=False))
    _infect(states, city, idx, -1, disease or DiseaseParams(), rng)
    return states


class _Layout:
    """Static per-city index structures used by the daily loop."""

    def __init__(self, city: City):
        self.household_order = np.argsort(city.household, kind="stable")
        students = np.flatnonzero(city.role == STUDENT)
        self.school_order = students[np.argsort(city.school[students], kind="stable")]
        workers = np.flatnonzero(city.role == WORKER)
        self.work_order = workers[np.argsort(city.workplace[workers], kind="stable")]
        self.community_order = np.argsort(city.community, kind="stable")
        # (order, venue column, segment start per venue) for slicing one venue's members
        self.segments = []
        for order, col in ((self.household_order, city.household), (self.school_order, city.school),
                           (self.work_order, city.workplace), (self.community_order, city.community)):
            bounds = np.searchsorted(col[order], np.arange(city.n_venues + 1))
            self.segments.append((order, col, bounds))
        self.is_student = city.role == STUDENT
        self.is_worker = city.role == WORKER
        self.exposure = city.venue_hours / (8.0 * GAP_FACTOR[city.venue_gap])
        hosp = city.venues_of_type(HOSPITAL)
        self.hospitals = hosp
        rows, cols = city.shape
        r, c = np.divmod(np.arange(rows * cols), cols)
        hr, hc = np.divmod(city.venue_block[hosp], cols)
        d = np.hypot(r[:, None] - hr[None, :], c[:, None] - hc[None, :])
        self.hospital_rank = np.argsort(d, axis=1, kind="stable")


def _layout(city: City) -> _Layout:
    lay = city.__dict__.get("_abm_layout")
    if lay is None:
        lay = _Layout(city)
        city.__dict__["_abm_layout"] = lay
    return lay


def _venue_contacts(order, venue_of, visiting, infectious, n_venues, max_contacts, rng):
    """Sample contacts inside one venue type.

    ``order`` lists candidate agents grouped by venue. Each infectious visitor
    meets every co-visitor when there are at most ``max_contacts`` of them,
    otherwise ``max_contacts`` co-visitors drawn uniformly with replacement.
    Returns (source agent, target agent, venue) arrays.
    """
    vis = order if visiting is None else order[visiting[order]]
    if vis.size == 0:
        return None
    src_pos = np.flatnonzero(infectious[vis])
    if src_pos.size == 0:
        return None
    vv = venue_of[vis]
    counts = np.bincount(vv, minlength=n_venues)
    starts = np.cumsum(counts) - counts
    src_venue = vv[src_pos]
    others = counts[src_venue] - 1
    k = np.minimum(others, max_contacts)
    total = int(k.sum())
    if total == 0:
        return None
    rep_src = np.repeat(src_pos, k)
    rep_venue = np.repeat(src_venue, k)
    rep_others = np.repeat(others, k)
    offset = np.arange(total) - np.repeat(np.cumsum(k) - k, k)
    sampled = rep_others > max_contacts
    if sampled.any():
        offset[sampled] = rng.integers(0, rep_others[sampled])
    own = rep_src - starts[rep_venue]
    offset += offset >= own
    dst = vis[starts[rep_venue] + offset]
    return vis[rep_src], dst, rep_venue


def _daily_contacts(city, lay, states, disease, locked_out, rng, infectious):
    """Movement plus contact sampling for one day; returns (src, dst, venue).

    ``locked_out`` marks agents confined to their household today.
    """
    free = (states.mobility == F) & (states.virus != D)
    visit_draw = rng.random(city.n_agents)
    out_ok = free if locked_out is None else free & ~locked_out
    infectious = infectious & free
    parts = []
    for order, venue_of, visiting in (
        (lay.household_order, city.household, free),
        (lay.school_order, city.school, out_ok & lay.is_student),
        (lay.work_order, city.workplace, out_ok & lay.is_worker),
        (lay.community_order, city.community, out_ok & (visit_draw < disease.community_visit_prob)),
    ):
        got = _venue_contacts(order, venue_of, visiting, infectious, city.n_venues, disease.max_contacts, rng)
        if got is not None:
            parts.append(got)
    if not parts:
        empty = np.zeros(0, np.int64)
        return empty, empty, empty
    return tuple(np.concatenate(x) for x in zip(*parts))


def _infectious_mask(states: AgentStates, t: int) -> np.ndarray:
    return (
        states.infected
        & (states.mobility == F)
        & (states.day_infected < t)
        & (states.peak_day >= t)
    )


def _advance(city: City, states: AgentStates, params: EpidemicParams, t: int, rng, calib: float, occupancy):
    """Advance ``states`` in place by one day; returns the day's new positives mask."""
    lay = _layout(city)
    d = params.disease

    if d.out_of_city_prob > 0:
        alive = states.virus != D
        u = rng.random(city.n_agents)
        leaving = alive & (states.mobility == F) & (u < d.out_of_city_prob)
        returning = alive & (states.mobility == O) & (u < d.out_of_city_return_prob)
        states.mobility[leaving] = O
        states.mobility[returning] = F

    infectious = _infectious_mask(states, t)
    if infectious.any():
        locked_out = None
        if params.lockdown_track[t] and params.gamma > 0:
            locked_out = city.compliance < params.gamma
        src, dst, venue = _daily_contacts(city, lay, states, d, locked_out, rng, infectious)
        if dst.size:
            p = -np.expm1(-calib * params.r0_track[t] * lay.exposure[venue])
            hit = (rng.random(dst.size) < p) & (states.virus[dst] == H)
            newly = np.unique(dst[hit])
            if newly.size:
                _infect(states, city, newly, t, d, rng)

    # progression
    onset = (states.virus == IF_SYMPTOMATIC) & (states.onset_day == t)
    new_pos = np.flatnonzero(onset)
    if new_pos.size:
        states.tested_positive[new_pos] = True
        states.mobility[new_pos] = I
        wants = new_pos[states.viral_load[new_pos] >= d.hospital_threshold]
        for a in wants:
            for h in lay.hospital_rank[city.home_block[a]]:
                if occupancy[h] < city.venue_capacity[lay.hospitals[h]]:
                    occupancy[h] += 1
                    states.mobility[a] = HP
                    states.hospital[a] = h
                    break

    infected = states.infected
    dying = infected & states.will_die & (states.peak_day == t)
    recovering = infected & ~states.will_die & (states.recovery_day == t)
    leaving = np.flatnonzero(dying | recovering)
    if leaving.size:
        in_hosp = leaving[states.hospital[leaving] >= 0]
        np.subtract.at(occupancy, states.hospital[in_hosp], 1)
        states.hospital[leaving] = -1
        states.mobility[leaving] = F
        states.virus[dying] = D
        states.virus[recovering] = R
    return onset


def _tally(city: City, states: AgentStates, onset: np.ndarray, cumulative: np.ndarray) -> DailyStats:
    K = city.n_blocks
    hb = city.home_block

    def count(mask):
        return np.bincount(hb[mask], minlength=K)

    new_pos = count(onset)
    cumulative = cumulative + new_pos
    infected = states.infected
    return DailyStats(
        new_positive=new_pos,
        cumulative_positive_tested=cumulative,
        current_hospitalized=count(states.mobility == HP),
        current_asymptomatic_free=count((states.virus == IF_ASYMPTOMATIC) & (states.mobility == F)),
        recovered=count(states.virus == R),
        deaths=count(states.virus == D),
        current_infected=count(infected),
        healthy=count(states.virus == H),
    )


def check_states(city: City, states: AgentStates) -> None:
    n = city.n_agents
    for f in dataclasses.fields(states):
        if getattr(states, f.name).shape != (n,):
            raise SimulationError(f"state column {f.name} has shape {getattr(states, f.name).shape}, expected ({n},)")
    if states.virus.min(initial=0) < H or states.virus.max(initial=0) > D:
        raise SimulationError("unknown virus state")
    if states.mobility.min(initial=0) < F or states.mobility.max(initial=0) > HP:
        raise SimulationError("unknown mobility state")
    if np.any((states.mobility == HP) & (states.virus != IF_SYMPTOMATIC)):
        raise SimulationError("hospitalized agent is not symptomatic")
    if np.any((states.virus == H) & ~np.isnan(states.viral_load)):
        raise SimulationError("healthy agent carries a viral load")
    if np.any(states.incubation < 0) or np.any(states.peak_offset < 0) or np.any(states.recovery_offset < 0):
        raise SimulationError("negative disease timer")


def _occupancy(city: City, states: AgentStates) -> np.ndarray:
    lay = _layout(city)
    held = states.hospital[states.hospital >= 0]
    return np.bincount(held, minlength=lay.hospitals.size).astype(np.int64)


def step_day(city: City, states: AgentStates, params: EpidemicParams, t: int, rng, calib: float | None = None,
             cumulative: np.ndarray | None = None):
    """Advance a copy of ``states`` through day ``t``.

    Returns ``(new_states, DailyStats)``. ``cumulative`` is the previous day's
    per-block cumulative positive count (zeros if omitted).
    """
    if not 0 <= t < params.T:
        raise SimulationError(f"day {t} outside [0, {params.T})")
    check_states(city, states)
    if calib is None:
        calib = resolve_transmission_scale(city, params)
    new = states.copy()
    occ = _occupancy(city, new)
    onset = _advance(city, new, params, t, rng, calib, occ)
    if cumulative is None:
        cumulative = np.zeros(city.n_blocks, np.int64)
    return new, _tally(city, new, onset, cumulative)


def run_simulation(city: City, params: EpidemicParams) -> SimulationResult:
    """Seed ``I0`` infections and run ``T`` days.

    The returned sequence holds the three heatmap channels per day; ``stats``
    holds every :class:`DailyStats` field stacked to shape (T, rows, cols).
    """
    calib = resolve_transmission_scale(city, params)
    rng = np.random.Generator(np.random.PCG64(params.seed))
    states = seed_infections(city, params.I0, rng, params.disease)
    occ = np.zeros(_layout(city).hospitals.size, np.int64)
    cumulative = np.zeros(city.n_blocks, np.int64)
    days = []
    for t in range(params.T):
        onset = _advance(city, states, params, t, rng, calib, occ)
        st = _tally(city, states, onset, cumulative)
        cumulative = st.cumulative_positive_tested
        days.append(st)
    shape = (params.T,) + city.shape
    stats = {name: np.stack([getattr(s, name) for s in days]).reshape(shape) for name in DailyStats._fields}
    values = np.stack([stats[c] for c in CHANNELS], axis=1).astype(np.float32)
    seq = HeatmapSequence(values, CHANNELS)
    pop = np.bincount(city.home_block, minlength=city.n_blocks).reshape(city.shape)
    return SimulationResult(seq, params.track(population=pop.astype(np.float32)), stats)


# calibration of the transmission scale -------------------------------------------------


class IndexCaseTrace(NamedTuple):
    run: np.ndarray
    target: np.ndarray
    exposure: np.ndarray
    uniform: np.ndarray
    n_runs: int


def trace_index_cases(city: City, params: EpidemicParams, n_runs: int, seed: int) -> IndexCaseTrace:
    """Record every contact made by a lone index case in a susceptible city.

    Each run infects one uniformly chosen agent and replays the contact
    process for each day it is infectious, restricted to the venues the index
    case attends (nobody else is infectious, so no other venue matters). The
    contacts do not depend on the transmission scale; each one gets a fixed
    uniform draw so that secondary-infection counts are monotone in the scale.
    """
    lay = _layout(city)
    d = params.disease
    runs, targets, exposure, uniforms = [], [], [], []
    infectious = np.zeros(city.n_agents, bool)
    for r in range(n_runs):
        rng = np.random.Generator(np.random.PCG64([seed, r]))
        a = int(rng.integers(city.n_agents))
        course = sample_disease_course(rng, d, city.age[a:a + 1], city.comorbid[a:a + 1])
        # infected on day -1: symptomatic cases stop at onset, asymptomatic ones at their peak
        onset = -1 + int(course.incubation_days[0])
        last = onset - 1 if not course.is_asymptomatic[0] else onset + int(course.peak_day_offset[0])
        infectious[:] = False
        infectious[a] = True
        for t in range(0, last + 1):
            for kind, (order, col, bounds) in enumerate(lay.segments):
                v = col[a]
                if v < 0:
                    continue
                members = order[bounds[v]:bounds[v + 1]]
                if kind == 3:
                    draw = rng.random(members.size) < d.community_visit_prob
                    if not draw[members == a][0]:
                        continue
                    members = members[draw]
                got = _venue_contacts(members, col, None, infectious, v + 1, d.max_contacts, rng)
                if got is None:
                    continue
                dst, venue = got[1], got[2]
                runs.append(np.full(dst.size, r))
                targets.append(dst)
                exposure.append(lay.exposure[venue])
                uniforms.append(rng.random(dst.size))
    if runs:
        cat = [np.concatenate(x) for x in (runs, targets, exposure, uniforms)]
    else:
        cat = [np.zeros(0, np.int64), np.zeros(0, np.int64), np.zeros(0), np.zeros(0)]
    return IndexCaseTrace(*cat, n_runs)


def secondary_infections(trace: IndexCaseTrace, calib: float, r0: float) -> float:
    """Mean number of distinct agents infected by the index case."""
    if trace.target.size == 0:
        return 0.0
    p = -np.expm1(-calib * r0 * trace.exposure)
    hit = trace.uniform < p
    pairs = np.unique(trace.run[hit].astype(np.int64) * (1 << 32) + trace.target[hit])
    return pairs.size / trace.n_runs


def calibrate_beta(city: City, params: EpidemicParams, target_r0: float | None = None, n_runs: int = 1000,
                   seed: int = 0, bounds: tuple[float, float] = (0.0, 64.0), rtol: float = 0.01) -> float:
    """Bisect the transmission scale until a lone index case infects ``target_r0`` agents on average.

    ``target_r0`` defaults to the first entry of the R0 track; the scale is
    used as ``calib * R0(t)`` so one calibration serves every R0 value.
    """
    target = float(params.r0_track[0] if target_r0 is None else target_r0)
    trace = trace_index_cases(city, params, n_runs, seed)
    lo, hi = bounds
    f_lo = secondary_infections(trace, lo, target)
    f_hi = secondary_infections(trace, hi, target)
    if not f_lo <= target <= f_hi:
        raise SimulationError(
            f"calibration bounds {bounds} do not bracket R0={target} (secondary infections {f_lo}..{f_hi})")
    for _ in range(200):
        mid = 0.5 * (lo + hi)
        f = secondary_infections(trace, mid, target)
        if abs(f - target) <= rtol * target and hi - lo < 1e-3 * max(mid, 1e-12):
            break
        if f < target:
            lo = mid
        else:
            hi = mid
        if hi - lo <= 1e-15:
            break
    return 0.5 * (lo + hi)


_SCALE_CACHE: dict[tuple, float] = {}


def resolve_transmission_scale(city: City, params: EpidemicParams) -> float:
    """The params' explicit scale, else a cached calibration at the reference R0."""
    if params.transmission_scale is not None:
        return float(params.transmission_scale)
    key = (city.fingerprint, params.disease)
    if key not in _SCALE_CACHE:
        _SCALE_CACHE[key] = calibrate_beta(city, params, target_r0=REFERENCE_R0)
    return _SCALE_CACHE[key]
