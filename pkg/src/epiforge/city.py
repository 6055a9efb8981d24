"""Synthetic gridded city: blocks, agents and the venues they visit.

The city is stored column-wise (one numpy array per attribute) so the daily
simulation loop can work on whole populations at once. Agents are ordered by
home block and then by household.

All randomness comes from numpy's PCG64 bit generator seeded with
``CityConfig.seed``; PCG64 output is specified bit-for-bit and is identical
across platforms, so a config fully determines the city.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import math
from dataclasses import dataclass
from functools import cached_property
from pathlib import Path

import numpy as np

CITY_FORMAT = "epiforge.city"
CITY_VERSION = 1

# venue types
HOUSEHOLD, SCHOOL, WORKPLACE, COMMUNITY, HOSPITAL = range(5)
VENUE_TYPE_NAMES = ("household", "school", "workplace", "community", "hospital")

# physical gap classes
CLOSE, MEDIUM, FAR = range(3)
GAP_NAMES = ("close", "medium", "far")
GAP_FACTOR = np.array([1.0, 2.0, 4.0])

# agent roles
NEITHER, STUDENT, WORKER = range(3)
ROLE_NAMES = ("neither", "student", "worker")

STUDENT_AGES = (5, 22)
WORKING_AGES = (19, 60)
WORKER_FRACTION = 0.6
MAX_HOUSEHOLD_SIZE = 10

# (low, high, share) age bands, ages inclusive
AGE_PYRAMID = ((0, 18, 0.30), (19, 60, 0.55), (61, 90, 0.15))


class CityError(ValueError):
    pass


class CapacityError(CityError):
    """Raised when a venue type cannot host everybody assigned to it."""

    def __init__(self, venue_type: str, shortfall: int):
        self.venue_type = venue_type
        self.shortfall = shortfall
        super().__init__(f"{venue_type} capacity short by {shortfall} places")


@dataclass(frozen=True)
class CityConfig:
    grid_rows: int = 10
    grid_cols: int = 10
    block_pop_mean: float = 1000.0
    # None means block_pop_mean / 6
    block_pop_std: float | None = None
    # when set, overrides block_pop_mean with N / (rows * cols)
    total_population_target: int | None = None
    seed: int = 0
    workplaces_per_1000: float = 5.0
    school_capacity: int = 500
    # None sizes the school system to fit every student
    schools_per_1000: float | None = None
    hospital_beds_per_1000: float = 25.0
    mean_household_size: float = 3.0
    household_hours: float = 4.0
    school_hours: float = 6.0
    work_hours: float = 8.0
    community_hours: float = 2.0

    def __post_init__(self):
        if self.grid_rows < 1 or self.grid_cols < 1:
            raise CityError("grid must have at least one block")
        if self.total_population_target is not None and self.total_population_target < 1:
            raise CityError("total_population_target must be positive")
        if self.mean_pop <= 0:
            raise CityError("block_pop_mean must be positive")
        if self.std_pop < 0:
            raise CityError("block_pop_std must be nonnegative")
        if self.mean_household_size < 1:
            raise CityError("mean_household_size must be at least 1")
        if self.school_capacity < 1:
            raise CityError("school_capacity must be positive")
        if not 0 <= self.seed < 2**64:
            raise CityError("seed must be an unsigned 64-bit integer")

    @property
    def n_blocks(self) -> int:
        return self.grid_rows * self.grid_cols

    @property
    def mean_pop(self) -> float:
        if self.total_population_target is not None:
            return self.total_population_target / self.n_blocks
        return float(self.block_pop_mean)

    @property
    def std_pop(self) -> float:
        if self.block_pop_std is None:
            return self.mean_pop / 6.0
        return float(self.block_pop_std)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> "CityConfig":
        names = {f.name for f in dataclasses.fields(cls)}
        unknown = set(data) - names
        if unknown:
            raise CityError(f"unknown city config keys: {sorted(unknown)}")
        return cls(**data)

    @classmethod
    def from_json(cls, path) -> "CityConfig":
        return cls.from_dict(json.loads(Path(path).read_text()))

    def fingerprint(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]


@dataclass(frozen=True, eq=False)
class City:
    """Immutable synthetic city.

    Agent arrays are indexed by agent id, venue arrays by venue id. Venue ids
    are global across types: households first, then schools, workplaces,
    community venues (one per block) and hospitals.
    """

    config: CityConfig
    block_pop: np.ndarray
    age: np.ndarray
    home_block: np.ndarray
    household: np.ndarray
    role: np.ndarray
    school: np.ndarray
    workplace: np.ndarray
    community: np.ndarray
    comorbid: np.ndarray
    compliance: np.ndarray
    venue_type: np.ndarray
    venue_block: np.ndarray
    venue_capacity: np.ndarray
    venue_hours: np.ndarray
    venue_gap: np.ndarray

    def __post_init__(self):
        for name in _ARRAY_FIELDS:
            getattr(self, name).setflags(write=False)

    @property
    def shape(self) -> tuple[int, int]:
        return self.config.grid_rows, self.config.grid_cols

    @property
    def n_agents(self) -> int:
        return int(self.age.size)

    @property
    def n_blocks(self) -> int:
        return int(self.block_pop.size)

    @property
    def n_venues(self) -> int:
        return int(self.venue_type.size)

    def venues_of_type(self, vtype: int) -> np.ndarray:
        return np.flatnonzero(self.venue_type == vtype)

    @cached_property
    def fingerprint(self) -> str:
        h = hashlib.sha256()
        h.update(self.config.fingerprint().encode())
        for name in _ARRAY_FIELDS:
            h.update(np.ascontiguousarray(getattr(self, name)).tobytes())
        return h.hexdigest()[:16]

    def to_dict(self) -> dict:
        out = {"format": CITY_FORMAT, "version": CITY_VERSION, "config": self.config.to_dict()}
        for name in _ARRAY_FIELDS:
            out[name] = getattr(self, name).tolist()
        return out

    @classmethod
    def from_dict(cls, data: dict) -> "City":
        if data.get("format") != CITY_FORMAT:
            raise CityError("not a city document")
        if data.get("version") != CITY_VERSION:
            raise CityError(f"unsupported city document version {data.get('version')}")
        arrays = {name: np.asarray(data[name], dtype=dtype) for name, dtype in _ARRAY_FIELDS.items()}
        return cls(config=CityConfig.from_dict(data["config"]), **arrays)

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict()))

    @classmethod
    def load(cls, path) -> "City":
        return cls.from_dict(json.loads(Path(path).read_text()))

    def equals(self, other: "City") -> bool:
        return self.config == other.config and all(
            np.array_equal(getattr(self, n), getattr(other, n)) for n in _ARRAY_FIELDS
        )


_ARRAY_FIELDS = {
    "block_pop": np.int64,
    "age": np.int16,
    "home_block": np.int32,
    "household": np.int32,
    "role": np.int8,
    "school": np.int32,
    "workplace": np.int32,
    "community": np.int32,
    "comorbid": np.bool_,
    "compliance": np.float64,
    "venue_type": np.int8,
    "venue_block": np.int32,
    "venue_capacity": np.int32,
    "venue_hours": np.float64,
    "venue_gap": np.int8,
}


def _household_geometric_p(mean: float, cap: int) -> float:
    """Success probability of a geometric on {1..cap} whose truncated mean is ``mean``."""
    if mean <= 1.0:
        return 1.0

    def trunc_mean(p):
        k = np.arange(1, cap + 1)
        w = (1 - p) ** (k - 1)
        return float((k * w).sum() / w.sum())

    mean = min(mean, (cap + 1) / 2 - 1e-9)
    lo, hi = 1e-9, 1.0
    for _ in range(100):
        mid = 0.5 * (lo + hi)
        if trunc_mean(mid) > mean:
            lo = mid
        else:
            hi = mid
    return 0.5 * (lo + hi)


def _sample_ages(rng: np.random.Generator, n: int) -> np.ndarray:
    shares = np.array([band[2] for band in AGE_PYRAMID])
    band = rng.choice(len(AGE_PYRAMID), size=n, p=shares / shares.sum())
    lows = np.array([b[0] for b in AGE_PYRAMID])
    highs = np.array([b[1] for b in AGE_PYRAMID])
    return rng.integers(lows[band], highs[band] + 1).astype(np.int16)


def _block_centres(rows: int, cols: int) -> np.ndarray:
    r, c = np.divmod(np.arange(rows * cols), cols)
    return np.stack([r, c], axis=1).astype(float)


def _nearest_with_capacity(rng, member_blocks, venue_blocks, capacity, centres, venue_name):
    """Greedy nearest-venue assignment, members processed in random order.

    Returns the venue index (into ``venue_blocks``) for each member.
    """
    n_members = member_blocks.size
    total = int(capacity.sum())
    if total < n_members:
        raise CapacityError(venue_name, n_members - total)
    out = np.full(n_members, -1, dtype=np.int64)
    if n_members == 0:
        return out
    d = np.linalg.norm(centres[:, None, :] - centres[venue_blocks][None, :, :], axis=2)
    ranked = np.argsort(d, axis=1, kind="stable")
    free = capacity.astype(np.int64).copy()
    cursor = np.zeros(centres.shape[0], dtype=np.int64)
    for m in rng.permutation(n_members):
        b = member_blocks[m]
        row = ranked[b]
        j = cursor[b]
        while free[row[j]] == 0:
            j += 1
        cursor[b] = j
        v = row[j]
        free[v] -= 1
        out[m] = v
    return out


def generate_city(config: CityConfig) -> City:
    rng = np.random.Generator(np.random.PCG64(config.seed))
    rows, cols = config.grid_rows, config.grid_cols
    K = rows * cols

    block_pop = np.rint(rng.normal(config.mean_pop, config.std_pop, size=K))
    block_pop = np.maximum(block_pop, 1).astype(np.int64)
    N = int(block_pop.sum())
    home_block = np.repeat(np.arange(K, dtype=np.int32), block_pop)

    # households: consecutive runs of agents inside each block
    p_geo = _household_geometric_p(config.mean_household_size, MAX_HOUSEHOLD_SIZE)
    hh_sizes = []
    for k in range(K):
        remaining = int(block_pop[k])
        while remaining > 0:
            n_draw = max(4, int(remaining / config.mean_household_size * 1.5) + 4)
            sizes = rng.geometric(p_geo, size=n_draw)
            sizes = sizes[sizes <= MAX_HOUSEHOLD_SIZE]
            csum = np.cumsum(sizes)
            take = int(np.searchsorted(csum, remaining))
            if take < sizes.size:
                chunk = sizes[: take + 1].copy()
                chunk[-1] -= csum[take] - remaining
                hh_sizes.append(chunk)
                remaining = 0
            else:
                hh_sizes.append(sizes)
                remaining -= int(csum[-1]) if sizes.size else 0
    hh_sizes = np.concatenate(hh_sizes).astype(np.int64)
    n_households = hh_sizes.size
    household = np.repeat(np.arange(n_households, dtype=np.int32), hh_sizes)
    hh_block = home_block[np.cumsum(hh_sizes) - hh_sizes]

    age = _sample_ages(rng, N)
    role = np.full(N, NEITHER, dtype=np.int8)
    is_student = (age >= STUDENT_AGES[0]) & (age <= STUDENT_AGES[1])
    role[is_student] = STUDENT
    working_age = (age >= WORKING_AGES[0]) & (age <= WORKING_AGES[1]) & ~is_student
    role[working_age & (rng.random(N) < WORKER_FRACTION)] = WORKER

    centres = _block_centres(rows, cols)
    venue_type = [np.full(n_households, HOUSEHOLD, np.int8)]
    venue_block = [hh_block.astype(np.int32)]
    venue_capacity = [hh_sizes.astype(np.int32)]
    venue_hours = [np.full(n_households, config.household_hours)]
    venue_gap = [np.full(n_households, CLOSE, np.int8)]
    next_id = n_households

    # schools
    students = np.flatnonzero(role == STUDENT)
    if config.schools_per_1000 is None:
        n_schools = math.ceil(students.size / config.school_capacity) if students.size else 0
    else:
        n_schools = int(round(config.schools_per_1000 * N / 1000))
    school = np.full(N, -1, dtype=np.int32)
    if n_schools:
        weight = np.bincount(home_block[students], minlength=K).astype(float) + 1e-9
        replace = n_schools > np.count_nonzero(weight > 1e-6)
        sblocks = rng.choice(K, size=n_schools, replace=replace, p=weight / weight.sum())
        sblocks = np.sort(sblocks).astype(np.int32)
        scap = np.full(n_schools, config.school_capacity, dtype=np.int32)
        pick = _nearest_with_capacity(rng, home_block[students], sblocks, scap, centres, "school")
        school[students] = next_id + pick
        venue_type.append(np.full(n_schools, SCHOOL, np.int8))
        venue_block.append(sblocks)
        venue_capacity.append(scap)
        venue_hours.append(np.full(n_schools, config.school_hours))
        venue_gap.append(np.full(n_schools, MEDIUM, np.int8))
        next_id += n_schools
    elif students.size:
        raise CapacityError("school", int(students.size))

    # workplaces, located proportionally to block population
    workers = np.flatnonzero(role == WORKER)
    workplace = np.full(N, -1, dtype=np.int32)
    n_work = max(1, int(round(config.workplaces_per_1000 * N / 1000)))
    wblocks = np.sort(rng.choice(K, size=n_work, p=block_pop / N)).astype(np.int32)
    wpick = rng.integers(0, n_work, size=workers.size)
    workplace[workers] = next_id + wpick
    venue_type.append(np.full(n_work, WORKPLACE, np.int8))
    venue_block.append(wblocks)
    venue_capacity.append(np.bincount(wpick, minlength=n_work).astype(np.int32))
    venue_hours.append(np.full(n_work, config.work_hours))
    venue_gap.append(rng.choice(3, size=n_work, p=[0.3, 0.4, 0.3]).astype(np.int8))
    next_id += n_work

    # one community venue per block
    community = (next_id + home_block).astype(np.int32)
    venue_type.append(np.full(K, COMMUNITY, np.int8))
    venue_block.append(np.arange(K, dtype=np.int32))
    venue_capacity.append(block_pop.astype(np.int32))
    venue_hours.append(np.full(K, config.community_hours))
    venue_gap.append(np.full(K, FAR, np.int8))
    next_id += K

    # hospitals share the configured bed total
    beds = max(1, math.ceil(config.hospital_beds_per_1000 * N / 1000))
    n_hosp = max(1, min(K // 20, beds))
    hblocks = np.sort(rng.choice(K, size=n_hosp, replace=False, p=block_pop / N)).astype(np.int32)
    hcap = np.full(n_hosp, beds // n_hosp, dtype=np.int32)
    hcap[: beds % n_hosp] += 1
    venue_type.append(np.full(n_hosp, HOSPITAL, np.int8))
    venue_block.append(hblocks)
    venue_capacity.append(hcap)
    venue_hours.append(np.full(n_hosp, 24.0))
    venue_gap.append(np.full(n_hosp, CLOSE, np.int8))

    comorbid = rng.random(N) < 0.1 + 0.004 * np.maximum(age.astype(float) - 40, 0)
    compliance = rng.random(N)

    return City(
        config=config,
        block_pop=block_pop,
        age=age,
        home_block=home_block,
        household=household,
        role=role,
        school=school,
        workplace=workplace,
        community=community,
        comorbid=comorbid,
        compliance=compliance,
        venue_type=np.concatenate(venue_type),
        venue_block=np.concatenate(venue_block),
        venue_capacity=np.concatenate(venue_capacity),
        venue_hours=np.concatenate(venue_hours).astype(np.float64),
        venue_gap=np.concatenate(venue_gap),
    )


def block_population_map(city: City) -> np.ndarray:
    counts = np.bincount(city.home_block, minlength=city.n_blocks)
    return counts.reshape(city.shape)
