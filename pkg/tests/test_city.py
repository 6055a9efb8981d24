import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from epiforge.city import (
    HOUSEHOLD, SCHOOL, STUDENT, WORKER, WORKPLACE, CapacityError, City, CityConfig, block_population_map,
    generate_city,
)


@pytest.fixture(scope="module")
def city():
    return generate_city(CityConfig(seed=42))


def test_default_city_has_100_blocks_and_about_100k_residents(city):
    assert city.n_blocks == 100
    # 100 blocks with std 1000/6 each: total std about 1667
    assert abs(city.n_agents - 100_000) < 5 * 1667


def test_minimal_city_is_one_agent_in_one_household():
    c = generate_city(CityConfig(grid_rows=1, grid_cols=1, block_pop_mean=1, block_pop_std=0))
    assert c.n_agents == 1
    assert c.venues_of_type(HOUSEHOLD).size == 1
    assert block_population_map(c).tolist() == [[1]]


def test_block_population_sample_mean_matches_normal_mean():
    means = []
    for seed in range(1000):
        cfg = CityConfig(grid_rows=3, grid_cols=3, block_pop_mean=50, block_pop_std=10, seed=seed,
                         workplaces_per_1000=20)
        means.append(generate_city(cfg).block_pop.mean())
    # each city averages 9 blocks; the seed-average of 1000 such means has std 10/sqrt(9000)
    se = 10 / np.sqrt(9 * 1000)
    assert abs(np.mean(means) - 50) < 3 * se


def test_population_map_matches_recount(city):
    recount = np.zeros(city.shape, dtype=np.int64)
    rows, cols = city.shape
    for b in city.home_block.tolist():
        recount[b // cols, b % cols] += 1
    assert np.array_equal(block_population_map(city), recount)
    assert block_population_map(city).sum() == city.n_agents


def test_same_config_gives_identical_city(city):
    again = generate_city(CityConfig(seed=42))
    assert city.equals(again)
    assert city.fingerprint == again.fingerprint


def test_different_seed_gives_different_city(city):
    assert not city.equals(generate_city(CityConfig(seed=43)))


def test_assignments_are_total_and_local(city):
    students = city.role == STUDENT
    workers = city.role == WORKER
    assert np.all(city.venue_type[city.school[students]] == SCHOOL)
    assert np.all(city.venue_type[city.workplace[workers]] == WORKPLACE)
    assert np.all(city.school[~students] == -1)
    assert np.all(city.venue_type[city.household] == HOUSEHOLD)
    assert np.all(city.venue_block[city.household] == city.home_block)
    assert np.all((city.venue_block >= 0) & (city.venue_block < city.n_blocks))


def test_school_capacity_is_respected(city):
    load = np.bincount(city.school[city.school >= 0], minlength=city.n_venues)
    schools = city.venues_of_type(SCHOOL)
    assert np.all(load[schools] <= city.venue_capacity[schools])


def test_capacity_shortfall_names_venue_type():
    cfg = CityConfig(grid_rows=2, grid_cols=2, block_pop_mean=500, seed=1, schools_per_1000=0.0)
    with pytest.raises(CapacityError) as info:
        generate_city(cfg)
    assert info.value.venue_type == "school"
    assert info.value.shortfall > 0


def test_json_round_trip_is_exact(city, tmp_path):
    path = tmp_path / "city.json"
    city.save(path)
    loaded = City.load(path)
    assert loaded.equals(city)
    assert json.loads(path.read_text())["format"] == "epiforge.city"


def test_config_rejects_unknown_keys():
    with pytest.raises(ValueError):
        CityConfig.from_dict({"grid_rows": 2, "no_such_field": 1})


@pytest.mark.parametrize("kw", [{"grid_rows": 0}, {"block_pop_mean": 0}, {"block_pop_std": -1},
                                {"mean_household_size": 0.5}])
def test_config_invariants(kw):
    with pytest.raises(ValueError):
        CityConfig(**kw)


@settings(max_examples=25, deadline=None)
@given(rows=st.integers(1, 4), cols=st.integers(1, 4), mean=st.integers(1, 120), seed=st.integers(0, 2**32))
def test_generated_cities_conserve_and_assign(rows, cols, mean, seed):
    c = generate_city(CityConfig(grid_rows=rows, grid_cols=cols, block_pop_mean=mean, seed=seed))
    assert c.block_pop.sum() == c.n_agents == block_population_map(c).sum()
    assert np.array_equal(np.bincount(c.home_block, minlength=c.n_blocks), c.block_pop)
    assert np.all(c.venue_block[c.household] == c.home_block)
    assert np.all(c.school[c.role == STUDENT] >= 0)
    assert np.all(c.workplace[c.role == WORKER] >= 0)
    assert np.all((c.compliance >= 0) & (c.compliance <= 1))
