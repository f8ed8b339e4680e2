import math

import numpy as np
import pytest

from mobprof import environment as E
from mobprof.errors import ConfigError, DataError
from mobprof.reward import (
    CategoryVectors,
    RewardBaselines,
    RewardWeights,
    calibrate_baselines,
    components,
    distance_km,
    load_word_vectors,
    nearest_rank,
    r_c,
    r_d,
    r_p,
    reward,
    reward_r1,
    reward_r2,
)


def north(km):
    return (math.degrees(km / 6371.0), 0.0)


def test_distance():
    assert distance_km((40.7, -74.0), (40.7, -74.0)) == 0.0
    assert distance_km((0, 0), (0, 180)) == pytest.approx(math.pi * 6371.0, abs=1.0)
    assert distance_km((0, 0), (0, 180)) == pytest.approx(20015.1, abs=1.0)
    rng = np.random.default_rng(0)
    for _ in range(100):
        a = (rng.uniform(-90, 90), rng.uniform(-180, 180))
        b = (rng.uniform(-90, 90), rng.uniform(-180, 180))
        assert distance_km(a, b) == distance_km(b, a) >= 0


def test_r_d():
    assert r_d((1, 1), (1, 1)) == 100.0
    assert r_d((0, 0), north(2.0)) == pytest.approx(0.5, abs=1e-9)
    assert r_d((0, 0), north(0.001)) == 100.0
    ds = [r_d((0, 0), north(k)) for k in (0.02, 0.5, 1, 5, 50)]
    assert all(a > b for a, b in zip(ds, ds[1:]))


def test_r_c_and_r_p():
    v = CategoryVectors({"a": np.array([1.0, 0.0]), "b": np.array([0.0, 1.0])}, 2)
    assert r_c("a", "a", v) == 1.0
    assert r_c("a", "b", v) == 0.0
    assert r_c("a", "unknown", v) == 0.0
    assert r_p(3, 3) == 1.0 and r_p(3, 4) == 0.0
    assert r_p("x", "x") == r_p(7, 7)


def test_word_vectors(tmp_path):
    p = tmp_path / "w.txt"
    p.write_text("coffee 1 0\nshop 0 1\nbar 2 2\nbroken 1\n")
    words, dim = load_word_vectors(p)
    assert dim == 2 and set(words) == {"coffee", "shop", "bar"}
    v = CategoryVectors.from_word_vectors({"c1": "Coffee Shop", "c2": "Opera"}, words, dim)
    np.testing.assert_array_equal(v["c1"], [0.5, 0.5])
    assert not v["c2"].any()
    assert load_word_vectors(p, vocab={"bar"})[0].keys() == {"bar"}
    with pytest.raises(DataError):
        load_word_vectors(tmp_path / "missing.txt")


def test_reward_examples():
    ones = RewardWeights(1, 1, 1)
    assert reward_r1([100, 1, 1], ones) == 102.0
    assert reward_r1([0.5, 0, 0], RewardWeights(2, 1, 1)) == 1.0
    with pytest.raises(ConfigError):
        RewardWeights(0, 0, 0)
    with pytest.raises(ConfigError):
        RewardWeights(-1, 1, 1)
    b = RewardBaselines(0.2, 0.5, 0.25)
    assert reward_r2([0.2, 0.5, 0.25], ones, b) == 0.0
    assert reward_r2([0.1, 0.4, 0.0], ones, b) < 0
    assert reward_r2([0.5, 0.9, 1.0], ones, b) == pytest.approx(1.45, abs=1e-12)
    assert reward([1, 1, 1], ones, "r1") == 3.0
    with pytest.raises(ConfigError):
        reward([1, 1, 1], ones, "r3")


def test_r1_lower_bound():
    rng = np.random.default_rng(1)
    for _ in range(200):
        w = RewardWeights(*rng.uniform(0, 3, 3))
        comp = [rng.uniform(0.001, 100), rng.uniform(-1, 1), float(rng.integers(2))]
        assert reward_r1(comp, w) > -w.c - 1e-12 or w.c == 0


def test_nearest_rank():
    assert nearest_rank(range(1, 9)) == 2
    assert nearest_rank([3.5] * 7) == 3.5
    assert nearest_rank([5, 1, 4, 2, 3]) == 2
    with pytest.raises(DataError):
        nearest_rank([])


def test_calibration_restores_env(ten_poi_env):
    env, grid = ten_poi_env
    kg = env.kg
    vec = CategoryVectors({c: np.eye(3)[i] for i, c in enumerate(kg.category_ids)}, 3)
    rng = np.random.default_rng(0)
    stream = [(type("Ev", (), {"user_id": f"u{i % 3}", "poi_id": f"p{(i * 7) % 10}"})(), rng.uniform(0, 3, 3 * grid.m)) for i in range(12)]
    before = env.snapshot()
    params_before = {k: v.copy() for k, v in env.params.arrays.items()}
    rep = calibrate_baselines(env, stream, lambda e, ev: int(rng.integers(kg.n_pois)), kg, vec, rounds=5)
    assert rep.samples == 60 and rep.rounds == 5
    np.testing.assert_array_equal(env.users.vectors, before.users.vectors)
    np.testing.assert_array_equal(env.kg_state.heads, before.kg_state.heads)
    np.testing.assert_array_equal(env.kg_state.tails, before.kg_state.tails)
    assert env.step == before.step
    for k, v in params_before.items():
        np.testing.assert_array_equal(env.params[k], v)
    for lo, x, hi in zip(rep.minimum, (rep.baselines.d, rep.baselines.c, rep.baselines.p), rep.maximum):
        assert lo <= x <= hi
    with pytest.raises(ConfigError):
        calibrate_baselines(env, stream, lambda e, ev: 0, kg, vec, rounds=3)


def test_components_exact_hit(ten_poi_env):
    env, _ = ten_poi_env
    kg = env.kg
    vec = CategoryVectors({c: np.ones(2) for c in kg.category_ids}, 2)
    np.testing.assert_array_equal(components(4, 4, kg, vec), [100.0, 1.0, 1.0])
