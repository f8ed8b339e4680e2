import numpy as np
import pytest

from mobprof.environment import EnvState, GateParams
from mobprof.ingest import CheckinEvent, GridSpec
from mobprof.profile_init import UserTable
from mobprof.spatial_kg import KgState, build_spatial_kg


def make_events(spec, grid):
    """spec: list of (user, poi, category, lat, lon, t)."""
    return [CheckinEvent(u, p, c, f"name {c}", lat, lon, float(t)) for u, p, c, lat, lon, t in spec]


@pytest.fixture
def ten_poi_env():
    """10 POIs over 3 categories and a 2x2 grid, 3 users, random state."""
    rng = np.random.default_rng(123)
    grid = GridSpec(0.0, 1.0, 0.0, 1.0, 2, 2)
    events = []
    for i in range(10):
        lat, lon = rng.uniform(0.05, 0.95, 2)
        events.append(CheckinEvent("u0", f"p{i}", f"c{i % 3}", f"name {i % 3}", lat, lon, float(i)))
    kg = build_spatial_kg(events, grid)
    dim = 6
    users = UserTable(["u0", "u1", "u2"], rng.normal(size=(3, dim)))
    ks = KgState(
        rng.normal(size=(kg.n_pois, dim)),
        rng.normal(size=(kg.n_categories + kg.n_zones, dim)),
        rng.normal(size=(2, dim)),
    )
    params = GateParams.init(dim, grid.m, seed=5, gate_scale=0.5, user_bias=0.0, kg_bias=0.0)
    return EnvState(users, ks, kg, params), grid
