import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from millforge import primitives as prim
from millforge.grid import GridSpec
from millforge.levelset import LevelSet

H = 0.5


@pytest.fixture(scope="session")
def sphere10():
    """Sphere of radius 10 on a 65^3 grid, band wide enough for iso-3 casts."""
    g = GridSpec.from_bounds((-16, -16, -16), (16, 16, 16), H)
    return LevelSet.from_sdf(g, prim.sphere(g, (0, 0, 0), 10.0), band_width=4.0)


@pytest.fixture(scope="session")
def rng():
    return np.random.default_rng(20240911)


def random_blob_scene(grid: GridSpec, seed: int, band: float = 5.0) -> LevelSet:
    r = np.random.default_rng(seed)
    parts = [prim.sphere(grid, r.uniform(-8, 8, 3), r.uniform(3, 7))
             for _ in range(int(r.integers(2, 5)))]
    return LevelSet.from_sdf(grid, prim.union(*parts), band_width=band)


def unit(v):
    v = np.asarray(v, dtype=float)
    return v / np.linalg.norm(v)


def unit_sphere_points(n, seed=0):
    r = np.random.default_rng(seed)
    v = r.normal(size=(n, 3))
    return v / np.linalg.norm(v, axis=1, keepdims=True)
