from __future__ import annotations

import numpy as np
import pytest
from hypothesis import settings

from curvflow.ambient import make_model
from curvflow.geometry import GraphState
from curvflow.grid import make_grid

settings.register_profile("curvflow", deadline=None, max_examples=40, derandomize=True)
settings.load_profile("curvflow")

ALL_MODELS = [
    ("lorentz-product", 1, "flat"),
    ("lorentz-product", 2, "flat"),
    ("flrw-collapse", 1, "flat"),
    ("flrw-collapse", 2, "flat"),
    ("de-sitter", 1, "flat"),
    ("de-sitter", 2, "round"),
    ("euclidean-polar", 1, "flat"),
    ("euclidean-polar", 2, "round"),
    ("hyperbolic-polar", 1, "flat"),
    ("hyperbolic-polar", 2, "round"),
]


def model_ids(cases=ALL_MODELS):
    return [f"{m}-n{n}-{b}" for m, n, b in cases]


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def flrw_torus(res=16, T=2.0):
    return make_model("flrw-collapse", 2, T=T), make_grid("torus2", res)


def constant_state(model, grid, c):
    return GraphState(np.full(grid.size, float(c)), model, grid)


def sphere_state(r, res=16):
    model = make_model("euclidean-polar", 2, base="round")
    grid = make_grid("sphere-axisym", res)
    return constant_state(model, grid, r)
