import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from labelunc.geometry import BoxBev

settings.register_profile("default", deadline=None, suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def random_box(rng, spread=20.0) -> BoxBev:
    return BoxBev(
        rng.uniform(-spread, spread),
        rng.uniform(-spread, spread),
        rng.uniform(0.5, 6.0),
        rng.uniform(0.5, 3.0),
        rng.uniform(-np.pi, np.pi),
    )


def edge_points(box: BoxBev, edges=(0, 1, 2, 3), per_edge=20, noise=0.0, rng=None):
    """Points spread along the chosen edges (front, left, rear, right) of ``box``."""
    from labelunc.geometry import unit_to_world

    s = np.linspace(-0.45, 0.45, per_edge)
    h = np.full(per_edge, 0.5)
    unit = {
        0: np.column_stack([h, s]),
        1: np.column_stack([s, h]),
        2: np.column_stack([-h, s]),
        3: np.column_stack([s, -h]),
    }
    pts = unit_to_world(np.concatenate([unit[e] for e in edges]), box)
    if noise > 0:
        pts = pts + rng.normal(0.0, noise, pts.shape)
    return pts
