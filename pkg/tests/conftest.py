import numpy as np
import pytest

from lanemoe.geometry import build_loop_map
from lanemoe.sim import SimConfig


@pytest.fixture(scope="session")
def loop_map():
    return build_loop_map()


@pytest.fixture
def sim_config():
    return SimConfig()


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def lane_polyline(map_, lane):
    """Closed centerline polyline of one lane, stitched from its lanelets."""
    pts = []
    for ll in map_.lanelets:
        if ll.lane_index == lane:
            pts.extend(ll.centerline[:-1].tolist())
    pts.append(pts[0])
    return np.array(pts)
