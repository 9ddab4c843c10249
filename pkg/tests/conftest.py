import numpy as np
import pytest

from stagecoach import EngineConfig, WorkloadSpec


@pytest.fixture
def unthrottled():
    """Engine config with every shim rate off (pure-function tests)."""
    return EngineConfig(
        pfs_rate_bytes_per_sec=None,
        bb_rate_bytes_per_sec=None,
        fabric_rate_bytes_per_sec=None,
    )


@pytest.fixture
def small_spec():
    return WorkloadSpec(
        nx=32, ny=32, nz=8, n_3d_fields=1, n_2d_fields=1,
        steps=2, px=2, py=2, nodes=1, ranks_per_node=4, seed=101,
    )


def rng(seed=0):
    return np.random.default_rng(seed)
