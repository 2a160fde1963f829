import numpy as np
import pytest

from cotrain_lab.oracle import LabeledDataset
from cotrain_lab.schedule import NoiseSchedule


@pytest.fixture
def schedule():
    return NoiseSchedule()


def random_dataset(rng, n_target=3, m_source=5, d_obs=3, d_act=2, spread=1.0):
    n = n_target + m_source
    return LabeledDataset(
        obs=spread * rng.standard_normal((n, d_obs)),
        actions=spread * rng.standard_normal((n, d_act)),
        is_target=np.arange(n) < n_target,
    )
