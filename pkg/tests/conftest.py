import os
import sys

import numpy as np
import pytest

sys.path.insert(0, os.path.dirname(__file__))

from cdsmooth.models import GaussianState, make_ou  # noqa: E402
from cdsmooth.odeint import (TimeGrid, euler_maruyama, measurement_times,  # noqa: E402
                             sample_measurements)


class OuProblem:
    """OU a=1, q=2, R=1 with 20 measurements over [0, 10] on a 0.01 grid."""

    a, q, r = 1.0, 2.0, 1.0
    step = 0.01

    def __init__(self, seed=3, tK=10.0, interval=0.5):
        self.model, self.meas = make_ou(self.a, self.q, self.r)
        self.prior = GaussianState([0.0], [[1.0]])
        sim = TimeGrid(0.0, tK, self.step)
        self.path = euler_maruyama(self.model, np.zeros(1), sim, seed)
        times = measurement_times(0.0, tK, interval)
        self.records = sample_measurements(self.path, self.meas, times, seed + 1)
        self.grid = TimeGrid(0.0, tK, self.step, times)

    def exact(self):
        from oracles import ou_kalman_rts
        idx = {int(i): float(r.value[0])
               for i, r in zip(self.grid.measurement_indices, self.records)}
        return ou_kalman_rts(self.a, self.q, self.r, 0.0, 1.0, self.grid.times, idx)


@pytest.fixture(scope="session")
def ou():
    return OuProblem()
