import numpy as np
import pytest
import torch

from nfmkv.diffcore import DTYPE
from nfmkv.flows import GaussianBase
from nfmkv.problems import MfgProblem
from nfmkv.rng import Stream
from nfmkv.sde import TimeGrid


@pytest.fixture
def stream():
    return Stream(1234, "tests")


def tensor(x):
    return torch.as_tensor(np.asarray(x, dtype=float), dtype=DTYPE)


def randomize(store, scale=0.3, seed=7):
    """Fill a ParamStore with scaled normal draws so no block sits at its identity init."""
    store.values = scale * tensor(Stream(seed, "randomize").normal((len(store),)))
    return store


class Toy(MfgProblem):
    """Control-free test problem: drift ``kind`` in {zero, one, ou}, running cost ``cost``."""

    def __init__(self, d=1, N=10, sigma=0.0, kind="zero", cost=0.0, mean=0.0, std=1.0):
        super().__init__("toy", d, TimeGrid(1.0, N), sigma, GaussianBase([mean] * d, [std] * d))
        self.kind, self.cost = kind, cost

    def zeta(self, z):
        return z

    def b(self, t, x, mu, alpha):
        return {"zero": 0 * x, "one": 1 + 0 * x, "ou": -x}[self.kind]

    def f(self, t, x, mu, alpha):
        return torch.full(x.shape[:-1], float(self.cost), dtype=torch.float64)

    def g(self, x, mu):
        return torch.zeros(x.shape[:-1], dtype=torch.float64)

    def optimal_control(self, t, x, mu, zeta):
        return torch.zeros_like(x)


def zero_value_nets(problem, hidden=(4,)):
    from nfmkv.sde import ValueNets

    nets = ValueNets(problem.d, problem.grid.N, hidden=hidden, seed=0)
    nets.store.values = torch.zeros(len(nets.store), dtype=DTYPE)
    return nets
