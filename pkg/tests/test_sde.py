import math

import numpy as np
import pytest
import torch

from nfmkv.diffcore import InvalidInputError
from nfmkv.flows import build_flow, marginal_views
from nfmkv.problems import make_crowd_motion, make_traffic_flow
from nfmkv.rng import Stream
from nfmkv.sde import (
    AnalyticSde,
    DivergedSimulationError,
    TimeGrid,
    ValueNets,
    em_order_probe,
    gen_wiener,
    mkv_loss,
    particle_rate_probe,
    rollout_value,
    simulate_forward,
    w1_to_gaussian,
)

from conftest import Toy, randomize, tensor


def zero_nets(problem):
    nets = ValueNets(problem.d, problem.grid.N, hidden=(4,), seed=0)
    nets.store.values = torch.zeros(len(nets.store), dtype=torch.float64)
    return nets


def run(problem, M=64, seed=0, nets=None):
    flow = build_flow(problem.mu0, problem.grid.N)
    nets = nets or zero_nets(problem)
    w = gen_wiener(problem.grid, M, problem.d, seed)
    views = marginal_views(flow, 8, Stream(seed, "v"))
    return simulate_forward(problem, flow, nets, w, views=views), nets, views


def test_wiener_deterministic_and_variance():
    g = TimeGrid(1.0, 10)
    a, b = gen_wiener(g, 50, 2, 3), gen_wiener(g, 50, 2, 3)
    assert torch.equal(a.increments, b.increments)
    big = gen_wiener(g, 100_000, 1, 0).increments.numpy()
    var = big.var(0)
    assert ((0.09 <= var) & (var <= 0.11)).all()


def test_wiener_subset_matches_full_batch():
    g = TimeGrid(1.0, 4)
    full = gen_wiener(g, 20, 2, 1).increments
    sub = gen_wiener(g, 3, 2, 1, sample_ids=[17, 2, 9]).increments
    assert torch.equal(sub, full[[17, 2, 9]])


def test_wiener_rejects_bad_sizes():
    with pytest.raises(InvalidInputError):
        gen_wiener(TimeGrid(1.0, 4), 0, 1, 0)
    with pytest.raises(InvalidInputError):
        TimeGrid(0.0, 4)


def test_frozen_dynamics_and_constant_drift():
    traj, _, _ = run(Toy(kind="zero"))
    assert torch.equal(traj.states, traj.states[:, :1].expand_as(traj.states))
    traj, _, _ = run(Toy(kind="one", N=7))
    assert torch.allclose(traj.states[:, -1], traj.states[:, 0] + 1, atol=1e-14)


def test_ou_terminal_moments():
    p = Toy(kind="ou", sigma=0.8, N=256, mean=1.0, std=1e-300)
    traj, _, _ = run(p, M=10_000)
    xT = traj.states[:, -1, 0].numpy()
    mean, var = math.exp(-1), 0.64 * (1 - math.exp(-2)) / 2
    se_mean, se_var = math.sqrt(var / xT.size), var * math.sqrt(2 / xT.size)
    assert abs(xT.mean() - mean) < 3 * se_mean
    assert abs(xT.var() - var) < 3 * se_var


def test_simulation_is_order_independent():
    p = make_crowd_motion(2, grid=TimeGrid(1.0, 5))
    flow = build_flow(p.mu0, 5)
    nets = ValueNets(2, 5, hidden=(8,), seed=2)
    views = marginal_views(flow, 16, Stream(0, "v"))
    full = simulate_forward(p, flow, nets, gen_wiener(p.grid, 12, 2, 4), views=views)
    ids = [11, 0, 5, 3]
    sub = simulate_forward(p, flow, nets, gen_wiener(p.grid, 4, 2, 4, sample_ids=ids), views=views, sample_ids=ids)
    assert torch.equal(sub.states, full.states[ids])


def test_ring_states_stay_on_circle():
    p = make_traffic_flow(TimeGrid(1.0, 20), sigma=2.0)
    flow = build_flow(p.mu0, 20)
    nets = ValueNets(1, 20, hidden=(8,), seed=1)
    randomize(nets.store, 1.0)
    traj = simulate_forward(p, flow, nets, gen_wiener(p.grid, 200, 1, 0), mu_samples=16)
    assert float(traj.states.min()) >= 0 and float(traj.states.max()) < 1


def test_divergence_names_step_and_sample():
    p = Toy(kind="ou", sigma=1e12, N=3)
    with pytest.raises(DivergedSimulationError) as err:
        run(p, M=5)
    assert err.value.step == 1 and err.value.sample == 0


def test_rollout_constant_and_telescoping():
    p = Toy(cost=0.0)
    traj, nets, views = run(p)
    randomize(nets.store, 0.5)
    for net in nets.z_nets:
        for entry in net.param_spec():
            nets.store.set_segment(entry.name, np.zeros(entry.shape))
    u0 = nets.u0(traj.states[:, 0])
    assert torch.allclose(rollout_value(p, nets, traj, views), u0, atol=1e-15)
    p3 = Toy(cost=3.0)
    assert torch.allclose(rollout_value(p3, nets, traj, views), u0 - 3.0, atol=1e-12)
    assert traj.values.shape == (64, 11)


def test_rollout_linear_in_running_cost():
    traj, nets, views = run(Toy(cost=0.0))
    base = rollout_value(Toy(cost=0.0), nets, traj, views)
    one = rollout_value(Toy(cost=1.3), nets, traj, views) - base
    two = rollout_value(Toy(cost=2.6), nets, traj, views) - base
    assert torch.allclose(two, 2 * one, atol=1e-12)


def test_rollout_single_step_by_hand():
    p = make_crowd_motion(1, x_T=(0.0,), grid=TimeGrid(1.0, 1), sigma=0.5)
    flow = build_flow(p.mu0, 1)
    nets = ValueNets(1, 1, hidden=(3,), seed=5)
    randomize(nets.store, 0.4)
    views = marginal_views(flow, 4, Stream(0))
    traj = simulate_forward(p, flow, nets, gen_wiener(p.grid, 1, 1, 9), views=views)
    x0, dw = traj.states[0, 0], traj.wiener.increments[0, 0]
    z = nets.z(0, x0[None])[0]
    alpha = -0.5 * z / 0.5
    f = float(alpha @ alpha) + float(np.exp(-((x0.numpy() - views[0].samples.numpy()) ** 2).sum(-1)).mean())
    expected = float(nets.u0(x0[None])[0]) - f + float(z @ dw)
    assert abs(float(rollout_value(p, nets, traj, views)[0]) - expected) < 1e-12


def test_mkv_loss_examples():
    class Fake:
        pass

    p = Toy()
    traj = Fake()
    traj.states = torch.zeros(2, 2, 1, dtype=torch.float64)
    assert float(mkv_loss(tensor([0.0, 0.0]), traj, p, [None, None])) == 0.0
    assert float(mkv_loss(tensor([1.0, 2.0]), traj, p, [None, None])) == 2.5
    traj.states = torch.zeros(1, 2, 1, dtype=torch.float64)
    assert float(mkv_loss(tensor([1.0]), traj, p, [None, None])) == 1.0


def test_em_probe_deterministic_ode_is_first_order():
    res = em_order_probe(AnalyticSde("ou", sigma=0.0), [2.0**-k for k in range(4, 10)], M=10)
    assert 0.9 <= res["strong_order"] <= 1.1


def test_em_probe_weak_order_on_ou():
    res = em_order_probe(AnalyticSde("ou"), [2.0**-k for k in range(4, 10)], M=10_000)
    assert 0.8 <= res["weak_order"] <= 1.2


def test_em_probe_needs_three_steps():
    with pytest.raises(InvalidInputError):
        em_order_probe(AnalyticSde("ou"), [0.1, 0.05])


def test_w1_to_gaussian_matches_quadrature():
    from scipy import integrate, stats

    x = np.array([-0.4, 0.3, 1.7])
    F = lambda t: np.mean(x <= t)
    exact = integrate.quad(lambda t: abs(F(t) - stats.norm.cdf(t)), -12, 12, points=list(x), limit=200)[0]
    assert abs(w1_to_gaussian(x) - exact) < 1e-8


def test_particle_rate_examples():
    res = particle_rate_probe([100, 1000, 10_000], seed=0)
    assert -0.6 <= res["slope"] <= -0.4
    small = np.mean([w1_to_gaussian(Stream(1, s).normal((1,))) for s in range(20)])
    large = np.mean([w1_to_gaussian(Stream(2, s).normal((10**6,))) for s in range(20)])
    assert large < small
