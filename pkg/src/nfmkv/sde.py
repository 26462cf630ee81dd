"""Euler-Maruyama machinery for the McKean-Vlasov FBSDE.

Forward states follow X_{n+1} = X_n + b dt + sigma dW with the control read
off the per-step gradient networks; the value process is rolled forward as
u_{n+1} = u_n - f dt + Z_n . dW and matched against the terminal value
function.  Also hosts the two convergence probes (Euler-Maruyama orders on
analytic SDEs, and the particle-approximation rate).
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch
from scipy import stats

from .diffcore import DTYPE, InvalidInputError, Mlp, ParamStore, init_params
from .rng import Stream

DIVERGENCE_BOUND = 1e6


class DivergedSimulationError(FloatingPointError):
    def __init__(self, step: int, sample: int, value: float):
        self.step, self.sample, self.value = step, sample, value
        super().__init__(f"simulation diverged at step {step}, sample {sample} (|X| = {value:.3g})")


@dataclass(frozen=True)
class TimeGrid:
    T: float = 1.0
    N: int = 50

    def __post_init__(self):
        if int(self.N) != self.N or self.N < 1:
            raise InvalidInputError("N must be a positive integer")
        if not self.T > 0:
            raise InvalidInputError("horizon T must be positive")

    @property
    def dt(self) -> float:
        return self.T / self.N

    def t(self, n: int) -> float:
        return n * self.T / self.N

    @property
    def times(self) -> np.ndarray:
        return np.arange(self.N + 1) * self.dt


@dataclass
class WienerBatch:
    increments: torch.Tensor  # (M, N, d)
    dt: float
    seed: int
    stream_path: tuple

    @property
    def M(self) -> int:
        return self.increments.shape[0]

    @property
    def N(self) -> int:
        return self.increments.shape[1]

    @property
    def stream(self) -> Stream:
        return Stream(self.seed, *self.stream_path)


def gen_wiener(grid: TimeGrid, M: int, d: int, seed: int, counter=0, sample_ids=None) -> WienerBatch:
    """Brownian increments keyed by (seed, "wiener", counter, m, n, coordinate).

    ``sample_ids`` picks which path indices to generate (default 0..M-1);
    any subset or ordering reproduces the same per-path increments.
    """
    if M < 1 or d < 1:
        raise InvalidInputError("M and d must be at least 1")
    if not grid.dt > 0:
        raise InvalidInputError("time step must be positive")
    path = ("wiener", *counter) if isinstance(counter, tuple) else ("wiener", counter)
    stream = Stream(seed, *path)
    ids = np.arange(M) if sample_ids is None else np.asarray(sample_ids)
    m, n, j = np.meshgrid(ids, np.arange(grid.N), np.arange(d), indexing="ij")
    z = stream.normal_at(m, n, j)
    return WienerBatch(torch.tensor(math.sqrt(grid.dt) * z, dtype=DTYPE), grid.dt, int(seed), path)


def initial_states(problem, wiener: WienerBatch, sample_ids=None) -> torch.Tensor:
    stream = wiener.stream.child("x0")
    ids = np.arange(wiener.M) if sample_ids is None else np.asarray(sample_ids)
    x0 = problem.mu0.sample(stream, int(ids.max()) + 1 if len(ids) else 0)
    return x0[torch.as_tensor(ids, dtype=torch.long)]


class ValueNets:
    """u(0, .) network plus one gradient network per time step (Z_n = [d_x u]^T sigma)."""

    def __init__(self, d: int, n_steps: int, hidden=(32, 32), seed: int = 0, activation: str = "tanh"):
        self.d = d
        self.n_steps = n_steps
        self.hidden = tuple(hidden)
        widths = (d, *self.hidden)
        self.u0_net = Mlp((*widths, 1), "u0", activation=activation)
        self.z_nets = [Mlp((*widths, d), f"z{n}", activation=activation) for n in range(n_steps)]
        spec = self.u0_net.param_spec()
        for net in self.z_nets:
            spec += net.param_spec()
        self.bind(init_params(spec, seed))

    def bind(self, store: ParamStore):
        self.store = store
        self.u0_net.store = store
        for net in self.z_nets:
            net.store = store

    def u0(self, x):
        return self.u0_net(x)[..., 0]

    def z(self, n: int, x):
        return self.z_nets[n](x)


@dataclass
class TrajectoryBatch:
    states: torch.Tensor  # (M, N+1, d)
    wiener: WienerBatch
    z_values: torch.Tensor  # (M, N, d)
    controls: torch.Tensor  # (M, N, d)
    values: torch.Tensor | None = None  # (M, N+1)

    @property
    def M(self) -> int:
        return self.states.shape[0]

    @property
    def N(self) -> int:
        return self.states.shape[1] - 1

    def detach(self) -> "TrajectoryBatch":
        return TrajectoryBatch(
            self.states.detach(), self.wiener, self.z_values.detach(), self.controls.detach(),
            None if self.values is None else self.values.detach(),
        )


def _guard(x: torch.Tensor, step: int):
    bad = ~torch.isfinite(x).all(-1) | (x.abs() > DIVERGENCE_BOUND).any(-1)
    if bad.any():
        m = int(torch.nonzero(bad)[0, 0])
        raise DivergedSimulationError(step, m, float(x[m].abs().max()))


def simulate_forward(problem, flow, valuenets: ValueNets, wiener: WienerBatch, mu_samples: int = 512,
                     views=None, x0=None, sample_ids=None) -> TrajectoryBatch:
    """Euler-Maruyama forward pass with the control rule fed by the gradient networks.

    ``views`` (one MeasureView per step 0..N) may be precomputed when the flow
    is frozen; otherwise they are drawn from ``flow`` with ``mu_samples``
    samples keyed by the Wiener batch's stream.
    """
    grid = problem.grid
    if wiener.N != grid.N:
        raise InvalidInputError("Wiener batch and problem grid disagree on N")
    if valuenets.n_steps != grid.N or valuenets.d != problem.d:
        raise InvalidInputError("value networks do not match the problem")
    if views is None:
        from .flows import marginal_views

        views = marginal_views(flow, mu_samples, wiener.stream.child("mu"))
    x = initial_states(problem, wiener, sample_ids) if x0 is None else torch.as_tensor(x0, dtype=DTYPE)
    ring = problem.domain == "ring"
    dt = grid.dt
    sig = problem.sigma
    states, zs, alphas = [x], [], []
    for n in range(grid.N):
        t = grid.t(n)
        z = valuenets.z(n, x)
        alpha = problem.optimal_control(t, x, views[n], problem.zeta(z))
        x = x + problem.b(t, x, views[n], alpha) * dt + sig * wiener.increments[:, n]
        if ring:
            x = _wrap(x)
        _guard(x, n + 1)
        states.append(x)
        zs.append(z)
        alphas.append(alpha)
    return TrajectoryBatch(torch.stack(states, 1), wiener, torch.stack(zs, 1), torch.stack(alphas, 1))


def _wrap(x):
    x = torch.remainder(x, 1.0)
    return torch.where(x >= 1.0, x - 1.0, x)


def rollout_value(problem, valuenets: ValueNets, traj: TrajectoryBatch, views) -> torch.Tensor:
    """Roll the value process forward along the simulated paths; returns u_T per sample."""
    grid = problem.grid
    dt = grid.dt
    u = valuenets.u0(traj.states[:, 0])
    values = [u]
    for n in range(grid.N):
        x = traj.states[:, n]
        f = problem.f(grid.t(n), x, views[n], traj.controls[:, n])
        u = u - f * dt + (traj.z_values[:, n] * traj.wiener.increments[:, n]).sum(-1)
        if not torch.isfinite(u).all():
            m = int(torch.nonzero(~torch.isfinite(u))[0, 0])
            raise DivergedSimulationError(n + 1, m, float("inf"))
        values.append(u)
    traj.values = torch.stack(values, 1)
    return u


def mkv_loss(u_T: torch.Tensor, traj: TrajectoryBatch, problem, views) -> torch.Tensor:
    """Mean squared mismatch between rolled-out and prescribed terminal values."""
    g = problem.g(traj.states[:, -1], views[-1])
    diff = u_T - g
    return (diff * diff).mean()


# ---------------------------------------------------------------------------
# convergence probes


@dataclass(frozen=True)
class AnalyticSde:
    """OU: dX = -theta X dt + sigma dW.  GBM: dX = mu X dt + sigma X dW."""

    kind: str = "ou"
    x0: float = 1.0
    theta: float = 1.0
    mu: float = 0.5
    sigma: float = 1.0
    T: float = 1.0

    def drift(self, x):
        return -self.theta * x if self.kind == "ou" else self.mu * x

    def diffusion(self, x):
        return self.sigma * np.ones_like(x) if self.kind == "ou" else self.sigma * x


def _fit_slope(x, y) -> float:
    return float(np.polyfit(np.log(x), np.log(y), 1)[0])


def _exact_paths(sde: AnalyticSde, h: float, n_fine: int, M: int, stream: Stream):
    """Exact solution on the fine grid plus the Brownian increments driving it."""
    z1 = stream.child("dw").normal((M, n_fine))
    if sde.kind == "ou":
        th, s = sde.theta, sde.sigma
        # (dW, I) with I = int_0^h exp(-theta (h - s)) dW_s, sampled jointly and exactly
        var_w = h
        cov = (1.0 - math.exp(-th * h)) / th
        var_i = (1.0 - math.exp(-2.0 * th * h)) / (2.0 * th)
        dw = math.sqrt(var_w) * z1
        z2 = stream.child("di").normal((M, n_fine))
        resid = max(var_i - cov * cov / var_w, 0.0)
        di = (cov / var_w) * dw + math.sqrt(resid) * z2
        decay = math.exp(-th * h)
        x = np.empty((M, n_fine + 1))
        x[:, 0] = sde.x0
        for k in range(n_fine):
            x[:, k + 1] = decay * x[:, k] + s * di[:, k]
    elif sde.kind == "gbm":
        dw = math.sqrt(h) * z1
        w = np.concatenate([np.zeros((M, 1)), np.cumsum(dw, 1)], 1)
        t = np.arange(n_fine + 1) * h
        x = sde.x0 * np.exp((sde.mu - 0.5 * sde.sigma**2) * t + sde.sigma * w)
    else:
        raise InvalidInputError(f"unknown analytic SDE {sde.kind!r}")
    return x, dw


def em_order_probe(sde: AnalyticSde, dt_list, M: int = 10_000, seed: int = 0, refine: int = 4) -> dict:
    """Fitted strong and weak Euler-Maruyama orders against exact paths on shared noise.

    Strong error: E[max_n |X_num(t_n) - X_true(t_n)|].  Weak error:
    |E X_num(T)^2 - E X_true(T)^2|.  Slopes come from a least-squares fit on
    log-log axes.
    """
    dt_list = sorted(float(h) for h in dt_list)
    if len(dt_list) < 3:
        raise InvalidInputError("need at least three step sizes")
    h_fine = dt_list[0] / refine
    n_fine = int(round(sde.T / h_fine))
    ratios = [h / h_fine for h in dt_list]
    if any(abs(r - round(r)) > 1e-9 for r in ratios) or abs(n_fine * h_fine - sde.T) > 1e-9:
        raise InvalidInputError("step sizes must nest on a common fine grid")
    x_true, dw = _exact_paths(sde, h_fine, n_fine, M, Stream(seed, "em-probe", sde.kind))
    strong, weak = [], []
    for h, r in zip(dt_list, ratios):
        r = int(round(r))
        n = n_fine // r
        dW = dw.reshape(M, n, r).sum(-1)
        x = np.full(M, sde.x0, dtype=float)
        err = np.zeros(M)
        for k in range(n):
            x = x + sde.drift(x) * h + sde.diffusion(x) * dW[:, k]
            err = np.maximum(err, np.abs(x - x_true[:, (k + 1) * r]))
        strong.append(err.mean())
        weak.append(abs(np.mean(x**2) - np.mean(x_true[:, -1] ** 2)))
    strong_arr, weak_arr = np.array(strong), np.array(weak)
    return {
        "dt": dt_list,
        "strong_error": strong_arr.tolist(),
        "weak_error": weak_arr.tolist(),
        "strong_order": _fit_slope(dt_list, strong_arr),
        "weak_order": _fit_slope(dt_list, np.maximum(weak_arr, 1e-300)),
    }


def w1_to_gaussian(samples: np.ndarray, mean: float = 0.0, std: float = 1.0) -> float:
    """Exact W1 between an empirical measure and N(mean, std^2) via the quantile formula.

    W1 = sum_i int_{(i-1)/M}^{i/M} |x_(i) - q(u)| du with q the Gaussian quantile.
    """
    x = np.sort(np.asarray(samples, dtype=float))
    M = x.size
    u = np.arange(M + 1) / M
    lo, hi = u[:-1], u[1:]
    us = np.clip(stats.norm.cdf((x - mean) / std), lo, hi)

    def q_int(a, b):
        # int_a^b q(u) du = mean (b - a) + std (phi(z_a) - phi(z_b))
        za, zb = stats.norm.ppf(a), stats.norm.ppf(b)
        return mean * (b - a) + std * (stats.norm.pdf(za) - stats.norm.pdf(zb))

    # below the crossing q(u) < x, above it q(u) > x
    left = x * (us - lo) - q_int(lo, us)
    right = q_int(us, hi) - x * (hi - us)
    return float(np.sum(left + right))


def particle_rate_probe(M_list, seed: int = 0, n_seeds: int = 20, mean: float = 0.0, std: float = 1.0) -> dict:
    """Slope of log W1(empirical_M, N(mean, std^2)) against log M, averaged over seeds."""
    M_list = sorted(int(m) for m in M_list)
    if len(M_list) < 3:
        raise InvalidInputError("need at least three sample sizes")
    errs = []
    for M in M_list:
        vals = [
            w1_to_gaussian(mean + std * Stream(seed, "particle", M, s).normal((M,)), mean, std)
            for s in range(n_seeds)
        ]
        errs.append(float(np.mean(vals)))
    return {"M": M_list, "w1": errs, "slope": _fit_slope(M_list, errs)}
