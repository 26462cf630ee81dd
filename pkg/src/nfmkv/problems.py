"""Mean-field game problem statements.

Every problem bundles its coefficient functions with a closed-form control
rule ``optimal_control(t, x, mu, zeta)`` that minimises
``f(t, x, mu, a) + b(t, x, mu, a) . zeta`` over the control ``a``.  The
measure argument ``mu`` is a :class:`~nfmkv.flows.MeasureView`.

Shipped problems: ring-road traffic flow (d = 1), crowd motion (any d),
crowd motion around an obstacle and crowd motion with a terminal cost on the
first coordinate only.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
import torch

from .diffcore import DTYPE, InvalidInputError
from .flows import BaseDensity, GaussianBase, MeasureView, SineRing, base_from_dict
from .sde import TimeGrid


class _GaussianKernelMean(torch.autograd.Function):
    """mean_j exp(-|x_i - s_j|^2) with an analytic x-gradient; samples are constants."""

    @staticmethod
    def forward(ctx, x, samples):
        sq = (x * x).sum(-1, keepdim=True) + (samples * samples).sum(-1) - 2.0 * x @ samples.T
        e = torch.exp(-sq.clamp_min(0.0))
        k = e.mean(-1)
        ctx.save_for_backward(x, k, e @ samples / samples.shape[0])
        return k

    @staticmethod
    def backward(ctx, grad_out):
        x, k, weighted = ctx.saved_tensors
        return grad_out[:, None] * (-2.0) * (x * k[:, None] - weighted), None


def interaction_cost(x: torch.Tensor, samples: torch.Tensor) -> torch.Tensor:
    """(1/M) sum_j exp(-|x - s_j|^2), the Gaussian-kernel congestion cost."""
    x = torch.as_tensor(x, dtype=DTYPE)
    samples = torch.as_tensor(samples, dtype=DTYPE).detach()
    if samples.shape[0] < 1:
        raise InvalidInputError("interaction_cost needs at least one sample")
    single = x.dim() == 1
    if single:
        x = x[None]
    out = _GaussianKernelMean.apply(x, samples)
    return out[0] if single else out


@dataclass
class MfgProblem:
    """Base class; subclasses provide b, f, g and the control rule."""

    tag: str
    d: int
    grid: TimeGrid
    sigma: float
    mu0: BaseDensity
    domain: str = "euclidean"
    hamiltonian_tag: str = ""
    params: dict = field(default_factory=dict)

    control_dim = None

    def sigma_matrix(self, t=None, x=None) -> torch.Tensor:
        return self.sigma * torch.eye(self.d, dtype=DTYPE)

    def zeta(self, z: torch.Tensor) -> torch.Tensor:
        # sigma^{-1 dagger} Z for scalar sigma
        return z / self.sigma

    @property
    def has_terminal_cost(self) -> bool:
        return True

    def b(self, t, x, mu: MeasureView, alpha):
        raise NotImplementedError

    def f(self, t, x, mu: MeasureView, alpha):
        raise NotImplementedError

    def g(self, x, mu: MeasureView):
        raise NotImplementedError

    def optimal_control(self, t, x, mu: MeasureView, zeta):
        raise NotImplementedError

    def descriptor(self) -> dict:
        return {
            "tag": self.tag,
            "d": self.d,
            "T": self.grid.T,
            "N": self.grid.N,
            "sigma": self.sigma,
            "mu0": self.mu0.to_dict(),
            "params": _jsonable(self.params),
        }


def _jsonable(obj):
    if isinstance(obj, dict):
        return {k: _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple, np.ndarray)):
        return [_jsonable(v) for v in np.asarray(obj).tolist()] if isinstance(obj, np.ndarray) else [_jsonable(v) for v in obj]
    if isinstance(obj, (np.floating, np.integer)):
        return obj.item()
    return obj


class TrafficFlow(MfgProblem):
    """Ring road; drift is the speed control, cost 1/2 (1 - mu(x) - b)^2, no terminal preference."""

    @property
    def has_terminal_cost(self):
        return False

    def b(self, t, x, mu, alpha):
        return alpha

    def f(self, t, x, mu, alpha):
        dens = mu.density(x)
        return 0.5 * (1.0 - dens - alpha[..., 0]) ** 2

    def g(self, x, mu):
        return torch.zeros(x.shape[:-1], dtype=DTYPE)

    def optimal_control(self, t, x, mu, zeta):
        return (1.0 - mu.density(x))[..., None] - zeta


# exp(300) ~ 2e130: its square still fits in float64
EXP_CAP = 300.0


class CrowdMotion(MfgProblem):
    """Drift = control, running cost |a|^2 + congestion (+ optional obstacle), g = exp(|x - x_T|^2)."""

    def __init__(self, *args, target=None, obstacle=None, terminal_coords=None, **kwargs):
        super().__init__(*args, **kwargs)
        self.target = np.asarray(target, dtype=float)
        self._target = torch.tensor(self.target, dtype=DTYPE)
        self.obstacle = obstacle  # dict(center, radius, weight) or None
        self.terminal_coords = terminal_coords  # indices entering g, None = all

    def b(self, t, x, mu, alpha):
        return alpha

    def obstacle_cost(self, x):
        if not self.obstacle:
            return torch.zeros(x.shape[:-1], dtype=DTYPE)
        c = torch.tensor(self.obstacle["center"], dtype=DTYPE)
        diff = x[..., : c.shape[0]] - c
        r2 = (diff * diff).sum(-1) / self.obstacle["radius"] ** 2
        return self.obstacle["weight"] * torch.exp(-r2)

    def f(self, t, x, mu, alpha):
        return (alpha * alpha).sum(-1) + interaction_cost(x, mu.samples) + self.obstacle_cost(x)

    def g(self, x, mu):
        diff = x - self._target
        if self.terminal_coords is not None:
            diff = diff[..., list(self.terminal_coords)]
        r2 = (diff * diff).sum(-1)
        # Past EXP_CAP the exponential is continued by its tangent line: g stays
        # finite (and squarable inside l_MKV) while still pulling outliers in.
        capped = r2.clamp(max=EXP_CAP)
        return torch.exp(capped) * (1.0 + (r2 - capped))

    def optimal_control(self, t, x, mu, zeta):
        return -0.5 * zeta


def _normalization_error(base: BaseDensity, cells: int = 20000) -> float:
    x = (np.arange(cells) + 0.5) / cells
    dens = np.exp(base.log_prob(torch.tensor(x, dtype=DTYPE)[:, None]).numpy())
    return abs(dens.mean() - 1.0)


def make_traffic_flow(grid: TimeGrid | None = None, sigma: float = 0.5, mu0_spec=None) -> TrafficFlow:
    grid = grid or TimeGrid(1.0, 50)
    mu0 = _ring_base(mu0_spec)
    if _normalization_error(mu0) > 1e-6:
        raise InvalidInputError("initial traffic density does not integrate to 1 on the ring")
    return TrafficFlow(
        "traffic", 1, grid, float(sigma), mu0, domain="ring",
        hamiltonian_tag="1/2(1-mu-b)^2 + b*zeta",
    )


def _ring_base(spec) -> BaseDensity:
    if spec is None:
        return SineRing(0.5, 1)
    if isinstance(spec, BaseDensity):
        base = spec
    else:
        base = base_from_dict(spec)
    if base.domain != "ring":
        raise InvalidInputError("traffic flow needs a ring density")
    return base


def _gaussian(spec, default_mean, default_std) -> BaseDensity:
    if spec is None:
        return GaussianBase(default_mean, default_std)
    if isinstance(spec, BaseDensity):
        return spec
    return base_from_dict(spec)


def make_crowd_motion(d: int = 2, x_T=None, sigma: float = math.sqrt(2.0), grid: TimeGrid | None = None,
                      mu0_spec=None) -> CrowdMotion:
    if d < 1:
        raise InvalidInputError("dimension must be positive")
    grid = grid or TimeGrid(1.0, 100)
    if d == 2:
        start, default_target = [-2.0, 0.0], [2.0, 0.0]
    else:
        start = [-2.0] * min(d, 2) + [0.0] * max(d - 2, 0)
        default_target = [2.0] * min(d, 2) + [0.0] * max(d - 2, 0)
    target = np.asarray(default_target if x_T is None else x_T, dtype=float)
    if target.shape != (d,):
        raise InvalidInputError(f"target must have {d} coordinates")
    mu0 = _gaussian(mu0_spec, start, [0.5] * d)
    tag = "crowd2d" if d == 2 else f"crowd{d}d"
    return CrowdMotion(
        tag, d, grid, float(sigma), mu0, hamiltonian_tag="|a|^2 + a*zeta + congestion",
        params={"x_T": target.tolist()}, target=target,
    )


def make_crowd_obstacle(grid: TimeGrid | None = None, sigma: float = math.sqrt(2.0), lam_obs: float = 5.0,
                        x_T=(4.0, 0.0), mu0_spec=None, center=(0.0, 0.0), radius: float = 1.0) -> CrowdMotion:
    if not lam_obs > 0:
        raise InvalidInputError("obstacle weight must be positive")
    grid = grid or TimeGrid(1.0, 20)
    mu0 = _gaussian(mu0_spec, [-4.0, 0.0], [0.1, 0.1])
    obstacle = {"center": [float(c) for c in center], "radius": float(radius), "weight": float(lam_obs)}
    return CrowdMotion(
        "obstacle", 2, grid, float(sigma), mu0, hamiltonian_tag="|a|^2 + a*zeta + congestion + obstacle",
        params={"x_T": list(map(float, x_T)), "obstacle": obstacle},
        target=np.asarray(x_T, dtype=float), obstacle=obstacle,
    )


def make_half_terminal(grid: TimeGrid | None = None, sigma: float = math.sqrt(2.0), target_x1: float = 4.0,
                       mu0_spec=None) -> CrowdMotion:
    grid = grid or TimeGrid(1.0, 20)
    mu0 = _gaussian(mu0_spec, [-4.0, 0.0], [0.1, 0.1])
    return CrowdMotion(
        "half_terminal", 2, grid, float(sigma), mu0, hamiltonian_tag="|a|^2 + a*zeta + congestion",
        params={"target_x1": float(target_x1)}, target=np.array([target_x1, 0.0]), terminal_coords=(0,),
    )


def problem_from_descriptor(desc: dict) -> MfgProblem:
    """Rebuild a problem from :meth:`MfgProblem.descriptor` output."""
    tag = desc["tag"]
    grid = TimeGrid(float(desc["T"]), int(desc["N"]))
    sigma = float(desc["sigma"])
    mu0 = base_from_dict(desc["mu0"])
    params = desc.get("params", {})
    if tag == "traffic":
        return make_traffic_flow(grid, sigma, mu0)
    if tag == "obstacle":
        ob = params["obstacle"]
        return make_crowd_obstacle(grid, sigma, ob["weight"], params["x_T"], mu0, ob["center"], ob["radius"])
    if tag == "half_terminal":
        return make_half_terminal(grid, sigma, params.get("target_x1", 4.0), mu0)
    if tag.startswith("crowd"):
        return make_crowd_motion(int(desc["d"]), params.get("x_T"), sigma, grid, mu0)
    raise InvalidInputError(f"unknown problem tag {tag!r}")


def brute_force_control(problem: MfgProblem, t, x, mu: MeasureView, zeta, span: float = 2.0,
                        resolution: float = 1e-4) -> torch.Tensor:
    """argmin over a control grid of f + b . zeta for one state; zooming grid search."""
    x = torch.as_tensor(x, dtype=DTYPE).reshape(1, -1)
    zeta = torch.as_tensor(zeta, dtype=DTYPE).reshape(1, -1)
    k = zeta.shape[-1]
    if k > 2:
        raise InvalidInputError("grid search only supports 1-D or 2-D controls")
    center = torch.zeros(k, dtype=DTYPE)
    half = span
    pts = 41 if k == 2 else 4001
    while True:
        # symmetric integer lattice so the centre is hit exactly
        axis = torch.arange(-(pts // 2), pts // 2 + 1, dtype=DTYPE) * (2 * half / (pts - 1))
        if k == 1:
            cand = center + axis[:, None]
        else:
            a, b = torch.meshgrid(axis, axis, indexing="ij")
            cand = center + torch.stack([a.reshape(-1), b.reshape(-1)], -1)
        xs = x.expand(cand.shape[0], -1)
        obj = problem.f(t, xs, mu, cand) + (problem.b(t, xs, mu, cand) * zeta).sum(-1)
        center = cand[torch.argmin(obj)]
        step = 2 * half / (pts - 1)
        if step <= resolution:
            return center
        half = 2 * step


def check_control_rule(problem: MfgProblem, t, x, mu: MeasureView, zeta, span: float = 2.0,
                       resolution: float = 1e-4) -> float:
    """Largest deviation between the closed-form control and a brute-force grid argmin."""
    x = torch.as_tensor(x, dtype=DTYPE).reshape(-1, problem.d)
    zeta = torch.as_tensor(zeta, dtype=DTYPE).reshape(x.shape[0], -1)
    closed = problem.optimal_control(t, x, mu, zeta)
    worst = 0.0
    for i in range(x.shape[0]):
        c = closed[i]
        brute = brute_force_control(problem, t, x[i], mu, zeta[i], span=span + float(c.abs().max()),
                                    resolution=resolution)
        worst = max(worst, float((brute - c).abs().max()))
    return worst
