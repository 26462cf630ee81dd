"""Time-indexed normalizing flow for the population density path.

The flow is a chain of invertible blocks grouped per time step.  Pushing the
base density (the problem's initial law) through the first ``n`` groups gives
the marginal at step ``n``; pulling a point back through the same prefix and
accumulating inverse log-determinants gives its exact log-density.
"""

from __future__ import annotations

import math
from typing import Sequence

import numpy as np
import torch

from .diffcore import (
    DTYPE,
    InvalidInputError,
    Mlp,
    NumericError,
    ParamEntry,
    ParamStore,
    init_params,
)
from .rng import Stream

LOG_2PI = math.log(2.0 * math.pi)
LOG_SCALE_CLAMP = 5.0


# ---------------------------------------------------------------------------
# base densities


class BaseDensity:
    kind = "base"
    domain = "euclidean"
    d = 1

    def log_prob(self, x: torch.Tensor) -> torch.Tensor:
        raise NotImplementedError

    def sample(self, stream: Stream, m: int) -> torch.Tensor:
        raise NotImplementedError

    def to_dict(self) -> dict:
        raise NotImplementedError

    def box(self, width: float = 6.0) -> tuple[np.ndarray, np.ndarray]:
        return np.zeros(self.d), np.ones(self.d)


class GaussianBase(BaseDensity):
    kind = "gaussian"

    def __init__(self, mean, std):
        self.mean = np.atleast_1d(np.asarray(mean, dtype=float))
        self.std = np.broadcast_to(np.asarray(std, dtype=float), self.mean.shape).copy()
        if np.any(self.std <= 0):
            raise InvalidInputError("standard deviations must be positive")
        self.d = self.mean.size
        self._mean = torch.tensor(self.mean, dtype=DTYPE)
        self._std = torch.tensor(self.std, dtype=DTYPE)
        self._norm = -0.5 * self.d * LOG_2PI - float(np.log(self.std).sum())

    def log_prob(self, x):
        z = (x - self._mean) / self._std
        return self._norm - 0.5 * (z * z).sum(-1)

    def sample(self, stream, m):
        z = stream.normal((m, self.d))
        return torch.tensor(self.mean + self.std * z, dtype=DTYPE)

    def box(self, width=6.0):
        return self.mean - width * self.std, self.mean + width * self.std

    def to_dict(self):
        return {"kind": self.kind, "mean": self.mean.tolist(), "std": self.std.tolist()}


class UniformRing(BaseDensity):
    kind = "uniform_ring"
    domain = "ring"

    def log_prob(self, x):
        return torch.zeros(x.shape[:-1], dtype=DTYPE)

    def sample(self, stream, m):
        return torch.tensor(stream.uniform((m, 1)), dtype=DTYPE)

    def density_np(self, x):
        return np.ones_like(np.asarray(x, dtype=float))

    def to_dict(self):
        return {"kind": self.kind}


class SineRing(BaseDensity):
    """Density 1 + a sin(2 pi k x) on the unit ring (|a| < 1, integer k >= 1)."""

    kind = "sine_ring"
    domain = "ring"

    def __init__(self, amplitude: float = 0.5, k: int = 1):
        if not abs(amplitude) < 1:
            raise InvalidInputError("sine amplitude must satisfy |a| < 1 for a positive density")
        if int(k) != k or k < 1:
            raise InvalidInputError("sine wavenumber must be a positive integer")
        self.amplitude = float(amplitude)
        self.k = int(k)

    def density_np(self, x):
        return 1.0 + self.amplitude * np.sin(2.0 * np.pi * self.k * np.asarray(x, dtype=float))

    def log_prob(self, x):
        return torch.log1p(self.amplitude * torch.sin(2.0 * math.pi * self.k * x[..., 0]))

    def _cdf(self, x):
        w = 2.0 * np.pi * self.k
        return x + self.amplitude * (1.0 - np.cos(w * x)) / w

    def sample(self, stream, m):
        u = stream.uniform((m,))
        lo, hi = np.zeros(m), np.ones(m)
        for _ in range(60):
            mid = 0.5 * (lo + hi)
            below = self._cdf(mid) < u
            lo = np.where(below, mid, lo)
            hi = np.where(below, hi, mid)
        return torch.tensor(0.5 * (lo + hi), dtype=DTYPE)[:, None]

    def to_dict(self):
        return {"kind": self.kind, "amplitude": self.amplitude, "k": self.k}


class WrappedGaussianMixture(BaseDensity):
    """Mixture of Gaussians wrapped onto the unit ring."""

    kind = "wrapped_gaussian_mixture"
    domain = "ring"
    _WRAPS = 4

    def __init__(self, means, stds, weights=None):
        self.means = np.atleast_1d(np.asarray(means, dtype=float))
        self.stds = np.broadcast_to(np.asarray(stds, dtype=float), self.means.shape).copy()
        w = np.ones_like(self.means) if weights is None else np.asarray(weights, dtype=float)
        if np.any(w < 0) or w.sum() <= 0 or np.any(self.stds <= 0):
            raise InvalidInputError("mixture weights must be non-negative and stds positive")
        self.weights = w / w.sum()

    def density_np(self, x):
        x = np.asarray(x, dtype=float)[..., None, None]
        shifts = np.arange(-self._WRAPS, self._WRAPS + 1)[:, None]
        z = (x + shifts - self.means) / self.stds
        dens = np.exp(-0.5 * z * z) / (self.stds * math.sqrt(2 * math.pi))
        return (dens * self.weights).sum(axis=(-1, -2))

    def log_prob(self, x):
        xs = x[..., 0][..., None, None]
        shifts = torch.arange(-self._WRAPS, self._WRAPS + 1, dtype=DTYPE)[:, None]
        mu = torch.tensor(self.means, dtype=DTYPE)
        sd = torch.tensor(self.stds, dtype=DTYPE)
        z = (xs + shifts - mu) / sd
        logc = torch.log(torch.tensor(self.weights, dtype=DTYPE)) - torch.log(sd) - 0.5 * LOG_2PI
        return torch.logsumexp((logc - 0.5 * z * z).reshape(*x.shape[:-1], -1), dim=-1)

    def sample(self, stream, m):
        u = stream.child("component").uniform((m,))
        comp = np.searchsorted(np.cumsum(self.weights), u, side="right").clip(0, len(self.weights) - 1)
        z = stream.child("normal").normal((m,))
        x = np.mod(self.means[comp] + self.stds[comp] * z, 1.0)
        return torch.tensor(x, dtype=DTYPE)[:, None]

    def to_dict(self):
        return {
            "kind": self.kind,
            "means": self.means.tolist(),
            "stds": self.stds.tolist(),
            "weights": self.weights.tolist(),
        }


def base_from_dict(spec: dict) -> BaseDensity:
    spec = dict(spec)
    kind = spec.pop("kind")
    if kind == "gaussian":
        return GaussianBase(spec["mean"], spec["std"])
    if kind == "uniform_ring":
        return UniformRing()
    if kind == "sine_ring":
        return SineRing(spec.get("amplitude", 0.5), spec.get("k", 1))
    if kind == "wrapped_gaussian_mixture":
        return WrappedGaussianMixture(spec["means"], spec["stds"], spec.get("weights"))
    raise InvalidInputError(f"unknown base density kind {kind!r}")


# ---------------------------------------------------------------------------
# blocks


class FlowBlock:
    kind = "block"

    def param_spec(self) -> list[ParamEntry]:
        return []

    def bind(self, store: ParamStore) -> None:
        self.store = store

    def forward(self, x):
        raise NotImplementedError

    def inverse(self, y):
        raise NotImplementedError


class PermuteBlock(FlowBlock):
    kind = "permute"

    def __init__(self, perm: Sequence[int]):
        self.perm = torch.as_tensor(list(perm), dtype=torch.long)
        self.inv = torch.argsort(self.perm)

    def forward(self, x):
        return x[..., self.perm], torch.zeros(x.shape[:-1], dtype=DTYPE)

    def inverse(self, y):
        return y[..., self.inv], torch.zeros(y.shape[:-1], dtype=DTYPE)


def made_masks(d: int, hidden: int) -> list[torch.Tensor]:
    """Autoregressive masks for a one-hidden-layer conditioner with 2*d outputs.

    Output ``i`` (and ``d + i``) may only see inputs ``< i``.
    """
    in_deg = np.arange(1, d + 1)
    hid_deg = np.arange(hidden) % max(d - 1, 1) + 1
    out_deg = np.concatenate([in_deg, in_deg])
    m1 = (hid_deg[:, None] >= in_deg[None, :]).astype(float)
    m2 = (out_deg[:, None] > hid_deg[None, :]).astype(float)
    return [torch.tensor(m1, dtype=DTYPE), torch.tensor(m2, dtype=DTYPE)]


class MafAffineBlock(FlowBlock):
    """Masked autoregressive affine block.

    forward (sampling direction): y_i = x_i * exp(a_i(y_<i)) + m_i(y_<i), computed
    in ``d`` sequential passes.  inverse (density direction) is a single pass.
    """

    kind = "maf_affine"

    def __init__(self, d: int, prefix: str, hidden: int = 32):
        self.d = d
        self.prefix = prefix
        self.net = Mlp((d, hidden, 2 * d), prefix, activation="tanh", masks=made_masks(d, hidden))

    def param_spec(self):
        return self.net.param_spec(zero_last=True)

    def bind(self, store):
        self.store = store
        self.net.store = store

    def conditioner(self, z):
        out = self.net(z)
        shift, log_scale = out[..., : self.d], out[..., self.d:]
        log_scale = torch.clamp(log_scale, -LOG_SCALE_CLAMP, LOG_SCALE_CLAMP)
        if not torch.isfinite(out).all():
            raise NumericError("non-finite conditioner output", f"{self.prefix}")
        return shift, log_scale

    def forward(self, x):
        # The hidden pre-activation only ever sees y_<i, so it is grown by one
        # rank-1 term per coordinate instead of re-running the conditioner on
        # the full vector d times.
        d, p, s = self.d, self.prefix, self.store
        w_in = s[f"{p}.W0"] * self.net.masks[0]
        w_out = (s[f"{p}.W1"] * self.net.masks[1]).view(2, d, -1).transpose(0, 1)
        b_out = s[f"{p}.b1"].view(2, d).T
        pre = s[f"{p}.b0"].expand(*x.shape[:-1], w_in.shape[0])
        cols, log_scales = [], []
        for i in range(d):
            shift, log_scale = torch.nn.functional.linear(torch.tanh(pre), w_out[i], b_out[i]).unbind(-1)
            log_scale = torch.clamp(log_scale, -LOG_SCALE_CLAMP, LOG_SCALE_CLAMP)
            y_i = x[..., i] * torch.exp(log_scale) + shift
            pre = pre + y_i[..., None] * w_in[:, i]
            cols.append(y_i)
            log_scales.append(log_scale)
        y = torch.stack(cols, -1)
        if not torch.isfinite(y).all():
            raise NumericError("non-finite conditioner output", f"{self.prefix}")
        return y, torch.stack(log_scales, -1).sum(-1)

    def inverse(self, y):
        shift, log_scale = self.conditioner(y)
        return (y - shift) * torch.exp(-log_scale), -log_scale.sum(-1)


_MIN_BIN = 1e-3
_MIN_DERIV = 1e-3
_DERIV_OFFSET = math.log(math.expm1(1.0 - _MIN_DERIV))


class CircularSplineBlock(FlowBlock):
    """Monotone rational-quadratic spline on the unit circle, one per coordinate.

    The spline fixes 0 and 1 and uses the same slope at both ends, so composed
    with a rotation it is a smooth bijection of the circle.  All-zero
    parameters give the identity.
    """

    kind = "circular_spline"

    def __init__(self, d: int, prefix: str, knots: int = 16):
        self.d = d
        self.prefix = prefix
        self.K = knots

    def param_spec(self):
        p, d, k = self.prefix, self.d, self.K
        return [
            ParamEntry(f"{p}.widths", (d, k), "zero"),
            ParamEntry(f"{p}.heights", (d, k), "zero"),
            ParamEntry(f"{p}.derivs", (d, k), "zero"),
            ParamEntry(f"{p}.shift", (d,), "zero"),
        ]

    def _knots(self):
        s, k = self.store, self.K
        w = _MIN_BIN + (1 - k * _MIN_BIN) * torch.softmax(s[f"{self.prefix}.widths"], -1)
        h = _MIN_BIN + (1 - k * _MIN_BIN) * torch.softmax(s[f"{self.prefix}.heights"], -1)
        delta = _MIN_DERIV + torch.nn.functional.softplus(s[f"{self.prefix}.derivs"] + _DERIV_OFFSET)
        delta = torch.cat([delta, delta[:, :1]], dim=-1)  # periodic slope
        zero = torch.zeros(self.d, 1, dtype=DTYPE)
        xk = torch.cat([zero, torch.cumsum(w, -1)], -1)
        yk = torch.cat([zero, torch.cumsum(h, -1)], -1)
        xk = torch.cat([xk[:, :-1], torch.ones(self.d, 1, dtype=DTYPE)], -1)
        yk = torch.cat([yk[:, :-1], torch.ones(self.d, 1, dtype=DTYPE)], -1)
        return xk, yk, delta

    @staticmethod
    def _gather(table, idx):
        return torch.gather(table.expand(idx.shape[0], -1), 1, idx)

    def _spline(self, x, inverse):
        xk, yk, delta = self._knots()
        cols_out, ld_out = [], []
        for j in range(self.d):
            v = x[:, j:j + 1]
            edges = (yk if inverse else xk)[j]
            idx = (torch.searchsorted(edges.detach(), v.detach().contiguous(), right=True) - 1).clamp(0, self.K - 1)
            x0 = self._gather(xk[j:j + 1], idx)
            x1 = self._gather(xk[j:j + 1], idx + 1)
            y0 = self._gather(yk[j:j + 1], idx)
            y1 = self._gather(yk[j:j + 1], idx + 1)
            d0 = self._gather(delta[j:j + 1], idx)
            d1 = self._gather(delta[j:j + 1], idx + 1)
            w, h = x1 - x0, y1 - y0
            s = h / w
            c = d0 + d1 - 2 * s
            if inverse:
                dy = v - y0
                qa = h * (s - d0) + dy * c
                qb = h * d0 - dy * c
                qc = -s * dy
                disc = qb * qb - 4 * qa * qc
                if (disc < -1e-12).any():
                    raise NumericError("circular spline inversion failed", self.prefix)
                xi = (2 * qc) / (-qb - torch.sqrt(disc.clamp_min(0.0)))
                out = x0 + xi * w
            else:
                xi = (v - x0) / w
                out = y0 + h * (s * xi * xi + d0 * xi * (1 - xi)) / (s + c * xi * (1 - xi))
            one = xi * (1 - xi)
            num = s * s * (d1 * xi * xi + 2 * s * one + d0 * (1 - xi) ** 2)
            den = (s + c * one) ** 2
            ld = torch.log(num) - torch.log(den)
            cols_out.append(out)
            ld_out.append(-ld if inverse else ld)
        return torch.cat(cols_out, -1), torch.cat(ld_out, -1).sum(-1)

    def forward(self, x):
        _check_ring(x, self.prefix)
        y, ld = self._spline(x, inverse=False)
        return wrap01(y + self.store[f"{self.prefix}.shift"]), ld

    def inverse(self, y):
        _check_ring(y, self.prefix)
        return self._spline(wrap01(y - self.store[f"{self.prefix}.shift"]), inverse=True)


def wrap01(x: torch.Tensor) -> torch.Tensor:
    x = torch.remainder(x, 1.0)
    return torch.where(x >= 1.0, x - 1.0, x)


def _check_ring(x, where):
    if (x < 0).any() or (x >= 1).any():
        raise InvalidInputError(f"{where}: ring blocks require points in [0, 1)")


# ---------------------------------------------------------------------------
# the flow


class TimeIndexedFlow:
    """Blocks grouped per time step; the prefix through group ``n`` realises step ``n``."""

    def __init__(self, base: BaseDensity, n_steps: int, blocks: list[FlowBlock],
                 blocks_per_step: int, store: ParamStore):
        if len(blocks) != n_steps * blocks_per_step:
            raise InvalidInputError("block count must equal n_steps * blocks_per_step")
        self.base = base
        self.n_steps = n_steps
        self.blocks = blocks
        self.blocks_per_step = blocks_per_step
        self.store = store
        for b in blocks:
            b.bind(store)

    @property
    def d(self) -> int:
        return self.base.d

    @property
    def domain(self) -> str:
        return self.base.domain

    def _check_step(self, n):
        if not 0 <= n <= self.n_steps:
            raise InvalidInputError(f"step {n} outside 0..{self.n_steps}")

    def group(self, n: int) -> list[FlowBlock]:
        """Blocks that carry step n-1 to step n (n >= 1)."""
        b = self.blocks_per_step
        return self.blocks[(n - 1) * b: n * b]

    def prefix_forward(self, x, n):
        self._check_step(n)
        logdet = torch.zeros(x.shape[:-1], dtype=DTYPE)
        for block in self.blocks[: n * self.blocks_per_step]:
            x, ld = block.forward(x)
            logdet = logdet + ld
        return x, logdet

    def prefix_inverse(self, y, n):
        self._check_step(n)
        logdet = torch.zeros(y.shape[:-1], dtype=DTYPE)
        for block in reversed(self.blocks[: n * self.blocks_per_step]):
            y, ld = block.inverse(y)
            logdet = logdet + ld
        return y, logdet

    def logprob_at_step(self, n: int, x) -> torch.Tensor:
        x = _as_points(x, self.d)
        z, logdet = self.prefix_inverse(x, n)
        return self.base.log_prob(z) + logdet

    def logprob_steps(self, states: Sequence[torch.Tensor], steps: Sequence[int] | None = None) -> torch.Tensor:
        """Log-densities of ``states[i]`` under step ``steps[i]`` (default: steps 1..len(states)).

        Points from all steps share one inverse pass per block, so the cost is
        one batched call per block instead of one per (step, block) pair.
        Returns a tensor shaped (len(states), M).
        """
        steps = list(range(1, len(states) + 1)) if steps is None else [int(n) for n in steps]
        if len(steps) != len(states):
            raise InvalidInputError("steps and states differ in length")
        if not steps:
            raise InvalidInputError("need at least one step")
        if any(b <= a for a, b in zip(steps, steps[1:])) or steps[0] < 0:
            raise InvalidInputError("steps must be strictly increasing and non-negative")
        self._check_step(steps[-1])
        pending = dict(zip(steps, states))
        cur, acc, counts = None, None, []
        for n in range(steps[-1], -1, -1):
            if n in pending:
                x = pending[n]
                counts.append(x.shape[0])
                zeros = torch.zeros(x.shape[0], dtype=DTYPE)
                cur = x if cur is None else torch.cat([cur, x], 0)
                acc = zeros if acc is None else torch.cat([acc, zeros], 0)
            if n == 0:
                break
            for block in reversed(self.group(n)):
                cur, ld = block.inverse(cur)
                acc = acc + ld
        lp = self.base.log_prob(cur) + acc
        # rows were appended from the last step down to the first
        pieces = torch.split(lp, counts)
        return torch.stack(list(reversed(pieces)), 0)

    def sample_at_step(self, n: int, m: int, stream: Stream) -> torch.Tensor:
        if m < 1:
            raise InvalidInputError("need at least one sample")
        x0 = self.base.sample(stream, m)
        return self.prefix_forward(x0, n)[0]

    def sample_path(self, m: int, stream: Stream) -> list[torch.Tensor]:
        """Samples at every step 0..N from one set of base draws."""
        x = self.base.sample(stream, m)
        out = [x]
        for n in range(1, self.n_steps + 1):
            for block in self.group(n):
                x, _ = block.forward(x)
            out.append(x)
        return out

    def describe(self) -> dict:
        return {
            "base": self.base.to_dict(),
            "n_steps": self.n_steps,
            "blocks_per_step": self.blocks_per_step,
            "block_kinds": sorted({b.kind for b in self.blocks}),
        }


def _as_points(x, d):
    x = torch.as_tensor(x, dtype=DTYPE)
    if x.dim() == 1:
        x = x[:, None] if d == 1 else x[None, :]
    if x.shape[-1] != d:
        raise InvalidInputError(f"points have dimension {x.shape[-1]}, flow has {d}")
    return x


def build_flow(base: BaseDensity, n_steps: int, seed: int = 0, blocks_per_step: int | None = None,
               hidden: int = 32, knots: int = 16) -> TimeIndexedFlow:
    """Flow with an identity initialisation at every block.

    Euclidean bases get (permute, maf_affine) x B groups (B = 2 for d >= 2, a
    single affine block in d = 1); ring bases get circular splines.
    """
    d = base.d
    blocks: list[FlowBlock] = []
    if base.domain == "ring":
        per = blocks_per_step or 1
        for n in range(n_steps):
            for b in range(per):
                blocks.append(CircularSplineBlock(d, f"flow.s{n}.b{b}", knots))
    else:
        per_pairs = blocks_per_step or (2 if d >= 2 else 1)
        per = per_pairs * (2 if d >= 2 else 1)
        reverse = list(range(d - 1, -1, -1))
        for n in range(n_steps):
            for b in range(per_pairs):
                if d >= 2:
                    blocks.append(PermuteBlock(reverse))
                blocks.append(MafAffineBlock(d, f"flow.s{n}.b{b}", hidden))
    spec = [e for blk in blocks for e in blk.param_spec()]
    store = init_params(spec, seed)
    return TimeIndexedFlow(base, n_steps, blocks, per, store)


# ---------------------------------------------------------------------------
# losses


def dis_loss(flow: TimeIndexedFlow, states, samples=None, steps=None) -> torch.Tensor:
    """Negative log-likelihood of simulated marginals, averaged over steps and samples.

    ``states`` is either a TrajectoryBatch or a tensor shaped (M, N+1, d);
    step 0 is the base law and is skipped.  ``samples`` optionally selects a
    subset of rows and ``steps`` a subset of time steps, which keeps the
    estimate unbiased when drawn uniformly.
    """
    X = states.states if hasattr(states, "states") else states
    X = X.detach()
    if samples is not None:
        X = X[samples]
    if flow.domain == "ring":
        _check_ring(X, "dis_loss")
    steps = list(range(1, X.shape[1])) if steps is None else sorted(int(n) for n in steps)
    if steps and steps[0] < 1:
        raise InvalidInputError("dis_loss steps start at 1")
    lp = flow.logprob_steps([X[:, n] for n in steps], steps)
    return -lp.mean()


def terminal_loss(flow: TimeIndexedFlow, problem, m: int, stream: Stream) -> torch.Tensor:
    """Mean squared terminal value function at flow samples of the final step."""
    x = flow.sample_at_step(flow.n_steps, m, stream)
    view = MeasureView(x.detach())
    g = problem.g(x, view)
    return (g * g).mean()


class MeasureView:
    """What the coefficient functions see of a marginal law: samples plus an optional log-density."""

    def __init__(self, samples: torch.Tensor, logpdf=None):
        self.samples = samples
        self.logpdf = logpdf

    def density(self, x: torch.Tensor) -> torch.Tensor:
        if self.logpdf is None:
            raise InvalidInputError("this measure view carries no density callback")
        return torch.exp(self.logpdf(x))


class TabulatedRingDensity:
    """Periodic piecewise-linear interpolant of a 1-D ring log-density (differentiable in x)."""

    def __init__(self, values: torch.Tensor):
        self.values = values.detach()
        self.n = values.shape[0]

    def __call__(self, x):
        u = torch.remainder(x[..., 0], 1.0) * self.n
        i0 = torch.floor(u).long().clamp(0, self.n - 1)
        frac = u - i0.to(DTYPE)
        v0 = self.values[i0]
        v1 = self.values[(i0 + 1) % self.n]
        return torch.log(v0 + frac * (v1 - v0))


def marginal_views(flow: TimeIndexedFlow, m: int, stream: Stream, table_size: int = 1024) -> list[MeasureView]:
    """Frozen per-step views (steps 0..N) used while the flow is held fixed."""
    with torch.no_grad():
        samples = flow.sample_path(m, stream)
        logpdfs = [None] * (flow.n_steps + 1)
        if flow.domain == "ring" and flow.d == 1:
            grid = (torch.arange(table_size, dtype=DTYPE) / table_size)[:, None]
            lp = flow.logprob_steps([grid] * flow.n_steps)
            logpdfs[0] = TabulatedRingDensity(torch.exp(flow.base.log_prob(grid)))
            for n in range(1, flow.n_steps + 1):
                logpdfs[n] = TabulatedRingDensity(torch.exp(lp[n - 1]))
    return [MeasureView(s, f) for s, f in zip(samples, logpdfs)]
