"""Differentiable numerics substrate.

Parameters live in one flat float64 vector (:class:`ParamStore`) split into
named segments.  Networks read their weights as views of that vector, so the
gradient of any scalar loss with respect to every parameter is a single
reverse-mode sweep.  The tape itself is torch's autograd; this module fixes
the conventions around it (64-bit floats, flat ordering, error reporting,
initialisation, Adam) and supplies the finite-difference oracle used to check
it.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
import torch

from .rng import Stream

DTYPE = torch.float64


class InvalidInputError(ValueError):
    """Raised when an argument violates an operation's precondition."""


class NumericError(FloatingPointError):
    """A non-finite value appeared where a finite one is required."""

    def __init__(self, message: str, primitive: str | None = None):
        self.primitive = primitive
        if primitive:
            message = f"{message} (primitive: {primitive})"
        super().__init__(message)


@dataclass(frozen=True)
class ParamEntry:
    name: str
    shape: tuple
    init: str = "glorot"  # glorot | zero
    fan: tuple | None = None  # (fan_in, fan_out) override for glorot

    @property
    def size(self) -> int:
        return int(np.prod(self.shape)) if self.shape else 1


class ParamStore:
    """Flat parameter vector with named, disjoint, ordered segments."""

    def __init__(self, values, segments: dict, shapes: dict | None = None):
        self.values = torch.as_tensor(values, dtype=DTYPE)
        self._leaves = None
        self.segments = dict(segments)
        self.shapes = dict(shapes) if shapes else {k: (v[1],) for k, v in segments.items()}
        self._check_layout()

    def _check_layout(self):
        end = 0
        for name, (offset, length) in self.segments.items():
            if offset != end:
                raise InvalidInputError(f"segment {name!r} does not start at {end}")
            end = offset + length
        if end != self.values.numel():
            raise InvalidInputError(f"segments cover {end} values, store has {self.values.numel()}")

    def __len__(self) -> int:
        return self.values.numel()

    def __getitem__(self, name: str) -> torch.Tensor:
        if self._leaves is not None:
            return self._leaves[name]
        offset, length = self.segments[name]
        return self.values[offset:offset + length].view(self.shapes[name])

    def names(self) -> list[str]:
        return list(self.segments)

    def copy(self) -> "ParamStore":
        return ParamStore(self.values.detach().clone(), self.segments, self.shapes)

    def numpy(self) -> np.ndarray:
        return self.values.detach().numpy().copy()

    def assign(self, values) -> None:
        values = torch.as_tensor(values, dtype=DTYPE)
        if values.shape != self.values.shape:
            raise InvalidInputError("replacement vector has the wrong length")
        self.values = values

    def set_segment(self, name: str, value) -> None:
        offset, length = self.segments[name]
        new = self.values.detach().clone()
        new[offset:offset + length] = torch.as_tensor(value, dtype=DTYPE).reshape(-1)
        self.values = new

    def to_dict(self) -> dict:
        flat = self.numpy()
        return {
            name: {"shape": list(self.shapes[name]), "values": flat[o:o + n].tolist()}
            for name, (o, n) in self.segments.items()
        }

    @classmethod
    def from_dict(cls, data: dict) -> "ParamStore":
        segments, shapes, chunks, offset = {}, {}, [], 0
        for name, entry in data.items():
            vals = [float(v) for v in entry["values"]]
            shape = tuple(int(s) for s in entry["shape"])
            if int(np.prod(shape)) != len(vals):
                raise InvalidInputError(f"segment {name!r}: shape {shape} does not match {len(vals)} values")
            segments[name] = (offset, len(vals))
            shapes[name] = shape
            chunks.extend(vals)
            offset += len(vals)
        return cls(torch.tensor(chunks, dtype=DTYPE), segments, shapes)

    def __eq__(self, other) -> bool:
        return (
            isinstance(other, ParamStore)
            and self.segments == other.segments
            and torch.equal(self.values, other.values)
        )


def init_params(spec: Sequence[ParamEntry], seed: int) -> ParamStore:
    """Weights ~ U(-a, a) with a = sqrt(6 / (fan_in + fan_out)); everything else zero."""
    root = Stream(seed, "init")
    segments, shapes, chunks, offset = {}, {}, [], 0
    for entry in spec:
        if entry.name in segments:
            raise InvalidInputError(f"duplicate segment {entry.name!r}")
        if entry.init == "glorot":
            fan_in, fan_out = entry.fan or (entry.shape[-1], entry.shape[0])
            bound = math.sqrt(6.0 / (fan_in + fan_out))
            u = root.child(entry.name).uniform((entry.size,))
            chunk = (2.0 * u - 1.0) * bound
        elif entry.init == "zero":
            chunk = np.zeros(entry.size)
        else:
            raise InvalidInputError(f"unknown init {entry.init!r}")
        segments[entry.name] = (offset, entry.size)
        shapes[entry.name] = tuple(entry.shape)
        chunks.append(chunk)
        offset += entry.size
    values = np.concatenate(chunks) if chunks else np.zeros(0)
    return ParamStore(torch.tensor(values, dtype=DTYPE), segments, shapes)


def merge_specs(*specs: Sequence[ParamEntry]) -> list[ParamEntry]:
    return [e for s in specs for e in s]


_ACTIVATIONS = {"tanh": torch.tanh, "relu": torch.relu}


@dataclass
class Mlp:
    """Dense feedforward network whose weights are segments of a ParamStore.

    Layer ``i`` owns segments ``{prefix}.W{i}`` of shape (out, in) and
    ``{prefix}.b{i}``.  Optional ``masks`` (one 0/1 matrix per layer) turn it
    into an autoregressive conditioner.
    """

    layer_widths: tuple
    prefix: str
    store: ParamStore | None = None
    activation: str = "tanh"
    masks: list | None = field(default=None, repr=False)

    def __post_init__(self):
        self.layer_widths = tuple(int(w) for w in self.layer_widths)
        if len(self.layer_widths) < 2 or min(self.layer_widths) < 1:
            raise InvalidInputError("an Mlp needs at least two positive layer widths")
        if self.activation not in _ACTIVATIONS:
            raise InvalidInputError(f"unknown activation {self.activation!r}")

    @property
    def n_params(self) -> int:
        w = self.layer_widths
        return sum((w[i] + 1) * w[i + 1] for i in range(len(w) - 1))

    def param_spec(self, zero_last: bool = False) -> list[ParamEntry]:
        w = self.layer_widths
        spec = []
        last = len(w) - 2
        for i in range(len(w) - 1):
            init = "zero" if (zero_last and i == last) else "glorot"
            spec.append(ParamEntry(f"{self.prefix}.W{i}", (w[i + 1], w[i]), init))
            spec.append(ParamEntry(f"{self.prefix}.b{i}", (w[i + 1],), "zero"))
        return spec

    def __call__(self, x: torch.Tensor) -> torch.Tensor:
        return mlp_forward(self, x)


def mlp_forward(net: Mlp, x) -> torch.Tensor:
    """Evaluate ``net`` on a vector or a batch of row vectors."""
    x = torch.as_tensor(x, dtype=DTYPE)
    if x.shape[-1] != net.layer_widths[0]:
        raise InvalidInputError(
            f"input width {x.shape[-1]} does not match network input width {net.layer_widths[0]}"
        )
    act = _ACTIVATIONS[net.activation]
    store = net.store
    h = x
    n_layers = len(net.layer_widths) - 1
    for i in range(n_layers):
        w = store[f"{net.prefix}.W{i}"]
        if net.masks is not None:
            w = w * net.masks[i]
        h = torch.nn.functional.linear(h, w, store[f"{net.prefix}.b{i}"])
        if i < n_layers - 1:
            h = act(h)
    return h


def _first_bad_primitive(loss_fn, params: ParamStore) -> str:
    leaf = params.values.detach().clone().requires_grad_(True)
    saved = params.values
    params.values = leaf
    try:
        with warnings.catch_warnings():
            # anomaly mode announces itself; here it is the point
            warnings.simplefilter("ignore", UserWarning)
            ctx = torch.autograd.detect_anomaly(check_nan=True)
        with ctx:
            loss = loss_fn(params)
            if not torch.isfinite(loss):
                return _grad_fn_name(loss)
            torch.autograd.grad(loss, leaf)
    except RuntimeError as exc:
        msg = str(exc)
        start = msg.find("'")
        return msg[start + 1:msg.find("'", start + 1)] if start >= 0 else msg
    finally:
        params.values = saved
    return "unknown"


def _grad_fn_name(t: torch.Tensor) -> str:
    # walk back to the earliest non-finite node we can see
    fn = t.grad_fn
    return type(fn).__name__ if fn is not None else "unknown"


def grad(loss_fn: Callable[[ParamStore], torch.Tensor], params: ParamStore,
         return_loss: bool = False):
    """Gradient of a scalar loss with respect to every parameter of ``params``.

    ``loss_fn`` receives the store and must read parameters through it.  The
    result is ordered like ``params.values``.
    """
    # one leaf per segment keeps the backward pass from scattering into a
    # full-length buffer for every weight read
    flat = params.values.detach()
    leaves = {
        name: flat[o:o + n].view(params.shapes[name]).clone().requires_grad_(True)
        for name, (o, n) in params.segments.items()
    }
    params._leaves = leaves
    try:
        loss = loss_fn(params)
        if loss.dim() != 0:
            raise InvalidInputError("loss_fn must return a scalar")
        names = list(leaves)
        if loss.requires_grad:
            parts = torch.autograd.grad(loss, [leaves[k] for k in names], allow_unused=True)
        else:
            parts = [None] * len(names)
        g = torch.cat([
            (torch.zeros_like(leaves[k]) if p is None else p).reshape(-1) for k, p in zip(names, parts)
        ]) if names else torch.zeros(0, dtype=DTYPE)
    finally:
        params._leaves = None
    if not (torch.isfinite(loss) and torch.isfinite(g).all()):
        raise NumericError("non-finite value in loss or gradient", _first_bad_primitive(loss_fn, params))
    g = g.detach()
    return (g, loss.detach()) if return_loss else g


def fd_check(loss_fn, params: ParamStore, eps: float = 1e-5,
             indices: Sequence[int] | None = None) -> float:
    """Max over parameters of |grad_i - fd_i| / max(1, |fd_i|) with central differences.

    ``indices`` restricts the comparison to a subset of coordinates.
    """
    if not eps > 0:
        raise InvalidInputError("eps must be positive")
    g = grad(loss_fn, params)
    base = params.values.detach().clone()
    idx = range(len(params)) if indices is None else indices
    worst = 0.0
    try:
        with torch.no_grad():
            for i in idx:
                plus = base.clone()
                plus[i] += eps
                params.values = plus
                lp = float(loss_fn(params))
                minus = base.clone()
                minus[i] -= eps
                params.values = minus
                lm = float(loss_fn(params))
                fd = (lp - lm) / (2.0 * eps)
                worst = max(worst, abs(float(g[i]) - fd) / max(1.0, abs(fd)))
    finally:
        params.values = base
    return worst


@dataclass
class AdamState:
    m: torch.Tensor
    v: torch.Tensor
    step: int = 0

    @classmethod
    def zeros(cls, n: int) -> "AdamState":
        return cls(torch.zeros(n, dtype=DTYPE), torch.zeros(n, dtype=DTYPE), 0)

    def copy(self) -> "AdamState":
        return AdamState(self.m.clone(), self.v.clone(), self.step)


@dataclass(frozen=True)
class AdamHyper:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8


def adam_step(params: ParamStore, grads: torch.Tensor, state: AdamState | None,
              hyper: AdamHyper = AdamHyper()):
    """One bias-corrected Adam update; returns ``(params, state)``."""
    grads = torch.as_tensor(grads, dtype=DTYPE).detach()
    if grads.shape != params.values.shape:
        raise InvalidInputError("gradient length does not match parameter count")
    if not torch.isfinite(grads).all():
        raise NumericError("non-finite gradient passed to adam_step")
    if state is None:
        state = AdamState.zeros(len(params))
    b1, b2 = hyper.beta1, hyper.beta2
    step = state.step + 1
    m = b1 * state.m + (1.0 - b1) * grads
    v = b2 * state.v + (1.0 - b2) * grads * grads
    m_hat = m / (1.0 - b1**step)
    v_hat = v / (1.0 - b2**step)
    new = params.values.detach() - hyper.lr * m_hat / (torch.sqrt(v_hat) + hyper.eps)
    if not torch.isfinite(new).all():
        raise NumericError("adam_step produced non-finite parameters")
    params.values = new
    return params, AdamState(m, v, step)
