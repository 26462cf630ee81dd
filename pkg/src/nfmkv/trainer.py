"""Alternating optimisation of the value networks and the density flow.

Each outer iteration first fits the value networks against the frozen flow
(fresh Brownian paths every epoch), then re-simulates a trace with the frozen
value networks and fits the flow to it.  Random draws are keyed by epoch
counters, so a run restored from a checkpoint continues bit for bit.
"""

from __future__ import annotations

import json
import logging
import math
import os
import time
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np
import torch

from .diffcore import DTYPE, AdamHyper, AdamState, InvalidInputError, ParamStore, adam_step, grad
from .flows import TimeIndexedFlow, build_flow, dis_loss, marginal_views, terminal_loss
from .problems import MfgProblem, problem_from_descriptor
from .rng import Stream
from .sde import (
    DivergedSimulationError,
    ValueNets,
    gen_wiener,
    mkv_loss,
    rollout_value,
    simulate_forward,
)

log = logging.getLogger(__name__)

CHECKPOINT_VERSION = "nfmkv-checkpoint/1"


@dataclass
class TrainConfig:
    M: int = 512
    M_mu: int = 512
    outer_iters: int = 30
    value_epochs: int = 200
    flow_epochs: int = 200
    lr_value: float = 1e-3
    lr_flow: float = 1e-3
    conv_tol: float = 1e-3
    conv_window: int = 3
    seed: int = 0
    warmup_steps: int = 200
    flow_batch: int | None = None
    resimulate_every: int | None = None
    value_hidden: tuple = (32, 32)
    flow_hidden: int = 32
    knots: int = 16
    blocks_per_step: int | None = None
    flow_steps: int | None = None
    grad_clip: float | None = None
    clip_per_loss: bool = False
    lr_decay: float = 1.0

    def __post_init__(self):
        self.value_hidden = tuple(int(h) for h in self.value_hidden)
        counts = ("M", "M_mu", "outer_iters", "value_epochs", "flow_epochs", "conv_window")
        for name in counts:
            if int(getattr(self, name)) < 1:
                raise InvalidInputError(f"{name} must be at least 1")
        if self.conv_window < 2:
            raise InvalidInputError("conv_window must be at least 2")
        if not (self.lr_value > 0 and self.lr_flow > 0):
            raise InvalidInputError("learning rates must be positive")
        if not self.conv_tol > 0:
            raise InvalidInputError("conv_tol must be positive")
        if self.warmup_steps < 0:
            raise InvalidInputError("warmup_steps must be non-negative")
        if self.flow_batch is not None and not 1 <= self.flow_batch <= self.M:
            raise InvalidInputError("flow_batch must lie in 1..M")
        if self.flow_steps is not None and self.flow_steps < 1:
            raise InvalidInputError("flow_steps must be at least 1")
        if self.grad_clip is not None and not self.grad_clip > 0:
            raise InvalidInputError("grad_clip must be positive")
        if not 0 < self.lr_decay <= 1:
            raise InvalidInputError("lr_decay must lie in (0, 1]")
        if self.resimulate_every is not None and self.resimulate_every < 1:
            raise InvalidInputError("resimulate_every must be at least 1")

    def to_dict(self) -> dict:
        out = asdict(self)
        out["value_hidden"] = list(self.value_hidden)
        return out

    @classmethod
    def from_dict(cls, data: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise InvalidInputError(f"unknown training fields: {sorted(unknown)}")
        return cls(**data)


class TrainingError(RuntimeError):
    def __init__(self, message: str, checkpoint_path: str | None = None):
        self.checkpoint_path = checkpoint_path
        if checkpoint_path:
            message = f"{message}; last checkpoint: {checkpoint_path}"
        super().__init__(message)


class CheckpointError(ValueError):
    """Malformed or unsupported checkpoint file."""

    def __init__(self, message: str, field: str | None = None):
        self.field = field
        super().__init__(f"{message}" + (f" (field: {field})" if field else ""))


@dataclass
class TrainState:
    """Everything needed to continue a run: models, optimiser moments, counters, history."""

    problem: MfgProblem
    config: TrainConfig
    flow: TimeIndexedFlow
    valuenets: ValueNets
    value_opt: AdamState
    flow_opt: AdamState
    outer: int = 0
    value_epoch: int = 0
    flow_epoch: int = 0
    history: list = field(default_factory=list)
    value_curve: list = field(default_factory=list)
    flow_curve: list = field(default_factory=list)
    warmup: dict = field(default_factory=dict)


@dataclass
class TrainReport:
    history: list
    value_curve: list
    flow_curve: list
    warmup: dict
    converged: bool
    outer_done: int
    timings: list = field(default_factory=list)

    def to_dict(self, with_timings: bool = False) -> dict:
        out = {
            "history": self.history,
            "value_curve": self.value_curve,
            "flow_curve": self.flow_curve,
            "warmup": self.warmup,
            "converged": self.converged,
            "outer_done": self.outer_done,
        }
        if with_timings:
            out["timings"] = self.timings
        return out


def configure_threads():
    """NFMKV_THREADS > 1 allows intra-op parallelism; 1 (default) keeps runs bitwise reproducible."""
    n = int(os.environ.get("NFMKV_THREADS", "1"))
    torch.set_num_threads(max(n, 1))
    return n


def init_state(problem: MfgProblem, config: TrainConfig) -> TrainState:
    flow = build_flow(problem.mu0, problem.grid.N, seed=config.seed, blocks_per_step=config.blocks_per_step,
                      hidden=config.flow_hidden, knots=config.knots)
    nets = ValueNets(problem.d, problem.grid.N, hidden=config.value_hidden, seed=config.seed + 1)
    return TrainState(problem, config, flow, nets, AdamState.zeros(len(nets.store)),
                      AdamState.zeros(len(flow.store)))


# ---------------------------------------------------------------------------
# phases


def clip_norm(g: torch.Tensor, max_norm: float | None) -> torch.Tensor:
    """Rescale ``g`` to Euclidean norm ``max_norm`` when it is longer."""
    if max_norm is None:
        return g
    norm = float(torch.linalg.vector_norm(g))
    return g * (max_norm / norm) if norm > max_norm else g


def value_loss(problem, valuenets, wiener, views):
    traj = simulate_forward(problem, None, valuenets, wiener, views=views)
    u_T = rollout_value(problem, valuenets, traj, views)
    return mkv_loss(u_T, traj, problem, views)


def train_value_phase(state: TrainState) -> list[float]:
    """``value_epochs`` Adam steps on the value networks; the flow is read-only."""
    problem, cfg = state.problem, state.config
    views = marginal_views(state.flow, cfg.M_mu, Stream(cfg.seed, "mu", state.outer))
    hyper = AdamHyper(lr=cfg.lr_value * cfg.lr_decay**state.outer)
    losses = []
    for _ in range(cfg.value_epochs):
        wiener = gen_wiener(problem.grid, cfg.M, problem.d, cfg.seed, counter=("value", state.value_epoch))
        g, loss = grad(lambda _: value_loss(problem, state.valuenets, wiener, views),
                       state.valuenets.store, return_loss=True)
        g = clip_norm(g, cfg.grad_clip)
        _, state.value_opt = adam_step(state.valuenets.store, g, state.value_opt, hyper)
        state.value_epoch += 1
        losses.append(float(loss))
    state.value_curve.extend(losses)
    return losses


def simulate_trace(state: TrainState, counter):
    """Paths under the frozen value networks and the current flow ("trace from MKV")."""
    problem, cfg = state.problem, state.config
    views = marginal_views(state.flow, cfg.M_mu, Stream(cfg.seed, "mu-trace", *counter))
    wiener = gen_wiener(problem.grid, cfg.M, problem.d, cfg.seed, counter=("trace", *counter))
    with torch.no_grad():
        return simulate_forward(problem, None, state.valuenets, wiener, views=views)


def _dis_part(flow, trace_states, cfg: TrainConfig, epoch: int):
    idx = None
    if cfg.flow_batch is not None and cfg.flow_batch < trace_states.shape[0]:
        order = Stream(cfg.seed, "flow-batch", epoch).permutation(trace_states.shape[0])
        idx = torch.as_tensor(np.sort(order[: cfg.flow_batch]), dtype=torch.long)
    steps = None
    n_steps = trace_states.shape[1] - 1
    if cfg.flow_steps is not None and cfg.flow_steps < n_steps:
        order = Stream(cfg.seed, "flow-steps", epoch).permutation(n_steps)
        steps = np.sort(order[: cfg.flow_steps]) + 1
    return dis_loss(flow, trace_states, idx, steps)


def _terminal_part(flow, problem, cfg: TrainConfig, epoch: int):
    if not problem.has_terminal_cost:
        return torch.zeros((), dtype=DTYPE)
    return terminal_loss(flow, problem, cfg.M, Stream(cfg.seed, "terminal", epoch))


def flow_losses(flow, problem, trace_states, cfg: TrainConfig, epoch: int):
    return _dis_part(flow, trace_states, cfg, epoch), _terminal_part(flow, problem, cfg, epoch)


def flow_gradient(state: TrainState, trace_states, epoch: int):
    """Clipped gradient of l_dis + l_T and the two loss values."""
    problem, cfg = state.problem, state.config
    parts = {}

    def dis_fn(_):
        loss = _dis_part(state.flow, trace_states, cfg, epoch)
        parts["dis"] = float(loss.detach())
        return loss

    def terminal_fn(_):
        loss = _terminal_part(state.flow, problem, cfg, epoch)
        parts["T"] = float(loss.detach())
        return loss

    if cfg.clip_per_loss:
        # each term gets its own norm budget so a stiff terminal cost cannot drown the density fit
        g = clip_norm(grad(dis_fn, state.flow.store), cfg.grad_clip) + \
            clip_norm(grad(terminal_fn, state.flow.store), cfg.grad_clip)
    else:
        g = clip_norm(grad(lambda s: dis_fn(s) + terminal_fn(s), state.flow.store), cfg.grad_clip)
    return g, (parts["dis"], parts["T"])


def train_flow_phase(state: TrainState) -> list[tuple[float, float]]:
    """``flow_epochs`` Adam steps on l_dis + l_T; the value networks are read-only."""
    cfg = state.config
    hyper = AdamHyper(lr=cfg.lr_flow * cfg.lr_decay**state.outer)
    every = cfg.resimulate_every or cfg.flow_epochs
    out = []
    trace = None
    for k in range(cfg.flow_epochs):
        if k % every == 0:
            trace = simulate_trace(state, (state.outer, k))
        g, parts = flow_gradient(state, trace.states, state.flow_epoch)
        _, state.flow_opt = adam_step(state.flow.store, g, state.flow_opt, hyper)
        state.flow_epoch += 1
        out.append(parts)
    state.flow_curve.extend([list(p) for p in out])
    return out


def evaluate_terminal_loss(state: TrainState, m: int | None = None) -> float:
    cfg = state.config
    with torch.no_grad():
        return float(terminal_loss(state.flow, state.problem, m or cfg.M, Stream(cfg.seed, "terminal-eval")))


def warm_up_flow(state: TrainState):
    """Pre-fit the flow on l_T alone (skipped when the terminal cost vanishes)."""
    problem, cfg = state.problem, state.config
    if not problem.has_terminal_cost or cfg.warmup_steps == 0:
        state.warmup = {"steps": 0}
        return
    before = evaluate_terminal_loss(state)
    hyper = AdamHyper(lr=cfg.lr_flow)
    opt = AdamState.zeros(len(state.flow.store))
    for k in range(cfg.warmup_steps):
        g = grad(lambda _: terminal_loss(state.flow, problem, cfg.M, Stream(cfg.seed, "warmup", k)),
                 state.flow.store)
        _, opt = adam_step(state.flow.store, g, opt, hyper)
    state.warmup = {"steps": cfg.warmup_steps, "l_T_before": before, "l_T_after": evaluate_terminal_loss(state)}


def converged(history, tol: float, window: int) -> bool:
    """True once the total loss changed by less than ``tol`` (relative) over the last ``window`` iterations."""
    if window < 2:
        raise InvalidInputError("window must be at least 2")
    totals = [h["total"] if isinstance(h, dict) else float(h) for h in history]
    if len(totals) < window:
        return False
    tail = totals[-window:]
    for prev, cur in zip(tail, tail[1:]):
        if abs(cur - prev) >= tol * max(abs(prev), 1e-300):
            return False
    return True


def train(problem: MfgProblem, config: TrainConfig, state: TrainState | None = None,
          checkpoint_path: str | os.PathLike | None = None, stop_after: int | None = None):
    """Run (or continue) the alternating scheme.

    Returns ``(flow, valuenets, report)``.  ``stop_after`` caps the outer
    iteration index reached in this call, which is how resumable runs are
    split.
    """
    configure_threads()
    if state is None:
        state = init_state(problem, config)
        warm_up_flow(state)
    timings = []
    last_ckpt = None
    limit = config.outer_iters if stop_after is None else min(stop_after, config.outer_iters)
    done = converged(state.history, config.conv_tol, config.conv_window)
    while state.outer < limit and not done:
        try:
            t0 = time.perf_counter()
            v = train_value_phase(state)
            t1 = time.perf_counter()
            fl = train_flow_phase(state)
            t2 = time.perf_counter()
        except (DivergedSimulationError, FloatingPointError) as exc:
            if checkpoint_path is not None:
                fail = Path(checkpoint_path).with_suffix(".failed.json")
                save_checkpoint(fail, state)
                last_ckpt = str(fail)
            raise TrainingError(f"outer iteration {state.outer}: {exc}", last_ckpt) from exc
        l_dis, l_T = fl[-1]
        entry = {"outer": state.outer, "l_mkv": v[-1], "l_dis": l_dis, "l_T": l_T, "total": v[-1] + l_dis + l_T}
        state.history.append(entry)
        timings.append({"outer": state.outer, "value_s": t1 - t0, "flow_s": t2 - t1})
        log.info("outer %d: l_mkv=%.4g l_dis=%.4g l_T=%.4g", state.outer, entry["l_mkv"], l_dis, l_T)
        state.outer += 1
        if checkpoint_path is not None:
            save_checkpoint(checkpoint_path, state)
            last_ckpt = str(checkpoint_path)
        done = converged(state.history, config.conv_tol, config.conv_window)
    report = TrainReport(list(state.history), list(state.value_curve), list(state.flow_curve), dict(state.warmup),
                         done, state.outer, timings)
    report.state = state
    return state.flow, state.valuenets, report


# ---------------------------------------------------------------------------
# checkpoints


def _adam_to_dict(opt: AdamState) -> dict:
    return {"step": opt.step, "m": opt.m.numpy().tolist(), "v": opt.v.numpy().tolist()}


def _adam_from_dict(data: dict, n: int, name: str) -> AdamState:
    try:
        m = torch.tensor([float(x) for x in data["m"]], dtype=torch.float64)
        v = torch.tensor([float(x) for x in data["v"]], dtype=torch.float64)
        step = int(data["step"])
    except (KeyError, TypeError, ValueError) as exc:
        raise CheckpointError(f"bad optimiser state: {exc}", name) from exc
    if m.numel() != n or v.numel() != n:
        raise CheckpointError("optimiser state length does not match parameters", name)
    return AdamState(m, v, step)


def checkpoint_dict(state: TrainState) -> dict:
    return {
        "format": CHECKPOINT_VERSION,
        "problem": state.problem.descriptor(),
        "config": state.config.to_dict(),
        "outer": state.outer,
        "rng_cursor": {"value_epoch": state.value_epoch, "flow_epoch": state.flow_epoch, "outer": state.outer},
        "history": state.history,
        "value_curve": state.value_curve,
        "flow_curve": state.flow_curve,
        "warmup": state.warmup,
        "value_params": state.valuenets.store.to_dict(),
        "flow_params": state.flow.store.to_dict(),
        "value_opt": _adam_to_dict(state.value_opt),
        "flow_opt": _adam_to_dict(state.flow_opt),
    }


def save_checkpoint(path, state: TrainState) -> None:
    # json renders floats with the shortest repr that round-trips exactly
    text = json.dumps(checkpoint_dict(state), indent=1, allow_nan=False)
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(text)
    tmp.replace(path)


def _require(data, key, kind=None):
    if not isinstance(data, dict) or key not in data:
        raise CheckpointError("missing field", key)
    value = data[key]
    if kind is not None and not isinstance(value, kind):
        raise CheckpointError(f"expected {kind.__name__}", key)
    return value


def load_checkpoint(path) -> TrainState:
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise CheckpointError(f"cannot read checkpoint: {exc}") from exc
    try:
        data = json.loads(text)
    except json.JSONDecodeError as exc:
        raise CheckpointError(f"malformed checkpoint at line {exc.lineno} column {exc.colno}: {exc.msg}") from exc
    version = _require(data, "format", str)
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version!r}", "format")
    try:
        problem = problem_from_descriptor(_require(data, "problem", dict))
    except (KeyError, TypeError, ValueError) as exc:
        raise CheckpointError(f"bad problem descriptor: {exc}", "problem") from exc
    try:
        config = TrainConfig.from_dict(dict(_require(data, "config", dict)))
    except (TypeError, ValueError) as exc:
        raise CheckpointError(f"bad training config: {exc}", "config") from exc
    state = init_state(problem, config)
    for key, store in (("value_params", state.valuenets.store), ("flow_params", state.flow.store)):
        try:
            loaded = ParamStore.from_dict(_require(data, key, dict))
        except (KeyError, TypeError, ValueError) as exc:
            raise CheckpointError(f"bad parameter arrays: {exc}", key) from exc
        if loaded.segments != store.segments:
            raise CheckpointError("parameter layout does not match the problem/config", key)
        store.assign(loaded.values)
    state.value_opt = _adam_from_dict(_require(data, "value_opt", dict), len(state.valuenets.store), "value_opt")
    state.flow_opt = _adam_from_dict(_require(data, "flow_opt", dict), len(state.flow.store), "flow_opt")
    cursor = _require(data, "rng_cursor", dict)
    try:
        state.value_epoch = int(cursor["value_epoch"])
        state.flow_epoch = int(cursor["flow_epoch"])
    except (KeyError, TypeError, ValueError) as exc:
        raise CheckpointError("bad rng cursor", "rng_cursor") from exc
    state.outer = int(_require(data, "outer", int))
    state.history = list(_require(data, "history", list))
    state.value_curve = list(_require(data, "value_curve", list))
    state.flow_curve = list(_require(data, "flow_curve", list))
    state.warmup = dict(_require(data, "warmup", dict))
    return state
