"""Self-contained diagnostic probes shared by the CLI and the acceptance suite."""

from __future__ import annotations

import time

import numpy as np
import torch

from .diffcore import DTYPE, fd_check, init_params
from .flows import (
    CircularSplineBlock,
    MafAffineBlock,
    PermuteBlock,
    dis_loss,
    marginal_views,
    terminal_loss,
)
from .problems import make_crowd_motion
from .rng import Stream
from .sde import AnalyticSde, TimeGrid, em_order_probe, gen_wiener, particle_rate_probe
from .trainer import TrainConfig, init_state, simulate_trace, value_loss

EM_DT = [2.0**-k for k in range(4, 10)]
PARTICLE_M = [100, 1000, 10000]

# Pass bands of the probes.
STRONG_BAND = (0.4, 0.6)
WEAK_BAND = (0.8, 1.2)
RATE_BAND = (-0.6, -0.4)
GRAD_TOL = 1e-4
ROUNDTRIP_TOL = 1e-6
LOGDET_TOL = 1e-8


def _timed(fn):
    t0 = time.perf_counter()
    out = fn()
    out["seconds"] = time.perf_counter() - t0
    return out


def em_probe(seed: int = 0, M: int = 10_000) -> dict:
    """Strong and weak Euler-Maruyama slopes on the OU process against exact paths."""
    def run():
        res = em_order_probe(AnalyticSde("ou"), EM_DT, M=M, seed=seed)
        res["strong_ok"] = STRONG_BAND[0] <= res["strong_order"] <= STRONG_BAND[1]
        res["weak_ok"] = WEAK_BAND[0] <= res["weak_order"] <= WEAK_BAND[1]
        return res
    return _timed(run)


def particle_probe(seed: int = 0, n_seeds: int = 20) -> dict:
    def run():
        res = particle_rate_probe(PARTICLE_M, seed=seed, n_seeds=n_seeds)
        res["ok"] = RATE_BAND[0] <= res["slope"] <= RATE_BAND[1]
        return res
    return _timed(run)


def _sampled_indices(store, per_segment: int, stream: Stream) -> list[int]:
    out = []
    for k, (name, (offset, length)) in enumerate(sorted(store.segments.items())):
        take = min(per_segment, length)
        pick = stream.child(name).permutation(length)[:take]
        out.extend(int(offset + i) for i in np.sort(pick))
    return out


def grad_probe(seed: int = 0, per_segment: int = 4, eps: float = 1e-5) -> dict:
    """Finite-difference audit of l_MKV, l_dis and l_T on a tiny crowd problem (d=2, N=5, M=16).

    Target and noise are chosen so the losses are O(10); with the default
    target the exponential terminal cost puts l_MKV near 1e10, where central
    differences are dominated by round-off.
    """
    def run():
        problem = make_crowd_motion(2, x_T=(-2.0, 0.0), sigma=0.5, grid=TimeGrid(1.0, 5))
        cfg = TrainConfig(M=16, M_mu=16, seed=seed, warmup_steps=0)
        state = init_state(problem, cfg)
        # perturb the zero-initialised flow outputs so every parameter is exercised
        store = state.flow.store
        store.values = store.values + 0.05 * torch.as_tensor(Stream(seed, "fd-perturb").normal((len(store),)),
                                                              dtype=DTYPE)
        views = marginal_views(state.flow, cfg.M_mu, Stream(seed, "fd-mu"))
        wiener = gen_wiener(problem.grid, cfg.M, problem.d, seed, counter=("fd",))
        trace = simulate_trace(state, ("fd",))
        pick = Stream(seed, "fd-index")
        errors = {
            "l_mkv": fd_check(lambda _: value_loss(problem, state.valuenets, wiener, views), state.valuenets.store,
                              eps, _sampled_indices(state.valuenets.store, per_segment, pick.child("v"))),
            "l_dis": fd_check(lambda _: dis_loss(state.flow, trace.states), store, eps,
                              _sampled_indices(store, per_segment, pick.child("d"))),
            "l_T": fd_check(lambda _: terminal_loss(state.flow, problem, cfg.M, Stream(seed, "fd-T")), store, eps,
                            _sampled_indices(store, per_segment, pick.child("t"))),
        }
        return {"errors": errors, "max": max(errors.values()), "ok": max(errors.values()) < GRAD_TOL}
    return _timed(run)


def _random_params(block, scale: float, stream: Stream):
    """Store for ``block`` filled with scaled normal draws."""
    store = init_params(block.param_spec(), 0)
    store.values = scale * torch.as_tensor(stream.normal((len(store),)), dtype=DTYPE)
    block.bind(store)
    return store


def roundtrip_probe(seed: int = 0, n_points: int = 1000) -> dict:
    """Inverse(forward(x)) error and log-det antisymmetry for each block kind with random parameters."""
    def run():
        stream = Stream(seed, "roundtrip")
        results = {}
        d = 3
        blocks = {
            "maf_affine": (MafAffineBlock(d, "maf"), "euclidean"),
            "permute": (PermuteBlock(list(reversed(range(d)))), "euclidean"),
            "circular_spline": (CircularSplineBlock(1, "spl"), "ring"),
        }
        for kind, (block, domain) in blocks.items():
            if block.param_spec():
                _random_params(block, 0.5, stream.child(kind, "params"))
            if domain == "ring":
                x = torch.as_tensor(stream.child(kind).uniform((n_points, 1)), dtype=DTYPE)
            else:
                x = torch.as_tensor(2.0 * stream.child(kind).normal((n_points, d)), dtype=DTYPE)
            with torch.no_grad():
                y, ld_f = block.forward(x)
                x_back, ld_i = block.inverse(y)
            diff = (x_back - x).abs()
            if domain == "ring":
                diff = torch.minimum(diff, 1.0 - diff)
            results[kind] = {"roundtrip": float(diff.max()), "logdet": float((ld_f + ld_i).abs().max())}
        ok = all(r["roundtrip"] < ROUNDTRIP_TOL and r["logdet"] < LOGDET_TOL for r in results.values())
        return {"blocks": results, "ok": ok}
    return _timed(run)


PROBES = {
    "em-strong": lambda seed: _verdict(em_probe(seed), "strong_ok"),
    "em-weak": lambda seed: _verdict(em_probe(seed), "weak_ok"),
    "particle-rate": lambda seed: _verdict(particle_probe(seed), "ok"),
    "grad-check": lambda seed: _verdict(grad_probe(seed), "ok"),
    "flow-roundtrip": lambda seed: _verdict(roundtrip_probe(seed), "ok"),
}


def _verdict(report: dict, key: str) -> dict:
    report["pass"] = bool(report[key])
    return report
