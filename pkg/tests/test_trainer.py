import json

import numpy as np
import pytest
import torch

from nfmkv.diffcore import InvalidInputError
from nfmkv.flows import dis_loss
from nfmkv.problems import make_crowd_motion
from nfmkv.rng import Stream
from nfmkv.sde import TimeGrid
from nfmkv.trainer import (
    CheckpointError,
    TrainConfig,
    converged,
    flow_gradient,
    init_state,
    load_checkpoint,
    save_checkpoint,
    simulate_trace,
    train,
    train_flow_phase,
    train_value_phase,
)

from conftest import Toy, tensor

TINY = dict(M=16, M_mu=8, value_epochs=2, flow_epochs=2, warmup_steps=2, value_hidden=(6,), flow_hidden=6,
            lr_value=1e-2, lr_flow=1e-3, grad_clip=1.0, conv_tol=1e-12)


def tiny_problem():
    return make_crowd_motion(2, x_T=(-1.0, 0.0), grid=TimeGrid(1.0, 3), sigma=0.5)


def tiny(**kw):
    return TrainConfig(**{**TINY, **kw})


@pytest.mark.parametrize("field,value", [
    ("M", 0), ("outer_iters", 0), ("lr_value", 0.0), ("lr_flow", -1.0), ("conv_tol", 0.0),
    ("conv_window", 1), ("flow_batch", 17), ("grad_clip", 0.0), ("flow_steps", 0),
])
def test_config_rejects_bad_values(field, value):
    with pytest.raises(InvalidInputError):
        tiny(**{field: value})


def test_config_rejects_unknown_fields():
    with pytest.raises(InvalidInputError):
        TrainConfig.from_dict({"M": 4, "momentum": 0.9})


def test_converged_examples():
    assert converged([2.0, 2.0, 2.0], 1e-9, 3)
    assert not converged([8.0, 4.0, 2.0, 1.0], 1e-6, 3)
    assert not converged([1.0], 1e-3, 3)
    with pytest.raises(InvalidInputError):
        converged([1.0, 1.0], 1e-3, 1)


def test_value_phase_leaves_flow_untouched():
    state = init_state(tiny_problem(), tiny())
    flow_before = state.flow.store.values.clone()
    value_before = state.valuenets.store.values.clone()
    train_value_phase(state)
    assert torch.equal(state.flow.store.values, flow_before)
    assert not torch.equal(state.valuenets.store.values, value_before)


def test_flow_phase_leaves_value_nets_untouched():
    state = init_state(tiny_problem(), tiny())
    value_before = state.valuenets.store.values.clone()
    flow_before = state.flow.store.values.clone()
    train_flow_phase(state)
    assert torch.equal(state.valuenets.store.values, value_before)
    assert not torch.equal(state.flow.store.values, flow_before)


def test_one_outer_iteration_runs_each_phase_once():
    _, _, report = train(tiny_problem(), tiny(outer_iters=1, value_epochs=3, flow_epochs=4))
    assert len(report.history) == 1 and report.outer_done == 1
    assert len(report.value_curve) == 3 and len(report.flow_curve) == 4


def test_per_loss_clipping_gives_each_term_its_own_budget():
    from nfmkv.diffcore import grad
    from nfmkv.trainer import _dis_part, _terminal_part, clip_norm

    problem, clip = tiny_problem(), 1e-3
    states = {mode: init_state(problem, tiny(grad_clip=c, clip_per_loss=mode == "per"))
              for mode, c in (("per", clip), ("global", clip), ("off", None))}
    values = states["per"].flow.store.values + 0.1 * tensor(Stream(3, "perturb").normal((len(states["per"].flow.store),)))
    for st in states.values():
        st.flow.store.values = values
    trace = simulate_trace(states["per"], ("clip",)).states
    st, cfg = states["per"], states["per"].config
    g_dis = grad(lambda _: _dis_part(st.flow, trace, cfg, 0), st.flow.store)
    g_T = grad(lambda _: _terminal_part(st.flow, problem, cfg, 0), st.flow.store)
    assert g_dis.norm() > clip and g_T.norm() > clip

    g_per, parts = flow_gradient(states["per"], trace, 0)
    assert torch.allclose(g_per, clip_norm(g_dis, clip) + clip_norm(g_T, clip), rtol=1e-10, atol=1e-15)
    g_glob, _ = flow_gradient(states["global"], trace, 0)
    assert torch.allclose(g_glob, clip_norm(g_dis + g_T, clip), rtol=1e-10, atol=1e-15)
    g_off, _ = flow_gradient(states["off"], trace, 0)
    assert torch.allclose(g_off, g_dis + g_T, rtol=1e-10, atol=1e-15)
    assert np.isfinite(parts).all()


def test_training_is_deterministic():
    a = train(tiny_problem(), tiny(outer_iters=2))[2]
    b = train(tiny_problem(), tiny(outer_iters=2))[2]
    assert a.to_dict() == b.to_dict()


def test_zero_costs_keep_value_loss_small():
    state = init_state(Toy(d=1, N=4, sigma=0.3), tiny(value_epochs=20, warmup_steps=0))
    losses = train_value_phase(state)
    assert max(losses[1:]) <= losses[0] + 1e-12


def test_checkpoint_resume_matches_straight_run(tmp_path):
    cfg = tiny(outer_iters=20, value_epochs=1, flow_epochs=1)
    straight = train(tiny_problem(), cfg)
    path = tmp_path / "ckpt.json"
    train(tiny_problem(), cfg, checkpoint_path=path, stop_after=10)
    resumed = train(tiny_problem(), cfg, state=load_checkpoint(path))
    assert torch.equal(straight[0].store.values, resumed[0].store.values)
    assert torch.equal(straight[1].store.values, resumed[1].store.values)
    assert straight[2].history == resumed[2].history


def test_checkpoint_round_trip_is_byte_identical(tmp_path):
    *_, report = train(tiny_problem(), tiny(outer_iters=1))
    a, b = tmp_path / "a.json", tmp_path / "b.json"
    save_checkpoint(a, report.state)
    save_checkpoint(b, load_checkpoint(a))
    assert a.read_bytes() == b.read_bytes()


def test_checkpoint_errors(tmp_path):
    *_, report = train(tiny_problem(), tiny(outer_iters=1))
    path = tmp_path / "c.json"
    save_checkpoint(path, report.state)
    text = path.read_text()
    (tmp_path / "cut.json").write_text(text[: len(text) // 2])
    with pytest.raises(CheckpointError):
        load_checkpoint(tmp_path / "cut.json")
    data = json.loads(text)
    data["format"] = "nfmkv-checkpoint/99"
    (tmp_path / "ver.json").write_text(json.dumps(data))
    with pytest.raises(CheckpointError) as err:
        load_checkpoint(tmp_path / "ver.json")
    assert err.value.field == "format"
    data = json.loads(text)
    del data["flow_params"]
    (tmp_path / "miss.json").write_text(json.dumps(data))
    with pytest.raises(CheckpointError) as err:
        load_checkpoint(tmp_path / "miss.json")
    assert err.value.field == "flow_params"


def test_identity_flow_is_local_minimum_on_whitened_data():
    problem = Toy(d=1, N=3)
    state = init_state(problem, tiny(warmup_steps=0))
    z = Stream(0, "whiten").normal((200, 4, 1))
    z = (z - z.mean(0)) / z.std(0)
    states = tensor(z)
    flow = state.flow
    best = float(dis_loss(flow, states))
    base = flow.store.values.clone()
    for k in range(100):
        flow.store.values = base + 1e-3 * tensor(Stream(k, "perturb").normal((len(base),)))
        assert float(dis_loss(flow, states)) >= best - 1e-12
    flow.store.values = base


def test_crowd_value_loss_trends_down():
    problem = make_crowd_motion(2)
    cfg = TrainConfig(M=512, M_mu=128, value_epochs=200, lr_value=1e-2, grad_clip=1.0, warmup_steps=200)
    state = init_state(problem, cfg)
    from nfmkv.trainer import warm_up_flow

    warm_up_flow(state)
    losses = np.array(train_value_phase(state))
    # every epoch draws a fresh Wiener batch; average over a tenth of the run
    window = len(losses) // 10
    smooth = np.convolve(losses, np.ones(window) / window, mode="valid")
    assert np.mean(np.diff(smooth) < 0) >= 0.8
