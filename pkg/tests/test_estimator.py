import numpy as np
import pytest
from sklearn.base import clone
from sklearn.exceptions import NotFittedError

from nfmkv import NFMKVSolver, TrafficReferenceSolver
from nfmkv.diffcore import InvalidInputError
from nfmkv.problems import make_crowd_motion
from nfmkv.sde import TimeGrid

TINY = {"M": 16, "M_mu": 8, "outer_iters": 1, "value_epochs": 2, "flow_epochs": 2, "warmup_steps": 2,
        "value_hidden": [6], "flow_hidden": 6, "grad_clip": 1.0}


@pytest.fixture(scope="module")
def fitted():
    return NFMKVSolver("crowd2d", {"N": 4}, TINY, random_state=3).fit()


def test_get_params_and_clone():
    est = NFMKVSolver("obstacle", {"lam_obs": 50.0}, TINY, random_state=1)
    params = clone(est).get_params()
    assert params["problem"] == "obstacle" and params["problem_params"] == {"lam_obs": 50.0}
    assert params["random_state"] == 1


def test_unfitted_queries_raise():
    with pytest.raises(NotFittedError):
        NFMKVSolver().sample(3)


def test_fitted_attributes(fitted):
    assert fitted.n_features_in_ == 2 and fitted.problem_.grid.N == 4
    assert fitted.config_.seed == 3 and len(fitted.report_.history) == 1


def test_sample_shapes_and_determinism(fitted):
    a = fitted.sample(10)
    assert a.shape == (10, 2) and np.array_equal(a, fitted.sample(10))
    assert not np.array_equal(a, fitted.sample(10, random_state=4))
    paths = fitted.sample_paths(6)
    assert paths.shape == (6, 5, 2)
    assert np.array_equal(fitted.sample(5, step=0), fitted.sample(5, step=-5))


def test_score_samples_and_value(fitted):
    x = fitted.sample(20, step=2)
    lp = fitted.score_samples(x, step=2)
    assert lp.shape == (20,) and np.isfinite(lp).all()
    assert fitted.score(x, step=2) == pytest.approx(lp.mean())
    assert fitted.value(x).shape == (20,)


def test_predict_controls(fitted):
    x = fitted.sample(5, step=0)
    alpha = fitted.predict(x, step=0)
    z = fitted.value_nets_.z(0, __import__("torch").as_tensor(x)).detach().numpy()
    assert np.allclose(alpha, -0.5 * z / fitted.problem_.sigma)
    with pytest.raises(InvalidInputError):
        fitted.predict(x, step=4)


def test_input_validation(fitted):
    with pytest.raises(InvalidInputError):
        fitted.score_samples(np.zeros((3, 3)))
    with pytest.raises(InvalidInputError):
        fitted.sample(3, step=9)


def test_problem_instance_and_conflicting_params():
    prob = make_crowd_motion(1, x_T=(0.0,), grid=TimeGrid(1.0, 2))
    est = NFMKVSolver(prob, config=TINY).fit()
    assert est.sample(4).shape == (4, 1)
    with pytest.raises(InvalidInputError):
        NFMKVSolver(prob, {"N": 3}, TINY).fit()


def test_reference_estimator_predicts_flat_for_uniform():
    est = TrafficReferenceSolver(J=32, N=4, mu0={"kind": "uniform_ring"}, substeps=1).fit()
    assert np.allclose(est.predict(np.linspace(0, 1, 9)), 1.0)
