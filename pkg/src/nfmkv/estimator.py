"""Estimator-style front end: ``NFMKVSolver().fit()`` trains, then the fitted flow answers queries."""

from __future__ import annotations

import numpy as np
import torch
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_array, check_is_fitted

from .diffcore import DTYPE, InvalidInputError
from .experiments import make_problem
from .flows import marginal_views
from .problems import MfgProblem
from .rng import Stream
from .trainer import TrainConfig, train


class NFMKVSolver(BaseEstimator):
    """Mean-field equilibrium solver with a time-indexed flow for the density path.

    Parameters
    ----------
    problem : str or MfgProblem
        A registry tag (``traffic``, ``crowd2d``, ``crowd50d``, ``obstacle``,
        ``half_terminal``) or a ready problem instance.
    problem_params : dict, optional
        Overrides passed to the registry when ``problem`` is a tag.
    config : dict or TrainConfig, optional
        Training settings; missing fields take the TrainConfig defaults.
    random_state : int
        Seed for every random stream; replaces ``config["seed"]``.
    """

    def __init__(self, problem="crowd2d", problem_params=None, config=None, random_state=0):
        self.problem = problem
        self.problem_params = problem_params
        self.config = config
        self.random_state = random_state

    def _build(self):
        if isinstance(self.problem, MfgProblem):
            if self.problem_params:
                raise InvalidInputError("problem_params only apply to registry tags")
            problem = self.problem
        else:
            problem = make_problem(self.problem, self.problem_params)
        cfg = self.config
        if isinstance(cfg, TrainConfig):
            cfg = cfg.to_dict()
        cfg = dict(cfg or {})
        cfg["seed"] = int(self.random_state)
        return problem, TrainConfig.from_dict(cfg)

    def fit(self, X=None, y=None):
        """Run the alternating training.  ``X`` and ``y`` are ignored; the problem carries its own data."""
        problem, cfg = self._build()
        self.flow_, self.value_nets_, self.report_ = train(problem, cfg)
        self.problem_ = problem
        self.config_ = cfg
        self.n_features_in_ = problem.d
        self._views = None
        return self

    def _step(self, step):
        N = self.problem_.grid.N
        step = N if step is None else int(step)
        if step < 0:
            step += N + 1
        if not 0 <= step <= N:
            raise InvalidInputError(f"step must lie in 0..{N}")
        return step

    def _check_X(self, X):
        X = check_array(X, dtype=np.float64)
        if X.shape[1] != self.n_features_in_:
            raise InvalidInputError(f"X has {X.shape[1]} features, expected {self.n_features_in_}")
        return torch.as_tensor(X, dtype=DTYPE)

    def sample(self, n_samples=500, step=None, random_state=None):
        """Draws from the fitted marginal at ``step`` (default: terminal)."""
        check_is_fitted(self, "flow_")
        seed = self.random_state if random_state is None else random_state
        with torch.no_grad():
            x = self.flow_.sample_at_step(self._step(step), int(n_samples), Stream(seed, "estimator-sample"))
        return x.numpy()

    def sample_paths(self, n_samples=500, random_state=None):
        """Trajectories shaped (n_samples, N+1, d) from shared base draws."""
        check_is_fitted(self, "flow_")
        seed = self.random_state if random_state is None else random_state
        with torch.no_grad():
            path = self.flow_.sample_path(int(n_samples), Stream(seed, "estimator-paths"))
        return torch.stack(path, 1).numpy()

    def score_samples(self, X, step=None):
        """Log-density of each row of ``X`` under the marginal at ``step``."""
        check_is_fitted(self, "flow_")
        x = self._check_X(X)
        with torch.no_grad():
            return self.flow_.logprob_at_step(self._step(step), x).numpy()

    def score(self, X, y=None, step=None):
        return float(np.mean(self.score_samples(X, step)))

    def predict(self, X, step=0):
        """Equilibrium control at states ``X`` and time step ``step`` (< N)."""
        check_is_fitted(self, "flow_")
        n = self._step(step)
        if n >= self.problem_.grid.N:
            raise InvalidInputError("controls are defined for steps 0..N-1")
        x = self._check_X(X)
        if self._views is None:
            self._views = marginal_views(self.flow_, self.config_.M_mu, Stream(self.random_state, "estimator-mu"))
        with torch.no_grad():
            zeta = self.problem_.zeta(self.value_nets_.z(n, x))
            alpha = self.problem_.optimal_control(self.problem_.grid.t(n), x, self._views[n], zeta)
        return alpha.numpy()

    def value(self, X):
        """Initial value u(x, 0) from the fitted network."""
        check_is_fitted(self, "flow_")
        with torch.no_grad():
            return self.value_nets_.u0(self._check_X(X)).reshape(-1).numpy()
