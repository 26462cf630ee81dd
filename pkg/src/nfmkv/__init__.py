"""Mean-field game equilibria from a time-indexed normalizing flow coupled to deep-BSDE value networks."""

__version__ = "0.1.0"

from .diffcore import InvalidInputError, NumericError  # noqa: E402
from .estimator import NFMKVSolver  # noqa: E402
from .experiments import PROBLEM_TAGS, desk_config, make_problem  # noqa: E402
from .reference import TrafficReferenceSolver, solve_traffic_fd  # noqa: E402
from .trainer import TrainConfig, load_checkpoint, save_checkpoint, train  # noqa: E402

__all__ = [
    "InvalidInputError",
    "NFMKVSolver",
    "NumericError",
    "PROBLEM_TAGS",
    "TrafficReferenceSolver",
    "TrainConfig",
    "desk_config",
    "load_checkpoint",
    "make_problem",
    "save_checkpoint",
    "solve_traffic_fd",
    "train",
]
