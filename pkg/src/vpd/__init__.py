"""Variational policy distillation on exactly enumerable toy sequence tasks.

The package keeps the learning rules small enough that every quantity the
method relies on (partition functions, optimal policies, ELBO gaps) can be
computed exactly and compared against the trained policy.
"""
from .config import TrainConfig
from .env import EnvSpec
from .kernels import BACKEND
from .policy import Context, PolicyParams, Vocabulary
from .trainer import em_monotonicity_run, train

__all__ = ["BACKEND", "Context", "EnvSpec", "PolicyParams", "TrainConfig", "Vocabulary",
           "em_monotonicity_run", "train"]
__version__ = "0.1.0"
