"""Safe reinforcement learning with a data-based ultimate-boundedness certificate.

Two trainers (an off-policy actor-critic and an on-policy trust-region
method) learn controllers whose closed loop satisfies an edge-set decrease
condition on a learned Lyapunov function; a Monte-Carlo verifier checks that
condition on fresh rollouts and assembles the boundedness certificate.
"""

__version__ = "0.1.0"

from . import buffers, envs, lcpo, lsac, lyapunov, nets, policy, rollout, testkit, uub_verify
from .config import RunConfig, make_config

__all__ = [
    "buffers",
    "envs",
    "lcpo",
    "lsac",
    "lyapunov",
    "nets",
    "policy",
    "rollout",
    "testkit",
    "uub_verify",
    "RunConfig",
    "make_config",
    "__version__",
]
