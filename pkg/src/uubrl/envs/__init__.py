from .base import Disturbance, SafeEnv, StepResult
from .cartpole import CartPoleSafe
from .pointcircle import PointCircle
from .quadrotor import QuadrotorSafe

ENV_REGISTRY = {
    "cartpole_safe": CartPoleSafe,
    "point_circle": PointCircle,
    "quadrotor_safe": QuadrotorSafe,
}


def make_env(name: str, **kwargs) -> SafeEnv:
    try:
        cls = ENV_REGISTRY[name]
    except KeyError:
        raise ValueError(f"unknown environment '{name}' (choose from {sorted(ENV_REGISTRY)})")
    return cls(**kwargs)


__all__ = [
    "Disturbance",
    "SafeEnv",
    "StepResult",
    "CartPoleSafe",
    "PointCircle",
    "QuadrotorSafe",
    "ENV_REGISTRY",
    "make_env",
]
