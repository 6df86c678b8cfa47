"""Native episodic environments behind a uniform interface."""

from __future__ import annotations

from .acrobot import Acrobot
from .base import Env, EnvSpec, EpisodeDoneError, dump_trajectory
from .breakout import Breakout
from .cartpole import CartPole
from .mountain_car import MountainCar

ENVIRONMENTS = {
    "cartpole": CartPole,
    "mountaincar": MountainCar,
    "acrobot": Acrobot,
    "breakout": Breakout,
}


def make_env(name: str, seed: int | None = None) -> Env:
    try:
        cls = ENVIRONMENTS[name]
    except KeyError:
        raise ValueError(f"unknown environment {name!r}; choose from {sorted(ENVIRONMENTS)}")
    return cls(seed=seed)


__all__ = [
    "Acrobot",
    "Breakout",
    "CartPole",
    "ENVIRONMENTS",
    "Env",
    "EnvSpec",
    "EpisodeDoneError",
    "MountainCar",
    "dump_trajectory",
    "make_env",
]
