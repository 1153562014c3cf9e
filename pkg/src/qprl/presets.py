"""Tuned desk-scale recipes for the synthetic benchmarks.

The ROI task reward is a weighted MSE over 255**2, a few 1e-4 per frame, so it
needs a far larger weight than the detection reward, which lives in [0, 1].
The CLI starts from these recipes whenever no ``--config`` is given.
"""

from __future__ import annotations

from dataclasses import replace

from .benchmark import TASK_TARGETS
from .config import BenchSettings, RunConfig
from .env import EnvConfig
from .rl.train import TrainConfig

TASK_LAMBDA = {"roi": 1000.0, "detect": 20.0}

DESK_TRAIN = TrainConfig(total_frames=163_840)


def desk_env(task: str = "roi", **changes) -> EnvConfig:
    if task not in TASK_LAMBDA:
        raise ValueError(f"unknown task {task!r}")
    return EnvConfig(task=task, lam=TASK_LAMBDA[task]).replace(**changes)


def desk_train(**changes) -> TrainConfig:
    return replace(DESK_TRAIN, **changes)


def desk_config(task: str = "roi") -> RunConfig:
    return RunConfig(env=desk_env(task), train=desk_train(), bench=BenchSettings(targets=TASK_TARGETS[task]))
