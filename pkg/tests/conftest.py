import numpy as np
import pytest
import torch

from dualstream.config import EnvConfig, RunConfig
from dualstream.worldsim import DrivingWorld

torch.set_num_threads(1)


@pytest.fixture
def env():
    return DrivingWorld(EnvConfig(image_size=32))


# a run config small enough to train a few hundred steps in seconds
SMALL_OVERRIDES = dict(
    env={"image_size": 16, "max_steps": 30, "action_repeat": 2},
    model={"channels": 4, "feature_dim": 8, "reduced_channels": 4, "hidden_dim": 16},
    sac={"batch_size": 8, "actor_hidden": 16, "critic_hidden": 16},
    replay={"capacity": 500, "t_decay": 50},
    train={"total_frames": 120, "prefill_frames": 40, "eval_interval": 10**6, "eval_episodes": 1},
)


@pytest.fixture
def small_config():
    return RunConfig().replace(**SMALL_OVERRIDES)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def pytest_terminal_summary(terminalreporter):
    import sys

    acceptance = sys.modules.get("test_acceptance")
    if acceptance is None or not acceptance.RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(acceptance.RESULTS):
        terminalreporter.write_line(acceptance.RESULTS[n])
