import numpy as np
import pytest

from crowdflow.core import TrajectoryWindow


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def random_window(rng, n_agents=3, t_hist=8, t_fut=12, scale=3.0, scene_id="w", map_key=None):
    start = rng.uniform(-scale, scale, size=(n_agents, 1, 2))
    vel = rng.normal(0.0, 0.4, size=(n_agents, 1, 2))
    steps = np.arange(t_hist + t_fut)[None, :, None]
    traj = start + vel * steps + rng.normal(0.0, 0.05, size=(n_agents, t_hist + t_fut, 2))
    return TrajectoryWindow(scene_id, tuple(range(n_agents)), traj[:, :t_hist], traj[:, t_hist:],
                            map_key=map_key)


@pytest.fixture
def make_window(rng):
    def make(**kw):
        return random_window(rng, **kw)
    return make


ACCEPTANCE: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE:
            terminalreporter.write_line(line)
