import math

import numpy as np
import pytest

from csvgd.diffsim import LinkParams, ParamSpec, PendulumModel, State, TrajectorySet, make_trajectory

# Eleven-parameter pendulum: both links' inertial and friction parameters plus
# the second link's length, with the ranges of the physical experiment.
ELEVEN_SPEC = (
    ParamSpec(0, "mass", 0.05, 0.5), ParamSpec(0, "inertia", 0.002, 1.0),
    ParamSpec(0, "com_x", -0.2, 0.2), ParamSpec(0, "com_y", -0.2, 0.2),
    ParamSpec(0, "friction", 0.0, 0.5),
    ParamSpec(1, "length", 0.08, 0.3), ParamSpec(1, "mass", 0.05, 0.5),
    ParamSpec(1, "inertia", 0.002, 1.0), ParamSpec(1, "com_x", -0.2, 0.2),
    ParamSpec(1, "com_y", -0.2, 0.2), ParamSpec(1, "friction", 0.0, 0.5),
)
ELEVEN_TRUTH = np.array([0.3, 0.01, 0.05, 0.0, 0.02, 0.15, 0.2, 0.005, 0.08, 0.0, 0.01])
ELEVEN_STARTS = [(1.2, 0.5), (2.0, -1.0), (0.8, 2.0), (1.6, 1.0), (2.4, 0.3), (1.0, -0.5)]


def two_length_model(dt=0.01):
    """Two point-like masses whose positions follow the link lengths."""
    spec = (ParamSpec(0, "length", 0.5, 5.0), ParamSpec(1, "length", 0.5, 5.0))
    links = (LinkParams(1.0, 1e-6, 0.0, 0.0, 1.5), LinkParams(1.0, 1e-6, 0.0, 0.0, 2.0))
    return PendulumModel(links, 9.81, dt, spec, com_at_tip=True)


def eleven_model():
    links = (LinkParams(0.3, 0.01, 0.05, 0.0, 0.1, 0.02),
             LinkParams(0.2, 0.005, 0.08, 0.0, 0.15, 0.01))
    return PendulumModel(links, 9.81, 0.0025, ELEVEN_SPEC)


def eleven_data(n_traj, steps, offset=0):
    model = eleven_model()
    starts = [ELEVEN_STARTS[(offset + i) % len(ELEVEN_STARTS)] for i in range(n_traj)]
    return TrajectorySet([make_trajectory(model, ELEVEN_TRUTH, State(s, (0.0, 0.0)), steps)
                          for s in starts])


@pytest.fixture
def pendulum2():
    return two_length_model()


@pytest.fixture
def small_set(pendulum2):
    rng = np.random.default_rng(3)
    x0 = State((math.pi / 2, 0.0), (0.0, 0.0))
    return TrajectorySet([make_trajectory(pendulum2, th, x0, 40)
                          for th in rng.uniform([1.3, 1.8], [1.7, 2.2], size=(3, 2))])


# one PASS/FAIL line per acceptance criterion, repeated in the terminal summary
ACCEPTANCE_LINES: dict[int, str] = {}


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for n in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(ACCEPTANCE_LINES[n])
