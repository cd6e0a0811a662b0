"""
Shared fixtures for the skinssl test suite.

Slow end-to-end runs are marked ``@pytest.mark.slow`` and only run with
``pytest --runslow``.
"""

import sys
from pathlib import Path

import numpy as np
import pytest
import torch

# =============================================================================
# PATH SETUP
# =============================================================================

PROJECT_ROOT = Path(__file__).resolve().parent.parent
sys.path.insert(0, str(PROJECT_ROOT))

from skinssl.encoder import EncoderConfig  # noqa: E402
from skinssl.hand_model import (  # noqa: E402
    BASE_LINK,
    HandLayout,
    JointType,
    LinkSpec,
    PadSpec,
    PadType,
    build_default_layout,
    grid_offsets,
    make_transform,
)
from skinssl.synth_data import (  # noqa: E402
    SimulatorConfig,
    generate_force_dataset,
    generate_joystick_dataset,
    generate_play_dataset,
    generate_pose_dataset,
)


def pytest_addoption(parser):
    parser.addoption("--runslow", action="store_true", default=False,
                     help="run slow end-to-end tests")


def pytest_configure(config):
    config.addinivalue_line("markers", "slow: long end-to-end run (needs --runslow)")


def pytest_collection_modifyitems(config, items):
    if config.getoption("--runslow"):
        return
    skip_slow = pytest.mark.skip(reason="needs --runslow")
    for item in items:
        if "slow" in item.keywords:
            item.add_marker(skip_slow)


# =============================================================================
# FIXTURES
# =============================================================================

@pytest.fixture(scope="session")
def layout():
    return build_default_layout()


@pytest.fixture(scope="session")
def small_layout():
    """Two 2x2 pads (one palm, one on a single revolute link): 8 taxels, 1 joint."""
    links = (LinkSpec(BASE_LINK, None),
             LinkSpec("finger", BASE_LINK, joint_type=JointType.REVOLUTE, joint_axis=(1.0, 0.0, 0.0),
                      offset=make_transform((0.0, 0.05, 0.0))))
    pads = (PadSpec(0, PadType.PALM, grid_offsets(2, 2, 0.005), BASE_LINK,
                    make_transform((0.0, 0.0, 0.01))),
            PadSpec(1, PadType.PHALANGE, grid_offsets(2, 2, 0.005), "finger",
                    make_transform((0.0, 0.01, 0.01))))
    return HandLayout(links, pads, name="small")


@pytest.fixture
def tiny_config():
    return EncoderConfig.tiny()


@pytest.fixture
def tiny_sim():
    return SimulatorConfig(play_classes=3, play_episodes_per_class=2, play_seconds=3.0,
                           force_presses=10, pose_trajectories=5, pose_seconds=2.5,
                           joystick_trajectories=5, joystick_seconds=2.0)


@pytest.fixture(scope="session")
def session_sim():
    return SimulatorConfig(play_classes=3, play_episodes_per_class=2, play_seconds=3.0,
                           force_presses=10, pose_trajectories=5, pose_seconds=2.5,
                           joystick_trajectories=5, joystick_seconds=2.0)


@pytest.fixture(scope="session")
def play_dataset(layout, session_sim):
    return generate_play_dataset(layout, seed=11, sim=session_sim)


@pytest.fixture(scope="session")
def force_dataset(layout, session_sim):
    return generate_force_dataset(layout, session_sim.force_presses, seed=12, sim=session_sim)


@pytest.fixture(scope="session")
def pose_dataset(layout, session_sim):
    return generate_pose_dataset(layout, session_sim.pose_trajectories, seed=13, sim=session_sim)


@pytest.fixture(scope="session")
def joystick_dataset(layout, session_sim):
    return generate_joystick_dataset(layout, session_sim.joystick_trajectories, seed=14,
                                     sim=session_sim)


@pytest.fixture
def rng():
    return np.random.default_rng(0)


@pytest.fixture(autouse=True)
def _seed_torch():
    torch.manual_seed(0)
