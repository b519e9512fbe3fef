from pathlib import Path

import numpy as np
import pytest

from refmotion import synth_backflip, synth_hop, synth_walk
from rotkin import KinematicTree, Link, load_character

REPO_DIR = Path(__file__).resolve().parent.parent
CHARACTER_DIR = REPO_DIR / 'characters'


@pytest.fixture(scope='session')
def walker7():
    return load_character(CHARACTER_DIR / 'walker7.json')


@pytest.fixture(scope='session')
def flipper5():
    return load_character(CHARACTER_DIR / 'flipper5.json')


@pytest.fixture(scope='session')
def walk_clip(walker7):
    return synth_walk(walker7)


@pytest.fixture(scope='session')
def hop_clip(walker7):
    return synth_hop(walker7)


@pytest.fixture(scope='session')
def backflip_clip(flipper5):
    return synth_backflip(flipper5)


@pytest.fixture
def chain2():
    """Unit-length root link with one revolute child at its tip."""
    return KinematicTree([
        Link(parent=-1, joint_type='free', offset=[0.0, 0.0, 0.0], length=1.0, mass=1.0, inertia=1.0 / 12.0),
        Link(parent=0, joint_type='revolute', offset=[1.0, 0.0, 0.0], length=1.0, mass=1.0, inertia=1.0 / 12.0,
             kp=10.0, kd=1.0, torque_limit=100.0, name='elbow'),
    ], end_effectors=[1], name='chain2')


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def log_dir(tmp_path, monkeypatch):
    path = tmp_path / 'logs'
    monkeypatch.setenv('SFVLAB_LOG_DIR', str(path))
    monkeypatch.setattr('logging_config.LOG_DIR', str(path))
    return path
