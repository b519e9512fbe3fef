import math
from pathlib import Path

import numpy as np
import pytest

from dynsim import SimState, planar_coordinates
from imitenv import (
    EpisodeConfig, EpisodeError, ImitationEnv, PerturbationConfig, ReferenceTrack, RewardWeights,
    TrackingFeatures, check_termination, compute_reward, env_from_config, obs_dim, observe, reference_state,
    tracking_features,
)
from rotkin import quat_about, quat_mul

Z = [0.0, 0.0, 1.0]
CONFIG_DIR = Path(__file__).resolve().parent.parent / 'configs'


@pytest.fixture
def ref_features(walker7, walk_clip):
    return tracking_features(walker7, walk_clip.frames[5], np.array([0.0, 0.0, 0.4]),
                             np.tile([0.0, 0.0, -0.3], (walker7.num_joints, 1)))


def with_changes(features, rotation=None, velocity=0.0, effector=0.0, com=0.0):
    rotations = features.rotations.copy()
    if rotation is not None:
        rotations[2] = quat_mul(rotations[2], quat_about(Z, rotation))
    return TrackingFeatures(rotations, features.angular_velocities + velocity,
                            features.end_effectors + effector, features.com + com)


# Reward

def test_perfect_tracking_earns_full_reward(ref_features):
    assert compute_reward(ref_features, ref_features) == pytest.approx(1.0, abs=1e-12)


def test_quarter_turn_on_one_joint(ref_features):
    reward = compute_reward(with_changes(ref_features, rotation=math.pi / 2), ref_features)
    expected = 0.65 * math.exp(-2.0 * (math.pi / 2) ** 2) + 0.35
    assert reward == pytest.approx(expected, abs=1e-9)
    assert reward == pytest.approx(0.3547, abs=1e-4)


@pytest.mark.parametrize('term', ['rotation', 'velocity', 'effector', 'com'])
def test_reward_decreases_in_each_error(ref_features, term):
    rewards = [compute_reward(with_changes(ref_features, **{term: size}), ref_features) for size in (0.05, 0.1, 0.2)]
    assert rewards[0] > rewards[1] > rewards[2] > 0.0


def test_reward_stays_in_unit_interval(ref_features):
    far = with_changes(ref_features, rotation=3.0, velocity=50.0, effector=5.0, com=5.0)
    assert 0.0 < compute_reward(far, ref_features) <= 1.0


def test_reward_weights_must_sum_to_one():
    with pytest.raises(EpisodeError, match='sum to 1'):
        RewardWeights(w_p=0.7)


# Observation

def test_observation_size(walker7, walk_clip):
    state = ReferenceTrack(walker7, walk_clip).frame_state(0)
    assert obs_dim(walker7) == 51
    assert observe(walker7, state, 0.0).shape == (51,)


def test_observation_ignores_horizontal_position(walker7, walk_clip):
    state = ReferenceTrack(walker7, walk_clip).frame_state(4)
    shifted = state.copy()
    shifted.q[0] += 3.7
    np.testing.assert_allclose(observe(walker7, shifted, 0.3), observe(walker7, state, 0.3), atol=1e-12)


def test_observation_ends_with_phase_and_height(walker7, walk_clip):
    state = ReferenceTrack(walker7, walk_clip).frame_state(0)
    obs = observe(walker7, state, 0.25, ground_height=0.1)
    assert obs[-1] == 0.25
    assert obs[-2] == pytest.approx(state.q[1] - 0.1)


# Reference track

def test_frame_state_matches_reference_pose(walker7, walk_clip):
    track = ReferenceTrack(walker7, walk_clip)
    np.testing.assert_allclose(track.frame_state(0).q, planar_coordinates(walker7, walk_clip.frames[0]))
    assert track.coords.shape == (walk_clip.num_frames, walker7.num_links + 2)


def test_state_after_one_cycle_is_displaced(walker7, walk_clip):
    track = ReferenceTrack(walker7, walk_clip)
    start = track.state_at(0.0)
    later = track.state_at(walk_clip.T_cycle)
    np.testing.assert_allclose(later.q[1:], start.q[1:], atol=1e-9)
    assert later.q[0] - start.q[0] == pytest.approx(walk_clip.cycle_offset[0])


def test_reference_state_helper(walker7, walk_clip):
    state = reference_state(walker7, walk_clip, 0.0)
    np.testing.assert_allclose(state.q, ReferenceTrack(walker7, walk_clip).frame_state(0).q, atol=1e-12)


# Termination

def test_feet_only_contact_does_not_terminate(walker7, walk_clip):
    env = ImitationEnv(walker7, walk_clip)
    state = env.track.frame_state(0)
    env.sim.set_state(state)
    env.sim.step_pd(state.q[3:], substeps=1)
    assert not check_termination(env.sim, env.config)


def test_torso_contact_terminates_unless_allowed(walker7, walk_clip):
    env = ImitationEnv(walker7, walk_clip)
    q = np.zeros(9)
    q[1] = -0.001
    env.sim.set_state(SimState(q, np.zeros(9)))
    env.sim.step_pd(np.zeros(6), substeps=1)
    assert check_termination(env.sim, EpisodeConfig())
    assert not check_termination(env.sim, EpisodeConfig(allow_torso_contact=True))


def test_zero_torque_character_falls(walker7, walk_clip, mocker):
    mocker.patch('dynsim.pd_torques', return_value=np.zeros(6))
    env = ImitationEnv(walker7, walk_clip)
    env.reset(env.track.frame_state(0), 0.0)
    done = False
    while not done:
        _, reward, done = env.step(np.zeros(6))
    assert env.terminated
    assert reward == 0.0
    assert env.time <= 5.0


# Episodes

def test_default_rates_give_forty_substeps(walker7, walk_clip):
    env = ImitationEnv(walker7, walk_clip)
    assert env.config.substeps == 40
    state = env.track.frame_state(0)
    env.reset(state, 0.0)
    env.step(state.q[3:])
    assert len(env.sim.contact_log) == 40


def test_rates_must_divide():
    with pytest.raises(EpisodeError, match='divisible'):
        EpisodeConfig(control_rate=35)


def test_step_after_done_is_refused(walker7, walk_clip):
    env = ImitationEnv(walker7, walk_clip, EpisodeConfig(horizon=1.0 / 30.0))
    state = env.track.frame_state(0)
    env.reset(state, 0.0)
    _, _, done = env.step(state.q[3:])
    assert done
    with pytest.raises(EpisodeError, match='reset'):
        env.step(state.q[3:])


def test_non_finite_action_is_rejected(walker7, walk_clip):
    env = ImitationEnv(walker7, walk_clip)
    env.reset(env.track.frame_state(0), 0.0)
    action = np.zeros(6)
    action[2] = np.inf
    with pytest.raises(EpisodeError, match='finite'):
        env.step(action)
    with pytest.raises(EpisodeError, match='finite'):
        env.step(np.zeros(4))
    assert env.steps == 0 and not env.done


def test_unknown_integrator_is_rejected():
    assert EpisodeConfig().integrator == 'rk4'
    with pytest.raises(EpisodeError, match='integrator'):
        EpisodeConfig(integrator='verlet')


def test_cyclic_phase_returns_after_one_cycle(walker7, walk_clip):
    env = ImitationEnv(walker7, walk_clip, EpisodeConfig(horizon=2.0, enable_termination=False))
    state = env.track.frame_state(0)
    obs = env.reset(state, 0.0)
    assert obs[-1] == 0.0
    steps = int(round(walk_clip.T_cycle * 30))
    for step in range(steps):
        env.step(env.track.state_at((step + 1) / 30.0).q[3:])
    assert env.phase == pytest.approx(0.0, abs=1e-9)


def test_normalized_return_is_a_fraction(walker7, walk_clip):
    env = ImitationEnv(walker7, walk_clip, EpisodeConfig(horizon=0.2))
    env.reset(env.track.frame_state(0), 0.0)
    done = False
    while not done:
        _, reward, done = env.step(env.track.state_at(env.time + env.control_dt).q[3:])
        assert 0.0 <= reward <= 1.0
    assert env.max_steps == 6
    assert 0.0 < env.normalized_return() <= 1.0


def test_default_horizons(walker7, walk_clip, flipper5, backflip_clip):
    assert EpisodeConfig().horizon_for(walk_clip) == 20.0
    assert EpisodeConfig().horizon_for(backflip_clip) == pytest.approx(2.1)
    env = ImitationEnv(flipper5, backflip_clip, EpisodeConfig(allow_torso_contact=True))
    env.reset(env.track.frame_state(0), 0.0)
    assert env.max_steps == 63
    env.reset(env.track.frame_state(0), 0.5)
    assert env.max_steps == 31


def test_perturbation_schedule():
    push = PerturbationConfig(interval=2.0, force=100.0, duration=0.2)
    assert push.force_at(1.0) is None
    np.testing.assert_array_equal(push.force_at(2.05), [100.0, 0.0])
    assert push.force_at(2.5) is None
    np.testing.assert_array_equal(push.force_at(4.1), [-100.0, 0.0])


def test_env_from_config_resolves_relative_paths():
    data = {
        'character': '../characters/walker7.json',
        'motion': 'synth:hop',
        'allow_torso_contact': True,
        'perturbation': {'interval': 1.0, 'force': 50.0},
        'contact': {'mu': 0.5},
    }
    env = env_from_config(data, CONFIG_DIR)
    assert env.tree.name == 'walker7'
    assert env.motion.name == 'hop'
    assert env.config.allow_torso_contact
    assert env.config.perturbation.force == 50.0
    assert env.sim.contact.mu == 0.5


def test_env_from_config_needs_character():
    with pytest.raises(EpisodeError, match='character'):
        env_from_config({'motion': 'synth:walk'})
