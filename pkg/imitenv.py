import json
import logging
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, List, Optional, Tuple, Union

import numpy as np

from dynsim import (
    DEFAULT_INTEGRATOR, INTEGRATORS, ContactParams, PlanarModel, SimState, SimulationError, Simulator, perp, planar_coordinates,
    planar_model, pose_from_coordinates,
)
from refmotion import (
    ReferenceMotion, finite_diff_velocities, frame_at_phase, frame_at_time, resolve_motion,
)
from rotkin import (
    KinematicTree, Pose, com_position, end_effector_positions, forward_kinematics, load_character,
    quat_diff, rotation_angle,
)

logger = logging.getLogger(__name__)

FEATURES_PER_LINK = 7  # relative COM (2), cos/sin (2), COM velocity (2), angular velocity (1)


class EpisodeError(RuntimeError):
    """Raised when an episode is driven outside its contract."""
    pass


@dataclass
class RewardWeights:
    w_p: float = 0.65
    w_v: float = 0.1
    w_e: float = 0.15
    w_c: float = 0.1
    scale_p: float = 2.0
    scale_v: float = 0.1
    scale_e: float = 40.0
    scale_c: float = 10.0

    def __post_init__(self):
        total = self.w_p + self.w_v + self.w_e + self.w_c
        if abs(total - 1.0) > 1e-12:
            raise EpisodeError(f"Reward weights must sum to 1.0, got {total}")


@dataclass
class PerturbationConfig:
    interval: float = 2.0
    force: float = 100.0
    duration: float = 0.2
    link: int = 0

    def force_at(self, elapsed: float) -> Optional[np.ndarray]:
        """Alternating horizontal push, active for `duration` after every interval."""
        if elapsed < self.interval:
            return None
        push = int(elapsed // self.interval)
        if elapsed - push * self.interval >= self.duration:
            return None
        sign = 1.0 if push % 2 else -1.0
        return np.array([sign * self.force, 0.0])


@dataclass
class EpisodeConfig:
    horizon: Optional[float] = None
    control_rate: int = 30
    sim_rate: int = 1200
    allow_torso_contact: bool = False
    enable_termination: bool = True
    perturbation: Optional[PerturbationConfig] = None
    integrator: str = DEFAULT_INTEGRATOR

    def __post_init__(self):
        if self.sim_rate % self.control_rate != 0:
            raise EpisodeError(f"sim_rate {self.sim_rate} is not divisible by control_rate {self.control_rate}")
        if self.integrator not in INTEGRATORS:
            raise EpisodeError(f"Unknown integrator '{self.integrator}', expected one of {INTEGRATORS}")
        if isinstance(self.perturbation, dict):
            self.perturbation = PerturbationConfig(**self.perturbation)

    @property
    def substeps(self) -> int:
        return self.sim_rate // self.control_rate

    def horizon_for(self, motion: ReferenceMotion) -> float:
        """20 s for cyclic clips, T_cycle for acyclic ones, unless set."""
        if self.horizon is not None:
            return self.horizon
        return 20.0 if motion.cyclic else motion.T_cycle


@dataclass
class TrackingFeatures:
    rotations: np.ndarray
    angular_velocities: np.ndarray
    end_effectors: np.ndarray
    com: np.ndarray


def tracking_features(tree: KinematicTree, pose: Pose, root_angular, joint_angular) -> TrackingFeatures:
    """Reward inputs: rotations and local angular velocities (root first), end-effectors, COM."""
    fk = forward_kinematics(tree, pose)
    velocities = np.vstack([np.asarray(root_angular, dtype=float)[None, :],
                            np.asarray(joint_angular, dtype=float).reshape(-1, 3)])
    return TrackingFeatures(pose.rotations(), velocities, end_effector_positions(tree, pose, fk),
                            com_position(tree, pose, fk))


def compute_reward(sim: TrackingFeatures, ref: TrackingFeatures, weights: Optional[RewardWeights] = None) -> float:
    """Four-term imitation reward in (0, 1]."""
    weights = weights or RewardWeights()
    pose_err = sum(rotation_angle(quat_diff(qr, qs)) ** 2 for qr, qs in zip(ref.rotations, sim.rotations))
    vel_err = float(np.sum((ref.angular_velocities - sim.angular_velocities) ** 2))
    ee_err = float(np.sum((ref.end_effectors - sim.end_effectors) ** 2))
    com_err = float(np.sum((ref.com - sim.com) ** 2))
    return (weights.w_p * math.exp(-weights.scale_p * pose_err)
            + weights.w_v * math.exp(-weights.scale_v * vel_err)
            + weights.w_e * math.exp(-weights.scale_e * ee_err)
            + weights.w_c * math.exp(-weights.scale_c * com_err))


def observe(model: Union[KinematicTree, PlanarModel], state: SimState, phase: float,
            ground_height: float = 0.0) -> np.ndarray:
    """Per-link features relative to the root, root height, then phase."""
    pm = planar_model(model)
    q, qdot = state.q, state.qdot
    phi, pivots = pm.link_frames(q)
    omega, v_pivots = pm.link_velocities(q, qdot, phi, pivots)
    coms = pm.link_coms(q, phi, pivots)
    v_coms = v_pivots + omega[:, None] * perp(coms - pivots)
    per_link = np.column_stack([coms - q[:2], np.cos(phi), np.sin(phi), v_coms, omega])
    return np.concatenate([per_link.ravel(), [q[1] - ground_height, phase]])


def obs_dim(tree: KinematicTree) -> int:
    return FEATURES_PER_LINK * tree.num_links + 2


def check_termination(sim: Simulator, config: EpisodeConfig) -> bool:
    """True iff a torso link touched ground and torso contact is not allowed."""
    if config.allow_torso_contact:
        return False
    return sim.torso_contact()


class ReferenceTrack:
    """Reference clip with precomputed planar coordinates and velocities."""

    def __init__(self, tree: KinematicTree, motion: ReferenceMotion):
        self.tree = tree
        self.motion = motion
        self.velocities = finite_diff_velocities(motion)
        n = motion.num_frames
        self.coords = np.zeros((n, tree.num_links + 2))
        self.coords[0] = planar_coordinates(tree, motion.frames[0])
        for t in range(1, n):
            self.coords[t] = planar_coordinates(tree, motion.frames[t], reference=self.coords[t - 1])
        self.qdots = np.column_stack([
            self.velocities.root_linear[:, :2],
            self.velocities.root_angular[:, 2],
            self.velocities.joint_angular[:, :, 2],
        ])

    def _blend(self, arr: np.ndarray, phi: float) -> np.ndarray:
        sample = frame_at_phase(self.motion, phi)
        return (1.0 - sample.weight) * arr[sample.index0] + sample.weight * arr[sample.index1]

    def phase_of(self, t: float) -> float:
        if self.motion.cyclic:
            return (t / self.motion.T_cycle) % 1.0
        return min(max(t / self.motion.T_cycle, 0.0), 1.0)

    def state_at(self, t: float) -> SimState:
        """Reference SimState at time t, including accumulated cycle displacement."""
        phi = self.phase_of(t)
        pose = frame_at_time(self.motion, t).pose
        q = planar_coordinates(self.tree, pose, reference=self._blend(self.coords, phi))
        return SimState(q, self._blend(self.qdots, phi))

    def frame_state(self, index: int) -> SimState:
        """Reference SimState exactly at a frame."""
        return SimState(self.coords[index].copy(), self.qdots[index].copy())

    def features_at(self, t: float) -> TrackingFeatures:
        phi = self.phase_of(t)
        pose = frame_at_time(self.motion, t).pose
        qdot = self._blend(self.qdots, phi)
        return _features_from_qdot(self.tree, pose, qdot)


def _features_from_qdot(tree: KinematicTree, pose: Pose, qdot: np.ndarray) -> TrackingFeatures:
    root_angular = np.array([0.0, 0.0, qdot[2]])
    joint_angular = np.column_stack([np.zeros((len(qdot) - 3, 2)), qdot[3:]])
    return tracking_features(tree, pose, root_angular, joint_angular)


def reference_state(model: KinematicTree, motion: ReferenceMotion, t: float) -> SimState:
    """Reference SimState of a clip at time t."""
    return ReferenceTrack(model, motion).state_at(t)


class ImitationEnv:
    """Episode stepping of a PD-actuated character against a reference clip."""

    def __init__(self, tree: KinematicTree, motion: ReferenceMotion, config: Optional[EpisodeConfig] = None,
                 weights: Optional[RewardWeights] = None, contact: Optional[ContactParams] = None):
        self.tree = tree
        self.motion = motion
        self.config = config or EpisodeConfig()
        self.weights = weights or RewardWeights()
        self.sim = Simulator(tree, contact, dt=1.0 / self.config.sim_rate, integrator=self.config.integrator)
        self.track = ReferenceTrack(tree, motion)
        self.control_dt = 1.0 / self.config.control_rate
        self.horizon = self.config.horizon_for(motion)
        self.done = True
        self.terminated = False
        self.start_time = 0.0
        self.steps = 0
        self.max_steps = 0
        self.rewards: List[float] = []

    @property
    def obs_dim(self) -> int:
        return obs_dim(self.tree)

    @property
    def action_dim(self) -> int:
        return self.tree.num_joints

    @property
    def time(self) -> float:
        return self.start_time + self.steps * self.control_dt

    @property
    def phase(self) -> float:
        phase = self.track.phase_of(self.time)
        if self.motion.cyclic and abs(phase - 1.0) < 1e-9:
            phase = 0.0
        return phase

    def _episode_steps(self, start_time: float) -> int:
        if self.motion.cyclic or self.config.horizon is not None:
            seconds = self.horizon
        else:
            seconds = self.motion.T_cycle - start_time
        return max(1, int(math.floor(seconds * self.config.control_rate + 1e-9)))

    def reset(self, state: SimState, phase: float) -> np.ndarray:
        """Start an episode from a state at a reference phase."""
        self.sim.set_state(state)
        self.start_time = phase * self.motion.T_cycle
        self.steps = 0
        self.max_steps = self._episode_steps(self.start_time)
        self.done = False
        self.terminated = False
        self.rewards = []
        return self.observe()

    def observe(self) -> np.ndarray:
        return observe(self.sim.model, self.sim.get_state(), self.phase, self.sim.contact.ground_height)

    def step(self, action) -> Tuple[np.ndarray, float, bool]:
        """Hold PD targets for one control period."""
        if self.done:
            raise EpisodeError("Episode is done; call reset before stepping again")
        action = np.asarray(action, dtype=float)
        if action.shape != (self.action_dim,) or not np.all(np.isfinite(action)):
            raise EpisodeError(f"Action must be {self.action_dim} finite PD targets, got {action}")

        external = None
        if self.config.perturbation is not None:
            force = self.config.perturbation.force_at(self.steps * self.control_dt)
            if force is not None:
                external = [(self.config.perturbation.link, force)]

        diverged = False
        try:
            self.sim.step_pd(action, self.config.substeps, external)
        except SimulationError as e:
            logger.warning(f"Simulation diverged at t={self.time:.3f}s: {e}")
            diverged = True
        self.steps += 1

        fell = self.config.enable_termination and check_termination(self.sim, self.config)
        self.terminated = diverged or fell
        if self.terminated:
            reward = 0.0
        else:
            state = self.sim.get_state()
            sim_features = _features_from_qdot(self.tree, pose_from_coordinates(self.tree, state.q), state.qdot)
            reward = compute_reward(sim_features, self.track.features_at(self.time), self.weights)
        self.rewards.append(reward)
        self.done = self.terminated or self.steps >= self.max_steps
        obs = self.observe() if not diverged else np.zeros(self.obs_dim)
        return obs, reward, self.done

    def normalized_return(self) -> float:
        """Episode reward sum divided by the episode's maximum step count."""
        if self.max_steps == 0:
            return 0.0
        return float(sum(self.rewards) / self.max_steps)


def env_from_config(data: Dict, base: Optional[Path] = None) -> ImitationEnv:
    """Build an environment from EpisodeConfig fields plus character and motion paths."""
    base = base or Path('.')
    try:
        character_path = Path(data['character'])
        motion_name = data['motion']
    except KeyError as e:
        raise EpisodeError(f"Environment config is missing required field {e}")
    if not character_path.is_absolute() and not character_path.exists():
        character_path = base / character_path
    tree = load_character(character_path)
    motion = resolve_motion(motion_name, tree, base)
    episode = {k: v for k, v in data.items() if k in EpisodeConfig.__dataclass_fields__}
    contact = ContactParams(**data.get('contact', {}))
    return ImitationEnv(tree, motion, EpisodeConfig(**episode), contact=contact)


def load_env_config(path: Union[str, Path]) -> ImitationEnv:
    path = Path(path)
    try:
        data = json.loads(path.read_text())
    except FileNotFoundError:
        raise EpisodeError(f"Environment config not found: {path}")
    return env_from_config(data, path.parent)
