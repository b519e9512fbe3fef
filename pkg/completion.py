import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Union

from dynsim import SimState, planar_coordinates
from imitenv import EpisodeConfig, ImitationEnv
from refmotion import MotionLibrary
from rlcore import Agent, CheckpointError, load_checkpoint
from rotkin import KinematicTree, Pose, check_pose, quat_diff, rotation_angle

logger = logging.getLogger(__name__)


class CompletionError(RuntimeError):
    """Raised when a motion completion cannot be performed."""
    pass


@dataclass
class CompletionQuery:
    pose: Pose
    duration: float

    def __post_init__(self):
        if self.duration < 0.0:
            raise CompletionError(f"Rollout duration must be non-negative, got {self.duration}")


@dataclass
class PoseMatch:
    motion_index: int
    frame_index: int
    distance: float
    name: str = ''


@dataclass
class CompletionResult:
    match: PoseMatch
    dt: float
    planned_steps: int = 0
    states: List[SimState] = field(default_factory=list)
    rewards: List[float] = field(default_factory=list)

    @property
    def normalized_return(self) -> float:
        if self.planned_steps == 0:
            return 0.0
        return float(sum(self.rewards) / self.planned_steps)

    def to_dict(self) -> Dict:
        return {
            'match': {
                'name': self.match.name,
                'motion_index': self.match.motion_index,
                'frame_index': self.match.frame_index,
                'distance': self.match.distance,
            },
            'dt': self.dt,
            'normalized_return': self.normalized_return,
            'rewards': list(self.rewards),
            'states': [{'q': s.q.tolist(), 'qdot': s.qdot.tolist()} for s in self.states],
        }


def pose_distance(a: Pose, b: Pose) -> float:
    """Sum of squared difference angles over the root and every joint."""
    return float(sum(rotation_angle(quat_diff(qa, qb)) ** 2 for qa, qb in zip(a.rotations(), b.rotations())))


def match_pose(library: MotionLibrary, query: Pose) -> PoseMatch:
    """Closest library frame; ties go to the lowest motion index, then the earliest frame."""
    if len(library) == 0:
        raise CompletionError("Cannot match against an empty motion library")
    best: Optional[PoseMatch] = None
    for i, entry in enumerate(library.entries):
        for t, frame in enumerate(entry.motion.frames):
            d = pose_distance(query, frame)
            if best is None or d < best.distance:
                best = PoseMatch(i, t, d, entry.name)
    logger.info(f"Matched query to '{best.name}' frame {best.frame_index} (distance {best.distance:.4f})")
    return best


def load_policy(entry) -> Agent:
    if entry.checkpoint is None:
        raise CompletionError(f"Library entry '{entry.name}' has no policy checkpoint")
    try:
        return load_checkpoint(entry.checkpoint).agent()
    except CheckpointError as e:
        raise CompletionError(f"Cannot load policy for library entry '{entry.name}': {e}")


def complete_motion(library: MotionLibrary, tree: KinematicTree, query: CompletionQuery,
                    config: Optional[EpisodeConfig] = None, agent: Optional[Agent] = None) -> CompletionResult:
    """Roll out the matched policy from the query pose with the matched frame's velocity."""
    check_pose(tree, query.pose)
    match = match_pose(library, query.pose)
    entry = library.entries[match.motion_index]
    agent = agent or load_policy(entry)

    control_rate = config.control_rate if config else 30
    steps = int(round(query.duration * control_rate))
    config = config or EpisodeConfig(horizon=max(query.duration, 1.0 / control_rate), enable_termination=False)
    env = ImitationEnv(tree, entry.motion, config)
    if agent.obs_dim != env.obs_dim or agent.action_dim != env.action_dim:
        raise CompletionError(f"Policy for '{entry.name}' expects obs/action dims "
                              f"{agent.obs_dim}/{agent.action_dim}, character has {env.obs_dim}/{env.action_dim}")

    q = planar_coordinates(tree, query.pose, reference=env.track.coords[match.frame_index])
    state = SimState(q, env.track.qdots[match.frame_index].copy())
    phase = match.frame_index * entry.motion.dt / entry.motion.T_cycle
    if entry.motion.cyclic:
        phase = math.fmod(phase, 1.0)

    obs = env.reset(state, phase)
    env.max_steps = max(steps, 1)
    result = CompletionResult(match, 1.0 / control_rate, steps, [env.sim.get_state()])
    for _ in range(steps):
        action = agent.mean_action(obs[None, :])[0]
        obs, reward, done = env.step(action)
        result.states.append(env.sim.get_state())
        result.rewards.append(reward)
        if done:
            break
    logger.info(f"Completed {len(result.states) - 1} steps from '{entry.name}', return {result.normalized_return:.4f}")
    return result


def save_completion(result: CompletionResult, path: Union[str, Path]):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(result.to_dict(), indent=2))
