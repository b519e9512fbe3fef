import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Dict, List, Optional, Union

import numpy as np

from rotkin import (
    KinematicTree, KinematicsError, Pose, check_pose, forward_kinematics, quat_about,
    quat_diff, quat_slerp, quat_to_rotvec, rotation_angle,
)

logger = logging.getLogger(__name__)

Z_AXIS = (0.0, 0.0, 1.0)


class MotionFormatError(ValueError):
    """Raised for malformed motion files or motions that do not fit a character."""
    pass


@dataclass
class ReferenceMotion:
    dt: float
    frames: List[Pose]
    cyclic: bool = False
    cycle_offset: Optional[np.ndarray] = None
    name: str = ''

    def __post_init__(self):
        if not self.dt > 0.0:
            raise MotionFormatError(f"Motion dt must be positive, got {self.dt}")
        if len(self.frames) < 2:
            raise MotionFormatError(f"Motion needs at least 2 frames, got {len(self.frames)}")
        if self.cycle_offset is None:
            if self.cyclic:
                self.cycle_offset = self.frames[-1].root_position - self.frames[0].root_position
            else:
                self.cycle_offset = np.zeros(3)
        self.cycle_offset = np.asarray(self.cycle_offset, dtype=float)

    @property
    def num_frames(self) -> int:
        return len(self.frames)

    @property
    def T_cycle(self) -> float:
        return self.dt * (len(self.frames) - 1)

    @property
    def num_joints(self) -> int:
        return self.frames[0].joint_rotations.shape[0]

    def validate(self, tree: KinematicTree):
        """Check every frame against a character."""
        for t, frame in enumerate(self.frames):
            try:
                check_pose(tree, frame, tol=1e-6)
            except KinematicsError as e:
                raise MotionFormatError(f"Frame {t} does not fit character {tree.name}: {e}")


@dataclass
class FrameSample:
    pose: Pose
    index0: int
    index1: int
    weight: float


@dataclass
class MotionVelocities:
    root_linear: np.ndarray
    root_angular: np.ndarray
    joint_angular: np.ndarray


def interpolate_pose(a: Pose, b: Pose, w: float) -> Pose:
    """Lerp root position, slerp every rotation."""
    joints = np.array([quat_slerp(qa, qb, w) for qa, qb in zip(a.joint_rotations, b.joint_rotations)])
    return Pose(
        (1.0 - w) * a.root_position + w * b.root_position,
        quat_slerp(a.root_rotation, b.root_rotation, w),
        joints.reshape(-1, 4),
    )


def _bracket(motion: ReferenceMotion, phi: float):
    if motion.cyclic:
        phi = phi % 1.0
    else:
        phi = min(max(phi, 0.0), 1.0)
    x = phi * (motion.num_frames - 1)
    i0 = min(int(math.floor(x)), motion.num_frames - 2)
    return i0, x - i0


def frame_at_phase(motion: ReferenceMotion, phi: float) -> FrameSample:
    """Pose at phase phi with the bracketing frame indices and blend weight."""
    i0, w = _bracket(motion, phi)
    if w == 0.0:
        return FrameSample(motion.frames[i0].copy(), i0, i0 + 1, 0.0)
    if w == 1.0:
        return FrameSample(motion.frames[i0 + 1].copy(), i0, i0 + 1, 1.0)
    return FrameSample(interpolate_pose(motion.frames[i0], motion.frames[i0 + 1], w), i0, i0 + 1, w)


def frame_at_time(motion: ReferenceMotion, t: float) -> FrameSample:
    """Pose at time t; cyclic clips accumulate the per-cycle root displacement."""
    if not motion.cyclic:
        return frame_at_phase(motion, t / motion.T_cycle)
    cycles = math.floor(t / motion.T_cycle)
    sample = frame_at_phase(motion, t / motion.T_cycle - cycles)
    sample.pose.root_position = sample.pose.root_position + cycles * motion.cycle_offset
    return sample


def finite_diff_velocities(motion: ReferenceMotion) -> MotionVelocities:
    """Forward-difference velocities; the last frame copies its predecessor or wraps."""
    n = motion.num_frames
    dt = motion.dt
    root_linear = np.zeros((n, 3))
    root_angular = np.zeros((n, 3))
    joint_angular = np.zeros((n, motion.num_joints, 3))
    for t in range(n - 1):
        a, b = motion.frames[t], motion.frames[t + 1]
        root_linear[t] = (b.root_position - a.root_position) / dt
        root_angular[t] = quat_to_rotvec(quat_diff(b.root_rotation, a.root_rotation)) / dt
        for j in range(motion.num_joints):
            joint_angular[t, j] = quat_to_rotvec(quat_diff(b.joint_rotations[j], a.joint_rotations[j])) / dt
    # Frame N-1 duplicates frame 0 for cyclic clips
    last = 0 if motion.cyclic else n - 2
    root_linear[n - 1] = root_linear[last]
    root_angular[n - 1] = root_angular[last]
    joint_angular[n - 1] = joint_angular[last]
    return MotionVelocities(root_linear, root_angular, joint_angular)


def velocity_at_phase(motion: ReferenceMotion, velocities: MotionVelocities, phi: float) -> MotionVelocities:
    """Linearly interpolated velocities at a phase, as single-frame arrays."""
    i0, w = _bracket(motion, phi)

    def blend(arr):
        return (1.0 - w) * arr[i0] + w * arr[i0 + 1]

    return MotionVelocities(blend(velocities.root_linear), blend(velocities.root_angular),
                            blend(velocities.joint_angular))


def joint_angle_rmse(a: ReferenceMotion, b: ReferenceMotion) -> float:
    """RMS of per-frame rotation differences over root and joints."""
    if a.num_frames != b.num_frames:
        raise MotionFormatError(f"Frame counts differ: {a.num_frames} vs {b.num_frames}")
    errors = []
    for fa, fb in zip(a.frames, b.frames):
        for qa, qb in zip(fa.rotations(), fb.rotations()):
            errors.append(rotation_angle(quat_diff(qa, qb)))
    return float(np.sqrt(np.mean(np.square(errors))))


# Motion JSON

def _require(data: Dict, key: str, where: str = 'Motion JSON'):
    if key not in data:
        raise MotionFormatError(f"{where} is missing required field '{key}'")
    return data[key]


def motion_from_dict(data: Dict, tree: Optional[KinematicTree] = None, name: str = '') -> ReferenceMotion:
    dt = float(_require(data, 'dt'))
    raw_frames = _require(data, 'frames')
    frames = []
    for t, raw in enumerate(raw_frames):
        where = f"Motion frame {t}"
        frames.append(Pose(
            np.asarray(_require(raw, 'root_pos', where), dtype=float),
            np.asarray(_require(raw, 'root_rot', where), dtype=float),
            np.asarray(_require(raw, 'joints', where), dtype=float).reshape(-1, 4),
        ))
    motion = ReferenceMotion(dt, frames, bool(data.get('cyclic', False)),
                             data.get('cycle_offset'), data.get('name', name))
    if tree is not None:
        motion.validate(tree)
    return motion


def motion_to_dict(motion: ReferenceMotion) -> Dict:
    return {
        'name': motion.name,
        'dt': motion.dt,
        'cyclic': motion.cyclic,
        'cycle_offset': motion.cycle_offset.tolist(),
        'frames': [frame.to_dict() for frame in motion.frames],
    }


def load_motion(path: Union[str, Path], tree: Optional[KinematicTree] = None) -> ReferenceMotion:
    """Load a Motion JSON file, optionally validating it against a character."""
    path = Path(path)
    try:
        data = json.loads(path.read_text())
    except FileNotFoundError:
        raise MotionFormatError(f"Motion file not found: {path}")
    except json.JSONDecodeError as e:
        raise MotionFormatError(f"Malformed motion JSON {path}: {e}")
    motion = motion_from_dict(data, tree, name=path.stem)
    logger.info(f"Loaded motion {motion.name}: {motion.num_frames} frames, T_cycle={motion.T_cycle:.3f}s")
    return motion


def save_motion(motion: ReferenceMotion, path: Union[str, Path]):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(motion_to_dict(motion)))


# Motion library

@dataclass
class LibraryEntry:
    name: str
    motion: ReferenceMotion
    checkpoint: Optional[Path] = None


@dataclass
class MotionLibrary:
    entries: List[LibraryEntry] = field(default_factory=list)

    def __post_init__(self):
        names = [entry.name for entry in self.entries]
        duplicates = sorted({n for n in names if names.count(n) > 1})
        if duplicates:
            raise MotionFormatError(f"Duplicate library entry names: {duplicates}")

    def __len__(self) -> int:
        return len(self.entries)


def load_library(manifest_path: Union[str, Path], tree: Optional[KinematicTree] = None) -> MotionLibrary:
    """Load a library manifest listing (name, motion, checkpoint)."""
    manifest_path = Path(manifest_path)
    try:
        data = json.loads(manifest_path.read_text())
    except FileNotFoundError:
        raise MotionFormatError(f"Library manifest not found: {manifest_path}")
    except json.JSONDecodeError as e:
        raise MotionFormatError(f"Malformed library manifest {manifest_path}: {e}")
    base = manifest_path.parent
    entries = []
    for i, raw in enumerate(_require(data, 'entries', 'Library manifest')):
        where = f"Library entry {i}"
        name = _require(raw, 'name', where)
        motion = resolve_motion(_require(raw, 'motion', where), tree, base)
        checkpoint = raw.get('checkpoint')
        entries.append(LibraryEntry(name, motion, (base / checkpoint) if checkpoint else None))
    return MotionLibrary(entries)


def save_library(library: MotionLibrary, manifest_path: Union[str, Path], motion_dir: Union[str, Path]):
    """Write library motions and a manifest referencing them."""
    manifest_path = Path(manifest_path)
    motion_dir = Path(motion_dir)
    entries = []
    for entry in library.entries:
        motion_path = motion_dir / f"{entry.name}.json"
        save_motion(entry.motion, motion_path)
        entries.append({
            'name': entry.name,
            'motion': str(motion_path),
            'checkpoint': str(entry.checkpoint) if entry.checkpoint else None,
        })
    manifest_path.write_text(json.dumps({'entries': entries}, indent=2))


# Synthetic clips

def ground_pose(tree: KinematicTree, pose: Pose, height: float = 0.0, ground: float = 0.0) -> Pose:
    """Shift the root vertically so the lowest link point sits at ground + height."""
    fk = forward_kinematics(tree, pose)
    lowest = min(fk.origins[:, 1].min(), fk.tips[:, 1].min(), fk.centers[:, 1].min())
    out = pose.copy()
    out.root_position[1] += ground + height - lowest
    return out


def _planar_pose(tree: KinematicTree, x: float, root_angle: float, joint_angles: Dict[int, float]) -> Pose:
    joints = np.array([quat_about(Z_AXIS, joint_angles.get(j, 0.0)) for j in range(tree.num_joints)])
    return Pose(np.array([x, 0.0, 0.0]), quat_about(Z_AXIS, root_angle), joints.reshape(-1, 4))


def _clip(tree: KinematicTree, n_frames: int, dt: float, cyclic: bool, name: str,
          pose_fn: Callable[[float], Pose]) -> ReferenceMotion:
    frames = [pose_fn(t * dt) for t in range(n_frames)]
    motion = ReferenceMotion(dt, frames, cyclic, name=name)
    logger.debug(f"Synthesized {name}: {n_frames} frames for {tree.name}")
    return motion


def synth_walk(tree: KinematicTree, n_frames: int = 31, dt: float = 1.0 / 30.0, speed: float = 1.2) -> ReferenceMotion:
    """Cyclic planar walk for a torso + two-leg character."""
    period = (n_frames - 1) * dt
    lean = -0.5 * math.pi - 0.05
    hips = [tree.joint_index('thigh_l'), tree.joint_index('thigh_r')]
    knees = [tree.joint_index('shin_l'), tree.joint_index('shin_r')]
    ankles = [tree.joint_index('foot_l'), tree.joint_index('foot_r')]

    def pose_at(t: float) -> Pose:
        angles = {}
        for side, shift in enumerate((0.0, math.pi)):
            w = 2.0 * math.pi * t / period + shift
            angles[hips[side]] = 0.4 * math.sin(w)
            angles[knees[side]] = -0.1 - 0.55 * max(0.0, math.sin(w + 0.8)) ** 2
            angles[ankles[side]] = 0.5 * math.pi + 0.15 * math.sin(w - 0.5)
        return ground_pose(tree, _planar_pose(tree, speed * t, lean, angles))

    return _clip(tree, n_frames, dt, True, 'walk', pose_at)


def synth_hop(tree: KinematicTree, n_frames: int = 25, dt: float = 1.0 / 30.0, height: float = 0.15,
              speed: float = 0.5) -> ReferenceMotion:
    """Cyclic two-footed hop; works for any character with named legs and feet."""
    period = (n_frames - 1) * dt
    legs = [i for i, link in enumerate(tree.links[1:]) if link.name.startswith(('thigh', 'leg'))]
    knees = [i for i, link in enumerate(tree.links[1:]) if link.name.startswith('shin')]
    feet = [i for i, link in enumerate(tree.links[1:]) if link.name.startswith('foot')]

    def pose_at(t: float) -> Pose:
        w = 2.0 * math.pi * t / period
        crouch = 0.5 * (1.0 + math.cos(w))
        angles = {j: 0.1 + 0.4 * crouch for j in legs}
        angles.update({j: -0.6 * crouch for j in knees})
        angles.update({j: 0.5 * math.pi + 0.2 * crouch for j in feet})
        lift = height * max(0.0, math.sin(w - 0.5 * math.pi))
        return ground_pose(tree, _planar_pose(tree, speed * t, -0.5 * math.pi, angles), lift)

    return _clip(tree, n_frames, dt, True, 'hop', pose_at)


def _smoothstep(x: float) -> float:
    x = min(max(x, 0.0), 1.0)
    return x * x * (3.0 - 2.0 * x)


def synth_backflip(tree: KinematicTree, n_frames: int = 64, dt: float = 1.0 / 30.0,
                   apex: float = 0.9) -> ReferenceMotion:
    """Acyclic backflip: crouch, tucked full rotation in flight, landing."""
    duration = (n_frames - 1) * dt
    take_off, touch_down = 0.3, 0.75
    legs = [i for i, link in enumerate(tree.links[1:]) if link.name.startswith(('thigh', 'leg'))]
    knees = [i for i, link in enumerate(tree.links[1:]) if link.name.startswith('shin')]
    feet = [i for i, link in enumerate(tree.links[1:]) if link.name.startswith('foot')]

    def pose_at(t: float) -> Pose:
        s = t / duration
        flight = (s - take_off) / (touch_down - take_off)
        spin = 2.0 * math.pi * _smoothstep(flight)
        tuck = math.sin(math.pi * min(max(flight, 0.0), 1.0))
        crouch = math.exp(-((s - take_off) / 0.08) ** 2) + math.exp(-((s - touch_down) / 0.08) ** 2)
        angles = {j: 0.2 * crouch + 1.4 * tuck for j in legs}
        angles.update({j: -0.8 * crouch - 1.2 * tuck for j in knees})
        angles.update({j: 0.5 * math.pi for j in feet})
        lift = apex * 4.0 * flight * (1.0 - flight) if 0.0 < flight < 1.0 else 0.0
        return ground_pose(tree, _planar_pose(tree, -0.3 * _smoothstep(flight), -0.5 * math.pi + spin, angles), lift)

    return _clip(tree, n_frames, dt, False, 'backflip', pose_at)


SYNTHETIC_CLIPS = {
    'walk': synth_walk,
    'hop': synth_hop,
    'backflip': synth_backflip,
}


def resolve_motion(name: str, tree: Optional[KinematicTree] = None,
                   base: Optional[Path] = None) -> ReferenceMotion:
    """Resolve 'synth:<clip>' or a Motion JSON path."""
    if name.startswith('synth:'):
        clip = name.split(':', 1)[1]
        if clip not in SYNTHETIC_CLIPS:
            raise MotionFormatError(f"Unknown synthetic clip '{clip}', expected one of {sorted(SYNTHETIC_CLIPS)}")
        if tree is None:
            raise MotionFormatError("Synthetic clips need a character")
        return SYNTHETIC_CLIPS[clip](tree)
    path = Path(name)
    if base is not None and not path.is_absolute() and not path.exists():
        path = base / path
    return load_motion(path, tree)
