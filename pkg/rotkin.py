import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Union

import numpy as np

logger = logging.getLogger(__name__)

IDENTITY = np.array([1.0, 0.0, 0.0, 0.0])
Z_AXIS = np.array([0.0, 0.0, 1.0])
JOINT_TYPES = ('free', 'revolute', 'spherical')
JOINT_DOFS = {'free': 0, 'revolute': 1, 'spherical': 3}


class KinematicsError(ValueError):
    """Raised for malformed characters, poses or rotations."""
    pass


# Quaternion algebra (Hamilton product, scalar first, w >= 0 on output)

def quat_normalize(q) -> np.ndarray:
    """Normalize a quaternion and canonicalize it to w >= 0."""
    q = np.asarray(q, dtype=float)
    norm = np.linalg.norm(q)
    if not np.isfinite(norm) or norm < 1e-12:
        raise KinematicsError(f"Cannot normalize quaternion {q}")
    q = q / norm
    if q[0] < 0.0:
        q = -q
    return q


def quat_conjugate(q) -> np.ndarray:
    q = np.asarray(q, dtype=float)
    return np.array([q[0], -q[1], -q[2], -q[3]])


def _hamilton(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    aw, ax, ay, az = a
    bw, bx, by, bz = b
    return np.array([
        aw * bw - ax * bx - ay * by - az * bz,
        aw * bx + ax * bw + ay * bz - az * by,
        aw * by - ax * bz + ay * bw + az * bx,
        aw * bz + ax * by - ay * bx + az * bw,
    ])


def quat_mul(a, b) -> np.ndarray:
    """Hamilton product a ∘ b, renormalized."""
    return quat_normalize(_hamilton(np.asarray(a, dtype=float), np.asarray(b, dtype=float)))


def quat_diff(a, b) -> np.ndarray:
    """Quaternion difference a ⊖ b = a ∘ conj(b)."""
    return quat_mul(a, quat_conjugate(b))


def rotation_angle(q) -> float:
    """Scalar rotation of a quaternion in [0, π]: 2·acos|w|, equal to 2·asin‖v‖ for a unit quaternion."""
    q = np.asarray(q, dtype=float)
    w = min(abs(q[0]), 1.0)
    if w > 0.999:
        # acos is ill-conditioned near identity
        return 2.0 * math.asin(min(float(np.linalg.norm(q[1:])), 1.0))
    return 2.0 * math.acos(w)


def quat_rotate(q, v) -> np.ndarray:
    """Rotate 3-vector(s) v by q."""
    return np.asarray(v, dtype=float) @ quat_to_matrix(q).T


def quat_to_matrix(q) -> np.ndarray:
    w, x, y, z = np.asarray(q, dtype=float)
    return np.array([
        [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
        [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
        [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
    ])


def quat_from_rotvec(r) -> np.ndarray:
    """Exponential map: rotation vector (axis * angle) to quaternion."""
    r = np.asarray(r, dtype=float)
    angle = float(np.linalg.norm(r))
    if angle < 1e-12:
        return quat_normalize(np.concatenate(([1.0], 0.5 * r)))
    half = 0.5 * angle
    return quat_normalize(np.concatenate(([math.cos(half)], math.sin(half) * r / angle)))


def quat_to_rotvec(q) -> np.ndarray:
    """Logarithm map: quaternion to rotation vector with angle in [0, π]."""
    q = quat_normalize(q)
    v = q[1:]
    s = float(np.linalg.norm(v))
    if s < 1e-12:
        return 2.0 * v
    return v / s * (2.0 * math.atan2(s, q[0]))


def quat_about(axis, angle: float) -> np.ndarray:
    """Quaternion for a rotation of angle about axis."""
    axis = np.asarray(axis, dtype=float)
    return quat_from_rotvec(axis / np.linalg.norm(axis) * angle)


def quat_slerp(a, b, t: float) -> np.ndarray:
    """Spherical linear interpolation along the shorter arc."""
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    dot = float(np.dot(a, b))
    if dot < 0.0:
        b = -b
        dot = -dot
    if dot > 0.9995:
        return quat_normalize(a + t * (b - a))
    theta = math.acos(min(dot, 1.0))
    sin_theta = math.sin(theta)
    return quat_normalize((math.sin((1.0 - t) * theta) * a + math.sin(t * theta) * b) / sin_theta)


@dataclass
class AxisAngle:
    axis: np.ndarray
    angle: float

    def __post_init__(self):
        self.axis = np.asarray(self.axis, dtype=float)
        self.angle = float(self.angle)

    def canonical(self) -> 'AxisAngle':
        """Return the equivalent axis-angle with angle in [0, π]."""
        if abs(self.angle) < 1e-15:
            return AxisAngle(np.array([1.0, 0.0, 0.0]), 0.0)
        norm = np.linalg.norm(self.axis)
        if norm < 1e-12:
            raise KinematicsError("Axis-angle with nonzero angle needs a nonzero axis")
        axis = self.axis / norm
        angle = math.fmod(self.angle, 2.0 * math.pi)
        if angle < 0.0:
            angle += 2.0 * math.pi
        if angle > math.pi:
            angle = 2.0 * math.pi - angle
            axis = -axis
        return AxisAngle(axis, angle)


def axis_angle_to_quat(aa: AxisAngle) -> np.ndarray:
    aa = aa.canonical()
    return quat_from_rotvec(aa.axis * aa.angle)


def quat_to_axis_angle(q) -> AxisAngle:
    r = quat_to_rotvec(q)
    angle = float(np.linalg.norm(r))
    if angle < 1e-15:
        return AxisAngle(np.array([1.0, 0.0, 0.0]), 0.0)
    return AxisAngle(r / angle, angle)


def axis_angle_convert(x: Union[AxisAngle, Sequence[float]]) -> Union[np.ndarray, AxisAngle]:
    """Convert axis-angle to quaternion or quaternion to axis-angle."""
    if isinstance(x, AxisAngle):
        return axis_angle_to_quat(x)
    return quat_to_axis_angle(x)


# Projection

@dataclass
class WeakPerspectiveCamera:
    scale: float
    translate: np.ndarray = field(default_factory=lambda: np.zeros(2))

    def __post_init__(self):
        self.scale = float(self.scale)
        self.translate = np.asarray(self.translate, dtype=float)
        if not self.scale > 0.0:
            raise KinematicsError(f"Camera scale must be positive, got {self.scale}")
        if self.translate.shape != (2,):
            raise KinematicsError(f"Camera translate must be a 2-vector, got shape {self.translate.shape}")

    def to_dict(self) -> Dict:
        return {'scale': self.scale, 'translate': self.translate.tolist()}


def project_weak_perspective(camera: WeakPerspectiveCamera, p) -> np.ndarray:
    """Project 3D point(s) with scale * (x, y) + translate."""
    p = np.asarray(p, dtype=float)
    return camera.scale * p[..., :2] + camera.translate


# Kinematic trees

@dataclass
class Link:
    parent: int
    joint_type: str
    offset: np.ndarray
    length: float
    mass: float
    inertia: float
    axis: np.ndarray = field(default_factory=lambda: Z_AXIS.copy())
    kp: float = 0.0
    kd: float = 0.0
    torque_limit: float = 0.0
    name: str = ''
    torso: bool = False

    def __post_init__(self):
        self.offset = np.asarray(self.offset, dtype=float)
        self.axis = np.asarray(self.axis, dtype=float)

    @property
    def dofs(self) -> int:
        return JOINT_DOFS[self.joint_type]


@dataclass
class KinematicTree:
    links: List[Link]
    end_effectors: List[int]
    planar: bool = True
    name: str = ''

    def __post_init__(self):
        self.validate()

    def validate(self):
        """Check topology, physical quantities and end-effector indices."""
        if not self.links:
            raise KinematicsError("Kinematic tree has no links")
        roots = [i for i, link in enumerate(self.links) if link.parent == -1]
        if roots != [0]:
            raise KinematicsError(f"Tree needs exactly one root at index 0, found roots {roots}")
        for i, link in enumerate(self.links):
            if i > 0 and not 0 <= link.parent < i:
                raise KinematicsError(f"Link {i} parent {link.parent} breaks topological order")
            if link.joint_type not in JOINT_TYPES:
                raise KinematicsError(f"Link {i} has unknown joint type '{link.joint_type}'")
            if i > 0 and link.joint_type == 'free':
                raise KinematicsError(f"Only the root may have a free joint (link {i})")
            if not link.mass > 0.0 or not link.length > 0.0:
                raise KinematicsError(f"Link {i} needs positive mass and length")
            if link.inertia < 0.0:
                raise KinematicsError(f"Link {i} has negative inertia")
            if link.joint_type == 'revolute':
                norm = np.linalg.norm(link.axis)
                if norm < 1e-12:
                    raise KinematicsError(f"Link {i} revolute axis is zero")
                link.axis = np.asarray(link.axis, dtype=float) / norm
        for e in self.end_effectors:
            if not 0 <= e < len(self.links):
                raise KinematicsError(f"End-effector index {e} out of range")

    @property
    def num_links(self) -> int:
        return len(self.links)

    @property
    def num_joints(self) -> int:
        return len(self.links) - 1

    @property
    def num_keypoints(self) -> int:
        return len(self.links) + len(self.end_effectors)

    @property
    def total_mass(self) -> float:
        return float(sum(link.mass for link in self.links))

    @property
    def torso_links(self) -> List[int]:
        return [i for i, link in enumerate(self.links) if link.torso]

    def joint_index(self, name: str) -> int:
        """Joint slot (0-based over links 1..n-1) of the named link."""
        for i, link in enumerate(self.links[1:], start=1):
            if link.name == name:
                return i - 1
        raise KinematicsError(f"Character has no joint named '{name}'")

    def ancestors(self, i: int) -> List[int]:
        """Links from the root down to i, inclusive."""
        chain = []
        while i >= 0:
            chain.append(i)
            i = self.links[i].parent
        return chain[::-1]


CharacterModel = KinematicTree


@dataclass
class Pose:
    root_position: np.ndarray
    root_rotation: np.ndarray
    joint_rotations: np.ndarray

    def __post_init__(self):
        self.root_position = np.asarray(self.root_position, dtype=float)
        self.root_rotation = np.asarray(self.root_rotation, dtype=float)
        self.joint_rotations = np.asarray(self.joint_rotations, dtype=float).reshape(-1, 4)

    def copy(self) -> 'Pose':
        return Pose(self.root_position.copy(), self.root_rotation.copy(), self.joint_rotations.copy())

    def rotations(self) -> np.ndarray:
        """Root rotation followed by joint rotations, shape (links, 4)."""
        return np.vstack([self.root_rotation[None, :], self.joint_rotations])

    def to_dict(self) -> Dict:
        return {
            'root_pos': self.root_position.tolist(),
            'root_rot': self.root_rotation.tolist(),
            'joints': self.joint_rotations.tolist(),
        }

    @classmethod
    def identity(cls, tree: KinematicTree, root_position=None) -> 'Pose':
        position = np.zeros(3) if root_position is None else root_position
        return cls(position, IDENTITY.copy(), np.tile(IDENTITY, (tree.num_joints, 1)))


def check_pose(tree: KinematicTree, pose: Pose, tol: float = 1e-9):
    """Validate pose dimensions, unit norms and revolute axes against a tree."""
    if pose.root_position.shape != (3,) or pose.root_rotation.shape != (4,):
        raise KinematicsError("Pose root must be a 3-vector and a quaternion")
    if pose.joint_rotations.shape[0] != tree.num_joints:
        raise KinematicsError(
            f"Pose has {pose.joint_rotations.shape[0]} joint rotations, tree has {tree.num_joints} joints")
    for j, q in enumerate(pose.rotations()):
        if abs(np.linalg.norm(q) - 1.0) > tol:
            raise KinematicsError(f"Rotation {j} is not unit norm")
    for j, q in enumerate(pose.joint_rotations):
        link = tree.links[j + 1]
        if link.joint_type != 'revolute':
            continue
        v = q[1:]
        residual = v - np.dot(v, link.axis) * link.axis
        if np.linalg.norm(residual) > tol:
            raise KinematicsError(f"Joint {j} rotation is off its revolute axis")


@dataclass
class FkResult:
    origins: np.ndarray
    rotations: np.ndarray
    matrices: np.ndarray
    tips: np.ndarray
    centers: np.ndarray

    @property
    def transforms(self) -> np.ndarray:
        """Per-link homogeneous world transforms, shape (links, 4, 4)."""
        n = len(self.origins)
        out = np.zeros((n, 4, 4))
        out[:, :3, :3] = self.matrices
        out[:, :3, 3] = self.origins
        out[:, 3, 3] = 1.0
        return out


def forward_kinematics(tree: KinematicTree, pose: Pose) -> FkResult:
    """Compute per-link world frames, root first then children in order."""
    if pose.joint_rotations.shape[0] != tree.num_joints:
        raise KinematicsError(
            f"Pose has {pose.joint_rotations.shape[0]} joint rotations, tree has {tree.num_joints} joints")
    n = tree.num_links
    origins = np.zeros((n, 3))
    matrices = np.zeros((n, 3, 3))
    rotations = np.zeros((n, 4))
    lengths = np.array([link.length for link in tree.links])

    rotations[0] = quat_normalize(pose.root_rotation)
    matrices[0] = quat_to_matrix(rotations[0])
    origins[0] = pose.root_position + matrices[0] @ tree.links[0].offset
    for i in range(1, n):
        p = tree.links[i].parent
        rotations[i] = _hamilton(rotations[p], pose.joint_rotations[i - 1])
        matrices[i] = matrices[p] @ quat_to_matrix(pose.joint_rotations[i - 1])
        origins[i] = origins[p] + matrices[p] @ tree.links[i].offset

    # Links extend along their own +x axis
    along = matrices[:, :, 0]
    tips = origins + lengths[:, None] * along
    centers = origins + 0.5 * lengths[:, None] * along
    return FkResult(origins, rotations, matrices, tips, centers)


def joint_positions(tree: KinematicTree, pose: Pose, fk: Optional[FkResult] = None) -> np.ndarray:
    """Keypoints F_j: link origins followed by end-effector tips."""
    fk = fk or forward_kinematics(tree, pose)
    return np.vstack([fk.origins, fk.tips[tree.end_effectors]])


def keypoint_links(tree: KinematicTree) -> List[int]:
    """Link carrying each keypoint."""
    return list(range(tree.num_links)) + list(tree.end_effectors)


def com_position(tree: KinematicTree, pose: Pose, fk: Optional[FkResult] = None) -> np.ndarray:
    """Mass-weighted mean of link centers."""
    fk = fk or forward_kinematics(tree, pose)
    masses = np.array([link.mass for link in tree.links])
    return masses @ fk.centers / masses.sum()


def heading_rotation(tree: KinematicTree, root_rotation) -> np.ndarray:
    """Heading frame of the root: identity for planar trees, yaw about +y otherwise."""
    if tree.planar:
        return IDENTITY.copy()
    forward = quat_to_matrix(root_rotation)[:, 0]
    yaw = math.atan2(-forward[2], forward[0])
    return quat_about([0.0, 1.0, 0.0], yaw)


def end_effector_positions(tree: KinematicTree, pose: Pose, fk: Optional[FkResult] = None) -> np.ndarray:
    """End-effector tips relative to the root, in the root heading frame."""
    if not tree.end_effectors:
        raise KinematicsError("Tree declares no end-effectors")
    fk = fk or forward_kinematics(tree, pose)
    relative = fk.tips[tree.end_effectors] - pose.root_position
    heading = heading_rotation(tree, pose.root_rotation)
    return quat_rotate(quat_conjugate(heading), relative)


def param_layout(tree: KinematicTree) -> List[int]:
    """Start column of each joint's increment in the pose parameter vector."""
    starts = []
    col = 6
    for link in tree.links[1:]:
        starts.append(col)
        col += link.dofs
    return starts


def num_params(tree: KinematicTree) -> int:
    return 6 + sum(link.dofs for link in tree.links[1:])


def fk_jacobian(tree: KinematicTree, pose: Pose, fk: Optional[FkResult] = None) -> np.ndarray:
    """Derivatives of keypoints w.r.t. root translation and local rotation increments.

    Columns: root position (3), root rotation increment (3), then one column per
    revolute joint and three per spherical joint. Rotations are perturbed as
    q ∘ exp(δ). Shape (keypoints, 3, params).
    """
    fk = fk or forward_kinematics(tree, pose)
    points = joint_positions(tree, pose, fk)
    owners = keypoint_links(tree)
    n_links = tree.num_links
    jac = np.zeros((len(points), 3, num_params(tree)))
    starts = param_layout(tree)

    # Keypoints downstream of each link's rotation
    affected = [[] for _ in range(n_links)]
    for k, owner in enumerate(owners):
        is_origin = k < n_links
        for a in tree.ancestors(owner):
            if is_origin and a == owner and a != 0:
                continue
            affected[a].append(k)

    jac[:, :, 0:3] = np.eye(3)
    for a in range(n_links):
        if a == 0:
            pivot = pose.root_position
            axes = [fk.matrices[0][:, c] for c in range(3)]
            cols = [3, 4, 5]
        else:
            link = tree.links[a]
            pivot = fk.origins[a]
            if link.joint_type == 'revolute':
                axes = [fk.matrices[a] @ link.axis]
                cols = [starts[a - 1]]
            else:
                axes = [fk.matrices[a][:, c] for c in range(3)]
                cols = [starts[a - 1] + c for c in range(3)]
        rel = points[affected[a]] - pivot
        for axis, col in zip(axes, cols):
            jac[affected[a], :, col] = np.cross(axis, rel)
    return jac


def apply_increments(tree: KinematicTree, pose: Pose, delta: np.ndarray) -> Pose:
    """Compose a parameter increment onto a pose (root translation + local exp maps)."""
    delta = np.asarray(delta, dtype=float)
    root_position = pose.root_position + delta[0:3]
    root_rotation = quat_mul(pose.root_rotation, quat_from_rotvec(delta[3:6]))
    joints = pose.joint_rotations.copy()
    for j, start in enumerate(param_layout(tree)):
        link = tree.links[j + 1]
        if link.joint_type == 'revolute':
            step = quat_from_rotvec(link.axis * delta[start])
        else:
            step = quat_from_rotvec(delta[start:start + 3])
        joints[j] = quat_mul(joints[j], step)
    return Pose(root_position, root_rotation, joints)


# Character JSON

def character_from_dict(data: Dict, name: str = '') -> KinematicTree:
    """Build a KinematicTree from CharacterModel JSON data."""
    try:
        raw_links = data['links']
        end_effectors = [int(e) for e in data.get('end_effectors', [])]
    except (KeyError, TypeError) as e:
        raise KinematicsError(f"Character JSON is missing field {e}")
    links = []
    for i, raw in enumerate(raw_links):
        try:
            joint = raw.get('joint', {'type': 'free'})
            pd_gains = raw.get('pd', {})
            links.append(Link(
                parent=int(raw['parent']),
                joint_type=joint.get('type', 'revolute'),
                axis=np.asarray(joint.get('axis', [0.0, 0.0, 1.0]), dtype=float),
                offset=np.asarray(raw['offset'], dtype=float),
                length=float(raw['length']),
                mass=float(raw['mass']),
                inertia=float(raw['inertia']),
                kp=float(pd_gains.get('kp', 0.0)),
                kd=float(pd_gains.get('kd', 0.0)),
                torque_limit=float(pd_gains.get('torque_limit', 0.0)),
                name=raw.get('name', ''),
                torso=bool(raw.get('torso', i == 0)),
            ))
        except KeyError as e:
            raise KinematicsError(f"Character link {i} is missing field {e}")
    return KinematicTree(links, end_effectors, bool(data.get('planar', True)), data.get('name', name))


def character_to_dict(tree: KinematicTree) -> Dict:
    links = []
    for link in tree.links:
        entry = {
            'parent': link.parent,
            'joint': {'type': link.joint_type, 'axis': np.asarray(link.axis).tolist()},
            'offset': np.asarray(link.offset).tolist(),
            'length': link.length,
            'mass': link.mass,
            'inertia': link.inertia,
            'pd': {'kp': link.kp, 'kd': link.kd, 'torque_limit': link.torque_limit},
            'torso': link.torso,
        }
        if link.name:
            entry['name'] = link.name
        links.append(entry)
    return {'name': tree.name, 'links': links, 'end_effectors': list(tree.end_effectors), 'planar': tree.planar}


def load_character(path: Union[str, Path]) -> KinematicTree:
    """Load a CharacterModel JSON file."""
    path = Path(path)
    try:
        data = json.loads(path.read_text())
    except FileNotFoundError:
        raise KinematicsError(f"Character file not found: {path}")
    except json.JSONDecodeError as e:
        raise KinematicsError(f"Malformed character JSON {path}: {e}")
    tree = character_from_dict(data, name=path.stem)
    logger.info(f"Loaded character {tree.name} with {tree.num_links} links from {path}")
    return tree


def save_character(tree: KinematicTree, path: Union[str, Path]):
    Path(path).write_text(json.dumps(character_to_dict(tree), indent=2))
