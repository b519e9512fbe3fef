import json
import logging
import math
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Tuple, Union

import numpy as np
import pandas as pd
from scipy.optimize import minimize

from refmotion import ReferenceMotion
from rotkin import (
    KinematicTree, Pose, WeakPerspectiveCamera, apply_increments, fk_jacobian, forward_kinematics,
    joint_positions, num_params, param_layout, project_weak_perspective, quat_conjugate,
    quat_diff, quat_from_rotvec, quat_mul, quat_to_rotvec, rotation_angle,
)

logger = logging.getLogger(__name__)
perf_logger = logging.getLogger('performance')

HISTORY_COLUMNS = ['iter', 'l_2d', 'l_3d', 'l_sm', 'l_rec']
DIRECTIONS = ('gradient', 'lbfgs')


class ReconstructionError(RuntimeError):
    """Raised for invalid prediction sets or a diverging reconstruction."""
    pass


@dataclass
class FramePrediction:
    x2d: np.ndarray
    conf: np.ndarray
    q3d: Pose
    camera: WeakPerspectiveCamera


@dataclass
class PosePredictionSet:
    x2d: np.ndarray
    conf: np.ndarray
    q3d: List[Pose]
    cameras: List[WeakPerspectiveCamera]
    dt: float = 1.0 / 30.0
    cyclic: bool = False

    def __post_init__(self):
        self.x2d = np.asarray(self.x2d, dtype=float)
        self.conf = np.asarray(self.conf, dtype=float)
        n = len(self.q3d)
        if self.x2d.shape[0] != n or self.conf.shape[0] != n or len(self.cameras) != n:
            raise ReconstructionError(
                f"Frame counts differ: x2d {self.x2d.shape[0]}, conf {self.conf.shape[0]}, "
                f"q3d {n}, camera {len(self.cameras)}")
        if self.x2d.ndim != 3 or self.x2d.shape[2] != 2 or self.conf.shape != self.x2d.shape[:2]:
            raise ReconstructionError("x2d must be (frames, keypoints, 2) and conf (frames, keypoints)")
        if np.any(self.conf < 0.0) or np.any(self.conf > 1.0):
            raise ReconstructionError("Confidences must lie in [0, 1]")

    @property
    def num_frames(self) -> int:
        return len(self.q3d)

    def frame(self, t: int) -> FramePrediction:
        return FramePrediction(self.x2d[t], self.conf[t], self.q3d[t], self.cameras[t])

    def check_tree(self, tree: KinematicTree):
        if self.x2d.shape[1] != tree.num_keypoints:
            raise ReconstructionError(
                f"Predictions have {self.x2d.shape[1]} keypoints, character {tree.name} has {tree.num_keypoints}")


@dataclass
class ReconConfig:
    w_2d: float = 10.0
    w_3d: float = 100.0
    w_sm: float = 25.0
    max_iters: int = 500
    tolerance: float = 1e-6
    patience: int = 3  # consecutive iterations below tolerance before stopping
    direction: str = 'gradient'
    precondition: bool = True
    l1_smoothing: float = 1.0  # pixels
    memory: int = 8  # L-BFGS-B correction pairs
    armijo_c: float = 1e-4
    backtrack: float = 0.5
    max_backtracks: int = 40
    initial_step: float = 0.05  # largest first move of any parameter, m or rad

    def __post_init__(self):
        if min(self.w_2d, self.w_3d, self.w_sm) < 0.0:
            raise ReconstructionError("Loss weights must be non-negative")
        if self.max_iters < 1:
            raise ReconstructionError(f"max_iters must be at least 1, got {self.max_iters}")
        if self.direction not in DIRECTIONS:
            raise ReconstructionError(f"Unknown descent direction '{self.direction}'")
        if self.l1_smoothing < 0.0:
            raise ReconstructionError(f"l1_smoothing must be non-negative, got {self.l1_smoothing}")
        if self.patience < 1:
            raise ReconstructionError(f"patience must be at least 1, got {self.patience}")

    @classmethod
    def from_dict(cls, data: Dict) -> 'ReconConfig':
        known = {k: v for k, v in data.items() if k in cls.__dataclass_fields__}
        return cls(**known)


@dataclass
class LossBreakdown:
    l_2d: float
    l_3d: float
    l_sm: float
    l_rec: float
    objective: Optional[float] = None  # l_rec with the smoothed 2D term

    def __post_init__(self):
        if self.objective is None:
            self.objective = self.l_rec


@dataclass
class ReconResult:
    motion: ReferenceMotion
    history: pd.DataFrame
    initial: LossBreakdown
    final: LossBreakdown


# Loss terms

def _projected(tree: KinematicTree, pose: Pose, camera: WeakPerspectiveCamera) -> np.ndarray:
    return project_weak_perspective(camera, joint_positions(tree, pose))


def loss_2d(tree: KinematicTree, trajectory: List[Pose], preds: PosePredictionSet) -> float:
    """Confidence-weighted L1 reprojection error."""
    total = 0.0
    for t, pose in enumerate(trajectory):
        residual = preds.x2d[t] - _projected(tree, pose, preds.cameras[t])
        total += float(preds.conf[t] @ np.abs(residual).sum(axis=1))
    return total


def confidence_weight(tree: KinematicTree, frame: FramePrediction) -> float:
    """w_t = exp(-δ_t), δ_t the confidence-weighted L2 reprojection error of the 3D prediction."""
    residual = frame.x2d - _projected(tree, frame.q3d, frame.camera)
    delta = float(frame.conf @ np.linalg.norm(residual, axis=1))
    return math.exp(-delta)


def frame_weights(tree: KinematicTree, preds: PosePredictionSet) -> np.ndarray:
    return np.array([confidence_weight(tree, preds.frame(t)) for t in range(preds.num_frames)])


def pose_distance(a: Pose, b: Pose) -> float:
    """Sum of difference angles over root and joint rotations."""
    return float(sum(rotation_angle(quat_diff(qa, qb)) for qa, qb in zip(a.rotations(), b.rotations())))


def loss_3d(trajectory: List[Pose], preds: PosePredictionSet, weights: Optional[np.ndarray] = None,
            tree: Optional[KinematicTree] = None) -> float:
    """Weighted rotation distance to the 3D predictions."""
    if weights is None:
        if tree is None:
            raise ReconstructionError("loss_3d needs frame weights or a character to compute them")
        weights = frame_weights(tree, preds)
    return float(sum(w * pose_distance(preds.q3d[t], pose) for t, (w, pose) in enumerate(zip(weights, trajectory))))


def smoothness_from_positions(positions: np.ndarray) -> float:
    """Σ_t Σ_j ‖p_t,j − p_t+1,j‖² over a (frames, keypoints, 3) array."""
    return float(np.sum(np.diff(positions, axis=0) ** 2))


def loss_smooth(tree: KinematicTree, trajectory: List[Pose]) -> float:
    """Squared keypoint displacement between consecutive frames."""
    if len(trajectory) < 2:
        raise ReconstructionError("Smoothness needs at least 2 frames")
    return smoothness_from_positions(np.array([joint_positions(tree, pose) for pose in trajectory]))


def _rotation_gradient(target, current) -> np.ndarray:
    """Gradient of angle(target ⊖ current) w.r.t. a local increment of current."""
    r = quat_to_rotvec(quat_mul(quat_conjugate(target), current))
    angle = np.linalg.norm(r)
    if angle < 1e-12:
        return np.zeros(3)
    return r / angle


def loss_and_gradient(tree: KinematicTree, trajectory: List[Pose], preds: PosePredictionSet,
                      cfg: ReconConfig, weights: Optional[np.ndarray] = None,
                      with_gradient: bool = True,
                      smoothing: float = 0.0) -> Tuple[LossBreakdown, Optional[np.ndarray]]:
    """Reconstruction loss and its gradient over per-frame local pose increments.

    With smoothing ε > 0 each residual coordinate contributes √(r² + ε²) − ε
    instead of |r| to ``objective`` and to the gradient. The reported terms
    stay exact.
    """
    if weights is None:
        weights = frame_weights(tree, preds)
    n_frames = len(trajectory)
    n_params = num_params(tree)
    starts = param_layout(tree)
    fks = [forward_kinematics(tree, pose) for pose in trajectory]
    positions = np.array([joint_positions(tree, pose, fk) for pose, fk in zip(trajectory, fks)])

    l_2d = 0.0
    l_2d_smooth = 0.0
    l_3d = 0.0
    grad_points = np.zeros_like(positions)
    grad = np.zeros((n_frames, n_params)) if with_gradient else None

    for t, pose in enumerate(trajectory):
        camera = preds.cameras[t]
        residual = preds.x2d[t] - project_weak_perspective(camera, positions[t])
        l_2d += float(preds.conf[t] @ np.abs(residual).sum(axis=1))
        if smoothing > 0.0:
            soft = np.sqrt(residual ** 2 + smoothing ** 2)
            l_2d_smooth += float(preds.conf[t] @ (soft - smoothing).sum(axis=1))
        l_3d += weights[t] * pose_distance(preds.q3d[t], pose)
        if not with_gradient:
            continue
        # d|r|/dp = -sign(r) * scale, subgradient 0 at r = 0; smoothed: -r / √(r² + ε²) * scale
        slope = residual / soft if smoothing > 0.0 else np.sign(residual)
        grad_points[t, :, :2] += -cfg.w_2d * camera.scale * preds.conf[t][:, None] * slope
        if weights[t] > 0.0:
            grad[t, 3:6] += cfg.w_3d * weights[t] * _rotation_gradient(preds.q3d[t].root_rotation, pose.root_rotation)
            for j, start in enumerate(starts):
                link = tree.links[j + 1]
                g = cfg.w_3d * weights[t] * _rotation_gradient(preds.q3d[t].joint_rotations[j], pose.joint_rotations[j])
                if link.joint_type == 'revolute':
                    grad[t, start] += g @ link.axis
                else:
                    grad[t, start:start + 3] += g

    diffs = np.diff(positions, axis=0)
    l_sm = float(np.sum(diffs ** 2))
    if with_gradient:
        grad_points[:-1] += -2.0 * cfg.w_sm * diffs
        grad_points[1:] += 2.0 * cfg.w_sm * diffs
        for t, pose in enumerate(trajectory):
            jac = fk_jacobian(tree, pose, fks[t])
            grad[t] += np.einsum('kd,kdp->p', grad_points[t], jac)

    l_rec = cfg.w_2d * l_2d + cfg.w_3d * l_3d + cfg.w_sm * l_sm
    objective = l_rec if smoothing <= 0.0 else cfg.w_2d * l_2d_smooth + cfg.w_3d * l_3d + cfg.w_sm * l_sm
    return LossBreakdown(l_2d, l_3d, l_sm, l_rec, objective), grad


def _apply(tree: KinematicTree, trajectory: List[Pose], step: np.ndarray) -> List[Pose]:
    return [apply_increments(tree, pose, step[t]) for t, pose in enumerate(trajectory)]


def _history_row(it: int, losses: LossBreakdown) -> List:
    return [it, losses.l_2d, losses.l_3d, losses.l_sm, losses.l_rec]


def descent_scale(tree: KinematicTree, trajectory: List[Pose], preds: PosePredictionSet,
                  cfg: ReconConfig, weights: np.ndarray) -> np.ndarray:
    """Per-frame, per-parameter sensitivity of l_rec, used to scale gradient steps.

    Sums the largest reprojection slope, the smoothness curvature and the 3D
    prior slope each parameter can see, so frames with low confidence or short
    lever arms move as fast as the rest.
    """
    scale = np.zeros((len(trajectory), num_params(tree)))
    for t, pose in enumerate(trajectory):
        jac = fk_jacobian(tree, pose)
        reach = np.abs(jac[:, :2, :]).sum(axis=1)
        scale[t] += cfg.w_2d * preds.cameras[t].scale * (preds.conf[t] @ reach)
        scale[t] += 4.0 * cfg.w_sm * np.einsum('kdp,kdp->p', jac, jac)
        scale[t, 3:] += cfg.w_3d * weights[t]
    return np.maximum(scale, 1e-12)


def _gradient_descent(tree: KinematicTree, trajectory: List[Pose], preds: PosePredictionSet,
                      cfg: ReconConfig, weights: np.ndarray) -> Tuple[List[Pose], List[List]]:
    """Scaled gradient descent on the smoothed objective with Armijo backtracking.

    A step is accepted only if the exact l_rec does not increase.
    """
    losses, grad = loss_and_gradient(tree, trajectory, preds, cfg, weights, smoothing=cfg.l1_smoothing)
    if cfg.precondition:
        scale = descent_scale(tree, trajectory, preds, cfg, weights)
    else:
        scale = np.ones_like(grad)
    history = [_history_row(0, losses)]
    step_scale = None
    quiet = 0

    for it in range(1, cfg.max_iters + 1):
        direction = -grad / scale
        slope = float(np.sum(grad * direction))
        if slope == 0.0:
            logger.info(f"Reconstruction reached a zero gradient at iteration {it}")
            break

        first = cfg.initial_step / max(float(np.max(np.abs(direction))), 1e-12)
        alpha = first if step_scale is None else max(first, min(2.0 * step_scale, 1e3 * first))
        accepted = None
        for _ in range(cfg.max_backtracks):
            candidate = _apply(tree, trajectory, alpha * direction)
            trial, _ = loss_and_gradient(tree, candidate, preds, cfg, weights, with_gradient=False,
                                         smoothing=cfg.l1_smoothing)
            if (math.isfinite(trial.objective)
                    and trial.objective <= losses.objective + cfg.armijo_c * alpha * slope
                    and trial.l_rec <= losses.l_rec):
                accepted = candidate
                break
            alpha *= cfg.backtrack
        if accepted is None:
            logger.warning(f"Reconstruction line search stalled at iteration {it}, l_rec={losses.l_rec:.6g}")
            break

        new_losses, new_grad = loss_and_gradient(tree, accepted, preds, cfg, weights, smoothing=cfg.l1_smoothing)
        if not math.isfinite(new_losses.l_rec):
            raise ReconstructionError(f"Reconstruction loss became non-finite at iteration {it}")
        decrease = (losses.objective - new_losses.objective) / max(abs(losses.objective), 1e-12)
        trajectory, losses, grad, step_scale = accepted, new_losses, new_grad, alpha
        history.append(_history_row(it, losses))
        quiet = quiet + 1 if decrease < cfg.tolerance else 0
        if quiet >= cfg.patience:
            logger.info(f"Reconstruction converged at iteration {it}")
            break
    return trajectory, history


def _rotation_blocks(tree: KinematicTree) -> List[int]:
    """Start columns of the three-parameter rotation increments."""
    return [3] + [start for start, link in zip(param_layout(tree), tree.links[1:]) if link.joint_type != 'revolute']


def right_jacobian(r) -> np.ndarray:
    """J with exp(r + e) ≈ exp(r) exp(J e) for a rotation vector r."""
    r = np.asarray(r, dtype=float)
    theta = float(np.linalg.norm(r))
    k = np.array([[0.0, -r[2], r[1]], [r[2], 0.0, -r[0]], [-r[1], r[0], 0.0]])
    if theta < 1e-8:
        return np.eye(3) - 0.5 * k
    return (np.eye(3) - (1.0 - math.cos(theta)) / theta ** 2 * k
            + (theta - math.sin(theta)) / theta ** 3 * (k @ k))


def _quasi_newton(tree: KinematicTree, start: List[Pose], preds: PosePredictionSet,
                  cfg: ReconConfig, weights: np.ndarray) -> Tuple[List[Pose], List[List]]:
    """L-BFGS-B on the smoothed objective over increments from the starting trajectory.

    Returns the iterate with the lowest exact l_rec.
    """
    shape = (len(start), num_params(tree))
    blocks = _rotation_blocks(tree)

    def objective(x):
        steps = x.reshape(shape)
        losses, grad = loss_and_gradient(tree, _apply(tree, start, steps), preds, cfg, weights,
                                         smoothing=cfg.l1_smoothing)
        if not math.isfinite(losses.objective):
            raise ReconstructionError(f"Reconstruction loss became non-finite: {losses}")
        for t in range(shape[0]):
            for b in blocks:
                grad[t, b:b + 3] = right_jacobian(steps[t, b:b + 3]).T @ grad[t, b:b + 3]
        return losses.objective, grad.ravel()

    best_losses, _ = loss_and_gradient(tree, start, preds, cfg, weights, with_gradient=False)
    best = start
    history = [_history_row(0, best_losses)]

    def record(x):
        nonlocal best, best_losses
        trajectory = _apply(tree, start, x.reshape(shape))
        losses, _ = loss_and_gradient(tree, trajectory, preds, cfg, weights, with_gradient=False)
        history.append(_history_row(len(history), losses))
        if losses.l_rec < best_losses.l_rec:
            best, best_losses = trajectory, losses

    result = minimize(objective, np.zeros(shape[0] * shape[1]), jac=True, method='L-BFGS-B', callback=record,
                      options={'maxiter': cfg.max_iters, 'maxcor': cfg.memory, 'ftol': cfg.tolerance})
    logger.info(f"L-BFGS-B stopped after {result.nit} iterations: {result.message}")
    return best, history


def run_reconstruction(tree: KinematicTree, preds: PosePredictionSet, cfg: Optional[ReconConfig] = None,
                       name: str = 'reconstructed') -> ReconResult:
    """Minimize l_rec starting from the 3D predictions."""
    cfg = cfg or ReconConfig()
    if preds.num_frames < 2:
        raise ReconstructionError("Reconstruction needs at least 2 frames")
    preds.check_tree(tree)
    started = time.time()
    weights = frame_weights(tree, preds)
    start = [pose.copy() for pose in preds.q3d]
    initial, _ = loss_and_gradient(tree, start, preds, cfg, weights, with_gradient=False)
    if not math.isfinite(initial.l_rec):
        raise ReconstructionError(f"Initial reconstruction loss is not finite: {initial}")

    if cfg.direction == 'lbfgs':
        trajectory, history = _quasi_newton(tree, start, preds, cfg, weights)
    else:
        trajectory, history = _gradient_descent(tree, start, preds, cfg, weights)
    final, _ = loss_and_gradient(tree, trajectory, preds, cfg, weights, with_gradient=False)

    elapsed = time.time() - started
    perf_logger.info(f"reconstruct frames={preds.num_frames} iters={len(history) - 1} seconds={elapsed:.2f}")
    logger.info(f"Reconstruction l_rec {initial.l_rec:.4g} -> {final.l_rec:.4g} in {len(history) - 1} iterations")
    motion = ReferenceMotion(preds.dt, trajectory, preds.cyclic, name=name)
    return ReconResult(motion, pd.DataFrame(history, columns=HISTORY_COLUMNS), initial, final)


def reconstruct(tree: KinematicTree, preds: PosePredictionSet, cfg: Optional[ReconConfig] = None) -> ReferenceMotion:
    """Reconstruct a temporally consistent reference motion from per-frame predictions."""
    return run_reconstruction(tree, preds, cfg).motion


# Prediction JSON

def predictions_from_dict(data: Dict) -> PosePredictionSet:
    if 'frames' not in data:
        raise ReconstructionError("Prediction JSON is missing required field 'frames'")
    x2d, conf, q3d, cameras = [], [], [], []
    for t, frame in enumerate(data['frames']):
        try:
            x2d.append(frame['x2d'])
            conf.append(frame['conf'])
            pose = frame['q3d']
            q3d.append(Pose(pose['root_pos'], pose['root_rot'], pose['joints']))
            camera = frame['camera']
            cameras.append(WeakPerspectiveCamera(camera['scale'], camera['translate']))
        except KeyError as e:
            raise ReconstructionError(f"Prediction frame {t} is missing required field {e}")
    return PosePredictionSet(np.array(x2d, dtype=float), np.array(conf, dtype=float), q3d, cameras,
                             float(data.get('dt', 1.0 / 30.0)), bool(data.get('cyclic', False)))


def predictions_to_dict(preds: PosePredictionSet) -> Dict:
    frames = []
    for t in range(preds.num_frames):
        frames.append({
            'x2d': preds.x2d[t].tolist(),
            'conf': preds.conf[t].tolist(),
            'q3d': preds.q3d[t].to_dict(),
            'camera': preds.cameras[t].to_dict(),
        })
    return {'dt': preds.dt, 'cyclic': preds.cyclic, 'frames': frames}


def load_predictions(path: Union[str, Path]) -> PosePredictionSet:
    path = Path(path)
    try:
        data = json.loads(path.read_text())
    except FileNotFoundError:
        raise ReconstructionError(f"Prediction file not found: {path}")
    except json.JSONDecodeError as e:
        raise ReconstructionError(f"Malformed prediction JSON {path}: {e}")
    return predictions_from_dict(data)


def save_predictions(preds: PosePredictionSet, path: Union[str, Path]):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(predictions_to_dict(preds)))


# Synthetic prediction benchmark

def _jitter_rotation(q, axis, sigma: float, rng: np.random.Generator) -> np.ndarray:
    return quat_mul(q, quat_from_rotvec(np.asarray(axis) * rng.normal(0.0, sigma)))


def synth_predictions(tree: KinematicTree, motion: ReferenceMotion, camera: Optional[WeakPerspectiveCamera] = None,
                      jitter: float = 0.15, outlier_frac: float = 0.1, outlier_conf: float = 0.1,
                      rng: Optional[np.random.Generator] = None, pixel_noise: float = 1.0,
                      position_noise: float = 0.02) -> PosePredictionSet:
    """Noisy per-frame predictions of a ground-truth clip.

    Every rotation is jittered about its joint axis (the root about z). Outlier
    frames get large rotation offsets and low keypoint confidence while their
    2D keypoints stay close to the truth.
    """
    rng = rng if rng is not None else np.random.default_rng(0)
    camera = camera or WeakPerspectiveCamera(200.0, np.array([320.0, 240.0]))
    n = motion.num_frames
    n_outliers = int(round(outlier_frac * n))
    outliers = set(rng.choice(n, size=n_outliers, replace=False).tolist()) if n_outliers else set()
    z = np.array([0.0, 0.0, 1.0])

    x2d, conf, q3d = [], [], []
    for t, truth in enumerate(motion.frames):
        points = project_weak_perspective(camera, joint_positions(tree, truth))
        is_outlier = t in outliers
        noise = pixel_noise * (5.0 if is_outlier else 1.0)
        x2d.append(points + rng.normal(0.0, noise, size=points.shape))
        if is_outlier:
            conf.append(np.full(tree.num_keypoints, outlier_conf))
        else:
            conf.append(rng.uniform(0.7, 1.0, size=tree.num_keypoints))

        sigma = jitter
        pose = truth.copy()
        pose.root_position[:2] += rng.normal(0.0, position_noise, size=2)
        if is_outlier:
            offsets = rng.uniform(0.5, 1.2, size=tree.num_links) * rng.choice([-1.0, 1.0], size=tree.num_links)
        else:
            offsets = np.zeros(tree.num_links)
        pose.root_rotation = quat_mul(_jitter_rotation(pose.root_rotation, z, sigma, rng), quat_from_rotvec(z * offsets[0]))
        for j in range(tree.num_joints):
            axis = tree.links[j + 1].axis if tree.links[j + 1].joint_type == 'revolute' else z
            rotated = _jitter_rotation(pose.joint_rotations[j], axis, sigma, rng)
            pose.joint_rotations[j] = quat_mul(rotated, quat_from_rotvec(axis * offsets[j + 1]))
        q3d.append(pose)
    return PosePredictionSet(np.array(x2d), np.array(conf), q3d, [camera] * n, motion.dt, motion.cyclic)


def max_keypoint_jump(tree: KinematicTree, trajectory: List[Pose]) -> float:
    """Largest per-frame keypoint displacement along a trajectory."""
    positions = np.array([joint_positions(tree, pose) for pose in trajectory])
    return float(np.max(np.linalg.norm(np.diff(positions, axis=0), axis=2)))
