import logging
import math
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence

import numpy as np

from dynsim import SimState, contact_points
from imitenv import ReferenceTrack

logger = logging.getLogger(__name__)

LOG_2PI = math.log(2.0 * math.pi)
MIN_STD = 1e-3
LIFT_THRESHOLD = 0.005


class InitStateError(ValueError):
    """Raised for invalid initial state distributions or operations on the wrong variant."""
    pass


@dataclass
class InitialSample:
    state: SimState
    phase: float
    component: Optional[int] = None
    s_hat: Optional[np.ndarray] = None


@dataclass
class AsiRecord:
    s_hat: np.ndarray
    component: int
    ret: float


class FixedStateInit:
    """Every episode starts from the same state at phase 0."""

    kind = 'fsi'
    learnable = False

    def __init__(self, state: SimState, phase: float = 0.0):
        self.state = state.copy()
        self.phase = phase

    @classmethod
    def from_track(cls, track: ReferenceTrack) -> 'FixedStateInit':
        return cls(track.frame_state(0), 0.0)

    def sample(self, rng: np.random.Generator) -> InitialSample:
        return InitialSample(self.state.copy(), self.phase)

    def to_dict(self) -> Dict:
        return {'kind': self.kind, 'q': self.state.q.tolist(), 'qdot': self.state.qdot.tolist(), 'phase': self.phase}


class ReferenceStateInit:
    """Start at a uniformly chosen reference frame with its finite-difference velocity."""

    kind = 'rsi'
    learnable = False

    def __init__(self, track: ReferenceTrack):
        self.track = track
        # the last frame is excluded: it duplicates frame 0 for cyclic clips and leaves no episode otherwise
        self.num_starts = max(track.motion.num_frames - 1, 1)

    def sample(self, rng: np.random.Generator) -> InitialSample:
        index = int(rng.integers(self.num_starts))
        phase = index / (self.track.motion.num_frames - 1)
        return InitialSample(self.track.frame_state(index), phase)

    def to_dict(self) -> Dict:
        return {'kind': self.kind, 'num_starts': self.num_starts}


def state_vector(state: SimState) -> np.ndarray:
    """ŝ for a planar state: root height, root angle, joint angles, all velocities."""
    return np.concatenate([state.q[1:], state.qdot])


class AdaptiveStateInit:
    """Phase-indexed Gaussian mixture over initial states with learnable means and log-stds.

    Component i sits at the fixed phase i/k. The horizontal root position is not
    part of ŝ and is taken from the reference at the component's phase.
    """

    kind = 'asi'
    learnable = True

    def __init__(self, means: np.ndarray, log_stds: np.ndarray, phases: Optional[Sequence[float]] = None,
                 track: Optional[ReferenceTrack] = None, ground_height: float = 0.0,
                 lift_threshold: float = LIFT_THRESHOLD):
        self.means = np.array(means, dtype=float, ndmin=2)
        self.log_stds = np.array(log_stds, dtype=float, ndmin=2)
        if self.means.shape != self.log_stds.shape:
            raise InitStateError(f"Means {self.means.shape} and log-stds {self.log_stds.shape} differ in shape")
        if not np.all(np.isfinite(self.log_stds)):
            raise InitStateError("ASI log-stds must be finite")
        k = len(self.means)
        if k < 1:
            raise InitStateError("ASI needs at least one component")
        self.phases = np.arange(k) / k if phases is None else np.array(phases, dtype=float)
        if self.phases.shape != (k,):
            raise InitStateError(f"Expected {k} phases, got {self.phases.shape}")
        self.track = track
        self.ground_height = ground_height
        self.lift_threshold = lift_threshold

    @classmethod
    def from_track(cls, track: ReferenceTrack, k: int = 10, ground_height: float = 0.0) -> 'AdaptiveStateInit':
        """Means at the reference state of each phase, shared std from the clip's sample covariance."""
        if k < 1:
            raise InitStateError(f"k must be >= 1, got {k}")
        phases = np.arange(k) / k
        means = np.array([state_vector(track.state_at(phi * track.motion.T_cycle)) for phi in phases])
        frames = track.motion.num_frames - (1 if track.motion.cyclic else 0)
        samples = np.array([state_vector(track.frame_state(i)) for i in range(frames)])
        variance = np.var(samples, axis=0, ddof=1) if len(samples) > 1 else np.zeros(samples.shape[1])
        std = np.maximum(np.sqrt(variance), MIN_STD)
        log_stds = np.tile(np.log(std), (k, 1))
        logger.info(f"Initialized ASI with {k} components over a {means.shape[1]}D state")
        return cls(means, log_stds, phases, track, ground_height)

    @property
    def k(self) -> int:
        return len(self.means)

    @property
    def dim(self) -> int:
        return self.means.shape[1]

    def copy(self) -> 'AdaptiveStateInit':
        return AdaptiveStateInit(self.means.copy(), self.log_stds.copy(), self.phases.copy(), self.track,
                                 self.ground_height, self.lift_threshold)

    def sample_s_hat(self, rng: np.random.Generator):
        """Component index from the uniform p(φ), then ŝ from that component."""
        i = int(rng.integers(self.k))
        s_hat = self.means[i] + np.exp(self.log_stds[i]) * rng.standard_normal(self.dim)
        return i, s_hat

    def state_from_s_hat(self, s_hat: np.ndarray, component: int) -> SimState:
        if self.track is None:
            raise InitStateError("ASI distribution has no reference track to build simulator states")
        ref = self.track.state_at(self.phases[component] * self.track.motion.T_cycle)
        n = len(ref.q)
        q = np.concatenate([[ref.q[0]], s_hat[:n - 1]])
        qdot = np.array(s_hat[n - 1:])
        return SimState(q, qdot)

    def lift(self, state: SimState) -> SimState:
        """Raise the root so no contact point sits deeper than the lift threshold."""
        points, _ = contact_points(self.track.tree, state.q)
        depth = self.ground_height - float(points[:, 1].min())
        if depth > self.lift_threshold:
            state = state.copy()
            state.q[1] += depth
        return state

    def sample(self, rng: np.random.Generator) -> InitialSample:
        i, s_hat = self.sample_s_hat(rng)
        state = self.lift(self.state_from_s_hat(s_hat, i))
        return InitialSample(state, float(self.phases[i]), i, s_hat)

    def to_dict(self) -> Dict:
        return {
            'kind': self.kind,
            'k': self.k,
            'phases': self.phases.tolist(),
            'means': self.means.tolist(),
            'log_stds': self.log_stds.tolist(),
            'ground_height': self.ground_height,
            'lift_threshold': self.lift_threshold,
        }

    @classmethod
    def from_dict(cls, data: Dict, track: Optional[ReferenceTrack] = None) -> 'AdaptiveStateInit':
        try:
            return cls(data['means'], data['log_stds'], data['phases'], track,
                       data.get('ground_height', 0.0), data.get('lift_threshold', LIFT_THRESHOLD))
        except KeyError as e:
            raise InitStateError(f"ASI state is missing field {e}")


def sample_initial(dist, rng: np.random.Generator) -> InitialSample:
    return dist.sample(rng)


def asi_log_density(dist, s_hat: np.ndarray, component: int) -> float:
    """log p(φ) + log N(ŝ; μ_i, Σ_i) with p(φ) uniform over the k phases."""
    if not isinstance(dist, AdaptiveStateInit):
        raise InitStateError(f"Log-density is only defined for ASI, got {getattr(dist, 'kind', type(dist).__name__)}")
    z = (np.asarray(s_hat, dtype=float) - dist.means[component]) / np.exp(dist.log_stds[component])
    return float(-math.log(dist.k) - 0.5 * np.sum(z * z) - np.sum(dist.log_stds[component]) - 0.5 * dist.dim * LOG_2PI)


@dataclass
class AsiGradient:
    means: np.ndarray
    log_stds: np.ndarray
    count: int
    per_record: List[np.ndarray] = field(default_factory=list)


def asi_gradient(dist: AdaptiveStateInit, records: Sequence[AsiRecord], baseline: Optional[float] = None,
                 weighted: bool = True) -> AsiGradient:
    """Batch mean of ∇ log ρ(ŝ)·(R − b); unweighted gives the plain score mean."""
    grad_mu = np.zeros_like(dist.means)
    grad_log_std = np.zeros_like(dist.log_stds)
    per_record = []
    b = 0.0 if baseline is None else baseline
    for rec in records:
        i = rec.component
        std = np.exp(dist.log_stds[i])
        z = (np.asarray(rec.s_hat, dtype=float) - dist.means[i]) / std
        weight = (rec.ret - b) if weighted else 1.0
        d_mu = weight * z / std
        d_log_std = weight * (z * z - 1.0)
        grad_mu[i] += d_mu
        grad_log_std[i] += d_log_std
        per_record.append(np.concatenate([d_mu, d_log_std]))
    n = len(records)
    if n:
        grad_mu /= n
        grad_log_std /= n
    return AsiGradient(grad_mu, grad_log_std, n, per_record)


def asi_update(dist: AdaptiveStateInit, records: Sequence[AsiRecord], lr: float,
               baseline: Optional[float] = None) -> AdaptiveStateInit:
    """One ascent step on the initial-state objective; returns a new distribution."""
    if not isinstance(dist, AdaptiveStateInit):
        raise InitStateError("asi_update requires an ASI distribution")
    if not records:
        logger.warning("ASI update called with an empty batch; distribution unchanged")
        return dist
    grad = asi_gradient(dist, records, baseline)
    if not (np.all(np.isfinite(grad.means)) and np.all(np.isfinite(grad.log_stds))):
        logger.warning("Skipping ASI update with non-finite gradient")
        return dist
    updated = dist.copy()
    updated.means += lr * grad.means
    updated.log_stds += lr * grad.log_stds
    logger.debug(f"ASI step over {grad.count} episodes, |dmu|={np.abs(grad.means).max():.3e}")
    return updated


def make_init_dist(mode: str, track: ReferenceTrack, k: int = 10, ground_height: float = 0.0):
    """Build an FSI, RSI or ASI distribution for a reference clip."""
    mode = mode.lower()
    if mode == 'fsi':
        return FixedStateInit.from_track(track)
    if mode == 'rsi':
        return ReferenceStateInit(track)
    if mode == 'asi':
        return AdaptiveStateInit.from_track(track, k, ground_height)
    raise InitStateError(f"Unknown init-state mode '{mode}', expected fsi, rsi or asi")


def init_dist_from_dict(data: Dict, track: Optional[ReferenceTrack] = None):
    """Rebuild a distribution stored in a checkpoint header."""
    kind = data.get('kind')
    if kind == 'asi':
        return AdaptiveStateInit.from_dict(data, track)
    if kind == 'rsi' and track is not None:
        return ReferenceStateInit(track)
    if kind == 'fsi':
        return FixedStateInit(SimState(data['q'], data['qdot']), data.get('phase', 0.0))
    raise InitStateError(f"Cannot rebuild initial state distribution of kind '{kind}'")
