import logging
import math
from dataclasses import dataclass, field
from typing import List, Optional, Sequence, Tuple, Union

import numpy as np
from scipy.linalg import LinAlgError, cho_factor, cho_solve

from rotkin import AxisAngle, KinematicTree, Pose, quat_about

logger = logging.getLogger(__name__)

GRAVITY = 9.81
DEFAULT_DT = 1.0 / 1200.0
POINT_FRACTIONS = (0.0, 0.5, 1.0)  # origin, midpoint, tip of every link
INTEGRATORS = ('rk4', 'semi_implicit')
DEFAULT_INTEGRATOR = 'rk4'

ExternalForces = Optional[Sequence[Tuple[int, Sequence[float]]]]


class SimulationError(RuntimeError):
    """Raised when the simulator cannot advance or is given a bad state."""
    pass


@dataclass
class SimState:
    q: np.ndarray
    qdot: np.ndarray

    def __post_init__(self):
        self.q = np.asarray(self.q, dtype=float)
        self.qdot = np.asarray(self.qdot, dtype=float)

    def copy(self) -> 'SimState':
        return SimState(self.q.copy(), self.qdot.copy())

    def validate(self, dim: int):
        if self.q.shape != (dim,) or self.qdot.shape != (dim,):
            raise SimulationError(f"State dimension mismatch: expected {dim}, got q{self.q.shape} qdot{self.qdot.shape}")
        if not (np.all(np.isfinite(self.q)) and np.all(np.isfinite(self.qdot))):
            raise SimulationError("State has non-finite entries")


@dataclass
class ContactParams:
    ground_height: float = 0.0
    k_n: float = 3e4
    d_n: float = 300.0
    mu: float = 0.9
    d_t: float = 200.0  # tangential slip damping, N·s/m

    def __post_init__(self):
        if not self.k_n > 0.0:
            raise SimulationError(f"k_n must be positive, got {self.k_n}")
        if self.d_n < 0.0 or self.mu < 0.0 or self.d_t < 0.0:
            raise SimulationError("d_n, mu and d_t must be non-negative")


@dataclass
class PdTargets:
    values: Sequence[Union[float, AxisAngle]]

    def angles(self) -> np.ndarray:
        """Target angles for revolute joints."""
        out = []
        for j, value in enumerate(self.values):
            if isinstance(value, AxisAngle):
                raise SimulationError(f"Joint {j}: spherical targets are not supported by planar dynamics")
            out.append(float(value))
        angles = np.array(out)
        if not np.all(np.isfinite(angles)):
            raise SimulationError("PD targets must be finite")
        return angles


@dataclass
class ContactResult:
    points: np.ndarray
    velocities: np.ndarray
    forces: np.ndarray
    links: np.ndarray
    in_contact: np.ndarray
    generalized: np.ndarray

    @property
    def total(self) -> np.ndarray:
        return self.forces.sum(axis=0)

    def link_in_contact(self, links: Sequence[int]) -> bool:
        return bool(np.any(self.in_contact & np.isin(self.links, list(links))))


# Planar spatial algebra, vectors ordered (angular, x, y)

def plnr(theta: float, r) -> np.ndarray:
    """Coordinate transform to a frame at r rotated by theta."""
    c, s = math.cos(theta), math.sin(theta)
    return np.array([
        [1.0, 0.0, 0.0],
        [s * r[0] - c * r[1], c, s],
        [c * r[0] + s * r[1], -s, c],
    ])


def mcI(mass: float, com, inertia: float) -> np.ndarray:
    """Spatial inertia from mass, center of mass and rotational inertia about it."""
    cx, cy = com
    return np.array([
        [inertia + mass * (cx * cx + cy * cy), -mass * cy, mass * cx],
        [-mass * cy, mass, 0.0],
        [mass * cx, 0.0, mass],
    ])


def crm(v) -> np.ndarray:
    return np.array([
        [0.0, 0.0, 0.0],
        [v[2], 0.0, -v[0]],
        [-v[1], v[0], 0.0],
    ])


def crf(v) -> np.ndarray:
    return -crm(v).T


def _rot2(theta: float) -> np.ndarray:
    c, s = math.cos(theta), math.sin(theta)
    return np.array([[c, -s], [s, c]])


def perp(r: np.ndarray) -> np.ndarray:
    return np.array([-r[..., 1], r[..., 0]]).T if r.ndim > 1 else np.array([-r[1], r[0]])


def _cross2(a: np.ndarray, b: np.ndarray) -> float:
    return float(a[0] * b[1] - a[1] * b[0])


class PlanarModel:
    """Reduced-coordinate planar model of a character.

    Coordinates are (root x, root y, root angle, joint angles). The floating base
    is a chain of two massless prismatic bodies and one revolute body.
    """

    def __init__(self, tree: KinematicTree):
        for i, link in enumerate(tree.links[1:], start=1):
            if link.joint_type != 'revolute' or not np.allclose(link.axis, [0.0, 0.0, 1.0], atol=1e-9):
                raise SimulationError(f"Planar dynamics needs revolute joints about +z (link {i})")
        self.tree = tree
        n = tree.num_links
        self.n_links = n
        self.n_dof = n + 2
        self.parent = np.array([link.parent for link in tree.links])
        self.offsets = np.array([np.asarray(link.offset, dtype=float)[:2] for link in tree.links])
        self.origin_body = np.zeros((n, 2))
        self.origin_body[0] = self.offsets[0]
        self.lengths = np.array([link.length for link in tree.links])
        self.masses = np.array([link.mass for link in tree.links])
        self.inertias = np.array([link.inertia for link in tree.links])
        self.com_body = self.origin_body + np.column_stack([0.5 * self.lengths, np.zeros(n)])
        self.total_mass = float(self.masses.sum())
        self.kp = np.array([link.kp for link in tree.links[1:]])
        self.kd = np.array([link.kd for link in tree.links[1:]])
        self.torque_limit = np.array([link.torque_limit for link in tree.links[1:]])
        self.torso_links = tree.torso_links
        self.chains = [tree.ancestors(i) for i in range(n)]

        # Spatial bodies: 0 = base x, 1 = base y, 2 + i = link i
        self.body_parent = np.array([-1, 0, 1] + [2 + p for p in self.parent[1:]])
        self.body_inertia = [np.zeros((3, 3)), np.zeros((3, 3))] + [
            mcI(self.masses[i], self.com_body[i], self.inertias[i]) for i in range(n)]
        self.xtree_r = np.zeros((self.n_dof, 2))
        for i in range(1, n):
            p = self.parent[i]
            self.xtree_r[2 + i] = self.origin_body[p] + self.offsets[i]
        self.subspace = [np.array([0.0, 1.0, 0.0]), np.array([0.0, 0.0, 1.0])] + [
            np.array([1.0, 0.0, 0.0]) for _ in range(n)]

    def joint_transforms(self, q: np.ndarray) -> List[np.ndarray]:
        """Parent-to-body transforms for all spatial bodies."""
        xup = [plnr(0.0, (q[0], 0.0)), plnr(0.0, (0.0, q[1]))]
        for b in range(2, self.n_dof):
            xup.append(plnr(q[b], self.xtree_r[b]))
        return xup

    def link_frames(self, q: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
        """Absolute link angles and body-frame pivots in world coordinates."""
        n = self.n_links
        phi = np.zeros(n)
        pivots = np.zeros((n, 2))
        phi[0] = q[2]
        pivots[0] = q[:2]
        for i in range(1, n):
            p = self.parent[i]
            phi[i] = phi[p] + q[2 + i]
            pivots[i] = pivots[p] + _rot2(phi[p]) @ (self.origin_body[p] + self.offsets[i])
        return phi, pivots

    def link_velocities(self, q: np.ndarray, qdot: np.ndarray, phi=None, pivots=None):
        """Angular velocities and pivot linear velocities of all links."""
        if phi is None:
            phi, pivots = self.link_frames(q)
        n = self.n_links
        omega = np.zeros(n)
        v_pivots = np.zeros((n, 2))
        omega[0] = qdot[2]
        v_pivots[0] = qdot[:2]
        for i in range(1, n):
            p = self.parent[i]
            omega[i] = omega[p] + qdot[2 + i]
            v_pivots[i] = v_pivots[p] + omega[p] * perp(pivots[i] - pivots[p])
        return omega, v_pivots

    def body_points(self, q: np.ndarray, fractions=POINT_FRACTIONS, phi=None, pivots=None):
        """World positions of points along every link, with the owning link index."""
        if phi is None:
            phi, pivots = self.link_frames(q)
        points, owners = [], []
        for i in range(self.n_links):
            along = np.array([math.cos(phi[i]), math.sin(phi[i])])
            origin = pivots[i] + _rot2(phi[i]) @ self.origin_body[i]
            for s in fractions:
                points.append(origin + s * self.lengths[i] * along)
                owners.append(i)
        return np.array(points), np.array(owners, dtype=int)

    def link_coms(self, q: np.ndarray, phi=None, pivots=None) -> np.ndarray:
        if phi is None:
            phi, pivots = self.link_frames(q)
        return np.array([pivots[i] + _rot2(phi[i]) @ self.com_body[i] for i in range(self.n_links)])

    def generalized_force(self, q: np.ndarray, point: np.ndarray, link: int, force: np.ndarray,
                          pivots: np.ndarray) -> np.ndarray:
        """Jᵀ·F for a planar force applied at a point on a link."""
        out = np.zeros(self.n_dof)
        out[0] += force[0]
        out[1] += force[1]
        for a in self.chains[link]:
            out[2 + a] += _cross2(point - pivots[a], force)
        return out


def planar_model(model: Union[KinematicTree, PlanarModel]) -> PlanarModel:
    """Return the (cached) planar model of a character."""
    if isinstance(model, PlanarModel):
        return model
    cached = getattr(model, '_planar_model', None)
    if cached is None:
        cached = PlanarModel(model)
        model._planar_model = cached
    return cached


def mass_matrix(model, q) -> np.ndarray:
    """Joint-space inertia matrix by the composite-rigid-body algorithm."""
    pm = planar_model(model)
    q = np.asarray(q, dtype=float)
    xup = pm.joint_transforms(q)
    nb = pm.n_dof
    composite = [I.copy() for I in pm.body_inertia]
    for i in range(nb - 1, -1, -1):
        p = pm.body_parent[i]
        if p >= 0:
            composite[p] = composite[p] + xup[i].T @ composite[i] @ xup[i]
    H = np.zeros((nb, nb))
    for i in range(nb):
        fh = composite[i] @ pm.subspace[i]
        H[i, i] = pm.subspace[i] @ fh
        j = i
        while pm.body_parent[j] >= 0:
            fh = xup[j].T @ fh
            j = pm.body_parent[j]
            H[i, j] = H[j, i] = pm.subspace[j] @ fh
    return H


def inverse_dynamics(model, q, qdot, qddot, gravity: float = GRAVITY) -> np.ndarray:
    """Recursive Newton-Euler inverse dynamics."""
    pm = planar_model(model)
    xup = pm.joint_transforms(np.asarray(q, dtype=float))
    nb = pm.n_dof
    a_base = np.array([0.0, 0.0, gravity])
    v = [None] * nb
    a = [None] * nb
    f = [None] * nb
    for i in range(nb):
        vj = pm.subspace[i] * qdot[i]
        p = pm.body_parent[i]
        if p < 0:
            v[i] = vj
            a[i] = xup[i] @ a_base + pm.subspace[i] * qddot[i]
        else:
            v[i] = xup[i] @ v[p] + vj
            a[i] = xup[i] @ a[p] + pm.subspace[i] * qddot[i] + crm(v[i]) @ vj
        inertia = pm.body_inertia[i]
        f[i] = inertia @ a[i] + crf(v[i]) @ inertia @ v[i]
    tau = np.zeros(nb)
    for i in range(nb - 1, -1, -1):
        tau[i] = pm.subspace[i] @ f[i]
        p = pm.body_parent[i]
        if p >= 0:
            f[p] = f[p] + xup[i].T @ f[i]
    return tau


def bias_forces(model, q, qdot, gravity: float = GRAVITY) -> np.ndarray:
    """Coriolis, centrifugal and gravity terms C(q, qdot)."""
    return inverse_dynamics(model, q, qdot, np.zeros(len(q)), gravity)


def pd_torques(model, state: SimState, targets: Union[PdTargets, Sequence[float]]) -> np.ndarray:
    """Clamped PD torques toward target joint angles."""
    pm = planar_model(model)
    angles = targets.angles() if isinstance(targets, PdTargets) else np.asarray(targets, dtype=float)
    if angles.shape != (pm.n_links - 1,):
        raise SimulationError(f"Expected {pm.n_links - 1} PD targets, got {angles.shape}")
    tau = pm.kp * (angles - state.q[3:]) - pm.kd * state.qdot[3:]
    return np.clip(tau, -pm.torque_limit, pm.torque_limit)


def contact_points(model, q) -> Tuple[np.ndarray, np.ndarray]:
    """Link origins, midpoints and tips in world coordinates."""
    return planar_model(model).body_points(np.asarray(q, dtype=float))


def contact_forces(model, state: SimState, params: ContactParams) -> ContactResult:
    """Penalty ground contact at link endpoints and midpoints."""
    pm = planar_model(model)
    phi, pivots = pm.link_frames(state.q)
    omega, v_pivots = pm.link_velocities(state.q, state.qdot, phi, pivots)
    points, owners = pm.body_points(state.q, phi=phi, pivots=pivots)
    velocities = v_pivots[owners] + omega[owners, None] * perp(points - pivots[owners])
    forces = np.zeros_like(points)
    generalized = np.zeros(pm.n_dof)

    depth = params.ground_height - points[:, 1]
    in_contact = depth > 0.0
    for k in np.flatnonzero(in_contact):
        height_rate = velocities[k, 1]
        # damping only while the point is moving down into the ground
        f_n = params.k_n * depth[k] + params.d_n * max(-height_rate, 0.0)
        f_n = max(f_n, 0.0)
        limit = params.mu * f_n
        f_t = -float(np.clip(params.d_t * velocities[k, 0], -limit, limit))
        forces[k] = (f_t, f_n)
        generalized += pm.generalized_force(state.q, points[k], owners[k], forces[k], pivots)
    return ContactResult(points, velocities, forces, owners, in_contact, generalized)


def linear_momentum(model, state: SimState) -> np.ndarray:
    """Total linear momentum Σ m_i v_com_i."""
    pm = planar_model(model)
    phi, pivots = pm.link_frames(state.q)
    omega, v_pivots = pm.link_velocities(state.q, state.qdot, phi, pivots)
    coms = pm.link_coms(state.q, phi, pivots)
    v_coms = v_pivots + omega[:, None] * perp(coms - pivots)
    return pm.masses @ v_coms


def kinetic_energy(model, state: SimState) -> float:
    pm = planar_model(model)
    phi, pivots = pm.link_frames(state.q)
    omega, v_pivots = pm.link_velocities(state.q, state.qdot, phi, pivots)
    coms = pm.link_coms(state.q, phi, pivots)
    v_coms = v_pivots + omega[:, None] * perp(coms - pivots)
    return float(0.5 * pm.masses @ np.sum(v_coms ** 2, axis=1) + 0.5 * pm.inertias @ omega ** 2)


def potential_energy(model, state: SimState, gravity: float = GRAVITY) -> float:
    pm = planar_model(model)
    return float(gravity * pm.masses @ pm.link_coms(state.q)[:, 1])


def _external_generalized(pm: PlanarModel, q: np.ndarray, external: ExternalForces) -> Tuple[np.ndarray, np.ndarray]:
    generalized = np.zeros(pm.n_dof)
    total = np.zeros(2)
    if not external:
        return generalized, total
    phi, pivots = pm.link_frames(q)
    coms = pm.link_coms(q, phi, pivots)
    for link, force in external:
        force = np.asarray(force, dtype=float)
        # Forces act at the link's center of mass
        generalized += pm.generalized_force(q, coms[link], link, force, pivots)
        total += force
    return generalized, total


def _accelerations(pm: PlanarModel, q: np.ndarray, qdot: np.ndarray, torques: np.ndarray, params: ContactParams,
                   gravity: float, external: ExternalForces,
                   fixed_root: bool) -> Tuple[np.ndarray, ContactResult, np.ndarray]:
    """Generalized accelerations, the contacts behind them and the net external force."""
    H = mass_matrix(pm, q)
    C = bias_forces(pm, q, qdot, gravity)
    contacts = contact_forces(pm, SimState(q, qdot), params)
    ext_generalized, ext_total = _external_generalized(pm, q, external)

    forces = np.zeros(pm.n_dof)
    forces[3:] = torques
    forces += contacts.generalized + ext_generalized

    qddot = np.zeros(pm.n_dof)
    active = slice(3, None) if fixed_root else slice(None)
    try:
        factor = cho_factor(H[active, active])
        qddot[active] = cho_solve(factor, (forces - C)[active])
    except LinAlgError as e:
        raise SimulationError(f"Mass matrix is not positive definite: {e}")
    net_force = contacts.total + ext_total + np.array([0.0, -pm.total_mass * gravity])
    return qddot, contacts, net_force


def advance(model, state: SimState, torques, params: ContactParams, dt: float = DEFAULT_DT,
            gravity: float = GRAVITY, external: ExternalForces = None,
            fixed_root: bool = False, integrator: str = DEFAULT_INTEGRATOR) -> Tuple[SimState, ContactResult]:
    """One integration step, returning the new state and the contacts at its start.

    'rk4' is classical Runge-Kutta over (q, qdot); 'semi_implicit' is
    qdot += qddot·dt followed by q += qdot·dt. Torques are held over the step.
    """
    if not dt > 0.0:
        raise SimulationError(f"Timestep must be positive, got {dt}")
    if integrator not in INTEGRATORS:
        raise SimulationError(f"Unknown integrator '{integrator}', expected one of {INTEGRATORS}")
    pm = planar_model(model)
    q = state.q
    qdot = state.qdot.copy()
    if fixed_root:
        # welded root: base coordinates neither accelerate nor move
        qdot[:3] = 0.0
    torques = np.clip(np.asarray(torques, dtype=float), -pm.torque_limit, pm.torque_limit)

    def derivative(q_k, qdot_k):
        return _accelerations(pm, q_k, qdot_k, torques, params, gravity, external, fixed_root)

    qddot, contacts, net_force = derivative(q, qdot)
    if integrator == 'semi_implicit':
        qdot_new = qdot + qddot * dt
        q_new = q + qdot_new * dt
        impulse = dt * net_force
    else:
        v2 = qdot + 0.5 * dt * qddot
        a2, _, f2 = derivative(q + 0.5 * dt * qdot, v2)
        v3 = qdot + 0.5 * dt * a2
        a3, _, f3 = derivative(q + 0.5 * dt * v2, v3)
        v4 = qdot + dt * a3
        a4, _, f4 = derivative(q + dt * v3, v4)
        q_new = q + dt / 6.0 * (qdot + 2.0 * v2 + 2.0 * v3 + v4)
        qdot_new = qdot + dt / 6.0 * (qddot + 2.0 * a2 + 2.0 * a3 + a4)
        impulse = dt / 6.0 * (net_force + 2.0 * f2 + 2.0 * f3 + f4)
    new_state = SimState(q_new, qdot_new)

    if not fixed_root:
        # Base coordinates are cyclic: momentum changes by the step's impulse, same quadrature as the integrator
        target = linear_momentum(pm, SimState(q, qdot)) + impulse
        new_state.qdot[:2] += (target - linear_momentum(pm, new_state)) / pm.total_mass

    if not (np.all(np.isfinite(new_state.q)) and np.all(np.isfinite(new_state.qdot))):
        raise SimulationError("Simulation diverged to non-finite state")
    return new_state, contacts


def step_dynamics(model, state: SimState, torques, params: ContactParams, dt: float = DEFAULT_DT,
                  gravity: float = GRAVITY, external: ExternalForces = None,
                  fixed_root: bool = False, integrator: str = DEFAULT_INTEGRATOR) -> SimState:
    """Advance the character by one timestep."""
    return advance(model, state, torques, params, dt, gravity, external, fixed_root, integrator)[0]


def planar_angle(q) -> float:
    """Rotation about +z of a quaternion, in (-π, π]."""
    q = np.asarray(q, dtype=float)
    angle = 2.0 * math.atan2(q[3], q[0])
    return math.atan2(math.sin(angle), math.cos(angle))


def planar_coordinates(tree: KinematicTree, pose: Pose, reference: Optional[np.ndarray] = None) -> np.ndarray:
    """Generalized coordinates of a planar pose, angles unwrapped toward a reference."""
    angles = [planar_angle(pose.root_rotation)] + [planar_angle(q) for q in pose.joint_rotations]
    q = np.concatenate([pose.root_position[:2], angles])
    if reference is not None:
        q[2:] += 2.0 * math.pi * np.round((reference[2:] - q[2:]) / (2.0 * math.pi))
    return q


def pose_from_coordinates(tree: KinematicTree, q) -> Pose:
    """Pose for planar generalized coordinates."""
    q = np.asarray(q, dtype=float)
    z = [0.0, 0.0, 1.0]
    joints = np.array([quat_about(z, angle) for angle in q[3:]]).reshape(-1, 4)
    return Pose(np.array([q[0], q[1], 0.0]), quat_about(z, q[2]), joints)


class Simulator:
    """Stateful wrapper stepping one character with PD control and ground contact."""

    def __init__(self, model, contact: Optional[ContactParams] = None, dt: float = DEFAULT_DT,
                 gravity: float = GRAVITY, fixed_root: bool = False, state: Optional[SimState] = None,
                 integrator: str = DEFAULT_INTEGRATOR):
        self.model = planar_model(model)
        self.tree = self.model.tree
        self.contact = contact or ContactParams()
        self.dt = dt
        self.gravity = gravity
        self.fixed_root = fixed_root
        if integrator not in INTEGRATORS:
            raise SimulationError(f"Unknown integrator '{integrator}', expected one of {INTEGRATORS}")
        self.integrator = integrator
        self.contact_log: List[ContactResult] = []
        self._state = state.copy() if state is not None else SimState(
            np.zeros(self.model.n_dof), np.zeros(self.model.n_dof))
        self._state.validate(self.model.n_dof)

    @property
    def dim(self) -> int:
        return self.model.n_dof

    def set_state(self, state: SimState):
        state.validate(self.model.n_dof)
        self._state = state.copy()
        self.contact_log = []

    def get_state(self) -> SimState:
        return self._state.copy()

    def step(self, torques, external: ExternalForces = None) -> ContactResult:
        self._state, contacts = advance(self.model, self._state, torques, self.contact, self.dt,
                                        self.gravity, external, self.fixed_root, self.integrator)
        return contacts

    def step_pd(self, targets, substeps: int = 1, external: ExternalForces = None) -> List[ContactResult]:
        """Hold PD targets for a number of substeps, recording contacts per substep."""
        self.contact_log = []
        for _ in range(substeps):
            torques = pd_torques(self.model, self._state, targets)
            self.contact_log.append(self.step(torques, external))
        return self.contact_log

    def torso_contact(self) -> bool:
        """True if a torso-tagged link touched ground in the last recorded substeps."""
        return any(c.link_in_contact(self.model.torso_links) for c in self.contact_log)

    def energy(self) -> float:
        return kinetic_energy(self.model, self._state) + potential_energy(self.model, self._state, self.gravity)
