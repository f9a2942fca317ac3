"""Mass-spring cloth: mesh construction, per-node forces and the individual physics ops.

Everything here works on numpy arrays and is used directly by the pure-Python
substep kernel; the compiled kernel fuses the same sequence of operations.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace

import numpy as np

log = logging.getLogger(__name__)

STRUCTURAL, SHEAR, BEND = 0, 1, 2


class ConfigError(ValueError):
    pass


class SimulationBlowUp(RuntimeError):
    def __init__(self, node: int, step: int, time: float):
        super().__init__(f"non-finite state at node {node} (substep {step}, t={time:.4f}s)")
        self.node = node
        self.step = step
        self.time = time


@dataclass(frozen=True)
class ClothMesh:
    n_rows: int
    n_cols: int
    rest_positions: np.ndarray  # (N, 3)
    node_mass: float
    triangles: np.ndarray  # (F, 3) int
    springs: np.ndarray  # (S, 2) int32
    rest_lengths: np.ndarray  # (S,)
    spring_class: np.ndarray  # (S,) int8

    @property
    def n_nodes(self) -> int:
        return self.n_rows * self.n_cols

    def node(self, row: int, col: int) -> int:
        return row * self.n_cols + col

    @property
    def corners(self) -> tuple[int, int, int, int]:
        """Corner indices: (0,0), (0,last), (last,0), (last,last)."""
        r, c = self.n_rows - 1, self.n_cols - 1
        return (0, c, self.node(r, 0), self.node(r, c))


@dataclass
class SimState:
    positions: np.ndarray  # (N, 3)
    velocities: np.ndarray  # (N, 3)
    manip_pos: np.ndarray  # (M, 3)
    manip_vel: np.ndarray  # (M, 3) realized velocity of the last substep
    grasp: np.ndarray  # (M,) int, -1 = nothing bound
    time: float = 0.0

    def copy(self) -> SimState:
        return SimState(
            self.positions.copy(),
            self.velocities.copy(),
            self.manip_pos.copy(),
            self.manip_vel.copy(),
            self.grasp.copy(),
            self.time,
        )


@dataclass(frozen=True)
class SimConfig:
    gravity: float = 981.0
    structural_stiffness: float = 150.0
    shear_stiffness: float = 150.0
    bend_stiffness: float = 15.0
    spring_damping: float = 0.05
    velocity_damping: float = 1.0
    dt: float = 0.002
    substeps: int = 10
    friction: float = 0.6
    grasp_radius: float = 5.0
    max_speed: float = 150.0

    def __post_init__(self):
        if not self.dt > 0:
            raise ConfigError("dt must be positive")
        if self.substeps < 1:
            raise ConfigError("substeps must be >= 1")
        if min(self.structural_stiffness, self.shear_stiffness, self.bend_stiffness) < 0:
            raise ConfigError("stiffness must be non-negative")
        if self.friction < 0:
            raise ConfigError("friction must be non-negative")

    @property
    def control_dt(self) -> float:
        return self.dt * self.substeps

    def stiffness_by_class(self) -> np.ndarray:
        return np.array([self.structural_stiffness, self.shear_stiffness, self.bend_stiffness])


@dataclass(frozen=True)
class TableGeom:
    """Axis-aligned table block; ``enabled=False`` means no table at all."""

    top: float = 0.0
    x_range: tuple[float, float] = (-150.0, 150.0)
    y_range: tuple[float, float] = (-150.0, 150.0)
    thickness: float = 75.0
    edge: str = "none"  # side the cloth hangs over, e.g. "y+"
    enabled: bool = True

    def __post_init__(self):
        if not (self.x_range[1] > self.x_range[0] and self.y_range[1] > self.y_range[0]):
            raise ConfigError("table extent is degenerate")
        if self.thickness <= 0:
            raise ConfigError("table thickness must be positive")

    def as_array(self) -> np.ndarray:
        return np.array(
            [self.top, self.x_range[0], self.x_range[1], self.y_range[0], self.y_range[1],
             self.top - self.thickness, 1.0 if self.enabled else 0.0]
        )


@dataclass(frozen=True)
class Workspace:
    """Intersection of axis-aligned half-spaces, stored as box bounds."""

    lo: tuple[float, float, float] = (-np.inf, -np.inf, -np.inf)
    hi: tuple[float, float, float] = (np.inf, np.inf, np.inf)

    def as_array(self) -> np.ndarray:
        return np.array([self.lo, self.hi], dtype=float)

    def contains(self, p: np.ndarray, tol: float = 1e-9) -> bool:
        p = np.asarray(p)
        return bool(np.all(p >= np.array(self.lo) - tol) and np.all(p <= np.array(self.hi) + tol))

    def shifted(self, **bounds: float) -> Workspace:
        lo, hi = list(self.lo), list(self.hi)
        for key, value in bounds.items():
            side, axis = key.split("_")
            idx = "xyz".index(axis)
            (lo if side == "lo" else hi)[idx] = value
        return replace(self, lo=tuple(lo), hi=tuple(hi))


@dataclass(frozen=True)
class Pose:
    """Placement of the flat cloth: node (r, c) sits at origin + c*s*u + r*s*v."""

    origin: tuple[float, float, float] = (0.0, 0.0, 0.0)
    u: tuple[float, float, float] = (1.0, 0.0, 0.0)
    v: tuple[float, float, float] = (0.0, 1.0, 0.0)


def build_cloth(n_rows: int, n_cols: int, side_length: float, total_mass: float,
                placement_pose: Pose = Pose(), n_manipulators: int = 1) -> tuple[ClothMesh, SimState]:
    if n_rows < 2 or n_cols < 2:
        raise ConfigError(f"cloth grid must be at least 2x2, got {n_rows}x{n_cols}")
    if side_length <= 0 or total_mass <= 0:
        raise ConfigError("side_length and total_mass must be positive")

    du = side_length / (n_cols - 1)
    dv = side_length / (n_rows - 1)
    origin = np.asarray(placement_pose.origin, dtype=float)
    u = np.asarray(placement_pose.u, dtype=float)
    v = np.asarray(placement_pose.v, dtype=float)
    rr, cc = np.meshgrid(np.arange(n_rows), np.arange(n_cols), indexing="ij")
    pos = origin + (cc.reshape(-1, 1) * du) * u + (rr.reshape(-1, 1) * dv) * v

    def idx(r, c):
        return r * n_cols + c

    springs, classes = [], []
    for r in range(n_rows):
        for c in range(n_cols):
            if c + 1 < n_cols:
                springs.append((idx(r, c), idx(r, c + 1)))
                classes.append(STRUCTURAL)
            if r + 1 < n_rows:
                springs.append((idx(r, c), idx(r + 1, c)))
                classes.append(STRUCTURAL)
    for r in range(n_rows - 1):
        for c in range(n_cols - 1):
            springs.append((idx(r, c), idx(r + 1, c + 1)))
            springs.append((idx(r, c + 1), idx(r + 1, c)))
            classes += [SHEAR, SHEAR]
    for r in range(n_rows):
        for c in range(n_cols):
            if c + 2 < n_cols:
                springs.append((idx(r, c), idx(r, c + 2)))
                classes.append(BEND)
            if r + 2 < n_rows:
                springs.append((idx(r, c), idx(r + 2, c)))
                classes.append(BEND)

    tris = []
    for r in range(n_rows - 1):
        for c in range(n_cols - 1):
            tris.append((idx(r, c), idx(r, c + 1), idx(r + 1, c + 1)))
            tris.append((idx(r, c), idx(r + 1, c + 1), idx(r + 1, c)))

    springs = np.asarray(springs, dtype=np.int32)
    rest = np.linalg.norm(pos[springs[:, 0]] - pos[springs[:, 1]], axis=1)
    mesh = ClothMesh(
        n_rows=n_rows,
        n_cols=n_cols,
        rest_positions=pos.copy(),
        node_mass=total_mass / (n_rows * n_cols),
        triangles=np.asarray(tris, dtype=np.int64),
        springs=springs,
        rest_lengths=rest,
        spring_class=np.asarray(classes, dtype=np.int8),
    )
    state = SimState(
        positions=pos.copy(),
        velocities=np.zeros_like(pos),
        manip_pos=np.zeros((n_manipulators, 3)),
        manip_vel=np.zeros((n_manipulators, 3)),
        grasp=np.full(n_manipulators, -1, dtype=np.int64),
    )
    return mesh, state


def spring_force(pos_a, pos_b, vel_a, vel_b, rest_length, stiffness, damping):
    """Damped Hooke spring between two points.

    Returns ``(force_on_a, force_on_b, singular)``; coincident endpoints give
    zero force with ``singular=True``.
    """
    d = np.asarray(pos_b, dtype=float) - np.asarray(pos_a, dtype=float)
    length = float(np.sqrt(d @ d))
    if length == 0.0:
        return np.zeros(3), np.zeros(3), True
    n = d / length
    rel_speed = float((np.asarray(vel_b) - np.asarray(vel_a)) @ n)
    f = (stiffness * (length - rest_length) + damping * rel_speed) * n
    return f, -f, False


def spring_forces(positions, velocities, mesh: ClothMesh, config: SimConfig,
                  out: np.ndarray | None = None) -> tuple[np.ndarray, int]:
    """All spring forces accumulated per node. Returns (forces, n_singular)."""
    k = config.stiffness_by_class()[mesh.spring_class]
    if out is None:
        out = np.zeros_like(positions)
    n_sing = _spring_forces_into(positions, velocities, mesh.springs, mesh.rest_lengths, k,
                                 config.spring_damping, out)
    if n_sing:
        log.debug("%d coincident spring endpoints", n_sing)
    return out, n_sing


def _spring_forces_into(positions, velocities, springs, rest, k, damping, out) -> int:
    a, b = springs[:, 0], springs[:, 1]
    d = positions[b] - positions[a]
    length = np.sqrt(np.einsum("ij,ij->i", d, d))
    singular = length == 0.0
    safe = np.where(singular, 1.0, length)
    n = d / safe[:, None]
    rel = np.einsum("ij,ij->i", velocities[b] - velocities[a], n)
    mag = k * (length - rest) + damping * rel
    mag[singular] = 0.0
    f = mag[:, None] * n
    n_nodes = positions.shape[0]
    for axis in range(3):
        out[:, axis] += np.bincount(a, weights=f[:, axis], minlength=n_nodes)
        out[:, axis] -= np.bincount(b, weights=f[:, axis], minlength=n_nodes)
    return int(singular.sum())


def accumulate_forces(state: SimState, mesh: ClothMesh, config: SimConfig) -> np.ndarray:
    """Springs + gravity + global velocity damping (contact is handled separately)."""
    m = mesh.node_mass
    forces = np.zeros_like(state.positions)
    forces[:, 2] -= config.gravity * m
    forces -= (config.velocity_damping * m) * state.velocities
    spring_forces(state.positions, state.velocities, mesh, config, out=forces)
    return forces


def integrate(state: SimState, forces: np.ndarray, dt: float, mesh: ClothMesh,
              step: int = 0) -> SimState:
    """Semi-implicit Euler; grasped nodes are kinematic and left untouched."""
    if not dt > 0:
        raise ConfigError("dt must be positive")
    out = state.copy()
    free = np.ones(mesh.n_nodes, dtype=bool)
    bound = state.grasp[state.grasp >= 0]
    free[bound] = False
    out.velocities[free] += forces[free] * (dt / mesh.node_mass)
    out.positions[free] += out.velocities[free] * dt
    out.time = state.time + dt
    _check_finite(out, step)
    return out


def _check_finite(state: SimState, step: int) -> None:
    ok = np.isfinite(state.positions).all(axis=1) & np.isfinite(state.velocities).all(axis=1)
    if not ok.all():
        raise SimulationBlowUp(int(np.argmin(ok)), step, state.time)


def resolve_table_contact(state: SimState, table: TableGeom, friction_coefficient: float) -> SimState:
    """Push penetrating nodes out of the table block through the nearest face.

    The removed normal velocity ``dvn`` acts as the normal impulse; tangential
    velocity is scaled by ``max(0, 1 - mu_eff)`` with ``mu_eff = mu * dvn / |vt|``
    (Coulomb friction expressed as a velocity change over one substep).
    """
    out = state.copy()
    _contact_inplace(out.positions, out.velocities, table.as_array(), friction_coefficient)
    return out


def _contact_inplace(pos, vel, table: np.ndarray, mu: float) -> None:
    top, x0, x1, y0, y1, bottom, enabled = table
    if not enabled:
        return
    x, y, z = pos[:, 0], pos[:, 1], pos[:, 2]
    inside = (x > x0) & (x < x1) & (y > y0) & (y < y1) & (z < top) & (z > bottom)
    if not inside.any():
        return
    idx = np.nonzero(inside)[0]
    # penetration depth per face: top, -x, +x, -y, +y
    depths = np.stack(
        [top - z[idx], x[idx] - x0, x1 - x[idx], y[idx] - y0, y1 - y[idx]], axis=1
    )
    face = np.argmin(depths, axis=1)
    axes = np.array([2, 0, 0, 1, 1])[face]
    targets = np.array([top, x0, x1, y0, y1])[face]
    signs = np.array([1.0, -1.0, 1.0, -1.0, 1.0])[face]  # outward normal component
    pos[idx, axes] = targets
    vn = vel[idx, axes] * signs
    dvn = np.where(vn < 0.0, -vn, 0.0)
    vel[idx, axes] = np.where(vn < 0.0, 0.0, vel[idx, axes])
    vt = vel[idx].copy()
    vt[np.arange(len(idx)), axes] = 0.0
    speed_t = np.sqrt(np.einsum("ij,ij->i", vt, vt))
    with np.errstate(divide="ignore", invalid="ignore"):
        scale = np.where(speed_t > 0.0, np.maximum(0.0, 1.0 - mu * dvn / speed_t), 0.0)
    vt *= (scale - 1.0)[:, None]
    vel[idx] += vt


def friction_scale(speed_t: float, dvn: float, mu: float) -> float:
    """Tangential velocity multiplier of the contact model for one substep."""
    if speed_t <= 0.0:
        return 0.0
    return max(0.0, 1.0 - mu * dvn / speed_t)


def clamp_command(target_velocity: np.ndarray, max_speed: float) -> np.ndarray:
    """Per-manipulator speed clamp to ``max_speed`` (direction preserved)."""
    v = np.array(target_velocity, dtype=float).reshape(-1, 3)
    if not np.isfinite(v).all():
        raise ValueError("manipulator command must be finite")
    speed = np.linalg.norm(v, axis=1)
    over = speed > max_speed
    v[over] *= (max_speed / speed[over])[:, None]
    return v


def command_manipulator(state: SimState, target_velocity: np.ndarray, workspace: Workspace,
                        dt: float, max_speed: float = np.inf) -> tuple[SimState, np.ndarray]:
    """Advance the manipulator(s) by one substep; returns (state', clamped-axis mask)."""
    out = state.copy()
    v = clamp_command(target_velocity, max_speed)
    clamped = _advance_manip(out.manip_pos, out.manip_vel, v, workspace.as_array(), dt)
    return out, clamped


def _advance_manip(mpos, mvel, cmd, ws, dt) -> np.ndarray:
    want = mpos + cmd * dt
    new = np.clip(want, ws[0], ws[1])
    clamped = new != want
    mvel[:] = np.where(clamped, 0.0, cmd)
    mpos[:] = new
    return clamped


def try_grasp(state: SimState, mesh: ClothMesh, grasp_radius: float, which: int = 0) -> SimState:
    """Bind the nearest free node within ``grasp_radius`` (lowest index on ties)."""
    out = state.copy()
    _grasp_inplace(out, grasp_radius, which)
    return out


def _grasp_inplace(state: SimState, grasp_radius: float, which: int) -> bool:
    if state.grasp[which] >= 0:
        return True
    d = np.linalg.norm(state.positions - state.manip_pos[which], axis=1)
    taken = [g for i, g in enumerate(state.grasp) if g >= 0 and i != which]
    d[taken] = np.inf
    node = int(np.argmin(d))  # argmin returns the first (lowest) index on ties
    if d[node] <= grasp_radius:
        state.grasp[which] = node
        state.positions[node] = state.manip_pos[which]
        state.velocities[node] = state.manip_vel[which]
        return True
    return False


def release(state: SimState, which: int | None = None) -> SimState:
    out = state.copy()
    if which is None:
        out.grasp[:] = -1
    else:
        out.grasp[which] = -1
    return out


def enforce_grasp(state: SimState) -> None:
    for m, node in enumerate(state.grasp):
        if node >= 0:
            state.positions[node] = state.manip_pos[m]
            state.velocities[node] = state.manip_vel[m]


def kinetic_energy(state: SimState, mesh: ClothMesh) -> float:
    return 0.5 * mesh.node_mass * float(np.sum(state.velocities**2))


@dataclass
class StepEvents:
    grasped: list[int] = field(default_factory=list)
    grasp_failed: list[int] = field(default_factory=list)
    released: list[int] = field(default_factory=list)
    clamped: bool = False
