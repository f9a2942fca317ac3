"""Goal-conditioned cloth tasks: diagonal fold, sideways fold, place on table.

Cloth grid layout (rows along the pose ``v`` axis, columns along ``u``)::

    corner 2 (last, 0) ---- corner 3 (last, last)
         |                        |
    corner 0 (0, 0)   ---- corner 1 (0, last)

Observation layout, in this order: for every selected cloth point its
position then velocity (6 reals each), manipulator position and velocity (6),
desired goal (3 or 6), grasp flag (1).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .clothsim import (
    ClothMesh,
    ConfigError,
    Pose,
    SimConfig,
    SimState,
    TableGeom,
    Workspace,
    build_cloth,
    make_kernel,
    sim_step,
)

DIAGONAL, SIDEWAYS, PLACE = "diagonal", "sideways", "place"
TASK_NAMES = (DIAGONAL, SIDEWAYS, PLACE)
N_POINTS_CHOICES = (4, 8, 12)


class ShapeError(ValueError):
    pass


@dataclass(frozen=True)
class TaskSpec:
    name: str
    horizon: int
    threshold: float
    tracked: tuple[int, ...]  # corner slots 0..3 whose positions form the goal
    n_manipulators: int
    action_dim: int
    workspace: Workspace
    table: TableGeom
    goal_radius: float = 10.0
    place_distance: tuple[float, float] = (15.0, 45.0)
    placement_bound: float = 10.0
    cloth_side: float = 100.0
    cloth_mass: float = 0.2
    cloth_nodes: int = 9

    def __post_init__(self):
        if self.horizon <= 0 or self.threshold <= 0:
            raise ConfigError("horizon and threshold must be positive")
        if self.action_dim not in (3, 4):
            raise ConfigError("action_dim must be 3 or 4")
        if not set(self.tracked) <= {0, 1, 2, 3}:
            raise ConfigError("tracked vertices must be corner slots 0..3")

    @property
    def goal_dim(self) -> int:
        return 3 * len(self.tracked)


_TABLE_WS = Workspace(lo=(-150.0, -150.0, 0.0), hi=(150.0, 150.0, 150.0))

TASKS: dict[str, TaskSpec] = {
    DIAGONAL: TaskSpec(
        name=DIAGONAL, horizon=200, threshold=10.0, tracked=(0,), n_manipulators=1,
        action_dim=4, workspace=_TABLE_WS, table=TableGeom(),
    ),
    SIDEWAYS: TaskSpec(
        name=SIDEWAYS, horizon=300, threshold=10.0, tracked=(0, 1), n_manipulators=1,
        action_dim=4, workspace=_TABLE_WS, table=TableGeom(), goal_radius=5.0,
    ),
    PLACE: TaskSpec(
        name=PLACE, horizon=500, threshold=20.0, tracked=(2, 3), n_manipulators=2,
        action_dim=3,
        workspace=Workspace(lo=(-150.0, 0.0, -50.0), hi=(150.0, 150.0, 150.0)),
        table=TableGeom(y_range=(-150.0, 0.0), edge="y+"),
    ),
}

PLACE_HANG_HEIGHT = 40.0  # z of the grasped edge at reset
PLACE_HANG_OFFSET = (5.0, 15.0)  # distance of the hanging plane from the table edge


def get_task(name: str, **overrides) -> TaskSpec:
    try:
        spec = TASKS[name]
    except KeyError:
        raise ConfigError(f"unknown task {name!r}; expected one of {TASK_NAMES}") from None
    if overrides:
        from dataclasses import replace

        spec = replace(spec, **overrides)
    return spec


def point_indices(n_rows: int, n_cols: int, n_points: int) -> np.ndarray:
    """Mesh node indices of the observed cloth points (corners first)."""
    if n_points not in N_POINTS_CHOICES:
        raise ConfigError(f"n_points must be one of {N_POINTS_CHOICES}, got {n_points}")
    R, C = n_rows - 1, n_cols - 1
    rc = [(0, 0), (0, C), (R, 0), (R, C)]
    if n_points == 8:
        rc += [(0, C // 2), (R // 2, 0), (R // 2, C), (R, C // 2)]
    elif n_points == 12:
        c1, c2 = round(C / 3), round(2 * C / 3)
        r1, r2 = round(R / 3), round(2 * R / 3)
        rc += [(0, c1), (0, c2), (r1, 0), (r2, 0), (r1, C), (r2, C), (R, c1), (R, c2)]
    return np.array([r * n_cols + c for r, c in rc], dtype=np.int64)


def obs_dim(task: TaskSpec, n_points: int) -> int:
    return 6 * n_points + 6 + task.goal_dim + 1


def goal_slice(task: TaskSpec, n_points: int) -> slice:
    start = 6 * n_points + 6
    return slice(start, start + task.goal_dim)


def is_success(achieved, desired, threshold: float) -> np.ndarray | bool:
    """Every tracked vertex within ``threshold`` (closed ball) of its target.

    Works on single goals or on batches along the leading axis.
    """
    a = np.asarray(achieved, dtype=float)
    d = np.asarray(desired, dtype=float)
    if a.shape != d.shape or a.shape[-1] % 3:
        raise ShapeError(f"goal layout mismatch: {a.shape} vs {d.shape}")
    diff = (a - d).reshape(a.shape[:-1] + (a.shape[-1] // 3, 3))
    dist = np.sqrt(np.sum(diff * diff, axis=-1))
    ok = np.all(dist <= threshold, axis=-1)
    return bool(ok) if ok.ndim == 0 else ok


def reward(achieved, desired, threshold: float):
    """Sparse reward: 0 on success, -1 otherwise."""
    ok = is_success(achieved, desired, threshold)
    if isinstance(ok, bool):
        return 0.0 if ok else -1.0
    return ok.astype(float) - 1.0


def goal_distances(achieved, desired) -> np.ndarray:
    diff = (np.asarray(achieved) - np.asarray(desired)).reshape(-1, 3)
    return np.linalg.norm(diff, axis=1)


@dataclass
class StepResult:
    observation: np.ndarray
    reward: float
    is_success: bool
    achieved_goal: np.ndarray
    done: bool
    info: dict = field(default_factory=dict)


class ClothEnv:
    """Fixed-horizon goal-conditioned environment over one cloth task.

    ``reset`` places the cloth, samples a goal and returns ``(obs, goal)``;
    ``step`` never terminates early, ``done`` becomes true at ``t == T``.
    """

    def __init__(self, task: TaskSpec | str, n_points: int = 8, sim_config: SimConfig | None = None,
                 backend: str | None = None):
        self.task = get_task(task) if isinstance(task, str) else task
        self.n_points = n_points
        self.sim_config = sim_config or SimConfig()
        self.backend = backend
        n = self.task.cloth_nodes
        self._points = point_indices(n, n, n_points)
        self.obs_dim = obs_dim(self.task, n_points)
        self.goal_dim = self.task.goal_dim
        self.action_dim = self.task.action_dim
        self.mesh: ClothMesh | None = None
        self.state: SimState | None = None
        self.goal: np.ndarray | None = None
        self.origin: np.ndarray | None = None
        self.workspace: Workspace | None = None
        self.t = 0
        self._kernel = None
        self._tracked_nodes: np.ndarray | None = None

    # -- episode setup -------------------------------------------------
    def place_cloth(self, rng: np.random.Generator) -> tuple[ClothMesh, SimState]:
        task = self.task
        n, L = task.cloth_nodes, task.cloth_side
        b = task.placement_bound
        jx, jy = rng.uniform(-b, b, size=2)
        if task.name == PLACE:
            y_h = rng.uniform(*PLACE_HANG_OFFSET)
            pose = Pose(origin=(-L / 2 + jx, y_h, PLACE_HANG_HEIGHT), u=(1.0, 0.0, 0.0),
                        v=(0.0, 0.0, -1.0))
        else:
            pose = Pose(origin=(-L / 2 + jx, -L / 2 + jy, task.table.top))
        mesh, state = build_cloth(n, n, L, task.cloth_mass, pose, task.n_manipulators)
        corners = mesh.corners
        if task.name == PLACE:
            for m, c in enumerate((corners[0], corners[1])):
                state.manip_pos[m] = state.positions[c]
                state.grasp[m] = c
        else:
            state.manip_pos[0] = state.positions[corners[0]] + np.array([0.0, 0.0, 2.0])
        self.origin = np.asarray(pose.origin, dtype=float)
        ws = task.workspace
        if task.name == SIDEWAYS:
            ws = ws.shifted(hi_x=self.origin[0] + L / 2)
        self.workspace = ws
        return mesh, state

    def sample_goal(self, rng: np.random.Generator, state: SimState | None = None) -> np.ndarray:
        """Goal for the current cloth placement (state defaults to the reset state)."""
        task = self.task
        state = self.state if state is None else state
        c = self.mesh.corners
        p = state.positions
        r_g = task.goal_radius
        if task.name == DIAGONAL:
            far, near = p[c[3]], p[c[0]]
            u = (near - far) / np.linalg.norm(near - far)
            return far + rng.uniform(0.0, r_g) * u
        if task.name == SIDEWAYS:
            return np.concatenate([_disk(p[c[2]], r_g, rng), _disk(p[c[3]], r_g, rng)])
        d = rng.uniform(*task.place_distance)
        y = task.table.y_range[1] - d
        top = task.table.top
        return np.array([p[c[0], 0], y, top, p[c[1], 0], y, top])

    def reset(self, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
        self.mesh, self.state = self.place_cloth(rng)
        corners = np.array(self.mesh.corners)
        self._tracked_nodes = corners[list(self.task.tracked)]
        self._kernel = make_kernel(self.mesh, self.sim_config, self.task.table, self.workspace,
                                   self.backend)
        self.goal = self.sample_goal(rng)
        self.t = 0
        return self.observe(self.state), self.goal.copy()

    # -- views ------------------------------------------------------------
    def achieved_goal(self, state: SimState | None = None) -> np.ndarray:
        state = self.state if state is None else state
        return state.positions[self._tracked_nodes].reshape(-1).copy()

    def grasp_flag(self, state: SimState) -> float:
        return 1.0 if np.all(state.grasp >= 0) else 0.0

    def observe(self, state: SimState | None = None, goal: np.ndarray | None = None) -> np.ndarray:
        state = self.state if state is None else state
        goal = self.goal if goal is None else goal
        out = np.empty(self.obs_dim)
        k = 6 * self.n_points
        pts = out[:k].reshape(self.n_points, 6)
        pts[:, :3] = state.positions[self._points]
        pts[:, 3:] = state.velocities[self._points]
        out[k:k + 3] = state.manip_pos[0]
        out[k + 3:k + 6] = state.manip_vel[0]
        out[k + 6:k + 6 + self.goal_dim] = goal
        out[-1] = self.grasp_flag(state)
        return out

    # -- dynamics ---------------------------------------------------------
    def step(self, action) -> StepResult:
        if self.state is None:
            raise RuntimeError("reset() must be called before step()")
        a = np.asarray(action, dtype=float)
        if a.shape != (self.action_dim,):
            raise ShapeError(f"action must have shape ({self.action_dim},), got {a.shape}")
        a = np.clip(a, -1.0, 1.0)
        cmd = a[:3] * self.sim_config.max_speed
        grip = bool(a[3] > 0.0) if self.action_dim == 4 else None
        self.state, events = sim_step(self.state, cmd, grip, self.mesh, self.sim_config,
                                      self.task.table, self.workspace, kernel=self._kernel)
        self.t += 1
        ag = self.achieved_goal()
        ok = is_success(ag, self.goal, self.task.threshold)
        info = {
            "t": self.t,
            "grasped": events.grasped,
            "grasp_failed": events.grasp_failed,
            "released": events.released,
            "clamped": events.clamped,
        }
        return StepResult(
            observation=self.observe(),
            reward=0.0 if ok else -1.0,
            is_success=ok,
            achieved_goal=ag,
            done=self.t >= self.task.horizon,
            info=info,
        )


def _disk(center: np.ndarray, radius: float, rng: np.random.Generator) -> np.ndarray:
    r = radius * np.sqrt(rng.uniform())
    phi = rng.uniform(0.0, 2.0 * np.pi)
    return center + np.array([r * np.cos(phi), r * np.sin(phi), 0.0])
