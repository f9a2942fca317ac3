"""Deterministic mass-spring cloth simulation with a point-grasp manipulator.

The substep loop runs in a compiled kernel when the extension is built and
falls back to numpy otherwise. Set ``DYNCLOTH_PURE_PYTHON=1`` to force the
fallback.
"""

from __future__ import annotations

import os

import numpy as np

from . import _pykernels
from .core import (
    BEND,
    SHEAR,
    STRUCTURAL,
    ClothMesh,
    ConfigError,
    Pose,
    SimConfig,
    SimState,
    SimulationBlowUp,
    StepEvents,
    TableGeom,
    Workspace,
    _grasp_inplace,
    accumulate_forces,
    build_cloth,
    clamp_command,
    command_manipulator,
    enforce_grasp,
    friction_scale,
    integrate,
    kinetic_energy,
    release,
    resolve_table_contact,
    spring_force,
    spring_forces,
    try_grasp,
)

try:
    from . import _ckernels
except ImportError:  # extension not built
    _ckernels = None

BACKENDS = {"python": _pykernels}
if _ckernels is not None:
    BACKENDS["compiled"] = _ckernels

if os.environ.get("DYNCLOTH_PURE_PYTHON") or _ckernels is None:
    BACKEND = "python"
else:
    BACKEND = "compiled"


def make_kernel(mesh: ClothMesh, config: SimConfig, table: TableGeom, workspace: Workspace,
                backend: str | None = None):
    """Bind mesh, physics config, table and workspace into a substep kernel."""
    if mesh is None:
        raise ConfigError("mesh required")
    cls = BACKENDS[backend or BACKEND].SubstepKernel
    return cls(
        mesh.springs, mesh.rest_lengths, config.stiffness_by_class()[mesh.spring_class],
        config.spring_damping, mesh.node_mass, config.gravity, config.velocity_damping,
        config.dt, config.substeps, table.as_array(), config.friction, workspace.as_array(),
    )


def sim_step(state: SimState, manip_command, grip_flag, mesh: ClothMesh, config: SimConfig,
             table: TableGeom, workspace: Workspace, backend: str | None = None,
             kernel=None) -> tuple[SimState, StepEvents]:
    """One control step: grasp logic, then ``config.substeps`` physics substeps.

    ``grip_flag`` is True (grasp if unbound), False (release) or None (leave
    the binding alone). ``manip_command`` holds one target velocity per
    manipulator, or a single one broadcast to all of them. Pass a prebuilt
    ``kernel`` from :func:`make_kernel` to skip rebinding the mesh each call.
    """
    if kernel is None:
        kernel = make_kernel(mesh, config, table, workspace, backend)
    out = state.copy()
    events = StepEvents()
    n_manip = out.manip_pos.shape[0]
    if n_manip > 2:
        raise ConfigError("at most two manipulators are supported")
    cmd = clamp_command(manip_command, config.max_speed)
    if cmd.shape[0] != n_manip:
        cmd = np.repeat(cmd[:1], n_manip, axis=0)

    if grip_flag is not None:
        for m in range(n_manip):
            if grip_flag:
                if out.grasp[m] < 0:
                    if _grasp_inplace(out, config.grasp_radius, m):
                        events.grasped.append(int(out.grasp[m]))
                    else:
                        events.grasp_failed.append(m)
            elif out.grasp[m] >= 0:
                events.released.append(int(out.grasp[m]))
                out.grasp[m] = -1

    node, sub, clamped = kernel.run(out.positions, out.velocities, out.manip_pos, out.manip_vel,
                                    out.grasp, cmd)
    if node >= 0:
        raise SimulationBlowUp(node, sub, state.time + (sub + 1) * config.dt)
    out.time = state.time + config.control_dt
    events.clamped = bool(clamped)
    return out, events


__all__ = [
    "BACKEND",
    "BACKENDS",
    "BEND",
    "SHEAR",
    "STRUCTURAL",
    "ClothMesh",
    "ConfigError",
    "Pose",
    "SimConfig",
    "SimState",
    "SimulationBlowUp",
    "StepEvents",
    "TableGeom",
    "Workspace",
    "accumulate_forces",
    "build_cloth",
    "command_manipulator",
    "enforce_grasp",
    "friction_scale",
    "integrate",
    "kinetic_energy",
    "make_kernel",
    "release",
    "resolve_table_contact",
    "sim_step",
    "spring_force",
    "spring_forces",
    "try_grasp",
]
