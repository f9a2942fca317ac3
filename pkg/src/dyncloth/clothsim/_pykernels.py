"""Pure numpy substep kernel; reference for and fallback of the compiled one."""

import numpy as np

from .core import _advance_manip, _contact_inplace, _spring_forces_into


class SubstepKernel:
    def __init__(self, springs, rest, spring_k, spring_damping, node_mass, gravity,
                 velocity_damping, dt, n_sub, table, mu, ws):
        self.springs = np.ascontiguousarray(springs, dtype=np.int32)
        self.rest = np.asarray(rest, dtype=float)
        self.spring_k = np.asarray(spring_k, dtype=float)
        self.spring_damping = spring_damping
        self.node_mass = node_mass
        self.gravity = gravity
        self.velocity_damping = velocity_damping
        self.dt = dt
        self.n_sub = n_sub
        self.table = np.asarray(table, dtype=float)
        self.mu = mu
        self.ws = np.asarray(ws, dtype=float)

    def run(self, pos, vel, mpos, mvel, grasp, cmd):
        """Advance ``n_sub`` substeps in place.

        Returns ``(blown_node, blown_substep, any_clamped)``; ``blown_node`` is
        -1 when the state stayed finite.
        """
        free = np.ones(pos.shape[0], dtype=bool)
        free[grasp[grasp >= 0]] = False
        any_clamped = False
        dt = self.dt
        m = self.node_mass
        inv_m = dt / m
        forces = np.empty_like(pos)
        for s in range(self.n_sub):
            any_clamped |= bool(_advance_manip(mpos, mvel, cmd, self.ws, dt).any())

            forces[:] = 0.0
            forces[:, 2] -= self.gravity * m
            forces -= (self.velocity_damping * m) * vel
            _spring_forces_into(pos, vel, self.springs, self.rest, self.spring_k,
                                self.spring_damping, forces)

            vel[free] += forces[free] * inv_m
            pos[free] += vel[free] * dt

            if self.table[6]:
                _contact_inplace(pos, vel, self.table, self.mu)

            for k in range(grasp.shape[0]):
                g = grasp[k]
                if g >= 0:
                    pos[g] = mpos[k]
                    vel[g] = mvel[k]

            ok = np.isfinite(pos).all(axis=1) & np.isfinite(vel).all(axis=1)
            if not ok.all():
                return int(np.argmin(ok)), s, any_clamped
        return -1, -1, any_clamped
