# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled substep kernel. Same contract as ``_pykernels.run_substeps``."""

from libc.math cimport sqrt, isfinite, fmax


cdef inline void _contact(double[:, ::1] pos, double[:, ::1] vel, Py_ssize_t i,
                          double[::1] table, double mu) noexcept nogil:
    cdef double top = table[0], x0 = table[1], x1 = table[2]
    cdef double y0 = table[3], y1 = table[4], bottom = table[5]
    cdef double x = pos[i, 0], y = pos[i, 1], z = pos[i, 2]
    if not (x > x0 and x < x1 and y > y0 and y < y1 and z < top and z > bottom):
        return
    # faces: top, -x, +x, -y, +y
    cdef double best = top - z
    cdef int face = 0
    if x - x0 < best:
        best = x - x0
        face = 1
    if x1 - x < best:
        best = x1 - x
        face = 2
    if y - y0 < best:
        best = y - y0
        face = 3
    if y1 - y < best:
        best = y1 - y
        face = 4
    cdef int axis
    cdef double target, sign
    if face == 0:
        axis = 2; target = top; sign = 1.0
    elif face == 1:
        axis = 0; target = x0; sign = -1.0
    elif face == 2:
        axis = 0; target = x1; sign = 1.0
    elif face == 3:
        axis = 1; target = y0; sign = -1.0
    else:
        axis = 1; target = y1; sign = 1.0
    pos[i, axis] = target
    cdef double vn = vel[i, axis] * sign
    cdef double dvn = 0.0
    if vn < 0.0:
        dvn = -vn
        vel[i, axis] = 0.0
    cdef double st = 0.0
    cdef int a
    for a in range(3):
        if a != axis:
            st += vel[i, a] * vel[i, a]
    st = sqrt(st)
    cdef double scale = 0.0
    if st > 0.0:
        scale = fmax(0.0, 1.0 - mu * dvn / st)
    for a in range(3):
        if a != axis:
            vel[i, a] = vel[i, a] * scale


cdef class SubstepKernel:
    """Mesh/config bound once; ``run`` advances a state in place."""

    cdef int[:, ::1] springs
    cdef double[::1] rest, spring_k, table
    cdef double[:, ::1] ws, forces
    cdef double spring_damping, node_mass, gravity, velocity_damping, dt, mu
    cdef int n_sub

    def __init__(self, springs, rest, spring_k, double spring_damping, double node_mass,
                 double gravity, double velocity_damping, double dt, int n_sub, table,
                 double mu, ws):
        import numpy as np
        self.springs = np.ascontiguousarray(springs, dtype=np.int32)
        self.rest = np.ascontiguousarray(rest, dtype=np.float64)
        self.spring_k = np.ascontiguousarray(spring_k, dtype=np.float64)
        self.table = np.ascontiguousarray(table, dtype=np.float64)
        self.ws = np.ascontiguousarray(ws, dtype=np.float64)
        self.spring_damping = spring_damping
        self.node_mass = node_mass
        self.gravity = gravity
        self.velocity_damping = velocity_damping
        self.dt = dt
        self.n_sub = n_sub
        self.mu = mu
        self.forces = np.zeros((0, 3))

    def run(self, double[:, ::1] pos, double[:, ::1] vel, double[:, ::1] mpos,
            double[:, ::1] mvel, long[::1] grasp, double[:, ::1] cmd):
        """Returns ``(blown_node, blown_substep, any_clamped)``."""
        cdef Py_ssize_t n = pos.shape[0]
        cdef Py_ssize_t ns = self.springs.shape[0]
        cdef Py_ssize_t nm = mpos.shape[0]
        cdef Py_ssize_t i, j, a, b, s, m, g
        cdef double want, new, dx, dy, dz, length, nx, ny, nz, rel, mag, fx, fy, fz, inv
        cdef double dt = self.dt
        cdef double inv_m = dt / self.node_mass
        cdef double damp = self.velocity_damping * self.node_mass
        cdef double gz = self.gravity * self.node_mass
        cdef double kd = self.spring_damping
        cdef double mu = self.mu
        cdef bint any_clamped = False
        cdef bint table_on = self.table[6] != 0.0
        cdef int[:, ::1] springs = self.springs
        cdef double[::1] rest = self.rest
        cdef double[::1] spring_k = self.spring_k
        cdef double[::1] table = self.table
        cdef double[:, ::1] ws = self.ws
        if self.forces.shape[0] != n:
            import numpy as np
            self.forces = np.zeros((n, 3))
        cdef double[:, ::1] forces = self.forces
        cdef int g0 = -1, g1 = -1
        if nm > 0:
            g0 = grasp[0]
        if nm > 1:
            g1 = grasp[1]

        with nogil:
            for s in range(self.n_sub):
                for m in range(nm):
                    for a in range(3):
                        want = mpos[m, a] + cmd[m, a] * dt
                        new = want
                        if new < ws[0, a]:
                            new = ws[0, a]
                        if new > ws[1, a]:
                            new = ws[1, a]
                        if new != want:
                            any_clamped = True
                            mvel[m, a] = 0.0
                        else:
                            mvel[m, a] = cmd[m, a]
                        mpos[m, a] = new

                for i in range(n):
                    forces[i, 0] = -damp * vel[i, 0]
                    forces[i, 1] = -damp * vel[i, 1]
                    forces[i, 2] = -gz - damp * vel[i, 2]

                for j in range(ns):
                    a = springs[j, 0]
                    b = springs[j, 1]
                    dx = pos[b, 0] - pos[a, 0]
                    dy = pos[b, 1] - pos[a, 1]
                    dz = pos[b, 2] - pos[a, 2]
                    length = sqrt(dx * dx + dy * dy + dz * dz)
                    if length == 0.0:
                        continue
                    inv = 1.0 / length
                    nx = dx * inv
                    ny = dy * inv
                    nz = dz * inv
                    rel = ((vel[b, 0] - vel[a, 0]) * nx + (vel[b, 1] - vel[a, 1]) * ny
                           + (vel[b, 2] - vel[a, 2]) * nz)
                    mag = spring_k[j] * (length - rest[j]) + kd * rel
                    fx = mag * nx
                    fy = mag * ny
                    fz = mag * nz
                    forces[a, 0] += fx
                    forces[a, 1] += fy
                    forces[a, 2] += fz
                    forces[b, 0] -= fx
                    forces[b, 1] -= fy
                    forces[b, 2] -= fz

                for i in range(n):
                    if i != g0 and i != g1:
                        for a in range(3):
                            vel[i, a] += forces[i, a] * inv_m
                            pos[i, a] += vel[i, a] * dt
                    if table_on:
                        _contact(pos, vel, i, table, mu)

                for m in range(nm):
                    g = grasp[m]
                    if g >= 0:
                        for a in range(3):
                            pos[g, a] = mpos[m, a]
                            vel[g, a] = mvel[m, a]

                for i in range(n):
                    for a in range(3):
                        if not (isfinite(pos[i, a]) and isfinite(vel[i, a])):
                            with gil:
                                return i, s, any_clamped
        return -1, -1, any_clamped
