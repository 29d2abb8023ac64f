# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled hot loops. Signatures mirror :mod:`behaviorkit._fallback`."""

import numpy as np
cimport numpy as cnp
from libc.math cimport sqrt, floor

cnp.import_array()


def mean_pairwise_distance(const double[:, ::1] x, const double[:, ::1] y):
    cdef Py_ssize_t n = x.shape[0], m = y.shape[0], d = x.shape[1]
    cdef Py_ssize_t i, j, k
    cdef double total = 0.0, row, s, diff
    if y.shape[1] != d:
        raise ValueError("dimension mismatch")
    for i in range(n):
        row = 0.0
        for j in range(m):
            s = 0.0
            for k in range(d):
                diff = x[i, k] - y[j, k]
                s += diff * diff
            row += sqrt(s)
        total += row
    return total / (<double>n * <double>m)


def gae(const double[:, ::1] rewards, const double[:, ::1] values,
        const double[:, ::1] dones, const double[::1] last_values,
        double gamma, double lam):
    cdef Py_ssize_t T = rewards.shape[0], E = rewards.shape[1]
    cdef Py_ssize_t t, e
    cdef double next_v, delta, nonterm
    adv_arr = np.zeros((T, E), dtype=np.float64)
    cdef double[:, ::1] adv = adv_arr
    cdef double[::1] carry = np.zeros(E, dtype=np.float64)
    for t in range(T - 1, -1, -1):
        for e in range(E):
            next_v = last_values[e] if t == T - 1 else values[t + 1, e]
            nonterm = 1.0 - dones[t, e]
            delta = rewards[t, e] + gamma * next_v * nonterm - values[t, e]
            carry[e] = delta + gamma * lam * nonterm * carry[e]
            adv[t, e] = carry[e]
    return adv_arr, adv_arr + np.asarray(values)


def point_mass_step(const double[:, :, ::1] pos, const double[:, :, ::1] vel,
                    const double[:, :, ::1] force, const cnp.uint8_t[::1] actuated,
                    const double[::1] contact_radius, double dt, double drag,
                    double stiffness):
    cdef Py_ssize_t B = pos.shape[0], C = pos.shape[1]
    cdef Py_ssize_t b, c, a, k
    cdef double fx, fy, dx, dy, dist, r, mag, vx, vy
    new_pos_arr = np.empty((B, C, 2), dtype=np.float64)
    new_vel_arr = np.empty((B, C, 2), dtype=np.float64)
    cdef double[:, :, ::1] new_pos = new_pos_arr
    cdef double[:, :, ::1] new_vel = new_vel_arr
    for b in range(B):
        for c in range(C):
            fx = force[b, c, 0]
            fy = force[b, c, 1]
            r = contact_radius[c]
            if r > 0.0:
                for a in range(C):
                    if not actuated[a]:
                        continue
                    dx = pos[b, c, 0] - pos[b, a, 0]
                    dy = pos[b, c, 1] - pos[b, a, 1]
                    dist = sqrt(dx * dx + dy * dy)
                    if dist < r and dist > 0.0:
                        mag = stiffness * (r - dist) / dist
                        fx += mag * dx
                        fy += mag * dy
            vx = vel[b, c, 0] + dt * (fx - drag * vel[b, c, 0])
            vy = vel[b, c, 1] + dt * (fy - drag * vel[b, c, 1])
            new_vel[b, c, 0] = vx
            new_vel[b, c, 1] = vy
            new_pos[b, c, 0] = pos[b, c, 0] + dt * vx
            new_pos[b, c, 1] = pos[b, c, 1] + dt * vy
    return new_pos_arr, new_vel_arr


def bin_counts(const double[:, ::1] samples, const double[::1] lo,
               const double[::1] hi, Py_ssize_t bins):
    cdef Py_ssize_t n = samples.shape[0], d = samples.shape[1]
    cdef Py_ssize_t i, k, idx, flat, stride
    cdef double x, width
    cdef Py_ssize_t excluded = 0
    cdef bint inside
    cdef Py_ssize_t total = 1
    for k in range(d):
        total *= bins
    counts_arr = np.zeros(total, dtype=np.int64)
    cdef cnp.int64_t[::1] counts = counts_arr
    for i in range(n):
        flat = 0
        stride = 1
        inside = True
        for k in range(d - 1, -1, -1):
            x = samples[i, k]
            if not (x >= lo[k] and x <= hi[k]):
                inside = False
                break
            width = (hi[k] - lo[k]) / bins
            idx = <Py_ssize_t>floor((x - lo[k]) / width)
            if idx >= bins:
                idx = bins - 1
            flat += idx * stride
            stride *= bins
        if inside:
            counts[flat] += 1
        else:
            excluded += 1
    return counts_arr, excluded
