# cython: boundscheck=False, wraparound=False, cdivision=True
"""Compiled ensemble kernel for the clipped-Euler normalized filter.

Same recursion as _wonham_np.wonham_ensemble; kept loop-for-loop in sync.
"""

import numpy as np

cimport numpy as cnp

from .errors import DegenerateMass

cnp.import_array()

DEF MASS_FLOOR = 1e-14


def wonham_ensemble(
    cnp.ndarray[double, ndim=2] A_in,
    cnp.ndarray[double, ndim=2] H_in,
    pi0,
    cnp.ndarray[double, ndim=3] dZ_in,
    double dt,
    int stride=1,
):
    cdef double[:, ::1] A = np.ascontiguousarray(A_in)
    cdef double[:, ::1] H = np.ascontiguousarray(H_in)
    cdef double[:, :, ::1] dZ = np.ascontiguousarray(dZ_in)
    cdef Py_ssize_t N = dZ.shape[0]
    cdef Py_ssize_t K = dZ.shape[1]
    cdef Py_ssize_t m = dZ.shape[2]
    cdef Py_ssize_t d = A.shape[0]
    if K % stride != 0:
        raise ValueError("stride must divide the number of steps")

    pi0_arr = np.broadcast_to(np.asarray(pi0, dtype=float), (N, d)).copy()
    cdef double[:, ::1] pi = pi0_arr
    out_arr = np.empty((N, K // stride + 1, d))
    cdef double[:, :, ::1] out = out_arr

    cdef Py_ssize_t p, k, i, j, l
    cdef double mass, acc, coef_scalar, innov_l, hbar_l
    cdef long n_clipped = 0
    cdef double[::1] pred = np.empty(d)
    cdef double[::1] coef = np.empty(d)
    cdef double[::1] hbar = np.empty(m)

    cdef Py_ssize_t bad_step = -1
    for p in range(N):
        for i in range(d):
            out[p, 0, i] = pi[p, i]
        for k in range(K):
            for i in range(d):
                acc = 0.0
                for j in range(d):
                    acc += pi[p, j] * A[j, i]
                pred[i] = pi[p, i] + dt * acc
            for l in range(m):
                acc = 0.0
                for i in range(d):
                    acc += pred[i] * H[i, l]
                hbar[l] = acc
            for i in range(d):
                coef[i] = 0.0
            for l in range(m):
                hbar_l = hbar[l]
                innov_l = dZ[p, k, l] - hbar_l * dt
                for i in range(d):
                    coef[i] += (H[i, l] - hbar_l) * innov_l
            mass = 0.0
            for i in range(d):
                acc = pred[i] * (1.0 + coef[i])
                if acc < 0.0:
                    acc = 0.0
                    n_clipped += 1
                pi[p, i] = acc
                mass += acc
            if mass < MASS_FLOOR:
                bad_step = k
                break
            for i in range(d):
                pi[p, i] /= mass
            if (k + 1) % stride == 0:
                for i in range(d):
                    out[p, (k + 1) // stride, i] = pi[p, i]
        if bad_step >= 0:
            raise DegenerateMass(
                f"filter mass collapsed below {MASS_FLOOR} at step {bad_step}"
            )
    return out_arr, n_clipped
