# cython: boundscheck=False, wraparound=False, cdivision=True, language_level=3
"""Compiled fixed-point sweep for soft value iteration.

Same contract as ``portirl.kernels.svi_py.solve``; see that module for the
flat-array MDP layout. Keeping the whole iteration loop in C avoids the
per-sweep Python overhead that dominates on MDPs with 1e4+ state-action pairs.
"""

import numpy as np

cimport numpy as cnp
from libc.math cimport exp, fabs, log

cnp.import_array()


def solve(
    double[::1] reward,
    long[::1] sa_ptr,
    long[::1] succ_ptr,
    long[::1] succ_idx,
    double[::1] succ_prob,
    unsigned char[::1] terminal,
    double gamma,
    double tol,
    int max_iter,
    bint expected_q,
):
    cdef Py_ssize_t n_states = sa_ptr.shape[0] - 1
    cdef Py_ssize_t n_sa = reward.shape[0]

    q_arr = np.zeros(n_sa, dtype=np.float64)
    v_arr = np.zeros(n_states, dtype=np.float64)
    v_new_arr = np.zeros(n_states, dtype=np.float64)
    logz_arr = np.zeros(n_states, dtype=np.float64)
    cdef double[::1] q = q_arr
    cdef double[::1] v = v_arr
    cdef double[::1] v_new = v_new_arr
    cdef double[::1] logz = logz_arr

    cdef Py_ssize_t s, sa, e, it
    cdef long lo, hi
    cdef double ev, m, z, lz, vs, p, delta, diff
    cdef int iters = 0

    for it in range(max_iter):
        delta = 0.0
        for sa in range(n_sa):
            ev = 0.0
            lo = succ_ptr[sa]
            hi = succ_ptr[sa + 1]
            for e in range(lo, hi):
                ev += succ_prob[e] * v[succ_idx[e]]
            q[sa] = reward[sa] + gamma * ev
        for s in range(n_states):
            lo = sa_ptr[s]
            hi = sa_ptr[s + 1]
            m = q[lo]
            for sa in range(lo + 1, hi):
                if q[sa] > m:
                    m = q[sa]
            z = 0.0
            for sa in range(lo, hi):
                z += exp(q[sa] - m)
            lz = m + log(z)
            logz[s] = lz
            if terminal[s]:
                vs = 0.0
            elif expected_q:
                vs = 0.0
                for sa in range(lo, hi):
                    p = exp(q[sa] - lz)
                    vs += p * q[sa]
            else:
                vs = lz
            v_new[s] = vs
            diff = fabs(vs - v[s])
            if diff > delta:
                delta = diff
        v, v_new = v_new, v
        v_arr, v_new_arr = v_new_arr, v_arr
        iters = it + 1
        if delta < tol:
            break

    return q_arr, v_arr, logz_arr, iters, delta
