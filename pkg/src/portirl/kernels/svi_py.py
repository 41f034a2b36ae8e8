"""Pure-numpy soft value iteration sweep (fallback backend).

Flat-array MDP layout shared with the compiled kernel:

* ``reward[sa]``      reward of state-action pair ``sa``
* ``sa_ptr``          state ``s`` owns pairs ``sa_ptr[s]:sa_ptr[s+1]`` (never empty)
* ``succ_ptr``        pair ``sa`` owns successor entries ``succ_ptr[sa]:succ_ptr[sa+1]``
* ``succ_idx/prob``   successor state index and probability per entry
* ``terminal``        states whose value is pinned at zero

Each Jacobi sweep computes ``Q = reward + gamma * E[V(s')]`` and then collapses
Q to a new V per state, either as the policy-weighted mean of Q
(``expected_q=True``) or as log-sum-exp. Iteration stops when ``max |dV| < tol``.
"""

from __future__ import annotations

import numpy as np


def solve(reward, sa_ptr, succ_ptr, succ_idx, succ_prob, terminal,
          gamma, tol, max_iter, expected_q):
    reward = np.asarray(reward, dtype=np.float64)
    n_states = len(sa_ptr) - 1
    starts = np.asarray(sa_ptr[:-1], dtype=np.int64)
    e_starts = np.asarray(succ_ptr[:-1], dtype=np.int64)
    terminal = np.asarray(terminal, dtype=bool)
    succ_idx = np.asarray(succ_idx, dtype=np.int64)
    succ_prob = np.asarray(succ_prob, dtype=np.float64)

    v = np.zeros(n_states)
    q = np.zeros_like(reward)
    logz = np.zeros(n_states)
    delta = np.inf
    iters = 0
    for it in range(max_iter):
        # reduceat segments are non-empty by layout contract
        ev = np.add.reduceat(succ_prob * v[succ_idx], e_starts)
        q = reward + gamma * ev
        m = np.maximum.reduceat(q, starts)
        block_max = np.repeat(m, np.diff(sa_ptr))
        ex = np.exp(q - block_max)
        logz = m + np.log(np.add.reduceat(ex, starts))
        if expected_q:
            pi = ex / np.repeat(np.add.reduceat(ex, starts), np.diff(sa_ptr))
            v_new = np.add.reduceat(pi * q, starts)
        else:
            v_new = logz.copy()
        v_new[terminal] = 0.0
        delta = float(np.max(np.abs(v_new - v)))
        v = v_new
        iters = it + 1
        if delta < tol:
            break
    return q, v, logz, iters, delta
