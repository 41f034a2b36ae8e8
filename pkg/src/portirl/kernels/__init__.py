"""Backend selection for the soft value iteration kernel.

Prefers the compiled Cython extension when it was built; otherwise falls back
to the numpy implementation. ``PORTIRL_PURE_PYTHON=1`` forces the fallback,
which the benchmark and parity tests use to compare both paths.
"""

from __future__ import annotations

import os

from . import svi_py

_impl = svi_py
_backend = "numpy"

if os.environ.get("PORTIRL_PURE_PYTHON", "") != "1":
    try:
        from . import _svi

        _impl = _svi
        _backend = "compiled"
    except ImportError:
        pass


def backend_name() -> str:
    """Name of the active sweep implementation ('compiled' or 'numpy')."""
    return _backend


def svi_solve(reward, sa_ptr, succ_ptr, succ_idx, succ_prob, terminal,
              gamma, tol, max_iter, expected_q):
    """Run soft value iteration to its fixed point on the active backend.

    Returns ``(q, v, logz, iters, residual)``. See ``svi_py.solve`` for the
    array layout contract.
    """
    return _impl.solve(reward, sa_ptr, succ_ptr, succ_idx, succ_prob,
                       terminal, gamma, tol, max_iter, expected_q)
