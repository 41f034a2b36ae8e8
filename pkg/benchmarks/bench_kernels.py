"""Time the soft value iteration backends against each other.

Runs the same fixed-point solve on enumerated models of increasing size with
both the compiled sweep and the numpy fallback, and reports the best wall
time of each. Invoke from the repository root:

    python3 benchmarks/bench_kernels.py --repeats 5
"""

import argparse
import time

import numpy as np

from portirl.kernels import svi_py
from portirl.synth import ToyMDPConfig, enumerate_toy_mdp

try:
    from portirl.kernels import _svi
except ImportError:
    _svi = None

SIZES = {
    "small": ToyMDPConfig(n_types=2, staytime_cap=1),
    "medium": ToyMDPConfig(n_types=3, staytime_cap=2),
    "large": ToyMDPConfig(n_types=4, staytime_cap=3),
}


def best_of(fn, repeats):
    times = []
    for _ in range(repeats):
        start = time.perf_counter()
        out = fn()
        times.append(time.perf_counter() - start)
    return min(times), out


def bench_model(name, config, gamma, tol, repeats):
    mdp = enumerate_toy_mdp(config)
    reward = np.random.default_rng(0).standard_normal(mdp.n_sa)
    args = (
        reward,
        mdp.sa_ptr,
        mdp.succ_ptr,
        mdp.succ_idx,
        mdp.succ_prob,
        mdp.terminal,
        gamma,
        tol,
        200_000,
        True,
    )
    t_py, ref = best_of(lambda: svi_py.solve(*args), repeats)
    rows = [(name, mdp.n_states, mdp.n_sa, "numpy", t_py, ref[3], 1.0)]
    if _svi is not None:
        t_c, out = best_of(lambda: _svi.solve(*args), repeats)
        gap = float(np.max(np.abs(np.asarray(out[1]) - np.asarray(ref[1]))))
        if gap > 1e-9:
            raise SystemExit(f"{name}: backends disagree by {gap:.2e}")
        rows.append((name, mdp.n_states, mdp.n_sa, "compiled", t_c, out[3], t_py / t_c))
    return rows


def main():
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--repeats", type=int, default=5, help="best-of runs per case")
    parser.add_argument("--gamma", type=float, default=0.9)
    parser.add_argument("--tol", type=float, default=1e-10)
    parser.add_argument(
        "--sizes",
        default="small,medium,large",
        help="comma-separated subset of: " + ", ".join(SIZES),
    )
    args = parser.parse_args()

    if _svi is None:
        print("note: compiled extension not built; timing the fallback only\n")

    header = f"{'model':<8} {'states':>7} {'rows':>7} {'backend':<9} {'best (s)':>10} {'sweeps':>7} {'speedup':>8}"
    print(header)
    print("-" * len(header))
    for name in args.sizes.split(","):
        name = name.strip()
        if name not in SIZES:
            raise SystemExit(f"unknown size {name!r}")
        for row in bench_model(name, SIZES[name], args.gamma, args.tol, args.repeats):
            model, n_states, n_sa, backend, secs, sweeps, speedup = row
            print(
                f"{model:<8} {n_states:>7} {n_sa:>7} {backend:<9} "
                f"{secs:>10.4f} {sweeps:>7} {speedup:>7.1f}x"
            )


if __name__ == "__main__":
    main()
