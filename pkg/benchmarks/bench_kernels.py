"""Compare the numba and numpy kernel backends.

Run with ``python3 benchmarks/bench_kernels.py``. Each kernel is checked
for agreement between backends, then timed (best of several repeats, after
one warm-up call so JIT compilation is excluded).
"""

from __future__ import annotations

import argparse
import time

import numpy as np

from kamforge import _kernels as K
from kamforge.lattice_blocks import lattice_points


def _best(fn, repeat: int) -> float:
    fn()
    best = float("inf")
    for _ in range(repeat):
        t0 = time.perf_counter()
        fn()
        best = min(best, time.perf_counter() - t0)
    return best


def _cases(radius: float, seed: int):
    rng = np.random.default_rng(seed)
    pts = np.array(lattice_points(2, radius), dtype=np.int64)
    n = len(pts)
    ei = rng.integers(0, n, size=4 * n)
    ej = rng.integers(0, n, size=4 * n)
    pd = np.sqrt(K.pdist2_numpy(pts, pts).astype(float))
    na = np.sqrt(1.0 + (pts * pts).sum(1))
    m = 50 * n
    rows = rng.integers(0, n, size=m)
    cols = rng.integers(0, n, size=m)
    vals = rng.random(m)
    return {
        "pdist2": ((pts, pts), {}),
        "components": ((n, ei, ej), {}),
        "weights": ((pd, na[:, None], na[None, :], 0.1, 3.0, 0.5, 1.0), {}),
        "rowcol_max": ((rows, cols, vals, n), {}),
    }, n


def main(argv=None) -> None:
    p = argparse.ArgumentParser(description=__doc__)
    p.add_argument("--radius", type=float, default=25.0,
                   help="lattice radius in d*=2 (sets problem size)")
    p.add_argument("--repeat", type=int, default=5)
    p.add_argument("--seed", type=int, default=0)
    args = p.parse_args(argv)
    if not K.HAVE_NUMBA:
        print("numba not available; nothing to compare")
        return
    cases, n = _cases(args.radius, args.seed)
    print(f"sites: {n}")
    print(f"{'kernel':<12}{'numpy [s]':>12}{'numba [s]':>12}{'speedup':>10}  agree")
    for name, (a, kw) in cases.items():
        f_np, f_nb = K.NUMPY_KERNELS[name], K.NUMBA_KERNELS[name]
        r_np, r_nb = f_np(*a, **kw), f_nb(*a, **kw)
        agree = np.allclose(r_np, r_nb, rtol=1e-12, atol=0)
        t_np = _best(lambda: f_np(*a, **kw), args.repeat)
        t_nb = _best(lambda: f_nb(*a, **kw), args.repeat)
        print(f"{name:<12}{t_np:>12.4e}{t_nb:>12.4e}{t_np / t_nb:>10.2f}  {agree}")


if __name__ == "__main__":
    main()
