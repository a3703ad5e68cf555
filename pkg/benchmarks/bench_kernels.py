"""Compare the numba kernels against the numpy fallback.

Each backend runs in its own interpreter because the choice is made at
import time from ``PCBF_NO_NUMBA``.

    python3 benchmarks/bench_kernels.py --repeat 2000
"""

import argparse
import json
import os
import subprocess
import sys

WORKER = r"""
import json, sys, timeit
import numpy as np
from pcbf import kernels

rng = np.random.default_rng(0)
repeat = int(sys.argv[1])
out = {"backend": kernels.BACKEND}
for k in (1, 113, 3252):
    A = rng.normal(size=(k, 3, 3))
    P = -np.einsum("kij,klj->kil", A, A) / 10
    q = rng.normal(size=(k, 3))
    r = np.full(k, 5.0)
    u = rng.normal(size=3) * 0.1
    lo = rng.normal(size=k)
    hi = lo + rng.uniform(0.1, 2.0, size=k)
    Z = rng.normal(size=(k, 3))
    Q = P[0]
    cases = {
        "quadratic_values": lambda: kernels.quadratic_values(Z, 1.0, q[0], Q),
        "quadratic_margins": lambda: kernels.quadratic_margins(P, q, r, u),
        "log_barrier_terms": lambda: kernels.log_barrier_terms(P, q, r, u),
        "max_interval_coverage": lambda: kernels.max_interval_coverage(lo, hi, max(1, (9 * k) // 10), 0.0),
    }
    for name, fn in cases.items():
        fn()  # warm-up absorbs compile time
        t = timeit.timeit(fn, number=repeat) / repeat
        out[f"{name}/{k}"] = t * 1e6
print(json.dumps(out))
"""


def run(no_numba, repeat):
    env = dict(os.environ, PCBF_NO_NUMBA="1" if no_numba else "0")
    res = subprocess.run([sys.executable, "-c", WORKER, str(repeat)], env=env,
                         capture_output=True, text=True, check=True)
    return json.loads(res.stdout.strip().splitlines()[-1])


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    ap.add_argument("--repeat", type=int, default=2000)
    args = ap.parse_args(argv)
    fast = run(False, args.repeat)
    slow = run(True, args.repeat)
    if fast["backend"] != "numba":
        print("numba unavailable; both runs used numpy", file=sys.stderr)
    print(f"{'kernel/size':32s} {'numba us':>10s} {'numpy us':>10s} {'speedup':>8s}")
    for key in fast:
        if key == "backend":
            continue
        print(f"{key:32s} {fast[key]:10.2f} {slow[key]:10.2f} {slow[key] / fast[key]:8.1f}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
