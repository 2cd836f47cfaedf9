"""Time the filter-bank kernels and one lower-level solve on both backends.

Run:  python benchmarks/bench_kernels.py

Each backend runs in its own interpreter because the backend is fixed at
import time by FOELEARN_DISABLE_NUMBA.
"""

import json
import os
import subprocess
import sys

WORKER = r"""
import json, time
import numpy as np
import foelearn._kernels as k
from foelearn.bilevel import init_filterbank
from foelearn.energy import EnergyModel, solve_lower
from foelearn.imagecore import add_gaussian_noise
from foelearn.penalty import Penalty

def best(fn, reps):
    fn()
    t = []
    for _ in range(reps):
        t0 = time.perf_counter(); fn(); t.append(time.perf_counter() - t0)
    return min(t)

rng = np.random.default_rng(0)
res = {"backend": k.BACKEND}
for size, ks, n in ((32, 5, 8), (96, 7, 48)):
    u = rng.standard_normal((size, size))
    bank = rng.standard_normal((n, ks, ks))
    v = rng.standard_normal((n, size, size))
    w = rng.random(n)
    res[f"corr {size}x{size} {n}x{ks}x{ks}"] = best(lambda: k.correlate_bank(u, bank), 20)
    res[f"adj  {size}x{size} {n}x{ks}x{ks}"] = best(lambda: k.correlate_adjoint_bank(v, bank, w), 20)
g = 128 + 40 * rng.standard_normal((32, 32))
f = add_gaussian_noise(g, 25, 1)
m = EnergyModel(init_filterbank(5, 8, "dct", norm=0.1, weight=16), Penalty("logsq"))
res["solve_lower 32x32 8x5x5"] = best(lambda: solve_lower(m, f, gtol=1e-3), 3)
print(json.dumps(res))
"""


def run(disable):
    env = dict(os.environ, FOELEARN_DISABLE_NUMBA="1" if disable else "0")
    out = subprocess.run([sys.executable, "-c", WORKER], env=env, capture_output=True,
                         text=True, check=True)
    return json.loads(out.stdout.strip().splitlines()[-1])


def main():
    fast, slow = run(False), run(True)
    print(f"{'case':32s} {fast['backend']:>12s} {slow['backend']:>12s} {'speedup':>8s}")
    for key in fast:
        if key == "backend":
            continue
        a, b = fast[key], slow[key]
        print(f"{key:32s} {a * 1e3:10.3f}ms {b * 1e3:10.3f}ms {b / a:8.1f}x")


if __name__ == "__main__":
    main()
