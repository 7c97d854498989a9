"""Compare the numba and pure-numpy kernel backends.

Each backend runs in its own interpreter because the choice is made at import
time from ``PSIDO_DISABLE_NUMBA``.  Usage::

    python3 benchmarks/bench_kernels.py [--repeat 5]
"""

import argparse
import json
import os
import subprocess
import sys
import time

WORKER = r"""
import json, sys, time
import numpy as np
from psido import _kernels as k
from psido import opbank, tomo, wavelet

repeat = int(sys.argv[1])
rng = np.random.default_rng(0)

def best(fn):
    fn()  # warm-up, includes JIT compilation
    times = []
    for _ in range(repeat):
        t = time.perf_counter(); fn(); times.append(time.perf_counter() - t)
    return min(times)

out = {"backend": k.BACKEND}
for side, (a, b) in [(3, (1, 1)), (5, (1, 2)), (9, (4, 1)), (15, (1, 1))]:
    F = rng.standard_normal((side, side))
    c = (side // 2, side // 2)
    W = rng.standard_normal((25, 32 * a, 32 * a))
    Y = k.sconv(F, c, W, a, b)
    out[f"sconv f{side} a{a}b{b}"] = best(lambda: k.sconv(F, c, W, a, b))
    out[f"sconv_t f{side} a{a}b{b}"] = best(lambda: k.sconv_t(F, c, Y, a, b))
    out[f"sconv_df f{side} a{a}b{b}"] = best(lambda: k.sconv_df(Y, W, a, b, c, F.shape))
X = rng.standard_normal((25, 64, 64))
out["soft_threshold 25x64x64"] = best(lambda: k.soft_threshold(X, 0.3))

spec = wavelet.WaveletSpec("haar", 5, 2)
geom = tomo.make_geometry(spec.side, 61)
tb = opbank.truncate(opbank.build_filter_bank(geom, spec), 8)
bank = tb.center_bank(tb.centers)
w = rng.standard_normal((8, spec.side, spec.side))
out["truncated bank, J=5 tau=8, batch 8"] = best(lambda: opbank.apply_operator(bank, w, "exact"))
print(json.dumps(out))
"""


def run(disable, repeat):
    env = dict(os.environ, PSIDO_DISABLE_NUMBA="1" if disable else "0")
    res = subprocess.run([sys.executable, "-c", WORKER, str(repeat)], env=env,
                         capture_output=True, text=True, check=True)
    return json.loads(res.stdout.strip().splitlines()[-1])


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=5)
    args = ap.parse_args()
    t0 = time.perf_counter()
    fast, slow = run(False, args.repeat), run(True, args.repeat)
    keys = [k for k in fast if k != "backend"]
    width = max(map(len, keys))
    print(f"{'kernel':<{width}}  {fast['backend']:>10}  {slow['backend']:>10}  speedup")
    for key in keys:
        print(f"{key:<{width}}  {fast[key] * 1e3:8.2f}ms  {slow[key] * 1e3:8.2f}ms  {slow[key] / fast[key]:6.2f}x")
    print(f"total wall time {time.perf_counter() - t0:.1f}s")


if __name__ == "__main__":
    main()
