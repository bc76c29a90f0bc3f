"""Time the compiled kernels against the NumPy fallback.

    python3 benchmarks/bench_kernels.py [--repeat 5] [--vocab 16]

Runs each kernel on the same inputs under both backends, checks they agree,
and prints per-call timings plus an end-to-end training run for each backend.
"""
import argparse
import os
import subprocess
import sys
import timeit

import numpy as np

from vpd import _kernels_py, kernels

TRAIN_SNIPPET = """
import time
from vpd.config import TrainConfig
from vpd.trainer import train
from vpd import kernels
cfg = TrainConfig.load("vpd_keyedcopy").with_overrides(total_batches={batches})
t = time.perf_counter(); train(cfg); print(kernels.BACKEND, time.perf_counter() - t)
"""


def kernel_cases(n, rng):
    z = rng.normal(size=n)
    q = rng.dirichlet(np.ones(n))
    p = _kernels_py.softmax(z)
    return {
        "log_softmax": lambda k: k.log_softmax(z),
        "token_divergence[js]": lambda k: k.token_divergence(p, q, 2),
        "divergence_logit_grad[rkl]": lambda k: k.divergence_logit_grad(z, q, 0),
        "divergence_logit_grad[js]": lambda k: k.divergence_logit_grad(z, q, 2),
        "sample_index": lambda k: k.sample_index(p, 0.37),
    }


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=5)
    ap.add_argument("--number", type=int, default=20000)
    ap.add_argument("--vocab", type=int, default=16)
    ap.add_argument("--batches", type=int, default=60)
    args = ap.parse_args()

    impls = kernels.backends()
    if "cython" not in impls:
        print("compiled extension not available; only the fallback will be timed")
    rng = np.random.default_rng(0)
    cases = kernel_cases(args.vocab, rng)
    print(f"{'kernel':<30}" + "".join(f"{name:>14}" for name in impls) + "   speedup")
    for label, fn in cases.items():
        times = {}
        for name, mod in impls.items():
            t = min(timeit.repeat(lambda: fn(mod), number=args.number, repeat=args.repeat))
            times[name] = t / args.number * 1e6
        if len(impls) > 1:
            a, b = np.asarray(fn(impls["cython"]), dtype=object), np.asarray(fn(impls["python"]), dtype=object)
            assert np.allclose(np.hstack([np.ravel(x) for x in np.atleast_1d(a)]).astype(float),
                               np.hstack([np.ravel(x) for x in np.atleast_1d(b)]).astype(float),
                               atol=1e-12), label
        speed = times["python"] / times["cython"] if "cython" in times else float("nan")
        print(f"{label:<30}" + "".join(f"{times[n]:>11.2f} us" for n in impls) + f"   {speed:6.1f}x")

    print(f"\nend-to-end: vpd_keyedcopy, {args.batches} batches")
    for pure in ("0", "1"):
        env = dict(os.environ, VPD_PURE_PYTHON=pure)
        out = subprocess.run([sys.executable, "-c", TRAIN_SNIPPET.format(batches=args.batches)],
                             env=env, capture_output=True, text=True, check=True)
        name, secs = out.stdout.split()
        print(f"  {name:<8} {float(secs):.2f} s")


if __name__ == "__main__":
    main()
