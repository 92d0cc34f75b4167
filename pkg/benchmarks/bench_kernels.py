"""Compare the compiled kernels with the numpy reference.

Times each kernel on a batch shaped like one 5-way 1-shot training episode
at the first backbone stage (64 filters), checks that both backends agree,
then times a full training step under each backend in a subprocess.

    python benchmarks/bench_kernels.py [--size 28] [--repeats 20]
"""
import argparse
import os
import subprocess
import sys
import timeit

import numpy as np

from ulda.kernels import _reference as ref

try:
    from ulda.kernels import _fast as fast
except ImportError:
    fast = None

STEP_SNIPPET = """
import time, numpy as np
from ulda.augment import resolve_preset
from ulda.episodes import EpisodeConfig, UnlabeledPool, sample_episode
from ulda.kernels import BACKEND
from ulda.trainer import train_step
from ulda.model import ProtoNet
size = {size}
pool = UnlabeledPool(np.random.default_rng(0).random((40, 1, size, size)).astype(np.float32), tuple(range(40)))
ep = sample_episode(pool, EpisodeConfig(5, 1, 5), resolve_preset("AA+TIMsub", size), resolve_preset("R+TA+TIMadd", size), 0)
model = ProtoNet((1, size, size), 64)
train_step(model, ep, 1e-3)
t = time.perf_counter()
for _ in range({repeats}):
    train_step(model, ep, 1e-3)
print(BACKEND, (time.perf_counter() - t) / {repeats})
"""


def kernel_cases(size, rng):
    x = rng.standard_normal((30, 64, size, size)).astype(np.float32)
    cols = ref.im2col3x3(x)
    pooled, arg = ref.maxpool2x2(x)
    mean, var = ref.channel_stats(x)
    inv = 1.0 / np.sqrt(var + 1e-5)
    gamma = rng.random(64).astype(np.float32) + 0.5
    beta = rng.standard_normal(64).astype(np.float32)
    g = rng.standard_normal(x.shape).astype(np.float32)
    return {
        "im2col3x3": lambda m: m.im2col3x3(x),
        "col2im3x3": lambda m: m.col2im3x3(cols, x.shape),
        "maxpool2x2": lambda m: m.maxpool2x2(x),
        "maxpool2x2_backward": lambda m: m.maxpool2x2_backward(pooled, arg, x.shape),
        "channel_stats": lambda m: m.channel_stats(x),
        "bn_apply": lambda m: m.bn_apply(x, mean, inv, gamma, beta),
        "bn_backward": lambda m: m.bn_backward(g, x, mean, inv, gamma, True),
    }


def max_diff(a, b):
    a = a if isinstance(a, tuple) else (a,)
    b = b if isinstance(b, tuple) else (b,)
    return max(float(np.max(np.abs(np.asarray(u, np.float64) - np.asarray(v, np.float64)))) for u, v in zip(a, b))


def step_time(size, repeats, pure):
    env = dict(os.environ, ULDA_PURE_PYTHON="1" if pure else "0")
    out = subprocess.run([sys.executable, "-c", STEP_SNIPPET.format(size=size, repeats=repeats)],
                         env=env, check=True, capture_output=True, text=True).stdout.split()
    return out[0], float(out[1])


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--size", type=int, default=28)
    ap.add_argument("--repeats", type=int, default=20)
    args = ap.parse_args()
    if fast is None:
        sys.exit("compiled kernels are not built; run `python setup.py build_ext --inplace` first")

    cases = kernel_cases(args.size, np.random.default_rng(0))
    print(f"{'kernel':22s} {'python ms':>10s} {'compiled ms':>12s} {'speedup':>8s} {'max |diff|':>11s}")
    for name, fn in cases.items():
        t_ref = min(timeit.repeat(lambda: fn(ref), number=1, repeat=args.repeats)) * 1e3
        t_fast = min(timeit.repeat(lambda: fn(fast), number=1, repeat=args.repeats)) * 1e3
        print(f"{name:22s} {t_ref:10.2f} {t_fast:12.2f} {t_ref / t_fast:8.2f} {max_diff(fn(ref), fn(fast)):11.2e}")

    steps = dict(step_time(args.size, args.repeats, pure) for pure in (True, False))
    print(f"\ntraining step, 5-way 1-shot 5-query, {args.size}x{args.size}: "
          f"python {steps['python'] * 1e3:.1f} ms, compiled {steps['compiled'] * 1e3:.1f} ms "
          f"({steps['python'] / steps['compiled']:.2f}x)")


if __name__ == "__main__":
    main()
