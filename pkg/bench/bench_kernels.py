"""Compare the compiled segment kernels with the numpy fallback.

    python3 bench/bench_kernels.py [--repeat 20]

Also times one full forward/backward pass on a Places8-sized batch with
each backend, since that is where the kernels matter.
"""
import argparse
import os
import subprocess
import sys
import timeit

import numpy as np

from scenegat.numerics import _fallback

try:
    from scenegat.numerics import _ckernels
except ImportError:
    _ckernels = None

SHAPES = [(2_000, 91, 200), (20_000, 91, 2_000), (200_000, 4, 20_000)]

TRAIN_STEP = """
import time
from scenegat.graph import Vocabulary
from scenegat.model import ModelConfig, init_parameters, loss_and_gradients
from scenegat.numerics import BACKEND, make_rng
from scenegat.synthgen import GeneratorSpec, generate_dataset
v = Vocabulary.vg150()
m, _, _ = generate_dataset(GeneratorSpec(counts={"train": 64, "val": 0, "test": 0}), v)
cfg = ModelConfig.places8(v)
p = init_parameters(cfg, 0)
batch = m.graphs[:8]
rng = make_rng(0, "dropout")
loss_and_gradients(batch, p, cfg, rng=rng)
t = time.perf_counter()
for _ in range(%d):
    loss_and_gradients(batch, p, cfg, rng=rng)
print(BACKEND, (time.perf_counter() - t) / %d)
"""


def bench_kernels(repeat):
    rng = np.random.default_rng(0)
    print(f"{'kernel':<12}{'rows':>9}{'cols':>6}{'segs':>8}{'numpy ms':>11}{'cython ms':>11}{'speedup':>9}")
    for rows, cols, segs in SHAPES:
        x = rng.standard_normal((rows, cols))
        idx = np.sort(rng.integers(0, segs, rows))
        for name in ("segment_sum", "segment_max"):
            f_py = getattr(_fallback, name)
            t_py = min(timeit.repeat(lambda: f_py(x, idx, segs), number=1, repeat=repeat)) * 1e3
            if _ckernels is None:
                print(f"{name:<12}{rows:>9}{cols:>6}{segs:>8}{t_py:>11.3f}{'n/a':>11}{'':>9}")
                continue
            f_c = getattr(_ckernels, name)
            assert np.array_equal(f_py(x, idx, segs), f_c(x, idx, segs))
            t_c = min(timeit.repeat(lambda: f_c(x, idx, segs), number=1, repeat=repeat)) * 1e3
            print(f"{name:<12}{rows:>9}{cols:>6}{segs:>8}{t_py:>11.3f}{t_c:>11.3f}{t_py / t_c:>8.1f}x")


def bench_step(steps):
    code = TRAIN_STEP % (steps, steps)
    for env in ({}, {"SCENEGAT_PURE_PYTHON": "1"}):
        out = subprocess.run([sys.executable, "-c", code], env={**os.environ, **env},
                             capture_output=True, text=True, check=True).stdout.split()
        print(f"train step (batch 8, places8 config), {out[0]:>6}: {float(out[1]) * 1e3:8.1f} ms")


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=20)
    ap.add_argument("--steps", type=int, default=10)
    args = ap.parse_args()
    bench_kernels(args.repeat)
    bench_step(args.steps)


if __name__ == "__main__":
    main()
