"""Time the numba and numpy convolution backends on the model's conv shapes.

    python3 benchmarks/bench_kernels.py [--repeat 20]

Also runs one full training step under each backend, in a subprocess so the
``AHMF_KERNELS`` flag takes effect at import time.
"""
import argparse
import subprocess
import sys
import timeit

import numpy as np

from ahmf import _kernels as K

# (label, input NCHW, kernel OCkk, stride, padding, groups)
CASES = [
    ("stub level 0 (3→8, s2)", (4, 3, 32, 32), (8, 3, 3, 3), 2, 1, 1),
    ("Conv-GRU gates (68→16)", (4, 68, 16, 16), (16, 68, 3, 3), 1, 1, 1),
    ("depthwise 3×3 (16 ch)", (20, 16, 16, 16), (16, 1, 3, 3), 1, 1, 16),
    ("1×1 projection (56→28)", (4, 56, 16, 16), (28, 56, 1, 1), 1, 0, 1),
]

STEP = """
import time, numpy as np
from ahmf import AttentionModel, ModelConfig, _kernels
m = AttentionModel(ModelConfig(), ["A"], seed=0)
x = np.random.default_rng(0).random((4, 5, 3, 32, 32)).astype(np.float32)
def step():
    m.zero_grad(); m(x, "A", mode="train", rng=np.random.default_rng(0)).sum().backward()
step()
t = time.perf_counter()
for _ in range({n}):
    step()
print(_kernels.BACKEND, (time.perf_counter() - t) / {n})
"""


def bench(fn, repeat):
    fn()  # warm-up (triggers numba compilation)
    return min(timeit.repeat(fn, number=1, repeat=repeat)) * 1e3


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--repeat", type=int, default=20)
    ap.add_argument("--steps", type=int, default=5)
    args = ap.parse_args()
    if not K.HAVE_NUMBA:
        sys.exit("numba is not importable; only the numpy backend exists here")
    rng = np.random.default_rng(0)
    print(f"{'case':<26}{'pass':<9}{'numpy ms':>10}{'numba ms':>10}{'speed-up':>10}  max|Δ|")
    for label, xs, ws, s, p, g in CASES:
        x = rng.standard_normal(xs).astype(np.float32)
        w = rng.standard_normal(ws).astype(np.float32)
        y = K.conv2d_forward_np(x, w, s, p, g)
        gy = rng.standard_normal(y.shape).astype(np.float32)
        for name, f_np, f_nb, a in (
            ("forward", K.conv2d_forward_np, K.conv2d_forward_nb, (x, w, s, p, g)),
            ("backward", K.conv2d_backward_np, K.conv2d_backward_nb, (x, w, gy, s, p, g)),
        ):
            t_np = bench(lambda: f_np(*a), args.repeat)
            t_nb = bench(lambda: f_nb(*a), args.repeat)
            r_np, r_nb = f_np(*a), f_nb(*a)
            if name == "forward":
                diff = np.abs(r_np - r_nb).max()
            else:
                diff = max(np.abs(u - v).max() for u, v in zip(r_np, r_nb))
            print(f"{label:<26}{name:<9}{t_np:>10.3f}{t_nb:>10.3f}{t_np / t_nb:>9.2f}×  {diff:.1e}")
    print("\nfull training step (batch 4, T=5, default model):")
    for backend in ("numpy", "numba"):
        env = {"AHMF_KERNELS": backend, **{k: v for k, v in __import__("os").environ.items() if k != "AHMF_KERNELS"}}
        out = subprocess.run([sys.executable, "-c", STEP.format(n=args.steps)], env=env,
                             capture_output=True, text=True, check=True).stdout.split()
        print(f"  {out[0]:<6} {float(out[1]) * 1e3:8.1f} ms/step")


if __name__ == "__main__":
    main()
