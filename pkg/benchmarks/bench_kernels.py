"""Compiled vs pure-Python kernels: per-kernel timings and one toy training step.

Usage: python3 benchmarks/bench_kernels.py [--repeat N] [--output results.csv]

Kernel rows time both implementations in this process on toy-sized inputs
(batch 8, 64 tokens, d_model 128, 4 heads, vocab 256). The train-step row
runs a forward + backward + AdamW step in a subprocess per backend, selected
with ``OFFSITE_KERNELS``.
"""
import argparse
import csv
import os
import subprocess
import sys
import timeit

import numpy as np

from offsite.tensor import _kernels_py as py

try:
    from offsite.tensor import _ckernels as cy
except ImportError:
    cy = None

B, T, D, H, V = 8, 64, 128, 4, 256

STEP_SCRIPT = """
import time, numpy as np
from offsite.model import PRESETS, init_model
from offsite.tensor import BACKEND, OptimizerState, adamw_step, backward
from offsite.tuning import lm_loss
m = init_model(PRESETS["toy"], 0); m.set_requires_grad(True)
ids = np.random.default_rng(0).integers(0, 256, (8, 65))
params, opt, times = m.named_parameters(), OptimizerState(), []
for _ in range({n}):
    t = time.perf_counter()
    backward(lm_loss(m, ids[:, :-1], ids[:, 1:])); adamw_step(params, opt, 1e-3)
    for p in params.values(): p.grad = None
    times.append(time.perf_counter() - t)
print(BACKEND, min(times[1:]))
"""


def cases(rng):
    x = rng.standard_normal((B * T, D)).astype(np.float32)
    g, b = np.ones(D, np.float32), np.zeros(D, np.float32)
    _, xhat, rstd = py.layer_norm_fwd(x, g, b, 1e-5)
    s = rng.standard_normal((B * H, T, T)).astype(np.float32)
    p = py.causal_softmax_fwd(s)
    z = rng.standard_normal((B * T, V)).astype(np.float32)
    tgt = rng.integers(0, V, B * T).astype(np.int64)
    _, probs = py.xent_fwd(z, tgt)
    n = 200_000
    w, gr = rng.standard_normal(n).astype(np.float32), rng.standard_normal(n).astype(np.float32)

    def adam(mod):
        m1, m2, w1 = np.zeros(n, np.float32), np.zeros(n, np.float32), w.copy()
        return lambda: mod.adamw_update(w1, gr, m1, m2, 1e-3, 0.9, 0.999, 1e-8, 0.01, 0.1, 0.001)

    return {
        "layer_norm_fwd": lambda mod: (lambda: mod.layer_norm_fwd(x, g, b, 1e-5)),
        "layer_norm_bwd": lambda mod: (lambda: mod.layer_norm_bwd(x, xhat, rstd, g)),
        "causal_softmax_fwd": lambda mod: (lambda: mod.causal_softmax_fwd(s)),
        "causal_softmax_bwd": lambda mod: (lambda: mod.causal_softmax_bwd(p, s)),
        "xent_fwd": lambda mod: (lambda: mod.xent_fwd(z, tgt)),
        "xent_bwd": lambda mod: (lambda: mod.xent_bwd(probs, tgt, 1.0 / len(tgt))),
        "adamw_update_200k": adam,
    }


def best_ms(fn, repeat):
    return min(timeit.repeat(fn, number=5, repeat=repeat)) / 5 * 1e3


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=7)
    ap.add_argument("--steps", type=int, default=6, help="train steps per backend (first is warm-up)")
    ap.add_argument("--output", help="also write the table as CSV")
    args = ap.parse_args()

    rows = []
    for name, make in cases(np.random.default_rng(0)).items():
        t_py = best_ms(make(py), args.repeat)
        t_cy = best_ms(make(cy), args.repeat) if cy else float("nan")
        rows.append((name, t_cy, t_py))
    step = {"cython": float("nan"), "python": float("nan")}
    for backend in step:
        if backend == "cython" and cy is None:
            continue
        env = {**os.environ, "OFFSITE_KERNELS": backend}
        out = subprocess.run([sys.executable, "-c", STEP_SCRIPT.format(n=args.steps)], env=env,
                             capture_output=True, text=True, check=True).stdout.split()
        step[backend] = float(out[1]) * 1e3
    rows.append(("toy_train_step", step["cython"], step["python"]))

    print(f"{'kernel':<22}{'cython ms':>12}{'python ms':>12}{'speedup':>10}")
    for name, c, p in rows:
        print(f"{name:<22}{c:>12.3f}{p:>12.3f}{p / c:>9.2f}x")
    if args.output:
        with open(args.output, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["kernel", "cython_ms", "python_ms", "speedup"])
            for name, c, p in rows:
                w.writerow([name, f"{c:.4f}", f"{p:.4f}", f"{p / c:.3f}"])


if __name__ == "__main__":
    main()
