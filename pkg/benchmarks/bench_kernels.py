"""Benchmark the numba kernels against the pure-numpy fallback.

Runs each hot kernel on desk-model shapes and a couple of larger ones,
plus a full denoiser forward under each backend, and prints a speedup
table. The numba path is JIT-compiled on first call; warmup runs are
excluded from timing.

Usage: python benchmarks/bench_kernels.py [--repeats N]
"""

import argparse
import time

import numpy as np

from ditquant import _kernels_numpy
from ditquant.backend import numba_available


def _time(fn, repeats):
    best = float("inf")
    for _ in range(repeats):
        t0 = time.perf_counter()
        fn()
        best = min(best, time.perf_counter() - t0)
    return best


def bench_kernels(repeats):
    from ditquant import _kernels_numba

    rng = np.random.default_rng(0)
    cases = []

    for m, k, n in [(64, 64, 192), (64, 256, 64), (256, 256, 256), (512, 512, 512)]:
        a = rng.standard_normal((m, k))
        b = rng.standard_normal((k, n))
        cases.append((f"matmul {m}x{k}x{n}", (a, b), "matmul"))

    x = rng.standard_normal((64, 64))
    cases.append(("softmax_rows 64x64", (x,), "softmax_rows"))
    cases.append(
        (
            "layer_norm_rows 64x64",
            (x, np.ones(64), np.zeros(64), 1e-5),
            "layer_norm_rows",
        )
    )
    cases.append(("gelu 1M", (rng.standard_normal(1_000_000),), "gelu"))

    v = rng.standard_normal((512, 128))
    scales = np.full(512, 0.01)
    cases.append(("fake_quant_rows 512x128", (v, scales, -128, 127), "fake_quant_rows"))
    cases.append(("maxabs_rows 512x128", (v,), "maxabs_rows"))

    print(f"{'kernel':28s} {'numpy':>10s} {'numba':>10s} {'speedup':>8s}")
    for name, args, attr in cases:
        f_np = getattr(_kernels_numpy, attr)
        f_nb = getattr(_kernels_numba, attr)
        f_nb(*args)  # warm the JIT
        t_np = _time(lambda: f_np(*args), repeats)
        t_nb = _time(lambda: f_nb(*args), repeats)
        print(f"{name:28s} {t_np*1e3:9.3f}ms {t_nb*1e3:9.3f}ms {t_np/t_nb:7.1f}x")


def bench_forward(repeats):
    import subprocess
    import sys

    code = (
        "import time, numpy as np\n"
        "from ditquant.model import ModelConfig, init_model\n"
        "from ditquant.backend import backend_name\n"
        "m = init_model(ModelConfig())\n"
        "x = np.random.default_rng(0).standard_normal(m.sample_shape)\n"
        "m.forward(x, 1000, 0)\n"
        "t0 = time.perf_counter()\n"
        f"n = {repeats}\n"
        "for _ in range(n): m.forward(x, 1000, 0)\n"
        "dt = (time.perf_counter() - t0) / n\n"
        "print(f'{backend_name()}: {dt*1e3:.2f} ms / forward')\n"
    )
    for backend in ("numpy", "numba"):
        out = subprocess.run(
            [sys.executable, "-c", code],
            capture_output=True,
            text=True,
            env={**__import__("os").environ, "DITQUANT_BACKEND": backend},
        )
        print("desk-model forward,", out.stdout.strip() or out.stderr.strip())


def main():
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--repeats", type=int, default=5)
    args = parser.parse_args()
    if not numba_available():
        print("numba is not importable; nothing to compare")
        return
    bench_kernels(args.repeats)
    bench_forward(max(args.repeats, 10))


if __name__ == "__main__":
    main()
