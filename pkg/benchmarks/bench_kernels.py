"""Compare the compiled kernels with the NumPy fallback.

    python benchmarks/bench_kernels.py [--rows 20000] [--repeat 20] [--epochs 2]

Prints per-kernel timings for both implementations, then times a short
training run under each backend in a fresh interpreter (the backend is fixed
at import time).
"""

import argparse
import os
import subprocess
import sys
import timeit

import numpy as np

from credtrans import _pykernels

try:
    from credtrans import _ckernels
except ImportError:  # extension not built
    _ckernels = None

TRAIN_SNIPPET = """
import time
from credtrans import kernels
from credtrans.data import default_synthetic_spec, generate_synthetic
from credtrans.model import CredibilityTransformer, ModelConfig
from credtrans.tokenizer import Covariate, Schema
from credtrans.training import OptimizerConfig, fit
spec = default_synthetic_spec({rows})
data = generate_synthetic(spec, 0)
model = CredibilityTransformer.build(Schema([Covariate(n, k) for n, k in spec.covariates]), ModelConfig(), data, 0)
t = time.perf_counter()
fit(model, data, OptimizerConfig(epochs={epochs}), seed=0)
print(kernels.BACKEND, time.perf_counter() - t)
"""


def kernel_cases(rows, rng):
    x = rng.normal(size=(rows, 10))
    y = _pykernels.softmax_forward(x)
    g = rng.normal(size=(rows, 10))
    gamma, beta = rng.normal(size=10), rng.normal(size=10)
    _, xhat, rstd = _pykernels.layer_norm_forward(x, gamma, beta, 1e-3)
    flat = x.ravel().copy()
    gflat = g.ravel().copy()
    xs = rng.uniform(-1, 2, size=rows)
    bounds = np.linspace(0, 1, 9)
    gp = rng.normal(size=(rows, 8))
    return {
        "softmax_forward": (x,),
        "softmax_backward": (y, g),
        "layer_norm_forward": (x, gamma, beta, 1e-3),
        "layer_norm_backward": (g, xhat, rstd, gamma),
        "gelu_forward": (flat,),
        "gelu_backward": (flat, gflat),
        "ple_forward": (xs, bounds),
        "ple_backward": (xs, bounds, gp),
    }


def bench_kernels(rows, repeat):
    rng = np.random.default_rng(0)
    print(f"{'kernel':<22}{'python ms':>12}{'cython ms':>12}{'speedup':>10}")
    for name, args in kernel_cases(rows, rng).items():
        py = min(timeit.repeat(lambda: getattr(_pykernels, name)(*args), number=1, repeat=repeat))
        if _ckernels is None:
            print(f"{name:<22}{1e3 * py:>12.3f}{'n/a':>12}")
            continue
        cy = min(timeit.repeat(lambda: getattr(_ckernels, name)(*args), number=1, repeat=repeat))
        print(f"{name:<22}{1e3 * py:>12.3f}{1e3 * cy:>12.3f}{py / cy:>9.2f}x")


def bench_training(rows, epochs):
    code = TRAIN_SNIPPET.format(rows=rows, epochs=epochs)
    for pure in ("1", "0"):
        env = dict(os.environ, CREDTRANS_PURE_PYTHON=pure)
        out = subprocess.run([sys.executable, "-c", code], env=env, capture_output=True, text=True, check=True)
        backend, seconds = out.stdout.split()
        print(f"training {epochs} epochs on {rows} rows [{backend}]: {float(seconds):.2f} s")


def main(argv=None):
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--rows", type=int, default=20_000)
    p.add_argument("--repeat", type=int, default=20)
    p.add_argument("--epochs", type=int, default=2)
    args = p.parse_args(argv)
    bench_kernels(args.rows, args.repeat)
    bench_training(args.rows, args.epochs)


if __name__ == "__main__":
    main()
