"""Time the numba kernels against their numpy fallbacks.

    python3 benchmarks/bench_kernels.py [--repeat 20] [--batch 16]

Also times one full training step (forward + backward) under whichever
backend SALFORGE_NUMBA selects, so run it twice to compare end to end:

    SALFORGE_NUMBA=1 python3 benchmarks/bench_kernels.py
    SALFORGE_NUMBA=0 python3 benchmarks/bench_kernels.py
"""

import argparse
import timeit

import numpy as np

from salforge import kernels
from salforge.micronet import ModelConfig, backward_seed, build_model, forward
from salforge.train import cross_entropy


def best_of(fn, repeat):
    return min(timeit.repeat(fn, number=1, repeat=repeat))


def bench_kernels(batch, repeat):
    rng = np.random.default_rng(0)
    x = rng.standard_normal((batch, 16, 32, 32))
    cols = kernels.im2col_numpy(x, 3, 1, 1)
    pooled, arg = kernels.maxpool2_forward_numpy(x)
    cases = {
        "im2col 3x3": (lambda f: f(x, 3, 1, 1), kernels.im2col_loops, kernels.im2col_numpy),
        "col2im 3x3": (lambda f: f(cols, batch, 16, 32, 32, 3, 1, 1), kernels.col2im_loops, kernels.col2im_numpy),
        "maxpool fwd": (lambda f: f(x), kernels.maxpool2_forward_loops, kernels.maxpool2_forward_numpy),
        "maxpool bwd": (lambda f: f(pooled, arg, 32, 32), kernels.maxpool2_backward_loops,
                        kernels.maxpool2_backward_numpy),
    }
    rows = []
    for name, (call, fast, ref) in cases.items():
        a, b = call(fast), call(ref)  # first call also triggers compilation
        for u, v in zip(a if isinstance(a, tuple) else (a,), b if isinstance(b, tuple) else (b,)):
            assert np.array_equal(u, v), name
        t_fast = best_of(lambda: call(fast), repeat)
        t_ref = best_of(lambda: call(ref), repeat)
        rows.append((name, t_fast, t_ref))
    return rows


def bench_step(batch, repeat):
    model = build_model(ModelConfig("micro-res", seed=0))
    model.train()
    rng = np.random.default_rng(1)
    x = rng.random((batch, 1, 64, 64))
    y = rng.integers(0, 2, batch)

    def step():
        logits, rec = forward(model, x)
        _, d = cross_entropy(logits, y)
        backward_seed(model, rec, d, param_grads=True, input_grad=False)

    step()
    return best_of(step, max(3, repeat // 4))


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=20)
    ap.add_argument("--batch", type=int, default=16)
    args = ap.parse_args()
    print(f"active backend: {kernels.BACKEND}")
    print(f"{'kernel':<14}{'numba ms':>10}{'numpy ms':>10}{'speedup':>9}")
    for name, t_fast, t_ref in bench_kernels(args.batch, args.repeat):
        print(f"{name:<14}{t_fast * 1e3:>10.3f}{t_ref * 1e3:>10.3f}{t_ref / t_fast:>9.2f}")
    print(f"train step (batch {args.batch}, 64x64, {kernels.BACKEND}): {bench_step(args.batch, args.repeat) * 1e3:.1f} ms")


if __name__ == "__main__":
    main()
