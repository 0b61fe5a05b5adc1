"""Time the numba kernels against the numpy fallback.

    python benchmarks/bench_kernels.py [--repeat 200] [--width 256]

Reports per-call microseconds for each kernel at audit-sized inputs, plus one
end-to-end meta-gradient evaluation (linear and neural energies) under each
backend. JIT compilation is excluded by a warm-up call.
"""
import argparse
import time

import numpy as np

from metalab import _kernels
from metalab.harness.generators import RlFamilySpec, generate_mdp_family
from metalab.meta_rl import meta_gradient_direct
from metalab.neural_net import init_symmetric


def best_of(fn, repeat):
    fn()  # warm-up (and JIT compile)
    times = []
    for _ in range(5):
        t0 = time.perf_counter()
        for _ in range(repeat):
            fn()
        times.append((time.perf_counter() - t0) / repeat)
    return min(times) * 1e6


def kernel_cases(rng, width):
    S, SA, d = 6, 18, 8
    a = np.eye(S) - 0.9 * rng.dirichlet(np.ones(S), size=S)
    b = rng.normal(size=(S, SA))
    z = rng.normal(size=(S, 3))
    w = rng.normal(size=(width, d)) / np.sqrt(d)
    x = rng.normal(size=(SA, d))
    x /= np.linalg.norm(x, axis=1, keepdims=True)
    return {
        "solve (6x6, 18 rhs)": ("solve", (a, b)),
        "softmax_rows (6x3)": ("softmax_rows", (z,)),
        f"relu_forward (m={width}, 18 inputs)": ("relu_forward", (w, x)),
        f"relu_features (m={width}, 18 inputs)": ("relu_features", (w, x)),
    }


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=200)
    ap.add_argument("--width", type=int, default=256)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args(argv)
    if not _kernels.NUMBA_AVAILABLE:
        raise SystemExit("numba is not importable; nothing to compare")
    rng = np.random.default_rng(args.seed)

    print(f"{'kernel':40s} {'numpy us':>10s} {'numba us':>10s} {'speedup':>8s}")
    for label, (name, inputs) in kernel_cases(rng, args.width).items():
        t_np = best_of(lambda: _kernels.get_impl("numpy", name)(*inputs), args.repeat)
        t_nb = best_of(lambda: _kernels.get_impl("numba", name)(*inputs), args.repeat)
        print(f"{label:40s} {t_np:10.2f} {t_nb:10.2f} {t_np / t_nb:8.2f}")

    linear = generate_mdp_family(RlFamilySpec(), args.seed)
    neural = generate_mdp_family(RlFamilySpec(width=args.width), args.seed)
    theta_lin = rng.normal(size=linear.dim)
    theta_nn = init_symmetric(args.width, neural.features.input_dim, args.seed).w_init.ravel()
    reps = max(1, args.repeat // 10)
    previous = _kernels.BACKEND
    for label, tasks, theta in (("meta-gradient, linear energy", linear, theta_lin),
                                (f"meta-gradient, neural m={args.width}", neural, theta_nn)):
        timings = {}
        for backend in ("numpy", "numba"):
            _kernels.set_backend(backend)
            timings[backend] = best_of(lambda: meta_gradient_direct(tasks, theta), reps)
        print(f"{label:40s} {timings['numpy']:10.2f} {timings['numba']:10.2f} "
              f"{timings['numpy'] / timings['numba']:8.2f}")
    _kernels.set_backend(previous)


if __name__ == "__main__":
    main()
