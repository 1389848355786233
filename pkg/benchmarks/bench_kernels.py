"""Time the compiled kernels against the numpy fallback.

    python3 benchmarks/bench_kernels.py [--repeat 5]
"""

import argparse
import timeit

import numpy as np

from implicit3d import _kernels_py

try:
    from implicit3d import _kernels
except ImportError:
    _kernels = None


def workloads(gen: np.random.Generator) -> dict:
    rays, n, m = 4096, 64, 128
    alpha = gen.random((rays, n)) * 0.2
    colors = gen.random((rays, n, 3))
    bg = np.ones(3)
    trans = _kernels_py.composite_forward(alpha, colors, bg)[2]
    grad = gen.normal(size=(rays, 3))
    edges = np.sort(gen.uniform(1.5, 3.5, (rays, n + 1)), axis=1)
    weights = gen.random((rays, n))
    u = np.sort(gen.random((rays, m)), axis=1)
    axis = np.linspace(-1, 1, 96)
    x, y, z = np.meshgrid(axis, axis, axis, indexing="ij")
    sdf = np.sqrt(x**2 + y**2 + z**2) - 0.6 + 0.05 * np.sin(9 * x) * np.cos(7 * y)
    return {
        "composite_forward": lambda k: k.composite_forward(alpha, colors, bg),
        "composite_backward": lambda k: k.composite_backward(alpha, colors, bg, trans, grad),
        "sample_pdf": lambda k: k.sample_pdf(edges, weights, u),
        "marching_cubes (96^3)": lambda k: k.marching_cubes(sdf, 0.0),
    }


def main() -> None:
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--repeat", type=int, default=5)
    args = parser.parse_args()
    backends = {"python": _kernels_py}
    if _kernels is not None:
        backends["cython"] = _kernels
    print(f"{'kernel':<24}" + "".join(f"{b:>12}" for b in backends) + ("     speedup" if len(backends) == 2 else ""))
    for name, fn in workloads(np.random.default_rng(0)).items():
        times = {b: min(timeit.repeat(lambda: fn(k), number=1, repeat=args.repeat)) for b, k in backends.items()}
        row = f"{name:<24}" + "".join(f"{t * 1e3:>10.2f}ms" for t in times.values())
        if len(times) == 2:
            row += f"{times['python'] / times['cython']:>11.1f}x"
        print(row)


if __name__ == "__main__":
    main()
