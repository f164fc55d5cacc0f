#!/usr/bin/env python3
"""Compare the compiled segment kernels against the numpy fallback.

Times the three kernel entry points on synthetic workloads, then a full
model forward/backward pass routed through each backend.

Usage: python benchmarks/bench_kernels.py [--repeats N]
"""

import argparse
import time

import numpy as np

from emnn import autodiff as ad
from emnn import kernels, shapes
from emnn.model import ModelConfig, forward_pass, init_model_params, loss


def time_call(fn, repeats):
    best = np.inf
    for _ in range(repeats):
        start = time.perf_counter()
        fn()
        best = min(best, time.perf_counter() - start)
    return best


def kernel_workloads(rng, rows, cols, segments):
    values = rng.normal(size=(rows, cols))
    ids = np.sort(rng.integers(0, segments, size=rows)).astype(np.int64)
    out = np.zeros((segments, cols))
    return {
        "segment_sum": lambda m: m.segment_sum(values, ids, segments),
        "segment_max": lambda m: m.segment_max(values, ids, segments),
        "scatter_add": lambda m: m.scatter_add(out.copy(), ids, values),
    }


def bench_kernels(repeats):
    rng = np.random.default_rng(0)
    print(f"{'kernel':<14s} {'rows x cols':<14s} {'numpy':>10s} {'native':>10s} "
          f"{'speedup':>8s}")
    for rows, cols in ((20_000, 16), (20_000, 64), (200_000, 16)):
        for name, call in kernel_workloads(rng, rows, cols, rows // 4).items():
            numpy_t = time_call(lambda: call(kernels.backend_module("numpy")),
                                repeats)
            try:
                native_t = time_call(
                    lambda: call(kernels.backend_module("native")), repeats)
            except RuntimeError:
                print(f"{name:<14s} {rows}x{cols:<8d} {numpy_t * 1e3:9.2f}ms "
                      f"{'n/a':>10s}")
                continue
            print(f"{name:<14s} {f'{rows}x{cols}':<14s} {numpy_t * 1e3:9.2f}ms "
                  f"{native_t * 1e3:9.2f}ms {numpy_t / native_t:7.1f}x")


def bench_model(repeats):
    mesh = shapes.icosphere(3)
    config = ModelConfig(task="classification", num_classes=4, num_layers=3,
                         hidden_dim=32, message_dim=32, hierarchy_depth=3,
                         multi_channel=True, num_channels=2)
    params = init_model_params(config, seed=0)
    labels = np.array([1])

    def step():
        with ad.Tape() as tape:
            value = loss(forward_pass(mesh, config, params).logits, labels)
        tape.backward(value)

    print(f"\nmodel step on icosphere-3 ({mesh.num_vertices} vertices, "
          f"{mesh.num_edges} edges):")
    for backend in ("numpy", "native"):
        try:
            with kernels.use_backend(backend):
                step()  # warm up
                elapsed = time_call(step, repeats)
            print(f"  {backend:<8s} {elapsed * 1e3:8.1f} ms / forward+backward")
        except RuntimeError as exc:
            print(f"  {backend:<8s} unavailable ({exc})")


def main():
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--repeats", type=int, default=5)
    args = parser.parse_args()
    print(f"active backend at import: {kernels.BACKEND}\n")
    bench_kernels(args.repeats)
    bench_model(args.repeats)


if __name__ == "__main__":
    main()
