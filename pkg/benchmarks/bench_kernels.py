"""Benchmark the compiled recurrent kernels against the pure-Python fallback.

Runs sequence_forward / sequence_backward on identical inputs through every
available backend and reports per-call wall time plus the speedup relative
to the Python implementation.

    python benchmarks/bench_kernels.py
    python benchmarks/bench_kernels.py --nodes 8 --batch 64 --hidden 64 \
        --history 192 --repeats 5
"""

from __future__ import annotations

import argparse
import time

import numpy as np

from ranfault import kernels


def make_inputs(nodes: int, batch: int, feat: int, hidden: int, history: int,
                cheb: int, seed: int):
    rng = np.random.default_rng(seed)
    cin = feat + hidden
    x_seq = rng.standard_normal((history, nodes, batch, feat))
    lap = rng.standard_normal((nodes, nodes))
    lap = 0.5 * (lap + lap.T)
    lap /= max(1.0, np.abs(np.linalg.eigvalsh(lap)).max())  # keep recurrences tame
    weights = 0.1 * rng.standard_normal((cheb, cin, 4 * hidden))
    bias = np.zeros(4 * hidden)
    h0 = np.zeros((nodes, batch, hidden))
    c0 = np.zeros((nodes, batch, hidden))
    return x_seq, lap, weights, bias, h0, c0


def time_call(fn, *args, repeats: int) -> float:
    best = float("inf")
    for _ in range(repeats):
        t0 = time.perf_counter()
        fn(*args)
        best = min(best, time.perf_counter() - t0)
    return best


def main() -> None:
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--nodes", type=int, default=8)
    parser.add_argument("--batch", type=int, default=64)
    parser.add_argument("--feat", type=int, default=1)
    parser.add_argument("--hidden", type=int, default=64)
    parser.add_argument("--history", type=int, default=192)
    parser.add_argument("--cheb", type=int, default=2)
    parser.add_argument("--repeats", type=int, default=3)
    args = parser.parse_args()

    x_seq, lap, weights, bias, h0, c0 = make_inputs(
        args.nodes, args.batch, args.feat, args.hidden, args.history, args.cheb, seed=0)
    names = kernels.available_backends()
    print(f"backends available: {names} (default: {kernels.backend_name})")
    print(f"shape: T={args.history} K={args.nodes} B={args.batch} "
          f"F={args.feat} d={args.hidden} cheb={args.cheb}")

    results = {}
    outputs = {}
    for name in names:
        backend = kernels.get_backend(name)
        h_seq, cache = backend.sequence_forward(x_seq, lap, weights, bias, h0, c0)
        dh_seq = np.ones_like(h_seq)
        fwd = time_call(backend.sequence_forward, x_seq, lap, weights, bias, h0, c0,
                        repeats=args.repeats)
        bwd = time_call(backend.sequence_backward, dh_seq, lap, weights, cache, c0,
                        repeats=args.repeats)
        results[name] = (fwd, bwd)
        outputs[name] = h_seq

    if len(outputs) == 2:
        diff = np.abs(outputs["c"] - outputs["python"]).max()
        print(f"max |h_c - h_python| = {diff:.3e}")

    base_fwd, base_bwd = results.get("python", next(iter(results.values())))
    print(f"{'backend':<10}{'forward':>12}{'backward':>12}{'fwd speedup':>14}{'bwd speedup':>14}")
    for name, (fwd, bwd) in results.items():
        print(f"{name:<10}{fwd:>11.4f}s{bwd:>11.4f}s"
              f"{base_fwd / fwd:>13.2f}x{base_bwd / bwd:>13.2f}x")


if __name__ == "__main__":
    main()
