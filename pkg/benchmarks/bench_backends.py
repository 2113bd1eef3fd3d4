"""numba vs numpy kernel timings on a SinkLocal workload.

    python3 benchmarks/bench_backends.py --n 4096 --d 64 --repeat 5

The first numba call compiles (or loads the on-disk cache); that cost is
reported separately and excluded from the steady-state numbers. Outputs of
the two backends are cross-checked before anything is printed.
"""
import argparse
import time

import numpy as np

from sale_core import kernels
from sale_core.quant import quantize_k, quantize_q
from sale_core.selection import SelectionConfig, _sink_local_table, plan_selection, threshold_bound
from sale_core.workloads import WorkloadSpec, generate


def best_of(fn, repeat):
    times = []
    for _ in range(repeat):
        t0 = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t0)
    return min(times) * 1e3


def main():
    ap = argparse.ArgumentParser(description=__doc__.split("\n")[0])
    ap.add_argument("--n", type=int, default=4096)
    ap.add_argument("--d", type=int, default=64)
    ap.add_argument("--tau", type=float, default=0.004)
    ap.add_argument("--repeat", type=int, default=5)
    ap.add_argument("--threads", type=int)
    args = ap.parse_args()

    head = generate(WorkloadSpec(kind="sink_local", n=args.n, d=args.d, seed=0))[0]
    cfg = SelectionConfig(tau=args.tau)
    grid = cfg.grid(args.n)
    plan = plan_selection(head, quantize_q(head.q), quantize_k(head.k, grid), cfg)
    bits = plan.mask().bits
    bound = threshold_bound(args.tau, plan.stats)
    sl_idx, sl_cnt = _sink_local_table(grid, cfg)
    q, k, v = (m.astype(np.float64) for m in (head.q, head.k, head.v))
    scale = head.scale

    def calls(mod):
        def est():
            out = np.zeros(grid.shape, dtype=bool)
            return mod.estimate_middle(plan.q_codes, plan.k_codes, plan.q_scales, plan.k_scales, scale,
                                       bound, grid.b_q, grid.b_k, plan.mid_lo, plan.mid_hi, out)
        return {
            "dense": lambda: mod.dense_attention(q, k, v, scale),
            "sink-local stats": lambda: mod.sink_local_stats(q, k, scale, grid.b_q, grid.b_k, sl_idx, sl_cnt),
            "estimate middle": est,
            "sparse": lambda: mod.sparse_attention(q, k, v, bits, grid.b_q, grid.b_k, scale),
        }

    nb, npy = kernels.get_backend("numba"), kernels.get_backend("numpy")
    if args.threads:
        kernels.set_threads(args.threads)
    t0 = time.perf_counter()
    first = {name: fn() for name, fn in calls(nb).items()}
    warm = (time.perf_counter() - t0) * 1e3
    ref = {name: fn() for name, fn in calls(npy).items()}
    np.testing.assert_allclose(first["dense"], ref["dense"], atol=1e-10)
    np.testing.assert_allclose(first["sparse"][0], ref["sparse"][0], atol=1e-10)
    np.testing.assert_array_equal(first["estimate middle"], ref["estimate middle"])

    import numba
    print(f"N={args.n} d={args.d} tau={args.tau} sparsity={1 - bits[grid.causal_bits()].mean():.3f} "
          f"numba threads={numba.get_num_threads()}")
    print(f"numba first call (compile or cache load): {warm:.0f} ms")
    print(f"{'kernel':<18} {'numba ms':>10} {'numpy ms':>10} {'ratio':>7}")
    for name in first:
        a = best_of(calls(nb)[name], args.repeat)
        b = best_of(calls(npy)[name], args.repeat)
        print(f"{name:<18} {a:>10.2f} {b:>10.2f} {b / a:>7.2f}")


if __name__ == "__main__":
    main()
