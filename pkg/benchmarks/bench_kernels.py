"""Compare the compiled recurrent-encoder kernel against the numpy fallback.

Runs forward and backward passes on a training-shaped workload for every
available backend and prints a timing table plus the end-to-end effect on
one model training step. BLAS is pinned to a single thread, matching how
the training loop runs.

Usage: python benchmarks/bench_kernels.py [--batch 960] [--steps 12] [--hidden 32]
"""

import argparse
import time

import numpy as np
from threadpoolctl import threadpool_limits

from hierts import kernels, ndiff
from hierts.data import WindowSet, chrono_split, synth_generate
from hierts.forecaster import HierForecaster, ModelConfig
from hierts.ndiff import AdamState, adam_step, zero_grad
from hierts.reconciler import LossWeights, composite_loss
from hierts.selector import AnnealSchedule, SelectorState, sample_hierarchy, selector_loss
from hierts.training import _HierarchyCache, _forward_bundle


def time_best(fn, repeats=20, trials=5):
    best = float("inf")
    for _ in range(trials):
        t0 = time.perf_counter()
        for _ in range(repeats):
            fn()
        best = min(best, (time.perf_counter() - t0) / repeats)
    return best


def bench_kernel(backend, rows, steps, hidden):
    kernels.use_backend(backend)
    rng = np.random.default_rng(0)
    xw = rng.normal(size=(steps, rows, 3 * hidden))
    h0 = np.zeros((rows, hidden))
    wh_zr = 0.3 * rng.normal(size=(hidden, 2 * hidden))
    wh_n = 0.3 * rng.normal(size=(hidden, hidden))
    fwd = time_best(lambda: kernels.gru_forward(xw, h0, wh_zr, wh_n))
    h_all, zrn = kernels.gru_forward(xw, h0, wh_zr, wh_n)
    d_final = rng.normal(size=(rows, hidden))
    bwd = time_best(lambda: kernels.gru_backward(d_final, h_all, zrn, wh_zr, wh_n))
    return fwd, bwd


def bench_training_step(backend):
    kernels.use_backend(backend)
    ds = synth_generate(3, 10, 2000, noise=0.25, seed=0)
    cfg = ModelConfig(window=12, horizon=4, levels=2, hidden_size=32,
                      embed_size=8, mp_layers=2, scheme="gconv")
    rng = np.random.default_rng(0)
    selector = SelectorState([30, 3, 1], rng, AnnealSchedule())
    model = HierForecaster(cfg, 30, 0, rng)
    params = model.parameters() + selector.parameters()
    adam = AdamState()
    spans = chrono_split(2000, (0.7, 0.1, 0.2), 12, 4)
    windows = WindowSet(ds, 12, 4, spans[0])
    cache = _HierarchyCache(ds, spans[0], True)
    weights = LossWeights()

    def step():
        sampled = sample_hierarchy(selector, rng)
        entry = cache.lookup(sampled)
        idx = rng.choice(len(windows), size=32)
        x, u, y, mask = windows.batch(idx)
        bundle = _forward_bundle(model, sampled, entry, x, u, y, mask, weights)
        loss = composite_loss(bundle, weights) + selector_loss(selector, entry[0], 1.0)
        ndiff.backward(loss)
        adam_step(params, None, adam)
        zero_grad(params)

    for _ in range(3):
        step()
    return time_best(step, repeats=10, trials=3)


def main():
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--batch", type=int, default=960, help="sequence rows")
    parser.add_argument("--steps", type=int, default=12, help="window length")
    parser.add_argument("--hidden", type=int, default=32, help="hidden width")
    args = parser.parse_args()

    backends = kernels.available_backends()
    print(f"backends: {', '.join(backends)} (default: {kernels.DEFAULT_BACKEND})")
    print(f"workload: rows={args.batch} steps={args.steps} hidden={args.hidden}\n")
    with threadpool_limits(limits=1, user_api="blas"):
        rows = {}
        for backend in backends:
            fwd, bwd = bench_kernel(backend, args.batch, args.steps, args.hidden)
            rows[backend] = (fwd, bwd)
        print(f"{'backend':<8}  {'forward':>10}  {'backward':>10}  {'total':>10}")
        for backend, (fwd, bwd) in rows.items():
            print(f"{backend:<8}  {fwd * 1e3:8.2f}ms  {bwd * 1e3:8.2f}ms  {(fwd + bwd) * 1e3:8.2f}ms")
        if len(rows) == 2:
            np_total = sum(rows["numpy"])
            cy_total = sum(rows["cython"])
            print(f"\ncompiled kernel speedup (fwd+bwd): {np_total / cy_total:.2f}x")

        print("\nfull training step (hierarchical model, 30 nodes, batch 32):")
        for backend in backends:
            per = bench_training_step(backend)
            print(f"  {backend:<8} {per * 1e3:8.1f} ms/step")
    kernels.use_backend(kernels.DEFAULT_BACKEND)


if __name__ == "__main__":
    main()
