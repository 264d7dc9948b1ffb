"""Compare the compiled kernels with the numpy fallback.

    python3 benchmarks/bench_kernels.py [--batch 32] [--T 200] [--repeats 5] [--step]

Reports the best-of-N wall time per kernel and backend, the speed-up, and
the largest absolute difference between the two backends' outputs.
"""
import argparse
import time

import numpy as np

from bdsl_spoter import kernels
from bdsl_spoter.nn.model import ModelConfig, init_params


def best_of(fn, repeats):
    fn()
    times = []
    for _ in range(repeats):
        t0 = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t0)
    return min(times)


def kernel_cases(B, T, cfg, rng):
    h, dk, d = cfg.n_heads, cfg.d_k, cfg.d_model
    q = rng.normal(size=(B * h, T, dk)).astype(np.float32)
    kT = rng.normal(size=(B * h, dk, T)).astype(np.float32)
    vT = rng.normal(size=(B * h, dk, T)).astype(np.float32)
    dout = rng.normal(size=q.shape).astype(np.float32)
    x = rng.normal(size=(B * T, cfg.d_ff)).astype(np.float32)
    rows = rng.normal(size=(B * T, d)).astype(np.float32)
    gain = np.ones(d, np.float32)
    bias = np.zeros(d, np.float32)
    scale = 1 / np.sqrt(dk)
    p = cfg.dropout_p

    def cases(K):
        _, probs = K.attention_forward(q, kT, vT, scale, p, 7, store_probs=True)
        y, xhat, rstd = K.layer_norm_forward(rows, gain, bias)
        return {
            "attention_forward": lambda: K.attention_forward(q, kT, vT, scale, p, 7, store_probs=True)[0],
            "attention_backward": lambda: K.attention_backward(dout, q, kT, vT, probs, scale, p, 7)[0],
            "gelu_forward": lambda: K.gelu_forward(x),
            "gelu_backward": lambda: K.gelu_backward(x, x),
            "layer_norm_forward": lambda: K.layer_norm_forward(rows, gain, bias)[0],
            "layer_norm_backward": lambda: K.layer_norm_backward(rows, xhat, rstd, gain)[0],
        }
    return cases


def train_step_time(B, cfg, repeats):
    from bdsl_spoter.training import TrainConfig, Trainer
    params = init_params(cfg)
    trainer = Trainer(params, TrainConfig())
    P = np.random.default_rng(1).normal(size=(B, cfg.T, cfg.d_model)).astype(np.float32)
    y = np.arange(B) % cfg.n_classes
    return best_of(lambda: trainer.train_step(P, y, 1e-4), repeats)


def main():
    ap = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    ap.add_argument("--batch", type=int, default=32)
    ap.add_argument("--T", type=int, default=200)
    ap.add_argument("--repeats", type=int, default=5)
    ap.add_argument("--step", action="store_true", help="also time a full training step")
    args = ap.parse_args()

    cfg = ModelConfig(T=args.T)
    names = kernels.available_backends()
    cases = kernel_cases(args.batch, args.T, cfg, np.random.default_rng(0))
    results = {}
    for name in names:
        K = kernels.get_backend(name)
        for kname, fn in cases(K).items():
            results[(name, kname)] = (best_of(fn, args.repeats), fn())
    print(f"batch={args.batch} T={args.T} backends={','.join(names)}")
    header = f"{'kernel':<22}" + "".join(f"{n + ' ms':>14}" for n in names)
    if len(names) > 1:
        header += f"{'speed-up':>10}{'max |diff|':>12}"
    print(header)
    for kname in cases(kernels.get_backend(names[0])):
        row = f"{kname:<22}" + "".join(f"{results[(n, kname)][0] * 1e3:>14.2f}" for n in names)
        if len(names) > 1:
            (tc, oc), (tn, on) = results[("compiled", kname)], results[("numpy", kname)]
            row += f"{tn / tc:>9.1f}x{float(np.max(np.abs(oc - on))):>12.2e}"
        print(row)
    if args.step:
        for name in names:
            prev = kernels.use_backend(name)
            try:
                t = train_step_time(args.batch, cfg, max(1, args.repeats // 2))
            finally:
                kernels.use_backend(prev.name)
            print(f"train step ({name}): {t * 1e3:.1f} ms")


if __name__ == "__main__":
    main()
