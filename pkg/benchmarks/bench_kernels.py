"""Compare the numba kernels against the numpy reference path.

Times each hot kernel at the shapes a default model sees (batch 2, 300-frame
windows), then one full multimodal forward+backward step per backend. Outputs
are checked for agreement before anything is timed.

    python benchmarks/bench_kernels.py [--repeat 20] [--threads N]
"""
import argparse
import time

import numpy as np

from affuse import _kernels as K
from affuse import tensor as T
from affuse.metrics import ccc_loss
from affuse.model import FusionConfig, ModelBundle


def paired_median(fn_a, fn_b, repeat):
    """Median wall time of each callable, alternating runs so drift hits both."""
    fn_a(), fn_b()  # warm-up (and JIT compile)
    ta, tb = [], []
    for _ in range(repeat):
        for fn, acc in ((fn_a, ta), (fn_b, tb)):
            t0 = time.perf_counter()
            fn()
            acc.append(time.perf_counter() - t0)
    return float(np.median(ta)), float(np.median(tb))


def kernel_cases(rng):
    cases = []
    for c, d in ((512, 1), (128, 8), (39, 1), (32, 8)):
        x = rng.standard_normal((2, c, 300))
        cols = rng.standard_normal((2, c * 5, 300))
        cases.append((f"unfold C={c} d={d}", lambda nb, x=x, d=d: K.unfold_causal(x, 5, d, use_numba=nb)))
        cases.append((f"fold   C={c} d={d}", lambda nb, cols=cols, c=c, d=d: K.fold_causal(cols, c, 5, d, use_numba=nb)))
    logits = rng.standard_normal((2, 300, 3, 3))
    s = K.softmax_lastaxis_np(logits)
    g = rng.standard_normal(s.shape)
    cases.append(("softmax (2,300,3,3)", lambda nb: K.softmax_lastaxis(logits, use_numba=nb)))
    cases.append(("softmax backward", lambda nb: K.softmax_backward(s, g, use_numba=nb)))
    return cases


def train_step(inputs, target):
    model = ModelBundle(FusionConfig(), seed=0)
    params = model.parameters()

    def step():
        loss = ccc_loss(T.reshape(model(inputs, train=False), (target.size,)), target)
        T.backward(loss, params)
        return loss.item()

    return step


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=20)
    ap.add_argument("--threads", type=int, default=None, help="numba thread count")
    args = ap.parse_args()
    if not K.HAVE_NUMBA:
        raise SystemExit("numba is not importable; nothing to compare")
    if args.threads:
        K.numba.set_num_threads(args.threads)
    print(f"numba {K.numba.__version__}, {K.numba.get_num_threads()} threads")
    rng = np.random.default_rng(0)

    print(f"{'kernel':<24}{'numpy ms':>10}{'numba ms':>10}{'speedup':>9}")
    for name, fn in kernel_cases(rng):
        a, b = fn(False), fn(True)
        np.testing.assert_allclose(a, b, rtol=1e-12, atol=1e-14)
        t_np, t_nb = paired_median(lambda: fn(False), lambda: fn(True), args.repeat)
        print(f"{name:<24}{t_np * 1e3:>10.3f}{t_nb * 1e3:>10.3f}{t_np / t_nb:>8.2f}x")

    inputs = {m: rng.standard_normal((2, d, 300)) for m, d in FusionConfig().input_dims.items()}
    target = rng.uniform(-1, 1, 600)
    saved = K.USE_NUMBA
    losses = {}

    def runner(flag):
        step = train_step(inputs, target)

        def run():
            K.USE_NUMBA = flag
            losses[flag] = step()
        return run

    try:
        t_np, t_nb = paired_median(runner(False), runner(True), max(3, args.repeat // 2))
    finally:
        K.USE_NUMBA = saved
    loss_np, loss_nb = losses[False], losses[True]
    assert abs(loss_np - loss_nb) < 1e-12, (loss_np, loss_nb)
    print(f"{'model fwd+bwd (B=2,T=300)':<24}{t_np * 1e3:>10.1f}{t_nb * 1e3:>10.1f}{t_np / t_nb:>8.2f}x")


if __name__ == "__main__":
    main()
