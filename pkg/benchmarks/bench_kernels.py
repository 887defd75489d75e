"""Compare the numba and pure-numpy im2col/col2im kernels.

Run: python benchmarks/bench_kernels.py [--repeats N]
Shapes are the conv layers of the default policy at rollout/minibatch sizes.
"""
import argparse
import time

import numpy as np

from bamguard import _kernels as K
from bamguard import tensor as T
from bamguard.policy import ArchitectureConfig, PolicyNetwork

# (batch, channels, padded H, W, kernel, stride, dilation)
CASES = [
    ("conv1, rollout batch 8", 8, 4, 34, 34, 5, 2, 1),
    ("conv1, minibatch 256", 256, 4, 34, 34, 5, 2, 1),
    ("conv2, minibatch 256", 256, 8, 15, 15, 3, 2, 1),
    ("bam dilated, minibatch 256", 256, 2, 19, 19, 3, 1, 2),
]


def best_of(fn, repeats):
    fn()  # warm-up / JIT
    times = []
    for _ in range(repeats):
        t0 = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t0)
    return min(times)


def bench_case(name, n, c, h, w, k, stride, dil, repeats):
    rng = np.random.default_rng(0)
    xp = rng.random((n, c, h, w)).astype(np.float32)
    oh = (h - dil * (k - 1) - 1) // stride + 1
    ow = (w - dil * (k - 1) - 1) // stride + 1
    cols = K.im2col(xp, k, k, stride, dil, oh, ow, use_numba=False)
    assert np.array_equal(cols, K.im2col(xp, k, k, stride, dil, oh, ow, use_numba=True))
    back_np = K.col2im(cols, xp.shape, stride, dil, use_numba=False)
    assert np.array_equal(back_np, K.col2im(cols, xp.shape, stride, dil, use_numba=True))
    rows = []
    for kernel, call in (("im2col", lambda u: K.im2col(xp, k, k, stride, dil, oh, ow, use_numba=u)),
                         ("col2im", lambda u: K.col2im(cols, xp.shape, stride, dil, use_numba=u))):
        t_np = best_of(lambda: call(False), repeats)
        t_nb = best_of(lambda: call(True), repeats)
        rows.append((f"{name} {kernel}", t_np, t_nb))
    return rows


def bench_network(repeats):
    net = PolicyNetwork(ArchitectureConfig.nature_lite(bam=True), seed=0)
    obs = np.random.default_rng(0).random((256, 4, 32, 32)).astype(np.float32)

    def step(flag):
        K.USE_NUMBA = flag
        net.zero_grad()
        logits, value = net.logits_and_value(obs)
        T.backward(T.add(T.mean(logits), T.mean(value)))

    saved = K.USE_NUMBA
    try:
        t_np = best_of(lambda: step(False), repeats)
        t_nb = best_of(lambda: step(True), repeats)
    finally:
        K.USE_NUMBA = saved
    return ("policy fwd+bwd, batch 256", t_np, t_nb)


def main():
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--repeats", type=int, default=10)
    args = parser.parse_args()
    rows = []
    for case in CASES:
        rows.extend(bench_case(*case, repeats=args.repeats))
    rows.append(bench_network(max(1, args.repeats // 2)))
    print(f"{'case':<36}{'numpy ms':>10}{'numba ms':>10}{'speedup':>9}")
    for name, t_np, t_nb in rows:
        print(f"{name:<36}{t_np * 1e3:>10.2f}{t_nb * 1e3:>10.2f}{t_np / t_nb:>8.2f}x")


if __name__ == "__main__":
    main()
