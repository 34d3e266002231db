"""Compare the compiled and numpy conv kernels, alone and inside a training step.

    python benchmarks/bench_kernels.py [--batch 32] [--repeat 5]

Each backend must agree with the other before it is timed.
"""
import argparse
import time

import numpy as np

from rmarn import data, training
from rmarn.model import RMARN
from rmarn.numcore import kernels
from rmarn.objective import contrastive_loss


def best_of(fn, repeat):
    times = []
    for _ in range(repeat):
        t0 = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t0)
    return min(times)


def conv_case(batch, rng):
    # the head's first conv on a batch of similarity-map pairs: (B*B, k, s_T, s_P)
    x = rng.standard_normal((batch * batch, 4, 16, 64)).astype(np.float32)
    w = rng.standard_normal((8, 4, 3, 3)).astype(np.float32)
    b = rng.standard_normal(8).astype(np.float32)
    ext = np.stack([rng.integers(8, 17, len(x)), rng.integers(32, 65, len(x))], axis=1)
    out, _ = kernels.conv2d_forward(x, w, b, (1, 1), (1, 1), ext)
    gout = rng.standard_normal(out.shape).astype(np.float32)
    return x, w, b, ext, gout


def train_step_fn(batch, rng):
    run = training.preset("small")
    texts, points, _ = data.synthesize(data.SyntheticSpec(n_pairs=batch, seed=0))
    model = RMARN.initialize(run.model, 0)

    def step():
        loss = contrastive_loss(model.similarity(texts, points, training=True, rng=rng), run.model.loss)
        loss.backward()

    return step


def main():
    ap = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    ap.add_argument("--batch", type=int, default=32)
    ap.add_argument("--repeat", type=int, default=5)
    args = ap.parse_args()

    backends = kernels.available_backends()
    if "cython" not in backends:
        print("compiled kernels not built; only the numpy backend is available")
    rng = np.random.default_rng(0)
    x, w, b, ext, gout = conv_case(args.batch, rng)
    step = train_step_fn(args.batch, np.random.default_rng(1))

    results, outputs = {}, {}
    for name in backends:
        kernels.set_backend(name)
        outputs[name] = (kernels.conv2d_forward(x, w, b, (1, 1), (1, 1), ext)[0],
                         *kernels.conv2d_backward(x, w, gout, (1, 1), (1, 1), ext))
        results[name] = (
            best_of(lambda: kernels.conv2d_forward(x, w, b, (1, 1), (1, 1), ext), args.repeat),
            best_of(lambda: kernels.conv2d_backward(x, w, gout, (1, 1), (1, 1), ext), args.repeat),
            best_of(step, max(1, args.repeat // 2)),
        )
    if len(outputs) == 2:
        for got, ref in zip(outputs["cython"], outputs["python"]):
            np.testing.assert_allclose(got, ref, rtol=1e-4, atol=1e-3)

    print(f"conv input {x.shape}, kernel {w.shape}; train step batch {args.batch}; best of {args.repeat}")
    print(f"{'backend':<10}{'forward s':>12}{'backward s':>12}{'train step s':>14}")
    for name, (f, bw, st) in results.items():
        print(f"{name:<10}{f:>12.4f}{bw:>12.4f}{st:>14.3f}")
    if len(results) == 2:
        ratio = [p / c for p, c in zip(results["python"], results["cython"])]
        print(f"{'speedup':<10}{ratio[0]:>11.1f}x{ratio[1]:>11.1f}x{ratio[2]:>13.1f}x")


if __name__ == "__main__":
    main()
