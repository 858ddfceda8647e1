"""Time the compiled kernels against the numpy fallback.

    python benchmarks/bench_kernels.py [--repeat 5] [--size 64] [--json out.json]

Each kernel runs on identical inputs under both backends; outputs are checked
for bitwise equality before timing. A full training step of the width-0.25
model at ``--size`` pixels is timed too.
"""
import argparse
import json
import sys
import timeit

import numpy as np

from pneumoseg import losses
from pneumoseg.model import ModelConfig, build
from pneumoseg.train import AdamState, adam_step
from pneumoseg.tensor import Tape, Tensor, kernels


def kernel_cases(rng, size):
    x = rng.standard_normal((4, 32, size, size)).astype(np.float32)
    k, s = 3, 1
    ho = wo = size - k + 1
    cols = rng.standard_normal((4, 32 * k * k, ho * wo)).astype(np.float32)
    ho2 = wo2 = size // 2
    pooled_grad = rng.standard_normal((4, 32, ho2, wo2)).astype(np.float32)
    up_grad = rng.standard_normal((4, 32, 2 * size, 2 * size)).astype(np.float32)
    arg = kernels.load("numpy").maxpool_forward(x, 2, 2, 2, 2, ho2, wo2)[1]
    return {
        "im2col 3x3": lambda kb: kb.im2col(x, k, k, s, s, ho, wo),
        "col2im 3x3": lambda kb: kb.col2im(cols, x.shape, k, k, s, s, ho, wo),
        "maxpool fwd 2x2": lambda kb: kb.maxpool_forward(x, 2, 2, 2, 2, ho2, wo2),
        "maxpool bwd 2x2": lambda kb: kb.maxpool_backward(pooled_grad, arg, x.shape, 2, 2, 2, 2),
        "upsample 2x": lambda kb: kb.upsample2x(x),
        "upsample 2x bwd": lambda kb: kb.upsample2x_backward(up_grad),
    }


def same(a, b):
    if isinstance(a, tuple):
        return all(same(p, q) for p, q in zip(a, b))
    return np.array_equal(a, b)


def train_step_timer(size):
    model = build(ModelConfig(width_multiplier=0.25), seed=0)
    params = model.named_parameters()
    rng = np.random.default_rng(0)
    x = rng.random((4, 3, size, size)).astype(np.float32)
    y = (rng.random((4, 1, size, size)) > 0.8).astype(np.float32)
    state = AdamState()

    def step():
        for t in params.values():
            t.grad = None
        with Tape() as tape:
            tape.backward(losses.bce_dice(model(Tensor(x)), y))
        adam_step({k: t.data for k, t in params.items()}, {k: t.grad for k, t in params.items()}, state)

    return step


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    ap.add_argument("--repeat", type=int, default=5, help="timing repeats, best is kept (default: 5)")
    ap.add_argument("--size", type=int, default=64, help="spatial size of inputs (default: 64)")
    ap.add_argument("--json", help="also write results as JSON here (default: none)")
    args = ap.parse_args(argv)
    try:
        compiled = kernels.load("cython")
    except ImportError:
        print("compiled kernels are not built; nothing to compare", file=sys.stderr)
        return 1
    fallback = kernels.load("numpy")
    rng = np.random.default_rng(0)
    rows = []
    for name, fn in kernel_cases(rng, args.size).items():
        if not same(fn(compiled), fn(fallback)):
            print(f"{name}: backends disagree", file=sys.stderr)
            return 1
        t = {b.NAME: min(timeit.repeat(lambda: fn(b), number=3, repeat=args.repeat)) / 3 for b in (compiled, fallback)}
        rows.append((name, t["cython"], t["numpy"]))
    step = {}
    for name in ("cython", "numpy"):
        kernels.use(name)
        fn = train_step_timer(args.size)
        fn()  # warm-up
        step[name] = min(timeit.repeat(fn, number=1, repeat=max(1, args.repeat // 2)))
    kernels.use(None)
    rows.append((f"train step, width 0.25, batch 4, {args.size}px", step["cython"], step["numpy"]))

    print(f"{'case':<44}{'cython ms':>12}{'numpy ms':>12}{'speedup':>10}")
    for name, c, n in rows:
        print(f"{name:<44}{c * 1e3:>12.2f}{n * 1e3:>12.2f}{n / c:>9.2f}x")
    if args.json:
        with open(args.json, "w") as fh:
            json.dump([{"case": r[0], "cython_s": r[1], "numpy_s": r[2]} for r in rows], fh, indent=2)
    return 0


if __name__ == "__main__":
    sys.exit(main())
