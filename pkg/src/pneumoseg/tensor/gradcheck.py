"""Central finite-difference checks of the analytic gradients.

The error measure is ``max|analytic - numeric| / max(|analytic|, |numeric|)``
taken over all checked elements, i.e. the worst absolute deviation relative
to the gradient's own scale.
"""
from __future__ import annotations

import numpy as np

from . import ops
from .tensor import Tape, Tensor


def relative_error(analytic, numeric):
    analytic = np.asarray(analytic, dtype=np.float64)
    numeric = np.asarray(numeric, dtype=np.float64)
    scale = max(np.abs(analytic).max(initial=0.0), np.abs(numeric).max(initial=0.0), 1e-12)
    return float(np.abs(analytic - numeric).max(initial=0.0) / scale)


def numerical_gradient(f, arr, h=1e-5, indices=None):
    """Central difference of scalar ``f()`` w.r.t. ``arr`` (perturbed in place)."""
    flat = arr.reshape(-1)
    idx = range(flat.size) if indices is None else indices
    out = np.zeros(len(idx) if indices is not None else flat.size, dtype=np.float64)
    for k, i in enumerate(idx):
        orig = flat[i]
        flat[i] = orig + h
        fp = f()
        flat[i] = orig - h
        fm = f()
        flat[i] = orig
        out[k] = (fp - fm) / (2 * h)
    return out


def check(fn, tensors, h=1e-5, max_elems=None, rng=None):
    """Compare tape gradients of ``fn(*tensors)`` with finite differences.

    ``fn`` must return a scalar Tensor. Returns the maximum relative error
    over all tensors. ``max_elems`` samples that many coordinates per tensor.
    """
    for t in tensors:
        t.grad = None
        t.requires_grad = True
    with Tape() as tape:
        loss = fn(*tensors)
        tape.backward(loss)
    worst = 0.0
    rng = rng or np.random.default_rng(0)

    def value():
        return float(fn(*tensors).data)

    for t in tensors:
        analytic = t.grad.reshape(-1)
        if max_elems is not None and t.size > max_elems:
            idx = np.sort(rng.choice(t.size, size=max_elems, replace=False))
        else:
            idx = np.arange(t.size)
        numeric = numerical_gradient(value, t.data, h=h, indices=list(idx))
        worst = max(worst, relative_error(analytic[idx], numeric))
    return worst


def _distinct(rng, shape, spacing=0.05):
    """Values with pairwise gaps >= spacing so max pooling has no near-ties."""
    n = int(np.prod(shape))
    vals = (rng.permutation(n) - n / 2) * spacing
    return vals.reshape(shape).astype(np.float64)


def _away_from_zero(rng, shape, margin=1e-2):
    x = rng.standard_normal(shape)
    return np.where(np.abs(x) < margin, np.sign(x + 1e-12) * margin * 2, x)


def op_suite(seed=0):
    """Finite-difference check for every autodiff operator; returns {name: error}."""
    rng = np.random.default_rng(seed)
    results = {}

    def with_weights(op):
        # random projection so every output element contributes a distinct weight
        cache = {}

        def fn(*ts):
            out = op(*ts)
            if "w" not in cache:
                cache["w"] = Tensor(rng.standard_normal(out.shape))
            return ops.sum(ops.mul(out, cache["w"]))
        return fn

    for name, stride, pad in [("conv2d", 1, 1), ("conv2d_stride2", 2, 3), ("conv2d_1x1_stride2", 2, 0)]:
        k = 1 if "1x1" in name else (7 if pad == 3 else 3)
        x = Tensor(rng.standard_normal((2, 3, 9, 8)))
        w = Tensor(rng.standard_normal((4, 3, k, k)))
        b = Tensor(rng.standard_normal(4))
        fn = with_weights(lambda x, w, b, s=stride, p=pad: ops.conv2d(x, w, b, stride=s, padding=p))
        results[name] = check(fn, [x, w, b])

    x = Tensor(_distinct(rng, (2, 3, 8, 8)))
    results["maxpool2d"] = check(with_weights(lambda x: ops.maxpool2d(x, 3, 2, 1)), [x])

    for mode in (True, False):
        state = _random_bn_state(3, rng)
        x = Tensor(rng.standard_normal((2, 3, 4, 5)) * 2 + 1)
        fn = with_weights(lambda x, g, b, st=state, m=mode: ops.batchnorm2d(x, st, training=m))
        results["batchnorm2d_train" if mode else "batchnorm2d_eval"] = check(fn, [x, state.gamma, state.beta])

    x = Tensor(_away_from_zero(rng, (2, 3, 4, 4)))
    results["relu"] = check(with_weights(ops.relu), [x])
    x = Tensor(rng.standard_normal((2, 3, 4, 4)) * 3)
    results["sigmoid"] = check(with_weights(ops.sigmoid), [x])
    x = Tensor(rng.standard_normal((2, 3, 3, 4)))
    results["upsample_nearest_2x"] = check(with_weights(ops.upsample_nearest_2x), [x])
    a = Tensor(rng.standard_normal((2, 2, 3, 3)))
    b = Tensor(rng.standard_normal((2, 3, 3, 3)))
    results["concat_channels"] = check(with_weights(ops.concat_channels), [a, b])
    a = Tensor(rng.standard_normal((2, 3, 3, 3)))
    b = Tensor(rng.standard_normal((2, 3, 3, 3)))
    results["add"] = check(with_weights(ops.add), [a, b])
    results["mul"] = check(with_weights(ops.mul), [a, b])
    x = Tensor(rng.standard_normal((2, 3, 3, 3)))
    results["mean"] = check(lambda x: ops.mean(ops.mul(x, x)), [x])
    return results


def _random_bn_state(channels, rng):
    state = ops.BatchNormState(channels, dtype=np.float64)
    state.gamma.data[...] = rng.uniform(0.5, 1.5, channels)
    state.beta.data[...] = rng.standard_normal(channels)
    state.running_mean[...] = rng.standard_normal(channels)
    state.running_var[...] = rng.uniform(0.5, 2.0, channels)
    return state


def loss_suite(seed=0):
    from .. import losses

    rng = np.random.default_rng(seed)
    y = (rng.random((2, 1, 8, 8)) > 0.5).astype(np.float64)
    results = {}
    for name, fn in [("bce", losses.bce), ("dice_loss", losses.dice_loss), ("bce_dice", losses.bce_dice)]:
        p = Tensor(rng.uniform(0.05, 0.95, (2, 1, 8, 8)))
        results[name] = check(lambda p, f=fn: f(p, y), [p])
    return results


def model_check(seed=0, size=32, width=0.125, samples_per_tensor=6):
    """End-to-end check: reduced ResNet34-UNet forward plus BCE-Dice backward.

    BatchNorm runs on stored statistics (randomized) because the deepest
    encoder stage is 1x1 at 32x32 input, where batch statistics are undefined.
    """
    from .. import losses
    from ..model import ModelConfig, build

    rng = np.random.default_rng(seed)
    model = build(ModelConfig(width_multiplier=width), seed=seed, dtype=np.float64)
    for bn in model.batchnorms():
        bn.gamma.data[...] = rng.uniform(0.5, 1.5, bn.channels)
        bn.beta.data[...] = rng.normal(0.0, 0.2, bn.channels)
        bn.running_mean[...] = rng.normal(0.0, 0.2, bn.channels)
        bn.running_var[...] = rng.uniform(0.5, 2.0, bn.channels)
    model.eval()
    x = Tensor(rng.random((1, 3, size, size)))
    y = (rng.random((1, 1, size, size)) > 0.7).astype(np.float64)
    params = model.named_parameters()
    names = list(params)
    for t in params.values():
        t.grad = None
    with Tape() as tape:
        loss = losses.bce_dice(model(x), y)
        tape.backward(loss)

    def value():
        return float(losses.bce_dice(model(x), y).data)

    worst = 0.0
    for name in names:
        t = params[name]
        k = min(samples_per_tensor, t.size)
        idx = np.sort(rng.choice(t.size, size=k, replace=False))
        numeric = numerical_gradient(value, t.data, indices=list(idx))
        analytic = t.grad.reshape(-1)[idx]
        # scale by the tensor's full gradient so near-zero sampled entries do not dominate
        scale = max(np.abs(t.grad).max(), 1e-12)
        worst = max(worst, float(np.abs(analytic - numeric).max() / scale))
    return worst


def full_suite(seed=0):
    results = op_suite(seed)
    results.update(loss_suite(seed))
    results["resnet34_unet_end_to_end"] = model_check(seed)
    return results
