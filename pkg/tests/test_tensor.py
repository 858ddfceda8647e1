import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from pneumoseg.tensor import (
    BatchNormState,
    ShapeError,
    Tape,
    Tensor,
    add,
    backward,
    batchnorm2d,
    concat_channels,
    conv2d,
    gradcheck,
    kernels,
    maxpool2d,
    mul,
    relu,
    sigmoid,
    sum as tsum,
    upsample_nearest_2x,
)
from pneumoseg.tensor import _npkernels


def loop_conv(x, w, b=None, stride=1, pad=0):
    """Brute-force cross-correlation oracle."""
    n, c, h, wd = x.shape
    co, _, kh, kw = w.shape
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    ho = (h + 2 * pad - kh) // stride + 1
    wo = (wd + 2 * pad - kw) // stride + 1
    out = np.zeros((n, co, ho, wo))
    for i in range(n):
        for o in range(co):
            for r in range(ho):
                for s in range(wo):
                    win = xp[i, :, r * stride:r * stride + kh, s * stride:s * stride + kw]
                    out[i, o, r, s] = np.sum(win * w[o]) + (0 if b is None else b[o])
    return out


def loop_maxpool(x, k, s, p):
    n, c, h, w = x.shape
    xp = np.pad(x, ((0, 0), (0, 0), (p, p), (p, p)), constant_values=-np.inf)
    ho, wo = (h + 2 * p - k) // s + 1, (w + 2 * p - k) // s + 1
    out = np.empty((n, c, ho, wo))
    for r in range(ho):
        for q in range(wo):
            out[:, :, r, q] = xp[:, :, r * s:r * s + k, q * s:q * s + k].max(axis=(2, 3))
    return out


# -- Tensor / Tape -----------------------------------------------------------

def test_tensor_dtype_and_rank():
    assert Tensor([1, 2]).dtype == np.float32
    assert Tensor(np.zeros(3)).dtype == np.float64
    assert Tensor(np.float64(2.0)).shape == ()
    with pytest.raises(ShapeError):
        Tensor(np.zeros((1, 1, 1, 1, 1)))


def test_backward_sum_gives_ones():
    x = Tensor(np.arange(6.0).reshape(2, 3), requires_grad=True)
    with Tape() as tape:
        backward(tsum(x), tape)
    np.testing.assert_array_equal(x.grad, np.ones((2, 3)))


def test_backward_square_gives_2x(rng):
    v = rng.normal(size=(3, 4))
    x = Tensor(v, requires_grad=True)
    with Tape() as tape:
        backward(tsum(mul(x, x)), tape)
    np.testing.assert_allclose(x.grad, 2 * v, rtol=0, atol=1e-12)


def test_backward_requires_scalar():
    x = Tensor(np.ones(3), requires_grad=True)
    with Tape() as tape:
        y = mul(x, 2.0)
        with pytest.raises(ShapeError):
            tape.backward(y)


def test_grads_accumulate_over_reuse():
    x = Tensor(np.array([1.0, 2.0]), requires_grad=True)
    with Tape() as tape:
        loss = tsum(add(mul(x, 3.0), x))
        tape.backward(loss)
    np.testing.assert_array_equal(x.grad, [4.0, 4.0])


def test_tape_visits_each_record_once_in_order():
    x = Tensor(np.ones((1, 1, 4, 4)), requires_grad=True)
    with Tape() as tape:
        y = relu(x)
        z = upsample_nearest_2x(y)
        loss = tsum(z)
        ops = [r.op for r in tape.records]
        outputs = [id(r.output) for r in tape.records]
        assert len(set(outputs)) == len(outputs)
        # every input produced earlier than the op consuming it
        seen = {id(x)}
        for r in tape.records:
            assert all(id(t) in seen for t in r.inputs if isinstance(t, Tensor) and t.requires_grad)
            seen.add(id(r.output))
        tape.backward(loss)
    assert len(ops) == 3
    np.testing.assert_array_equal(x.grad, np.full((1, 1, 4, 4), 4.0))


def test_no_recording_without_tape_or_grad():
    x = Tensor(np.ones((1, 1, 2, 2)))
    with Tape() as tape:
        relu(x)
        assert len(tape) == 0
    y = Tensor(np.ones((1, 1, 2, 2)), requires_grad=True)
    relu(y)  # no tape active: nothing to assert beyond no error


def test_grad_shape_matches_data(rng):
    x = Tensor(rng.normal(size=(2, 3, 6, 6)), requires_grad=True)
    w = Tensor(rng.normal(size=(4, 3, 3, 3)), requires_grad=True)
    with Tape() as tape:
        tape.backward(tsum(conv2d(x, w, padding=1)))
    assert x.grad.shape == x.shape and w.grad.shape == w.shape


# -- conv2d ------------------------------------------------------------------

def test_conv_stem_shape():
    x = Tensor(np.zeros((1, 3, 512, 512), np.float32))
    w = Tensor(np.zeros((64, 3, 7, 7), np.float32))
    assert conv2d(x, w, stride=2, padding=3).shape == (1, 64, 256, 256)


def test_conv_zero_input_gives_zero(rng):
    x = Tensor(np.zeros((1, 1, 5, 5)))
    out = conv2d(x, Tensor(rng.normal(size=(2, 1, 3, 3))), Tensor(np.zeros(2)))
    assert not out.data.any()


def test_conv_hand_computed():
    x = Tensor(np.arange(1.0, 10.0).reshape(1, 1, 3, 3))
    w = Tensor(np.array([[[[1.0, 0.0], [0.0, 1.0]]]]))
    out = conv2d(x, w)
    np.testing.assert_array_equal(out.data[0, 0], [[6, 8], [12, 14]])
    np.testing.assert_array_equal(out.data, loop_conv(x.data, w.data))


@pytest.mark.parametrize("stride,pad,k", [(1, 0, 3), (2, 1, 3), (2, 3, 7), (1, 1, 1), (2, 0, 1)])
def test_conv_matches_loop_oracle(rng, stride, pad, k):
    x = rng.normal(size=(2, 3, 9, 8))
    w = rng.normal(size=(4, 3, k, k))
    b = rng.normal(size=4)
    out = conv2d(Tensor(x), Tensor(w), Tensor(b), stride=stride, padding=pad)
    np.testing.assert_allclose(out.data, loop_conv(x, w, b, stride, pad), rtol=1e-12, atol=1e-12)


def test_conv_errors():
    x = Tensor(np.zeros((1, 3, 4, 4)))
    with pytest.raises(ShapeError, match="channels"):
        conv2d(x, Tensor(np.zeros((2, 2, 3, 3))))
    with pytest.raises(ShapeError, match="smaller than kernel"):
        conv2d(x, Tensor(np.zeros((2, 3, 5, 5))))


@settings(max_examples=30)
@given(a=st.floats(-3, 3), b=st.floats(-3, 3), seed=st.integers(0, 2**31))
def test_conv_linearity(a, b, seed):
    r = np.random.default_rng(seed)
    x, y = r.normal(size=(2, 1, 2, 6, 6))
    w = Tensor(r.normal(size=(3, 2, 3, 3)))
    lhs = conv2d(Tensor(a * x + b * y), w, padding=1).data
    rhs = a * conv2d(Tensor(x), w, padding=1).data + b * conv2d(Tensor(y), w, padding=1).data
    np.testing.assert_allclose(lhs, rhs, rtol=0, atol=1e-6)


# -- maxpool -----------------------------------------------------------------

def test_maxpool_stem_shape():
    x = Tensor(np.zeros((1, 64, 256, 256), np.float32))
    assert maxpool2d(x, 3, 2, 1).shape == (1, 64, 128, 128)


def test_maxpool_constant_and_window():
    assert np.all(maxpool2d(Tensor(np.full((1, 2, 6, 6), 3.5)), 3, 2, 1).data == 3.5)
    out = maxpool2d(Tensor(np.array([[[[1.0, 2.0], [3.0, 4.0]]]])), 2, 2)
    np.testing.assert_array_equal(out.data, [[[[4.0]]]])


def test_maxpool_matches_oracle(rng):
    x = rng.normal(size=(2, 3, 11, 10))
    np.testing.assert_array_equal(maxpool2d(Tensor(x), 3, 2, 1).data, loop_maxpool(x, 3, 2, 1))


def test_maxpool_tie_goes_to_first_element():
    x = Tensor(np.ones((1, 1, 2, 2)), requires_grad=True)
    with Tape() as tape:
        tape.backward(tsum(maxpool2d(x, 2, 2)))
    np.testing.assert_array_equal(x.grad[0, 0], [[1, 0], [0, 0]])


# -- batchnorm ---------------------------------------------------------------

def test_bn_eval_identity(rng):
    st_ = BatchNormState(3, dtype=np.float64)
    x = rng.normal(size=(2, 3, 4, 4))
    out = batchnorm2d(Tensor(x), st_, training=False).data
    np.testing.assert_allclose(out, x / np.sqrt(1 + 1e-5), rtol=1e-12)


def test_bn_train_standardizes(rng):
    st_ = BatchNormState(3, dtype=np.float64)
    x = rng.normal(5.0, 3.0, size=(4, 3, 8, 8))
    out = batchnorm2d(Tensor(x), st_, training=True).data
    np.testing.assert_allclose(out.mean(axis=(0, 2, 3)), 0, atol=1e-5)
    np.testing.assert_allclose(out.var(axis=(0, 2, 3)), 1, atol=1e-5)


def test_bn_affine(rng):
    st_ = BatchNormState(2, dtype=np.float64)
    st_.gamma.data[...] = 2.0
    st_.beta.data[...] = 3.0
    x = rng.normal(size=(4, 2, 8, 8))
    out = batchnorm2d(Tensor(x), st_, training=True).data
    np.testing.assert_allclose(out.mean(axis=(0, 2, 3)), 3, atol=1e-5)
    np.testing.assert_allclose(out.std(axis=(0, 2, 3)), 2, atol=1e-4)


def test_bn_running_stats_and_single_element_error(rng):
    st_ = BatchNormState(2, dtype=np.float64)
    x = rng.normal(1.0, 2.0, size=(3, 2, 4, 4))
    batchnorm2d(Tensor(x), st_, training=True)
    n = 3 * 16
    np.testing.assert_allclose(st_.running_mean, 0.1 * x.mean(axis=(0, 2, 3)))
    np.testing.assert_allclose(st_.running_var, 0.9 + 0.1 * x.var(axis=(0, 2, 3)) * n / (n - 1))
    assert np.all(st_.running_var > 0)
    with pytest.raises(ShapeError):
        batchnorm2d(Tensor(np.ones((1, 2, 1, 1))), st_, training=True)
    with pytest.raises(ShapeError):
        batchnorm2d(Tensor(np.ones((1, 3, 2, 2))), st_)


def test_bn_cumulative_average(rng):
    st_ = BatchNormState(1, momentum=None, dtype=np.float64)
    batches = [rng.normal(k, 1, size=(2, 1, 4, 4)) for k in range(3)]
    for b in batches:
        batchnorm2d(Tensor(b), st_, training=True)
    np.testing.assert_allclose(st_.running_mean, np.mean([b.mean() for b in batches]))


def test_bn_eval_is_pure(rng):
    st_ = BatchNormState(2, dtype=np.float64)
    st_.running_mean[...] = [0.3, -1]
    st_.running_var[...] = [2, 0.5]
    x = Tensor(rng.normal(size=(1, 2, 3, 3)))
    a = batchnorm2d(x, st_, training=False).data
    b = batchnorm2d(x, st_, training=False).data
    np.testing.assert_array_equal(a, b)
    np.testing.assert_array_equal(st_.running_mean, [0.3, -1])


# -- elementwise / structural ------------------------------------------------

def test_relu_sigmoid_values():
    np.testing.assert_array_equal(relu(Tensor(np.array([-5.0, 5.0]))).data, [0, 5])
    assert sigmoid(Tensor(np.array(0.0))).data == 0.5
    x = Tensor(np.array([0.0]), requires_grad=True)
    with Tape() as tape:
        tape.backward(tsum(sigmoid(x)))
    assert x.grad[0] == pytest.approx(0.25, abs=1e-15)


def test_relu_subgradient_at_zero():
    x = Tensor(np.array([0.0, 1.0]), requires_grad=True)
    with Tape() as tape:
        tape.backward(tsum(relu(x)))
    np.testing.assert_array_equal(x.grad, [0, 1])


def test_sigmoid_finite_and_open_interval():
    out = sigmoid(Tensor(np.array([-1e4, -50, 0, 50, 1e4], np.float32))).data
    assert np.all(np.isfinite(out)) and np.all(out > 0) and np.all(out < 1)


def test_upsample_examples(rng):
    assert upsample_nearest_2x(Tensor(np.zeros((1, 512, 16, 16), np.float32))).shape == (1, 512, 32, 32)
    np.testing.assert_array_equal(upsample_nearest_2x(Tensor(np.ones((1, 1, 1, 1)))).data, np.ones((1, 1, 2, 2)))
    x = rng.normal(size=(2, 3, 5, 4))
    out = upsample_nearest_2x(Tensor(x)).data
    assert out.sum() == pytest.approx(4 * x.sum())
    r, c = np.meshgrid(np.arange(10), np.arange(8), indexing="ij")
    np.testing.assert_array_equal(out, x[:, :, r // 2, c // 2])


def test_upsample_backward_sums_blocks(rng):
    x = Tensor(rng.normal(size=(1, 2, 3, 3)), requires_grad=True)
    g = rng.normal(size=(1, 2, 6, 6))
    with Tape() as tape:
        tape.backward(tsum(mul(upsample_nearest_2x(x), Tensor(g))))
    np.testing.assert_allclose(x.grad, g.reshape(1, 2, 3, 2, 3, 2).sum(axis=(3, 5)))


def test_concat_examples(rng):
    a = Tensor(np.zeros((1, 256, 32, 32), np.float32))
    b = Tensor(np.zeros((1, 512, 32, 32), np.float32))
    assert concat_channels(a, b).shape == (1, 768, 32, 32)
    x = rng.normal(size=(2, 3, 4, 4))
    np.testing.assert_array_equal(concat_channels(Tensor(x), Tensor(np.zeros((2, 0, 4, 4)))).data, x)
    y = rng.normal(size=(2, 2, 4, 4))
    out = concat_channels(Tensor(x), Tensor(y)).data
    np.testing.assert_array_equal(out[:, :3], x)
    np.testing.assert_array_equal(out[:, 3:], y)
    with pytest.raises(ShapeError):
        concat_channels(Tensor(x), Tensor(np.zeros((2, 1, 5, 4))))


def test_no_implicit_broadcast():
    with pytest.raises(ShapeError):
        add(Tensor(np.ones((2, 2))), Tensor(np.ones(2)))


def test_forward_finite_on_finite_inputs(rng):
    x = Tensor(rng.normal(size=(2, 3, 8, 8)) * 100)
    w = Tensor(rng.normal(size=(4, 3, 3, 3)))
    y = sigmoid(relu(conv2d(x, w, padding=1)))
    assert np.all(np.isfinite(y.data))


def test_determinism(rng):
    x = rng.normal(size=(2, 3, 10, 10)).astype(np.float32)
    w = rng.normal(size=(4, 3, 3, 3)).astype(np.float32)
    a = maxpool2d(conv2d(Tensor(x), Tensor(w), stride=2, padding=1), 3, 2, 1).data
    b = maxpool2d(conv2d(Tensor(x), Tensor(w), stride=2, padding=1), 3, 2, 1).data
    np.testing.assert_array_equal(a, b)


# -- finite differences ------------------------------------------------------

def test_op_suite_gradients():
    results = gradcheck.op_suite(seed=1)
    assert results
    bad = {k: v for k, v in results.items() if not v < 1e-5}
    assert not bad, bad


def test_relative_error_definition():
    assert gradcheck.relative_error(np.array([1.0, 2.0]), np.array([1.0, 2.0])) == 0
    assert gradcheck.relative_error(np.array([1.0]), np.array([1.1])) == pytest.approx(0.1 / 1.1)


# -- backend equivalence -----------------------------------------------------

needs_ext = pytest.mark.skipif(kernels.load().NAME != "cython", reason="compiled kernels not built")


@needs_ext
@settings(max_examples=40)
@given(
    n=st.integers(1, 2), c=st.integers(1, 4), h=st.integers(3, 12), w=st.integers(3, 12),
    k=st.sampled_from([1, 2, 3]), s=st.integers(1, 2), p=st.integers(0, 1),
    dtype=st.sampled_from([np.float32, np.float64]), seed=st.integers(0, 2**31),
)
def test_backends_agree_bitwise(n, c, h, w, k, s, p, dtype, seed):
    cy = kernels.load("cython")
    r = np.random.default_rng(seed)
    x = r.normal(size=(n, c, h + 2 * p, w + 2 * p)).astype(dtype)
    ho, wo = (h + 2 * p - k) // s + 1, (w + 2 * p - k) // s + 1
    a = _npkernels.im2col(x, k, k, s, s, ho, wo)
    b = cy.im2col(x, k, k, s, s, ho, wo)
    np.testing.assert_array_equal(a, b)
    np.testing.assert_array_equal(_npkernels.col2im(a, x.shape, k, k, s, s, ho, wo),
                                  cy.col2im(a, x.shape, k, k, s, s, ho, wo))
    xm = x.copy()
    ya, ia = _npkernels.maxpool_forward(xm, k, k, s, s, ho, wo)
    yb, ib = cy.maxpool_forward(xm, k, k, s, s, ho, wo)
    np.testing.assert_array_equal(ya, yb)
    np.testing.assert_array_equal(ia, ib)
    g = r.normal(size=ya.shape).astype(dtype)
    np.testing.assert_array_equal(_npkernels.maxpool_backward(g, ia, x.shape, k, k, s, s),
                                  cy.maxpool_backward(g, ib, x.shape, k, k, s, s))
    up = r.normal(size=(n, c, h, w)).astype(dtype)
    np.testing.assert_array_equal(_npkernels.upsample2x(up), cy.upsample2x(up))
    g2 = r.normal(size=(n, c, 2 * h, 2 * w)).astype(dtype)
    np.testing.assert_array_equal(_npkernels.upsample2x_backward(g2), cy.upsample2x_backward(g2))


def test_backend_switch_roundtrip():
    before = kernels.BACKEND
    try:
        assert kernels.use("numpy").NAME == "numpy"
        assert kernels.BACKEND == "numpy"
    finally:
        kernels.use(before)
    assert kernels.BACKEND == before


# -- independent framework oracle ----------------------------------------------

def test_against_torch(rng):
    torch = pytest.importorskip("torch")
    F = torch.nn.functional
    x = rng.normal(size=(2, 3, 10, 10))
    w = rng.normal(size=(4, 3, 3, 3))
    b = rng.normal(size=4)
    g = rng.normal(size=(2, 4, 5, 5))
    tx = torch.tensor(x, requires_grad=True)
    tw = torch.tensor(w, requires_grad=True)
    tb = torch.tensor(b, requires_grad=True)
    ty = F.conv2d(tx, tw, tb, stride=2, padding=1)
    (ty * torch.tensor(g)).sum().backward()
    X, W, B = (Tensor(v, requires_grad=True) for v in (x, w, b))
    with Tape() as tape:
        y = conv2d(X, W, B, stride=2, padding=1)
        tape.backward(tsum(mul(y, Tensor(g))))
    np.testing.assert_allclose(y.data, ty.detach().numpy(), rtol=1e-10, atol=1e-10)
    for mine, ref in ((X, tx), (W, tw), (B, tb)):
        np.testing.assert_allclose(mine.grad, ref.grad.numpy(), rtol=1e-10, atol=1e-10)

    z = rng.normal(size=(2, 3, 9, 9))
    tz = torch.tensor(z, requires_grad=True)
    tp = F.max_pool2d(tz, 3, 2, 1)
    gp = rng.normal(size=tuple(tp.shape))
    (tp * torch.tensor(gp)).sum().backward()
    Z = Tensor(z, requires_grad=True)
    with Tape() as tape:
        p = maxpool2d(Z, 3, 2, 1)
        tape.backward(tsum(mul(p, Tensor(gp))))
    np.testing.assert_array_equal(p.data, tp.detach().numpy())
    np.testing.assert_allclose(Z.grad, tz.grad.numpy(), rtol=1e-12, atol=1e-12)

    bn_in = rng.normal(2, 3, size=(3, 2, 4, 4))
    tbn = torch.tensor(bn_in, requires_grad=True)
    gamma = torch.tensor([1.5, -0.5], dtype=torch.float64, requires_grad=True)
    beta = torch.tensor([0.2, 0.1], dtype=torch.float64, requires_grad=True)
    rm, rv = torch.zeros(2, dtype=torch.float64), torch.ones(2, dtype=torch.float64)
    tout = F.batch_norm(tbn, rm, rv, gamma, beta, training=True, momentum=0.1, eps=1e-5)
    gb = rng.normal(size=bn_in.shape)
    (tout * torch.tensor(gb)).sum().backward()
    state = BatchNormState(2, dtype=np.float64)
    state.gamma.data[...] = [1.5, -0.5]
    state.beta.data[...] = [0.2, 0.1]
    BN = Tensor(bn_in, requires_grad=True)
    with Tape() as tape:
        out = batchnorm2d(BN, state, training=True)
        tape.backward(tsum(mul(out, Tensor(gb))))
    np.testing.assert_allclose(out.data, tout.detach().numpy(), rtol=1e-10, atol=1e-10)
    np.testing.assert_allclose(BN.grad, tbn.grad.numpy(), rtol=1e-9, atol=1e-10)
    np.testing.assert_allclose(state.gamma.grad, gamma.grad.numpy(), rtol=1e-9)
    np.testing.assert_allclose(state.running_mean, rm.numpy(), rtol=1e-12)
    np.testing.assert_allclose(state.running_var, rv.numpy(), rtol=1e-12)
