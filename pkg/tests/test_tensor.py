import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from dsraseg.gradcheck import NondeterminismError, gradcheck
from dsraseg.ops import bilinear_resize, conv2d, softmax_channels
from dsraseg.tensor import (
    Tape,
    TapeError,
    Tensor,
    add,
    concat_channels,
    mul,
    relu,
    scale,
    sigmoid,
    sub,
    tmean,
    tsum,
)


def naive_conv(x, w, b, stride, pad):
    n, cin, h, wd = x.shape
    cout, _, kh, kw = w.shape
    xp = np.zeros((n, cin, h + 2 * pad, wd + 2 * pad))
    xp[:, :, pad:pad + h, pad:pad + wd] = x
    oh = (h + 2 * pad - kh) // stride + 1
    ow = (wd + 2 * pad - kw) // stride + 1
    out = np.zeros((n, cout, oh, ow))
    for i in range(n):
        for o in range(cout):
            for y in range(oh):
                for xx in range(ow):
                    acc = b[o]
                    for c in range(cin):
                        for u in range(kh):
                            for v in range(kw):
                                acc += xp[i, c, y * stride + u, xx * stride + v] * w[o, c, u, v]
                    out[i, o, y, xx] = acc
    return out


def bilinear_pixel(img, oy, ox, out_h, out_w):
    h, w = img.shape
    sy = min(max((oy + 0.5) * h / out_h - 0.5, 0.0), h - 1)
    sx = min(max((ox + 0.5) * w / out_w - 0.5, 0.0), w - 1)
    y0, x0 = int(math.floor(sy)), int(math.floor(sx))
    y1, x1 = min(y0 + 1, h - 1), min(x0 + 1, w - 1)
    fy, fx = sy - y0, sx - x0
    return ((1 - fy) * (1 - fx) * img[y0, x0] + (1 - fy) * fx * img[y0, x1]
            + fy * (1 - fx) * img[y1, x0] + fy * fx * img[y1, x1])


# --- conv2d -----------------------------------------------------------------


def test_conv_ones_center():
    out = conv2d(Tensor(np.ones((1, 1, 3, 3))), Tensor(np.ones((1, 1, 3, 3))), Tensor(np.zeros(1)), padding=1)
    assert out.data[0, 0, 1, 1] == 9.0


def test_conv_identity_kernel():
    x = np.random.default_rng(0).normal(size=(2, 1, 5, 6))
    k = np.zeros((1, 1, 3, 3))
    k[0, 0, 1, 1] = 1.0
    assert np.array_equal(conv2d(Tensor(x), Tensor(k), padding=1).data, x)


def test_conv_matches_naive_oracle():
    rng = np.random.default_rng(1)
    x, w, b = rng.normal(size=(1, 2, 4, 4)), rng.normal(size=(3, 2, 3, 3)), rng.normal(size=3)
    out = conv2d(Tensor(x), Tensor(w), Tensor(b), padding=1)
    np.testing.assert_allclose(out.data, naive_conv(x, w, b, 1, 1), rtol=0, atol=1e-12)


@pytest.mark.parametrize("n,cin,cout,h,w,k,stride,pad", [
    (2, 4, 3, 8, 8, 3, 1, 1),
    (2, 4, 2, 8, 8, 3, 2, 1),
    (1, 3, 5, 7, 6, 1, 1, 0),
    (2, 2, 2, 8, 7, 5, 2, 2),
    (1, 1, 1, 3, 3, 3, 1, 0),
])
def test_conv_oracle_shapes(n, cin, cout, h, w, k, stride, pad):
    rng = np.random.default_rng(n * 100 + cin * 10 + k)
    x, wt, b = rng.normal(size=(n, cin, h, w)), rng.normal(size=(cout, cin, k, k)), rng.normal(size=cout)
    out = conv2d(Tensor(x), Tensor(wt), Tensor(b), stride=stride, padding=pad)
    np.testing.assert_allclose(out.data, naive_conv(x, wt, b, stride, pad), rtol=0, atol=1e-12)


def test_conv_errors():
    with pytest.raises(ValueError, match="channel mismatch"):
        conv2d(Tensor(np.zeros((1, 2, 4, 4))), Tensor(np.zeros((1, 3, 3, 3))))
    with pytest.raises(ValueError, match="not positive"):
        conv2d(Tensor(np.zeros((1, 1, 2, 2))), Tensor(np.zeros((1, 1, 3, 3))))
    with pytest.raises(ValueError, match="odd"):
        conv2d(Tensor(np.zeros((1, 1, 4, 4))), Tensor(np.zeros((1, 1, 2, 2))))


# --- bilinear ---------------------------------------------------------------


def test_bilinear_identity_bitwise():
    x = np.random.default_rng(2).normal(size=(2, 3, 5, 7))
    x[0, 0, 0, 0] = -0.0
    out = bilinear_resize(Tensor(x), 5, 7).data
    assert out.tobytes() == x.tobytes()


def test_bilinear_constant_upscale():
    out = bilinear_resize(Tensor(np.full((1, 2, 3, 5), 0.1)), 6, 10).data
    assert np.all(out == 0.1)


def test_bilinear_checkerboard_matches_formula():
    img = np.array([[0.0, 1.0], [1.0, 0.0]])
    out = bilinear_resize(Tensor(img[None, None]), 4, 4).data[0, 0]
    expected = np.array([[bilinear_pixel(img, y, x, 4, 4) for x in range(4)] for y in range(4)])
    np.testing.assert_allclose(out, expected, rtol=0, atol=1e-15)
    # corners clamp to source pixels; first interior sample sits a quarter of the way across
    assert out[0, 0] == 0.0 and out[0, 3] == 1.0
    np.testing.assert_allclose(out[0, 1], 0.25)


def test_bilinear_random_matches_formula_down_and_up():
    rng = np.random.default_rng(3)
    img = rng.normal(size=(5, 7))
    for oh, ow in ((3, 4), (11, 9), (5, 2)):
        out = bilinear_resize(Tensor(img[None, None]), oh, ow).data[0, 0]
        expected = np.array([[bilinear_pixel(img, y, x, oh, ow) for x in range(ow)] for y in range(oh)])
        np.testing.assert_allclose(out, expected, rtol=0, atol=1e-12)


def test_bilinear_bad_extent():
    with pytest.raises(ValueError):
        bilinear_resize(Tensor(np.zeros((1, 1, 2, 2))), 0, 3)


@settings(max_examples=40, deadline=None)
@given(st.floats(-1e6, 1e6, allow_nan=False), st.integers(1, 6), st.integers(1, 6),
       st.integers(1, 13), st.integers(1, 13))
def test_bilinear_preserves_constants(c, h, w, oh, ow):
    out = bilinear_resize(Tensor(np.full((1, 1, h, w), c)), oh, ow).data
    assert np.all(out == c)


# --- softmax ----------------------------------------------------------------


def test_softmax_symmetric():
    out = softmax_channels(Tensor(np.zeros((1, 3, 2, 2)))).data
    np.testing.assert_allclose(out, 1 / 3, rtol=0, atol=1e-15)


def test_softmax_two_channels():
    x = np.zeros((1, 2, 1, 1))
    x[0, 0] = 2.0
    out = softmax_channels(Tensor(x)).data[0, :, 0, 0]
    e2 = math.exp(2.0)
    np.testing.assert_allclose(out, [e2 / (e2 + 1), 1 / (e2 + 1)], rtol=1e-14)
    np.testing.assert_allclose(out, [0.8808, 0.1192], atol=5e-5)


def test_softmax_shift_invariant():
    x = np.random.default_rng(4).normal(size=(2, 4, 3, 3))
    a = softmax_channels(Tensor(x)).data
    b = softmax_channels(Tensor(x + 10.0)).data
    np.testing.assert_allclose(a, b, rtol=0, atol=1e-15)


def test_softmax_sums_to_one_and_open_interval():
    x = np.random.default_rng(5).uniform(-30, 30, size=(3, 5, 6, 6))
    y = softmax_channels(Tensor(x)).data
    assert np.abs(y.sum(axis=1) - 1.0).max() <= 1e-12
    assert y.min() > 0 and y.max() < 1


def test_softmax_spatial_axis():
    y = softmax_channels(Tensor(np.random.default_rng(6).normal(size=(1, 2, 3, 4))), axis="spatial").data
    np.testing.assert_allclose(y.sum(axis=(2, 3)), 1.0, atol=1e-12)


# --- elementwise and tape -----------------------------------------------------


def test_elementwise_trivial():
    x = Tensor(np.random.default_rng(7).normal(size=(2, 3, 4, 4)))
    z = Tensor(np.zeros(x.shape))
    assert np.all(mul(x, z).data == 0)
    assert np.array_equal(add(x, z).data, x.data)
    assert sigmoid(Tensor(np.zeros(1))).data[0] == 0.5


def test_batch_broadcast_only():
    a = Tensor(np.ones((4, 2, 3, 3)))
    b = Tensor(np.full((1, 2, 3, 3), 2.0))
    assert add(a, b).shape == (4, 2, 3, 3)
    with pytest.raises(ValueError, match="shape mismatch"):
        add(a, Tensor(np.ones((4, 1, 3, 3))))
    with pytest.raises(ValueError):
        concat_channels([a, Tensor(np.ones((4, 2, 2, 3)))])


def test_backward_sum_is_ones():
    x = Tensor(np.random.default_rng(8).normal(size=(2, 3)), requires_grad=True)
    with Tape() as tape:
        loss = tsum(x)
    tape.backward(loss)
    assert np.array_equal(x.grad, np.ones((2, 3)))


def test_backward_square_is_2x():
    x = Tensor(np.random.default_rng(9).normal(size=(3, 4)), requires_grad=True)
    with Tape() as tape:
        loss = tsum(mul(x, x))
    tape.backward(loss)
    np.testing.assert_allclose(x.grad, 2 * x.data, rtol=1e-15)


def test_backward_twice_is_error():
    x = Tensor(np.ones(3), requires_grad=True)
    with Tape() as tape:
        loss = tsum(x)
    tape.backward(loss)
    with pytest.raises(TapeError):
        tape.backward(loss)


def test_backward_non_scalar_is_error():
    x = Tensor(np.ones(3), requires_grad=True)
    with Tape() as tape:
        y = scale(x, 2.0)
    with pytest.raises(ValueError, match="scalar"):
        tape.backward(y)


def test_tape_replays_in_reverse_order():
    order = []
    x = Tensor(np.ones(2), requires_grad=True)
    with Tape() as tape:
        a = scale(x, 2.0)
        b = scale(a, 3.0)
        c = tsum(b)
    ops = [rec.out for rec in tape.records]
    assert ops == [a, b, c]
    for rec in tape.records:
        fn = rec.fn
        rec.fn = (lambda f, o: (lambda g: (order.append(o), f(g))[1]))(fn, rec.out)
    tape.backward(c)
    assert order == [c, b, a]
    np.testing.assert_array_equal(x.grad, [6.0, 6.0])


def test_no_tape_records_nothing():
    x = Tensor(np.ones(2), requires_grad=True)
    y = scale(x, 2.0)
    assert y._tape is None and not y.requires_grad


def test_reused_tensor_accumulates():
    x = Tensor(np.array([1.0, -2.0]), requires_grad=True)
    with Tape() as tape:
        y = add(x, x)
        loss = tsum(mul(y, x))  # 2 x^2
    tape.backward(loss)
    np.testing.assert_allclose(x.grad, 4 * x.data)


# --- gradients vs finite differences ---------------------------------------------


def _rand(shape, seed):
    return Tensor(np.random.default_rng(seed).uniform(-2, 2, size=shape))


@pytest.mark.parametrize("name,fn,shapes", [
    ("add", lambda a, b: add(a, b), [(2, 3, 4, 4), (2, 3, 4, 4)]),
    ("add_bcast", lambda a, b: add(a, b), [(3, 2, 3, 3), (1, 2, 3, 3)]),
    ("sub", lambda a, b: sub(a, b), [(2, 3, 4, 4), (2, 3, 4, 4)]),
    ("mul", lambda a, b: mul(a, b), [(2, 3, 4, 4), (1, 3, 4, 4)]),
    ("scale", lambda a: scale(a, -1.7), [(2, 3, 4, 4)]),
    ("relu", lambda a: relu(a), [(2, 3, 4, 4)]),
    ("sigmoid", lambda a: sigmoid(a), [(2, 3, 4, 4)]),
    ("concat", lambda a, b: concat_channels([a, b]), [(2, 1, 3, 3), (2, 3, 3, 3)]),
    ("sum", lambda a: tsum(a), [(2, 3)]),
    ("mean", lambda a: tmean(a), [(2, 3)]),
    ("softmax", lambda a: softmax_channels(a), [(2, 4, 3, 3)]),
    ("softmax_spatial", lambda a: softmax_channels(a, axis="spatial"), [(2, 2, 3, 3)]),
    ("resize_up", lambda a: bilinear_resize(a, 7, 7), [(1, 2, 3, 3)]),
    ("resize_down", lambda a: bilinear_resize(a, 3, 2), [(2, 1, 7, 5)]),
    ("resize_mixed", lambda a: bilinear_resize(a, 2, 9), [(1, 2, 5, 4)]),
    ("conv", lambda x, w, b: conv2d(x, w, b, padding=1), [(2, 3, 5, 5), (4, 3, 3, 3), (4,)]),
    ("conv_s2", lambda x, w, b: conv2d(x, w, b, stride=2, padding=1), [(2, 2, 6, 6), (3, 2, 3, 3), (3,)]),
    ("conv1x1", lambda x, w, b: conv2d(x, w, b), [(2, 3, 4, 4), (2, 3, 1, 1), (2,)]),
    ("conv_softmax", lambda x, w: softmax_channels(conv2d(x, w, padding=1)), [(1, 2, 5, 5), (3, 2, 3, 3)]),
])
def test_op_gradcheck(name, fn, shapes):
    inputs = [_rand(s, i + 10) for i, s in enumerate(shapes)]
    report = gradcheck(fn, inputs)
    assert report.max_rel_error < 1e-4, (name, report)


def test_gradcheck_identity_is_exact():
    report = gradcheck(lambda a: a, [_rand((2, 3), 0)])
    assert report.max_rel_error < 1e-9


def test_gradcheck_detects_nondeterminism():
    rng = np.random.default_rng(0)
    with pytest.raises(NondeterminismError):
        gradcheck(lambda a: scale(a, rng.random()), [_rand((2,), 0)])


def test_gradcheck_restores_inputs():
    x = _rand((2, 3), 1)
    before = x.data.copy()
    gradcheck(lambda a: sigmoid(a), [x])
    assert np.array_equal(x.data, before) and not x.requires_grad and x.grad is None
