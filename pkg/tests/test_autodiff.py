"""Tensor-core tests: forward oracles, VJP finite-difference checks, invariants."""

import numpy as np
import pytest

from convmotion import autodiff as ad
from convmotion.autodiff import (
    GradCheckSetupError,
    GradTape,
    ShapeError,
    Tensor,
    backward,
    clip,
    concat,
    conv2d,
    dropout,
    grad_check,
    leaky_relu,
    linear,
    matmul,
    mul,
    reshape,
    sigmoid,
    square,
    stack,
    sumsq,
    tlog,
    tmean,
    tsum,
)

# ---------------------------------------------------------------------------
# Independent oracles (written before the operations they check)
# ---------------------------------------------------------------------------


def conv2d_oracle(x, k, b, stride, padding):
    """Direct quadruple-nested-loop convolution; deliberately naive."""
    N, Cin, H, W = x.shape
    Cout, _, kH, kW = k.shape
    sH, sW = stride
    pH, pW = padding
    xp = np.zeros((N, Cin, H + 2 * pH, W + 2 * pW))
    xp[:, :, pH:pH + H, pW:pW + W] = x
    Ho = (H + 2 * pH - kH) // sH + 1
    Wo = (W + 2 * pW - kW) // sW + 1
    out = np.zeros((N, Cout, Ho, Wo))
    for n in range(N):
        for co in range(Cout):
            for i in range(Ho):
                for j in range(Wo):
                    acc = b[co]
                    for ci in range(Cin):
                        for u in range(kH):
                            for v in range(kW):
                                acc += xp[n, ci, i * sH + u, j * sW + v] * k[co, ci, u, v]
                    out[n, co, i, j] = acc
    return out


def linear_oracle(x, w, b):
    """Per-element dot products, no matrix machinery."""
    N, Din = x.shape
    Dout = w.shape[0]
    out = np.zeros((N, Dout))
    for n in range(N):
        for o in range(Dout):
            acc = b[o]
            for i in range(Din):
                acc += x[n, i] * w[o, i]
            out[n, o] = acc
    return out


def central_diff(f, arr, idx, h=1e-5):
    flat = arr.reshape(-1)
    orig = flat[idx]
    flat[idx] = orig + h
    fp = f()
    flat[idx] = orig - h
    fm = f()
    flat[idx] = orig
    return (fp - fm) / (2.0 * h)


def check_vjp(build_loss, params, h=1e-5, tol=1e-4):
    """Full elementwise FD check of a scalar-valued tensor expression."""
    with GradTape() as tape:
        loss = build_loss()
    grads = backward(loss, tape)
    for p in params:
        g = grads.get(p, np.zeros_like(p.data))
        for idx in range(p.data.size):
            num = central_diff(lambda: build_loss().item(), p.data, idx, h)
            a = float(g.reshape(-1)[idx])
            assert ad.relative_error(a, num) < tol, (
                f"param shape {p.data.shape} idx {idx}: analytic {a} vs numeric {num}"
            )


# ---------------------------------------------------------------------------
# conv2d
# ---------------------------------------------------------------------------


def test_conv2d_zero_input_gives_bias():
    rng = np.random.default_rng(0)
    x = Tensor(np.zeros((2, 3, 6, 8)))
    k = Tensor(rng.normal(size=(4, 3, 2, 3)))
    b = Tensor(np.array([0.5, -1.0, 2.0, 0.0]))
    out = conv2d(x, k, b, stride=(1, 1), padding=(0, 0))
    for co in range(4):
        assert np.all(out.data[:, co] == b.data[co])


def test_conv2d_ones_counting():
    x = Tensor(np.ones((1, 1, 3, 3)))
    k = Tensor(np.ones((1, 1, 2, 2)))
    b = Tensor(np.zeros(1))
    out = conv2d(x, k, b, stride=(1, 1), padding=(0, 0))
    assert out.data.shape == (1, 1, 2, 2)
    np.testing.assert_array_equal(out.data, np.full((1, 1, 2, 2), 4.0))


def test_conv2d_strided_rect_kernel_vs_oracle():
    rng = np.random.default_rng(1)
    x = rng.normal(size=(1, 1, 5, 9))
    k = rng.normal(size=(2, 1, 2, 7))
    b = rng.normal(size=2)
    out = conv2d(Tensor(x), Tensor(k), Tensor(b), stride=(2, 2), padding=(0, 0))
    expected = conv2d_oracle(x, k, b, (2, 2), (0, 0))
    assert out.data.shape == (1, 2, 2, 2)
    np.testing.assert_allclose(out.data, expected, atol=1e-12, rtol=0)


@pytest.mark.parametrize("seed", range(12))
def test_conv2d_randomized_vs_oracle(seed):
    rng = np.random.default_rng(seed)
    N = int(rng.integers(1, 3))
    Cin = int(rng.integers(1, 4))
    Cout = int(rng.integers(1, 4))
    kH = int(rng.integers(1, 4))
    kW = int(rng.integers(1, 8))
    sH, sW = int(rng.integers(1, 3)), int(rng.integers(1, 3))
    pH, pW = int(rng.integers(0, 3)), int(rng.integers(0, 4))
    H = int(rng.integers(max(1, kH - 2 * pH), 9))
    W = int(rng.integers(max(1, kW - 2 * pW), 13))
    if kH > H + 2 * pH or kW > W + 2 * pW:
        pytest.skip("degenerate draw")
    x = rng.normal(size=(N, Cin, H, W))
    k = rng.normal(size=(Cout, Cin, kH, kW))
    b = rng.normal(size=Cout)
    out = conv2d(Tensor(x), Tensor(k), Tensor(b), stride=(sH, sW), padding=(pH, pW))
    expected = conv2d_oracle(x, k, b, (sH, sW), (pH, pW))
    np.testing.assert_allclose(out.data, expected, atol=1e-12, rtol=0)


def test_conv2d_channel_mismatch_rejected():
    x = Tensor(np.zeros((1, 3, 4, 4)))
    k = Tensor(np.zeros((2, 2, 2, 2)))
    b = Tensor(np.zeros(2))
    with pytest.raises(ShapeError, match="channels"):
        conv2d(x, k, b)


def test_conv2d_kernel_larger_than_padded_input_rejected():
    x = Tensor(np.zeros((1, 1, 2, 2)))
    k = Tensor(np.zeros((1, 1, 5, 1)))
    b = Tensor(np.zeros(1))
    with pytest.raises(ShapeError):
        conv2d(x, k, b, stride=(1, 1), padding=(1, 0))


def test_conv2d_gradients_match_finite_differences():
    rng = np.random.default_rng(7)
    x = Tensor(rng.normal(size=(2, 2, 5, 6)), requires_grad=True)
    k = Tensor(rng.normal(size=(3, 2, 2, 3)), requires_grad=True)
    b = Tensor(rng.normal(size=3), requires_grad=True)
    tgt = rng.normal(size=(2, 3, 3, 3))

    def build():
        out = conv2d(x, k, b, stride=(2, 2), padding=(1, 1))
        return tsum(square(ad.sub(out, Tensor(tgt))))

    check_vjp(build, [x, k, b])


# ---------------------------------------------------------------------------
# linear
# ---------------------------------------------------------------------------


def test_linear_identity_weight():
    x = Tensor(np.arange(6, dtype=float).reshape(2, 3))
    w = Tensor(np.eye(3))
    b = Tensor(np.zeros(3))
    np.testing.assert_array_equal(linear(x, w, b).data, x.data)


def test_linear_zero_input_gives_bias():
    x = Tensor(np.zeros((4, 3)))
    w = Tensor(np.random.default_rng(3).normal(size=(5, 3)))
    b = Tensor(np.array([1.0, -2.0, 0.25, 3.0, 0.0]))
    out = linear(x, w, b)
    for n in range(4):
        np.testing.assert_array_equal(out.data[n], b.data)


def test_linear_vs_dot_product_oracle():
    rng = np.random.default_rng(4)
    x = rng.normal(size=(2, 3))
    w = rng.normal(size=(4, 3))
    b = rng.normal(size=4)
    out = linear(Tensor(x), Tensor(w), Tensor(b))
    np.testing.assert_allclose(out.data, linear_oracle(x, w, b), atol=1e-12, rtol=0)


def test_linear_shape_mismatch_rejected():
    with pytest.raises(ShapeError):
        linear(Tensor(np.zeros((2, 3))), Tensor(np.zeros((4, 5))), Tensor(np.zeros(4)))


# ---------------------------------------------------------------------------
# leaky ReLU / dropout
# ---------------------------------------------------------------------------


def test_leaky_relu_values():
    x = Tensor(np.array([-1.0, 2.0, 0.0]))
    out = leaky_relu(x, slope=0.2)
    np.testing.assert_allclose(out.data, [-0.2, 2.0, 0.0], atol=0, rtol=0)


def test_leaky_relu_gradient_finite_differences():
    x = Tensor(np.array([-1.0, 2.0]), requires_grad=True)

    def build():
        return tsum(leaky_relu(x, slope=0.2))

    with GradTape() as tape:
        loss = build()
    g = backward(loss, tape)[x]
    np.testing.assert_allclose(g, [0.2, 1.0])
    for idx in range(2):
        num = central_diff(lambda: build().item(), x.data, idx, h=1e-5)
        assert abs(g[idx] - num) < 1e-9


def test_leaky_relu_slope_validated():
    with pytest.raises(ValueError):
        leaky_relu(Tensor(np.zeros(3)), slope=1.5)


def test_dropout_eval_is_identity():
    x = Tensor(np.random.default_rng(0).normal(size=(5, 5)))
    out = dropout(x, 0.9, mode="eval")
    assert out is x


def test_dropout_p_zero_is_identity():
    x = Tensor(np.ones((3, 3)))
    out = dropout(x, 0.0, mode="train", rng=np.random.default_rng(0))
    assert out is x


def test_dropout_large_sample_statistics():
    rng = np.random.default_rng(11)
    x = Tensor(np.ones(10 ** 6))
    out = dropout(x, 0.5, mode="train", rng=rng)
    zero_frac = np.mean(out.data == 0.0)
    assert abs(out.data.mean() - 1.0) < 0.01
    assert abs(zero_frac - 0.5) < 0.01
    # survivors carry the inverted-dropout scale
    assert np.all(np.isin(out.data, [0.0, 2.0]))


def test_dropout_gradient_uses_same_mask():
    x = Tensor(np.ones(100), requires_grad=True)
    with GradTape() as tape:
        out = dropout(x, 0.5, mode="train", rng=np.random.default_rng(5))
        loss = tsum(out)
    g = backward(loss, tape)[x]
    np.testing.assert_array_equal(g, np.where(out.data != 0, 2.0, 0.0))


# ---------------------------------------------------------------------------
# backward mechanics
# ---------------------------------------------------------------------------


def test_backward_of_sum_is_ones():
    w = Tensor(np.random.default_rng(0).normal(size=(3, 4, 2)), requires_grad=True)
    with GradTape() as tape:
        loss = tsum(w)
    np.testing.assert_array_equal(backward(loss, tape)[w], np.ones((3, 4, 2)))


def test_backward_rejects_non_scalar():
    w = Tensor(np.zeros((2, 2)), requires_grad=True)
    with GradTape() as tape:
        out = mul(w, 2.0)
    with pytest.raises(ValueError, match="scalar"):
        backward(out, tape)


def test_least_squares_closed_form_gradient():
    rng = np.random.default_rng(9)
    X = rng.normal(size=(6, 3))
    Y = rng.normal(size=(6, 2))
    W = Tensor(rng.normal(size=(3, 2)), requires_grad=True)
    N = X.shape[0]
    with GradTape() as tape:
        pred = matmul(Tensor(X), W)
        loss = mul(tsum(square(ad.sub(pred, Tensor(Y)))), 1.0 / N)
    g = backward(loss, tape)[W]
    closed_form = 2.0 * X.T @ (X @ W.data - Y) / N
    np.testing.assert_allclose(g, closed_form, atol=1e-12)


def test_gradient_accumulates_over_reuse():
    x = Tensor(np.array([3.0]), requires_grad=True)
    with GradTape() as tape:
        loss = tsum(mul(x, x))  # x reused as both operands
    np.testing.assert_allclose(backward(loss, tape)[x], [6.0])


def test_backward_deterministic_bit_identical():
    def run():
        rng = np.random.default_rng(42)
        x = Tensor(rng.normal(size=(2, 1, 8, 6)), requires_grad=True)
        k = Tensor(rng.normal(size=(3, 1, 2, 3)), requires_grad=True)
        b = Tensor(rng.normal(size=3), requires_grad=True)
        with GradTape() as tape:
            h = leaky_relu(conv2d(x, k, b, stride=(2, 2), padding=(1, 1)))
            h = dropout(h, 0.5, mode="train", rng=np.random.default_rng(7))
            loss = tsum(square(h))
        grads = backward(loss, tape)
        return [grads[t].copy() for t in (x, k, b)]

    a, b_ = run(), run()
    for ga, gb in zip(a, b_):
        assert np.array_equal(ga, gb)


# ---------------------------------------------------------------------------
# remaining primitives: values and VJPs
# ---------------------------------------------------------------------------


def test_elementwise_shape_mismatch_rejected():
    a = Tensor(np.zeros((2, 3)))
    b = Tensor(np.zeros((3, 2)))
    for op in (ad.add, ad.sub, mul):
        with pytest.raises(ShapeError):
            op(a, b)


def test_no_silent_broadcasting():
    a = Tensor(np.zeros((2, 3)))
    b = Tensor(np.zeros((3,)))
    with pytest.raises(ShapeError):
        ad.add(a, b)


@pytest.mark.parametrize("seed", range(20))
def test_primitive_vjps_match_finite_differences(seed):
    rng = np.random.default_rng(seed)
    a = Tensor(rng.uniform(0.3, 2.0, size=(3, 4)), requires_grad=True)
    b = Tensor(rng.uniform(0.3, 2.0, size=(3, 4)), requires_grad=True)

    cases = {
        "add": lambda: tsum(square(ad.add(a, b))),
        "sub": lambda: tsum(square(ad.sub(a, b))),
        "mul": lambda: tsum(mul(a, b)),
        "scale": lambda: tsum(mul(a, 3.5)),
        "square": lambda: tsum(square(a)),
        "sumsq": lambda: sumsq(a),
        "mean": lambda: tmean(mul(a, b)),
        "sigmoid": lambda: tsum(sigmoid(a)),
        "log": lambda: tsum(tlog(a)),
        "clip": lambda: tsum(clip(a, 0.5, 1.5)),
        "reshape": lambda: tsum(square(reshape(a, (4, 3)))),
        "concat": lambda: tsum(square(concat([a, b], axis=1))),
        "stack": lambda: tsum(square(stack([a, b], axis=0))),
        "slice": lambda: tsum(square(a[1:, :2])),
        "leaky_relu": lambda: tsum(leaky_relu(ad.sub(a, b), slope=0.2)),
    }
    for name, build in cases.items():
        check_vjp(build, [a, b], tol=1e-4)


def test_clip_values():
    x = Tensor(np.array([-1.0, 0.5, 2.0]))
    np.testing.assert_array_equal(clip(x, 0.0, 1.0).data, [0.0, 0.5, 1.0])


def test_sigmoid_extreme_inputs_stay_finite():
    x = Tensor(np.array([-800.0, 800.0]))
    out = sigmoid(x)
    assert np.all(np.isfinite(out.data))
    np.testing.assert_allclose(out.data, [0.0, 1.0], atol=1e-12)


def test_tape_records_in_execution_order_and_replays_reversed():
    x = Tensor(np.array([2.0]), requires_grad=True)
    with GradTape() as tape:
        y = mul(x, 3.0)
        z = square(y)
        loss = tsum(z)
    outputs = [node.output for node in tape._nodes]
    assert outputs == [y, z, loss]
    g = backward(loss, tape)[x]
    np.testing.assert_allclose(g, [36.0])  # d/dx (3x)^2 = 18x


def test_values_finite_after_forward_backward():
    rng = np.random.default_rng(3)
    x = Tensor(rng.normal(size=(2, 1, 10, 8)), requires_grad=True)
    k = Tensor(rng.normal(size=(4, 1, 2, 7)), requires_grad=True)
    b = Tensor(rng.normal(size=4), requires_grad=True)
    with GradTape() as tape:
        h = leaky_relu(conv2d(x, k, b, stride=(2, 2), padding=(1, 3)))
        h = reshape(h, (2, -1))
        loss = tmean(square(h))
    assert np.isfinite(loss.item())
    for g in backward(loss, tape).values():
        assert np.all(np.isfinite(g))


# ---------------------------------------------------------------------------
# grad_check utility
# ---------------------------------------------------------------------------


def test_grad_check_polynomial():
    w = Tensor(np.array([3.0]), requires_grad=True)
    report = grad_check(lambda: tsum(square(w)), {"w": w}, h=1e-5, tol=1e-6)
    assert report.passed
    assert report.max_rel_err < 1e-8
    # analytic derivative of w^2 at 3 is 6
    with GradTape() as tape:
        loss = tsum(square(w))
    np.testing.assert_allclose(backward(loss, tape)[w], [6.0])


def test_grad_check_detects_nondeterminism():
    w = Tensor(np.ones(4), requires_grad=True)
    state = {"calls": 0}

    def f():
        state["calls"] += 1
        rng = np.random.default_rng(state["calls"])  # fresh mask every call
        return tsum(dropout(w, 0.5, mode="train", rng=rng))

    with pytest.raises(GradCheckSetupError):
        grad_check(f, {"w": w})


def test_grad_check_flags_wrong_gradient():
    # a loss whose tape gradient is deliberately broken via a stale constant
    w = Tensor(np.array([1.0, 2.0]), requires_grad=True)

    def f():
        return tsum(mul(w, w.detach()))  # tape sees only one factor

    report = grad_check(f, {"w": w}, tol=1e-4)
    assert not report.passed
