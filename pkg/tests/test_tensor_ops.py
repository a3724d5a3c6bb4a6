"""Autodiff engine and layer operations."""

import numpy as np
import pytest

from conftest import gradcheck, t64
from netrecast import ops
from netrecast.blocks import Block, basic, bottleneck, classifier, convolution, dense, transition
from netrecast.errors import DegenerateVarianceError, ShapeError, UsageError
from netrecast.tensor import Tensor, backward, no_grad


def conv_oracle(x, w, b, stride, padding):
    """Six nested loops, no vectorization."""
    bsz, cin, h, wd = x.shape
    cout, _, kh, kw = w.shape
    xp = np.zeros((bsz, cin, h + 2 * padding, wd + 2 * padding))
    xp[:, :, padding:padding + h, padding:padding + wd] = x
    ho = (h + 2 * padding - kh) // stride + 1
    wo = (wd + 2 * padding - kw) // stride + 1
    out = np.zeros((bsz, cout, ho, wo))
    for n in range(bsz):
        for o in range(cout):
            for i in range(ho):
                for j in range(wo):
                    acc = 0.0 if b is None else b[o]
                    for c in range(cin):
                        for u in range(kh):
                            for v in range(kw):
                                acc += xp[n, c, i * stride + u, j * stride + v] * w[o, c, u, v]
                    out[n, o, i, j] = acc
    return out


# ---------------------------------------------------------------------------
# conv2d
# ---------------------------------------------------------------------------

def test_conv_all_ones_sum():
    x = Tensor(np.ones((1, 1, 3, 3)))
    w = Tensor(np.ones((1, 1, 3, 3)))
    assert ops.conv2d(x, w).numpy().item() == 9.0


def test_conv_identity_kernel(rng):
    x = Tensor(rng.standard_normal((2, 1, 5, 5)))
    w = Tensor(np.ones((1, 1, 1, 1)))
    np.testing.assert_array_equal(ops.conv2d(x, w).numpy(), x.numpy())


def test_conv_matches_loop_oracle_stride2_pad1(rng):
    x = rng.standard_normal((2, 3, 8, 8))
    w = rng.standard_normal((4, 3, 3, 3))
    out = ops.conv2d(Tensor(x, dtype=np.float64), Tensor(w, dtype=np.float64), stride=2, padding=1).numpy()
    assert out.shape == (2, 4, 4, 4)
    np.testing.assert_allclose(out, conv_oracle(x, w, None, 2, 1), atol=1e-6, rtol=0)


@pytest.mark.parametrize(
    "shape,cout,k,stride,padding,bias",
    [
        ((1, 1, 4, 4), 1, 3, 1, 1, False),
        ((2, 2, 5, 7), 3, 3, 1, 0, True),
        ((3, 4, 9, 9), 2, 3, 2, 1, False),
        ((1, 3, 6, 6), 5, 1, 2, 0, True),
        ((2, 2, 7, 5), 2, 5, 2, 2, False),
        ((4, 8, 16, 16), 3, 3, 1, 1, True),
        ((1, 2, 6, 6), 2, 2, 2, 0, False),
    ],
)
def test_conv_oracle_shapes(rng, shape, cout, k, stride, padding, bias):
    x = rng.standard_normal(shape)
    w = rng.standard_normal((cout, shape[1], k, k))
    b = rng.standard_normal(cout) if bias else None
    bt = Tensor(b, dtype=np.float64) if bias else None
    out = ops.conv2d(Tensor(x, dtype=np.float64), Tensor(w, dtype=np.float64), bt, stride, padding).numpy()
    np.testing.assert_allclose(out, conv_oracle(x, w, b, stride, padding), atol=1e-6, rtol=0)


def test_conv_float32_matches_oracle(rng):
    x = rng.standard_normal((2, 3, 8, 8)).astype(np.float32)
    w = rng.standard_normal((4, 3, 3, 3)).astype(np.float32)
    out = ops.conv2d(Tensor(x), Tensor(w), padding=1).numpy()
    assert out.dtype == np.float32
    np.testing.assert_allclose(out, conv_oracle(x.astype(float), w.astype(float), None, 1, 1), atol=1e-4)


@pytest.mark.parametrize(
    "xshape,wshape,kw,match",
    [
        ((1, 3, 5, 5), (2, 4, 3, 3), {}, "Cin=3"),
        ((1, 1, 2, 2), (1, 1, 3, 3), {}, "smaller than kernel"),
        ((1, 3, 5), (2, 3, 3, 3), {}, "4-d"),
    ],
)
def test_conv_shape_errors(xshape, wshape, kw, match):
    with pytest.raises(ShapeError, match=match):
        ops.conv2d(Tensor(np.zeros(xshape)), Tensor(np.zeros(wshape)), **kw)


def test_conv_bias_mismatch():
    with pytest.raises(ShapeError, match="bias"):
        ops.conv2d(Tensor(np.zeros((1, 1, 3, 3))), Tensor(np.zeros((2, 1, 1, 1))), Tensor(np.zeros(3)))


# ---------------------------------------------------------------------------
# batch norm
# ---------------------------------------------------------------------------

def _bn(x, gamma=None, beta=None, training=True, rm=None, rv=None):
    c = x.shape[1]
    g = Tensor(np.ones(c) if gamma is None else gamma)
    b = Tensor(np.zeros(c) if beta is None else beta)
    rm = np.zeros(c) if rm is None else rm
    rv = np.ones(c) if rv is None else rv
    return ops.batchnorm2d(Tensor(x), g, b, rm, rv, training)


def test_bn_constant_input_gives_zeros():
    out = _bn(np.full((2, 3, 4, 4), 7.0)).numpy()
    np.testing.assert_allclose(out, 0.0, atol=1e-6)


def test_bn_affine_dominates(rng):
    out = _bn(rng.standard_normal((3, 2, 4, 4)), gamma=np.zeros(2), beta=np.full(2, 5.0)).numpy()
    np.testing.assert_array_equal(out, 5.0)


def test_bn_train_statistics(rng):
    x = 3.0 + 2.0 * rng.standard_normal((4, 2, 3, 3))
    out = _bn(x).numpy()
    m = out.mean(axis=(0, 2, 3))
    v = out.var(axis=(0, 2, 3))
    assert np.all(np.abs(m) < 1e-5)
    assert np.all(np.abs(v - 1) < 1e-3)


def test_bn_running_stats_ema_and_eval(rng):
    x = rng.standard_normal((4, 2, 3, 3)) * 2 + 1
    rm, rv = np.zeros(2), np.ones(2)
    _bn(x, rm=rm, rv=rv)
    n = 4 * 9
    exp_mean = 0.1 * x.mean(axis=(0, 2, 3))
    exp_var = 0.9 + 0.1 * x.var(axis=(0, 2, 3)) * n / (n - 1)
    np.testing.assert_allclose(rm, exp_mean, rtol=1e-10)
    np.testing.assert_allclose(rv, exp_var, rtol=1e-10)
    out = _bn(x, training=False, rm=rm, rv=rv).numpy()
    ref = (x - rm[None, :, None, None]) / np.sqrt(rv[None, :, None, None] + 1e-5)
    np.testing.assert_allclose(out, ref, rtol=1e-10)


def test_bn_degenerate_variance():
    with pytest.raises(DegenerateVarianceError):
        _bn(np.ones((1, 2, 1, 1)))
    _bn(np.ones((1, 2, 1, 1)), training=False)  # eval mode is fine


# ---------------------------------------------------------------------------
# elementwise, pooling, linear
# ---------------------------------------------------------------------------

def test_add_inverse(rng):
    x = rng.standard_normal((2, 3, 4, 4))
    np.testing.assert_array_equal(ops.add(Tensor(x), Tensor(-x)).numpy(), 0.0)


def test_concat_layout(rng):
    a = rng.standard_normal((1, 2, 4, 4))
    b = rng.standard_normal((1, 3, 4, 4))
    out = ops.concat_channels([Tensor(a), Tensor(b)]).numpy()
    assert out.shape == (1, 5, 4, 4)
    np.testing.assert_array_equal(out[:, :2], a)
    np.testing.assert_array_equal(out[:, 2:], b)


def test_concat_spatial_mismatch():
    with pytest.raises(ShapeError):
        ops.concat_channels([Tensor(np.zeros((1, 2, 4, 4))), Tensor(np.zeros((1, 2, 3, 4)))])


def test_maxpool_window():
    x = Tensor(np.array([[[[1.0, 2.0], [3.0, 4.0]]]]))
    assert ops.maxpool2d(x, 2, 2).numpy().item() == 4.0


def test_avgpool_and_gap(rng):
    x = rng.standard_normal((2, 3, 4, 4))
    avg = ops.avgpool2d(Tensor(x), 2).numpy()
    np.testing.assert_allclose(avg, x.reshape(2, 3, 2, 2, 2, 2).mean(axis=(3, 5)))
    np.testing.assert_allclose(ops.global_avgpool(Tensor(x)).numpy(), x.mean(axis=(2, 3)))


def test_linear_and_shape_error(rng):
    x, w, b = rng.standard_normal((3, 4)), rng.standard_normal((5, 4)), rng.standard_normal(5)
    np.testing.assert_allclose(ops.linear(Tensor(x), Tensor(w), Tensor(b)).numpy(), x @ w.T + b)
    with pytest.raises(ShapeError):
        ops.linear(Tensor(x), Tensor(rng.standard_normal((5, 3))), Tensor(b))


def test_cross_entropy_label_range():
    with pytest.raises(ShapeError):
        ops.cross_entropy(Tensor(np.zeros((2, 3))), np.array([0, 3]))


# ---------------------------------------------------------------------------
# backward contract
# ---------------------------------------------------------------------------

def test_backward_sum_gives_ones(rng):
    x = Tensor(rng.standard_normal((2, 3, 4)), requires_grad=True)
    backward(ops.sum(x))
    np.testing.assert_array_equal(x.grad, np.ones((2, 3, 4)))


def test_backward_non_scalar_is_usage_error(rng):
    x = Tensor(rng.standard_normal(3), requires_grad=True)
    with pytest.raises(UsageError):
        backward(ops.relu(x))


def test_backward_unrecorded_is_usage_error():
    with pytest.raises(UsageError):
        backward(Tensor(np.array(1.0)))
    x = Tensor(np.ones(2), requires_grad=True)
    with no_grad():
        y = ops.sum(x)
    with pytest.raises(UsageError):
        backward(y)


def test_tape_discarded_after_backward(rng):
    x = Tensor(rng.standard_normal(3), requires_grad=True)
    y = ops.sum(ops.mul(x, x))
    backward(y)
    with pytest.raises(UsageError):
        backward(y)


def test_grad_accumulates_over_reuse(rng):
    x = Tensor(rng.standard_normal(4), requires_grad=True)
    backward(ops.sum(ops.add(x, x)))
    np.testing.assert_array_equal(x.grad, 2.0)


def test_mse_conv_weight_grad_h1e4(rng):
    x = Tensor(rng.standard_normal((2, 2, 5, 5)), dtype=np.float64)
    w = t64(rng, 3, 2, 3, 3)
    target = Tensor(rng.standard_normal((2, 3, 5, 5)), dtype=np.float64)

    def loss():
        return ops.mse_loss(ops.conv2d(x, w, padding=1), target)

    backward(loss())
    g = w.grad.copy()
    num = np.zeros_like(w.data)
    for i in np.ndindex(w.shape):
        old = w.data[i]
        w.data[i] = old + 1e-4
        lp = float(loss().data)
        w.data[i] = old - 1e-4
        lm = float(loss().data)
        w.data[i] = old
        num[i] = (lp - lm) / 2e-4
    np.testing.assert_allclose(g, num, rtol=1e-3, atol=1e-8)


# ---------------------------------------------------------------------------
# finite-difference sweep: every op, many random cases
# ---------------------------------------------------------------------------

def _case(name, rng):
    """(build function, input tensors) for one random instance of op ``name``."""
    b = int(rng.integers(1, 3))
    c = int(rng.integers(1, 4))
    h = int(rng.integers(3, 6))
    if name == "add":
        return ops.add, [t64(rng, b, c, h), t64(rng, 1, c, 1)]
    if name == "sub":
        return ops.sub, [t64(rng, b, c, h), t64(rng, b, c, h)]
    if name == "mul":
        return ops.mul, [t64(rng, b, c, h), t64(rng, c, 1)]
    if name == "relu":
        return ops.relu, [t64(rng, b, c, h, h)]
    if name == "sum":
        return ops.sum, [t64(rng, b, c, h)]
    if name == "mean":
        return ops.mean, [t64(rng, b, c, h)]
    if name == "reshape":
        return (lambda x: ops.reshape(x, (b, -1))), [t64(rng, b, c, h, h)]
    if name == "concat":
        return (lambda x, y: ops.concat_channels([x, y])), [t64(rng, b, c, h, h), t64(rng, b, 2, h, h)]
    if name == "conv":
        k = int(rng.choice([1, 3]))
        s = int(rng.integers(1, 3))
        p = int(rng.integers(0, 2)) if k == 3 else 0
        return (lambda x, w, bb: ops.conv2d(x, w, bb, s, p)), [t64(rng, b, c, h + 2, h + 2), t64(rng, 2, c, k, k), t64(rng, 2)]
    if name == "bn_train":
        rm, rv = np.zeros(c), np.ones(c)
        return (lambda x, g, be: ops.batchnorm2d(x, g, be, rm.copy(), rv.copy(), True)), [
            t64(rng, 2, c, h, h), t64(rng, c), t64(rng, c)]
    if name == "bn_eval":
        rm, rv = rng.standard_normal(c), rng.uniform(0.5, 2.0, c)
        return (lambda x, g, be: ops.batchnorm2d(x, g, be, rm, rv, False)), [t64(rng, b, c, h, h), t64(rng, c), t64(rng, c)]
    if name == "maxpool":
        return (lambda x: ops.maxpool2d(x, 2)), [t64(rng, b, c, 2 * h, 2 * h)]
    if name == "avgpool":
        return (lambda x: ops.avgpool2d(x, 2)), [t64(rng, b, c, 2 * h, 2 * h)]
    if name == "gap":
        return ops.global_avgpool, [t64(rng, b, c, h, h)]
    if name == "linear":
        return ops.linear, [t64(rng, b, 4), t64(rng, 3, 4), t64(rng, 3)]
    if name == "mse":
        return ops.mse_loss, [t64(rng, b, c, h), t64(rng, b, c, h, grad=False)]
    if name == "cross_entropy":
        labels = rng.integers(0, 4, size=3)
        return (lambda z: ops.cross_entropy(z, labels)), [t64(rng, 3, 4)]
    raise KeyError(name)


OPS = ["add", "sub", "mul", "relu", "sum", "mean", "reshape", "concat", "conv", "bn_train", "bn_eval",
       "maxpool", "avgpool", "gap", "linear", "mse", "cross_entropy"]
SEEDS = range(6)


@pytest.mark.parametrize("seed", SEEDS)
@pytest.mark.parametrize("name", OPS)
def test_op_gradients_finite_difference(name, seed):
    rng = np.random.default_rng(1000 * OPS.index(name) + seed)
    build, inputs = _case(name, rng)
    gradcheck(build, inputs, rng)


BLOCKS = {
    "convolution": lambda: convolution(3, 4, 2),
    "convolution_pool": lambda: convolution(2, 3, 1, pool="max"),
    "basic": lambda: basic(4, 4),
    "basic_proj": lambda: basic(3, 4, 2),
    "bottleneck": lambda: bottleneck(4, 8, 1, mid=2),
    "dense": lambda: dense(3, 2, 2, bottleneck_width=2),
    "transition": lambda: transition(4, 2),
    "classifier": lambda: classifier(4, 3, (5,)),
}


@pytest.mark.parametrize("seed", range(3))
@pytest.mark.parametrize("kind", sorted(BLOCKS))
def test_block_gradients_finite_difference(kind, seed):
    rng = np.random.default_rng(77 + seed)
    spec = BLOCKS[kind]()
    blk = Block(spec, seed, ("gc",), dtype=np.float64)
    for name, t in blk.params:
        if name.endswith("gamma"):
            t.data = rng.uniform(0.5, 1.5, t.shape)
        elif name.endswith("beta") or name.endswith("bias"):
            t.data = 0.1 * rng.standard_normal(t.shape)
    x = t64(rng, 2, spec.in_channels, 6, 6)
    names = [n for n, _ in blk.params]
    tensors = [x] + [blk.params[n] for n in names]

    def build(x, *ps):
        return blk(x, True)

    gradcheck(build, tensors, rng)


def test_composed_conv_bn_relu_conv_shortcut(rng):
    """conv -> bn -> relu -> conv -> add(shortcut) on a 2x4x6x6 input."""
    x = t64(rng, 2, 4, 6, 6)
    w1, w2 = t64(rng, 4, 4, 3, 3, scale=0.3), t64(rng, 4, 4, 3, 3, scale=0.3)
    g, b = t64(rng, 4), t64(rng, 4)
    rm, rv = np.zeros(4), np.ones(4)

    def build(x, w1, w2, g, b):
        y = ops.relu(ops.batchnorm2d(ops.conv2d(x, w1, padding=1), g, b, rm.copy(), rv.copy(), True))
        return ops.add(ops.conv2d(y, w2, padding=1), x)

    gradcheck(build, [x, w1, w2, g, b], rng)


def test_finite_after_passes(rng):
    from netrecast.tensor import tensors_finite

    blk = Block(basic(3, 4, 2), 0)
    x = Tensor(rng.standard_normal((4, 3, 8, 8)).astype(np.float32))
    y = blk(x, True)
    backward(ops.mean(y))
    assert tensors_finite([y]) and tensors_finite([t for _, t in blk.params])
    assert all(t.grad.shape == t.shape for _, t in blk.params)
