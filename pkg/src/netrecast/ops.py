"""Differentiable layer operations.

Activations are logically ``(B, C, H, W)``.  Convolution, normalization and
pooling work on a channels-last *view* of their input and hand back a
channels-last buffer viewed as ``(B, C, H, W)``; chained layers therefore
never pay for a layout copy.  Callers only ever see the logical shape.
"""

from __future__ import annotations

from typing import Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import DegenerateVarianceError, ShapeError
from .tensor import Tensor, make_result


def _cl(a: np.ndarray) -> np.ndarray:
    return a.transpose(0, 2, 3, 1)


def _cf(a: np.ndarray) -> np.ndarray:
    return a.transpose(0, 3, 1, 2)


def channels_last(a: np.ndarray) -> np.ndarray:
    """Return ``a`` (logical NCHW) backed by channels-last memory."""
    return _cf(np.ascontiguousarray(_cl(a)))


def _csum(a: np.ndarray) -> np.ndarray:
    """Sum a channels-last array over everything but the last axis (via BLAS)."""
    m = a.reshape(-1, a.shape[-1])
    return np.ones(m.shape[0], dtype=m.dtype) @ m


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def _require_4d(x: Tensor, what: str) -> None:
    if x.ndim != 4:
        raise ShapeError(f"{what} expects a 4-d (B, C, H, W) input, got shape {x.shape}")


# ---------------------------------------------------------------------------
# elementwise and reductions
# ---------------------------------------------------------------------------

def add(a: Tensor, b: Tensor) -> Tensor:
    try:
        out = a.data + b.data
    except ValueError as exc:
        raise ShapeError(f"add: shapes {a.shape} and {b.shape} do not broadcast") from exc
    sa, sb = a.shape, b.shape

    def back(g):
        return _unbroadcast(g, sa), _unbroadcast(g, sb)

    return make_result(out, (a, b), back)


elementwise_add = add


def sub(a: Tensor, b: Tensor) -> Tensor:
    try:
        out = a.data - b.data
    except ValueError as exc:
        raise ShapeError(f"sub: shapes {a.shape} and {b.shape} do not broadcast") from exc
    sa, sb = a.shape, b.shape

    def back(g):
        return _unbroadcast(g, sa), _unbroadcast(-g, sb)

    return make_result(out, (a, b), back)


def mul(a: Tensor, b: Tensor) -> Tensor:
    try:
        out = a.data * b.data
    except ValueError as exc:
        raise ShapeError(f"mul: shapes {a.shape} and {b.shape} do not broadcast") from exc
    ad, bd = a.data, b.data

    def back(g):
        return _unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)

    return make_result(out, (a, b), back)


def sum(x: Tensor) -> Tensor:  # noqa: A001 - mirrors numpy naming
    shape, dtype = x.shape, x.dtype

    def back(g):
        return (np.broadcast_to(np.asarray(g, dtype=dtype), shape),)

    return make_result(np.asarray(x.data.sum(), dtype=dtype), (x,), back)


def mean(x: Tensor) -> Tensor:
    shape, dtype, n = x.shape, x.dtype, x.size

    def back(g):
        return (np.broadcast_to(np.asarray(g / n, dtype=dtype), shape),)

    return make_result(np.asarray(x.data.mean(), dtype=dtype), (x,), back)


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    src = x.shape
    try:
        out = x.data.reshape(tuple(shape))
    except ValueError as exc:
        raise ShapeError(f"reshape: cannot view {src} as {tuple(shape)}") from exc

    def back(g):
        return (g.reshape(src),)

    return make_result(out, (x,), back)


def relu(x: Tensor) -> Tensor:
    xd = x.data
    out = np.maximum(xd, 0)

    def back(g):
        return (g * (xd > 0),)

    return make_result(out, (x,), back)


def concat_channels(tensors: Sequence[Tensor]) -> Tensor:
    if not tensors:
        raise ShapeError("concat_channels needs at least one tensor")
    for t in tensors:
        _require_4d(t, "concat_channels")
    b, _, h, w = tensors[0].shape
    for i, t in enumerate(tensors[1:], 1):
        if (t.shape[0], t.shape[2], t.shape[3]) != (b, h, w):
            raise ShapeError(
                f"concat_channels: tensor {i} has shape {t.shape}, expected batch/spatial ({b}, *, {h}, {w})"
            )
    sizes = [t.shape[1] for t in tensors]
    out = _cf(np.concatenate([_cl(t.data) for t in tensors], axis=3))
    bounds = np.cumsum([0] + sizes)

    def back(g):
        gl = _cl(g)
        return tuple(_cf(gl[..., bounds[i]:bounds[i + 1]]) for i in range(len(sizes)))

    return make_result(out, tuple(tensors), back)


# ---------------------------------------------------------------------------
# convolution
# ---------------------------------------------------------------------------

def conv_output_size(size: int, k: int, stride: int, padding: int) -> int:
    return (size + 2 * padding - k) // stride + 1


def conv2d(x: Tensor, weight: Tensor, bias: Tensor | None = None, stride: int = 1, padding: int = 0) -> Tensor:
    """2-d cross-correlation (no kernel flip).

    ``x`` is ``(B, Cin, H, W)``, ``weight`` is ``(Cout, Cin, kH, kW)``.
    """
    _require_4d(x, "conv2d")
    if weight.ndim != 4:
        raise ShapeError(f"conv2d weight must be (Cout, Cin, kH, kW), got shape {weight.shape}")
    if stride < 1 or padding < 0:
        raise ShapeError(f"conv2d: stride must be positive and padding non-negative (got {stride}, {padding})")
    bsz, cin, h, w = x.shape
    cout, wcin, kh, kw = weight.shape
    if cin != wcin:
        raise ShapeError(f"conv2d: input has Cin={cin} but weight expects Cin={wcin}")
    if h + 2 * padding < kh or w + 2 * padding < kw:
        raise ShapeError(
            f"conv2d: padded input {h + 2 * padding}x{w + 2 * padding} smaller than kernel {kh}x{kw}"
        )
    if bias is not None and bias.shape != (cout,):
        raise ShapeError(f"conv2d: bias shape {bias.shape} does not match Cout={cout}")
    ho = conv_output_size(h, kh, stride, padding)
    wo = conv_output_size(w, kw, stride, padding)
    dtype = np.result_type(x.dtype, weight.dtype)

    xh = _cl(x.data)
    if padding:
        xp = np.zeros((bsz, h + 2 * padding, w + 2 * padding, cin), dtype=dtype)
        xp[:, padding:padding + h, padding:padding + w, :] = xh
    else:
        xp = xh
    if kh == 1 and kw == 1:
        cols = xp[:, : stride * (ho - 1) + 1: stride, : stride * (wo - 1) + 1: stride, :].reshape(-1, cin)
    else:
        cols = _im2col(xp, kh, kw, stride, ho, wo)
    wm = weight.data.transpose(2, 3, 1, 0).reshape(kh * kw * cin, cout)
    out = cols @ wm
    if bias is not None:
        out += bias.data
    out = _cf(out.reshape(bsz, ho, wo, cout))
    hp, wp = xp.shape[1], xp.shape[2]

    def back(g):
        gm = np.ascontiguousarray(_cl(g)).reshape(-1, cout)
        gx = gw = gb = None
        if weight.requires_grad:
            gw = (cols.T @ gm).reshape(kh, kw, cin, cout).transpose(3, 2, 0, 1)
        if bias is not None and bias.requires_grad:
            gb = _csum(gm)
        if x.requires_grad:
            gx = _cf(_conv_input_grad(gm.reshape(bsz, ho, wo, cout), weight.data, stride, padding, h, w, hp, wp))
        return (gx, gw) if bias is None else (gx, gw, gb)

    parents = (x, weight) if bias is None else (x, weight, bias)
    return make_result(out, parents, back)


def _im2col(xp: np.ndarray, kh: int, kw: int, stride: int, ho: int, wo: int) -> np.ndarray:
    win = sliding_window_view(xp, (kh, kw), axis=(1, 2))[:, ::stride, ::stride][:, :ho, :wo]
    return win.transpose(0, 1, 2, 4, 5, 3).reshape(-1, kh * kw * xp.shape[3])


def _conv_input_grad(g: np.ndarray, weight: np.ndarray, stride: int, padding: int,
                     h: int, w: int, hp: int, wp: int) -> np.ndarray:
    """Input gradient (channels-last) as a full correlation of the dilated output
    gradient with the spatially flipped kernel."""
    bsz, ho, wo, cout = g.shape
    _, cin, kh, kw = weight.shape
    if kh == 1 and kw == 1:
        dxp = np.zeros((bsz, hp, wp, cin), dtype=g.dtype)
        dxp[:, : stride * (ho - 1) + 1: stride, : stride * (wo - 1) + 1: stride, :] = (
            g.reshape(-1, cout) @ weight[:, :, 0, 0]
        ).reshape(bsz, ho, wo, cin)
        return dxp[:, padding:padding + h, padding:padding + w, :]
    hd, wd = stride * (ho - 1) + 1, stride * (wo - 1) + 1
    gp = np.zeros((bsz, hd + 2 * (kh - 1), wd + 2 * (kw - 1), cout), dtype=g.dtype)
    gp[:, kh - 1: kh - 1 + hd: stride, kw - 1: kw - 1 + wd: stride, :] = g
    hc, wc = hd + kh - 1, wd + kw - 1
    cols = _im2col(gp, kh, kw, 1, hc, wc)
    wf = weight[:, :, ::-1, ::-1].transpose(2, 3, 0, 1).reshape(kh * kw * cout, cin)
    covered = (cols @ wf).reshape(bsz, hc, wc, cin)
    if hc == hp and wc == wp:
        dxp = covered
    else:
        dxp = np.zeros((bsz, hp, wp, cin), dtype=g.dtype)
        dxp[:, :hc, :wc, :] = covered
    return dxp[:, padding:padding + h, padding:padding + w, :]


# ---------------------------------------------------------------------------
# normalization
# ---------------------------------------------------------------------------

def batchnorm2d(
    x: Tensor,
    gamma: Tensor,
    beta: Tensor,
    running_mean: np.ndarray,
    running_var: np.ndarray,
    training: bool,
    momentum: float = 0.1,
    eps: float = 1e-5,
) -> Tensor:
    """Per-channel batch normalization.

    In training mode the batch statistics normalize the input and the running
    buffers are updated in place (``new = (1 - momentum) * old + momentum * batch``,
    unbiased variance).  In eval mode the running buffers are used instead.
    """
    _require_4d(x, "batchnorm2d")
    bsz, c, h, w = x.shape
    if gamma.shape != (c,) or beta.shape != (c,):
        raise ShapeError(f"batchnorm2d: affine params {gamma.shape}/{beta.shape} do not match C={c}")
    if running_mean.shape != (c,) or running_var.shape != (c,):
        raise ShapeError(f"batchnorm2d: running stats do not match C={c}")
    xh = _cl(x.data)
    n = bsz * h * w
    if training:
        if n < 2:
            raise DegenerateVarianceError("batchnorm2d in train mode needs B*H*W >= 2")
        mu = _csum(xh) / n
        xc = xh - mu
        var = _csum(xc * xc) / n
        inv = 1.0 / np.sqrt(var + eps)
        xhat = xc * inv
        running_mean *= 1.0 - momentum
        running_mean += momentum * mu
        running_var *= 1.0 - momentum
        running_var += momentum * var * (n / (n - 1))
    else:
        inv = (1.0 / np.sqrt(running_var + eps)).astype(x.dtype)
        xhat = (xh - running_mean.astype(x.dtype)) * inv
    gd = gamma.data
    out = _cf(xhat * gd + beta.data)

    def back(g):
        gh = _cl(g)
        gh = np.ascontiguousarray(gh)
        gsum = _csum(gh)
        gxsum = _csum(gh * xhat)
        ggamma = gxsum if gamma.requires_grad else None
        gbeta = gsum if beta.requires_grad else None
        gx = None
        if x.requires_grad:
            dxhat = gh * gd
            if training:
                gx = (dxhat - gd * gsum / n - xhat * (gd * gxsum / n)) * inv
            else:
                gx = dxhat * inv
            gx = _cf(gx)
        return gx, ggamma, gbeta

    return make_result(out, (x, gamma, beta), back)


# ---------------------------------------------------------------------------
# pooling and dense layers
# ---------------------------------------------------------------------------

def _pool_windows(x: Tensor, k: int, stride: int, what: str):
    _require_4d(x, what)
    bsz, c, h, w = x.shape
    if k < 1 or stride < 1 or h < k or w < k:
        raise ShapeError(f"{what}: window {k} stride {stride} does not fit input {h}x{w}")
    ho = (h - k) // stride + 1
    wo = (w - k) // stride + 1
    xh = _cl(x.data)
    win = sliding_window_view(xh, (k, k), axis=(1, 2))[:, ::stride, ::stride][:, :ho, :wo]
    return win, ho, wo


def maxpool2d(x: Tensor, k: int = 2, stride: int | None = None) -> Tensor:
    stride = k if stride is None else stride
    win, ho, wo = _pool_windows(x, k, stride, "maxpool2d")
    flat = win.reshape(*win.shape[:4], k * k)
    idx = flat.argmax(axis=-1)
    out_h = np.take_along_axis(flat, idx[..., None], axis=-1)[..., 0]
    shape, dtype = x.shape, x.dtype

    def back(g):
        gh = _cl(g)
        dx = np.zeros((shape[0], shape[2], shape[3], shape[1]), dtype=dtype)
        hs, ws = stride * (ho - 1) + 1, stride * (wo - 1) + 1
        for i in range(k):
            for j in range(k):
                dx[:, i:i + hs:stride, j:j + ws:stride, :] += gh * (idx == i * k + j)
        return (_cf(dx),)

    return make_result(_cf(np.ascontiguousarray(out_h)), (x,), back)


def avgpool2d(x: Tensor, k: int = 2, stride: int | None = None) -> Tensor:
    stride = k if stride is None else stride
    win, ho, wo = _pool_windows(x, k, stride, "avgpool2d")
    out_h = win.mean(axis=(-2, -1))
    shape, dtype = x.shape, x.dtype

    def back(g):
        gh = _cl(g) / (k * k)
        dx = np.zeros((shape[0], shape[2], shape[3], shape[1]), dtype=dtype)
        hs, ws = stride * (ho - 1) + 1, stride * (wo - 1) + 1
        for i in range(k):
            for j in range(k):
                dx[:, i:i + hs:stride, j:j + ws:stride, :] += gh
        return (_cf(dx),)

    return make_result(_cf(np.ascontiguousarray(out_h.astype(dtype, copy=False))), (x,), back)


def global_avgpool(x: Tensor) -> Tensor:
    _require_4d(x, "global_avgpool")
    bsz, c, h, w = x.shape
    out = _cl(x.data).mean(axis=(1, 2))

    def back(g):
        gx = np.broadcast_to((g / (h * w))[:, None, None, :], (bsz, h, w, c))
        return (_cf(gx),)

    return make_result(out, (x,), back)


def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """``x @ weight.T + bias`` with ``weight`` shaped ``(K, D)``."""
    if x.ndim != 2 or weight.ndim != 2:
        raise ShapeError(f"linear expects 2-d input and weight, got {x.shape} and {weight.shape}")
    if x.shape[1] != weight.shape[1]:
        raise ShapeError(f"linear: input has D={x.shape[1]} but weight expects D={weight.shape[1]}")
    if bias is not None and bias.shape != (weight.shape[0],):
        raise ShapeError(f"linear: bias shape {bias.shape} does not match K={weight.shape[0]}")
    xd, wd = x.data, weight.data
    out = xd @ wd.T
    if bias is not None:
        out = out + bias.data

    def back(g):
        gx = g @ wd if x.requires_grad else None
        gw = g.T @ xd if weight.requires_grad else None
        if bias is None:
            return gx, gw
        return gx, gw, (g.sum(axis=0) if bias.requires_grad else None)

    parents = (x, weight) if bias is None else (x, weight, bias)
    return make_result(out, parents, back)


# ---------------------------------------------------------------------------
# losses
# ---------------------------------------------------------------------------

def mse_loss(pred: Tensor, target: Tensor) -> Tensor:
    """Mean of squared differences over every element; ``target`` is treated as constant."""
    if pred.shape != target.shape:
        raise ShapeError(f"mse_loss: prediction {pred.shape} and target {target.shape} differ")
    diff = pred.data - target.data
    n = diff.size
    out = np.asarray((diff * diff).sum() / n, dtype=pred.dtype)

    def back(g):
        return (g * (2.0 / n) * diff, None)

    return make_result(out, (pred, target), back)


def log_softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=1, keepdims=True))


def cross_entropy(logits: Tensor, labels: np.ndarray) -> Tensor:
    """Mean negative log-likelihood of integer ``labels`` under softmax(logits)."""
    if logits.ndim != 2:
        raise ShapeError(f"cross_entropy expects (B, K) logits, got {logits.shape}")
    labels = np.asarray(labels)
    bsz, k = logits.shape
    if labels.shape != (bsz,):
        raise ShapeError(f"cross_entropy: labels shape {labels.shape} does not match batch {bsz}")
    if labels.size and (labels.min() < 0 or labels.max() >= k):
        raise ShapeError(f"cross_entropy: labels must lie in [0, {k}), got range [{labels.min()}, {labels.max()}]")
    labels = labels.astype(np.int64)
    logp = log_softmax(logits.data)
    rows = np.arange(bsz)
    out = np.asarray(-logp[rows, labels].mean(), dtype=logits.dtype)

    def back(g):
        p = np.exp(logp)
        p[rows, labels] -= 1.0
        return (g * p / bsz,)

    return make_result(out, (logits,), back)
