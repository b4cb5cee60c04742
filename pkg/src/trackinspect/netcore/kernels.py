"""Dense forward/backward kernels on NCHW arrays.

Every forward returns ``(out, cache)``; the matching backward takes the
upstream gradient and that cache. Kernels are pure: they never touch global
state and never keep references to caller buffers beyond the cache.
"""

import numpy as np

from .. import ShapeError


def conv_output_size(n, k, stride=1):
    if n < k:
        raise ShapeError(f"kernel {k} larger than input {n}")
    return (n - k) // stride + 1


def _cols(xc, kh, kw, stride, ho, wo):
    """Patch matrix (C*kh*kw, N*Ho*Wo) from a channel-major (C, N, H, W) input."""
    c, n = xc.shape[:2]
    cols = np.empty((c, kh, kw, n, ho, wo), dtype=xc.dtype)
    span_h = (ho - 1) * stride + 1
    span_w = (wo - 1) * stride + 1
    for i in range(kh):
        for j in range(kw):
            cols[:, i, j] = xc[:, :, i:i + span_h:stride, j:j + span_w:stride]
    return cols.reshape(c * kh * kw, n * ho * wo)


def _row_cols(xc, kw, wo):
    """Column-unfolded rows: (C*kw, N*H*Wo) for a stride-1 channel-major input.

    Images are stacked vertically, so shifting by i rows is a strided view of
    this matrix; rows that straddle two images are computed and discarded.
    """
    c, n, h, _ = xc.shape
    stacked = xc.reshape(c, n * h, -1)
    cols = np.empty((c, kw, n * h, wo), dtype=xc.dtype)
    for j in range(kw):
        cols[:, j] = stacked[:, :, j:j + wo]
    return cols.reshape(c * kw, n * h * wo)


def _conv_rows_forward(xc, weight):
    o, c, kh, kw = weight.shape
    _, n, h, w = xc.shape
    ho, wo = h - kh + 1, w - kw + 1
    cols = _row_cols(xc, kw, wo)
    span = (n * h - kh + 1) * wo
    full = np.zeros((o, n * h * wo), dtype=np.result_type(xc.dtype, weight.dtype))
    for i in range(kh):
        full[:, :span] += weight[:, :, i, :].reshape(o, c * kw) @ cols[:, i * wo:i * wo + span]
    return full.reshape(o, n, h, wo)[:, :, :ho]


def _conv_rows_backward(dc, xc, weight, need_dx=True):
    o, c, kh, kw = weight.shape
    _, n, h, w = xc.shape
    ho, wo = dc.shape[2:]
    cols = _row_cols(xc, kw, wo)
    span = (n * h - kh + 1) * wo
    full = np.zeros((o, n, h, wo), dtype=dc.dtype)
    full[:, :, :ho] = dc
    dflat = full.reshape(o, n * h * wo)[:, :span]
    dweight = np.empty_like(weight)
    for i in range(kh):
        dweight[:, :, i, :] = (dflat @ cols[:, i * wo:i * wo + span].T).reshape(o, c, kw)
    dbias = dc.sum(axis=(1, 2, 3))
    if not need_dx:
        return None, dweight, dbias
    dcols = np.zeros((c * kw, n * h * wo), dtype=dc.dtype)
    for i in range(kh):
        dcols[:, i * wo:i * wo + span] += weight[:, :, i, :].reshape(o, c * kw).T @ dflat
    dcols = dcols.reshape(c, kw, n * h, wo)
    dx = np.zeros((c, n * h, w), dtype=dc.dtype)
    for j in range(kw):
        dx[:, :, j:j + wo] += dcols[:, j]
    return dx.reshape(c, n, h, w), dweight, dbias


def conv2d_valid(x, weight, bias=None, stride=1, layout="NCHW"):
    """Valid (unpadded) cross-correlation.

    x: (N, C, H, W); weight: (O, C, kh, kw); bias: (O,) or None.
    Output is (N, O, (H-kh)//stride+1, (W-kw)//stride+1). With
    layout="CNHW" both x and the output are channel-major (C, N, H, W),
    which avoids the transposes and is what the network uses internally.
    """
    if x.ndim != 4 or weight.ndim != 4:
        raise ShapeError("conv2d_valid expects 4-D input and weight")
    if layout not in ("NCHW", "CNHW"):
        raise ValueError(f"unknown layout {layout!r}")
    xc = np.ascontiguousarray(x if layout == "CNHW" else x.transpose(1, 0, 2, 3))
    if xc.shape[0] != weight.shape[1]:
        raise ShapeError(f"channel mismatch: input {xc.shape[0]} vs kernel {weight.shape[1]}")
    if stride < 1:
        raise ShapeError("stride must be >= 1")
    o, c, kh, kw = weight.shape
    n, h, w = xc.shape[1:]
    ho = conv_output_size(h, kh, stride)
    wo = conv_output_size(w, kw, stride)
    if stride == 1 and c * kh * kw > 64:
        out = _conv_rows_forward(xc, weight)
    else:
        out = (weight.reshape(o, -1) @ _cols(xc, kh, kw, stride, ho, wo)).reshape(o, n, ho, wo)
    if bias is not None:
        out += bias[:, None, None, None]
    if layout == "NCHW":
        out = np.ascontiguousarray(out.transpose(1, 0, 2, 3))
    return out, (xc, weight, stride, layout)


def conv2d_backward(dout, cache, need_dx=True):
    """Returns (dx, dweight, dbias) in the layout used by the forward call.

    With need_dx=False the input gradient is skipped and dx is None.
    """
    xc, weight, stride, layout = cache
    c, n, h, w = xc.shape
    o, _, kh, kw = weight.shape
    dc = dout if layout == "CNHW" else dout.transpose(1, 0, 2, 3)
    if stride == 1 and c * kh * kw > 64:
        dx, dweight, dbias = _conv_rows_backward(np.ascontiguousarray(dc), xc, weight, need_dx)
    else:
        ho, wo = dc.shape[2:]
        dflat = np.ascontiguousarray(dc).reshape(o, -1)
        dweight = (dflat @ _cols(xc, kh, kw, stride, ho, wo).T).reshape(weight.shape)
        dbias = dflat.sum(axis=1)
        dx = None
        if need_dx:
            dcols = (weight.reshape(o, -1).T @ dflat).reshape(c, kh, kw, n, ho, wo)
            dx = np.zeros_like(xc)
            span_h = (ho - 1) * stride + 1
            span_w = (wo - 1) * stride + 1
            for i in range(kh):
                for j in range(kw):
                    dx[:, :, i:i + span_h:stride, j:j + span_w:stride] += dcols[:, i, j]
    if dx is None:
        return None, dweight, dbias
    if layout == "NCHW":
        dx = np.ascontiguousarray(dx.transpose(1, 0, 2, 3))
    return dx, dweight, dbias


def _pool_views(x, kh, kw, stride, ho, wo):
    span_h = (ho - 1) * stride + 1
    span_w = (wo - 1) * stride + 1
    for i in range(kh):
        for j in range(kw):
            yield i, j, (slice(None), slice(None), slice(i, i + span_h, stride), slice(j, j + span_w, stride))


def maxpool(x, k=3, stride=2):
    """Max pooling with a k x k window (k may be a (kh, kw) pair).

    Ties go to the window element with the smallest linear index, which keeps
    the backward pass deterministic.
    """
    kh, kw = (k, k) if np.isscalar(k) else k
    n, c, h, w = x.shape
    if h < kh or w < kw:
        raise ShapeError(f"pool window {kh}x{kw} larger than input {h}x{w}")
    ho = (h - kh) // stride + 1
    wo = (w - kw) // stride + 1
    out = None
    for _, _, sl in _pool_views(x, kh, kw, stride, ho, wo):
        out = x[sl].copy() if out is None else np.maximum(out, x[sl], out=out)
    return out, (x, out, kh, kw, stride)


def maxpool_backward(dout, cache):
    x, out, kh, kw, stride = cache
    ho, wo = out.shape[2:]
    dx = np.zeros(x.shape, dtype=np.result_type(x.dtype, dout.dtype))
    if kh * kw > 16:
        # large windows (global pooling): locate the first maximum and scatter
        win = x.reshape(x.shape[:2] + (-1,)) if stride == 1 and (ho, wo) == (1, 1) else None
        if win is not None:
            flat = np.argmax(win, axis=2)  # first occurrence == raster order
            nn, cc = np.indices(flat.shape, sparse=True)
            dx.reshape(win.shape)[nn, cc, flat] = dout[:, :, 0, 0]
            return dx
    pending = np.ones(out.shape, dtype=bool)
    # raster order over the window == increasing linear index in the input
    for _, _, sl in _pool_views(x, kh, kw, stride, ho, wo):
        hit = pending & (x[sl] == out)
        pending &= ~hit
        dx[sl] += dout * hit
    return dx


def global_maxpool(x):
    """Max over all spatial sites per channel: (N, C, H, W) -> (N, C)."""
    out, cache = maxpool(x, x.shape[2:], 1)
    return out[:, :, 0, 0], cache


def global_maxpool_backward(dout, cache):
    return maxpool_backward(dout[:, :, None, None], cache)


def relu(x):
    return np.maximum(x, 0), x


def relu_backward(dout, cache):
    # subgradient at exactly 0 is 0
    return dout * (cache > 0)


def dropout(x, ratio, train, rng):
    """Inverted dropout. Returns (out, mask); mask is None in eval mode."""
    if not 0 <= ratio < 1:
        raise ValueError(f"dropout ratio must be in [0, 1), got {ratio}")
    if not train or ratio == 0:
        return x, None
    keep = rng.random(x.shape) >= ratio
    mask = keep.astype(x.dtype) / (1.0 - ratio)
    return x * mask, mask


def dropout_backward(dout, mask):
    return dout if mask is None else dout * mask


def softmax_xent(logits, labels):
    """Mean softmax cross-entropy over the batch.

    logits: (N, K); labels: (N,) ints. Returns (loss, dlogits) where dlogits is
    the gradient of the mean loss, i.e. (softmax - onehot) / N.
    """
    logits = np.atleast_2d(logits)
    labels = np.atleast_1d(labels)
    n, k = logits.shape
    if np.any(labels < 0) or np.any(labels >= k):
        raise ValueError("label out of range")
    shifted = logits - logits.max(axis=1, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=1))
    rows = np.arange(n)
    loss = float(np.mean(lse - shifted[rows, labels]))
    prob = np.exp(shifted - lse[:, None])
    prob[rows, labels] -= 1.0
    return loss, prob / n


def hinge_forward_backward(w, b, lam, x, y):
    """Regularized hinge loss of a linear SVM and its three gradients.

    E = sum_i max(0, 1 - y_i (w.x_i + b)) + (lam/2) ||w||^2

    x is (D,) or (N, D); y is +-1 (scalar or (N,)). Returns
    (E, dE/dw, dE/db, dE/dx) with dE/dx shaped like x.
    """
    w = np.asarray(w)
    x = np.asarray(x)
    single = x.ndim == 1
    xs = x[None, :] if single else x
    ys = np.atleast_1d(np.asarray(y, dtype=xs.dtype))
    if xs.shape[1] != w.shape[0]:
        raise ShapeError(f"feature dim {xs.shape[1]} != weight dim {w.shape[0]}")
    if np.any(np.abs(ys) != 1):
        raise ValueError("labels must be +1 or -1")
    margin = ys * (xs @ w + b)
    active = (margin < 1).astype(xs.dtype)
    loss = float(np.sum(np.maximum(0.0, 1.0 - margin)) + 0.5 * lam * (w @ w))
    dw = -(active * ys) @ xs + lam * w
    db = float(-np.sum(active * ys))
    dx = -(active * ys)[:, None] * w[None, :]
    return loss, dw, db, (dx[0] if single else dx)
