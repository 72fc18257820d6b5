"""Differentiable operations on tensors.

Every op computes its forward result eagerly with numpy and, when a tape is
active and some input requires gradients, records an adjoint callback. The
convolution uses a direct im2col path (chunked over output rows to bound the
scratch size); its input gradient is expressed as a convolution with the
spatially flipped, channel-transposed kernel, so forward and backward share
one code path.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .tensor import (
    Tape,
    Tensor,
    ShapeError,
    accumulate_grad,
    active_tape,
)

BN_EPS = 1e-5
BN_MOMENTUM = 0.99

# Scratch budget (elements) for im2col row chunks; 2**24 floats = 64 MB at f4.
_COL_BUDGET = 2**24


class PoolError(ShapeError):
    """Raised for degenerate pooling configurations."""


def _as_tensor(x, like: Tensor) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=like.dtype))


def _check_dtypes(*tensors: Tensor) -> None:
    dt = tensors[0].dtype
    for t in tensors[1:]:
        if t.dtype != dt:
            raise ShapeError(f"dtype mismatch: {dt} vs {t.dtype}")


def _result(data: np.ndarray, *parents: Tensor):
    """Create the output tensor; return (out, tape) with tape None if untracked."""
    tape = active_tape()
    track = tape is not None and any(p.requires_grad for p in parents)
    out = Tensor(data, requires_grad=track)
    return out, (tape if track else None)


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, extent in enumerate(shape):
        if extent == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


# ---------------------------------------------------------------------------
# elementwise arithmetic


def add(a: Tensor, b) -> Tensor:
    b = _as_tensor(b, a)
    _check_dtypes(a, b)
    out, tape = _result(a.data + b.data, a, b)
    if tape is not None:

        def bwd(g):
            accumulate_grad(a, _unbroadcast(g, a.shape))
            accumulate_grad(b, _unbroadcast(g, b.shape))

        tape.record(out, bwd)
    return out


def sub(a: Tensor, b) -> Tensor:
    b = _as_tensor(b, a)
    _check_dtypes(a, b)
    out, tape = _result(a.data - b.data, a, b)
    if tape is not None:

        def bwd(g):
            accumulate_grad(a, _unbroadcast(g, a.shape))
            accumulate_grad(b, _unbroadcast(-g, b.shape))

        tape.record(out, bwd)
    return out


def mul(a: Tensor, b) -> Tensor:
    b = _as_tensor(b, a)
    _check_dtypes(a, b)
    out, tape = _result(a.data * b.data, a, b)
    if tape is not None:
        ad, bd = a.data, b.data

        def bwd(g):
            accumulate_grad(a, _unbroadcast(g * bd, a.shape))
            accumulate_grad(b, _unbroadcast(g * ad, b.shape))

        tape.record(out, bwd)
    return out


def neg(a: Tensor) -> Tensor:
    out, tape = _result(-a.data, a)
    if tape is not None:
        tape.record(out, lambda g: accumulate_grad(a, -g))
    return out


def abs_(a: Tensor) -> Tensor:
    """|x| with the subgradient convention sign(0) = 0."""
    out, tape = _result(np.abs(a.data), a)
    if tape is not None:
        sgn = np.sign(a.data)
        tape.record(out, lambda g: accumulate_grad(a, g * sgn))
    return out


def tanh(a: Tensor) -> Tensor:
    out, tape = _result(np.tanh(a.data), a)
    if tape is not None:
        od = out.data
        tape.record(out, lambda g: accumulate_grad(a, g * (1.0 - od * od)))
    return out


def elu(a: Tensor) -> Tensor:
    """x for x > 0, exp(x) - 1 otherwise (alpha fixed at 1)."""
    xd = a.data
    out, tape = _result(np.where(xd > 0, xd, np.expm1(np.minimum(xd, 0))), a)
    if tape is not None:
        # derivative is 1 on the positive branch and out + 1 = exp(x) below
        deriv = np.where(xd > 0, np.ones((), xd.dtype), out.data + 1)
        tape.record(out, lambda g: accumulate_grad(a, g * deriv))
    return out


def clamp(a: Tensor, lo: float, hi: float) -> Tensor:
    """Hard clip; gradient is 1 strictly inside [lo, hi] and 0 outside."""
    out, tape = _result(np.clip(a.data, lo, hi), a)
    if tape is not None:
        inside = ((a.data > lo) & (a.data < hi)).astype(a.dtype)
        tape.record(out, lambda g: accumulate_grad(a, g * inside))
    return out


# ---------------------------------------------------------------------------
# reductions and shape ops


def sum_(a: Tensor) -> Tensor:
    out, tape = _result(a.data.sum(), a)
    if tape is not None:
        shape, dt = a.shape, a.dtype
        tape.record(out, lambda g: accumulate_grad(a, np.full(shape, g.reshape(()).item(), dt)))
    return out


def mean(a: Tensor) -> Tensor:
    out, tape = _result(a.data.mean(), a)
    if tape is not None:
        shape, dt, n = a.shape, a.dtype, a.size

        def bwd(g):
            accumulate_grad(a, np.full(shape, g.reshape(()).item() / n, dt))

        tape.record(out, bwd)
    return out


def concat(tensors: list[Tensor] | tuple[Tensor, ...], axis: int = 1) -> Tensor:
    tensors = list(tensors)
    _check_dtypes(*tensors)
    out, tape = _result(np.concatenate([t.data for t in tensors], axis=axis), *tensors)
    if tape is not None:
        extents = [t.shape[axis] for t in tensors]
        offsets = np.cumsum([0] + extents)

        def bwd(g):
            for t, lo, hi in zip(tensors, offsets[:-1], offsets[1:]):
                sl = [slice(None)] * g.ndim
                sl[axis] = slice(int(lo), int(hi))
                accumulate_grad(t, g[tuple(sl)].copy())

        tape.record(out, bwd)
    return out


def channels(a: Tensor, start: int, stop: int) -> Tensor:
    """Slice along the channel axis (axis 1)."""
    out, tape = _result(a.data[:, start:stop].copy(), a)
    if tape is not None:
        shape, dt = a.shape, a.dtype

        def bwd(g):
            full = np.zeros(shape, dt)
            full[:, start:stop] = g
            accumulate_grad(a, full)

        tape.record(out, bwd)
    return out


def forward_diff(a: Tensor, axis: int) -> Tensor:
    """Forward difference along a spatial axis (2 or 3) of a BCHW tensor.

    The last row/column is replicated, i.e. its difference is zero.
    """
    if axis not in (2, 3):
        raise ShapeError(f"forward_diff axis must be 2 or 3, got {axis}")
    xd = a.data
    d = np.zeros_like(xd)
    if axis == 2:
        d[:, :, :-1, :] = xd[:, :, 1:, :] - xd[:, :, :-1, :]
    else:
        d[:, :, :, :-1] = xd[:, :, :, 1:] - xd[:, :, :, :-1]
    out, tape = _result(d, a)
    if tape is not None:

        def bwd(g):
            gx = np.zeros_like(g)
            if axis == 2:
                gx[:, :, 1:, :] += g[:, :, :-1, :]
                gx[:, :, :-1, :] -= g[:, :, :-1, :]
            else:
                gx[:, :, :, 1:] += g[:, :, :, :-1]
                gx[:, :, :, :-1] -= g[:, :, :, :-1]
            accumulate_grad(a, gx)

        tape.record(out, bwd)
    return out


# ---------------------------------------------------------------------------
# convolution


def _conv_windows(xp: np.ndarray, k: int, dilation: int, H: int, W: int) -> np.ndarray:
    """Strided (B, C, k, k, H, W) view over the padded input, no copy."""
    B, C = xp.shape[:2]
    sB, sC, sH, sW = xp.strides
    return np.lib.stride_tricks.as_strided(
        xp,
        (B, C, k, k, H, W),
        (sB, sC, sH * dilation, sW * dilation, sH, sW),
        writeable=False,
    )


def _conv_forward(
    xd: np.ndarray, wd: np.ndarray, bd, dilation: int, keep_cols: bool = False
):
    """Chunked im2col convolution. With ``keep_cols`` (and when the full
    column matrix fits the scratch budget) the columns are returned for reuse
    by the kernel-gradient pass; otherwise they are rebuilt there."""
    B, Cin, H, W = xd.shape
    Cout, _, k, _ = wd.shape
    pad = dilation * (k - 1) // 2
    xp = np.pad(xd, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    win = _conv_windows(xp, k, dilation, H, W)
    wmat = wd.reshape(Cout, Cin * k * k)
    out = np.empty((B, Cout, H, W), xd.dtype)
    step = max(1, _COL_BUDGET // max(1, B * Cin * k * k * W))
    kept = None
    if keep_cols and step >= H:
        kept = win.reshape(B, Cin * k * k, H * W)
        out[:] = (wmat @ kept).reshape(B, Cout, H, W)
    else:
        for y0 in range(0, H, step):
            y1 = min(H, y0 + step)
            cols = win[:, :, :, :, y0:y1, :].reshape(B, Cin * k * k, (y1 - y0) * W)
            out[:, :, y0:y1, :] = (wmat @ cols).reshape(B, Cout, y1 - y0, W)
    if bd is not None:
        out += bd.reshape(1, Cout, 1, 1)
    return (out, kept) if keep_cols else out


def _conv_grad_kernel(
    xd: np.ndarray, g: np.ndarray, k: int, dilation: int, cols: np.ndarray | None
) -> np.ndarray:
    B, Cin, H, W = xd.shape
    Cout = g.shape[1]
    if cols is not None:
        gm = g.reshape(B, Cout, H * W)
        gk = (gm @ cols.transpose(0, 2, 1)).sum(axis=0)
        return gk.reshape(Cout, Cin, k, k)
    pad = dilation * (k - 1) // 2
    xp = np.pad(xd, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    win = _conv_windows(xp, k, dilation, H, W)
    gk = np.zeros((Cout, Cin * k * k), xd.dtype)
    step = max(1, _COL_BUDGET // max(1, B * Cin * k * k * W))
    for y0 in range(0, H, step):
        y1 = min(H, y0 + step)
        chunk = win[:, :, :, :, y0:y1, :].reshape(B, Cin * k * k, (y1 - y0) * W)
        gm = g[:, :, y0:y1, :].reshape(B, Cout, (y1 - y0) * W)
        gk += (gm @ chunk.transpose(0, 2, 1)).sum(axis=0)
    return gk.reshape(Cout, Cin, k, k)


def conv2d(x: Tensor, kernel: Tensor, bias: Tensor | None, dilation: int = 1) -> Tensor:
    """Same-padded dilated cross-correlation over BCHW input.

    The kernel must be square with odd side so zero padding of
    dilation*(k-1)/2 keeps the spatial dims unchanged.
    """
    if x.ndim != 4 or kernel.ndim != 4:
        raise ShapeError("conv2d expects BCHW input and OIkk kernel")
    Cout, Cin, k, k2 = kernel.shape
    if k != k2 or k % 2 != 1:
        raise ShapeError(f"conv2d kernel must be square with odd side, got {k}x{k2}")
    if dilation < 1:
        raise ShapeError(f"dilation must be >= 1, got {dilation}")
    if x.shape[1] != Cin:
        raise ShapeError(f"conv2d channel mismatch: input has {x.shape[1]}, kernel expects {Cin}")
    if bias is not None and bias.shape != (Cout,):
        raise ShapeError(f"bias shape {bias.shape} does not match {Cout} output channels")
    _check_dtypes(x, kernel, *([bias] if bias is not None else []))

    tracking = active_tape() is not None and any(
        p.requires_grad for p in (x, kernel) + ((bias,) if bias is not None else ())
    )
    data, cols = _conv_forward(
        x.data, kernel.data, bias.data if bias is not None else None, dilation,
        keep_cols=True,
    )
    if not tracking:
        cols = None
    parents = (x, kernel) + ((bias,) if bias is not None else ())
    out, tape = _result(data, *parents)
    if tape is not None:
        xd, wd = x.data, kernel.data

        def bwd(g):
            if bias is not None:
                accumulate_grad(bias, g.sum(axis=(0, 2, 3)))
            if kernel.requires_grad:
                accumulate_grad(kernel, _conv_grad_kernel(xd, g, k, dilation, cols))
            if x.requires_grad:
                wt = wd[:, :, ::-1, ::-1].transpose(1, 0, 2, 3)
                accumulate_grad(x, _conv_forward(g, np.ascontiguousarray(wt), None, dilation))

        tape.record(out, bwd)
    return out


# ---------------------------------------------------------------------------
# pooling


def _pool_data(xd: np.ndarray, k: int) -> np.ndarray:
    B, C, H, W = xd.shape
    hi = np.arange(0, H, k)
    wi = np.arange(0, W, k)
    sums = np.add.reduceat(np.add.reduceat(xd, hi, axis=2), wi, axis=3)
    ch = np.minimum(hi + k, H) - hi
    cw = np.minimum(wi + k, W) - wi
    means = sums / (ch[:, None] * cw[None, :]).astype(xd.dtype)
    up = np.repeat(means, k, axis=2)[:, :, :H, :]
    return np.repeat(up, k, axis=3)[:, :, :, :W]


def avg_pool(x: Tensor, k: int) -> Tensor:
    """k-by-k average pooling with stride k, nearest-neighbor upsampled back
    to the input resolution so the result concatenates with full-resolution
    maps. Edge cells shorter than k average over the pixels they cover.

    The composed pool-then-upsample operator is symmetric, so the adjoint is
    the operator itself applied to the incoming gradient.
    """
    if x.ndim != 4:
        raise ShapeError("avg_pool expects a BCHW tensor")
    if k < 1:
        raise PoolError(f"pool kernel must be >= 1, got {k}")
    B, C, H, W = x.shape
    if k > H and k > W:
        raise PoolError(f"pool kernel {k} exceeds both spatial extents {H}x{W}")
    out, tape = _result(_pool_data(x.data, k), x)
    if tape is not None:
        tape.record(out, lambda g: accumulate_grad(x, _pool_data(g, k)))
    return out


# ---------------------------------------------------------------------------
# batch normalization


@dataclass
class BatchNormState:
    """Per-channel running statistics consumed in eval mode."""

    mean: np.ndarray
    var: np.ndarray

    @classmethod
    def fresh(cls, channels: int, dtype=np.float32) -> "BatchNormState":
        return cls(np.zeros(channels, dtype), np.ones(channels, dtype))

    def copy(self) -> "BatchNormState":
        return BatchNormState(self.mean.copy(), self.var.copy())


def batch_norm(
    x: Tensor,
    gamma: Tensor,
    beta: Tensor,
    state: BatchNormState,
    training: bool,
    update_stats: bool | None = None,
) -> Tensor:
    """Channel-wise normalization over (B, H, W).

    Train mode normalizes with batch statistics and, unless ``update_stats``
    is False, folds them into the running estimates with momentum 0.99. Eval
    mode consumes the running statistics. Epsilon 1e-5 sits inside the square
    root, so zero-variance channels never divide by zero.
    """
    if x.ndim != 4:
        raise ShapeError("batch_norm expects a BCHW tensor")
    B, C, H, W = x.shape
    if gamma.shape != (C,) or beta.shape != (C,):
        raise ShapeError("batch_norm affine parameters must have shape (C,)")
    _check_dtypes(x, gamma, beta)
    if update_stats is None:
        update_stats = training

    xd = x.data
    if training:
        n = B * H * W
        if n < 2:
            raise ShapeError("batch_norm train mode needs B*H*W >= 2")
        mu = xd.mean(axis=(0, 2, 3))
        var = xd.var(axis=(0, 2, 3))
        if update_stats:
            m = np.asarray(BN_MOMENTUM, state.mean.dtype)
            state.mean[:] = m * state.mean + (1 - m) * mu.astype(state.mean.dtype)
            state.var[:] = m * state.var + (1 - m) * var.astype(state.var.dtype)
    else:
        mu = state.mean.astype(xd.dtype)
        var = state.var.astype(xd.dtype)

    inv = 1.0 / np.sqrt(var + np.asarray(BN_EPS, xd.dtype))
    xhat = (xd - mu[None, :, None, None]) * inv[None, :, None, None]
    data = gamma.data[None, :, None, None] * xhat + beta.data[None, :, None, None]
    out, tape = _result(data, x, gamma, beta)
    if tape is not None:

        def bwd(g):
            accumulate_grad(beta, g.sum(axis=(0, 2, 3)))
            accumulate_grad(gamma, (g * xhat).sum(axis=(0, 2, 3)))
            if x.requires_grad:
                gi = gamma.data[None, :, None, None] * inv[None, :, None, None]
                if training:
                    gm = g.mean(axis=(0, 2, 3))[None, :, None, None]
                    gxm = (g * xhat).mean(axis=(0, 2, 3))[None, :, None, None]
                    accumulate_grad(x, gi * (g - gm - xhat * gxm))
                else:
                    accumulate_grad(x, gi * g)

        tape.record(out, bwd)
    return out


# ---------------------------------------------------------------------------
# view-axis softmax with learned temperature


def softmax_beta(logits: Tensor, beta: Tensor) -> Tensor:
    """Per-pixel softmax over the channel (view) axis, scaled by a trainable
    scalar temperature. Stabilized by max subtraction, so finite logits can
    never overflow."""
    if logits.ndim != 4:
        raise ShapeError("softmax_beta expects a BCHW tensor")
    if beta.size != 1:
        raise ShapeError("beta must be a scalar tensor")
    _check_dtypes(logits, beta)
    xd = logits.data
    b = beta.data.reshape(())
    z = b * xd
    z = z - z.max(axis=1, keepdims=True)
    e = np.exp(z)
    s = e / e.sum(axis=1, keepdims=True)
    out, tape = _result(s, logits, beta)
    if tape is not None:

        def bwd(g):
            gs = (g * s).sum(axis=1, keepdims=True)
            if logits.requires_grad:
                accumulate_grad(logits, b * s * (g - gs))
            if beta.requires_grad:
                vbar = (xd * s).sum(axis=1, keepdims=True)
                gb = (g * s * (xd - vbar)).sum()
                accumulate_grad(beta, np.asarray(gb, beta.dtype).reshape(beta.shape))

        tape.record(out, bwd)
    return out


# ---------------------------------------------------------------------------
# bilinear sampling


def bilinear_sample(image: Tensor, rows: Tensor, cols: Tensor) -> Tensor:
    """Sample ``image`` at fractional coordinates with bilinear interpolation.

    ``rows`` indexes the first spatial axis (axis 2) and ``cols`` the second
    (axis 3); both are (B, 1, H, W) and apply to every channel. Out-of-range
    coordinates clamp to the border, which replicates edge pixels and zeroes
    the coordinate gradient there. Gradients flow to the image values and to
    both coordinate maps.
    """
    if image.ndim != 4:
        raise ShapeError("bilinear_sample expects a BCHW image")
    B, C, H, W = image.shape
    for name, t in (("rows", rows), ("cols", cols)):
        if t.shape != (B, 1, H, W):
            raise ShapeError(f"{name} must have shape {(B, 1, H, W)}, got {t.shape}")
    _check_dtypes(image, rows, cols)

    img = image.data
    xr, yr = rows.data, cols.data
    xc = np.clip(xr, 0, H - 1)
    yc = np.clip(yr, 0, W - 1)
    x0 = np.floor(xc).astype(np.int64)
    y0 = np.floor(yc).astype(np.int64)
    x1 = np.minimum(x0 + 1, H - 1)
    y1 = np.minimum(y0 + 1, W - 1)
    wx = (xc - x0).astype(img.dtype)
    wy = (yc - y0).astype(img.dtype)

    bidx = np.arange(B).reshape(B, 1, 1, 1)
    cidx = np.arange(C).reshape(1, C, 1, 1)
    v00 = img[bidx, cidx, x0, y0]
    v01 = img[bidx, cidx, x0, y1]
    v10 = img[bidx, cidx, x1, y0]
    v11 = img[bidx, cidx, x1, y1]
    data = (
        (1 - wx) * (1 - wy) * v00
        + (1 - wx) * wy * v01
        + wx * (1 - wy) * v10
        + wx * wy * v11
    )
    out, tape = _result(data, image, rows, cols)
    if tape is not None:
        inb_x = ((xr >= 0) & (xr <= H - 1)).astype(img.dtype)
        inb_y = ((yr >= 0) & (yr <= W - 1)).astype(img.dtype)

        def _scatter(lin_x, lin_y, weighted):
            lin = ((bidx * C + cidx) * H + lin_x) * W + lin_y
            lin = np.broadcast_to(lin, weighted.shape)
            return np.bincount(
                lin.ravel(), weights=weighted.ravel(), minlength=B * C * H * W
            )

        def bwd(g):
            if image.requires_grad:
                flat = (
                    _scatter(x0, y0, g * (1 - wx) * (1 - wy))
                    + _scatter(x0, y1, g * (1 - wx) * wy)
                    + _scatter(x1, y0, g * wx * (1 - wy))
                    + _scatter(x1, y1, g * wx * wy)
                )
                accumulate_grad(image, flat.reshape(B, C, H, W).astype(img.dtype))
            if rows.requires_grad:
                dvx = (1 - wy) * (v10 - v00) + wy * (v11 - v01)
                accumulate_grad(rows, (g * dvx).sum(axis=1, keepdims=True) * inb_x)
            if cols.requires_grad:
                dvy = (1 - wx) * (v01 - v00) + wx * (v11 - v10)
                accumulate_grad(cols, (g * dvy).sum(axis=1, keepdims=True) * inb_y)

        tape.record(out, bwd)
    return out
