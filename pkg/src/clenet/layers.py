"""Layer kernels: convolution, max pooling, unpooling, transposed
convolution, dense, ReLU, and softmax cross-entropy, each with a
hand-written backward pass.

All kernels are pure functions over float64 arrays shaped (n, c, h, w);
gradients are returned as fresh arrays. Convolutions are valid-mode (no
padding). The transposed convolution is the exact adjoint of the forward
convolution for the same kernel, which the decoder relies on.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass
class ConvParams:
    """Kernel weights (out_c, in_c, kh, kw) and a per-channel bias.

    The same parameter block serves both roles: used by conv_forward the
    bias has length out_c; used by deconv_forward (adjoint direction,
    producing in_c channels) it has length in_c.
    """

    w: np.ndarray
    b: np.ndarray

    def __post_init__(self):
        if self.w.ndim != 4:
            raise ValueError(f"conv weights must be rank 4, got shape {self.w.shape}")
        if min(self.w.shape) < 1:
            raise ValueError(f"conv weight dims must be >= 1, got {self.w.shape}")
        if self.b.ndim != 1:
            raise ValueError(f"conv bias must be a vector, got shape {self.b.shape}")


@dataclass
class DenseParams:
    w: np.ndarray  # (out_units, in_units)
    b: np.ndarray  # (out_units,)

    def __post_init__(self):
        if self.w.ndim != 2 or self.b.shape != (self.w.shape[0],):
            raise ValueError(
                f"dense params malformed: w {self.w.shape}, b {self.b.shape}"
            )


@dataclass
class PoolIndices:
    """Absolute (row, col) input coordinates of each pooled maximum.

    rows/cols have the pooled output's shape; in_h/in_w record the
    pre-pool spatial dims so unpooling can validate its target.
    """

    rows: np.ndarray
    cols: np.ndarray
    window: int
    stride: int
    in_h: int
    in_w: int


def _out_dim(size: int, k: int, stride: int) -> int:
    return (size - k) // stride + 1


def _windows(x: np.ndarray, kh: int, kw: int, stride: int) -> np.ndarray:
    """Strided read-only view (n, c, oh, ow, kh, kw) of sliding windows."""
    n, c, h, w = x.shape
    oh, ow = _out_dim(h, kh, stride), _out_dim(w, kw, stride)
    s0, s1, s2, s3 = x.strides
    return np.lib.stride_tricks.as_strided(
        x, (n, c, oh, ow, kh, kw), (s0, s1, stride * s2, stride * s3, s2, s3),
        writeable=False,
    )


def _im2col(x: np.ndarray, kh: int, kw: int, stride: int) -> np.ndarray:
    """(n*oh*ow, c*kh*kw) patch matrix; rows ordered (n, oh, ow) row-major."""
    n, c, h, w = x.shape
    oh, ow = _out_dim(h, kh, stride), _out_dim(w, kw, stride)
    win = _windows(x, kh, kw, stride)
    return np.ascontiguousarray(win.transpose(0, 2, 3, 1, 4, 5)).reshape(
        n * oh * ow, c * kh * kw
    )


def _to_channel_major(a: np.ndarray) -> np.ndarray:
    """(n, c, h, w) -> contiguous (c, n*h*w); the copy direction that moves
    whole h*w planes is far cheaper than a channels-last interleave."""
    n, c, h, w = a.shape
    return np.ascontiguousarray(a.transpose(1, 0, 2, 3)).reshape(c, n * h * w)


def _check_conv_pre(x: np.ndarray, p: ConvParams, stride: int) -> tuple[int, int]:
    out_c, in_c, kh, kw = p.w.shape
    n, c, h, w = x.shape
    if c != in_c:
        raise ValueError(f"channel mismatch: input has {c}, kernel expects {in_c}")
    if stride < 1:
        raise ValueError(f"stride must be positive, got {stride}")
    if kh > h or kw > w:
        raise ValueError(f"kernel {kh}x{kw} larger than input {h}x{w}")
    oh, ow = _out_dim(h, kh, stride), _out_dim(w, kw, stride)
    if oh < 1 or ow < 1:
        raise ValueError(f"conv output dims ({oh}, {ow}) not positive")
    return oh, ow


def conv_forward(
    x: np.ndarray, p: ConvParams, stride: int = 1, cols_out: list | None = None
) -> np.ndarray:
    """Valid convolution: out[n,o,i,j] = b[o] + sum W[o]*window(i,j).

    If `cols_out` is given, the im2col matrix is appended to it so the
    backward pass can reuse it. The result is a channel-major view; it is
    not guaranteed C-contiguous.
    """
    oh, ow = _check_conv_pre(x, p, stride)
    out_c, in_c, kh, kw = p.w.shape
    if p.b.shape != (out_c,):
        raise ValueError(f"conv bias must have length {out_c}, got {p.b.shape}")
    n = x.shape[0]
    cols = _im2col(x, kh, kw, stride)
    if cols_out is not None:
        cols_out.append(cols)
    out = p.w.reshape(out_c, -1) @ cols.T  # (out_c, n*oh*ow)
    out += p.b[:, None]
    return out.reshape(out_c, n, oh, ow).transpose(1, 0, 2, 3)


def _fold_colsT(
    gT: np.ndarray, in_shape: tuple, kh: int, kw: int, stride: int
) -> np.ndarray:
    """Scatter-add column gradients (c*kh*kw, n*oh*ow) back onto the raster."""
    n, c, h, w = in_shape
    oh, ow = _out_dim(h, kh, stride), _out_dim(w, kw, stride)
    g6 = gT.reshape(c, kh, kw, n, oh, ow)
    dx = np.zeros(in_shape, dtype=np.float64)
    for i in range(kh):
        for j in range(kw):
            dx[:, :, i : i + (oh - 1) * stride + 1 : stride,
               j : j + (ow - 1) * stride + 1 : stride] += g6[:, i, j].transpose(1, 0, 2, 3)
    return dx


def conv_backward(
    x: np.ndarray,
    p: ConvParams,
    grad_out: np.ndarray,
    stride: int = 1,
    cols: np.ndarray | None = None,
    need_dx: bool = True,
) -> tuple[np.ndarray | None, np.ndarray, np.ndarray]:
    """Exact gradients of conv_forward: (grad_x, grad_w, grad_b)."""
    oh, ow = _check_conv_pre(x, p, stride)
    out_c, in_c, kh, kw = p.w.shape
    n = x.shape[0]
    if grad_out.shape != (n, out_c, oh, ow):
        raise ValueError(
            f"grad_out shape {grad_out.shape} does not match conv output "
            f"{(n, out_c, oh, ow)}"
        )
    if cols is None:
        cols = _im2col(x, kh, kw, stride)
    g2 = _to_channel_major(grad_out)  # (out_c, n*oh*ow)
    grad_w = (g2 @ cols).reshape(p.w.shape)
    grad_b = g2.sum(axis=1)
    grad_x = None
    if need_dx:
        gT = p.w.reshape(out_c, -1).T @ g2  # (in_c*kh*kw, n*oh*ow)
        grad_x = _fold_colsT(gT, x.shape, kh, kw, stride)
    return grad_x, grad_w, grad_b


def deconv_forward(x: np.ndarray, p: ConvParams, stride: int = 1) -> np.ndarray:
    """Transposed convolution: the adjoint of conv_forward for p.w.

    Consumes (n, out_c, h, w) and produces (n, in_c, (h-1)*stride + kh,
    (w-1)*stride + kw), plus a per-output-channel bias of length in_c.
    """
    out_c, in_c, kh, kw = p.w.shape
    n, c, h, w = x.shape
    if c != out_c:
        raise ValueError(f"channel mismatch: input has {c}, adjoint kernel expects {out_c}")
    if p.b.shape != (in_c,):
        raise ValueError(f"deconv bias must have length {in_c}, got {p.b.shape}")
    if stride < 1:
        raise ValueError(f"stride must be positive, got {stride}")
    oh, ow = (h - 1) * stride + kh, (w - 1) * stride + kw
    xm = _to_channel_major(x)  # (out_c, n*h*w)
    gT = p.w.reshape(out_c, -1).T @ xm
    out = _fold_colsT(gT, (n, in_c, oh, ow), kh, kw, stride)
    out += p.b[None, :, None, None]
    return out


def deconv_backward(
    x: np.ndarray, p: ConvParams, grad_out: np.ndarray, stride: int = 1
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Exact gradients of deconv_forward: (grad_x, grad_w, grad_b).

    Since deconv is the adjoint of conv, grad_x is a plain convolution of
    grad_out with the same kernel, and grad_w is the conv weight-gradient
    with the roles of input and output-gradient swapped.
    """
    out_c, in_c, kh, kw = p.w.shape
    n, c, h, w = x.shape
    oh, ow = (h - 1) * stride + kh, (w - 1) * stride + kw
    if grad_out.shape != (n, in_c, oh, ow):
        raise ValueError(
            f"grad_out shape {grad_out.shape} does not match deconv output "
            f"{(n, in_c, oh, ow)}"
        )
    cols = _im2col(grad_out, kh, kw, stride)
    xm = _to_channel_major(x)  # (out_c, n*h*w)
    grad_w = (xm @ cols).reshape(p.w.shape)
    grad_x = (p.w.reshape(out_c, -1) @ cols.T).reshape(out_c, n, h, w).transpose(1, 0, 2, 3)
    grad_b = grad_out.sum(axis=(0, 2, 3))
    return grad_x, grad_w, grad_b


def maxpool_forward(
    x: np.ndarray, window: int, stride: int
) -> tuple[np.ndarray, PoolIndices]:
    """Max over sliding windows; ties go to the first cell in row-major scan."""
    n, c, h, w = x.shape
    if window < 1 or stride < 1:
        raise ValueError(f"window and stride must be positive, got {window}, {stride}")
    if window > h or window > w:
        raise ValueError(f"pool window {window} larger than input {h}x{w}")
    oh, ow = _out_dim(h, window, stride), _out_dim(w, window, stride)
    flat = np.ascontiguousarray(_windows(x, window, window, stride)).reshape(
        n, c, oh, ow, window * window
    )
    am = flat.argmax(axis=4)  # first occurrence on ties, row-major in the window
    vals = np.take_along_axis(flat, am[..., None], axis=4)[..., 0]
    rows = np.arange(oh, dtype=np.int64)[:, None] * stride + am // window
    cols = np.arange(ow, dtype=np.int64)[None, :] * stride + am % window
    return vals, PoolIndices(rows, cols, window, stride, h, w)


def _scatter_sum(values: np.ndarray, idx: PoolIndices, out_shape: tuple) -> np.ndarray:
    n, c, h, w = out_shape
    if idx.rows.shape != values.shape:
        raise ValueError(
            f"indices shape {idx.rows.shape} not congruent with values {values.shape}"
        )
    if (idx.rows < 0).any() or (idx.rows >= h).any() or (idx.cols < 0).any() or (idx.cols >= w).any():
        raise ValueError("pool indices out of range for target shape")
    nc = n * c
    cell = idx.rows.reshape(nc, -1) * w + idx.cols.reshape(nc, -1)
    flat_idx = (cell + (np.arange(nc, dtype=np.int64) * (h * w))[:, None]).ravel()
    out = np.bincount(flat_idx, weights=values.ravel(), minlength=n * c * h * w)
    return out.reshape(out_shape)


def maxpool_backward(
    idx: PoolIndices, grad_out: np.ndarray, in_shape: tuple
) -> np.ndarray:
    """Route output gradients to their argmax cells (summing collisions)."""
    return _scatter_sum(grad_out, idx, in_shape)


def unpool(pooled: np.ndarray, idx: PoolIndices, out_shape: tuple) -> np.ndarray:
    """Scatter pooled values to their recorded argmax coordinates, 0 elsewhere.

    Overlapping windows (stride < window) may target the same cell; their
    contributions sum.
    """
    n, c, h, w = out_shape
    if (h, w) != (idx.in_h, idx.in_w):
        raise ValueError(
            f"out_shape {(h, w)} does not match recorded pre-pool dims "
            f"{(idx.in_h, idx.in_w)}"
        )
    return _scatter_sum(pooled, idx, out_shape)


def unpool_backward(idx: PoolIndices, grad_out: np.ndarray) -> np.ndarray:
    """Gather gradients back from the scatter targets onto the pooled cells."""
    n, c, oh, ow = idx.rows.shape
    nn = np.arange(n)[:, None, None, None]
    cc = np.arange(c)[None, :, None, None]
    return grad_out[nn, cc, idx.rows, idx.cols]


def relu(x: np.ndarray) -> np.ndarray:
    return np.maximum(x, 0.0)


def relu_backward(x: np.ndarray, grad_out: np.ndarray) -> np.ndarray:
    # subgradient at exactly 0 is defined as 0
    return grad_out * (x > 0.0)


def dense_forward(x: np.ndarray, p: DenseParams) -> np.ndarray:
    """logits = x @ W.T + b for a batch of flattened feature vectors (n, in)."""
    if x.ndim != 2 or x.shape[1] != p.w.shape[1]:
        raise ValueError(
            f"dense input length {x.shape} does not match in_units {p.w.shape[1]}"
        )
    return x @ p.w.T + p.b


def dense_backward(
    x: np.ndarray, p: DenseParams, grad_out: np.ndarray
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    if grad_out.shape != (x.shape[0], p.w.shape[0]):
        raise ValueError(
            f"grad_out shape {grad_out.shape} does not match logits "
            f"{(x.shape[0], p.w.shape[0])}"
        )
    grad_w = grad_out.T @ x
    grad_b = grad_out.sum(axis=0)
    grad_x = grad_out @ p.w
    return grad_x, grad_w, grad_b


def softmax_ce(
    logits: np.ndarray, labels: np.ndarray
) -> tuple[np.ndarray, float, np.ndarray]:
    """Stabilized softmax + mean cross-entropy over the batch.

    Returns (probs, loss, grad_logits) with grad_logits already divided by
    the batch size, i.e. the gradient of the mean loss.
    """
    labels = np.asarray(labels)
    n, k = logits.shape
    if labels.shape != (n,):
        raise ValueError(f"labels shape {labels.shape} does not match batch {n}")
    if (labels < 0).any() or (labels >= k).any():
        raise ValueError(f"labels must lie in [0, {k}), got {labels}")
    shifted = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    probs = e / e.sum(axis=1, keepdims=True)
    picked = probs[np.arange(n), labels]
    loss = float(-np.log(picked).mean())
    grad = probs.copy()
    grad[np.arange(n), labels] -= 1.0
    return probs, loss, grad / n
