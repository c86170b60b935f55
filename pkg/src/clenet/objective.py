"""Loss algebra: sparsity entropy over the code, reconstruction cost with
weight decay, their weighted combination with the classification
cross-entropy, and the joint gradient assembly through both forward passes.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import TYPE_CHECKING, Iterable

import numpy as np

from . import layers

if TYPE_CHECKING:  # pragma: no cover
    from .network import ForwardTrace, NetworkParams


@dataclass
class LossBreakdown:
    """Per-step loss components; `total` is exactly ce + w_rec*mr + lam_s*s."""

    ce: float
    mr: float
    s: float
    total: float


def sparsity_S(code: np.ndarray) -> float:
    """Entropy of each sample's per-filter activation mass, averaged.

    For sample i with per-filter totals t_j and grand total T, the share
    r_j = t_j / T contributes -r_j * ln(r_j), with 0*ln(0) = 0. Samples
    whose code is entirely zero contribute 0. Requires a non-negative
    (post-ReLU) code.
    """
    if code.ndim != 4:
        raise ValueError(f"code must be rank 4, got shape {code.shape}")
    if (code < 0).any():
        raise ValueError("sparsity entropy requires non-negative activations")
    t = code.sum(axis=(2, 3))  # (n, filters)
    total = t.sum(axis=1)  # (n,)
    n = code.shape[0]
    s = 0.0
    for i in range(n):
        if total[i] <= 0.0:
            continue
        r = t[i] / total[i]
        pos = r > 0.0
        s += float(-(r[pos] * np.log(r[pos])).sum())
    return s / n


def sparsity_S_grad(code: np.ndarray) -> np.ndarray:
    """d sparsity_S / d code. Zero-total filters and samples get gradient 0."""
    if (code < 0).any():
        raise ValueError("sparsity entropy requires non-negative activations")
    n, k, h, w = code.shape
    t = code.sum(axis=(2, 3))
    total = t.sum(axis=1)
    g = np.zeros((n, k), dtype=np.float64)
    for i in range(n):
        if total[i] <= 0.0:
            continue
        r = t[i] / total[i]
        pos = r > 0.0
        ent = float(-(r[pos] * np.log(r[pos])).sum())
        # dS_i/dt_j = -(ln r_j + S_i) / T; every cell of filter j shares it
        g[i, pos] = -(np.log(r[pos]) + ent) / total[i] / n
    return np.broadcast_to(g[:, :, None, None], code.shape).copy()


def reconstruction_cost(
    x: np.ndarray, x_hat: np.ndarray, weights: Iterable[np.ndarray], lam: float
) -> float:
    """Mean half squared reconstruction error plus (lam/2) * sum ||W||^2."""
    if x.shape != x_hat.shape:
        raise ValueError(f"shape mismatch: x {x.shape} vs x_hat {x_hat.shape}")
    if lam < 0:
        raise ValueError(f"weight decay must be non-negative, got {lam}")
    n = x.shape[0]
    diff = x_hat - x
    data_term = 0.5 * float((diff * diff).sum()) / n
    decay = sum(float((w * w).sum()) for w in weights)
    return data_term + 0.5 * lam * decay


def combined_objective(
    ce: float, mr: float, s: float, lam_s: float, w_rec: float
) -> LossBreakdown:
    """total = ce + w_rec*mr + lam_s*s, components stored unscaled."""
    if lam_s < 0 or w_rec < 0:
        raise ValueError(f"loss weights must be non-negative, got lam_s={lam_s}, w_rec={w_rec}")
    return LossBreakdown(ce=ce, mr=mr, s=s, total=ce + w_rec * mr + lam_s * s)


def objective_gradients(
    params: "NetworkParams",
    trace: "ForwardTrace",
    labels: np.ndarray,
    lam: float,
    lam_s: float,
    w_rec: float,
) -> tuple[LossBreakdown, dict[str, np.ndarray]]:
    """Loss breakdown and exact gradients of `total` w.r.t. every parameter.

    Requires a training-mode trace (intermediates retained). For baseline
    traces mr and s are exactly 0 and only the classification path
    contributes. Weight decay (lam * W, scaled by w_rec) applies to conv,
    deconv and dense weights, never biases.
    """
    if not trace.train:
        raise ValueError("gradients need a training-mode trace with intermediates")
    n = trace.x.shape[0]
    c1, c2 = params.conv1, params.conv2

    probs, ce, dlogits = layers.softmax_ce(trace.logits, labels)
    dfeats, d_head_w, d_head_b = layers.dense_backward(trace.feats, params.head, dlogits)
    dcode_cls = dfeats.reshape(trace.zp.shape if trace.mode == "enhanced" else trace.z.shape)

    grads = {
        "conv1.w": np.zeros_like(c1.w), "conv1.b": np.zeros_like(c1.b),
        "conv2.w": np.zeros_like(c2.w), "conv2.b": np.zeros_like(c2.b),
        "head.w": d_head_w, "head.b": d_head_b,
    }

    if trace.mode == "baseline":
        _encoder_backward(params, trace, dcode_cls, grads,
                          pre1=trace.a1, pre2=trace.a2, inp=trace.x,
                          mid=trace.p1, idx1=trace.idx1, idx2=trace.idx2,
                          cols1=trace.cols1, cols2=trace.cols2, need_dx=False)
        return combined_objective(ce, 0.0, 0.0, lam_s, w_rec), grads

    d1, d2p = params.deconv1, params.deconv2
    grads.update({
        "deconv1.w": np.zeros_like(d1.w), "deconv1.b": np.zeros_like(d1.b),
        "deconv2.w": np.zeros_like(d2p.w), "deconv2.b": np.zeros_like(d2p.b),
    })

    weights = [c1.w, c2.w, d1.w, d2p.w, params.head.w]
    mr = reconstruction_cost(trace.x, trace.x_hat, weights, lam)
    s = sparsity_S(trace.z)

    # classification path back through the second (re-encoding) pass
    dx_hat = _encoder_backward(params, trace, dcode_cls, grads,
                               pre1=trace.b1, pre2=trace.b2, inp=trace.x_hat,
                               mid=trace.q1, idx1=trace.jdx1, idx2=trace.jdx2,
                               cols1=trace.cols_b1, cols2=trace.cols_b2, need_dx=True)

    # reconstruction data term
    dx_hat = dx_hat + w_rec * (trace.x_hat - trace.x) / n

    # decoder
    du1, dw, db = layers.deconv_backward(trace.u1, d1, dx_hat)
    grads["deconv1.w"] += dw
    grads["deconv1.b"] += db
    drd2 = layers.unpool_backward(trace.idx1, du1)
    dd2 = layers.relu_backward(trace.d2, drd2)
    du2, dw, db = layers.deconv_backward(trace.u2, d2p, dd2)
    grads["deconv2.w"] += dw
    grads["deconv2.b"] += db
    dz = layers.unpool_backward(trace.idx2, du2)

    # sparsity path acts directly on the code
    if lam_s != 0.0:
        dz = dz + lam_s * sparsity_S_grad(trace.z)

    # first (encoding) pass
    _encoder_backward(params, trace, dz, grads,
                      pre1=trace.a1, pre2=trace.a2, inp=trace.x,
                      mid=trace.p1, idx1=trace.idx1, idx2=trace.idx2,
                      cols1=trace.cols1, cols2=trace.cols2, need_dx=False)

    if lam != 0.0 and w_rec != 0.0:
        grads["conv1.w"] += w_rec * lam * c1.w
        grads["conv2.w"] += w_rec * lam * c2.w
        grads["deconv1.w"] += w_rec * lam * d1.w
        grads["deconv2.w"] += w_rec * lam * d2p.w
        grads["head.w"] += w_rec * lam * params.head.w

    return combined_objective(ce, mr, s, lam_s, w_rec), grads


def _encoder_backward(params, trace, dcode, grads, *, pre1, pre2, inp, mid,
                      idx1, idx2, cols1, cols2, need_dx):
    """Backprop dcode through pool2/conv2/pool1/conv1, accumulating into grads.

    `mid` is the pooled conv1 activation feeding conv2. Returns the gradient
    w.r.t. the encoder input when need_dx is true.
    """
    dr2 = layers.maxpool_backward(idx2, dcode, pre2.shape)
    da2 = layers.relu_backward(pre2, dr2)
    dp1, dw, db = layers.conv_backward(mid, params.conv2, da2, cols=cols2)
    grads["conv2.w"] += dw
    grads["conv2.b"] += db
    dr1 = layers.maxpool_backward(idx1, dp1, pre1.shape)
    da1 = layers.relu_backward(pre1, dr1)
    dx, dw, db = layers.conv_backward(inp, params.conv1, da1, cols=cols1, need_dx=need_dx)
    grads["conv1.w"] += dw
    grads["conv1.b"] += db
    return dx
