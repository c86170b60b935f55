"""Finite-difference verification of every backward pass and of the full
combined objective through both forward passes.

Central differences at eps=1e-5 on float64; a check passes when the worst
coordinate satisfies |analytic - numeric| / max(|analytic|, |numeric|,
1e-4) < 1e-4 (the floor turns the criterion into an absolute one where
both gradients vanish). Fixtures are drawn away from ReLU and pooling
kinks so the comparison happens where the maps are differentiable.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import layers, objective
from .layers import ConvParams, DenseParams
from .network import Architecture, forward_enhanced, init_params
from .tensor import Rng

EPS = 1e-5
TOL = 1e-4
_FLOOR = 1e-4


@dataclass
class CheckResult:
    name: str
    max_rel_err: float
    worst_coord: tuple
    analytic: float
    numeric: float

    @property
    def ok(self) -> bool:
        return self.max_rel_err < TOL


def _rel_err(a: float, n: float) -> float:
    return abs(a - n) / max(abs(a), abs(n), _FLOOR)


def fd_gradient(f, x: np.ndarray, eps: float = EPS) -> np.ndarray:
    """Central finite differences of a scalar function of one array."""
    g = np.zeros_like(x)
    flat = x.ravel()
    gf = g.ravel()
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + eps
        fp = f()
        flat[i] = orig - eps
        fm = f()
        flat[i] = orig
        gf[i] = (fp - fm) / (2 * eps)
    return g


def compare(name: str, analytic: np.ndarray, numeric: np.ndarray) -> CheckResult:
    worst = (0.0, (), 0.0, 0.0)
    it = np.nditer(analytic, flags=["multi_index"])
    for a in it:
        n = numeric[it.multi_index]
        e = _rel_err(float(a), float(n))
        if e >= worst[0]:
            worst = (e, it.multi_index, float(a), float(n))
    return CheckResult(name, worst[0], worst[1], worst[2], worst[3])


def _rand(rng: Rng, shape, lo=-1.0, hi=1.0) -> np.ndarray:
    return rng.uniform_array(int(np.prod(shape)), lo, hi).reshape(shape)


def check_conv(seed: int, sabotage: bool = False) -> list[CheckResult]:
    rng = Rng(seed).derive(11)
    x = _rand(rng, (1, 2, 6, 6))
    p = ConvParams(_rand(rng, (3, 2, 3, 3)), _rand(rng, (3,)))
    gout = _rand(rng, (1, 3, 4, 4))

    def loss():
        return float((layers.conv_forward(x, p, 1) * gout).sum())

    dx, dw, db = layers.conv_backward(x, p, gout, 1)
    if sabotage:
        dw = dw * 1.01
    return [
        compare("conv.dx", dx, fd_gradient(loss, x)),
        compare("conv.dw", dw, fd_gradient(loss, p.w)),
        compare("conv.db", db, fd_gradient(loss, p.b)),
    ]


def check_deconv(seed: int) -> list[CheckResult]:
    rng = Rng(seed).derive(12)
    x = _rand(rng, (1, 3, 4, 4))
    p = ConvParams(_rand(rng, (3, 2, 3, 3)), _rand(rng, (2,)))
    gout = _rand(rng, (1, 2, 6, 6))

    def loss():
        return float((layers.deconv_forward(x, p, 1) * gout).sum())

    dx, dw, db = layers.deconv_backward(x, p, gout, 1)
    return [
        compare("deconv.dx", dx, fd_gradient(loss, x)),
        compare("deconv.dw", dw, fd_gradient(loss, p.w)),
        compare("deconv.db", db, fd_gradient(loss, p.b)),
    ]


def check_relu(seed: int) -> list[CheckResult]:
    rng = Rng(seed).derive(13)
    x = _rand(rng, (1, 2, 4, 4))
    x[np.abs(x) < 0.05] = 0.1  # keep clear of the kink
    gout = _rand(rng, (1, 2, 4, 4))

    def loss():
        return float((layers.relu(x) * gout).sum())

    dx = layers.relu_backward(x, gout)
    return [compare("relu.dx", dx, fd_gradient(loss, x))]


def check_pool(seed: int) -> list[CheckResult]:
    rng = Rng(seed).derive(14)
    # distinct values with comfortable margins so the argmax never flips
    x = (rng.permutation(2 * 36).astype(np.float64)).reshape(1, 2, 6, 6) * 0.1
    gout = _rand(rng, (1, 2, 2, 2))

    def loss():
        out, _ = layers.maxpool_forward(x, 3, 3)
        return float((out * gout).sum())

    _, idx = layers.maxpool_forward(x, 3, 3)
    dx = layers.maxpool_backward(idx, gout, x.shape)
    return [compare("maxpool.dx", dx, fd_gradient(loss, x))]


def check_unpool(seed: int) -> list[CheckResult]:
    rng = Rng(seed).derive(15)
    base = (rng.permutation(36).astype(np.float64)).reshape(1, 1, 6, 6) * 0.1
    _, idx = layers.maxpool_forward(base, 3, 3)
    pooled = _rand(rng, (1, 1, 2, 2))
    gout = _rand(rng, (1, 1, 6, 6))

    def loss():
        return float((layers.unpool(pooled, idx, base.shape) * gout).sum())

    dp = layers.unpool_backward(idx, gout)
    return [compare("unpool.dpooled", dp, fd_gradient(loss, pooled))]


def check_dense(seed: int) -> list[CheckResult]:
    rng = Rng(seed).derive(16)
    x = _rand(rng, (3, 5)).reshape(3, 5)
    p = DenseParams(_rand(rng, (2, 5)), _rand(rng, (2,)))
    gout = _rand(rng, (3, 2))

    def loss():
        return float((layers.dense_forward(x, p) * gout).sum())

    dx, dw, db = layers.dense_backward(x, p, gout)
    return [
        compare("dense.dx", dx, fd_gradient(loss, x)),
        compare("dense.dw", dw, fd_gradient(loss, p.w)),
        compare("dense.db", db, fd_gradient(loss, p.b)),
    ]


def check_softmax(seed: int) -> list[CheckResult]:
    rng = Rng(seed).derive(17)
    logits = _rand(rng, (4, 2))
    labels = np.array([0, 1, 1, 0])

    def loss():
        return layers.softmax_ce(logits, labels)[1]

    _, _, dlogits = layers.softmax_ce(logits, labels)
    return [compare("softmax_ce.dlogits", dlogits, fd_gradient(loss, logits))]


def micro_architecture(mode: str = "enhanced") -> Architecture:
    """12x12 patch, 2+2 filters: small enough for exhaustive FD checks."""
    return Architecture(patch_size=12, conv1_filters=2, conv1_kernel=5,
                        conv2_filters=2, conv2_kernel=3, pool_window=2,
                        pool_stride=2, mode=mode)


def _safe_batch(params, rng, arch, margin=1e-3, tries=20):
    """Random input whose trace stays clear of ReLU/argmax decision points."""
    for attempt in range(tries):
        x = _rand(rng.derive(attempt), (2, 1, arch.patch_size, arch.patch_size), 0.0, 1.0)
        tr = forward_enhanced(x, params, train=True)
        pres = [tr.a1, tr.a2, tr.d2, tr.b1, tr.b2]
        if min(float(np.abs(p).min()) for p in pres) < margin:
            continue
        tight = False
        for act, win, stride in ((layers.relu(tr.a1), arch.pool_window, arch.pool_stride),
                                 (layers.relu(tr.a2), arch.pool_window, arch.pool_stride)):
            flat = np.ascontiguousarray(
                layers._windows(act, win, win, stride)
            ).reshape(act.shape[0], act.shape[1], -1, win * win)
            srt = np.sort(flat, axis=3)
            if flat.shape[3] > 1 and float((srt[..., -1] - srt[..., -2]).min()) < margin:
                tight = True
                break
        if not tight:
            return x
    return x  # last resort; tolerances usually still hold


def check_objective(seed: int, mode: str = "enhanced") -> list[CheckResult]:
    """FD check of the full combined loss w.r.t. every parameter tensor."""
    from .network import forward_baseline

    arch = micro_architecture(mode)
    rng = Rng(seed).derive(18)
    params = init_params(arch, rng)
    # lift biases so units are active and margins are easy to satisfy
    params.conv1.b += 0.3
    params.conv2.b += 0.3
    params.deconv2.b += 0.3
    x = _safe_batch(params, rng.derive(99), arch)
    labels = np.array([0, 1])
    lam, lam_s, w_rec = (1e-2, 0.05, 1.0) if mode == "enhanced" else (0.0, 0.0, 0.0)
    fwd = forward_enhanced if mode == "enhanced" else forward_baseline

    def total() -> float:
        tr = fwd(x, params, train=True)
        lb, _ = objective.objective_gradients(params, tr, labels, lam, lam_s, w_rec)
        return lb.total

    tr = fwd(x, params, train=True)
    _, grads = objective.objective_gradients(params, tr, labels, lam, lam_s, w_rec)

    results = []
    for name, t in params.tensors().items():
        if mode == "baseline" and name.startswith("deconv"):
            continue
        results.append(compare(f"objective[{mode}].{name}", grads[name],
                               fd_gradient(total, t)))
    return results


LAYER_CHECKS = (check_conv, check_deconv, check_relu, check_pool,
                check_unpool, check_dense, check_softmax)


def run_all(seeds: int = 20, sabotage_layer: str | None = None,
            base_seed: int = 0) -> list[CheckResult]:
    """Layer suites over `seeds` seeds plus the full-objective check.

    `sabotage_layer` deliberately corrupts one backward pass (test hook).
    """
    results: list[CheckResult] = []
    for seed in range(base_seed + 1, base_seed + seeds + 1):
        for fn in LAYER_CHECKS:
            if fn is check_conv:
                results.extend(check_conv(seed, sabotage=(sabotage_layer == "conv")))
            else:
                results.extend(fn(seed))
    results.extend(check_objective(base_seed + 1, "enhanced"))
    results.extend(check_objective(base_seed + 2, "enhanced"))
    results.extend(check_objective(base_seed + 3, "baseline"))
    return results
