"""Adam training of either architecture under the combined objective, with
deterministic seeding, cross-validation splitting, and per-step loss logs.
"""

from __future__ import annotations

import os
from dataclasses import dataclass, field, replace

import numpy as np

from .data import LABEL_TO_CLASS, Dataset, ManifestRow, augment_rotate, \
    dynamic_compress, extract_inscribed_patches
from .network import Architecture, NetworkParams, forward, init_params, save_checkpoint
from .objective import objective_gradients
from .tensor import Rng

MODES = ("baseline", "enhanced")
SCHEMES = ("lopo", "kfold10", "holdout33")


class TrainingError(Exception):
    pass


@dataclass
class TrainingConfig:
    alpha: float = 0.01          # Adam step size
    beta1: float = 0.9
    beta2: float = 0.999
    eps_adam: float = 1e-8
    epochs: int = 50
    steps_per_epoch: int = 100
    batch_size: int = 16
    weight_decay: float = 1e-4   # L2 decay inside the reconstruction cost
    lambda_s: float = 0.1        # sparsity entropy weight
    w_rec: float = 1.0           # reconstruction cost weight against CE
    mode: str = "enhanced"
    seed: int = 0

    def __post_init__(self):
        for name in ("alpha", "beta1", "beta2", "eps_adam", "weight_decay",
                     "lambda_s", "w_rec"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be non-negative")
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}, got {self.mode!r}")
        if min(self.epochs, self.steps_per_epoch, self.batch_size) < 1:
            raise ValueError("epochs, steps_per_epoch and batch_size must be >= 1")

    def effective_weights(self) -> tuple[float, float, float]:
        """(lam, lam_s, w_rec); baseline mode forces zero mr/s contributions."""
        if self.mode == "baseline":
            return self.weight_decay, 0.0, 0.0
        return self.weight_decay, self.lambda_s, self.w_rec


@dataclass(frozen=True)
class Split:
    train_ids: tuple[str, ...]
    test_ids: tuple[str, ...]
    scheme: str
    name: str


def _stratified_pick(rows: list[ManifestRow], seed: int):
    """Per-label manifest indices in a seeded shuffled order."""
    by_label: dict[str, list[int]] = {}
    for i, r in enumerate(rows):
        by_label.setdefault(r.label, []).append(i)
    rng = Rng(seed).derive(7)
    out = {}
    for li, (label, idxs) in enumerate(sorted(by_label.items())):
        perm = rng.derive(li).permutation(len(idxs))
        out[label] = [idxs[int(p)] for p in perm]
    return out


def make_splits(rows: list[ManifestRow], scheme: str, seed: int) -> list[Split]:
    """lopo: one split per patient; kfold10: stratified 10-fold partition;
    holdout33: one stratified 67/33 split (test side 33% of the images, +-1).
    """
    if scheme not in SCHEMES:
        raise ValueError(f"unknown split scheme {scheme!r}, expected one of {SCHEMES}")
    ids = [r.image_id for r in rows]
    if scheme == "lopo":
        patients = sorted({r.patient_id for r in rows})
        if len(patients) < 2:
            raise ValueError("leave-one-patient-out needs at least 2 patients")
        splits = []
        for p in patients:
            test = tuple(r.image_id for r in rows if r.patient_id == p)
            train = tuple(r.image_id for r in rows if r.patient_id != p)
            splits.append(Split(train, test, "lopo", f"lopo_{p}"))
        return splits
    shuffled = _stratified_pick(rows, seed)
    if scheme == "kfold10":
        folds: list[list[int]] = [[] for _ in range(10)]
        for order in shuffled.values():
            for j, idx in enumerate(order):
                folds[j % 10].append(idx)
        splits = []
        for k, fold in enumerate(folds):
            test = tuple(ids[i] for i in sorted(fold))
            train = tuple(ids[i] for i in sorted(set(range(len(rows))) - set(fold)))
            splits.append(Split(train, test, "kfold10", f"fold_{k:02d}"))
        return splits
    # holdout33
    test_idx: set[int] = set()
    for order in shuffled.values():
        k = int(round(0.33 * len(order)))
        test_idx.update(order[:k])
    test = tuple(ids[i] for i in sorted(test_idx))
    train = tuple(ids[i] for i in sorted(set(range(len(rows))) - test_idx))
    return [Split(train, test, "holdout33", "holdout33")]


def build_patch_pool(
    dataset: Dataset, image_ids: tuple[str, ...] | list[str], patch_size: int,
    seed: int, augment: bool = True,
) -> tuple[np.ndarray, np.ndarray]:
    """Decode, (optionally) rotate-augment, compress and tile images into
    one normalized patch tensor (n, 1, P, P) with class labels."""
    aug_rng = Rng(seed).derive(2)
    xs, ys = [], []
    for k, image_id in enumerate(image_ids):
        img = dataset.load_image(image_id)
        variants = [img]
        if augment:
            variants.append(augment_rotate(img, aug_rng.derive(k))[0])
        for v in variants:
            img8 = dynamic_compress(v)
            for patch in extract_inscribed_patches(img8, v.fov, patch_size, image_id):
                xs.append(patch.normalized())
                ys.append(LABEL_TO_CLASS[img.label])
    if not xs:
        raise TrainingError("no patches could be extracted from the training split")
    return np.stack(xs)[:, None, :, :], np.asarray(ys, dtype=np.int64)


def adam_step(
    theta: dict[str, np.ndarray],
    grads: dict[str, np.ndarray],
    m: dict[str, np.ndarray],
    v: dict[str, np.ndarray],
    config: TrainingConfig,
    t: int,
) -> tuple[dict, dict, dict]:
    """One bias-corrected Adam update; returns fresh (theta, m, v) dicts."""
    if t < 1:
        raise ValueError(f"step index must be >= 1, got {t}")
    b1, b2 = config.beta1, config.beta2
    nt, nm, nv = {}, {}, {}
    for k in sorted(theta):
        g = grads[k]
        if g.shape != theta[k].shape:
            raise ValueError(f"gradient shape {g.shape} does not match {k} {theta[k].shape}")
        nm[k] = b1 * m[k] + (1.0 - b1) * g
        nv[k] = b2 * v[k] + (1.0 - b2) * (g * g)
        mhat = nm[k] / (1.0 - b1**t)
        vhat = nv[k] / (1.0 - b2**t)
        nt[k] = theta[k] - config.alpha * mhat / (np.sqrt(vhat) + config.eps_adam)
    return nt, nm, nv


@dataclass
class StepRow:
    step: int
    epoch: int
    ce: float
    mr: float
    s: float
    total: float


class StepLogWriter:
    """Incremental CSV step log; each row is flushed as written."""

    def __init__(self, path: str):
        self.f = open(path, "w", newline="\n")
        self.f.write("step,epoch,ce,mr,s,total\n")
        self.f.flush()

    def write(self, r: StepRow) -> None:
        self.f.write(f"{r.step},{r.epoch},{r.ce!r},{r.mr!r},{r.s!r},{r.total!r}\n")
        self.f.flush()

    def close(self) -> None:
        self.f.close()


@dataclass
class TrainResult:
    params: NetworkParams
    log: list[StepRow] = field(default_factory=list)


def _epoch_batches(n: int, cfg: TrainingConfig, shuffle_rng: Rng, epoch: int):
    """Seeded without-replacement batches; reshuffles when the pool runs dry.

    The permutation for (epoch, cycle) depends only on (seed, epoch, cycle),
    so an m-epoch run is a bitwise prefix of any longer run.
    """
    buf: list[int] = []
    cycle = 0
    for _ in range(cfg.steps_per_epoch):
        while len(buf) < cfg.batch_size:
            buf.extend(int(i) for i in shuffle_rng.derive(epoch, cycle).permutation(n))
            cycle += 1
        batch, buf = buf[: cfg.batch_size], buf[cfg.batch_size :]
        yield np.asarray(batch, dtype=np.int64)


def train(
    dataset: Dataset,
    split: Split,
    config: TrainingConfig,
    arch: Architecture,
    out_dir: str | None = None,
) -> TrainResult:
    """Run the full optimization loop for one split.

    Per step: seeded batch, mode-dependent forward, joint gradients, Adam.
    Writes steps.csv, a per-epoch last.ckpt and a final.ckpt when out_dir
    is given. A non-finite loss aborts with the step index.
    """
    if not split.train_ids:
        raise TrainingError("training split is empty")
    if arch.mode != config.mode:
        arch = replace(arch, mode=config.mode)
    X, y = build_patch_pool(dataset, split.train_ids, arch.patch_size, config.seed)
    root = Rng(config.seed)
    params = init_params(arch, root.derive(1))
    shuffle_rng = root.derive(3)
    lam, lam_s, w_rec = config.effective_weights()

    writer = None
    if out_dir is not None:
        os.makedirs(out_dir, exist_ok=True)
        writer = StepLogWriter(os.path.join(out_dir, "steps.csv"))
    log: list[StepRow] = []
    t = 0
    try:
        for epoch in range(config.epochs):
            for batch_idx in _epoch_batches(len(y), config, shuffle_rng, epoch):
                t += 1
                trace = forward(X[batch_idx], params, train=True)
                lb, grads = objective_gradients(params, trace, y[batch_idx],
                                                lam, lam_s, w_rec)
                if not np.isfinite(lb.total):
                    raise TrainingError(
                        f"non-finite loss at step {t} (epoch {epoch}): {lb}"
                    )
                theta = {k: v for k, v in params.tensors().items() if k in grads}
                nt, nm, nv = adam_step(theta, grads, params.adam_m,
                                       params.adam_v, config, t)
                for name, val in nt.items():
                    params.set_tensor(name, val)
                params.adam_m.update(nm)
                params.adam_v.update(nv)
                params.adam_t = t
                row = StepRow(t, epoch, lb.ce, lb.mr, lb.s, lb.total)
                log.append(row)
                if writer:
                    writer.write(row)
            if out_dir is not None:
                save_checkpoint(params, os.path.join(out_dir, "last.ckpt"))
        if out_dir is not None:
            save_checkpoint(params, os.path.join(out_dir, "final.ckpt"))
    finally:
        if writer:
            writer.close()
    return TrainResult(params, log)
