"""Per-image patch-probability fusion, classification metrics, Wilson
confidence intervals, wall-clock timing, and report emission in the
paper-style per-site-group table layout.
"""

from __future__ import annotations

import math
import os
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from .data import Dataset, CleImage, LABEL_TO_CLASS, dynamic_compress, \
    extract_inscribed_patches, SITES
from .network import NetworkParams, predict

# 97.5% normal quantile for the 95% Wilson score interval
_Z95 = 1.959963984540054

FUSIONS = ("mean", "max")

_FOOTER_NOTES = (
    "fusion and confidence-range formulas are substitutes: mean patch "
    "fusion and the 95% Wilson score interval",
    "sparsity entropy uses the natural logarithm (upper bound ln K for K "
    "encoder filters)",
)


def fuse_patches(patch_probs: list[float], method: str = "mean") -> float:
    """Combine per-patch carcinoma probabilities into one image probability."""
    if len(patch_probs) == 0:
        raise ValueError("cannot fuse an empty patch probability list")
    if method == "mean":
        return math.fsum(patch_probs) / len(patch_probs)
    if method == "max":
        return max(patch_probs)
    raise ValueError(f"unknown fusion {method!r}, expected one of {FUSIONS}")


def wilson_interval(correct: int, total: int) -> tuple[float, float]:
    """95% Wilson score interval for a binomial proportion."""
    if total < 1:
        raise ValueError("total must be >= 1")
    if not 0 <= correct <= total:
        raise ValueError(f"need 0 <= correct <= total, got {correct}/{total}")
    z = _Z95
    p = correct / total
    denom = 1.0 + z * z / total
    center = (p + z * z / (2 * total)) / denom
    half = z * math.sqrt(p * (1 - p) / total + z * z / (4 * total * total)) / denom
    return max(center - half, 0.0), min(center + half, 1.0)


def auc_score(pos_scores: np.ndarray, neg_scores: np.ndarray) -> float:
    """Pairwise concordance with ties counting 1/2, via average ranks.

    Average ranks are half-integers, so the rank route is exactly equal to
    brute-force pair enumeration.
    """
    pos = np.asarray(pos_scores, dtype=np.float64)
    neg = np.asarray(neg_scores, dtype=np.float64)
    if pos.size == 0 or neg.size == 0:
        raise ValueError("AUC needs at least one positive and one negative")
    scores = np.concatenate([pos, neg])
    order = np.argsort(scores, kind="mergesort")
    ranks = np.empty(scores.size, dtype=np.float64)
    i = 0
    while i < scores.size:
        j = i
        while j < scores.size and scores[order[j]] == scores[order[i]]:
            j += 1
        ranks[order[i:j]] = (i + j - 1) / 2.0 + 1.0
        i = j
    u = ranks[: pos.size].sum() - pos.size * (pos.size + 1) / 2.0
    return float(u) / (pos.size * neg.size)


@dataclass
class ImageResult:
    image_id: str
    site: str
    true_label: str
    fused_prob: float
    pred_label: str
    seconds: float


@dataclass
class GroupMetrics:
    group: str
    images: int
    accuracy: float
    sensitivity: float | None
    specificity: float | None
    auc: float | None
    ci_lo: float
    ci_hi: float
    mean_seconds: float


def compute_metrics(rows: list[ImageResult], group: str = "overall") -> GroupMetrics:
    """Aggregate metrics for a set of per-image rows.

    With single-class ground truth, sensitivity/specificity/AUC are
    undefined (None); accuracy and its Wilson CI are still computed.
    """
    if not rows:
        raise ValueError("cannot compute metrics over zero images")
    y = np.array([LABEL_TO_CLASS[r.true_label] for r in rows])
    pred = np.array([LABEL_TO_CLASS[r.pred_label] for r in rows])
    probs = np.array([r.fused_prob for r in rows])
    correct = int((y == pred).sum())
    acc = correct / len(rows)
    lo, hi = wilson_interval(correct, len(rows))
    mean_s = math.fsum(r.seconds for r in rows) / len(rows)
    if y.min() == y.max():
        return GroupMetrics(group, len(rows), acc, None, None, None, lo, hi, mean_s)
    tp = int(((y == 1) & (pred == 1)).sum())
    fn = int(((y == 1) & (pred == 0)).sum())
    tn = int(((y == 0) & (pred == 0)).sum())
    fp = int(((y == 0) & (pred == 1)).sum())
    sens = tp / (tp + fn)
    spec = tn / (tn + fp)
    auc = auc_score(probs[y == 1], probs[y == 0])
    return GroupMetrics(group, len(rows), acc, sens, spec, auc, lo, hi, mean_s)


@dataclass
class EvalReport:
    rows: list[ImageResult]
    notes: tuple[str, ...] = _FOOTER_NOTES
    param_counts: dict | None = None

    def groups(self) -> list[GroupMetrics]:
        out = []
        for site in SITES:
            sub = [r for r in self.rows if r.site == site]
            if sub:
                out.append(compute_metrics(sub, group=site))
        out.append(compute_metrics(self.rows, group="overall"))
        return out

    def overall(self) -> GroupMetrics:
        return compute_metrics(self.rows)


def image_probability(
    params: NetworkParams, img: CleImage, fusion: str = "mean"
) -> float:
    """compress -> patchify -> per-patch predict -> fuse, for one image."""
    img8 = dynamic_compress(img)
    patches = extract_inscribed_patches(img8, img.fov, params.arch.patch_size)
    batch = np.stack([p.normalized() for p in patches])[:, None, :, :]
    probs = predict(batch, params)
    return fuse_patches([float(p) for p in probs], fusion)


def timed_inference(
    params: NetworkParams, img: CleImage, fusion: str = "mean"
) -> tuple[float, float]:
    """(fused probability, wall seconds) for one image, monotonic clock."""
    t0 = time.perf_counter()
    prob = image_probability(params, img, fusion)
    return prob, time.perf_counter() - t0


def evaluate_images(
    params: NetworkParams,
    dataset: Dataset,
    image_ids: list[str] | tuple[str, ...],
    fusion: str = "mean",
    threads: int = 1,
) -> EvalReport:
    """Evaluate each image; results are aggregated in manifest order."""
    if fusion not in FUSIONS:
        raise ValueError(f"unknown fusion {fusion!r}")
    ordered = [i for i in dataset.ids() if i in set(image_ids)]

    def one(image_id: str) -> ImageResult:
        img = dataset.load_image(image_id)
        prob, secs = timed_inference(params, img, fusion)
        pred = "carcinoma" if prob > 0.5 else "normal"
        return ImageResult(image_id, img.site, img.label, prob, pred, secs)

    if threads == 0:
        threads = os.cpu_count() or 1
    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as ex:
            rows = list(ex.map(one, ordered))
    else:
        rows = [one(i) for i in ordered]
    report = EvalReport(rows)
    report.param_counts = params.arch.param_counts()
    return report


# --- emission ----------------------------------------------------------------

_CSV_HEADER = "image_id,site,true_label,fused_prob,pred_label,seconds"
_AGG_HEADER = ("# group,images,accuracy,sensitivity,specificity,auc,"
               "ci_lo,ci_hi,mean_seconds")


def _fmt_opt(v: float | None) -> str:
    return "NA" if v is None else repr(v)


def emit_report(report: EvalReport, path: str, fmt: str = "csv") -> None:
    if fmt == "csv":
        _emit_csv(report, path)
    elif fmt in ("md", "markdown"):
        _emit_markdown(report, path)
    else:
        raise ValueError(f"unknown report format {fmt!r}, expected csv or md")


def _emit_csv(report: EvalReport, path: str) -> None:
    lines = [_CSV_HEADER]
    for r in report.rows:
        lines.append(f"{r.image_id},{r.site},{r.true_label},{r.fused_prob!r},"
                     f"{r.pred_label},{r.seconds!r}")
    lines.append(_AGG_HEADER)
    for g in report.groups():
        lines.append(f"# {g.group},{g.images},{g.accuracy!r},"
                     f"{_fmt_opt(g.sensitivity)},{_fmt_opt(g.specificity)},"
                     f"{_fmt_opt(g.auc)},{g.ci_lo!r},{g.ci_hi!r},{g.mean_seconds!r}")
    if report.param_counts:
        pc = report.param_counts
        lines.append(f"# params,baseline={pc['baseline']},decoder={pc['decoder']},"
                     f"enhanced={pc['enhanced']}")
    for note in report.notes:
        lines.append(f"# note: {note}")
    with open(path, "w", newline="\n") as f:
        f.write("\n".join(lines) + "\n")


_GROUP_TITLES = {
    "vocal_fold": "Vocal fold area",
    "oral_cavity": "Oral Cavity",
    "both": "Vocal Chord + Oral Cavity",
    "overall": "Overall",
}


def _pct(v: float | None) -> str:
    return "NA" if v is None else f"{100.0 * v:.4f}"


def _emit_markdown(report: EvalReport, path: str) -> None:
    lines = [
        "| Sample group details | Images | Accuracy (%) | Sensitivity (%) | "
        "Specificity (%) | AUC | 95% CI low | 95% CI high | Processing time (sec) |",
        "|---|---|---|---|---|---|---|---|---|",
    ]
    for g in report.groups():
        auc = "NA" if g.auc is None else f"{g.auc:.4f}"
        lines.append(
            f"| {_GROUP_TITLES.get(g.group, g.group)} | {g.images} | "
            f"{_pct(g.accuracy)} | {_pct(g.sensitivity)} | {_pct(g.specificity)} | "
            f"{auc} | {g.ci_lo:.4f} | {g.ci_hi:.4f} | {g.mean_seconds:.4f} |"
        )
    lines.append("")
    if report.param_counts:
        pc = report.param_counts
        lines.append(f"Parameters: baseline {pc['baseline']}, decoder "
                     f"{pc['decoder']}, enhanced {pc['enhanced']}.")
    for note in report.notes:
        lines.append(f"Note: {note}")
    with open(path, "w", newline="\n") as f:
        f.write("\n".join(lines) + "\n")


def load_report_csv(path: str) -> tuple[list[ImageResult], list[GroupMetrics]]:
    """Parse a CSV report back into rows and aggregates."""
    rows, groups = [], []
    with open(path) as f:
        lines = [ln.rstrip("\n") for ln in f]
    if not lines or lines[0] != _CSV_HEADER:
        raise ValueError(f"{path}: not an evaluation report")

    def opt(tok: str) -> float | None:
        return None if tok == "NA" else float(tok)

    for ln in lines[1:]:
        if ln.startswith("#"):
            body = ln[1:].strip()
            if body.startswith(("group,", "note:", "params,")):
                continue
            toks = body.split(",")
            groups.append(GroupMetrics(
                toks[0], int(toks[1]), float(toks[2]), opt(toks[3]),
                opt(toks[4]), opt(toks[5]), float(toks[6]), float(toks[7]),
                float(toks[8]),
            ))
        elif ln:
            toks = ln.split(",")
            rows.append(ImageResult(toks[0], toks[1], toks[2], float(toks[3]),
                                    toks[4], float(toks[5])))
    return rows, groups


def emit_comparison(
    path_a: str, path_b: str, out_path: str, label_a: str = "A", label_b: str = "B"
) -> None:
    """Side-by-side comparison of two reports with delta columns (B - A).

    The two reports must cover the same image set.
    """
    rows_a, groups_a = load_report_csv(path_a)
    rows_b, groups_b = load_report_csv(path_b)
    ids_a = {r.image_id for r in rows_a}
    ids_b = {r.image_id for r in rows_b}
    if ids_a != ids_b:
        diff = sorted(ids_a ^ ids_b)
        raise ValueError(f"reports cover different image sets; symmetric "
                         f"difference: {diff}")
    ga = {g.group: g for g in groups_a}
    gb = {g.group: g for g in groups_b}
    lines = [
        f"| Metric by group | {label_a} | {label_b} | delta ({label_b} - {label_a}) |",
        "|---|---|---|---|",
    ]
    for group in [g for g in ga if g in gb]:
        a, b = ga[group], gb[group]
        title = _GROUP_TITLES.get(group, group)
        lines.append(f"| {title}: accuracy (%) | {_pct(a.accuracy)} | "
                     f"{_pct(b.accuracy)} | {_pct(b.accuracy - a.accuracy)} |")
        lines.append(f"| {title}: time (s) | {a.mean_seconds:.4f} | "
                     f"{b.mean_seconds:.4f} | {b.mean_seconds - a.mean_seconds:.4f} |")
    with open(out_path, "w", newline="\n") as f:
        f.write("\n".join(lines) + "\n")
