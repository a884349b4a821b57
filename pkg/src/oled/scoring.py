"""Anomaly scores, ROC metrics and the mask-as-segmenter evaluation."""

import csv
from dataclasses import dataclass, field

import numpy as np
from scipy.stats import rankdata

from .errors import OledError
from .losses import sample_errors
from .masking import MaskModule

SCORE_TYPES = ("rec", "mask", "cont", "avg")


def minmax_scale(raw):
    """Scale to [0, 1] by ``(v - min) / (max - min)``; a constant vector maps to zeros."""
    raw = np.asarray(raw, dtype=np.float64)
    if raw.size == 0:
        raise ValueError("cannot scale an empty vector")
    lo, hi = raw.min(), raw.max()
    if hi == lo:
        return np.zeros_like(raw)
    return (raw - lo) / (hi - lo)


def _check_binary(scores, labels):
    scores = np.asarray(scores, dtype=np.float64).ravel()
    labels = np.asarray(labels).ravel().astype(bool)
    if scores.shape != labels.shape:
        raise ValueError("scores and labels differ in length")
    if labels.all() or not labels.any():
        raise ValueError("both classes must be present")
    return scores, labels


def auc(scores, labels):
    """Probability that an outlier (label 1) scores above an inlier, ties counting half.

    Computed from average ranks (Mann-Whitney U).
    """
    scores, labels = _check_binary(scores, labels)
    n_pos = int(labels.sum())
    n_neg = labels.size - n_pos
    ranks = rankdata(scores)
    u = ranks[labels].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


@dataclass
class RocCurve:
    thresholds: np.ndarray
    fpr: np.ndarray
    tpr: np.ndarray
    auc: float
    eer: float


def roc_points(scores, labels):
    """ROC sweep from the highest threshold down; starts at (0, 0) and ends at (1, 1)."""
    scores, labels = _check_binary(scores, labels)
    order = np.argsort(-scores, kind="stable")
    s, y = scores[order], labels[order]
    tp = np.cumsum(y)
    fp = np.cumsum(~y)
    # keep the last index of each run of equal scores
    last = np.r_[np.nonzero(np.diff(s))[0], s.size - 1]
    tpr = np.r_[0.0, tp[last] / tp[-1]]
    fpr = np.r_[0.0, fp[last] / fp[-1]]
    thresholds = np.r_[np.inf, s[last]]
    return thresholds, fpr, tpr


def _eer_from_points(fpr, tpr):
    d = fpr - (1.0 - tpr)
    i = int(np.argmax(d >= 0))
    if d[i] == 0 or i == 0:
        return float(fpr[i])
    a = -d[i - 1] / (d[i] - d[i - 1])
    return float(fpr[i - 1] + a * (fpr[i] - fpr[i - 1]))


def eer(scores, labels):
    """Equal error rate: the FPR where FPR equals 1 - TPR, linearly interpolated."""
    _, fpr, tpr = roc_points(scores, labels)
    return _eer_from_points(fpr, tpr)


def roc_curve(scores, labels):
    thresholds, fpr, tpr = roc_points(scores, labels)
    return RocCurve(thresholds, fpr, tpr, auc(scores, labels), _eer_from_points(fpr, tpr))


@dataclass
class ScoreSet:
    e_rec: np.ndarray
    e_mask: np.ndarray
    e_cont: np.ndarray
    labels: np.ndarray = None
    s_rec: np.ndarray = None
    s_mask: np.ndarray = None
    s_cont: np.ndarray = None
    s_avg: np.ndarray = None
    metrics: list = field(default_factory=list)

    def __len__(self):
        return len(self.e_rec)

    def raw(self, score_type):
        return getattr(self, f"e_{score_type}")

    def score(self, score_type):
        return getattr(self, f"s_{score_type}")

    def normalize(self):
        self.s_rec = minmax_scale(self.e_rec)
        self.s_mask = minmax_scale(self.e_mask)
        self.s_cont = minmax_scale(self.e_cont)
        self.s_avg = (self.s_rec + self.s_mask + self.s_cont) / 3.0
        return self


def _mask_fn(MM):
    if isinstance(MM, MaskModule):
        return lambda x: MM(x, "infer")[0]
    return MM


def score_samples(R, MM, x, labels=None, batch_size=256):
    """Raw per-sample errors of a trained reconstructor.

    ``MM`` is a MaskModule (masks from the generator in infer mode), an
    array of precomputed masks, or a callable mapping an image batch to masks.
    """
    if R is None or MM is None:
        raise OledError("scoring needs both a reconstructor and a mask source")
    make_mask = None if isinstance(MM, np.ndarray) else _mask_fn(MM)
    parts = []
    for i in range(0, len(x), batch_size):
        xb = x[i:i + batch_size]
        mask = MM[i:i + batch_size] if make_mask is None else make_mask(xb)
        xhat_m = R.forward(xb * mask.astype(xb.dtype), "infer")[0]
        xhat = R.forward(xb, "infer")[0]
        parts.append(sample_errors(xb, xhat_m, xhat, mask))
    e_mask, e_cont, e_rec = (np.concatenate(p) for p in zip(*parts))
    return ScoreSet(e_rec=e_rec, e_mask=e_mask, e_cont=e_cont,
                    labels=None if labels is None else np.asarray(labels))


def frame_scores(ss, patches_per_frame, frame_labels):
    """Collapse patch-level raw errors to one value per frame by taking the max."""
    n = len(ss) // patches_per_frame
    if n * patches_per_frame != len(ss) or n != len(frame_labels):
        raise ValueError(f"{len(ss)} patch scores do not form {len(frame_labels)} frames of {patches_per_frame}")

    def worst(col):
        return np.asarray(col).reshape(n, patches_per_frame).max(axis=1)

    return ScoreSet(e_rec=worst(ss.e_rec), e_mask=worst(ss.e_mask), e_cont=worst(ss.e_cont),
                    labels=np.asarray(frame_labels))


def aggregate_scores(ss, score_types=SCORE_TYPES):
    """Normalize every raw error column and compute AUC/EER per score type."""
    ss.normalize()
    labels = np.asarray(ss.labels).astype(bool)
    n_out = int(labels.sum())
    n_in = labels.size - n_out
    ss.metrics = [
        {"score_type": st, "auc": auc(ss.score(st), labels), "eer": eer(ss.score(st), labels),
         "n_inlier": n_in, "n_outlier": n_out}
        for st in score_types
    ]
    return ss, ss.metrics


def write_metrics_csv(path, metrics):
    with open(path, "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(["score_type", "auc", "eer", "n_inlier", "n_outlier"])
        for m in metrics:
            w.writerow([m["score_type"], repr(m["auc"]), repr(m["eer"]), m["n_inlier"], m["n_outlier"]])


def write_scores_csv(path, ss):
    with open(path, "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(["index", "label", "e_rec", "e_mask", "e_cont", "s_rec", "s_mask", "s_cont", "s_avg"])
        for i in range(len(ss)):
            w.writerow([i, int(ss.labels[i])] + [repr(float(getattr(ss, c)[i])) for c in
                        ("e_rec", "e_mask", "e_cont", "s_rec", "s_mask", "s_cont", "s_avg")])


def read_metrics_csv(path):
    with open(path, newline="") as f:
        rows = list(csv.DictReader(f))
    for r in rows:
        r["auc"] = float(r["auc"])
        r["eer"] = float(r["eer"])
        r["n_inlier"] = int(r["n_inlier"])
        r["n_outlier"] = int(r["n_outlier"])
    return rows


@dataclass
class SegmentationResult:
    inlier_auc: float
    outlier_auc: float
    per_image: np.ndarray
    skipped: int


def segmentation_eval(M, x, raw, is_outlier, crop=None, batch_size=256):
    """Pixelwise AUC of generator activation maps against foreground maps.

    Args:
      M: MaskModule or generator LayerStack.
      x: normalized network inputs (N, C, H, W).
      raw: original 8-bit images (N, h, w); a pixel is foreground iff its
        intensity is non-zero.
      is_outlier: per-image labels.
      crop: ``(top, left)`` offset of ``raw`` inside ``x``; defaults to centred.

    Returns:
      SegmentationResult with the mean per-image AUC over inliers and over
      outliers.  Images whose foreground map has a single class are skipped.
    """
    stack = M.generator if isinstance(M, MaskModule) else M
    raw = np.asarray(raw)
    h, w = raw.shape[-2:]
    if crop is None:
        crop = ((x.shape[2] - h) // 2, (x.shape[3] - w) // 2)
    top, left = crop
    is_outlier = np.asarray(is_outlier).astype(bool)
    per_image = np.full(len(x), np.nan)
    skipped = 0
    for i in range(0, len(x), batch_size):
        A = stack.forward(x[i:i + batch_size], "infer")[0][:, 0, top:top + h, left:left + w]
        for j, a in enumerate(A):
            sm = raw[i + j] != 0
            if sm.all() or not sm.any():
                skipped += 1
                continue
            per_image[i + j] = auc(a.ravel(), sm.ravel())
    ok = ~np.isnan(per_image)

    def mean(sel):
        sel = sel & ok
        return float(per_image[sel].mean()) if sel.any() else float("nan")

    return SegmentationResult(mean(~is_outlier), mean(is_outlier), per_image, skipped)
