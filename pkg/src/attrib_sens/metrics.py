"""Similarity between attribution maps and explanation-accuracy scores."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage
from scipy.stats import rankdata

from .imageops import hog


@dataclass
class SimilarityTriple:
    spearman: float
    pearson_hog: float
    ssim: float
    degenerate: tuple = field(default_factory=tuple)

    def as_dict(self):
        return {"spearman": self.spearman, "pearson_hog": self.pearson_hog, "ssim": self.ssim}


@dataclass
class AccuracyScores:
    localization_error: float
    deletion_auc: float
    insertion_auc: float

    def as_dict(self):
        return {"loc_error": self.localization_error, "deletion_auc": self.deletion_auc,
                "insertion_auc": self.insertion_auc}


def _pearson(u, v):
    """Pearson correlation and a degenerate flag (zero variance on either side)."""
    u = np.asarray(u, dtype=np.float64).ravel()
    v = np.asarray(v, dtype=np.float64).ravel()
    du, dv = u - u.mean(), v - v.mean()
    denom = np.sqrt((du @ du) * (dv @ dv))
    if denom == 0 or not np.isfinite(denom):
        return 0.0, True
    return float(np.clip((du @ dv) / denom, -1.0, 1.0)), False


def spearman_flagged(a, b):
    ra = rankdata(np.asarray(a, dtype=np.float64).ravel(), method="average")
    rb = rankdata(np.asarray(b, dtype=np.float64).ravel(), method="average")
    return _pearson(ra, rb)


def spearman(a, b):
    """Spearman rank correlation with averaged ranks for ties; 0 for constant input."""
    return spearman_flagged(a, b)[0]


def pearson_hog_flagged(a, b, cell_side=8, orientations=9):
    return _pearson(hog(a, cell_side, orientations), hog(b, cell_side, orientations))


def pearson_hog(a, b, cell_side=8, orientations=9):
    return pearson_hog_flagged(a, b, cell_side, orientations)[0]


def ssim(a, b, win_size=7, k1=0.01, k2=0.03):
    """Mean structural similarity over 7x7 uniform windows.

    The data range is the joint range of both maps.  Local statistics use the
    sample (N-1) covariance and the mean is taken over windows that lie fully
    inside the map.
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch {a.shape} vs {b.shape}")
    if min(a.shape) < win_size:
        raise ValueError(f"maps must be at least {win_size}x{win_size}")
    R = max(a.max(), b.max()) - min(a.min(), b.min())
    if R == 0:
        return 1.0
    c1, c2 = (k1 * R) ** 2, (k2 * R) ** 2
    n = win_size ** 2
    cov_norm = n / (n - 1.0)
    f = lambda z: ndimage.uniform_filter(z, size=win_size, mode="reflect")
    ux, uy = f(a), f(b)
    vx = cov_norm * (f(a * a) - ux * ux)
    vy = cov_norm * (f(b * b) - uy * uy)
    vxy = cov_norm * (f(a * b) - ux * uy)
    s = ((2 * ux * uy + c1) * (2 * vxy + c2)) / ((ux ** 2 + uy ** 2 + c1) * (vx + vy + c2))
    pad = (win_size - 1) // 2
    return float(s[pad:-pad, pad:-pad].mean())


def similarity(a, b):
    rho, d1 = spearman_flagged(a, b)
    hp, d2 = pearson_hog_flagged(a, b)
    flags = tuple(name for name, d in (("spearman", d1), ("pearson_hog", d2)) if d)
    return SimilarityTriple(rho, hp, ssim(a, b), flags)


# ----------------------------------------------------------------------
# accuracy metrics


def _pixel_order(attribution, absolute=False):
    flat = np.asarray(attribution, dtype=np.float64).ravel()
    if absolute:
        flat = np.abs(flat)
    return np.argsort(-flat, kind="stable")


def _curve(model, start, source, order, target_class, steps, batch=64):
    if steps < 1:
        raise ValueError("steps must be >= 1")
    d2 = order.size
    counts = (np.arange(steps + 1) * d2) // steps
    h, w = start.shape[:2]
    scores = []
    for lo in range(0, steps + 1, batch):
        imgs = []
        for n in counts[lo:lo + batch]:
            img = start.reshape(d2, -1).copy()
            img[order[:n]] = source.reshape(d2, -1)[order[:n]]
            imgs.append(img.reshape(start.shape))
        scores.append(np.asarray(model.probabilities(np.stack(imgs)))[:, target_class])
    scores = np.concatenate(scores).astype(np.float64)
    return scores


def _auc(scores):
    x = np.linspace(0.0, 1.0, len(scores))
    return float(np.trapezoid(scores, x))


def deletion_curve(model, image, attribution, target_class, steps=50, absolute=False):
    image = np.asarray(image)
    order = _pixel_order(attribution, absolute)
    return _curve(model, image, np.zeros_like(image), order, target_class, steps)


def insertion_curve(model, image, attribution, target_class, steps=50, absolute=False):
    image = np.asarray(image)
    order = _pixel_order(attribution, absolute)
    return _curve(model, np.zeros_like(image), image, order, target_class, steps)


def deletion(model, image, attribution, target_class, steps=50, absolute=False):
    """Area under the class-probability curve while zeroing pixels, highest attribution first."""
    return _auc(deletion_curve(model, image, attribution, target_class, steps, absolute))


def insertion(model, image, attribution, target_class, steps=50, absolute=False):
    """Area under the class-probability curve while copying pixels into a zero image."""
    return _auc(insertion_curve(model, image, attribution, target_class, steps, absolute))


def _box(mask):
    rows = np.flatnonzero(mask.any(axis=1))
    cols = np.flatnonzero(mask.any(axis=0))
    return rows[0], cols[0], rows[-1], cols[-1]


def box_iou(b1, b2):
    r0, c0 = max(b1[0], b2[0]), max(b1[1], b2[1])
    r1, c1 = min(b1[2], b2[2]), min(b1[3], b2[3])
    inter = max(0, r1 - r0 + 1) * max(0, c1 - c0 + 1)
    area = lambda b: (b[2] - b[0] + 1) * (b[3] - b[1] + 1)
    return inter / (area(b1) + area(b2) - inter)


def localization_error(attribution, gt_mask, threshold=0.2):
    """1 - IoU between the box of the largest above-threshold component and the ground-truth box."""
    gt = np.asarray(gt_mask) > 0
    if not gt.any():
        raise ValueError("empty ground-truth mask")
    a = np.abs(np.asarray(attribution, dtype=np.float64))
    peak = a.max()
    if peak <= 0:
        return 1.0
    binary = a >= threshold * peak
    labels, n = ndimage.label(binary)  # 4-connectivity
    sizes = np.bincount(labels.ravel(), minlength=n + 1)
    sizes[0] = 0
    largest = labels == int(np.argmax(sizes))
    return float(1.0 - box_iou(_box(largest), _box(gt)))


def accuracy_scores(model, image, attribution, target_class, gt_mask, steps=50, absolute=False):
    return AccuracyScores(
        localization_error(attribution, gt_mask),
        deletion(model, image, attribution, target_class, steps, absolute),
        insertion(model, image, attribution, target_class, steps, absolute),
    )
