"""Slide-level metrics and attention-based localisation."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


class UndefinedMetricError(ValueError):
    pass


@dataclass
class RocCurve:
    fpr: np.ndarray
    tpr: np.ndarray
    thresholds: np.ndarray  # thresholds[i] produced point i+1; point 0 is (0, 0)
    auc: float

    @property
    def points(self) -> list:
        return list(zip(self.fpr.tolist(), self.tpr.tolist()))


def roc_auc(scores, labels) -> RocCurve:
    """ROC over every distinct score and its trapezoid area.

    Tied scores advance both rates at once, so the area equals the probability
    that a random positive outscores a random negative with ties counted half.
    The area is accumulated in integers and divided once at the end.
    """
    scores = np.asarray(scores, dtype=float)
    labels = np.asarray(labels).astype(int)
    if scores.shape != labels.shape or scores.ndim != 1:
        raise ValueError("scores and labels must be 1-D and equally long")
    n_pos = int(labels.sum())
    n_neg = len(labels) - n_pos
    if n_pos == 0 or n_neg == 0:
        raise UndefinedMetricError("AUC needs both positive and negative labels")
    order = np.argsort(-scores, kind="stable")
    s, y = scores[order], labels[order]
    last = np.r_[np.nonzero(np.diff(s))[0], len(s) - 1]
    tp = np.r_[0, np.cumsum(y)[last]]
    fp = np.r_[0, np.cumsum(1 - y)[last]]
    twice_area = int(np.sum((fp[1:] - fp[:-1]) * (tp[1:] + tp[:-1])))
    auc = twice_area / (2 * n_pos * n_neg)
    return RocCurve(fp / n_neg, tp / n_pos, s[last], auc)


def predicted_labels(final_scores) -> np.ndarray:
    """1 where sigmoid(score) >= 0.5, i.e. score >= 0."""
    return (np.asarray(final_scores, dtype=float) >= 0.0).astype(int)


def accuracy(predictions, labels) -> float:
    predictions = np.asarray(predictions).astype(int)
    labels = np.asarray(labels).astype(int)
    if predictions.shape != labels.shape:
        raise ValueError(f"length mismatch: {predictions.shape} vs {labels.shape}")
    if predictions.size == 0:
        raise ValueError("no predictions")
    return float((predictions == labels).mean())


def z_filter(attention, z_cap: float = 2.0, mode: str = "clamp") -> np.ndarray:
    """Tame outlying attention scores, then min-max scale to [0, 1].

    ``mode="clamp"`` caps z-scores above ``z_cap`` at the cap; ``mode="zero"``
    sends those tiles to 0 intensity instead. Zero spread gives all zeros.
    """
    a = np.asarray(attention, dtype=float)
    if a.size < 2:
        raise ValueError("z_filter needs at least two scores")
    if mode not in ("clamp", "zero"):
        raise ValueError(f"unknown mode {mode!r}")
    std = a.std()
    if std == 0 or not np.isfinite(std):
        return np.zeros_like(a)
    z = (a - a.mean()) / std
    outliers = z > z_cap
    if mode == "clamp":
        z = np.minimum(z, z_cap)
        ref = z
    else:
        ref = z[~outliers]
    lo, hi = ref.min(), ref.max()
    if hi == lo:
        return np.zeros_like(a)
    out = np.clip((z - lo) / (hi - lo), 0.0, 1.0)
    if mode == "zero":
        out[outliers] = 0.0
    return out


@dataclass
class Heatmap:
    grid: np.ndarray  # rows x cols in [0, 1]
    slide_id: str
    coords: list

    @classmethod
    def from_scores(cls, intensities, coords, grid_shape, slide_id: str = "") -> "Heatmap":
        grid = np.zeros(grid_shape)
        for v, (r, c) in zip(intensities, coords):
            grid[r, c] = v
        return cls(grid, slide_id, list(coords))


def render_overlay(pixels: np.ndarray, heatmap: Heatmap, patch_size: int, annotation=None,
                   alpha: float = 0.6, tint=(255, 0, 0), outline=(0, 200, 0)) -> np.ndarray:
    """Blend each tile toward ``tint`` in proportion to its intensity.

    ``annotation`` (rows x cols booleans) outlines ground-truth cells.
    """
    pixels = np.asarray(pixels, dtype=np.uint8)
    rows, cols = heatmap.grid.shape
    if pixels.shape[0] < rows * patch_size or pixels.shape[1] < cols * patch_size:
        raise ValueError(f"heatmap {rows}x{cols} of {patch_size}px tiles does not fit slide {pixels.shape[:2]}")
    out = pixels.astype(float)
    weight = np.kron(np.clip(heatmap.grid, 0, 1), np.ones((patch_size, patch_size))) * alpha
    region = out[: rows * patch_size, : cols * patch_size]
    region += weight[..., None] * (np.asarray(tint, dtype=float) - region)
    out = np.clip(np.rint(out), 0, 255).astype(np.uint8)
    if annotation is not None:
        ann = np.asarray(annotation, dtype=bool)
        if ann.shape != (rows, cols):
            raise ValueError(f"annotation {ann.shape} does not match heatmap {(rows, cols)}")
        mask = np.kron(ann, np.ones((patch_size, patch_size), dtype=bool))
        edge = mask & ~(_shift(mask, 1, 0) & _shift(mask, -1, 0) & _shift(mask, 1, 1) & _shift(mask, -1, 1))
        out[: rows * patch_size, : cols * patch_size][edge] = outline
    return out


def _shift(mask: np.ndarray, k: int, axis: int) -> np.ndarray:
    out = np.zeros_like(mask)
    src = [slice(None)] * 2
    dst = [slice(None)] * 2
    if k > 0:
        src[axis], dst[axis] = slice(0, -k), slice(k, None)
    else:
        src[axis], dst[axis] = slice(-k, None), slice(0, k)
    out[tuple(dst)] = mask[tuple(src)]
    return out


def localization_hit_rate(attentions, instance_labels, bag_labels=None) -> float:
    """Share of positive bags whose top-attention tile (first on ties) is a positive instance."""
    hits = n = 0
    for i, (att, lab) in enumerate(zip(attentions, instance_labels)):
        lab = np.asarray(lab).astype(int)
        positive = lab.any() if bag_labels is None else bool(bag_labels[i])
        if not positive:
            continue
        n += 1
        hits += int(lab[int(np.argmax(att))] == 1)
    if n == 0:
        raise UndefinedMetricError("no positive bags to localise")
    return hits / n


def write_roc_dat(path, curve: RocCurve) -> None:
    lines = ["fpr tpr"] + [f"{f:.10g} {t:.10g}" for f, t in zip(curve.fpr, curve.tpr)]
    with open(path, "w") as fh:
        fh.write("\n".join(lines) + "\n")
