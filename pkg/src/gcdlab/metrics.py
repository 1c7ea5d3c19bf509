"""Generative-fidelity and segmentation metrics.

FID compares Gaussian fits of real and generated feature sets; improved
precision/recall use k-NN ball manifolds; Dice is macro-averaged over
semantic foreground classes; AJI aggregates instance-level IoU with a
penalty for unmatched predictions.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import NumericError, ShapeError
from .synthdata import LabeledMask


@dataclass
class MetricsReport:
    """Optional metric fields; absent (None) when not computed."""

    ip: float | None = None
    ir: float | None = None
    fid: float | None = None
    dice: float | None = None
    aji: float | None = None

    def to_dict(self) -> dict:
        out: dict = {"schema": "gcdlab-report-1"}
        for name in ("ip", "ir", "fid", "dice", "aji"):
            value = getattr(self, name)
            if value is not None:
                out[name] = float(value)
        return out

    def validate(self) -> None:
        for name, lo, hi in (
            ("ip", 0.0, 1.0),
            ("ir", 0.0, 1.0),
            ("dice", 0.0, 100.0),
            ("aji", 0.0, 100.0),
        ):
            v = getattr(self, name)
            if v is not None and not lo <= v <= hi:
                raise NumericError(f"{name}={v} outside [{lo}, {hi}]")
        if self.fid is not None and self.fid < -1e-8:
            raise NumericError(f"fid={self.fid} negative beyond tolerance")


def gaussian_stats(features: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Sample mean and unbiased covariance (divisor M - 1) of (M, d) rows."""
    x = np.asarray(features, dtype=np.float64)
    if x.ndim != 2 or x.shape[0] < 2:
        raise ShapeError("need an (M, d) matrix with M >= 2")
    mu = x.mean(axis=0)
    xc = x - mu
    cov = (xc.T @ xc) / (x.shape[0] - 1)
    return mu, cov


def _psd_sqrt(mat: np.ndarray, tol: float = 1e-10) -> np.ndarray:
    """Symmetric PSD square root by eigendecomposition; small negative
    eigenvalues are clamped to zero, larger ones are an error."""
    sym = 0.5 * (mat + mat.T)
    vals, vecs = np.linalg.eigh(sym)
    if vals.min() < -tol * max(1.0, float(vals.max(initial=1.0))):
        raise NumericError(f"matrix is not PSD: min eigenvalue {vals.min():.3e}")
    vals = np.clip(vals, 0.0, None)
    return (vecs * np.sqrt(vals)) @ vecs.T


def fid(
    mu_r: np.ndarray,
    cov_r: np.ndarray,
    mu_g: np.ndarray,
    cov_g: np.ndarray,
) -> float:
    """Frechet distance between two Gaussians.

    The cross term uses the eigendecomposition of the symmetrized product
    S_r^(1/2) S_g S_r^(1/2), whose trace of square roots equals
    Tr((S_r S_g)^(1/2)); negative eigenvalues below 1e-10 are clamped.
    """
    mu_r = np.asarray(mu_r, dtype=np.float64)
    mu_g = np.asarray(mu_g, dtype=np.float64)
    if mu_r.shape != mu_g.shape or cov_r.shape != cov_g.shape:
        raise ShapeError("moment shapes disagree")
    cov_r = 0.5 * (cov_r + cov_r.T)
    cov_g = 0.5 * (cov_g + cov_g.T)
    root_r = _psd_sqrt(cov_r)
    inner = root_r @ cov_g @ root_r
    vals = np.linalg.eigvalsh(0.5 * (inner + inner.T))
    if vals.min() < -1e-10 * max(1.0, float(vals.max(initial=1.0))):
        raise NumericError(f"cross term not PSD: min eigenvalue {vals.min():.3e}")
    trace_sqrt = float(np.sqrt(np.clip(vals, 0.0, None)).sum())
    diff = mu_r - mu_g
    value = float(diff @ diff + np.trace(cov_r) + np.trace(cov_g) - 2.0 * trace_sqrt)
    if value < -1e-8:
        raise NumericError(f"FID came out negative beyond tolerance: {value:.3e}")
    return max(value, 0.0)


def _knn_radii(points: np.ndarray, k: int) -> np.ndarray:
    """Distance from each point to its k-th nearest neighbor within the set
    (self excluded)."""
    d2 = np.sum((points[:, None, :] - points[None, :, :]) ** 2, axis=-1)
    np.fill_diagonal(d2, np.inf)
    part = np.partition(d2, k - 1, axis=1)[:, k - 1]
    return np.sqrt(part)


def improved_precision_recall(
    real: np.ndarray, gen: np.ndarray, k: int = 3
) -> tuple[float, float]:
    """k-NN manifold membership rates.

    Precision: fraction of generated points inside the union of balls around
    real points (radius = k-th NN distance within the real set). Recall:
    the symmetric rate with roles swapped. Membership uses <=, so duplicate
    points with radius zero still cover themselves.
    """
    real = np.asarray(real, dtype=np.float64)
    gen = np.asarray(gen, dtype=np.float64)
    if real.shape[0] < k + 1 or gen.shape[0] < k + 1:
        raise ShapeError(f"need at least k+1={k + 1} points per set")

    def covered(queries: np.ndarray, support: np.ndarray) -> float:
        radii = _knn_radii(support, k)
        d2 = np.sum((queries[:, None, :] - support[None, :, :]) ** 2, axis=-1)
        inside = d2 <= radii[None, :] ** 2
        return float(np.mean(inside.any(axis=1)))

    return covered(gen, real), covered(real, gen)


def _semantic(mask: LabeledMask) -> np.ndarray:
    out = np.zeros_like(mask.grid)
    for inst, cls in mask.classes.items():
        out[mask.grid == inst] = cls
    return out


def dice(pred: LabeledMask, gt: LabeledMask) -> float:
    """Macro-averaged per-class Dice over foreground classes, in percent.

    Classes absent from both masks are excluded; a class present in exactly
    one mask scores 0 for that class.
    """
    if pred.shape != gt.shape:
        raise ShapeError("mask shapes differ")
    p = _semantic(pred)
    g = _semantic(gt)
    scores = []
    for cls in sorted(set(pred.classes.values()) | set(gt.classes.values())):
        pc = p == cls
        gc = g == cls
        denom = pc.sum() + gc.sum()
        if denom == 0:
            continue
        scores.append(2.0 * np.logical_and(pc, gc).sum() / denom)
    if not scores:
        return 100.0  # both masks empty: trivially identical
    return 100.0 * float(np.mean(scores))


def aji(pred: LabeledMask, gt: LabeledMask) -> float:
    """Aggregated Jaccard index over instances, in percent.

    Each ground-truth instance (ascending id) is matched to the prediction
    with maximal IoU (ties to the lowest prediction id); matched predictions
    are marked used and every unused prediction's area inflates the
    denominator. Ground-truth instances with no overlapping prediction
    contribute their own area.
    """
    if pred.shape != gt.shape:
        raise ShapeError("mask shapes differ")
    gt_ids = gt.instance_ids()
    pred_ids = pred.instance_ids()
    if not gt_ids and not pred_ids:
        return 100.0
    pred_areas = {p: int(np.sum(pred.grid == p)) for p in pred_ids}
    used: set[int] = set()
    inter_sum = 0
    union_sum = 0
    for g_id in gt_ids:
        g_px = gt.grid == g_id
        g_area = int(g_px.sum())
        overlapping = np.unique(pred.grid[g_px])
        best_iou = 0.0
        best_p = None
        best_inter = 0
        best_union = 0
        for p_id in sorted(int(v) for v in overlapping if v != 0):
            inter = int(np.logical_and(g_px, pred.grid == p_id).sum())
            union = g_area + pred_areas[p_id] - inter
            iou = inter / union
            if iou > best_iou:
                best_iou = iou
                best_p = p_id
                best_inter = inter
                best_union = union
        if best_p is None:
            union_sum += g_area
        else:
            inter_sum += best_inter
            union_sum += best_union
            used.add(best_p)
    for p_id in pred_ids:
        if p_id not in used:
            union_sum += pred_areas[p_id]
    if union_sum == 0:
        return 100.0
    return 100.0 * inter_sum / union_sum
