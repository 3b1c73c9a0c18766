"""Segmentation metrics: IoU/F1/Kappa/OA plus the boundary-sensitive weighted F-measure.

The weighted F-measure extends the F-score to continuous error maps with
two spatial weightings: foreground errors are discounted toward the
smoothed error of their neighborhood (dependency), and background errors
are up-weighted the closer they sit to the foreground (importance). The
boundary variant evaluates it on per-class boundary bands of width equal
to the pixel tolerance.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import ndimage


@dataclass(frozen=True)
class WfmConfig:
    tolerance: int = 3
    beta: float = 1.0
    dependency_sigma: float = 5.0
    importance_alpha: float = math.log(0.5) / 5.0

    def __post_init__(self):
        if self.tolerance < 1:
            raise ValueError("tolerance must be >= 1 pixel")
        if self.beta <= 0:
            raise ValueError("beta must be > 0")


@dataclass
class MetricsReport:
    num_classes: int
    per_class_iou: list[float]
    per_class_f1: list[float]
    miou: float
    mean_f1: float
    kappa: float
    oa: float
    wfm: dict[int, float] = field(default_factory=dict)
    ignore_class: int | None = None
    n_images: int = 0
    skipped: list[str] = field(default_factory=list)

    def to_dict(self) -> dict:
        def clean(x):
            return None if x is None or (isinstance(x, float) and math.isnan(x)) else x

        return {
            "num_classes": self.num_classes,
            "per_class_iou": [clean(v) for v in self.per_class_iou],
            "per_class_f1": [clean(v) for v in self.per_class_f1],
            "miou": clean(self.miou),
            "mean_f1": clean(self.mean_f1),
            "kappa": clean(self.kappa),
            "oa": clean(self.oa),
            "wfm": {str(k): clean(v) for k, v in self.wfm.items()},
            "ignore_class": self.ignore_class,
            "n_images": self.n_images,
            "skipped": list(self.skipped),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "MetricsReport":
        def num(x):
            return math.nan if x is None else float(x)

        return cls(
            num_classes=d["num_classes"],
            per_class_iou=[num(v) for v in d["per_class_iou"]],
            per_class_f1=[num(v) for v in d["per_class_f1"]],
            miou=num(d["miou"]),
            mean_f1=num(d["mean_f1"]),
            kappa=num(d["kappa"]),
            oa=num(d["oa"]),
            wfm={int(k): num(v) for k, v in d.get("wfm", {}).items()},
            ignore_class=d.get("ignore_class"),
            n_images=d.get("n_images", 0),
            skipped=list(d.get("skipped", [])),
        )

    def save(self, path: Path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2))

    @classmethod
    def load(cls, path: Path) -> "MetricsReport":
        return cls.from_dict(json.loads(Path(path).read_text()))


REPORT_SCHEMA = {
    "type": "object",
    "required": ["num_classes", "per_class_iou", "per_class_f1", "miou", "mean_f1", "kappa", "oa"],
    "properties": {
        "num_classes": {"type": "integer", "minimum": 2},
        "per_class_iou": {"type": "array", "items": {"type": ["number", "null"]}},
        "per_class_f1": {"type": "array", "items": {"type": ["number", "null"]}},
        "miou": {"type": ["number", "null"]},
        "mean_f1": {"type": ["number", "null"]},
        "kappa": {"type": ["number", "null"]},
        "oa": {"type": ["number", "null"]},
        "wfm": {
            "type": "object",
            "additionalProperties": {"type": ["number", "null"]},
        },
        "ignore_class": {"type": ["integer", "null"]},
        "n_images": {"type": "integer"},
        "skipped": {"type": "array", "items": {"type": "string"}},
    },
}


def confusion(pred: np.ndarray, gt: np.ndarray, num_classes: int) -> np.ndarray:
    """(K,K) counts, rows = ground truth, cols = prediction."""
    pred = np.asarray(pred)
    gt = np.asarray(gt)
    if pred.shape != gt.shape:
        raise ValueError(f"shape mismatch: pred {pred.shape} vs gt {gt.shape}")
    for name, a in (("pred", pred), ("gt", gt)):
        if a.min() < 0 or a.max() >= num_classes:
            raise ValueError(f"{name} values outside [0,{num_classes})")
    idx = gt.astype(np.int64).ravel() * num_classes + pred.astype(np.int64).ravel()
    return np.bincount(idx, minlength=num_classes**2).reshape(num_classes, num_classes)


def classical_metrics(cm: np.ndarray, ignore_class: int | None = None) -> MetricsReport:
    """IoU/F1 per class plus mIoU, mean F1, Kappa, OA from a confusion matrix.

    Classes absent from both prediction and ground truth get NaN and are
    excluded from the means, as is the configured ignore class.
    """
    cm = np.asarray(cm, dtype=np.float64)
    k = cm.shape[0]
    total = cm.sum()
    if total == 0:
        raise ValueError("empty confusion matrix")
    tp = np.diag(cm)
    fp = cm.sum(axis=0) - tp
    fn = cm.sum(axis=1) - tp

    iou = np.full(k, np.nan)
    f1 = np.full(k, np.nan)
    denom_iou = tp + fp + fn
    defined = denom_iou > 0
    iou[defined] = tp[defined] / denom_iou[defined]
    f1[defined] = 2 * tp[defined] / (2 * tp[defined] + fp[defined] + fn[defined])

    in_mean = defined.copy()
    if ignore_class is not None and 0 <= ignore_class < k:
        in_mean[ignore_class] = False

    oa = float(tp.sum() / total)
    pe = float((cm.sum(axis=1) * cm.sum(axis=0)).sum() / total**2)
    if pe >= 1.0:
        kappa = 1.0 if oa == 1.0 else math.nan
    else:
        kappa = (oa - pe) / (1.0 - pe)

    return MetricsReport(
        num_classes=k,
        per_class_iou=[float(v) for v in iou],
        per_class_f1=[float(v) for v in f1],
        miou=float(np.mean(iou[in_mean])) if in_mean.any() else math.nan,
        mean_f1=float(np.mean(f1[in_mean])) if in_mean.any() else math.nan,
        kappa=float(kappa),
        oa=oa,
        ignore_class=ignore_class,
    )


def boundary_band(mask: np.ndarray, tolerance: int) -> np.ndarray:
    """Pixels within Chebyshev distance `tolerance` of the mask's boundary.

    Boundary pixels are those with at least one 4-neighbor of opposite
    value (both sides of every edge). A constant mask has no boundary.
    """
    m = np.asarray(mask).astype(bool)
    boundary = np.zeros_like(m)
    boundary[:-1, :] |= m[:-1, :] != m[1:, :]
    boundary[1:, :] |= m[1:, :] != m[:-1, :]
    boundary[:, :-1] |= m[:, :-1] != m[:, 1:]
    boundary[:, 1:] |= m[:, 1:] != m[:, :-1]
    if not boundary.any():
        return boundary
    return ndimage.binary_dilation(
        boundary, structure=np.ones((2 * tolerance + 1, 2 * tolerance + 1), dtype=bool)
    )


def _dependency_kernel(sigma: float) -> np.ndarray:
    """Normalized 2-D Gaussian truncated at 4 sigma."""
    radius = int(math.ceil(4.0 * sigma))
    ax = np.arange(-radius, radius + 1, dtype=np.float64)
    k = np.exp(-(ax[:, None] ** 2 + ax[None, :] ** 2) / (2.0 * sigma**2))
    return k / k.sum()


def weighted_fmeasure(pred: np.ndarray, gt: np.ndarray, cfg: WfmConfig = WfmConfig()) -> float:
    """Spatially weighted F-measure of a binary prediction against a binary gt.

    Foreground errors are replaced by their Gaussian-smoothed neighborhood
    error when that is smaller (background positions contribute the error
    of their nearest foreground pixel to the smoothing); background errors
    are scaled by 2 - exp(alpha * distance-to-foreground). Defined as 1.0
    when both maps are empty and 0.0 when exactly one is.
    """
    p = np.asarray(pred).astype(bool)
    g = np.asarray(gt).astype(bool)
    if p.shape != g.shape:
        raise ValueError(f"shape mismatch: pred {p.shape} vs gt {g.shape}")
    if not g.any():
        return 1.0 if not p.any() else 0.0
    if not p.any():
        return 0.0

    err = np.abs(p.astype(np.float64) - g.astype(np.float64))

    dist, idx = ndimage.distance_transform_edt(~g, return_indices=True)
    err_t = err.copy()
    bg = ~g
    err_t[bg] = err[idx[0][bg], idx[1][bg]]
    smoothed = ndimage.convolve(err_t, _dependency_kernel(cfg.dependency_sigma), mode="nearest")
    err_dep = np.where(g & (smoothed < err), smoothed, err)

    importance = np.where(g, 1.0, 2.0 - np.exp(cfg.importance_alpha * dist))
    err_w = err_dep * importance

    tp_w = g.sum() - err_w[g].sum()
    fp_w = err_w[bg].sum()
    fn_w = err_w[g].sum()

    precision = tp_w / (tp_w + fp_w) if tp_w + fp_w > 0 else 0.0
    recall = tp_w / (tp_w + fn_w) if tp_w + fn_w > 0 else 0.0
    b2 = cfg.beta**2
    denom = b2 * precision + recall
    return float((1 + b2) * precision * recall / denom) if denom > 0 else 0.0


def wfm_boundary(
    pred: np.ndarray,
    gt: np.ndarray,
    num_classes: int,
    cfg: WfmConfig = WfmConfig(),
    ignore_class: int | None = None,
) -> float:
    """Boundary-band weighted F-measure, macro-averaged over classes.

    Each class contributes weighted_fmeasure of its prediction boundary
    band against its ground-truth boundary band; classes whose gt band is
    empty are skipped. Binary tasks score the foreground class only.
    Returns NaN when no class has a boundary.
    """
    pred = np.asarray(pred)
    gt = np.asarray(gt)
    if pred.shape != gt.shape:
        raise ValueError(f"shape mismatch: pred {pred.shape} vs gt {gt.shape}")
    classes = [1] if num_classes == 2 else list(range(num_classes))
    scores = []
    for c in classes:
        if c == ignore_class:
            continue
        gt_band = boundary_band(gt == c, cfg.tolerance)
        if not gt_band.any():
            continue
        pred_band = boundary_band(pred == c, cfg.tolerance)
        scores.append(weighted_fmeasure(pred_band, gt_band, cfg))
    return float(np.mean(scores)) if scores else math.nan


def evaluate_pairs(
    pairs: list[tuple[np.ndarray, np.ndarray]],
    num_classes: int,
    tolerances: tuple[int, ...] = (3,),
    wfm_cfg: WfmConfig = WfmConfig(),
    ignore_class: int | None = None,
) -> MetricsReport:
    """Corpus-level report over (pred, gt) pairs: pooled confusion + mean WFm."""
    from dataclasses import replace

    if not pairs:
        raise ValueError("no prediction/gt pairs to evaluate")
    cm = np.zeros((num_classes, num_classes), dtype=np.int64)
    wfm_scores = {tol: [] for tol in tolerances}
    for pred, gt in pairs:
        cm += confusion(pred, gt, num_classes)
        for tol in tolerances:
            s = wfm_boundary(
                pred, gt, num_classes, replace(wfm_cfg, tolerance=tol), ignore_class
            )
            if not math.isnan(s):
                wfm_scores[tol].append(s)
    report = classical_metrics(cm, ignore_class)
    report.wfm = {
        tol: (float(np.mean(v)) if v else math.nan) for tol, v in wfm_scores.items()
    }
    report.n_images = len(pairs)
    return report
