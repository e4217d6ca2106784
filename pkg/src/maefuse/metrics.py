"""Overlap metrics, per-region reports and mean/std stability summaries."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ContractError

MRBRAINS18_REGIONS = [
    "Cortical gray matter",
    "Basal ganglia",
    "White matter",
    "White matter lesions",
    "Cerebrospinal fluid",
    "Ventricles",
    "Cerebellum",
    "Brain stem",
]

NACC_REGIONS = [
    "Cerebral White Matter",
    "Cerebral Cortex",
    "Cerebellum White Matter",
    "Cerebellum Cortex",
    "Thalamus",
    "Caudate",
    "Putamen",
    "Pallidum",
    "Brainstem",
    "Hippocampus",
    "Amygdala",
    "CSF",
    "WM-hypointensities",
]

PRESETS = {"mrbrains18": MRBRAINS18_REGIONS, "nacc": NACC_REGIONS, "skullstrip": ["Brain"]}


def preset_class_names(name: str) -> list[str]:
    """Class list for a region preset, background first."""
    try:
        return ["background"] + PRESETS[name]
    except KeyError:
        raise ContractError(f"unknown region preset {name!r}; choose from {sorted(PRESETS)}") from None


def _binary(mask, name: str) -> np.ndarray:
    mask = np.asarray(mask)
    if mask.dtype == bool:
        return mask
    if not np.isin(mask, (0, 1)).all():
        raise ContractError(f"{name} must be a binary mask")
    return mask.astype(bool)


def _pair(pred, gt) -> tuple[np.ndarray, np.ndarray]:
    p, g = _binary(pred, "pred"), _binary(gt, "gt")
    if p.shape != g.shape:
        raise ContractError(f"pred shape {p.shape} != gt shape {g.shape}")
    return p, g


def _dice(inter: int, size_p: int, size_g: int) -> float:
    total = size_p + size_g
    return 1.0 if total == 0 else 2.0 * inter / total


def _iou(inter: int, size_p: int, size_g: int) -> float:
    union = size_p + size_g - inter
    return 1.0 if union == 0 else inter / union


def dice_score(pred, gt) -> float:
    """``2|P∩G| / (|P|+|G|)``; two empty masks score 1.0."""
    p, g = _pair(pred, gt)
    return _dice(int((p & g).sum()), int(p.sum()), int(g.sum()))


def iou_score(pred, gt) -> float:
    """``|P∩G| / |P∪G|``; two empty masks score 1.0."""
    p, g = _pair(pred, gt)
    return _iou(int((p & g).sum()), int(p.sum()), int(g.sum()))


@dataclass
class RegionReport:
    name: str
    iou: float
    dice: float
    support: int
    empty: bool = False  # class absent from both prediction and ground truth


@dataclass
class MulticlassReport:
    regions: list[RegionReport]
    mean: RegionReport

    def rows(self) -> list[RegionReport]:
        return [*self.regions, self.mean]


@dataclass
class RegionCounts:
    """Pixel counts per class, accumulated over any number of slices."""

    num_classes: int
    inter: np.ndarray = field(init=False)
    pred: np.ndarray = field(init=False)
    gt: np.ndarray = field(init=False)

    def __post_init__(self):
        self.inter = np.zeros(self.num_classes, dtype=np.int64)
        self.pred = np.zeros(self.num_classes, dtype=np.int64)
        self.gt = np.zeros(self.num_classes, dtype=np.int64)

    def update(self, pred_labels, gt_labels) -> "RegionCounts":
        p = np.asarray(pred_labels)
        g = np.asarray(gt_labels)
        if p.shape != g.shape:
            raise ContractError(f"pred shape {p.shape} != gt shape {g.shape}")
        c = self.num_classes
        for name, arr in (("pred", p), ("gt", g)):
            if arr.size and (arr.min() < 0 or arr.max() >= c):
                raise ContractError(f"{name} labels must lie in [0, {c})")
        p = p.ravel().astype(np.int64)
        g = g.ravel().astype(np.int64)
        self.pred += np.bincount(p, minlength=c)
        self.gt += np.bincount(g, minlength=c)
        self.inter += np.bincount(g[p == g], minlength=c)
        return self

    def region(self, c: int, name: str) -> RegionReport:
        i, sp, sg = int(self.inter[c]), int(self.pred[c]), int(self.gt[c])
        return RegionReport(name, _iou(i, sp, sg), _dice(i, sp, sg), sg, empty=(sp + sg == 0))


def _mean_row(regions: list[RegionReport]) -> RegionReport:
    return RegionReport(
        "Mean",
        float(np.mean([r.iou for r in regions])),
        float(np.mean([r.dice for r in regions])),
        int(sum(r.support for r in regions)),
    )


def multiclass_report(pred_labels, gt_labels, class_names: list[str], per_slice: bool = False) -> MulticlassReport:
    """Score every non-background class; the mean row averages those classes.

    By default pixel counts are pooled over the whole input (for a stack of
    slices from one volume this is per-volume scoring). With ``per_slice``
    the leading axis indexes slices; each slice is scored separately and
    the per-region scores are averaged over slices.
    """
    c = len(class_names)
    if c < 2:
        raise ContractError("class_names must include background plus at least one region")
    if not per_slice:
        counts = RegionCounts(c).update(pred_labels, gt_labels)
        regions = [counts.region(k, class_names[k]) for k in range(1, c)]
        return MulticlassReport(regions, _mean_row(regions))
    pred_labels, gt_labels = np.asarray(pred_labels), np.asarray(gt_labels)
    if pred_labels.shape != gt_labels.shape or pred_labels.ndim < 2:
        raise ContractError("per-slice scoring needs matching (S, ...) label stacks")
    per = [multiclass_report(p, g, class_names).regions for p, g in zip(pred_labels, gt_labels)]
    regions = []
    for k in range(c - 1):
        col = [s[k] for s in per]
        regions.append(
            RegionReport(
                class_names[k + 1],
                float(np.mean([r.iou for r in col])),
                float(np.mean([r.dice for r in col])),
                int(sum(r.support for r in col)),
                empty=all(r.empty for r in col),
            )
        )
    return MulticlassReport(regions, _mean_row(regions))


def volume_report(pairs, class_names: list[str]) -> MulticlassReport:
    """Per-volume scoring averaged over volumes.

    ``pairs`` yields (pred_labels, gt_labels) per volume; each volume's
    slices are pooled before scoring.
    """
    reports = [multiclass_report(p, g, class_names) for p, g in pairs]
    if not reports:
        raise ContractError("volume_report needs at least one volume")
    regions = []
    for k in range(len(class_names) - 1):
        col = [r.regions[k] for r in reports]
        regions.append(
            RegionReport(
                class_names[k + 1],
                float(np.mean([r.iou for r in col])),
                float(np.mean([r.dice for r in col])),
                int(sum(r.support for r in col)),
                empty=all(r.empty for r in col),
            )
        )
    return MulticlassReport(regions, _mean_row(regions))


@dataclass
class StabilitySummary:
    axis_label: str
    points: list[tuple[float, float]]
    mean: float
    std: float


def stability_summary(points, axis_label: str = "stride") -> StabilitySummary:
    """Mean and population standard deviation of scores across a sweep."""
    points = [(a, float(s)) for a, s in points]
    if len(points) < 2:
        raise ContractError(f"stability_summary needs at least 2 points, got {len(points)}")
    scores = np.array([s for _, s in points], dtype=np.float64)
    return StabilitySummary(axis_label, points, float(scores.mean()), float(scores.std()))
