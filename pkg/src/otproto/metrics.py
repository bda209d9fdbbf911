"""Evaluation: AU-ROC and saturated per-region overlap (sPRO).

AU-ROC is the Mann-Whitney U statistic normalized by the number of
positive/negative pairs, ties counted 0.5, computed by sorting. sPRO sweeps
every unique score value as a threshold (exact, not binned), measures per
ground-truth region ``min(detected_overlap / saturation_area, 1)`` averaged
over regions against the false-positive rate on anomaly-free pixels pooled
over all images, and integrates the curve up to an FPR cap (trapezoid with
linear interpolation at the cap), normalized by the cap.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from .core import AnomalyMap
from .errors import (
    DimMismatchError,
    NoNegativePixelsError,
    NoRegionsError,
    SingleClassError,
    ValidationError,
)


@dataclass
class LabeledScores:
    """Scores with binary labels; both classes must be present."""

    scores: np.ndarray
    labels: np.ndarray

    def __post_init__(self) -> None:
        self.scores = np.asarray(self.scores, dtype=np.float64).ravel()
        self.labels = np.asarray(self.labels).ravel()
        if self.scores.shape != self.labels.shape:
            raise DimMismatchError("scores and labels must have the same length")
        if not np.isin(self.labels, (0, 1)).all():
            raise ValidationError("labels must be 0 or 1")
        if self.labels.min() == self.labels.max():
            raise SingleClassError("need at least one positive and one negative label")


def _average_ranks(scores: np.ndarray) -> np.ndarray:
    """1-based ranks with ties assigned the mean rank of their group."""
    _, inverse, counts = np.unique(scores, return_inverse=True, return_counts=True)
    cum = np.cumsum(counts)
    return (cum - (counts - 1) / 2.0)[inverse]


def auroc(scores, labels=None) -> float:
    """Probability a random positive outscores a random negative (ties 0.5)."""
    data = scores if isinstance(scores, LabeledScores) else LabeledScores(scores, labels)
    pos = data.labels == 1
    n_pos = int(pos.sum())
    n_neg = data.labels.size - n_pos
    ranks = _average_ranks(data.scores)
    u = ranks[pos].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


@dataclass
class DefectRegion:
    """One ground-truth defect region: its pixels and a saturation area.

    Saturation defaults to the full region area, which reduces sPRO to
    plain PRO; a smaller value caps how much of the region must be covered
    to count as fully detected.
    """

    rows: np.ndarray
    cols: np.ndarray
    saturation_area: float = 0.0  # 0 means "use the region area"

    def __post_init__(self) -> None:
        self.rows = np.asarray(self.rows, dtype=np.int64).ravel()
        self.cols = np.asarray(self.cols, dtype=np.int64).ravel()
        if self.rows.size == 0 or self.rows.shape != self.cols.shape:
            raise ValidationError("a region needs a nonempty pixel set")
        if self.saturation_area == 0.0:
            self.saturation_area = float(self.rows.size)
        if not 0.0 < self.saturation_area <= self.rows.size:
            raise ValidationError(
                f"saturation_area must be in (0, {self.rows.size}], got {self.saturation_area}"
            )

    @property
    def area(self) -> int:
        return int(self.rows.size)


def masks_to_regions(
    mask: np.ndarray,
    saturation: Mapping[int, float] | None = None,
) -> list[DefectRegion]:
    """Split a ground-truth mask into defect regions.

    Mask values 1..254 each name one region directly; value 255 is split
    into 8-connected components. ``saturation`` maps a mask value to the
    saturation area applied to every region carrying that value.
    """
    mask = np.asarray(mask)
    if mask.ndim != 2:
        raise ValidationError("mask must be 2-d")
    saturation = dict(saturation or {})
    regions: list[DefectRegion] = []
    values = np.unique(mask)
    for v in values:
        v = int(v)
        if v == 0:
            continue
        if v == 255:
            from scipy.ndimage import label

            labeled, count = label(mask == 255, structure=np.ones((3, 3), dtype=int))
            for comp in range(1, count + 1):
                rows, cols = np.nonzero(labeled == comp)
                regions.append(DefectRegion(rows, cols, saturation.get(255, 0.0)))
        else:
            rows, cols = np.nonzero(mask == v)
            regions.append(DefectRegion(rows, cols, saturation.get(v, 0.0)))
    return regions


@dataclass
class SproCurve:
    thresholds: np.ndarray  # descending
    fpr: np.ndarray         # nondecreasing, in [0, 1]
    spro: np.ndarray        # nondecreasing, in [0, 1]
    fpr_cap: float
    area: float             # integral up to fpr_cap, normalized by the cap


def _area_to_cap(fpr: np.ndarray, spro: np.ndarray, cap: float) -> float:
    """Trapezoid integral of the curve from FPR 0 to ``cap``.

    The curve implicitly starts at (0, 0); the segment crossing the cap is
    linearly interpolated.
    """
    area = 0.0
    x_prev, y_prev = 0.0, 0.0
    for x, y in zip(fpr, spro):
        if x >= cap:
            if x > x_prev:
                y_cap = y_prev + (y - y_prev) * (cap - x_prev) / (x - x_prev)
            else:
                y_cap = y
            area += 0.5 * (y_prev + y_cap) * (cap - x_prev)
            return area
        area += 0.5 * (y_prev + y) * (x - x_prev)
        x_prev, y_prev = x, y
    return area + y_prev * (cap - x_prev)  # curve plateaus past its last point


def spro_curve(
    maps: Sequence[AnomalyMap | np.ndarray],
    regions_per_image: Sequence[Sequence[DefectRegion]],
    fpr_cap: float = 0.05,
) -> SproCurve:
    """Saturated per-region overlap curve and its normalized area.

    Negative (anomaly-free) pixels are pooled over all images; every unique
    score value is used as a threshold with the detection rule
    ``score >= threshold``, so tied pixels flip together.
    """
    if not 0.0 < fpr_cap <= 1.0:
        raise ValidationError("fpr_cap must be in (0, 1]")
    if len(maps) != len(regions_per_image):
        raise DimMismatchError("one region list per map is required")
    score_arrays = []
    neg_parts = []
    regions_flat: list[tuple[DefectRegion, np.ndarray]] = []
    for m, regions in zip(maps, regions_per_image):
        arr = np.asarray(m.scores if isinstance(m, AnomalyMap) else m, dtype=np.float64)
        positive = np.zeros(arr.shape, dtype=bool)
        for region in regions:
            if region.rows.max() >= arr.shape[0] or region.cols.max() >= arr.shape[1]:
                raise DimMismatchError("region pixels fall outside the map")
            positive[region.rows, region.cols] = True
            regions_flat.append((region, np.sort(arr[region.rows, region.cols])))
        neg_parts.append(arr[~positive])
        score_arrays.append(arr.ravel())
    if not regions_flat:
        raise NoRegionsError("no ground-truth regions in any image")
    negatives = np.sort(np.concatenate(neg_parts))
    if negatives.size == 0:
        raise NoNegativePixelsError("no anomaly-free pixels to measure FPR on")

    thresholds = np.unique(np.concatenate(score_arrays))[::-1]
    n_neg = negatives.size
    fpr = (n_neg - np.searchsorted(negatives, thresholds, side="left")) / n_neg
    spro = np.zeros_like(thresholds)
    for region, sorted_scores in regions_flat:
        hits = sorted_scores.size - np.searchsorted(sorted_scores, thresholds, side="left")
        spro += np.minimum(hits / region.saturation_area, 1.0)
    spro /= len(regions_flat)

    area = _area_to_cap(fpr, spro, fpr_cap) / fpr_cap
    return SproCurve(
        thresholds=thresholds, fpr=fpr, spro=spro, fpr_cap=fpr_cap, area=float(area)
    )


# ---------------------------------------------------------------------------
# dataset-level evaluation report


def evaluate_samples(
    samples: Sequence[dict],
    fpr_cap: float = 0.05,
) -> dict:
    """Image/pixel metrics for a full test split, grouped by anomaly tag.

    Each sample dict carries ``id``, ``scores`` (2-d array), optional
    ``mask`` (uint8, same shape; nonzero = anomalous), optional ``tag``
    and optional ``saturation`` overrides. Per anomaly tag the metrics are
    computed over that tag's samples plus all anomaly-free samples.
    Metrics that are undefined on a subset (single class, no regions)
    come back as None.
    """
    rows = []
    for s in samples:
        scores = np.asarray(s["scores"], dtype=np.float64)
        mask = s.get("mask")
        if mask is not None:
            mask = np.asarray(mask)
            if mask.shape != scores.shape:
                raise DimMismatchError(
                    f"sample {s['id']}: mask shape {mask.shape} != map shape {scores.shape}"
                )
        anomalous = mask is not None and bool((mask > 0).any())
        tag = s.get("tag") or ("good" if not anomalous else "anomalous")
        rows.append(
            {
                "id": s["id"],
                "scores": scores,
                "mask": mask,
                "anomalous": anomalous,
                "tag": tag if anomalous else "good",
                "regions": masks_to_regions(mask, s.get("saturation")) if anomalous else [],
                "image_score": float(scores.max()),
            }
        )

    def group_metrics(subset: list[dict]) -> dict:
        image_labels = np.array([int(r["anomalous"]) for r in subset])
        image_scores = np.array([r["image_score"] for r in subset])
        pixel_scores = np.concatenate([r["scores"].ravel() for r in subset])
        pixel_labels = np.concatenate(
            [
                (r["mask"] > 0).ravel() if r["mask"] is not None else np.zeros(r["scores"].size, bool)
                for r in subset
            ]
        ).astype(int)
        out = {"n_images": len(subset)}
        try:
            out["image_auroc"] = auroc(image_scores, image_labels)
        except SingleClassError:
            out["image_auroc"] = None
        try:
            out["pixel_auroc"] = auroc(pixel_scores, pixel_labels)
        except SingleClassError:
            out["pixel_auroc"] = None
        try:
            curve = spro_curve([r["scores"] for r in subset], [r["regions"] for r in subset], fpr_cap)
            out["au_spro"] = curve.area
        except (NoRegionsError, NoNegativePixelsError):
            out["au_spro"] = None
        return out

    goods = [r for r in rows if not r["anomalous"]]
    groups = {"all": group_metrics(rows)}
    for tag in sorted({r["tag"] for r in rows if r["anomalous"]}):
        groups[tag] = group_metrics(goods + [r for r in rows if r["tag"] == tag])
    return {
        "fpr_cap": fpr_cap,
        "groups": groups,
        "image_scores": {r["id"]: r["image_score"] for r in rows},
    }


def _fmt(value) -> str:
    return "nan" if value is None else f"{value:.6f}"


def report_kv_lines(report: dict, category: str = "") -> list[str]:
    """Machine-readable key=value lines, deterministic order."""
    lines = []
    if category:
        lines.append(f"category={category}")
    cap = report["fpr_cap"]
    lines.append(f"fpr_cap={cap:g}")
    order = ["all"] + sorted(k for k in report["groups"] if k != "all")
    for name in order:
        g = report["groups"][name]
        lines.append(f"{name}.n_images={g['n_images']}")
        lines.append(f"{name}.image_auroc={_fmt(g['image_auroc'])}")
        lines.append(f"{name}.pixel_auroc={_fmt(g['pixel_auroc'])}")
        lines.append(f"{name}.au_spro@{cap:g}={_fmt(g['au_spro'])}")
    return lines


def report_text(report: dict, category: str = "") -> str:
    """Human-readable table: one row per group, one column per metric."""
    cap = report["fpr_cap"]
    header = f"{'group':<12} {'images':>6} {'img AU-ROC':>11} {'pix AU-ROC':>11} {'AU-sPRO@' + format(cap, 'g'):>12}"
    lines = []
    if category:
        lines.append(f"category: {category}")
    lines.append(header)
    lines.append("-" * len(header))
    order = ["all"] + sorted(k for k in report["groups"] if k != "all")
    for name in order:
        g = report["groups"][name]
        lines.append(
            f"{name:<12} {g['n_images']:>6} {_fmt(g['image_auroc']):>11} "
            f"{_fmt(g['pixel_auroc']):>11} {_fmt(g['au_spro']):>12}"
        )
    return "\n".join(lines)
