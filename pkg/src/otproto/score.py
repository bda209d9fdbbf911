"""Inference: per-cell anomaly scores, map aggregation, and patch provenance.

A cell's anomaly score is its minimum unnormalized fused cost over all
prototypes of one bank — no batch normalization enters inference, so scores
do not depend on which other images are processed alongside. Per scale the
global and local bank fields are averaged, upsampled bilinearly to image
resolution, and the per-scale maps summed; the image-level score is the
maximum of the final map.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .core import AnomalyMap, CostConfig, FeatureGrid, PrototypeSet
from .cost import raw_cost_matrix
from .errors import (
    DimMismatchError,
    MissingProvenanceError,
    ValidationError,
    ZeroDimError,
)


@dataclass
class AssignmentMap:
    """Argmin prototype per grid cell under the bank's fused cost.

    ``cost`` holds the minimized cost value at the stored argmin; ties are
    broken toward the lowest prototype index so runs are reproducible.
    """

    proto_index: np.ndarray  # (H, W) int32
    cost: np.ndarray         # (H, W) float64
    proto_cell: np.ndarray   # (H, W, 2) int32, 1-indexed lattice cell of the argmin
    scale_id: int
    alpha: float


def score_grid(
    grid: FeatureGrid,
    protos: PrototypeSet,
    *,
    clamp_zero_features: bool = False,
) -> tuple[np.ndarray, AssignmentMap]:
    """Minimum fused cost to any prototype, per cell, plus the assignment.

    Uses the bank's own alpha — a bank is scored with the same mixing
    weight it was trained with.
    """
    cfg = CostConfig(alpha=protos.alpha, clamp_zero_features=clamp_zero_features)
    costs = raw_cost_matrix([grid], protos, cfg)  # (H*W, N_p)
    idx = np.argmin(costs, axis=1)  # first occurrence == lowest index on ties
    best = costs[np.arange(costs.shape[0]), idx]
    h, w = grid.height, grid.width
    cells = protos.lattice_cells[idx]
    assignment = AssignmentMap(
        proto_index=idx.reshape(h, w).astype(np.int32),
        cost=best.reshape(h, w),
        proto_cell=cells.reshape(h, w, 2).astype(np.int32),
        scale_id=grid.scale_id,
        alpha=protos.alpha,
    )
    return best.reshape(h, w), assignment


def bilinear_upsample(field: np.ndarray, out_height: int, out_width: int) -> np.ndarray:
    """Bilinear resampling with the half-pixel (align-corners-false) convention.

    Output pixel centers are mapped back to input coordinates via
    ``(k + 0.5) * in/out - 0.5`` and sample with edge clamping. Every output
    value is a convex combination of inputs, so the maximum never increases.
    """
    field = np.asarray(field, dtype=np.float64)
    if field.ndim != 2:
        raise ValidationError("field must be 2-d")
    if out_height < 1 or out_width < 1:
        raise ZeroDimError("output dimensions must be >= 1")
    h, w = field.shape

    def axis_weights(n_in: int, n_out: int):
        pos = (np.arange(n_out) + 0.5) * (n_in / n_out) - 0.5
        lo = np.floor(pos)
        t = pos - lo
        i0 = np.clip(lo.astype(np.int64), 0, n_in - 1)
        i1 = np.clip(lo.astype(np.int64) + 1, 0, n_in - 1)
        return i0, i1, t

    y0, y1, ty = axis_weights(h, out_height)
    x0, x1, tx = axis_weights(w, out_width)
    top = (1.0 - tx)[None, :] * field[y0][:, x0] + tx[None, :] * field[y0][:, x1]
    bot = (1.0 - tx)[None, :] * field[y1][:, x0] + tx[None, :] * field[y1][:, x1]
    return (1.0 - ty)[:, None] * top + ty[:, None] * bot


def aggregate(
    per_scale_fields: Sequence[Sequence[np.ndarray]],
    out_height: int,
    out_width: int,
    *,
    smooth_sigma: float = 0.0,
) -> AnomalyMap:
    """Average each scale's fields, upsample, sum scales, take the max.

    ``per_scale_fields`` holds per scale the (global, local) score fields —
    any number >= 1 of fields per scale is averaged. Optional Gaussian
    smoothing (off by default) is applied to the summed map.
    """
    if len(per_scale_fields) == 0:
        raise ValidationError("at least one scale is required")
    acc = np.zeros((out_height, out_width), dtype=np.float64)
    for fields in per_scale_fields:
        fields = [np.asarray(f, dtype=np.float64) for f in fields]
        if len(fields) == 0:
            raise ValidationError("each scale needs at least one score field")
        shapes = {f.shape for f in fields}
        if len(shapes) != 1:
            raise DimMismatchError(f"fields of one scale disagree in shape: {sorted(shapes)}")
        mean_field = sum(fields) / len(fields)
        acc += bilinear_upsample(mean_field, out_height, out_width)
    if smooth_sigma > 0.0:
        from scipy.ndimage import gaussian_filter

        acc = gaussian_filter(acc, sigma=smooth_sigma)
        np.clip(acc, 0.0, None, out=acc)
    return AnomalyMap.from_scores(acc)


@dataclass
class Provenance:
    """Training-set feature most similar to one prototype."""

    sample_id: str
    i: int  # 1-indexed lattice row
    j: int  # 1-indexed lattice column
    similarity: float


def reconstruct_prototypes(
    protos: PrototypeSet,
    samples: Sequence[tuple[str, FeatureGrid]],
    *,
    clamp_zero_features: bool = False,
) -> list[Provenance]:
    """For each prototype, the (sample, cell) maximizing cosine similarity.

    Exhaustive over every feature of every sample; ties break toward the
    lexicographically smallest (sample_id, i, j).
    """
    if len(samples) == 0:
        raise ValidationError("need at least one sample to reconstruct from")
    ordered = sorted(samples, key=lambda item: item[0])
    for sid, grid in ordered:
        if grid.dim != protos.dim:
            raise DimMismatchError(f"sample {sid} feature dim {grid.dim} != {protos.dim}")
    cfg = CostConfig(alpha=0.0, clamp_zero_features=clamp_zero_features)
    from .cost import _unit_rows  # same zero-vector policy as the cost module

    feats = np.concatenate([grid.features_flat for _, grid in ordered], axis=0)
    sims = _unit_rows(protos.weights, cfg, "prototype") @ _unit_rows(feats, cfg, "feature").T
    flat_best = np.argmax(sims, axis=1)  # first occurrence == lexicographic winner

    cells_per = [grid.height * grid.width for _, grid in ordered]
    offsets = np.cumsum([0] + cells_per)
    out = []
    for p, flat in enumerate(flat_best):
        s = int(np.searchsorted(offsets, flat, side="right") - 1)
        local = int(flat - offsets[s])
        sid, grid = ordered[s]
        out.append(
            Provenance(
                sample_id=sid,
                i=local // grid.width + 1,
                j=local % grid.width + 1,
                similarity=float(sims[p, flat]),
            )
        )
    return out


def restore_image_patches(
    assignment: AssignmentMap,
    provenance: Sequence[Provenance | None],
) -> list[list[Provenance]]:
    """Montage recipe: per test cell, the provenance of its argmin prototype.

    The engine never touches pixels — downstream tooling turns the recipe
    into an actual image by pasting training patches.
    """
    if len(provenance) == 0:
        raise MissingProvenanceError("no prototype provenance available")
    h, w = assignment.proto_index.shape
    recipe: list[list[Provenance]] = []
    for i in range(h):
        row = []
        for j in range(w):
            idx = int(assignment.proto_index[i, j])
            if idx >= len(provenance) or provenance[idx] is None:
                raise MissingProvenanceError(f"prototype {idx} has no provenance")
            row.append(provenance[idx])
        recipe.append(row)
    return recipe
