"""Fused feature/spatial costs between grid embeddings and prototypes.

Two cost flavours exist on purpose and must not be conflated:

* the raw fused cost ``(1 - alpha) * (1 - cos(z, p)) + alpha * ||c - rho||^2``
  used for anomaly scoring, and
* its batch-normalized form where each component is divided by its maximum
  over the current batch before mixing — the cost fed to the transport
  solver during training.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .core import CostConfig, FeatureGrid, PrototypeSet, lattice_coords
from .errors import DimMismatchError, NonFiniteError, ValidationError, ZeroVectorError

NORMALIZER_GUARD = 1e-12


def _as_cost_config(alpha: float | CostConfig) -> CostConfig:
    if isinstance(alpha, CostConfig):
        return alpha
    return CostConfig(alpha=float(alpha))


def _unit_rows(mat: np.ndarray, cfg: CostConfig, what: str) -> np.ndarray:
    """Rows scaled to unit norm; zero rows error out or clamp to zero."""
    mat = np.asarray(mat, dtype=np.float64)
    norms = np.linalg.norm(mat, axis=1)
    tiny = norms < cfg.norm_floor
    if tiny.any():
        if not cfg.clamp_zero_features:
            idx = int(np.flatnonzero(tiny)[0])
            raise ZeroVectorError(
                f"{what} row {idx} has norm below {cfg.norm_floor}; cosine undefined "
                "(enable clamp_zero_features to substitute cost 1)"
            )
        norms = np.where(tiny, 1.0, norms)
        mat = np.where(tiny[:, None], 0.0, mat)  # unit row of zeros -> cosine 0
    return mat / norms[:, None]


def fused_cost(
    z: np.ndarray,
    c: np.ndarray,
    p: np.ndarray,
    rho: np.ndarray,
    alpha: float | CostConfig,
) -> float:
    """Raw fused cost between one embedding (z, c) and one prototype (p, rho)."""
    cfg = _as_cost_config(alpha)
    z = np.asarray(z, dtype=np.float64).reshape(1, -1)
    p = np.asarray(p, dtype=np.float64).reshape(1, -1)
    if z.shape != p.shape:
        raise DimMismatchError(f"feature dims differ: {z.shape[1]} vs {p.shape[1]}")
    zn = _unit_rows(z, cfg, "embedding")[0]
    pn = _unit_rows(p, cfg, "prototype")[0]
    feat = 1.0 - float(zn @ pn)
    delta = np.asarray(c, dtype=np.float64) - np.asarray(rho, dtype=np.float64)
    struct = float(delta @ delta)
    return (1.0 - cfg.alpha) * feat + cfg.alpha * struct


def feature_cost_matrix(
    feats: np.ndarray, weights: np.ndarray, cfg: CostConfig
) -> np.ndarray:
    """Cosine-distance matrix ``1 - cos`` between feature rows, float64."""
    fn = _unit_rows(feats, cfg, "embedding")
    pn = _unit_rows(weights, cfg, "prototype")
    m = 1.0 - fn @ pn.T
    # rounding can push exact matches a hair below zero
    np.clip(m, 0.0, 2.0, out=m)
    return m


def struct_cost_table(height: int, width: int) -> np.ndarray:
    """Squared distances between all pairs of lattice cells, (H*W, H*W).

    Symmetric with a zero diagonal; the largest entry is the
    corner-to-corner distance ``((H-1)/H)^2 + ((W-1)/W)^2``. Built from the
    same float32 lattice the grids carry so training and scoring agree.
    """
    coords = lattice_coords(height, width).reshape(-1, 2).astype(np.float64)
    diff = coords[:, None, :] - coords[None, :, :]
    return np.einsum("ijk,ijk->ij", diff, diff)


@dataclass
class CostMatrix:
    """Batch-normalized cost between B*H*W embeddings and n*H*W prototypes.

    ``max_feat`` and ``max_struct`` record the normalizers actually applied
    (0 means the component was constant and was zeroed instead of divided).
    """

    entries: np.ndarray  # (B*H*W, n*H*W) float64 in [0, 1]
    alpha: float
    max_feat: float
    max_struct: float

    def __post_init__(self) -> None:
        if self.entries.ndim != 2:
            raise ValidationError("cost matrix must be 2-d")
        if not np.isfinite(self.entries).all():
            raise NonFiniteError("cost matrix contains NaN or Inf")

    @property
    def rows(self) -> int:
        return self.entries.shape[0]

    @property
    def cols(self) -> int:
        return self.entries.shape[1]


def _batch_features(batch: Sequence[FeatureGrid], protos: PrototypeSet) -> np.ndarray:
    if len(batch) == 0:
        raise ValidationError("batch must contain at least one grid")
    for g in batch:
        if (g.height, g.width, g.dim) != (protos.height, protos.width, protos.dim):
            raise DimMismatchError(
                f"grid {(g.height, g.width, g.dim)} does not match prototype layout "
                f"{(protos.height, protos.width, protos.dim)}"
            )
    return np.concatenate([g.features_flat for g in batch], axis=0)


def struct_cost_matrix(batch_size: int, protos: PrototypeSet) -> np.ndarray:
    """Unnormalized spatial cost, rows batch-major then row-major grid order."""
    table = struct_cost_table(protos.height, protos.width)
    per_grid = table[:, protos.cell_index]  # (H*W, n*H*W)
    return np.tile(per_grid, (batch_size, 1))


def cost_matrix(
    batch: Sequence[FeatureGrid],
    protos: PrototypeSet,
    alpha: float | CostConfig,
) -> CostMatrix:
    """Normalized transport cost over one batch.

    Each component is divided by its maximum over the whole batch matrix;
    a component whose maximum falls below the guard is set to zero (the
    correct limit when all entries coincide, e.g. a 1 x 1 lattice).
    """
    cfg = _as_cost_config(alpha)
    feats = _batch_features(batch, protos)
    m_feat = feature_cost_matrix(feats, protos.weights, cfg)
    m_struct = struct_cost_matrix(len(batch), protos)

    max_feat = float(m_feat.max())
    max_struct = float(m_struct.max())
    if max_feat < NORMALIZER_GUARD:
        feat_part = np.zeros_like(m_feat)
        max_feat = 0.0
    else:
        feat_part = m_feat / max_feat
    if max_struct < NORMALIZER_GUARD:
        struct_part = np.zeros_like(m_struct)
        max_struct = 0.0
    else:
        struct_part = m_struct / max_struct

    entries = (1.0 - cfg.alpha) * feat_part + cfg.alpha * struct_part
    np.clip(entries, 0.0, 1.0, out=entries)
    return CostMatrix(entries=entries, alpha=cfg.alpha, max_feat=max_feat, max_struct=max_struct)


def raw_cost_matrix(
    batch: Sequence[FeatureGrid],
    protos: PrototypeSet,
    alpha: float | CostConfig,
) -> np.ndarray:
    """Unnormalized fused cost matrix — the quantity anomaly scores minimize."""
    cfg = _as_cost_config(alpha)
    feats = _batch_features(batch, protos)
    m_feat = feature_cost_matrix(feats, protos.weights, cfg)
    m_struct = struct_cost_matrix(len(batch), protos)
    return (1.0 - cfg.alpha) * m_feat + cfg.alpha * m_struct
