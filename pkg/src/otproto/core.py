"""Domain types and the grid conventions shared by every other module.

Conventions pinned here and relied on everywhere else:

* Grid cells are 1-indexed and carry normalized coordinates
  ``(i / H, j / W)``, so coordinates lie in ``(0, 1]``.
* A prototype bank holds ``n`` prototypes per grid cell; cell ``(i, j)``
  owns the ``n`` consecutive indices starting at ``((i-1)*W + (j-1)) * n``.
* Arrays are stored as float32; heavier numerics accumulate in float64.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .errors import (
    DimMismatchError,
    NonFiniteError,
    ValidationError,
    ZeroDimError,
)

STORAGE_DTYPE = np.float32


def ensure_finite(arr: np.ndarray, name: str) -> None:
    if not np.isfinite(arr).all():
        raise NonFiniteError(f"{name} contains NaN or Inf")


def lattice_coords(height: int, width: int) -> np.ndarray:
    """Normalized 1-indexed lattice, shape ``(height, width, 2)``.

    Cell ``(i, j)`` (1-indexed) carries ``(i / height, j / width)``.
    """
    if height < 1 or width < 1:
        raise ZeroDimError("lattice dimensions must be >= 1")
    rows = (np.arange(1, height + 1, dtype=np.float64) / height).astype(STORAGE_DTYPE)
    cols = (np.arange(1, width + 1, dtype=np.float64) / width).astype(STORAGE_DTYPE)
    out = np.empty((height, width, 2), dtype=STORAGE_DTYPE)
    out[..., 0] = rows[:, None]
    out[..., 1] = cols[None, :]
    return out


@dataclass
class FeatureGrid:
    """One H x W grid of D-dimensional feature vectors plus cell coordinates.

    Immutable after construction; ``features`` and ``coords`` are frozen
    arrays so grids can be shared read-only across workers.
    """

    features: np.ndarray  # (H, W, D) float32
    coords: np.ndarray    # (H, W, 2) float32
    scale_id: int = 0

    def __post_init__(self) -> None:
        if self.features.ndim != 3:
            raise ValidationError("features must be a (H, W, D) array")
        h, w, d = self.features.shape
        if h < 1 or w < 1 or d < 1:
            raise ZeroDimError("grid dimensions must be >= 1")
        ensure_finite(self.features, "features")
        expected = lattice_coords(h, w)
        if self.coords.shape != expected.shape or not np.array_equal(self.coords, expected):
            raise ValidationError("coords must be the normalized 1-indexed lattice")
        self.features.setflags(write=False)
        self.coords.setflags(write=False)

    @property
    def height(self) -> int:
        return self.features.shape[0]

    @property
    def width(self) -> int:
        return self.features.shape[1]

    @property
    def dim(self) -> int:
        return self.features.shape[2]

    @property
    def features_flat(self) -> np.ndarray:
        """Row-major (H*W, D) view: i outer, j inner."""
        return self.features.reshape(-1, self.features.shape[2])

    @property
    def coords_flat(self) -> np.ndarray:
        return self.coords.reshape(-1, 2)


def make_feature_grid(raw: np.ndarray, scale_id: int = 0) -> FeatureGrid:
    """Build a FeatureGrid from an (H, W, D) array.

    Features are stored as float32; the coordinate lattice is derived from
    the shape. Raises ``ZeroDimError`` for empty dimensions and
    ``NonFiniteError`` for NaN/Inf entries.
    """
    arr = np.asarray(raw)
    if arr.ndim != 3:
        raise ValidationError(f"expected a 3-d (H, W, D) array, got ndim={arr.ndim}")
    if min(arr.shape) < 1:
        raise ZeroDimError(f"grid dimensions must be >= 1, got {arr.shape}")
    feats = np.array(arr, dtype=STORAGE_DTYPE)
    ensure_finite(feats, "features")
    return FeatureGrid(features=feats, coords=lattice_coords(*arr.shape[:2]), scale_id=scale_id)


@dataclass
class PrototypeSet:
    """n prototypes per lattice cell: learned weights at frozen coordinates.

    ``weights`` is the only mutable state in the package; the training loop
    updates it in place between transport solves.
    """

    weights: np.ndarray  # (n*H*W, D) float32, mutated during training
    coords: np.ndarray   # (n*H*W, 2) float32, frozen
    n: int
    height: int
    width: int
    alpha: float
    scale_id: int = 0

    def __post_init__(self) -> None:
        total = self.n * self.height * self.width
        if self.n < 1 or self.height < 1 or self.width < 1:
            raise ZeroDimError("prototype layout dimensions must be >= 1")
        if self.weights.ndim != 2 or self.weights.shape[0] != total:
            raise DimMismatchError(
                f"expected {total} prototype weights, got shape {self.weights.shape}"
            )
        if self.coords.shape != (total, 2):
            raise DimMismatchError("prototype coords shape must be (n*H*W, 2)")
        # alpha is carried through checkpoints as float32; round here so the
        # in-memory value and the reloaded value score identically.
        self.alpha = float(np.float32(self.alpha))
        if not 0.0 <= self.alpha <= 1.0:
            raise ValidationError(f"alpha must be in [0, 1], got {self.alpha}")
        ensure_finite(self.weights, "prototype weights")
        expected = np.repeat(lattice_coords(self.height, self.width).reshape(-1, 2), self.n, axis=0)
        if not np.array_equal(self.coords, expected):
            raise ValidationError("prototype coords must repeat the lattice n times per cell")
        self.coords.setflags(write=False)

    @property
    def total(self) -> int:
        return self.weights.shape[0]

    @property
    def dim(self) -> int:
        return self.weights.shape[1]

    @property
    def cell_index(self) -> np.ndarray:
        """Flat cell id (0-based, row-major) owning each prototype."""
        return np.arange(self.total) // self.n

    @property
    def lattice_cells(self) -> np.ndarray:
        """1-indexed (i, j) lattice cell of each prototype, shape (n*H*W, 2)."""
        cells = self.cell_index
        return np.stack([cells // self.width + 1, cells % self.width + 1], axis=1)

    def copy(self) -> "PrototypeSet":
        return PrototypeSet(
            weights=self.weights.copy(),
            coords=self.coords.copy(),
            n=self.n,
            height=self.height,
            width=self.width,
            alpha=self.alpha,
            scale_id=self.scale_id,
        )


def init_prototypes(
    n: int,
    height: int,
    width: int,
    dim: int,
    alpha: float,
    seed: int | np.random.Generator | None = 0,
    mean: float = 0.0,
    std: float = 1.0,
    scale_id: int = 0,
) -> PrototypeSet:
    """Gaussian-initialized prototype bank on the (height, width) lattice.

    Weights are drawn i.i.d. from ``Normal(mean, std)`` with a seeded
    generator, so the same seed reproduces the same bank bit for bit.
    """
    if min(n, height, width, dim) < 1:
        raise ZeroDimError("n, height, width, dim must all be >= 1")
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    total = n * height * width
    weights = rng.normal(mean, std, size=(total, dim)).astype(STORAGE_DTYPE)
    coords = np.repeat(lattice_coords(height, width).reshape(-1, 2), n, axis=0)
    return PrototypeSet(
        weights=weights, coords=coords, n=n, height=height, width=width,
        alpha=alpha, scale_id=scale_id,
    )


@dataclass
class TransportPlan:
    """Nonnegative coupling between batch embeddings (rows) and prototypes.

    Marginals are uniform: every row holds mass ``1/rows`` and every column
    ``1/cols`` up to the solver tolerance recorded by the producer.
    """

    matrix: np.ndarray  # (rows, cols) float64
    row_mass: float
    col_mass: float
    epsilon: float
    iterations: int
    converged: bool

    def __post_init__(self) -> None:
        if self.matrix.ndim != 2:
            raise ValidationError("transport plan must be a matrix")
        ensure_finite(self.matrix, "transport plan")
        if self.matrix.min() < 0:
            raise ValidationError("transport plan entries must be nonnegative")

    @property
    def rows(self) -> int:
        return self.matrix.shape[0]

    @property
    def cols(self) -> int:
        return self.matrix.shape[1]

    @property
    def total_mass(self) -> float:
        return float(self.matrix.sum())


@dataclass
class AnomalyMap:
    """Pixel-level anomaly scores at image resolution plus the image score."""

    scores: np.ndarray  # (H0, W0) float32, >= 0
    image_score: float

    def __post_init__(self) -> None:
        if self.scores.ndim != 2:
            raise ValidationError("anomaly map must be 2-d")
        ensure_finite(self.scores, "anomaly scores")
        if self.scores.min() < 0:
            raise ValidationError("anomaly scores must be nonnegative")
        if self.image_score != float(self.scores.max()):
            raise ValidationError("image_score must equal the maximum map entry")

    @classmethod
    def from_scores(cls, scores: np.ndarray) -> "AnomalyMap":
        scores = np.asarray(scores, dtype=STORAGE_DTYPE)
        return cls(scores=scores, image_score=float(scores.max()))

    @property
    def height(self) -> int:
        return self.scores.shape[0]

    @property
    def width(self) -> int:
        return self.scores.shape[1]


@dataclass
class CostConfig:
    """Mixing weight between feature and spatial cost, plus edge policies.

    ``alpha`` = 0 is a purely feature-based (global) cost; ``alpha`` = 1 is
    purely spatial. ``clamp_zero_features`` substitutes cosine similarity 0
    (feature cost 1) for vectors under ``norm_floor`` instead of raising.
    """

    alpha: float
    clamp_zero_features: bool = False
    norm_floor: float = 1e-12

    def __post_init__(self) -> None:
        if not 0.0 <= self.alpha <= 1.0:
            raise ValidationError(f"alpha must be in [0, 1], got {self.alpha}")
        if self.norm_floor <= 0:
            raise ValidationError("norm_floor must be positive")


@dataclass
class TrainConfig:
    """Prototype-learning hyperparameters and their defaults."""

    n: int = 16
    eta: float = 0.95
    alpha_local: float = 0.3
    epsilon: float = 0.01
    max_sinkhorn_iters: int = 100
    epochs: int = 50
    batch_size: int = 64
    rng_seed: int = 0
    init_std: float = 1.0
    init_mean: float = 0.0

    def __post_init__(self) -> None:
        if self.n < 1:
            raise ValidationError("n must be >= 1")
        if not 0.0 <= self.eta <= 1.0:
            raise ValidationError(f"eta must be in [0, 1], got {self.eta}")
        if not 0.0 <= self.alpha_local <= 1.0:
            raise ValidationError("alpha_local must be in [0, 1]")
        if self.epsilon <= 0:
            raise ValidationError("epsilon must be > 0")
        if self.max_sinkhorn_iters < 1:
            raise ValidationError("max_sinkhorn_iters must be >= 1")
        if self.epochs < 1:
            raise ValidationError("epochs must be >= 1")
        if self.batch_size < 1:
            raise ValidationError("batch_size must be >= 1")
