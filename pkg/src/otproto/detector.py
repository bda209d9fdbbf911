"""Scikit-learn style estimator wrapping training and inference for one scale.

``fit`` consumes an ``(N, H, W, D)`` stack of feature grids extracted from
normal samples and learns a global (alpha = 0) and a local
(alpha = alpha_local) prototype bank. Scoring follows the sklearn outlier
convention: ``score_samples`` returns the negated image-level anomaly score
(higher = more normal), ``predict`` maps inliers to +1 and outliers to -1.
"""

from __future__ import annotations

import numbers

import numpy as np
from sklearn.base import BaseEstimator, OutlierMixin
from sklearn.exceptions import NotFittedError

from .core import TrainConfig, make_feature_grid
from .errors import DimMismatchError, ValidationError
from .learn import train
from .score import aggregate, score_grid
from .sinkhorn import SolverParams


def _validate_stack(X, dim: int | None = None) -> np.ndarray:
    X = np.asarray(X, dtype=np.float64)
    if X.ndim != 4:
        raise ValidationError(f"X must have shape (n_samples, H, W, D), got {X.shape}")
    if min(X.shape) < 1:
        raise ValidationError(f"X has an empty dimension: {X.shape}")
    if not np.isfinite(X).all():
        raise ValidationError("X contains NaN or Inf")
    if dim is not None and X.shape[1:] != dim:
        raise DimMismatchError(f"X grids {X.shape[1:]} do not match fitted grids {dim}")
    return X


class PrototypeAnomalyDetector(BaseEstimator, OutlierMixin):
    """Anomaly detection via optimal-transport-learned feature prototypes.

    Parameters
    ----------
    n : prototypes per grid cell.
    alpha_local : spatial-cost weight of the local bank (the global bank
        always uses 0).
    eta : EMA retention factor of the prototype update.
    epsilon : entropic regularization of the transport solver.
    max_sinkhorn_iters, epochs, batch_size : training loop sizes.
    init_mean, init_std : Gaussian prototype initialization.
    random_state : seed; identical seeds give bit-identical models.
    out_height, out_width : resolution of the produced anomaly maps.
    contamination : "auto" places the inlier threshold at the maximum
        training image score; a float in (0, 0.5] uses that upper quantile.
    """

    def __init__(
        self,
        n: int = 16,
        alpha_local: float = 0.3,
        eta: float = 0.95,
        epsilon: float = 0.01,
        max_sinkhorn_iters: int = 100,
        epochs: int = 50,
        batch_size: int = 64,
        init_mean: float = 0.0,
        init_std: float = 1.0,
        random_state: int = 0,
        out_height: int = 224,
        out_width: int = 224,
        contamination: str | float = "auto",
    ):
        self.n = n
        self.alpha_local = alpha_local
        self.eta = eta
        self.epsilon = epsilon
        self.max_sinkhorn_iters = max_sinkhorn_iters
        self.epochs = epochs
        self.batch_size = batch_size
        self.init_mean = init_mean
        self.init_std = init_std
        self.random_state = random_state
        self.out_height = out_height
        self.out_width = out_width
        self.contamination = contamination

    def _check_fitted(self) -> None:
        if not hasattr(self, "banks_"):
            raise NotFittedError("call fit before scoring")

    def fit(self, X, y=None):
        """Learn the prototype banks from normal samples.

        X : array of shape (n_samples, H, W, D).
        """
        X = _validate_stack(X)
        if isinstance(self.contamination, numbers.Real):
            if not 0.0 < self.contamination <= 0.5:
                raise ValidationError("contamination must be in (0, 0.5] or 'auto'")
        elif self.contamination != "auto":
            raise ValidationError("contamination must be a float or 'auto'")
        cfg = TrainConfig(
            n=self.n,
            eta=self.eta,
            alpha_local=self.alpha_local,
            epsilon=self.epsilon,
            max_sinkhorn_iters=self.max_sinkhorn_iters,
            epochs=self.epochs,
            batch_size=self.batch_size,
            rng_seed=self.random_state,
            init_std=self.init_std,
            init_mean=self.init_mean,
        )
        grids = [make_feature_grid(x) for x in X]
        state = train({0: grids}, cfg)
        self.banks_ = state.banks[0]
        self.train_history_ = state.history
        self.grid_shape_ = tuple(X.shape[1:])
        self.n_features_in_ = X.shape[3]

        train_scores = self._image_scores(X)
        if self.contamination == "auto":
            threshold = float(train_scores.max())
        else:
            threshold = float(np.quantile(train_scores, 1.0 - self.contamination))
        self.offset_ = -threshold
        return self

    def _maps(self, X) -> list:
        self._check_fitted()
        X = _validate_stack(X, self.grid_shape_)
        out = []
        for x in X:
            grid = make_feature_grid(x)
            fields = [score_grid(grid, bank)[0] for bank in self.banks_]
            out.append(aggregate([fields], self.out_height, self.out_width))
        return out

    def anomaly_maps(self, X) -> np.ndarray:
        """Pixel-level anomaly maps, shape (n_samples, out_height, out_width)."""
        return np.stack([m.scores for m in self._maps(X)])

    def _image_scores(self, X) -> np.ndarray:
        return np.array([m.image_score for m in self._maps(X)])

    def score_samples(self, X) -> np.ndarray:
        """Negated image-level anomaly score (higher = more normal)."""
        return -self._image_scores(X)

    def decision_function(self, X) -> np.ndarray:
        """Positive for inliers, negative for outliers."""
        return self.score_samples(X) - self.offset_

    def predict(self, X) -> np.ndarray:
        return np.where(self.decision_function(X) < 0, -1, 1)
