"""scikit-learn style wrappers around training and keypoint selection."""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from .data.prep import TripletRecord
from .evaluation import activation_quality
from .features import FeatureSet
from .network import build_model
from .selection import select_topk_activation
from .trainer import TrainConfig, TrainingData, train


def _check_images(X) -> np.ndarray:
    X = np.asarray(X, dtype=np.float32)
    if X.ndim == 3:
        X = X[None]
    if X.ndim != 4:
        raise ValueError(f"expected images shaped (n, C, H, W), got {X.shape}")
    if X.shape[0] == 0:
        raise ValueError("no images")
    if not np.isfinite(X).all():
        raise ValueError("images contain non-finite values")
    return X


def _check_maps(y, X: np.ndarray, what: str) -> np.ndarray:
    y = np.asarray(y)
    expected = (X.shape[0], X.shape[2], X.shape[3])
    if y.shape != expected:
        raise ValueError(f"{what} must be shaped {expected}, got {y.shape}")
    return y


def _check_triplets(triplets, n: int) -> list[TripletRecord]:
    if triplets is None or len(triplets) == 0:
        raise ValueError("fit needs at least one (query, positive, negative) triplet")
    out = []
    for t in triplets:
        rec = t if isinstance(t, TripletRecord) else TripletRecord(*(int(v) for v in t))
        for i in (rec.query, rec.positive, rec.negative):
            if not 0 <= i < n:
                raise ValueError(f"triplet index {i} outside [0, {n})")
        out.append(rec)
    return out


class StabilityMapEstimator(BaseEstimator, TransformerMixin):
    """Learns a per-pixel activation map from images, stability labels and triplets.

    ``fit(X, y, triplets=..., dense=...)`` takes images ``X`` (n, C, H, W),
    binary stability maps ``y`` (n, H, W), index triplets into ``X`` and,
    in dense mode, descriptor grids (n, H, W, D). ``predict`` and
    ``transform`` return activation maps (n, H, W).
    """

    def __init__(
        self,
        base_channels=8,
        downsample_count=2,
        max_epochs=30,
        lr=0.05,
        lr_decay_epochs=(20,),
        lr_decay=0.1,
        margin=0.5,
        mode="dense",
        seed=42,
        literal_schedule=False,
    ):
        self.base_channels = base_channels
        self.downsample_count = downsample_count
        self.max_epochs = max_epochs
        self.lr = lr
        self.lr_decay_epochs = lr_decay_epochs
        self.lr_decay = lr_decay
        self.margin = margin
        self.mode = mode
        self.seed = seed
        self.literal_schedule = literal_schedule

    def _train_config(self) -> TrainConfig:
        return TrainConfig(
            max_epochs=self.max_epochs,
            lr=self.lr,
            lr_decay_epochs=tuple(self.lr_decay_epochs),
            lr_decay=self.lr_decay,
            margin=self.margin,
            mode=self.mode,
            seed=self.seed,
            literal_schedule=self.literal_schedule,
        )

    def fit(self, X, y, triplets=None, dense=None, features=None):
        X = _check_images(X)
        y = _check_maps(y, X, "stability maps")
        cfg = self._train_config()
        records = _check_triplets(triplets, X.shape[0])
        ids = range(X.shape[0])
        data = TrainingData(images={i: X[i] for i in ids}, stability={i: y[i] for i in ids})
        if dense is not None:
            dense = np.asarray(dense, dtype=np.float32)
            if dense.ndim != 4 or dense.shape[:3] != y.shape:
                raise ValueError(f"dense grids must be shaped {y.shape + ('D',)}, got {dense.shape}")
            data.dense = {i: dense[i] for i in ids}
        if features is not None:
            if len(features) != X.shape[0]:
                raise ValueError(f"{len(features)} feature sets for {X.shape[0]} images")
            data.features = dict(enumerate(features))
        model = build_model(
            base_channels=self.base_channels,
            downsample_count=self.downsample_count,
            input_channels=X.shape[1],
            seed=self.seed,
        )
        result = train(model, records, data, cfg)
        self.model_ = result.model
        self.loss_log_ = result.log
        self.n_features_in_ = X.shape[1]
        return self

    def predict(self, X) -> np.ndarray:
        check_is_fitted(self, "model_")
        X = _check_images(X)
        if X.shape[1] != self.n_features_in_:
            raise ValueError(f"fitted on {self.n_features_in_} channels, got {X.shape[1]}")
        return np.stack([self.model_.predict(img) for img in X])

    def transform(self, X) -> np.ndarray:
        return self.predict(X)

    def score(self, X, y) -> float:
        """Mean ROC-AUC of the activation against ground-truth stability."""
        X = _check_images(X)
        y = _check_maps(y, X, "truth maps")
        maps = self.predict(X)
        return float(np.mean([activation_quality(a, t) for a, t in zip(maps, y)]))


class ActivationSelector(BaseEstimator, TransformerMixin):
    """Keeps the ``k`` keypoints with the highest activation.

    ``transform`` takes a list of feature sets and a matching list of
    activation maps; there is nothing to learn, so ``fit`` only validates.
    """

    def __init__(self, k=500):
        self.k = k

    def fit(self, X=None, y=None):
        if int(self.k) < 1:
            raise ValueError(f"k must be >= 1, got {self.k}")
        self.fitted_ = True
        return self

    def transform(self, X, maps=None) -> list[FeatureSet]:
        check_is_fitted(self, "fitted_")
        if maps is None or len(maps) != len(X):
            raise ValueError("transform needs one activation map per feature set")
        return [select_topk_activation(fs, a, int(self.k)) if len(fs) else fs for fs, a in zip(X, maps)]
