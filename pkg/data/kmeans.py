"""
K-means tokenizer over pooled log-mel frames
Stands in for a self-supervised feature extractor + K-means unit model
"""

from dataclasses import dataclass
from typing import Optional

import numpy as np
from scipy.optimize import linear_sum_assignment
from scipy.spatial.distance import cdist
from sklearn.cluster import KMeans

from core.errors import ShapeError


@dataclass
class KMeansModel:
    """K centroids; token id k (1-based) is centroid row k - 1"""
    centroids: np.ndarray
    inertia: float = 0.0
    iterations: int = 0

    @property
    def k(self) -> int:
        return self.centroids.shape[0]

    @property
    def dim(self) -> int:
        return self.centroids.shape[1]


def kmeans_fit(features: np.ndarray, k: int, max_iters: int = 100, seed: int = 0,
               init: Optional[np.ndarray] = None) -> KMeansModel:
    """k-means++ seeding then Lloyd iterations until the assignment stops changing.

    init, when given, replaces the k-means++ seeding with explicit centroids.
    Empty clusters are relocated to far-away points by scikit-learn.
    """
    features = np.asarray(features, dtype=np.float64)
    if features.ndim != 2:
        raise ShapeError(f"kmeans_fit expects an (M, dim) matrix, got shape {features.shape}")
    if features.shape[0] < k:
        raise ShapeError(f"cannot fit {k} clusters to {features.shape[0]} points")

    estimator = KMeans(
        n_clusters=k,
        init="k-means++" if init is None else np.asarray(init, dtype=np.float64),
        n_init=1,
        max_iter=max_iters,
        tol=0.0,
        algorithm="lloyd",
        random_state=seed,
    )
    estimator.fit(features)
    return KMeansModel(centroids=estimator.cluster_centers_.copy(),
                       inertia=float(estimator.inertia_),
                       iterations=int(estimator.n_iter_))


def tokenize(features: np.ndarray, model: KMeansModel) -> np.ndarray:
    """Nearest centroid per row as 1-based token ids; ties go to the lowest index"""
    features = np.asarray(features, dtype=np.float64)
    if features.ndim != 2 or features.shape[1] != model.dim:
        raise ShapeError(f"features of shape {features.shape} do not match centroid dim {model.dim}")
    distances = cdist(features, model.centroids, "sqeuclidean")
    return distances.argmin(axis=1) + 1


def pool_frames(mel: np.ndarray, r: int) -> np.ndarray:
    """Mean over non-overlapping windows of r frames (last window may be short)"""
    num_frames = mel.shape[0]
    starts = np.arange(0, num_frames, r)
    return np.stack([mel[s:s + r].mean(axis=0) for s in starts])


def token_agreement(predicted: np.ndarray, truth: np.ndarray, vocab: int) -> float:
    """Fraction of matching tokens under the best one-to-one relabelling of predicted ids"""
    predicted = np.asarray(predicted).ravel()
    truth = np.asarray(truth).ravel()
    if predicted.shape != truth.shape:
        raise ShapeError(f"{predicted.size} predicted tokens vs {truth.size} reference tokens")
    if predicted.size == 0:
        return 1.0
    confusion = np.zeros((vocab, vocab), dtype=np.int64)
    np.add.at(confusion, (predicted - 1, truth - 1), 1)
    rows, cols = linear_sum_assignment(confusion, maximize=True)
    return float(confusion[rows, cols].sum()) / predicted.size
