from __future__ import annotations

from dataclasses import dataclass

import numpy as np


def to_normalized(xy, image_size: tuple[int, int]) -> np.ndarray:
    """Pixel coordinates to [-1, 1] per axis; ``image_size`` is (width, height)."""
    w, h = image_size
    xy = np.asarray(xy, dtype=np.float64).reshape(-1, 2)
    return np.column_stack([2.0 * xy[:, 0] / (w - 1) - 1.0, 2.0 * xy[:, 1] / (h - 1) - 1.0])


def to_pixels(uv, image_size: tuple[int, int]) -> np.ndarray:
    w, h = image_size
    uv = np.asarray(uv, dtype=np.float64).reshape(-1, 2)
    return np.column_stack([(uv[:, 0] + 1.0) * (w - 1) / 2.0, (uv[:, 1] + 1.0) * (h - 1) / 2.0])


@dataclass
class FeatureSet:
    """Keypoints ``(x, y, response)`` in pixels with row-aligned descriptors.

    Float descriptors are (n, dim) float32; binary descriptors are packed
    (n, ceil(dim / 8)) uint8 rows with ``dim`` counting bits. ``weights``
    carries per-keypoint activations after activation-based selection and
    ``source`` the row indices into the set this one was selected from.
    """

    keypoints: np.ndarray
    descriptors: np.ndarray
    kind: str = "float"
    image_size: tuple[int, int] = (0, 0)
    dim: int | None = None
    weights: np.ndarray | None = None
    source: np.ndarray | None = None

    def __post_init__(self):
        self.keypoints = np.asarray(self.keypoints, dtype=np.float64).reshape(-1, 3)
        if self.kind not in ("float", "binary"):
            raise ValueError(f"descriptor kind must be 'float' or 'binary', got {self.kind!r}")
        dtype = np.float32 if self.kind == "float" else np.uint8
        self.descriptors = np.asarray(self.descriptors, dtype=dtype)
        if self.descriptors.ndim != 2:
            self.descriptors = self.descriptors.reshape(len(self.keypoints), -1)
        if len(self.keypoints) != len(self.descriptors):
            raise ValueError(f"{len(self.keypoints)} keypoints but {len(self.descriptors)} descriptor rows")
        if self.dim is None:
            self.dim = self.descriptors.shape[1] * (8 if self.kind == "binary" else 1)
        if np.any(self.keypoints[:, 2] < 0):
            raise ValueError("keypoint responses must be non-negative")
        self.image_size = (int(self.image_size[0]), int(self.image_size[1]))
        w, h = self.image_size
        if w > 0 and h > 0 and len(self.keypoints):
            xy = self.keypoints[:, :2]
            if xy.min() < 0 or np.any(xy[:, 0] > w - 1) or np.any(xy[:, 1] > h - 1):
                raise ValueError(f"keypoints fall outside the {w}x{h} image")
        if self.weights is not None:
            self.weights = np.asarray(self.weights, dtype=np.float64).reshape(-1)
        if self.source is None:
            self.source = np.arange(len(self.keypoints))
        else:
            self.source = np.asarray(self.source, dtype=np.int64).reshape(-1)

    def __len__(self) -> int:
        return len(self.keypoints)

    @property
    def xy(self) -> np.ndarray:
        return self.keypoints[:, :2]

    @property
    def responses(self) -> np.ndarray:
        return self.keypoints[:, 2]

    def normalized(self) -> np.ndarray:
        return to_normalized(self.xy, self.image_size)

    def subset(self, index, weights=None) -> "FeatureSet":
        index = np.asarray(index, dtype=np.int64)
        if weights is None and self.weights is not None:
            weights = self.weights[index]
        return FeatureSet(
            self.keypoints[index],
            self.descriptors[index],
            self.kind,
            self.image_size,
            self.dim,
            weights,
            self.source[index],
        )

    def permuted(self, rng: np.random.Generator) -> "FeatureSet":
        return self.subset(rng.permutation(len(self)))

    def empty_like(self) -> "FeatureSet":
        return self.subset(np.zeros(0, dtype=np.int64))
