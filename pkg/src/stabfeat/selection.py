"""Feature selection: by detector response, by semantic mask, by activation."""

from __future__ import annotations

import logging

import numpy as np

from .features import FeatureSet, to_pixels
from .geometry import Matches
from .network import bilinear_sample_many

log = logging.getLogger(__name__)

DEFAULT_K = 500


def ranked_order(scores, xy) -> np.ndarray:
    """Indices by descending score, ties broken by (y, x, index)."""
    scores = np.asarray(scores, dtype=np.float64)
    xy = np.asarray(xy, dtype=np.float64).reshape(-1, 2)
    index = np.arange(len(scores))
    # lexsort sorts by the last key first
    return np.lexsort((index, xy[:, 0], xy[:, 1], -scores))


def _check(fs: FeatureSet, k: int) -> None:
    if k < 1:
        raise ValueError(f"k must be >= 1, got {k}")
    if len(fs) == 0:
        raise ValueError("cannot select from an empty feature set")


def _check_cover(fs: FeatureSet, grid: np.ndarray, what: str) -> None:
    h, w = grid.shape
    iw, ih = fs.image_size
    if (iw, ih) != (0, 0) and (iw, ih) != (w, h):
        raise ValueError(f"{what} is {w}x{h} but the image is {iw}x{ih}")


def select_topk_response(fs: FeatureSet, k: int = DEFAULT_K) -> FeatureSet:
    _check(fs, k)
    order = ranked_order(fs.responses, fs.xy)
    return fs.subset(order[:k])


def semantic_filter_select(fs: FeatureSet, stability: np.ndarray, k: int = DEFAULT_K) -> FeatureSet:
    """Drop keypoints on dynamic cells (nearest-cell lookup), then rank by response.

    When every keypoint is dynamic the result is an empty feature set and a
    warning is logged; this is an ordinary outcome.
    """
    if k < 1:
        raise ValueError(f"k must be >= 1, got {k}")
    stability = np.asarray(stability)
    _check_cover(fs, stability, "stability map")
    h, w = stability.shape
    if len(fs) == 0:
        return fs.empty_like()
    cols = np.clip(np.floor(fs.xy[:, 0] + 0.5).astype(np.int64), 0, w - 1)
    rows = np.clip(np.floor(fs.xy[:, 1] + 0.5).astype(np.int64), 0, h - 1)
    keep = np.flatnonzero(stability[rows, cols] != 0)
    if len(keep) == 0:
        log.warning("all %d keypoints fall on dynamic cells", len(fs))
        return fs.empty_like()
    static = fs.subset(keep)
    order = ranked_order(static.responses, static.xy)
    return static.subset(order[:k])


def select_topk_activation(fs: FeatureSet, amap: np.ndarray, k: int = DEFAULT_K) -> FeatureSet:
    """Top ``k`` keypoints by activation; each keeps its activation as weight."""
    _check(fs, k)
    amap = np.asarray(amap, dtype=np.float32)
    _check_cover(fs, amap, "activation map")
    scores = bilinear_sample_many(amap, fs.xy[:, 0], fs.xy[:, 1])
    order = ranked_order(scores, fs.xy)[:k]
    return fs.subset(order, weights=scores[order])


def attach_weights(matches: Matches, amap: np.ndarray, image_size: tuple[int, int] | None = None) -> Matches:
    """Weight each match by the activation at its query-side keypoint.

    Match coordinates are normalized; ``image_size`` defaults to the map's
    own (width, height).
    """
    amap = np.asarray(amap, dtype=np.float32)
    h, w = amap.shape
    size = (w, h) if image_size is None else tuple(image_size)
    if size != (w, h):
        raise ValueError(f"activation map is {w}x{h} but the image is {size[0]}x{size[1]}")
    px = to_pixels(matches.p1, size)
    # undo float round-off at the borders before the strict bounds check
    px = np.where(np.abs(px - np.rint(px)) < 1e-9, np.rint(px), px)
    return matches.with_weights(bilinear_sample_many(amap, px[:, 0], px[:, 1]))
