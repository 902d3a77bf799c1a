"""Training objective: semantic BCE, triplet matching loss and their schedule.

Losses accept autodiff tensors for activation maps so gradients reach the
network. Scalars may be given either as tensors or plain floats; plain
inputs give plain outputs.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .geometry import Matches, symmetric_distances
from .features import to_pixels

DEFAULT_MARGIN = 0.5
SCHEDULE_DECAY = 0.9
# distance charged to a pair that cannot be geometrically compared
UNMATCHED_DISTANCE = 1.0


def _as_map(a) -> Tensor:
    if isinstance(a, Tensor):
        return a
    return Tensor(np.asarray(a, dtype=np.float32))


def _spatial(a: Tensor) -> tuple[int, int]:
    h, w = a.shape[-2:]
    if a.data.size != h * w:
        raise ValueError(f"expected a single activation map, got shape {a.shape}")
    return h, w


def semantic_loss(A, S) -> Tensor:
    """Mean BCE between an activation map and a binary stability map."""
    A = _as_map(A)
    S = np.asarray(S, dtype=np.float64)
    if _spatial(A) != S.shape[-2:]:
        raise ValueError(f"activation map {_spatial(A)} and stability map {S.shape} differ in size")
    return ad.bce_mean(A, S.reshape(A.shape))


def dense_distance(A1, D1, A2, D2) -> Tensor:
    """``||sum A1*d1 - sum A2*d2|| / (w*h)`` between two weighted dense grids."""
    A1, A2 = _as_map(A1), _as_map(A2)
    D1, D2 = np.asarray(D1), np.asarray(D2)
    if D1.ndim != 3 or D2.ndim != 3 or D1.shape[2] != D2.shape[2]:
        raise ValueError(f"descriptor grids {D1.shape} and {D2.shape} are incompatible")
    if _spatial(A1) != _spatial(A2):
        raise ValueError(f"activation maps {_spatial(A1)} and {_spatial(A2)} differ in size")
    h, w = _spatial(A1)
    g1 = ad.weighted_pixel_sum(A1, D1)
    g2 = ad.weighted_pixel_sum(A2, D2)
    return ad.l2norm(g1 - g2) * (1.0 / (w * h))


def triplet_loss(d_qp, d_qn, m: float = DEFAULT_MARGIN):
    """Hinge ``max(d_qp - d_qn + m, 0)``."""
    if m < 0:
        raise ValueError(f"margin must be >= 0, got {m}")
    if not isinstance(d_qp, Tensor) and not isinstance(d_qn, Tensor):
        return max(float(d_qp) - float(d_qn) + m, 0.0)
    if isinstance(d_qp, Tensor):
        diff = d_qp - d_qn
    else:
        diff = ad.neg(d_qn) + float(d_qp)
    return ad.relu(diff + m)


@dataclass(frozen=True)
class LossWeights:
    epoch: int
    w_sem: float
    w_mat: float

    def __post_init__(self):
        if not (0.0 <= self.w_sem <= 1.0 and 0.0 <= self.w_mat <= 1.0):
            raise ValueError(f"loss weights must lie in [0, 1], got ({self.w_sem}, {self.w_mat})")
        if abs(self.w_sem + self.w_mat - 1.0) > 1e-12:
            raise ValueError("loss weights must sum to 1")


def alpha_schedule(epoch: int, literal: bool = False) -> LossWeights:
    """Loss weights for ``epoch``.

    By default the semantic weight starts at 1 and is multiplied by 0.9 each
    epoch, so the matching loss takes over gradually. ``literal=True`` swaps
    the roles and decays the matching weight instead.
    """
    if epoch < 0:
        raise ValueError(f"epoch must be >= 0, got {epoch}")
    decayed = SCHEDULE_DECAY**epoch
    if literal:
        return LossWeights(epoch, 1.0 - decayed, decayed)
    return LossWeights(epoch, decayed, 1.0 - decayed)


def hybrid_loss(sem, mat, weights: LossWeights):
    """``w_sem * sem + w_mat * mat``; zero-weighted terms are left out of the graph."""
    if not isinstance(sem, Tensor) and not isinstance(mat, Tensor):
        return weights.w_sem * float(sem) + weights.w_mat * float(mat)
    terms = [(x, c) for x, c in ((sem, weights.w_sem), (mat, weights.w_mat)) if c != 0.0]
    out = None
    for x, c in terms:
        term = x * c if isinstance(x, Tensor) else c * float(x)
        if out is None:
            out = term
        elif isinstance(out, Tensor):
            out = out + term
        else:
            out = ad.add(term, out)
    return out if isinstance(out, Tensor) else Tensor(np.asarray(out, dtype=np.float32))


# ---------------------------------------------------------------------------
# per-triplet matching loss


@dataclass
class SparsePair:
    """Matches between the query and one other image, F held constant.

    ``matches.p1`` are query-side normalized coordinates. ``F`` is None when
    no model could be fit; the pair then contributes a constant distance.
    """

    matches: Matches
    F: np.ndarray | None
    image_size: tuple[int, int]

    def residuals(self) -> np.ndarray:
        return symmetric_distances(self.F, self.matches)


def sparse_pair_distance(A_query, pair: SparsePair):
    """Activation-weighted mean symmetric epipolar distance of one pair.

    Weights are the query activation sampled at each match's query keypoint,
    so the gradient flows into the map through those samples.
    """
    if pair.F is None or len(pair.matches) == 0:
        return UNMATCHED_DISTANCE
    A = _as_map(A_query)
    h, w = _spatial(A)
    if tuple(pair.image_size) != (w, h):
        raise ValueError(f"pair image size {pair.image_size} does not match the {w}x{h} map")
    px = to_pixels(pair.matches.p1, pair.image_size)
    px = np.clip(px, 0.0, [w - 1, h - 1])
    weights = ad.sample_bilinear(A, px[:, 0], px[:, 1])
    if not weights.data.astype(np.float64).sum() > 0:
        return UNMATCHED_DISTANCE
    return ad.weighted_mean(weights, pair.residuals())


@dataclass
class Triplet:
    """Query, positive and negative image ids with their loss payloads.

    Dense mode needs ``dense`` grids for all three images. Sparse mode needs
    the query-positive and query-negative ``pairs``.
    """

    query: int
    positive: int
    negative: int
    dense: tuple[np.ndarray, np.ndarray, np.ndarray] | None = None
    pairs: tuple[SparsePair, SparsePair] | None = None

    def __post_init__(self):
        if len({self.query, self.positive, self.negative}) != 3:
            raise ValueError(f"triplet ids must be distinct, got {(self.query, self.positive, self.negative)}")


def matching_loss_for_triplet(
    triplet: Triplet,
    maps: tuple,
    mode: str = "dense",
    m: float = DEFAULT_MARGIN,
):
    """Triplet hinge over image distances.

    ``maps`` holds the activation maps of (query, positive, negative); sparse
    mode only reads the query map.
    """
    if len(maps) != 3:
        raise ValueError("maps must hold the query, positive and negative activation maps")
    A_q, A_p, A_n = maps
    if mode == "dense":
        if triplet.dense is None:
            raise ValueError(f"triplet {triplet.query}: dense mode needs descriptor grids")
        D_q, D_p, D_n = triplet.dense
        d_qp = dense_distance(A_q, D_q, A_p, D_p)
        d_qn = dense_distance(A_q, D_q, A_n, D_n)
    elif mode == "sparse":
        if triplet.pairs is None:
            raise ValueError(f"triplet {triplet.query}: sparse mode needs matched pairs")
        d_qp = sparse_pair_distance(A_q, triplet.pairs[0])
        d_qn = sparse_pair_distance(A_q, triplet.pairs[1])
    else:
        raise ValueError(f"unknown distance mode {mode!r}; expected 'dense' or 'sparse'")
    return triplet_loss(d_qp, d_qn, m)

