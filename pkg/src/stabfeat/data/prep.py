"""Training-set preparation: stability maps from labels and triplet mining."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

log = logging.getLogger(__name__)

DEFAULT_STATIC = frozenset(
    {"road", "sidewalk", "building", "wall", "fence", "pole", "traffic_light", "traffic_sign"}
)
DEFAULT_DYNAMIC = frozenset(
    {
        "person", "rider", "car", "truck", "bus", "train",
        "motorcycle", "bicycle", "sky", "vegetation", "terrain",
    }
)

# Cityscapes-style train ids for the default partition
DEFAULT_CATEGORIES = {
    0: "road", 1: "sidewalk", 2: "building", 3: "wall", 4: "fence", 5: "pole",
    6: "traffic_light", 7: "traffic_sign", 8: "vegetation", 9: "terrain", 10: "sky",
    11: "person", 12: "rider", 13: "car", 14: "truck", 15: "bus", 16: "train",
    17: "motorcycle", 18: "bicycle",
}


@dataclass
class LabelMap:
    ids: np.ndarray
    names: dict[int, str] = field(default_factory=lambda: dict(DEFAULT_CATEGORIES))

    def __post_init__(self):
        self.ids = np.asarray(self.ids, dtype=np.uint8)
        if self.ids.ndim != 2:
            raise ValueError(f"label map must be 2-D, got shape {self.ids.shape}")
        unknown = set(np.unique(self.ids).tolist()) - set(self.names)
        if unknown:
            raise ValueError(f"label ids {sorted(unknown)} missing from the category table")


@dataclass(frozen=True)
class TripletRecord:
    query: int
    positive: int
    negative: int


def stability_from_labels(labels: LabelMap, static_categories=DEFAULT_STATIC) -> np.ndarray:
    """Binary map: 1 where the pixel's category is static, else 0."""
    static_categories = set(static_categories)
    known = set(labels.names.values())
    unknown = static_categories - known
    if unknown:
        raise ValueError(f"unknown static categories: {sorted(unknown)}")
    static_ids = [cid for cid, name in labels.names.items() if name in static_categories]
    return np.isin(labels.ids, static_ids).astype(np.uint8)


def mine_triplets(
    loops,
    sequence_length: int,
    negatives_per_query: int = 1,
    gap: int = 10,
    seed: int = 0,
) -> tuple[list[TripletRecord], int]:
    """One triplet per loop pair per negative.

    The query is the first id of each pair and the positive its partner.
    Negatives are drawn uniformly from frames that are not loop partners of
    the query and lie at least ``gap`` positions from both query and positive.

    Returns the triplets and the number of pairs skipped for lack of an
    eligible negative.
    """
    loops = [(int(a), int(b)) for a, b in loops]
    if not loops:
        raise ValueError("no ground-truth loops to mine from")
    if gap < 0:
        raise ValueError(f"gap must be >= 0, got {gap}")
    for a, b in loops:
        if a == b or not (0 <= a < sequence_length and 0 <= b < sequence_length):
            raise ValueError(f"invalid loop pair ({a}, {b}) for a sequence of {sequence_length}")
    partners: dict[int, set[int]] = {}
    for a, b in loops:
        partners.setdefault(a, set()).add(b)
        partners.setdefault(b, set()).add(a)
    rng = np.random.default_rng(seed)
    ids = np.arange(sequence_length)
    triplets: list[TripletRecord] = []
    skipped = 0
    if negatives_per_query <= 0:
        return triplets, skipped
    for q, p in loops:
        ok = (np.abs(ids - q) >= gap) & (np.abs(ids - p) >= gap) & (ids != q) & (ids != p)
        ok &= ~np.isin(ids, list(partners[q]))
        pool = ids[ok]
        if len(pool) == 0:
            skipped += 1
            continue
        for n in rng.choice(pool, size=negatives_per_query, replace=len(pool) < negatives_per_query):
            triplets.append(TripletRecord(q, p, int(n)))
    if skipped:
        log.warning("%d loop pairs had no eligible negative and were skipped", skipped)
    return triplets, skipped
