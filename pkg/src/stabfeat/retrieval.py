"""Bag-of-words place recognition with epipolar verification.

A flat k-means vocabulary quantizes descriptors into words; images become
L1-normalized tf-idf vectors compared with the L1 score
``1 - 0.5 * sum|a_w - b_w|``. Retrieved candidates are verified by
descriptor matching and fundamental-matrix RANSAC, and scored by the mean
symmetric epipolar distance of the inliers (lower is better).
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.spatial.distance import cdist
from sklearn.cluster import KMeans

from .exceptions import FormatError
from .features import FeatureSet
from .geometry import Matches, ransac_fundamental, reprojection_error
from .selection import attach_weights

VOCAB_MAGIC = b"DSFV"
VOCAB_VERSION = 1


def unpack_bits(packed: np.ndarray, dim: int) -> np.ndarray:
    return np.unpackbits(np.asarray(packed, dtype=np.uint8), axis=1, count=dim).astype(np.float64)


def hamming(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Pairwise Hamming distances between packed bit rows."""
    a = np.asarray(a, dtype=np.uint8)
    b = np.asarray(b, dtype=np.uint8)
    x = np.bitwise_xor(a[:, None, :], b[None, :, :])
    return np.unpackbits(x, axis=2).sum(axis=2)


@dataclass
class Vocabulary:
    """k visual words with per-word inverse document frequencies.

    For binary descriptors the centroids are bit vectors stored as 0/1
    floats and assignment uses Hamming distance.
    """

    centroids: np.ndarray
    idf: np.ndarray
    kind: str = "float"
    seed: int = 0

    def __post_init__(self):
        self.centroids = np.asarray(self.centroids, dtype=np.float64)
        self.idf = np.asarray(self.idf, dtype=np.float64).reshape(-1)
        if self.centroids.ndim != 2 or len(self.idf) != len(self.centroids):
            raise ValueError("centroids must be (k, dim) with one idf per word")
        if not np.all(np.isfinite(self.centroids)) or np.any(self.idf < 0):
            raise ValueError("centroids must be finite and idf non-negative")

    @property
    def k(self) -> int:
        return len(self.centroids)

    @property
    def dim(self) -> int:
        return self.centroids.shape[1]

    def assign(self, descriptors: np.ndarray) -> np.ndarray:
        """Nearest word per descriptor row; ties go to the lower word id."""
        if len(descriptors) == 0:
            return np.zeros(0, dtype=np.int64)
        if self.kind == "binary":
            bits = unpack_bits(descriptors, self.dim)
            # L1 distance between 0/1 vectors is the Hamming distance
            d = cdist(bits, self.centroids, "cityblock")
        else:
            d = cdist(np.asarray(descriptors, dtype=np.float64), self.centroids, "sqeuclidean")
        return np.argmin(d, axis=1)


def _as_groups(descriptors) -> list[np.ndarray]:
    if isinstance(descriptors, np.ndarray) and descriptors.ndim == 2:
        return [descriptors]
    return [fs.descriptors if isinstance(fs, FeatureSet) else np.asarray(fs) for fs in descriptors]


def build_vocabulary(descriptors, k: int = 256, seed: int = 0, kind: str = "float", dim: int | None = None) -> Vocabulary:
    """Seeded k-means vocabulary.

    ``descriptors`` is either one (n, dim) matrix or a sequence of per-image
    matrices or feature sets; the per-image grouping defines document
    frequencies, ``idf_w = max(0, ln(N / (1 + n_w)))``.
    """
    if k <= 0:
        raise ValueError(f"k must be positive, got {k}")
    groups = [g for g in _as_groups(descriptors)]
    if kind == "binary":
        width = groups[0].shape[1] if groups else 0
        dim = width * 8 if dim is None else dim
        groups_f = [unpack_bits(g, dim) if len(g) else np.zeros((0, dim)) for g in groups]
    elif kind == "float":
        groups_f = [np.asarray(g, dtype=np.float64) for g in groups]
    else:
        raise ValueError(f"unknown descriptor kind {kind!r}")
    data = np.vstack(groups_f) if groups_f else np.zeros((0, 0))
    if len(data) < k:
        raise ValueError(f"need at least k={k} descriptors, got {len(data)}")
    km = KMeans(n_clusters=k, init="k-means++", n_init=1, max_iter=100, tol=1e-6, random_state=seed)
    km.fit(data)
    centroids = km.cluster_centers_
    if kind == "binary":
        centroids = (centroids >= 0.5).astype(np.float64)
    vocab = Vocabulary(centroids, np.zeros(k), kind, seed)
    doc_freq = np.zeros(k)
    for g in groups:
        doc_freq[np.unique(vocab.assign(g))] += 1
    vocab.idf = np.maximum(0.0, np.log(len(groups) / (1.0 + doc_freq)))
    return vocab


@dataclass
class BowVector:
    """Sparse L1-normalized word weights."""

    weights: dict[int, float] = field(default_factory=dict)

    def __len__(self) -> int:
        return len(self.weights)

    def total(self) -> float:
        return float(sum(self.weights.values()))


def quantize(features, vocab: Vocabulary) -> BowVector:
    desc = features.descriptors if isinstance(features, FeatureSet) else np.asarray(features)
    if len(desc) == 0:
        return BowVector()
    expected = vocab.dim if vocab.kind == "float" else math.ceil(vocab.dim / 8)
    if desc.shape[1] != expected:
        raise ValueError(f"descriptor width {desc.shape[1]} does not match the vocabulary ({expected})")
    words = vocab.assign(desc)
    counts = np.bincount(words, minlength=vocab.k).astype(np.float64)
    tf = counts / counts.sum()
    w = tf * vocab.idf
    if w.sum() <= 0:
        # every observed word occurs in all training images
        w = tf
    w = w / w.sum()
    return BowVector({int(i): float(w[i]) for i in np.flatnonzero(w)})


def bow_similarity(a: BowVector, b: BowVector) -> float:
    if not a.weights and not b.weights:
        return 0.0
    keys = set(a.weights) | set(b.weights)
    l1 = sum(abs(a.weights.get(k, 0.0) - b.weights.get(k, 0.0)) for k in sorted(keys))
    return float(min(1.0, max(0.0, 1.0 - 0.5 * l1)))


class BowIndex:
    """Image database keyed by sequence position."""

    def __init__(self):
        self.ids: list[int] = []
        self.vectors: list[BowVector] = []

    def add(self, image_id: int, vector: BowVector) -> None:
        self.ids.append(int(image_id))
        self.vectors.append(vector)

    def __len__(self) -> int:
        return len(self.ids)


def query(
    index: BowIndex,
    qv: BowVector,
    top_n: int = 5,
    exclusion_gap: int = 0,
    position: int | None = None,
    past_only: bool = False,
) -> list[tuple[int, float]]:
    """Top ``top_n`` (id, similarity) pairs, best first, ties by lower id.

    Ids within ``exclusion_gap`` of ``position`` are skipped, and with
    ``past_only`` so is anything after it.
    """
    if exclusion_gap < 0:
        raise ValueError(f"exclusion_gap must be >= 0, got {exclusion_gap}")
    scored = []
    for image_id, vec in zip(index.ids, index.vectors):
        if position is not None:
            if abs(image_id - position) <= exclusion_gap:
                continue
            if past_only and image_id > position:
                continue
        scored.append((-bow_similarity(qv, vec), image_id))
    scored.sort()
    return [(i, -s) for s, i in scored[:top_n]]


def match_descriptors(a: FeatureSet, b: FeatureSet, ratio: float = 0.8, hamming_margin: int = 16) -> Matches:
    """Mutual nearest neighbours passing a ratio (float) or margin (binary) test."""
    if a.kind != b.kind:
        raise ValueError(f"cannot match {a.kind} descriptors against {b.kind} descriptors")
    empty = Matches(np.zeros((0, 2)), np.zeros((0, 2)), idx1=np.zeros(0, int), idx2=np.zeros(0, int))
    if len(a) == 0 or len(b) == 0:
        return empty
    if a.kind == "binary":
        d = hamming(a.descriptors, b.descriptors).astype(np.float64)
    else:
        d = cdist(a.descriptors.astype(np.float64), b.descriptors.astype(np.float64))
    rows = np.arange(len(a))
    nn_ab = np.argmin(d, axis=1)
    nn_ba = np.argmin(d, axis=0)
    best = d[rows, nn_ab]
    if len(b) > 1:
        second = np.partition(d, 1, axis=1)[:, 1]
    else:
        second = np.full(len(a), np.inf)
    if a.kind == "binary":
        distinct = second - best >= hamming_margin
    else:
        distinct = best < ratio * second
    keep = rows[(nn_ba[nn_ab] == rows) & distinct]
    if len(keep) == 0:
        return empty
    j = nn_ab[keep]
    return Matches(a.normalized()[keep], b.normalized()[j], idx1=keep, idx2=j)


@dataclass
class VerifyConfig:
    threshold: float = 1e-3
    max_iters: int = 1000
    seed: int = 0
    min_inliers: int = 8
    ratio: float = 0.8
    hamming_margin: int = 16
    confidence: float = 0.999


@dataclass
class LoopScore:
    """Verification outcome for one (query, candidate) pair.

    ``score`` is the mean inlier epipolar distance, infinite when the pair
    could not be verified.
    """

    candidate: int
    similarity: float
    score: float
    inliers: int
    matches: int = 0
    query: int = -1

    @property
    def verified(self) -> bool:
        return math.isfinite(self.score)


def verify_loop(
    qfs: FeatureSet,
    cfs: FeatureSet,
    A_query: np.ndarray | None = None,
    cfg: VerifyConfig | None = None,
    candidate: int = -1,
    similarity: float = float("nan"),
    query_id: int = -1,
) -> LoopScore:
    cfg = cfg or VerifyConfig()
    matches = match_descriptors(qfs, cfs, cfg.ratio, cfg.hamming_margin)
    n = len(matches)
    unverified = LoopScore(candidate, similarity, math.inf, 0, n, query_id)
    if n < max(8, cfg.min_inliers):
        return unverified
    weighted = A_query is not None
    if weighted:
        matches = attach_weights(matches, A_query, qfs.image_size)
    result = ransac_fundamental(
        matches,
        threshold=cfg.threshold,
        max_iters=cfg.max_iters,
        seed=cfg.seed,
        weighted=weighted,
        confidence=cfg.confidence,
        min_inliers=cfg.min_inliers,
    )
    if not result.success:
        return unverified
    score = reprojection_error(result.model, matches.subset(result.inliers))
    return LoopScore(candidate, similarity, score, result.n_inliers, n, query_id)


LOOP_HEADER = ["query_id", "candidate_id", "similarity", "verif_score", "inliers"]


def loop_rows(scores: list[LoopScore]) -> list[list[str]]:
    return [
        [str(s.query), str(s.candidate), f"{s.similarity:.9g}", f"{s.score:.9g}", str(s.inliers)]
        for s in scores
    ]


# ---------------------------------------------------------------------------
# vocabulary files: "DSFV", u16 version, u32 k, u32 dim, u8 kind, u32 seed,
# k*dim float64 centroids, k float64 idf


def save_vocabulary(vocab: Vocabulary, path) -> None:
    kind = 0 if vocab.kind == "float" else 1
    header = VOCAB_MAGIC + struct.pack("<HIIBI", VOCAB_VERSION, vocab.k, vocab.dim, kind, vocab.seed)
    body = vocab.centroids.astype("<f8").tobytes() + vocab.idf.astype("<f8").tobytes()
    Path(path).write_bytes(header + body)


def load_vocabulary(path) -> Vocabulary:
    raw = Path(path).read_bytes()
    head = struct.calcsize("<HIIBI")
    if len(raw) < 4 + head:
        raise FormatError("truncated vocabulary header", path, len(raw))
    if raw[:4] != VOCAB_MAGIC:
        raise FormatError(f"bad magic {raw[:4]!r}, expected {VOCAB_MAGIC!r}", path, 0)
    version, k, dim, kind, seed = struct.unpack_from("<HIIBI", raw, 4)
    if version != VOCAB_VERSION:
        raise FormatError(f"unsupported vocabulary version {version}", path, 4)
    if kind not in (0, 1):
        raise FormatError(f"unknown descriptor kind code {kind}", path, 14)
    if k == 0 or dim == 0:
        raise FormatError("empty vocabulary", path, 6)
    expected = 4 + head + 8 * (k * dim + k)
    if len(raw) != expected:
        raise FormatError(f"vocabulary body is {len(raw)} bytes, expected {expected}", path, 4 + head)
    body = np.frombuffer(raw, dtype="<f8", offset=4 + head).astype(np.float64)
    try:
        return Vocabulary(body[: k * dim].reshape(k, dim), body[k * dim :], "float" if kind == 0 else "binary", seed)
    except ValueError as exc:
        raise FormatError(str(exc), path, 4 + head) from exc
