"""Two-view epipolar geometry on normalized image coordinates.

Points are (n, 2) float arrays in image-size-normalized coordinates
(each axis mapped to [-1, 1]). The reverse epipolar direction uses the
transpose of F, since a rank-2 matrix has no inverse.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np

from .exceptions import DegenerateConfigurationError


@dataclass
class Matches:
    """Correspondences between two views.

    ``p1[k]`` in image 1 corresponds to ``p2[k]`` in image 2. ``weights`` holds
    an optional non-negative score per match (the query-side activation);
    ``idx1``/``idx2`` index the source feature sets when known.
    """

    p1: np.ndarray
    p2: np.ndarray
    weights: np.ndarray | None = None
    idx1: np.ndarray | None = None
    idx2: np.ndarray | None = None

    def __post_init__(self):
        self.p1 = np.asarray(self.p1, dtype=np.float64).reshape(-1, 2)
        self.p2 = np.asarray(self.p2, dtype=np.float64).reshape(-1, 2)
        if self.p1.shape != self.p2.shape:
            raise ValueError(f"p1 has {len(self.p1)} points but p2 has {len(self.p2)}")
        if not (np.all(np.isfinite(self.p1)) and np.all(np.isfinite(self.p2))):
            raise ValueError("match coordinates must be finite")
        if self.weights is not None:
            self.weights = np.asarray(self.weights, dtype=np.float64).reshape(-1)
            if self.weights.shape != (len(self.p1),):
                raise ValueError(f"{self.weights.size} weights for {len(self.p1)} matches")
            if not np.all(np.isfinite(self.weights)) or np.any(self.weights < 0):
                raise ValueError("match weights must be finite and non-negative")
        for name in ("idx1", "idx2"):
            val = getattr(self, name)
            if val is not None:
                setattr(self, name, np.asarray(val, dtype=np.int64).reshape(-1))

    def __len__(self) -> int:
        return len(self.p1)

    def subset(self, mask_or_index) -> "Matches":
        sel = np.asarray(mask_or_index)
        pick = lambda a: None if a is None else a[sel]  # noqa: E731
        return Matches(self.p1[sel], self.p2[sel], pick(self.weights), pick(self.idx1), pick(self.idx2))

    def swapped(self) -> "Matches":
        return Matches(self.p2, self.p1, self.weights, self.idx2, self.idx1)

    def with_weights(self, weights) -> "Matches":
        return replace(self, weights=np.asarray(weights, dtype=np.float64))


@dataclass
class RansacResult:
    """Outcome of :func:`ransac_fundamental`.

    ``status`` is ``"ok"`` on success and ``"no_consensus"`` when no
    hypothesis collected enough inliers; ``model`` is None in that case.
    """

    model: np.ndarray | None
    inliers: np.ndarray
    iterations: int
    status: str = "ok"
    sample_failures: int = field(default=0)

    @property
    def success(self) -> bool:
        return self.status == "ok"

    @property
    def n_inliers(self) -> int:
        return int(self.inliers.sum())


def homogeneous(points) -> np.ndarray:
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 2)
    return np.hstack([pts, np.ones((len(pts), 1))])


def canonical_fundamental(F: np.ndarray) -> np.ndarray:
    """Unit Frobenius norm with the largest-magnitude entry positive."""
    F = np.asarray(F, dtype=np.float64)
    norm = np.linalg.norm(F)
    if norm == 0:
        raise ValueError("zero matrix has no canonical scale")
    F = F / norm
    if F.flat[np.argmax(np.abs(F))] < 0:
        F = -F
    return F


def hartley_normalize(points) -> tuple[np.ndarray, np.ndarray]:
    """Similarity moving the centroid to the origin with mean radius sqrt(2).

    Returns the transformed (n, 2) points and the 3x3 transform T such that
    ``T @ [x, y, 1]`` gives the homogeneous transformed point.
    """
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 2)
    if len(pts) < 2:
        raise ValueError("need at least 2 points to normalize")
    centroid = pts.mean(axis=0)
    radius = np.linalg.norm(pts - centroid, axis=1).mean()
    if radius == 0:
        raise DegenerateConfigurationError("all points are identical")
    s = math.sqrt(2.0) / radius
    T = np.array([[s, 0.0, -s * centroid[0]], [0.0, s, -s * centroid[1]], [0.0, 0.0, 1.0]])
    return (pts - centroid) * s, T


# relative size of the 8th singular value below which the design matrix
# is treated as rank-deficient
_RANK_TOL = 1e-10


def _fit_fundamental(p1: np.ndarray, p2: np.ndarray) -> np.ndarray:
    n1, T1 = hartley_normalize(p1)
    n2, T2 = hartley_normalize(p2)
    x1, y1 = n1[:, 0], n1[:, 1]
    x2, y2 = n2[:, 0], n2[:, 1]
    A = np.column_stack([x2 * x1, x2 * y1, x2, y2 * x1, y2 * y1, y2, x1, y1, np.ones(len(x1))])
    _, s, vt = np.linalg.svd(A, full_matrices=True)
    if len(s) < 8 or s[7] <= _RANK_TOL * s[0]:
        raise DegenerateConfigurationError("design matrix is rank-deficient")
    Fn = vt[-1].reshape(3, 3)
    u, d, vt2 = np.linalg.svd(Fn)
    d[2] = 0.0
    Fn = u @ np.diag(d) @ vt2
    return canonical_fundamental(T2.T @ Fn @ T1)


def eight_point(matches: Matches) -> np.ndarray:
    """Normalized least-squares fundamental matrix, rank 2, unit norm.

    The returned F maps image-1 points to image-2 epipolar lines:
    ``p2^T F p1 = 0``.
    """
    if len(matches) < 8:
        raise ValueError(f"eight_point needs at least 8 matches, got {len(matches)}")
    return _fit_fundamental(matches.p1, matches.p2)


def epipolar_distances(F: np.ndarray, ua, ub) -> np.ndarray:
    """Vectorised :func:`epipolar_distance` over rows of ``ua`` and ``ub``."""
    lines = homogeneous(ua) @ np.asarray(F, dtype=np.float64).T
    denom = np.hypot(lines[:, 0], lines[:, 1])
    if np.any(denom == 0):
        bad = int(np.flatnonzero(denom == 0)[0])
        raise ValueError(f"point {bad} maps to the line at infinity; distance undefined")
    return np.abs(np.einsum("ij,ij->i", lines, homogeneous(ub))) / denom


def epipolar_distance(F: np.ndarray, u_a, u_b) -> float:
    """Distance from ``u_b`` to the epipolar line ``F @ u_a``."""
    return float(epipolar_distances(F, [u_a], [u_b])[0])


def symmetric_distances(F: np.ndarray, matches: Matches) -> np.ndarray:
    """Per-match mean of forward and reverse epipolar distances."""
    F = np.asarray(F, dtype=np.float64)
    fwd = epipolar_distances(F, matches.p1, matches.p2)
    rev = epipolar_distances(F.T, matches.p2, matches.p1)
    return 0.5 * (fwd + rev)


def reprojection_error(F: np.ndarray, matches: Matches) -> float:
    """Mean symmetric epipolar distance over all matches."""
    if len(matches) == 0:
        raise ValueError("reprojection_error needs at least one match")
    return float(symmetric_distances(F, matches).mean())


def sparse_distance(matches: Matches, F: np.ndarray) -> float:
    """Weight-normalised mean of per-match symmetric epipolar distances."""
    if len(matches) == 0:
        raise ValueError("sparse_distance needs at least one match")
    if matches.weights is None:
        raise ValueError("sparse_distance needs weighted matches")
    total = matches.weights.sum()
    if total <= 0:
        raise ValueError("sparse_distance: all match weights are zero")
    return float(matches.weights @ symmetric_distances(F, matches) / total)


def _adaptive_iterations(inlier_ratio: float, confidence: float, sample_size: int = 8) -> float:
    good = inlier_ratio**sample_size
    if good >= 1.0:
        return 1.0
    if good <= 0.0:
        return math.inf
    return math.ceil(math.log(1.0 - confidence) / math.log(1.0 - good))


def ransac_fundamental(
    matches: Matches,
    threshold: float = 1e-3,
    max_iters: int = 1000,
    seed: int = 0,
    weighted: bool = False,
    confidence: float = 0.999,
    min_inliers: int = 8,
) -> RansacResult:
    """Robust fundamental matrix by 8-point RANSAC.

    Samples of 8 matches are drawn uniformly, or proportionally to the match
    weights when ``weighted`` is set; matches whose symmetric distance falls
    below ``threshold`` count as inliers. Rank-deficient samples are skipped
    but still use up an iteration. The best hypothesis is refit on its inliers.
    """
    n = len(matches)
    if n < 8:
        raise ValueError(f"RANSAC needs at least 8 matches, got {n}")
    if not threshold > 0:
        raise ValueError(f"threshold must be positive, got {threshold}")
    if min_inliers < 8:
        raise ValueError("min_inliers must be at least 8")
    rng = np.random.default_rng(seed)
    probs = None
    if weighted:
        if matches.weights is None:
            raise ValueError("weighted RANSAC needs match weights")
        # fall back to uniform when too few matches carry weight
        if np.count_nonzero(matches.weights) >= 8:
            probs = matches.weights / matches.weights.sum()

    best_F = None
    best_mask = np.zeros(n, dtype=bool)
    best_count = 0
    best_err = math.inf
    needed = math.inf
    iters = failures = 0
    while iters < max_iters and iters < needed:
        iters += 1
        sample = rng.choice(n, size=8, replace=False, p=probs)
        try:
            F = _fit_fundamental(matches.p1[sample], matches.p2[sample])
        except DegenerateConfigurationError:
            failures += 1
            continue
        dist = _safe_symmetric(F, matches)
        mask = dist < threshold
        count = int(mask.sum())
        err = float(dist[mask].mean()) if count else math.inf
        if count > best_count or (count == best_count and err < best_err):
            best_F, best_mask, best_count, best_err = F, mask, count, err
            needed = _adaptive_iterations(count / n, confidence)

    if best_count < min_inliers:
        return RansacResult(None, np.zeros(n, dtype=bool), iters, "no_consensus", failures)
    model, mask = best_F, best_mask
    try:
        refit = _fit_fundamental(matches.p1[best_mask], matches.p2[best_mask])
        refit_mask = _safe_symmetric(refit, matches) < threshold
        if refit_mask.sum() >= best_count:
            model, mask = refit, refit_mask
    except DegenerateConfigurationError:
        pass
    return RansacResult(model, mask, iters, "ok", failures)


def _safe_symmetric(F: np.ndarray, matches: Matches) -> np.ndarray:
    # lines at infinity get an infinite distance instead of raising
    fwd_l = homogeneous(matches.p1) @ F.T
    rev_l = homogeneous(matches.p2) @ F
    with np.errstate(divide="ignore", invalid="ignore"):
        fwd = np.abs(np.einsum("ij,ij->i", fwd_l, homogeneous(matches.p2))) / np.hypot(fwd_l[:, 0], fwd_l[:, 1])
        rev = np.abs(np.einsum("ij,ij->i", rev_l, homogeneous(matches.p1))) / np.hypot(rev_l[:, 0], rev_l[:, 1])
    out = 0.5 * (fwd + rev)
    return np.where(np.isfinite(out), out, np.inf)


def fundamental_from_poses(R: np.ndarray, t: np.ndarray, K1: np.ndarray, K2: np.ndarray | None = None) -> np.ndarray:
    """Analytic F for ``X2 = R X1 + t`` and intrinsics ``p ~ K X``."""
    K2 = K1 if K2 is None else K2
    t = np.asarray(t, dtype=np.float64).reshape(3)
    tx = np.array([[0, -t[2], t[1]], [t[2], 0, -t[0]], [-t[1], t[0], 0]])
    E = tx @ R
    return canonical_fundamental(np.linalg.inv(K2).T @ E @ np.linalg.inv(K1))
