"""Place-recognition and trajectory metrics."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.spatial.transform import Rotation
from sklearn.metrics import roc_auc_score


@dataclass(frozen=True)
class PrPoint:
    threshold: float
    precision: float
    recall: float


def pr_curve(scores, labels, n_positive: int | None = None) -> list[PrPoint]:
    """Precision and recall at every distinct finite score, ascending.

    Lower scores are more confident; a candidate is detected at threshold
    ``t`` when its score is ``<= t``. Non-finite scores (unverified pairs)
    are never detected. Recall divides by ``n_positive`` when given, else by
    the number of true labels. Precision is 1 when nothing is detected.
    """
    scores = np.asarray(scores, dtype=np.float64).reshape(-1)
    labels = np.asarray(labels, dtype=bool).reshape(-1)
    if scores.shape != labels.shape:
        raise ValueError(f"{scores.size} scores but {labels.size} labels")
    if scores.size == 0:
        raise ValueError("pr_curve needs at least one labelled score")
    total = int(labels.sum()) if n_positive is None else int(n_positive)
    if total <= 0:
        raise ValueError("ground truth has no positives; recall is undefined")
    finite = np.isfinite(scores)
    order = np.argsort(scores[finite], kind="stable")
    s = scores[finite][order]
    y = labels[finite][order]
    tp = np.cumsum(y)
    fp = np.cumsum(~y)
    points = []
    for t in np.unique(s):
        last = np.searchsorted(s, t, side="right") - 1
        det = tp[last] + fp[last]
        precision = tp[last] / det if det else 1.0
        points.append(PrPoint(float(t), float(precision), float(min(tp[last] / total, 1.0))))
    return points


def auc(points) -> float:
    """Trapezoidal area under precision over recall.

    ``points`` holds :class:`PrPoint` values or ``(recall, precision)``
    pairs. They are sorted by recall (higher precision first on ties) and
    the curve is extended to recall 0 at the first point's precision.
    """
    pts = [(p.recall, p.precision) if isinstance(p, PrPoint) else (float(p[0]), float(p[1])) for p in points]
    if len(pts) < 2:
        raise ValueError(f"auc needs at least 2 points, got {len(pts)}")
    pts.sort(key=lambda rp: (rp[0], -rp[1]))
    r = np.array([0.0] + [rp[0] for rp in pts])
    p = np.array([pts[0][1]] + [rp[1] for rp in pts])
    return float(np.sum(np.diff(r) * (p[1:] + p[:-1]) / 2.0))


def curve_auc(points) -> float:
    """:func:`auc` extended to short curves: 0 for none, a rectangle for one."""
    if len(points) == 0:
        return 0.0
    if len(points) == 1:
        return float(points[0].precision * points[0].recall)
    return auc(points)


def pr_csv(points, area: float) -> str:
    lines = ["threshold,precision,recall"]
    lines += [f"{p.threshold:.9g},{p.precision:.9g},{p.recall:.9g}" for p in points]
    lines.append(f"auc={area:.6f}")
    return "\n".join(lines) + "\n"


# ---------------------------------------------------------------------------
# trajectories


def _poses(traj) -> np.ndarray:
    T = np.asarray(traj, dtype=np.float64)
    if T.ndim == 2 and T.shape[1] == 12:
        T = T.reshape(-1, 3, 4)
    if T.ndim != 3 or T.shape[1:] != (3, 4):
        raise ValueError(f"trajectory must be (n, 3, 4) or (n, 12), got {T.shape}")
    R = T[:, :, :3]
    err = np.abs(np.einsum("nij,nkj->nik", R, R) - np.eye(3)).max() if len(T) else 0.0
    if err > 1e-6:
        raise ValueError(f"rotation blocks are not orthonormal (max deviation {err:.2e})")
    return T


def _pair(est, gt) -> tuple[np.ndarray, np.ndarray]:
    est, gt = _poses(est), _poses(gt)
    if len(est) != len(gt):
        raise ValueError(f"trajectories differ in length: {len(est)} vs {len(gt)}")
    if len(gt) < 2:
        raise ValueError("trajectories need at least 2 poses")
    return est, gt


def path_distances(gt) -> np.ndarray:
    """Cumulative path length at every pose."""
    pos = _poses(gt)[:, :, 3]
    return np.concatenate([[0.0], np.cumsum(np.linalg.norm(np.diff(pos, axis=0), axis=1))])


def rotation_error(est, gt, step_m: float = 100.0) -> float:
    """Mean relative-rotation error per metre, in degrees per metre.

    For each frame ``i`` the partner ``j`` is the first later frame whose
    ground-truth path length from ``i`` reaches ``step_m``.
    """
    if not step_m > 0:
        raise ValueError(f"step_m must be positive, got {step_m}")
    est, gt = _pair(est, gt)
    dist = path_distances(gt)
    errors = []
    for i in range(len(gt)):
        j = int(np.searchsorted(dist, dist[i] + step_m, side="left"))
        if j >= len(gt):
            break
        length = dist[j] - dist[i]
        rel_gt = gt[i, :, :3].T @ gt[j, :, :3]
        rel_est = est[i, :, :3].T @ est[j, :, :3]
        angle = Rotation.from_matrix(rel_gt.T @ rel_est).magnitude()
        errors.append(np.degrees(angle) / length)
    if not errors:
        raise ValueError(f"trajectory of length {dist[-1]:.3f} m is shorter than step_m={step_m}")
    return float(np.mean(errors))


def align_rigid(src: np.ndarray, dst: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Rotation R and translation t minimising ``sum ||R src_k + t - dst_k||^2``."""
    src = np.asarray(src, dtype=np.float64)
    dst = np.asarray(dst, dtype=np.float64)
    mu_s, mu_d = src.mean(axis=0), dst.mean(axis=0)
    H = (src - mu_s).T @ (dst - mu_d)
    U, _, Vt = np.linalg.svd(H)
    D = np.diag([1.0, 1.0, np.sign(np.linalg.det(Vt.T @ U.T)) or 1.0])
    R = Vt.T @ D @ U.T
    return R, mu_d - R @ mu_s


def offset_deviation(est, gt) -> float:
    """Spread of position offsets after rigid alignment, as % of path length.

    The spread is the standard deviation of the per-frame offset vectors,
    ``sqrt(mean ||o_k - mean(o)||^2)``.
    """
    est, gt = _pair(est, gt)
    p_est, p_gt = est[:, :, 3], gt[:, :, 3]
    if np.ptp(p_gt, axis=0).max() == 0:
        raise ValueError("ground-truth positions are all identical")
    length = path_distances(gt)[-1]
    R, t = align_rigid(p_est, p_gt)
    offsets = p_est @ R.T + t - p_gt
    spread = np.sqrt(np.mean(np.sum((offsets - offsets.mean(axis=0)) ** 2, axis=1)))
    return float(spread / length * 100.0)


def trajectory_report(est, gt, step_m: float = 100.0) -> str:
    return f"rotation_error={rotation_error(est, gt, step_m):.9g}\noffset_deviation={offset_deviation(est, gt):.9g}\n"


# ---------------------------------------------------------------------------
# activation maps


def activation_quality(amap, truth) -> float:
    """ROC-AUC of the activation as a score for truly stable pixels."""
    amap = np.asarray(amap, dtype=np.float64)
    truth = np.asarray(truth)
    if amap.shape != truth.shape:
        raise ValueError(f"activation map {amap.shape} and truth {truth.shape} differ in shape")
    labels = truth.ravel() != 0
    if labels.all() or not labels.any():
        raise ValueError("truth map has a single class; ROC-AUC is undefined")
    return float(roc_auc_score(labels, amap.ravel()))
