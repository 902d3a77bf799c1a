"""Training loop: per-triplet SGD under the hybrid loss schedule.

Each epoch draws a fresh triplet order from ``(seed, epoch)``, so a run
resumed from a checkpoint replays exactly what an uninterrupted run does.
Plain SGD carries no optimizer state, which makes checkpoints just weights
plus the loss log.
"""

from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .exceptions import DegenerateConfigurationError, FormatError
from .features import FeatureSet
from .geometry import eight_point, ransac_fundamental
from .losses import (
    DEFAULT_MARGIN,
    SparsePair,
    Triplet,
    alpha_schedule,
    hybrid_loss,
    matching_loss_for_triplet,
    semantic_loss,
)
from .network import StabilityNet, build_model, load_weights, read_weight_file, save_weights
from .retrieval import match_descriptors
from .selection import attach_weights, select_topk_activation

log = logging.getLogger(__name__)

LOG_HEADER = ["epoch", "lr", "w_sem", "w_mat", "mean_sem", "mean_mat", "mean_hybrid"]


@dataclass
class TrainConfig:
    max_epochs: int = 50
    lr: float = 1e-3
    lr_decay_epochs: tuple[int, ...] = (20, 30, 40)
    lr_decay: float = 0.1
    margin: float = DEFAULT_MARGIN
    mode: str = "dense"
    seed: int = 0
    checkpoint_every: int = 0
    literal_schedule: bool = False
    # sparse mode
    top_k: int = 500
    ransac_threshold: float = 1e-2
    ransac_iters: int = 200

    def __post_init__(self):
        self.lr_decay_epochs = tuple(int(e) for e in self.lr_decay_epochs)
        if self.max_epochs < 1:
            raise ValueError(f"max_epochs must be >= 1, got {self.max_epochs}")
        if not self.lr > 0:
            raise ValueError(f"lr must be positive, got {self.lr}")
        if any(b <= a for a, b in zip(self.lr_decay_epochs, self.lr_decay_epochs[1:])):
            raise ValueError(f"lr_decay_epochs must be strictly increasing, got {self.lr_decay_epochs}")
        if self.mode not in ("dense", "sparse"):
            raise ValueError(f"unknown distance mode {self.mode!r}")
        if self.margin < 0:
            raise ValueError("margin must be >= 0")

    def lr_at(self, epoch: int) -> float:
        lr = self.lr
        for e in self.lr_decay_epochs:
            if epoch >= e:
                lr *= self.lr_decay
        return lr

    def to_dict(self) -> dict:
        d = asdict(self)
        d["lr_decay_epochs"] = ",".join(str(e) for e in self.lr_decay_epochs)
        return d

    @classmethod
    def from_dict(cls, values: dict) -> "TrainConfig":
        out = {}
        for f in fields(cls):
            if f.name not in values:
                continue
            v = values[f.name]
            default = f.default
            if f.name == "lr_decay_epochs":
                parts = [p for p in v.split(",") if p.strip()] if isinstance(v, str) else list(v)
                out[f.name] = tuple(int(p) for p in parts)
            elif isinstance(default, bool):
                out[f.name] = v if isinstance(v, bool) else str(v).lower() in ("1", "true", "yes")
            else:
                out[f.name] = type(default)(v)
        return cls(**out)


@dataclass
class EpochLog:
    epoch: int
    lr: float
    w_sem: float
    w_mat: float
    mean_sem: float
    mean_mat: float
    mean_hybrid: float

    def row(self) -> list[str]:
        return [str(self.epoch)] + [repr(float(getattr(self, k))) for k in LOG_HEADER[1:]]


@dataclass
class TrainingData:
    """Per-image payloads keyed by image id.

    ``images`` are (C, H, W) arrays in [0, 1]. ``dense`` grids are needed in
    dense mode and ``features`` in sparse mode.
    """

    images: dict[int, np.ndarray]
    stability: dict[int, np.ndarray]
    dense: dict[int, np.ndarray] = field(default_factory=dict)
    features: dict[int, FeatureSet] = field(default_factory=dict)


@dataclass
class TrainResult:
    model: StabilityNet
    log: list[EpochLog]
    epoch: int


def _check_inputs(triplets, data: TrainingData, mode: str) -> None:
    if not triplets:
        raise ValueError("no training triplets")
    for t in triplets:
        if t.query not in data.stability:
            raise ValueError(f"no stability map for image {t.query}")
        for i in (t.query, t.positive, t.negative):
            if i not in data.images:
                raise ValueError(f"no image for id {i}")
            if mode == "dense" and i not in data.dense:
                raise ValueError(f"dense mode: no descriptor grid for image {i}")
            if mode == "sparse" and i not in data.features:
                raise ValueError(f"sparse mode: no feature set for image {i}")


def sparse_pair(
    fs_q: FeatureSet,
    fs_x: FeatureSet,
    A_q: np.ndarray,
    A_x: np.ndarray,
    k: int,
    threshold: float,
    iters: int,
    seed: int,
) -> SparsePair:
    """Fix F for one pair from the current activation-selected features.

    Falls back to a least-squares F over all matches when RANSAC finds no
    consensus, and to no F at all when fewer than 8 matches exist.
    """
    sel_q = select_topk_activation(fs_q, A_q, k)
    sel_x = select_topk_activation(fs_x, A_x, k)
    matches = match_descriptors(sel_q, sel_x)
    if len(matches) < 8:
        return SparsePair(matches, None, fs_q.image_size)
    matches = attach_weights(matches, A_q, fs_q.image_size)
    result = ransac_fundamental(matches, threshold=threshold, max_iters=iters, seed=seed, weighted=True)
    F = result.model
    if F is None:
        try:
            F = eight_point(matches)
        except DegenerateConfigurationError:
            F = None
    return SparsePair(matches, F, fs_q.image_size)


def _image_batch(data: TrainingData, ids) -> Tensor:
    return Tensor(np.stack([np.asarray(data.images[i], dtype=np.float32) for i in ids]))


def triplet_losses(model: StabilityNet, triplet: Triplet, data: TrainingData, mode: str, margin: float, weights):
    """(hybrid, semantic, matching) for one triplet as autodiff values."""
    out = model.forward_tensor(_image_batch(data, (triplet.query, triplet.positive, triplet.negative)))
    maps = tuple(ad.take(out, i) for i in range(3))
    sem = semantic_loss(maps[0], data.stability[triplet.query])
    mat = matching_loss_for_triplet(triplet, maps, mode, margin)
    return hybrid_loss(sem, mat, weights), sem, mat


def _value(x) -> float:
    return float(x.data) if isinstance(x, Tensor) else float(x)


def build_triplets(records, data: TrainingData, mode: str) -> list[Triplet]:
    out = []
    for r in records:
        dense = None
        if mode == "dense":
            dense = (data.dense[r.query], data.dense[r.positive], data.dense[r.negative])
        out.append(Triplet(r.query, r.positive, r.negative, dense=dense))
    return out


def _attach_sparse_pairs(model, triplets: list[Triplet], data: TrainingData, cfg: TrainConfig, epoch: int) -> None:
    needed = sorted({i for t in triplets for i in (t.query, t.positive, t.negative)})
    maps = {i: model.predict(data.images[i]) for i in needed}
    for n, t in enumerate(triplets):
        seed = cfg.seed * 1_000_003 + epoch * 10_007 + n
        pos = sparse_pair(data.features[t.query], data.features[t.positive], maps[t.query], maps[t.positive],
                          cfg.top_k, cfg.ransac_threshold, cfg.ransac_iters, seed)
        neg = sparse_pair(data.features[t.query], data.features[t.negative], maps[t.query], maps[t.negative],
                          cfg.top_k, cfg.ransac_threshold, cfg.ransac_iters, seed)
        t.pairs = (pos, neg)


def train(
    model: StabilityNet,
    triplets,
    data: TrainingData,
    cfg: TrainConfig,
    start_epoch: int = 0,
    history: list[EpochLog] | None = None,
    checkpoint_path=None,
    stop_epoch: int | None = None,
) -> TrainResult:
    """Run epochs ``start_epoch .. stop_epoch-1`` (default: to ``max_epochs``).

    ``triplets`` are :class:`~stabfeat.data.prep.TripletRecord` values or
    prepared :class:`~stabfeat.losses.Triplet` payloads.
    """
    _check_inputs(triplets, data, cfg.mode)
    stop = cfg.max_epochs if stop_epoch is None else min(stop_epoch, cfg.max_epochs)
    if not 0 <= start_epoch <= cfg.max_epochs:
        raise ValueError(f"start epoch {start_epoch} outside [0, {cfg.max_epochs}]")
    prepared = [t if isinstance(t, Triplet) else None for t in triplets]
    if any(p is None for p in prepared):
        prepared = build_triplets(triplets, data, cfg.mode)
    history = list(history or [])
    params = model.parameters()
    for epoch in range(start_epoch, stop):
        weights = alpha_schedule(epoch, cfg.literal_schedule)
        lr = cfg.lr_at(epoch)
        if cfg.mode == "sparse":
            _attach_sparse_pairs(model, prepared, data, cfg, epoch)
        order = np.random.default_rng([cfg.seed, epoch]).permutation(len(prepared))
        sums = np.zeros(3)
        for idx in order:
            loss, sem, mat = triplet_losses(model, prepared[idx], data, cfg.mode, cfg.margin, weights)
            sums += (_value(loss), _value(sem), _value(mat))
            ad.backward(loss, params)
            ad.sgd_step(params, lr)
            model.zero_grad()
        mean_hyb, mean_sem, mean_mat = sums / len(prepared)
        entry = EpochLog(epoch, lr, weights.w_sem, weights.w_mat, mean_sem, mean_mat, mean_hyb)
        history.append(entry)
        log.info("epoch %d lr=%g sem=%.5f mat=%.5f hybrid=%.5f", epoch, lr, mean_sem, mean_mat, mean_hyb)
        if checkpoint_path is not None and cfg.checkpoint_every and (epoch + 1) % cfg.checkpoint_every == 0:
            checkpoint(model, epoch + 1, checkpoint_path, cfg, history)
    return TrainResult(model, history, stop)


# ---------------------------------------------------------------------------
# checkpoints: a weight file whose metadata also holds the epoch, the
# training config and the loss log (floats in hex for exact round trips)

_COMPARED = ("lr", "lr_decay", "lr_decay_epochs", "margin", "mode", "seed", "literal_schedule", "top_k")


def _encode_log(history: list[EpochLog]) -> str:
    return ";".join(
        ",".join([str(e.epoch)] + [float(getattr(e, k)).hex() for k in LOG_HEADER[1:]]) for e in history
    )


def _decode_log(text: str, path) -> list[EpochLog]:
    out = []
    for chunk in filter(None, text.split(";")):
        parts = chunk.split(",")
        if len(parts) != len(LOG_HEADER):
            raise FormatError("malformed loss log in checkpoint", path)
        try:
            out.append(EpochLog(int(parts[0]), *(float.fromhex(p) for p in parts[1:])))
        except ValueError as exc:
            raise FormatError(f"malformed loss log in checkpoint: {exc}", path) from exc
    return out


def checkpoint(model: StabilityNet, epoch: int, path, cfg: TrainConfig, history: list[EpochLog]) -> None:
    extra = {"epoch": epoch, "loss_log": _encode_log(history)}
    extra.update({f"train.{k}": v for k, v in cfg.to_dict().items()})
    save_weights(model, path, extra)


def resume(path, cfg: TrainConfig) -> tuple[StabilityNet, int, list[EpochLog]]:
    """Load a checkpoint written by :func:`checkpoint` for continuing under ``cfg``."""
    _, meta = read_weight_file(path)
    if "epoch" not in meta:
        raise FormatError("not a checkpoint: no epoch recorded", path)
    try:
        epoch = int(meta["epoch"])
    except ValueError as exc:
        raise FormatError(f"bad epoch value {meta['epoch']!r}", path) from exc
    if epoch > cfg.max_epochs:
        raise ValueError(f"checkpoint is at epoch {epoch}, beyond max_epochs={cfg.max_epochs}")
    stored = {k[len("train."):]: v for k, v in meta.items() if k.startswith("train.")}
    current = cfg.to_dict()
    for key in _COMPARED:
        if key in stored and str(current[key]) != stored[key]:
            raise ValueError(f"checkpoint was trained with {key}={stored[key]}, config has {current[key]}")
    history = _decode_log(meta.get("loss_log", ""), path)
    if len(history) != epoch:
        raise FormatError(f"checkpoint at epoch {epoch} carries {len(history)} log rows", path)
    return load_weights(path), epoch, history


def write_loss_log(path, history: list[EpochLog]) -> None:
    lines = [",".join(LOG_HEADER)] + [",".join(e.row()) for e in history]
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def read_loss_log(path) -> list[EpochLog]:
    lines = Path(path).read_text(encoding="utf-8").splitlines()
    if not lines or lines[0].split(",") != LOG_HEADER:
        raise FormatError("loss log header mismatch", path, 1)
    out = []
    for n, line in enumerate(lines[1:], 2):
        parts = line.split(",")
        try:
            out.append(EpochLog(int(parts[0]), *(float(p) for p in parts[1:])))
        except (ValueError, TypeError) as exc:
            raise FormatError(f"bad loss log line: {exc}", path, n) from exc
    return out



# ---------------------------------------------------------------------------
# gradient check of the full network under the hybrid loss


def network_grad_check(
    mode: str = "dense",
    seed: int = 0,
    size: int = 8,
    base_channels: int = 2,
    samples_per_param: int = 3,
    eps: float = 1e-4,
    kink_tol: float | None = 1e-4,
) -> float:
    """Max relative gradient error of one hybrid-loss triplet step on random data.

    Both loss terms carry weight 0.5 so each contributes to the gradient.
    """
    from .data.synthetic import generate_scene
    from .losses import LossWeights

    rng = np.random.default_rng(seed)
    model = build_model(base_channels=base_channels, seed=seed)
    # zero biases put dead channels exactly on the relu kink; move them off it
    for name, p in model.params.items():
        if name.endswith(".bias"):
            p.data = rng.normal(0.0, 0.1, p.data.shape).astype(np.float32)
    ids = (0, 1, 2)
    data = TrainingData(
        images={i: rng.uniform(0, 1, (3, size, size)).astype(np.float32) for i in ids},
        stability={i: (rng.uniform(size=(size, size)) < 0.5).astype(np.uint8) for i in ids},
    )
    triplet = Triplet(0, 1, 2)
    if mode == "dense":
        data.dense = {i: rng.normal(size=(size, size, 4)).astype(np.float32) for i in ids}
        triplet.dense = tuple(data.dense[i] for i in ids)
    elif mode == "sparse":
        pairs = []
        for j in range(2):
            scene = generate_scene(n_static=20, noise=0.3, seed=seed * 7 + j, image_size=(size, size))
            F = scene.F if j == 0 else np.roll(scene.F, 1, axis=0)
            pairs.append(SparsePair(scene.matches, F, (size, size)))
        triplet.pairs = tuple(pairs)
    else:
        raise ValueError(f"unknown distance mode {mode!r}")
    # margin large enough that the hinge is active
    weights = LossWeights(0, 0.5, 0.5)
    return ad.grad_check(
        lambda: triplet_losses(model, triplet, data, mode, 10.0, weights)[0],
        model.parameters(),
        eps=eps,
        samples_per_param=samples_per_param,
        seed=seed,
        kink_tol=kink_tol,
    )
