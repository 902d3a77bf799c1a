"""End-to-end experiment: select, retrieve, verify and score each variant.

Variants:

``trad``
    top-k keypoints by detector response.
``seman``
    keypoints on semantically static cells, then top-k by response.
``ours``
    top-k keypoints by learned activation, with activation-weighted RANSAC.
"""

from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from .data import formats
from .data.prep import mine_triplets
from .data.synthetic import Corpus, CorpusConfig, generate_corpus
from .evaluation import PrPoint, curve_auc, pr_csv, pr_curve
from .features import FeatureSet
from .network import StabilityNet, build_model, save_weights
from .retrieval import (
    LOOP_HEADER,
    BowIndex,
    LoopScore,
    VerifyConfig,
    build_vocabulary,
    loop_rows,
    quantize,
    query,
    verify_loop,
)
from .selection import select_topk_activation, select_topk_response, semantic_filter_select
from .trainer import TrainConfig, TrainingData, train, write_loss_log

log = logging.getLogger(__name__)

VARIANTS = ("trad", "seman", "ours")


@dataclass
class PipelineConfig:
    variants: tuple[str, ...] = VARIANTS
    sequence: str = "synthetic"
    k: int = 30
    vocab_k: int = 64
    vocab_seed: int = 0
    top_n: int = 3
    exclusion_gap: int = 10
    queries: str = "held_out"
    ransac_threshold: float = 0.02
    ransac_iters: int = 500
    ransac_seed: int = 0
    min_inliers: int = 12
    base_channels: int = 8
    net_seed: int = 42
    negatives_per_query: int = 2
    triplet_gap: int = 10
    triplet_seed: int = 42
    corpus: CorpusConfig = field(default_factory=CorpusConfig)
    train: TrainConfig = field(
        default_factory=lambda: TrainConfig(max_epochs=30, lr=0.05, seed=42, lr_decay_epochs=(20,))
    )

    def __post_init__(self):
        self.variants = tuple(self.variants)
        unknown = set(self.variants) - set(VARIANTS)
        if unknown:
            raise ValueError(f"unknown variants {sorted(unknown)}; expected a subset of {VARIANTS}")
        if self.queries not in ("held_out", "all"):
            raise ValueError(f"queries must be 'held_out' or 'all', got {self.queries!r}")

    def verify_config(self) -> VerifyConfig:
        return VerifyConfig(
            threshold=self.ransac_threshold,
            max_iters=self.ransac_iters,
            seed=self.ransac_seed,
            min_inliers=self.min_inliers,
        )

    def to_dict(self) -> dict:
        out = {k: v for k, v in asdict(self).items() if k not in ("corpus", "train")}
        out.update({f"corpus.{k}": v for k, v in self.corpus.to_dict().items()})
        out.update({f"train.{k}": v for k, v in self.train.to_dict().items()})
        return out

    @classmethod
    def from_dict(cls, values: dict) -> "PipelineConfig":
        """Build from flat string keys; ``corpus.*`` and ``train.*`` keys go to the nested configs."""
        base = cls()
        corpus_keys = {k[len("corpus."):]: v for k, v in values.items() if k.startswith("corpus.")}
        train_keys = {k[len("train."):]: v for k, v in values.items() if k.startswith("train.")}
        out = {}
        for f in fields(cls):
            if f.name in ("corpus", "train") or f.name not in values:
                continue
            v = values[f.name]
            default = getattr(base, f.name)
            if isinstance(default, tuple):
                out[f.name] = tuple(p.strip() for p in v.split(",") if p.strip()) if isinstance(v, str) else tuple(v)
            else:
                out[f.name] = type(default)(v)
        known = {f.name for f in fields(cls)} | {"corpus", "train"}
        stray = [k for k in values if "." not in k and k not in known]
        if stray:
            raise ValueError(f"unknown pipeline setting {stray[0]!r}")
        out["corpus"] = CorpusConfig.from_dict({**base.corpus.to_dict(), **corpus_keys})
        out["train"] = TrainConfig.from_dict({**base.train.to_dict(), **train_keys})
        return cls(**out)


@dataclass
class VariantResult:
    name: str
    scores: list[LoopScore]
    labels: list[bool]
    n_positive: int
    points: list[PrPoint]
    auc: float


@dataclass
class PipelineReport:
    sequence: str
    results: dict[str, VariantResult]
    skipped: dict[str, str]
    model: StabilityNet | None = None
    history: list = field(default_factory=list)

    def table(self, variants=VARIANTS) -> str:
        cols = [v for v in variants if v in self.results or v in self.skipped]
        cells = [f"{self.results[v].auc:.6f}" if v in self.results else "skipped" for v in cols]
        text = ",".join(["sequence", *cols]) + "\n" + ",".join([self.sequence, *cells]) + "\n"
        for v in cols:
            if v in self.skipped:
                text += f"# {v} skipped: {self.skipped[v]}\n"
        return text


def training_data(corpus: Corpus, ids=None) -> TrainingData:
    ids = range(len(corpus.frames)) if ids is None else ids
    frames = [corpus.frames[i] for i in ids]
    return TrainingData(
        images={f.id: f.image for f in frames},
        stability={f.id: f.stability for f in frames},
        dense={f.id: f.dense for f in frames if f.dense is not None},
        features={f.id: f.features for f in frames},
    )


def train_on_corpus(corpus: Corpus, cfg: PipelineConfig, checkpoint_path=None):
    """Train a fresh model on triplets mined from the corpus's training loops."""
    loops = corpus.train_loops()
    records, _ = mine_triplets(
        loops,
        len(corpus.frames) - corpus.config.held_out,
        negatives_per_query=cfg.negatives_per_query,
        gap=cfg.triplet_gap,
        seed=cfg.triplet_seed,
    )
    model = build_model(base_channels=cfg.base_channels, seed=cfg.net_seed)
    result = train(model, records, training_data(corpus), cfg.train, checkpoint_path=checkpoint_path)
    return result.model, result.log


def select_features(variant: str, fs: FeatureSet, k: int, stability=None, amap=None) -> FeatureSet:
    if variant == "trad":
        return select_topk_response(fs, k) if len(fs) else fs
    if variant == "seman":
        return semantic_filter_select(fs, stability, k)
    return select_topk_activation(fs, amap, k) if len(fs) else fs


def query_ids(corpus: Corpus, cfg: PipelineConfig) -> list[int]:
    if cfg.queries == "held_out":
        return corpus.held_out_ids
    return list(range(len(corpus.frames)))


def run_variant(
    variant: str,
    corpus: Corpus,
    cfg: PipelineConfig,
    maps: dict[int, np.ndarray] | None = None,
) -> VariantResult:
    frames = corpus.frames
    selected = [
        select_features(variant, f.features, cfg.k, f.stability, None if maps is None else maps[f.id])
        for f in frames
    ]
    kind = frames[0].features.kind
    groups = [s.descriptors for s in selected]
    vocab = build_vocabulary(groups, k=cfg.vocab_k, seed=cfg.vocab_seed, kind=kind, dim=frames[0].features.dim)
    index = BowIndex()
    vectors = [quantize(s, vocab) for s in selected]
    for f, v in zip(frames, vectors):
        index.add(f.id, v)
    truth = {(a, b) for a, b in corpus.loops} | {(b, a) for a, b in corpus.loops}
    vcfg = cfg.verify_config()
    scores, labels = [], []
    n_positive = 0
    for q in query_ids(corpus, cfg):
        if any((q, c) in truth for c in range(0, q - cfg.exclusion_gap)):
            n_positive += 1
        for cand, sim in query(index, vectors[q], cfg.top_n, cfg.exclusion_gap, position=q, past_only=True):
            amap = maps[q] if variant == "ours" and maps is not None else None
            s = verify_loop(selected[q], selected[cand], amap, vcfg, candidate=cand, similarity=sim, query_id=q)
            scores.append(s)
            labels.append((q, cand) in truth)
    if n_positive == 0:
        raise ValueError("no query has a ground-truth loop among its candidates")
    points = pr_curve([s.score for s in scores], labels, n_positive=n_positive) if scores else []
    return VariantResult(variant, scores, labels, n_positive, points, curve_auc(points))


def run_pipeline(
    cfg: PipelineConfig,
    out_dir=None,
    corpus: Corpus | None = None,
    model: StabilityNet | None = None,
) -> PipelineReport:
    """Run every configured variant and optionally write all artifacts to ``out_dir``."""
    corpus = generate_corpus(cfg.corpus) if corpus is None else corpus
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
    skipped: dict[str, str] = {}
    history = []
    maps = None
    if "ours" in cfg.variants:
        if model is None:
            model, history = train_on_corpus(corpus, cfg)
        maps = {f.id: model.predict(f.image) for f in corpus.frames}
    results = {}
    for variant in cfg.variants:
        if variant == "seman" and any(f.stability is None for f in corpus.frames):
            skipped[variant] = "missing label maps"
            continue
        results[variant] = run_variant(variant, corpus, cfg, maps)
        log.info("%s: auc=%.6f", variant, results[variant].auc)
    report = PipelineReport(cfg.sequence, results, skipped, model, history)
    if out is not None:
        (out / "report.csv").write_text(report.table(cfg.variants), encoding="utf-8")
        for name, res in results.items():
            (out / f"{name}_loops.csv").write_text(formats.csv_text(LOOP_HEADER, loop_rows(res.scores)), encoding="utf-8")
            (out / f"{name}_pr.csv").write_text(pr_csv(res.points, res.auc), encoding="utf-8")
        if model is not None:
            save_weights(model, out / "model.dsfw")
        if history:
            write_loss_log(out / "loss_log.csv", history)
        formats.write_config(out / "pipeline.cfg", cfg.to_dict())
    return report
