"""Command-line entry point.

Every subcommand takes ``--config FILE`` with ``key=value`` lines; keys are
flag names (dashes or underscores) and set that flag's default, so a flag
given on the command line always wins. Exit codes: 0 success, 1 usage
error, 2 data error.
"""

from __future__ import annotations

import argparse
import csv
import logging
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .data import formats
from .data.corpus import frame_name, load_corpus, save_corpus
from .data.prep import DEFAULT_STATIC, LabelMap, mine_triplets, stability_from_labels
from .data.synthetic import CorpusConfig, generate_corpus
from .evaluation import curve_auc, pr_csv, pr_curve, trajectory_report
from .exceptions import DegenerateConfigurationError, FormatError
from .network import build_model, load_weights
from .pipeline import PipelineConfig, run_pipeline, select_features, training_data
from .retrieval import (
    LOOP_HEADER,
    BowIndex,
    VerifyConfig,
    build_vocabulary,
    load_vocabulary,
    loop_rows,
    quantize,
    query,
    save_vocabulary,
    verify_loop,
)
from .trainer import TrainConfig, checkpoint, network_grad_check, resume, train, write_loss_log

log = logging.getLogger("stabfeat")

CANDIDATE_HEADER = ["query_id", "candidate_id", "similarity"]


class UsageError(Exception):
    pass


class DataError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")

    def exit(self, status=0, message=None):
        # --help and --version land here
        if message:
            sys.stderr.write(message)
        raise SystemExit(status)


def _ints(text: str) -> tuple[int, ...]:
    return tuple(int(p) for p in text.split(",") if p.strip())


# ---------------------------------------------------------------------------
# config files


def _apply_config(parser: argparse.ArgumentParser, path: str, passthrough: bool = False) -> dict[str, str]:
    """Set parser defaults from a config file; return keys no flag claims.

    Unclaimed keys are an error unless the subcommand forwards them to a
    nested config (``passthrough``).
    """
    try:
        values = formats.read_config(path)
    except OSError as exc:
        raise DataError(f"cannot read config {path}: {exc.strerror}") from exc
    actions = {a.dest: a for a in parser._actions if a.dest not in ("help", "config")}
    defaults, rest = {}, {}
    for key, raw in values.items():
        dest = key.replace("-", "_")
        action = actions.get(dest)
        if action is None:
            if not passthrough:
                raise UsageError(f"{parser.prog}: unknown config key {key!r}")
            rest[key] = raw
            continue
        if isinstance(action, argparse._StoreTrueAction):
            if raw.lower() not in ("true", "false", "1", "0", "yes", "no"):
                raise UsageError(f"{parser.prog}: config key {key!r} must be a boolean, got {raw!r}")
            defaults[dest] = raw.lower() in ("true", "1", "yes")
            continue
        convert = action.type or str
        try:
            value = convert(raw)
        except (TypeError, ValueError) as exc:
            raise UsageError(f"{parser.prog}: bad value {raw!r} for config key {key!r}") from exc
        if action.choices is not None and value not in action.choices:
            raise UsageError(f"{parser.prog}: config key {key!r} must be one of {sorted(action.choices)}")
        defaults[dest] = value
    for action in parser._actions:
        if action.dest in defaults:
            action.required = False
    parser.set_defaults(**defaults)
    return rest


# ---------------------------------------------------------------------------
# subcommands


def cmd_gen_synth(args, extra) -> int:
    overrides = {k: v for k, v in (("seed", args.seed), ("n_frames", args.frames), ("held_out", args.held_out)) if v is not None}
    try:
        cfg = CorpusConfig.from_dict({**CorpusConfig().to_dict(), **extra, **{k: str(v) for k, v in overrides.items()}})
    except (TypeError, ValueError) as exc:
        raise UsageError(f"gen-synth: {exc}") from exc
    corpus = generate_corpus(cfg)
    save_corpus(corpus, args.out)
    print(f"wrote {len(corpus.frames)} frames, {len(corpus.loops)} loop pairs to {args.out}")
    return 0


def _train_config(args) -> TrainConfig:
    try:
        return TrainConfig(
            max_epochs=args.epochs,
            lr=args.lr,
            lr_decay_epochs=args.lr_decay_epochs,
            lr_decay=args.lr_decay,
            margin=args.margin,
            mode=args.mode,
            seed=args.seed,
            checkpoint_every=args.checkpoint_every,
            literal_schedule=args.literal_schedule,
            top_k=args.top_k,
        )
    except ValueError as exc:
        raise UsageError(f"train: {exc}") from exc


def cmd_train(args, extra) -> int:
    cfg = _train_config(args)
    corpus = load_corpus(args.corpus, _static(args.static))
    n_train = len(corpus.frames) - corpus.config.held_out
    records, skipped = mine_triplets(
        corpus.train_loops(), n_train, negatives_per_query=args.negatives, gap=args.gap, seed=args.seed
    )
    if skipped:
        log.warning("%d loop pairs produced no triplet", skipped)
    if not records:
        raise DataError("train: corpus yields no training triplets")
    data = training_data(corpus)
    start, history = 0, []
    if args.resume:
        model, start, history = resume(args.resume, cfg)
    else:
        model = build_model(base_channels=args.base_channels, seed=args.seed)
    ckpt = args.checkpoint or (str(args.out) + ".ckpt" if cfg.checkpoint_every else None)
    result = train(model, records, data, cfg, start_epoch=start, history=history, checkpoint_path=ckpt)
    checkpoint(result.model, result.epoch, args.out, cfg, result.log)
    if args.log:
        write_loss_log(args.log, result.log)
    print(f"trained {result.epoch - start} epochs on {len(records)} triplets; weights in {args.out}")
    return 0


def _read_image(path):
    path = Path(path)
    if path.suffix.lower() == ".pgm":
        return formats.read_pgm(path)[None].astype(np.float32) / 255.0
    return formats.read_ppm(path)


def cmd_infer(args, extra) -> int:
    model = load_weights(args.model)
    image = _read_image(args.image)
    if image.shape[0] != model.config.input_channels:
        raise DataError(f"infer: model expects {model.config.input_channels} channels, image has {image.shape[0]}")
    try:
        amap = model.predict(image)
    except ValueError as exc:
        raise DataError(f"infer: {exc}") from exc
    formats.write_activation(args.out, amap)
    return 0


def cmd_heatmap(args, extra) -> int:
    amap = formats.read_activation(args.activation).astype(np.float64)
    if not np.isfinite(amap).all():
        raise DataError("heatmap: activation map has non-finite values")
    formats.write_pgm(args.out, np.rint(255.0 * np.clip(amap, 0.0, 1.0)).astype(np.uint8))
    return 0


def _static(text):
    return DEFAULT_STATIC if text is None else frozenset(p.strip() for p in text.split(",") if p.strip())


def cmd_select(args, extra) -> int:
    amap = stability = None
    if args.method == "activation":
        if not args.activation:
            raise UsageError("select: --method activation needs --activation")
        amap = formats.read_activation(args.activation)
        h, w = amap.shape
    elif args.method == "semantic":
        if not args.labels:
            raise UsageError("select: --method semantic needs --labels")
        names = formats.read_categories(args.categories) if args.categories else None
        ids = formats.read_pgm(args.labels)
        try:
            labels = LabelMap(ids) if names is None else LabelMap(ids, names)
            stability = stability_from_labels(labels, _static(args.static))
        except ValueError as exc:
            raise DataError(f"select: {exc}") from exc
        h, w = stability.shape
    else:
        if args.width is None or args.height is None:
            raise UsageError("select: --method response needs --width and --height")
        w, h = args.width, args.height
    fs = formats.read_feature_set(args.features, (w, h))
    variant = {"response": "trad", "semantic": "seman", "activation": "ours"}[args.method]
    try:
        chosen = select_features(variant, fs, args.k, stability, amap)
    except ValueError as exc:
        raise DataError(f"select: {exc}") from exc
    formats.write_feature_set(args.out, chosen)
    print(f"kept {len(chosen)} of {len(fs)} keypoints")
    return 0


def _corpus_features(root) -> list:
    corpus = load_corpus(root)
    return corpus, [f.features for f in corpus.frames]


def cmd_build_vocab(args, extra) -> int:
    corpus, feats = _corpus_features(args.corpus)
    groups = [fs.descriptors for fs in feats]
    try:
        vocab = build_vocabulary(groups, k=args.k, seed=args.seed, kind=feats[0].kind, dim=feats[0].dim)
    except ValueError as exc:
        raise DataError(f"build-vocab: {exc}") from exc
    save_vocabulary(vocab, args.out)
    print(f"vocabulary of {vocab.k} words from {sum(len(g) for g in groups)} descriptors")
    return 0


def _query_ids(corpus, which: str) -> list[int]:
    return corpus.held_out_ids if which == "held-out" else list(range(len(corpus.frames)))


def cmd_retrieve(args, extra) -> int:
    vocab = load_vocabulary(args.vocab)
    corpus, feats = _corpus_features(args.corpus)
    index = BowIndex()
    vectors = []
    for f, fs in zip(corpus.frames, feats):
        try:
            v = quantize(fs, vocab)
        except ValueError as exc:
            raise DataError(f"retrieve: frame {f.id}: {exc}") from exc
        vectors.append(v)
        index.add(f.id, v)
    rows = []
    for q in _query_ids(corpus, args.queries):
        for cand, sim in query(index, vectors[q], args.top_n, args.gap, position=q, past_only=args.past_only):
            rows.append([str(q), str(cand), f"{sim:.9g}"])
    Path(args.out).write_text(formats.csv_text(CANDIDATE_HEADER, rows), encoding="utf-8")
    print(f"{len(rows)} candidates")
    return 0


def _read_csv(path, required: list[str]) -> list[dict[str, str]]:
    try:
        with open(path, newline="", encoding="utf-8") as fh:
            reader = csv.DictReader(fh)
            missing = [c for c in required if c not in (reader.fieldnames or [])]
            if missing:
                raise FormatError(f"missing columns {missing}", path, 1)
            return list(reader)
    except UnicodeDecodeError as exc:
        raise FormatError("not UTF-8 text", path, None) from exc


def cmd_verify(args, extra) -> int:
    corpus = load_corpus(args.corpus)
    rows = _read_csv(args.candidates, CANDIDATE_HEADER)
    cfg = VerifyConfig(threshold=args.threshold, max_iters=args.iters, seed=args.seed, min_inliers=args.min_inliers)
    scores = []
    for n, row in enumerate(rows, 2):
        try:
            q, c, sim = int(row["query_id"]), int(row["candidate_id"]), float(row["similarity"])
        except (TypeError, ValueError) as exc:
            raise FormatError(f"bad candidate row {row}", args.candidates, n) from exc
        if not (0 <= q < len(corpus.frames) and 0 <= c < len(corpus.frames)):
            raise FormatError(f"frame id out of range in row {row}", args.candidates, n)
        amap = None
        if args.activations:
            amap = formats.read_activation(Path(args.activations) / f"{frame_name(q)}.dsfa")
        fq, fc = corpus.frames[q].features, corpus.frames[c].features
        scores.append(verify_loop(fq, fc, amap, cfg, candidate=c, similarity=sim, query_id=q))
    Path(args.out).write_text(formats.csv_text(LOOP_HEADER, loop_rows(scores)), encoding="utf-8")
    print(f"{sum(s.verified for s in scores)} of {len(scores)} candidates verified")
    return 0


def cmd_pr(args, extra) -> int:
    rows = _read_csv(args.scores, ["query_id", "candidate_id", "verif_score"])
    truth = set()
    for a, b in formats.read_loops(args.gt):
        truth |= {(a, b), (b, a)}
    scores, labels = [], []
    for n, row in enumerate(rows, 2):
        try:
            pair = (int(row["query_id"]), int(row["candidate_id"]))
            scores.append(float(row["verif_score"]))
        except (TypeError, ValueError) as exc:
            raise FormatError(f"bad score row {row}", args.scores, n) from exc
        labels.append(pair in truth)
    if not scores:
        raise DataError("pr: score file has no rows")
    try:
        points = pr_curve(scores, labels, n_positive=args.n_positive)
    except ValueError as exc:
        raise DataError(f"pr: {exc}") from exc
    area = curve_auc(points)
    Path(args.out).write_text(pr_csv(points, area), encoding="utf-8")
    print(f"auc={area:.6f}")
    return 0


def cmd_traj_eval(args, extra) -> int:
    est = formats.read_trajectory(args.est)
    gt = formats.read_trajectory(args.gt)
    try:
        text = trajectory_report(est, gt, args.step)
    except ValueError as exc:
        raise DataError(f"traj-eval: {exc}") from exc
    if args.out:
        Path(args.out).write_text(text, encoding="utf-8")
    sys.stdout.write(text)
    return 0


def cmd_grad_check(args, extra) -> int:
    modes = ("dense", "sparse") if args.mode == "both" else (args.mode,)
    worst = 0.0
    for mode in modes:
        errs = [network_grad_check(mode, seed, size=args.size, eps=args.eps) for seed in range(args.seeds)]
        worst = max(worst, max(errs))
        print(f"{mode}: max relative error {max(errs):.3e} over {args.seeds} seeds")
    if worst >= args.tol:
        print(f"FAIL: {worst:.3e} >= {args.tol:g}", file=sys.stderr)
        return 2
    return 0


def cmd_pipeline(args, extra) -> int:
    values = dict(extra)
    if args.variants:
        values["variants"] = args.variants
    try:
        cfg = PipelineConfig.from_dict(values)
    except (TypeError, ValueError) as exc:
        raise UsageError(f"pipeline: {exc}") from exc
    corpus = load_corpus(args.corpus) if args.corpus else None
    if corpus is not None:
        cfg.sequence = Path(args.corpus).name
    model = load_weights(args.model) if args.model else None
    report = run_pipeline(cfg, args.out, corpus=corpus, model=model)
    sys.stdout.write(report.table(cfg.variants))
    return 0


# ---------------------------------------------------------------------------
# parser


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="stabfeat", description="Stability-map feature selection for loop closure.")
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", parser_class=_Parser)

    def add(name, fn, help_text, passthrough=False):
        sp = sub.add_parser(name, help=help_text, description=help_text)
        sp.add_argument("--config", help="key=value file; keys set flag defaults")
        sp.set_defaults(func=fn, passthrough=passthrough)
        return sp

    s = add("gen-synth", cmd_gen_synth, "generate a synthetic corpus", passthrough=True)
    s.add_argument("--out", required=True, help="output directory")
    s.add_argument("--seed", type=int)
    s.add_argument("--frames", type=int, help="number of frames")
    s.add_argument("--held-out", type=int, help="frames held out of training")

    t = add("train", cmd_train, "train the activation network on a corpus")
    t.add_argument("--corpus", required=True)
    t.add_argument("--out", required=True, help="weight file (a checkpoint)")
    t.add_argument("--epochs", type=int, default=30)
    t.add_argument("--lr", type=float, default=0.05)
    t.add_argument("--lr-decay-epochs", type=_ints, default=(20,))
    t.add_argument("--lr-decay", type=float, default=0.1)
    t.add_argument("--margin", type=float, default=0.5)
    t.add_argument("--mode", choices=("dense", "sparse"), default="dense")
    t.add_argument("--seed", type=int, default=42)
    t.add_argument("--base-channels", type=int, default=8)
    t.add_argument("--negatives", type=int, default=2, help="negatives per loop pair")
    t.add_argument("--gap", type=int, default=10, help="min frame gap for negatives")
    t.add_argument("--top-k", type=int, default=500, help="sparse mode keypoints per image")
    t.add_argument("--static", help="comma-separated static categories")
    t.add_argument("--literal-schedule", action="store_true")
    t.add_argument("--checkpoint", help="periodic checkpoint path")
    t.add_argument("--checkpoint-every", type=int, default=0)
    t.add_argument("--resume", help="checkpoint to continue from")
    t.add_argument("--log", help="loss log CSV")

    i = add("infer", cmd_infer, "activation map for one image")
    i.add_argument("--model", required=True)
    i.add_argument("--image", required=True, help="PPM (or PGM for 1-channel models)")
    i.add_argument("--out", required=True, help="activation map (.dsfa)")

    h = add("heatmap", cmd_heatmap, "render an activation map as 8-bit PGM")
    h.add_argument("--activation", required=True)
    h.add_argument("--out", required=True)

    se = add("select", cmd_select, "keep the top-k keypoints of one image")
    se.add_argument("--features", required=True, help="feature stem (STEM.kpts.tsv, STEM.desc.dsfd)")
    se.add_argument("--method", choices=("response", "semantic", "activation"), default="activation")
    se.add_argument("--activation")
    se.add_argument("--labels", help="label map PGM")
    se.add_argument("--categories", help="category table TSV")
    se.add_argument("--static", help="comma-separated static categories")
    se.add_argument("--width", type=int)
    se.add_argument("--height", type=int)
    se.add_argument("--k", type=int, default=500)
    se.add_argument("--out", required=True, help="output feature stem")

    b = add("build-vocab", cmd_build_vocab, "cluster corpus descriptors into a vocabulary")
    b.add_argument("--corpus", required=True)
    b.add_argument("--k", type=int, default=64)
    b.add_argument("--seed", type=int, default=0)
    b.add_argument("--out", required=True)

    r = add("retrieve", cmd_retrieve, "bag-of-words loop candidates")
    r.add_argument("--vocab", required=True)
    r.add_argument("--corpus", required=True)
    r.add_argument("--top-n", type=int, default=3)
    r.add_argument("--gap", type=int, default=10, help="exclude candidates this close in time")
    r.add_argument("--queries", choices=("held-out", "all"), default="all")
    r.add_argument("--past-only", action="store_true", help="only earlier frames are candidates")
    r.add_argument("--out", required=True)

    v = add("verify", cmd_verify, "epipolar verification of loop candidates")
    v.add_argument("--corpus", required=True)
    v.add_argument("--candidates", required=True)
    v.add_argument("--activations", help="directory of NNNNNN.dsfa maps for weighted RANSAC")
    v.add_argument("--threshold", type=float, default=0.02)
    v.add_argument("--iters", type=int, default=500)
    v.add_argument("--seed", type=int, default=0)
    v.add_argument("--min-inliers", type=int, default=12)
    v.add_argument("--out", required=True)

    pr = add("pr", cmd_pr, "precision-recall curve and AUC of verified loops")
    pr.add_argument("--scores", required=True, help="CSV with query_id, candidate_id, verif_score")
    pr.add_argument("--gt", required=True, help="ground-truth loop pairs")
    pr.add_argument("--n-positive", type=int, help="recall denominator (default: true rows)")
    pr.add_argument("--out", required=True)

    te = add("traj-eval", cmd_traj_eval, "rotation error and offset deviation")
    te.add_argument("--est", required=True)
    te.add_argument("--gt", required=True)
    te.add_argument("--step", type=float, default=100.0, help="segment length in metres")
    te.add_argument("--out")

    g = add("grad-check", cmd_grad_check, "finite-difference check of the network gradients")
    g.add_argument("--mode", choices=("dense", "sparse", "both"), default="both")
    g.add_argument("--seeds", type=int, default=20)
    g.add_argument("--size", type=int, default=8)
    g.add_argument("--eps", type=float, default=1e-4)
    g.add_argument("--tol", type=float, default=1e-3)

    pl = add("pipeline", cmd_pipeline, "select, retrieve, verify and score every variant", passthrough=True)
    pl.add_argument("--corpus", help="corpus directory (default: generate the synthetic one)")
    pl.add_argument("--model", help="trained weights (default: train on the corpus)")
    pl.add_argument("--variants", help="comma-separated subset of trad,seman,ours")
    pl.add_argument("--out", required=True)
    return p


def _subcommands(parser) -> dict[str, argparse.ArgumentParser]:
    return next(a for a in parser._actions if isinstance(a, argparse._SubParsersAction)).choices


def run(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        try:
            args = parser.parse_args(argv)
        except SystemExit as exc:
            return int(exc.code or 0)
        if args.command is None:
            parser.print_usage(sys.stderr)
            print("stabfeat: error: a subcommand is required", file=sys.stderr)
            return 1
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
        extra = {}
        if args.config:
            sp = _subcommands(parser)[args.command]
            extra = _apply_config(sp, args.config, args.passthrough)
            args = parser.parse_args(argv)
        return args.func(args, extra)
    except UsageError as exc:
        if not argv or argv[0] not in _subcommands(parser):
            parser.print_usage(sys.stderr)
        print(str(exc), file=sys.stderr)
        return 1
    except (DataError, FormatError, DegenerateConfigurationError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except FileNotFoundError as exc:
        print(f"error: no such file: {exc.filename}", file=sys.stderr)
        return 2
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


def main() -> None:
    sys.exit(run())
