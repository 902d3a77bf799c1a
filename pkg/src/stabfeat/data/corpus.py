"""On-disk layout of an image corpus.

::

    corpus.cfg                  key=value generator settings (optional)
    categories.tsv              id<TAB>name
    loops.csv                   id_a,id_b
    poses.txt                   ground-truth trajectory, KITTI format
    images/NNNNNN.ppm           RGB input
    labels/NNNNNN.pgm           category ids
    truth/NNNNNN.pgm            physical stability (optional)
    dense/NNNNNN.dsfd           H*W dense descriptors (optional)
    features/NNNNNN.kpts.tsv    keypoints
    features/NNNNNN.desc.dsfd   descriptors

Stability maps are derived from the labels on load, using the static
categories passed in.
"""

from __future__ import annotations

from pathlib import Path

import numpy as np

from ..exceptions import FormatError
from . import formats
from .prep import DEFAULT_STATIC, LabelMap, stability_from_labels
from .synthetic import Corpus, CorpusConfig, Frame


def frame_name(i: int) -> str:
    return f"{i:06d}"


def save_corpus(corpus: Corpus, root) -> None:
    root = Path(root)
    for sub in ("images", "labels", "truth", "dense", "features"):
        (root / sub).mkdir(parents=True, exist_ok=True)
    formats.write_config(root / "corpus.cfg", corpus.config.to_dict())
    formats.write_categories(root / "categories.tsv", corpus.categories)
    formats.write_loops(root / "loops.csv", corpus.loops)
    formats.write_trajectory(root / "poses.txt", corpus.trajectory())
    for f in corpus.frames:
        name = frame_name(f.id)
        formats.write_ppm(root / "images" / f"{name}.ppm", f.image)
        formats.write_pgm(root / "labels" / f"{name}.pgm", f.labels.ids)
        formats.write_pgm(root / "truth" / f"{name}.pgm", f.truth)
        formats.write_dense_grid(root / "dense" / f"{name}.dsfd", f.dense)
        formats.write_feature_set(root / "features" / name, f.features)


def load_corpus(root, static_categories=DEFAULT_STATIC) -> Corpus:
    """Read a corpus directory; frames are numbered 0..n-1 without gaps."""
    root = Path(root)
    if not (root / "images").is_dir():
        raise FormatError("corpus directory has no images/ folder", root)
    names = formats.read_categories(root / "categories.tsv")
    loops = formats.read_loops(root / "loops.csv")
    cfg_path = root / "corpus.cfg"
    cfg = CorpusConfig.from_dict(formats.read_config(cfg_path)) if cfg_path.exists() else None
    poses_path = root / "poses.txt"
    poses = formats.read_trajectory(poses_path) if poses_path.exists() else None
    image_files = sorted((root / "images").glob("*.ppm"))
    frames = []
    for n, path in enumerate(image_files):
        if path.stem != frame_name(n):
            raise FormatError(f"expected frame {frame_name(n)}, found {path.name}", path)
        image = formats.read_ppm(path)
        _, h, w = image.shape
        try:
            labels = LabelMap(formats.read_pgm(root / "labels" / f"{path.stem}.pgm"), names)
        except ValueError as exc:
            if isinstance(exc, FormatError):
                raise
            raise FormatError(str(exc), root / "labels" / f"{path.stem}.pgm") from exc
        if labels.ids.shape != (h, w):
            raise FormatError(f"label map is {labels.ids.shape}, image is {(h, w)}", root / "labels")
        truth_path = root / "truth" / f"{path.stem}.pgm"
        truth = formats.read_pgm(truth_path) if truth_path.exists() else None
        dense_path = root / "dense" / f"{path.stem}.dsfd"
        dense = formats.read_dense_grid(dense_path, h, w) if dense_path.exists() else None
        fs = formats.read_feature_set(root / "features" / path.stem, (w, h))
        pose = poses[n] if poses is not None and n < len(poses) else np.hstack([np.eye(3), np.zeros((3, 1))])
        frames.append(
            Frame(
                id=n,
                place=-1,
                image=image,
                labels=labels,
                stability=stability_from_labels(labels, static_categories),
                truth=truth,
                dense=dense,
                features=fs,
                kind=np.full(len(fs), -1, np.int8),
                pose=pose,
            )
        )
    if not frames:
        raise FormatError("corpus has no frames", root)
    for a, b in loops:
        if not (0 <= a < len(frames) and 0 <= b < len(frames)):
            raise FormatError(f"loop ({a}, {b}) refers to a missing frame", root / "loops.csv")
    if cfg is None:
        cfg = CorpusConfig(n_frames=len(frames), n_places=len(frames), held_out=0)
    return Corpus(cfg, frames, loops, names)
