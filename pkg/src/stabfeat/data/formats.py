"""Readers and writers for every on-disk format the pipeline exchanges.

Binary formats are little-endian and checked strictly: a reader either
returns exactly what a writer produced or raises :class:`FormatError`.
Text formats print floats with 9 significant digits.
"""

from __future__ import annotations

import csv
import io
import struct
from pathlib import Path

import numpy as np

from ..exceptions import FormatError
from ..features import FeatureSet
from ..geometry import Matches

ACTIVATION_MAGIC = b"DSFA"
DESCRIPTOR_MAGIC = b"DSFD"
KIND_CODES = {"float": 0, "binary": 1}
KIND_NAMES = {v: k for k, v in KIND_CODES.items()}


def _fmt(x: float) -> str:
    return f"{x:.9g}"


# ---------------------------------------------------------------------------
# Netpbm maps


def _pnm_header(raw: bytes, path) -> tuple[str, int, int, int, int]:
    """Parse a P5/P6 header; returns (magic, width, height, maxval, offset)."""
    tokens: list[bytes] = []
    pos = 0
    n = len(raw)
    while len(tokens) < 4:
        while pos < n and raw[pos : pos + 1].isspace():
            pos += 1
        if pos < n and raw[pos : pos + 1] == b"#":
            while pos < n and raw[pos : pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < n and not raw[pos : pos + 1].isspace() and raw[pos : pos + 1] != b"#":
            pos += 1
        if start == pos:
            raise FormatError("truncated header", path, pos)
        tokens.append(raw[start:pos])
    if pos >= n or not raw[pos : pos + 1].isspace():
        raise FormatError("header must end with one whitespace byte", path, pos)
    pos += 1
    magic = tokens[0]
    if magic not in (b"P5", b"P6"):
        raise FormatError(f"bad magic {magic!r}, expected P5 or P6", path, 0)
    try:
        width, height, maxval = (int(t.decode("ascii")) for t in tokens[1:])
    except (UnicodeDecodeError, ValueError) as exc:
        raise FormatError("non-numeric header field", path, 0) from exc
    if width <= 0 or height <= 0:
        raise FormatError(f"invalid size {width}x{height}", path, 0)
    if maxval != 255:
        raise FormatError(f"unsupported maxval {maxval}; only 8-bit maps", path, 0)
    return magic.decode(), width, height, maxval, pos


def write_pgm(path, grid) -> None:
    arr = np.asarray(grid)
    if arr.ndim != 2:
        raise ValueError(f"PGM needs a 2-D grid, got shape {arr.shape}")
    if arr.size and (arr.min() < 0 or arr.max() > 255):
        raise ValueError("PGM cells must fit in one byte")
    h, w = arr.shape
    Path(path).write_bytes(f"P5\n{w} {h}\n255\n".encode() + arr.astype(np.uint8).tobytes())


def read_pgm(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    magic, w, h, _, pos = _pnm_header(raw, path)
    if magic != "P5":
        raise FormatError(f"expected a P5 map, got {magic}", path, 0)
    if len(raw) - pos != w * h:
        raise FormatError(f"expected {w * h} data bytes, found {len(raw) - pos}", path, pos)
    return np.frombuffer(raw, dtype=np.uint8, offset=pos).reshape(h, w).copy()


def write_ppm(path, image) -> None:
    """Write a (3, H, W) float image in [0, 1] as binary PPM."""
    img = np.asarray(image, dtype=np.float64)
    if img.ndim != 3 or img.shape[0] != 3:
        raise ValueError(f"PPM needs a (3, H, W) image, got shape {img.shape}")
    _, h, w = img.shape
    data = np.clip(np.rint(img * 255.0), 0, 255).astype(np.uint8).transpose(1, 2, 0)
    Path(path).write_bytes(f"P6\n{w} {h}\n255\n".encode() + data.tobytes())


def read_ppm(path) -> np.ndarray:
    """Read a binary PPM as a (3, H, W) float32 image scaled to [0, 1]."""
    raw = Path(path).read_bytes()
    magic, w, h, _, pos = _pnm_header(raw, path)
    if magic != "P6":
        raise FormatError(f"expected a P6 image, got {magic}", path, 0)
    if len(raw) - pos != 3 * w * h:
        raise FormatError(f"expected {3 * w * h} data bytes, found {len(raw) - pos}", path, pos)
    data = np.frombuffer(raw, dtype=np.uint8, offset=pos).reshape(h, w, 3)
    return (data.transpose(2, 0, 1).astype(np.float32) / 255.0).copy()


def write_categories(path, names: dict[int, str]) -> None:
    Path(path).write_text("".join(f"{i}\t{name}\n" for i, name in sorted(names.items())), encoding="utf-8")


def read_categories(path) -> dict[int, str]:
    names: dict[int, str] = {}
    for lineno, line in enumerate(_read_lines(path), 1):
        if not line.strip():
            continue
        parts = line.rstrip("\n").split("\t")
        if len(parts) != 2:
            raise FormatError("expected id<TAB>name", path, lineno)
        try:
            cid = int(parts[0])
        except ValueError as exc:
            raise FormatError(f"bad category id {parts[0]!r}", path, lineno) from exc
        if not 0 <= cid <= 255:
            raise FormatError(f"category id {cid} outside 0..255", path, lineno)
        names[cid] = parts[1]
    return names


# ---------------------------------------------------------------------------
# activation maps


def write_activation(path, amap) -> None:
    arr = np.asarray(amap, dtype="<f4")
    if arr.ndim != 2:
        raise ValueError(f"activation map must be 2-D, got shape {arr.shape}")
    h, w = arr.shape
    Path(path).write_bytes(ACTIVATION_MAGIC + struct.pack("<II", h, w) + np.ascontiguousarray(arr).tobytes())


def read_activation(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    if len(raw) < 12:
        raise FormatError(f"truncated header ({len(raw)} bytes)", path, 0)
    if raw[:4] != ACTIVATION_MAGIC:
        raise FormatError(f"bad magic {raw[:4]!r}, expected {ACTIVATION_MAGIC!r}", path, 0)
    h, w = struct.unpack("<II", raw[4:12])
    if h == 0 or w == 0:
        raise FormatError(f"empty map {h}x{w}", path, 4)
    if len(raw) - 12 != 4 * h * w:
        raise FormatError(f"{h}x{w} map needs {4 * h * w} data bytes, found {len(raw) - 12}", path, 12)
    return np.frombuffer(raw, dtype="<f4", offset=12).reshape(h, w).astype(np.float32)


# ---------------------------------------------------------------------------
# descriptors


def _packed_width(kind: str, dim: int) -> int:
    return 4 * dim if kind == "float" else (dim + 7) // 8


def write_descriptors(path, descriptors, kind: str = "float", dim: int | None = None) -> None:
    """Write an (n, dim) float32 matrix or an (n, ceil(dim/8)) packed bit matrix.

    For binary descriptors ``dim`` is the bit count; it defaults to
    eight times the packed width.
    """
    if kind not in KIND_CODES:
        raise ValueError(f"unknown descriptor kind {kind!r}")
    arr = np.asarray(descriptors)
    if arr.ndim != 2:
        raise ValueError(f"descriptors must be 2-D, got shape {arr.shape}")
    n = arr.shape[0]
    if kind == "float":
        dim = arr.shape[1]
        payload = np.ascontiguousarray(arr, dtype="<f4").tobytes()
    else:
        dim = arr.shape[1] * 8 if dim is None else dim
        if arr.shape[1] != (dim + 7) // 8:
            raise ValueError(f"{dim}-bit descriptors need {(dim + 7) // 8} bytes per row, got {arr.shape[1]}")
        payload = np.ascontiguousarray(arr, dtype=np.uint8).tobytes()
    header = DESCRIPTOR_MAGIC + struct.pack("<IIB", n, dim, KIND_CODES[kind])
    Path(path).write_bytes(header + payload)


def read_descriptors(path) -> tuple[np.ndarray, str, int]:
    """Returns (matrix, kind, dim)."""
    raw = Path(path).read_bytes()
    if len(raw) < 13:
        raise FormatError(f"truncated header ({len(raw)} bytes)", path, 0)
    if raw[:4] != DESCRIPTOR_MAGIC:
        raise FormatError(f"bad magic {raw[:4]!r}, expected {DESCRIPTOR_MAGIC!r}", path, 0)
    n, dim, code = struct.unpack("<IIB", raw[4:13])
    if code not in KIND_NAMES:
        raise FormatError(f"unknown descriptor kind code {code}", path, 12)
    kind = KIND_NAMES[code]
    if dim == 0:
        raise FormatError("descriptor dimension is zero", path, 8)
    row = _packed_width(kind, dim)
    if len(raw) - 13 != n * row:
        raise FormatError(f"{n} x {dim} {kind} descriptors need {n * row} bytes, found {len(raw) - 13}", path, 13)
    if kind == "float":
        data = np.frombuffer(raw, dtype="<f4", offset=13).reshape(n, dim).astype(np.float32)
    else:
        data = np.frombuffer(raw, dtype=np.uint8, offset=13).reshape(n, row).copy()
    return data, kind, dim


def write_dense_grid(path, grid) -> None:
    """(H, W, dim) dense descriptor grid stored row-major as H*W descriptors."""
    g = np.asarray(grid, dtype=np.float32)
    if g.ndim != 3:
        raise ValueError(f"dense grid must be (H, W, dim), got shape {g.shape}")
    write_descriptors(path, g.reshape(-1, g.shape[2]), "float")


def read_dense_grid(path, height: int, width: int) -> np.ndarray:
    data, kind, dim = read_descriptors(path)
    if kind != "float" or data.shape[0] != height * width:
        raise FormatError(f"expected {height * width} float rows for a {height}x{width} grid", path, 0)
    return data.reshape(height, width, dim)


# ---------------------------------------------------------------------------
# text formats


def _read_lines(path) -> list[str]:
    try:
        return Path(path).read_text(encoding="utf-8").splitlines()
    except UnicodeDecodeError as exc:
        raise FormatError("file is not UTF-8 text", path, None) from exc


def _parse_floats(parts, path, lineno) -> list[float]:
    try:
        vals = [float(p) for p in parts]
    except ValueError as exc:
        raise FormatError(f"non-numeric field in {parts!r}", path, lineno) from exc
    if not all(np.isfinite(vals)):
        raise FormatError("non-finite value", path, lineno)
    return vals


def write_keypoints(path, keypoints) -> None:
    kp = np.asarray(keypoints, dtype=np.float64).reshape(-1, 3)
    Path(path).write_text("".join(f"{_fmt(x)}\t{_fmt(y)}\t{_fmt(r)}\n" for x, y, r in kp), encoding="utf-8")


def read_keypoints(path) -> np.ndarray:
    rows = []
    for lineno, line in enumerate(_read_lines(path), 1):
        if not line.strip():
            continue
        parts = line.split("\t")
        if len(parts) != 3:
            raise FormatError(f"expected 3 tab-separated fields, got {len(parts)}", path, lineno)
        rows.append(_parse_floats(parts, path, lineno))
    return np.asarray(rows, dtype=np.float64).reshape(-1, 3)


def write_matches(path, matches: Matches) -> None:
    lines = []
    for k in range(len(matches)):
        vals = [*matches.p1[k], *matches.p2[k]]
        if matches.weights is not None:
            vals.append(matches.weights[k])
        lines.append(" ".join(_fmt(v) for v in vals) + "\n")
    Path(path).write_text("".join(lines), encoding="utf-8")


def read_matches(path) -> Matches:
    rows = []
    width = None
    for lineno, line in enumerate(_read_lines(path), 1):
        if not line.strip():
            continue
        parts = line.split()
        if len(parts) not in (4, 5):
            raise FormatError(f"expected 4 or 5 fields, got {len(parts)}", path, lineno)
        if width is None:
            width = len(parts)
        elif len(parts) != width:
            raise FormatError("weight column present on some lines only", path, lineno)
        rows.append(_parse_floats(parts, path, lineno))
    arr = np.asarray(rows, dtype=np.float64).reshape(-1, width or 4)
    weights = arr[:, 4] if width == 5 else None
    try:
        return Matches(arr[:, 0:2], arr[:, 2:4], weights)
    except ValueError as exc:
        raise FormatError(str(exc), path, None) from exc


def write_loops(path, pairs) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["id_a", "id_b"])
        writer.writerows([int(a), int(b)] for a, b in pairs)


def read_loops(path) -> list[tuple[int, int]]:
    pairs = []
    for lineno, line in enumerate(_read_lines(path), 1):
        if not line.strip() or (lineno == 1 and line.strip().replace(" ", "") == "id_a,id_b"):
            continue
        parts = line.split(",")
        if len(parts) != 2:
            raise FormatError("expected id_a,id_b", path, lineno)
        try:
            a, b = int(parts[0]), int(parts[1])
        except ValueError as exc:
            raise FormatError(f"non-integer id in {line!r}", path, lineno) from exc
        if a == b:
            raise FormatError(f"loop pair ({a}, {b}) links a frame to itself", path, lineno)
        pairs.append((a, b))
    return pairs


def write_trajectory(path, poses) -> None:
    arr = np.asarray(poses, dtype=np.float64).reshape(-1, 3, 4)
    Path(path).write_text(
        "".join(" ".join(f"{v:.12e}" for v in pose.reshape(-1)) + "\n" for pose in arr), encoding="utf-8"
    )


def read_trajectory(path) -> np.ndarray:
    """KITTI odometry poses: 12 floats per line, row-major 3x4."""
    rows = []
    for lineno, line in enumerate(_read_lines(path), 1):
        if not line.strip():
            continue
        parts = line.split()
        if len(parts) != 12:
            raise FormatError(f"pose line has {len(parts)} numbers, expected 12", path, lineno)
        rows.append(_parse_floats(parts, path, lineno))
    return np.asarray(rows, dtype=np.float64).reshape(-1, 3, 4)


def write_config(path, values: dict) -> None:
    Path(path).write_text("".join(f"{k}={_config_value(v)}\n" for k, v in values.items()), encoding="utf-8")


def _config_value(v) -> str:
    if isinstance(v, (list, tuple)):
        return ",".join(str(x) for x in v)
    return str(v)


def parse_config(text: str, path=None) -> dict[str, str]:
    values: dict[str, str] = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        stripped = line.split("#", 1)[0].strip()
        if not stripped:
            continue
        key, sep, value = stripped.partition("=")
        key = key.strip()
        if not sep or not key:
            raise FormatError(f"expected key=value, got {line!r}", path, lineno)
        if key in values:
            raise FormatError(f"duplicate key {key!r}", path, lineno)
        values[key] = value.strip()
    return values


def read_config(path) -> dict[str, str]:
    try:
        text = Path(path).read_text(encoding="utf-8")
    except UnicodeDecodeError as exc:
        raise FormatError("config is not UTF-8", path, None) from exc
    return parse_config(text, path)


# ---------------------------------------------------------------------------
# feature sets on disk: keypoint TSV + descriptor file


def write_feature_set(stem, fs: FeatureSet) -> None:
    stem = Path(stem)
    write_keypoints(stem.with_name(stem.name + ".kpts.tsv"), fs.keypoints)
    write_descriptors(stem.with_name(stem.name + ".desc.dsfd"), fs.descriptors, fs.kind, fs.dim)


def read_feature_set(stem, image_size: tuple[int, int]) -> FeatureSet:
    stem = Path(stem)
    kpts = read_keypoints(stem.with_name(stem.name + ".kpts.tsv"))
    desc, kind, dim = read_descriptors(stem.with_name(stem.name + ".desc.dsfd"))
    if len(kpts) != len(desc):
        raise FormatError(f"{len(kpts)} keypoints but {len(desc)} descriptors", stem, None)
    try:
        return FeatureSet(kpts, desc, kind, image_size, dim=dim)
    except ValueError as exc:
        raise FormatError(str(exc), stem, None) from exc


def csv_text(header: list[str], rows) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(header)
    writer.writerows(rows)
    return buf.getvalue()
