"""Reduced-depth U-Net emitting a one-channel stability map.

Encoder levels apply ``convs_per_block`` 3x3 conv+ReLU layers and a 2x2 max
pool, doubling the width each level. The decoder mirrors it with nearest
upsampling and skip concatenation, and a 1x1 conv + sigmoid head produces a
map the size of the input.
"""

from __future__ import annotations

import io
import math
import struct
from dataclasses import asdict, dataclass, fields
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .exceptions import FormatError

WEIGHT_MAGIC = b"DSFW"
WEIGHT_VERSION = 1
INPUT_NORMALIZATION = "scale01"


@dataclass(frozen=True)
class NetworkConfig:
    input_channels: int = 3
    downsample_count: int = 2
    base_channels: int = 16
    convs_per_block: int = 2
    seed: int = 0

    def __post_init__(self):
        if self.input_channels < 1:
            raise ValueError(f"input_channels must be >= 1, got {self.input_channels}")
        if self.downsample_count < 1:
            raise ValueError(f"downsample_count must be >= 1, got {self.downsample_count}")
        if self.base_channels < 1:
            raise ValueError(f"base_channels must be >= 1, got {self.base_channels}")
        if self.convs_per_block < 1:
            raise ValueError(f"convs_per_block must be >= 1, got {self.convs_per_block}")

    @property
    def divisor(self) -> int:
        return 2**self.downsample_count

    def encoder_widths(self) -> list[int]:
        return [self.base_channels * 2**i for i in range(self.downsample_count)]

    def bottleneck_width(self) -> int:
        return self.base_channels * 2**self.downsample_count

    def to_dict(self) -> dict[str, int]:
        return asdict(self)

    @classmethod
    def from_dict(cls, values: dict) -> "NetworkConfig":
        known = {f.name for f in fields(cls)}
        return cls(**{k: int(v) for k, v in values.items() if k in known})


def _xavier(rng: np.random.Generator, shape: tuple[int, ...]) -> np.ndarray:
    out_c, in_c, kh, kw = shape
    limit = np.sqrt(6.0 / (in_c * kh * kw + out_c * kh * kw))
    return rng.uniform(-limit, limit, size=shape).astype(np.float32)


class StabilityNet:
    """Parameter container plus forward pass.

    Inference does not mutate the model, so concurrent ``forward`` calls are
    safe; training must hold the model exclusively.
    """

    def __init__(self, config: NetworkConfig):
        self.config = config
        self.params: dict[str, Tensor] = {}
        rng = np.random.default_rng(config.seed)

        def add_conv(name, in_c, out_c, k=3):
            self.params[f"{name}.weight"] = Tensor(_xavier(rng, (out_c, in_c, k, k)), True, f"{name}.weight")
            self.params[f"{name}.bias"] = Tensor(np.zeros(out_c, np.float32), True, f"{name}.bias")

        in_c = config.input_channels
        for level, width in enumerate(config.encoder_widths()):
            for j in range(config.convs_per_block):
                add_conv(f"enc{level}.conv{j}", in_c if j == 0 else width, width)
            in_c = width
        mid = config.bottleneck_width()
        for j in range(config.convs_per_block):
            add_conv(f"mid.conv{j}", in_c if j == 0 else mid, mid)
        below = mid
        for level in reversed(range(config.downsample_count)):
            width = config.encoder_widths()[level]
            for j in range(config.convs_per_block):
                add_conv(f"dec{level}.conv{j}", below + width if j == 0 else width, width)
            below = width
        add_conv("head", below, 1, k=1)

    def parameters(self) -> list[Tensor]:
        return list(self.params.values())

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    def __call__(self, x: Tensor) -> Tensor:
        return self.forward_tensor(x)

    def _block(self, name: str, x: Tensor) -> Tensor:
        for j in range(self.config.convs_per_block):
            x = ad.relu(ad.conv2d(x, self.params[f"{name}.conv{j}.weight"], self.params[f"{name}.conv{j}.bias"]))
        return x

    def forward_tensor(self, x: Tensor) -> Tensor:
        """Differentiable forward pass on a (B, C, H, W) tensor."""
        cfg = self.config
        if x.ndim != 4 or x.shape[1] != cfg.input_channels:
            raise ValueError(
                f"expected input of shape (B, {cfg.input_channels}, H, W), got {x.shape}"
            )
        h, w = x.shape[2:]
        if h % cfg.divisor or w % cfg.divisor:
            pad_h = (-h) % cfg.divisor
            pad_w = (-w) % cfg.divisor
            raise ValueError(
                f"input {h}x{w} is not divisible by {cfg.divisor}; "
                f"pad by {pad_h} rows and {pad_w} columns"
            )
        skips = []
        for level in range(cfg.downsample_count):
            x = self._block(f"enc{level}", x)
            skips.append(x)
            x = ad.pool_down(x)
        x = self._block("mid", x)
        for level in reversed(range(cfg.downsample_count)):
            x = ad.concat_channels(ad.upsample(x), skips[level])
            x = self._block(f"dec{level}", x)
        x = ad.conv2d(x, self.params["head.weight"], self.params["head.bias"])
        return ad.sigmoid(x)

    def predict(self, image: np.ndarray) -> np.ndarray:
        """Activation map (H, W) for one (C, H, W) image with values in [0, 1]."""
        return forward(self, image)


def build_model(config: NetworkConfig | None = None, **overrides) -> StabilityNet:
    if config is None:
        config = NetworkConfig(**overrides)
    elif overrides:
        config = NetworkConfig(**{**config.to_dict(), **overrides})
    return StabilityNet(config)


def forward(model: StabilityNet, image) -> np.ndarray:
    """Run one image through ``model`` and return its (H, W) activation map."""
    arr = image.data if isinstance(image, Tensor) else np.asarray(image, dtype=np.float32)
    if arr.ndim == 3:
        arr = arr[None]
    if arr.ndim != 4 or arr.shape[0] != 1:
        raise ValueError(f"forward expects one image shaped (C, H, W) or (1, C, H, W), got {arr.shape}")
    out = model.forward_tensor(Tensor(arr))
    return out.data[0, 0].astype(np.float32, copy=False)


def bilinear_sample(amap: np.ndarray, x: float, y: float) -> float:
    """Bilinear interpolation of ``amap`` at pixel position (x, y)."""
    h, w = amap.shape
    if not (0 <= x <= w - 1 and 0 <= y <= h - 1):
        raise ValueError(f"point ({x}, {y}) outside the {w}x{h} map")
    return float(ad.sample_bilinear(Tensor(amap), [x], [y]).data[0])


def bilinear_sample_many(amap: np.ndarray, xs, ys) -> np.ndarray:
    return ad.sample_bilinear(Tensor(amap), xs, ys).data.astype(np.float64)


# ---------------------------------------------------------------------------
# weight files


def save_weights(model: StabilityNet, path, extra: dict | None = None) -> None:
    buf = io.BytesIO()
    buf.write(WEIGHT_MAGIC)
    buf.write(struct.pack("<HH", WEIGHT_VERSION, len(model.params)))
    for name, p in model.params.items():
        encoded = name.encode("utf-8")
        data = np.ascontiguousarray(p.data, dtype="<f4")
        buf.write(struct.pack("<H", len(encoded)))
        buf.write(encoded)
        buf.write(struct.pack("<B", data.ndim))
        buf.write(struct.pack(f"<{data.ndim}I", *data.shape))
        buf.write(data.tobytes())
    meta = {**model.config.to_dict(), "normalization": INPUT_NORMALIZATION, **(extra or {})}
    text = "".join(f"{k}={v}\n" for k, v in meta.items()).encode("utf-8")
    buf.write(struct.pack("<I", len(text)))
    buf.write(text)
    Path(path).write_bytes(buf.getvalue())


def _take(raw: bytes, pos: int, n: int, path) -> tuple[bytes, int]:
    if pos + n > len(raw):
        raise FormatError(f"truncated: need {n} bytes, {len(raw) - pos} left", path, pos)
    return raw[pos : pos + n], pos + n


def read_weight_file(path) -> tuple[dict[str, np.ndarray], dict[str, str]]:
    """Parse a weight file into (name -> array, metadata)."""
    raw = Path(path).read_bytes()
    magic, pos = _take(raw, 0, 4, path)
    if magic != WEIGHT_MAGIC:
        raise FormatError(f"bad magic {magic!r}, expected {WEIGHT_MAGIC!r}", path, 0)
    head, pos = _take(raw, pos, 4, path)
    version, count = struct.unpack("<HH", head)
    if version != WEIGHT_VERSION:
        raise FormatError(f"unsupported version {version}", path, 4)
    arrays: dict[str, np.ndarray] = {}
    for _ in range(count):
        start = pos
        chunk, pos = _take(raw, pos, 2, path)
        (name_len,) = struct.unpack("<H", chunk)
        chunk, pos = _take(raw, pos, name_len, path)
        try:
            name = chunk.decode("utf-8")
        except UnicodeDecodeError as exc:
            raise FormatError("layer name is not UTF-8", path, start) from exc
        chunk, pos = _take(raw, pos, 1, path)
        rank = chunk[0]
        if not 1 <= rank <= 4:
            raise FormatError(f"layer {name!r} has invalid rank {rank}", path, pos - 1)
        chunk, pos = _take(raw, pos, 4 * rank, path)
        shape = struct.unpack(f"<{rank}I", chunk)
        nbytes = 4 * math.prod(shape)
        chunk, pos = _take(raw, pos, nbytes, path)
        if name in arrays:
            raise FormatError(f"duplicate layer {name!r}", path, start)
        arrays[name] = np.frombuffer(chunk, dtype="<f4").reshape(shape).astype(np.float32)
    chunk, pos = _take(raw, pos, 4, path)
    (text_len,) = struct.unpack("<I", chunk)
    chunk, pos = _take(raw, pos, text_len, path)
    if pos != len(raw):
        raise FormatError(f"{len(raw) - pos} trailing bytes", path, pos)
    try:
        text = chunk.decode("utf-8")
    except UnicodeDecodeError as exc:
        raise FormatError("config block is not UTF-8", path, pos - text_len) from exc
    meta: dict[str, str] = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        key, sep, value = line.partition("=")
        if not sep or not key:
            raise FormatError(f"config line {lineno} is not key=value", path, pos - text_len)
        meta[key] = value
    return arrays, meta


def load_weights(path, config: NetworkConfig | None = None) -> StabilityNet:
    """Rebuild a model from a weight file.

    With ``config`` given, the stored tensors must fit that architecture;
    otherwise the architecture echoed in the file is used.
    """
    arrays, meta = read_weight_file(path)
    if config is None:
        try:
            config = NetworkConfig.from_dict(meta)
        except (TypeError, ValueError) as exc:
            raise FormatError(f"bad network config block: {exc}", path) from exc
    model = StabilityNet(config)
    missing = [n for n in model.params if n not in arrays]
    if missing:
        raise ValueError(f"weight file {path} lacks layer {missing[0]!r}")
    extra = [n for n in arrays if n not in model.params]
    if extra:
        raise ValueError(f"weight file {path} has unexpected layer {extra[0]!r}")
    for name, p in model.params.items():
        if arrays[name].shape != p.shape:
            raise ValueError(
                f"shape mismatch in layer {name!r}: file has {arrays[name].shape}, model expects {p.shape}"
            )
        p.data = arrays[name].copy()
    return model
