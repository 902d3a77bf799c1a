"""Seeded synthetic data with known ground truth.

Two generators live here. :func:`generate_scene` builds one two-view scene
with static points that satisfy the epipolar constraint exactly and dynamic
points that break it by a set margin. :func:`generate_corpus` renders a
whole image sequence with revisited places, moving and parked cars, trees,
semantic labels, dense descriptor grids and sparse features. The corpus is
what the trainer and the place-recognition pipeline run on.

Cameras use normalized image coordinates: each pixel axis maps linearly to
[-1, 1], so the normalized intrinsics are ``diag(2f/(W-1), 2f/(H-1), 1)``.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field, fields

import numpy as np

from ..features import FeatureSet, to_pixels
from ..geometry import Matches, fundamental_from_poses, symmetric_distances
from .prep import DEFAULT_CATEGORIES, DEFAULT_STATIC, LabelMap, stability_from_labels

CAT_ROAD, CAT_BUILDING, CAT_VEGETATION, CAT_SKY, CAT_CAR = 0, 2, 8, 10, 13


def rotation(yaw: float = 0.0, pitch: float = 0.0, roll: float = 0.0) -> np.ndarray:
    cy, sy = math.cos(yaw), math.sin(yaw)
    cp, sp = math.cos(pitch), math.sin(pitch)
    cr, sr = math.cos(roll), math.sin(roll)
    Ry = np.array([[cy, 0, sy], [0, 1, 0], [-sy, 0, cy]])
    Rx = np.array([[1, 0, 0], [0, cp, -sp], [0, sp, cp]])
    Rz = np.array([[cr, -sr, 0], [sr, cr, 0], [0, 0, 1]])
    return Ry @ Rx @ Rz


def normalized_intrinsics(image_size: tuple[int, int], fov_deg: float) -> np.ndarray:
    w, h = image_size
    f = (w / 2.0) / math.tan(math.radians(fov_deg) / 2.0)
    return np.diag([2.0 * f / (w - 1), 2.0 * f / (h - 1), 1.0])


def project(K: np.ndarray, X_cam: np.ndarray) -> np.ndarray:
    X_cam = np.asarray(X_cam, dtype=np.float64).reshape(-1, 3)
    p = X_cam @ K.T
    return p[:, :2] / p[:, 2:3]


def backproject(K: np.ndarray, uv: np.ndarray, depth: np.ndarray) -> np.ndarray:
    uv = np.asarray(uv, dtype=np.float64).reshape(-1, 2)
    rays = np.column_stack([uv, np.ones(len(uv))]) @ np.linalg.inv(K).T
    return rays * np.asarray(depth, dtype=np.float64).reshape(-1, 1)


class DescriptorField:
    """Smooth random map from 3-D positions to descriptor vectors."""

    def __init__(self, dim: int, rng: np.random.Generator, frequency: float = 3.0):
        self.omega = rng.normal(0.0, frequency, size=(dim, 3))
        self.phase = rng.uniform(0.0, 2 * math.pi, size=dim)

    def __call__(self, X: np.ndarray) -> np.ndarray:
        v = np.sin(np.asarray(X, dtype=np.float64).reshape(-1, 3) @ self.omega.T + self.phase)
        return v / np.linalg.norm(v, axis=1, keepdims=True)


def make_descriptors(
    base: np.ndarray, kind: str, noise: float, rng: np.random.Generator
) -> np.ndarray:
    """Per-view descriptors from noiseless ones.

    Float: additive isotropic Gaussian. Binary: sign bits of ``base`` packed
    to bytes, each bit flipped independently with probability ``noise``.
    """
    if kind == "float":
        return (base + rng.normal(0.0, noise, size=base.shape)).astype(np.float32)
    bits = base > 0
    flips = rng.random(bits.shape) < noise
    return np.packbits(bits ^ flips, axis=1)


# ---------------------------------------------------------------------------
# two-view scene


@dataclass
class SceneConfig:
    n_static: int = 60
    n_dynamic: int = 0
    noise: float = 0.0
    seed: int = 0
    image_size: tuple[int, int] = (64, 48)
    baseline: float = 1.0
    fov_deg: float = 60.0
    depth_range: tuple[float, float] = (4.0, 12.0)
    dynamic_displacement: float = 0.05
    dynamic_margin: float = 1e-2
    descriptor_kind: str = "float"
    descriptor_dim: int = 32
    descriptor_noise: float = 0.02
    mask_radius: int = 2


@dataclass
class SyntheticScene:
    R: np.ndarray
    t: np.ndarray
    K: np.ndarray
    static_points: np.ndarray
    dynamic_points: np.ndarray
    dynamic_displacement: np.ndarray
    features: tuple[FeatureSet, FeatureSet]
    matches: Matches
    inlier: np.ndarray
    F: np.ndarray
    masks: tuple[np.ndarray, np.ndarray]
    config: SceneConfig = field(repr=False, default_factory=SceneConfig)


def _sample_visible(rng, K, R, t, n, depth_range, margin=0.9, max_rounds=200):
    out = []
    for _ in range(max_rounds):
        uv = rng.uniform(-margin, margin, size=(4 * n, 2))
        depth = rng.uniform(*depth_range, size=4 * n)
        X = backproject(K, uv, depth)
        X2 = X @ R.T + t
        ok = X2[:, 2] > 0.5
        uv2 = np.full_like(uv, np.inf)
        uv2[ok] = project(K, X2[ok])
        ok &= np.all(np.abs(uv2) < 0.95, axis=1)
        out.extend(X[ok])
        if len(out) >= n:
            return np.asarray(out[:n])
    raise ValueError("could not place enough visible points; check the pose configuration")


def generate_scene(cfg: SceneConfig | None = None, **overrides) -> SyntheticScene:
    """Two calibrated views of a static point cloud plus independently moving points."""
    cfg = SceneConfig(**overrides) if cfg is None else cfg
    if cfg.n_static < 8:
        raise ValueError(f"n_static must be >= 8, got {cfg.n_static}")
    if not cfg.baseline > 0:
        raise ValueError("zero baseline: the two poses coincide and F is undefined")
    rng = np.random.default_rng(cfg.seed)
    size = tuple(cfg.image_size)
    K = normalized_intrinsics(size, cfg.fov_deg)
    R = rotation(*np.radians(rng.uniform([-5, -2, -2], [5, 2, 2])))
    direction = rng.normal(size=3) * np.array([1.0, 0.3, 0.5])
    t = cfg.baseline * direction / np.linalg.norm(direction)
    F = fundamental_from_poses(R, t, K)

    static = _sample_visible(rng, K, R, t, cfg.n_static, cfg.depth_range)
    extent = cfg.depth_range[1] - cfg.depth_range[0]
    dyn, disp = [], []
    attempts = 0
    while len(dyn) < cfg.n_dynamic:
        attempts += 1
        if attempts > 1000 * max(cfg.n_dynamic, 1):
            raise ValueError("could not place dynamic points violating the epipolar constraint")
        X = _sample_visible(rng, K, R, t, 1, cfg.depth_range)[0]
        d = rng.normal(size=3)
        d *= cfg.dynamic_displacement * extent / np.linalg.norm(d)
        X2 = (X + d) @ R.T + t
        if X2[2] <= 0.5:
            continue
        u2 = project(K, X2)[0]
        if np.any(np.abs(u2) >= 0.95):
            continue
        u1 = project(K, X)[0]
        dist = symmetric_distances(F, Matches(u1[None], u2[None]))[0]
        if dist <= cfg.dynamic_margin:
            continue
        dyn.append(X)
        disp.append(d)
    dyn = np.asarray(dyn).reshape(-1, 3)
    disp = np.asarray(disp).reshape(-1, 3)

    world1 = np.vstack([static, dyn])
    world2_cam = np.vstack([static, dyn + disp]) @ R.T + t
    uv1 = project(K, world1)
    uv2 = project(K, world2_cam)
    if cfg.noise > 0:
        px_scale = np.array([2.0 / (size[0] - 1), 2.0 / (size[1] - 1)])
        uv1 = uv1 + rng.normal(0.0, cfg.noise, uv1.shape) * px_scale
        uv2 = uv2 + rng.normal(0.0, cfg.noise, uv2.shape) * px_scale
    uv1 = np.clip(uv1, -1.0, 1.0)
    uv2 = np.clip(uv2, -1.0, 1.0)
    n = len(world1)
    inlier = np.r_[np.ones(len(static), bool), np.zeros(len(dyn), bool)]

    desc_field = DescriptorField(cfg.descriptor_dim, rng)
    base = desc_field(world1)
    responses = rng.uniform(0.1, 1.0, size=n)
    d1 = make_descriptors(base, cfg.descriptor_kind, cfg.descriptor_noise, rng)
    d2 = make_descriptors(base, cfg.descriptor_kind, cfg.descriptor_noise, rng)
    perm = rng.permutation(n)
    inv = np.argsort(perm)
    fs1 = FeatureSet(np.column_stack([to_pixels(uv1, size), responses]), d1, cfg.descriptor_kind, size, cfg.descriptor_dim)
    kp2 = np.column_stack([to_pixels(uv2, size), responses])
    fs2 = FeatureSet(kp2[perm], d2[perm], cfg.descriptor_kind, size, cfg.descriptor_dim)
    matches = Matches(uv1, uv2, idx1=np.arange(n), idx2=inv)

    masks = []
    for fs in (fs1, fs2):
        m = np.ones((size[1], size[0]), np.uint8)
        dyn_rows = fs.xy[~inlier] if fs is fs1 else fs.xy[inv[~inlier]]
        _stamp_disks(m, dyn_rows, cfg.mask_radius)
        masks.append(m)
    return SyntheticScene(R, t, K, static, dyn, disp, (fs1, fs2), matches, inlier, F, tuple(masks), cfg)


def _stamp_disks(mask: np.ndarray, centers: np.ndarray, radius: int) -> None:
    h, w = mask.shape
    yy, xx = np.mgrid[0:h, 0:w]
    for x, y in np.asarray(centers).reshape(-1, 2):
        mask[(xx - x) ** 2 + (yy - y) ** 2 <= radius**2] = 0


# ---------------------------------------------------------------------------
# image-sequence corpus


@dataclass
class CorpusConfig:
    """Layout of a synthetic driving sequence.

    Frames ``0 .. n_places-1`` visit one place each; every later frame
    revisits place ``frame - n_places``. The last ``held_out`` frames are
    reserved for evaluation.

    Besides buildings and road each place may hold a parked car and a tree.
    Both are physically static and place-specific, yet their semantic
    categories (car, vegetation) count as dynamic under the default
    partition. Moving cars are drawn from a small pool of shared templates,
    so their features recur across unrelated places.
    """

    n_frames: int = 200
    n_places: int = 100
    held_out: int = 40
    image_size: tuple[int, int] = (48, 48)
    fov_deg: float = 70.0
    seed: int = 42
    n_static: int = 40
    depth_range: tuple[float, float] = (4.0, 16.0)
    n_movers: int = 2
    mover_points: int = 14
    n_templates: int = 4
    parked_prob: float = 0.7
    parked_points: int = 12
    tree_prob: float = 0.8
    tree_points: int = 24
    descriptor_kind: str = "float"
    descriptor_dim: int = 32
    descriptor_noise: float = 0.05
    dense_dim: int = 8
    place_dense_scale: float = 0.2
    keypoint_noise: float = 0.1
    revisit_offset: float = 0.6
    revisit_yaw_deg: float = 4.0
    sky_fraction: float = 0.15

    def __post_init__(self):
        self.image_size = tuple(int(v) for v in self.image_size)
        self.depth_range = tuple(float(v) for v in self.depth_range)
        if self.n_places < 1 or self.n_places > self.n_frames:
            raise ValueError("n_places must lie in [1, n_frames]")
        if not 0 <= self.held_out < self.n_frames:
            raise ValueError("held_out must lie in [0, n_frames)")
        if self.descriptor_kind not in ("float", "binary"):
            raise ValueError(f"unknown descriptor kind {self.descriptor_kind!r}")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, values: dict) -> "CorpusConfig":
        out = {}
        for f in fields(cls):
            if f.name not in values:
                continue
            v = values[f.name]
            default = f.default
            if isinstance(default, tuple):
                parts = v.split(",") if isinstance(v, str) else list(v)
                out[f.name] = tuple(type(default[0])(p) for p in parts)
            else:
                out[f.name] = type(default)(v)
        return cls(**out)


KIND_STATIC, KIND_PARKED, KIND_MOVING, KIND_TREE = 0, 1, 2, 3


@dataclass
class Frame:
    id: int
    place: int
    image: np.ndarray  # (3, H, W) float32 in [0, 1]
    labels: LabelMap
    stability: np.ndarray  # semantic, from labels
    truth: np.ndarray  # physical stability: moving cars and sky are 0
    dense: np.ndarray  # (H, W, dense_dim)
    features: FeatureSet
    kind: np.ndarray  # per keypoint, one of the KIND_* codes
    pose: np.ndarray  # camera-to-world 3x4


@dataclass
class Corpus:
    config: CorpusConfig
    frames: list[Frame]
    loops: list[tuple[int, int]]
    categories: dict[int, str] = field(default_factory=lambda: dict(DEFAULT_CATEGORIES))

    @property
    def train_ids(self) -> list[int]:
        return list(range(self.config.n_frames - self.config.held_out))

    @property
    def held_out_ids(self) -> list[int]:
        return list(range(self.config.n_frames - self.config.held_out, self.config.n_frames))

    def train_loops(self) -> list[tuple[int, int]]:
        limit = self.config.n_frames - self.config.held_out
        return [(a, b) for a, b in self.loops if a < limit and b < limit]

    def trajectory(self) -> np.ndarray:
        return np.stack([f.pose for f in self.frames])


@dataclass
class _Fixture:
    """A static object at one place: parked car or tree."""

    kind: int
    label: int
    world: np.ndarray
    response: np.ndarray
    dense: np.ndarray


@dataclass
class _Place:
    R: np.ndarray
    C: np.ndarray
    static_world: np.ndarray
    static_response: np.ndarray
    fixtures: list[_Fixture]
    texture: np.ndarray
    dense_mean: np.ndarray
    dense_waves: np.ndarray


@dataclass
class _Template:
    local: np.ndarray
    response: np.ndarray
    dense_mean: np.ndarray


def _texture(params: np.ndarray, xx: np.ndarray, yy: np.ndarray) -> np.ndarray:
    out = np.zeros_like(xx, dtype=np.float64)
    for a, b, c, amp in params:
        out += amp * np.sin(a * xx + b * yy + c)
    return out


def _texture_stack(waves: np.ndarray, xx: np.ndarray, yy: np.ndarray) -> np.ndarray:
    a, b, c, amp = waves.T
    return amp * np.sin(xx[..., None] * a + yy[..., None] * b + c)


def _box_points(rng, n, size) -> np.ndarray:
    # corners first so the cluster is never planar, then interior points
    sx, sy, sz = size
    corners = np.array([[x, y, z] for x in (-0.5, 0.5) for y in (-0.5, 0.5) for z in (-0.5, 0.5)])
    pts = rng.uniform(-0.5, 0.5, size=(max(n - 8, 0), 3))
    return np.vstack([corners, pts])[:n] * np.array([sx, sy, sz])


class _CorpusBuilder:
    def __init__(self, cfg: CorpusConfig):
        self.cfg = cfg
        self.rng = np.random.default_rng(cfg.seed)
        self.size = cfg.image_size
        self.K = normalized_intrinsics(self.size, cfg.fov_deg)
        w, h = self.size
        self.yy, self.xx = np.mgrid[0:h, 0:w].astype(np.float64)
        self.sky_rows = int(round(cfg.sky_fraction * h))
        self.horizon = h // 2
        rng = self.rng
        self.field = DescriptorField(self.descriptor_bits, rng)
        self.sky_dense = rng.normal(0.0, 1.0, cfg.dense_dim)
        self.templates = [self._template() for _ in range(cfg.n_templates)]
        self.template_offsets = rng.normal(0.0, 50.0, size=(cfg.n_templates, 3))
        self.places = [self._place() for _ in range(cfg.n_places)]

    @property
    def descriptor_bits(self) -> int:
        return self.cfg.descriptor_dim

    # scene content ----------------------------------------------------------

    def _template(self) -> _Template:
        cfg, rng = self.cfg, self.rng
        return _Template(
            local=_box_points(rng, cfg.mover_points, (1.8, 1.2, 1.4)),
            response=rng.uniform(0.6, 1.0, cfg.mover_points),
            dense_mean=rng.normal(0.0, 1.0, cfg.dense_dim),
        )

    def _fixture(self, kind, label, n, size, uv_range, depth_range, R, C) -> _Fixture:
        rng, K = self.rng, self.K
        centre_uv = np.array([rng.uniform(*uv_range[0]), rng.uniform(*uv_range[1])])
        centre = backproject(K, centre_uv[None], [rng.uniform(*depth_range)])[0]
        local = _box_points(rng, n, size) @ rotation(yaw=rng.uniform(-0.5, 0.5)).T + centre
        return _Fixture(
            kind=kind,
            label=label,
            world=local @ R.T + C,
            response=rng.uniform(0.05, 0.6, n),
            dense=rng.normal(0.0, 1.0, self.cfg.dense_dim),
        )

    def _place(self) -> _Place:
        cfg, rng, K = self.cfg, self.rng, self.K
        R = rotation(yaw=math.radians(rng.normal(0, 10)))
        C = np.array([40.0 * len(getattr(self, "places", [])), 0.0, 0.0])
        n_static = max(8, int(round(cfg.n_static * rng.uniform(0.6, 1.4))))
        v_top = -1.0 + 2.0 * (self.sky_rows + 2) / (self.size[1] - 1)
        uv = np.column_stack([rng.uniform(-0.95, 0.95, n_static), rng.uniform(v_top, 0.95, n_static)])
        depth = rng.uniform(*cfg.depth_range, n_static)
        static_cam = backproject(K, uv, depth)
        fixtures = []
        if rng.random() < cfg.tree_prob:
            fixtures.append(
                self._fixture(KIND_TREE, CAT_VEGETATION, cfg.tree_points, (2.2, 2.8, 1.6),
                              ((-0.6, 0.6), (-0.45, -0.1)), (6.0, 10.0), R, C)
            )
        if rng.random() < cfg.parked_prob:
            fixtures.append(
                self._fixture(KIND_PARKED, CAT_CAR, cfg.parked_points, (1.6, 1.0, 1.2),
                              ((-0.6, 0.6), (0.3, 0.6)), (6.0, 9.0), R, C)
            )
        return _Place(
            R=R,
            C=C,
            static_world=static_cam @ R.T + C,
            static_response=rng.uniform(0.05, 0.6, n_static),
            fixtures=fixtures,
            texture=np.column_stack(
                [rng.uniform(0.1, 0.6, (4, 2)) * rng.choice([-1, 1], (4, 2)), rng.uniform(0, 6.3, 4), rng.uniform(0.05, 0.15, 4)]
            ),
            dense_mean=cfg.place_dense_scale * rng.normal(0.0, 1.0, cfg.dense_dim),
            dense_waves=np.column_stack(
                [rng.uniform(0.05, 0.3, (cfg.dense_dim, 2)), rng.uniform(0, 6.3, cfg.dense_dim),
                 np.full(cfg.dense_dim, 0.5 * cfg.place_dense_scale)]
            ),
        )

    # frames -------------------------------------------------------------------

    def _rect(self, uv) -> tuple[int, int, int, int]:
        w, h = self.size
        px = to_pixels(uv, self.size)
        x0, y0 = np.floor(px.min(axis=0) - 1).astype(int)
        x1, y1 = np.ceil(px.max(axis=0) + 1).astype(int)
        return max(x0, 0), max(y0, 0), min(x1, w - 1), min(y1, h - 1)

    def _paint(self, img, labels, dense, mask, kind, dense_vec):
        xx, yy = self.xx, self.yy
        if kind == KIND_PARKED:
            stripes = 0.08 * np.sign(np.sin(yy * math.pi / 2 + 0.5))
            img[0][mask] = 0.78
            img[1][mask] = (0.38 + stripes)[mask]
            img[2][mask] = 0.12
            labels[mask] = CAT_CAR
        elif kind == KIND_TREE:
            blotch = 0.12 * np.sign(np.sin(xx * 1.3 + 0.7) * np.sin(yy * 1.1 + 0.3))
            img[0][mask] = (0.18 + 0.5 * blotch)[mask]
            img[1][mask] = (0.5 + blotch)[mask]
            img[2][mask] = 0.15
            labels[mask] = CAT_VEGETATION
        else:
            stripes = 0.1 * np.sign(np.sin(xx * math.pi / 2 + 0.5))
            img[0][mask] = (0.92 + 0.5 * stripes)[mask]
            img[1][mask] = 0.1
            img[2][mask] = (0.12 + stripes)[mask]
            labels[mask] = CAT_CAR
        dense[mask] = dense_vec

    def frame(self, fid: int) -> Frame:
        cfg, rng, K = self.cfg, self.rng, self.K
        w, h = self.size
        place_id = fid if fid < cfg.n_places else fid - cfg.n_places
        place = self.places[place_id % cfg.n_places]
        revisit = fid >= cfg.n_places
        off = cfg.revisit_offset if revisit else 0.15
        yaw_sd = cfg.revisit_yaw_deg if revisit else 1.0
        R_wc = place.R @ rotation(yaw=math.radians(rng.normal(0, yaw_sd)))
        C = place.C + place.R @ np.array([rng.normal(0, off), 0.0, rng.normal(0, off)])

        def to_cam(Xw):
            return (np.asarray(Xw).reshape(-1, 3) - C) @ R_wc

        # moving cars, placed directly in the camera frame
        movers = []
        for _ in range(cfg.n_movers):
            t_id = int(rng.integers(cfg.n_templates))
            tpl = self.templates[t_id]
            centre_uv = np.array([rng.uniform(-0.65, 0.65), rng.uniform(0.1, 0.55)])
            centre = backproject(K, centre_uv[None], [rng.uniform(5.0, 9.0)])[0]
            Rm = rotation(yaw=rng.uniform(-math.pi, math.pi))
            movers.append((t_id, tpl.local @ Rm.T + centre))

        labels = np.full((h, w), CAT_ROAD, np.uint8)
        labels[: self.horizon] = CAT_BUILDING
        labels[: self.sky_rows] = CAT_SKY
        sky = self.yy < self.sky_rows

        img = np.empty((3, h, w))
        tex = _texture(place.texture, self.xx, self.yy)
        img[0] = 0.25 + 0.5 * tex
        img[1] = 0.5 + tex
        img[2] = 0.45 + 0.8 * tex
        road = self.yy >= self.horizon
        img[:, road] = np.array([0.3, 0.3, 0.33])[:, None] + 0.4 * tex[road]
        img[:, sky] = np.array([0.35, 0.6, 0.95])[:, None]

        dense = place.dense_mean + _texture_stack(place.dense_waves, self.xx, self.yy)
        dense[sky] = self.sky_dense

        # painter's order: fixtures, then moving cars on top
        fixture_masks = []
        for fx in place.fixtures:
            cam = to_cam(fx.world)
            m = np.zeros((h, w), bool)
            if np.all(cam[:, 2] > 0.5):
                x0, y0, x1, y1 = self._rect(project(K, cam))
                if x0 <= x1 and y0 <= y1:
                    m[y0 : y1 + 1, x0 : x1 + 1] = True
                    self._paint(img, labels, dense, m, fx.kind, fx.dense)
            fixture_masks.append((fx, cam, m))
        moving_mask = np.zeros((h, w), bool)
        mover_uv = []
        for t_id, pts in movers:
            uv = project(K, pts)
            mover_uv.append(uv)
            x0, y0, x1, y1 = self._rect(uv)
            m = np.zeros((h, w), bool)
            m[y0 : y1 + 1, x0 : x1 + 1] = True
            tpl = self.templates[t_id]
            self._paint(img, labels, dense, m, KIND_MOVING, tpl.dense_mean)
            dense[m] += 0.3 * np.sign(np.sin(self.xx[m] * math.pi / 2))[:, None]
            moving_mask |= m

        img += rng.normal(0.0, 0.02, img.shape)
        img = np.clip(img, 0.0, 1.0).astype(np.float32)
        dense = (dense + rng.normal(0.0, 0.05, dense.shape)).astype(np.float32)

        # keypoints: visible, in-bounds, unoccluded
        kp_rows, base_desc, kinds = [], [], []

        def emit(uv, responses, desc, kind, occluders):
            px = to_pixels(uv, self.size) + rng.normal(0.0, cfg.keypoint_noise, (len(uv), 2))
            inside = (px[:, 0] >= 0) & (px[:, 0] <= w - 1) & (px[:, 1] >= self.sky_rows) & (px[:, 1] <= h - 1)
            for k in np.flatnonzero(inside):
                xi, yi = int(round(px[k, 0])), int(round(px[k, 1]))
                if occluders[yi, xi]:
                    continue
                r = max(responses[k] + rng.normal(0.0, 0.02), 0.0)
                kp_rows.append((px[k, 0], px[k, 1], r))
                base_desc.append(desc[k])
                kinds.append(kind)

        static_cam = to_cam(place.static_world)
        front = static_cam[:, 2] > 0.5
        occluders = moving_mask.copy()
        for _, _, m in fixture_masks:
            occluders |= m
        emit(project(K, static_cam[front]), place.static_response[front],
             self.field(place.static_world[front]), KIND_STATIC, occluders)
        for n, (fx, cam, m) in enumerate(fixture_masks):
            if not m.any():
                continue
            # later fixtures and all moving cars are drawn over this one
            occ = moving_mask.copy()
            for _, _, later in fixture_masks[n + 1 :]:
                occ |= later
            emit(project(K, cam), fx.response, self.field(fx.world), fx.kind, occ)
        for (t_id, _), uv in zip(movers, mover_uv):
            tpl = self.templates[t_id]
            emit(uv, tpl.response, self.field(tpl.local + self.template_offsets[t_id]), KIND_MOVING,
                 np.zeros((h, w), bool))

        base = np.asarray(base_desc).reshape(len(kp_rows), -1)
        desc = make_descriptors(base, cfg.descriptor_kind, cfg.descriptor_noise, rng)
        kps = np.asarray(kp_rows, dtype=np.float64).reshape(-1, 3)
        kinds = np.asarray(kinds, dtype=np.int8)
        perm = rng.permutation(len(kps))
        features = FeatureSet(kps[perm], desc[perm], cfg.descriptor_kind, self.size, cfg.descriptor_dim)

        label_map = LabelMap(labels, dict(DEFAULT_CATEGORIES))
        truth = np.ones((h, w), np.uint8)
        truth[sky | moving_mask] = 0
        return Frame(
            id=fid,
            place=place_id,
            image=img,
            labels=label_map,
            stability=stability_from_labels(label_map, DEFAULT_STATIC),
            truth=truth,
            dense=dense,
            features=features,
            kind=kinds[perm],
            pose=np.hstack([R_wc, C[:, None]]),
        )


def generate_corpus(cfg: CorpusConfig | None = None, **overrides) -> Corpus:
    """Render a seeded image sequence with loop ground truth."""
    cfg = CorpusConfig(**overrides) if cfg is None else cfg
    builder = _CorpusBuilder(cfg)
    frames = [builder.frame(i) for i in range(cfg.n_frames)]
    loops = [(f, f - cfg.n_places) for f in range(cfg.n_places, cfg.n_frames)]
    return Corpus(cfg, frames, loops)
