"""Scene datasets: Blender-style synthetic, LLFF forward-facing, and procedural toy scenes."""
from __future__ import annotations

import hashlib
import json
import math
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
from PIL import Image

from .geometry import CameraModel, downscale_camera, look_at, rays_through
from .renderer import read_png, write_png
from .sr import bilinear_downsample

__all__ = [
    "View",
    "SceneDataset",
    "DatasetError",
    "load_blender",
    "load_llff",
    "ToySceneSpec",
    "ToyOracle",
    "generate_toy_scene",
    "downsample_dataset",
    "write_blender_layout",
    "load_dataset",
]

WHITE = (1.0, 1.0, 1.0)
BLENDER_BOX = ((-1.5, -1.5, -1.5), (1.5, 1.5, 1.5))
LLFF_NDC_BOX = ((-1.5, -1.67, -1.0), (1.5, 1.67, 1.0))


class DatasetError(RuntimeError):
    pass


@dataclass
class View:
    image: np.ndarray  # [H, W, 3] float32 in [0, 1]
    camera: CameraModel
    name: str = ""


@dataclass
class SceneDataset:
    kind: str
    splits: dict
    background: tuple = WHITE
    bounding_box: tuple = BLENDER_BOX
    ndc: bool = False

    def __post_init__(self):
        for name, views in self.splits.items():
            shapes = {v.image.shape for v in views}
            if len(shapes) > 1:
                raise DatasetError(f"split {name!r} mixes resolutions {sorted(shapes)}")

    def __getitem__(self, split) -> list:
        return self.splits[split]

    def resolution(self, split="train"):
        v = self.splits[split][0]
        return v.image.shape[0], v.image.shape[1]

    def fingerprint(self) -> str:
        h = hashlib.sha256()
        for name in sorted(self.splits):
            for v in self.splits[name]:
                h.update(name.encode())
                h.update(np.ascontiguousarray(v.camera.pose, dtype=np.float64).tobytes())
                h.update(np.asarray([v.camera.focal_x, v.camera.focal_y, v.camera.near, v.camera.far]).tobytes())
                h.update(hashlib.sha256(np.ascontiguousarray(v.image).tobytes()).digest())
        return h.hexdigest()


# ---------------------------------------------------------------- blender

def _read_json(path):
    try:
        return json.loads(Path(path).read_text())
    except FileNotFoundError:
        raise DatasetError(f"missing file: {path}") from None
    except json.JSONDecodeError as exc:
        raise DatasetError(f"malformed JSON in {path}: {exc}") from None


def _resolve_image(root, file_path):
    p = (root / file_path).resolve()
    for cand in (p, p.with_name(p.name + ".png")):
        if cand.is_file():
            return cand
    raise DatasetError(f"missing image {file_path!r} (looked for {p} and {p}.png)")


def load_blender(root_path, background=WHITE, splits=("train", "val", "test"), near=2.0, far=6.0,
                 bounding_box=BLENDER_BOX) -> SceneDataset:
    root = Path(root_path)
    out = {}
    for split in splits:
        meta_path = root / f"transforms_{split}.json"
        meta = _read_json(meta_path)
        try:
            fov = float(meta["camera_angle_x"])
            frames = meta["frames"]
        except (KeyError, TypeError, ValueError) as exc:
            raise DatasetError(f"{meta_path}: malformed record ({exc!r})") from None
        views = []
        for i, frame in enumerate(frames):
            try:
                pose = np.asarray(frame["transform_matrix"], dtype=np.float64)
                rel = frame["file_path"]
            except (KeyError, TypeError, ValueError) as exc:
                raise DatasetError(f"{meta_path}: frame {i} malformed ({exc!r})") from None
            if pose.shape != (4, 4):
                raise DatasetError(f"{meta_path}: frame {i} transform_matrix is not 4x4")
            img = read_png(_resolve_image(root, rel), background=background).astype(np.float32)
            h, w = img.shape[:2]
            focal = 0.5 * w / math.tan(0.5 * fov)
            try:
                cam = CameraModel(w, h, focal, focal, w / 2.0, h / 2.0, pose, near, far)
            except ValueError as exc:
                raise DatasetError(f"{meta_path}: frame {i}: {exc}") from None
            views.append(View(img, cam, str(rel)))
        out[split] = views
    return SceneDataset("blender", out, tuple(background), bounding_box)


def write_blender_layout(dataset: SceneDataset, root_path) -> Path:
    """Persist any dataset as transforms_*.json + PNGs (8-bit quantised)."""
    root = Path(root_path)
    root.mkdir(parents=True, exist_ok=True)
    for split, views in dataset.splits.items():
        frames = []
        for i, v in enumerate(views):
            rel = f"{split}/r_{i}"
            write_png(root / f"{rel}.png", v.image)
            frames.append({"file_path": f"./{rel}", "transform_matrix": v.camera.pose.tolist()})
        cam = views[0].camera if views else None
        fov = 2.0 * math.atan(0.5 * cam.width / cam.focal_x) if cam else 0.0
        (root / f"transforms_{split}.json").write_text(
            json.dumps({"camera_angle_x": fov, "frames": frames}, indent=2)
        )
    return root


# ---------------------------------------------------------------- llff

def _normalize(v):
    return v / np.linalg.norm(v)


def _view_matrix(z, up, pos):
    vec2 = _normalize(z)
    vec0 = _normalize(np.cross(up, vec2))
    vec1 = _normalize(np.cross(vec2, vec0))
    return np.stack([vec0, vec1, vec2, pos], 1)


def _recenter(poses):
    """Express 3x4 c2w poses relative to their average pose."""
    center = poses[:, :3, 3].mean(0)
    avg = _view_matrix(poses[:, :3, 2].sum(0), poses[:, :3, 1].sum(0), center)
    avg4 = np.vstack([avg, [0, 0, 0, 1.0]])
    full = np.concatenate([poses, np.tile([[[0, 0, 0, 1.0]]], (len(poses), 1, 1))], 1)
    return (np.linalg.inv(avg4) @ full)[:, :3, :4]


def _orthonormalize(rot):
    u, _, vt = np.linalg.svd(rot)
    r = u @ vt
    if np.linalg.det(r) < 0:
        u[:, -1] *= -1
        r = u @ vt
    return r


def load_llff(root_path, downsample: int = 4, ndc: bool = True, bd_factor: float = 0.75,
              holdout: int = 8) -> SceneDataset:
    root = Path(root_path)
    pb_path = root / "poses_bounds.npy"
    if not pb_path.is_file():
        raise DatasetError(f"missing file: {pb_path}")
    arr = np.load(pb_path)
    if arr.ndim != 2 or arr.shape[1] != 17:
        raise DatasetError(f"{pb_path}: expected N x 17 rows, got shape {arr.shape}")
    poses = arr[:, :15].reshape(-1, 3, 5)
    bounds = arr[:, 15:17].astype(np.float64)
    if (bounds[:, 0] >= bounds[:, 1]).any() or (bounds[:, 0] <= 0).any():
        raise DatasetError(f"{pb_path}: every row needs 0 < near < far")

    img_dir = root / f"images_{downsample}"
    resize = False
    if not img_dir.is_dir():
        img_dir, resize = root / "images", downsample != 1
    files = sorted(p for p in img_dir.iterdir() if p.suffix.lower() in (".png", ".jpg", ".jpeg")) \
        if img_dir.is_dir() else []
    if len(files) != len(poses):
        raise DatasetError(f"{img_dir}: {len(files)} images for {len(poses)} pose rows")

    h0, w0, f0 = poses[0, :, 4]
    h, w, focal = int(round(h0 / downsample)), int(round(w0 / downsample)), f0 / downsample
    # stored axes are (down, right, back); convert to (right, up, back)
    rot = np.concatenate([poses[:, :, 1:2], -poses[:, :, 0:1], poses[:, :, 2:4]], 2)
    scale = 1.0 / (bounds.min() * bd_factor) if bd_factor else 1.0
    rot[:, :3, 3] *= scale
    bounds = bounds * scale
    rot = _recenter(rot)

    views = []
    for i, path in enumerate(files):
        with Image.open(path) as im:
            im = im.convert("RGB")
            if resize:
                im = im.resize((w, h), Image.BILINEAR)
            img = np.asarray(im, dtype=np.float32) / 255.0
        if img.shape[:2] != (h, w):
            raise DatasetError(f"{path}: size {img.shape[1]}x{img.shape[0]} != expected {w}x{h}")
        pose = np.eye(4)
        pose[:3, :3] = _orthonormalize(rot[i, :3, :3])
        pose[:3, 3] = rot[i, :3, 3]
        cam = CameraModel(w, h, focal, focal, w / 2.0, h / 2.0, pose, bounds[i, 0] * 0.9, bounds[i, 1])
        views.append(View(img, cam, path.name))
    test = [v for i, v in enumerate(views) if i % holdout == 0]
    train = [v for i, v in enumerate(views) if i % holdout != 0]
    box = LLFF_NDC_BOX if ndc else BLENDER_BOX
    return SceneDataset("llff", {"train": train, "val": list(test), "test": test}, (0.0, 0.0, 0.0), box, ndc)


# ---------------------------------------------------------------- toy scenes

def _default_primitives():
    return [
        {"type": "sphere", "center": [0.0, 0.0, 0.0], "radius": 0.6, "albedo": [0.85, 0.35, 0.25],
         "checker": {"period": 0.2, "albedo": [0.95, 0.8, 0.3]}},
        {"type": "box", "min": [-1.0, -1.0, -0.9], "max": [1.0, 1.0, -0.7], "albedo": [0.3, 0.5, 0.8],
         "checker": {"period": 0.25, "albedo": [0.85, 0.9, 0.95]}},
        {"type": "sphere", "center": [0.65, -0.55, -0.4], "radius": 0.3, "albedo": [0.3, 0.75, 0.35]},
        {"type": "box", "min": [-0.95, 0.3, -0.7], "max": [-0.45, 0.8, 0.1], "albedo": [0.7, 0.6, 0.85],
         "checker": {"period": 0.125, "albedo": [0.35, 0.25, 0.55]}},
    ]


@dataclass
class ToySceneSpec:
    primitives: list = field(default_factory=_default_primitives)
    light_direction: tuple = (0.4, -0.5, 0.75)
    ambient: float = 0.35
    image_size: int = 200
    fov_x: float = 0.6
    ring_radius: float = 4.0
    ring_height: float = 2.0
    n_train: int = 20
    n_val: int = 1
    n_test: int = 5
    supersample: int = 2
    near: float = 2.0
    far: float = 6.0
    bounding_box: tuple = ((-1.05, -1.05, -0.95), (1.05, 1.05, 0.65))
    background: tuple = WHITE
    seed: int = 0

    def __post_init__(self):
        for i, prim in enumerate(self.primitives):
            kind = prim.get("type")
            if kind == "sphere":
                if not prim.get("radius", 0) > 0:
                    raise ValueError(f"primitive {i}: sphere radius must be > 0")
            elif kind == "box":
                if not (np.asarray(prim["max"]) > np.asarray(prim["min"])).all():
                    raise ValueError(f"primitive {i}: box max must exceed min on every axis")
            else:
                raise ValueError(f"primitive {i}: unknown type {kind!r}")
        if self.supersample < 1:
            raise ValueError("supersample must be >= 1")

    def to_dict(self):
        from dataclasses import asdict
        return asdict(self)


class ToyOracle:
    """Exact ray tracer for a :class:`ToySceneSpec` (Lambert shading, no shadows)."""

    def __init__(self, spec: ToySceneSpec):
        self.spec = spec
        self.light = _normalize(np.asarray(spec.light_direction, dtype=np.float64))

    def trace(self, origins, directions):
        """Shade flat rays ``[M, 3]``; misses return the background."""
        m = origins.shape[0]
        best_t = np.full(m, np.inf)
        normal = np.zeros((m, 3))
        albedo = np.tile(np.asarray(self.spec.background, dtype=np.float64), (m, 1))
        hit_any = np.zeros(m, dtype=bool)
        for prim in self.spec.primitives:
            if prim["type"] == "sphere":
                t, n = _hit_sphere(origins, directions, np.asarray(prim["center"], float), float(prim["radius"]))
            else:
                t, n = _hit_box(origins, directions, np.asarray(prim["min"], float), np.asarray(prim["max"], float))
            closer = t < best_t
            if not closer.any():
                continue
            best_t[closer] = t[closer]
            normal[closer] = n[closer]
            pts = origins[closer] + t[closer, None] * directions[closer]
            albedo[closer] = _albedo(prim, pts)
            hit_any |= closer
        shade = self.spec.ambient + (1.0 - self.spec.ambient) * np.clip(normal @ self.light, 0.0, None)
        color = np.where(hit_any[:, None], albedo * shade[:, None], albedo)
        return np.clip(color, 0.0, 1.0), best_t

    def render(self, camera: CameraModel) -> np.ndarray:
        s = self.spec.supersample
        h, w = camera.height, camera.width
        sub = (np.arange(s) + 0.5) / s
        acc = np.zeros((h, w, 3))
        cols, rows = np.meshgrid(np.arange(w, dtype=np.float64), np.arange(h, dtype=np.float64), indexing="xy")
        for dy in sub:
            for dx in sub:
                rays = rays_through(camera, cols + dx, rows + dy)
                rgb, _ = self.trace(rays.origins.reshape(-1, 3), rays.directions.reshape(-1, 3))
                acc += rgb.reshape(h, w, 3)
        return (acc / (s * s)).astype(np.float32)

    def depth(self, camera: CameraModel) -> np.ndarray:
        """Distance to the first hit along each pixel-center ray (inf for misses)."""
        rays = rays_through(camera, *np.meshgrid(np.arange(camera.width) + 0.5, np.arange(camera.height) + 0.5))
        _, t = self.trace(rays.origins.reshape(-1, 3), rays.directions.reshape(-1, 3))
        return t.reshape(camera.height, camera.width)


def _hit_sphere(o, d, center, radius):
    oc = o - center
    b = np.einsum("ij,ij->i", oc, d)
    c = np.einsum("ij,ij->i", oc, oc) - radius * radius
    disc = b * b - c
    hit = disc >= 0
    sq = np.sqrt(np.where(hit, disc, 0.0))
    t0, t1 = -b - sq, -b + sq
    t = np.where(t0 > 1e-9, t0, t1)
    t = np.where(hit & (t > 1e-9), t, np.inf)
    pts = o + np.where(np.isfinite(t), t, 0.0)[:, None] * d
    return t, (pts - center) / radius


def _hit_box(o, d, lo, hi):
    safe = np.where(np.abs(d) < 1e-12, 1e-12, d)
    ta, tb = (lo - o) / safe, (hi - o) / safe
    tmin, tmax = np.minimum(ta, tb), np.maximum(ta, tb)
    t_in, t_out = tmin.max(axis=1), tmax.min(axis=1)
    hit = (t_out >= t_in) & (t_out > 1e-9)
    t = np.where(t_in > 1e-9, t_in, t_out)
    t = np.where(hit, t, np.inf)
    axis = np.where(t_in > 1e-9, tmin.argmax(axis=1), tmax.argmin(axis=1))
    normal = np.zeros_like(o)
    rows = np.arange(len(o))
    normal[rows, axis] = -np.sign(safe[rows, axis])
    return t, normal


def _albedo(prim, pts):
    base = np.asarray(prim["albedo"], dtype=np.float64)
    checker = prim.get("checker")
    if not checker:
        return np.broadcast_to(base, pts.shape)
    period = float(checker["period"])
    parity = np.floor(pts / period + 1e-7).astype(int).sum(axis=1) % 2
    alt = np.asarray(checker["albedo"], dtype=np.float64)
    return np.where(parity[:, None] == 1, alt, base)


def _ring_cameras(spec, count, phase, rng):
    cams = []
    for k in range(count):
        az = 2.0 * math.pi * (k + phase) / max(count, 1) + rng.uniform(-0.05, 0.05)
        height = spec.ring_height + rng.uniform(-0.2, 0.2)
        eye = (spec.ring_radius * math.cos(az), spec.ring_radius * math.sin(az), height)
        cams.append(CameraModel.from_fov(spec.image_size, spec.image_size, spec.fov_x, look_at(eye),
                                         spec.near, spec.far))
    return cams


def generate_toy_scene(spec: ToySceneSpec | None = None):
    """Render a toy scene on a camera ring; returns ``(dataset, oracle)``."""
    spec = spec or ToySceneSpec()
    oracle = ToyOracle(spec)
    rng = np.random.default_rng(spec.seed)
    splits = {
        "train": _ring_cameras(spec, spec.n_train, 0.0, rng),
        "val": _ring_cameras(spec, spec.n_val, 0.37, rng),
        "test": _ring_cameras(spec, spec.n_test, 0.5, rng),
    }
    out = {name: [View(oracle.render(c), c, f"{name}_{i:03d}") for i, c in enumerate(cams)]
           for name, cams in splits.items()}
    ds = SceneDataset("toy", out, tuple(spec.background), tuple(map(tuple, spec.bounding_box)))
    return ds, oracle


def downsample_dataset(dataset: SceneDataset, ratio: int) -> SceneDataset:
    if ratio == 1:
        return dataset
    splits = {
        name: [View(bilinear_downsample(v.image, ratio), downscale_camera(v.camera, ratio), v.name) for v in views]
        for name, views in dataset.splits.items()
    }
    return replace(dataset, splits=splits)


def load_dataset(kind: str, path=None, **kwargs):
    if kind == "blender":
        return load_blender(path, **kwargs)
    if kind == "llff":
        return load_llff(path, **kwargs)
    if kind == "toy":
        return generate_toy_scene(ToySceneSpec(**kwargs))[0]
    raise DatasetError(f"unknown dataset kind {kind!r}")
