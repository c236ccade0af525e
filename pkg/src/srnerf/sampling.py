"""Patch selection and LR/HR patch pairs for training the render+SR pipeline."""
from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from .geometry import CameraModel, RayBundle, rays_through
from .sr import bilinear_downsample

__all__ = [
    "PatchSpec",
    "PatchPair",
    "grid_patches",
    "random_patch",
    "make_patch_pair",
    "apply_transform",
    "augment_pair",
    "sample_bilinear",
]

MAX_ROTATION_DEG = 45.0


@dataclass(frozen=True)
class PatchSpec:
    origin: tuple  # (row, col) in HR pixels
    size: int
    ratio: int = 1
    transform: dict | None = None

    def __post_init__(self):
        if self.size < 1 or self.ratio < 1:
            raise ValueError("patch size and ratio must be positive")
        if self.size % self.ratio:
            raise ValueError(f"patch size {self.size} not divisible by ratio {self.ratio}")
        if min(self.origin) < 0:
            raise ValueError(f"negative patch origin {self.origin}")

    def check_fits(self, height, width):
        r, c = self.origin
        if r + self.size > height or c + self.size > width:
            raise ValueError(f"patch at {self.origin} of size {self.size} exceeds {height}x{width}")


@dataclass
class PatchPair:
    lr_rays: RayBundle  # [P/r, P/r]
    hr_target: np.ndarray  # [P, P, 3]
    lr_target: np.ndarray  # [P/r, P/r, 3]
    spec: PatchSpec
    camera: CameraModel  # HR camera
    coord_map: np.ndarray  # 2x3 affine, patch-local (x, y) -> HR image (x, y)
    mask: np.ndarray  # [P, P] bool, pixels that contribute to the loss

    @property
    def lr_size(self):
        return self.spec.size // self.spec.ratio


def _check_sizes(height, width, size):
    if size > height or size > width:
        raise ValueError(f"patch size {size} exceeds image {height}x{width}")


def grid_patches(height: int, width: int, size: int, ratio: int = 1) -> list[PatchSpec]:
    """Equal-size tiles in row-major order; a last tile per axis is shifted to fit."""
    _check_sizes(height, width, size)

    def axis(n):
        starts = list(range(0, n - size + 1, size))
        if starts[-1] + size < n:
            starts.append(n - size)
        return starts

    return [PatchSpec((r, c), size, ratio) for r in axis(height) for c in axis(width)]


def random_patch(height: int, width: int, size: int, rng: np.random.Generator, ratio: int = 1) -> PatchSpec:
    _check_sizes(height, width, size)
    r = int(rng.integers(0, height - size + 1))
    c = int(rng.integers(0, width - size + 1))
    return PatchSpec((r, c), size, ratio)


def _lr_rays(camera, coord_map, size, ratio):
    n = size // ratio
    centers = (np.arange(n) + 0.5) * ratio
    xs, ys = np.meshgrid(centers, centers, indexing="xy")
    hx = coord_map[0, 0] * xs + coord_map[0, 1] * ys + coord_map[0, 2]
    hy = coord_map[1, 0] * xs + coord_map[1, 1] * ys + coord_map[1, 2]
    return rays_through(camera, hx, hy)


def make_patch_pair(hr_image: np.ndarray, camera: CameraModel, spec: PatchSpec) -> PatchPair:
    h, w = hr_image.shape[:2]
    if (h, w) != (camera.height, camera.width):
        raise ValueError(f"image {h}x{w} does not match camera {camera.height}x{camera.width}")
    spec.check_fits(h, w)
    r0, c0 = spec.origin
    crop = np.ascontiguousarray(hr_image[r0:r0 + spec.size, c0:c0 + spec.size])
    coord_map = np.array([[1.0, 0.0, c0], [0.0, 1.0, r0]])
    return PatchPair(
        lr_rays=_lr_rays(camera, coord_map, spec.size, spec.ratio),
        hr_target=crop,
        lr_target=bilinear_downsample(crop, spec.ratio),
        spec=spec,
        camera=camera,
        coord_map=coord_map,
        mask=np.ones((spec.size, spec.size), dtype=bool),
    )


def sample_bilinear(image: np.ndarray, x: np.ndarray, y: np.ndarray):
    """Sample ``image`` at continuous coords (pixel centers at +0.5).

    Returns ``(values, valid)``; ``valid`` marks points inside the hull of
    pixel centers, where no extrapolation is needed.
    """
    h, w = image.shape[:2]
    fx, fy = x - 0.5, y - 0.5
    eps = 1e-9
    valid = (fx >= -eps) & (fx <= w - 1 + eps) & (fy >= -eps) & (fy <= h - 1 + eps)
    fx = np.clip(fx, 0.0, w - 1)
    fy = np.clip(fy, 0.0, h - 1)
    x0 = np.minimum(np.floor(fx).astype(int), max(w - 2, 0))
    y0 = np.minimum(np.floor(fy).astype(int), max(h - 2, 0))
    x1 = np.minimum(x0 + 1, w - 1)
    y1 = np.minimum(y0 + 1, h - 1)
    ax = (fx - x0)[..., None]
    ay = (fy - y0)[..., None]
    img = image if image.ndim == 3 else image[..., None]
    top = img[y0, x0] * (1 - ax) + img[y0, x1] * ax
    bot = img[y1, x0] * (1 - ax) + img[y1, x1] * ax
    out = top * (1 - ay) + bot * ay
    return (out if image.ndim == 3 else out[..., 0]), valid


def _local_transform(size, rotation_deg, hflip):
    """2x3 affine on patch-local coords: rotate (and mirror x) about the patch center."""
    th = np.deg2rad(rotation_deg)
    rot = np.array([[np.cos(th), -np.sin(th)], [np.sin(th), np.cos(th)]])
    flip = np.diag([-1.0, 1.0]) if hflip else np.eye(2)
    lin = rot @ flip
    center = np.array([size / 2.0, size / 2.0])
    return np.concatenate([lin, (center - lin @ center)[:, None]], axis=1)


def _compose(outer, inner):
    a = np.vstack([outer, [0.0, 0.0, 1.0]])
    b = np.vstack([inner, [0.0, 0.0, 1.0]])
    return (a @ b)[:2]


def _warp(image, affine, size, scale):
    """Resample ``image`` (patch-local grid of ``size / scale`` pixels) through ``affine``."""
    n = image.shape[0]
    centers = (np.arange(n) + 0.5) * scale
    xs, ys = np.meshgrid(centers, centers, indexing="xy")
    sx = affine[0, 0] * xs + affine[0, 1] * ys + affine[0, 2]
    sy = affine[1, 0] * xs + affine[1, 1] * ys + affine[1, 2]
    return sample_bilinear(image, sx / scale, sy / scale)


def apply_transform(pair: PatchPair, rotation_deg: float = 0.0, hflip: bool = False) -> PatchPair:
    """Apply the same image-plane transform to the LR ray grid and both targets."""
    if abs(rotation_deg) >= MAX_ROTATION_DEG:
        raise ValueError(f"rotation must stay below {MAX_ROTATION_DEG} degrees")
    if rotation_deg == 0.0 and not hflip:
        return pair
    size, ratio = pair.spec.size, pair.spec.ratio
    local = _local_transform(size, rotation_deg, hflip)
    hr, hr_valid = _warp(pair.hr_target, local, size, 1.0)
    old_mask, _ = _warp(pair.mask.astype(np.float64), local, size, 1.0)
    lr, _ = _warp(pair.lr_target, local, size, float(ratio))
    coord_map = _compose(pair.coord_map, local)
    prev = pair.spec.transform or {}
    transform = {
        "rotation_degrees": prev.get("rotation_degrees", 0.0) + rotation_deg,
        "hflip": bool(prev.get("hflip", False)) ^ bool(hflip),
    }
    return PatchPair(
        lr_rays=_lr_rays(pair.camera, coord_map, size, ratio),
        hr_target=hr.astype(pair.hr_target.dtype),
        lr_target=lr.astype(pair.lr_target.dtype),
        spec=replace(pair.spec, transform=transform),
        camera=pair.camera,
        coord_map=coord_map,
        mask=hr_valid & (old_mask >= 1.0 - 1e-9),
    )


def augment_pair(pair: PatchPair, params: dict, rng: np.random.Generator) -> PatchPair:
    """Random rotation in [-max, max] degrees and a horizontal flip with probability ``hflip_prob``."""
    max_rot = float(params.get("max_rotation_deg", 0.0))
    if max_rot >= MAX_ROTATION_DEG:
        raise ValueError(f"max_rotation_deg must be < {MAX_ROTATION_DEG}")
    angle = float(rng.uniform(-max_rot, max_rot)) if max_rot > 0 else 0.0
    flip = bool(rng.random() < float(params.get("hflip_prob", 0.0)))
    return apply_transform(pair, angle, flip)
