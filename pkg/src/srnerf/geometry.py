"""Pinhole cameras, ray generation and resolution scaling.

Conventions used throughout the package:

* right-handed camera frame, x right, y up, camera looks down -z;
* pixel ``(i, j)`` (column, row) covers the continuous square
  ``[i, i+1) x [j, j+1)`` and its center sits at ``(i + 0.5, j + 0.5)``;
* the principal point is expressed in that continuous frame, so the image
  center of a ``W x H`` image is ``(W / 2, H / 2)``.
"""
from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

__all__ = [
    "CameraModel",
    "RayBundle",
    "generate_rays",
    "rays_through",
    "downscale_camera",
    "ndc_rays",
    "look_at",
]

_ROTATION_TOL = 1e-5


@dataclass(frozen=True)
class CameraModel:
    width: int
    height: int
    focal_x: float
    focal_y: float
    principal_x: float
    principal_y: float
    pose: np.ndarray  # 4x4 camera-to-world
    near: float
    far: float

    def __post_init__(self):
        pose = np.asarray(self.pose, dtype=np.float64)
        object.__setattr__(self, "pose", pose)
        if pose.shape != (4, 4):
            raise ValueError(f"pose must be 4x4, got {pose.shape}")
        if self.width <= 0 or self.height <= 0:
            raise ValueError("image size must be positive")
        if not (self.focal_x > 0 and self.focal_y > 0):
            raise ValueError("focal lengths must be positive")
        if not (0 < self.near < self.far):
            raise ValueError(f"need 0 < near < far, got near={self.near}, far={self.far}")
        rot = pose[:3, :3]
        if not np.allclose(rot @ rot.T, np.eye(3), atol=_ROTATION_TOL) or abs(np.linalg.det(rot) - 1.0) > _ROTATION_TOL:
            raise ValueError("pose rotation block is not a proper rotation")

    @classmethod
    def from_fov(cls, width, height, fov_x, pose, near, far):
        focal = 0.5 * width / np.tan(0.5 * fov_x)
        return cls(width, height, focal, focal, width / 2.0, height / 2.0, pose, near, far)

    @property
    def origin(self) -> np.ndarray:
        return self.pose[:3, 3].copy()

    def with_pose(self, pose) -> "CameraModel":
        return replace(self, pose=np.asarray(pose, dtype=np.float64))


@dataclass
class RayBundle:
    """Rays laid out on an image-shaped grid ``[..., 3]``."""

    origins: np.ndarray
    directions: np.ndarray
    near: float
    far: float

    @property
    def shape(self):
        return self.origins.shape[:-1]

    def flatten(self) -> "RayBundle":
        return RayBundle(self.origins.reshape(-1, 3), self.directions.reshape(-1, 3), self.near, self.far)

    def __len__(self):
        return int(np.prod(self.shape))


def rays_through(camera: CameraModel, x, y) -> RayBundle:
    """Rays through continuous image-plane coordinates ``(x, y)``.

    ``x`` and ``y`` are measured in the continuous pixel frame (pixel
    centers at half-integers) and may have any matching shape.
    """
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    cam_dirs = np.stack(
        [
            (x - camera.principal_x) / camera.focal_x,
            -(y - camera.principal_y) / camera.focal_y,
            -np.ones_like(x),
        ],
        axis=-1,
    )
    dirs = cam_dirs @ camera.pose[:3, :3].T
    dirs = dirs / np.linalg.norm(dirs, axis=-1, keepdims=True)
    origins = np.broadcast_to(camera.pose[:3, 3], dirs.shape).copy()
    return RayBundle(origins, dirs, camera.near, camera.far)


def generate_rays(camera: CameraModel, pixel_coords=None) -> RayBundle:
    """One ray per pixel through its center.

    ``pixel_coords`` is an optional integer array ``[..., 2]`` of
    ``(column, row)`` indices; by default the full ``[H, W]`` grid is used.
    """
    if pixel_coords is None:
        cols, rows = np.meshgrid(np.arange(camera.width), np.arange(camera.height), indexing="xy")
    else:
        pixel_coords = np.asarray(pixel_coords)
        cols, rows = pixel_coords[..., 0], pixel_coords[..., 1]
        if (cols < 0).any() or (cols >= camera.width).any() or (rows < 0).any() or (rows >= camera.height).any():
            raise IndexError(
                f"pixel coordinates outside [0,{camera.width})x[0,{camera.height})"
            )
    return rays_through(camera, cols + 0.5, rows + 0.5)


def downscale_camera(camera: CameraModel, ratio: int) -> CameraModel:
    """Camera whose pixel grid is ``ratio`` times coarser.

    In pixel-index coordinates this maps ``c -> (c + 0.5) / ratio - 0.5``;
    in the continuous frame used by :class:`CameraModel` that is plain
    division by ``ratio``.
    """
    if int(ratio) != ratio or ratio < 1:
        raise ValueError(f"ratio must be a positive integer, got {ratio}")
    ratio = int(ratio)
    if camera.width % ratio or camera.height % ratio:
        raise ValueError(
            f"{camera.width}x{camera.height} is not divisible by ratio {ratio}"
        )
    if ratio == 1:
        return camera
    return replace(
        camera,
        width=camera.width // ratio,
        height=camera.height // ratio,
        focal_x=camera.focal_x / ratio,
        focal_y=camera.focal_y / ratio,
        principal_x=camera.principal_x / ratio,
        principal_y=camera.principal_y / ratio,
    )


def ndc_rays(camera: CameraModel, rays: RayBundle, near_plane: float = 1.0) -> RayBundle:
    """Warp forward-facing rays into normalized device coordinates.

    The resulting rays live in ``[-1, 1]^3`` with ``t`` in ``[0, 1]``;
    directions are left unnormalized because the NDC parameterisation
    depends on their length.
    """
    o = rays.origins.astype(np.float64)
    d = rays.directions.astype(np.float64)
    t = -(near_plane + o[..., 2]) / d[..., 2]
    o = o + t[..., None] * d
    W, H, f = camera.width, camera.height, camera.focal_x
    o0 = -1.0 / (W / (2.0 * f)) * o[..., 0] / o[..., 2]
    o1 = -1.0 / (H / (2.0 * f)) * o[..., 1] / o[..., 2]
    o2 = 1.0 + 2.0 * near_plane / o[..., 2]
    d0 = -1.0 / (W / (2.0 * f)) * (d[..., 0] / d[..., 2] - o[..., 0] / o[..., 2])
    d1 = -1.0 / (H / (2.0 * f)) * (d[..., 1] / d[..., 2] - o[..., 1] / o[..., 2])
    d2 = -2.0 * near_plane / o[..., 2]
    return RayBundle(np.stack([o0, o1, o2], -1), np.stack([d0, d1, d2], -1), 0.0, 1.0)


def look_at(eye, target=(0.0, 0.0, 0.0), up=(0.0, 0.0, 1.0)) -> np.ndarray:
    """Camera-to-world matrix for a camera at ``eye`` looking at ``target``."""
    eye = np.asarray(eye, dtype=np.float64)
    back = eye - np.asarray(target, dtype=np.float64)
    back /= np.linalg.norm(back)
    right = np.cross(np.asarray(up, dtype=np.float64), back)
    right /= np.linalg.norm(right)
    true_up = np.cross(back, right)
    pose = np.eye(4)
    pose[:3, 0], pose[:3, 1], pose[:3, 2], pose[:3, 3] = right, true_up, back, eye
    return pose
