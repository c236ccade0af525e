"""Volume rendering: ray sampling, alpha compositing, image rendering."""
from __future__ import annotations

import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
from PIL import Image

from .field import pad_rows
from .geometry import CameraModel, RayBundle, generate_rays, ndc_rays

__all__ = [
    "RaySamples",
    "RenderOutput",
    "RenderConfig",
    "sample_points",
    "composite",
    "render_rays",
    "render_image",
    "ray_box_interval",
    "write_png",
    "read_png",
]

TAU_CLAMP = 80.0


@dataclass
class RaySamples:
    t_values: torch.Tensor  # [M, N]
    deltas: torch.Tensor  # [M, N]
    positions: torch.Tensor  # [M, N, 3]


@dataclass
class RenderOutput:
    rgb: np.ndarray
    accumulation: np.ndarray
    depth: np.ndarray | None = None
    render_seconds: float = 0.0


@dataclass
class RenderConfig:
    n_samples: int = 192
    stratified: bool = False
    background: tuple = (1.0, 1.0, 1.0)
    chunk_size: int = 4096
    ndc: bool = False
    seed: int = 0
    weight_threshold: float = 1e-4
    clip_to_box: bool = True

    def __post_init__(self):
        if self.chunk_size < 1:
            raise ValueError("chunk_size must be >= 1")
        if self.n_samples < 1:
            raise ValueError("n_samples must be >= 1")


def _bin_offsets(shape, n, stratified, generator, dtype):
    if stratified:
        return torch.rand(shape + (n,), generator=generator, dtype=dtype)
    return torch.full(shape + (n,), 0.5, dtype=dtype)


def _samples_from_offsets(origins, directions, near, far, offsets):
    """Place one sample per equal-width bin of [near, far] at ``offsets`` in [0, 1)."""
    n = offsets.shape[-1]
    near = torch.as_tensor(near, dtype=offsets.dtype).expand(offsets.shape[:-1])[..., None]
    far = torch.as_tensor(far, dtype=offsets.dtype).expand(offsets.shape[:-1])[..., None]
    idx = torch.arange(n, dtype=offsets.dtype)
    t = near + (far - near) * (idx + offsets) / n
    # the last sample also absorbs the leading gap so the deltas tile [near, far]
    last = (far - t[..., -1:]) + (t[..., :1] - near)
    deltas = torch.cat([t[..., 1:] - t[..., :-1], last], dim=-1)
    positions = origins[..., None, :] + t[..., None] * directions[..., None, :]
    return RaySamples(t, deltas, positions)


def sample_points(rays: RayBundle, n_samples: int, stratified: bool = False, generator=None,
                  dtype=torch.float64) -> RaySamples:
    if n_samples < 1:
        raise ValueError("n_samples must be >= 1")
    if not rays.near < rays.far:
        raise ValueError("need near < far")
    flat = rays.flatten()
    o = torch.as_tensor(flat.origins, dtype=dtype)
    d = torch.as_tensor(flat.directions, dtype=dtype)
    offsets = _bin_offsets((o.shape[0],), n_samples, stratified, generator, dtype)
    return _samples_from_offsets(o, d, rays.near, rays.far, offsets)


def composite(sigmas, colors, deltas, background=(1.0, 1.0, 1.0), check=True):
    """Alpha-composite samples front to back.

    Returns ``(rgb [M, 3], weights [M, N], transmittance_after_last [M])``;
    ``rgb`` includes the background term ``(1 - sum(w)) * background``.
    """
    sigmas = torch.as_tensor(sigmas)
    deltas = torch.as_tensor(deltas, dtype=sigmas.dtype)
    colors = torch.as_tensor(colors, dtype=sigmas.dtype)
    if check:
        if (sigmas < 0).any():
            raise ValueError("negative density")
        if (deltas < 0).any():
            raise ValueError("negative sample spacing")
    tau = (sigmas * deltas).clamp(max=TAU_CLAMP)
    cum = torch.cumsum(tau, dim=-1)
    excl = torch.cat([torch.zeros_like(cum[..., :1]), cum[..., :-1]], dim=-1)
    weights = torch.exp(-excl) * -torch.expm1(-tau)
    t_final = torch.exp(-cum[..., -1])
    bg = torch.as_tensor(background, dtype=sigmas.dtype)
    acc = weights.sum(dim=-1)
    rgb = (weights[..., None] * colors).sum(dim=-2) + (1.0 - acc)[..., None] * bg
    return rgb, weights, t_final


def ray_box_interval(origins, directions, aabb, near, far):
    """Per-ray [t_min, t_max] of the segment inside ``aabb`` clipped to [near, far].

    Rays that miss the box get ``t_min == t_max``.
    """
    safe = torch.where(directions.abs() < 1e-12, torch.full_like(directions, 1e-12), directions)
    ta = (aabb[0] - origins) / safe
    tb = (aabb[1] - origins) / safe
    t_in = torch.minimum(ta, tb).amax(dim=-1).clamp(min=near)
    t_out = torch.maximum(ta, tb).amin(dim=-1).clamp(max=far)
    t_out = torch.maximum(t_out, t_in)
    return t_in, t_out


def render_rays(field, origins, directions, near, far, n_samples, offsets=None, stratified=False,
                generator=None, background=(1.0, 1.0, 1.0), weight_threshold=0.0, clip_to_box=True,
                view_dirs=None):
    """Differentiable rendering of flat rays ``[M, 3]``.

    ``offsets`` (``[M, n_samples]`` in [0, 1)) pins the in-bin sample
    positions; otherwise they are drawn (stratified) or bin midpoints.
    Returns a dict with ``rgb``, ``acc``, ``depth`` and ``weights``.
    """
    dtype = field.dtype
    origins = torch.as_tensor(origins, dtype=dtype)
    directions = torch.as_tensor(directions, dtype=dtype)
    m = origins.shape[0]
    if offsets is None:
        offsets = _bin_offsets((m,), n_samples, stratified, generator, dtype)
    else:
        offsets = torch.as_tensor(offsets, dtype=dtype)
    if clip_to_box:
        t0, t1 = ray_box_interval(origins, directions, field.aabb, near, far)
    else:
        t0 = torch.full((m,), float(near), dtype=dtype)
        t1 = torch.full((m,), float(far), dtype=dtype)
    samples = _samples_from_offsets(origins, directions, t0, t1, offsets)
    pts = samples.positions.reshape(-1, 3)
    inside = field.inside(pts)
    sigma = torch.zeros(pts.shape[0], dtype=dtype)
    if inside.any():
        sigma = sigma.index_put((inside.nonzero(as_tuple=True)[0],), field.density(pts[inside]))
    sigma = sigma.view(m, n_samples)
    # colors only matter where the compositing weight is non-negligible
    tau = (sigma * samples.deltas).clamp(max=TAU_CLAMP)
    cum = torch.cumsum(tau, dim=-1)
    excl = torch.cat([torch.zeros_like(cum[..., :1]), cum[..., :-1]], dim=-1)
    weights = torch.exp(-excl) * -torch.expm1(-tau)
    active = (weights.detach().reshape(-1) > weight_threshold) & inside
    vd = directions if view_dirs is None else torch.as_tensor(view_dirs, dtype=dtype)
    colors = torch.zeros(pts.shape[0], 3, dtype=dtype)
    if active.any():
        idx = active.nonzero(as_tuple=True)[0]
        dirs = vd[:, None, :].expand(m, n_samples, 3).reshape(-1, 3)[idx]
        colors = colors.index_put((idx,), field.color(pts[idx], dirs))
    colors = colors.view(m, n_samples, 3)
    acc = weights.sum(dim=-1)
    bg = torch.as_tensor(background, dtype=dtype)
    rgb = (weights[..., None] * colors).sum(dim=-2) + (1.0 - acc)[..., None] * bg
    depth = (weights * samples.t_values).sum(dim=-1)
    return {"rgb": rgb, "acc": acc, "depth": depth, "weights": weights}


def camera_rays(camera: CameraModel, ndc: bool = False, rays: RayBundle | None = None):
    """Flat ``(origins, directions, view_dirs, near, far)`` for rendering."""
    rays = generate_rays(camera) if rays is None else rays
    flat = rays.flatten()
    view_dirs = flat.directions
    if ndc:
        warped = ndc_rays(camera, flat)
        return warped.origins, warped.directions, view_dirs, warped.near, warped.far
    return flat.origins, flat.directions, view_dirs, flat.near, flat.far


@torch.no_grad()
def render_image(field, camera: CameraModel, config: RenderConfig | None = None, rays: RayBundle | None = None):
    config = config or RenderConfig()
    start = time.perf_counter()
    shape = (camera.height, camera.width) if rays is None else rays.shape
    o, d, vd, near, far = camera_rays(camera, config.ndc, rays)
    dtype = field.dtype
    o, d, vd = (torch.as_tensor(x, dtype=dtype) for x in (o, d, vd))
    m = o.shape[0]
    gen = torch.Generator().manual_seed(config.seed)
    offsets = _bin_offsets((m,), config.n_samples, config.stratified, gen, dtype)
    rgb, acc, depth = [], [], []
    for s in range(0, m, config.chunk_size):
        sl = slice(s, s + config.chunk_size)
        n = o[sl].shape[0]
        # padded chunks keep per-ray values independent of chunk_size
        out = render_rays(field, pad_rows(o[sl]), pad_rows(d[sl]), near, far, config.n_samples,
                          offsets=pad_rows(offsets[sl]), background=config.background,
                          weight_threshold=config.weight_threshold,
                          clip_to_box=config.clip_to_box and not config.ndc, view_dirs=pad_rows(vd[sl]))
        rgb.append(out["rgb"][:n])
        acc.append(out["acc"][:n])
        depth.append(out["depth"][:n])
    rgb = torch.cat(rgb).clamp(0.0, 1.0).reshape(*shape, 3).numpy()
    acc = torch.cat(acc).reshape(shape).numpy()
    depth = torch.cat(depth).reshape(shape).numpy()
    return RenderOutput(rgb, acc, depth, time.perf_counter() - start)


def write_png(path, rgb):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    arr = np.round(np.clip(np.asarray(rgb, dtype=np.float64), 0.0, 1.0) * 255.0).astype(np.uint8)
    Image.fromarray(arr).save(path)
    return path


def read_png(path, background=None):
    """Float image in [0, 1]; RGBA is composited onto ``background`` when given."""
    with Image.open(path) as img:
        arr = np.asarray(img, dtype=np.float64) / 255.0
    if arr.ndim == 2:
        arr = np.repeat(arr[..., None], 3, axis=-1)
    if arr.shape[-1] == 4:
        rgb, alpha = arr[..., :3], arr[..., 3:]
        if background is None:
            return rgb
        return rgb * alpha + (1.0 - alpha) * np.asarray(background, dtype=np.float64)
    return arr[..., :3]
