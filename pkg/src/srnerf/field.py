"""Grid-decomposed radiance field (vector-matrix factorisation + small decoders)."""
from __future__ import annotations

import copy
import math
from dataclasses import asdict, dataclass

import torch
import torch.nn as nn
import torch.nn.functional as F

from .checkpoint import load_archive, save_archive, state_to_numpy

__all__ = [
    "FieldConfig",
    "FactorizedGrid",
    "RadianceField",
    "build_field",
    "query_density",
    "query_color",
    "size_bytes",
    "upsample_grids",
    "softplus_shift_for",
]

# (plane axes, line axis) per mode; plane factor i spans axes MAT_MODES[i]
MAT_MODES = ((0, 1), (0, 2), (1, 2))
VEC_MODES = (2, 1, 0)
_UNIT_TOL = 1e-3
# Vectorized kernels treat tail elements (and BLAS very short inputs) differently;
# padding rows to a block multiple makes each row's value independent of batch size.
ROW_BLOCK = 32


def pad_rows(x, block=ROW_BLOCK):
    pad = (-x.shape[0]) % block
    if pad == 0:
        return x
    return torch.cat([x, x[-1:].expand(pad, *x.shape[1:])]) if x.shape[0] else x


@dataclass
class FieldConfig:
    resolution: tuple = (64, 64, 64)
    density_rank: int = 8
    appearance_rank: int = 24
    appearance_channels: int = 27
    bounding_box: tuple = ((-1.5, -1.5, -1.5), (1.5, 1.5, 1.5))
    density_shift: float = -10.0
    density_scale: float = 25.0
    n_freqs: int = 2
    hidden: int = 64
    init_scale: float = 0.1
    dtype: str = "float32"

    def to_dict(self):
        return asdict(self)


def softplus_shift_for(value: float, feature: float = 1.0, scale: float = 1.0) -> float:
    """Shift ``s`` such that ``scale * softplus(feature + s) == value``."""
    return math.log(math.expm1(value / scale)) - feature


class FactorizedGrid(nn.Module):
    """Three plane/line factor pairs sampled with bilinear/linear interpolation.

    With ``channels=None`` the output is the mean over the three modes of the
    summed plane*line products (one scalar per point); otherwise the ``3 * rank``
    products are mixed to ``channels`` features by a learned matrix.
    """

    def __init__(self, resolution, rank, channels=None, init_scale=0.1, generator=None, dtype=torch.float32):
        super().__init__()
        self.resolution = tuple(int(r) for r in resolution)
        self.rank = int(rank)
        self.channels = channels
        planes, lines = [], []
        for (a, b), c in zip(MAT_MODES, VEC_MODES):
            shape_p = (self.rank, self.resolution[b], self.resolution[a])
            shape_l = (self.rank, self.resolution[c])
            planes.append(nn.Parameter(init_scale * torch.randn(shape_p, generator=generator, dtype=dtype)))
            lines.append(nn.Parameter(init_scale * torch.randn(shape_l, generator=generator, dtype=dtype)))
        self.planes = nn.ParameterList(planes)
        self.lines = nn.ParameterList(lines)
        if channels is not None and self.rank > 0:
            self.mixing = nn.Linear(3 * self.rank, channels, bias=False, dtype=dtype)
            if generator is not None:
                bound = 1.0 / math.sqrt(max(3 * self.rank, 1))
                with torch.no_grad():
                    self.mixing.weight.uniform_(-bound, bound, generator=generator)
        else:
            self.mixing = None

    @property
    def out_channels(self):
        return 1 if self.channels is None else self.channels

    def products(self, coords):
        """Per-mode plane*line products, ``[M, 3 * rank]``. ``coords`` in [-1, 1]."""
        m = coords.shape[0]
        if self.rank == 0:
            return coords.new_zeros((m, 0))
        out = []
        for i, ((a, b), c) in enumerate(zip(MAT_MODES, VEC_MODES)):
            plane_xy = torch.stack([coords[:, a], coords[:, b]], dim=-1).view(1, m, 1, 2)
            line_xy = torch.stack([torch.zeros_like(coords[:, c]), coords[:, c]], dim=-1).view(1, m, 1, 2)
            p = F.grid_sample(self.planes[i][None], plane_xy, mode="bilinear", padding_mode="border", align_corners=True)
            l = F.grid_sample(self.lines[i][None, :, :, None], line_xy, mode="bilinear", padding_mode="border", align_corners=True)
            out.append((p * l).view(self.rank, m).t())
        return torch.cat(out, dim=1)

    def forward(self, coords):
        if self.rank == 0:
            shape = (coords.shape[0],) if self.channels is None else (coords.shape[0], self.channels)
            return coords.new_zeros(shape)
        prods = self.products(coords)
        if self.mixing is None:
            return prods.sum(dim=1) / 3.0
        return self.mixing(prods)

    def upsampled(self, new_resolution) -> "FactorizedGrid":
        new_resolution = tuple(int(r) for r in new_resolution)
        if any(n < o for n, o in zip(new_resolution, self.resolution)):
            raise ValueError(f"cannot shrink grid {self.resolution} -> {new_resolution}")
        grid = copy.deepcopy(self)
        if new_resolution == self.resolution:
            return grid
        grid.resolution = new_resolution
        with torch.no_grad():
            for i, ((a, b), c) in enumerate(zip(MAT_MODES, VEC_MODES)):
                p = F.interpolate(self.planes[i][None], size=(new_resolution[b], new_resolution[a]),
                                  mode="bilinear", align_corners=True)[0]
                l = F.interpolate(self.lines[i][None], size=new_resolution[c], mode="linear", align_corners=True)[0]
                grid.planes[i] = nn.Parameter(p.contiguous())
                grid.lines[i] = nn.Parameter(l.contiguous())
        return grid


def encode_direction(d, n_freqs):
    if n_freqs == 0:
        return d
    freqs = 2.0 ** torch.arange(n_freqs, dtype=d.dtype, device=d.device)
    scaled = (d[..., None] * freqs).flatten(-2)
    return torch.cat([d, torch.sin(scaled), torch.cos(scaled)], dim=-1)


class RadianceField(nn.Module):
    def __init__(self, config: FieldConfig, generator=None):
        super().__init__()
        self.config = config
        dtype = getattr(torch, config.dtype)
        box = torch.tensor(config.bounding_box, dtype=dtype)
        if box.shape != (2, 3) or not (box[1] > box[0]).all():
            raise ValueError(f"invalid bounding box {config.bounding_box}")
        self.register_buffer("aabb", box, persistent=False)
        self.density_grid = FactorizedGrid(config.resolution, config.density_rank, None,
                                           config.init_scale, generator, dtype)
        self.appearance_grid = FactorizedGrid(config.resolution, config.appearance_rank, config.appearance_channels,
                                              config.init_scale, generator, dtype)
        in_dim = config.appearance_channels + 3 + 6 * config.n_freqs
        self.color_decoder = nn.Sequential(
            nn.Linear(in_dim, config.hidden, dtype=dtype),
            nn.ReLU(),
            nn.Linear(config.hidden, 3, dtype=dtype),
        )
        if generator is not None:
            for layer in (self.color_decoder[0], self.color_decoder[2]):
                bound = 1.0 / math.sqrt(layer.in_features)
                with torch.no_grad():
                    layer.weight.uniform_(-bound, bound, generator=generator)
                    layer.bias.uniform_(-bound, bound, generator=generator)
        with torch.no_grad():
            self.color_decoder[2].bias.zero_()

    @property
    def dtype(self):
        return self.aabb.dtype

    def normalize(self, positions):
        lo, hi = self.aabb[0], self.aabb[1]
        return (positions - lo) / (hi - lo) * 2.0 - 1.0

    def inside(self, positions):
        return ((positions >= self.aabb[0]) & (positions <= self.aabb[1])).all(dim=-1)

    def density(self, positions):
        m = positions.shape[0]
        positions = pad_rows(positions)
        feat = self.density_grid(self.normalize(positions))
        sigma = self.config.density_scale * F.softplus(feat + self.config.density_shift)
        return torch.where(self.inside(positions), sigma, torch.zeros_like(sigma))[:m]

    def color(self, positions, directions):
        m = positions.shape[0]
        positions, directions = pad_rows(positions), pad_rows(directions)
        feat = self.appearance_grid(self.normalize(positions))
        x = torch.cat([feat, encode_direction(directions, self.config.n_freqs)], dim=-1)
        return torch.sigmoid(self.color_decoder(x))[:m]

    def direction_columns(self) -> slice:
        """Columns of the first decoder layer fed by the direction encoding."""
        c = self.config.appearance_channels
        return slice(c, c + 3 + 6 * self.config.n_freqs)

    def upsample(self, new_resolution) -> "RadianceField":
        new = copy.deepcopy(self)
        new.density_grid = self.density_grid.upsampled(new_resolution)
        new.appearance_grid = self.appearance_grid.upsampled(new_resolution)
        new.config = FieldConfig(**{**asdict(self.config), "resolution": tuple(int(r) for r in new_resolution)})
        return new

    def save(self, path):
        cfg = {**self.config.to_dict(), "dtype": str(self.dtype).replace("torch.", "")}
        header = {"kind": "radiance_field", "config": cfg,
                  "density_activation": "shifted_softplus", "color_activation": "sigmoid"}
        return save_archive(path, state_to_numpy(self), header)

    @classmethod
    def load(cls, path) -> "RadianceField":
        arrays, header = load_archive(path, kind="radiance_field")
        cfg = header["config"]
        cfg["resolution"] = tuple(cfg["resolution"])
        cfg["bounding_box"] = tuple(tuple(b) for b in cfg["bounding_box"])
        fld = cls(FieldConfig(**cfg))
        fld.load_state_dict({k: torch.from_numpy(v.copy()) for k, v in arrays.items()})
        return fld


def build_field(config: FieldConfig | None = None, seed: int = 0) -> RadianceField:
    gen = torch.Generator().manual_seed(seed)
    return RadianceField(config or FieldConfig(), generator=gen)


def _check_finite(x, name):
    if not torch.isfinite(x).all():
        raise ValueError(f"{name} contains non-finite values")


def query_density(field: RadianceField, positions) -> torch.Tensor:
    positions = torch.as_tensor(positions, dtype=field.dtype)
    _check_finite(positions, "positions")
    return field.density(positions.reshape(-1, 3))


def query_color(field: RadianceField, positions, directions) -> torch.Tensor:
    positions = torch.as_tensor(positions, dtype=field.dtype).reshape(-1, 3)
    directions = torch.as_tensor(directions, dtype=field.dtype).reshape(-1, 3)
    _check_finite(positions, "positions")
    _check_finite(directions, "directions")
    if ((directions.norm(dim=-1) - 1.0).abs() > _UNIT_TOL).any():
        raise ValueError("directions must be unit vectors")
    return field.color(positions, directions)


def size_bytes(module: nn.Module) -> int:
    return int(sum(p.numel() * p.element_size() for p in module.parameters()))


def upsample_grids(field: RadianceField, new_resolution) -> RadianceField:
    return field.upsample(new_resolution)
