"""Residual convolutional super-resolution head and bilinear resampling."""
from __future__ import annotations

import json
import math
import re
from pathlib import Path

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .checkpoint import CheckpointError, load_archive, save_archive, state_to_numpy

__all__ = [
    "SRNetwork",
    "build_sr_network",
    "upscale",
    "load_pretrained",
    "save_sr",
    "import_state_dict",
    "bilinear_upscale",
    "bilinear_downsample",
    "SUPPORTED_RATIOS",
]

SUPPORTED_RATIOS = (2, 4, 8)
MIN_INPUT = 8
DEFAULT_NAME_TABLE = Path(__file__).with_name("edsr_names.json")


def _conv(cin, cout, dtype):
    return nn.Conv2d(cin, cout, 3, padding=1, padding_mode="reflect", dtype=dtype)


class ResBlock(nn.Module):
    def __init__(self, channels, res_scale=0.1, dtype=torch.float32):
        super().__init__()
        self.conv1 = _conv(channels, channels, dtype)
        self.conv2 = _conv(channels, channels, dtype)
        self.res_scale = res_scale

    def forward(self, x):
        return x + self.res_scale * self.conv2(F.relu(self.conv1(x)))


class SRNetwork(nn.Module):
    """head conv -> residual blocks -> body conv (+skip) -> x2 pixel-shuffle stages -> out conv.

    Works on ``[B, 3, H, W]`` tensors; ``mean_shift`` is subtracted on the way
    in and added back on the way out.
    """

    def __init__(self, ratio=2, n_blocks=8, n_channels=32, mean_shift=(0.5, 0.5, 0.5), res_scale=0.1,
                 dtype=torch.float32):
        super().__init__()
        if ratio not in SUPPORTED_RATIOS:
            raise ValueError(f"unsupported SR ratio {ratio}; choose one of {SUPPORTED_RATIOS}")
        self.ratio = ratio
        self.n_blocks = n_blocks
        self.n_channels = n_channels
        self.res_scale = res_scale
        self.register_buffer("mean_shift", torch.as_tensor(mean_shift, dtype=dtype).view(1, 3, 1, 1))
        self.head = _conv(3, n_channels, dtype)
        self.blocks = nn.ModuleList([ResBlock(n_channels, res_scale, dtype) for _ in range(n_blocks)])
        self.body_out = _conv(n_channels, n_channels, dtype)
        self.stages = nn.ModuleList(
            [_conv(n_channels, 4 * n_channels, dtype) for _ in range(int(math.log2(ratio)))]
        )
        self.out = _conv(n_channels, 3, dtype)
        self._icnr()

    @torch.no_grad()
    def _icnr(self):
        # every sub-pixel phase starts from the same filter: no checkerboard at init
        for stage in self.stages:
            base_w = stage.weight[0::4].clone()
            base_b = stage.bias[0::4].clone()
            stage.weight.copy_(base_w.repeat_interleave(4, dim=0))
            stage.bias.copy_(base_b.repeat_interleave(4, dim=0))

    @property
    def n_stages(self):
        return len(self.stages)

    def config(self):
        return {"ratio": self.ratio, "n_blocks": self.n_blocks, "n_channels": self.n_channels,
                "res_scale": self.res_scale, "mean_shift": self.mean_shift.flatten().tolist()}

    def forward(self, x):
        x = x - self.mean_shift
        h = self.head(x)
        b = h
        for block in self.blocks:
            b = block(b)
        h = h + self.body_out(b)
        for stage in self.stages:
            h = F.pixel_shuffle(stage(h), 2)
        return self.out(h) + self.mean_shift


def build_sr_network(ratio=2, n_blocks=8, n_channels=32, mean_shift=(0.5, 0.5, 0.5), seed=None,
                     dtype=torch.float32) -> SRNetwork:
    if seed is None:
        return SRNetwork(ratio, n_blocks, n_channels, mean_shift, dtype=dtype)
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        return SRNetwork(ratio, n_blocks, n_channels, mean_shift, dtype=dtype)


def _to_nchw(image):
    t = torch.as_tensor(image)
    return t.permute(2, 0, 1)[None] if t.dim() == 3 else t.permute(0, 3, 1, 2)


def _to_hwc(t, batched):
    return t.permute(0, 2, 3, 1) if batched else t[0].permute(1, 2, 0)


def upscale(net: SRNetwork, image):
    """``[H, W, 3]`` (or ``[B, H, W, 3]``) -> ``[rH, rW, 3]``; differentiable."""
    is_numpy = isinstance(image, np.ndarray)
    t = torch.as_tensor(image, dtype=net.mean_shift.dtype)
    batched = t.dim() == 4
    if t.shape[-1] != 3 or t.dim() not in (3, 4):
        raise ValueError(f"expected [H, W, 3] image, got {tuple(t.shape)}")
    h, w = t.shape[-3], t.shape[-2]
    if h < MIN_INPUT or w < MIN_INPUT:
        raise ValueError(f"input must be at least {MIN_INPUT}x{MIN_INPUT}, got {h}x{w}")
    if not torch.isfinite(t).all():
        raise ValueError("input contains non-finite values")
    out = _to_hwc(net(_to_nchw(t)), batched)
    return out.detach().numpy() if is_numpy else out


def save_sr(net: SRNetwork, path):
    return save_archive(path, state_to_numpy(net), {"kind": "sr_network", "config": net.config()})


def load_pretrained(net: SRNetwork, checkpoint_path, strict: bool = True) -> SRNetwork:
    arrays, header = load_archive(checkpoint_path, kind="sr_network")
    _assign(net, arrays, strict, source=str(checkpoint_path))
    return net


def _assign(net, arrays, strict, source):
    own = net.state_dict()
    if strict:
        for name, value in own.items():
            if name not in arrays:
                raise CheckpointError(f"{source}: missing array {name!r}")
            if tuple(arrays[name].shape) != tuple(value.shape):
                raise CheckpointError(
                    f"{source}: shape mismatch for {name!r}: "
                    f"{tuple(arrays[name].shape)} vs {tuple(value.shape)}"
                )
        extra = sorted(set(arrays) - set(own))
        if extra:
            raise CheckpointError(f"{source}: unexpected array {extra[0]!r}")
    update = {}
    for name, value in own.items():
        if name in arrays and tuple(arrays[name].shape) == tuple(value.shape):
            update[name] = torch.from_numpy(np.array(arrays[name])).to(value.dtype)
    net.load_state_dict(update, strict=False)
    return sorted(update)


def import_state_dict(net: SRNetwork, state_dict, table_path=DEFAULT_NAME_TABLE, strict=False):
    """Load an external checkpoint whose array names follow another layout.

    ``table_path`` is a JSON list of ``[source_pattern, target_pattern]``
    regexes applied in order; unmatched source names are dropped. Returns
    the list of our parameter names that were filled.
    """
    rules = [(re.compile(src), dst) for src, dst in json.loads(Path(table_path).read_text())]
    renamed = {}
    for name, value in state_dict.items():
        for pattern, target in rules:
            if pattern.fullmatch(name):
                renamed[pattern.sub(target, name)] = np.asarray(
                    value.detach().cpu().numpy() if torch.is_tensor(value) else value
                )
                break
    return _assign(net, renamed, strict, source=str(table_path))


def _resample(image, size):
    t = torch.as_tensor(image)
    out = F.interpolate(_to_nchw(t), size=size, mode="bilinear", align_corners=False)
    return _to_hwc(out, t.dim() == 4)


def bilinear_upscale(image, ratio: int):
    """Half-pixel aligned bilinear upsampling with edge clamping."""
    if ratio < 1 or int(ratio) != ratio:
        raise ValueError("ratio must be a positive integer")
    is_numpy = isinstance(image, np.ndarray)
    t = torch.as_tensor(image)
    if ratio == 1:
        return image
    h, w = t.shape[-3], t.shape[-2]
    out = _resample(t, (h * ratio, w * ratio))
    return out.numpy() if is_numpy else out


def bilinear_downsample(image, ratio: int):
    """Area-consistent downsampling: mean over each ``ratio x ratio`` cell.

    For ``ratio == 2`` this coincides with half-pixel bilinear sampling; for
    larger ratios it keeps the same sample centers without aliasing.
    """
    if ratio < 1 or int(ratio) != ratio:
        raise ValueError("ratio must be a positive integer")
    is_numpy = isinstance(image, np.ndarray)
    t = torch.as_tensor(image)
    h, w = t.shape[-3], t.shape[-2]
    if h % ratio or w % ratio:
        raise ValueError(f"{h}x{w} is not divisible by {ratio}")
    if ratio == 1:
        return image
    out = _to_hwc(F.avg_pool2d(_to_nchw(t), ratio), t.dim() == 4)
    return out.numpy() if is_numpy else out
