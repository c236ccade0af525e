"""Image-quality metrics, render profiling and Table-style reports."""
from __future__ import annotations

import hashlib
import json
import math
import platform
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch

__all__ = [
    "psnr",
    "ssim",
    "PSNR_CAP",
    "PerceptualScore",
    "perceptual_distance",
    "profile_render",
    "EvalReport",
    "build_report",
    "write_report",
    "params_checksum",
    "device_descriptor",
]

PSNR_CAP = 99.0


def _pair(a, b):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")
    return a, b


def psnr(a, b, peak: float = 1.0) -> float:
    """PSNR in dB; identical images give ``inf``."""
    a, b = _pair(a, b)
    mse = float(np.mean((a - b) ** 2))
    if mse == 0.0:
        return math.inf
    return 10.0 * math.log10(peak * peak / mse)


def _gaussian_window(size, sigma):
    x = np.arange(size, dtype=np.float64) - (size - 1) / 2.0
    g = np.exp(-(x ** 2) / (2.0 * sigma ** 2))
    return g / g.sum()


def _filter_valid(img, g):
    # separable 'valid' correlation
    k = len(g)
    rows = sum(g[i] * img[i:img.shape[0] - k + 1 + i, :] for i in range(k))
    return sum(g[j] * rows[:, j:rows.shape[1] - k + 1 + j] for j in range(k))


def ssim(a, b, window: int = 11, sigma: float = 1.5, k1: float = 0.01, k2: float = 0.03, peak: float = 1.0) -> float:
    """Mean SSIM on the luminance (channel mean), Gaussian window, valid region only."""
    a, b = _pair(a, b)
    if a.ndim == 3:
        a, b = a.mean(axis=-1), b.mean(axis=-1)
    if min(a.shape) < window:
        raise ValueError(f"image {a.shape} smaller than the {window}-pixel window")
    g = _gaussian_window(window, sigma)
    c1, c2 = (k1 * peak) ** 2, (k2 * peak) ** 2
    mu_a, mu_b = _filter_valid(a, g), _filter_valid(b, g)
    var_a = _filter_valid(a * a, g) - mu_a ** 2
    var_b = _filter_valid(b * b, g) - mu_b ** 2
    cov = _filter_valid(a * b, g) - mu_a * mu_b
    num = (2 * mu_a * mu_b + c1) * (2 * cov + c2)
    den = (mu_a ** 2 + mu_b ** 2 + c1) * (var_a + var_b + c2)
    return float(np.mean(num / den))


# ---------------------------------------------------------------- perceptual

@dataclass
class PerceptualScore:
    value: float | None
    status: str  # "ok" or "unavailable"
    detail: str = ""


_VGG_TAPS = (3, 8, 15, 22, 29)  # relu1_2, relu2_2, relu3_3, relu4_3, relu5_3


def _load_vgg(weights_path):
    from torchvision.models import vgg16

    state = torch.load(weights_path, map_location="cpu", weights_only=True)
    state = {k[len("features."):] if k.startswith("features.") else k: v for k, v in state.items()}
    conv_ids = sorted({int(k.split(".")[0]) for k in state if k.split(".")[0].isdigit()})
    if not conv_ids:
        raise ValueError("no VGG feature weights in file")
    features = vgg16(weights=None).features[: conv_ids[-1] + 2].eval()
    features.load_state_dict({k: v for k, v in state.items() if k.split(".")[0].isdigit()}, strict=True)
    lin = {k: v for k, v in state.items() if k.startswith("lin")}
    return features, lin


def perceptual_distance(a, b, backbone_weights_path) -> PerceptualScore:
    """Layerwise distance between unit-normalised VGG activations.

    Needs VGG-16 feature weights on disk (a torch state dict, possibly
    truncated); optional ``lin{k}.weight`` entries of shape ``[1, C, 1, 1]``
    weight the channels of tap ``k``, otherwise channels count equally.
    """
    if backbone_weights_path is None or not Path(backbone_weights_path).is_file():
        return PerceptualScore(None, "unavailable", f"weights not found: {backbone_weights_path}")
    try:
        features, lin = _load_vgg(backbone_weights_path)
    except Exception as exc:  # unreadable or incompatible weights
        return PerceptualScore(None, "unavailable", f"could not load weights: {exc}")
    a, b = _pair(a, b)
    x = torch.as_tensor(np.stack([a, b]), dtype=torch.float32).permute(0, 3, 1, 2) * 2.0 - 1.0
    total = 0.0
    tap = 0
    with torch.no_grad():
        for idx, layer in enumerate(features):
            x = layer(x)
            if idx in _VGG_TAPS:
                fa, fb = (f / (f.norm(dim=0, keepdim=True) + 1e-10) for f in x)
                d = (fa - fb) ** 2
                w = lin.get(f"lin{tap}.weight")
                d = (d * w[0]).sum(0) if w is not None else d.sum(0)
                total += float(d.mean())
                tap += 1
    return PerceptualScore(total, "ok")


# ---------------------------------------------------------------- profiling

def device_descriptor() -> str:
    return f"cpu:{platform.processor() or platform.machine()}:threads={torch.get_num_threads()}"


def params_checksum(*modules) -> str:
    h = hashlib.sha256()
    for m in modules:
        if m is None:
            continue
        for name, t in sorted(m.state_dict().items()):
            h.update(name.encode())
            h.update(t.detach().cpu().numpy().tobytes())
    return h.hexdigest()


def profile_render(pipeline, cameras, repeats: int = 3, config=None) -> dict:
    """Wall-clock of full HR frames (LR render + upsampling); one untimed warm-up render."""
    if not cameras:
        raise ValueError("need at least one camera")
    pipeline.render_hr(cameras[0], config)
    times = []
    for _ in range(repeats):
        for cam in cameras:
            t0 = time.perf_counter()
            pipeline.render_hr(cam, config)
            times.append(time.perf_counter() - t0)
    sizes = pipeline.size_bytes()
    return {
        "mean_seconds": float(np.mean(times)),
        "std_seconds": float(np.std(times)) if len(times) > 1 else 0.0,
        "bytes": {**sizes, "total": sizes["field"] + sizes["sr"]},
        "device": device_descriptor(),
        "n_frames": len(times),
    }


# ---------------------------------------------------------------- reports

def _finite(obj):
    # strict JSON has no infinities; identical images keep an explicit marker
    if isinstance(obj, float) and not math.isfinite(obj):
        return "inf" if obj > 0 else ("-inf" if obj < 0 else "nan")
    if isinstance(obj, dict):
        return {k: _finite(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_finite(v) for v in obj]
    return obj


@dataclass
class EvalReport:
    rows: list = field(default_factory=list)
    averaging: str = "per-view PSNR/SSIM, then mean over views"

    def to_dict(self):
        return asdict(self)

    def to_json(self) -> str:
        return json.dumps(_finite(self.to_dict()), indent=2, sort_keys=True, allow_nan=False)

    def to_text(self) -> str:
        header = ["Scene", "Method", "PSNR", "SSIM", "LPIPS", "Train(m)", "Render(s)", "Size(MB)"]
        table = [header]
        for r in self.rows:
            table.append([
                r["scene"],
                r["method"],
                f"{min(r['psnr'], PSNR_CAP):.2f}",
                f"{r['ssim']:.3f}",
                "n/a" if r.get("perceptual") is None else f"{r['perceptual']:.3f}",
                "-" if r.get("train_seconds") is None else f"{r['train_seconds'] / 60.0:.2f}",
                "-" if r.get("render_seconds") is None else f"{r['render_seconds']:.3f}",
                "-" if r.get("bytes") is None else f"{r['bytes']['total'] / 1e6:.2f}",
            ])
        widths = [max(len(row[i]) for row in table) for i in range(len(header))]
        lines = ["  ".join(c.ljust(w) for c, w in zip(row, widths)).rstrip() for row in table]
        lines.insert(1, "  ".join("-" * w for w in widths))
        return "\n".join(lines) + "\n"


def build_report(results) -> EvalReport:
    """One row per result dict.

    Each result carries ``scene``, ``method``, ``psnr_per_view``,
    ``ssim_per_view`` and optionally ``perceptual``, ``render_seconds``,
    ``train_seconds``, ``bytes`` and ``config_fingerprint``.
    """
    rows = []
    for res in results:
        pv = [float(x) for x in res["psnr_per_view"]]
        sv = [float(x) for x in res["ssim_per_view"]]
        rows.append({
            "scene": res["scene"],
            "method": res["method"],
            "psnr": float(np.mean(pv)) if pv else float("nan"),
            "ssim": float(np.mean(sv)) if sv else float("nan"),
            "psnr_per_view": pv,
            "ssim_per_view": sv,
            "perceptual": res.get("perceptual"),
            "render_seconds": res.get("render_seconds"),
            "train_seconds": res.get("train_seconds"),
            "bytes": res.get("bytes"),
            "config_fingerprint": res.get("config_fingerprint"),
        })
    return EvalReport(rows)


def write_report(report: EvalReport, out_dir, stem: str = "report"):
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / f"{stem}.json").write_text(report.to_json())
    (out / f"{stem}.txt").write_text(report.to_text())
    return out / f"{stem}.json", out / f"{stem}.txt"
