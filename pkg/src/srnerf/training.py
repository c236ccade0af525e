"""Training protocol: LR warm-up, end-to-end render+SR finetuning, strategy matrix, distillation."""
from __future__ import annotations

import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field as dc_field, replace
from pathlib import Path

import numpy as np
import torch
from scipy.spatial.transform import Rotation, Slerp

from .checkpoint import CheckpointError, load_archive, save_archive, state_to_numpy
from .data import SceneDataset, View, downsample_dataset
from .evaluation import psnr
from .field import FieldConfig, RadianceField, build_field
from .geometry import CameraModel, downscale_camera
from .renderer import RenderConfig, camera_rays, render_image, render_rays
from .sampling import PatchPair, PatchSpec, augment_pair, grid_patches, make_patch_pair, random_patch
from .sr import SRNetwork, bilinear_downsample, bilinear_upscale, build_sr_network, load_pretrained, upscale

__all__ = [
    "STRATEGIES",
    "TrainConfig",
    "TrainState",
    "Pipeline",
    "TrainingDiverged",
    "derive_seeds",
    "warmup_backbone",
    "compute_patch_loss",
    "patch_prediction",
    "train_end_to_end",
    "distill",
    "interpolate_poses",
    "pretrain_sr",
    "evaluate_views",
    "trainable_groups",
]

log = logging.getLogger(__name__)

STRATEGIES = ("Bilinear", "Pretrained", "Scratch", "FT-GridPatch", "FT-RandPatch", "Distillation")
DEFAULT_PATCH = {2: 256, 4: 128, 8: 128}
_STRATEGY_ALIASES = {s.lower(): s for s in STRATEGIES}


def canonical_strategy(name: str) -> str:
    key = str(name).lower().replace("_", "-")
    if key not in _STRATEGY_ALIASES:
        raise ValueError(f"unknown strategy {name!r}; valid strategies: {', '.join(STRATEGIES)}")
    return _STRATEGY_ALIASES[key]


class TrainingDiverged(RuntimeError):
    pass


@dataclass
class TrainConfig:
    strategy: str = "FT-RandPatch"
    ratio: int = 2
    warmup_iters: int = 5000
    epochs: int | None = None  # None: 150, or 100 for Distillation
    learning_rate: float = 1e-4
    patch_size: int | None = None  # None: per-ratio default
    betas: tuple = (0.9, 0.99)
    eps: float = 1e-8
    seed: int = 0
    device: str = "cpu"
    augmentation: dict = dc_field(default_factory=lambda: {"max_rotation_deg": 0.0, "hflip_prob": 0.0})
    # warm-up (backbone) schedule
    warmup_batch: int = 4096
    warmup_lr_grid: float = 0.02
    warmup_lr_network: float = 1e-3
    warmup_lr_decay: float = 0.1
    upsample_iters: tuple = (2000, 3000, 4000)
    final_resolution: int = 128
    # rendering
    n_samples: int = 192
    eval_n_samples: int | None = None
    # models
    field: dict = dc_field(default_factory=lambda: {"resolution": (64, 64, 64)})
    sr_blocks: int = 8
    sr_channels: int = 32
    pretrained_sr: str | None = None
    # bookkeeping
    checkpoint_every: int = 10
    distill_images: int = 1000
    skip_warmup: bool = False

    def __post_init__(self):
        self.strategy = canonical_strategy(self.strategy)
        if self.ratio not in DEFAULT_PATCH:
            raise ValueError(f"ratio must be one of {sorted(DEFAULT_PATCH)}")
        if self.device != "cpu":
            raise ValueError("only the 'cpu' device is supported")
        self.betas = tuple(self.betas)
        self.upsample_iters = tuple(self.upsample_iters)

    @property
    def resolved_epochs(self) -> int:
        if self.epochs is not None:
            return int(self.epochs)
        return 100 if self.strategy == "Distillation" else 150

    @property
    def resolved_patch(self) -> int:
        return int(self.patch_size or DEFAULT_PATCH[self.ratio])

    def field_config(self, bounding_box) -> FieldConfig:
        kw = dict(self.field)
        kw.setdefault("bounding_box", tuple(map(tuple, bounding_box)))
        if "resolution" in kw:
            kw["resolution"] = tuple(kw["resolution"])
        return FieldConfig(**kw)

    def to_dict(self):
        return asdict(self)


def derive_seeds(seed: int, names=("field", "sr", "warmup", "patches", "render", "augment", "order", "poses")):
    """Independent, reproducible sub-seeds for each consumer of randomness."""
    children = np.random.SeedSequence(seed).spawn(len(names))
    return {n: int(c.generate_state(1)[0]) for n, c in zip(names, children)}


class Pipeline:
    """A radiance field rendered at LR followed by an upsampler (SR network or bilinear)."""

    def __init__(self, field: RadianceField, sr: SRNetwork | None, ratio: int, render: RenderConfig | None = None):
        self.field = field
        self.sr = sr
        self.ratio = ratio
        self.render_config = render or RenderConfig()
        if sr is not None and sr.ratio != ratio:
            raise ValueError(f"SR ratio {sr.ratio} does not match pipeline ratio {ratio}")

    def upsample(self, lr):
        if self.sr is None:
            return bilinear_upscale(lr, self.ratio)
        return upscale(self.sr, lr.to(self.sr.mean_shift.dtype) if torch.is_tensor(lr) else lr)

    def render_hr(self, camera: CameraModel, config: RenderConfig | None = None, use_sr: bool = True):
        """Render at LR through ``camera`` downscaled by the ratio, then upsample."""
        lr_cam = downscale_camera(camera, self.ratio)
        out = render_image(self.field, lr_cam, config or self.render_config)
        if not use_sr:
            return out.rgb
        with torch.no_grad():
            hr = self.upsample(torch.as_tensor(out.rgb))
        return hr.clamp(0.0, 1.0).numpy()

    def size_bytes(self):
        from .field import size_bytes
        return {"field": size_bytes(self.field), "sr": size_bytes(self.sr) if self.sr is not None else 0}


# ---------------------------------------------------------------- warm-up

def _ray_table(views, ndc=False):
    origins, dirs, view_dirs, rgbs = [], [], [], []
    for v in views:
        o, d, vd, near, far = camera_rays(v.camera, ndc)
        origins.append(o)
        dirs.append(d)
        view_dirs.append(vd)
        rgbs.append(v.image.reshape(-1, 3))
    cat = np.concatenate
    return cat(origins), cat(dirs), cat(view_dirs), cat(rgbs), near, far


def _warmup_optimizer(field, lr_grid, lr_net, betas):
    grids = list(field.density_grid.parameters()) + [p for n, p in field.appearance_grid.named_parameters()
                                                      if not n.startswith("mixing")]
    nets = list(field.color_decoder.parameters())
    if field.appearance_grid.mixing is not None:
        nets += list(field.appearance_grid.mixing.parameters())
    return torch.optim.Adam([{"params": grids, "lr": lr_grid}, {"params": nets, "lr": lr_net}], betas=betas)


def _resolution_schedule(start, final, n_steps):
    if n_steps == 0:
        return []
    vals = np.exp(np.linspace(np.log(start), np.log(final), n_steps + 1))[1:]
    return [int(round(v)) for v in vals]


def warmup_backbone(field: RadianceField, dataset: SceneDataset, config: TrainConfig, iters: int | None = None,
                    lr_dataset: SceneDataset | None = None, loss_log: list | None = None,
                    dump_dir=None) -> RadianceField:
    """Per-ray stochastic training of the field against LR targets.

    The grid is upsampled on ``config.upsample_iters`` (log-spaced towards
    ``config.final_resolution``) and the learning rates decay exponentially
    by ``warmup_lr_decay`` over the run. Returns the warmed field (possibly a
    new object when the grid was upsampled).
    """
    iters = config.warmup_iters if iters is None else iters
    if iters == 0:
        return field
    lr_ds = lr_dataset or downsample_dataset(dataset, config.ratio)
    origins, dirs, view_dirs, rgbs, near, far = _ray_table(lr_ds["train"], lr_ds.ndc)
    dtype = field.dtype
    origins, dirs, view_dirs, rgbs = (torch.as_tensor(x, dtype=dtype) for x in (origins, dirs, view_dirs, rgbs))
    seeds = derive_seeds(config.seed)
    gen = torch.Generator().manual_seed(seeds["warmup"])
    schedule = [it for it in config.upsample_iters if 0 < it < iters]
    start_res = max(field.config.resolution)
    targets = dict(zip(schedule, _resolution_schedule(start_res, max(config.final_resolution, start_res), len(schedule))))
    decay = config.warmup_lr_decay ** (1.0 / iters)
    opt = _warmup_optimizer(field, config.warmup_lr_grid, config.warmup_lr_network, config.betas)
    bg = lr_ds.background
    n_rays = origins.shape[0]
    for it in range(iters):
        if it in targets:
            res = targets[it]
            field = field.upsample((res, res, res))
            factor = decay ** it
            opt = _warmup_optimizer(field, config.warmup_lr_grid * factor, config.warmup_lr_network * factor,
                                    config.betas)
        idx = torch.randint(0, n_rays, (min(config.warmup_batch, n_rays),), generator=gen)
        out = render_rays(field, origins[idx], dirs[idx], near, far, config.n_samples, stratified=True,
                          generator=gen, background=bg, weight_threshold=1e-4, clip_to_box=not lr_ds.ndc,
                          view_dirs=view_dirs[idx])
        loss = torch.mean((out["rgb"] - rgbs[idx]) ** 2)
        if not torch.isfinite(loss):
            _dump_and_raise(field, None, dump_dir, f"warm-up loss became {loss.item()} at iteration {it}")
        opt.zero_grad(set_to_none=True)
        loss.backward()
        opt.step()
        for g in opt.param_groups:
            g["lr"] *= decay
        if loss_log is not None:
            loss_log.append(float(loss.item()))
    return field


def _dump_and_raise(field, sr, dump_dir, message):
    if dump_dir is not None:
        dump = Path(dump_dir) / "diverged"
        dump.mkdir(parents=True, exist_ok=True)
        field.save(dump / "field.npz")
        if sr is not None:
            from .sr import save_sr
            save_sr(sr, dump / "sr.npz")
        message += f" (state dumped to {dump})"
    raise TrainingDiverged(message)


# ---------------------------------------------------------------- patch loss

def patch_prediction(pipeline: Pipeline, pair: PatchPair, generator=None, stratified=False, offsets=None):
    """Render the LR rays of ``pair`` and upsample: ``[P, P, 3]`` tensor."""
    n = pair.lr_size
    cfg = pipeline.render_config
    o, d, vd, near, far = camera_rays(pair.camera, cfg.ndc, pair.lr_rays)
    dtype = pipeline.field.dtype
    o, d, vd = (torch.as_tensor(x, dtype=dtype) for x in (o, d, vd))
    out = render_rays(pipeline.field, o, d, near, far, cfg.n_samples, offsets=offsets, stratified=stratified,
                      generator=generator, background=cfg.background, weight_threshold=cfg.weight_threshold,
                      clip_to_box=cfg.clip_to_box and not cfg.ndc, view_dirs=vd)
    lr = out["rgb"].view(n, n, 3)
    return pipeline.upsample(lr)


def compute_patch_loss(pipeline: Pipeline, pair: PatchPair, generator=None, stratified=False, offsets=None,
                       prediction=None):
    """Mean squared error over valid HR pixels and channels (differentiable)."""
    pred = patch_prediction(pipeline, pair, generator, stratified, offsets) if prediction is None else prediction
    target = torch.as_tensor(pair.hr_target, dtype=pred.dtype)
    mask = torch.as_tensor(pair.mask)
    if not mask.any():
        raise ValueError("patch has no valid pixels")
    diff = (pred - target)[mask]
    loss = torch.mean(diff ** 2)
    if not torch.isfinite(loss):
        raise TrainingDiverged(
            f"non-finite patch loss at origin {pair.spec.origin}: "
            f"prediction finite={bool(torch.isfinite(pred).all())}"
        )
    return loss


# ---------------------------------------------------------------- end-to-end

def trainable_groups(pipeline: Pipeline, strategy: str):
    """Parameter groups that receive updates under ``strategy``."""
    strategy = canonical_strategy(strategy)
    groups = {"field": list(pipeline.field.parameters())}
    if strategy in ("Scratch", "FT-GridPatch", "FT-RandPatch", "Distillation") and pipeline.sr is not None:
        groups["sr"] = list(pipeline.sr.parameters())
    return groups


@dataclass
class TrainState:
    field: RadianceField
    sr: SRNetwork | None
    optimizer: torch.optim.Optimizer
    epoch: int = 0
    iteration: int = 0
    rng: np.random.Generator = None
    render_gen: torch.Generator = None
    loss_history: list = dc_field(default_factory=list)
    wall_clock: dict = dc_field(default_factory=dict)
    grid_queues: dict = dc_field(default_factory=dict)
    best_psnr: float = -math.inf
    strategy: str = "FT-RandPatch"

    # -- persistence
    def save(self, path, config: TrainConfig | None = None):
        arrays = state_to_numpy(self.field, "field/")
        if self.sr is not None:
            arrays.update(state_to_numpy(self.sr, "sr/"))
        opt_state = self.optimizer.state_dict()
        for pid, st in opt_state["state"].items():
            for key, val in st.items():
                arrays[f"opt/{pid}/{key}"] = val.detach().cpu().numpy() if torch.is_tensor(val) else np.asarray(val)
        arrays["rng/torch"] = self.render_gen.get_state().numpy()
        header = {
            "kind": "train_state",
            "strategy": self.strategy,
            "epoch": self.epoch,
            "iteration": self.iteration,
            "field_config": {**self.field.config.to_dict(), "dtype": str(self.field.dtype).replace("torch.", "")},
            "sr_config": self.sr.config() if self.sr is not None else None,
            "optimizer": {"param_groups": opt_state["param_groups"]},
            "rng_numpy": _jsonable(self.rng.bit_generator.state),
            "loss_history": self.loss_history,
            "grid_queues": {str(k): v for k, v in self.grid_queues.items()},
            "best_psnr": self.best_psnr if math.isfinite(self.best_psnr) else None,
            "train_config": config.to_dict() if config is not None else None,
        }
        out = save_archive(path, arrays, header)
        # timings live beside the archive so equal runs give byte-identical checkpoints
        _timing_path(out).write_text(json.dumps(self.wall_clock, sort_keys=True))
        return out

    @classmethod
    def load(cls, path, config: TrainConfig | None = None) -> "TrainState":
        arrays, header = load_archive(path, kind="train_state")
        fcfg = header["field_config"]
        fcfg["resolution"] = tuple(fcfg["resolution"])
        fcfg["bounding_box"] = tuple(tuple(b) for b in fcfg["bounding_box"])
        field = RadianceField(FieldConfig(**fcfg))
        field.load_state_dict({k[6:]: torch.from_numpy(v.copy()) for k, v in arrays.items() if k.startswith("field/")})
        sr = None
        if header["sr_config"] is not None:
            sc = header["sr_config"]
            sr = SRNetwork(sc["ratio"], sc["n_blocks"], sc["n_channels"], sc["mean_shift"], sc["res_scale"],
                           dtype=field.dtype)
            sr.load_state_dict({k[3:]: torch.from_numpy(v.copy()) for k, v in arrays.items() if k.startswith("sr/")})
        strategy = header["strategy"]
        tc = config or TrainConfig(strategy=strategy)
        pipeline = Pipeline(field, sr, sr.ratio if sr is not None else tc.ratio)
        opt = _e2e_optimizer(pipeline, strategy, tc)
        groups = header["optimizer"]["param_groups"]
        state = {}
        for key, val in arrays.items():
            if key.startswith("opt/"):
                _, pid, name = key.split("/", 2)
                state.setdefault(int(pid), {})[name] = torch.from_numpy(val.copy())
        opt.load_state_dict({"state": state, "param_groups": groups})
        rng = np.random.default_rng()
        rng.bit_generator.state = header["rng_numpy"]
        gen = torch.Generator()
        gen.set_state(torch.from_numpy(arrays["rng/torch"].copy()))
        best = header.get("best_psnr")
        timing = _timing_path(path)
        wall_clock = json.loads(timing.read_text()) if timing.is_file() else {}
        return cls(field, sr, opt, header["epoch"], header["iteration"], rng, gen, header["loss_history"],
                   wall_clock, {int(k): v for k, v in header["grid_queues"].items()},
                   -math.inf if best is None else best, strategy)

    def pipeline(self, config: TrainConfig) -> Pipeline:
        return Pipeline(self.field, self.sr, config.ratio, _train_render_config(config, self.field))


def _timing_path(path):
    path = Path(path)
    return path.with_name(path.stem + ".timing.json")


def _jsonable(obj):
    if isinstance(obj, dict):
        return {k: _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (np.integer,)):
        return int(obj)
    return obj


def _train_render_config(config: TrainConfig, field, background=(1.0, 1.0, 1.0)):
    return RenderConfig(n_samples=config.n_samples, stratified=True, background=tuple(background),
                        weight_threshold=1e-4)


def _e2e_optimizer(pipeline, strategy, config: TrainConfig):
    params = [p for group in trainable_groups(pipeline, strategy).values() for p in group]
    return torch.optim.Adam(params, lr=config.learning_rate, betas=config.betas, eps=config.eps)


def _freeze(pipeline, strategy):
    trainable = {id(p) for g in trainable_groups(pipeline, strategy).values() for p in g}
    for module in (pipeline.field, pipeline.sr):
        if module is None:
            continue
        for p in module.parameters():
            p.requires_grad_(id(p) in trainable)


def _next_patch(state: TrainState, image_idx, h, w, config: TrainConfig, sampler: str):
    size = config.resolved_patch
    if sampler == "random":
        return random_patch(h, w, size, state.rng, config.ratio)
    queue = state.grid_queues.get(image_idx)
    if not queue:
        tiles = grid_patches(h, w, size, config.ratio)
        order = state.rng.permutation(len(tiles))
        queue = [list(tiles[i].origin) for i in order]
    origin = queue.pop(0)
    state.grid_queues[image_idx] = queue
    return PatchSpec(tuple(origin), size, config.ratio)


def init_state(pipeline: Pipeline, config: TrainConfig) -> TrainState:
    seeds = derive_seeds(config.seed)
    _freeze(pipeline, config.strategy)
    return TrainState(
        field=pipeline.field,
        sr=pipeline.sr,
        optimizer=_e2e_optimizer(pipeline, config.strategy, config),
        rng=np.random.default_rng(seeds["patches"]),
        render_gen=torch.Generator().manual_seed(seeds["render"]),
        strategy=config.strategy,
    )


def evaluate_views(pipeline: Pipeline, views, n_samples=None, background=None):
    """Mean HR PSNR of ``pipeline`` over ``views`` (deterministic midpoint sampling)."""
    cfg = RenderConfig(n_samples=n_samples or pipeline.render_config.n_samples, stratified=False,
                       background=tuple(background or pipeline.render_config.background),
                       ndc=pipeline.render_config.ndc)
    scores = [psnr(pipeline.render_hr(v.camera, cfg), v.image) for v in views]
    return float(np.mean(scores)), scores


def train_end_to_end(pipeline: Pipeline, dataset: SceneDataset, config: TrainConfig, state: TrainState | None = None,
                     run_dir=None, sampler: str | None = None, epochs: int | None = None) -> TrainState:
    """One patch per training image per epoch; Adam at a constant learning rate.

    ``sampler`` defaults to ``"random"`` for FT-RandPatch and ``"grid"``
    otherwise. With ``run_dir`` set, checkpoints land there every
    ``config.checkpoint_every`` epochs together with a best-validation
    snapshot and a line-delimited training log.
    """
    strategy = config.strategy
    if strategy == "Bilinear" and pipeline.sr is not None:
        raise ValueError("Bilinear strategy expects a pipeline without an SR network")
    if strategy != "Bilinear" and pipeline.sr is None:
        raise ValueError(f"{strategy} needs an SR network")
    sampler = sampler or ("random" if strategy == "FT-RandPatch" else "grid")
    pipeline.render_config = replace(pipeline.render_config, n_samples=config.n_samples, stratified=True,
                                     background=tuple(dataset.background), ndc=dataset.ndc)
    state = state or init_state(pipeline, config)
    _freeze(pipeline, strategy)
    run_dir = Path(run_dir) if run_dir is not None else None
    log_fh = None
    if run_dir is not None:
        run_dir.mkdir(parents=True, exist_ok=True)
        log_fh = open(run_dir / "train_log.jsonl", "a")
    views = dataset["train"]
    h, w = views[0].image.shape[:2]
    total_epochs = config.resolved_epochs if epochs is None else epochs
    aug = config.augmentation or {}
    augment = aug.get("max_rotation_deg", 0) > 0 or aug.get("hflip_prob", 0) > 0
    val_views = dataset.splits.get("val") or []
    try:
        while state.epoch < total_epochs:
            t0 = time.perf_counter()
            order = state.rng.permutation(len(views))
            for idx in order:
                view = views[int(idx)]
                spec = _next_patch(state, int(idx), h, w, config, sampler)
                pair = make_patch_pair(view.image, view.camera, spec)
                if augment:
                    pair = augment_pair(pair, aug, state.rng)
                loss = compute_patch_loss(pipeline, pair, generator=state.render_gen, stratified=True)
                state.optimizer.zero_grad(set_to_none=True)
                loss.backward()
                state.optimizer.step()
                state.iteration += 1
                state.loss_history.append(float(loss.item()))
            state.epoch += 1
            dt = time.perf_counter() - t0
            state.wall_clock["end_to_end"] = state.wall_clock.get("end_to_end", 0.0) + dt
            if log_fh is not None:
                epoch_losses = state.loss_history[-len(views):]
                log_fh.write(json.dumps({"epoch": state.epoch, "iter": state.iteration,
                                         "loss": float(np.mean(epoch_losses)), "lr": config.learning_rate,
                                         "wall_seconds": state.wall_clock["end_to_end"]}) + "\n")
                log_fh.flush()
                if state.epoch % config.checkpoint_every == 0 or state.epoch == total_epochs:
                    if val_views:
                        score, _ = evaluate_views(pipeline, val_views[:1], background=dataset.background)
                        if score > state.best_psnr:
                            state.best_psnr = score
                            state.save(run_dir / "best.npz", config)
                    state.save(run_dir / f"epoch_{state.epoch:04d}.npz", config)
                    state.save(run_dir / "last.npz", config)
    except TrainingDiverged as exc:
        _dump_and_raise(pipeline.field, pipeline.sr, run_dir, str(exc))
    finally:
        if log_fh is not None:
            log_fh.close()
    return state


# ---------------------------------------------------------------- distillation

def interpolate_poses(cameras, n, rng: np.random.Generator):
    """Novel cameras between random neighbouring training poses (slerp + lerp)."""
    if n == 0:
        return []
    if len(cameras) < 2:
        raise ValueError("need at least two cameras to interpolate")
    out = []
    for _ in range(n):
        i = int(rng.integers(0, len(cameras)))
        a, b = cameras[i], cameras[(i + 1) % len(cameras)]
        s = float(rng.uniform(0.0, 1.0))
        rots = Rotation.from_matrix(np.stack([a.pose[:3, :3], b.pose[:3, :3]]))
        pose = np.eye(4)
        pose[:3, :3] = Slerp([0.0, 1.0], rots)([s]).as_matrix()[0]
        pose[:3, 3] = (1 - s) * a.pose[:3, 3] + s * b.pose[:3, 3]
        out.append(a.with_pose(pose))
    return out


def distill(teacher: RadianceField | str | Path, pipeline: Pipeline, dataset: SceneDataset, config: TrainConfig,
            n_images: int | None = None, epochs: int | None = None, run_dir=None,
            teacher_render: RenderConfig | None = None, state: TrainState | None = None) -> TrainState:
    """Augment training views with teacher renders at novel poses, then train on grid patches.

    The teacher is an HR radiance field (or a path to its checkpoint); the
    time spent rendering pseudo views is booked as ``pseudo_data`` in the
    returned state's wall-clock ledger.
    """
    if isinstance(teacher, (str, Path)):
        if not Path(teacher).is_file():
            raise CheckpointError(f"teacher checkpoint not found: {teacher}")
        teacher = RadianceField.load(teacher)
    n_images = config.distill_images if n_images is None else n_images
    seeds = derive_seeds(config.seed)
    rng = np.random.default_rng(seeds["poses"])
    train = dataset["train"]
    t0 = time.perf_counter()
    cams = interpolate_poses([v.camera for v in train], n_images, rng)
    rcfg = teacher_render or RenderConfig(n_samples=config.eval_n_samples or config.n_samples,
                                          background=tuple(dataset.background), ndc=dataset.ndc)
    pseudo = [View(render_image(teacher, c, rcfg).rgb.astype(np.float32), c, f"pseudo_{k:04d}")
              for k, c in enumerate(cams)]
    if run_dir is not None:
        from .renderer import write_png
        for v in pseudo:
            write_png(Path(run_dir) / "pseudo" / f"{v.name}.png", v.image)
    pseudo_seconds = time.perf_counter() - t0
    augmented = replace(dataset, splits={**dataset.splits, "train": list(train) + pseudo})
    cfg = replace(config, strategy="Distillation")
    state = train_end_to_end(pipeline, augmented, cfg, state=state, run_dir=run_dir, sampler="grid",
                             epochs=cfg.resolved_epochs if epochs is None else epochs)
    state.wall_clock["pseudo_data"] = state.wall_clock.get("pseudo_data", 0.0) + pseudo_seconds
    return state


# ---------------------------------------------------------------- SR pretraining

def pretrain_sr(net: SRNetwork, images, iters=1000, patch=64, batch=4, lr=1e-3, seed=0):
    """Fit ``net`` on (area-downsampled crop, crop) pairs cut from ``images``.

    Stands in for a publicly pretrained SR checkpoint when none is available.
    """
    rng = np.random.default_rng(seed)
    r = net.ratio
    patch -= patch % r
    opt = torch.optim.Adam(net.parameters(), lr=lr, betas=(0.9, 0.99))
    dtype = net.mean_shift.dtype
    losses = []
    for _ in range(iters):
        hr = []
        for _ in range(batch):
            img = images[int(rng.integers(0, len(images)))]
            y = int(rng.integers(0, img.shape[0] - patch + 1))
            x = int(rng.integers(0, img.shape[1] - patch + 1))
            hr.append(img[y:y + patch, x:x + patch])
        hr = torch.as_tensor(np.stack(hr), dtype=dtype)
        lr_img = bilinear_downsample(hr, r)
        loss = torch.mean((upscale(net, lr_img) - hr) ** 2)
        opt.zero_grad(set_to_none=True)
        loss.backward()
        opt.step()
        losses.append(float(loss.item()))
    return losses


def build_pipeline(config: TrainConfig, dataset: SceneDataset, field: RadianceField | None = None) -> Pipeline:
    """Fresh (or given) field plus the upsampler the strategy calls for."""
    seeds = derive_seeds(config.seed)
    field = field or build_field(config.field_config(dataset.bounding_box), seed=seeds["field"])
    sr = None
    if config.strategy != "Bilinear":
        mean = tuple(float(x) for x in np.mean([v.image.reshape(-1, 3).mean(0) for v in dataset["train"]], axis=0))
        sr = build_sr_network(config.ratio, config.sr_blocks, config.sr_channels, mean, seed=seeds["sr"],
                              dtype=field.dtype)
        if config.pretrained_sr and config.strategy != "Scratch":
            load_pretrained(sr, config.pretrained_sr, strict=True)
        elif config.strategy == "Pretrained":
            raise ValueError("the Pretrained strategy needs config.pretrained_sr")
    render = RenderConfig(n_samples=config.n_samples, stratified=True, background=tuple(dataset.background),
                          ndc=dataset.ndc)
    return Pipeline(field, sr, config.ratio, render)
