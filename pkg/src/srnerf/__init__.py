"""Radiance fields rendered at low resolution and upsampled by a jointly trained SR network."""
from .data import SceneDataset, ToySceneSpec, generate_toy_scene, load_dataset
from .evaluation import psnr, ssim
from .field import FieldConfig, RadianceField, build_field
from .geometry import CameraModel, generate_rays, look_at
from .renderer import RenderConfig, composite, render_image
from .sr import SRNetwork, bilinear_upscale, build_sr_network, upscale
from .training import STRATEGIES, Pipeline, TrainConfig, TrainState, train_end_to_end, warmup_backbone

__version__ = "0.1.0"

__all__ = [
    "SceneDataset", "ToySceneSpec", "generate_toy_scene", "load_dataset",
    "psnr", "ssim",
    "FieldConfig", "RadianceField", "build_field",
    "CameraModel", "generate_rays", "look_at",
    "RenderConfig", "composite", "render_image",
    "SRNetwork", "bilinear_upscale", "build_sr_network", "upscale",
    "STRATEGIES", "Pipeline", "TrainConfig", "TrainState", "train_end_to_end", "warmup_backbone",
]
