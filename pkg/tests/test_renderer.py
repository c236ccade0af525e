import math

import numpy as np
import pytest
import torch
from scipy.ndimage import binary_erosion

from oracles import composite_scalar, gradient_check
from srnerf.data import ToyOracle, ToySceneSpec
from srnerf.field import FieldConfig, build_field
from srnerf.geometry import CameraModel, RayBundle, look_at
from srnerf.renderer import RenderConfig, composite, read_png, render_image, render_rays, sample_points, write_png


def bundle(near, far, m=1):
    return RayBundle(np.zeros((m, 3)), np.tile([0.0, 0.0, -1.0], (m, 1)), near, far)


def test_midpoints():
    s = sample_points(bundle(0.0, 1.0), 4)
    np.testing.assert_allclose(s.t_values[0].numpy(), [0.125, 0.375, 0.625, 0.875])
    one = sample_points(bundle(2.0, 6.0), 1)
    assert one.t_values.item() == 4.0 and one.deltas.item() == 4.0
    with pytest.raises(ValueError):
        sample_points(bundle(0.0, 1.0), 0)


def test_stratified_bin_containment():
    g = torch.Generator().manual_seed(0)
    s = sample_points(bundle(1.0, 3.0, m=500), 16, stratified=True, generator=g)
    t = s.t_values.numpy()
    lo = 1.0 + 2.0 * np.arange(16) / 16
    hi = 1.0 + 2.0 * (np.arange(16) + 1) / 16
    assert np.all(t >= lo) and np.all(t < hi)
    assert np.all(np.diff(t, axis=1) > 0)
    d = s.deltas.numpy()
    np.testing.assert_allclose(d[:, :-1], np.diff(t, axis=1))
    np.testing.assert_allclose(d.sum(axis=1), 2.0, atol=1e-12)


def test_composite_hand_examples():
    ln2 = math.log(2.0)
    rgb, w, _ = composite(torch.zeros(3, 5), torch.rand(3, 5, 3), torch.ones(3, 5), (0.2, 0.3, 0.4))
    assert torch.all(w == 0)
    assert torch.all(rgb == torch.tensor([0.2, 0.3, 0.4]))

    rgb, w, _ = composite(torch.tensor([[ln2]], dtype=torch.float64), torch.tensor([[[1.0, 0, 0]]]),
                          torch.ones(1, 1), (0.0, 0.0, 0.0))
    torch.testing.assert_close(w, torch.tensor([[0.5]], dtype=torch.float64))
    torch.testing.assert_close(rgb, torch.tensor([[0.5, 0.0, 0.0]], dtype=torch.float64))

    rgb, w, t_final = composite(torch.tensor([[ln2, ln2]], dtype=torch.float64),
                                torch.tensor([[[1.0, 0, 0], [0, 1.0, 0]]]), torch.ones(1, 2), (0.0, 0.0, 0.0))
    torch.testing.assert_close(rgb, torch.tensor([[0.5, 0.25, 0.0]], dtype=torch.float64))
    torch.testing.assert_close(t_final, torch.tensor([0.25], dtype=torch.float64))


def test_composite_errors():
    with pytest.raises(ValueError):
        composite(-torch.ones(1, 2), torch.zeros(1, 2, 3), torch.ones(1, 2))
    with pytest.raises(ValueError):
        composite(torch.ones(1, 2), torch.zeros(1, 2, 3), -torch.ones(1, 2))


def test_composite_matches_scalar_loop():
    rng = np.random.default_rng(0)
    sig = rng.exponential(2.0, (100, 32))
    col = rng.random((100, 32, 3))
    dl = rng.random((100, 32)) * 0.2
    bg = rng.random(3)
    rgb, w, t_final = composite(torch.from_numpy(sig), torch.from_numpy(col), torch.from_numpy(dl), bg)
    ref_rgb, ref_w, ref_t = composite_scalar(sig, col, dl, bg)
    assert np.abs(rgb.numpy() - ref_rgb).max() <= 1e-5
    assert np.abs(w.numpy() - ref_w).max() <= 1e-5
    np.testing.assert_allclose(w.numpy().sum(1) + t_final.numpy(), 1.0, atol=1e-6)
    # monotone transmittance
    trans = np.concatenate([np.ones((100, 1)), np.exp(-np.cumsum(sig * dl, axis=1))], axis=1)
    assert np.all(np.diff(trans, axis=1) <= 0)


def test_composite_clamps_huge_tau():
    rgb, w, _ = composite(torch.tensor([[1e30, 1.0]], dtype=torch.float64),
                          torch.tensor([[[0.1, 0.2, 0.3], [1, 1, 1]]], dtype=torch.float64), torch.ones(1, 2))
    assert torch.isfinite(rgb).all()
    torch.testing.assert_close(rgb, torch.tensor([[0.1, 0.2, 0.3]], dtype=torch.float64))


def tiny_field(seed=0):
    cfg = FieldConfig(resolution=(4, 4, 4), density_rank=2, appearance_rank=2, appearance_channels=4,
                      bounding_box=((-1.0,) * 3, (1.0,) * 3), hidden=8, dtype="float64",
                      density_shift=-1.0, density_scale=1.0, init_scale=1.0)
    return build_field(cfg, seed=seed)


def test_render_gradients_match_finite_differences():
    field = tiny_field(3)
    o = torch.tensor([[0.1, 0.2, 3.0], [-0.3, 0.1, 3.0]], dtype=torch.float64)
    d = torch.nn.functional.normalize(torch.tensor([[0.05, -0.1, -1.0], [0.1, 0.0, -1.0]], dtype=torch.float64), dim=-1)

    def loss():
        return render_rays(field, o, d, 1.5, 4.5, 8, clip_to_box=False)["rgb"].pow(2).sum()

    rng = np.random.default_rng(0)
    assert gradient_check(loss, list(field.parameters()), rng) < 1e-3


def test_zero_density_gives_background():
    field = tiny_field()
    with torch.no_grad():
        field.config.density_scale = 0.0
    cam = CameraModel.from_fov(12, 10, 0.8, look_at((0.0, -3.0, 1.0)), 1.0, 6.0)
    out = render_image(field, cam, RenderConfig(n_samples=16, background=(0.1, 0.2, 0.3)))
    assert np.all(out.rgb == np.array([0.1, 0.2, 0.3]))
    assert out.rgb.shape == (10, 12, 3) and out.render_seconds > 0


def test_chunking_is_invisible():
    field = build_field(FieldConfig(resolution=(8, 8, 8), bounding_box=((-1.0,) * 3, (1.0,) * 3),
                                    density_shift=0.0, density_scale=1.0, init_scale=1.0), seed=1)
    cam = CameraModel.from_fov(16, 16, 0.8, look_at((0.5, -3.0, 1.0)), 1.0, 6.0)
    b = render_image(field, cam, RenderConfig(n_samples=24, stratified=True, chunk_size=4096, seed=5))
    for chunk in (1, 7, 100):
        a = render_image(field, cam, RenderConfig(n_samples=24, stratified=True, chunk_size=chunk, seed=5))
        assert np.array_equal(a.rgb, b.rgb) and np.array_equal(a.depth, b.depth)
    assert np.all((a.accumulation >= 0) & (a.accumulation <= 1 + 1e-6))


def test_opaque_slab_matches_tracer():
    n = 33
    cfg = FieldConfig(resolution=(n, n, n), density_rank=1, appearance_rank=1, appearance_channels=4,
                      bounding_box=((-1.0,) * 3, (1.0,) * 3), hidden=8)
    field = build_field(cfg, seed=0)
    z = torch.linspace(-1.0, 1.0, n)
    color = torch.tensor([0.2, 0.6, 0.9])
    with torch.no_grad():
        for p in field.density_grid.parameters():
            p.zero_()
        field.density_grid.planes[0].fill_(1.0)
        field.density_grid.lines[0][0] = torch.where(z.abs() <= 0.25 + 1e-6, 60.0, 0.0)
        for p in field.color_decoder.parameters():
            p.zero_()
        field.color_decoder[2].bias.copy_(torch.logit(color))
    cam = CameraModel.from_fov(48, 48, 0.9, look_at((1.2, -2.5, 3.0)), 1.0, 8.0)
    out = render_image(field, cam, RenderConfig(n_samples=256))

    spec = ToySceneSpec(primitives=[{"type": "box", "min": [-1.0, -1.0, -0.25], "max": [1.0, 1.0, 0.25],
                                     "albedo": [1.0, 1.0, 1.0]}])
    hit = np.isfinite(ToyOracle(spec).depth(cam))
    inner = binary_erosion(hit, iterations=2)
    outer = binary_erosion(~hit, iterations=2)
    assert inner.sum() > 100 and outer.sum() > 100
    assert np.abs(out.rgb[inner] - color.numpy()).max() < 0.02
    assert np.abs(out.rgb[outer] - 1.0).max() < 0.02


def test_png_roundtrip(tmp_path):
    rgb = np.random.default_rng(0).random((5, 7, 3))
    path = write_png(tmp_path / "a" / "x.png", rgb)
    back = read_png(path)
    assert np.abs(back - rgb).max() <= 0.5 / 255 + 1e-12
