import json

import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st

from srnerf.checkpoint import CheckpointError, load_archive, save_archive
from srnerf.sr import (
    bilinear_downsample,
    bilinear_upscale,
    build_sr_network,
    import_state_dict,
    load_pretrained,
    save_sr,
    upscale,
)


def conv_count(cin, cout):
    return cin * cout * 9 + cout


def test_parameter_count_matches_enumeration():
    net = build_sr_network(2, n_blocks=16, n_channels=64, seed=0)
    c = 64
    expected = conv_count(3, c) + 16 * 2 * conv_count(c, c) + conv_count(c, c) + conv_count(c, 4 * c) + conv_count(c, 3)
    assert sum(p.numel() for p in net.parameters()) == expected


def test_ratio_stages_and_errors():
    assert build_sr_network(8, 1, 4).n_stages == 3
    assert build_sr_network(4, 1, 4).n_stages == 2
    with pytest.raises(ValueError):
        build_sr_network(3)


def test_shape_contract_and_min_size():
    net = build_sr_network(2, 2, 8, seed=0)
    out = upscale(net, np.random.default_rng(0).random((64, 64, 3)).astype(np.float32))
    assert out.shape == (128, 128, 3)
    with pytest.raises(ValueError):
        upscale(net, np.zeros((7, 9, 3), dtype=np.float32))
    bad = np.zeros((8, 8, 3), dtype=np.float32)
    bad[0, 0, 0] = np.nan
    with pytest.raises(ValueError):
        upscale(net, bad)


@settings(max_examples=12, deadline=None)
@given(st.integers(8, 20), st.integers(8, 20), st.sampled_from([2, 4, 8]))
def test_shape_property(h, w, r):
    net = build_sr_network(r, 1, 4, seed=1)
    out = upscale(net, torch.rand(2, h, w, 3))
    assert tuple(out.shape) == (2, r * h, r * w, 3)


def test_zero_network_returns_mean_shift():
    m = (0.3, 0.45, 0.6)
    net = build_sr_network(4, 3, 8, mean_shift=m, seed=0)
    with torch.no_grad():
        for p in net.parameters():
            p.zero_()
    out = upscale(net, np.random.default_rng(0).random((10, 12, 3)).astype(np.float32))
    assert np.all(out == np.asarray(m, dtype=np.float32))


def test_constant_input_gives_constant_interior():
    net = build_sr_network(2, 4, 16, seed=3, dtype=torch.float64)
    out = upscale(net, np.full((24, 24, 3), 0.7))
    # reflect padding keeps a constant input constant everywhere
    inner = out[4:-4, 4:-4]
    assert np.abs(inner - inner[0, 0]).max() < 1e-5


def test_translation_equivariance_on_interior():
    net = build_sr_network(2, 2, 8, seed=2, dtype=torch.float64)
    img = np.random.default_rng(1).random((32, 32, 3))
    full = upscale(net, img)
    shifted = upscale(net, img[4:, 4:])
    np.testing.assert_allclose(full[8 + 16:48, 8 + 16:48], shifted[16:40, 16:40], atol=1e-10)


def test_input_gradient_matches_finite_differences():
    net = build_sr_network(2, 1, 4, seed=0, dtype=torch.float64)
    x = torch.rand(8, 8, 3, dtype=torch.float64, requires_grad=True)
    loss = upscale(net, x).pow(2).sum()
    loss.backward()
    rng = np.random.default_rng(0)
    for _ in range(5):
        idx = tuple(int(rng.integers(0, n)) for n in x.shape)
        with torch.no_grad():
            xp, xm = x.clone(), x.clone()
            xp[idx] += 1e-4
            xm[idx] -= 1e-4
            num = (upscale(net, xp).pow(2).sum() - upscale(net, xm).pow(2).sum()) / 2e-4
        assert abs(float(num) - float(x.grad[idx])) / max(abs(float(num)), 1e-8) < 1e-3


def test_save_load_bitwise(tmp_path):
    net = build_sr_network(2, 2, 8, seed=5)
    path = save_sr(net, tmp_path / "sr.npz")
    other = load_pretrained(build_sr_network(2, 2, 8, seed=6), path)
    img = np.random.default_rng(0).random((16, 16, 3)).astype(np.float32)
    assert np.array_equal(upscale(net, img), upscale(other, img))


def test_wrong_ratio_strict_names_first_mismatch(tmp_path):
    path = save_sr(build_sr_network(4, 2, 8, seed=0), tmp_path / "sr4.npz")
    with pytest.raises(CheckpointError, match="unexpected array 'stages.1.bias'"):
        load_pretrained(build_sr_network(2, 2, 8), path)
    path = save_sr(build_sr_network(2, 2, 16, seed=0), tmp_path / "sr_wide.npz")
    with pytest.raises(CheckpointError, match="head.weight"):
        load_pretrained(build_sr_network(2, 2, 8), path)


def test_nonstrict_body_only_keeps_tail(tmp_path):
    src = build_sr_network(2, 2, 8, seed=0)
    arrays = {k: v.numpy() for k, v in src.state_dict().items() if not k.startswith(("stages", "out"))}
    path = save_archive(tmp_path / "body.npz", arrays, {"kind": "sr_network"})
    dst = build_sr_network(2, 2, 8, seed=1)
    tail_before = {k: v.clone() for k, v in dst.state_dict().items() if k.startswith(("stages", "out"))}
    load_pretrained(dst, path, strict=False)
    for k, v in tail_before.items():
        assert torch.equal(dst.state_dict()[k], v)
    assert torch.equal(dst.head.weight, src.head.weight)
    with pytest.raises(CheckpointError):
        load_pretrained(dst, path, strict=True)


def test_missing_file_and_bad_version(tmp_path):
    with pytest.raises(CheckpointError):
        load_pretrained(build_sr_network(2, 1, 4), tmp_path / "nope.npz")
    path = save_sr(build_sr_network(2, 1, 4), tmp_path / "v.npz")
    arrays, header = load_archive(path)
    header["format_version"] = 99
    payload = dict(arrays)
    payload["__header__"] = np.frombuffer(json.dumps(header).encode(), dtype=np.uint8)
    np.savez(tmp_path / "v2.npz", **payload)
    with pytest.raises(CheckpointError, match="format version"):
        load_pretrained(build_sr_network(2, 1, 4), tmp_path / "v2.npz")


def test_import_public_layout():
    net = build_sr_network(4, 2, 8, seed=0)
    ours = net.state_dict()
    theirs = {
        "head.0.weight": torch.randn_like(ours["head.weight"]),
        "body.0.body.0.weight": torch.randn_like(ours["blocks.0.conv1.weight"]),
        "body.1.body.2.bias": torch.randn_like(ours["blocks.1.conv2.bias"]),
        "body.2.weight": torch.randn_like(ours["body_out.weight"]),
        "tail.0.2.weight": torch.randn_like(ours["stages.1.weight"]),
        "tail.1.bias": torch.randn_like(ours["out.bias"]),
        "sub_mean.weight": torch.eye(3).view(3, 3, 1, 1),
    }
    filled = import_state_dict(net, theirs)
    assert filled == sorted(["head.weight", "blocks.0.conv1.weight", "blocks.1.conv2.bias", "body_out.weight",
                             "stages.1.weight", "out.bias"])
    assert torch.equal(net.blocks[1].conv2.bias, theirs["body.1.body.2.bias"])


def test_bilinear_examples():
    row = np.array([[[0.0] * 3, [1.0] * 3]])  # 1x2 image
    up = bilinear_upscale(row, 2)
    np.testing.assert_allclose(up[0, :, 0], [0.0, 0.25, 0.75, 1.0], atol=1e-12)
    np.testing.assert_allclose(up[1, :, 0], [0.0, 0.25, 0.75, 1.0], atol=1e-12)
    const = np.full((5, 6, 3), 0.3)
    np.testing.assert_allclose(bilinear_upscale(const, 4), 0.3, atol=1e-12)
    img = np.random.default_rng(0).random((4, 4, 3))
    assert bilinear_upscale(img, 1) is img
    assert bilinear_downsample(img, 1) is img
    np.testing.assert_allclose(bilinear_downsample(const[:4, :4], 2), 0.3, atol=1e-12)
    with pytest.raises(ValueError):
        bilinear_downsample(img, 3)


def test_down_then_up_on_ramp():
    y, x = np.mgrid[0:64, 0:64] / 64.0
    img = np.stack([x, y, 0.5 * (x + y)], axis=-1)
    back = bilinear_upscale(bilinear_downsample(img, 2), 2)
    # exact on the interior; edge clamping costs at most a quarter LR pixel of slope
    assert np.abs(back - img).max() < 0.02
