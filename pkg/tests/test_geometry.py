import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy.spatial.transform import Rotation

from srnerf.geometry import CameraModel, downscale_camera, generate_rays, look_at, ndc_rays, rays_through


def make_camera(w=8, h=6, f=5.0, pose=None, cx=None, cy=None):
    return CameraModel(w, h, f, f, w / 2 if cx is None else cx, h / 2 if cy is None else cy,
                       np.eye(4) if pose is None else pose, 0.5, 10.0)


def test_identity_pose_origins_at_zero():
    rays = generate_rays(make_camera())
    assert rays.origins.shape == (6, 8, 3)
    assert np.all(rays.origins == 0.0)


def test_two_by_two_directions_by_hand():
    cam = CameraModel(2, 2, 1.0, 1.0, 1.0, 1.0, np.eye(4), 0.5, 2.0)
    d = generate_rays(cam).directions
    s = 1.0 / np.sqrt(0.25 + 0.25 + 1.0)
    # row 0 is the top of the image (+y), column 0 the left (-x)
    expected = np.array([
        [[-0.5, 0.5, -1.0], [0.5, 0.5, -1.0]],
        [[-0.5, -0.5, -1.0], [0.5, -0.5, -1.0]],
    ]) * s
    np.testing.assert_allclose(d, expected, atol=1e-12)


def test_directions_unit_norm():
    pose = look_at((3.0, -2.0, 1.5))
    d = generate_rays(make_camera(31, 17, 20.0, pose)).directions
    np.testing.assert_allclose(np.linalg.norm(d, axis=-1), 1.0, atol=1e-6)


def test_pixel_coords_subset_and_bounds():
    cam = make_camera()
    full = generate_rays(cam)
    sub = generate_rays(cam, np.array([[3, 2], [7, 5]]))
    np.testing.assert_array_equal(sub.directions[0], full.directions[2, 3])
    np.testing.assert_array_equal(sub.directions[1], full.directions[5, 7])
    with pytest.raises(IndexError):
        generate_rays(cam, np.array([[8, 0]]))
    with pytest.raises(IndexError):
        generate_rays(cam, np.array([[0, -1]]))


@pytest.mark.parametrize("ratio", [2, 4, 8])
def test_lr_ray_matches_hr_continuous_coordinate(ratio):
    cam = CameraModel(64, 48, 70.0, 71.0, 31.3, 24.9, look_at((1.0, 2.0, 3.0)), 0.1, 9.0)
    lr = downscale_camera(cam, ratio)
    lr_rays = generate_rays(lr).directions
    u = np.arange(lr.width)
    v = np.arange(lr.height)
    uu, vv = np.meshgrid(u, v, indexing="xy")
    # HR pixel-index coordinate of the LR pixel center; its continuous position is +0.5
    hx = (uu + 0.5) * ratio - 0.5
    hy = (vv + 0.5) * ratio - 0.5
    hr = rays_through(cam, hx + 0.5, hy + 0.5).directions
    np.testing.assert_allclose(lr_rays, hr, atol=1e-6)


def test_downscale_examples():
    cam = CameraModel(800, 800, 1111.11, 1111.11, 400.0, 400.0, np.eye(4), 2.0, 6.0)
    assert downscale_camera(cam, 1) == cam
    half = downscale_camera(cam, 2)
    assert (half.width, half.height) == (400, 400)
    assert half.focal_x == pytest.approx(555.555)
    assert half.near == cam.near and half.far == cam.far
    np.testing.assert_array_equal(half.pose, cam.pose)
    with pytest.raises(ValueError):
        downscale_camera(cam, 3)


def test_camera_invariants():
    with pytest.raises(ValueError):
        CameraModel(4, 4, 0.0, 1.0, 2, 2, np.eye(4), 1.0, 2.0)
    with pytest.raises(ValueError):
        CameraModel(4, 4, 1.0, 1.0, 2, 2, np.eye(4), 2.0, 1.0)
    bad = np.eye(4)
    bad[0, 0] = -1.0  # reflection, det = -1
    with pytest.raises(ValueError):
        CameraModel(4, 4, 1.0, 1.0, 2, 2, bad, 1.0, 2.0)


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 10_000))
def test_rotation_equivariance(seed):
    rot = Rotation.random(random_state=seed).as_matrix()
    base = look_at((0.3, -3.0, 1.0))
    rotated = np.eye(4)
    rotated[:3, :3] = rot @ base[:3, :3]
    rotated[:3, 3] = rot @ base[:3, 3]
    d0 = generate_rays(make_camera(9, 7, 6.0, base)).directions
    d1 = generate_rays(make_camera(9, 7, 6.0, rotated)).directions
    np.testing.assert_allclose(d0 @ rot.T, d1, atol=1e-6)


def test_ndc_rays_map_near_plane_to_minus_one():
    cam = make_camera(8, 6, 5.0, np.eye(4))
    rays = generate_rays(cam)
    rays.origins = rays.origins + np.array([0.0, 0.0, 0.0])
    ndc = ndc_rays(cam, rays, near_plane=1.0)
    np.testing.assert_allclose(ndc.origins[..., 2], -1.0, atol=1e-12)
    # far end of the NDC ray (t=1) lies on the plane z_ndc = 1
    np.testing.assert_allclose((ndc.origins + ndc.directions)[..., 2], 1.0, atol=1e-12)
    # the center ray stays on the optical axis
    center = ndc_rays(cam, rays_through(cam, np.array([4.0]), np.array([3.0])))
    np.testing.assert_allclose(center.origins[..., :2], 0.0, atol=1e-12)
