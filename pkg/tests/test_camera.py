import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from implicit3d.camera import Camera, check_rigid, generate_rays, look_at, rays_to_camera_frame, transform_rays
from implicit3d.scenes import fixed_view_ring


@pytest.mark.parametrize("eye, forward", [((0, 0, 4), (0, 0, -1)), ((4, 0, 0), (-1, 0, 0)), ((0, -3, 0.1), None)])
def test_look_at_points_forward_at_target(eye, forward):
    pose = look_at(eye, (0, 0, 0))
    check_rigid(pose)
    cam = Camera(32, 32, 45.0, pose)
    expected = -np.asarray(eye, float) / np.linalg.norm(eye) if forward is None else forward
    np.testing.assert_allclose(cam.forward, expected, atol=1e-12)


@pytest.mark.parametrize("eye, up", [((1, 2, 3), (0, 1, 0)), ((0, 4, 0), (0, 1, 0))])
def test_look_at_degenerate_inputs_rejected(eye, up):
    target = (1, 2, 3) if eye == (1, 2, 3) else (0, 0, 0)
    with pytest.raises(ValueError):
        look_at(eye, target, up)


def test_non_rigid_pose_rejected():
    pose = np.eye(4)
    pose[0, 0] = 2.0
    with pytest.raises(ValueError):
        Camera(8, 8, 40.0, pose)


def test_centre_pixel_looks_forward():
    cam = Camera(33, 17, 50.0, look_at((1.0, 2.0, 3.0), (0.2, -0.1, 0.0)))
    rays = generate_rays(cam, [8 * 33 + 16])
    np.testing.assert_allclose(rays.directions[0], cam.forward, atol=1e-6)


def test_top_centre_pixel_angle():
    h, fov = 41, 40.0
    cam = Camera(41, h, fov, look_at((0, 0, 3), (0, 0, 0)))
    d = generate_rays(cam, [20]).directions[0]
    angle = np.degrees(np.arccos(np.dot(d, cam.forward)))
    expected = np.degrees(np.arctan((h / 2 - 0.5) / cam.focal))
    assert abs(angle - expected) < 1e-6
    assert angle < fov / 2
    assert d[1] > 0  # top row points up


def test_rays_unit_norm_and_bounds():
    cam = fixed_view_ring(n=4, width=24, height=16)[1]
    rays = generate_rays(cam)
    assert len(rays) == 24 * 16
    np.testing.assert_allclose(np.linalg.norm(rays.directions, axis=1), 1.0, atol=1e-12)
    assert 0 <= rays.t_near < rays.t_far
    with pytest.raises(IndexError):
        generate_rays(cam, [24 * 16])
    with pytest.raises(IndexError):
        generate_rays(cam, [-1])


@settings(max_examples=30)
@given(seed=st.integers(0, 2**31), az=st.floats(0, 2 * np.pi), el=st.floats(-1.2, 1.2))
def test_camera_frame_round_trip(seed, az, el):
    eye = 3.0 * np.array([np.cos(el) * np.sin(az), np.sin(el), np.cos(el) * np.cos(az)])
    cam = Camera(9, 7, 35.0, look_at(eye, (0, 0, 0)))
    idx = np.random.default_rng(seed).integers(0, 63, 10)
    rays = generate_rays(cam, idx)
    local = rays_to_camera_frame(rays, cam)
    back = transform_rays(local, cam.camera_to_world)
    np.testing.assert_allclose(back.origins, rays.origins, atol=1e-6)
    np.testing.assert_allclose(back.directions, rays.directions, atol=1e-6)
    np.testing.assert_allclose(local.origins, 0.0, atol=1e-6)


def test_ring_axis_rays_pass_through_origin():
    for cam in fixed_view_ring(n=16, width=65, height=65):
        rays = generate_rays(cam, [32 * 65 + 32])
        dist = np.linalg.norm(cam.origin)
        np.testing.assert_allclose(rays.at(np.array([[dist]]))[0, 0], 0.0, atol=1e-6)
