import json

import numpy as np
import pytest

from implicit3d.camera import Camera, look_at
from implicit3d.scenes import (
    SCENES,
    PosedImageSet,
    checker_color,
    fixed_view_ring,
    load_dataset,
    make_scene,
    render_ground_truth,
    render_view,
    save_dataset,
)


def test_ring_geometry():
    cams = fixed_view_ring(16)
    assert len(cams) == 16
    az = [np.degrees(np.arctan2(c.origin[0], c.origin[2])) % 360 for c in cams]
    np.testing.assert_allclose(np.diff(az), 22.5, atol=1e-9)
    for c in cams:
        np.testing.assert_allclose(np.linalg.norm(c.origin), 2.5)
        # distance from the origin to the forward axis
        o, f = c.origin, c.forward
        assert np.linalg.norm(o - np.dot(o, f) * f) < 1e-6
        assert np.degrees(np.arcsin(c.origin[1] / 2.5)) == pytest.approx(30.0)
    a, b = cams[0].origin, cams[8].origin
    np.testing.assert_allclose([a[0], a[2]], [-b[0], -b[2]], atol=1e-12)
    with pytest.raises(ValueError):
        fixed_view_ring(1)


def test_checker_is_mirror_symmetric(rng):
    x = rng.normal(size=(500, 3))
    np.testing.assert_array_equal(checker_color(x), checker_color(x * [-1, 1, 1]))
    assert len(np.unique(checker_color(x), axis=0)) == 2


def test_sphere_silhouette_radius():
    scene = make_scene("checker_sphere")
    cam = Camera(64, 64, 40.0, look_at((0, 0, 2.5), (0, 0, 0)), 1.5, 3.5)
    _, cov = render_view(scene, cam)
    measured = np.sqrt((cov > 0.5).sum() / np.pi)
    expected = cam.focal * np.tan(np.arcsin(0.6 / 2.5))
    assert abs(measured - expected) < 1.0


def test_empty_scene_is_background():
    data = render_ground_truth(make_scene("empty"), fixed_view_ring(2, width=8, height=8))
    np.testing.assert_array_equal(data.rgb, 1.0)
    np.testing.assert_array_equal(data.alpha, 0.0)


def test_mirrored_cameras_give_mirrored_images():
    scene = make_scene("checker_sphere")
    eye = np.array([1.1, 0.9, 2.0])
    a = Camera(24, 24, 40.0, look_at(eye, (0, 0, 0)), 1.0, 4.0)
    b = Camera(24, 24, 40.0, look_at(eye * [-1, 1, 1], (0, 0, 0)), 1.0, 4.0)
    img_a, cov_a = render_view(scene, a)
    img_b, cov_b = render_view(scene, b)
    np.testing.assert_allclose(img_a, img_b[:, ::-1], atol=1e-6)
    np.testing.assert_allclose(cov_a, cov_b[:, ::-1], atol=1e-6)


def test_gradient_energy_grows_as_camera_approaches():
    scene = make_scene("checker_sphere")
    energy = []
    for dist in (4.5, 3.2, 2.2):
        cam = Camera(48, 48, 40.0, look_at((0, 0.8 * dist / 2.5, dist), (0, 0, 0)), dist - 1.0, dist + 1.0)
        img, _ = render_view(scene, cam, samples=256)
        gy, gx = np.gradient(img, axis=(0, 1))
        energy.append(float(np.sum(gx**2 + gy**2)))
    assert energy[0] < energy[1] < energy[2]


def test_dataset_round_trip_and_bit_identical_pngs(tmp_path):
    scene = make_scene("torus")
    cams = fixed_view_ring(3, width=12, height=10)
    first = save_dataset(render_ground_truth(scene, cams, seed=4), tmp_path / "a")
    second = save_dataset(render_ground_truth(scene, cams, seed=4), tmp_path / "b")
    for i in range(3):
        name = f"view_{i:03d}.png"
        assert (first / name).read_bytes() == (second / name).read_bytes()
    doc = json.loads((first / "cameras.json").read_text())
    assert set(doc) == {"width", "height", "fov_y_degrees", "t_near", "t_far", "frames"}
    assert doc["width"] == 12 and doc["height"] == 10
    assert doc["frames"][2]["file"] == "view_002.png"
    assert np.asarray(doc["frames"][0]["camera_to_world"]).shape == (4, 4)
    loaded = load_dataset(first)
    original = render_ground_truth(scene, cams, seed=4)
    np.testing.assert_array_equal(loaded.images, original.images)
    np.testing.assert_allclose(loaded.cameras[1].camera_to_world, cams[1].camera_to_world)
    meta = json.loads((first / "scene.json").read_text())
    assert meta["scene"]["name"] == "torus" and meta["seed"] == 4


def test_mismatched_image_size_rejected(tmp_path):
    cams = fixed_view_ring(2, width=8, height=8)
    d = save_dataset(render_ground_truth(make_scene("empty"), cams), tmp_path / "d")
    doc = json.loads((d / "cameras.json").read_text())
    doc["width"] = 9
    (d / "cameras.json").write_text(json.dumps(doc))
    with pytest.raises(ValueError, match="does not match"):
        load_dataset(d)


def test_image_set_needs_two_views():
    cams = fixed_view_ring(2, width=4, height=4)
    with pytest.raises(ValueError):
        PosedImageSet(np.zeros((1, 4, 4, 4)), cams[:1])


@pytest.mark.parametrize("name", SCENES)
def test_every_scene_renders(name):
    data = render_ground_truth(make_scene(name), fixed_view_ring(2, width=8, height=8), samples=64)
    assert data.images.shape == (2, 8, 8, 4)
    assert np.all((data.images >= 0) & (data.images <= 1))
    if name != "empty":
        assert data.alpha.max() > 0
    with pytest.raises(ValueError):
        make_scene("teapot")
