"""Analytic test scenes and the posed multiview datasets rendered from them.

A dataset directory holds ``view_000.png ...`` (8-bit RGBA), ``cameras.json``
and ``scene.json``.  The same layout is accepted for externally generated views.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

from . import nerf, neus
from .camera import Camera, look_at
from .fields import AnalyticField, Empty, Slab, Sphere, Torus, two_spheres

GT_SAMPLES = 512
GT_SHARPNESS = 2000.0


def checker_color(x, cells_azimuth=4, cells_polar=6, colors=((0.9, 0.35, 0.2), (0.2, 0.45, 0.85))):
    """Checker pattern on directions from the origin, mirror-symmetric in x."""
    x = np.asarray(x, dtype=np.float64)
    r = np.linalg.norm(x, axis=-1) + 1e-12
    azimuth = np.abs(np.arctan2(x[..., 0], x[..., 2]))
    polar = np.arccos(np.clip(x[..., 1] / r, -1.0, 1.0))
    parity = (np.floor(azimuth / (np.pi / cells_azimuth)) + np.floor(polar / (np.pi / cells_polar))) % 2
    a, b = (np.asarray(c, dtype=np.float64) for c in colors)
    return np.where(parity[..., None] == 0, a, b)


class CheckerSphere(Sphere):
    def color(self, x, d=None):
        return checker_color(np.asarray(x) - self.center)


@dataclass
class AnalyticScene:
    name: str
    field: AnalyticField
    background: tuple = (1.0, 1.0, 1.0)
    bounding_radius: float = 1.0

    @property
    def kind(self):
        return self.field.kind

    def describe(self) -> dict:
        f = self.field
        doc = {"name": self.name, "kind": self.kind, "bounding_radius": self.bounding_radius}
        if isinstance(f, Sphere):
            doc["sdf"] = {"type": "sphere", "center": f.center.tolist(), "radius": f.radius}
        elif isinstance(f, Torus):
            doc["sdf"] = {"type": "torus", "major": f.major, "minor": f.minor}
        elif isinstance(f, Slab):
            doc["density"] = {"type": "slab", "sigma": f.sigma, "half_thickness": f.half_thickness}
        return doc


def make_scene(name: str) -> AnalyticScene:
    if name == "checker_sphere":
        return AnalyticScene(name, CheckerSphere(radius=0.6))
    if name == "torus":
        return AnalyticScene(name, Torus(0.5, 0.2))
    if name == "two_spheres":
        return AnalyticScene(name, two_spheres())
    if name == "slab":
        return AnalyticScene(name, Slab())
    if name == "empty":
        return AnalyticScene(name, Empty())
    raise ValueError(f"unknown scene {name!r}; choose from {', '.join(SCENES)}")


SCENES = ("checker_sphere", "torus", "two_spheres", "slab", "empty")


def sdf_from_description(doc: dict):
    """Ground-truth SDF callable from ``scene.json`` metadata, or None."""
    sdf = doc.get("sdf")
    if not sdf:
        return None
    if sdf["type"] == "sphere":
        return Sphere(sdf["center"], sdf["radius"]).sdf
    if sdf["type"] == "torus":
        return Torus(sdf["major"], sdf["minor"]).sdf
    return None


def fixed_view_ring(n=16, elevation=30.0, radius=2.5, width=64, height=64, fov_y=40.0,
                    t_near=1.5, t_far=3.5):
    """Cameras evenly spaced in azimuth at a fixed elevation, all looking at the origin."""
    if n < 2 or radius <= 0:
        raise ValueError("need n >= 2 and radius > 0")
    el = np.radians(elevation)
    cams = []
    for k in range(n):
        az = 2.0 * np.pi * k / n
        eye = radius * np.array([np.cos(el) * np.sin(az), np.sin(el), np.cos(el) * np.cos(az)])
        cams.append(Camera(width, height, fov_y, look_at(eye, (0.0, 0.0, 0.0)), t_near, t_far))
    return cams


@dataclass
class PosedImageSet:
    images: np.ndarray  # (N, H, W, 4) in [0, 1]
    cameras: list
    metadata: dict = field(default_factory=dict)

    def __post_init__(self):
        if len(self.images) != len(self.cameras) or len(self.images) < 2:
            raise ValueError("a posed image set needs >= 2 images, one camera each")

    def __len__(self):
        return len(self.images)

    @property
    def rgb(self):
        return self.images[..., :3]

    @property
    def alpha(self):
        return self.images[..., 3]


def render_view(scene: AnalyticScene, camera: Camera, samples=GT_SAMPLES):
    """Reference render of one view: (H, W, 3) colour and (H, W) coverage."""
    if scene.kind == "density":
        cfg = nerf.SamplingConfig(n_coarse=samples, n_fine=0, background=scene.background)
        rgb, t_rem = nerf.render_image(scene.field, None, camera, cfg, seed=0)
    else:
        rgb, t_rem = neus.render_image(scene.field, camera, samples, scene.background, s=GT_SHARPNESS,
                                       stratified=False)
    return rgb, 1.0 - t_rem


def render_ground_truth(scene: AnalyticScene, cameras, seed=0, samples=GT_SAMPLES) -> PosedImageSet:
    images = []
    for cam in cameras:
        rgb, cov = render_view(scene, cam, samples)
        images.append(np.concatenate([rgb, cov[..., None]], axis=-1))
    images = quantize(np.stack(images))
    meta = {"scene": scene.describe(), "seed": int(seed), "render": {"samples": samples, "sharpness": GT_SHARPNESS},
            "background": list(scene.background)}
    return PosedImageSet(images, list(cameras), meta)


def quantize(images):
    return np.round(np.clip(images, 0.0, 1.0) * 255.0) / 255.0


def to_png_bytes(image) -> np.ndarray:
    return np.round(np.clip(image, 0.0, 1.0) * 255.0).astype(np.uint8)


def write_png(path, image):
    arr = to_png_bytes(image)
    mode = "RGBA" if arr.shape[-1] == 4 else "RGB"
    Image.fromarray(arr, mode).save(path)


def read_png(path) -> np.ndarray:
    with Image.open(path) as im:
        return np.asarray(im.convert("RGBA"), dtype=np.float64) / 255.0


def cameras_document(cameras, files) -> dict:
    c0 = cameras[0]
    return {
        "width": c0.width,
        "height": c0.height,
        "fov_y_degrees": c0.fov_y,
        "t_near": c0.t_near,
        "t_far": c0.t_far,
        "frames": [{"file": f, "camera_to_world": cam.camera_to_world.tolist()} for f, cam in zip(files, cameras)],
    }


def cameras_from_document(doc) -> tuple[list, list]:
    cams, files = [], []
    for frame in doc["frames"]:
        pose = np.asarray(frame["camera_to_world"], dtype=np.float64).reshape(4, 4)
        cams.append(Camera(doc["width"], doc["height"], doc["fov_y_degrees"], pose, doc["t_near"], doc["t_far"]))
        files.append(frame["file"])
    return cams, files


def save_dataset(data: PosedImageSet, directory):
    out = Path(directory)
    out.mkdir(parents=True, exist_ok=True)
    files = [f"view_{i:03d}.png" for i in range(len(data))]
    for f, img in zip(files, data.images):
        write_png(out / f, img)
    (out / "cameras.json").write_text(json.dumps(cameras_document(data.cameras, files), indent=2))
    (out / "scene.json").write_text(json.dumps(data.metadata, indent=2, sort_keys=True))
    return out


def load_dataset(directory) -> PosedImageSet:
    d = Path(directory)
    cams, files = cameras_from_document(json.loads((d / "cameras.json").read_text()))
    images = np.stack([read_png(d / f) for f in files])
    if images.shape[1:3] != (cams[0].height, cams[0].width):
        raise ValueError(f"image size {images.shape[2]}x{images.shape[1]} does not match cameras.json")
    meta_path = d / "scene.json"
    meta = json.loads(meta_path.read_text()) if meta_path.exists() else {}
    return PosedImageSet(images, cams, meta)

