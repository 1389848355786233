"""Pinhole cameras and per-pixel ray generation.

Conventions: right-handed world, camera looks down -z in its own frame with
+y up, pixel (0, 0) is the top-left corner and rays go through pixel centres.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass
class Camera:
    width: int
    height: int
    fov_y: float  # degrees
    camera_to_world: np.ndarray
    t_near: float = 1.5
    t_far: float = 3.5

    def __post_init__(self):
        self.camera_to_world = np.asarray(self.camera_to_world, dtype=np.float64).reshape(4, 4)
        check_rigid(self.camera_to_world)

    @property
    def focal(self) -> float:
        """Focal length in pixels."""
        return 0.5 * self.height / np.tan(0.5 * np.radians(self.fov_y))

    @property
    def origin(self) -> np.ndarray:
        return self.camera_to_world[:3, 3].copy()

    @property
    def forward(self) -> np.ndarray:
        return -self.camera_to_world[:3, 2]


@dataclass
class Rays:
    """A batch of rays ``r(t) = o + t d``, arrays of shape (R, 3)."""

    origins: np.ndarray
    directions: np.ndarray
    t_near: float
    t_far: float

    def __len__(self):
        return len(self.origins)

    def at(self, t):
        """Points for per-ray parameters ``t`` of shape (R, N) -> (R, N, 3)."""
        return self.origins[:, None, :] + t[..., None] * self.directions[:, None, :]


def check_rigid(pose, tol=1e-6):
    rot = pose[:3, :3]
    if not np.allclose(pose[3], [0, 0, 0, 1], atol=tol):
        raise ValueError(f"pose last row must be [0, 0, 0, 1], got {pose[3]}")
    if not np.allclose(rot.T @ rot, np.eye(3), atol=tol) or np.linalg.det(rot) < 0:
        raise ValueError("pose rotation block is not a proper rotation")


def look_at(eye, target, up=(0.0, 1.0, 0.0)) -> np.ndarray:
    """Camera-to-world pose at ``eye`` whose forward axis (-z) points at ``target``."""
    eye = np.asarray(eye, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    up = np.asarray(up, dtype=np.float64)
    forward = target - eye
    dist = np.linalg.norm(forward)
    if dist < 1e-12:
        raise ValueError("look_at: eye and target coincide")
    forward /= dist
    right = np.cross(forward, up)
    norm = np.linalg.norm(right)
    if norm < 1e-9:
        raise ValueError("look_at: up vector is parallel to the viewing direction")
    right /= norm
    true_up = np.cross(right, forward)
    pose = np.eye(4)
    pose[:3, 0] = right
    pose[:3, 1] = true_up
    pose[:3, 2] = -forward
    pose[:3, 3] = eye
    return pose


def pixel_grid(camera: Camera) -> np.ndarray:
    """Flat pixel indices for the full image, row-major."""
    return np.arange(camera.width * camera.height)


def generate_rays(camera: Camera, pixel_indices=None) -> Rays:
    """One unit-direction ray per flat pixel index (row-major, ``i = row * width + col``)."""
    if pixel_indices is None:
        pixel_indices = pixel_grid(camera)
    idx = np.asarray(pixel_indices, dtype=np.int64).ravel()
    n = camera.width * camera.height
    if idx.size and (idx.min() < 0 or idx.max() >= n):
        bad = idx[(idx < 0) | (idx >= n)][0]
        raise IndexError(f"pixel index {bad} outside image of {camera.width}x{camera.height}")
    row, col = np.divmod(idx, camera.width)
    f = camera.focal
    x = (col + 0.5 - 0.5 * camera.width) / f
    y = -(row + 0.5 - 0.5 * camera.height) / f
    dirs_cam = np.stack([x, y, -np.ones_like(x)], axis=-1)
    dirs_cam /= np.linalg.norm(dirs_cam, axis=-1, keepdims=True)
    rot = camera.camera_to_world[:3, :3]
    dirs = dirs_cam @ rot.T
    dirs /= np.linalg.norm(dirs, axis=-1, keepdims=True)
    origins = np.broadcast_to(camera.origin, dirs.shape).copy()
    return Rays(origins, dirs, camera.t_near, camera.t_far)


def rays_to_camera_frame(rays: Rays, camera: Camera) -> Rays:
    world_to_camera = np.linalg.inv(camera.camera_to_world)
    return transform_rays(rays, world_to_camera)


def transform_rays(rays: Rays, pose) -> Rays:
    rot, trans = pose[:3, :3], pose[:3, 3]
    return Rays(rays.origins @ rot.T + trans, rays.directions @ rot.T, rays.t_near, rays.t_far)
