"""Volume rendering of radiance fields: stratified quadrature, hierarchical resampling, loss."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from . import kernels
from .autodiff import Tensor
from .camera import Camera, Rays, generate_rays

SIGMA_DELTA_MAX = 80.0
WHITE = (1.0, 1.0, 1.0)


@dataclass
class RenderResult:
    color: Tensor  # (R, 3)
    weights: np.ndarray  # (R, N)
    t_rem: np.ndarray  # (R,)
    t_values: np.ndarray  # (R, N)


def ray_uniforms(seed: int, ray_ids, pass_id: int, n: int) -> np.ndarray:
    """Uniforms in [0, 1) from a counter-based stream keyed by (seed, ray id, pass).

    Each ray's draws are independent of batch composition, so results do not
    depend on how rays are chunked or parallelised.
    """
    ray_ids = np.asarray(ray_ids, dtype=np.int64).ravel()
    out = np.empty((ray_ids.size, n))
    hi = (int(seed) % 2**64) << 64
    for i, rid in enumerate(ray_ids):
        key = hi | (int(rid) << 8) | (pass_id & 0xFF)
        out[i] = np.random.Generator(np.random.Philox(key=key)).random(n)
    return out


def stratified_samples(t_near: float, t_far: float, n: int, rng) -> np.ndarray:
    """One uniform draw inside each of ``n`` equal bins of [t_near, t_far]."""
    if n < 1 or not t_near < t_far:
        raise ValueError("need n >= 1 and t_near < t_far")
    return stratified_from_uniforms(t_near, t_far, rng.random((1, n)))[0]


def stratified_from_uniforms(t_near, t_far, u) -> np.ndarray:
    n = u.shape[-1]
    return t_near + (np.arange(n) + u) * ((t_far - t_near) / n)


def deltas(t: np.ndarray, t_far: float) -> np.ndarray:
    """Segment lengths; the last segment runs to ``t_far``."""
    return np.diff(t, axis=-1, append=np.full(t.shape[:-1] + (1,), t_far))


def composite(alpha: Tensor, colors: Tensor, background):
    """Differentiable front-to-back compositing.

    Returns ``(color tensor, weights, transmittance, t_rem)``; only the colour
    carries gradients (to ``alpha`` and ``colors``).
    """
    background = np.asarray(background, dtype=np.float64)
    a = alpha.data.astype(np.float64)
    c = colors.data.astype(np.float64)
    color, weights, trans, t_rem = kernels.composite_forward(a, c, background)

    def backward(g):
        ga, gc = kernels.composite_backward(a, c, background, trans, g)
        return ad.flush_subnormal(ga.astype(alpha.dtype)), ad.flush_subnormal(gc.astype(colors.dtype))

    out = ad.make_node(ad.flush_subnormal(color.astype(colors.dtype)), (alpha, colors), backward, "composite")
    return out, weights, trans, t_rem


def render_quadrature(sigma, colors, delta, background=(0.0, 0.0, 0.0), t_values=None) -> RenderResult:
    """Quadrature colour ``sum_i T_i (1 - exp(-sigma_i delta_i)) c_i + T_rem * background``.

    sigma (R, N), colors (R, N, 3), delta (R, N).  Tensors or arrays.
    """
    sigma = ad.as_tensor(sigma)
    colors = ad.as_tensor(colors)
    if not np.all(np.isfinite(sigma.data)):
        bad = int(np.argwhere(~np.isfinite(sigma.data))[0][0])
        raise FloatingPointError(f"non-finite density on ray {bad}")
    delta = np.asarray(delta, dtype=sigma.dtype)
    optical = ad.clip(sigma * delta, 0.0, SIGMA_DELTA_MAX)
    alpha = 1.0 - ad.exp(-optical)
    color, weights, _, t_rem = composite(alpha, colors, background)
    return RenderResult(color, weights, t_rem, t_values)


def render_ray_analytic(boundaries, sigmas, colors, background=None) -> np.ndarray:
    """Exact colour integral for piecewise-constant density and colour along one ray.

    Piece ``k`` spans ``[boundaries[k], boundaries[k+1]]``.
    """
    b = np.asarray(boundaries, dtype=np.float64)
    s = np.asarray(sigmas, dtype=np.float64)
    c = np.asarray(colors, dtype=np.float64).reshape(-1, 3)
    depth = s * np.diff(b)
    before = np.concatenate([[0.0], np.cumsum(depth)])
    color = np.sum((np.exp(-before[:-1]) * -np.expm1(-depth))[:, None] * c, axis=0)
    if background is not None:
        color = color + np.exp(-before[-1]) * np.asarray(background, dtype=np.float64)
    return color


def hierarchical_resample(coarse_t, coarse_weights, t_far, n_fine, u) -> np.ndarray:
    """Inverse-CDF draws from the coarse weight histogram, merged with ``coarse_t`` and sorted.

    Bin ``i`` spans ``[t_i, t_{i+1}]`` (the last ends at ``t_far``), matching
    the segments the coarse weights were computed on.  All-zero weights fall
    back to a uniform histogram.
    """
    coarse_t = np.atleast_2d(coarse_t)
    edges = np.concatenate([coarse_t, np.full((coarse_t.shape[0], 1), t_far)], axis=1)
    u = np.asarray(u).reshape(coarse_t.shape[0], n_fine)
    fine = kernels.sample_pdf(edges, np.atleast_2d(coarse_weights), u)
    return np.sort(np.concatenate([coarse_t, fine], axis=1), axis=1)


def nerf_loss(coarse, fine, truth) -> Tensor:
    """Sum over rays and channels of both squared colour errors."""
    truth = np.asarray(truth, dtype=ad.as_tensor(coarse).dtype)
    if truth.shape[0] == 0:
        raise ValueError("empty ray batch")
    ec = ad.as_tensor(coarse) - truth
    ef = ad.as_tensor(fine) - truth
    return ad.sum_(ad.square(ec)) + ad.sum_(ad.square(ef))


@dataclass
class SamplingConfig:
    n_coarse: int = 64
    n_fine: int = 64
    background: tuple = WHITE


def _shade(field, rays: Rays, t):
    pts = rays.at(t).reshape(-1, 3)
    dirs = np.repeat(rays.directions, t.shape[1], axis=0)
    sigma, rgb = field.query(pts, dirs)
    r, n = t.shape
    return ad.reshape(sigma, (r, n)), ad.reshape(rgb, (r, n, 3))


def render_rays(coarse_field, fine_field, rays: Rays, config: SamplingConfig, seed: int, ray_ids):
    """Coarse pass, then (if ``fine_field``) a fine pass on hierarchically resampled points."""
    u = ray_uniforms(seed, ray_ids, 0, config.n_coarse)
    t_c = stratified_from_uniforms(rays.t_near, rays.t_far, u)
    sigma, rgb = _shade(coarse_field, rays, t_c)
    coarse = render_quadrature(sigma, rgb, deltas(t_c, rays.t_far), config.background, t_c)
    if fine_field is None or config.n_fine == 0:
        return coarse, None
    u = ray_uniforms(seed, ray_ids, 1, config.n_fine)
    t_f = hierarchical_resample(t_c, coarse.weights, rays.t_far, config.n_fine, u)
    sigma, rgb = _shade(fine_field, rays, t_f)
    fine = render_quadrature(sigma, rgb, deltas(t_f, rays.t_far), config.background, t_f)
    return coarse, fine


def render_image(coarse_field, fine_field, camera: Camera, config: SamplingConfig, seed=0, chunk=2048):
    """Render every pixel; returns (H, W, 3) colour and (H, W) residual transmittance."""
    n = camera.width * camera.height
    image = np.empty((n, 3))
    t_rem = np.empty(n)
    for start in range(0, n, chunk):
        ids = np.arange(start, min(start + chunk, n))
        rays = generate_rays(camera, ids)
        coarse, fine = render_rays(coarse_field, fine_field, rays, config, seed, ids)
        out = fine if fine is not None else coarse
        image[ids] = out.color.data
        t_rem[ids] = out.t_rem
    return image.reshape(camera.height, camera.width, 3), t_rem.reshape(camera.height, camera.width)
