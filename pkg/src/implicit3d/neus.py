"""SDF volume rendering: logistic S-density, opaque-density alphas, weights, colour, loss."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .camera import Camera, Rays, generate_rays
from .nerf import WHITE, composite, ray_uniforms, stratified_from_uniforms

PHI_FLOOR = 1e-12


@dataclass
class NeusWeights:
    alphas: np.ndarray
    transmittance: np.ndarray
    weights: np.ndarray
    t_rem: np.ndarray


@dataclass
class NeusResult:
    color: Tensor
    weights: np.ndarray
    t_rem: np.ndarray
    t_values: np.ndarray


def _log_sigmoid(x):
    return -np.logaddexp(0.0, -x)


def neus_alpha(f_i, f_next, s):
    """Discrete opacity of the segment from SDF value ``f_i`` to ``f_next``.

    ``max((Phi_s(f_i) - Phi_s(f_next)) / Phi_s(f_i), 0)`` with ``Phi_s`` the
    sigmoid of sharpness ``s``; exact when f is linear along the segment.
    """
    if np.any(np.asarray(s) <= 0):
        raise ValueError("sharpness s must be positive")
    a = s * np.asarray(f_i, dtype=np.float64)
    b = s * np.asarray(f_next, dtype=np.float64)
    ratio = np.exp(np.minimum(_log_sigmoid(b) - _log_sigmoid(a), 0.0))
    alpha = np.clip(1.0 - ratio, 0.0, 1.0)
    return np.where(_log_sigmoid(a) < np.log(PHI_FLOOR), 0.0, alpha)


def neus_alpha_op(f_prev: Tensor, f_next: Tensor, s: Tensor) -> Tensor:
    """Graph version of :func:`neus_alpha`; differentiable in both SDF values and ``s``."""
    sv = s.data.astype(np.float64).reshape(())
    fp = f_prev.data.astype(np.float64)
    fn = f_next.data.astype(np.float64)
    a, b = sv * fp, sv * fn
    la, lb = _log_sigmoid(a), _log_sigmoid(b)
    ratio = np.exp(np.minimum(lb - la, 0.0))
    active = (ratio < 1.0) & (la >= np.log(PHI_FLOOR))
    alpha = np.where(active, 1.0 - ratio, 0.0)
    # d alpha / da = ratio * (1 - sig(a)),  d alpha / db = -ratio * (1 - sig(b))
    da = np.where(active, ratio * np.exp(_log_sigmoid(-a)), 0.0)
    db = np.where(active, -ratio * np.exp(_log_sigmoid(-b)), 0.0)

    def backward(g):
        g = g.astype(np.float64)
        gs = np.sum(g * (da * fp + db * fn))
        return (
            ad.flush_subnormal((g * da * sv).astype(f_prev.dtype)),
            ad.flush_subnormal((g * db * sv).astype(f_next.dtype)),
            np.full(s.shape, gs, dtype=s.dtype),
        )

    return ad.make_node(ad.flush_subnormal(alpha.astype(f_prev.dtype)), (f_prev, f_next, s), backward, "neus_alpha")


def neus_weights(f, s) -> NeusWeights:
    """Weights for SDF values ``f`` at N + 1 points per ray (shape (R, N + 1) or (N + 1,))."""
    f = np.atleast_2d(np.asarray(f, dtype=np.float64))
    alpha = neus_alpha(f[:, :-1], f[:, 1:], s)
    keep = np.cumprod(1.0 - alpha, axis=1)
    trans = np.concatenate([np.ones((alpha.shape[0], 1)), keep[:, :-1]], axis=1)
    return NeusWeights(alpha, trans, trans * alpha, keep[:, -1])


def neus_render(alpha: Tensor, colors: Tensor, background=WHITE):
    """Colour ``sum_i w_i c_i + T_rem * background`` with ``w_i = T_i alpha_i``."""
    color, weights, _, t_rem = composite(ad.as_tensor(alpha), ad.as_tensor(colors), background)
    return color, weights, t_rem


def neus_loss(rendered, truth, sdf_grad: Tensor | None = None, eikonal_weight=0.1) -> Tensor:
    """Mean squared colour error plus ``eikonal_weight * mean((|grad f| - 1)^2)``."""
    rendered = ad.as_tensor(rendered)
    truth = np.asarray(truth, dtype=rendered.dtype)
    if truth.shape[0] == 0:
        raise ValueError("empty ray batch")
    loss = ad.mean(ad.square(rendered - truth))
    if sdf_grad is not None and eikonal_weight:
        sdf_grad = ad.as_tensor(sdf_grad)
        norm = ad.sqrt(ad.sum_(ad.square(sdf_grad), axis=1) + 1e-12)
        loss = loss + eikonal_weight * ad.mean(ad.square(norm - 1.0))
    return loss


def segment_points(rays: Rays, t):
    """SDF evaluation points (R, N + 1) including ``t_far`` and colour points at segment midpoints."""
    t_ext = np.concatenate([t, np.full((t.shape[0], 1), rays.t_far)], axis=1)
    mids = 0.5 * (t_ext[:, :-1] + t_ext[:, 1:])
    return t_ext, mids


def render_rays(field, rays: Rays, n_samples: int, background, seed: int, ray_ids, s=None,
                stratified=True, return_points=False):
    """Render a batch of rays through an SDF field (MLP or analytic).

    For analytic fields ``s`` must be given; MLP fields use their own sharpness.
    """
    r = len(rays)
    if stratified:
        u = ray_uniforms(seed, ray_ids, 0, n_samples)
    else:
        u = np.full((r, n_samples), 0.5)
    t = stratified_from_uniforms(rays.t_near, rays.t_far, u)
    t_ext, mids = segment_points(rays, t)
    sdf_pts = rays.at(t_ext).reshape(-1, 3)
    col_pts = rays.at(mids).reshape(-1, 3)
    dirs = np.repeat(rays.directions, n_samples, axis=0)
    if s is None:
        f = ad.reshape(field.sdf(sdf_pts), (r, n_samples + 1))
        rgb = ad.reshape(field.color(col_pts, dirs), (r, n_samples, 3))
        sharp = field.s
    else:
        f = Tensor(field.sdf(sdf_pts).reshape(r, n_samples + 1))
        rgb = Tensor(field.color(col_pts, dirs).reshape(r, n_samples, 3))
        sharp = Tensor(np.array([float(s)]))
    alpha = neus_alpha_op(f[:, :-1], f[:, 1:], sharp)
    color, weights, t_rem = neus_render(alpha, rgb, background)
    result = NeusResult(color, weights, t_rem, t)
    if return_points:
        return result, sdf_pts
    return result


def render_image(field, camera: Camera, n_samples=96, background=WHITE, seed=0, s=None,
                 stratified=True, chunk=1024):
    """Render every pixel; returns (H, W, 3) colour and (H, W) residual transmittance."""
    n = camera.width * camera.height
    image = np.empty((n, 3))
    t_rem = np.empty(n)
    for start in range(0, n, chunk):
        ids = np.arange(start, min(start + chunk, n))
        rays = generate_rays(camera, ids)
        out = render_rays(field, rays, n_samples, background, seed, ids, s=s, stratified=stratified)
        image[ids] = out.color.data
        t_rem[ids] = out.t_rem
    return image.reshape(camera.height, camera.width, 3), t_rem.reshape(camera.height, camera.width)
