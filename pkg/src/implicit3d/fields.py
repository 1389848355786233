"""Positional encoding, MLP radiance/SDF fields and closed-form reference fields."""

from __future__ import annotations

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor


def positional_encode(p, levels: int) -> np.ndarray:
    """Fourier features of every scalar in ``p``.

    Each scalar expands to ``[sin(2^0 pi p), cos(2^0 pi p), ..., sin(2^L pi p), cos(2^L pi p)]``
    and the blocks are laid out per scalar, so ``(..., D) -> (..., D * 2 (L + 1))``.
    The raw coordinate is not appended.
    """
    if levels < 0:
        raise ValueError("levels must be >= 0")
    p = np.asarray(p)
    freqs = (2.0 ** np.arange(levels + 1)) * np.pi
    arg = p[..., None] * freqs.astype(p.dtype if p.dtype.kind == "f" else np.float64)
    out = np.stack([np.sin(arg), np.cos(arg)], axis=-1)  # (..., D, L+1, 2)
    return out.reshape(*p.shape[:-1], -1) if p.ndim else out.reshape(-1)


def encoding_jacobian(p, levels: int) -> np.ndarray:
    """d(encoding)/dp as an array of shape (..., D, D * 2 (L + 1)); block diagonal."""
    p = np.asarray(p)
    d = p.shape[-1]
    freqs = (2.0 ** np.arange(levels + 1)) * np.pi
    arg = p[..., None] * freqs
    block = np.stack([freqs * np.cos(arg), -freqs * np.sin(arg)], axis=-1).reshape(*p.shape, -1)
    width = block.shape[-1]
    jac = np.zeros(p.shape + (d * width,), dtype=p.dtype)
    for j in range(d):
        jac[..., j, j * width : (j + 1) * width] = block[..., j, :]
    return jac


def encode_tensor(x: Tensor, levels: int) -> Tensor:
    """Graph version of :func:`positional_encode` for a (P, D) tensor."""
    p, d = x.shape
    freqs = ((2.0 ** np.arange(levels + 1)) * np.pi).astype(x.dtype)
    arg = ad.reshape(x, (p, d, 1)) * freqs.reshape(1, 1, -1)
    pair = ad.concat([ad.reshape(ad.sin(arg), (p, d, -1, 1)), ad.reshape(ad.cos(arg), (p, d, -1, 1))], axis=3)
    return ad.reshape(pair, (p, d * 2 * (levels + 1)))


def logistic_cdf(x, s):
    """Sigmoid ``1 / (1 + exp(-s x))``, overflow safe."""
    return ad._sigmoid(np.asarray(s * np.asarray(x, dtype=np.float64)))


def logistic_density(x, s):
    """Logistic density ``s e^{-sx} / (1 + e^{-sx})^2`` (derivative of :func:`logistic_cdf`)."""
    if np.any(np.asarray(s) <= 0):
        raise ValueError("sharpness s must be positive")
    e = np.exp(-np.abs(s * np.asarray(x, dtype=np.float64)))
    return s * e / (1.0 + e) ** 2


class MLP:
    """Stack of affine layers with ReLU between them (none after the last)."""

    def __init__(self, sizes, rng, prefix, dtype=np.float32):
        self.layers = []
        for i, (n_in, n_out) in enumerate(zip(sizes[:-1], sizes[1:])):
            w = rng.normal(0.0, np.sqrt(2.0 / n_in), (n_in, n_out))
            self.layers.append(
                (
                    ad.parameter(w, f"{prefix}.{i}.weight", dtype),
                    ad.parameter(np.zeros(n_out), f"{prefix}.{i}.bias", dtype),
                )
            )

    def params(self):
        return {p.name: p for layer in self.layers for p in layer}

    def __call__(self, h: Tensor, final_activation=False) -> Tensor:
        last = len(self.layers) - 1
        for i, (w, b) in enumerate(self.layers):
            h = ad.linear(h, w, b, "relu" if i < last or final_activation else None)
        return h

    def with_tangents(self, h: Tensor, tangents: Tensor):
        """Forward pass that also carries d(h)/dx for each input direction.

        ``tangents`` has shape (P * K, width) holding K directional derivatives per
        point; ReLU masks are treated as constants, which is exact almost everywhere.
        """
        k = tangents.shape[0] // h.shape[0]
        last = len(self.layers) - 1
        for i, (w, b) in enumerate(self.layers):
            h = ad.linear(h, w, b, "relu" if i < last else None)
            tangents = ad.matmul(tangents, w)
            if i < last:
                mask = (h.data > 0).astype(h.dtype)
                n = mask.shape[1]
                tangents = ad.reshape(ad.reshape(tangents, (-1, k, n)) * mask[:, None, :], (-1, n))
        return h, tangents


class RadianceField:
    """(x, d) -> (sigma >= 0, rgb in [0, 1]) with sigma independent of d."""

    kind = "radiance"

    def __init__(self, seed=0, pos_levels=9, dir_levels=3, width=128, depth=4, color_width=64,
                 bound=2.5, dtype=np.float32, prefix="field"):
        rng = np.random.default_rng(seed)
        self.pos_levels, self.dir_levels, self.bound, self.dtype = pos_levels, dir_levels, bound, dtype
        enc = 3 * 2 * (pos_levels + 1)
        denc = 3 * 2 * (dir_levels + 1)
        self.trunk = MLP([enc] + [width] * depth, rng, f"{prefix}.trunk", dtype)
        self.sigma_head = MLP([width, 1], rng, f"{prefix}.sigma", dtype)
        self.color_head = MLP([width + denc, color_width, color_width, 3], rng, f"{prefix}.color", dtype)

    def params(self):
        return {**self.trunk.params(), **self.sigma_head.params(), **self.color_head.params()}

    def query(self, x, d):
        """x, d: (P, 3) arrays.  Returns sigma (P,) and rgb (P, 3) tensors."""
        hx = Tensor(positional_encode(np.asarray(x, dtype=self.dtype) / self.bound, self.pos_levels).astype(self.dtype))
        hd = Tensor(positional_encode(np.asarray(d, dtype=self.dtype), self.dir_levels).astype(self.dtype))
        feat = self.trunk(hx, final_activation=True)
        sigma = ad.reshape(ad.softplus(self.sigma_head(feat)), (-1,))
        rgb = ad.sigmoid(self.color_head(ad.concat([feat, hd], axis=1)))
        return sigma, rgb

    def density(self, x):
        hx = Tensor(positional_encode(np.asarray(x, dtype=self.dtype) / self.bound, self.pos_levels).astype(self.dtype))
        feat = self.trunk(hx, final_activation=True)
        return ad.softplus(self.sigma_head(feat)).data.ravel()


class SdfField:
    """Signed distance trunk x -> f, separate colour net (gamma(x), d) -> rgb, sharpness s."""

    kind = "sdf"

    def __init__(self, seed=0, pos_levels=9, width=128, depth=4, color_width=64, bound=2.5,
                 init_radius=0.5, init_s=10.0, dtype=np.float32, prefix="field"):
        rng = np.random.default_rng(seed)
        self.pos_levels, self.bound, self.dtype = pos_levels, bound, dtype
        enc = 3 * 2 * (pos_levels + 1)
        self.trunk = MLP([enc] + [width] * depth + [1], rng, f"{prefix}.sdf", dtype)
        self.color_net = MLP([enc + 3, color_width, color_width, 3], rng, f"{prefix}.color", dtype)
        self.log_s = ad.parameter(np.log([init_s]), f"{prefix}.log_s", dtype)
        if init_radius is not None:
            self._fit_sphere(rng, init_radius)

    def _fit_sphere(self, rng, radius, n=4096):
        # start from the lowest frequency band only; higher bands grow during training
        w0 = self.trunk.layers[0][0]
        band = np.arange(w0.shape[0]) % (2 * (self.pos_levels + 1))
        w0.data = np.where((band < 2)[:, None], w0.data, 0).astype(self.dtype)
        # least-squares fit of the output layer so the initial zero level set is a sphere
        x = rng.uniform(-1.2, 1.2, (n, 3))
        w, b = self.trunk.layers[-1]
        hidden = Tensor(positional_encode(x.astype(self.dtype) / self.bound, self.pos_levels).astype(self.dtype))
        for wi, bi in self.trunk.layers[:-1]:
            hidden = ad.linear(hidden, wi, bi, "relu")
        feats = np.concatenate([hidden.data.astype(np.float64), np.ones((n, 1))], axis=1)
        target = np.linalg.norm(x, axis=1) - radius
        ridge = 1e-3 * np.eye(feats.shape[1])
        coef = np.linalg.solve(feats.T @ feats + ridge, feats.T @ target)
        w.data = coef[:-1, None].astype(self.dtype)
        b.data = coef[-1:].astype(self.dtype)

    def params(self):
        return {**self.trunk.params(), **self.color_net.params(), self.log_s.name: self.log_s}

    @property
    def s(self) -> Tensor:
        return ad.exp(self.log_s)

    def _encode(self, x):
        return positional_encode(np.asarray(x, dtype=self.dtype) / self.bound, self.pos_levels).astype(self.dtype)

    def sdf(self, x) -> Tensor:
        return ad.reshape(self.trunk(Tensor(self._encode(x))), (-1,))

    def sdf_and_gradient(self, x):
        """f (P,) and its spatial gradient (P, 3), both differentiable w.r.t. params."""
        x = np.asarray(x, dtype=self.dtype)
        jac = encoding_jacobian(x / self.bound, self.pos_levels) / self.bound  # (P, 3, E)
        f, tangents = self.trunk.with_tangents(
            Tensor(self._encode(x)), Tensor(jac.reshape(-1, jac.shape[-1]).astype(self.dtype))
        )
        return ad.reshape(f, (-1,)), ad.reshape(tangents, (-1, 3))

    def color(self, x, d) -> Tensor:
        h = np.concatenate([self._encode(x), np.asarray(d, dtype=self.dtype)], axis=1)
        return ad.sigmoid(self.color_net(Tensor(h)))

    def sdf_values(self, x) -> np.ndarray:
        return self.sdf(x).data.astype(np.float64)


def eval_radiance(field, x, d):
    sigma, rgb = field.query(np.atleast_2d(x), np.atleast_2d(d))
    return sigma, rgb


def eval_sdf(field, x):
    """Tensor for MLP fields, ndarray for analytic ones."""
    return field.sdf(np.atleast_2d(x))


def sdf_gradient(field, x, step=1e-4) -> np.ndarray:
    """Spatial SDF gradient: reverse-mode through the graph for MLPs, central differences otherwise."""
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    if isinstance(field, SdfField):
        xt = Tensor(x.astype(field.dtype) / field.bound, requires_grad=True)
        f = field.trunk(encode_tensor(xt, field.pos_levels))
        ad.backward(ad.sum_(f))
        return xt.grad.astype(np.float64) / field.bound
    grad = np.empty_like(x)
    for j in range(3):
        e = np.zeros(3)
        e[j] = step
        grad[:, j] = (field.sdf(x + e) - field.sdf(x - e)) / (2 * step)
    return grad


# ---------------------------------------------------------------- analytic fields


class AnalyticField:
    """Closed-form field.  SDF variants implement ``sdf``; density variants ``density``."""

    kind = "sdf"

    def color(self, x, d=None):
        x = np.asarray(x, dtype=np.float64)
        return np.broadcast_to(np.asarray(self.rgb, dtype=np.float64), x.shape).copy()

    def query(self, x, d):
        """Radiance-style interface (sigma, rgb) for density variants."""
        return Tensor(self.density(x)), Tensor(self.color(x, d))


class Sphere(AnalyticField):
    def __init__(self, center=(0.0, 0.0, 0.0), radius=1.0, rgb=(0.8, 0.8, 0.8)):
        self.center = np.asarray(center, dtype=np.float64)
        self.radius = float(radius)
        self.rgb = rgb

    def sdf(self, x):
        return np.linalg.norm(np.asarray(x, dtype=np.float64) - self.center, axis=-1) - self.radius


class Torus(AnalyticField):
    """Torus around the y axis."""

    def __init__(self, major=0.5, minor=0.2, rgb=(0.8, 0.6, 0.2)):
        self.major, self.minor, self.rgb = float(major), float(minor), rgb

    def sdf(self, x):
        x = np.asarray(x, dtype=np.float64)
        q = np.hypot(x[..., 0], x[..., 2]) - self.major
        return np.hypot(q, x[..., 1]) - self.minor


class Union(AnalyticField):
    def __init__(self, *parts):
        self.parts = parts

    def sdf(self, x):
        return np.min([p.sdf(x) for p in self.parts], axis=0)

    def color(self, x, d=None):
        x = np.asarray(x, dtype=np.float64)
        dists = np.stack([p.sdf(x) for p in self.parts])
        nearest = np.argmin(dists, axis=0)
        cols = np.stack([p.color(x, d) for p in self.parts])
        return np.take_along_axis(cols, nearest[None, ..., None], axis=0)[0]


def two_spheres(offset=0.5, radius=0.3):
    """Two equal spheres on the z axis; the one at +z occludes the other from +z viewers."""
    return Union(
        Sphere((0.0, 0.0, offset), radius, (0.9, 0.2, 0.2)),
        Sphere((0.0, 0.0, -offset), radius, (0.2, 0.2, 0.9)),
    )


class Slab(AnalyticField):
    """Constant density between the planes z = -half_thickness and z = +half_thickness."""

    kind = "density"

    def __init__(self, density=2.0, half_thickness=0.3, rgb=(0.2, 0.7, 0.4)):
        self.sigma = float(density)
        self.half_thickness = float(half_thickness)
        self.rgb = rgb

    def density(self, x):
        x = np.asarray(x, dtype=np.float64)
        return np.where(np.abs(x[..., 2]) <= self.half_thickness, self.sigma, 0.0)

    def pieces(self, origin, direction, t_near, t_far):
        """Piecewise-constant (boundaries, sigmas) of this slab along one ray."""
        oz, dz = origin[2], direction[2]
        h = self.half_thickness
        if abs(dz) < 1e-12:
            inside = abs(oz) <= h
            return np.array([t_near, t_far]), np.array([self.sigma if inside else 0.0])
        t0, t1 = sorted(((-h - oz) / dz, (h - oz) / dz))
        t0, t1 = np.clip([t0, t1], t_near, t_far)
        bounds = [t_near]
        sig = []
        if t0 > t_near:
            bounds.append(t0)
            sig.append(0.0)
        if t1 > t0:
            bounds.append(t1)
            sig.append(self.sigma)
        if t_far > bounds[-1]:
            bounds.append(t_far)
            sig.append(0.0)
        return np.array(bounds), np.array(sig)


class Empty(AnalyticField):
    """Nothing anywhere: SDF stays at +10 and density is zero."""

    kind = "sdf"
    rgb = (0.0, 0.0, 0.0)

    def sdf(self, x):
        x = np.asarray(x, dtype=np.float64)
        return np.full(x.shape[:-1], 10.0)

    def density(self, x):
        return np.zeros(np.asarray(x).shape[:-1])
