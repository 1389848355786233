import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import numeric_grad, rel_error
from implicit3d import autodiff as ad
from implicit3d.camera import Camera, Rays, generate_rays, look_at
from implicit3d.fields import SdfField, Sphere, two_spheres
from implicit3d.neus import neus_alpha, neus_alpha_op, neus_loss, neus_render, neus_weights, render_rays


def linear_ray(n, t0=2.5, t_near=1.5, t_far=3.5, slope=1.0):
    """SDF values at n + 1 evenly spaced points of a ray crossing a plane at t0."""
    t = np.linspace(t_near, t_far, n + 1)
    return t, slope * (t0 - t)


def test_alpha_examples():
    assert neus_alpha(1.0, -1.0, 100.0) == pytest.approx(1.0, abs=1e-6)
    assert neus_alpha(0.3, 0.3, 50.0) == 0.0
    assert neus_alpha(-0.2, 0.4, 50.0) == 0.0
    # deep inside: Phi_s(f_i) underflows the guard
    assert neus_alpha(-10.0, -10.5, 10.0) == 0.0
    with pytest.raises(ValueError):
        neus_alpha(1.0, 0.0, 0.0)


@settings(max_examples=60)
@given(seed=st.integers(0, 2**32 - 1), n=st.integers(1, 64), s=st.floats(0.01, 500))
def test_weights_normalised_for_any_sdf(seed, n, s):
    f = np.random.default_rng(seed).normal(0, 1, (8, n + 1))
    w = neus_weights(f, s)
    assert np.all((w.alphas >= 0) & (w.alphas <= 1))
    np.testing.assert_allclose(w.weights.sum(1) + w.t_rem, 1.0, atol=1e-6)


def test_no_crossing_gives_no_weight():
    w = neus_weights(np.linspace(3.0, 5.0, 65), 20.0)
    assert w.weights.max() < 1e-6 and w.t_rem[0] > 1 - 1e-6


@pytest.mark.parametrize("s", [5.0, 20.0, 80.0])
def test_weight_peak_at_surface(s):
    t, f = linear_ray(256, t0=2.37)
    w = neus_weights(f, s).weights[0]
    mids = 0.5 * (t[1:] + t[:-1])
    assert abs(mids[np.argmax(w)] - 2.37) <= t[1] - t[0]


def test_sharper_s_concentrates_weights():
    t, f = linear_ray(256)
    mids = 0.5 * (t[1:] + t[:-1])
    spreads = []
    for s in (2.0, 5.0, 20.0, 80.0, 300.0):
        w = neus_weights(f, s).weights[0]
        w = w / w.sum()
        mu = np.sum(w * mids)
        spreads.append(np.sqrt(np.sum(w * (mids - mu) ** 2)))
    assert all(b < a for a, b in zip(spreads, spreads[1:]))


@pytest.mark.parametrize("s", [5.0, 20.0, 80.0])
def test_discrete_weights_match_continuous(s):
    n = 256
    t, f = linear_ray(n)
    disc = neus_weights(f, s).weights[0]
    # continuous w = T rho on a fine grid, rho = s (1 - Phi_s(f)) for a unit-slope descent
    fine = np.linspace(t[0], t[-1], 200 * n + 1)
    phi = 1.0 / (1.0 + np.exp(-s * (2.5 - fine)))
    rho = s * (1.0 - phi)
    tau = np.concatenate([[0.0], np.cumsum(0.5 * (rho[1:] + rho[:-1]) * np.diff(fine))])
    w = np.exp(-tau) * rho
    seg = np.concatenate([[0.0], np.cumsum(0.5 * (w[1:] + w[:-1]) * np.diff(fine))])
    cont = np.diff(seg[:: 200])
    l1 = np.abs(disc / disc.sum() - cont / cont.sum()).sum()
    assert l1 < 5e-2


def _two_sphere_rays():
    cam = Camera(21, 21, 30.0, look_at((0.0, 0.0, 2.5), (0, 0, 0)), 1.0, 4.0)
    rays = generate_rays(cam)
    o, d = rays.origins, rays.directions
    # keep rays that pierce both spheres (centres at z = +-0.5, radius 0.3)
    keep = []
    for c in (np.array([0, 0, 0.5]), np.array([0, 0, -0.5])):
        oc = o - c
        b = np.sum(oc * d, axis=1)
        keep.append(b**2 - (np.sum(oc * oc, axis=1) - 0.09) > 1e-4)
    sel = keep[0] & keep[1]
    return Rays(o[sel], d[sel], 1.0, 4.0)


@pytest.mark.parametrize("s", [20.0, 80.0])
def test_first_surface_outweighs_occluded_one(s):
    rays = _two_sphere_rays()
    assert len(rays) >= 5
    t = np.linspace(1.0, 4.0, 513)
    pts = rays.at(np.broadcast_to(t, (len(rays), t.size)))
    f = two_spheres().sdf(pts)
    w = neus_weights(f, s).weights
    mids = 0.5 * (t[1:] + t[:-1])
    split = np.abs(rays.origins[:, 2:3] - 0.0) / np.abs(rays.directions[:, 2:3])  # z = 0 plane between spheres
    first = np.where(mids[None] < split, w, 0).sum(1)
    second = np.where(mids[None] >= split, w, 0).sum(1)
    assert np.all(first > second)


def test_tiny_sharpness_renders_background():
    cam = Camera(9, 9, 40.0, look_at((0, 0, 2.5), (0, 0, 0)), 1.5, 3.5)
    rays = generate_rays(cam)
    out = render_rays(Sphere(radius=0.6, rgb=(0.1, 0.2, 0.3)), rays, 96, (1.0, 1.0, 1.0), 0, np.arange(len(rays)), s=1e-3)
    np.testing.assert_allclose(out.color.data, 1.0, atol=1e-3)


def test_opaque_crossing_gives_surface_colour():
    t, f = linear_ray(128)
    alpha = neus_weights(f, 500.0).alphas
    color, weights, t_rem = neus_render(ad.Tensor(alpha), ad.Tensor(np.tile([0.2, 0.7, 0.4], (1, 128, 1))), (1, 1, 1))
    np.testing.assert_allclose(color.data[0], [0.2, 0.7, 0.4], atol=1e-6)
    assert t_rem[0] < 1e-6


def test_alpha_op_gradients(rng):
    f = rng.normal(0, 0.3, (3, 17))
    f_prev = ad.parameter(f[:, :-1], "a", np.float64)
    f_next = ad.parameter(f[:, 1:], "b", np.float64)
    s = ad.parameter([7.0], "s", np.float64)
    colors = rng.random((3, 16, 3))
    truth = rng.random((3, 3))

    def loss(a, b, sv):
        alpha = neus_alpha_op(a, b, sv)
        color, _, _ = neus_render(alpha, colors, (1, 1, 1))
        return neus_loss(color, truth)

    ad.backward(loss(f_prev, f_next, s))
    np.testing.assert_allclose(neus_alpha_op(f_prev, f_next, s).data, neus_alpha(f[:, :-1], f[:, 1:], 7.0), atol=1e-12)
    for p in (f_prev, f_next, s):
        num = numeric_grad(lambda: float(loss(ad.Tensor(f_prev.data), ad.Tensor(f_next.data), ad.Tensor(s.data)).data),
                           p.data, 1e-6)
        assert rel_error(p.grad, num) < 1e-3


def test_loss_examples():
    truth = np.array([[0.1, 0.5, 0.9], [0.3, 0.3, 0.3]])
    unit = np.array([[1.0, 0, 0], [0, 0.6, 0.8]])
    assert float(neus_loss(truth, truth, unit).data) == pytest.approx(0.0, abs=1e-6)
    assert float(neus_loss(truth, truth, 2 * unit, eikonal_weight=0.1).data) == pytest.approx(0.1, rel=1e-6)
    assert float(neus_loss(truth + 0.2, truth, unit * 3).data) >= 0
    with pytest.raises(ValueError):
        neus_loss(np.zeros((0, 3)), np.zeros((0, 3)))


def test_full_neus_path_gradient(rng):
    field = SdfField(seed=3, width=16, depth=2, color_width=8, dtype=np.float64)
    cam = Camera(8, 8, 40.0, look_at((0.0, 0.8, 2.3), (0, 0, 0)), 1.5, 3.5)
    rays = generate_rays(cam, [9, 27, 36, 54])
    truth = rng.random((4, 3))
    eik_pts = rng.uniform(-1, 1, (6, 3))

    def loss():
        out = render_rays(field, rays, 24, (1, 1, 1), 0, np.arange(4))
        _, grad = field.sdf_and_gradient(eik_pts)
        return neus_loss(out.color, truth, grad)

    params = field.params()
    ad.zero_grads(params)
    ad.backward(loss())
    for name in ("field.sdf.0.weight", "field.sdf.2.weight", "field.color.0.weight", "field.log_s"):
        p = params[name]
        idx = rng.choice(p.data.size, min(30, p.data.size), replace=False)
        flat = p.data.reshape(-1)
        num = []
        with ad.no_grad():
            for i in idx:
                old = flat[i]
                flat[i] = old + 1e-6
                up = float(loss().data)
                flat[i] = old - 1e-6
                down = float(loss().data)
                flat[i] = old
                num.append((up - down) / 2e-6)
        assert rel_error(p.grad.reshape(-1)[idx], np.asarray(num)) < 1e-3, name
