"""End-to-end acceptance checks, one per criterion, each printing a PASS/FAIL line.

Criteria 7, 8 and 10 train full models (about 45 minutes on one core in
total).  Set ``IMPLICIT3D_SKIP_SLOW=1`` to skip them during development.

    python3 tests/test_acceptance.py
"""

import os
import sys
import time

import numpy as np
import pytest
from scipy import stats

from conftest import rel_error
from implicit3d import autodiff as ad
from implicit3d import diffusion as dd
from implicit3d import nerf, neus
from implicit3d import pipeline as pl
from implicit3d.camera import Camera, generate_rays, look_at
from implicit3d.fields import MLP, RadianceField, SdfField, Sphere, two_spheres
from implicit3d.mesh import ScalarGrid, marching_cubes, sample_grid
from implicit3d.scenes import fixed_view_ring, make_scene, render_ground_truth, save_dataset

RESULTS: dict[int, str] = {}
SKIP_SLOW = os.environ.get("IMPLICIT3D_SKIP_SLOW") == "1"


def SLOW(fn):
    return pytest.mark.slow(pytest.mark.skipif(SKIP_SLOW, reason="IMPLICIT3D_SKIP_SLOW=1")(fn))


def report(n, ok, detail):
    line = f"criterion {n:>2}: {'PASS' if ok else 'FAIL'}  {detail}"
    RESULTS[n] = line
    print(line)
    assert ok, line


class Clock:
    def __enter__(self):
        self.start = time.perf_counter()
        return self

    def __exit__(self, *exc):
        self.seconds = time.perf_counter() - self.start


def fd_check(loss, params, gen, k=20, step=1e-6):
    """Worst relative error of autodiff against central differences over ``k`` entries per parameter."""
    ad.zero_grads(params)
    ad.backward(loss())
    worst = 0.0
    for p in params.values():
        idx = gen.choice(p.data.size, min(k, p.data.size), replace=False)
        flat = p.data.reshape(-1)
        num = []
        with ad.no_grad():
            for i in idx:
                old = flat[i]
                flat[i] = old + step
                up = float(loss().data)
                flat[i] = old - step
                down = float(loss().data)
                flat[i] = old
                num.append((up - down) / (2 * step))
        worst = max(worst, rel_error(p.grad.reshape(-1)[idx], np.asarray(num), floor=1e-8))
    return worst


def test_criterion_01_quadrature_exactness():
    gen = np.random.default_rng(1)
    worst = 0.0
    with Clock() as clock:
        for _ in range(200):
            pieces = gen.integers(1, 16)
            bounds = np.concatenate([[1.5], 1.5 + np.cumsum(gen.uniform(0.01, 0.5, pieces))])
            sig = gen.exponential(2.0, pieces) * (gen.random(pieces) > 0.3)
            col, bg = gen.random((pieces, 3)), gen.random(3)
            exact = nerf.render_ray_analytic(bounds, sig, col, bg)
            out = nerf.render_quadrature(sig[None], col[None], np.diff(bounds)[None], bg)
            worst = max(worst, rel_error(out.color.data[0], exact, floor=1e-12))
    report(1, worst < 1e-6 and clock.seconds < 1.0,
           f"200 profiles, max rel err {worst:.2e} (< 1e-6), {clock.seconds:.2f} s (< 1 s)")


def test_criterion_02_weight_normalisation():
    gen = np.random.default_rng(2)
    n_rays = 10_000
    with Clock() as clock:
        sigma = gen.exponential(3.0, (n_rays, 64)) * (gen.random((n_rays, 64)) > 0.5)
        out = nerf.render_quadrature(sigma, gen.random((n_rays, 64, 3)), gen.uniform(0.001, 0.3, (n_rays, 64)))
        err_nerf = np.abs(out.weights.sum(1) + out.t_rem - 1).max()
        f = np.cumsum(gen.normal(0, 0.2, (n_rays, 65)), axis=1) + gen.normal(0, 1, (n_rays, 1))
        w = neus.neus_weights(f, gen.uniform(1, 200, (n_rays, 1)))
        err_neus = np.abs(w.weights.sum(1) + w.t_rem - 1).max()
    ok = err_nerf < 1e-6 and err_neus < 1e-6 and clock.seconds < 1.0
    report(2, ok, f"1e4 rays, max |sum w + T - 1| nerf {err_nerf:.1e} neus {err_neus:.1e}, {clock.seconds:.2f} s")


def test_criterion_03_neus_unbiased_and_occlusion_aware():
    with Clock() as clock:
        t = np.linspace(1.5, 3.5, 257)
        mids = 0.5 * (t[1:] + t[:-1])
        offsets = []
        for s in (5.0, 20.0, 80.0):
            w = neus.neus_weights(2.37 - t, s).weights[0]
            offsets.append(abs(mids[np.argmax(w)] - 2.37))
        spacing = t[1] - t[0]

        cam = Camera(21, 21, 30.0, look_at((0.0, 0.0, 2.5), (0, 0, 0)), 1.0, 4.0)
        rays = generate_rays(cam)
        o, d = rays.origins, rays.directions
        hits = np.ones(len(rays), bool)
        for c in (np.array([0, 0, 0.5]), np.array([0, 0, -0.5])):
            b = np.sum((o - c) * d, axis=1)
            hits &= b**2 - (np.sum((o - c) ** 2, axis=1) - 0.09) > 1e-4
        ts = np.linspace(1.0, 4.0, 513)
        pts = o[hits, None] + ts[None, :, None] * d[hits, None]
        split = np.abs(o[hits, 2:3] / d[hits, 2:3])  # the z = 0 plane separates the spheres
        tm = 0.5 * (ts[1:] + ts[:-1])
        occluded = True
        for s in (20.0, 80.0):
            w = neus.neus_weights(two_spheres().sdf(pts), s).weights
            occluded &= bool(np.all(np.where(tm < split, w, 0).sum(1) > np.where(tm >= split, w, 0).sum(1)))
    ok = max(offsets) <= spacing and occluded and hits.sum() > 0 and clock.seconds < 5.0
    report(3, ok, f"peak offsets {np.round(offsets, 4).tolist()} (<= {spacing:.4f}), first > second on "
                  f"{hits.sum()} rays: {occluded}, {clock.seconds:.2f} s")


def test_criterion_04_gradient_integrity(monkeypatch):
    gen = np.random.default_rng(4)
    with Clock() as clock:
        mlp_worst = 0.0
        for trial in range(3):
            net = MLP([5, 24, 24, 3], gen, f"m{trial}", dtype=np.float64)
            for _, b in net.layers:
                b.data[:] = gen.normal(0, 0.3, b.shape)
            x = ad.parameter(gen.normal(size=(7, 5)), "x", np.float64)
            target = gen.normal(size=(7, 3))
            params = {**net.params(), "x": x}
            mlp_worst = max(mlp_worst, fd_check(lambda: ad.mean(ad.square(ad.sub(net(x), target))), params, gen))

        cam = Camera(8, 8, 40.0, look_at((0.3, 1.0, 2.4), (0, 0, 0)), 1.5, 3.5)
        rays = generate_rays(cam, [10, 27, 35, 50])
        truth = gen.random((4, 3))
        coarse = RadianceField(seed=0, dtype=np.float64, width=16, depth=2, color_width=8, prefix="c")
        fine = RadianceField(seed=1, dtype=np.float64, width=16, depth=2, color_width=8, prefix="f")
        cfg = nerf.SamplingConfig(12, 12)
        real = nerf.hierarchical_resample
        frozen = {}

        def resample(*args):
            # fine positions are a stop-gradient; hold them fixed while differencing
            if "t" not in frozen:
                frozen["t"] = real(*args)
            return frozen["t"]

        monkeypatch.setattr(nerf, "hierarchical_resample", resample)

        def nerf_loss():
            c, f = nerf.render_rays(coarse, fine, rays, cfg, 0, np.arange(4))
            return nerf.nerf_loss(c.color, f.color, truth)

        nerf_worst = fd_check(nerf_loss, {**coarse.params(), **fine.params()}, gen)

        field = SdfField(seed=3, width=16, depth=2, color_width=8, dtype=np.float64)
        eik = gen.uniform(-1, 1, (6, 3))

        def neus_loss():
            out = neus.render_rays(field, rays, 24, (1, 1, 1), 0, np.arange(4))
            _, grad = field.sdf_and_gradient(eik)
            return neus.neus_loss(out.color, truth, grad)

        neus_worst = fd_check(neus_loss, field.params(), gen)
    ok = mlp_worst < 1e-4 and nerf_worst < 1e-3 and neus_worst < 1e-3 and clock.seconds < 30.0
    report(4, ok, f"rel err MLP {mlp_worst:.1e} (< 1e-4), NeRF path {nerf_worst:.1e}, NeuS path {neus_worst:.1e} "
                  f"(< 1e-3), {clock.seconds:.1f} s")


def test_criterion_05_sync_sampler_oracle():
    with Clock() as clock:
        sched = dd.make_schedule(1000)
        m, v = 1.5, 0.25
        oracle = dd.GaussianOracle(m, v, sched)
        x = dd.sample(dd.IndependentPredictor(oracle), 1, (10_000,), sched, seed=42)[0]
        z = abs(x.mean() - m) / np.sqrt(v / x.size)
        var_err = abs(x.var() / v - 1)
        ref = dd.ddpm_sample_single(oracle, (10_000,), sched, seed=42)
        bitwise_single = x.tobytes() == ref.tobytes()
        avg = dd.ViewAveragingPredictor(dd.IndependentPredictor(oracle), sched, 0.5)
        shared = dd.sample(avg, 4, (256,), sched, seed=7, shared_noise=True)
        bitwise_shared = all(view.tobytes() == shared[0].tobytes() for view in shared[1:])
    ok = z < 3 and var_err < 0.05 and bitwise_single and bitwise_shared and clock.seconds < 60
    report(5, ok, f"mean off by {z:.2f} SE (< 3), var off by {var_err:.2%} (< 5%), N=1 bitwise {bitwise_single}, "
                  f"shared-noise views bitwise {bitwise_shared}, {clock.seconds:.1f} s")


def test_criterion_06_hierarchical_resampling():
    gen = np.random.default_rng(6)
    with Clock() as clock:
        t = np.linspace(2.0, 6.0, 16, endpoint=False)[None]
        w = np.zeros((1, 16))
        w[0, 5] = 1.0
        fine = np.setdiff1d(nerf.hierarchical_resample(t, w, 6.0, 10_000, gen.random((1, 10_000)))[0], t[0])
        in_bin = bool(np.all((fine >= t[0, 5]) & (fine <= t[0, 6])))
        t = np.linspace(0.0, 1.0, 32, endpoint=False)[None]
        merged = nerf.hierarchical_resample(t, np.ones((1, 32)), 1.0, 10_000, gen.random((1, 10_000)))
        p = stats.kstest(np.setdiff1d(merged[0], t[0]), "uniform").pvalue
    ok = in_bin and p > 0.01 and clock.seconds < 5
    report(6, ok, f"single bin holds all 1e4 draws: {in_bin}, uniform KS p = {p:.3f} (> 0.01), {clock.seconds:.2f} s")


def test_criterion_09_marching_cubes():
    with Clock() as clock:
        grid = sample_grid(Sphere(radius=0.6).sdf, -1.0, 1.0, 64)
        mesh = marching_cubes(grid, 0.0)
        dev = np.abs(np.linalg.norm(mesh.vertices, axis=1) - 0.6).max()
        empty = marching_cubes(ScalarGrid(np.ones((64, 64, 64)), grid.lo, grid.hi), 0.0)
    diag = float(np.linalg.norm(grid.spacing))
    ok = dev <= diag and empty.n_vertices == 0 and empty.n_triangles == 0 and clock.seconds < 5
    report(9, ok, f"max radius error {dev:.4f} (<= cell diagonal {diag:.4f}), all-positive grid -> "
                  f"{empty.n_triangles} triangles, {clock.seconds:.2f} s")


# ------------------------------------------------------------------ end to end


@pytest.fixture(scope="module")
def sphere_dataset(tmp_path_factory):
    data = render_ground_truth(make_scene("checker_sphere"), fixed_view_ring(16, width=64, height=64))
    root = save_dataset(data, tmp_path_factory.mktemp("acceptance") / "checker_sphere")
    return data, root


_RUNS: dict = {}


def trained(method, tag, sphere_dataset):
    key = (method, tag)
    if key not in _RUNS:
        data, root = sphere_dataset
        out = root.parent / f"{method}_{tag}"
        cfg = pl.RunConfig(method=method, dataset=str(root), iterations=5000, seed=0, out_dir=str(out))
        with Clock() as clock:
            _, rep = pl.train(cfg, data)
        _RUNS[key] = (rep, out, clock.seconds)
    return _RUNS[key]


@SLOW
def test_criterion_07_nerf_end_to_end(sphere_dataset):
    rep, _, seconds = trained("nerf", "a", sphere_dataset)
    held = rep["heldout"]
    gain = held["mean_psnr"] - held["mean_baseline_psnr"]
    report(7, gain >= 8.0 and seconds <= 20 * 60,
           f"held-out PSNR {held['mean_psnr']:.2f} dB vs background {held['mean_baseline_psnr']:.2f} dB, "
           f"gain {gain:.2f} dB (>= 8), {seconds / 60:.1f} min (<= 20)")


@SLOW
def test_criterion_08_neus_mesh(sphere_dataset):
    rep, out, seconds = trained("neus", "a", sphere_dataset)
    err = rep["mesh"]["mean_abs_sdf"]
    ok = err < 0.05 * 0.6 and rep["mesh"]["vertices"] > 0 and (out / "mesh.obj").exists() and seconds <= 30 * 60
    report(8, ok, f"mean |sphere SDF| at {rep['mesh']['vertices']} vertices {err:.4f} (< 0.03 = 5% of r), "
                  f"{seconds / 60:.1f} min (<= 30)")


@SLOW
def test_criterion_10_determinism(sphere_dataset):
    same = {}
    for method in ("nerf", "neus"):
        _, first, _ = trained(method, "a", sphere_dataset)
        _, second, _ = trained(method, "b", sphere_dataset)
        same[method] = (first / pl.REPORT_NAME).read_bytes() == (second / pl.REPORT_NAME).read_bytes()
    report(10, all(same.values()), f"rerun metrics.json byte-identical: {same}")


if __name__ == "__main__":
    sys.exit(pytest.main([__file__, "-v", "-p", "no:cacheprovider"]))
