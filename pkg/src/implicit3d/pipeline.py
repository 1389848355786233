"""Fit NeRF or NeuS models to posed views, then evaluate and mesh them."""

from __future__ import annotations

import json
import logging
import time
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from . import autodiff as ad
from . import nerf, neus
from .camera import Rays, generate_rays
from .fields import RadianceField, SdfField
from .mesh import ScalarGrid, export_obj, marching_cubes, sample_grid
from .scenes import PosedImageSet, load_dataset, sdf_from_description, write_png

log = logging.getLogger(__name__)

HELD_OUT = (0, 8)
PSNR_CAP = 99.0
DENSITY_ISO = 25.0
REPORT_NAME = "metrics.json"


class TrainingDiverged(RuntimeError):
    pass


@dataclass
class RunConfig:
    method: str = "nerf"
    dataset: str = ""
    iterations: int = 5000
    rays_per_batch: int = 128
    n_coarse: int = 64
    n_fine: int = 64
    n_samples: int = 96
    lr: float = 5e-4
    seed: int = 0
    background: list = field(default_factory=lambda: [1.0, 1.0, 1.0])
    eikonal_weight: float = 0.1
    out_dir: str = "runs/out"

    def validate(self, check_paths=True):
        if self.method not in ("nerf", "neus"):
            raise ValueError(f"method must be 'nerf' or 'neus', got {self.method!r}")
        if self.iterations < 1:
            raise ValueError("iterations must be >= 1")
        if self.rays_per_batch < 1:
            raise ValueError("rays_per_batch must be >= 1")
        if min(self.n_coarse, self.n_samples) < 1 or self.n_fine < 0:
            raise ValueError("sample counts must be positive")
        if len(self.background) != 3:
            raise ValueError("background must be an rgb triple")
        if check_paths and not Path(self.dataset).is_dir():
            raise FileNotFoundError(f"dataset directory {self.dataset!r} does not exist")
        return self

    @classmethod
    def from_json(cls, path, **overrides):
        doc = json.loads(Path(path).read_text())
        known = {f.name for f in fields(cls)}
        unknown = set(doc) - known
        if unknown:
            raise ValueError(f"unknown config fields: {sorted(unknown)}")
        doc.update({k: v for k, v in overrides.items() if v is not None})
        return cls(**doc)


# ------------------------------------------------------------------ metrics


def psnr(a, b, weights=None) -> float:
    """``10 log10(1 / MSE)`` over [0, 1] channels, capped at 99 dB."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"image shapes differ: {a.shape} vs {b.shape}")
    err = (a - b) ** 2
    if weights is None:
        mse = err.mean()
    else:
        w = np.broadcast_to(np.asarray(weights, dtype=np.float64)[..., None], err.shape)
        if w.sum() == 0:
            return PSNR_CAP
        mse = (err * w).sum() / w.sum()
    if mse <= 10.0 ** (-PSNR_CAP / 10.0):
        return PSNR_CAP
    return float(10.0 * np.log10(1.0 / mse))


def high_frequency_energy(img) -> float:
    """Mean squared discrete Laplacian; larger for noisy images, smaller for blurry ones."""
    img = np.asarray(img, dtype=np.float64)
    lap = (-4 * img[1:-1, 1:-1] + img[:-2, 1:-1] + img[2:, 1:-1] + img[1:-1, :-2] + img[1:-1, 2:])
    return float(np.mean(lap**2))


def evaluate(rendered, truth, alphas=None, views=None) -> dict:
    """Per-view PSNR (plain and foreground-weighted) and high-frequency energy."""
    rendered = np.asarray(rendered)
    truth = np.asarray(truth)
    if rendered.shape != truth.shape:
        raise ValueError(f"rendered set {rendered.shape} does not match truth set {truth.shape}")
    views = list(range(len(rendered))) if views is None else list(views)
    rows = []
    for i, (r, t) in enumerate(zip(rendered, truth)):
        row = {"view": int(views[i]), "psnr": psnr(r, t), "hf_energy": high_frequency_energy(r),
               "hf_energy_truth": high_frequency_energy(t)}
        if alphas is not None:
            row["psnr_foreground"] = psnr(r, t, weights=alphas[i])
        rows.append(row)
    return {"views": rows, "mean_psnr": float(np.mean([r["psnr"] for r in rows]))}


# ------------------------------------------------------------------ models


def build_model(method, seed):
    if method == "nerf":
        return {"coarse": RadianceField(seed=seed, prefix="coarse"),
                "fine": RadianceField(seed=seed + 1, prefix="fine")}
    return {"field": SdfField(seed=seed, prefix="field")}


def model_params(model):
    out = {}
    for part in model.values():
        out.update(part.params())
    return out


def load_model(path):
    kind, arrays, meta = ad.load_checkpoint(path)
    method = meta.get("method")
    if method not in ("nerf", "neus") or kind != ("radiance" if method == "nerf" else "sdf"):
        raise ValueError(f"{path}: checkpoint kind {kind!r} / method {method!r} not recognised")
    model = build_model(method, meta.get("seed", 0))
    params = model_params(model)
    if set(params) != set(arrays):
        raise ValueError(f"{path}: parameter names do not match a {method} model")
    for name, p in params.items():
        if p.shape != arrays[name].shape:
            raise ValueError(f"{path}: parameter {name} has shape {arrays[name].shape}, expected {p.shape}")
        p.data = arrays[name]
    return method, model, meta


def save_model(path, method, model, config: RunConfig):
    kind = "radiance" if method == "nerf" else "sdf"
    ad.save_checkpoint(path, model_params(model), kind, {"method": method, "seed": config.seed,
                                                        "background": list(config.background)})


# ------------------------------------------------------------------ training


def _training_split(data: PosedImageSet, held_out):
    held = [i for i in held_out if i < len(data)]
    train = [i for i in range(len(data)) if i not in held]
    if not train:
        raise ValueError("no training views left after holding out evaluation views")
    return train, held


def _training_rays(data: PosedImageSet, views, background):
    origins, dirs, targets = [], [], []
    bg = np.asarray(background, dtype=np.float64)
    for v in views:
        rays = generate_rays(data.cameras[v])
        rgb = data.rgb[v].reshape(-1, 3)
        alpha = data.alpha[v].reshape(-1)
        origins.append(rays.origins)
        dirs.append(rays.directions)
        targets.append(np.where(alpha[:, None] > 0, rgb, bg))
    cam = data.cameras[views[0]]
    return np.concatenate(origins), np.concatenate(dirs), np.concatenate(targets), cam.t_near, cam.t_far


def _step_loss(method, model, config, rays, target, keys, rng):
    if method == "nerf":
        cfg = nerf.SamplingConfig(config.n_coarse, config.n_fine, tuple(config.background))
        coarse, fine = nerf.render_rays(model["coarse"], model["fine"], rays, cfg, config.seed, keys)
        return nerf.nerf_loss(coarse.color, fine.color, target)
    f = model["field"]
    out, sdf_pts = neus.render_rays(f, rays, config.n_samples, tuple(config.background), config.seed, keys,
                                    return_points=True)
    n = len(rays)
    eik = np.concatenate([rng.uniform(-1.0, 1.0, (n, 3)), sdf_pts[rng.integers(0, len(sdf_pts), n)]])
    _, grad = f.sdf_and_gradient(eik)
    return neus.neus_loss(out.color, target, grad, config.eikonal_weight)


def train(config: RunConfig, data: PosedImageSet | None = None, held_out=HELD_OUT, write=True):
    """Optimise a NeRF or NeuS model on the training views; returns (model, report).

    When ``write`` is set, the checkpoint, held-out renders, mesh and
    ``metrics.json`` go to ``config.out_dir``.
    """
    config.validate(check_paths=data is None)
    data = load_dataset(config.dataset) if data is None else data
    method = config.method
    train_views, held = _training_split(data, held_out)
    origins, dirs, targets, t_near, t_far = _training_rays(data, train_views, config.background)
    n_rays = len(origins)
    model = build_model(method, config.seed)
    params = model_params(model)
    state = ad.AdamState(lr=config.lr)
    out_dir = Path(config.out_dir)
    if write:
        out_dir.mkdir(parents=True, exist_ok=True)
    last_good = {k: p.data.copy() for k, p in params.items()}
    curve = []
    started = time.perf_counter()
    for it in range(1, config.iterations + 1):
        rng = np.random.default_rng([config.seed, it])
        idx = rng.choice(n_rays, size=min(config.rays_per_batch, n_rays), replace=False)
        rays = Rays(origins[idx], dirs[idx], t_near, t_far)
        keys = (it - 1) * n_rays + idx
        ad.zero_grads(params)
        loss = _step_loss(method, model, config, rays, targets[idx], keys, rng)
        value = float(loss.data)
        if not np.isfinite(value):
            _abort(method, model, params, last_good, config, out_dir, write, it)
        ad.backward(loss)
        try:
            ad.adam_step(params, state)
        except ad.NonFiniteGradient as exc:
            _abort(method, model, params, last_good, config, out_dir, write, it, str(exc))
        curve.append([it, value])
        if it % 250 == 0 or it == config.iterations:
            last_good = {k: p.data.copy() for k, p in params.items()}
            log.info("%s iter %d loss %.6f", method, it, value)
    elapsed = time.perf_counter() - started

    # the output location is left out so reruns elsewhere give identical bytes
    settings = {k: v for k, v in asdict(config).items() if k != "out_dir"}
    report = {"method": method, "config": settings, "train_views": train_views,
              "held_out_views": held, "loss_curve": curve, "final_loss": curve[-1][1]}
    if method == "neus":
        report["final_sharpness"] = float(model["field"].s.data[0])
    if held:
        rendered = [render_model(method, model, data.cameras[v], config) for v in held]
        truth = np.stack([np.where(data.alpha[v][..., None] > 0, data.rgb[v], config.background) for v in held])
        ev = evaluate(np.stack([r[0] for r in rendered]), truth, alphas=data.alpha[held], views=held)
        bg_img = np.broadcast_to(np.asarray(config.background, dtype=np.float64), truth.shape)
        baseline = evaluate(bg_img, truth, views=held)
        for row, base in zip(ev["views"], baseline["views"]):
            row["baseline_psnr"] = base["psnr"]
        ev["mean_baseline_psnr"] = baseline["mean_psnr"]
        report["heldout"] = ev
        if write:
            for v, (rgb, alpha) in zip(held, rendered):
                write_png(out_dir / f"heldout_{v:03d}.png", np.concatenate([rgb, alpha[..., None]], axis=-1))
    gt_sdf = sdf_from_description(data.metadata.get("scene", {}))
    if method == "neus":
        mesh = extract_mesh(method, model, resolution=128)
        report["mesh"] = mesh_stats(mesh, gt_sdf)
        if write:
            export_obj(mesh, out_dir / "mesh.obj")
    if write:
        save_model(out_dir / "checkpoint.json", method, model, config)
        write_report(report, out_dir / REPORT_NAME)
        (out_dir / "timing.json").write_text(json.dumps({"wall_clock_seconds": elapsed}, indent=2))
    log.info("%s training took %.1f s", method, elapsed)
    return model, report


def _abort(method, model, params, last_good, config, out_dir, write, it, detail="non-finite loss"):
    for k, p in params.items():
        p.data = last_good[k]
    if write:
        save_model(out_dir / "checkpoint.json", method, model, config)
    raise TrainingDiverged(f"training diverged at iteration {it}: {detail}; last good checkpoint kept")


def write_report(report, path):
    Path(path).write_text(json.dumps(report, indent=2, sort_keys=True) + "\n")


# ------------------------------------------------------------------ rendering / meshes


def render_model(method, model, camera, config: RunConfig):
    """(H, W, 3) colour and (H, W) alpha = 1 - residual transmittance."""
    bg = tuple(config.background)
    with ad.no_grad():
        if method == "nerf":
            cfg = nerf.SamplingConfig(config.n_coarse, config.n_fine, bg)
            rgb, t_rem = nerf.render_image(model["coarse"], model["fine"], camera, cfg, seed=config.seed)
        else:
            rgb, t_rem = neus.render_image(model["field"], camera, config.n_samples, bg, seed=config.seed)
    return rgb, 1.0 - t_rem


def render_views(checkpoint, cameras, config: RunConfig, out_dir=None):
    """Render each camera from a checkpoint; writes ``render_%03d.png`` when ``out_dir`` is given."""
    method, model, _ = load_model(checkpoint)
    if method != config.method:
        raise ValueError(f"checkpoint holds a {method} model but config.method is {config.method!r}")
    images = []
    for i, cam in enumerate(cameras):
        rgb, alpha = render_model(method, model, cam, config)
        rgba = np.concatenate([rgb, alpha[..., None]], axis=-1)
        images.append(rgba)
        if out_dir is not None:
            Path(out_dir).mkdir(parents=True, exist_ok=True)
            write_png(Path(out_dir) / f"render_{i:03d}.png", rgba)
    return np.stack(images)


def field_grid(method, model, resolution=128, bound=1.0) -> ScalarGrid:
    fn = model["field"].sdf_values if method == "neus" else model["fine"].density
    with ad.no_grad():
        return sample_grid(fn, -bound, bound, resolution)


def extract_mesh(method, model, resolution=128, bound=1.0, iso=None):
    """SDF zero level set for NeuS; density level ``iso`` (default 25) for NeRF."""
    grid = field_grid(method, model, resolution, bound)
    if method == "neus":
        return marching_cubes(grid, 0.0 if iso is None else iso)
    tau = DENSITY_ISO if iso is None else iso
    # density is "inside" above the threshold
    return marching_cubes(ScalarGrid(-grid.values, grid.lo, grid.hi), -tau)


def mesh_stats(mesh, gt_sdf=None) -> dict:
    stats = {"vertices": mesh.n_vertices, "triangles": mesh.n_triangles}
    if gt_sdf is not None and mesh.n_vertices:
        err = np.abs(gt_sdf(mesh.vertices))
        stats["mean_abs_sdf"] = float(err.mean())
        stats["max_abs_sdf"] = float(err.max())
    return stats


def vertex_normals(mesh) -> np.ndarray:
    """Area-weighted unit vertex normals (outward for meshes from :func:`extract_mesh`)."""
    acc = np.zeros_like(mesh.vertices, dtype=np.float64)
    fn = mesh.face_normals()
    for c in range(3):
        np.add.at(acc, mesh.triangles[:, c], fn)
    norm = np.linalg.norm(acc, axis=1, keepdims=True)
    return acc / np.where(norm > 0, norm, 1.0)


def vertex_colors(method, model, mesh, chunk=65536) -> np.ndarray:
    """Field colour at each vertex, viewed head-on from outside the surface."""
    view = -vertex_normals(mesh)
    out = np.empty((mesh.n_vertices, 3))
    with ad.no_grad():
        for s in range(0, mesh.n_vertices, chunk):
            x, d = mesh.vertices[s : s + chunk], view[s : s + chunk]
            if method == "neus":
                rgb = model["field"].color(x, d)
            else:
                _, rgb = model["fine"].query(x, d)
            out[s : s + chunk] = rgb.data
    return out
