"""Command-line entry point: ``implicit3d <subcommand> [--config PATH] [--seed N] [--out DIR]``.

Every subcommand exits 0 on success and prints a one-line JSON summary to
stdout.  On failure it prints ``{"error": ..., "message": ...}`` to stderr and
exits nonzero.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import diffusion, pipeline, scenes
from .mesh import export_obj, export_ply
from .pipeline import RunConfig

EXIT_USAGE = 2
EXIT_FAILURE = 1


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _emit(doc):
    print(json.dumps(doc, sort_keys=True))


def _load_config(args, method=None) -> RunConfig:
    overrides = {"seed": args.seed, "out_dir": args.out}
    if getattr(args, "dataset", None):
        overrides["dataset"] = args.dataset
    if args.config:
        cfg = RunConfig.from_json(args.config, **overrides)
    else:
        cfg = RunConfig(**{k: v for k, v in overrides.items() if v is not None})
    if method is not None:
        if args.config and cfg.method != method:
            raise ValueError(f"config method {cfg.method!r} does not match subcommand train-{method}")
        cfg.method = method
    return cfg


# ------------------------------------------------------------------ subcommands


def cmd_synth_data(args):
    scene = scenes.make_scene(args.scene)
    cams = scenes.fixed_view_ring(n=args.views, width=args.size, height=args.size)
    data = scenes.render_ground_truth(scene, cams, seed=args.seed or 0)
    out = scenes.save_dataset(data, args.out or "data/" + args.scene)
    return {"dataset": str(out), "views": len(data), "scene": args.scene}


def _cmd_train(args, method):
    cfg = _load_config(args, method).validate()
    _, report = pipeline.train(cfg)
    summary = {"out_dir": cfg.out_dir, "method": method, "final_loss": report["final_loss"]}
    if "heldout" in report:
        summary["heldout_psnr"] = report["heldout"]["mean_psnr"]
    if "mesh" in report:
        summary["mesh"] = report["mesh"]
    return summary


def cmd_train_nerf(args):
    return _cmd_train(args, "nerf")


def cmd_train_neus(args):
    return _cmd_train(args, "neus")


def _cameras(path):
    p = Path(path)
    doc_path = p / "cameras.json" if p.is_dir() else p
    cams, _ = scenes.cameras_from_document(json.loads(doc_path.read_text()))
    return cams


def cmd_render(args):
    method, _, meta = pipeline.load_model(args.checkpoint)
    cfg = _load_config(args) if args.config else RunConfig(method=method, background=meta.get("background", [1, 1, 1]))
    if args.seed is not None:
        cfg.seed = args.seed
    out = Path(args.out or "renders")
    images = pipeline.render_views(args.checkpoint, _cameras(args.cameras), cfg, out)
    return {"out_dir": str(out), "images": len(images), "method": method}


def cmd_extract_mesh(args):
    method, model, _ = pipeline.load_model(args.checkpoint)
    mesh = pipeline.extract_mesh(method, model, args.resolution, args.bound, args.iso)
    out = Path(args.out or ".")
    out.mkdir(parents=True, exist_ok=True)
    export_obj(mesh, out / "mesh.obj")
    files = ["mesh.obj"]
    if args.ply:
        mesh.colors = pipeline.vertex_colors(method, model, mesh)
        export_ply(mesh, out / "mesh.ply")
        files.append("mesh.ply")
    stats = pipeline.mesh_stats(mesh)
    return {"out_dir": str(out), "files": files, **stats}


def _parse_shape(text):
    try:
        shape = tuple(int(s) for s in text.lower().split("x"))
    except ValueError:
        raise UsageError(f"--shape must look like 1000 or 16x16, got {text!r}") from None
    if not shape or min(shape) < 1:
        raise UsageError(f"--shape entries must be positive, got {text!r}")
    return shape


def cmd_sync_sample(args):
    shape = _parse_shape(args.shape)
    sched = diffusion.make_schedule(args.steps, args.beta_start, args.beta_end)
    oracle = diffusion.GaussianOracle(args.mean, args.var, sched)
    if args.predictor == "gaussian":
        predictor = diffusion.IndependentPredictor(oracle)
    else:
        predictor = diffusion.ViewAveragingPredictor(oracle, sched, args.kappa)
    x = diffusion.sample(predictor, args.views, shape, sched, seed=args.seed or 0, shared_noise=args.shared_noise)
    out = Path(args.out or "sync_sample")
    out.mkdir(parents=True, exist_ok=True)
    files = []
    if len(shape) >= 2:
        for n, view in enumerate(x):
            name = f"view_{n:03d}.png"
            img = view if view.ndim == 3 else np.repeat(view[..., None], 3, axis=-1)
            scenes.write_png(out / name, (img + 1.0) / 2.0)
            files.append(name)
    else:
        name = "samples.csv"
        with open(out / name, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["index"] + [f"view_{n}" for n in range(args.views)])
            flat = x.reshape(args.views, -1)
            for i in range(flat.shape[1]):
                w.writerow([i] + [repr(float(v)) for v in flat[:, i]])
        files.append(name)
    flat = x.reshape(args.views, -1)
    stats = {
        "views": args.views, "shape": list(shape), "steps": args.steps, "seed": args.seed or 0,
        "predictor": args.predictor, "kappa": args.kappa if args.predictor == "averaging" else None,
        "shared_noise": args.shared_noise, "target": {"mean": args.mean, "var": args.var},
        "per_view": [{"mean": float(v.mean()), "var": float(v.var())} for v in flat],
        "pooled_mean": float(flat.mean()), "pooled_var": float(flat.var()),
        "across_view_var": float(flat.var(axis=0).mean()), "files": files,
    }
    (out / "stats.json").write_text(json.dumps(stats, indent=2, sort_keys=True) + "\n")
    return {"out_dir": str(out), "files": files + ["stats.json"]}


def _image_dir(path, prefix):
    d = Path(path)
    files = sorted(d.glob(f"{prefix}_*.png"))
    if not files:
        raise FileNotFoundError(f"no {prefix}_*.png images in {d}")
    return np.stack([scenes.read_png(f) for f in files])


def cmd_eval(args):
    out = Path(args.out or ".")
    out.mkdir(parents=True, exist_ok=True)
    if args.runs:
        rows = {}
        for run in args.runs:
            rep = json.loads((Path(run) / pipeline.REPORT_NAME).read_text())
            rows[rep["method"]] = {"run": str(run), "mean_psnr": rep.get("heldout", {}).get("mean_psnr"),
                                   "views": rep.get("heldout", {}).get("views", [])}
        table = {"comparison": rows}
        pipeline.write_report(table, out / "comparison.json")
        return {"out": str(out / "comparison.json"), "methods": sorted(rows)}
    if not (args.rendered and args.truth):
        raise UsageError("eval needs --rendered and --truth directories, or --runs DIR [DIR ...]")
    rendered = _image_dir(args.rendered, args.rendered_prefix)
    truth = scenes.load_dataset(args.truth)
    views = list(range(len(truth))) if args.views is None else [int(v) for v in args.views.split(",")]
    t = truth.images[views]
    bg = np.asarray(args.background, dtype=np.float64)
    truth_rgb = np.where(t[..., 3:] > 0, t[..., :3], bg)
    report = pipeline.evaluate(rendered[..., :3], truth_rgb, alphas=t[..., 3], views=views)
    pipeline.write_report(report, out / pipeline.REPORT_NAME)
    return {"out": str(out / pipeline.REPORT_NAME), "mean_psnr": report["mean_psnr"]}


# ------------------------------------------------------------------ parser


def build_parser():
    parser = _Parser(prog="implicit3d", description="Radiance-field and SDF reconstruction toolkit.")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", parser_class=_Parser)

    def add(name, fn, help_text):
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--config", help="RunConfig JSON file")
        p.add_argument("--seed", type=int, help="unsigned 64-bit seed")
        p.add_argument("--out", help="output directory")
        p.set_defaults(func=fn)
        return p

    p = add("synth-data", cmd_synth_data, "render a posed dataset of an analytic scene")
    p.add_argument("--scene", default="checker_sphere", choices=scenes.SCENES)
    p.add_argument("--views", type=int, default=16)
    p.add_argument("--size", type=int, default=64)

    for name, fn in (("train-nerf", cmd_train_nerf), ("train-neus", cmd_train_neus)):
        p = add(name, fn, f"train a {name[6:]} model")
        p.add_argument("--dataset", help="dataset directory (overrides the config)")

    p = add("render", cmd_render, "render cameras from a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--cameras", required=True, help="dataset directory or cameras.json")

    p = add("extract-mesh", cmd_extract_mesh, "marching-cubes mesh from a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--resolution", type=int, default=128)
    p.add_argument("--bound", type=float, default=1.0)
    p.add_argument("--iso", type=float, default=None)
    p.add_argument("--ply", action="store_true", help="also write a binary PLY")

    p = add("sync-sample", cmd_sync_sample, "synchronized multiview diffusion sampling")
    p.add_argument("--views", type=int, default=4)
    p.add_argument("--shape", default="1000", help="per-view state shape, e.g. 1000 or 32x32")
    p.add_argument("--steps", type=int, default=1000)
    p.add_argument("--beta-start", type=float, default=1e-4)
    p.add_argument("--beta-end", type=float, default=0.02)
    p.add_argument("--predictor", choices=("gaussian", "averaging"), default="gaussian")
    p.add_argument("--kappa", type=float, default=0.5)
    p.add_argument("--mean", type=float, default=0.0)
    p.add_argument("--var", type=float, default=1.0)
    p.add_argument("--shared-noise", action="store_true")

    p = add("eval", cmd_eval, "PSNR of rendered images against a dataset, or compare runs")
    p.add_argument("--rendered", help="directory of rendered PNGs")
    p.add_argument("--rendered-prefix", default="render")
    p.add_argument("--truth", help="dataset directory")
    p.add_argument("--views", help="comma-separated dataset indices matching the rendered images")
    p.add_argument("--background", type=float, nargs=3, default=[1.0, 1.0, 1.0])
    p.add_argument("--runs", nargs="+", help="training output directories to tabulate")
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if args.command is None:
            raise UsageError("a subcommand is required")
        if args.seed is not None and not 0 <= args.seed < 2**64:
            raise UsageError("--seed must be an unsigned 64-bit integer")
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, stream=sys.stderr)
        _emit(args.func(args))
        return 0
    except UsageError as exc:
        _fail("usage", str(exc))
        return EXIT_USAGE
    except pipeline.TrainingDiverged as exc:
        _fail("diverged", str(exc))
    except FileNotFoundError as exc:
        _fail("not_found", str(exc))
    except (ValueError, KeyError, TypeError, json.JSONDecodeError) as exc:
        _fail("invalid_input", f"{type(exc).__name__}: {exc}")
    except Exception as exc:  # noqa: BLE001 - report anything else in the same format
        _fail("internal", f"{type(exc).__name__}: {exc}")
    return EXIT_FAILURE


def _fail(kind, message):
    print(json.dumps({"error": kind, "message": message}), file=sys.stderr)


if __name__ == "__main__":
    sys.exit(main())
