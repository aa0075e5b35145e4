"""``handmesh`` command line.

Every subcommand prints one JSON object on stdout and writes only under
``--out``. Global flags can also come from ``HANDMESH_SEED``,
``HANDMESH_WORKERS`` and ``HANDMESH_LOG_LEVEL``.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

ENV_PREFIX = "HANDMESH_"

logger = logging.getLogger("handmesh")


class CommandError(Exception):
    pass


def _env(name: str, default):
    return os.environ.get(ENV_PREFIX + name, default)


def _read_json(path) -> dict:
    try:
        return json.loads(Path(path).read_text(encoding="utf-8"))
    except FileNotFoundError:
        raise CommandError(f"file not found: {path}") from None
    except json.JSONDecodeError as e:
        raise CommandError(f"{path}: invalid JSON ({e})") from None


def _out_dir(args) -> Path:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _out_file(args) -> Path:
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    return out


def _load_image(path, size: int | None = None) -> np.ndarray:
    from PIL import Image

    img = Image.open(path).convert("RGB")
    if size is not None and img.size != (size, size):
        img = img.resize((size, size), Image.BILINEAR)
    return np.asarray(img)


def _mesh_vertices(path) -> np.ndarray:
    from .mesh import load_mesh

    p = Path(path)
    return np.load(p) if p.suffix == ".npy" else load_mesh(p).vertices


# -- commands ----------------------------------------------------------------------


def cmd_synth_model(args) -> dict:
    from .hand_model import generate_synthetic_assets

    assets = generate_synthetic_assets(args.seed, args.vertices)
    out = _out_dir(args)
    assets.save(out)
    return {"out": str(out), "n_vertices": assets.n_vertices, "n_faces": assets.template.n_faces,
            "n_betas": assets.n_betas}


def cmd_decimate(args) -> dict:
    from .mesh import load_mesh
    from .sampling import build_hierarchy

    mesh = load_mesh(Path(args.assets) / "template.obj") if args.assets else load_mesh(args.mesh)
    sizes = [int(s) for s in args.sizes.split(",")] if args.sizes else None
    h = build_hierarchy(mesh, args.levels, sizes)
    out = _out_dir(args)
    h.save(out)
    return {"out": str(out), "sizes": list(reversed(h.sizes)), "levels": len(h.levels)}


def cmd_spirals(args) -> dict:
    from .mesh import build_adjacency
    from .sampling import MeshHierarchy
    from .spiral import build_spiral_table, default_spiral_length

    h = MeshHierarchy.load(args.hierarchy)
    out = _out_dir(args)
    lengths = []
    for i, level in enumerate(h.levels):
        adj = build_adjacency(level)
        length = args.length or default_spiral_length(adj, args.k)
        build_spiral_table(adj, args.k, length, args.seed).save(out / f"level_{i}.json")
        lengths.append(length)
    return {"out": str(out), "k": args.k, "lengths": lengths, "vertices": h.sizes}


def cmd_fit(args) -> dict:
    from .dataset import PipelineConfig, file_stem, read_keypoint_file, record_camera
    from .fitting import FitConfig, fit_batch
    from .hand_model import HandModelAssets
    from .mesh import save_mesh

    assets = HandModelAssets.load(args.assets)
    cfg = FitConfig.from_json(_read_json(args.config)) if args.config else FitConfig()
    paths = sorted(Path(args.keypoints).glob("*.json")) if Path(args.keypoints).is_dir() else [Path(args.keypoints)]
    records = [r for p in paths for r in read_keypoint_file(p)]
    if not records:
        raise CommandError("no keypoint records found")
    pcfg = PipelineConfig(fit=cfg)
    cams = [record_camera(r, pcfg) for r in records]
    results = fit_batch(assets, [r.keypoints for r in records], cams, cfg)
    out = _out_dir(args)
    summary = []
    for rec, res in zip(records, results):
        stem = file_stem(rec.image_id)
        save_mesh(assets.template.with_vertices(res.vertices), out / f"{stem}.obj")
        (out / f"{stem}.json").write_text(json.dumps(res.to_json(), indent=1), encoding="utf-8")
        summary.append({"image_id": stem, "mean_residual_px": float(res.residuals.mean()),
                        "objective": res.objective, "best_iteration": res.best_iteration})
    return {"out": str(out), "fits": summary}


def cmd_filter_dataset(args) -> dict:
    from .dataset import PipelineConfig, run_pipeline
    from .hand_model import HandModelAssets

    assets = HandModelAssets.load(args.assets)
    cfg = PipelineConfig.from_json(_read_json(args.config)) if args.config else PipelineConfig()
    cfg.seed = args.seed
    cfg.workers = args.workers
    files = sorted(Path(args.keypoints).glob("*.json"))
    if not files:
        raise CommandError(f"no keypoint files in {args.keypoints}")
    manifest = run_pipeline(files, assets, cfg, _out_dir(args))
    return {"out": args.out, "counts": manifest.counts, "default_thresholds": manifest.default_thresholds}


def cmd_synth_data(args) -> dict:
    from .dataset import synthetic_records, write_keypoint_file
    from .hand_model import HandModelAssets
    from .mesh import save_mesh
    from .network import synthesize_samples

    assets = HandModelAssets.load(args.assets)
    out = _out_dir(args)
    if args.kind == "keypoints":
        recs = synthetic_records(assets, args.n, args.source, args.seed, args.noise, args.crop)
        for rec, params in recs:
            write_keypoint_file(out / f"{rec.image_id}.json", [rec])
        truth = {rec.image_id: params.to_json() for rec, params in recs}
        (out / "ground_truth").mkdir(exist_ok=True)
        for i, p in truth.items():
            (out / "ground_truth" / f"{i}.json").write_text(json.dumps(p), encoding="utf-8")
        return {"out": str(out), "kind": "keypoints", "records": len(recs)}

    from PIL import Image

    samples = synthesize_samples(assets, args.n, args.seed, args.crop)
    index = []
    for i, s in enumerate(samples):
        img, mesh = f"image_{i:05d}.png", f"mesh_{i:05d}.obj"
        Image.fromarray(np.round(s.image * 255).astype(np.uint8)).save(out / img)
        save_mesh(assets.template.with_vertices(s.mesh), out / mesh)
        index.append({"image": img, "mesh": mesh})
    (out / "index.json").write_text(json.dumps({"crop": args.crop, "samples": index}, indent=1), encoding="utf-8")
    return {"out": str(out), "kind": "images", "samples": len(index)}


def _load_training_data(directory, crop: int):
    from .network import Sample

    d = Path(directory)
    index = _read_json(d / "index.json")
    return [Sample(_load_image(d / s["image"], crop).astype(np.float64) / 255.0, _mesh_vertices(d / s["mesh"]))
            for s in index["samples"]]


def cmd_train(args) -> dict:
    from .network import DecoderConfig, TrainConfig, config_from_json, train
    from .sampling import MeshHierarchy

    cfg = _read_json(args.config) if args.config else {}
    tcfg = config_from_json(TrainConfig, {**cfg.get("train", {}), "seed": args.seed})
    dcfg = config_from_json(DecoderConfig, cfg.get("decoder", {}))
    hierarchy = MeshHierarchy.load(args.hierarchy)
    samples = _load_training_data(args.data, tcfg.crop)
    result = train(samples, tcfg, dcfg, hierarchy)
    out = Path(args.out)
    result.model.save(out)
    (out / "history.json").write_text(json.dumps(result.history, indent=1), encoding="utf-8")
    first, last = result.history[0]["vertex_l1"], result.history[-1]["vertex_l1"]
    return {"out": str(out), "epochs": len(result.history), "initial_vertex_l1": first, "final_vertex_l1": last,
            "ratio": last / first}


def cmd_infer(args) -> dict:
    from .mesh import save_mesh
    from .network import MeshRegressor

    model = MeshRegressor.load(args.ckpt)
    image = _load_image(args.image, model.train_cfg.crop).astype(np.float64) / 255.0
    mesh = model.predict(image[None])[0]
    out = _out_file(args)
    save_mesh(model.hierarchy.finest.with_vertices(mesh), out)
    return {"out": str(out), "n_vertices": int(mesh.shape[0])}


def cmd_evaluate(args) -> dict:
    from .metrics import evaluate_pair, mean_error, pck_range, rigid_align

    if args.csv and Path(args.out).suffix == ".json":
        raise CommandError("--csv needs a directory --out to hold report.json and pck.csv")
    pred_dir, gt_dir = Path(args.pred), Path(args.gt)
    stems = sorted(p.stem for p in pred_dir.iterdir() if p.suffix in (".obj", ".npy"))
    pairs = []
    for stem in stems:
        gt = next((gt_dir / f"{stem}{ext}" for ext in (".obj", ".npy") if (gt_dir / f"{stem}{ext}").exists()), None)
        if gt is None:
            raise CommandError(f"no ground truth for {stem}")
        pred = next(pred_dir / f"{stem}{ext}" for ext in (".obj", ".npy") if (pred_dir / f"{stem}{ext}").exists())
        pairs.append((stem, _mesh_vertices(pred), _mesh_vertices(gt)))
    if not pairs:
        raise CommandError(f"no predictions in {pred_dir}")

    assets = None
    if args.assets:
        from .hand_model import HandModelAssets

        assets = HandModelAssets.load(args.assets)

    per_sample = []
    all_pred, all_gt, all_pose_pred, all_pose_gt = [], [], [], []
    for stem, p, g in pairs:
        row = {"id": stem, "mesh": evaluate_pair(p, g, args.fscore)}
        all_pred.append(rigid_align(p, g)[0])
        all_gt.append(g)
        if assets is not None:
            from .network import predict_pose

            kp, kg = predict_pose(p, assets), predict_pose(g, assets)
            ka = rigid_align(kp, kg)[0]
            row["pose"] = {"error": mean_error(kp, kg), "aligned_error": mean_error(ka, kg)}
            all_pose_pred.append(ka)
            all_pose_gt.append(kg)
        per_sample.append(row)

    def mean_of(section, key):
        return float(np.mean([r[section][key] for r in per_sample]))

    summary = {"mesh": {k: mean_of("mesh", k) for k in per_sample[0]["mesh"]}}
    curves = {"mesh_3d": pck_range(np.concatenate(all_pred), np.concatenate(all_gt), 3)}
    if assets is not None:
        summary["pose"] = {k: mean_of("pose", k) for k in per_sample[0]["pose"]}
        curves["pose_3d"] = pck_range(np.concatenate(all_pose_pred), np.concatenate(all_pose_gt), 3)
    report = {"n": len(pairs), "summary": summary, "pck": {k: c.to_json() for k, c in curves.items()},
              "per_sample": per_sample}
    if Path(args.out).suffix == ".json":
        out, csv_path = _out_file(args), None
    else:
        out_dir = _out_dir(args)
        out, csv_path = out_dir / "report.json", out_dir / "pck.csv"
    out.write_text(json.dumps(report, indent=1), encoding="utf-8")
    if args.csv:
        with open(csv_path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh)
            w.writerow(["curve", "threshold", "pck"])
            for name, c in curves.items():
                for t, v in zip(c.thresholds, c.values):
                    w.writerow([name, f"{t:.6g}", f"{v:.6g}"])
    return {"out": str(out), "n": len(pairs), "summary": summary,
            "auc": {k: c.auc for k, c in curves.items()}}


def cmd_render_overlay(args) -> dict:
    from .dataset import read_keypoint_file
    from .mesh import load_mesh
    from .render import draw_overlay

    image = _load_image(args.image)
    keypoints = read_keypoint_file(args.keypoints)[0].keypoints.points if args.keypoints else None
    vertices = faces = None
    if args.mesh:
        m = load_mesh(args.mesh)
        vertices, faces = m.vertices, m.faces
    if keypoints is None and vertices is None:
        raise CommandError("give --keypoints, --mesh or both")
    out = _out_file(args)
    draw_overlay(image, keypoints, vertices, faces).save(out)
    return {"out": str(out), "size": list(image.shape[:2])}


# -- parser ------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=int(_env("SEED", 0)), help="random seed (env HANDMESH_SEED)")
    common.add_argument("--workers", type=int, default=int(_env("WORKERS", os.cpu_count() or 1)),
                        help="worker pool size (env HANDMESH_WORKERS); default: logical cores")
    common.add_argument("--log-level", default=_env("LOG_LEVEL", "WARNING"),
                        choices=["DEBUG", "INFO", "WARNING", "ERROR"], help="env HANDMESH_LOG_LEVEL")
    common.add_argument("--out", required=True, help="output path; nothing is written elsewhere")

    parser = argparse.ArgumentParser(prog="handmesh", description="Hand mesh recovery toolkit.")
    sub = parser.add_subparsers(dest="command", required=True)

    def add(name, fn, help_):
        p = sub.add_parser(name, parents=[common], help=help_, description=help_)
        p.set_defaults(func=fn)
        return p

    p = add("synth-model", cmd_synth_model, "generate procedural hand model assets")
    p.add_argument("--vertices", type=int, default=778)

    p = add("decimate", cmd_decimate, "build the mesh sampling hierarchy")
    src = p.add_mutually_exclusive_group(required=True)
    src.add_argument("--assets", help="asset directory (uses its template)")
    src.add_argument("--mesh", help="OBJ mesh")
    p.add_argument("--levels", type=int, default=5)
    p.add_argument("--sizes", help="comma-separated vertex counts, finest first")

    p = add("spirals", cmd_spirals, "precompute spiral tables for every hierarchy level")
    p.add_argument("--hierarchy", required=True)
    p.add_argument("--k", type=int, default=2, help="number of rings")
    p.add_argument("--length", type=int, help="spiral length; default from mean valence")

    p = add("fit", cmd_fit, "fit the hand model to 2D keypoint records")
    p.add_argument("--assets", required=True)
    p.add_argument("--keypoints", required=True, help="keypoint JSON file or directory")
    p.add_argument("--config", help="fit config JSON")

    p = add("filter-dataset", cmd_filter_dataset, "fit, filter and cap keypoint records into a dataset")
    p.add_argument("--keypoints", required=True, help="directory of keypoint JSON files")
    p.add_argument("--assets", required=True)
    p.add_argument("--config", help="pipeline config JSON")

    p = add("synth-data", cmd_synth_data, "synthesize keypoint records or image/mesh training pairs")
    p.add_argument("--assets", required=True)
    p.add_argument("--kind", choices=["keypoints", "images"], default="keypoints")
    p.add_argument("--n", type=int, default=16)
    p.add_argument("--noise", type=float, default=0.0, help="keypoint noise in pixels")
    p.add_argument("--source", default="synthetic")
    p.add_argument("--crop", type=int, default=192)

    p = add("train", cmd_train, "train the image-to-mesh network")
    p.add_argument("--data", required=True, help="directory with index.json, images and meshes")
    p.add_argument("--hierarchy", required=True)
    p.add_argument("--config", help='JSON with optional "train" and "decoder" sections')

    p = add("infer", cmd_infer, "predict a mesh for one image crop")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--image", required=True)

    p = add("evaluate", cmd_evaluate, "mesh and pose errors, PCK curves and F-scores; --out is report.json or a directory")
    p.add_argument("--pred", required=True)
    p.add_argument("--gt", required=True)
    p.add_argument("--assets", help="regress keypoints with these assets for pose metrics")
    p.add_argument("--fscore", type=float, nargs="+", default=[5.0, 15.0])
    p.add_argument("--csv", action="store_true", help="also write PCK curves to pck.csv (needs a directory --out)")

    p = add("render-overlay", cmd_render_overlay, "draw keypoints and a mesh wireframe over an image")
    p.add_argument("--image", required=True)
    p.add_argument("--keypoints", help="keypoint record JSON")
    p.add_argument("--mesh", help="OBJ mesh in image coordinates")
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=args.log_level, format="%(levelname)s %(name)s: %(message)s")
    if args.workers < 1:
        parser.error("--workers must be at least 1")
    try:
        result = args.func(args)
    except Exception as e:  # reported as structured JSON
        logger.debug("command failed", exc_info=True)
        print(json.dumps({"command": args.command, "ok": False, "error": type(e).__name__, "message": str(e)}),
              file=sys.stderr)
        return 1
    print(json.dumps({"command": args.command, "ok": True, **result}, sort_keys=True))
    return 0


if __name__ == "__main__":
    sys.exit(main())
