"""Turning detector keypoint files into a filtered, mesh-annotated dataset.

Each keypoint record is fitted with the hand model, judged by confidence and
reprojection thresholds, capped per source video and written out as an OBJ
mesh plus a params JSON. Fits are cached on disk, so an interrupted run picks
up where it stopped and produces the same manifest.
"""

from __future__ import annotations

import json
import logging
import os
import re
import zlib
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Iterable

import numpy as np

from .fitting import Camera, FitConfig, FitResult, Keypoints2D, fit_batch
from .hand_model import N_KEYPOINTS, HandModelAssets, HandParams, params_keypoints, sample_params
from .mesh import save_mesh

logger = logging.getLogger(__name__)

MANIFEST_VERSION = 1
SPLITS = ("train", "val", "test")


class DatasetError(ValueError):
    pass


# -- keypoint records ----------------------------------------------------------


@dataclass(frozen=True)
class KeypointRecord:
    image_id: str
    source: str
    keypoints: Keypoints2D
    crop_box: tuple[float, float, float, float]  # x, y, width, height in image pixels
    camera: Camera | None = None

    def to_json(self) -> dict:
        d = {
            "image_id": self.image_id,
            "source": self.source,
            "crop_box": list(self.crop_box),
            "keypoints": np.column_stack([self.keypoints.points, self.keypoints.confidence]).tolist(),
        }
        if self.camera is not None:
            d["camera"] = self.camera.to_json()
        return d

    @classmethod
    def from_json(cls, d: dict) -> "KeypointRecord":
        try:
            kp = np.asarray(d["keypoints"], dtype=np.float64)
            if kp.shape != (N_KEYPOINTS, 3):
                raise DatasetError(f"record {d.get('image_id')!r}: expected 21 x (x, y, confidence), got {kp.shape}")
            box = tuple(float(x) for x in d["crop_box"])
            if len(box) != 4 or box[2] <= 0 or box[3] <= 0:
                raise DatasetError(f"record {d.get('image_id')!r}: crop_box must be x, y, width, height")
            cam = Camera.from_json(d["camera"]) if d.get("camera") else None
            return cls(str(d["image_id"]), str(d.get("source", "default")), Keypoints2D(kp[:, :2], kp[:, 2]), box, cam)
        except KeyError as e:
            raise DatasetError(f"record is missing field {e}") from None


def from_openpose(data, image_id: str, source: str, crop_box, hand: str = "right",
                  person: int = 0) -> KeypointRecord:
    """Convert OpenPose output to a record.

    ``data`` is either a parsed OpenPose JSON frame (``{"people": [...]}``) or
    the flat ``[x0, y0, c0, x1, ...]`` array of one hand.
    """
    if isinstance(data, dict):
        people = data.get("people", [])
        if person >= len(people):
            raise DatasetError(f"{image_id}: frame has {len(people)} people, wanted index {person}")
        flat = people[person].get(f"hand_{hand}_keypoints_2d")
        if flat is None:
            raise DatasetError(f"{image_id}: no hand_{hand}_keypoints_2d entry")
    else:
        flat = data
    arr = np.asarray(flat, dtype=np.float64)
    if arr.size != 3 * N_KEYPOINTS:
        raise DatasetError(f"{image_id}: expected {3 * N_KEYPOINTS} numbers, got {arr.size}")
    arr = arr.reshape(N_KEYPOINTS, 3)
    return KeypointRecord(image_id, source, Keypoints2D(arr[:, :2], np.clip(arr[:, 2], 0.0, 1.0)),
                          tuple(float(x) for x in crop_box))


def read_keypoint_file(path: str | os.PathLike) -> list[KeypointRecord]:
    """One record per file, or ``{"records": [...]}`` holding several."""
    d = json.loads(Path(path).read_text(encoding="utf-8"))
    items = d["records"] if isinstance(d, dict) and "records" in d else [d]
    return [KeypointRecord.from_json(r) for r in items]


def write_keypoint_file(path: str | os.PathLike, records: Iterable[KeypointRecord]) -> None:
    records = list(records)
    body = records[0].to_json() if len(records) == 1 else {"records": [r.to_json() for r in records]}
    _write_atomic(Path(path), json.dumps(body, indent=1))


def synthetic_records(assets: HandModelAssets, n: int, source: str = "synthetic", seed: int = 0,
                      noise_px: float = 0.0, crop: int = 192, focal: float = 1000.0,
                      depth: float = 1200.0) -> list[tuple[KeypointRecord, HandParams]]:
    """Prior poses projected into a ``crop``-sized image, with optional pixel noise.

    Returns each record together with its ground-truth parameters.
    """
    from .fitting import project

    rng = np.random.default_rng([seed, zlib.crc32(source.encode())])
    cam = Camera(focal, (crop / 2.0, crop / 2.0))
    out = []
    for i in range(n):
        params = sample_params(assets, rng, depth)
        uv = project(params_keypoints(assets, params), cam.focal, cam.principal_point).numpy()
        if noise_px > 0:
            uv = uv + rng.normal(scale=noise_px, size=uv.shape)
        kp = Keypoints2D.full_confidence(uv)
        out.append((KeypointRecord(f"{source}_{i:05d}", source, kp, (0.0, 0.0, float(crop), float(crop)), cam),
                    params))
    return out


# -- filtering -------------------------------------------------------------------


@dataclass
class FilterConfig:
    # None of these thresholds come from a published value; the manifest
    # records them under "default_thresholds" when left unchanged.
    min_total_confidence: float = 12.6
    min_joint_confidence: float = 0.1
    max_normalized_mse: float = 5.75  # squared mm; median of 2 px-noise synthetic fits
    max_samples_per_source: int = 500

    def __post_init__(self):
        if min(self.min_total_confidence, self.min_joint_confidence, self.max_normalized_mse) < 0:
            raise ValueError("thresholds must be nonnegative")
        if self.max_samples_per_source < 0:
            raise ValueError("max_samples_per_source must be nonnegative")

    def defaulted(self) -> list[str]:
        base = FilterConfig()
        return [k for k in ("min_total_confidence", "min_joint_confidence", "max_normalized_mse")
                if getattr(self, k) == getattr(base, k)]


@dataclass(frozen=True)
class FilterDecision:
    accepted: bool
    reason: str  # "ok", "total_confidence", "joint_confidence" or "mse"
    total_confidence: float
    min_confidence: float
    normalized_mse: float


def normalized_mse(fit_result: FitResult, kp: Keypoints2D, cam: Camera) -> float:
    """Mean squared pixel residual divided by ``(focal / depth)^2``.

    ``depth`` is the mean camera-space depth of the fitted keypoints, which
    turns pixel units into model units at the hand's distance.
    """
    sq = float(np.mean(np.sum((fit_result.projected - kp.points) ** 2, axis=1)))
    depth = float(np.mean(fit_result.keypoints3d[:, 2]))
    if not depth > 0:
        return float("inf")
    return sq / (cam.focal / depth) ** 2


def filter_sample(fit_result: FitResult, kp: Keypoints2D, cam: Camera, cfg: FilterConfig) -> FilterDecision:
    total = float(kp.confidence.sum())
    lowest = float(kp.confidence.min())
    mse = normalized_mse(fit_result, kp, cam)
    if total < cfg.min_total_confidence:
        reason = "total_confidence"
    elif lowest < cfg.min_joint_confidence:
        reason = "joint_confidence"
    elif not mse <= cfg.max_normalized_mse:
        reason = "mse"
    else:
        reason = "ok"
    return FilterDecision(reason == "ok", reason, total, lowest, mse)


# -- pipeline --------------------------------------------------------------------


@dataclass
class PipelineConfig:
    filter: FilterConfig = field(default_factory=FilterConfig)
    fit: FitConfig = field(default_factory=FitConfig)
    seed: int = 0
    workers: int = 1
    fit_batch_size: int = 32
    default_focal: float = 1000.0  # for records without a camera; principal point at the crop centre
    split_fractions: tuple[float, float, float] = (0.8, 0.1, 0.1)

    def __post_init__(self):
        if self.workers < 1 or self.fit_batch_size < 1:
            raise ValueError("workers and fit_batch_size must be at least 1")
        fr = tuple(float(x) for x in self.split_fractions)
        if len(fr) != 3 or min(fr) < 0 or abs(sum(fr) - 1.0) > 1e-9:
            raise ValueError("split_fractions must be three nonnegative numbers summing to 1")
        self.split_fractions = fr

    def to_json(self) -> dict:
        return {
            "filter": asdict(self.filter),
            "fit": self.fit.to_json(),
            "seed": self.seed,
            "workers": self.workers,
            "fit_batch_size": self.fit_batch_size,
            "default_focal": self.default_focal,
            "split_fractions": list(self.split_fractions),
        }

    @classmethod
    def from_json(cls, d: dict) -> "PipelineConfig":
        d = dict(d)
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ValueError(f"unknown pipeline config keys: {sorted(unknown)}")
        filt = FilterConfig(**d.pop("filter", {}))
        fit_cfg = FitConfig.from_json(d.pop("fit", {}))
        return cls(filter=filt, fit=fit_cfg, **d)


@dataclass
class DatasetManifest:
    accepted: list[dict]
    rejected: list[dict]
    errors: list[dict]
    config: dict
    default_thresholds: list[str]

    @property
    def counts(self) -> dict:
        reasons: dict[str, int] = {}
        for r in self.rejected:
            reasons[r["reason"]] = reasons.get(r["reason"], 0) + 1
        return {"accepted": len(self.accepted), "rejected": len(self.rejected), "errors": len(self.errors),
                "rejected_by_reason": dict(sorted(reasons.items()))}

    def to_json(self) -> dict:
        return {
            "version": MANIFEST_VERSION,
            "config": self.config,
            "default_thresholds": self.default_thresholds,
            "counts": self.counts,
            "accepted": self.accepted,
            "rejected": self.rejected,
            "errors": self.errors,
        }

    @classmethod
    def from_json(cls, d: dict) -> "DatasetManifest":
        if d.get("version") != MANIFEST_VERSION:
            raise DatasetError(f"unsupported manifest version {d.get('version')}")
        return cls(d["accepted"], d["rejected"], d["errors"], d["config"], d["default_thresholds"])

    def save(self, path: str | os.PathLike) -> None:
        _write_atomic(Path(path), json.dumps(self.to_json(), indent=1, sort_keys=True))

    @classmethod
    def load(cls, path: str | os.PathLike) -> "DatasetManifest":
        return cls.from_json(json.loads(Path(path).read_text(encoding="utf-8")))


def _write_atomic(path: Path, text: str) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(text, encoding="utf-8")
    os.replace(tmp, path)


_UNSAFE = re.compile(r"[^A-Za-z0-9._-]")


def file_stem(image_id: str) -> str:
    """Filesystem-safe and collision-free name for an image id."""
    safe = _UNSAFE.sub("_", image_id)
    return safe if safe == image_id else f"{safe}-{zlib.crc32(image_id.encode()):08x}"


def record_camera(rec: KeypointRecord, cfg: PipelineConfig) -> Camera:
    if rec.camera is not None:
        return rec.camera
    x, y, w, h = rec.crop_box
    return Camera(cfg.default_focal, (x + w / 2.0, y + h / 2.0))


def _fit_to_cache(r: FitResult) -> dict:
    d = r.to_json()
    d["vertices"] = r.vertices.tolist()
    return d


def _fit_from_cache(d: dict) -> FitResult:
    return FitResult(
        params=HandParams.from_json(d["params"]),
        camera=Camera.from_json(d["camera"]),
        vertices=np.asarray(d["vertices"]),
        keypoints3d=np.asarray(d["keypoints3d"]),
        projected=np.asarray(d["projected"]),
        terms=d["terms"],
        residuals=np.asarray(d["residuals"]),
        iterations=d["iterations"],
        best_iteration=d["best_iteration"],
        history=[],
    )


def _split_of(source: str, seed: int, fractions: tuple[float, float, float]) -> str:
    # Whole sources go to one split so frames of a video never straddle splits.
    u = np.random.default_rng([seed, zlib.crc32(source.encode()), 1]).random()
    edges = np.cumsum(fractions)
    return SPLITS[int(np.searchsorted(edges, u, side="right").clip(0, 2))]


ProgressHook = Callable[[list[str]], None]


def run_pipeline(keypoint_files: Iterable[str | os.PathLike], assets: HandModelAssets, cfg: PipelineConfig,
                 out_dir: str | os.PathLike, progress: ProgressHook | None = None) -> DatasetManifest:
    """Fit, filter and cap every record; write meshes, params and ``manifest.json`` under ``out_dir``.

    Fits are cached in ``out_dir/fits``; rerunning skips records that already
    have a cached fit. ``progress`` is called with the image ids of every
    freshly cached fit chunk.
    """
    out = Path(out_dir)
    fits_dir = out / "fits"
    fits_dir.mkdir(parents=True, exist_ok=True)

    records: dict[str, KeypointRecord] = {}
    errors = []
    for path in sorted(Path(p) for p in keypoint_files):
        try:
            recs = read_keypoint_file(path)
        except (OSError, ValueError, TypeError) as e:
            errors.append({"file": path.name, "error": f"{type(e).__name__}: {e}"})
            logger.warning("skipping %s: %s", path, e)
            continue
        for r in recs:
            if r.image_id in records:
                errors.append({"file": path.name, "error": f"duplicate image id {r.image_id!r}"})
                continue
            records[r.image_id] = r
    ids = sorted(records)

    rejected = []
    fitted: dict[str, FitResult] = {}
    todo = []
    for i in ids:
        cache = fits_dir / f"{file_stem(i)}.json"
        if cache.exists():
            fitted[i] = _fit_from_cache(json.loads(cache.read_text(encoding="utf-8")))
        else:
            todo.append(i)

    # Samples with too few usable keypoints cannot be fitted; they are rejected up front.
    fittable = []
    for i in todo:
        n_ok = int((records[i].keypoints.confidence >= cfg.fit.confidence_floor).sum())
        if n_ok < cfg.fit.min_keypoints:
            rejected.append({"image_id": i, "source": records[i].source, "reason": "fit_error",
                             "detail": f"only {n_ok} keypoints above the confidence floor"})
        else:
            fittable.append(i)
    unfittable = {r["image_id"] for r in rejected}

    chunks = [fittable[k:k + cfg.fit_batch_size] for k in range(0, len(fittable), cfg.fit_batch_size)]

    def run_chunk(chunk: list[str]) -> list[str]:
        recs = [records[i] for i in chunk]
        results = fit_batch(assets, [r.keypoints for r in recs], [record_camera(r, cfg) for r in recs], cfg.fit)
        for i, res in zip(chunk, results):
            _write_atomic(fits_dir / f"{file_stem(i)}.json", json.dumps(_fit_to_cache(res)))
            fitted[i] = res
        return chunk

    if cfg.workers == 1:
        for chunk in chunks:
            run_chunk(chunk)
            if progress is not None:
                progress(chunk)
    else:
        with ThreadPoolExecutor(max_workers=cfg.workers) as pool:
            for chunk in pool.map(run_chunk, chunks):
                if progress is not None:
                    progress(chunk)

    passing: dict[str, list[str]] = {}
    decisions: dict[str, FilterDecision] = {}
    for i in ids:
        if i in unfittable:
            continue
        rec = records[i]
        dec = filter_sample(fitted[i], rec.keypoints, record_camera(rec, cfg), cfg.filter)
        decisions[i] = dec
        if dec.accepted:
            passing.setdefault(rec.source, []).append(i)
        else:
            rejected.append({"image_id": i, "source": rec.source, "reason": dec.reason,
                             "normalized_mse": dec.normalized_mse, "total_confidence": dec.total_confidence,
                             "min_confidence": dec.min_confidence})

    cap = cfg.filter.max_samples_per_source
    accepted_ids = []
    for source in sorted(passing):
        members = passing[source]
        if len(members) > cap:
            rng = np.random.default_rng([cfg.seed, zlib.crc32(source.encode())])
            keep = set(rng.choice(len(members), size=cap, replace=False).tolist())
            for k, i in enumerate(members):
                if k not in keep:
                    rejected.append({"image_id": i, "source": source, "reason": "source_cap"})
            members = [i for k, i in enumerate(members) if k in keep]
        accepted_ids.extend(members)

    accepted = []
    for i in sorted(accepted_ids):
        rec, res, dec = records[i], fitted[i], decisions[i]
        stem = file_stem(i)
        mesh_path = Path("meshes") / f"{stem}.obj"
        params_path = Path("params") / f"{stem}.json"
        if not (out / mesh_path).exists():
            (out / "meshes").mkdir(exist_ok=True)
            save_mesh(assets.template.with_vertices(res.vertices), out / mesh_path)
        if not (out / params_path).exists():
            _write_atomic(out / params_path, json.dumps({"params": res.params.to_json(),
                                                         "camera": res.camera.to_json()}, indent=1))
        accepted.append({
            "image_id": i,
            "source": rec.source,
            "split": _split_of(rec.source, cfg.seed, cfg.split_fractions),
            "mesh": mesh_path.as_posix(),
            "params": params_path.as_posix(),
            "camera": res.camera.to_json(),
            "crop_box": list(rec.crop_box),
            "fit": {"terms": res.terms, "best_iteration": res.best_iteration,
                    "mean_residual_px": float(res.residuals.mean()), "normalized_mse": dec.normalized_mse},
        })

    rejected.sort(key=lambda r: r["image_id"])
    manifest = DatasetManifest(accepted, rejected, errors, cfg.to_json(), cfg.filter.defaulted())
    manifest.save(out / "manifest.json")
    logger.info("dataset: %s", manifest.counts)
    return manifest
