"""End-to-end run: import, partition, train, merge, render, fuse, eval.

Each stage records a key (hash of its config slice and upstream keys) and the
hashes of its artifacts in ``manifest.json``; a rerun reuses a stage only when
its key matches and every artifact is still present and unchanged.
"""

from __future__ import annotations

import hashlib
import json
import logging
import time
from dataclasses import dataclass, field, fields, replace
from pathlib import Path

import numpy as np
import tomli
import torch

from .evaluation import DEFAULT_THRESHOLDS, cloud_metrics, depth_metrics, image_metrics, write_report
from .gaussian_model import GaussianScene
from .partitioner import PartitionConfig, PartitionError, partition_scene, read_blocks, write_blocks
from .renderer import render_view
from .scene_io import (load_scene, load_sfm_scene, read_depth_map, read_image, read_ply, save_scene, write_depth_map,
                       write_image, write_mesh)
from .surface import TriangleMesh, default_voxel_size, extract_mesh, fuse_depth_maps
from .synthetic import read_gt_points, read_held_out
from .trainer import BlockCheckpoint, ConfigError, TrainConfig, merge_blocks, train_blocks

log = logging.getLogger(__name__)

STAGES = ("import", "partition", "train", "merge", "render", "fuse", "eval")
MANIFEST_VERSION = 1


class StageError(RuntimeError):
    def __init__(self, stage: str, message: str, manifest: dict):
        super().__init__(f"stage {stage!r} failed: {message}")
        self.stage = stage
        self.manifest = manifest


# ---------------------------------------------------------------------------
# flat config documents


def flatten(doc: dict, prefix: str = "") -> dict:
    """Nested tables from a TOML parse back to dotted keys."""
    out = {}
    for k, v in doc.items():
        key = f"{prefix}{k}"
        if isinstance(v, dict):
            out.update(flatten(v, key + "."))
        else:
            out[key] = v
    return out


def _toml_value(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, (int, float)):
        return repr(v)
    if isinstance(v, str):
        return json.dumps(v)
    if isinstance(v, (list, tuple)):
        return "[" + ", ".join(_toml_value(x) for x in v) + "]"
    raise TypeError(f"cannot write {type(v).__name__} to a flat document")


def dump_flat(doc: dict) -> str:
    """Write dotted keys as ``key = value`` lines (valid TOML)."""
    return "".join(f"{k} = {_toml_value(v)}\n" for k, v in doc.items() if v is not None)


def read_flat(path) -> dict:
    try:
        with open(path, "rb") as f:
            return flatten(tomli.load(f))
    except tomli.TOMLDecodeError as e:
        raise ConfigError(f"{path}: {e}") from e


_PARTITION_KEYS = {f.name for f in fields(PartitionConfig)}


@dataclass
class PipelineConfig:
    data_dir: str
    output_dir: str
    seed: int = 0
    jobs: int = 1
    alignment: str = "none"
    partition: PartitionConfig = field(default_factory=PartitionConfig)
    select_views: bool = True
    train: TrainConfig = field(default_factory=TrainConfig)
    tsdf_voxel_size: float = 0.0  # 0 -> scene extent / 512
    tsdf_truncation: float = 0.0  # 0 -> 4 voxels
    eval_thresholds: tuple = DEFAULT_THRESHOLDS
    figures: bool = True

    def __post_init__(self):
        if self.jobs < 1:
            raise ConfigError("jobs must be >= 1")
        if self.tsdf_voxel_size < 0 or self.tsdf_truncation < 0:
            raise ConfigError("tsdf sizes must be >= 0")
        if self.tsdf_voxel_size > 0 and 0 < self.tsdf_truncation < 2 * self.tsdf_voxel_size:
            raise ConfigError("tsdf.truncation must be at least twice tsdf.voxel_size")
        if not self.eval_thresholds or any(t <= 0 for t in self.eval_thresholds):
            raise ConfigError("eval.thresholds must be positive")
        self.eval_thresholds = tuple(float(t) for t in self.eval_thresholds)

    def to_flat(self) -> dict:
        d = {"data_dir": self.data_dir, "output_dir": self.output_dir, "seed": self.seed, "jobs": self.jobs,
             "alignment": self.alignment, "figures": self.figures}
        for f in fields(PartitionConfig):
            d[f"partition.{f.name}"] = getattr(self.partition, f.name)
        d["partition.select_views"] = self.select_views
        for k, v in self.train.to_flat().items():
            if k != "seed":
                d[f"train.{k}"] = v
        d["tsdf.voxel_size"] = self.tsdf_voxel_size
        d["tsdf.truncation"] = self.tsdf_truncation
        d["eval.thresholds"] = list(self.eval_thresholds)
        return d

    @classmethod
    def from_flat(cls, doc: dict, base_dir=None) -> "PipelineConfig":
        doc = dict(doc)
        kw, part, train = {}, {}, {}
        for key, val in doc.items():
            if key in ("data_dir", "output_dir", "alignment"):
                kw[key] = str(val)
            elif key in ("seed", "jobs"):
                kw[key] = _int(key, val)
            elif key == "figures":
                kw[key] = _bool(key, val)
            elif key == "partition.select_views":
                kw["select_views"] = _bool(key, val)
            elif key.startswith("partition."):
                name = key.split(".", 1)[1]
                if name not in _PARTITION_KEYS:
                    raise ConfigError(f"unknown key {key!r}")
                part[name] = val
            elif key.startswith(("train.", "loss.")):
                train[key] = val
            elif key == "tsdf.voxel_size":
                kw["tsdf_voxel_size"] = float(val)
            elif key == "tsdf.truncation":
                kw["tsdf_truncation"] = float(val)
            elif key == "eval.thresholds":
                if isinstance(val, str):
                    val = [float(x) for x in val.split(",")]
                kw["eval_thresholds"] = tuple(float(x) for x in val)
            else:
                raise ConfigError(f"unknown key {key!r}")
        for k in ("data_dir", "output_dir"):
            if k not in kw:
                raise ConfigError(f"missing required key {k!r}")
            if base_dir is not None and not Path(kw[k]).is_absolute():
                kw[k] = str(Path(base_dir) / kw[k])
        if "grid" in part:
            raise ConfigError("use partition.m_blocks and partition.n_blocks")
        try:
            kw["partition"] = PartitionConfig(**part)
        except (PartitionError, TypeError) as e:
            raise ConfigError(str(e)) from e
        kw["train"] = TrainConfig.from_flat(train)
        cfg = cls(**kw)
        cfg.train = replace(cfg.train, seed=cfg.seed)
        return cfg

    @classmethod
    def load(cls, path) -> "PipelineConfig":
        return cls.from_flat(read_flat(path), base_dir=Path(path).parent)


def _int(key, val) -> int:
    if isinstance(val, bool) or not float(val) == int(val):
        raise ConfigError(f"{key} must be an integer")
    return int(val)


def _bool(key, val) -> bool:
    if not isinstance(val, bool):
        raise ConfigError(f"{key} must be true or false")
    return val


# ---------------------------------------------------------------------------
# manifest helpers


def file_sha256(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _key(*parts) -> str:
    return hashlib.sha256(json.dumps(parts, sort_keys=True, default=str).encode()).hexdigest()[:16]


def _artifacts_intact(out: Path, record: dict) -> bool:
    arts = record.get("artifacts", {})
    for rel, digest in arts.items():
        p = out / rel
        if not p.exists() or file_sha256(p) != digest:
            return False
    return True


def _collect(out: Path, paths) -> dict:
    return {str(Path(p).relative_to(out)): file_sha256(p) for p in sorted(paths)}


def scene_extent(scene) -> float:
    """Largest ground-plane span of cameras and sparse points."""
    pts = np.asarray(scene.camera_centers)
    if len(scene.points):
        pts = np.vstack([pts, scene.point_positions])
    span = pts.max(0) - pts.min(0)
    return float(max(span[0], span[1], 1e-6))


def fusion_bounds(scene, margin: float = 0.05):
    pts = np.asarray(scene.point_positions) if len(scene.points) else np.asarray(scene.camera_centers)
    lo, hi = np.percentile(pts, 0.5, axis=0), np.percentile(pts, 99.5, axis=0)
    pad = margin * float(np.max(hi - lo)) + 1e-6
    return lo - pad, hi + pad


def load_gaussians(path) -> GaussianScene:
    """Merged scene blob or block checkpoint."""
    data = Path(path).read_bytes()
    try:
        return BlockCheckpoint.from_bytes(data).scene
    except (KeyError, ValueError):
        return GaussianScene.from_bytes(data)


# ---------------------------------------------------------------------------
# stages


class _Run:
    def __init__(self, cfg: PipelineConfig):
        self.cfg = cfg
        self.out = Path(cfg.output_dir)
        self.data = Path(cfg.data_dir)
        self._scene = None
        self._blocks = None

    @property
    def scene(self):
        if self._scene is None:
            self._scene = load_scene(self.out / "scene.bin")
        return self._scene

    @property
    def blocks(self):
        if self._blocks is None:
            self._blocks = read_blocks(self.out / "blocks")
        return self._blocks

    def stage_import(self):
        sparse = self.data / "sparse"
        if not sparse.is_dir():
            raise FileNotFoundError(f"{sparse} is not a directory")
        align = None if self.cfg.alignment == "none" else self.cfg.alignment
        scene = load_sfm_scene(sparse, alignment=align, images_dir=(self.data / "images").resolve())
        p = self.out / "scene.bin"
        save_scene(scene, p)
        self._scene = None
        return [p], {"views": len(scene.views), "points": len(scene.points)}

    def stage_partition(self):
        blocks = partition_scene(self.scene, self.cfg.partition, select=self.cfg.select_views)
        d = self.out / "blocks"
        for old in d.glob("block_*.txt"):
            old.unlink()
        paths = write_blocks(blocks, d)
        self._blocks = None
        if self.cfg.figures:
            from .plotting import plot_partition

            plot_partition(blocks, self.scene.camera_centers, self.out / "figures" / "partition.png",
                           self.cfg.partition.up_axis)
        info = {"blocks": [{"id": b.id, "views": len(b.view_ids), "points": len(b.point_ids)} for b in blocks]}
        return paths, info

    def stage_train(self):
        d = self.out / "ckpts"
        d.mkdir(parents=True, exist_ok=True)
        for old in d.glob("block_*.ckpt"):
            old.unlink()
        cks = train_blocks(self.blocks, self.scene, self.cfg.train, jobs=self.cfg.jobs)
        paths = []
        for ck in cks:
            p = d / f"block_{ck.block_id:03d}.ckpt"
            ck.save(p)
            paths.append(p)
        (self.out / "ckpts" / "loss.json").write_text(
            json.dumps({str(ck.block_id): ck.loss_history for ck in cks}) + "\n")
        if self.cfg.figures:
            from .plotting import plot_loss_curves

            plot_loss_curves({ck.block_id: ck.loss_history for ck in cks}, self.out / "figures" / "loss.png")
        return paths, {"gaussians": {str(ck.block_id): len(ck.scene) for ck in cks}}

    def stage_merge(self):
        cks = [BlockCheckpoint.load(p) for p in sorted((self.out / "ckpts").glob("block_*.ckpt"))]
        merged = merge_blocks(cks, self.blocks)
        p = self.out / "merged.bin"
        p.write_bytes(merged.to_bytes())
        return [p], {"gaussians": len(merged)}

    def stage_render(self):
        gs = load_gaussians(self.out / "merged.bin")
        ext = scene_extent(self.scene)
        d = self.out / "render"
        paths = []
        with torch.no_grad():
            for v in self.scene.views:
                b = render_view(gs, v, ext)
                p = d / "depth" / f"{v.id:04d}.dmap"
                p.parent.mkdir(parents=True, exist_ok=True)
                write_depth_map(b.depth.double().numpy(), p)
                paths.append(p)
            held = read_held_out(self.data)
            if held is not None:
                for v in held.views:
                    b = render_view(gs, v, ext).numpy()
                    base = d / "heldout"
                    base.mkdir(parents=True, exist_ok=True)
                    write_depth_map(b["depth"], base / f"{v.id:04d}.dmap")
                    write_image(np.clip(b["color"], 0, 1), base / f"{v.id:04d}.png")
                    paths += [base / f"{v.id:04d}.dmap", base / f"{v.id:04d}.png"]
        return paths, {"views": len(self.scene.views)}

    def stage_fuse(self):
        scene = self.scene
        voxel = self.cfg.tsdf_voxel_size or default_voxel_size(scene_extent(scene))
        trunc = self.cfg.tsdf_truncation or 4.0 * voxel
        lo, hi = fusion_bounds(scene)
        depths = [read_depth_map(self.out / "render" / "depth" / f"{v.id:04d}.dmap") for v in scene.views]
        vol = fuse_depth_maps(depths, scene.views, lo, hi, voxel, trunc)
        mesh = extract_mesh(vol)
        if len(mesh) == 0:
            raise RuntimeError("fusion produced an empty mesh")
        p = self.out / "mesh.ply"
        write_mesh(mesh.vertices, mesh.faces, p, normals=mesh.normals)
        return [p], {"voxel_size": voxel, "truncation": trunc, "faces": len(mesh)}

    def stage_eval(self):
        held = read_held_out(self.data)
        gt_pts = read_gt_points(self.data)
        if (held is None or not held.depths) and gt_pts is None:
            return None, {"reason": "no ground truth in data_dir"}
        thr = self.cfg.eval_thresholds
        rep = self.out / "reports"
        rep.mkdir(parents=True, exist_ok=True)
        paths, metrics = [], {}
        if held is not None and held.depths:
            preds, gts, psnrs, ssims = [], [], [], []
            for v in held.views:
                if v.id not in held.depths:
                    continue
                pred = read_depth_map(self.out / "render" / "heldout" / f"{v.id:04d}.dmap")
                preds.append(pred)
                gts.append(held.depths[v.id])
                if v.id in held.images:
                    im = image_metrics(read_image(self.out / "render" / "heldout" / f"{v.id:04d}.png"),
                                       held.images[v.id][..., :3])
                    psnrs.append(im["psnr"])
                    ssims.append(im["ssim"])
                if self.cfg.figures:
                    from .plotting import plot_depth_error

                    plot_depth_error(pred, held.depths[v.id], self.out / "figures" / f"depth_error_{v.id:04d}.png",
                                     thr[0])
            r = depth_metrics(np.concatenate([p.ravel() for p in preds]), np.concatenate([g.ravel() for g in gts]),
                              thr)
            metrics["depth"] = write_report(r, rep / "depth.json")
            paths.append(rep / "depth.json")
            if psnrs:
                im = {"kind": "image", "psnr": float(np.mean(psnrs)), "ssim": float(np.mean(ssims)), "lpips": None}
                metrics["image"] = write_report(im, rep / "image.json")
                paths.append(rep / "image.json")
        if gt_pts is not None:
            mesh = read_ply(self.out / "mesh.ply")
            tm = TriangleMesh(mesh["vertices"], mesh["faces"])
            samples = tm.sample_points(len(gt_pts), seed=self.cfg.seed)
            r = cloud_metrics(samples, gt_pts, thr)
            metrics["cloud"] = write_report(r, rep / "cloud.json")
            paths.append(rep / "cloud.json")
        p = self.out / "metrics.json"
        p.write_text(json.dumps(metrics, indent=2, sort_keys=True) + "\n")
        paths.append(p)
        return paths, {}

    def stage_keys(self) -> dict:
        c = self.cfg
        flat = c.to_flat()
        part = {k: v for k, v in flat.items() if k.startswith("partition.")}
        train = {k: v for k, v in flat.items() if k.startswith("train.")}
        keys, prev = {}, None
        slices = {
            "import": {"data_dir": str(Path(c.data_dir).resolve()), "alignment": c.alignment},
            "partition": part,
            "train": {**train, "seed": c.seed},
            "merge": {},
            "render": {},
            "fuse": {"voxel": c.tsdf_voxel_size, "trunc": c.tsdf_truncation},
            "eval": {"thresholds": list(c.eval_thresholds), "seed": c.seed},
        }
        for s in STAGES:
            prev = _key(s, slices[s], prev)
            keys[s] = prev
        return keys


def run_pipeline(cfg: PipelineConfig, stages=STAGES, force: bool = False) -> dict:
    """Run (or resume) the stages in order and return the manifest.

    Raises StageError carrying the partial manifest when a stage fails.
    """
    out = Path(cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.toml").write_text(dump_flat(cfg.to_flat()))
    mpath = out / "manifest.json"
    old = {}
    if mpath.exists() and not force:
        try:
            old = {s["name"]: s for s in json.loads(mpath.read_text()).get("stages", [])}
        except (ValueError, KeyError):
            old = {}
    run = _Run(cfg)
    keys = run.stage_keys()
    manifest = {"version": MANIFEST_VERSION, "config": "config.toml", "stages": []}
    upstream_rerun = False
    for name in STAGES:
        if name not in stages:
            continue
        rec = old.get(name)
        if (rec and not upstream_rerun and rec.get("key") == keys[name]
                and rec.get("status") in ("complete", "skipped") and _artifacts_intact(out, rec)):
            manifest["stages"].append(dict(rec, reused=True))
            continue
        upstream_rerun = True
        t0 = time.time()
        log.info("stage %s", name)
        try:
            paths, info = getattr(run, f"stage_{name}")()
        except Exception as e:  # noqa: BLE001 - every failure becomes a stage failure
            manifest["stages"].append({"name": name, "status": "failed", "key": keys[name],
                                       "error": f"{type(e).__name__}: {e}", "seconds": round(time.time() - t0, 3)})
            mpath.write_text(json.dumps(manifest, indent=2) + "\n")
            raise StageError(name, str(e), manifest) from e
        status = "skipped" if paths is None else "complete"
        manifest["stages"].append({"name": name, "status": status, "key": keys[name],
                                   "seconds": round(time.time() - t0, 3), "info": info,
                                   "artifacts": {} if paths is None else _collect(out, paths)})
        mpath.write_text(json.dumps(manifest, indent=2) + "\n")
    mpath.write_text(json.dumps(manifest, indent=2) + "\n")
    return manifest


def stage_status(manifest: dict) -> dict:
    return {s["name"]: s["status"] for s in manifest["stages"]}

