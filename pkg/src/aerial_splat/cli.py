"""Command line entry point ``aerial-splat``.

Exit codes: 0 success, 2 configuration or usage error, 3 stage failure.
"""

from __future__ import annotations

import json
import logging
import sys
from pathlib import Path

import click
import numpy as np
import torch

EXIT_CONFIG = 2
EXIT_STAGE = 3


class StageFailure(click.ClickException):
    exit_code = EXIT_STAGE


class ConfigFailure(click.ClickException):
    exit_code = EXIT_CONFIG


def _thresholds(text: str) -> tuple:
    try:
        vals = tuple(float(x) for x in text.split(",") if x.strip())
    except ValueError as e:
        raise ConfigFailure(f"bad thresholds {text!r}") from e
    if not vals or any(v <= 0 for v in vals):
        raise ConfigFailure("thresholds must be positive")
    return vals


def _grid(text: str) -> tuple[int, int]:
    try:
        m, n = (int(x) for x in text.lower().split("x"))
    except ValueError as e:
        raise ConfigFailure(f"grid must look like MxN, got {text!r}") from e
    return m, n


def _print_table(d: dict) -> None:
    """Tab-delimited ``key<TAB>value`` lines, one per report field."""
    for k, v in d.items():
        if isinstance(v, float):
            v = f"{v:.6g}"
        click.echo(f"{k}\t{'null' if v is None else v}")


@click.group()
@click.option("-v", "--verbose", is_flag=True, help="Log progress to stderr.")
def main(verbose):
    """Gaussian-splatting surface reconstruction for aerial imagery."""
    logging.basicConfig(level=logging.INFO if verbose else logging.WARNING, format="%(message)s")


@main.command("import")
@click.option("--sparse", required=True, type=click.Path(exists=True, file_okay=False))
@click.option("--images", type=click.Path(file_okay=False), default=None)
@click.option("--align", default="none", show_default=True, help="auto, none or a file holding a 4x4 transform.")
@click.option("--out", required=True, type=click.Path(dir_okay=False))
def import_cmd(sparse, images, align, out):
    """Parse a sparse SfM model and save it as one scene file."""
    from .scene_io import AlignmentError, SfmIntegrityError, SfmParseError, load_sfm_scene, save_scene

    if align not in ("auto", "none") and not Path(align).exists():
        raise ConfigFailure(f"alignment file {align} does not exist")
    try:
        scene = load_sfm_scene(sparse, alignment=align, images_dir=Path(images).resolve() if images else None)
    except (SfmParseError, SfmIntegrityError, AlignmentError, OSError) as e:
        raise StageFailure(str(e)) from e
    save_scene(scene, out)
    _print_table({"views": len(scene.views), "points": len(scene.points), "out": out})


@main.command()
@click.option("--scene", "scene_path", required=True, type=click.Path(exists=True, dir_okay=False))
@click.option("--grid", default="1x1", show_default=True)
@click.option("--expand", default=0.2, show_default=True, type=float)
@click.option("--scope", default=0.7, show_default=True, type=float)
@click.option("--views-per-block", default=None, type=int)
@click.option("--up-axis", default=2, show_default=True, type=int)
@click.option("--no-select", is_flag=True, help="Keep each block's native views (no selection/culling).")
@click.option("--out", required=True, type=click.Path(file_okay=False))
@click.option("--figure/--no-figure", default=True, show_default=True)
def partition(scene_path, grid, expand, scope, views_per_block, up_axis, no_select, out, figure):
    """Split the scene into expanded blocks and write one manifest per block."""
    from .partitioner import PartitionConfig, PartitionError, partition_scene, write_blocks
    from .scene_io import load_scene

    m, n = _grid(grid)
    try:
        cfg = PartitionConfig(m, n, expand, scope, views_per_block, up_axis)
    except PartitionError as e:
        raise ConfigFailure(str(e)) from e
    scene = load_scene(scene_path)
    try:
        blocks = partition_scene(scene, cfg, select=not no_select)
    except PartitionError as e:
        raise StageFailure(str(e)) from e
    write_blocks(blocks, out)
    if figure:
        from .plotting import plot_partition

        plot_partition(blocks, scene.camera_centers, Path(out) / "partition.png", up_axis)
    for b in blocks:
        click.echo(f"block\t{b.id}\tviews\t{len(b.view_ids)}\tpoints\t{len(b.point_ids)}")


@main.command()
@click.option("--blocks", "blocks_dir", required=True, type=click.Path(exists=True, file_okay=False))
@click.option("--scene", "scene_path", required=True, type=click.Path(exists=True, dir_okay=False))
@click.option("--config", "config_path", type=click.Path(exists=True, dir_okay=False), default=None)
@click.option("--jobs", default=1, show_default=True, type=int)
@click.option("--out", required=True, type=click.Path(file_okay=False))
def train(blocks_dir, scene_path, config_path, jobs, out):
    """Optimize every block independently and write one checkpoint per block."""
    from .partitioner import read_blocks
    from .pipeline import read_flat
    from .scene_io import load_scene
    from .trainer import ConfigError, TrainConfig, TrainingError, train_blocks

    try:
        cfg = TrainConfig.from_flat(read_flat(config_path)) if config_path else TrainConfig()
    except ConfigError as e:
        raise ConfigFailure(str(e)) from e
    if jobs < 1:
        raise ConfigFailure("--jobs must be >= 1")
    blocks = read_blocks(blocks_dir)
    scene = load_scene(scene_path)
    try:
        cks = train_blocks(blocks, scene, cfg, jobs=jobs)
    except TrainingError as e:
        ck = getattr(e, "checkpoint", None)
        if ck is not None:
            Path(out).mkdir(parents=True, exist_ok=True)
            ck.save(Path(out) / f"block_{ck.block_id:03d}.diverged.ckpt")
        raise StageFailure(str(e)) from e
    Path(out).mkdir(parents=True, exist_ok=True)
    for ck in cks:
        ck.save(Path(out) / f"block_{ck.block_id:03d}.ckpt")
        click.echo(f"block\t{ck.block_id}\tgaussians\t{len(ck.scene)}\tfinal_loss\t"
                   f"{ck.loss_history[-1] if ck.loss_history else float('nan'):.6g}")


@main.command()
@click.option("--ckpts", required=True, type=click.Path(exists=True, file_okay=False))
@click.option("--blocks", "blocks_dir", required=True, type=click.Path(exists=True, file_okay=False))
@click.option("--out", required=True, type=click.Path(dir_okay=False))
def merge(ckpts, blocks_dir, out):
    """Keep in-core Gaussians of every block checkpoint and concatenate them."""
    from .partitioner import read_blocks
    from .trainer import BlockCheckpoint, MergeError, merge_blocks

    cks = [BlockCheckpoint.load(p) for p in sorted(Path(ckpts).glob("block_*[0-9].ckpt"))]
    try:
        merged = merge_blocks(cks, read_blocks(blocks_dir))
    except MergeError as e:
        raise StageFailure(str(e)) from e
    Path(out).write_bytes(merged.to_bytes())
    _print_table({"gaussians": len(merged), "out": out})


def _resolve_view(view: str, scene_path):
    from .scene_io import load_scene
    from .synthetic import read_views

    if Path(view).exists():
        views = read_views(view)
        if not views:
            raise ConfigFailure(f"{view} holds no pose")
        return views[0]
    try:
        vid = int(view)
    except ValueError as e:
        raise ConfigFailure(f"--view must be a view id or a pose file, got {view!r}") from e
    if scene_path is None:
        raise ConfigFailure("--scene is required to look up a view id")
    scene = load_scene(scene_path)
    if vid not in scene.view_by_id:
        raise ConfigFailure(f"view {vid} is not in the scene")
    return scene.view_by_id[vid]


@main.command()
@click.option("--checkpoint", required=True, type=click.Path(exists=True, dir_okay=False))
@click.option("--view", required=True, help="View id (needs --scene) or a pose file.")
@click.option("--scene", "scene_path", type=click.Path(exists=True, dir_okay=False), default=None)
@click.option("--extent", default=1.0, show_default=True, type=float, help="Scene extent used for the near plane.")
@click.option("--out-prefix", required=True)
def render(checkpoint, view, scene_path, extent, out_prefix):
    """Render color, depth, normal and alpha rasters for one view."""
    from .pipeline import load_gaussians
    from .renderer import render_view
    from .scene_io import write_depth_map, write_image

    v = _resolve_view(view, scene_path)
    gs = load_gaussians(checkpoint)
    with torch.no_grad():
        out = render_view(gs, v, extent).numpy()
    prefix = str(out_prefix)
    Path(prefix + "color.png").parent.mkdir(parents=True, exist_ok=True)
    write_image(np.clip(out["color"], 0, 1), prefix + "color.png")
    write_depth_map(out["depth"], prefix + "depth.dmap")
    write_image(np.nan_to_num(0.5 * (out["normal"] + 1.0)), prefix + "normal.png")
    write_image(out["alpha"], prefix + "alpha.png")
    d = out["depth"]
    _print_table({"view": v.id, "valid_depth": int(np.isfinite(d).sum()), "pixels": d.size, "prefix": prefix})


@main.command()
@click.option("--checkpoint", required=True, type=click.Path(exists=True, dir_okay=False))
@click.option("--scene", "scene_path", required=True, type=click.Path(exists=True, dir_okay=False))
@click.option("--voxel", default=None, type=float, help="Voxel size in meters (default extent/512).")
@click.option("--trunc", default=None, type=float, help="Truncation in meters (default 4 voxels).")
@click.option("--out", required=True, type=click.Path(dir_okay=False))
def fuse(checkpoint, scene_path, voxel, trunc, out):
    """Render depth for every training view, fuse a TSDF and extract a mesh."""
    from .pipeline import fusion_bounds, load_gaussians, scene_extent
    from .renderer import render_view
    from .scene_io import load_scene, write_mesh
    from .surface import default_voxel_size, extract_mesh, fuse_depth_maps

    scene = load_scene(scene_path)
    ext = scene_extent(scene)
    voxel = voxel or default_voxel_size(ext)
    trunc = trunc or 4 * voxel
    if trunc < 2 * voxel:
        raise ConfigFailure("--trunc must be at least twice --voxel")
    gs = load_gaussians(checkpoint)
    with torch.no_grad():
        depths = [render_view(gs, v, ext).depth.double().numpy() for v in scene.views]
    lo, hi = fusion_bounds(scene)
    mesh = extract_mesh(fuse_depth_maps(depths, scene.views, lo, hi, voxel, trunc))
    if len(mesh) == 0:
        raise StageFailure("fusion produced an empty mesh")
    write_mesh(mesh.vertices, mesh.faces, out, normals=mesh.normals)
    _print_table({"vertices": len(mesh.vertices), "faces": len(mesh), "voxel_size": voxel, "truncation": trunc})


def _load_cloud(path) -> np.ndarray:
    from .scene_io import read_ply
    from .surface import TriangleMesh

    ply = read_ply(path)
    if len(ply["faces"]):
        mesh = TriangleMesh(ply["vertices"], ply["faces"])
        return mesh.sample_points(max(len(ply["vertices"]), 10_000), seed=0)
    return ply["vertices"]


def _depth_pairs(pred, gt):
    from .scene_io import read_depth_map

    p, g = Path(pred), Path(gt)
    if p.is_dir() != g.is_dir():
        raise ConfigFailure("--pred and --gt must both be files or both be directories")
    if not p.is_dir():
        return [(read_depth_map(p), read_depth_map(g))]
    names = sorted(x.name for x in g.glob("*.dmap") if (p / x.name).exists())
    if not names:
        raise StageFailure("no depth maps with matching names")
    return [(read_depth_map(p / n), read_depth_map(g / n)) for n in names]


@main.command("eval")
@click.argument("kind", type=click.Choice(["depth", "cloud", "image"]))
@click.option("--pred", required=True, type=click.Path(exists=True))
@click.option("--gt", required=True, type=click.Path(exists=True))
@click.option("--thresholds", default="0.6,0.8,1.0", show_default=True)
@click.option("--out", required=True, type=click.Path(dir_okay=False))
@click.option("--figure/--no-figure", default=True, show_default=True, help="Write a PNG next to the report.")
def eval_cmd(kind, pred, gt, thresholds, out, figure):
    """Compare a prediction with ground truth and write a flat JSON report."""
    from .evaluation import MetricError, cloud_metrics, depth_metrics, image_metrics, write_report
    from .scene_io import read_image

    thr = _thresholds(thresholds)
    fig_path = Path(out).with_suffix(".png")
    try:
        if kind == "depth":
            pairs = _depth_pairs(pred, gt)
            rep = depth_metrics(np.concatenate([a.ravel() for a, _ in pairs]),
                                np.concatenate([b.ravel() for _, b in pairs]), thr)
            if figure:
                from .plotting import plot_depth_error

                plot_depth_error(pairs[0][0], pairs[0][1], fig_path, thr[0])
        elif kind == "cloud":
            rep = cloud_metrics(_load_cloud(pred), _load_cloud(gt), thr)
            if figure:
                from .plotting import plot_metric_bars

                plot_metric_bars({f"F@{k:g}": v for k, v in rep.f_score.items()}, fig_path, "F-score (%)")
        else:
            rep = image_metrics(read_image(pred)[..., :3], read_image(gt)[..., :3])
    except MetricError as e:
        raise StageFailure(str(e)) from e
    d = write_report(rep, out)
    _print_table(d)


@main.command("export-ply")
@click.option("--checkpoint", required=True, type=click.Path(exists=True, dir_okay=False))
@click.option("--out", required=True, type=click.Path(dir_okay=False))
@click.option("--ascii", "ascii_", is_flag=True)
def export_ply(checkpoint, out, ascii_):
    """Write Gaussian means with their base (degree-0) colors as a point cloud."""
    from .gaussian_model import eval_sh
    from .pipeline import load_gaussians
    from .scene_io import write_point_cloud

    gs = load_gaussians(checkpoint)
    dirs = torch.zeros(len(gs), 3, dtype=gs.dtype)
    dirs[:, 2] = 1.0
    rgb = eval_sh(0, gs.sh[:, :1].detach(), dirs).clamp(0, 1).double().numpy()
    write_point_cloud(gs.means.detach().double().numpy(), out, colors=np.rint(rgb * 255).astype(np.uint8),
                      binary=not ascii_)
    _print_table({"points": len(gs), "out": out})


@main.command()
@click.option("--config", "config_path", required=True, type=click.Path(exists=True, dir_okay=False))
@click.option("--force", is_flag=True, help="Ignore the existing manifest and rerun every stage.")
def pipeline(config_path, force):
    """Run import, partition, train, merge, render, fuse and eval."""
    from .pipeline import PipelineConfig, StageError, run_pipeline
    from .trainer import ConfigError

    try:
        cfg = PipelineConfig.load(config_path)
    except ConfigError as e:
        raise ConfigFailure(str(e)) from e
    try:
        manifest = run_pipeline(cfg, force=force)
    except StageError as e:
        for s in e.manifest["stages"]:
            click.echo(f"stage\t{s['name']}\t{s['status']}")
        raise StageFailure(str(e)) from e
    for s in manifest["stages"]:
        click.echo(f"stage\t{s['name']}\t{s['status']}\t{s.get('seconds', 0)}")
    metrics = Path(cfg.output_dir) / "metrics.json"
    if metrics.exists():
        for kind, rep in json.loads(metrics.read_text()).items():
            for k, v in rep.items():
                if k != "kind":
                    click.echo(f"{kind}\t{k}\t{'null' if v is None else v}")


@main.command()
@click.option("--spec", "spec_path", type=click.Path(exists=True, dir_okay=False), default=None)
@click.option("--out", required=True, type=click.Path(file_okay=False))
def synth(spec_path, out):
    """Generate a synthetic aerial scene with exact ground truth."""
    from .pipeline import read_flat
    from .synthetic import SyntheticSceneSpec, SyntheticSpecError, generate_synthetic, write_synthetic
    from .trainer import ConfigError

    try:
        doc = read_flat(spec_path) if spec_path else {}
        for k in ("box_size", "box_height"):
            if k in doc:
                doc[k] = tuple(doc[k])
        spec = SyntheticSceneSpec(**doc)
        scene = generate_synthetic(spec)
    except (ConfigError, SyntheticSpecError, TypeError) as e:
        raise ConfigFailure(str(e)) from e
    write_synthetic(scene, out)
    _print_table({"views": len(scene.sfm.views), "points": len(scene.sfm.points),
                  "held_out": len(scene.held_out), "boxes": len(scene.boxes), "out": out})


if __name__ == "__main__":
    sys.exit(main())
