import json
import shutil
from dataclasses import replace
from pathlib import Path

import numpy as np
import pytest
from click.testing import CliRunner

from aerial_splat.cli import main
from aerial_splat.partitioner import PartitionConfig
from aerial_splat.pipeline import STAGES, PipelineConfig, dump_flat, run_pipeline, stage_status
from aerial_splat.scene_io import write_depth_map
from aerial_splat.synthetic import SyntheticSceneSpec, generate_synthetic, write_synthetic
from aerial_splat.trainer import TrainConfig

TINY = dict(ground_size=8.0, boxes=((0.0, 0.0, 2.0, 2.0, 1.5),), rows=3, cols=3, altitude=8.0, width=16,
            height=16, supersample=1, n_points=200, held_out=1)


def tiny_train(**kw):
    base = dict(total_iters=20, densify_start=5, densify_end=15, densify_interval=5, geometric_start=10,
                opacity_reset_interval=0, lr_position_max_steps=20, sh_degree=0)
    base.update(kw)
    return TrainConfig(**base)


@pytest.fixture(scope="module")
def data_dir(tmp_path_factory):
    d = tmp_path_factory.mktemp("tiny") / "data"
    write_synthetic(generate_synthetic(SyntheticSceneSpec(**TINY)), d)
    return d


def tiny_config(data, out, **kw):
    return PipelineConfig(data_dir=str(data), output_dir=str(out), partition=PartitionConfig(1, 1),
                          train=tiny_train(), tsdf_voxel_size=0.25, figures=False, **kw)


@pytest.fixture(scope="module")
def first_run(data_dir, tmp_path_factory):
    out = tmp_path_factory.mktemp("run") / "out"
    cfg = tiny_config(data_dir, out)
    return cfg, run_pipeline(cfg)


def test_all_stages_complete(first_run):
    cfg, manifest = first_run
    assert [s["name"] for s in manifest["stages"]] == list(STAGES)
    assert set(stage_status(manifest).values()) == {"complete"}
    out = Path(cfg.output_dir)
    for name in ("scene.bin", "merged.bin", "mesh.ply", "metrics.json", "manifest.json", "config.toml"):
        assert (out / name).exists()
    metrics = json.loads((out / "metrics.json").read_text())
    assert {"depth", "cloud", "image"} <= set(metrics)


def test_rerun_reuses_every_stage(first_run):
    cfg, manifest = first_run
    again = run_pipeline(cfg)
    assert all(s.get("reused") for s in again["stages"])
    assert [s["key"] for s in again["stages"]] == [s["key"] for s in manifest["stages"]]


def test_same_seed_gives_identical_reports(first_run, data_dir, tmp_path):
    cfg, _ = first_run
    run_pipeline(tiny_config(data_dir, tmp_path / "b"))
    a = Path(cfg.output_dir) / "reports"
    b = tmp_path / "b" / "reports"
    for name in ("depth.json", "cloud.json", "image.json"):
        assert (a / name).read_bytes() == (b / name).read_bytes()


def test_changed_fuse_setting_reruns_downstream_only(first_run, tmp_path):
    cfg, _ = first_run
    out = tmp_path / "copy"
    shutil.copytree(cfg.output_dir, out)
    m = run_pipeline(replace(cfg, output_dir=str(out), tsdf_voxel_size=0.3))
    reused = {s["name"]: bool(s.get("reused")) for s in m["stages"]}
    assert reused == {"import": True, "partition": True, "train": True, "merge": True, "render": True,
                      "fuse": False, "eval": False}


def test_tampered_artifact_forces_rerun(first_run, tmp_path):
    cfg, _ = first_run
    out = tmp_path / "copy"
    shutil.copytree(cfg.output_dir, out)
    (out / "merged.bin").write_bytes(b"garbage")
    m = run_pipeline(replace(cfg, output_dir=str(out)))
    reused = {s["name"]: bool(s.get("reused")) for s in m["stages"]}
    assert reused["train"] and not reused["merge"]


def test_eval_skipped_without_ground_truth(data_dir, tmp_path):
    bare = tmp_path / "bare"
    shutil.copytree(data_dir / "sparse", bare / "sparse")
    shutil.copytree(data_dir / "images", bare / "images")
    m = run_pipeline(tiny_config(bare, tmp_path / "out"))
    st = stage_status(m)
    assert st["eval"] == "skipped"
    assert all(v == "complete" for k, v in st.items() if k != "eval")


def test_failed_stage_is_recorded(tmp_path):
    (tmp_path / "empty").mkdir()
    with pytest.raises(Exception) as info:
        run_pipeline(tiny_config(tmp_path / "empty", tmp_path / "out"))
    m = json.loads((tmp_path / "out" / "manifest.json").read_text())
    assert m["stages"][0]["status"] == "failed"
    assert info.value.stage == "import"


def test_config_roundtrip(first_run, tmp_path):
    cfg, _ = first_run
    p = tmp_path / "run.toml"
    p.write_text(dump_flat(cfg.to_flat()))
    assert PipelineConfig.load(p) == cfg


# ---------------------------------------------------------------------------
# command line


def _write_config(path, data, out, **extra):
    cfg = tiny_config(data, out)
    doc = cfg.to_flat()
    doc.update(extra)
    path.write_text(dump_flat(doc))
    return path


def test_cli_pipeline_success_and_table(data_dir, tmp_path):
    conf = _write_config(tmp_path / "run.toml", data_dir, tmp_path / "out")
    res = CliRunner().invoke(main, ["pipeline", "--config", str(conf)])
    assert res.exit_code == 0, res.output
    lines = [ln.split("\t") for ln in res.output.splitlines()]
    assert [ln[1] for ln in lines if ln[0] == "stage"] == list(STAGES)
    assert any(ln[:2] == ["depth", "pag_0.6"] for ln in lines)


def test_cli_config_error_exit_code(data_dir, tmp_path):
    conf = _write_config(tmp_path / "run.toml", data_dir, tmp_path / "out", **{"train.bogus": 1})
    res = CliRunner().invoke(main, ["pipeline", "--config", str(conf)])
    assert res.exit_code == 2
    res = CliRunner().invoke(main, ["partition", "--scene", str(conf), "--grid", "2by2", "--out", str(tmp_path)])
    assert res.exit_code == 2


def test_cli_stage_failure_exit_code(tmp_path):
    (tmp_path / "empty").mkdir()
    conf = _write_config(tmp_path / "run.toml", tmp_path / "empty", tmp_path / "out")
    res = CliRunner().invoke(main, ["pipeline", "--config", str(conf)])
    assert res.exit_code == 3
    assert "stage\timport\tfailed" in res.output


def test_cli_synth(tmp_path):
    spec = tmp_path / "synth.toml"
    spec.write_text("ground_size = 6.0\nn_boxes = 0\nrows = 2\ncols = 2\nwidth = 8\nheight = 8\n"
                    "supersample = 1\nn_points = 20\nheld_out = 0\n")
    res = CliRunner().invoke(main, ["synth", "--spec", str(spec), "--out", str(tmp_path / "d")])
    assert res.exit_code == 0, res.output
    assert "views\t4" in res.output
    assert (tmp_path / "d" / "gt" / "points.ply").exists()
    spec.write_text("altitude = -1.0\n")
    assert CliRunner().invoke(main, ["synth", "--spec", str(spec), "--out", str(tmp_path / "e")]).exit_code == 2


def test_cli_step_by_step(data_dir, tmp_path):
    r = CliRunner()
    scene = tmp_path / "scene.bin"
    res = r.invoke(main, ["import", "--sparse", str(data_dir / "sparse"), "--images", str(data_dir / "images"),
                          "--out", str(scene)])
    assert res.exit_code == 0, res.output
    res = r.invoke(main, ["partition", "--scene", str(scene), "--grid", "2x1", "--out", str(tmp_path / "blocks"),
                          "--no-figure"])
    assert res.exit_code == 0, res.output
    assert res.output.count("block\t") == 2
    train_toml = tmp_path / "train.toml"
    train_toml.write_text(dump_flat({f"train.{k}": v for k, v in tiny_train().to_flat().items()}))
    res = r.invoke(main, ["train", "--blocks", str(tmp_path / "blocks"), "--scene", str(scene),
                          "--config", str(train_toml), "--out", str(tmp_path / "ckpts")])
    assert res.exit_code == 0, res.output
    res = r.invoke(main, ["merge", "--ckpts", str(tmp_path / "ckpts"), "--blocks", str(tmp_path / "blocks"),
                          "--out", str(tmp_path / "merged.bin")])
    assert res.exit_code == 0, res.output
    res = r.invoke(main, ["render", "--checkpoint", str(tmp_path / "merged.bin"), "--view", "0", "--scene",
                          str(scene), "--out-prefix", str(tmp_path / "r" / "v0_")])
    assert res.exit_code == 0, res.output
    assert (tmp_path / "r" / "v0_depth.dmap").exists()
    res = r.invoke(main, ["export-ply", "--checkpoint", str(tmp_path / "merged.bin"), "--out",
                          str(tmp_path / "g.ply")])
    assert res.exit_code == 0, res.output


def test_cli_eval_depth(tmp_path):
    gt = np.zeros((1, 4))
    write_depth_map(gt, tmp_path / "gt.dmap")
    write_depth_map(np.array([[0.1, 0.5, 0.9, 1.2]]), tmp_path / "pred.dmap")
    res = CliRunner().invoke(main, ["eval", "depth", "--pred", str(tmp_path / "pred.dmap"), "--gt",
                                    str(tmp_path / "gt.dmap"), "--thresholds", "0.6,1.0",
                                    "--out", str(tmp_path / "d.json"), "--no-figure"])
    assert res.exit_code == 0, res.output
    rep = json.loads((tmp_path / "d.json").read_text())
    assert rep["pag_0.6"] == 50.0 and rep["pag_1"] == 75.0
    write_depth_map(np.full((1, 4), np.nan), tmp_path / "nan.dmap")
    res = CliRunner().invoke(main, ["eval", "depth", "--pred", str(tmp_path / "nan.dmap"), "--gt",
                                    str(tmp_path / "gt.dmap"), "--out", str(tmp_path / "e.json")])
    assert res.exit_code == 3
    res = CliRunner().invoke(main, ["eval", "depth", "--pred", str(tmp_path / "pred.dmap"), "--gt",
                                    str(tmp_path / "gt.dmap"), "--thresholds", "-1", "--out", str(tmp_path / "f.json")])
    assert res.exit_code == 2
