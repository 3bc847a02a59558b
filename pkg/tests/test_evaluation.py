import json
import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from aerial_splat.evaluation import MetricError, cloud_metrics, depth_metrics, image_metrics, psnr, write_report
from aerial_splat.losses import ssim_terms

from oracles import cloud_metrics_brute, depth_metrics_loop

TAUS = (0.1, 0.6, 0.8, 1.0, 2.5)


def test_depth_identity():
    gt = np.random.default_rng(0).uniform(5, 50, (8, 8))
    r = depth_metrics(gt, gt)
    assert r.mae == 0 and r.rmse == 0
    assert all(v == 100.0 for v in r.pag.values())


def test_depth_worked_example():
    gt = np.zeros((1, 4))
    pred = np.array([[0.1, 0.5, 0.9, 1.2]])
    r = depth_metrics(pred, gt, (0.6, 1.0))
    assert r.mae == pytest.approx(0.675, abs=1e-12)
    assert r.pag[0.6] == 50.0 and r.pag[1.0] == 75.0
    assert r.rmse == pytest.approx(math.sqrt((0.01 + 0.25 + 0.81 + 1.44) / 4), abs=1e-12)
    assert r.rmse == pytest.approx(0.7921, abs=1e-4)


def test_depth_exclusion_over_ten_metres():
    r = depth_metrics(np.array([0.5, 12.0]), np.zeros(2))
    assert r.mae == 0.5 and r.valid_count == 1 and r.outlier_count == 1 and r.excluded_count == 1


def test_depth_errors():
    with pytest.raises(MetricError):
        depth_metrics(np.full(3, np.nan), np.zeros(3))
    with pytest.raises(MetricError):
        depth_metrics(np.zeros(3), np.zeros(4))


@pytest.mark.parametrize("seed", range(10))
def test_depth_matches_loop_oracle(seed):
    rng = np.random.default_rng(seed)
    gt = rng.uniform(10, 60, (64, 64))
    pred = gt + rng.normal(scale=rng.uniform(0.2, 6.0), size=gt.shape)
    # exact threshold hits and invalid cells
    pred[0, :8] = gt[0, :8] + 0.6
    pred[rng.random(gt.shape) < 0.05] = np.nan
    gt[rng.random(gt.shape) < 0.05] = np.nan
    r = depth_metrics(pred, gt, TAUS)
    mae, rmse, pag, m = depth_metrics_loop(pred, gt, TAUS)
    assert r.valid_count == m
    assert r.mae == pytest.approx(mae, abs=1e-12)
    assert r.rmse == pytest.approx(rmse, abs=1e-12)
    for t in TAUS:
        assert r.pag[t] == pag[t]


@settings(max_examples=100, deadline=None)
@given(st.lists(st.floats(-20, 20, allow_nan=False), min_size=1, max_size=200),
       st.floats(0.01, 5), st.floats(0.01, 5))
def test_pag_monotone_and_jensen(errs, a, b):
    err = np.array(errs)
    if not (np.abs(err) <= 10).any():
        return
    lo, hi = sorted((a, b))
    r = depth_metrics(err, np.zeros_like(err), (lo, hi))
    assert r.pag[lo] <= r.pag[hi]
    assert r.mae <= r.rmse * (1 + 1e-12)
    assert 0 <= r.pag[lo] <= 100


def test_cloud_examples():
    gt = np.arange(30, dtype=float).reshape(10, 3) * 5.0
    r = cloud_metrics(gt, gt, (0.6,))
    assert (r.accuracy[0.6], r.completeness[0.6], r.f_score[0.6]) == (100.0, 100.0, 100.0)
    shifted = gt + [0.7, 0, 0]
    r = cloud_metrics(shifted, gt, (0.6, 1.0))
    assert (r.accuracy[0.6], r.completeness[0.6], r.f_score[0.6]) == (0.0, 0.0, 0.0)
    assert (r.accuracy[1.0], r.completeness[1.0], r.f_score[1.0]) == (100.0, 100.0, 100.0)
    gt = np.random.default_rng(0).uniform(0, 50, (99, 3))
    pred = np.vstack([gt, [[500.0, 500.0, 500.0]]])
    r = cloud_metrics(pred, gt, (0.6,))
    assert r.accuracy[0.6] == pytest.approx(99.0)
    assert r.completeness[0.6] == 100.0
    assert r.f_score[0.6] == pytest.approx(2 * 99 * 100 / 199, abs=1e-9)
    with pytest.raises(MetricError):
        cloud_metrics(np.zeros((0, 3)), gt)


@pytest.mark.parametrize("seed", range(5))
def test_cloud_matches_brute_force(seed):
    rng = np.random.default_rng(seed)
    gt = rng.uniform(0, 20, (int(rng.integers(100, 2000)), 3))
    pred = gt[rng.random(len(gt)) < 0.7] + rng.normal(scale=0.5, size=(1, 3))
    pred = np.vstack([pred, rng.uniform(0, 20, (50, 3))])
    r = cloud_metrics(pred, gt, TAUS)
    ref = cloud_metrics_brute(pred, gt, TAUS)
    for t in TAUS:
        assert (r.accuracy[t], r.completeness[t]) == ref[t][:2]
        assert r.f_score[t] == pytest.approx(ref[t][2], abs=1e-12)


def test_image_examples():
    img = np.random.default_rng(0).uniform(size=(24, 24, 3))
    m = image_metrics(img, img)
    assert m["psnr"] == 99.0 and m["ssim"] == pytest.approx(1.0, abs=1e-12) and m["lpips"] is None
    assert psnr(np.full((8, 8, 3), 0.5), np.full((8, 8, 3), 0.6)) == pytest.approx(20.0, abs=1e-9)
    with pytest.raises(MetricError):
        psnr(img, img[:4])


def test_ssim_structure_of_negative_is_minus_one():
    rng = np.random.default_rng(1)
    gt = (rng.random((32, 32)) > 0.5).astype(float)
    _, _, structure = ssim_terms(torch.tensor(gt), torch.tensor(1.0 - gt))
    # interior windows contain both values, so the variance is far above the stabilizer
    assert float(structure[0, 0, 8:-8, 8:-8].max()) < -0.99


def test_reports_are_flat_json(tmp_path):
    r = depth_metrics(np.array([0.1, 0.5]), np.zeros(2), (0.6, 0.8))
    d = write_report(r, tmp_path / "d.json")
    back = json.loads((tmp_path / "d.json").read_text())
    assert back == d and back["pag_0.6"] == 100.0 and back["lpips"] is None
    assert all(not isinstance(v, dict) for v in back.values())
    c = write_report(cloud_metrics(np.zeros((1, 3)), np.zeros((1, 3)), (0.5,)), tmp_path / "c.json")
    assert c["f_score_0.5"] == 100.0
