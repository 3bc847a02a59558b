import math
from types import SimpleNamespace

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st
from skimage.metrics import structural_similarity

from aerial_splat.gaussian_model import GaussianPrimitive, GaussianScene
from aerial_splat.losses import (ReprojectionPair, depth_normal_loss, geometric_mask_count,
                                 multiview_geometric_loss, nearest_view, normal_from_depth, photometric_loss,
                                 project_to_neighbor, reprojection_distances, ssim_terms)
from aerial_splat.renderer import render_view
from aerial_splat.scene_io import CameraView

NADIR = np.diag([1.0, -1.0, -1.0])


def cam(vid, center, R=NADIR, size=32, f=40.0):
    return CameraView(vid, f, f, size / 2, size / 2, size, size, R, -R @ np.asarray(center, float))


def rot_y(deg):
    a = math.radians(deg)
    return np.array([[math.cos(a), 0, math.sin(a)], [0, 1, 0], [-math.sin(a), 0, math.cos(a)]])


def plane_depth(view, n=np.array([0.0, 0, 1]), d=0.0):
    """Camera depth of the plane n.x = d along every pixel ray."""
    H, W = view.height, view.width
    jj, ii = np.meshgrid(np.arange(W) + 0.5, np.arange(H) + 0.5)
    d_cam = np.stack([(jj - view.cx) / view.fx, (ii - view.cy) / view.fy, np.ones_like(jj)], -1)
    d_world = d_cam @ view.R  # R^T d
    c = view.center
    t = (d - n @ c) / (d_world @ n)
    return torch.tensor(np.where(t > 0, t, np.nan))


def test_photometric_examples():
    img = torch.rand(16, 16, 3, dtype=torch.float64, generator=torch.Generator().manual_seed(0))
    assert float(photometric_loss(img, img)) == pytest.approx(0.0, abs=1e-12)
    off = (img * 0.5) + 0.1
    assert float(photometric_loss(off, img * 0.5, lambda_dssim=0.0)) == pytest.approx(0.1, abs=1e-12)
    other = torch.rand(16, 16, 3, dtype=torch.float64, generator=torch.Generator().manual_seed(1))
    assert float(photometric_loss(img, other, 0.0)) == pytest.approx(float((img - other).abs().mean()))
    assert float(photometric_loss(img, other)) > 0
    with pytest.raises(ValueError):
        photometric_loss(img, img[:8])


def test_ssim_interior_matches_skimage():
    rng = np.random.default_rng(0)
    a = rng.uniform(size=(40, 40))
    b = np.clip(a + rng.normal(scale=0.1, size=a.shape), 0, 1)
    lum, cs, _ = ssim_terms(torch.tensor(a), torch.tensor(b))
    ours = (lum * cs)[0, 0].numpy()
    _, ref = structural_similarity(a, b, gaussian_weights=True, sigma=1.5, use_sample_covariance=False,
                                   data_range=1.0, full=True)
    np.testing.assert_allclose(ours[5:-5, 5:-5], ref[5:-5, 5:-5], atol=1e-10)


def test_normal_fronto_parallel():
    v = cam(0, (0, 0, 10))
    N, ok = normal_from_depth(torch.full((32, 32), 10.0, dtype=torch.float64), v)
    assert ok[1:-1, 1:-1].all() and not ok[0].any() and not ok[:, -1].any()
    np.testing.assert_allclose(N[ok].numpy(), np.tile([0, 0, -1.0], (int(ok.sum()), 1)), atol=1e-12)


@pytest.mark.parametrize("sign", [1.0, -1.0])
def test_normal_slanted_plane(sign):
    # camera-frame plane z = z0 + sign * x, i.e. depth z0 / (1 - sign * x_n)
    v = cam(0, (0, 0, 10))
    z0 = 10.0
    x_n = (np.arange(32) + 0.5 - v.cx) / v.fx
    depth = torch.tensor(np.tile(z0 / (1 - sign * x_n), (32, 1)))
    N, ok = normal_from_depth(depth, v)
    expected = np.array([sign, 0, -1.0]) / math.sqrt(2)
    np.testing.assert_allclose(N[2:-2, 2:-2].numpy().reshape(-1, 3), np.tile(expected, (28 * 28, 1)), atol=1e-3)


def test_normal_isolated_pixel_invalid():
    d = torch.full((9, 9), math.nan, dtype=torch.float64)
    d[4, 4] = 5.0
    _, ok = normal_from_depth(d, cam(0, (0, 0, 5), size=9))
    assert not ok.any()


def _bundle(alpha, normal_acc, depth):
    valid = torch.isfinite(depth)
    return SimpleNamespace(alpha=alpha, normal_acc=normal_acc, depth_valid=valid,
                           depth_filled=torch.where(valid, depth, torch.ones_like(depth)))


def test_depth_normal_loss_orthogonal_is_one():
    v = cam(0, (0, 0, 10), size=8)
    n = torch.zeros(8, 8, 3, dtype=torch.float64)
    n[..., 0] = 1.0
    b = _bundle(torch.ones(8, 8, dtype=torch.float64), n, torch.full((8, 8), 10.0, dtype=torch.float64))
    assert float(depth_normal_loss(b, v)) == pytest.approx(1.0, abs=1e-12)


def test_depth_normal_loss_all_invalid():
    v = cam(0, (0, 0, 10), size=8)
    alpha = torch.ones(8, 8, dtype=torch.float64, requires_grad=True)
    n = torch.zeros(8, 8, 3, dtype=torch.float64, requires_grad=True)
    loss = depth_normal_loss(_bundle(alpha, n, torch.full((8, 8), math.nan, dtype=torch.float64)), v)
    loss.backward()
    assert float(loss.detach()) == 0.0
    for p in (alpha, n):
        assert p.grad is None or float(p.grad.abs().sum()) == 0.0


def test_depth_normal_loss_pancake_is_zero():
    g = GaussianPrimitive.create([0, 0, 0], scale=(80, 80, 0.02), opacity=1.0)
    scene = GaussianScene.from_primitives([g])
    v = cam(0, (0, 0, 10), size=16)
    b = render_view(scene, v, 20.0)
    assert b.depth_valid.all()
    assert abs(float(depth_normal_loss(b, v))) < 1e-6


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_depth_normal_loss_zero_iff_aligned(seed):
    rng = np.random.default_rng(seed)
    v = cam(0, (0, 0, 10), size=8)
    depth = torch.tensor(10.0 + rng.uniform(-0.5, 0.5, (8, 8)))
    N, ok = normal_from_depth(depth, v)
    alpha = torch.tensor(rng.uniform(0.2, 1.0, (8, 8)))
    aligned = _bundle(alpha, N * alpha[..., None], depth)
    assert abs(float(depth_normal_loss(aligned, v))) < 1e-12
    tilt = torch.tensor(rng.normal(size=(8, 8, 3)))
    off = _bundle(alpha, (N + tilt) * alpha[..., None] / (N + tilt).norm(dim=-1, keepdim=True), depth)
    assert float(depth_normal_loss(off, v)) > 1e-6


def test_project_identity():
    v = cam(0, (1, 2, 10), R=NADIR @ rot_y(5).T)
    rng = np.random.default_rng(0)
    P = torch.tensor(rng.uniform(0, 32, (50, 2)))
    D = torch.tensor(rng.uniform(5, 15, 50))
    Pn, _, ok = project_to_neighbor(P, D, v, v)
    assert ok.all()
    np.testing.assert_allclose(Pn.numpy(), P.numpy(), atol=1e-12)


def test_project_matches_plane_homography():
    vr = cam(0, (0, 0, 10))
    vn = cam(1, (1.5, -0.5, 11), R=NADIR @ rot_y(8).T)
    Dr = plane_depth(vr)
    H, W = Dr.shape
    jj, ii = torch.meshgrid(torch.arange(W, dtype=torch.float64) + 0.5, torch.arange(H, dtype=torch.float64) + 0.5,
                            indexing="xy")
    P = torch.stack([jj, ii], -1)
    Pn, _, ok = project_to_neighbor(P, Dr, vr, vn)
    # world plane z = 0; H = K_n (R_rel + t_rel n_r^T / d_r) K_r^-1
    K = lambda v: np.array([[v.fx, 0, v.cx], [0, v.fy, v.cy], [0, 0, 1.0]])
    R_rel = vn.R @ vr.R.T
    t_rel = vn.t - R_rel @ vr.t
    n_r = vr.R @ np.array([0, 0, 1.0])
    d_r = n_r @ vr.t  # plane in reference camera frame: n_r . X = d_r
    Hm = K(vn) @ (R_rel + np.outer(t_rel, n_r) / d_r) @ np.linalg.inv(K(vr))
    ph = np.c_[P.reshape(-1, 2).numpy(), np.ones(H * W)] @ Hm.T
    expected = ph[:, :2] / ph[:, 2:]
    assert ok.all()
    np.testing.assert_allclose(Pn.reshape(-1, 2).numpy(), expected, atol=1e-9)


def test_project_behind_neighbor_is_invalid():
    vr = cam(0, (0, 0, 10))
    vn = cam(1, (0, 0, -5))  # looks down from below the point
    _, _, ok = project_to_neighbor(torch.tensor([[16.0, 16.0]], dtype=torch.float64),
                                   torch.tensor([10.0], dtype=torch.float64), vr, vn)
    assert not ok.any()


def _plane_pair(T=1.0):
    vr = cam(0, (0, 0, 10))
    vn = cam(1, (1.0, 0.5, 10.5), R=NADIR @ rot_y(6).T)
    return vr, vn, ReprojectionPair(vr, plane_depth(vr), vn, plane_depth(vn), threshold=T)


def test_geometric_loss_consistent_plane_is_zero():
    vr, vn, pair = _plane_pair()
    dist, ok = reprojection_distances(pair)
    assert int(ok.sum()) > 500
    assert float(dist[ok].max()) < 1e-3
    assert float(multiview_geometric_loss(pair)) < 1e-3
    swapped = ReprojectionPair(vn, pair.depth_n, vr, pair.depth_r)
    assert float(reprojection_distances(swapped)[0].max()) < 1e-3


def _stereo(shift_px, T):
    # fronto-parallel plane at depth 10, baseline 2 along x, f = 50 -> disparity 10 px
    vr = cam(0, (0, 0, 10), size=40, f=50.0)
    vn = cam(1, (2, 0, 10), size=40, f=50.0)
    Dr = torch.full((40, 40), 10.0, dtype=torch.float64)
    Dn = torch.full((40, 40), 1.0 / (0.1 - shift_px / 100.0), dtype=torch.float64)
    return ReprojectionPair(vr, Dr, vn, Dn, threshold=T)


def test_geometric_loss_half_pixel():
    pair = _stereo(0.5, 1.0)
    dist, ok = reprojection_distances(pair)
    np.testing.assert_allclose(dist[ok].numpy(), 0.5, atol=1e-9)
    assert float(multiview_geometric_loss(pair)) == pytest.approx(0.5, abs=1e-9)


def test_geometric_loss_all_masked():
    pair = _stereo(5.0, 1.0)
    Dn = pair.depth_n.clone().requires_grad_(True)
    pair.depth_n = Dn
    loss = multiview_geometric_loss(pair)
    loss.backward()
    assert float(loss.detach()) == 0.0
    assert Dn.grad is None or float(Dn.grad.abs().sum()) == 0.0
    assert float(multiview_geometric_loss(_stereo(5.0, 10.0))) == pytest.approx(5.0, abs=1e-9)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**32 - 1), st.floats(0.05, 3.0), st.floats(0.05, 3.0))
def test_mask_grows_with_threshold(seed, t1, t2):
    rng = np.random.default_rng(seed)
    vr, vn, pair = _plane_pair()
    noisy = pair.depth_n + torch.tensor(rng.normal(scale=0.2, size=pair.depth_n.shape))
    lo, hi = sorted((t1, t2))
    a = geometric_mask_count(ReprojectionPair(vr, pair.depth_r, vn, noisy, threshold=lo))
    b = geometric_mask_count(ReprojectionPair(vr, pair.depth_r, vn, noisy, threshold=hi))
    assert a <= b


def test_threshold_must_be_positive():
    with pytest.raises(ValueError):
        ReprojectionPair(None, torch.zeros(1, 1), None, torch.zeros(1, 1), threshold=0.0)


def test_nearest_view_tie_break():
    centers = {1: np.zeros(3), 2: np.array([1.0, 0, 0]), 3: np.array([-1.0, 0, 0]), 4: np.array([5.0, 0, 0])}
    assert nearest_view(1, [1, 2, 3, 4], centers) == 2
    assert nearest_view(4, [1, 2, 3, 4], centers) == 2
    assert nearest_view(1, [1], centers) is None
