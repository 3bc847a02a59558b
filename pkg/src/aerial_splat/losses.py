"""Training objectives: photometric, depth-normal consistency and two-view reprojection.

All functions take torch tensors and are differentiable with autograd. Depth
maps use NaN for invalid pixels; NaNs are masked with ``torch.where`` before
any arithmetic so they never reach the gradients.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import torch
import torch.nn.functional as F

SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_C1 = 0.01 ** 2
SSIM_C2 = 0.03 ** 2


@dataclass
class LossWeights:
    photo: float = 1.0
    normal: float = 0.05
    geo: float = 0.05


@dataclass
class LossReport:
    photometric: torch.Tensor
    l_n: torch.Tensor
    l_geo: torch.Tensor
    weights: LossWeights = field(default_factory=LossWeights)

    @property
    def total(self) -> torch.Tensor:
        w = self.weights
        return w.photo * self.photometric + w.normal * self.l_n + w.geo * self.l_geo

    def as_floats(self) -> dict:
        return {
            "photometric": float(self.photometric),
            "l_n": float(self.l_n),
            "l_geo": float(self.l_geo),
            "total": float(self.total),
        }


# ---------------------------------------------------------------------------
# photometric


def _gaussian_window(size: int, sigma: float, dtype) -> torch.Tensor:
    x = torch.arange(size, dtype=torch.float64) - (size - 1) / 2.0
    g = torch.exp(-(x ** 2) / (2 * sigma ** 2))
    g = g / g.sum()
    return (g[:, None] * g[None, :]).to(dtype)


def _to_nchw(img: torch.Tensor) -> torch.Tensor:
    if img.dim() == 2:
        return img[None, None]
    if img.dim() == 3:
        return img.permute(2, 0, 1)[None]
    raise ValueError(f"expected an HxW or HxWxC image, got shape {tuple(img.shape)}")


def ssim_terms(x: torch.Tensor, y: torch.Tensor, window: int = SSIM_WINDOW, sigma: float = SSIM_SIGMA):
    """Per-pixel SSIM components (luminance, contrast-structure, structure) as NCHW maps.

    The window is normalized and applied with zero padding, as in the usual
    splatting training code.
    """
    a, b = _to_nchw(x), _to_nchw(y)
    C = a.shape[1]
    w = _gaussian_window(window, sigma, a.dtype).expand(C, 1, window, window)
    pad = window // 2

    def filt(z):
        return F.conv2d(z, w, padding=pad, groups=C)

    mu_a, mu_b = filt(a), filt(b)
    var_a = filt(a * a) - mu_a ** 2
    var_b = filt(b * b) - mu_b ** 2
    cov = filt(a * b) - mu_a * mu_b
    lum = (2 * mu_a * mu_b + SSIM_C1) / (mu_a ** 2 + mu_b ** 2 + SSIM_C1)
    cs = (2 * cov + SSIM_C2) / (var_a + var_b + SSIM_C2)
    c3 = SSIM_C2 / 2
    std = torch.sqrt(var_a.clamp_min(0) * var_b.clamp_min(0))
    structure = (cov + c3) / (std + c3)
    return lum, cs, structure


def ssim(x: torch.Tensor, y: torch.Tensor, window: int = SSIM_WINDOW, sigma: float = SSIM_SIGMA) -> torch.Tensor:
    """Mean SSIM over pixels and channels."""
    if x.shape != y.shape:
        raise ValueError(f"image shapes differ: {tuple(x.shape)} vs {tuple(y.shape)}")
    lum, cs, _ = ssim_terms(x, y, window, sigma)
    return (lum * cs).mean()


def photometric_loss(rendered: torch.Tensor, target: torch.Tensor, lambda_dssim: float = 0.2) -> torch.Tensor:
    """(1 - lambda) * L1 + lambda * (1 - SSIM)."""
    if rendered.shape != target.shape:
        raise ValueError(f"image shapes differ: {tuple(rendered.shape)} vs {tuple(target.shape)}")
    l1 = (rendered - target).abs().mean()
    if lambda_dssim == 0:
        return l1
    return (1.0 - lambda_dssim) * l1 + lambda_dssim * (1.0 - ssim(rendered, target))


# ---------------------------------------------------------------------------
# depth-derived normals


def _fill(depth: torch.Tensor, valid: torch.Tensor | None = None):
    if valid is None:
        valid = torch.isfinite(depth)
    filled = torch.where(valid, depth, torch.ones_like(depth))
    return filled, valid


def backproject(depth: torch.Tensor, view) -> torch.Tensor:
    """Camera-frame points depth * K^-1 [u, v, 1] at pixel centers, (H, W, 3)."""
    H, W = depth.shape
    dt = depth.dtype
    u = (torch.arange(W, dtype=torch.float64) + 0.5 - view.cx) / view.fx
    v = (torch.arange(H, dtype=torch.float64) + 0.5 - view.cy) / view.fy
    vv, uu = torch.meshgrid(v.to(dt), u.to(dt), indexing="ij")
    return torch.stack([uu * depth, vv * depth, depth], dim=-1)


def normal_from_depth(depth: torch.Tensor, view, valid: torch.Tensor | None = None):
    """Camera-frame unit normals from central differences of back-projected points.

    Returns (normals (H, W, 3), valid (H, W)). A pixel is valid when it and its
    four neighbours have valid depth and the cross product is non-degenerate.
    Normals are flipped to face the camera.
    """
    filled, valid = _fill(depth, valid)
    H, W = filled.shape
    p = backproject(filled, view)
    gx = torch.zeros_like(p)
    gy = torch.zeros_like(p)
    gx[:, 1:-1] = 0.5 * (p[:, 2:] - p[:, :-2])
    gy[1:-1, :] = 0.5 * (p[2:, :] - p[:-2, :])
    n = torch.linalg.cross(gx, gy, dim=-1)
    norm2 = (n * n).sum(-1)

    ok = torch.zeros_like(valid)
    if H >= 3 and W >= 3:
        ok[1:-1, 1:-1] = (valid[1:-1, 1:-1] & valid[1:-1, 2:] & valid[1:-1, :-2]
                          & valid[2:, 1:-1] & valid[:-2, 1:-1])
    # reject near-parallel tangents (sine of the angle below 1e-6)
    tang = ((gx * gx).sum(-1) * (gy * gy).sum(-1)).detach()
    ok = ok & (norm2.detach() > 1e-12 * tang) & (tang > 0)
    safe = torch.where(ok, norm2, torch.ones_like(norm2))
    n = n / torch.sqrt(safe)[..., None]
    facing = torch.where((n * p).sum(-1) > 0, -torch.ones_like(norm2), torch.ones_like(norm2))
    n = n * facing[..., None]
    n = torch.where(ok[..., None], n, torch.zeros_like(n))
    return n, ok


def depth_normal_loss(bundle, view) -> torch.Tensor:
    """Mean over valid pixels of sum_i w_i (1 - n_i . N).

    With the per-Gaussian blend weights w_i this equals alpha - normal_acc . N.
    """
    N, ok = normal_from_depth(bundle.depth_filled, view, bundle.depth_valid)
    per_pixel = bundle.alpha - (bundle.normal_acc * N).sum(-1)
    count = int(ok.sum())
    if count == 0:
        return (bundle.alpha * 0.0).sum()
    return torch.where(ok, per_pixel, torch.zeros_like(per_pixel)).sum() / count


# ---------------------------------------------------------------------------
# two-view transfer


def _cam_tensors(view, dtype):
    K = torch.tensor([[view.fx, 0.0, view.cx], [0.0, view.fy, view.cy], [0.0, 0.0, 1.0]], dtype=dtype)
    R = torch.tensor(view.R.copy(), dtype=dtype)
    t = torch.tensor(view.t.copy(), dtype=dtype)
    return K, R, t


def project_to_neighbor(pixels: torch.Tensor, depth: torch.Tensor, view_r, view_n):
    """Transfer continuous pixel coordinates (..., 2) with depths (...) from view_r to view_n.

    Pixel coordinates are (u, v) with pixel (row i, col j) centered at
    (j + 0.5, i + 0.5). Returns (uv in view_n, camera depth in view_n, valid).
    Points at or behind the neighbour camera are invalid.
    """
    dt = depth.dtype
    _, Rr, tr = _cam_tensors(view_r, dt)
    _, Rn, tn = _cam_tensors(view_n, dt)
    x = (pixels[..., 0] - view_r.cx) / view_r.fx
    y = (pixels[..., 1] - view_r.cy) / view_r.fy
    Xc = torch.stack([x * depth, y * depth, depth], dim=-1)
    Xw = (Xc - tr) @ Rr  # R^T (Xc - t)
    Xn = Xw @ Rn.T + tn
    z = Xn[..., 2]
    valid = torch.isfinite(z) & (z > 0)
    zs = torch.where(valid, z, torch.ones_like(z))
    u = view_n.fx * Xn[..., 0] / zs + view_n.cx
    v = view_n.fy * Xn[..., 1] / zs + view_n.cy
    return torch.stack([u, v], dim=-1), z, valid


reproject = project_to_neighbor


def sample_depth(depth: torch.Tensor, valid: torch.Tensor, uv: torch.Tensor):
    """Bilinear depth lookup at continuous pixel coordinates; invalid if any tap is invalid or out of bounds."""
    H, W = depth.shape
    fx = uv[..., 0] - 0.5
    fy = uv[..., 1] - 0.5
    inb = torch.isfinite(fx) & torch.isfinite(fy) & (fx >= 0) & (fy >= 0) & (fx <= W - 1) & (fy <= H - 1)
    fxs = torch.where(inb, fx, torch.zeros_like(fx))
    fys = torch.where(inb, fy, torch.zeros_like(fy))
    x0 = torch.clamp(torch.floor(fxs.detach()).long(), 0, max(W - 2, 0))
    y0 = torch.clamp(torch.floor(fys.detach()).long(), 0, max(H - 2, 0))
    x1 = torch.clamp(x0 + 1, max=W - 1)
    y1 = torch.clamp(y0 + 1, max=H - 1)
    ax = fxs - x0.to(fxs.dtype)
    ay = fys - y0.to(fys.dtype)
    d00, d01 = depth[y0, x0], depth[y0, x1]
    d10, d11 = depth[y1, x0], depth[y1, x1]
    ok = inb & valid[y0, x0] & valid[y0, x1] & valid[y1, x0] & valid[y1, x1]
    val = (1 - ay) * ((1 - ax) * d00 + ax * d01) + ay * ((1 - ax) * d10 + ax * d11)
    return torch.where(ok, val, torch.ones_like(val)), ok


@dataclass
class ReprojectionPair:
    view_r: object
    depth_r: torch.Tensor
    view_n: object
    depth_n: torch.Tensor
    threshold: float = 1.0
    valid_r: torch.Tensor | None = None
    valid_n: torch.Tensor | None = None

    def __post_init__(self):
        if not self.threshold > 0:
            raise ValueError("threshold must be positive")


def reprojection_distances(pair: ReprojectionPair):
    """Per-pixel |P - P_r'| in reference pixels and the validity of the round trip."""
    Dr, vr = _fill(pair.depth_r, pair.valid_r)
    Dn, vn = _fill(pair.depth_n, pair.valid_n)
    H, W = Dr.shape
    dt = Dr.dtype
    jj, ii = torch.meshgrid(torch.arange(W, dtype=dt) + 0.5, torch.arange(H, dtype=dt) + 0.5, indexing="xy")
    P = torch.stack([jj, ii], dim=-1)
    Pn, _, ok1 = project_to_neighbor(P, Dr, pair.view_r, pair.view_n)
    dn, ok2 = sample_depth(Dn, vn, Pn)
    Pr, _, ok3 = reproject(Pn, dn, pair.view_n, pair.view_r)
    ok = vr & ok1 & ok2 & ok3
    diff = torch.where(ok[..., None], Pr - P, torch.zeros_like(P))
    d2 = (diff * diff).sum(-1)
    pos = d2 > 0
    dist = torch.sqrt(torch.where(pos, d2, torch.ones_like(d2)))
    dist = torch.where(pos, dist, torch.zeros_like(dist))
    return dist, ok


def multiview_geometric_loss(pair: ReprojectionPair) -> torch.Tensor:
    """Average reprojection distance over pixels whose distance lies in (0, T]."""
    dist, ok = reprojection_distances(pair)
    mask = ok & (dist.detach() > 0) & (dist.detach() <= pair.threshold)
    count = int(mask.sum())
    if count == 0:
        return (dist * 0.0).sum()
    return torch.where(mask, dist, torch.zeros_like(dist)).sum() / count


def geometric_mask_count(pair: ReprojectionPair) -> int:
    dist, ok = reprojection_distances(pair)
    return int((ok & (dist > 0) & (dist <= pair.threshold)).sum())


def nearest_view(view_id: int, candidates, centers: dict) -> int | None:
    """Candidate view with the nearest camera center (ties by lower id); None if no other view."""
    c = centers[view_id]
    best, best_d = None, math.inf
    for v in sorted(candidates):
        if v == view_id:
            continue
        d = float(((centers[v] - c) ** 2).sum())
        if d < best_d:
            best, best_d = v, d
    return best
