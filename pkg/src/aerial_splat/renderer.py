"""Ray-space Gaussian splatting: exact ray/Gaussian intersections and alpha blending.

Each Gaussian contributes to a ray at the ray parameter where its density
peaks. Rays are expressed with a direction whose camera-frame z component is
1, so the ray parameter of a pixel ray is the camera depth.

The image renderer works in two passes. A no-grad pass bins Gaussians into
screen tiles, evaluates every candidate for every pixel, and builds a sorted,
compacted per-pixel contribution list (floor, near plane and early
termination applied). A second, differentiable pass re-evaluates only the
listed contributions and blends them.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch

from . import _kernels
from .gaussian_model import GaussianPrimitive, GaussianScene, eval_sh, quat_to_rotmat

ALPHA_MAX = 0.99
ALPHA_MIN = 1.0 / 255.0
TRANSMITTANCE_MIN = 1e-4
NEAR_FRACTION = 1e-4
TILE = 4


@dataclass(frozen=True)
class Ray:
    origin: np.ndarray
    direction: np.ndarray
    pixel: tuple = (0, 0)

    def __post_init__(self):
        object.__setattr__(self, "origin", np.asarray(self.origin, dtype=np.float64).reshape(3))
        object.__setattr__(self, "direction", np.asarray(self.direction, dtype=np.float64).reshape(3))
        if not np.linalg.norm(self.direction) > 0:
            raise ValueError("ray direction must be non-zero")


# ---------------------------------------------------------------------------
# single-Gaussian geometry (numpy, float64)


def to_local(g: GaussianPrimitive, o, r):
    """Map a ray into the Gaussian's unit-sphere frame, keeping the ray parameter."""
    M = np.diag(1.0 / g.scale) @ g.rotation_matrix.T
    o_g = M @ (np.asarray(o, dtype=np.float64) - g.mean)
    r_g = M @ np.asarray(r, dtype=np.float64)
    return o_g, r_g


def ray_gaussian_intersect(g: GaussianPrimitive, ray: Ray, near: float = 0.0) -> float:
    """Ray parameter of peak density along the ray; NaN if at or before ``near``."""
    o_g, r_g = to_local(g, ray.origin, ray.direction)
    t = -float(o_g @ r_g) / float(r_g @ r_g)
    return t if t > near else math.nan


def eval_alpha_at(g: GaussianPrimitive, x) -> float:
    d = np.asarray(x, dtype=np.float64) - g.mean
    Rm = g.rotation_matrix
    y = (Rm.T @ d) / g.scale
    return g.opacity * math.exp(-0.5 * float(y @ y))


def gaussian_normal(g: GaussianPrimitive, ray: Ray, t_max: float | None = None) -> np.ndarray:
    """Normal of the plane on which the ray meets the peak, facing the ray origin.

    ``t_max`` is accepted for symmetry with the other ray helpers; the plane
    orientation does not depend on it.
    """
    _, r_g = to_local(g, ray.origin, ray.direction)
    n = g.rotation_matrix @ ((r_g / np.linalg.norm(r_g)) / g.scale)
    n /= np.linalg.norm(n)
    if n @ ray.direction > 0:
        n = -n
    return n


# ---------------------------------------------------------------------------
# bundles


@dataclass
class RenderBundle:
    """Per-view render outputs (torch tensors; depth is NaN where invalid).

    ``normal`` is in the camera frame. ``normal_acc`` is the unnormalized
    weighted sum of per-Gaussian normals and ``depth_valid`` flags pixels whose
    accumulated weight crossed 0.5; both feed the geometric losses.
    """

    color: torch.Tensor
    depth: torch.Tensor
    normal: torch.Tensor
    alpha: torch.Tensor
    normal_acc: torch.Tensor
    depth_valid: torch.Tensor
    depth_filled: torch.Tensor
    contributions: int = 0
    signature: tuple = ()  # (per-pixel counts, flat ids, crossing slot); discrete state of the render

    def numpy(self) -> dict:
        return {
            "color": self.color.detach().cpu().double().numpy(),
            "depth": self.depth.detach().cpu().double().numpy(),
            "normal": self.normal.detach().cpu().double().numpy(),
            "alpha": self.alpha.detach().cpu().double().numpy(),
        }


@dataclass
class RayResult:
    color: np.ndarray
    depth: float
    normal: np.ndarray
    alpha: float
    crossing_index: int  # rank of the median-depth Gaussian among all hits in front of the near plane, -1 if none
    crossing_id: int = -1  # Gaussian index of that hit


# ---------------------------------------------------------------------------
# per-Gaussian tables


def _gaussian_table(scene: GaussianScene, R_frame: torch.Tensor, t_frame: torch.Tensor, eye: torch.Tensor):
    """Per-Gaussian quantities in a frame x_f = R_frame x + t_frame.

    Returns (M, o_g, sigma, color) where M maps frame directions into the
    Gaussian's unit-sphere coordinates and o_g is the frame origin there.
    """
    Rg = quat_to_rotmat(scene.quats)
    inv_s = torch.exp(-scene.log_scales)
    mu_f = scene.means @ R_frame.T + t_frame
    # local-from-frame: S^-1 Rg^T R_frame^T
    M = inv_s[:, :, None] * (Rg.transpose(1, 2) @ R_frame.T)
    o_g = -(M @ mu_f[:, :, None])[..., 0]
    sigma = torch.sigmoid(scene.opacity_logits)
    dirs = scene.means - eye
    dirs = dirs / dirs.norm(dim=-1, keepdim=True).clamp_min(1e-12)
    deg = min(scene.sh_degree, scene.max_sh_degree)
    color = torch.clamp(eval_sh(deg, scene.sh, dirs) + 0.5, min=0.0)
    return M, o_g, sigma, color


def _local_terms(M, o, d):
    """Component-wise ray evaluation in a Gaussian's unit-sphere frame.

    M: 9 broadcastable tensors (row-major local-from-frame matrix), o: 3
    tensors (frame origin in local coordinates), d: 3 tensors (ray direction).
    Returns (t, d2, r_g) with d2 the squared local distance of the ray to the mean.
    """
    dx, dy, dz = d
    rx = M[0] * dx + M[1] * dy + M[2] * dz
    ry = M[3] * dx + M[4] * dy + M[5] * dz
    rz = M[6] * dx + M[7] * dy + M[8] * dz
    ox, oy, oz = o
    rr = rx * rx + ry * ry + rz * rz
    t = -(ox * rx + oy * ry + oz * rz) / rr
    # distance via the cross product avoids cancellation for thin Gaussians
    cx = oy * rz - oz * ry
    cy = oz * rx - ox * rz
    cz = ox * ry - oy * rx
    d2 = (cx * cx + cy * cy + cz * cz) / rr
    return t, d2, (rx, ry, rz)


def _alpha(sigma, d2):
    return torch.clamp(sigma * torch.exp(-0.5 * d2), max=ALPHA_MAX)


# ---------------------------------------------------------------------------
# tile binning and list construction (no grad)


def _bin_tiles(mu_f, radius, K, H, W, near, tile):
    """Conservative screen bounding boxes -> padded (n_tiles, g_max) candidate table."""
    fx, fy, cx, cy = K
    ntx, nty = -(-W // tile), -(-H // tile)
    n = mu_f.shape[0]
    keep = radius > 0
    z = mu_f[:, 2]
    keep &= (z + radius) > near
    full = keep & ((z - radius) <= near)

    umin = np.zeros(n)
    umax = np.full(n, W - 1.0)
    vmin = np.zeros(n)
    vmax = np.full(n, H - 1.0)
    part = keep & ~full
    if part.any():
        c = mu_f[part]
        r = radius[part][:, None]
        sx = np.array([-1, 1, -1, 1, -1, 1, -1, 1])
        sy = np.array([-1, -1, 1, 1, -1, -1, 1, 1])
        sz = np.array([-1, -1, -1, -1, 1, 1, 1, 1])
        X = c[:, 0:1] + sx * r
        Y = c[:, 1:2] + sy * r
        Z = c[:, 2:3] + sz * r
        u = fx * X / Z + cx
        v = fy * Y / Z + cy
        # pixel j has its center at j + 0.5
        umin[part] = np.ceil(u.min(1) - 0.5)
        umax[part] = np.floor(u.max(1) - 0.5)
        vmin[part] = np.ceil(v.min(1) - 0.5)
        vmax[part] = np.floor(v.max(1) - 0.5)
    keep &= (umax >= umin) & (vmax >= vmin) & (umax >= 0) & (vmax >= 0) & (umin <= W - 1) & (vmin <= H - 1)
    umin = np.clip(umin, 0, W - 1)
    vmin = np.clip(vmin, 0, H - 1)
    umax = np.clip(umax, 0, W - 1)
    vmax = np.clip(vmax, 0, H - 1)

    gid = np.nonzero(keep)[0]
    tx0 = (umin[gid] // tile).astype(np.int64)
    tx1 = (umax[gid] // tile).astype(np.int64)
    ty0 = (vmin[gid] // tile).astype(np.int64)
    ty1 = (vmax[gid] // tile).astype(np.int64)
    nx = tx1 - tx0 + 1
    counts = nx * (ty1 - ty0 + 1)
    total = int(counts.sum())
    if total == 0:
        return np.zeros((ntx * nty, 0), dtype=np.int64), ntx, nty
    owner = np.repeat(np.arange(gid.size), counts)
    start = np.cumsum(counts) - counts
    k = np.arange(total) - start[owner]
    tx = tx0[owner] + k % nx[owner]
    ty = ty0[owner] + k // nx[owner]
    tile_id = ty * ntx + tx
    order = np.argsort(tile_id, kind="stable")
    tile_id = tile_id[order]
    g_sorted = gid[owner[order]]
    per_tile = np.bincount(tile_id, minlength=ntx * nty)
    gmax = int(per_tile.max())
    tstart = np.cumsum(per_tile) - per_tile
    slot = np.arange(total) - tstart[tile_id]
    table = np.full((ntx * nty, gmax), -1, dtype=np.int64)
    table[tile_id, slot] = g_sorted
    return table, ntx, nty


def _build_lists(t, alpha, cand, near):
    """Sort candidates by t, drop floor/near entries and everything after termination.

    t, alpha, cand: (P, C). Returns (idx (P, K), n_incl (P,)) with idx padded by -1.
    """
    valid = (cand >= 0) & (alpha >= ALPHA_MIN) & (t > near) & torch.isfinite(t)
    key = torch.where(valid, t, torch.full_like(t, math.inf))
    key, order = torch.sort(key, dim=1, stable=True)
    a = torch.gather(torch.where(valid, alpha, torch.zeros_like(alpha)), 1, order)
    ids = torch.gather(cand, 1, order)
    n_valid = valid.sum(1)
    T = torch.cumprod(1.0 - a, dim=1)
    T_excl = torch.cat([torch.ones_like(T[:, :1]), T[:, :-1]], dim=1)
    pos = torch.arange(a.shape[1], device=a.device)[None, :]
    incl = (pos < n_valid[:, None]) & (T_excl >= TRANSMITTANCE_MIN)
    n_incl = incl.sum(1)
    K = max(int(n_incl.max()) if n_incl.numel() else 0, 1)
    ids = ids[:, :K]
    ids = torch.where(pos[:, :K] < n_incl[:, None], ids, torch.full_like(ids, -1))
    return ids, n_incl


def _blend(t, alpha, color, normal, bg):
    """Front-to-back compositing over sorted lists (P, K)."""
    one_minus = 1.0 - alpha
    T = torch.cumprod(one_minus, dim=1)
    T_excl = torch.cat([torch.ones_like(T[:, :1]), T[:, :-1]], dim=1)
    w = alpha * T_excl
    acc = w.sum(1)
    rgb = (w[..., None] * color).sum(1) + (1.0 - acc)[:, None] * bg
    n_acc = (w[..., None] * normal).sum(1)
    with torch.no_grad():
        cum = torch.cumsum(w, dim=1)
        crossed = cum > 0.5
        valid = crossed.any(1)
        first = torch.argmax(crossed.to(torch.int8), dim=1)
    depth = torch.gather(t, 1, first[:, None])[:, 0]
    return rgb, acc, n_acc, depth, valid, first, w


def _contribution_terms(table, ids, rays):
    """Differentiable per-(ray, slot) t, alpha, color and ray-facing normal.

    ``table`` is the (G, 16) per-Gaussian table [M (9), o_g (3), sigma, rgb (3)].
    """
    present = ids >= 0
    g = table[ids.clamp_min(0)]  # (P, K, 16)
    cols = g.unbind(-1)
    M, o, sigma = cols[0:9], cols[9:12], cols[12]
    d = tuple(rays[:, i:i + 1] for i in range(3))
    t, d2, (rx, ry, rz) = _local_terms(M, o, d)
    alpha = torch.where(present, _alpha(sigma, d2), torch.zeros_like(d2))
    t = torch.where(present, t, torch.zeros_like(t))
    # plane normal: M^T r_g, flipped to face the ray origin
    nx = M[0] * rx + M[3] * ry + M[6] * rz
    ny = M[1] * rx + M[4] * ry + M[7] * rz
    nz = M[2] * rx + M[5] * ry + M[8] * rz
    inv = torch.rsqrt((nx * nx + ny * ny + nz * nz).clamp_min(1e-60))
    n = torch.stack([-nx * inv, -ny * inv, -nz * inv], dim=-1)
    color = g[..., 13:16]
    return t, alpha, color, n


def _table(M, o_g, sigma, color):
    return torch.cat([M.reshape(-1, 9), o_g, sigma[:, None], color], dim=1)


def _candidate_terms(gathered, rays):
    """No-grad t and alpha for every (ray, candidate) pair.

    gathered: (B, G, 16) table rows per batch; rays: (B, P, 3). Returns (B, P, G).
    """
    cols = gathered[:, None].unbind(-1)
    d = tuple(rays[..., i:i + 1] for i in range(3))
    t, d2, _ = _local_terms(cols[0:9], cols[9:12], d)
    return t, _alpha(cols[12], d2)


def _near_plane(scene_extent):
    return NEAR_FRACTION * scene_extent


# ---------------------------------------------------------------------------
# public renderers


def render_rays(scene: GaussianScene, origin, directions, scene_extent: float = 1.0):
    """Render rays sharing one origin (world frame); returns per-ray tensors."""
    dtype = scene.dtype
    o = torch.as_tensor(np.asarray(origin, dtype=np.float64), dtype=dtype)
    d = torch.as_tensor(np.asarray(directions, dtype=np.float64), dtype=dtype).reshape(-1, 3)
    P = d.shape[0]
    bg = torch.tensor(scene.background, dtype=dtype)
    near = _near_plane(scene_extent)
    if len(scene) == 0:
        nan = torch.full((P,), math.nan, dtype=dtype)
        return dict(color=bg.expand(P, 3).clone(), depth=nan, normal=torch.zeros(P, 3, dtype=dtype),
                    alpha=torch.zeros(P, dtype=dtype), crossing=torch.full((P,), -1),
                    crossing_id=torch.full((P,), -1), ids=torch.full((P, 1), -1))
    I = torch.eye(3, dtype=dtype)
    table = _table(*_gaussian_table(scene, I, -o, o))
    with torch.no_grad():
        cand = torch.arange(len(scene))[None, :].expand(P, -1)
        t_all, alpha = _candidate_terms(table.detach()[None], d[None])
        t_all = t_all[0]
        ids, _ = _build_lists(t_all, alpha[0], cand, near)
    t, alpha, col, n = _contribution_terms(table, ids, d)
    rgb, acc, n_acc, depth, valid, first, _ = _blend(t, alpha, col, n, bg)
    depth = torch.where(valid, depth, torch.full_like(depth, math.nan))
    nn_ = n_acc / n_acc.norm(dim=-1, keepdim=True).clamp_min(1e-30)
    with torch.no_grad():
        g_star = torch.gather(ids, 1, first[:, None])[:, 0]
        t_star = torch.gather(t_all, 1, g_star.clamp_min(0)[:, None])
        hit = (t_all > near) & torch.isfinite(t_all)
        before = (t_all < t_star) | ((t_all == t_star) & (cand < g_star[:, None]))
        rank = (hit & before).sum(1)
        crossing = torch.where(valid, rank, torch.full_like(rank, -1))
        crossing_id = torch.where(valid, g_star, torch.full_like(g_star, -1))
    return dict(color=rgb, depth=depth, normal=nn_, alpha=acc, crossing=crossing, crossing_id=crossing_id, ids=ids)


def render_ray(scene: GaussianScene, ray: Ray, scene_extent: float = 1.0) -> RayResult:
    out = render_rays(scene, ray.origin, ray.direction[None, :], scene_extent)
    return RayResult(
        color=out["color"][0].detach().double().numpy(),
        depth=float(out["depth"][0]),
        normal=out["normal"][0].detach().double().numpy(),
        alpha=float(out["alpha"][0]),
        crossing_index=int(out["crossing"][0]),
        crossing_id=int(out["crossing_id"][0]),
    )


def _camera_tensors(view, dtype):
    R = torch.tensor(np.array(view.R), dtype=dtype)
    t = torch.tensor(np.array(view.t), dtype=dtype)
    eye = torch.tensor(np.array(view.center), dtype=dtype)
    return R, t, eye


def _pixel_rays(view, H_pad, W_pad, dtype):
    u = (torch.arange(W_pad, dtype=torch.float64) + 0.5 - view.cx) / view.fx
    v = (torch.arange(H_pad, dtype=torch.float64) + 0.5 - view.cy) / view.fy
    vv, uu = torch.meshgrid(v, u, indexing="ij")
    return torch.stack([uu, vv, torch.ones_like(uu)], dim=-1).to(dtype)


class _FusedBlend(torch.autograd.Function):
    """Differentiable wrapper around the fused numba kernels (float64 inside)."""

    @staticmethod
    def forward(ctx, table, cand, ncand, geom, bg):
        H, W, tile, ntx, fx, fy, cx, cy, near = geom
        tab = table.detach().double().contiguous().numpy()
        bg_np = np.asarray(bg, dtype=np.float64)
        rgb, acc, nacc, depth, first, start, count, ids = _kernels.fused_forward(
            tab, cand, ncand, H, W, tile, ntx, fx, fy, cx, cy, near, bg_np)
        ctx.saved = (tab, start, count, ids, first, geom, bg_np)
        dt = table.dtype
        valid = torch.from_numpy(first >= 0)
        counts = torch.from_numpy(count)
        flat = torch.from_numpy(ids.astype(np.int64))
        first_t = torch.from_numpy(first)
        ctx.mark_non_differentiable(valid, counts, flat, first_t)
        return (torch.from_numpy(rgb).to(dt), torch.from_numpy(acc).to(dt), torch.from_numpy(nacc).to(dt),
                torch.from_numpy(depth).to(dt), valid, counts, flat, first_t)

    @staticmethod
    def backward(ctx, g_rgb, g_acc, g_nacc, g_depth, *_unused):
        tab, start, count, ids, first, geom, bg_np = ctx.saved
        H, W, tile, ntx, fx, fy, cx, cy, near = geom

        def arr(g, shape):
            if g is None:
                return np.zeros(shape)
            return np.ascontiguousarray(torch.nan_to_num(g.detach().double(), nan=0.0).numpy())

        P = H * W
        gtab = _kernels.fused_backward(tab, start, count, ids, first, H, W, fx, fy, cx, cy, bg_np,
                                       arr(g_rgb, (P, 3)), arr(g_acc, (P,)), arr(g_nacc, (P, 3)),
                                       arr(g_depth, (P,)))
        dt = g_rgb.dtype if g_rgb is not None else torch.float64
        return torch.from_numpy(gtab).to(dt), None, None, None, None


def _tile_candidates(scene, sigma, R, tcam, view, near, tile):
    sig = sigma.detach()
    s_max = torch.exp(scene.log_scales.detach()).max(1).values
    ratio = (sig / ALPHA_MIN).clamp_min(1.0)
    radius = torch.where(sig >= ALPHA_MIN, s_max * torch.sqrt(2.0 * torch.log(ratio)), torch.zeros_like(s_max))
    mu_f = scene.means.detach() @ R.T + tcam
    table_idx, _, _ = _bin_tiles(mu_f.double().numpy(), radius.double().numpy(),
                                 (view.fx, view.fy, view.cx, view.cy), view.height, view.width, near, tile)
    return table_idx


def render_view(scene: GaussianScene, view, scene_extent: float = 1.0, tile: int = TILE,
                backend: str = "fused", chunk_entries: int = 4_000_000) -> RenderBundle:
    """Render color, depth, normal and alpha maps for a pinhole view.

    Deterministic for a given scene and view. Gradients flow to every scene
    parameter tensor that requires grad. ``backend="torch"`` selects the
    pure-autograd implementation, which is slower but shares no code with
    the fused kernels.
    """
    dtype = scene.dtype
    H, W = view.height, view.width
    bg = torch.tensor(scene.background, dtype=dtype)
    near = _near_plane(scene_extent)
    ntx, nty = -(-W // tile), -(-H // tile)
    if len(scene) == 0:
        return _empty_bundle(H, W, bg, dtype)

    R, tcam, eye = _camera_tensors(view, dtype)
    M, o_g, sigma, color = _gaussian_table(scene, R, tcam, eye)
    table = _table(M, o_g, sigma, color)
    with torch.no_grad():
        table_idx = _tile_candidates(scene, sigma, R, tcam, view, near, tile)
    if table_idx.shape[1] == 0:
        return _empty_bundle(H, W, bg, dtype)

    if backend == "fused":
        ncand = (table_idx >= 0).sum(1)
        geom = (H, W, tile, ntx, float(view.fx), float(view.fy), float(view.cx), float(view.cy), float(near))
        rgb, acc, n_acc, depth, valid, counts, flat, first = _FusedBlend.apply(
            table, table_idx, ncand, geom, scene.background)
        contributions = int(counts.sum())
        signature = (counts.numpy(), flat.numpy(), first.numpy())
    elif backend == "torch":
        ids = _torch_lists(table, table_idx, view, near, tile, dtype, chunk_entries)
        rays = _pixel_rays(view, H, W, dtype).reshape(-1, 3)
        t, alpha, col, n = _contribution_terms(table, ids, rays)
        rgb, acc, n_acc, depth, valid, first, _ = _blend(t, alpha, col, n, bg)
        contributions = int((ids >= 0).sum())
        present = ids >= 0
        signature = (present.sum(1).numpy(), ids[present].numpy(), torch.where(valid, first, -1).numpy())
    else:
        raise ValueError(f"unknown backend {backend!r}")

    filled = torch.where(valid, depth, torch.ones_like(depth))
    depth_out = torch.where(valid, depth, torch.full_like(depth, math.nan))
    n_norm = n_acc.norm(dim=-1, keepdim=True)
    normal = torch.where(n_norm > 1e-12, n_acc / n_norm.clamp_min(1e-12), torch.zeros_like(n_acc))
    return RenderBundle(
        color=rgb.reshape(H, W, 3),
        depth=depth_out.reshape(H, W),
        normal=normal.reshape(H, W, 3),
        alpha=acc.reshape(H, W),
        normal_acc=n_acc.reshape(H, W, 3),
        depth_valid=valid.reshape(H, W),
        depth_filled=filled.reshape(H, W),
        contributions=contributions,
        signature=signature,
    )


def _torch_lists(table, table_idx, view, near, tile, dtype, chunk_entries):
    """Per-pixel sorted contribution lists (P, K) in image order, built with torch."""
    H, W = view.height, view.width
    ntx, nty = -(-W // tile), -(-H // tile)
    Hp, Wp = nty * tile, ntx * tile
    with torch.no_grad():
        rays_img = _pixel_rays(view, Hp, Wp, dtype)
        table_t = torch.from_numpy(table_idx)
        # (nty, tile, ntx, tile, 3) -> (n_tiles, tile*tile, 3)
        tile_rays = rays_img.reshape(nty, tile, ntx, tile, 3).permute(0, 2, 1, 3, 4).reshape(nty * ntx, tile * tile, 3)
        tab = table.detach()
        n_tiles = table_idx.shape[0]
        per_tile = tile * tile * table_idx.shape[1]
        step = max(1, chunk_entries // max(per_tile, 1))
        id_chunks = []
        for s in range(0, n_tiles, step):
            cand = table_t[s:s + step]  # (c, g)
            c, g = cand.shape
            t, alpha = _candidate_terms(tab[cand.clamp_min(0)], tile_rays[s:s + step])
            cand_px = cand[:, None, :].expand(c, tile * tile, g).reshape(-1, g)
            ids, _ = _build_lists(t.reshape(-1, g), alpha.reshape(-1, g), cand_px, near)
            id_chunks.append(ids)
        K = max(x.shape[1] for x in id_chunks)
        ids = torch.cat([torch.nn.functional.pad(x, (0, K - x.shape[1]), value=-1) for x in id_chunks], dim=0)
        # tile-major pixel order back to image order
        pix = torch.arange(Hp * Wp).reshape(nty, tile, ntx, tile).permute(0, 2, 1, 3).reshape(-1)
        order = torch.empty_like(pix)
        order[pix] = torch.arange(pix.numel())
        ids = ids[order].reshape(Hp, Wp, K)[:H, :W].reshape(H * W, K)
        K = max(int((ids >= 0).sum(1).max()), 1)
        return ids[:, :K]


def _empty_bundle(H, W, bg, dtype) -> RenderBundle:
    return RenderBundle(
        color=bg.expand(H, W, 3).clone(),
        depth=torch.full((H, W), math.nan, dtype=dtype),
        normal=torch.zeros(H, W, 3, dtype=dtype),
        alpha=torch.zeros(H, W, dtype=dtype),
        normal_acc=torch.zeros(H, W, 3, dtype=dtype),
        depth_valid=torch.zeros(H, W, dtype=torch.bool),
        depth_filled=torch.ones(H, W, dtype=dtype),
    )
