"""TSDF fusion of depth maps and marching-cubes mesh extraction."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from skimage import measure

from .scene_io import CameraView


@dataclass
class TriangleMesh:
    vertices: np.ndarray = field(default_factory=lambda: np.zeros((0, 3)))
    faces: np.ndarray = field(default_factory=lambda: np.zeros((0, 3), dtype=np.int64))
    normals: np.ndarray | None = None

    def __len__(self) -> int:
        return int(self.faces.shape[0])

    def face_areas(self) -> np.ndarray:
        if len(self) == 0:
            return np.zeros(0)
        v = self.vertices[self.faces]
        return 0.5 * np.linalg.norm(np.cross(v[:, 1] - v[:, 0], v[:, 2] - v[:, 0]), axis=1)

    def sample_points(self, n: int, seed: int = 0) -> np.ndarray:
        """Area-weighted uniform samples on the surface."""
        if len(self) == 0 or n <= 0:
            return np.zeros((0, 3))
        rng = np.random.default_rng(seed)
        a = self.face_areas()
        f = rng.choice(len(self), size=n, p=a / a.sum())
        r1, r2 = rng.random(n), rng.random(n)
        s = np.sqrt(r1)
        v = self.vertices[self.faces[f]]
        return (1 - s)[:, None] * v[:, 0] + (s * (1 - r2))[:, None] * v[:, 1] + (s * r2)[:, None] * v[:, 2]


@dataclass
class TsdfVolume:
    """Voxel grid of normalized truncated signed distances (positive in front of surfaces)."""

    origin: np.ndarray
    voxel_size: float
    dims: tuple[int, int, int]
    truncation: float
    tsdf: np.ndarray = None
    weight: np.ndarray = None

    def __post_init__(self):
        self.origin = np.asarray(self.origin, dtype=np.float64).reshape(3)
        self.dims = tuple(int(d) for d in self.dims)
        if self.voxel_size <= 0 or min(self.dims) < 1:
            raise ValueError("voxel_size must be positive and dims >= 1")
        if self.truncation < 2 * self.voxel_size:
            raise ValueError("truncation must be at least twice the voxel size")
        if self.tsdf is None:
            self.tsdf = np.ones(self.dims, dtype=np.float64)
        if self.weight is None:
            self.weight = np.zeros(self.dims, dtype=np.float64)

    @classmethod
    def from_bounds(cls, lo, hi, voxel_size: float, truncation: float | None = None) -> "TsdfVolume":
        lo = np.asarray(lo, dtype=np.float64)
        hi = np.asarray(hi, dtype=np.float64)
        dims = np.maximum(np.ceil((hi - lo) / voxel_size).astype(int) + 1, 1)
        trunc = 4.0 * voxel_size if truncation is None else truncation
        return cls(origin=lo, voxel_size=voxel_size, dims=tuple(dims), truncation=trunc)

    def copy(self) -> "TsdfVolume":
        return TsdfVolume(self.origin.copy(), self.voxel_size, self.dims, self.truncation,
                          self.tsdf.copy(), self.weight.copy())

    @property
    def bounds(self) -> tuple[np.ndarray, np.ndarray]:
        return self.origin, self.origin + (np.array(self.dims) - 1) * self.voxel_size

    def voxel_centers(self, ix: slice = slice(None)) -> np.ndarray:
        xs = self.origin[0] + np.arange(self.dims[0])[ix] * self.voxel_size
        ys = self.origin[1] + np.arange(self.dims[1]) * self.voxel_size
        zs = self.origin[2] + np.arange(self.dims[2]) * self.voxel_size
        X, Y, Z = np.meshgrid(xs, ys, zs, indexing="ij")
        return np.stack([X, Y, Z], axis=-1)

    def sample(self, pts: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Trilinear tsdf at world points; second output flags samples whose 8 taps all have weight > 0."""
        g = (np.asarray(pts, dtype=np.float64) - self.origin) / self.voxel_size
        dims = np.array(self.dims)
        i0 = np.floor(g).astype(np.int64)
        inside = np.all((i0 >= 0) & (i0 < dims - 1), axis=-1)
        i0 = np.clip(i0, 0, np.maximum(dims - 2, 0))
        f = g - i0
        val = np.zeros(g.shape[:-1])
        ok = inside.copy()
        for dx in (0, 1):
            for dy in (0, 1):
                for dz in (0, 1):
                    w = ((f[..., 0] if dx else 1 - f[..., 0]) * (f[..., 1] if dy else 1 - f[..., 1])
                         * (f[..., 2] if dz else 1 - f[..., 2]))
                    ix = np.minimum(i0[..., 0] + dx, dims[0] - 1)
                    iy = np.minimum(i0[..., 1] + dy, dims[1] - 1)
                    iz = np.minimum(i0[..., 2] + dz, dims[2] - 1)
                    val += w * self.tsdf[ix, iy, iz]
                    ok &= self.weight[ix, iy, iz] > 0
        return val, ok


def default_voxel_size(scene_extent: float) -> float:
    return scene_extent / 512.0


def integrate_depth(volume: TsdfVolume, depth: np.ndarray, view: CameraView, slab: int = 16) -> TsdfVolume:
    """Fuse one camera-depth map (NaN = invalid) into ``volume`` in place and return it.

    Each voxel projects to the pixel containing it; sdf = depth - voxel camera
    depth. Voxels with sdf <= -truncation are left untouched; the rest receive a
    weight-1 running average of clamp(sdf / truncation, -1, 1).
    """
    depth = np.asarray(depth, dtype=np.float64)
    H, W = depth.shape
    if (H, W) != (view.height, view.width):
        raise ValueError("depth map size does not match the view")
    if not np.isfinite(depth).any():
        return volume
    R, t = np.asarray(view.R), np.asarray(view.t)
    tr = volume.truncation
    for x0 in range(0, volume.dims[0], slab):
        sl = slice(x0, min(x0 + slab, volume.dims[0]))
        P = volume.voxel_centers(sl)
        Xc = P @ R.T + t
        z = Xc[..., 2]
        front = z > 0
        zs = np.where(front, z, 1.0)
        u = view.fx * Xc[..., 0] / zs + view.cx
        v = view.fy * Xc[..., 1] / zs + view.cy
        inb = front & (u >= 0) & (u < W) & (v >= 0) & (v < H)
        j = np.clip(np.floor(np.where(inb, u, 0)).astype(np.int64), 0, W - 1)
        i = np.clip(np.floor(np.where(inb, v, 0)).astype(np.int64), 0, H - 1)
        d = depth[i, j]
        sdf = d - z
        upd = inb & np.isfinite(d) & (sdf > -tr)
        if not upd.any():
            continue
        obs = np.clip(sdf / tr, -1.0, 1.0)
        T = volume.tsdf[sl]
        Wt = volume.weight[sl]
        new_w = Wt + 1.0
        T[upd] = (T[upd] * Wt[upd] + obs[upd]) / new_w[upd]
        Wt[upd] = new_w[upd]
    return volume


def extract_mesh(volume: TsdfVolume) -> TriangleMesh:
    """Marching cubes at tsdf = 0 over cubes whose eight corners are all observed (weight > 0)."""
    mask = volume.weight > 0
    if min(volume.dims) < 2 or not mask.any():
        return TriangleMesh()
    obs = volume.tsdf[mask]
    if obs.min() > 0 or obs.max() < 0:
        return TriangleMesh()
    # a cube counts only when all eight corners are observed
    nx, ny, nz = (d - 1 for d in volume.dims)
    cube = np.ones((nx, ny, nz), dtype=bool)
    for dx in (0, 1):
        for dy in (0, 1):
            for dz in (0, 1):
                cube &= mask[dx:dx + nx, dy:dy + ny, dz:dz + nz]
    if not cube.any():
        return TriangleMesh()
    try:
        verts, faces, normals, _ = measure.marching_cubes(
            volume.tsdf, level=0.0, spacing=(volume.voxel_size,) * 3, mask=mask, allow_degenerate=False)
    except (ValueError, RuntimeError):
        return TriangleMesh()
    # skimage's mask does not check every corner, so filter faces by the cube holding their centroid
    g = verts[faces].mean(axis=1) / volume.voxel_size
    idx = np.clip(np.floor(g).astype(np.int64), 0, np.array([nx, ny, nz]) - 1)
    faces = faces[cube[idx[:, 0], idx[:, 1], idx[:, 2]]]
    mesh = TriangleMesh(verts + volume.origin, faces.astype(np.int64), -normals)
    return _cleanup(mesh)


def _cleanup(mesh: TriangleMesh) -> TriangleMesh:
    if len(mesh) == 0:
        return TriangleMesh()
    areas = mesh.face_areas()
    faces = mesh.faces[areas > 1e-12 * max(1.0, float(areas.max()))]
    used = np.unique(faces)
    remap = np.full(len(mesh.vertices), -1, dtype=np.int64)
    remap[used] = np.arange(len(used))
    normals = mesh.normals[used] if mesh.normals is not None else None
    return TriangleMesh(mesh.vertices[used], remap[faces], normals)


def fuse_depth_maps(depths, views, lo, hi, voxel_size: float, truncation: float | None = None) -> TsdfVolume:
    vol = TsdfVolume.from_bounds(lo, hi, voxel_size, truncation)
    for d, v in zip(depths, views):
        integrate_depth(vol, d, v)
    return vol


def raycast_depth(volume: TsdfVolume, view: CameraView, near: float = 0.0, far: float | None = None,
                  step: float | None = None) -> np.ndarray:
    """Camera depth of the first observed +/- zero crossing along each pixel ray (NaN if none)."""
    H, W = view.height, view.width
    step = 0.5 * volume.voxel_size if step is None else step
    lo, hi = volume.bounds
    C = view.center
    uu, vv = np.meshgrid(np.arange(W) + 0.5, np.arange(H) + 0.5)
    dc = np.stack([(uu - view.cx) / view.fx, (vv - view.cy) / view.fy, np.ones_like(uu)], -1)
    dw = dc @ np.asarray(view.R)  # R^T d, camera z component 1
    # slab test for the entry/exit range of every ray
    with np.errstate(divide="ignore", invalid="ignore"):
        inv = 1.0 / dw
        t0 = (lo - C) * inv
        t1 = (hi - C) * inv
    tmin = np.nanmax(np.minimum(t0, t1), axis=-1)
    tmax = np.nanmin(np.maximum(t0, t1), axis=-1)
    tmin = np.maximum(tmin, near)
    if far is not None:
        tmax = np.minimum(tmax, far)
    out = np.full((H, W), np.nan)
    alive = tmax > tmin
    if not alive.any():
        return out
    # step in ray-parameter units so the world step along the ray is ``step``
    dt = step / np.linalg.norm(dw, axis=-1)
    n_steps = int(math.ceil(np.nanmax(np.where(alive, (tmax - tmin) / dt, 0)))) + 1
    prev_t = tmin.copy()
    prev_v, prev_ok = volume.sample(C + prev_t[..., None] * dw)
    done = ~alive
    for k in range(1, n_steps + 1):
        t = np.minimum(tmin + k * dt, tmax)
        val, ok = volume.sample(C + t[..., None] * dw)
        hit = ~done & ok & prev_ok & (prev_v > 0) & (val <= 0)
        if hit.any():
            frac = prev_v[hit] / (prev_v[hit] - val[hit])
            out[hit] = prev_t[hit] + frac * (t[hit] - prev_t[hit])
            done |= hit
        done |= t >= tmax
        if done.all():
            break
        prev_t, prev_v, prev_ok = t, val, ok
    return out
