"""Synthetic aerial captures of a textured ground plane with box buildings.

Geometry is ray cast exactly, so depth maps, point clouds and poses are
ground truth. Coordinates are z-up with the ground at z = 0.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .scene_io import (CameraView, SfmScene, SparsePoint, _rotation_between, read_depth_map, read_image,
                       read_ply, load_sfm_scene, write_depth_map, write_image, write_point_cloud,
                       write_sfm_scene)

NADIR = np.diag([1.0, -1.0, -1.0])


class SyntheticSpecError(ValueError):
    pass


@dataclass
class SyntheticSceneSpec:
    ground_size: float = 24.0
    boxes: tuple = ()  # (cx, cy, sx, sy, height) per box; empty -> n_boxes random boxes
    n_boxes: int = 3
    box_size: tuple = (3.0, 6.0)
    box_height: tuple = (2.0, 6.0)
    rows: int = 5
    cols: int = 5
    altitude: float = 20.0
    overlap: float = 70.0  # percent, forward and side
    tilt_deg: float = 15.0  # tilt of the outermost cameras toward the scene center
    width: int = 48
    height: int = 48
    supersample: int = 3
    n_points: int = 3000
    held_out: int = 4
    texture_seed: int = 0
    seed: int = 0
    point_noise: float = 0.0
    pose_noise: float = 0.0
    image_noise: float = 0.0

    def __post_init__(self):
        if self.ground_size <= 0 or self.altitude <= 0:
            raise SyntheticSpecError("ground_size and altitude must be positive")
        if self.rows < 1 or self.cols < 1 or self.width < 4 or self.height < 4:
            raise SyntheticSpecError("camera grid and image size must be positive")
        if not 0 <= self.overlap <= 95:
            raise SyntheticSpecError("overlap must lie in [0, 95] percent")
        if self.supersample < 1 or self.n_points < 0 or self.held_out < 0:
            raise SyntheticSpecError("supersample >= 1, n_points >= 0, held_out >= 0")
        self.boxes = tuple(tuple(float(x) for x in b) for b in self.boxes)
        for b in self.boxes:
            if len(b) != 5 or b[2] <= 0 or b[3] <= 0 or b[4] <= 0:
                raise SyntheticSpecError(f"malformed box {b}")
            if b[4] >= self.altitude:
                raise SyntheticSpecError("boxes must stay below the cameras")

    def resolved_boxes(self) -> np.ndarray:
        if self.boxes or self.n_boxes == 0:
            return np.array(self.boxes, dtype=np.float64).reshape(-1, 5)
        rng = np.random.default_rng(self.seed + 7919)
        half = 0.5 * self.ground_size
        out = []
        for _ in range(1000 * self.n_boxes):
            if len(out) == self.n_boxes:
                break
            sx, sy = rng.uniform(*self.box_size, 2)
            h = rng.uniform(*self.box_height)
            if max(sx, sy) >= half:
                continue
            cx = rng.uniform(-half + sx, half - sx)
            cy = rng.uniform(-half + sy, half - sy)
            # keep a one-meter street between buildings
            if all(abs(cx - b[0]) > (sx + b[2]) / 2 + 1.0 or abs(cy - b[1]) > (sy + b[3]) / 2 + 1.0 for b in out):
                out.append((cx, cy, sx, sy, min(h, 0.5 * self.altitude)))
        if len(out) < self.n_boxes:
            raise SyntheticSpecError("could not place the requested boxes without overlap")
        return np.array(out)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["boxes"] = [list(b) for b in self.resolved_boxes()]
        d["box_size"] = list(self.box_size)
        d["box_height"] = list(self.box_height)
        return d


@dataclass
class SyntheticScene:
    spec: SyntheticSceneSpec
    sfm: SfmScene
    images: dict
    depths: dict
    held_out: list
    held_out_images: dict
    held_out_depths: dict
    gt_points: np.ndarray
    boxes: np.ndarray
    true_views: list = field(default_factory=list)

    @property
    def bounds(self) -> tuple[np.ndarray, np.ndarray]:
        half = 0.5 * self.spec.ground_size
        top = float(self.boxes[:, 4].max()) if len(self.boxes) else 0.0
        return np.array([-half, -half, -1.0]), np.array([half, half, top + 1.0])


# ---------------------------------------------------------------------------
# geometry


def camera_rays(view: CameraView, supersample: int = 1):
    """World ray directions with camera z = 1 at pixel centers (or a s x s subpixel grid)."""
    s = supersample
    off = (np.arange(s) + 0.5) / s
    u = (np.arange(view.width)[:, None] + off[None, :]).reshape(-1)
    v = (np.arange(view.height)[:, None] + off[None, :]).reshape(-1)
    uu, vv = np.meshgrid(u, v)
    d = np.stack([(uu - view.cx) / view.fx, (vv - view.cy) / view.fy, np.ones_like(uu)], -1)
    return d @ np.asarray(view.R)


def ray_cast(origin, dirs, boxes, ground_half: float | None = None):
    """First hit of rays o + t d against the ground plane z = 0 and boxes.

    Returns (t, surface id, normal); id 0 is the ground, k >= 1 the k-th box,
    -1 no hit. ``t`` is in units of ``d``.
    """
    o = np.asarray(origin, dtype=np.float64)
    d = np.asarray(dirs, dtype=np.float64)
    shp = d.shape[:-1]
    d = d.reshape(-1, 3)
    t = np.full(len(d), np.inf)
    sid = np.full(len(d), -1, dtype=np.int64)
    nrm = np.zeros((len(d), 3))
    with np.errstate(divide="ignore", invalid="ignore"):
        tg = np.where(d[:, 2] < 0, -o[2] / d[:, 2], np.inf)
    hit = np.isfinite(tg) & (tg > 0)
    if ground_half is not None:
        p = o + tg[:, None] * d
        hit &= (np.abs(p[:, 0]) <= ground_half) & (np.abs(p[:, 1]) <= ground_half)
    t[hit] = tg[hit]
    sid[hit] = 0
    nrm[hit] = (0.0, 0.0, 1.0)
    for k, (cx, cy, sx, sy, h) in enumerate(np.asarray(boxes).reshape(-1, 5)):
        lo = np.array([cx - sx / 2, cy - sy / 2, 0.0])
        hi = np.array([cx + sx / 2, cy + sy / 2, h])
        with np.errstate(divide="ignore", invalid="ignore"):
            inv = 1.0 / d
            t0 = (lo - o) * inv
            t1 = (hi - o) * inv
        tn = np.minimum(t0, t1)
        tf = np.maximum(t0, t1)
        tn = np.where(np.isnan(tn), -np.inf, tn)
        tf = np.where(np.isnan(tf), np.inf, tf)
        tenter = tn.max(1)
        texit = tf.min(1)
        axis = tn.argmax(1)
        hb = (tenter <= texit) & (tenter > 0) & (tenter < t)
        t[hb] = tenter[hb]
        sid[hb] = k + 1
        n = np.zeros((int(hb.sum()), 3))
        ax = axis[hb]
        n[np.arange(len(ax)), ax] = -np.sign(d[hb, ax])
        nrm[hb] = n
    return t.reshape(shp), sid.reshape(shp), nrm.reshape(shp + (3,))


def texture(points, sid, seed: int = 0) -> np.ndarray:
    """Solid procedural texture in [0, 1]; consistent across views by construction."""
    p = np.asarray(points, dtype=np.float64)
    rng = np.random.default_rng(seed)
    n_waves = 6
    k = rng.normal(size=(3, n_waves, 3))
    k /= np.linalg.norm(k, axis=-1, keepdims=True)
    wavelength = rng.uniform(1.2, 5.0, (3, n_waves))
    k *= (2 * np.pi / wavelength)[..., None]
    phase = rng.uniform(0, 2 * np.pi, (3, n_waves))
    amp = rng.uniform(0.5, 1.0, (3, n_waves))
    amp /= amp.sum(1, keepdims=True)
    base = rng.uniform(0.3, 0.7, (8, 3))
    base[0] = (0.45, 0.5, 0.4)
    sid_c = np.clip(np.asarray(sid), 0, 7)
    col = base[sid_c].copy()
    for c in range(3):
        col[..., c] += 0.35 * np.sum(amp[c] * np.sin(p @ k[c].T + phase[c]), axis=-1)
    return np.clip(col, 0.0, 1.0)


def look_pose(center, forward) -> np.ndarray:
    """World-to-camera rotation of a camera at ``center`` looking along ``forward`` (image y roughly -world y)."""
    f = np.asarray(forward, dtype=np.float64)
    f = f / np.linalg.norm(f)
    Q = _rotation_between(np.array([0.0, 0.0, -1.0]), f)
    return NADIR @ Q.T


def _tilted_forward(center, tilt_deg, radius):
    c = np.asarray(center, dtype=np.float64)
    r = math.hypot(c[0], c[1])
    if tilt_deg == 0 or r == 0 or radius == 0:
        return np.array([0.0, 0.0, -1.0])
    ang = math.radians(tilt_deg) * min(r / radius, 1.0)
    horiz = -c[:2] / r
    return np.array([math.sin(ang) * horiz[0], math.sin(ang) * horiz[1], -math.cos(ang)])


def _make_view(vid, center, forward, fx, W, H) -> CameraView:
    R = look_pose(center, forward)
    return CameraView(vid, fx, fx, W / 2.0, H / 2.0, W, H, R, -R @ np.asarray(center, dtype=np.float64),
                      image_ref=f"{vid:04d}.png")


def camera_layout(spec: SyntheticSceneSpec) -> tuple[list, list]:
    """Training cameras on a rows x cols grid and held-out cameras at random positions."""
    g = spec.ground_size
    sx, sy = g / spec.cols, g / spec.rows
    footprint = max(sx, sy) / (1.0 - spec.overlap / 100.0)
    fx = spec.width * spec.altitude / footprint
    xs = -g / 2 + sx * (np.arange(spec.cols) + 0.5)
    ys = -g / 2 + sy * (np.arange(spec.rows) + 0.5)
    radius = math.hypot(xs.max(), ys.max())
    views = []
    for j, y in enumerate(ys):
        for i, x in enumerate(xs):
            c = np.array([x, y, spec.altitude])
            views.append(_make_view(len(views), c, _tilted_forward(c, spec.tilt_deg, radius), fx, spec.width, spec.height))
    rng = np.random.default_rng(spec.seed + 104729)
    held = []
    lim = 0.5 * g - 0.5 * max(sx, sy)
    for k in range(spec.held_out):
        c = np.array([rng.uniform(-lim, lim), rng.uniform(-lim, lim), spec.altitude * rng.uniform(0.9, 1.1)])
        held.append(_make_view(1000 + k, c, _tilted_forward(c, spec.tilt_deg, radius), fx, spec.width, spec.height))
    return views, held


def render_truth(view: CameraView, boxes, supersample: int = 1, texture_seed: int = 0, ground_half=None):
    """Exact depth (pixel centers) and supersampled color for one view."""
    d = camera_rays(view, 1)
    t, _, _ = ray_cast(view.center, d, boxes, ground_half)
    depth = np.where(np.isfinite(t), t, np.nan)
    s = supersample
    ds = camera_rays(view, s)
    ts, sid, _ = ray_cast(view.center, ds, boxes, ground_half)
    p = view.center + np.where(np.isfinite(ts), ts, 0.0)[..., None] * ds
    col = texture(p, sid, texture_seed)
    col[sid < 0] = 0.0
    H, W = view.height, view.width
    col = col.reshape(H, s, W, s, 3).mean(axis=(1, 3))
    return depth, col


def _visible_in(view: CameraView, pts, depth_map, rel_tol=0.01):
    Xc = pts @ view.R.T + view.t
    z = Xc[:, 2]
    ok = z > 0
    zs = np.where(ok, z, 1.0)
    u = view.fx * Xc[:, 0] / zs + view.cx
    v = view.fy * Xc[:, 1] / zs + view.cy
    ok &= (u >= 0) & (u < view.width) & (v >= 0) & (v < view.height)
    j = np.clip(np.floor(np.where(ok, u, 0)).astype(int), 0, view.width - 1)
    i = np.clip(np.floor(np.where(ok, v, 0)).astype(int), 0, view.height - 1)
    d = depth_map[i, j]
    return ok & np.isfinite(d) & (np.abs(d - z) < rel_tol * z + 0.05)


def sample_gt_surface(boxes, ground_size: float, spacing: float) -> np.ndarray:
    """Dense samples on all upward and outward faces (ground outside the boxes, roofs, walls)."""
    half = 0.5 * ground_size
    g = np.arange(-half, half + 1e-9, spacing)
    X, Y = np.meshgrid(g, g)
    ground = np.stack([X.ravel(), Y.ravel(), np.zeros(X.size)], -1)
    keep = np.ones(len(ground), dtype=bool)
    parts = []
    for cx, cy, sx, sy, h in boxes:
        keep &= ~((np.abs(ground[:, 0] - cx) < sx / 2) & (np.abs(ground[:, 1] - cy) < sy / 2))
        xs = np.arange(cx - sx / 2, cx + sx / 2 + 1e-9, spacing)
        ys = np.arange(cy - sy / 2, cy + sy / 2 + 1e-9, spacing)
        zs = np.arange(0.0, h + 1e-9, spacing)
        RX, RY = np.meshgrid(xs, ys)
        parts.append(np.stack([RX.ravel(), RY.ravel(), np.full(RX.size, h)], -1))
        for x in (cx - sx / 2, cx + sx / 2):
            A, Z = np.meshgrid(ys, zs)
            parts.append(np.stack([np.full(A.size, x), A.ravel(), Z.ravel()], -1))
        for y in (cy - sy / 2, cy + sy / 2):
            A, Z = np.meshgrid(xs, zs)
            parts.append(np.stack([A.ravel(), np.full(A.size, y), Z.ravel()], -1))
    pts = [ground[keep]] + parts
    pts = np.concatenate(pts, axis=0)
    inside = (np.abs(pts[:, 0]) <= half + 1e-9) & (np.abs(pts[:, 1]) <= half + 1e-9)
    return pts[inside]


def generate_synthetic(spec: SyntheticSceneSpec) -> SyntheticScene:
    boxes = spec.resolved_boxes()
    half = None  # the ground plane is unbounded in renders; the GT cloud covers the ground square
    true_views, held = camera_layout(spec)
    rng = np.random.default_rng(spec.seed)

    images, depths = {}, {}
    for v in true_views:
        d, c = render_truth(v, boxes, spec.supersample, spec.texture_seed, half)
        if spec.image_noise > 0:
            c = np.clip(c + rng.normal(0, spec.image_noise, c.shape), 0, 1)
        images[v.id], depths[v.id] = c, d
    h_img, h_dep = {}, {}
    for v in held:
        d, c = render_truth(v, boxes, spec.supersample, spec.texture_seed, half)
        h_img[v.id], h_dep[v.id] = c, d

    # sparse points: back-projected random pixels with visibility-checked tracks
    points = []
    if spec.n_points > 0 and true_views:
        per_view = int(math.ceil(spec.n_points / len(true_views)))
        for v in true_views:
            d = depths[v.id]
            valid = np.flatnonzero(np.isfinite(d).ravel())
            if valid.size == 0:
                continue
            pick = rng.choice(valid, size=min(per_view, valid.size), replace=False)
            i, j = np.divmod(pick, v.width)
            dc = np.stack([(j + 0.5 - v.cx) / v.fx, (i + 0.5 - v.cy) / v.fy, np.ones(len(i))], -1)
            P = v.center + d[i, j][:, None] * (dc @ v.R)
            tracks = np.stack([_visible_in(w, P, depths[w.id]) for w in true_views], axis=1)
            tracks[:, true_views.index(v)] = True
            sid = ray_cast(v.center, dc @ v.R, boxes, half)[1]
            cols = texture(P, sid, spec.texture_seed)
            for k in range(len(P)):
                if len(points) >= spec.n_points:
                    break
                pos = P[k] + (rng.normal(0, spec.point_noise, 3) if spec.point_noise > 0 else 0.0)
                track = frozenset(int(true_views[q].id) for q in np.flatnonzero(tracks[k]))
                points.append(SparsePoint(len(points), pos, cols[k], track))

    views = true_views
    if spec.pose_noise > 0:
        noisy = []
        for v in true_views:
            c = v.center + rng.normal(0, spec.pose_noise, 3)
            noisy.append(v.with_pose(v.R, -v.R @ c))
        views = noisy
    sfm = SfmScene(views=list(views), points=points, alignment=np.eye(4))
    gt = sample_gt_surface(boxes, spec.ground_size, spacing=min(0.1, spec.ground_size / 200))
    return SyntheticScene(spec, sfm, images, depths, held, h_img, h_dep, gt, boxes, list(true_views))


# ---------------------------------------------------------------------------
# on-disk layout


def _write_views(views, path: Path) -> None:
    lines = ["# id fx fy cx cy width height qw qx qy qz tx ty tz"]
    for v in views:
        q = v.quaternion
        vals = [v.fx, v.fy, v.cx, v.cy]
        lines.append(" ".join([str(v.id)] + [repr(float(x)) for x in vals] + [str(v.width), str(v.height)]
                              + [repr(float(x)) for x in q] + [repr(float(x)) for x in v.t]))
    path.write_text("\n".join(lines) + "\n")


def read_views(path) -> list:
    from .gaussian_model import quat_to_rotmat

    out = []
    for line in Path(path).read_text().splitlines():
        if not line.strip() or line.startswith("#"):
            continue
        f = line.split()
        q = np.array([float(x) for x in f[7:11]])
        R = quat_to_rotmat(q)
        out.append(CameraView(int(f[0]), float(f[1]), float(f[2]), float(f[3]), float(f[4]), int(f[5]), int(f[6]),
                              R, np.array([float(x) for x in f[11:14]]), qvec=q / np.linalg.norm(q)))
    return out


def write_synthetic(scene: SyntheticScene, out_dir) -> Path:
    """Write the sparse model, images, ground-truth depths, held-out views and the GT cloud."""
    out = Path(out_dir)
    (out / "sparse").mkdir(parents=True, exist_ok=True)
    (out / "images").mkdir(exist_ok=True)
    (out / "gt" / "depth").mkdir(parents=True, exist_ok=True)
    (out / "heldout" / "images").mkdir(parents=True, exist_ok=True)
    (out / "heldout" / "depth").mkdir(parents=True, exist_ok=True)
    write_sfm_scene(scene.sfm, out / "sparse")
    for vid, img in scene.images.items():
        write_image(img, out / "images" / f"{vid:04d}.png")
        write_depth_map(scene.depths[vid], out / "gt" / "depth" / f"{vid:04d}.dmap")
    _write_views(scene.held_out, out / "heldout" / "views.txt")
    for vid, img in scene.held_out_images.items():
        write_image(img, out / "heldout" / "images" / f"{vid:04d}.png")
        write_depth_map(scene.held_out_depths[vid], out / "heldout" / "depth" / f"{vid:04d}.dmap")
    write_point_cloud(scene.gt_points, out / "gt" / "points.ply")
    np.savetxt(out / "gt" / "boxes.txt", scene.boxes.reshape(-1, 5), header="cx cy sx sy height")
    return out


@dataclass
class HeldOutSet:
    views: list
    images: dict
    depths: dict


def read_held_out(data_dir) -> HeldOutSet | None:
    d = Path(data_dir) / "heldout"
    if not (d / "views.txt").exists():
        return None
    views = read_views(d / "views.txt")
    images, depths = {}, {}
    for v in views:
        ip = d / "images" / f"{v.id:04d}.png"
        dp = d / "depth" / f"{v.id:04d}.dmap"
        if ip.exists():
            images[v.id] = read_image(ip)
        if dp.exists():
            depths[v.id] = read_depth_map(dp)
    return HeldOutSet(views, images, depths)


def read_gt_points(data_dir) -> np.ndarray | None:
    p = Path(data_dir) / "gt" / "points.ply"
    if not p.exists():
        return None
    return read_ply(p)["vertices"]


def load_synthetic_scene(data_dir) -> SfmScene:
    return load_sfm_scene(Path(data_dir) / "sparse", images_dir=Path(data_dir) / "images")
