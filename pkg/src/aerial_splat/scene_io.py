"""Sparse-model ingestion, Manhattan alignment and artifact files.

Sparse models follow the usual SfM text/binary layout (``cameras``,
``images``, ``points3D``). Only pinhole cameras are accepted.
"""

from __future__ import annotations

import io
import logging
import struct
from dataclasses import dataclass, field, replace
from functools import cached_property
from pathlib import Path

import numpy as np

from .gaussian_model import quat_to_rotmat, rotmat_to_quat

log = logging.getLogger(__name__)

DEPTH_MAGIC = b"AGSDEPTH"
DEPTH_VERSION = 1
SCENE_VERSION = 1

# model_id -> (name, number of params)
CAMERA_MODELS = {
    0: ("SIMPLE_PINHOLE", 3),
    1: ("PINHOLE", 4),
    2: ("SIMPLE_RADIAL", 4),
    3: ("RADIAL", 5),
    4: ("OPENCV", 8),
    5: ("OPENCV_FISHEYE", 8),
    6: ("FULL_OPENCV", 12),
    7: ("FOV", 5),
    8: ("SIMPLE_RADIAL_FISHEYE", 4),
    9: ("RADIAL_FISHEYE", 5),
    10: ("THIN_PRISM_FISHEYE", 12),
}
CAMERA_MODEL_IDS = {name: (mid, n) for mid, (name, n) in CAMERA_MODELS.items()}


class SfmParseError(ValueError):
    """A sparse-model file is missing or malformed."""


class SfmIntegrityError(ValueError):
    """A point track references a view that does not exist."""


class AlignmentError(ValueError):
    pass


class ArtifactError(ValueError):
    """Invalid data handed to an artifact writer."""


def _frozen(a, dtype=np.float64):
    a = np.array(a, dtype=dtype)
    a.setflags(write=False)
    return a


@dataclass(frozen=True, eq=False)
class CameraView:
    id: int
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int
    R: np.ndarray  # world-to-camera rotation
    t: np.ndarray  # world-to-camera translation
    image_ref: str = ""
    qvec: np.ndarray | None = field(default=None, compare=False, repr=False)  # source quaternion, kept for exact re-export

    def __post_init__(self):
        object.__setattr__(self, "R", _frozen(self.R).reshape(3, 3))
        if self.qvec is not None:
            object.__setattr__(self, "qvec", _frozen(self.qvec).reshape(4))
        object.__setattr__(self, "t", _frozen(self.t).reshape(3))
        if not (self.fx > 0 and self.fy > 0):
            raise ValueError(f"view {self.id}: focal lengths must be positive")
        if not (0 < self.cx < self.width and 0 < self.cy < self.height):
            raise ValueError(f"view {self.id}: principal point outside the image")
        if not np.allclose(self.R @ self.R.T, np.eye(3), atol=1e-6) or np.linalg.det(self.R) < 0:
            raise ValueError(f"view {self.id}: rotation is not a proper rotation")

    @property
    def K(self) -> np.ndarray:
        return np.array([[self.fx, 0.0, self.cx], [0.0, self.fy, self.cy], [0.0, 0.0, 1.0]])

    @property
    def center(self) -> np.ndarray:
        return -self.R.T @ self.t

    @property
    def shape(self) -> tuple[int, int]:
        return self.height, self.width

    def world_to_camera(self, xyz: np.ndarray) -> np.ndarray:
        return np.asarray(xyz) @ self.R.T + self.t

    def project(self, xyz: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Pixel coordinates (u, v) and camera depth z; pixel centers sit at +0.5."""
        pc = self.world_to_camera(np.atleast_2d(xyz))
        z = pc[:, 2]
        with np.errstate(divide="ignore", invalid="ignore"):
            u = self.fx * pc[:, 0] / z + self.cx
            v = self.fy * pc[:, 1] / z + self.cy
        return np.stack([u, v], axis=1), z

    def pixel_rays(self) -> np.ndarray:
        """Camera-frame ray directions with unit z through every pixel center, (H, W, 3)."""
        u = (np.arange(self.width) + 0.5 - self.cx) / self.fx
        v = (np.arange(self.height) + 0.5 - self.cy) / self.fy
        uu, vv = np.meshgrid(u, v)
        return np.stack([uu, vv, np.ones_like(uu)], axis=-1)

    def with_pose(self, R, t) -> "CameraView":
        return replace(self, R=R, t=t, qvec=None)

    @property
    def quaternion(self) -> np.ndarray:
        return self.qvec if self.qvec is not None else rotmat_to_quat(self.R)

    def scaled(self, factor: float) -> "CameraView":
        """Same view at a resized resolution."""
        w = max(1, int(round(self.width * factor)))
        h = max(1, int(round(self.height * factor)))
        sx, sy = w / self.width, h / self.height
        return replace(self, fx=self.fx * sx, fy=self.fy * sy, cx=self.cx * sx, cy=self.cy * sy, width=w, height=h)


@dataclass(frozen=True, eq=False)
class SparsePoint:
    id: int
    position: np.ndarray
    color: np.ndarray
    track: frozenset

    def __post_init__(self):
        object.__setattr__(self, "position", _frozen(self.position).reshape(3))
        object.__setattr__(self, "color", _frozen(self.color).reshape(3))
        object.__setattr__(self, "track", frozenset(int(i) for i in self.track))
        if not self.track:
            raise ValueError(f"point {self.id} has an empty track")
        if not np.isfinite(self.position).all():
            raise ValueError(f"point {self.id} has a non-finite position")


@dataclass(frozen=True, eq=False)
class SfmScene:
    views: tuple
    points: tuple
    alignment: np.ndarray = field(default_factory=lambda: np.eye(4))

    def __post_init__(self):
        object.__setattr__(self, "views", tuple(self.views))
        object.__setattr__(self, "points", tuple(self.points))
        object.__setattr__(self, "alignment", _frozen(self.alignment).reshape(4, 4))
        ids = {v.id for v in self.views}
        if len(ids) != len(self.views):
            raise SfmIntegrityError("duplicate view ids")
        for p in self.points:
            missing = p.track - ids
            if missing:
                raise SfmIntegrityError(f"point {p.id} references missing view id(s) {sorted(missing)}")

    @cached_property
    def view_by_id(self) -> dict:
        return {v.id: v for v in self.views}

    @cached_property
    def point_positions(self) -> np.ndarray:
        return _frozen([p.position for p in self.points]).reshape(-1, 3)

    @cached_property
    def point_colors(self) -> np.ndarray:
        return _frozen([p.color for p in self.points]).reshape(-1, 3)

    @cached_property
    def point_ids(self) -> np.ndarray:
        return _frozen([p.id for p in self.points], dtype=np.int64)

    @cached_property
    def camera_centers(self) -> np.ndarray:
        return _frozen([v.center for v in self.views]).reshape(-1, 3)

    def subset_points(self, ids) -> list:
        wanted = set(int(i) for i in ids)
        return [p for p in self.points if p.id in wanted]


# ---------------------------------------------------------------------------
# rigid transforms / Manhattan alignment


def make_rigid(R=None, t=None) -> np.ndarray:
    T = np.eye(4)
    if R is not None:
        T[:3, :3] = R
    if t is not None:
        T[:3, 3] = t
    return T


def _check_rigid(T: np.ndarray) -> np.ndarray:
    T = np.asarray(T, dtype=np.float64)
    if T.shape != (4, 4):
        raise AlignmentError("alignment must be a 4x4 matrix")
    Q = T[:3, :3]
    if not np.allclose(Q @ Q.T, np.eye(3), atol=1e-9) or np.linalg.det(Q) < 0:
        raise AlignmentError("alignment rotation is not a proper rotation")
    if not np.allclose(T[3], [0, 0, 0, 1]):
        raise AlignmentError("alignment is not an affine rigid transform")
    return T


def apply_alignment(scene: SfmScene, T) -> SfmScene:
    """Apply a world-frame rigid transform x' = Q x + b to every pose and point."""
    T = _check_rigid(T)
    Q, b = T[:3, :3], T[:3, 3]
    views = []
    for v in scene.views:
        R = v.R @ Q.T
        views.append(v.with_pose(R, v.t - R @ b))
    points = [replace(p, position=Q @ p.position + b) for p in scene.points]
    return SfmScene(views, points, T @ scene.alignment)


def _rotation_between(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Smallest rotation taking unit vector a onto unit vector b."""
    a = a / np.linalg.norm(a)
    b = b / np.linalg.norm(b)
    v = np.cross(a, b)
    c = float(a @ b)
    if c < -1.0 + 1e-12:
        # antiparallel: half turn about any axis orthogonal to a
        axis = np.cross(a, [1.0, 0.0, 0.0])
        if np.linalg.norm(axis) < 1e-6:
            axis = np.cross(a, [0.0, 1.0, 0.0])
        axis /= np.linalg.norm(axis)
        return 2.0 * np.outer(axis, axis) - np.eye(3)
    vx = np.array([[0, -v[2], v[1]], [v[2], 0, -v[0]], [-v[1], v[0], 0]])
    return np.eye(3) + vx + vx @ vx / (1.0 + c)


def estimate_manhattan_alignment(scene: SfmScene, up_axis: int = 2) -> np.ndarray:
    """Rotate the best-fit plane of the camera centers onto the ground plane.

    Aerial cameras fly roughly level, so the plane normal is taken as the
    vertical. Its sign is chosen so that cameras end up above the sparse
    points (or, without points, so that it keeps a positive ``up_axis``
    component). The translation is zero.
    """
    C = scene.camera_centers
    if C.shape[0] < 3:
        raise AlignmentError("need at least 3 camera centers to estimate alignment; supply a transform instead")
    Cc = C - C.mean(axis=0)
    _, s, vt = np.linalg.svd(Cc, full_matrices=True)
    if s[0] <= 0 or s[1] <= 1e-9 * s[0]:
        raise AlignmentError("camera centers are collinear; supply an alignment transform instead")
    normal = vt[2]
    if scene.points:
        if normal @ (C.mean(axis=0) - scene.point_positions.mean(axis=0)) < 0:
            normal = -normal
    elif normal[up_axis] < 0:
        normal = -normal
    up = np.zeros(3)
    up[up_axis] = 1.0
    return make_rigid(_rotation_between(normal, up))


# ---------------------------------------------------------------------------
# sparse model text / binary


def _open_model_file(directory: Path, stem: str) -> tuple[Path, bool]:
    for ext, binary in ((".bin", True), (".txt", False)):
        p = directory / f"{stem}{ext}"
        if p.exists():
            return p, binary
    raise SfmParseError(f"missing {stem}.txt / {stem}.bin in {directory}")


def _text_lines(path: Path):
    for line in path.read_text().splitlines():
        line = line.strip()
        if line and not line.startswith("#"):
            yield line


def _intrinsics(model: str, params, path: Path, cam_id: int):
    if model == "PINHOLE":
        fx, fy, cx, cy = params
    elif model == "SIMPLE_PINHOLE":
        f, cx, cy = params
        fx = fy = f
    else:
        raise SfmParseError(f"{path}: camera {cam_id} uses unsupported model {model}; undistort to PINHOLE first")
    return float(fx), float(fy), float(cx), float(cy)


def _read_cameras_text(path: Path) -> dict:
    cams = {}
    try:
        for line in _text_lines(path):
            el = line.split()
            cid, model, w, h = int(el[0]), el[1], int(el[2]), int(el[3])
            params = [float(x) for x in el[4:]]
            if model in CAMERA_MODEL_IDS and len(params) != CAMERA_MODEL_IDS[model][1]:
                raise SfmParseError(f"{path}: camera {cid} has {len(params)} params")
            cams[cid] = (w, h) + _intrinsics(model, params, path, cid)
    except (IndexError, ValueError) as exc:
        if isinstance(exc, SfmParseError):
            raise
        raise SfmParseError(f"{path}: {exc}") from exc
    return cams


def _read_images_text(path: Path) -> list:
    images = []
    try:
        lines = list(_text_lines_keep_empty(path))
        for i in range(0, len(lines), 2):
            el = lines[i].split()
            iid = int(el[0])
            q = [float(x) for x in el[1:5]]
            t = [float(x) for x in el[5:8]]
            cid = int(el[8])
            name = " ".join(el[9:])
            images.append((iid, q, t, cid, name))
    except (IndexError, ValueError) as exc:
        raise SfmParseError(f"{path}: {exc}") from exc
    return images


def _text_lines_keep_empty(path: Path):
    # image files use two lines per entry and the second may be empty
    for line in path.read_text().splitlines():
        if line.startswith("#"):
            continue
        yield line.strip()


def _read_points_text(path: Path) -> list:
    pts = []
    try:
        for line in _text_lines(path):
            el = line.split()
            pid = int(el[0])
            xyz = [float(x) for x in el[1:4]]
            rgb = [int(x) for x in el[4:7]]
            track = [int(x) for x in el[8::2]]
            pts.append((pid, xyz, rgb, track))
    except (IndexError, ValueError) as exc:
        raise SfmParseError(f"{path}: {exc}") from exc
    return pts


class _Reader:
    def __init__(self, path: Path):
        self.path = path
        self.buf = path.read_bytes()
        self.pos = 0

    def read(self, fmt: str):
        size = struct.calcsize(fmt)
        if self.pos + size > len(self.buf):
            raise SfmParseError(f"{self.path}: unexpected end of file")
        out = struct.unpack_from(fmt, self.buf, self.pos)
        self.pos += size
        return out

    def read_cstr(self) -> str:
        end = self.buf.find(b"\x00", self.pos)
        if end < 0:
            raise SfmParseError(f"{self.path}: unterminated string")
        s = self.buf[self.pos:end].decode("utf-8")
        self.pos = end + 1
        return s


def _read_cameras_bin(path: Path) -> dict:
    r = _Reader(path)
    cams = {}
    (n,) = r.read("<Q")
    for _ in range(n):
        cid, mid, w, h = r.read("<iiQQ")
        if mid not in CAMERA_MODELS:
            raise SfmParseError(f"{path}: unknown camera model id {mid}")
        name, nparams = CAMERA_MODELS[mid]
        params = r.read("<" + "d" * nparams)
        cams[cid] = (w, h) + _intrinsics(name, params, path, cid)
    return cams


def _read_images_bin(path: Path) -> list:
    r = _Reader(path)
    images = []
    (n,) = r.read("<Q")
    for _ in range(n):
        iid, qw, qx, qy, qz, tx, ty, tz, cid = r.read("<idddddddi")
        name = r.read_cstr()
        (n2d,) = r.read("<Q")
        r.read("<" + "ddq" * n2d)
        images.append((iid, [qw, qx, qy, qz], [tx, ty, tz], cid, name))
    return images


def _read_points_bin(path: Path) -> list:
    r = _Reader(path)
    pts = []
    (n,) = r.read("<Q")
    for _ in range(n):
        pid, x, y, z, cr, cg, cb, _err = r.read("<QdddBBBd")
        (tl,) = r.read("<Q")
        track = r.read("<" + "ii" * tl)[0::2]
        pts.append((pid, [x, y, z], [cr, cg, cb], list(track)))
    return pts


def load_sfm_scene(path, alignment=None, images_dir=None) -> SfmScene:
    """Read a sparse model directory (text or binary) and apply ``alignment``.

    ``alignment`` may be a 4x4 rigid transform, ``"auto"`` to estimate the
    Manhattan alignment, or None for identity.
    """
    directory = Path(path)
    if not directory.is_dir():
        raise SfmParseError(f"{directory} is not a directory")
    cpath, cbin = _open_model_file(directory, "cameras")
    ipath, ibin = _open_model_file(directory, "images")
    ppath, pbin = _open_model_file(directory, "points3D")
    cams = _read_cameras_bin(cpath) if cbin else _read_cameras_text(cpath)
    images = _read_images_bin(ipath) if ibin else _read_images_text(ipath)
    raw_points = _read_points_bin(ppath) if pbin else _read_points_text(ppath)

    img_root = Path(images_dir) if images_dir is not None else None
    views = []
    for iid, q, t, cid, name in images:
        if cid not in cams:
            raise SfmIntegrityError(f"{ipath}: image {iid} references missing camera {cid}")
        w, h, fx, fy, cx, cy = cams[cid]
        ref = str(img_root / name) if img_root is not None else name
        try:
            views.append(CameraView(iid, fx, fy, cx, cy, int(w), int(h), quat_to_rotmat(np.array(q)), t, ref, qvec=q))
        except ValueError as exc:
            raise SfmParseError(f"{ipath}: {exc}") from exc
    points = []
    for pid, xyz, rgb, track in raw_points:
        try:
            points.append(SparsePoint(pid, xyz, np.asarray(rgb, dtype=np.float64) / 255.0, track))
        except ValueError as exc:
            raise SfmParseError(f"{ppath}: {exc}") from exc
    scene = SfmScene(views, points)
    if isinstance(alignment, str):
        if alignment == "auto":
            alignment = estimate_manhattan_alignment(scene)
        elif alignment == "none":
            alignment = None
        else:
            alignment = np.loadtxt(alignment).reshape(4, 4)
    if alignment is not None:
        scene = apply_alignment(scene, alignment)
    return scene


def _observations(scene: SfmScene):
    """Per-view list of (x, y, point id) and per-point list of (view id, 2D index)."""
    obs = {v.id: [] for v in scene.views}
    tracks = {}
    for p in scene.points:
        entries = []
        for vid in sorted(p.track):
            v = scene.view_by_id[vid]
            uv, _ = v.project(p.position)
            entries.append((vid, len(obs[vid])))
            obs[vid].append((float(uv[0, 0]), float(uv[0, 1]), p.id))
        tracks[p.id] = entries
    return obs, tracks


def _rgb8(color) -> list:
    return [int(c) for c in np.clip(np.rint(np.asarray(color) * 255.0), 0, 255)]


def write_sfm_scene(scene: SfmScene, path, binary: bool = False) -> None:
    """Write a sparse model with one PINHOLE camera per view."""
    directory = Path(path)
    directory.mkdir(parents=True, exist_ok=True)
    obs, tracks = _observations(scene)
    if binary:
        _write_model_bin(scene, directory, obs, tracks)
    else:
        _write_model_text(scene, directory, obs, tracks)


def _write_model_text(scene, directory: Path, obs, tracks):
    g = lambda x: repr(float(x))
    lines = ["# Camera list: CAMERA_ID, MODEL, WIDTH, HEIGHT, PARAMS[]"]
    for v in scene.views:
        lines.append(" ".join([str(v.id), "PINHOLE", str(v.width), str(v.height)] + [g(x) for x in (v.fx, v.fy, v.cx, v.cy)]))
    (directory / "cameras.txt").write_text("\n".join(lines) + "\n")

    lines = ["# Image list: IMAGE_ID, QW, QX, QY, QZ, TX, TY, TZ, CAMERA_ID, NAME", "#   POINTS2D[] as (X, Y, POINT3D_ID)"]
    for v in scene.views:
        q = v.quaternion
        lines.append(" ".join([str(v.id)] + [g(x) for x in q] + [g(x) for x in v.t] + [str(v.id), Path(v.image_ref).name or f"{v.id}.png"]))
        lines.append(" ".join(f"{g(x)} {g(y)} {pid}" for x, y, pid in obs[v.id]))
    (directory / "images.txt").write_text("\n".join(lines) + "\n")

    lines = ["# 3D point list: POINT3D_ID, X, Y, Z, R, G, B, ERROR, TRACK[] as (IMAGE_ID, POINT2D_IDX)"]
    for p in scene.points:
        track = " ".join(f"{vid} {idx}" for vid, idx in tracks[p.id])
        lines.append(" ".join([str(p.id)] + [g(x) for x in p.position] + [str(c) for c in _rgb8(p.color)] + ["0", track]))
    (directory / "points3D.txt").write_text("\n".join(lines) + "\n")


def _write_model_bin(scene, directory: Path, obs, tracks):
    buf = io.BytesIO()
    buf.write(struct.pack("<Q", len(scene.views)))
    for v in scene.views:
        buf.write(struct.pack("<iiQQ", v.id, 1, v.width, v.height))
        buf.write(struct.pack("<dddd", v.fx, v.fy, v.cx, v.cy))
    (directory / "cameras.bin").write_bytes(buf.getvalue())

    buf = io.BytesIO()
    buf.write(struct.pack("<Q", len(scene.views)))
    for v in scene.views:
        q = v.quaternion
        buf.write(struct.pack("<idddddddi", v.id, *q, *v.t, v.id))
        buf.write((Path(v.image_ref).name or f"{v.id}.png").encode("utf-8") + b"\x00")
        buf.write(struct.pack("<Q", len(obs[v.id])))
        for x, y, pid in obs[v.id]:
            buf.write(struct.pack("<ddq", x, y, pid))
    (directory / "images.bin").write_bytes(buf.getvalue())

    buf = io.BytesIO()
    buf.write(struct.pack("<Q", len(scene.points)))
    for p in scene.points:
        buf.write(struct.pack("<QdddBBBd", p.id, *p.position, *_rgb8(p.color), 0.0))
        buf.write(struct.pack("<Q", len(tracks[p.id])))
        for vid, idx in tracks[p.id]:
            buf.write(struct.pack("<ii", vid, idx))
    (directory / "points3D.bin").write_bytes(buf.getvalue())


# ---------------------------------------------------------------------------
# scene.bin: the imported scene as one binary blob


def save_scene(scene: SfmScene, path) -> None:
    views = scene.views
    offsets = np.cumsum([0] + [len(p.track) for p in scene.points])
    track_ids = np.array([vid for p in scene.points for vid in sorted(p.track)], dtype=np.int64)
    arrays = dict(
        version=np.array(SCENE_VERSION),
        view_ids=np.array([v.id for v in views], dtype=np.int64),
        intrinsics=np.array([[v.fx, v.fy, v.cx, v.cy, v.width, v.height] for v in views], dtype=np.float64).reshape(-1, 6),
        rotations=np.array([v.R for v in views]).reshape(-1, 3, 3),
        translations=np.array([v.t for v in views]).reshape(-1, 3),
        image_refs=np.array([v.image_ref for v in views], dtype=str),
        point_ids=np.asarray(scene.point_ids, dtype=np.int64),
        positions=np.asarray(scene.point_positions),
        colors=np.asarray(scene.point_colors),
        track_offsets=offsets.astype(np.int64),
        track_ids=track_ids,
        alignment=np.asarray(scene.alignment),
    )
    with open(path, "wb") as f:
        np.savez(f, **arrays)


def load_scene(path) -> SfmScene:
    try:
        z = np.load(path, allow_pickle=False)
    except (OSError, ValueError) as exc:
        raise SfmParseError(f"{path}: {exc}") from exc
    with z:
        if int(z["version"]) != SCENE_VERSION:
            raise SfmParseError(f"{path}: unsupported scene version {int(z['version'])}")
        views = [
            CameraView(int(i), k[0], k[1], k[2], k[3], int(k[4]), int(k[5]), R, t, str(ref))
            for i, k, R, t, ref in zip(z["view_ids"], z["intrinsics"], z["rotations"], z["translations"], z["image_refs"])
        ]
        off = z["track_offsets"]
        tids = z["track_ids"]
        points = [
            SparsePoint(int(pid), pos, col, tids[off[i]:off[i + 1]])
            for i, (pid, pos, col) in enumerate(zip(z["point_ids"], z["positions"], z["colors"]))
        ]
        return SfmScene(views, points, z["alignment"])


# ---------------------------------------------------------------------------
# depth maps


def write_depth_map(depth: np.ndarray, path) -> None:
    """Header (magic, version, width, height as little-endian u32) + f64 rows; NaN marks invalid."""
    d = np.asarray(depth, dtype=np.float64)
    if d.ndim != 2 or d.shape[0] < 1 or d.shape[1] < 1:
        raise ArtifactError("depth map must be a non-empty 2D grid")
    finite = np.isfinite(d)
    if np.isinf(d).any():
        raise ArtifactError("depth map contains infinite values")
    if (d[finite] < 0).any():
        raise ArtifactError("depth map contains negative depths")
    h, w = d.shape
    with open(path, "wb") as f:
        f.write(DEPTH_MAGIC)
        f.write(struct.pack("<III", DEPTH_VERSION, w, h))
        f.write(d.astype("<f8").tobytes(order="C"))


def read_depth_map(path) -> np.ndarray:
    data = Path(path).read_bytes()
    if data[:8] != DEPTH_MAGIC:
        raise ArtifactError(f"{path}: not a depth map file")
    version, w, h = struct.unpack_from("<III", data, 8)
    if version != DEPTH_VERSION:
        raise ArtifactError(f"{path}: unsupported depth map version {version}")
    body = data[20:]
    if len(body) != 8 * w * h:
        raise ArtifactError(f"{path}: truncated depth map")
    return np.frombuffer(body, dtype="<f8").reshape(h, w).astype(np.float64)


# ---------------------------------------------------------------------------
# polygon files

_PLY_TYPES = {
    "char": "i1", "int8": "i1", "uchar": "u1", "uint8": "u1",
    "short": "i2", "int16": "i2", "ushort": "u2", "uint16": "u2",
    "int": "i4", "int32": "i4", "uint": "u4", "uint32": "u4",
    "float": "f4", "float32": "f4", "double": "f8", "float64": "f8",
}


def _ply_header(elements, binary: bool) -> bytes:
    fmt = "binary_little_endian" if binary else "ascii"
    lines = ["ply", f"format {fmt} 1.0"]
    for name, count, props in elements:
        lines.append(f"element {name} {count}")
        lines.extend(props)
    lines.append("end_header")
    return ("\n".join(lines) + "\n").encode("ascii")


def _vertex_block(vertices, colors=None, normals=None):
    v = np.asarray(vertices, dtype=np.float64).reshape(-1, 3)
    fields = [("x", "<f8"), ("y", "<f8"), ("z", "<f8")]
    cols = [v[:, 0], v[:, 1], v[:, 2]]
    props = ["property double x", "property double y", "property double z"]
    if normals is not None:
        n = np.asarray(normals, dtype=np.float64).reshape(-1, 3)
        fields += [("nx", "<f8"), ("ny", "<f8"), ("nz", "<f8")]
        cols += [n[:, 0], n[:, 1], n[:, 2]]
        props += ["property double nx", "property double ny", "property double nz"]
    if colors is not None:
        c = np.asarray(colors)
        if c.dtype != np.uint8:
            c = np.clip(np.rint(np.asarray(c, dtype=np.float64) * 255), 0, 255).astype(np.uint8)
        c = c.reshape(-1, 3)
        fields += [("red", "u1"), ("green", "u1"), ("blue", "u1")]
        cols += [c[:, 0], c[:, 1], c[:, 2]]
        props += ["property uchar red", "property uchar green", "property uchar blue"]
    arr = np.empty(v.shape[0], dtype=fields)
    for (name, _), col in zip(fields, cols):
        arr[name] = col
    return arr, props


def _write_ply(path, vertex_arr, vertex_props, faces, binary: bool):
    elements = [("vertex", len(vertex_arr), vertex_props)]
    if faces is not None:
        elements.append(("face", len(faces), ["property list uchar int vertex_indices"]))
    with open(path, "wb") as f:
        f.write(_ply_header(elements, binary))
        if binary:
            f.write(vertex_arr.tobytes())
            if faces is not None and len(faces):
                fa = np.empty(len(faces), dtype=[("n", "u1"), ("i", "<i4", (3,))])
                fa["n"] = 3
                fa["i"] = faces
                f.write(fa.tobytes())
        else:
            for row in vertex_arr:
                f.write((" ".join(repr(float(x)) if isinstance(x, np.floating) else str(x) for x in row.tolist()) + "\n").encode())
            if faces is not None:
                for tri in faces:
                    f.write(f"3 {tri[0]} {tri[1]} {tri[2]}\n".encode())


def write_point_cloud(points, path, colors=None, normals=None, binary: bool = True) -> None:
    arr, props = _vertex_block(points, colors, normals)
    _write_ply(path, arr, props, None, binary)


def write_mesh(vertices, faces, path, normals=None, colors=None, binary: bool = True) -> None:
    v = np.asarray(vertices, dtype=np.float64).reshape(-1, 3)
    f = np.asarray(faces, dtype=np.int64).reshape(-1, 3)
    if f.size and (f.min() < 0 or f.max() >= len(v)):
        raise ArtifactError(f"face index out of range for a mesh with {len(v)} vertices")
    arr, props = _vertex_block(v, colors, normals)
    _write_ply(path, arr, props, f.astype(np.int32), binary)


def read_ply(path) -> dict:
    """Read vertices (and optional colors/normals/faces) from a PLY file."""
    data = Path(path).read_bytes()
    end = data.find(b"end_header")
    if not data.startswith(b"ply") or end < 0:
        raise ArtifactError(f"{path}: not a PLY file")
    header = data[:end].decode("ascii").splitlines()
    body_start = data.index(b"\n", end) + 1
    fmt = None
    elements = []
    for line in header:
        tok = line.split()
        if not tok:
            continue
        if tok[0] == "format":
            fmt = tok[1]
        elif tok[0] == "element":
            elements.append([tok[1], int(tok[2]), []])
        elif tok[0] == "property":
            if tok[1] == "list":
                elements[-1][2].append((tok[4], ("list", _PLY_TYPES[tok[2]], _PLY_TYPES[tok[3]])))
            else:
                elements[-1][2].append((tok[2], _PLY_TYPES[tok[1]]))
    if fmt not in ("ascii", "binary_little_endian"):
        raise ArtifactError(f"{path}: unsupported PLY format {fmt}")
    out = {}
    if fmt == "ascii":
        tokens = data[body_start:].split()
        pos = 0
        for name, count, props in elements:
            if name == "face":
                faces = []
                for _ in range(count):
                    n = int(tokens[pos])
                    faces.append([int(x) for x in tokens[pos + 1:pos + 1 + n]])
                    pos += 1 + n
                out["faces"] = np.array(faces, dtype=np.int64).reshape(-1, 3)
            else:
                ncol = len(props)
                vals = np.array(tokens[pos:pos + ncol * count], dtype=np.float64).reshape(count, ncol)
                pos += ncol * count
                out[name] = {p[0]: vals[:, i] for i, p in enumerate(props)}
    else:
        pos = body_start
        for name, count, props in elements:
            if name == "face":
                (_, ctype, itype) = props[0][1]
                dt = np.dtype([("n", ctype), ("i", "<" + itype, (3,))])
                arr = np.frombuffer(data, dtype=dt, count=count, offset=pos)
                pos += dt.itemsize * count
                out["faces"] = arr["i"].astype(np.int64).reshape(-1, 3)
            else:
                dt = np.dtype([(p[0], "<" + p[1]) for p in props])
                arr = np.frombuffer(data, dtype=dt, count=count, offset=pos)
                pos += dt.itemsize * count
                out[name] = {p[0]: arr[p[0]] for p in props}
    vert = out.get("vertex", {})
    result = {"vertices": np.stack([vert.get(k, np.zeros(0)) for k in "xyz"], axis=1).astype(np.float64).reshape(-1, 3)}
    if "red" in vert:
        result["colors"] = np.stack([vert["red"], vert["green"], vert["blue"]], axis=1).astype(np.uint8)
    if "nx" in vert:
        result["normals"] = np.stack([vert["nx"], vert["ny"], vert["nz"]], axis=1).astype(np.float64)
    result["faces"] = out.get("faces", np.zeros((0, 3), dtype=np.int64))
    return result


# ---------------------------------------------------------------------------
# rasters


def write_image(image: np.ndarray, path) -> None:
    """Save an 8-bit raster; float input is taken to be in [0, 1]."""
    from PIL import Image

    a = np.asarray(image)
    if a.dtype != np.uint8:
        a = np.clip(np.rint(np.nan_to_num(a.astype(np.float64)) * 255.0), 0, 255).astype(np.uint8)
    Image.fromarray(a).save(path)


def read_image(path) -> np.ndarray:
    """Load a raster as float64 RGB in [0, 1]."""
    from PIL import Image

    with Image.open(path) as im:
        return np.asarray(im.convert("RGB"), dtype=np.float64) / 255.0
