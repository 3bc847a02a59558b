"""Camera-grid scene partitioning with boundary expansion, view selection and point augmentation."""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .scene_io import CameraView, SfmScene


class PartitionError(ValueError):
    pass


def ground_axes(up_axis: int) -> tuple[int, int]:
    return {0: (1, 2), 1: (0, 2), 2: (0, 1)}[up_axis]


@dataclass(frozen=True)
class Rect:
    """Axis-aligned ground rectangle [xmin, xmax] x [ymin, ymax]."""

    xmin: float
    xmax: float
    ymin: float
    ymax: float

    def __post_init__(self):
        if not (self.xmin <= self.xmax and self.ymin <= self.ymax):
            raise ValueError(f"malformed rectangle {self}")

    @property
    def width(self) -> float:
        return self.xmax - self.xmin

    @property
    def height(self) -> float:
        return self.ymax - self.ymin

    @property
    def center(self) -> tuple[float, float]:
        return (0.5 * (self.xmin + self.xmax), 0.5 * (self.ymin + self.ymax))

    def contains(self, xy) -> np.ndarray:
        xy = np.asarray(xy, dtype=np.float64).reshape(-1, 2)
        return ((xy[:, 0] >= self.xmin) & (xy[:, 0] <= self.xmax)
                & (xy[:, 1] >= self.ymin) & (xy[:, 1] <= self.ymax))

    def contains_rect(self, other: "Rect", tol: float = 0.0) -> bool:
        return (other.xmin >= self.xmin - tol and other.xmax <= self.xmax + tol
                and other.ymin >= self.ymin - tol and other.ymax <= self.ymax + tol)

    def dilate(self, ratio: float) -> "Rect":
        dx, dy = ratio * self.width, ratio * self.height
        return Rect(self.xmin - dx, self.xmax + dx, self.ymin - dy, self.ymax + dy)

    def overlap_area(self, other: "Rect") -> float:
        w = min(self.xmax, other.xmax) - max(self.xmin, other.xmin)
        h = min(self.ymax, other.ymax) - max(self.ymin, other.ymin)
        return max(w, 0.0) * max(h, 0.0)

    def as_tuple(self) -> tuple[float, float, float, float]:
        return (self.xmin, self.xmax, self.ymin, self.ymax)


@dataclass
class PartitionConfig:
    m_blocks: int = 1
    n_blocks: int = 1
    expansion_ratio: float = 0.2
    central_scope: float = 0.7
    views_per_block: int | None = None  # default 2 * ceil(n / (M * N))
    up_axis: int = 2

    def __post_init__(self):
        if self.m_blocks < 1 or self.n_blocks < 1:
            raise PartitionError("grid dimensions must be >= 1")
        if not 0 <= self.expansion_ratio < 1:
            raise PartitionError("expansion_ratio must lie in [0, 1)")
        if not 0 < self.central_scope <= 1:
            raise PartitionError("central_scope must lie in (0, 1]")
        if self.views_per_block is not None and self.views_per_block < 1:
            raise PartitionError("views_per_block must be >= 1")
        if self.up_axis not in (0, 1, 2):
            raise PartitionError("up_axis must be 0, 1 or 2")

    def budget(self, n_views: int) -> int:
        if self.views_per_block is not None:
            return self.views_per_block
        return 2 * math.ceil(n_views / (self.m_blocks * self.n_blocks))


@dataclass
class SceneBlock:
    id: int
    core_bounds: Rect
    expanded_bounds: Rect
    scene_bounds: Rect
    view_ids: tuple[int, ...] = ()
    point_ids: frozenset = field(default_factory=frozenset)
    native_view_ids: tuple[int, ...] = ()
    up_axis: int = 2

    def owns(self, positions) -> np.ndarray:
        """Half-open core membership [min, max) per ground axis.

        Core edges on the scene boundary are treated as unbounded so that
        Gaussians drifting outside the scene rectangle still have one owner.
        """
        ax = ground_axes(self.up_axis)
        p = np.asarray(positions, dtype=np.float64).reshape(-1, 3)[:, ax]
        c, s = self.core_bounds, self.scene_bounds
        lo_x = -np.inf if c.xmin <= s.xmin else c.xmin
        hi_x = np.inf if c.xmax >= s.xmax else c.xmax
        lo_y = -np.inf if c.ymin <= s.ymin else c.ymin
        hi_y = np.inf if c.ymax >= s.ymax else c.ymax
        return (p[:, 0] >= lo_x) & (p[:, 0] < hi_x) & (p[:, 1] >= lo_y) & (p[:, 1] < hi_y)


def _ground(positions: np.ndarray, up_axis: int) -> np.ndarray:
    return np.asarray(positions, dtype=np.float64).reshape(-1, 3)[:, ground_axes(up_axis)]


def scene_rect(scene: SfmScene, up_axis: int = 2) -> Rect:
    pts = [_ground(scene.camera_centers, up_axis)]
    if len(scene.points):
        pts.append(_ground(scene.point_positions, up_axis))
    g = np.concatenate(pts, axis=0)
    return Rect(float(g[:, 0].min()), float(g[:, 0].max()), float(g[:, 1].min()), float(g[:, 1].max()))


def _cut_points(sorted_vals: list[np.ndarray]) -> list[float]:
    """Midpoints between consecutive groups of sorted coordinates."""
    return [0.5 * (float(a.max()) + float(b.min())) for a, b in zip(sorted_vals[:-1], sorted_vals[1:])]


def split_by_cameras(scene: SfmScene, cfg: PartitionConfig) -> list[SceneBlock]:
    """Equal-count grid split of camera ground positions into M x N blocks.

    Cameras are sorted along the first ground axis and cut into M columns of
    near-equal size, then each column is sorted along the second ground axis
    and cut into N rows. Core rectangles tile the scene rectangle; cut
    positions lie midway between neighbouring groups.
    """
    M, N = cfg.m_blocks, cfg.n_blocks
    n = len(scene.views)
    if n < M * N:
        raise PartitionError(f"{n} views cannot fill a {M}x{N} grid")
    ids = np.array([v.id for v in scene.views])
    g = _ground(scene.camera_centers, cfg.up_axis)
    rect = scene_rect(scene, cfg.up_axis)

    order = np.lexsort((ids, g[:, 1], g[:, 0]))
    columns = np.array_split(order, M)
    xcuts = [rect.xmin] + _cut_points([g[c, 0] for c in columns]) + [rect.xmax]

    blocks = []
    for i, col in enumerate(columns):
        col = col[np.lexsort((ids[col], g[col, 0], g[col, 1]))]
        rows = np.array_split(col, N)
        ycuts = [rect.ymin] + _cut_points([g[r, 1] for r in rows]) + [rect.ymax]
        for j, row in enumerate(rows):
            core = Rect(xcuts[i], xcuts[i + 1], ycuts[j], ycuts[j + 1])
            native = tuple(sorted(int(x) for x in ids[row]))
            blocks.append(SceneBlock(id=len(blocks), core_bounds=core, expanded_bounds=core, scene_bounds=rect,
                                     view_ids=native, native_view_ids=native, up_axis=cfg.up_axis))
    return blocks


def expand_blocks(blocks: list[SceneBlock], cfg: PartitionConfig) -> list[SceneBlock]:
    """Dilate every core by ``expansion_ratio`` of its width and height on each side."""
    return [replace(b, expanded_bounds=b.core_bounds.dilate(cfg.expansion_ratio)) for b in blocks]


def central_rect(view: CameraView, central_scope: float) -> tuple[float, float, float, float]:
    """Centered rectangle covering ``central_scope`` of each image dimension (u0, u1, v0, v1)."""
    hw, hh = 0.5 * central_scope * view.width, 0.5 * central_scope * view.height
    return (0.5 * view.width - hw, 0.5 * view.width + hw, 0.5 * view.height - hh, 0.5 * view.height + hh)


def score_viewpoint(block_points, view: CameraView, central_scope: float) -> int:
    """Number of points in front of the camera that project inside the central rectangle."""
    pts = np.asarray(block_points, dtype=np.float64).reshape(-1, 3)
    if pts.shape[0] == 0:
        return 0
    Xc = pts @ view.R.T + view.t
    z = Xc[:, 2]
    front = z > 0
    zs = np.where(front, z, 1.0)
    u = view.fx * Xc[:, 0] / zs + view.cx
    v = view.fy * Xc[:, 1] / zs + view.cy
    u0, u1, v0, v1 = central_rect(view, central_scope)
    inside = front & (u >= u0) & (u <= u1) & (v >= v0) & (v <= v1)
    return int(inside.sum())


def block_point_mask(block: SceneBlock, scene: SfmScene, bounds: str = "expanded") -> np.ndarray:
    if len(scene.points) == 0:
        return np.zeros(0, dtype=bool)
    rect = block.expanded_bounds if bounds == "expanded" else block.core_bounds
    return rect.contains(_ground(scene.point_positions, block.up_axis))


def select_and_cull(blocks: list[SceneBlock], scene: SfmScene, cfg: PartitionConfig) -> list[SceneBlock]:
    """Replace each block's views by the top-scoring views over the whole scene.

    Block points are the sparse points inside the expanded bounds. Ties go to
    the lower view id. A view may serve several blocks.
    """
    n = len(scene.views)
    k = cfg.budget(n)
    if k > n:
        if cfg.views_per_block is not None:
            warnings.warn(f"views_per_block={k} exceeds the {n} available views; using all", stacklevel=2)
        k = n
    out = []
    for b in blocks:
        mask = block_point_mask(b, scene)
        pts = scene.point_positions[mask] if mask.size else np.zeros((0, 3))
        scored = sorted(((-score_viewpoint(pts, v, cfg.central_scope), v.id) for v in scene.views))
        chosen = tuple(sorted(vid for _, vid in scored[:k]))
        out.append(replace(b, view_ids=chosen))
    return out


def augment_points(blocks: list[SceneBlock], scene: SfmScene) -> list[SceneBlock]:
    """Block points = points inside the expanded bounds plus points tracked by any selected view."""
    out = []
    pid = scene.point_ids
    for b in blocks:
        inside = block_point_mask(b, scene)
        sel = set(b.view_ids)
        tracked = np.array([bool(sel & p.track) for p in scene.points], dtype=bool)
        keep = inside | tracked if len(scene.points) else np.zeros(0, dtype=bool)
        out.append(replace(b, point_ids=frozenset(int(i) for i in pid[keep])))
    return out


def partition_scene(scene: SfmScene, cfg: PartitionConfig, select: bool = True) -> list[SceneBlock]:
    """Split, expand, select/cull (optional) and augment."""
    blocks = expand_blocks(split_by_cameras(scene, cfg), cfg)
    if select:
        blocks = select_and_cull(blocks, scene, cfg)
    return augment_points(blocks, scene)


def check_tiling(blocks: list[SceneBlock], rect: Rect, tol: float = 1e-9) -> bool:
    """Cores cover ``rect`` exactly with no overlapping area."""
    area = sum(b.core_bounds.width * b.core_bounds.height for b in blocks)
    for i, a in enumerate(blocks):
        if not rect.contains_rect(a.core_bounds, tol):
            return False
        for b in blocks[i + 1:]:
            if a.core_bounds.overlap_area(b.core_bounds) > tol:
                return False
    return abs(area - rect.width * rect.height) <= tol * max(1.0, rect.width * rect.height)


# ---------------------------------------------------------------------------
# manifests

_MAGIC = "# aerial-splat block manifest v1"


def _fmt_rect(r: Rect) -> str:
    return " ".join(repr(float(x)) for x in r.as_tuple())


def write_block_manifest(block: SceneBlock, path) -> None:
    lines = [
        _MAGIC,
        f"id {block.id}",
        f"up_axis {block.up_axis}",
        f"core {_fmt_rect(block.core_bounds)}",
        f"expanded {_fmt_rect(block.expanded_bounds)}",
        f"scene {_fmt_rect(block.scene_bounds)}",
        "views " + " ".join(str(v) for v in block.view_ids),
        "native_views " + " ".join(str(v) for v in block.native_view_ids),
        "points " + " ".join(str(p) for p in sorted(block.point_ids)),
    ]
    Path(path).write_text("\n".join(lines) + "\n")


def read_block_manifest(path) -> SceneBlock:
    path = Path(path)
    text = path.read_text().splitlines()
    if not text or text[0].strip() != _MAGIC:
        raise PartitionError(f"{path}: not a block manifest")
    fields = {}
    for line in text[1:]:
        if not line.strip():
            continue
        key, _, rest = line.partition(" ")
        fields[key] = rest.split()
    try:
        rect = lambda k: Rect(*(float(x) for x in fields[k]))  # noqa: E731
        return SceneBlock(
            id=int(fields["id"][0]),
            up_axis=int(fields["up_axis"][0]),
            core_bounds=rect("core"),
            expanded_bounds=rect("expanded"),
            scene_bounds=rect("scene"),
            view_ids=tuple(int(v) for v in fields["views"]),
            native_view_ids=tuple(int(v) for v in fields.get("native_views", [])),
            point_ids=frozenset(int(p) for p in fields["points"]),
        )
    except (KeyError, ValueError, TypeError) as e:
        raise PartitionError(f"{path}: malformed manifest ({e})") from e


def write_blocks(blocks: list[SceneBlock], directory) -> list[Path]:
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    paths = []
    for b in blocks:
        p = d / f"block_{b.id:03d}.txt"
        write_block_manifest(b, p)
        paths.append(p)
    return paths


def read_blocks(directory) -> list[SceneBlock]:
    paths = sorted(Path(directory).glob("block_*.txt"))
    if not paths:
        raise PartitionError(f"{directory}: no block manifests")
    return sorted((read_block_manifest(p) for p in paths), key=lambda b: b.id)
