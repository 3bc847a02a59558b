import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from aerial_splat.partitioner import (PartitionConfig, PartitionError, Rect, SceneBlock, augment_points,
                                      expand_blocks, partition_scene, read_blocks, scene_rect, score_viewpoint,
                                      select_and_cull, split_by_cameras, write_blocks)
from aerial_splat.scene_io import CameraView, SfmScene, SparsePoint

NADIR = np.diag([1.0, -1.0, -1.0])


def view(vid, center, R=NADIR, size=100, f=100.0):
    return CameraView(vid, f, f, size / 2, size / 2, size, size, R, -R @ np.asarray(center, float))


def grid_scene(nx=4, ny=4, spacing=10.0, height=30.0, points=()):
    views = [view(i * ny + j, (i * spacing, j * spacing, height)) for i in range(nx) for j in range(ny)]
    pts = [SparsePoint(k, p, (0.5, 0.5, 0.5), {0}) for k, p in enumerate(points)]
    return SfmScene(views, pts)


def random_layout(seed, n=None):
    rng = np.random.default_rng(seed)
    n = int(rng.integers(8, 60)) if n is None else n
    centers = np.c_[rng.uniform(-200, 200, (n, 2)) * rng.uniform(0.2, 1.0, 2), rng.uniform(80, 120, n)]
    lo, hi = centers[:, :2].min(0), centers[:, :2].max(0)
    pts = np.c_[rng.uniform(lo, hi, (1500, 2)), rng.uniform(-5, 5, 1500)]
    views = [view(i, c) for i, c in enumerate(centers)]
    return SfmScene(views, [SparsePoint(k, p, (0.5, 0.5, 0.5), {int(rng.integers(0, n))}) for k, p in enumerate(pts)])


def test_grid_4x4_quadrants():
    blocks = split_by_cameras(grid_scene(), PartitionConfig(2, 2))
    assert len(blocks) == 4
    got = {frozenset(b.view_ids) for b in blocks}
    # view id = 4 * ix + iy
    quad = lambda xs, ys: frozenset(4 * i + j for i in xs for j in ys)
    assert got == {quad((0, 1), (0, 1)), quad((0, 1), (2, 3)), quad((2, 3), (0, 1)), quad((2, 3), (2, 3))}
    cores = sorted(b.core_bounds.as_tuple() for b in blocks)
    assert cores[0] == (0.0, 15.0, 0.0, 15.0)
    assert cores[-1] == (15.0, 30.0, 15.0, 30.0)


def test_single_block_and_too_few_views():
    scene = grid_scene()
    (b,) = split_by_cameras(scene, PartitionConfig(1, 1))
    assert len(b.view_ids) == 16
    assert b.core_bounds == scene_rect(scene)
    with pytest.raises(PartitionError):
        split_by_cameras(grid_scene(1, 3), PartitionConfig(2, 2))


def test_config_invariants():
    for kw in (dict(m_blocks=0), dict(expansion_ratio=1.0), dict(central_scope=0.0), dict(views_per_block=0)):
        with pytest.raises(PartitionError):
            PartitionConfig(**kw)
    assert PartitionConfig(2, 2).budget(17) == 10


def test_expand_examples():
    b = SceneBlock(0, Rect(0, 10, 0, 10), Rect(0, 10, 0, 10), Rect(0, 20, 0, 10))
    (e,) = expand_blocks([b], PartitionConfig(expansion_ratio=0.2))
    assert e.expanded_bounds == Rect(-2, 12, -2, 12)
    (z,) = expand_blocks([b], PartitionConfig(expansion_ratio=0.0))
    assert z.expanded_bounds == z.core_bounds
    nb = SceneBlock(1, Rect(10, 20, 0, 10), Rect(10, 20, 0, 10), Rect(0, 20, 0, 10))
    e0, e1 = expand_blocks([b, nb], PartitionConfig(expansion_ratio=0.2))
    assert e0.expanded_bounds.xmax - e1.expanded_bounds.xmin == pytest.approx(4.0)


def test_score_examples():
    v = view(0, (0, 0, 10), size=1000, f=500.0)
    assert score_viewpoint([(0.0, 0.0, 0.0)], v, 0.7) == 1
    assert score_viewpoint([(0.0, 0.0, 20.0)], v, 0.7) == 0
    assert score_viewpoint([], v, 0.7) == 0
    # pixel (u, v) = (140, 500): x = (140 - 500) * 10 / 500 in the camera frame
    p = (-7.2, 0.0, 0.0)
    assert score_viewpoint([p], v, 0.7) == 0
    assert score_viewpoint([(-7.0, 0.0, 0.0)], v, 0.7) == 1  # u = 150, on the boundary


def test_native_views_survive_selection():
    pts = [(x, y, 0.0) for x in (0, 10, 20, 30) for y in (0, 10, 20, 30)]
    scene = grid_scene(points=pts)
    cfg = PartitionConfig(2, 2, expansion_ratio=0.0, central_scope=0.05, views_per_block=4)
    blocks = expand_blocks(split_by_cameras(scene, cfg), cfg)
    selected = select_and_cull(blocks, scene, cfg)
    for a, b in zip(blocks, selected):
        assert set(b.view_ids) == set(a.native_view_ids)


def test_outsider_replaces_misaimed_native():
    # block around the origin; native camera 0 looks away, outsider camera 1 looks at the block
    tilt = np.array([[1.0, 0, 0], [0, np.cos(1.2), -np.sin(1.2)], [0, np.sin(1.2), np.cos(1.2)]])
    native = view(0, (0, 0, 10), R=NADIR @ tilt)
    outsider = view(1, (30, 0, 40))
    outsider = CameraView(1, 100.0, 100.0, 50.0, 50.0, 100, 100, *_look_at((30, 0, 40), (0, 0, 0)))
    pts = [SparsePoint(k, (x, y, 0.0), (0.5, 0.5, 0.5), {0}) for k, (x, y) in
           enumerate([(-1, -1), (1, 1), (0, 0), (1, -1), (-1, 1)])]
    scene = SfmScene([native, outsider], pts)
    block = SceneBlock(0, Rect(-2, 2, -2, 2), Rect(-2, 2, -2, 2), Rect(-2, 2, -2, 2), (0,), native_view_ids=(0,))
    assert score_viewpoint(scene.point_positions, outsider, 0.7) > score_viewpoint(scene.point_positions, native, 0.7)
    (sel,) = select_and_cull([block], scene, PartitionConfig(views_per_block=1))
    assert sel.view_ids == (1,)


def _look_at(eye, target):
    eye, target = np.asarray(eye, float), np.asarray(target, float)
    z = target - eye
    z /= np.linalg.norm(z)
    x = np.cross(z, [0, 1.0, 0])
    x /= np.linalg.norm(x)
    y = np.cross(z, x)
    R = np.stack([x, y, z])
    return R, -R @ eye


def test_tie_break_by_lower_id():
    views = [view(5, (0, 0, 10)), view(2, (0, 0, 10)), view(9, (0, 0, 10))]
    pts = [SparsePoint(0, (0, 0, 0), (0.5, 0.5, 0.5), {2})]
    block = SceneBlock(0, Rect(-1, 1, -1, 1), Rect(-1, 1, -1, 1), Rect(-1, 1, -1, 1))
    (sel,) = select_and_cull([block], SfmScene(views, pts), PartitionConfig(views_per_block=2))
    assert sel.view_ids == (2, 5)


def test_budget_over_total_warns():
    scene = grid_scene(2, 2)
    cfg = PartitionConfig(views_per_block=10)
    with pytest.warns(UserWarning):
        (b,) = select_and_cull(expand_blocks(split_by_cameras(scene, cfg), cfg), scene, cfg)
    assert len(b.view_ids) == 4


def test_augment_rules():
    views = [view(0, (0, 0, 10)), view(1, (50, 0, 10))]
    pts = [
        SparsePoint(0, (100, 100, 0), (0.5, 0.5, 0.5), {0}),  # outside, tracked by a selected view
        SparsePoint(1, (0.5, 0.5, 0), (0.5, 0.5, 0.5), {1}),  # inside, tracked elsewhere
        SparsePoint(2, (0.2, 0.1, 0), (0.5, 0.5, 0.5), {0}),  # both
        SparsePoint(3, (100, -100, 0), (0.5, 0.5, 0.5), {1}),  # neither
    ]
    block = SceneBlock(0, Rect(-1, 1, -1, 1), Rect(-1, 1, -1, 1), Rect(-1, 1, -1, 1), view_ids=(0,))
    (b,) = augment_points([block], SfmScene(views, pts))
    assert b.point_ids == frozenset({0, 1, 2})


def _tiles_exactly(blocks, rect, rng):
    area = sum(b.core_bounds.width * b.core_bounds.height for b in blocks)
    if abs(area - rect.width * rect.height) > 1e-9 * max(1.0, rect.width * rect.height):
        return False
    xy = np.c_[rng.uniform(rect.xmin, rect.xmax, 2000), rng.uniform(rect.ymin, rect.ymax, 2000)]
    hits = sum(b.core_bounds.contains(xy).astype(int) for b in blocks)
    return bool((hits == 1).all())


@pytest.mark.parametrize("seed", range(50))
def test_random_layout_invariants(seed):
    rng = np.random.default_rng(1000 + seed)
    scene = random_layout(seed)
    M, N = int(rng.integers(1, 4)), int(rng.integers(1, 4))
    cfg = PartitionConfig(M, N)
    blocks = split_by_cameras(scene, cfg)
    counts = [len(b.view_ids) for b in blocks]
    assert max(counts) - min(counts) <= 1
    assert sorted(v for b in blocks for v in b.view_ids) == sorted(v.id for v in scene.views)
    assert _tiles_exactly(blocks, scene_rect(scene), rng)
    full = partition_scene(scene, cfg)
    assert all(b.expanded_bounds.contains_rect(b.core_bounds) for b in full)
    assert all(len(b.view_ids) > 0 for b in full)


@pytest.mark.parametrize("seed", range(50))
def test_grid_capture_every_view_selected(seed):
    # jittered survey grid over a densely sampled ground; the default budget is twice the native share
    rng = np.random.default_rng(seed)
    nx, ny = (int(k) for k in rng.integers(3, 8, 2))
    c = np.array([(i * 40 + rng.normal(0, 3), j * 40 + rng.normal(0, 3), 100 + rng.normal(0, 5))
                  for i in range(nx) for j in range(ny)])
    lo, hi = c[:, :2].min(0) - 30, c[:, :2].max(0) + 30
    pts = np.c_[rng.uniform(lo, hi, (2000, 2)), rng.uniform(-5, 5, 2000)]
    scene = SfmScene([view(i, x) for i, x in enumerate(c)],
                     [SparsePoint(k, p, (0.5, 0.5, 0.5), {0}) for k, p in enumerate(pts)])
    M, N = (int(k) for k in rng.integers(1, 4, 2))
    blocks = partition_scene(scene, PartitionConfig(M, N))
    assert set().union(*(b.view_ids for b in blocks)) == set(range(len(c)))


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2**32 - 1), st.floats(0.05, 1.0), st.floats(0.05, 1.0))
def test_score_monotone_in_scope(seed, s1, s2):
    scene = random_layout(seed % 10_000, n=6)
    lo, hi = sorted((s1, s2))
    pts = scene.point_positions
    for v in scene.views:
        assert score_viewpoint(pts, v, lo) <= score_viewpoint(pts, v, hi)


def test_manifest_roundtrip(tmp_path):
    scene = random_layout(3)
    blocks = partition_scene(scene, PartitionConfig(2, 2))
    write_blocks(blocks, tmp_path)
    back = read_blocks(tmp_path)
    assert [(b.id, b.core_bounds, b.expanded_bounds, b.view_ids, b.point_ids) for b in back] == \
           [(b.id, b.core_bounds, b.expanded_bounds, b.view_ids, b.point_ids) for b in blocks]
