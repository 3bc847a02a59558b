"""Per-block optimization, densification, block-parallel execution and merging."""

from __future__ import annotations

import io
import json
import logging
import math
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, fields, replace
from multiprocessing import get_context
from pathlib import Path

import numpy as np
import torch

from .gaussian_model import GaussianScene, init_from_sparse, _logit
from .losses import (LossReport, LossWeights, ReprojectionPair, depth_normal_loss, multiview_geometric_loss,
                     nearest_view, photometric_loss)
from .partitioner import SceneBlock
from .renderer import render_view
from .scene_io import SfmScene, read_image

log = logging.getLogger(__name__)

CHECKPOINT_VERSION = 1


class TrainingError(RuntimeError):
    pass


class ConfigError(ValueError):
    pass


class MergeError(ValueError):
    pass


class TrainingDiverged(TrainingError):
    def __init__(self, message, checkpoint):
        super().__init__(message)
        self.checkpoint = checkpoint


# keys accepted with a section prefix in flat documents
_ALIASES = {
    "loss.lambda_n": "lambda_n",
    "loss.lambda_geo": "lambda_geo",
    "loss.lambda_photo": "lambda_photo",
    "loss.lambda_dssim": "lambda_dssim",
    "loss.geo_threshold_px": "geo_threshold_px",
    "loss.geometric_start_iter": "geometric_start",
}


@dataclass
class TrainConfig:
    total_iters: int = 50_000
    densify_start: int = 500
    densify_end: int = 30_000
    densify_interval: int = 100
    geometric_start: int = 7_000
    opacity_reset_interval: int = 3_000
    reset_opacity_after_geometric: bool = False
    grad_threshold: float = 0.0002
    percent_dense: float = 0.01
    min_opacity: float = 0.005
    max_gaussians: int = 0  # 0 = unbounded
    # learning rates (3DGS defaults); positions are scaled by the block extent
    lr_position_init: float = 0.00016
    lr_position_final: float = 0.0000016
    lr_position_max_steps: int = 30_000
    lr_feature: float = 0.0025
    lr_opacity: float = 0.05
    lr_scaling: float = 0.005
    lr_rotation: float = 0.001
    sh_degree: int = 3
    sh_increase_interval: int = 1000
    init_opacity: float = 0.1
    lambda_photo: float = 1.0
    lambda_dssim: float = 0.2
    lambda_n: float = 0.05
    lambda_geo: float = 0.05
    geo_threshold_px: float = 1.0
    use_geometric: bool = True
    seed: int = 0
    log_interval: int = 0

    def __post_init__(self):
        if self.total_iters < 0:
            raise ConfigError("total_iters must be >= 0")
        # total_iters = 0 is the init-only mode; the schedule invariants apply to real runs
        if self.total_iters > 0:
            if not 0 <= self.densify_start < self.densify_end <= self.total_iters:
                raise ConfigError("need 0 <= densify_start < densify_end <= total_iters")
            if not 0 <= self.geometric_start <= self.total_iters:
                raise ConfigError("geometric_start must lie in [0, total_iters]")
        if self.densify_interval < 1 or self.sh_increase_interval < 1:
            raise ConfigError("intervals must be >= 1")
        if not 0 <= self.sh_degree <= 3:
            raise ConfigError("sh_degree must lie in [0, 3]")
        if self.geo_threshold_px <= 0:
            raise ConfigError("geo_threshold_px must be positive")

    @property
    def weights(self) -> LossWeights:
        return LossWeights(self.lambda_photo, self.lambda_n, self.lambda_geo)

    def to_flat(self) -> dict:
        return asdict(self)

    @classmethod
    def from_flat(cls, doc: dict) -> "TrainConfig":
        known = {f.name: f for f in fields(cls)}
        kw = {}
        for key, val in doc.items():
            name = _ALIASES.get(key, key[len("train."):] if key.startswith("train.") else key)
            if name not in known:
                raise ConfigError(f"unknown training key {key!r}")
            typ = known[name].type
            try:
                if typ in ("bool", bool):
                    if not isinstance(val, bool):
                        raise TypeError("expected true/false")
                    kw[name] = val
                elif typ in ("int", int):
                    if isinstance(val, bool) or float(val) != int(val):
                        raise TypeError("expected an integer")
                    kw[name] = int(val)
                else:
                    kw[name] = float(val)
            except (TypeError, ValueError) as e:
                raise ConfigError(f"bad value for {key!r}: {val!r} ({e})") from e
        return cls(**kw)


@dataclass
class BlockCheckpoint:
    block_id: int
    scene: GaussianScene
    iteration: int
    loss_history: list = field(default_factory=list)
    scene_extent: float = 1.0
    status: str = "complete"

    def to_bytes(self) -> bytes:
        meta = dict(version=CHECKPOINT_VERSION, block_id=self.block_id, iteration=self.iteration,
                    scene_extent=self.scene_extent, status=self.status)
        buf = io.BytesIO()
        np.savez(buf, meta=np.frombuffer(json.dumps(meta).encode(), dtype=np.uint8),
                 scene=np.frombuffer(self.scene.to_bytes(), dtype=np.uint8),
                 loss=np.asarray(self.loss_history, dtype=np.float64))
        return buf.getvalue()

    @classmethod
    def from_bytes(cls, data: bytes) -> "BlockCheckpoint":
        with np.load(io.BytesIO(data)) as z:
            meta = json.loads(z["meta"].tobytes().decode())
            if meta.get("version") != CHECKPOINT_VERSION:
                raise TrainingError(f"unsupported checkpoint version {meta.get('version')}")
            scene = GaussianScene.from_bytes(z["scene"].tobytes())
            loss = z["loss"].tolist()
        return cls(meta["block_id"], scene, meta["iteration"], loss, meta["scene_extent"], meta["status"])

    def save(self, path) -> None:
        Path(path).write_bytes(self.to_bytes())

    @classmethod
    def load(cls, path) -> "BlockCheckpoint":
        return cls.from_bytes(Path(path).read_bytes())


# ---------------------------------------------------------------------------
# optimizer


class MaskedAdam:
    """Adam over per-Gaussian rows; rows whose gradient is exactly zero are left untouched.

    Moments live in plain tensors so densification can gather, extend and
    reset them.
    """

    def __init__(self, params: dict, lrs: dict, betas=(0.9, 0.999), eps=1e-15):
        self.params = params
        self.lrs = dict(lrs)
        self.b1, self.b2 = betas
        self.eps = eps
        self.m = {k: torch.zeros_like(p) for k, p in params.items()}
        self.v = {k: torch.zeros_like(p) for k, p in params.items()}
        self.steps = 0

    @torch.no_grad()
    def step(self):
        self.steps += 1
        bc1 = 1 - self.b1 ** self.steps
        bc2 = 1 - self.b2 ** self.steps
        for k, p in self.params.items():
            g = p.grad
            if g is None:
                continue
            rows = (g.reshape(g.shape[0], -1) != 0).any(1)
            if not bool(rows.any()):
                continue
            rows = rows.reshape((-1,) + (1,) * (g.dim() - 1))
            m, v = self.m[k], self.v[k]
            torch.where(rows, self.b1 * m + (1 - self.b1) * g, m, out=m)
            torch.where(rows, self.b2 * v + (1 - self.b2) * g * g, v, out=v)
            upd = (m / bc1) / (torch.sqrt(v / bc2) + self.eps)
            p.sub_(torch.where(rows, self.lrs[k] * upd, torch.zeros_like(upd)))

    def zero_grad(self):
        for p in self.params.values():
            p.grad = None

    def rebind(self, params: dict, source: torch.Tensor):
        """Point at new parameter tensors; ``source[i]`` is the old row of new row i or -1 (fresh moments)."""
        keep = source >= 0
        for k, p in params.items():
            for store in (self.m, self.v):
                old = store[k]
                new = torch.zeros_like(p)
                new[keep] = old[source[keep]]
                store[k] = new
        self.params = params

    def reset(self, key: str):
        self.m[key].zero_()
        self.v[key].zero_()


def _param_lrs(cfg: TrainConfig, extent: float) -> dict:
    return {
        "means": cfg.lr_position_init * extent,
        "quats": cfg.lr_rotation,
        "log_scales": cfg.lr_scaling,
        "opacity_logits": cfg.lr_opacity,
        "sh": cfg.lr_feature,
    }


def position_lr(cfg: TrainConfig, it: int, extent: float) -> float:
    """Log-linear decay from the initial to the final position rate."""
    t = min(max(it / max(cfg.lr_position_max_steps, 1), 0.0), 1.0)
    return math.exp((1 - t) * math.log(cfg.lr_position_init) + t * math.log(cfg.lr_position_final)) * extent


def _sh_grad_scale(scene: GaussianScene, lr_rest_ratio: float = 1.0 / 20.0):
    # 3DGS trains the higher SH bands 20x slower than the DC term
    s = torch.ones_like(scene.sh)
    s[:, 1:] = lr_rest_ratio
    return s


# ---------------------------------------------------------------------------
# densification


def screen_gradients(grad_means: torch.Tensor, scene: GaussianScene, view) -> torch.Tensor:
    """Norm of the mean gradient expressed per NDC unit of screen motion.

    A camera-frame shift dx at depth z moves the projection by fx*dx/z pixels,
    i.e. 2*fx*dx/(z*W) NDC units.
    """
    R = torch.tensor(np.array(view.R), dtype=grad_means.dtype)
    t = torch.tensor(np.array(view.t), dtype=grad_means.dtype)
    g_cam = grad_means @ R.T
    z = (scene.means.detach() @ R.T + t)[:, 2].abs().clamp_min(1e-9)
    gx = g_cam[:, 0] * z / view.fx * (view.width / 2.0)
    gy = g_cam[:, 1] * z / view.fy * (view.height / 2.0)
    return torch.sqrt(gx * gx + gy * gy)


def densify_and_prune(scene: GaussianScene, grad_avg: torch.Tensor, cfg: TrainConfig, extent: float,
                      generator: torch.Generator | None = None, prune_big: bool = False,
                      max_count: int = 0):
    """Clone small high-gradient Gaussians, split large ones, prune transparent ones.

    ``max_count`` > 0 caps growth: only the highest-gradient candidates that
    fit under the cap are densified. Returns (new scene, source index per new
    Gaussian with -1 for fresh ones).
    """
    with torch.no_grad():
        n = len(scene)
        dt = scene.dtype
        smax = scene.scales.max(1).values
        sel = grad_avg >= cfg.grad_threshold
        if max_count > 0 and n + int(sel.sum()) > max_count:
            # each clone or split adds exactly one Gaussian
            room = max(max_count - n, 0)
            order = torch.argsort(torch.where(sel, grad_avg, torch.full_like(grad_avg, -1.0)), descending=True,
                                  stable=True)
            sel = torch.zeros(n, dtype=torch.bool)
            sel[order[:room]] = True
        small = smax <= cfg.percent_dense * extent
        clone = sel & small
        split = sel & ~small

        parts = {k: [] for k in GaussianScene.PARAM_NAMES}
        src = []
        keep_orig = ~split
        for k, p in scene.params().items():
            parts[k].append(p.detach()[keep_orig])
        src.append(torch.nonzero(keep_orig)[:, 0])
        # clones are exact copies at the same mean
        for k, p in scene.params().items():
            parts[k].append(p.detach()[clone])
        src.append(torch.full((int(clone.sum()),), -1, dtype=torch.long))
        # splits: two children sampled from the parent distribution, scale / 1.6
        idx = torch.nonzero(split)[:, 0]
        if idx.numel():
            idx2 = idx.repeat(2)
            s = scene.scales.detach()[idx2]
            noise = torch.randn(idx2.numel(), 3, generator=generator, dtype=torch.float64).to(dt)
            Rm = scene.rotations().detach()[idx2]
            offs = (Rm @ (noise * s)[..., None])[..., 0]
            parts["means"].append(scene.means.detach()[idx2] + offs)
            parts["log_scales"].append(scene.log_scales.detach()[idx2] - math.log(1.6))
            for k in ("quats", "opacity_logits", "sh"):
                parts[k].append(getattr(scene, k).detach()[idx2])
            src.append(torch.full((idx2.numel(),), -1, dtype=torch.long))
        new = {k: torch.cat(v, 0) for k, v in parts.items()}
        source = torch.cat(src, 0)

        sigma = torch.sigmoid(new["opacity_logits"])
        prune = sigma < cfg.min_opacity
        if prune_big:
            prune |= torch.exp(new["log_scales"]).max(1).values > 0.1 * extent
        keep = ~prune
        out = GaussianScene(**{k: v[keep].clone() for k, v in new.items()},
                            sh_degree=scene.sh_degree, background=scene.background)
        return out, source[keep]


def reset_opacity(scene: GaussianScene, ceiling: float = 0.01) -> None:
    with torch.no_grad():
        cap = torch.full_like(scene.opacity_logits, _logit(ceiling))
        scene.opacity_logits.copy_(torch.minimum(scene.opacity_logits, cap))


# ---------------------------------------------------------------------------
# training


def block_extent(views) -> float:
    """Camera-spread radius times 1.1 (at least the mean altitude spread proxy)."""
    c = np.array([v.center for v in views])
    r = float(np.linalg.norm(c - c.mean(0), axis=1).max()) if len(c) > 1 else 0.0
    return 1.1 * r if r > 0 else 1.0


def _load_images(scene: SfmScene, view_ids, images) -> dict:
    out = {}
    for vid in view_ids:
        if images is not None and vid in images:
            img = np.asarray(images[vid], dtype=np.float32)
        else:
            ref = scene.view_by_id[vid].image_ref
            if not ref or not Path(ref).exists():
                raise TrainingError(f"no image available for view {vid}")
            img = read_image(ref).astype(np.float32)
        out[vid] = torch.from_numpy(np.ascontiguousarray(img[..., :3]))
    return out


def initial_scene(block: SceneBlock, scene: SfmScene, cfg: TrainConfig, extent: float) -> GaussianScene:
    pts = scene.subset_points(sorted(block.point_ids))
    return init_from_sparse(pts, extent, sh_degree=cfg.sh_degree, opacity=cfg.init_opacity,
                            background=(0.0, 0.0, 0.0), dtype=torch.float32)


def train_block(block: SceneBlock, scene: SfmScene, cfg: TrainConfig, images: dict | None = None,
                progress=None) -> BlockCheckpoint:
    """Optimize the Gaussians of one block; deterministic for a fixed ``cfg.seed``."""
    if not block.view_ids or not block.point_ids:
        raise TrainingError(f"block {block.id} has no views or no points")
    torch.manual_seed(cfg.seed)
    rng = np.random.default_rng(cfg.seed)
    gen = torch.Generator().manual_seed(cfg.seed)
    views = {vid: scene.view_by_id[vid] for vid in block.view_ids}
    extent = block_extent(list(views.values()))
    gs = initial_scene(block, scene, cfg, extent)
    history: list = []
    if cfg.total_iters == 0:
        return BlockCheckpoint(block.id, gs, 0, history, extent)

    imgs = _load_images(scene, block.view_ids, images)
    centers = {vid: v.center for vid, v in views.items()}
    neighbours = {vid: nearest_view(vid, views.keys(), centers) for vid in views}
    gs.requires_grad_(True)
    opt = MaskedAdam(gs.params(), _param_lrs(cfg, extent))
    grad_acc = torch.zeros(len(gs))
    grad_cnt = torch.zeros(len(gs))
    order: list = []
    last_good = gs.detach()
    t_start = time.time()

    for it in range(1, cfg.total_iters + 1):
        opt.lrs["means"] = position_lr(cfg, it, extent)
        if it % cfg.sh_increase_interval == 0 and gs.sh_degree < cfg.sh_degree:
            gs.sh_degree += 1
        if not order:
            order = list(rng.permutation(sorted(views)))
        vid = int(order.pop())
        view = views[vid]

        bundle = render_view(gs, view, extent)
        photo = photometric_loss(bundle.color, imgs[vid], cfg.lambda_dssim)
        zero = photo * 0.0
        l_n, l_geo = zero, zero
        geometric = cfg.use_geometric and it >= cfg.geometric_start
        if geometric:
            if cfg.lambda_n > 0:
                l_n = depth_normal_loss(bundle, view)
            nb = neighbours[vid]
            if cfg.lambda_geo > 0 and nb is not None:
                b_n = render_view(gs, views[nb], extent)
                pair = ReprojectionPair(view, bundle.depth, views[nb], b_n.depth, cfg.geo_threshold_px)
                l_geo = multiview_geometric_loss(pair)
        report = LossReport(photo, l_n, l_geo, cfg.weights)
        total = report.total
        if not torch.isfinite(total):
            ck = BlockCheckpoint(block.id, last_good, it - 1, history, extent, status="diverged")
            raise TrainingDiverged(f"block {block.id}: non-finite loss at iteration {it}", ck)
        opt.zero_grad()
        total.backward()
        with torch.no_grad():
            if gs.sh.grad is not None:
                gs.sh.grad.mul_(_sh_grad_scale(gs))
            for p in gs.params().values():
                if p.grad is not None and not torch.isfinite(p.grad).all():
                    ck = BlockCheckpoint(block.id, last_good, it - 1, history, extent, status="diverged")
                    raise TrainingDiverged(f"block {block.id}: non-finite gradient at iteration {it}", ck)
            counts, flat, _ = bundle.signature
            visible = torch.zeros(len(gs), dtype=torch.bool)
            if len(flat):
                visible[torch.from_numpy(np.unique(flat))] = True
            if it < cfg.densify_end and gs.means.grad is not None:
                g = screen_gradients(gs.means.grad, gs, view)
                grad_acc[visible] += g[visible]
                grad_cnt[visible] += 1
        opt.step()
        with torch.no_grad():
            gs.normalize_quats_()
        history.append(float(photo.detach()))

        if cfg.densify_start < it < cfg.densify_end and it % cfg.densify_interval == 0:
            avg = torch.where(grad_cnt > 0, grad_acc / grad_cnt.clamp_min(1), torch.zeros_like(grad_acc))
            prune_big = it > cfg.opacity_reset_interval
            gs.requires_grad_(False)
            gs, src = densify_and_prune(gs, avg, cfg, extent, gen, prune_big=prune_big,
                                         max_count=cfg.max_gaussians)
            gs.requires_grad_(True)
            opt.rebind(gs.params(), src)
            grad_acc = torch.zeros(len(gs))
            grad_cnt = torch.zeros(len(gs))
        reset_allowed = cfg.reset_opacity_after_geometric or not (cfg.use_geometric and it >= cfg.geometric_start)
        if (cfg.opacity_reset_interval > 0 and it % cfg.opacity_reset_interval == 0 and it < cfg.densify_end
                and reset_allowed):
            reset_opacity(gs)
            opt.reset("opacity_logits")
        last_good = gs.detach()
        if cfg.log_interval and it % cfg.log_interval == 0:
            msg = (f"block {block.id} it {it} n={len(gs)} photo={float(photo):.4f} "
                   f"ln={float(l_n):.4f} lgeo={float(l_geo):.4f} {time.time() - t_start:.0f}s")
            log.info(msg)
            if progress is not None:
                progress(msg)

    return BlockCheckpoint(block.id, gs.detach(), cfg.total_iters, history, extent)


def _train_job(args):
    block, scene, cfg, images = args
    torch.set_num_threads(1)
    return train_block(block, scene, cfg, images).to_bytes()


def block_seed(seed: int, block_id: int) -> int:
    return int(np.random.SeedSequence([seed, block_id]).generate_state(1)[0])


def train_blocks(blocks, scene: SfmScene, cfg: TrainConfig, images: dict | None = None, jobs: int = 1) -> list:
    """Train every block as an independent job; results come back in block order.

    Each block gets its own seed derived from ``cfg.seed`` and the block id.
    """
    cfgs = [replace(cfg, seed=block_seed(cfg.seed, b.id)) for b in blocks]
    if jobs <= 1 or len(blocks) <= 1:
        return [train_block(b, scene, c, images) for b, c in zip(blocks, cfgs)]
    sub = []
    for b, c in zip(blocks, cfgs):
        imgs = None if images is None else {v: images[v] for v in b.view_ids if v in images}
        sub.append((b, scene, c, imgs))
    with ProcessPoolExecutor(max_workers=jobs, mp_context=get_context("spawn")) as ex:
        return [BlockCheckpoint.from_bytes(x) for x in ex.map(_train_job, sub)]


# ---------------------------------------------------------------------------
# merging


def merge_blocks(checkpoints, blocks) -> GaussianScene:
    """Keep each block's Gaussians whose means lie in its (half-open) core and concatenate."""
    by_id = {b.id: b for b in blocks}
    bl = list(by_id.values())
    for i, a in enumerate(bl):
        for b in bl[i + 1:]:
            if a.core_bounds.overlap_area(b.core_bounds) > 1e-12:
                raise MergeError(f"cores of blocks {a.id} and {b.id} overlap")
    parts = []
    for ck in checkpoints:
        if ck.block_id not in by_id:
            raise MergeError(f"checkpoint for unknown block {ck.block_id}")
        own = by_id[ck.block_id].owns(ck.scene.means.detach().double().numpy())
        parts.append(ck.scene.subset(torch.from_numpy(own)))
    if not parts:
        raise MergeError("nothing to merge")
    return GaussianScene.concat(parts)
