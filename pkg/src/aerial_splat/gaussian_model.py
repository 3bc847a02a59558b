"""Gaussian primitives, covariance factorization and spherical-harmonics color."""

from __future__ import annotations

import io
import math
from dataclasses import dataclass, field

import numpy as np
import torch
from scipy.spatial import cKDTree

SH_C0 = 0.28209479177387814
SH_C1 = 0.4886025119029199
SH_C2 = (
    1.0925484305920792,
    -1.0925484305920792,
    0.31539156525252005,
    -1.0925484305920792,
    0.5462742152960396,
)
SH_C3 = (
    -0.5900435899266435,
    2.890611442640554,
    -0.4570457994644658,
    0.3731763325901154,
    -0.4570457994644658,
    1.445305721320277,
    -0.5900435899266435,
)

MIN_SCALE = 1e-7
INIT_OPACITY = 0.1
CHECKPOINT_VERSION = 1


class InitializationError(ValueError):
    pass


def num_sh_coeffs(degree: int) -> int:
    return (degree + 1) ** 2


def eval_sh(degree, sh, dirs):
    """Evaluate real SH up to ``degree``.

    ``sh`` has shape (..., K, 3) with K >= (degree+1)**2 and ``dirs`` (..., 3)
    unit vectors. Works for numpy arrays and torch tensors alike.
    """
    result = SH_C0 * sh[..., 0, :]
    if degree < 1:
        return result
    x = dirs[..., 0:1]
    y = dirs[..., 1:2]
    z = dirs[..., 2:3]
    result = result - SH_C1 * y * sh[..., 1, :] + SH_C1 * z * sh[..., 2, :] - SH_C1 * x * sh[..., 3, :]
    if degree < 2:
        return result
    xx, yy, zz = x * x, y * y, z * z
    xy, yz, xz = x * y, y * z, x * z
    result = (
        result
        + SH_C2[0] * xy * sh[..., 4, :]
        + SH_C2[1] * yz * sh[..., 5, :]
        + SH_C2[2] * (2.0 * zz - xx - yy) * sh[..., 6, :]
        + SH_C2[3] * xz * sh[..., 7, :]
        + SH_C2[4] * (xx - yy) * sh[..., 8, :]
    )
    if degree < 3:
        return result
    result = (
        result
        + SH_C3[0] * y * (3 * xx - yy) * sh[..., 9, :]
        + SH_C3[1] * xy * z * sh[..., 10, :]
        + SH_C3[2] * y * (4 * zz - xx - yy) * sh[..., 11, :]
        + SH_C3[3] * z * (2 * zz - 3 * xx - 3 * yy) * sh[..., 12, :]
        + SH_C3[4] * x * (4 * zz - xx - yy) * sh[..., 13, :]
        + SH_C3[5] * z * (xx - yy) * sh[..., 14, :]
        + SH_C3[6] * x * (xx - 3 * yy) * sh[..., 15, :]
    )
    return result


def rgb_to_sh_dc(rgb):
    return (rgb - 0.5) / SH_C0


def quat_to_rotmat(q):
    """(w, x, y, z) quaternion(s) to rotation matrices; normalizes first."""
    if isinstance(q, torch.Tensor):
        q = q / q.norm(dim=-1, keepdim=True)
        w, x, y, z = q.unbind(-1)
        rows = [
            1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y),
            2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x),
            2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y),
        ]
        return torch.stack(rows, dim=-1).reshape(*q.shape[:-1], 3, 3)
    q = np.asarray(q, dtype=np.float64)
    q = q / np.linalg.norm(q, axis=-1, keepdims=True)
    w, x, y, z = np.moveaxis(q, -1, 0)
    m = np.stack(
        [
            1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y),
            2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x),
            2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y),
        ],
        axis=-1,
    )
    return m.reshape(*q.shape[:-1], 3, 3)


def rotmat_to_quat(R: np.ndarray) -> np.ndarray:
    """Rotation matrix to (w, x, y, z) with w >= 0."""
    R = np.asarray(R, dtype=np.float64)
    Rxx, Ryx, Rzx, Rxy, Ryy, Rzy, Rxz, Ryz, Rzz = R.flat
    K = np.array(
        [
            [Rxx - Ryy - Rzz, 0, 0, 0],
            [Ryx + Rxy, Ryy - Rxx - Rzz, 0, 0],
            [Rzx + Rxz, Rzy + Ryz, Rzz - Rxx - Ryy, 0],
            [Ryz - Rzy, Rzx - Rxz, Rxy - Ryx, Rxx + Ryy + Rzz],
        ]
    ) / 3.0
    eigvals, eigvecs = np.linalg.eigh(K)
    q = eigvecs[[3, 0, 1, 2], np.argmax(eigvals)]
    if q[0] < 0:
        q = -q
    return q


def _sigmoid(x):
    return 1.0 / (1.0 + math.exp(-x))


def _logit(p):
    return math.log(p / (1.0 - p))


@dataclass
class GaussianPrimitive:
    """One Gaussian as plain numpy arrays (used for inspection and oracles)."""

    mean: np.ndarray
    rotation: np.ndarray  # (w, x, y, z)
    log_scale: np.ndarray
    opacity_logit: float
    sh_coeffs: np.ndarray = field(default_factory=lambda: np.zeros((1, 3)))

    def __post_init__(self):
        self.mean = np.asarray(self.mean, dtype=np.float64)
        rot = np.asarray(self.rotation, dtype=np.float64)
        self.rotation = rot / np.linalg.norm(rot)
        self.log_scale = np.asarray(self.log_scale, dtype=np.float64)
        self.sh_coeffs = np.asarray(self.sh_coeffs, dtype=np.float64).reshape(-1, 3)
        self.opacity_logit = float(self.opacity_logit)

    @classmethod
    def create(cls, mean, scale=(1.0, 1.0, 1.0), rotation=(1.0, 0.0, 0.0, 0.0), opacity=0.5, color=None, sh=None):
        """Build from activated values; ``opacity`` may be 0 or 1 exactly."""
        if sh is None:
            rgb = np.full(3, 0.5) if color is None else np.asarray(color, dtype=np.float64)
            sh = rgb_to_sh_dc(rgb)[None, :]
        if opacity <= 0.0:
            logit = -math.inf
        elif opacity >= 1.0:
            logit = math.inf
        else:
            logit = _logit(opacity)
        return cls(mean, rotation, np.log(np.asarray(scale, dtype=np.float64)), logit, sh)

    @property
    def opacity(self) -> float:
        if self.opacity_logit == math.inf:
            return 1.0
        if self.opacity_logit == -math.inf:
            return 0.0
        return _sigmoid(self.opacity_logit)

    @property
    def scale(self) -> np.ndarray:
        return np.exp(self.log_scale)

    @property
    def rotation_matrix(self) -> np.ndarray:
        return quat_to_rotmat(self.rotation)

    @property
    def sh_degree(self) -> int:
        return int(round(math.sqrt(self.sh_coeffs.shape[0]))) - 1

    def covariance(self) -> np.ndarray:
        return covariance(self)

    def eval_sh_color(self, view_dir) -> np.ndarray:
        return eval_sh_color(self, view_dir)


def covariance(g: GaussianPrimitive) -> np.ndarray:
    """R S S^T R^T."""
    M = g.rotation_matrix @ np.diag(g.scale)
    return M @ M.T


def eval_sh_color(g: GaussianPrimitive, view_dir) -> np.ndarray:
    d = np.asarray(view_dir, dtype=np.float64)
    return np.maximum(eval_sh(g.sh_degree, g.sh_coeffs, d) + 0.5, 0.0)


class GaussianScene:
    """Structure-of-arrays container of Gaussian parameters (torch tensors).

    Attributes are raw optimizable quantities: ``means`` (N,3), ``quats``
    (N,4), ``log_scales`` (N,3), ``opacity_logits`` (N,), ``sh`` (N,K,3).
    ``sh_degree`` is the degree currently evaluated by the renderer; ``sh``
    may hold more bands than that (progressive unlocking).
    """

    def __init__(self, means, quats, log_scales, opacity_logits, sh, sh_degree=None, background=(0.0, 0.0, 0.0)):
        self.means = torch.as_tensor(means)
        dtype = self.means.dtype if self.means.is_floating_point() else torch.float64
        self.means = self.means.to(dtype)
        self.quats = torch.as_tensor(quats, dtype=dtype)
        self.log_scales = torch.as_tensor(log_scales, dtype=dtype)
        self.opacity_logits = torch.as_tensor(opacity_logits, dtype=dtype).reshape(-1)
        self.sh = torch.as_tensor(sh, dtype=dtype)
        if self.sh.dim() == 2:
            self.sh = self.sh[:, None, :]
        max_degree = int(round(math.sqrt(self.sh.shape[1]))) - 1
        self.sh_degree = max_degree if sh_degree is None else int(sh_degree)
        self.background = tuple(float(c) for c in background)
        n = self.means.shape[0]
        for name in ("quats", "log_scales", "opacity_logits", "sh"):
            if getattr(self, name).shape[0] != n:
                raise ValueError(f"{name} has {getattr(self, name).shape[0]} rows, expected {n}")

    PARAM_NAMES = ("means", "quats", "log_scales", "opacity_logits", "sh")

    def __len__(self) -> int:
        return self.means.shape[0]

    @property
    def max_sh_degree(self) -> int:
        return int(round(math.sqrt(self.sh.shape[1]))) - 1

    @property
    def dtype(self):
        return self.means.dtype

    @property
    def opacities(self) -> torch.Tensor:
        return torch.sigmoid(self.opacity_logits)

    @property
    def scales(self) -> torch.Tensor:
        return torch.exp(self.log_scales)

    def rotations(self) -> torch.Tensor:
        return quat_to_rotmat(self.quats)

    def covariances(self) -> torch.Tensor:
        M = self.rotations() * self.scales[:, None, :]
        return M @ M.transpose(1, 2)

    def params(self) -> dict:
        return {name: getattr(self, name) for name in self.PARAM_NAMES}

    def _build(self, **tensors) -> "GaussianScene":
        return GaussianScene(sh_degree=self.sh_degree, background=self.background, **tensors)

    def detach(self) -> "GaussianScene":
        return self._build(**{k: v.detach().clone() for k, v in self.params().items()})

    def to(self, dtype) -> "GaussianScene":
        return self._build(**{k: v.detach().to(dtype) for k, v in self.params().items()})

    def requires_grad_(self, flag: bool = True) -> "GaussianScene":
        for v in self.params().values():
            v.requires_grad_(flag)
        return self

    def subset(self, index) -> "GaussianScene":
        return self._build(**{k: v.detach()[index] for k, v in self.params().items()})

    @staticmethod
    def concat(scenes: list["GaussianScene"]) -> "GaussianScene":
        if not scenes:
            raise ValueError("nothing to concatenate")
        first = scenes[0]
        degree = max(s.max_sh_degree for s in scenes)
        parts = {k: [] for k in GaussianScene.PARAM_NAMES}
        for s in scenes:
            for k, v in s.params().items():
                v = v.detach()
                if k == "sh" and v.shape[1] < num_sh_coeffs(degree):
                    pad = v.new_zeros(v.shape[0], num_sh_coeffs(degree) - v.shape[1], 3)
                    v = torch.cat([v, pad], dim=1)
                parts[k].append(v)
        return GaussianScene(
            sh_degree=max(s.sh_degree for s in scenes),
            background=first.background,
            **{k: torch.cat(v, dim=0) for k, v in parts.items()},
        )

    def primitive(self, i: int) -> GaussianPrimitive:
        return GaussianPrimitive(
            self.means[i].detach().double().numpy(),
            self.quats[i].detach().double().numpy(),
            self.log_scales[i].detach().double().numpy(),
            float(self.opacity_logits[i]),
            self.sh[i, : num_sh_coeffs(self.sh_degree)].detach().double().numpy(),
        )

    @classmethod
    def from_primitives(cls, prims: list[GaussianPrimitive], background=(0.0, 0.0, 0.0), dtype=torch.float64):
        if not prims:
            return cls.empty(background=background, dtype=dtype)
        k = max(p.sh_coeffs.shape[0] for p in prims)
        sh = np.zeros((len(prims), k, 3))
        for i, p in enumerate(prims):
            sh[i, : p.sh_coeffs.shape[0]] = p.sh_coeffs
        t = lambda a: torch.as_tensor(np.asarray(a, dtype=np.float64), dtype=dtype)
        return cls(
            t([p.mean for p in prims]),
            t([p.rotation for p in prims]),
            t([p.log_scale for p in prims]),
            t([p.opacity_logit for p in prims]),
            t(sh),
            background=background,
        )

    @classmethod
    def empty(cls, sh_degree=0, background=(0.0, 0.0, 0.0), dtype=torch.float64):
        k = num_sh_coeffs(sh_degree)
        return cls(
            torch.zeros(0, 3, dtype=dtype),
            torch.zeros(0, 4, dtype=dtype),
            torch.zeros(0, 3, dtype=dtype),
            torch.zeros(0, dtype=dtype),
            torch.zeros(0, k, 3, dtype=dtype),
            background=background,
        )

    def is_finite(self) -> bool:
        return all(bool(torch.isfinite(v).all()) for v in self.params().values())

    def normalize_quats_(self):
        with torch.no_grad():
            self.quats /= self.quats.norm(dim=-1, keepdim=True)

    def to_bytes(self) -> bytes:
        buf = io.BytesIO()
        np.savez(
            buf,
            version=np.array(CHECKPOINT_VERSION),
            sh_degree=np.array(self.sh_degree),
            background=np.array(self.background),
            **{k: v.detach().cpu().double().numpy() for k, v in self.params().items()},
        )
        return buf.getvalue()

    @classmethod
    def from_bytes(cls, data: bytes, dtype=torch.float32) -> "GaussianScene":
        with np.load(io.BytesIO(data)) as z:
            version = int(z["version"])
            if version != CHECKPOINT_VERSION:
                raise ValueError(f"unsupported checkpoint version {version}")
            return cls(
                **{k: torch.as_tensor(z[k], dtype=dtype) for k in cls.PARAM_NAMES},
                sh_degree=int(z["sh_degree"]),
                background=tuple(z["background"]),
            )


def init_from_sparse(points, scene_extent: float, sh_degree: int = 3, opacity: float = INIT_OPACITY,
                     background=(0.0, 0.0, 0.0), dtype=torch.float32) -> GaussianScene:
    """One isotropic Gaussian per sparse point.

    ``points`` is a sequence of objects with ``position`` and ``color`` or an
    (N,3) array of positions. The scale is the mean distance to the three
    nearest neighbours.
    """
    if isinstance(points, np.ndarray):
        xyz = np.asarray(points, dtype=np.float64).reshape(-1, 3)
        rgb = np.full_like(xyz, 0.5)
    else:
        points = list(points)
        xyz = np.array([p.position for p in points], dtype=np.float64).reshape(-1, 3)
        rgb = np.array([p.color for p in points], dtype=np.float64).reshape(-1, 3)
    n = xyz.shape[0]
    if n == 0:
        raise InitializationError("cannot initialize Gaussians from an empty point set")
    if not np.isfinite(xyz).all():
        raise InitializationError("non-finite point positions")

    if n > 1:
        k = min(3, n - 1)
        dist, _ = cKDTree(xyz).query(xyz, k=k + 1)
        scale = np.asarray(dist, dtype=np.float64).reshape(n, k + 1)[:, 1:].mean(axis=1)
    else:
        scale = np.array([0.01 * scene_extent])
    scale = np.clip(scale, MIN_SCALE * 10, scene_extent)

    sh = np.zeros((n, num_sh_coeffs(sh_degree), 3))
    sh[:, 0, :] = rgb_to_sh_dc(rgb)
    quats = np.zeros((n, 4))
    quats[:, 0] = 1.0
    return GaussianScene(
        torch.as_tensor(xyz, dtype=dtype),
        torch.as_tensor(quats, dtype=dtype),
        torch.as_tensor(np.log(np.repeat(scale[:, None], 3, axis=1)), dtype=dtype),
        torch.full((n,), _logit(opacity), dtype=dtype),
        torch.as_tensor(sh, dtype=dtype),
        sh_degree=0,
        background=background,
    )
