"""Static 3D Gaussian math: parameterization, covariance, projection, SH color."""
from __future__ import annotations

from dataclasses import dataclass
from typing import List, NamedTuple, Optional, Sequence

import numpy as np

from . import ndiff as nd
from .errors import DomainError, ShapeError
from .ndiff import Tensor

SH_C0 = 0.28209479177387814
SH_C1 = 0.4886025119029199
SH_C2 = (1.0925484305920792, -1.0925484305920792, 0.31539156525252005,
         -1.0925484305920792, 0.5462742152960396)
SH_C3 = (-0.5900435899266435, 2.890611442640554, -0.4570457994644658,
         0.3731763325901154, -0.4570457994644658, 1.445305721320277,
         -0.5900435899266435)

LOWPASS = 0.3
FIELDS = ("means", "quats", "log_scales", "opacity_logits", "sh")


def sh_count(degree: int) -> int:
    return (degree + 1) ** 2


@dataclass
class GaussianSet:
    """Canonical or deformed Gaussian primitives.

    Every field is a :class:`Tensor`; the canonical set holds trainable
    leaves while deformed sets are graph nodes built on top of them.
    Scales are stored as logs and opacity as logits.
    """

    means: Tensor  # n x 3
    quats: Tensor  # n x 4, [w, x, y, z]
    log_scales: Tensor  # n x 3
    opacity_logits: Tensor  # n x 1
    sh: Tensor  # n x C x 3
    sh_degree: int = 1

    def __post_init__(self):
        for name in FIELDS:
            val = getattr(self, name)
            if not isinstance(val, Tensor):
                setattr(self, name, nd.as_tensor(val))
        n = self.means.shape[0]
        c = sh_count(self.sh_degree)
        expected = {"means": (n, 3), "quats": (n, 4), "log_scales": (n, 3),
                    "opacity_logits": (n, 1), "sh": (n, c, 3)}
        for name, shape in expected.items():
            if getattr(self, name).shape != shape:
                raise ShapeError(f"{name} has shape {getattr(self, name).shape}, expected {shape}")

    @property
    def n(self) -> int:
        return self.means.shape[0]

    def __len__(self) -> int:
        return self.n

    @classmethod
    def from_arrays(cls, means, quats, log_scales, opacity_logits, sh, sh_degree=1,
                    requires_grad=False) -> "GaussianSet":
        make = (lambda a: nd.Tensor(a, requires_grad=True)) if requires_grad else nd.Tensor
        return cls(make(means), make(quats), make(log_scales),
                   make(np.reshape(opacity_logits, (-1, 1))), make(sh), sh_degree)

    def parameters(self) -> List[Tensor]:
        return [getattr(self, f) for f in FIELDS]

    def arrays(self) -> dict:
        return {f: getattr(self, f).data for f in FIELDS}

    def detach(self) -> "GaussianSet":
        return GaussianSet(*(getattr(self, f).detach() for f in FIELDS), self.sh_degree)

    def copy(self, requires_grad: Optional[bool] = None) -> "GaussianSet":
        out = []
        for f in FIELDS:
            t = getattr(self, f)
            rg = t.requires_grad if requires_grad is None else requires_grad
            out.append(nd.Tensor(t.data, requires_grad=rg))
        return GaussianSet(*out, self.sh_degree)

    def opacities(self) -> np.ndarray:
        return nd.sigmoid(self.opacity_logits.data).data[:, 0]

    def subset(self, idx) -> "GaussianSet":
        return GaussianSet(*(getattr(self, f)[idx] for f in FIELDS), self.sh_degree)


@dataclass
class Camera:
    """Pinhole camera. ``R``/``t`` map world points to camera space: x_c = R x_w + t."""

    R: np.ndarray
    t: np.ndarray
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int
    z_near: float = 0.01

    def __post_init__(self):
        self.R = np.asarray(self.R, dtype=np.float64).reshape(3, 3)
        self.t = np.asarray(self.t, dtype=np.float64).reshape(3)
        if self.fx <= 0 or self.fy <= 0:
            raise DomainError("focal lengths must be positive")
        if np.abs(self.R @ self.R.T - np.eye(3)).max() > 1e-9:
            raise DomainError("camera rotation is not orthonormal")

    @property
    def center(self) -> np.ndarray:
        return -self.R.T @ self.t

    def to_row(self) -> np.ndarray:
        """12 extrinsic values (R row-major, then t) followed by fx, fy, cx, cy."""
        return np.concatenate([self.R.reshape(-1), self.t, [self.fx, self.fy, self.cx, self.cy]])

    @classmethod
    def from_row(cls, row: Sequence[float], width: int, height: int, z_near: float = 0.01) -> "Camera":
        row = np.asarray(row, dtype=np.float64)
        if row.shape != (16,):
            raise ShapeError("camera row needs 16 values")
        return cls(row[:9].reshape(3, 3), row[9:12], row[12], row[13], row[14], row[15],
                   int(width), int(height), z_near)

    @classmethod
    def look_at(cls, eye, target, up, fx, fy, width, height, z_near=0.01) -> "Camera":
        eye, target, up = (np.asarray(v, dtype=np.float64) for v in (eye, target, up))
        fwd = target - eye
        fwd /= np.linalg.norm(fwd)
        right = np.cross(fwd, up)
        right /= np.linalg.norm(right)
        down = np.cross(fwd, right)
        R = np.stack([right, down, fwd])
        return cls(R, -R @ eye, fx, fy, (width - 1) / 2.0, (height - 1) / 2.0,
                   width, height, z_near)


def quat_to_rot(q) -> Tensor:
    """Unit-normalize ``q`` (..., 4) and return rotation matrices (..., 3, 3)."""
    q = nd.as_tensor(q)
    norm = nd.l2norm(q, axis=-1, keepdims=True)
    if np.any(norm.data == 0):
        raise DomainError("zero quaternion")
    q = q / norm
    w, x, y, z = (q[..., i] for i in range(4))
    xx, yy, zz = x * x, y * y, z * z
    xy, xz, yz = x * y, x * z, y * z
    wx, wy, wz = w * x, w * y, w * z
    entries = [1.0 - 2.0 * (yy + zz), 2.0 * (xy - wz), 2.0 * (xz + wy),
               2.0 * (xy + wz), 1.0 - 2.0 * (xx + zz), 2.0 * (yz - wx),
               2.0 * (xz - wy), 2.0 * (yz + wx), 1.0 - 2.0 * (xx + yy)]
    return nd.stack(entries, axis=-1).reshape(q.shape[:-1] + (3, 3))


def covariance3d(q, log_scale) -> Tensor:
    """R S S^T R^T with S = diag(exp(log_scale))."""
    R = quat_to_rot(q)
    s = nd.exp(nd.as_tensor(log_scale))
    M = R * s.reshape(s.shape[:-1] + (1, 3))
    return M @ M.swapaxes(-1, -2)


class Projection(NamedTuple):
    mean2d: Tensor  # n x 2 pixels
    cov2d: Tensor  # n x 2 x 2
    depth: Tensor  # n, camera-space z
    culled: np.ndarray  # n bool


class CulledGaussian:
    """Marker for a Gaussian in front of the near plane; it is skipped, not an error."""

    def __repr__(self) -> str:
        return "CULLED"


CULLED = CulledGaussian()


def project_gaussians(means, cov3d, cam: Camera, lowpass: float = LOWPASS) -> Projection:
    """Perspective-project n Gaussians with the local affine (EWA) approximation."""
    means = nd.as_tensor(means)
    cov3d = nd.as_tensor(cov3d)
    pc = means @ cam.R.T + cam.t
    culled = pc.data[:, 2] < cam.z_near
    x, y = pc[:, 0], pc[:, 1]
    z = nd.where(culled, np.ones(len(culled)), pc[:, 2])
    inv_z = 1.0 / z
    u = x * inv_z * cam.fx + cam.cx
    v = y * inv_z * cam.fy + cam.cy
    mean2d = nd.stack([u, v], axis=-1)
    zero = np.zeros(len(culled))
    inv_z2 = inv_z * inv_z
    J = nd.stack([inv_z * cam.fx, zero, -cam.fx * x * inv_z2,
                  zero, inv_z * cam.fy, -cam.fy * y * inv_z2], axis=-1).reshape(-1, 2, 3)
    T = J @ cam.R
    cov2d = T @ cov3d @ T.swapaxes(-1, -2) + lowpass * np.eye(2)
    return Projection(mean2d, cov2d, z, culled)


def project_gaussian(mu, cov, cam: Camera, lowpass: float = LOWPASS):
    """Single-Gaussian projection; returns ``CULLED`` when behind the near plane."""
    mu = nd.as_tensor(mu).reshape(1, 3)
    cov = nd.as_tensor(cov).reshape(1, 3, 3)
    p = project_gaussians(mu, cov, cam, lowpass)
    if p.culled[0]:
        return CULLED
    return Projection(p.mean2d[0], p.cov2d[0], p.depth[0], p.culled)


def sh_basis(dirs, degree: int) -> Tensor:
    """Real SH basis values (n, C) for unit directions (n, 3)."""
    if not 0 <= degree <= 3:
        raise ShapeError("SH degree must be within 0..3")
    dirs = nd.as_tensor(dirs)
    n = dirs.shape[0]
    cols = [nd.as_tensor(np.full(n, SH_C0))]
    if degree >= 1:
        x, y, z = dirs[:, 0], dirs[:, 1], dirs[:, 2]
        cols += [-SH_C1 * y, SH_C1 * z, -SH_C1 * x]
    if degree >= 2:
        xx, yy, zz = x * x, y * y, z * z
        cols += [SH_C2[0] * x * y, SH_C2[1] * y * z, SH_C2[2] * (2.0 * zz - xx - yy),
                 SH_C2[3] * x * z, SH_C2[4] * (xx - yy)]
    if degree >= 3:
        cols += [SH_C3[0] * y * (3.0 * xx - yy), SH_C3[1] * x * y * z,
                 SH_C3[2] * y * (4.0 * zz - xx - yy), SH_C3[3] * z * (2.0 * zz - 3.0 * xx - 3.0 * yy),
                 SH_C3[4] * x * (4.0 * zz - xx - yy), SH_C3[5] * z * (xx - yy),
                 SH_C3[6] * x * (xx - 3.0 * yy)]
    return nd.stack(cols, axis=-1)


def eval_sh(sh, view_dir, degree: int) -> Tensor:
    """RGB from SH coefficients (n, C, 3) and unit view directions (n, 3), before the +0.5 offset.

    Single-Gaussian inputs (C, 3) and (3,) are accepted as well.
    """
    sh = nd.as_tensor(sh)
    view_dir = nd.as_tensor(view_dir)
    single = sh.ndim == 2
    if single:
        sh = sh.reshape(1, *sh.shape)
        view_dir = view_dir.reshape(1, 3)
    if sh.shape[1] != sh_count(degree):
        raise ShapeError(f"{sh.shape[1]} SH coefficients do not match degree {degree}")
    basis = sh_basis(view_dir, degree)
    rgb = (basis.reshape(basis.shape + (1,)) * sh).sum(axis=1)
    return rgb[0] if single else rgb


def gaussian_colors(g: GaussianSet, cam: Camera) -> Tensor:
    """Per-Gaussian RGB in [0, 1] as seen from ``cam``."""
    dirs = g.means - cam.center
    dirs = dirs / nd.l2norm(dirs, axis=-1, keepdims=True)
    return nd.clamp(eval_sh(g.sh, dirs, g.sh_degree) + 0.5, 0.0, 1.0)


def identity_quats(n: int) -> np.ndarray:
    q = np.zeros((n, 4))
    q[:, 0] = 1.0
    return q


def rot_to_quat(R: np.ndarray) -> np.ndarray:
    """Rotation matrix (3x3) to unit quaternion [w, x, y, z] with w >= 0."""
    R = np.asarray(R, dtype=np.float64)
    tr = np.trace(R)
    if tr > 0:
        s = np.sqrt(tr + 1.0) * 2
        q = [0.25 * s, (R[2, 1] - R[1, 2]) / s, (R[0, 2] - R[2, 0]) / s, (R[1, 0] - R[0, 1]) / s]
    elif R[0, 0] > R[1, 1] and R[0, 0] > R[2, 2]:
        s = np.sqrt(1.0 + R[0, 0] - R[1, 1] - R[2, 2]) * 2
        q = [(R[2, 1] - R[1, 2]) / s, 0.25 * s, (R[0, 1] + R[1, 0]) / s, (R[0, 2] + R[2, 0]) / s]
    elif R[1, 1] > R[2, 2]:
        s = np.sqrt(1.0 + R[1, 1] - R[0, 0] - R[2, 2]) * 2
        q = [(R[0, 2] - R[2, 0]) / s, (R[0, 1] + R[1, 0]) / s, 0.25 * s, (R[1, 2] + R[2, 1]) / s]
    else:
        s = np.sqrt(1.0 + R[2, 2] - R[0, 0] - R[1, 1]) * 2
        q = [(R[1, 0] - R[0, 1]) / s, (R[0, 2] + R[2, 0]) / s, (R[1, 2] + R[2, 1]) / s, 0.25 * s]
    q = np.asarray(q)
    return q if q[0] >= 0 else -q


def quat_multiply(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Hamilton product, broadcasting over leading axes."""
    aw, ax, ay, az = np.moveaxis(np.asarray(a, dtype=np.float64), -1, 0)
    bw, bx, by, bz = np.moveaxis(np.asarray(b, dtype=np.float64), -1, 0)
    return np.stack([aw * bw - ax * bx - ay * by - az * bz,
                     aw * bx + ax * bw + ay * bz - az * by,
                     aw * by - ax * bz + ay * bw + az * bx,
                     aw * bz + ax * by - ay * bx + az * bw], axis=-1)
