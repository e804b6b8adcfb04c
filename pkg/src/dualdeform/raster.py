"""Differentiable tile-based splatting of a GaussianSet.

The blending kernel is a single tape node (:class:`Rasterize`) with a
hand-written backward, the way CUDA splatting libraries expose it; all the
per-Gaussian math that feeds it (covariance, projection, SH color) stays in
ordinary ndiff ops.

Numerical contract shared by the tiled and naive paths: a Gaussian only
contributes inside its 3-sigma ellipse, per-pixel accumulation is strictly
sequential in global depth order, and excluded Gaussians act as exact
no-ops (factor 1.0, weight 0.0). That makes the two paths bit-identical.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from . import ndiff as nd
from .errors import DomainError
from .gscore import Camera, GaussianSet, covariance3d, gaussian_colors, project_gaussians
from .ndiff import Tensor

ALPHA_MAX = 0.99
T_STOP = 1e-4
ACC_EPS = 1e-4
SIGMA_CUTOFF2 = 9.0
TILE = 16


@dataclass
class RenderOutput:
    color: Tensor  # H x W x 3
    depth: Tensor  # H x W
    final_transmittance: Tensor  # H x W
    contribution: np.ndarray  # n
    depth_sentinel: float = 0.0
    weight_sum: Optional[np.ndarray] = None  # H x W, sum over k of alpha_k T_k

    @property
    def height(self) -> int:
        return self.color.shape[0]

    @property
    def width(self) -> int:
        return self.color.shape[1]


def conics(cov2d: np.ndarray) -> np.ndarray:
    a, b, c = cov2d[:, 0, 0], 0.5 * (cov2d[:, 0, 1] + cov2d[:, 1, 0]), cov2d[:, 1, 1]
    det = a * c - b * b
    if np.any(det <= 0):
        raise DomainError("singular or indefinite 2D covariance")
    return np.stack([c / det, -b / det, a / det], axis=-1)


def _pixel_grid(width: int, height: int, x0=0, y0=0, x1=None, y1=None) -> np.ndarray:
    x1 = width if x1 is None else x1
    y1 = height if y1 is None else y1
    ys, xs = np.mgrid[y0:y1, x0:x1]
    return np.stack([xs.reshape(-1), ys.reshape(-1)], axis=-1).astype(np.float64)


class _Blend:
    """Forward state of one pixel block against an ordered list of Gaussians."""

    def __init__(self, pix, ids, mean2d, conic, opacity, color, depth, bg, t_stop, sentinel):
        self.ids = ids
        m = mean2d[ids]
        self.dx = pix[:, None, 0] - m[None, :, 0]
        self.dy = pix[:, None, 1] - m[None, :, 1]
        a, b, c = conic[ids, 0], conic[ids, 1], conic[ids, 2]
        self.abc = (a, b, c)
        maha = a * self.dx ** 2 + 2.0 * b * self.dx * self.dy + c * self.dy ** 2
        self.g = np.exp(-0.5 * maha)
        self.o = opacity[ids]
        raw = self.o * self.g
        inside = maha <= SIGMA_CUTOFF2
        alpha = np.where(inside, np.minimum(raw, ALPHA_MAX), 0.0)
        self.dalpha_draw = inside & (raw < ALPHA_MAX)
        t_after = np.cumprod(1.0 - alpha, axis=1)
        self.active = t_after >= t_stop
        self.alpha = alpha * self.active
        self.one_m = 1.0 - self.alpha
        tcum = np.cumprod(self.one_m, axis=1)
        P, K = alpha.shape
        self.t_before = np.concatenate([np.ones((P, 1)), tcum[:, :-1]], axis=1)
        self.t_final = tcum[:, -1] if K else np.ones(P)
        self.w = self.alpha * self.t_before
        self.col = color[ids]
        self.z = depth[ids]
        self.bg = bg
        if K:
            self.csum = np.cumsum(self.w[:, :, None] * self.col[None], axis=1)
            self.zsum = np.cumsum(self.w * self.z[None], axis=1)
            rgb = self.csum[:, -1] + self.t_final[:, None] * bg
            num = self.zsum[:, -1]
        else:
            rgb = np.broadcast_to(bg, (P, 3)).astype(np.float64) * self.t_final[:, None]
            num = np.zeros(P)
        acc = 1.0 - self.t_final
        self.valid = acc > ACC_EPS
        self.acc = np.where(self.valid, acc, 1.0)
        self.num = num
        depth_px = np.where(self.valid, num / self.acc, sentinel)
        self.out = np.concatenate([rgb, depth_px[:, None], self.t_final[:, None]], axis=1)

    def backward(self, g_out):
        dC, dD, dT = g_out[:, :3], g_out[:, 3], g_out[:, 4]
        dD = np.where(self.valid, dD, 0.0)
        one = self.one_m
        tf = self.t_final[:, None]
        suffix_c = self.csum[:, -1:, :] - self.csum  # sum over j > k of w_j c_j
        suffix_z = self.zsum[:, -1:] - self.zsum
        bg_term = tf[:, :, None] * self.bg
        d_alpha = np.einsum("pc,pkc->pk", dC,
                            self.t_before[:, :, None] * self.col[None] - (suffix_c + bg_term) / one[:, :, None])
        acc = self.acc[:, None]
        d_alpha += dD[:, None] * ((self.t_before * self.z[None] - suffix_z / one) / acc
                                  - self.num[:, None] / acc ** 2 * tf / one)
        d_alpha -= dT[:, None] * tf / one
        d_alpha *= self.active
        d_col = np.einsum("pc,pk->kc", dC, self.w)
        d_z = np.einsum("p,pk->k", dD / self.acc, self.w)

        d_raw = d_alpha * self.dalpha_draw
        d_o = np.sum(d_raw * self.g, axis=0)
        d_maha = -0.5 * d_raw * self.o * self.g
        a, b, c = self.abc
        dx, dy = self.dx, self.dy
        d_mx = -np.sum(d_maha * (2.0 * a * dx + 2.0 * b * dy), axis=0)
        d_my = -np.sum(d_maha * (2.0 * b * dx + 2.0 * c * dy), axis=0)
        g00 = np.sum(d_maha * dx * dx, axis=0)
        g01 = np.sum(d_maha * dx * dy, axis=0)
        g11 = np.sum(d_maha * dy * dy, axis=0)
        return np.stack([d_mx, d_my], axis=-1), (g00, g01, g11), d_o, d_col, d_z


class Rasterize(nd.Function):
    """Alpha-blend projected Gaussians into an (H, W, 5) buffer: rgb, depth, T_final."""

    def forward(self, mean2d, cov2d, opacity, color, depth, order=None, width=0, height=0,
                background=(0.0, 0.0, 0.0), tile=TILE, t_stop=T_STOP, sentinel=0.0):
        self.width, self.height = width, height
        self.bg = np.asarray(background, dtype=np.float64)
        self.order = np.asarray(order, dtype=np.int64)
        self.conic = conics(cov2d) if len(cov2d) else np.zeros((0, 3))
        self.cov2d = cov2d
        self.args = (mean2d, self.conic, opacity, color, depth, self.bg, t_stop, sentinel)
        self.blocks = self._blocks(mean2d, cov2d, tile)
        out = np.empty((height, width, 5))
        self.contribution = np.zeros(len(mean2d))
        self.weight_sum = np.zeros((height, width))
        # per-block state is kept for backward; renders here are small
        self.states = []
        for (x0, y0, x1, y1), ids in self.blocks:
            pix = _pixel_grid(width, height, x0, y0, x1, y1)
            blk = _Blend(pix, ids, *self.args)
            out[y0:y1, x0:x1] = blk.out.reshape(y1 - y0, x1 - x0, 5)
            if len(ids):
                self.contribution[ids] += blk.w.sum(axis=0)
                self.weight_sum[y0:y1, x0:x1] = blk.w.sum(axis=1).reshape(y1 - y0, x1 - x0)
            self.states.append(blk)
        return out

    def _blocks(self, mean2d, cov2d, tile):
        W, H = self.width, self.height
        order = self.order
        if tile is None:
            return [((0, 0, W, H), order)]
        m = mean2d[order]
        rx = 3.0 * np.sqrt(cov2d[order, 0, 0]) + 1.0
        ry = 3.0 * np.sqrt(cov2d[order, 1, 1]) + 1.0
        xmin, xmax = np.floor(m[:, 0] - rx), np.ceil(m[:, 0] + rx)
        ymin, ymax = np.floor(m[:, 1] - ry), np.ceil(m[:, 1] + ry)
        blocks = []
        for y0 in range(0, H, tile):
            y1 = min(y0 + tile, H)
            for x0 in range(0, W, tile):
                x1 = min(x0 + tile, W)
                hit = (xmax >= x0) & (xmin <= x1 - 1) & (ymax >= y0) & (ymin <= y1 - 1)
                blocks.append(((x0, y0, x1, y1), order[hit]))
        return blocks

    def backward(self, grad):
        mean2d, conic, opacity, color, depth = self.args[:5]
        n = len(mean2d)
        d_mean = np.zeros((n, 2))
        d_conic = np.zeros((n, 3))
        d_o = np.zeros(n)
        d_col = np.zeros((n, 3))
        d_z = np.zeros(n)
        for ((x0, y0, x1, y1), ids), blk in zip(self.blocks, self.states):
            if not len(ids):
                continue
            gm, (g00, g01, g11), go, gc, gz = blk.backward(grad[y0:y1, x0:x1].reshape(-1, 5))
            d_mean[ids] += gm
            d_conic[ids] += np.stack([g00, g01, g11], axis=-1)
            d_o[ids] += go
            d_col[ids] += gc
            d_z[ids] += gz
        # d/dSigma of a function of A = Sigma^-1 is -A G A
        A = np.empty((n, 2, 2))
        A[:, 0, 0], A[:, 0, 1], A[:, 1, 0], A[:, 1, 1] = conic[:, 0], conic[:, 1], conic[:, 1], conic[:, 2]
        G = np.empty((n, 2, 2))
        G[:, 0, 0], G[:, 0, 1], G[:, 1, 0], G[:, 1, 1] = d_conic[:, 0], d_conic[:, 1], d_conic[:, 1], d_conic[:, 2]
        d_cov = -A @ G @ A
        return d_mean, d_cov, d_o, d_col, d_z


def render(g: GaussianSet, cam: Camera, background: Sequence[float] = (0.0, 0.0, 0.0), *,
           tile: Optional[int] = TILE, t_stop: float = T_STOP,
           depth_sentinel: Optional[float] = None) -> RenderOutput:
    """Splat ``g`` through ``cam``. ``tile=None`` selects the naive all-pixels path."""
    cov3d = covariance3d(g.quats, g.log_scales)
    proj = project_gaussians(g.means, cov3d, cam)
    opacity = nd.sigmoid(g.opacity_logits).reshape(-1)
    colors = gaussian_colors(g, cam)
    keep = np.flatnonzero(~proj.culled)
    order = keep[np.argsort(proj.depth.data[keep], kind="stable")]
    if depth_sentinel is None:
        depth_sentinel = float(proj.depth.data[keep].max()) if len(keep) else 0.0
    buf, fn = Rasterize.run(proj.mean2d, proj.cov2d, opacity, colors, proj.depth,
                            order=order, width=cam.width, height=cam.height,
                            background=background, tile=tile, t_stop=t_stop,
                            sentinel=depth_sentinel)
    return RenderOutput(buf[..., 0:3], buf[..., 3], buf[..., 4], fn.contribution, depth_sentinel,
                        fn.weight_sum)


def alpha_at(mean2d, cov2d, opacity: float, p) -> float:
    """Blending alpha of one Gaussian at pixel ``p``, clamped to 0.99 and cut at 3 sigma."""
    cov2d = np.asarray(cov2d, dtype=np.float64).reshape(1, 2, 2)
    a, b, c = conics(cov2d)[0]
    d = np.asarray(p, dtype=np.float64) - np.asarray(mean2d, dtype=np.float64)
    maha = a * d[0] ** 2 + 2 * b * d[0] * d[1] + c * d[1] ** 2
    if maha > SIGMA_CUTOFF2:
        return 0.0
    return float(min(opacity * np.exp(-0.5 * maha), ALPHA_MAX))


def visibility_mask(out: RenderOutput, tau: float = 1e-3) -> np.ndarray:
    """Boolean mask of Gaussians whose total blended weight exceeds ``tau``."""
    return out.contribution > tau
