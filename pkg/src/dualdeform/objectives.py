"""Training losses and the out-of-band opacity decay."""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Dict, Optional

import numpy as np

from . import ndiff as nd
from .errors import DomainError, ShapeError, SizeError
from .gscore import GaussianSet, quat_to_rot
from .idn import DeformationDelta
from .ndiff import Tensor

log = logging.getLogger(__name__)

LAMBDA_DSSIM = 0.2
LAMBDA_W = 2000.0
KNN_K = 5
SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_C1 = 0.01 ** 2
SSIM_C2 = 0.03 ** 2
OPACITY_DELTA = 0.001
OPACITY_MIN = 0.01
OPACITY_MAX = 1.0
LOGIT_EPS = 1e-7
PARTS = ("render", "depth", "rigid", "mutual")
DEFAULT_WEIGHTS = {"mutual": 0.1, "depth": 0.1, "rigid": 0.1, "render": 1.0}
UNIT_WEIGHTS = {"mutual": 1.0, "depth": 1.0, "rigid": 1.0, "render": 1.0}


def _check_same(a, b):
    if tuple(a.shape) != tuple(b.shape):
        raise ShapeError(f"shape mismatch: {tuple(a.shape)} vs {tuple(b.shape)}")


def gaussian_window(size: int = SSIM_WINDOW, sigma: float = SSIM_SIGMA) -> np.ndarray:
    x = np.arange(size) - (size - 1) / 2.0
    w = np.exp(-x ** 2 / (2.0 * sigma ** 2))
    return w / w.sum()


def _filter_matrix(n: int, window: np.ndarray) -> np.ndarray:
    """(n - k + 1) x n matrix applying a 'valid' 1D correlation."""
    k = len(window)
    m = np.zeros((n - k + 1, n))
    for i in range(n - k + 1):
        m[i, i:i + k] = window
    return m


def ssim(img, gt) -> Tensor:
    """Mean SSIM over channels and valid window positions; images are H x W x C."""
    img, gt = nd.as_tensor(img), nd.as_tensor(gt)
    _check_same(img, gt)
    if img.ndim == 2:
        img, gt = img.reshape(*img.shape, 1), gt.reshape(*gt.shape, 1)
    H, W = img.shape[:2]
    if H < SSIM_WINDOW or W < SSIM_WINDOW:
        raise ShapeError(f"image {H}x{W} is smaller than the {SSIM_WINDOW}x{SSIM_WINDOW} window")
    win = gaussian_window()
    fh, fw = _filter_matrix(H, win), _filter_matrix(W, win).T

    def blur(x):
        x = x.transpose(2, 0, 1)  # C x H x W
        return nd.matmul(nd.matmul(fh, x), fw)

    mu_x, mu_y = blur(img), blur(gt)
    sxx = blur(img * img) - mu_x * mu_x
    syy = blur(gt * gt) - mu_y * mu_y
    sxy = blur(img * gt) - mu_x * mu_y
    num = (2.0 * mu_x * mu_y + SSIM_C1) * (2.0 * sxy + SSIM_C2)
    den = (mu_x * mu_x + mu_y * mu_y + SSIM_C1) * (sxx + syy + SSIM_C2)
    return nd.mean(num / den)


def render_loss(img, gt, lambda_dssim: float = LAMBDA_DSSIM) -> Tensor:
    """(1 - lambda) * L1 + lambda * (1 - SSIM) / 2."""
    img, gt = nd.as_tensor(img), nd.as_tensor(gt)
    _check_same(img, gt)
    l1 = nd.mean((img - gt).abs())
    if lambda_dssim == 0.0:
        return l1 * 1.0
    return (1.0 - lambda_dssim) * l1 + lambda_dssim * (1.0 - ssim(img, gt)) * 0.5


def psnr(img, gt, cap: float = 99.0) -> float:
    img, gt = np.asarray(img, dtype=np.float64), np.asarray(gt, dtype=np.float64)
    _check_same(img, gt)
    mse = float(np.mean((img - gt) ** 2))
    if mse == 0.0:
        return cap
    return min(cap, 10.0 * np.log10(1.0 / mse))


def normalize_depth(d):
    """Min/max normalize to [0, 1]; a constant map normalizes to zeros (with a warning)."""
    d = nd.as_tensor(d)
    lo, hi = nd.min(d), nd.max(d)
    span = float(hi.data - lo.data)
    if span <= 0.0:
        log.warning("rendered depth is constant; normalized depth set to zero")
        return nd.as_tensor(np.zeros(d.shape))
    return (d - lo) / (hi - lo)


def depth_loss(d, d_gt) -> Tensor:
    """Mean absolute difference between min/max-normalized rendered depth and ``d_gt``."""
    d = nd.as_tensor(d)
    _check_same(d, nd.as_tensor(d_gt))
    return nd.mean((normalize_depth(d) - d_gt).abs())


def knn(positions, k: int = KNN_K) -> np.ndarray:
    """Brute-force Euclidean k-NN excluding self; ties go to the lower index."""
    p = np.asarray(positions, dtype=np.float64)
    n = len(p)
    if n <= k:
        raise SizeError(f"kNN needs more than k={k} points, got {n}")
    diff = p[:, None, :] - p[None, :, :]
    d2 = np.sum(diff * diff, axis=-1)
    np.fill_diagonal(d2, np.inf)
    return np.argsort(d2, axis=1, kind="stable")[:, :k]


def rigidity_weights(mu0, nbrs: np.ndarray, lambda_w: float = LAMBDA_W) -> np.ndarray:
    mu0 = np.asarray(mu0, dtype=np.float64)
    d = mu0[nbrs] - mu0[:, None, :]
    return np.exp(-lambda_w * np.sum(d * d, axis=-1))


def rigidity_loss(g_prev: GaussianSet, g_curr: GaussianSet, nbrs: np.ndarray, mu0,
                  lambda_w: float = LAMBDA_W, weights: Optional[np.ndarray] = None) -> Tensor:
    """Local rigid-frame consistency of neighbor offsets between consecutive times.

    For each Gaussian i and neighbor j the offset at t-1 is compared to the
    offset at t carried back through R_{i,t-1} R_{i,t}^T.
    """
    if g_prev.n != g_curr.n:
        raise ShapeError("rigidity loss needs equal Gaussian counts")
    n, k = nbrs.shape
    w = rigidity_weights(mu0, nbrs, lambda_w) if weights is None else weights
    r_prev = quat_to_rot(g_prev.quats)
    r_curr = quat_to_rot(g_curr.quats)
    rel = nd.matmul(r_prev, r_curr.swapaxes(-1, -2))  # n x 3 x 3
    off_prev = g_prev.means[nbrs] - g_prev.means.reshape(n, 1, 3)
    off_curr = g_curr.means[nbrs] - g_curr.means.reshape(n, 1, 3)
    carried = nd.matmul(off_curr, rel.swapaxes(-1, -2))  # rows: rel @ off
    resid = nd.l2norm(off_prev - carried, axis=-1)
    return nd.sum(resid * w) * (1.0 / (k * n))


def mutual_loss(d_idn: DeformationDelta, d_gmn: DeformationDelta, vis: np.ndarray) -> Tensor:
    """Symmetric stop-gradient agreement over visible Gaussians.

    The IDN side only learns from the term that freezes the GMN prediction
    and vice versa.
    """
    vis = np.asarray(vis, dtype=bool)
    n_vis = int(vis.sum())
    if n_vis == 0:
        log.warning("no visible Gaussians; mutual loss is zero")
        return nd.as_tensor(0.0)
    idx = np.flatnonzero(vis)
    a = d_idn.flatten()[idx]
    b = d_gmn.flatten()[idx]
    to_gmn = nd.stop_gradient(a) - b
    to_idn = a - nd.stop_gradient(b)
    return (nd.sum(to_gmn * to_gmn) + nd.sum(to_idn * to_idn)) * (1.0 / n_vis)


def logit(p) -> np.ndarray:
    p = np.asarray(p, dtype=np.float64)
    return np.log(p) - np.log1p(-p)


def opacity_decay(logits, delta_o: float = OPACITY_DELTA, o_min: float = OPACITY_MIN,
                  o_max: float = OPACITY_MAX) -> np.ndarray:
    """``logit(clamp(sigmoid(a) - delta_o, o_min, o_max))``; no gradient is involved."""
    o = nd.sigmoid(np.asarray(logits, dtype=np.float64)).data
    o = np.clip(o - delta_o, o_min, o_max)
    return logit(np.clip(o, LOGIT_EPS, 1.0 - LOGIT_EPS))


@dataclass
class LossBreakdown:
    l_render: float
    l_depth: float
    l_rigid: float
    l_mutual: float
    total: float
    weights: Dict[str, float] = field(default_factory=dict)
    total_tensor: Optional[Tensor] = None

    def row(self):
        return [self.l_render, self.l_depth, self.l_rigid, self.l_mutual, self.total]


def total_loss(parts: Dict[str, object], weights: Optional[Dict[str, float]] = None) -> LossBreakdown:
    """Weighted sum of the four components; missing parts count as zero."""
    weights = dict(DEFAULT_WEIGHTS if weights is None else weights)
    total = None
    values = {}
    for name in PARTS:
        val = parts.get(name, 0.0)
        t = nd.as_tensor(val)
        v = float(np.asarray(t.data).sum())
        if not np.isfinite(v):
            raise DomainError(f"loss component '{name}' is not finite ({v})")
        values[name] = v
        term = t * weights.get(name, 0.0)
        total = term if total is None else total + term
    return LossBreakdown(values["render"], values["depth"], values["rigid"], values["mutual"],
                         float(total.data), weights, total)
