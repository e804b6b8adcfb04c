"""Positional and temporal encodings. None of these carry trainable parameters."""
from __future__ import annotations

from dataclasses import dataclass
from typing import List, Optional

import numpy as np

from . import ndiff as nd
from .errors import ShapeError
from .ndiff import Tensor

TIME_BANDS = 6
POS_BANDS = 10
NOISE_SCALE = 0.1


@dataclass(frozen=True)
class TimeEmbedding:
    t_normalized: float
    vector: np.ndarray  # 2 * bands

    @property
    def dim(self) -> int:
        return self.vector.shape[-1]


def freq_encode(x, bands: int):
    """``[sin(2^k pi x), cos(2^k pi x)]`` for k < bands, grouped per input component.

    Accepts a scalar, an array (..., dim) or a Tensor; Tensors stay on the
    tape so gradients reach whatever produced ``x``.
    """
    if bands < 1:
        raise ShapeError("need at least one frequency band")
    freqs = np.pi * 2.0 ** np.arange(bands)
    if isinstance(x, Tensor):
        scaled = x.reshape(x.shape + (1,)) * freqs  # (..., dim, bands)
        pair = nd.stack([nd.sin(scaled), nd.cos(scaled)], axis=-1)  # (..., dim, bands, 2)
        return pair.reshape(x.shape[:-1] + (x.shape[-1] * bands * 2,))
    arr = np.asarray(x, dtype=np.float64)
    if arr.ndim == 0:
        arr = arr.reshape(1)
    scaled = arr[..., None] * freqs
    pair = np.stack([np.sin(scaled), np.cos(scaled)], axis=-1)
    return pair.reshape(arr.shape[:-1] + (arr.shape[-1] * bands * 2,))


def time_embed(t: float, t_max: float, bands: int = TIME_BANDS) -> TimeEmbedding:
    """Embedding of frame ``t`` normalized by the last timestamp ``t_max``."""
    tn = float(t) / float(t_max) if t_max > 0 else 0.0
    return TimeEmbedding(tn, freq_encode(tn, bands))


def time_window_embed(t: int, window: int, t_max: int, bands: int = TIME_BANDS) -> List[TimeEmbedding]:
    """Embeddings for ``t, t+1, ..., t+window-1``; timestamps past ``t_max`` repeat ``t_max``."""
    if window < 1:
        raise ShapeError("window must be >= 1")
    return [time_embed(min(t + j, t_max), t_max, bands) for j in range(window)]


def noise_sigma(t_max: float, iteration: int, total_anneal_iters: int) -> float:
    """Std of the time jitter: 0.1/T at iteration 0, linearly annealed to 0."""
    if total_anneal_iters <= 0:
        return 0.0
    return NOISE_SCALE / t_max * max(0.0, 1.0 - iteration / total_anneal_iters)


def noisy_time_embed(t: float, t_max: float, iteration: int, total_anneal_iters: int,
                     rng: Optional[np.random.Generator] = None, training: bool = True,
                     bands: int = TIME_BANDS) -> TimeEmbedding:
    """Time embedding with annealed Gaussian jitter on the normalized time.

    Evaluation (``training=False`` or no ``rng``) is exactly ``time_embed``.
    """
    sigma = noise_sigma(t_max, iteration, total_anneal_iters) if training else 0.0
    tn = float(t) / float(t_max) if t_max > 0 else 0.0
    if sigma > 0.0 and rng is not None:
        tn_noisy = tn + rng.normal(0.0, sigma)
        return TimeEmbedding(tn, freq_encode(tn_noisy, bands))
    return TimeEmbedding(tn, freq_encode(tn, bands))


def spatial_pe(h: int, w: int, d_model: int) -> np.ndarray:
    """2D sinusoidal encoding, (h*w, d_model), row-major over the grid.

    The first half of the channels encodes the row index and the second
    half the column index; within each half, sines come before cosines.
    """
    if d_model % 4:
        raise ShapeError("d_model must be divisible by 4")
    quarter = d_model // 4
    inv = 1.0 / (10000.0 ** (np.arange(quarter) / quarter))
    rows, cols = np.meshgrid(np.arange(h), np.arange(w), indexing="ij")
    r = rows.reshape(-1, 1) * inv
    c = cols.reshape(-1, 1) * inv
    return np.concatenate([np.sin(r), np.cos(r), np.sin(c), np.cos(c)], axis=1)
