"""Instantaneous deformation network: per-time local forecast, windowed rollout, GRU summary."""
from __future__ import annotations

from dataclasses import dataclass
from typing import List, Optional, Sequence, Tuple

import numpy as np

from . import ndiff as nd
from .encode import POS_BANDS, TIME_BANDS, TimeEmbedding, freq_encode, time_embed
from .errors import StateError
from .gscore import GaussianSet, sh_count
from .ndiff import Tensor
from .nn import MLP, GRUCell, Linear, Module


@dataclass
class DeformationDelta:
    """Per-Gaussian additive offsets on (position, quaternion, log-scale, SH, opacity logit)."""

    dx: Tensor
    dq: Tensor
    ds: Tensor
    dc: Tensor  # n x C x 3
    dsigma: Tensor  # n x 1

    @property
    def n(self) -> int:
        return self.dx.shape[0]

    def fields(self) -> Tuple[Tensor, ...]:
        return self.dx, self.dq, self.ds, self.dc, self.dsigma

    def flatten(self) -> Tensor:
        n = self.n
        return nd.concat([self.dx, self.dq, self.ds, self.dc.reshape(n, -1), self.dsigma], axis=1)

    @classmethod
    def from_flat(cls, flat, sh_degree: int) -> "DeformationDelta":
        flat = nd.as_tensor(flat)
        c = sh_count(sh_degree)
        n = flat.shape[0]
        return cls(flat[:, 0:3], flat[:, 3:7], flat[:, 7:10],
                   flat[:, 10:10 + 3 * c].reshape(n, c, 3), flat[:, 10 + 3 * c:11 + 3 * c])

    @classmethod
    def zeros(cls, n: int, sh_degree: int) -> "DeformationDelta":
        return cls.from_flat(np.zeros((n, delta_dim(sh_degree))), sh_degree)

    def detach(self) -> "DeformationDelta":
        return DeformationDelta(*(f.detach() for f in self.fields()))


def delta_dim(sh_degree: int) -> int:
    return 11 + 3 * sh_count(sh_degree)


def apply_delta(g: GaussianSet, delta: DeformationDelta) -> GaussianSet:
    """Add offsets field by field. Quaternions are renormalized at covariance assembly."""
    return GaussianSet(g.means + delta.dx, g.quats + delta.dq, g.log_scales + delta.ds,
                       g.opacity_logits + delta.dsigma, g.sh + delta.dc, g.sh_degree)


class DeltaHeads(Module):
    """Five zero-initialized linear heads, one per deformation field."""

    def __init__(self, width: int, sh_degree: int, rng: np.random.Generator):
        c = sh_count(sh_degree)
        self.sh_degree = sh_degree
        self.x = Linear(width, 3, rng, zero=True)
        self.q = Linear(width, 4, rng, zero=True)
        self.s = Linear(width, 3, rng, zero=True)
        self.c = Linear(width, 3 * c, rng, zero=True)
        self.o = Linear(width, 1, rng, zero=True)

    def __call__(self, h) -> DeformationDelta:
        n = h.shape[0]
        return DeformationDelta(self.x(h), self.q(h), self.s(h),
                                self.c(h).reshape(n, -1, 3), self.o(h))


@dataclass
class IDNConfig:
    depth: int = 8
    width: int = 256
    skip: int = 4
    gru_hidden: int = 256
    pos_bands: int = POS_BANDS
    time_bands: int = TIME_BANDS
    sh_degree: int = 1


class IDN(Module):
    """Shared MLP over [gamma(mu), Time(t)] with zero-init heads, plus a shared GRU."""

    def __init__(self, cfg: Optional[IDNConfig] = None, rng: Optional[np.random.Generator] = None):
        cfg = cfg or IDNConfig()
        self.cfg = cfg
        self.initialized = rng is not None
        if rng is None:
            return
        d_in = 6 * cfg.pos_bands + 2 * cfg.time_bands
        self.core = MLP(d_in, cfg.depth, cfg.width, rng, skip=cfg.skip)
        self.heads = DeltaHeads(cfg.width, cfg.sh_degree, rng)
        self.gru = GRUCell(delta_dim(cfg.sh_degree), cfg.gru_hidden, rng)

    def _check(self):
        if not self.initialized:
            raise StateError("IDN parameters are not initialized")

    def core_many(self, g0: GaussianSet, embs: Sequence[TimeEmbedding]) -> List[DeformationDelta]:
        """One MLP pass for several time embeddings; returns one delta per embedding."""
        self._check()
        n = g0.n
        # canonical positions enter as constants; deformation gradients do not move G_0
        pos = freq_encode(g0.means.data, self.cfg.pos_bands)
        rows = [np.concatenate([pos, np.broadcast_to(e.vector, (n, e.dim))], axis=1) for e in embs]
        h = self.core(np.concatenate(rows, axis=0))
        flat = self.heads(h)
        out = []
        for k in range(len(embs)):
            sl = slice(k * n, (k + 1) * n)
            out.append(DeformationDelta(flat.dx[sl], flat.dq[sl], flat.ds[sl], flat.dc[sl], flat.dsigma[sl]))
        return out

    def idn_core(self, g0: GaussianSet, emb: TimeEmbedding) -> DeformationDelta:
        return self.core_many(g0, [emb])[0]

    def rollout_future(self, g0: GaussianSet, t: int, window: int, t_max: int) -> List[Tensor]:
        """Flattened forecasts for ``t .. t+window-1``, clamped at ``t_max``."""
        times = [min(t + j, t_max) for j in range(window)]
        deltas = self.core_many(g0, [time_embed(s, t_max, self.cfg.time_bands) for s in times])
        return [d.flatten() for d in deltas]

    def gru_distill(self, seq: Sequence[Tensor]) -> Tensor:
        self._check()
        return self.gru.run(list(seq))

    def deform_frames(self, g0: GaussianSet, frames: Sequence[int], t_max: int, window: int):
        """Batched ``idn_deform`` over several target frames.

        Distinct query times are evaluated once and shared between windows.
        Returns a list of ``(G_local, delta_t, delta_rep)`` per frame.
        """
        self._check()
        windows = [[min(t + j, t_max) for j in range(window)] for t in frames]
        times = sorted({s for w in windows for s in w})
        deltas = self.core_many(g0, [time_embed(s, t_max, self.cfg.time_bands) for s in times])
        by_time = dict(zip(times, deltas))
        flat = {s: by_time[s].flatten() for s in times}
        n = g0.n
        seq = [nd.concat([flat[w[j]] for w in windows], axis=0) for j in range(window)]
        rep = self.gru.run(seq)
        out = []
        for k, t in enumerate(frames):
            d_t = by_time[windows[k][0]]
            out.append((apply_delta(g0, d_t), d_t, rep[k * n:(k + 1) * n]))
        return out

    def idn_deform(self, g0: GaussianSet, t: int, t_max: int, window: int = 4):
        """``(G_t_local, delta_t, delta_rep)`` for one frame; depends only on (g0, t, params)."""
        return self.deform_frames(g0, [t], t_max, window)[0]
