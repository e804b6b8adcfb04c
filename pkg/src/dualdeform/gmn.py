"""Global motion network: flow fusion, deformation-guided cross-attention, refinement MLP."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Tuple

import numpy as np

from . import ndiff as nd
from .encode import POS_BANDS, TIME_BANDS, TimeEmbedding, freq_encode, spatial_pe
from .errors import ShapeError, StateError
from .gscore import GaussianSet
from .idn import DeformationDelta, DeltaHeads, apply_delta
from .ndiff import Tensor
from .nn import MLP, Linear, Module

FLOW_DIM = 128


@dataclass
class FlowEmbeddingGrid:
    """h x w grid of motion features for the frame pair (a -> b)."""

    tokens: np.ndarray  # h x w x 128
    a: int
    b: int

    def __post_init__(self):
        self.tokens = np.asarray(self.tokens, dtype=np.float64)
        if self.tokens.ndim != 3 or self.tokens.shape[-1] != FLOW_DIM:
            raise ShapeError(f"flow grid must be h x w x {FLOW_DIM}, got {self.tokens.shape}")

    @property
    def hw(self) -> Tuple[int, int]:
        return self.tokens.shape[0], self.tokens.shape[1]


@dataclass
class GMNConfig:
    d_model: int = 256
    heads: int = 4
    rep_dim: int = 256  # width of delta_rep, i.e. the IDN GRU hidden size
    drn_depth: int = 6
    drn_width: int = 256
    pos_bands: int = POS_BANDS
    time_bands: int = TIME_BANDS
    sh_degree: int = 1


def state_features(g: GaussianSet, pos_bands: int = POS_BANDS) -> Tensor:
    """[gamma(mu), log_scale, q, opacity_logit] per Gaussian, differentiable in ``g``."""
    return nd.concat([freq_encode(g.means, pos_bands), g.log_scales, g.quats, g.opacity_logits], axis=1)


def state_dim(pos_bands: int = POS_BANDS) -> int:
    return 6 * pos_bands + 8


class CrossAttention(Module):
    """Multi-head attention, queries from Gaussians and keys/values from flow tokens."""

    def __init__(self, d_model: int, heads: int, rng: np.random.Generator):
        if d_model % heads:
            raise ShapeError("d_model must be divisible by heads")
        self.heads = heads
        self.q = Linear(d_model, d_model, rng)
        self.k = Linear(d_model, d_model, rng)
        self.v = Linear(d_model, d_model, rng)
        self.out = Linear(d_model, d_model, rng)

    def _split(self, x: Tensor) -> Tensor:
        n, d = x.shape
        return x.reshape(n, self.heads, d // self.heads).swapaxes(0, 1)  # heads x n x dh

    def __call__(self, query, tokens, return_weights: bool = False):
        Q, K, V = self._split(self.q(query)), self._split(self.k(tokens)), self._split(self.v(tokens))
        dh = Q.shape[-1]
        weights = nd.softmax(nd.matmul(Q, K.swapaxes(-1, -2)) * (1.0 / np.sqrt(dh)), axis=-1)
        mixed = nd.matmul(weights, V).swapaxes(0, 1)  # n x heads x dh
        out = self.out(mixed.reshape(mixed.shape[0], -1))
        return (out, weights) if return_weights else out


class GMN(Module):
    def __init__(self, cfg: Optional[GMNConfig] = None, rng: Optional[np.random.Generator] = None):
        cfg = cfg or GMNConfig()
        self.cfg = cfg
        self.initialized = rng is not None
        if rng is None:
            return
        sd = state_dim(cfg.pos_bands)
        self.fusion = Linear(2 * FLOW_DIM, cfg.d_model, rng)
        self.time_proj = Linear(2 * cfg.time_bands, cfg.d_model, rng)
        self.state_proj = Linear(sd, cfg.rep_dim, rng)
        self.query_proj = Linear(cfg.rep_dim, cfg.d_model, rng)
        self.attn = CrossAttention(cfg.d_model, cfg.heads, rng)
        self.drn_mlp = MLP(2 * cfg.time_bands + sd + cfg.d_model, cfg.drn_depth, cfg.drn_width, rng)
        self.heads = DeltaHeads(cfg.drn_width, cfg.sh_degree, rng)
        self._pe_cache = {}

    def _check(self):
        if not self.initialized:
            raise StateError("GMN parameters are not initialized")

    def _pe(self, h: int, w: int) -> np.ndarray:
        key = (h, w)
        if key not in self._pe_cache:
            self._pe_cache[key] = spatial_pe(h, w, self.cfg.d_model)
        return self._pe_cache[key]

    def fuse_flow(self, prev: FlowEmbeddingGrid, nxt: FlowEmbeddingGrid, t_emb: TimeEmbedding) -> Tensor:
        """Concat the two flow grids per token, project, add spatial PE and the time projection."""
        self._check()
        if prev.hw != nxt.hw:
            raise ShapeError(f"flow grid sizes differ: {prev.hw} vs {nxt.hw}")
        h, w = prev.hw
        feats = np.concatenate([prev.tokens, nxt.tokens], axis=-1).reshape(h * w, 2 * FLOW_DIM)
        return self.fusion(feats) + self._pe(h, w) + self.time_proj(t_emb.vector.reshape(1, -1))

    def build_query(self, rep, g: GaussianSet) -> Tensor:
        u = nd.as_tensor(rep) + self.state_proj(state_features(g, self.cfg.pos_bands))
        return self.query_proj(u)

    def cda_attend(self, query, m_final, return_weights: bool = False):
        self._check()
        return self.attn(query, m_final, return_weights=return_weights)

    def drn(self, s_emb: TimeEmbedding, g_t: GaussianSet, m_scene) -> DeformationDelta:
        self._check()
        n = g_t.n
        s = np.broadcast_to(s_emb.vector, (n, s_emb.dim))
        x = nd.concat([s, state_features(g_t, self.cfg.pos_bands), m_scene], axis=1)
        return self.heads(self.drn_mlp(x))

    def gmn_deform(self, g0: GaussianSet, t_emb: TimeEmbedding, s_emb: TimeEmbedding,
                   delta_idn_t: Optional[DeformationDelta], rep,
                   prev: FlowEmbeddingGrid, nxt: FlowEmbeddingGrid):
        """Full GMN pass for one target frame; returns ``(G_t_global, delta_gmn)``.

        ``delta_idn_t=None`` and ``rep=None`` run the branch without IDN input.
        """
        self._check()
        g_t = g0 if delta_idn_t is None else apply_delta(g0, delta_idn_t)
        if rep is None:
            rep = np.zeros((g0.n, self.cfg.rep_dim))
        m_final = self.fuse_flow(prev, nxt, t_emb)
        m_scene = self.cda_attend(self.build_query(rep, g_t), m_final)
        delta = self.drn(s_emb, g_t, m_scene)
        return apply_delta(g0, delta), delta
