"""End-to-end optimization of canonical Gaussians and both deformation networks."""
from __future__ import annotations

import csv
import dataclasses
import hashlib
import json
import logging
import os
import shutil
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np

from . import ndiff as nd
from .encode import noisy_time_embed, time_embed
from .errors import ConfigError, DomainError, FormatError, InputError, StateError
from .flowio import FlowArchive, FlowSource, read_kv, write_kv
from .gmn import GMN, GMNConfig
from .gscore import FIELDS, Camera, GaussianSet, identity_quats, sh_count
from .idn import IDN, IDNConfig, apply_delta
from .objectives import (UNIT_WEIGHTS, LossBreakdown, depth_loss, knn, mutual_loss, opacity_decay, psnr,
                         render_loss, rigidity_loss, rigidity_weights, total_loss)
from .raster import RenderOutput, render, visibility_mask
from .scenesynth import Dataset, load_dataset, make_scene, noisy_init

log = logging.getLogger(__name__)

ABLATIONS = ("full", "no-gmn", "no-idn", "no-mutual")
CSV_HEADER = ["iteration", "frame", "l_render", "l_depth", "l_rigid", "l_mutual", "total",
              "psnr_train", "n_gaussians"]
CHECKPOINT_DIR = "checkpoint"
LOG_FILE = "train_log.csv"


@dataclass
class TrainConfig:
    iterations: int = 2000
    seed: int = 0
    ablation: str = "full"
    lr_networks: float = 1e-4
    lr_position: float = 1.6e-4
    lr_position_final: float = 1.6e-6
    lr_rotation: float = 1e-3
    lr_scale: float = 5e-3
    lr_sh: float = 2.5e-3
    lr_opacity: float = 5e-2
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-15
    window: int = 4
    densify_from: int = 200
    densify_until: int = 1500
    densify_interval: int = 100
    clone_grad_threshold: float = 2e-4
    clone_jitter: float = 0.002
    prune_opacity: float = 0.005
    prune_scale: float = 0.5
    max_gaussians: int = 96
    opacity_delta: float = 0.001
    opacity_min: float = 0.01
    opacity_max: float = 1.0
    w_render: float = 1.0
    w_depth: float = 0.1
    w_rigid: float = 0.1
    w_mutual: float = 0.1
    idn_render_weight: float = 0.5
    mutual_warmup: float = 0.1
    lambda_dssim: float = 0.2
    lambda_w: float = 2000.0
    knn_k: int = 5
    noise_anneal_iters: int = 0  # 0 means "anneal over the whole run"
    jitter_sigma: float = 0.01
    init_opacity: float = 0.1
    holdout_every: int = 4
    holdout_offset: int = 2
    checkpoint_every: int = 500
    idn_depth: int = 8
    idn_width: int = 256
    idn_skip: int = 4
    gru_hidden: int = 256
    d_model: int = 256
    heads: int = 4
    drn_depth: int = 6
    drn_width: int = 256

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        if self.ablation not in ABLATIONS:
            raise ConfigError(f"unknown ablation {self.ablation!r}; choose from {', '.join(ABLATIONS)}")
        for f in dataclasses.fields(self):
            if f.name.startswith("lr_") and getattr(self, f.name) <= 0:
                raise ConfigError(f"{f.name} must be > 0")
        if self.window < 1:
            raise ConfigError("window must be >= 1")
        if self.iterations < 0:
            raise ConfigError("iterations must be >= 0")

    @property
    def weights(self) -> Dict[str, float]:
        return {"render": self.w_render, "depth": self.w_depth, "rigid": self.w_rigid,
                "mutual": self.w_mutual}

    def use_unit_weights(self) -> "TrainConfig":
        return dataclasses.replace(self, **{f"w_{k}": v for k, v in UNIT_WEIGHTS.items()})

    def to_dict(self) -> Dict[str, object]:
        return dataclasses.asdict(self)

    def hash(self) -> str:
        text = "\n".join(f"{k}={v!r}" for k, v in sorted(self.to_dict().items()))
        return hashlib.sha256(text.encode("utf-8")).hexdigest()[:16]

    @classmethod
    def from_mapping(cls, values: Dict[str, object], base: Optional["TrainConfig"] = None) -> "TrainConfig":
        """Build a config from string or typed values; unknown keys are rejected."""
        base = base or cls()
        types = {f.name: type(getattr(base, f.name)) for f in dataclasses.fields(cls)}
        updates = {}
        for key, raw in values.items():
            key = key.replace("-", "_")
            if key not in types:
                raise ConfigError(f"unknown config key {key!r}")
            try:
                if types[key] is int and isinstance(raw, str):
                    val = int(float(raw)) if raw.strip().lower().count("e") else int(raw)
                else:
                    val = types[key](raw)
            except (TypeError, ValueError):
                raise ConfigError(f"bad value for {key}: {raw!r}") from None
            updates[key] = val
        return dataclasses.replace(base, **updates)


def load_config(path: Union[str, os.PathLike, None], overrides: Optional[Dict[str, object]] = None) -> TrainConfig:
    """Read a flat ``key = value`` file (``#`` comments) and apply overrides on top."""
    values: Dict[str, object] = {}
    if path is not None:
        try:
            values.update(read_kv(path))
        except FormatError as exc:
            raise ConfigError(str(exc)) from None
    values.update(overrides or {})
    return TrainConfig.from_mapping(values)


# ---------------------------------------------------------------- optimizer


def adam_step(param: np.ndarray, grad: np.ndarray, m: np.ndarray, v: np.ndarray, step: int, lr: float,
              betas: Tuple[float, float] = (0.9, 0.999), eps: float = 1e-15,
              name: str = "parameter") -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """One bias-corrected Adam update; ``step`` counts from 1. Returns new (param, m, v)."""
    if not np.all(np.isfinite(grad)):
        raise DomainError(f"non-finite gradient for {name}")
    b1, b2 = betas
    m = b1 * m + (1.0 - b1) * grad
    v = b2 * v + (1.0 - b2) * grad * grad
    m_hat = m / (1.0 - b1 ** step)
    v_hat = v / (1.0 - b2 ** step)
    return param - lr * m_hat / (np.sqrt(v_hat) + eps), m, v


@dataclass
class AdamSlot:
    m: np.ndarray
    v: np.ndarray
    step: int = 0


class Adam:
    """Adam over named tensors; slot state can be remapped when Gaussians are added or removed."""

    def __init__(self, betas=(0.9, 0.999), eps=1e-15):
        self.betas = betas
        self.eps = eps
        self.slots: Dict[str, AdamSlot] = {}

    def slot(self, name: str, p: nd.Tensor) -> AdamSlot:
        s = self.slots.get(name)
        if s is None or s.m.shape != p.shape:
            s = AdamSlot(np.zeros_like(p.data), np.zeros_like(p.data))
            self.slots[name] = s
        return s

    def step(self, named: Sequence[Tuple[str, nd.Tensor]], lrs: Dict[str, float]) -> None:
        # check everything first so an abort leaves parameters untouched
        for name, p in named:
            if p.grad is not None and not np.all(np.isfinite(p.grad)):
                raise DomainError(f"non-finite gradient for {name}")
        for name, p in named:
            grad = p.grad if p.grad is not None else np.zeros_like(p.data)
            s = self.slot(name, p)
            s.step += 1
            p.data, s.m, s.v = adam_step(p.data, grad, s.m, s.v, s.step, lrs[name], self.betas, self.eps, name)

    def remap(self, name: str, keep: np.ndarray, n_new: int) -> None:
        """Keep rows ``keep`` and append ``n_new`` zero rows."""
        s = self.slots.get(name)
        if s is None:
            return
        pad = np.zeros((n_new,) + s.m.shape[1:])
        s.m = np.concatenate([s.m[keep], pad])
        s.v = np.concatenate([s.v[keep], pad])


# ---------------------------------------------------------------- model


class DualModel:
    """Canonical Gaussians plus both networks, with the ablation wiring in one place."""

    def __init__(self, g0: GaussianSet, cfg: TrainConfig, frames: int, flows: FlowSource, rng_init):
        self.g0 = g0
        self.cfg = cfg
        self.frames = frames
        self.t_max = frames - 1
        self.flows = flows
        sh = g0.sh_degree
        self.use_idn = cfg.ablation != "no-idn"
        self.use_gmn = cfg.ablation != "no-gmn"
        idn_rng, gmn_rng = (np.random.default_rng(s) for s in rng_init.spawn(2))
        self.idn = IDN(IDNConfig(cfg.idn_depth, cfg.idn_width, cfg.idn_skip, cfg.gru_hidden, sh_degree=sh),
                       idn_rng) if self.use_idn else None
        self.gmn = GMN(GMNConfig(cfg.d_model, cfg.heads, cfg.gru_hidden, cfg.drn_depth, cfg.drn_width,
                                 sh_degree=sh), gmn_rng) if self.use_gmn else None

    def named_parameters(self) -> List[Tuple[str, nd.Tensor]]:
        out = [(f"gauss.{f}", getattr(self.g0, f)) for f in FIELDS]
        if self.idn is not None:
            out += [(f"idn.{k}", p) for k, p in self.idn.named_parameters()]
        if self.gmn is not None:
            out += [(f"gmn.{k}", p) for k, p in self.gmn.named_parameters()]
        return out

    def forward(self, frames: Sequence[int], iteration: int = 0, noise_rng=None, training: bool = False):
        """Per frame: ``(final set, local set or None, delta_idn or None, delta_gmn or None)``."""
        cfg = self.cfg
        local = (self.idn.deform_frames(self.g0, frames, self.t_max, cfg.window)
                 if self.idn is not None else [None] * len(frames))
        total = cfg.noise_anneal_iters or cfg.iterations
        out = []
        for f, loc in zip(frames, local):
            g_local, d_t, rep = loc if loc is not None else (None, None, None)
            if self.gmn is None:
                out.append((g_local, g_local, d_t, None))
                continue
            prev, nxt = self.flows.around(f)
            s_emb = noisy_time_embed(f, self.t_max, iteration, total, rng=noise_rng, training=training)
            g_global, d_gmn = self.gmn.gmn_deform(self.g0, time_embed(f, self.t_max), s_emb, d_t, rep, prev, nxt)
            out.append((g_global, g_local, d_t, d_gmn))
        return out

    def predict(self, t: int) -> GaussianSet:
        """Final deformed set at frame ``t`` in evaluation mode; depends only on t and parameters."""
        if not 0 <= t <= self.t_max:
            raise InputError(f"frame {t} outside [0, {self.t_max}]")
        return self.forward([t])[0][0]


def make_schedule(frames: Sequence[int], iterations: int, seed: int) -> np.ndarray:
    """Concatenated shuffled passes over the training frames."""
    rng = np.random.default_rng([seed, 0x73636864])
    frames = np.asarray(frames, dtype=np.int64)
    passes = -(-iterations // max(len(frames), 1))
    return np.concatenate([rng.permutation(frames) for _ in range(passes)])[:iterations] if iterations else \
        np.zeros(0, dtype=np.int64)


def split_frames(frames: int, every: int, offset: int) -> Tuple[List[int], List[int]]:
    held = [t for t in range(frames) if every > 0 and t % every == offset]
    train = [t for t in range(frames) if t not in held]
    return train, held


class Trainer:
    def __init__(self, cfg: TrainConfig, data: Dataset, flows: FlowSource, g0: Optional[GaussianSet] = None):
        self.cfg = cfg
        self.data = data
        self.frames = data.frames
        ss = np.random.SeedSequence(cfg.seed)
        init_ss, noise_ss, dens_ss = ss.spawn(3)
        if g0 is None:
            g0 = noisy_init(data.scene(), cfg.seed, cfg.jitter_sigma, cfg.init_opacity)
        self.model = DualModel(g0, cfg, self.frames, flows, init_ss)
        self.noise_rng = np.random.default_rng(noise_ss)
        self.densify_rng = np.random.default_rng(dens_ss)
        self.opt = Adam((cfg.beta1, cfg.beta2), cfg.adam_eps)
        self.iteration = 0
        self.train_frames, self.held_frames = split_frames(self.frames, cfg.holdout_every, cfg.holdout_offset)
        self.schedule = make_schedule(self.train_frames, cfg.iterations, cfg.seed)
        self._images: Dict[int, np.ndarray] = {}
        self._depths: Dict[int, np.ndarray] = {}
        self._grad_accum = np.zeros(g0.n)
        self._grad_count = np.zeros(g0.n)
        self._refresh_neighbors()

    # -- data
    def image(self, t: int) -> np.ndarray:
        if t not in self._images:
            self._images[t] = self.data.image(t)
        return self._images[t]

    def depth(self, t: int) -> np.ndarray:
        if t not in self._depths:
            self._depths[t] = self.data.depth(t)
        return self._depths[t]

    def camera(self, t: int) -> Camera:
        return self.data.cams[t]

    @property
    def g0(self) -> GaussianSet:
        return self.model.g0

    def _refresh_neighbors(self) -> None:
        n = self.g0.n
        k = min(self.cfg.knn_k, n - 1)
        self.nbrs = knn(self.g0.means.data, k) if k >= 1 else None

    # -- learning rates
    def learning_rates(self) -> Dict[str, float]:
        cfg = self.cfg
        s = min(1.0, self.iteration / max(cfg.iterations, 1))
        lr_pos = float(np.exp((1.0 - s) * np.log(cfg.lr_position) + s * np.log(cfg.lr_position_final)))
        per_field = {"means": lr_pos, "quats": cfg.lr_rotation, "log_scales": cfg.lr_scale,
                     "opacity_logits": cfg.lr_opacity, "sh": cfg.lr_sh}
        return {name: per_field[name.split(".", 1)[1]] if name.startswith("gauss.") else cfg.lr_networks
                for name, _ in self.model.named_parameters()}

    # -- one step
    def loss_at(self, t: int) -> Tuple[LossBreakdown, RenderOutput]:
        cfg = self.cfg
        model = self.model
        frames = [t - 1, t] if t >= 1 else [t]
        outs = model.forward(frames, self.iteration, self.noise_rng, training=True)
        g_final, g_local, d_idn, d_gmn = outs[-1]
        cam = self.camera(t)
        gt = self.image(t)
        rendered = render(g_final, cam)
        l_render = render_loss(rendered.color, gt, cfg.lambda_dssim)
        if model.use_idn and model.use_gmn and cfg.idn_render_weight > 0:
            idn_out = render(g_local, cam)
            l_render = l_render + cfg.idn_render_weight * render_loss(idn_out.color, gt, cfg.lambda_dssim)
        l_depth = depth_loss(rendered.depth, self.depth(t))
        parts = {"render": l_render, "depth": l_depth}
        if len(outs) == 2 and self.nbrs is not None:
            mu0 = self.g0.means.data
            w = rigidity_weights(mu0, self.nbrs, cfg.lambda_w)
            parts["rigid"] = rigidity_loss(outs[0][0], g_final, self.nbrs, mu0, weights=w)
        weights = cfg.weights
        warm = self.iteration < cfg.mutual_warmup * cfg.iterations
        if cfg.ablation == "full" and not warm:
            parts["mutual"] = mutual_loss(d_idn, d_gmn, visibility_mask(rendered))
        if cfg.ablation != "full" or warm:
            weights = dict(weights, mutual=0.0)
        return total_loss(parts, weights), rendered

    def step(self) -> Tuple[LossBreakdown, int, float]:
        t = int(self.schedule[self.iteration])
        named = self.model.named_parameters()
        for _, p in named:
            p.grad = None
        breakdown, rendered = self.loss_at(t)
        nd.backward(breakdown.total_tensor, inputs=[p for _, p in named])
        # densification statistics: positional gradient norm over visible Gaussians
        vis = visibility_mask(rendered)
        gnorm = np.linalg.norm(self.g0.means.grad, axis=1)
        self._grad_accum[vis] += gnorm[vis]
        self._grad_count[vis] += 1
        self.opt.step(named, self.learning_rates())
        self.iteration += 1
        cfg = self.cfg
        if (cfg.densify_interval > 0 and cfg.densify_from <= self.iteration <= cfg.densify_until
                and self.iteration % cfg.densify_interval == 0):
            self.densify()
        return breakdown, t, psnr(rendered.color.data, self.image(t))

    def densify(self) -> None:
        mean_grad = self._grad_accum / np.maximum(self._grad_count, 1)
        g, keep, n_new = densify_and_prune(self.g0, mean_grad, self.cfg, self.densify_rng)
        self.model.g0 = g
        for f in FIELDS:
            self.opt.remap(f"gauss.{f}", keep, n_new)
        self._grad_accum = np.zeros(g.n)
        self._grad_count = np.zeros(g.n)
        if len(keep) != g.n or n_new:
            self._refresh_neighbors()

    # -- evaluation
    def render_frame(self, t: int, cam: Optional[Camera] = None) -> RenderOutput:
        with nd.no_grad():
            return render(self.model.predict(t), cam or self.camera(t))

    def heldout_psnr(self, frames: Optional[Sequence[int]] = None) -> float:
        frames = self.held_frames if frames is None else frames
        return float(np.mean([psnr(self.render_frame(t).color.data, self.image(t)) for t in frames]))

    # -- persistence
    def save(self, out_dir: Union[str, os.PathLike]) -> Path:
        return save_checkpoint(self, Path(out_dir) / CHECKPOINT_DIR)

    def run(self, out_dir: Union[str, os.PathLike], resume: bool = True, log_every: int = 1) -> Path:
        """Train to ``cfg.iterations`` writing the CSV log and periodic checkpoints."""
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        ckpt = out / CHECKPOINT_DIR
        log_path = out / LOG_FILE
        if resume and ckpt.is_dir():
            load_into(self, ckpt)
            _truncate_log(log_path, self.iteration)
        if not log_path.exists() or self.iteration == 0:
            with open(log_path, "w", newline="") as fh:
                csv.writer(fh).writerow(CSV_HEADER)
        with open(log_path, "a", newline="") as fh:
            writer = csv.writer(fh)
            while self.iteration < self.cfg.iterations:
                br, t, p = self.step()
                if self.iteration % log_every == 0:
                    writer.writerow([self.iteration, t] + [repr(v) for v in br.row()] + [repr(p), self.g0.n])
                if self.cfg.checkpoint_every and self.iteration % self.cfg.checkpoint_every == 0:
                    fh.flush()
                    self.save(out)
        return self.save(out)


def densify_and_prune(g: GaussianSet, grad_stats: np.ndarray, cfg: TrainConfig,
                      rng: np.random.Generator) -> Tuple[GaussianSet, np.ndarray, int]:
    """Prune faint or oversized Gaussians, clone high-gradient ones, then decay opacity.

    Returns the new set, the indices of surviving originals (in order) and the
    number of appended clones.
    """
    arr = g.arrays()
    opac = g.opacities()
    max_scale = np.exp(arr["log_scales"]).max(axis=1)
    prune = (opac < cfg.prune_opacity) | (max_scale > cfg.prune_scale)
    if prune.all():
        raise StateError("densification would prune every Gaussian")
    keep = np.flatnonzero(~prune)
    clone = keep[grad_stats[keep] > cfg.clone_grad_threshold]
    room = max(0, cfg.max_gaussians - len(keep))
    if len(clone) > room:
        # keep the strongest gradients, ties by index
        order = np.argsort(-grad_stats[clone], kind="stable")[:room]
        clone = np.sort(clone[order])
    new = {}
    for f in FIELDS:
        base = arr[f][keep]
        extra = arr[f][clone]
        if f == "means" and len(clone):
            extra = extra + rng.normal(0.0, cfg.clone_jitter, size=extra.shape)
        new[f] = np.concatenate([base, extra])
    new["opacity_logits"] = opacity_decay(new["opacity_logits"], cfg.opacity_delta, cfg.opacity_min,
                                          cfg.opacity_max)
    out = GaussianSet.from_arrays(new["means"], new["quats"], new["log_scales"], new["opacity_logits"],
                                  new["sh"], g.sh_degree, requires_grad=True)
    return out, keep, len(clone)


# ---------------------------------------------------------------- checkpoints


def _rng_state(rng: np.random.Generator) -> str:
    return json.dumps(rng.bit_generator.state, sort_keys=True)


def _set_rng_state(rng: np.random.Generator, text: str) -> None:
    rng.bit_generator.state = json.loads(text)


def save_checkpoint(tr: Trainer, path: Path) -> Path:
    """Write parameters, Adam moments and counters; the directory swap is atomic."""
    path = Path(path)
    tmp = path.with_name(path.name + f".tmp{os.getpid()}")
    if tmp.exists():
        shutil.rmtree(tmp)
    tmp.mkdir(parents=True)
    for name, p in tr.model.named_parameters():
        nd.write_flg4(tmp / f"{name}.flg4", p.data, version=2)
        slot = tr.opt.slots.get(name)
        if slot is not None:
            nd.write_flg4(tmp / f"adam_m.{name}.flg4", slot.m, version=2)
            nd.write_flg4(tmp / f"adam_v.{name}.flg4", slot.v, version=2)
    nd.write_flg4(tmp / "densify_grad_accum.flg4", tr._grad_accum, version=2)
    nd.write_flg4(tmp / "densify_grad_count.flg4", tr._grad_count, version=2)
    meta = {"iteration": tr.iteration, "config_hash": tr.cfg.hash(), "frames": tr.frames,
            "n_gaussians": tr.g0.n, "sh_degree": tr.g0.sh_degree,
            "adam_steps": json.dumps({k: s.step for k, s in sorted(tr.opt.slots.items())}),
            "rng_noise": _rng_state(tr.noise_rng), "rng_densify": _rng_state(tr.densify_rng),
            "data_dir": str(tr.data.root)}
    meta.update({f"cfg.{k}": v for k, v in tr.cfg.to_dict().items()})
    write_kv(tmp / "meta.txt", meta)
    old = path.with_name(path.name + ".old")
    if old.exists():
        shutil.rmtree(old)
    if path.exists():
        os.replace(path, old)
    os.replace(tmp, path)
    if old.exists():
        shutil.rmtree(old)
    return path


def read_meta(path: Union[str, os.PathLike]) -> Dict[str, str]:
    return read_kv(Path(path) / "meta.txt")


def config_from_checkpoint(path: Union[str, os.PathLike]) -> TrainConfig:
    meta = read_meta(path)
    return TrainConfig.from_mapping({k[4:]: v for k, v in meta.items() if k.startswith("cfg.")})


def load_into(tr: Trainer, path: Union[str, os.PathLike]) -> None:
    path = Path(path)
    meta = read_meta(path)
    if meta.get("config_hash") != tr.cfg.hash():
        raise StateError(f"checkpoint {path} was written with a different configuration")
    n = int(meta["n_gaussians"])
    arrays = {f: nd.read_flg4(path / f"gauss.{f}.flg4") for f in FIELDS}
    if arrays["means"].shape[0] != n:
        raise FormatError(f"{path}: Gaussian count does not match meta.txt")
    tr.model.g0 = GaussianSet.from_arrays(arrays["means"], arrays["quats"], arrays["log_scales"],
                                          arrays["opacity_logits"], arrays["sh"], int(meta["sh_degree"]),
                                          requires_grad=True)
    for net, prefix in ((tr.model.idn, "idn"), (tr.model.gmn, "gmn")):
        if net is not None:
            net.load_state_dict({k: nd.read_flg4(path / f"{prefix}.{k}.flg4") for k, _ in net.named_parameters()})
    steps = json.loads(meta["adam_steps"])
    tr.opt.slots = {}
    for name, _ in tr.model.named_parameters():
        if name in steps:
            tr.opt.slots[name] = AdamSlot(nd.read_flg4(path / f"adam_m.{name}.flg4"),
                                          nd.read_flg4(path / f"adam_v.{name}.flg4"), int(steps[name]))
    tr._grad_accum = nd.read_flg4(path / "densify_grad_accum.flg4")
    tr._grad_count = nd.read_flg4(path / "densify_grad_count.flg4")
    _set_rng_state(tr.noise_rng, meta["rng_noise"])
    _set_rng_state(tr.densify_rng, meta["rng_densify"])
    tr.iteration = int(meta["iteration"])
    tr._refresh_neighbors()


def _truncate_log(path: Path, iteration: int) -> None:
    if not path.exists():
        return
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    kept = [rows[0]] + [r for r in rows[1:] if r and int(r[0]) <= iteration]
    with open(path, "w", newline="") as fh:
        csv.writer(fh).writerows(kept)


def open_data(data_dir: Union[str, os.PathLike]) -> Tuple[Dataset, FlowArchive]:
    """Load a dataset and fail fast on any missing or malformed flow file."""
    data = load_dataset(data_dir)
    flows = FlowArchive(Path(data_dir) / "flows")
    flows.validate()
    return data, flows


def trainer_from_checkpoint(ckpt: Union[str, os.PathLike], data_dir: Union[str, os.PathLike, None] = None) -> Trainer:
    ckpt = Path(ckpt)
    meta = read_meta(ckpt)
    cfg = config_from_checkpoint(ckpt)
    data, flows = open_data(data_dir or meta["data_dir"])
    tr = Trainer(cfg, data, flows, g0=_placeholder_set(int(meta["n_gaussians"]), int(meta["sh_degree"])))
    load_into(tr, ckpt)
    return tr


def _placeholder_set(n: int, sh_degree: int) -> GaussianSet:
    return GaussianSet.from_arrays(np.zeros((n, 3)), identity_quats(n), np.zeros((n, 3)), np.zeros(n),
                                   np.zeros((n, sh_count(sh_degree), 3)), sh_degree, requires_grad=True)


def train(cfg: TrainConfig, data_dir: Union[str, os.PathLike], out_dir: Union[str, os.PathLike],
          resume: bool = True) -> Path:
    data, flows = open_data(data_dir)
    return Trainer(cfg, data, flows).run(out_dir, resume=resume)
