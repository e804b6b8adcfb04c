"""Ground-truth dynamic scenes with closed-form motion, oracle renders and dataset export."""
from __future__ import annotations

import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Tuple, Union

import numpy as np

from . import ndiff as nd
from .errors import ConfigError, FormatError, InputError
from .flowio import OracleFlows, read_kv, write_archive, write_kv
from .gscore import SH_C0, Camera, GaussianSet, identity_quats, quat_multiply, sh_count
from .objectives import knn, logit
from .raster import render

PRESETS = ("static", "orbit", "wave", "twobody")
SPACING = 0.035  # lattice pitch; neighbors keep a non-negligible rigidity weight at lambda_w=2000
IMAGE_SIZE = 64
CAM_DISTANCE = 2.5
VIEW_HALF_WIDTH = 0.42  # world half-extent framed by the camera at the origin plane


def _rotz(theta: float) -> np.ndarray:
    c, s = np.cos(theta), np.sin(theta)
    return np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])


def _quatz(theta: float) -> np.ndarray:
    return np.array([np.cos(theta / 2.0), 0.0, 0.0, np.sin(theta / 2.0)])


def _lattice(n: int, rng: np.random.Generator, pitch: float = SPACING) -> np.ndarray:
    """n points on a centered square lattice in the z=0 plane with small z jitter."""
    side = int(np.ceil(np.sqrt(n)))
    ij = np.stack(np.meshgrid(np.arange(side), np.arange(side), indexing="ij"), -1).reshape(-1, 2)[:n]
    xy = (ij - (side - 1) / 2.0) * pitch
    z = rng.uniform(-0.25, 0.25, size=(n, 1)) * pitch
    return np.concatenate([xy, z], axis=1)


def default_camera(width: int = IMAGE_SIZE, height: int = IMAGE_SIZE) -> Camera:
    """Fixed camera on the -z axis looking at the origin, framing +-VIEW_HALF_WIDTH."""
    f = (width / 2.0) * CAM_DISTANCE / VIEW_HALF_WIDTH
    return Camera.look_at([0.0, 0.0, -CAM_DISTANCE], [0.0, 0.0, 0.0], [0.0, -1.0, 0.0],
                          f, f, width, height)


@dataclass
class GroundTruthScene:
    """Oracle Gaussians with closed-form trajectories.

    ``local`` holds per-Gaussian rest positions; :meth:`positions` maps them
    to world space at time t according to the preset.
    """

    preset: str
    frames: int
    seed: int
    local: np.ndarray  # n x 3
    quats0: np.ndarray  # n x 4
    log_scales: np.ndarray  # n x 3
    opacity_logits: np.ndarray  # n
    sh: np.ndarray  # n x C x 3
    group: np.ndarray  # n, cluster id for twobody
    params: Dict[str, float] = field(default_factory=dict)
    sh_degree: int = 1
    width: int = IMAGE_SIZE
    height: int = IMAGE_SIZE

    @property
    def n(self) -> int:
        return len(self.local)

    @property
    def period(self) -> float:
        return float(self.params.get("period", self.frames))

    def _phase(self, t: float) -> float:
        # reducing t modulo the period first makes periodic poses bit-identical
        return 2.0 * np.pi * (np.mod(float(t), self.period) / self.period)

    def poses(self, t: float) -> Tuple[np.ndarray, np.ndarray]:
        """World positions (n x 3) and quaternions (n x 4) at time ``t``."""
        p = self.params
        if self.preset == "static":
            return self.local.copy(), self.quats0.copy()
        if self.preset == "orbit":
            ph = self._phase(t)
            theta = p["swing"] * np.sin(ph)
            centre = np.array([p["radius"] * (np.cos(ph) - 1.0), p["radius"] * np.sin(ph), 0.0])
            mu = self.local @ _rotz(theta).T + centre
            q = quat_multiply(_quatz(theta), self.quats0)
            return mu, q
        if self.preset == "wave":
            ph = self._phase(t)
            mu = self.local.copy()
            mu[:, 0] += p["amplitude"] * np.sin(ph + p["k"] * self.local[:, 1])
            return mu, self.quats0.copy()
        if self.preset == "twobody":
            ph = self._phase(t)
            mu = self.local.copy()
            q = self.quats0.copy()
            a = self.group == 0
            mu[a, 1] += p["amplitude"] * np.sin(ph)
            b = ~a
            rot = _rotz(p["spin"] * ph)
            centre_b = np.array([p["offset"], 0.0, 0.0])
            mu[b] = (self.local[b] - centre_b) @ rot.T + centre_b
            q[b] = quat_multiply(_quatz(p["spin"] * ph), self.quats0[b])
            return mu, q
        raise ConfigError(f"unknown preset {self.preset!r}; choose from {set(PRESETS)}")

    def gaussians(self, t: float) -> GaussianSet:
        mu, q = self.poses(t)
        return GaussianSet.from_arrays(mu, q, self.log_scales, self.opacity_logits, self.sh,
                                       self.sh_degree)

    def camera(self, t: float = 0) -> Camera:
        return default_camera(self.width, self.height)


def make_scene(preset: str, n_gt: int = 64, frames: int = 24, seed: int = 0,
               width: int = IMAGE_SIZE, height: int = IMAGE_SIZE, sh_degree: int = 1) -> GroundTruthScene:
    if preset not in PRESETS:
        raise ConfigError(f"unknown preset {preset!r}; choose from {{{', '.join(PRESETS)}}}")
    if n_gt < 1 or frames < 2:
        raise ConfigError("need n_gt >= 1 and frames >= 2")
    rng = np.random.default_rng([seed, PRESETS.index(preset)])
    group = np.zeros(n_gt, dtype=np.int64)
    params: Dict[str, float] = {"period": float(frames)}
    if preset == "twobody":
        n_a = n_gt // 2
        local = np.concatenate([_lattice(n_a, rng), _lattice(n_gt - n_a, rng)]) if n_a else _lattice(n_gt, rng)
        group[n_a:] = 1
        params.update(amplitude=0.12, spin=1.0, offset=0.17)
        local[group == 0, 0] -= params["offset"]
        local[group == 1, 0] += params["offset"]
    else:
        local = _lattice(n_gt, rng)
        if preset == "orbit":
            # the centre circles through the origin at t=0; displacements stay within about
            # one Gaussian footprint so photometric gradients can find them
            params.update(radius=0.025, swing=0.2)
        elif preset == "wave":
            params.update(amplitude=0.1, k=12.0)
    # smooth random spin about z for visible anisotropy
    angles = rng.uniform(0.0, np.pi, size=n_gt)
    quats0 = np.stack([np.cos(angles / 2), np.zeros(n_gt), np.zeros(n_gt), np.sin(angles / 2)], axis=1)
    log_scales = np.log(SPACING * np.stack([rng.uniform(0.5, 0.9, n_gt), rng.uniform(0.3, 0.6, n_gt),
                                            np.full(n_gt, 0.3)], axis=1))
    opacity_logits = np.full(n_gt, logit(0.9))
    c = sh_count(sh_degree)
    sh = np.zeros((n_gt, c, 3))
    rgb = rng.uniform(0.15, 0.95, size=(n_gt, 3))
    sh[:, 0, :] = (rgb - 0.5) / SH_C0
    return GroundTruthScene(preset, frames, seed, local, quats0, log_scales, opacity_logits, sh, group,
                            params, sh_degree, width, height)


def normalize_depth_map(depth: np.ndarray) -> np.ndarray:
    lo, hi = float(depth.min()), float(depth.max())
    if hi <= lo:
        return np.zeros_like(depth)
    return (depth - lo) / (hi - lo)


def oracle_render(scene: GroundTruthScene, t: float) -> Tuple[np.ndarray, np.ndarray, Camera]:
    """GT image (H x W x 3), min/max-normalized depth (H x W) and camera at time ``t``.

    Background pixels carry the renderer's depth sentinel (the farthest
    Gaussian) so they normalize to 1.
    """
    cam = scene.camera(t)
    with nd.no_grad():
        out = render(scene.gaussians(t), cam)
    return out.color.data.copy(), normalize_depth_map(out.depth.data), cam


def noisy_init(scene: GroundTruthScene, seed: int, jitter_sigma: float = 0.01,
               opacity: float = 0.1) -> GaussianSet:
    """Trainable canonical set from oracle t=0 positions plus isotropic jitter.

    Colors are reset to gray, opacities to ``opacity``, rotations to identity and
    scales to the log of the mean distance to the three nearest neighbors.
    """
    if jitter_sigma < 0:
        raise ConfigError("jitter_sigma must be >= 0")
    rng = np.random.default_rng([seed, 0x696E6974])
    mu0, _ = scene.poses(0)
    n = len(mu0)
    mu = mu0 + rng.normal(0.0, 1.0, size=mu0.shape) * jitter_sigma
    if n > 1:
        k = min(3, n - 1)
        nb = knn(mu, k)
        dist = np.linalg.norm(mu[nb] - mu[:, None, :], axis=-1).mean(axis=1)
        dist = np.maximum(dist, 1e-4)
    else:
        dist = np.full(1, SPACING)
    log_scales = np.repeat(np.log(dist)[:, None], 3, axis=1)
    sh = np.zeros((n, sh_count(scene.sh_degree), 3))
    return GaussianSet.from_arrays(mu, identity_quats(n), log_scales, np.full(n, logit(opacity)), sh,
                                   scene.sh_degree, requires_grad=True)


# ---------------------------------------------------------------- files


def write_ppm(path: Union[str, os.PathLike], img: np.ndarray) -> None:
    """Binary P6 with 8-bit channels; values are clipped to [0, 1] and rounded."""
    img = np.asarray(img, dtype=np.float64)
    h, w = img.shape[:2]
    px = np.round(np.clip(img, 0.0, 1.0) * 255.0).astype(np.uint8)
    Path(path).write_bytes(f"P6\n{w} {h}\n255\n".encode("ascii") + px.tobytes())


def read_ppm(path: Union[str, os.PathLike]) -> np.ndarray:
    p = Path(path)
    if not p.is_file():
        raise InputError(f"missing image {p}")
    buf = p.read_bytes()
    tokens: List[bytes] = []
    pos = 0
    while len(tokens) < 4:
        while pos < len(buf) and buf[pos:pos + 1].isspace():
            pos += 1
        if buf[pos:pos + 1] == b"#":
            while pos < len(buf) and buf[pos:pos + 1] != b"\n":
                pos += 1
            continue
        start = pos
        while pos < len(buf) and not buf[pos:pos + 1].isspace():
            pos += 1
        if start == pos:
            raise FormatError(f"{p}: truncated PPM header")
        tokens.append(buf[start:pos])
    pos += 1
    if tokens[0] != b"P6" or tokens[3] != b"255":
        raise FormatError(f"{p}: only 8-bit binary PPM (P6) is supported")
    w, h = int(tokens[1]), int(tokens[2])
    data = np.frombuffer(buf, dtype=np.uint8, offset=pos)
    if data.size != w * h * 3:
        raise FormatError(f"{p}: pixel payload does not match {w}x{h}")
    return data.reshape(h, w, 3).astype(np.float64) / 255.0


def write_cams(path: Union[str, os.PathLike], cams: List[Camera]) -> None:
    lines = [" ".join(repr(float(v)) for v in cam.to_row()) for cam in cams]
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def read_cams(path: Union[str, os.PathLike], width: int, height: int) -> List[Camera]:
    p = Path(path)
    if not p.is_file():
        raise InputError(f"missing camera file {p}")
    cams = []
    for lineno, line in enumerate(p.read_text(encoding="utf-8").splitlines(), 1):
        if not line.strip():
            continue
        try:
            vals = [float(v) for v in line.split()]
        except ValueError:
            raise FormatError(f"{p}:{lineno}: non-numeric camera value") from None
        if len(vals) != 16:
            raise FormatError(f"{p}:{lineno}: expected 16 values, got {len(vals)}")
        cams.append(Camera.from_row(vals, width, height))
    return cams


@dataclass
class Dataset:
    """A synthesized sequence as loaded back from disk."""

    root: Path
    frames: int
    width: int
    height: int
    meta: Dict[str, str]
    cams: List[Camera]

    def image(self, t: int) -> np.ndarray:
        return read_ppm(self.root / f"frame_{t:03d}.ppm")

    def depth(self, t: int) -> np.ndarray:
        return nd.read_flg4(self.root / f"depth_{t:03d}.flg4")

    def scene(self) -> GroundTruthScene:
        m = self.meta
        return make_scene(m["preset"], int(m["n"]), self.frames, int(m["seed"]), self.width, self.height)


def write_dataset(scene: GroundTruthScene, out_dir: Union[str, os.PathLike], seed: int) -> Path:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    cams = []
    for t in range(scene.frames):
        img, depth, cam = oracle_render(scene, t)
        write_ppm(out / f"frame_{t:03d}.ppm", img)
        nd.write_flg4(out / f"depth_{t:03d}.flg4", depth)
        cams.append(cam)
    write_cams(out / "cams.txt", cams)
    flows = OracleFlows(scene, cams[0], seed)
    write_archive(out / "flows", flows.all_pairs(), scene.frames, seed, flows.lift_matrix)
    write_kv(out / "scene.txt", {"preset": scene.preset, "n": scene.n, "frames": scene.frames,
                                 "seed": scene.seed, "width": scene.width, "height": scene.height,
                                 "sh_degree": scene.sh_degree})
    return out


def load_dataset(root: Union[str, os.PathLike]) -> Dataset:
    root = Path(root)
    meta = read_kv(root / "scene.txt")
    try:
        frames, width, height = int(meta["frames"]), int(meta["width"]), int(meta["height"])
    except (KeyError, ValueError) as exc:
        raise FormatError(f"{root / 'scene.txt'}: bad manifest ({exc})") from None
    cams = read_cams(root / "cams.txt", width, height)
    if len(cams) != frames:
        raise FormatError(f"{root / 'cams.txt'}: {len(cams)} cameras for {frames} frames")
    return Dataset(root, frames, width, height, meta, cams)
