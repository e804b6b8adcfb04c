"""Flow embedding grids: an on-disk archive plus an oracle provider for synthetic scenes.

The archive layout is a directory holding ``flow_{a}_{b}.flg4`` tensors
(h x w x 128), ``lift.flg4`` (the seeded 128 x 4 lift used by the oracle
provider) and ``manifest.txt`` with ``key=value`` lines for frames, h, w
and seed.
"""
from __future__ import annotations

import os
from pathlib import Path
from typing import Dict, Optional, Tuple, Union

import numpy as np

from . import ndiff as nd
from .errors import FormatError, InputError
from .gmn import FLOW_DIM, FlowEmbeddingGrid
from .gscore import Camera, covariance3d, project_gaussians
from .raster import SIGMA_CUTOFF2, conics

GRID = 16
MANIFEST = "manifest.txt"
LIFT_FILE = "lift.flg4"
LIFT_STD = 0.5


def flow_name(a: int, b: int) -> str:
    return f"flow_{a}_{b}.flg4"


def read_kv(path: Union[str, os.PathLike]) -> Dict[str, str]:
    """Parse a ``key=value`` text file; blank lines and ``#`` comments are ignored."""
    p = Path(path)
    if not p.is_file():
        raise InputError(f"missing file {p}")
    out = {}
    for lineno, line in enumerate(p.read_text(encoding="utf-8").splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise FormatError(f"{p}:{lineno}: expected key=value")
        key, val = line.split("=", 1)
        out[key.strip()] = val.strip()
    return out


def write_kv(path: Union[str, os.PathLike], items: Dict[str, object]) -> None:
    Path(path).write_text("".join(f"{k}={v}\n" for k, v in items.items()), encoding="utf-8")


def make_lift(seed: int) -> np.ndarray:
    """Seeded 128 x 4 projection; no bias so zero flow maps to the zero feature."""
    rng = np.random.default_rng([seed, 0x466C6F77])
    return rng.normal(0.0, LIFT_STD, size=(FLOW_DIM, 4))


def synth_embedding(flow2d: np.ndarray, lift: np.ndarray, a: int = 0, b: int = 1) -> FlowEmbeddingGrid:
    """Per cell ``tanh(lift @ [u, v, |f|, atan2(v, u)/pi])``."""
    flow2d = np.asarray(flow2d, dtype=np.float64)
    u, v = flow2d[..., 0], flow2d[..., 1]
    desc = np.stack([u, v, np.hypot(u, v), np.arctan2(v, u) / np.pi], axis=-1)
    return FlowEmbeddingGrid(np.tanh(desc @ lift.T), a, b)


def cell_centers(cam: Camera, grid: Tuple[int, int] = (GRID, GRID)) -> np.ndarray:
    """Pixel coordinates (h, w, 2) of token cell centers; pixel centers sit on integers."""
    gh, gw = grid
    sx, sy = cam.width / gw, cam.height / gh
    xs = (np.arange(gw) + 0.5) * sx - 0.5
    ys = (np.arange(gh) + 0.5) * sy - 0.5
    return np.stack(np.meshgrid(xs, ys, indexing="xy"), axis=-1)


def gt_flow(scene, cam: Camera, a: int, b: int, grid: Tuple[int, int] = (GRID, GRID)) -> np.ndarray:
    """Oracle pixel displacement (h, w, 2) from frame ``a`` to ``b``.

    Each cell takes the motion of the nearest projected mean among the
    Gaussians whose 3-sigma ellipse at frame ``a`` covers the cell center.
    """
    ga, gb = scene.gaussians(a), scene.gaussians(b)
    with nd.no_grad():
        pa = project_gaussians(ga.means, covariance3d(ga.quats, ga.log_scales), cam)
        pb = project_gaussians(gb.means, covariance3d(gb.quats, gb.log_scales), cam)
    keep = ~pa.culled & ~pb.culled
    ma, mb = pa.mean2d.data[keep], pb.mean2d.data[keep]
    centers = cell_centers(cam, grid).reshape(-1, 2)
    flow = np.zeros((len(centers), 2))
    if len(ma):
        conic = conics(pa.cov2d.data[keep])
        d = centers[:, None, :] - ma[None]
        maha = (conic[:, 0] * d[..., 0] ** 2 + 2.0 * conic[:, 1] * d[..., 0] * d[..., 1]
                + conic[:, 2] * d[..., 1] ** 2)
        dist2 = np.where(maha <= SIGMA_CUTOFF2, np.sum(d * d, axis=-1), np.inf)
        nearest = np.argmin(dist2, axis=1)
        hit = np.isfinite(dist2[np.arange(len(centers)), nearest])
        flow[hit] = (mb - ma)[nearest[hit]]
    return flow.reshape(grid[0], grid[1], 2)


def pair_for_target(t: int, frames: int) -> Tuple[Tuple[int, int], Tuple[int, int]]:
    """Past and future flow pairs around frame ``t``; a missing side duplicates the other."""
    prev = (t - 1, t) if t >= 1 else None
    nxt = (t, t + 1) if t + 1 <= frames - 1 else None
    if prev is None and nxt is None:
        raise InputError(f"no flow pair around frame {t} in a {frames}-frame sequence")
    return prev or nxt, nxt or prev


class FlowSource:
    """Common lookup for the archive and the in-memory oracle provider."""

    frames: int

    def load_pair(self, a: int, b: int) -> FlowEmbeddingGrid:
        raise NotImplementedError

    def around(self, t: int) -> Tuple[FlowEmbeddingGrid, FlowEmbeddingGrid]:
        p, n = pair_for_target(t, self.frames)
        return self.load_pair(*p), self.load_pair(*n)


class FlowArchive(FlowSource):
    def __init__(self, root: Union[str, os.PathLike]):
        self.root = Path(root)
        meta = read_kv(self.root / MANIFEST)
        try:
            self.frames = int(meta["frames"])
            self.h = int(meta["h"])
            self.w = int(meta["w"])
            self.seed = int(meta.get("seed", 0))
        except (KeyError, ValueError) as exc:
            raise FormatError(f"{self.root / MANIFEST}: bad manifest ({exc})") from None
        self._cache: Dict[Tuple[int, int], FlowEmbeddingGrid] = {}

    def path(self, a: int, b: int) -> Path:
        return self.root / flow_name(a, b)

    def load_pair(self, a: int, b: int) -> FlowEmbeddingGrid:
        key = (a, b)
        if key in self._cache:
            return self._cache[key]
        p = self.path(a, b)
        if not p.is_file():
            raise InputError(f"missing flow pair {flow_name(a, b)} in {self.root}")
        arr = nd.read_flg4(p)
        if arr.shape != (self.h, self.w, FLOW_DIM):
            raise FormatError(f"{p}: shape {arr.shape} does not match manifest "
                              f"({self.h}, {self.w}, {FLOW_DIM})")
        grid = FlowEmbeddingGrid(arr, a, b)
        self._cache[key] = grid
        return grid

    def validate(self) -> None:
        """Load every consecutive pair so that bad files fail before training starts."""
        for t in range(self.frames - 1):
            self.load_pair(t, t + 1)

    def lift(self) -> Optional[np.ndarray]:
        p = self.root / LIFT_FILE
        return nd.read_flg4(p) if p.is_file() else None


def write_archive(root: Union[str, os.PathLike], grids: Dict[Tuple[int, int], FlowEmbeddingGrid],
                  frames: int, seed: int, lift: Optional[np.ndarray] = None) -> FlowArchive:
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    h = w = 0
    for (a, b), g in sorted(grids.items()):
        h, w = g.hw
        nd.write_flg4(root / flow_name(a, b), g.tokens)
    if lift is not None:
        nd.write_flg4(root / LIFT_FILE, lift, version=2)  # exact, for reproducing the oracle
    write_kv(root / MANIFEST, {"frames": frames, "h": h, "w": w, "seed": seed})
    return FlowArchive(root)


class OracleFlows(FlowSource):
    """Synthetic flow embeddings computed from a ground-truth scene.

    Values are rounded through float32 so the in-memory path matches what
    the archive stores.
    """

    def __init__(self, scene, cam: Camera, seed: int, grid: Tuple[int, int] = (GRID, GRID)):
        self.scene = scene
        self.cam = cam
        self.grid = grid
        self.frames = scene.frames
        self.lift_matrix = make_lift(seed)
        self._cache: Dict[Tuple[int, int], FlowEmbeddingGrid] = {}

    def load_pair(self, a: int, b: int) -> FlowEmbeddingGrid:
        key = (a, b)
        if key not in self._cache:
            if not (0 <= a < self.frames and 0 <= b < self.frames):
                raise InputError(f"missing flow pair {flow_name(a, b)}")
            g = synth_embedding(gt_flow(self.scene, self.cam, a, b, self.grid), self.lift_matrix, a, b)
            self._cache[key] = FlowEmbeddingGrid(g.tokens.astype(np.float32).astype(np.float64), a, b)
        return self._cache[key]

    def all_pairs(self) -> Dict[Tuple[int, int], FlowEmbeddingGrid]:
        return {(t, t + 1): self.load_pair(t, t + 1) for t in range(self.frames - 1)}
