"""Command-line entry point: ``synth``, ``train``, ``render`` and ``eval``."""
from __future__ import annotations

import argparse
import csv
import logging
import sys
from dataclasses import dataclass, field
from pathlib import Path
from typing import List, Optional, Sequence

import numpy as np

from . import ndiff as nd
from .errors import ConfigError, DualDeformError, RangeError
from .gscore import Camera
from .objectives import psnr, ssim
from .scenesynth import PRESETS, make_scene, read_ppm, write_dataset, write_ppm
from .trainer import (ABLATIONS, CHECKPOINT_DIR, Trainer, load_config, open_data, read_meta,
                      trainer_from_checkpoint)

log = logging.getLogger("dualdeform")

PSNR_CAP = 99.0


@dataclass
class EvalReport:
    frames: List[int]
    psnr: List[float]
    ssim: List[float]
    config_hash: str = ""
    mean_psnr: float = field(init=False)
    mean_ssim: float = field(init=False)

    def __post_init__(self):
        self.mean_psnr = float(np.mean(self.psnr)) if self.psnr else float("nan")
        self.mean_ssim = float(np.mean(self.ssim)) if self.ssim else float("nan")

    def write_csv(self, path: Path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["frame", "psnr", "ssim"])
            for row in zip(self.frames, self.psnr, self.ssim):
                w.writerow([row[0], repr(row[1]), repr(row[2])])
            w.writerow(["mean", repr(self.mean_psnr), repr(self.mean_ssim)])

    def summary(self) -> str:
        return (f"frames={len(self.frames)} mean_psnr={self.mean_psnr:.4f} mean_ssim={self.mean_ssim:.4f} "
                f"config={self.config_hash} (PSNR of identical images is reported as {PSNR_CAP})")


def evaluate_images(frames: Sequence[int], renders: Sequence[np.ndarray], gts: Sequence[np.ndarray],
                    config_hash: str = "") -> EvalReport:
    ps = [psnr(r, g, PSNR_CAP) for r, g in zip(renders, gts)]
    ss = [float(ssim(r, g).data) for r, g in zip(renders, gts)]
    return EvalReport(list(frames), ps, ss, config_hash)


def _checkpoint_path(p: str) -> Path:
    path = Path(p)
    if (path / CHECKPOINT_DIR / "meta.txt").is_file():
        return path / CHECKPOINT_DIR
    return path


def _parse_camera(spec: str, width: int, height: int) -> Camera:
    p = Path(spec)
    text = p.read_text(encoding="utf-8").split() if p.is_file() else spec.replace(",", " ").split()
    try:
        vals = [float(v) for v in text]
    except ValueError:
        raise ConfigError("--camera expects 16 numbers or a file holding them") from None
    if len(vals) != 16:
        raise ConfigError(f"--camera expects 16 numbers, got {len(vals)}")
    return Camera.from_row(vals, width, height)


def _frame_list(tr: Trainer, ts: Optional[Sequence[int]], all_frames: bool) -> List[int]:
    t_max = tr.frames - 1
    frames = list(range(tr.frames)) if all_frames or not ts else list(ts)
    for t in frames:
        if not 0 <= t <= t_max:
            raise RangeError(f"frame {t} outside [0, {t_max}]")
    return frames


# ---------------------------------------------------------------- commands


def cmd_synth(preset: str, n: int, frames: int, seed: int, out_dir: str) -> Path:
    scene = make_scene(preset, n, frames, seed)
    out = write_dataset(scene, out_dir, seed)
    log.info("wrote %d frames of '%s' to %s", frames, preset, out)
    return out


def cmd_train(config_path: Optional[str], data_dir: str, out_dir: str, overrides=None,
              unit_weights: bool = False, resume: bool = True) -> Path:
    cfg = load_config(config_path, overrides)
    if unit_weights:
        cfg = cfg.use_unit_weights()
    data, flows = open_data(data_dir)
    tr = Trainer(cfg, data, flows)
    path = tr.run(out_dir, resume=resume)
    log.info("checkpoint at %s after %d iterations", path, tr.iteration)
    return path


def cmd_render(checkpoint: str, ts: Optional[Sequence[int]], all_frames: bool, out_dir: str,
               camera: Optional[str] = None, data_dir: Optional[str] = None) -> List[Path]:
    tr = trainer_from_checkpoint(_checkpoint_path(checkpoint), data_dir)
    frames = _frame_list(tr, ts, all_frames)
    cam = _parse_camera(camera, tr.data.width, tr.data.height) if camera else None
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    written = []
    for t in frames:
        r = tr.render_frame(t, cam)
        write_ppm(out / f"render_{t:03d}.ppm", r.color.data)
        nd.write_flg4(out / f"render_depth_{t:03d}.flg4", r.depth.data)
        written.append(out / f"render_{t:03d}.ppm")
    return written


def cmd_eval(checkpoint: str, data_dir: Optional[str], frames: Optional[Sequence[int]], out_dir: str,
             all_frames: bool = False) -> EvalReport:
    ckpt = _checkpoint_path(checkpoint)
    tr = trainer_from_checkpoint(ckpt, data_dir)
    if all_frames:
        ts = list(range(tr.frames))
    else:
        ts = list(frames) if frames else list(tr.held_frames)
    ts = _frame_list(tr, ts, False)
    gts = [read_ppm(tr.data.root / f"frame_{t:03d}.ppm") for t in ts]
    renders = [tr.render_frame(t).color.data for t in ts]
    report = evaluate_images(ts, renders, gts, read_meta(ckpt).get("config_hash", ""))
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    report.write_csv(out / "eval.csv")
    (out / "eval_summary.txt").write_text(report.summary() + "\n", encoding="utf-8")
    return report


# ---------------------------------------------------------------- argparse


def _common() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(add_help=False, argument_default=argparse.SUPPRESS)
    p.add_argument("--seed", type=int, help="random seed (default 0)")
    p.add_argument("--config", help="flat key = value training config file")
    p.add_argument("--out", help="output directory")
    return p


def build_parser() -> argparse.ArgumentParser:
    common = _common()
    ap = argparse.ArgumentParser(prog="dualdeform", parents=[common],
                                 description="Dynamic Gaussian scenes with dual deformation networks.")
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    s = sub.add_parser("synth", parents=[common], help="generate a synthetic dataset")
    s.add_argument("--preset", required=True)
    s.add_argument("--n", type=int, default=64)
    s.add_argument("--frames", type=int, default=24)

    t = sub.add_parser("train", parents=[common], help="train on a dataset")
    t.add_argument("--data", required=True)
    t.add_argument("--ablation", choices=ABLATIONS)
    t.add_argument("--iterations", type=int)
    t.add_argument("--unit-weights", action="store_true", help="unweighted sum of all losses")
    t.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="override a config key")
    t.add_argument("--no-resume", action="store_true")

    r = sub.add_parser("render", parents=[common], help="render frames from a checkpoint")
    r.add_argument("--checkpoint", required=True)
    r.add_argument("--t", type=int, nargs="+")
    r.add_argument("--all", action="store_true")
    r.add_argument("--camera", help="16 numbers (R row-major, t, fx, fy, cx, cy) or a file with them")
    r.add_argument("--data")

    e = sub.add_parser("eval", parents=[common], help="PSNR/SSIM against ground truth")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--data")
    e.add_argument("--frames", type=int, nargs="+")
    e.add_argument("--all", action="store_true")
    return ap


def _overrides(args) -> dict:
    out = {}
    for item in args.set:
        if "=" not in item:
            raise ConfigError(f"--set expects KEY=VALUE, got {item!r}")
        k, v = item.split("=", 1)
        out[k.strip()] = v.strip()
    if getattr(args, "seed", None) is not None:
        out["seed"] = args.seed
    if args.ablation:
        out["ablation"] = args.ablation
    if args.iterations is not None:
        out["iterations"] = args.iterations
    return out


def main(argv: Optional[Sequence[str]] = None) -> int:
    ap = build_parser()
    args = ap.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    out = getattr(args, "out", None)
    try:
        if args.command == "synth":
            if out is None:
                raise ConfigError("synth needs --out")
            cmd_synth(args.preset, args.n, args.frames, getattr(args, "seed", 0), out)
        elif args.command == "train":
            if out is None:
                raise ConfigError("train needs --out")
            cmd_train(getattr(args, "config", None), args.data, out, _overrides(args),
                      args.unit_weights, not args.no_resume)
        elif args.command == "render":
            if out is None:
                raise ConfigError("render needs --out")
            for p in cmd_render(args.checkpoint, args.t, args.all, out, args.camera, args.data):
                print(p)
        elif args.command == "eval":
            report = cmd_eval(args.checkpoint, args.data, args.frames, out or ".", args.all)
            print(report.summary())
    except DualDeformError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 3
    return 0


if __name__ == "__main__":
    sys.exit(main())
