"""Command-line interface: synth / train / render / eval / decompose /
check-grad / export.

Exit codes: 0 success, 1 usage error, 2 runtime error.  Every subcommand
writes a ``<name>_config.json`` with its fully resolved arguments next to
its outputs, so a run can be reproduced from that file alone.
"""

from __future__ import annotations

import argparse
import json
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from .config import RenderSettings
from .gradients import LossConfig, fd_check
from .metrics import psnr
from .optim import TrainConfig, evaluate, train
from .raster import DECOMPOSITION_CHANNELS, render, render_decomposition
from .scene import init_scene
from .sceneio import (load_image, load_manifest, load_scene, save_f32, save_png,
                      save_scene, scene_to_json)
from .slicing import Query
from .synthetic import KINDS, dataset_frames, make_synthetic, write_dataset


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):  # map argparse's exit(2) onto our usage code 1
        raise UsageError(message)


def build_parser() -> _Parser:
    p = _Parser(prog="betasplat", description=__doc__)
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("synth", help="generate a synthetic dataset")
    s.add_argument("--kind", choices=KINDS, required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--size", type=int, default=64)

    t = sub.add_parser("train", help="fit a scene to a dataset")
    t.add_argument("--data", required=True, help="manifest.json path")
    t.add_argument("--out", required=True)
    t.add_argument("--n-dims", type=int, choices=(3, 6, 7), default=6)
    t.add_argument("--init-count", type=int, default=192)
    t.add_argument("--threads", type=int, default=1, help="0 = all cores")
    t.add_argument("--freeze-shapes", action="store_true")
    for name, f in TrainConfig.__dataclass_fields__.items():
        if name == "freeze_shapes":
            continue
        t.add_argument("--" + name.replace("_", "-"), type=type(f.default), default=f.default)

    r = sub.add_parser("render", help="render a scene from a dataset camera")
    r.add_argument("--scene", required=True)
    r.add_argument("--data", required=True)
    r.add_argument("--frame", type=int, default=0)
    r.add_argument("--out", required=True, help="output PNG path")
    r.add_argument("--f32-out", default=None)
    r.add_argument("--time", type=float, default=None)
    r.add_argument("--dir", default=None, help="view direction as x,y,z")
    r.add_argument("--threads", type=int, default=1)

    e = sub.add_parser("eval", help="PSNR/SSIM of a scene against a dataset split")
    e.add_argument("--scene", required=True)
    e.add_argument("--data", required=True)
    e.add_argument("--split", choices=("train", "test"), default="test")
    e.add_argument("--out", required=True, help="output JSON path")
    e.add_argument("--threads", type=int, default=1)

    d = sub.add_parser("decompose", help="per-primitive scalar heatmap render")
    d.add_argument("--scene", required=True)
    d.add_argument("--data", required=True)
    d.add_argument("--frame", type=int, default=0)
    d.add_argument("--channel", choices=DECOMPOSITION_CHANNELS, required=True)
    d.add_argument("--out", required=True)
    d.add_argument("--threads", type=int, default=1)

    g = sub.add_parser("check-grad", help="finite-difference gradient report")
    g.add_argument("--n-dims", type=int, choices=(3, 6, 7), default=6)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--primitives", type=int, default=5)
    g.add_argument("--size", type=int, default=32)
    g.add_argument("--eps", type=float, default=1e-4)
    g.add_argument("--tol-rel", type=float, default=1e-3)
    g.add_argument("--out", required=True, help="output JSON path")

    x = sub.add_parser("export", help="dump a scene file as JSON")
    x.add_argument("--scene", required=True)
    x.add_argument("--out", required=True)
    return p


def _write_config(args, out_path: Path) -> None:
    out_path.parent.mkdir(parents=True, exist_ok=True)
    resolved = {k: v for k, v in vars(args).items()}
    out_path.write_text(json.dumps(resolved, indent=1, default=str))


def _scene_n_dims(args, manifest) -> int:
    n_dims = args.n_dims
    if n_dims == 7 and not manifest.dynamic:
        raise UsageError("7D training needs per-frame times in the manifest")
    if manifest.dynamic and n_dims != 7:
        raise UsageError("dynamic dataset requires --n-dims 7")
    return n_dims


def _frame_query(scene, entry, dir_arg=None, time_arg=None) -> Query:
    direction = entry.camera.forward
    if dir_arg is not None:
        direction = np.array([float(v) for v in dir_arg.split(",")])
    if scene.n_dims == 3:
        return Query.static()
    if scene.n_dims == 6:
        return Query.view(direction)
    t = time_arg if time_arg is not None else entry.time
    if t is None:
        raise UsageError("7D scene needs --time or a dynamic dataset frame")
    return Query.view_time(t, direction)


def _cmd_synth(args) -> int:
    scene, frames = make_synthetic(args.kind, args.seed, args.size)
    manifest = write_dataset(args.out, scene, frames, args.size)
    _write_config(args, Path(args.out) / "synth_config.json")
    print(f"wrote {manifest} ({len(frames)} frames)")
    return 0


def _cmd_train(args) -> int:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    manifest = load_manifest(args.data)
    n_dims = _scene_n_dims(args, manifest)
    bounds = manifest.bounds or ((-1.0, -1.0, -1.0), (1.0, 1.0, 1.0))
    cfg = TrainConfig(**{name: getattr(args, name)
                         for name in TrainConfig.__dataclass_fields__})
    settings = RenderSettings(threads=args.threads)
    scene = init_scene(n_dims, args.init_count, cfg.seed, bounds=bounds,
                       background=manifest.background)
    entries = [e for e in manifest.entries if e.split == "train"]
    frames = dataset_frames(entries, n_dims, load_image)
    _write_config(args, out / "train_config.json")
    scene, metrics = train(scene, frames, cfg, settings,
                           metrics_path=out / "metrics.jsonl", checkpoint_dir=out)
    save_scene(scene, out / "scene.ubs")
    final = metrics[-1] if metrics else {}
    print(f"trained {cfg.iterations} iterations; final loss "
          f"{final.get('loss', float('nan')):.5f}, train psnr {final.get('psnr', 0.0):.2f} dB")
    return 0


def _cmd_render(args) -> int:
    scene = load_scene(args.scene)
    manifest = load_manifest(args.data)
    entry = manifest.entries[args.frame]
    query = _frame_query(scene, entry, args.dir, args.time)
    settings = RenderSettings(threads=args.threads)
    img = render(scene, entry.camera, query, settings)
    save_png(img, args.out)
    if args.f32_out:
        save_f32(img, args.f32_out)
    _write_config(args, Path(args.out).with_suffix(".config.json"))
    print(f"wrote {args.out}")
    return 0


def _cmd_eval(args) -> int:
    scene = load_scene(args.scene)
    manifest = load_manifest(args.data)
    entries = [e for e in manifest.entries if e.split == args.split]
    if not entries:
        raise UsageError(f"no frames in split {args.split!r}")
    frames = dataset_frames(entries, scene.n_dims, load_image)
    settings = RenderSettings(threads=args.threads)
    report = evaluate(scene, frames, settings)
    Path(args.out).write_text(json.dumps(report, indent=1))
    _write_config(args, Path(args.out).with_suffix(".config.json"))
    print(f"mean psnr {report['mean_psnr']:.2f} dB, mean ssim {report['mean_ssim']:.4f}")
    return 0


def _cmd_decompose(args) -> int:
    scene = load_scene(args.scene)
    manifest = load_manifest(args.data)
    entry = manifest.entries[args.frame]
    query = _frame_query(scene, entry)
    settings = RenderSettings(threads=args.threads)
    img = render_decomposition(scene, entry.camera, query, args.channel, settings)
    save_png(img, args.out)
    _write_config(args, Path(args.out).with_suffix(".config.json"))
    print(f"wrote {args.out}")
    return 0


def _cmd_check_grad(args) -> int:
    from .testing import random_scene, random_frames
    scene = random_scene(args.n_dims, args.primitives, args.seed)
    frames = random_frames(scene, args.size, args.seed + 1)
    report = fd_check(scene, frames, LossConfig(), RenderSettings(),
                      eps=args.eps, tol_rel=args.tol_rel)
    Path(args.out).write_text(json.dumps(report.to_dict(), indent=1))
    _write_config(args, Path(args.out).with_suffix(".config.json"))
    print(f"checked {report.checked} parameters: {report.passed} passed, "
          f"{len(report.failures)} failed, {report.excluded_boundary} on boundaries")
    return 0 if report.pass_fraction >= 0.99 else 2


def _cmd_export(args) -> int:
    scene = load_scene(args.scene)
    Path(args.out).write_text(json.dumps(scene_to_json(scene), indent=1))
    print(f"wrote {args.out}")
    return 0


_COMMANDS = {
    "synth": _cmd_synth,
    "train": _cmd_train,
    "render": _cmd_render,
    "eval": _cmd_eval,
    "decompose": _cmd_decompose,
    "check-grad": _cmd_check_grad,
    "export": _cmd_export,
}


def run(argv) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return 1
    try:
        return _COMMANDS[args.command](args)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


def main() -> None:
    sys.exit(run(sys.argv[1:]))


if __name__ == "__main__":
    main()
