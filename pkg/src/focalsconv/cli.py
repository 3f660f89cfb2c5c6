"""Command-line harness: ``gen``, ``forward``, ``train`` and ``export``.

Exit codes: 0 success, 2 configuration/input error, 3 numerical abort.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from threadpoolctl import threadpool_limits

from . import harness as h
from .backbone import Backbone, BackboneSpec, build_backbone
from .errors import ConfigError, FocalsConvError, NumericalError
from .fusion import read_calib
from .sparse_conv import get_num_threads, set_num_threads
from .sparse_tensor import write_svox

def _load_json(path):
    try:
        return json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: {exc}") from exc


def cmd_gen(args) -> None:
    spec = h.SceneSpec.from_dict(_load_json(args.spec))
    scene = h.scene_from_spec(spec)
    write_svox(scene.tensor, args.out)
    h.write_sidecar(h.sidecar_path(args.out), scene)


def _model_or_backbone(args) -> Backbone:
    if args.ckpt:
        return h.Model.load(args.ckpt).backbone
    return build_backbone(BackboneSpec.from_dict(_load_json(args.config)), seed=args.seed)


def cmd_forward(args) -> None:
    bb = _model_or_backbone(args)
    scene = h.load_scene(args.inp)
    report = h.sparsity_report(bb, scene)
    with open(args.stats, "w", newline="") as fh:
        h.write_stats(report, fh)


def cmd_train(args) -> None:
    spec = BackboneSpec.from_dict(_load_json(args.config))
    cfg = h.TrainConfig.from_dict(_load_json(args.train_cfg))
    paths = sorted(Path(args.scenes).glob("*.svox"))
    if not paths:
        raise ConfigError(f"no .svox scenes in {args.scenes}")
    scenes = [h.load_scene(p, require_boxes=True) for p in paths]
    log_path = Path(args.log) if args.log else Path(args.out).with_suffix(".csv")
    with open(log_path, "w", newline="") as fh:
        model, _ = h.train(cfg, spec, scenes, log_file=fh)
    model.save(args.out)


def cmd_export(args) -> None:
    model = h.Model.load(args.ckpt)
    scene = h.load_scene(args.inp)
    res = model.backbone.forward(scene.tensor)
    t = res.layer_outputs[args.layer] if args.layer else res.output
    calib = read_calib(args.calib) if args.calib else None
    cols = h.export_points(t, scene, calib)
    if args.ply:
        h.write_ply(cols, args.ply)
    if args.csv:
        with open(args.csv, "w", newline="") as fh:
            h.write_points_csv(cols, fh)


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--threads", type=int, default=argparse.SUPPRESS,
                        help="worker threads for per-offset GEMMs (results do not depend on it)")
    p = argparse.ArgumentParser(prog="focalsconv", parents=[common])
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen", parents=[common], help="synthesize a voxelized scene")
    g.add_argument("--spec", required=True)
    g.add_argument("--out", required=True)
    g.set_defaults(fn=cmd_gen)

    f = sub.add_parser("forward", parents=[common], help="run a backbone and write sparsity statistics")
    src = f.add_mutually_exclusive_group(required=True)
    src.add_argument("--config")
    src.add_argument("--ckpt")
    f.add_argument("--in", dest="inp", required=True)
    f.add_argument("--stats", required=True)
    f.add_argument("--seed", type=int, default=0)
    f.set_defaults(fn=cmd_forward)

    t = sub.add_parser("train", parents=[common], help="train backbone plus proxy head")
    t.add_argument("--config", required=True)
    t.add_argument("--train-cfg", required=True)
    t.add_argument("--scenes", required=True)
    t.add_argument("--out", required=True)
    t.add_argument("--log", help="metrics CSV (default: <out>.csv)")
    t.set_defaults(fn=cmd_train)

    e = sub.add_parser("export", parents=[common], help="export output voxel centers")
    e.add_argument("--ckpt", required=True)
    e.add_argument("--in", dest="inp", required=True)
    e.add_argument("--ply")
    e.add_argument("--csv")
    e.add_argument("--calib")
    e.add_argument("--layer", help="layer name to export (default: backbone output)")
    e.set_defaults(fn=cmd_export)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    threads = getattr(args, "threads", 1)
    if threads < 1:
        print("error: --threads must be >= 1", file=sys.stderr)
        return 2
    previous = get_num_threads()
    set_num_threads(threads)
    try:
        # BLAS stays single-threaded so per-offset products are bit-identical
        with threadpool_limits(limits=1):
            args.fn(args)
    except NumericalError as exc:
        print(f"numerical abort: {exc}", file=sys.stderr)
        return 3
    except (FocalsConvError, OSError, KeyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    finally:
        set_num_threads(previous)
    return 0


if __name__ == "__main__":
    sys.exit(main())
