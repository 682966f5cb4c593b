"""Command-line entry point: ``promptrecon {pretrain,run,eval,ablate,export-ply}``."""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

from . import config as C
from .errors import DataError, PromptReconError
from .evaluation import DEFAULT_MAX_DIST, evaluate_reconstruction
from .io import read_ply, read_tum, write_csv, write_ply
from .pipeline import build_stream, evaluate_run, gt_cloud, run_stream, write_report, write_run
from .predictor import Predictor, load_checkpoint, pretrain, save_checkpoint, file_digest
from .world import load_stream, save_stream, Intrinsics, generate_scene

logger = logging.getLogger("promptrecon")

OUTPUT_ENV = "PROMPTRECON_OUTPUT"
EXIT_OK, EXIT_USAGE = 0, 1


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        raise SystemExit(EXIT_USAGE)


def output_root(cfg: C.RunConfig) -> Path:
    return Path(os.environ.get(OUTPUT_ENV) or cfg.output_dir)


def _overrides(pairs: list[str]) -> dict:
    out = {}
    for item in pairs or []:
        if "=" not in item:
            raise UsageError(f"--set expects key=value, got {item!r}")
        k, v = item.split("=", 1)
        out[k.strip()] = v.strip()
    return out


def _load_cfg(args, extra: dict | None = None) -> C.RunConfig:
    ov = _overrides(args.set)
    ov.update({k: v for k, v in (extra or {}).items() if v is not None})
    try:
        return C.load_config(args.config, ov)
    except (KeyError, ValueError, TypeError) as exc:
        raise UsageError(str(exc)) from exc
    except OSError as exc:
        raise DataError(f"cannot read config: {exc}") from exc


def _load_predictor(path, cfg: C.RunConfig) -> tuple[Predictor, str]:
    predictor, _ = load_checkpoint(path, cfg.model)
    return predictor, file_digest(path)


# ---------------------------------------------------------------- verbs


def cmd_pretrain(args) -> int:
    cfg = _load_cfg(args, {"pretrain.steps": args.steps, "seed": args.seed, "pretrain.seed": args.seed})
    out = Path(args.out) if args.out else output_root(cfg) / f"pretrain_seed{cfg.seed}" / "backbone.ckpt"
    out.parent.mkdir(parents=True, exist_ok=True)
    predictor = Predictor(cfg.model, seed=C.derive_seed(cfg.seed, "init"))
    log = pretrain(predictor, cfg.pretrain, family="base", log_every=args.log_every)
    digest = save_checkpoint(out, predictor, extra={"pretrain": cfg.flat(), "seed": cfg.seed})
    write_csv(out.with_name("pretrain_loss.csv"), ["step", "loss"], list(enumerate(log.losses)))
    C.dump_config(cfg, out.with_name("config.toml"))
    print(f"checkpoint {out} sha256 {digest}")
    return EXIT_OK


def _stream(cfg: C.RunConfig, args):
    if getattr(args, "stream", None):
        frames, _ = load_stream(args.stream)
        return frames
    return build_stream(cfg)


def cmd_run(args) -> int:
    cfg = _load_cfg(args, {"mode": args.mode, "world.scene_seed": args.scene_seed,
                           "world.family": args.family, "seed": args.seed})
    predictor, ck_digest = _load_predictor(args.checkpoint, cfg)
    frames = _stream(cfg, args)
    out = Path(args.out) if args.out else output_root(cfg) / f"run_{cfg.mode}_scene{cfg.world.scene_seed}_seed{cfg.seed}"
    result = run_stream(predictor, frames, cfg.mode, cfg.tuner, cfg.frontend, seed=cfg.seed)
    report = evaluate_run(result, frames)
    write_run(out, result, report, frames, cfg)
    _keyframe_plys(out, result)
    man = json.loads((out / "run.json").read_text())
    man["checkpoint"] = str(args.checkpoint)
    man["checkpoint_sha256"] = ck_digest
    (out / "run.json").write_text(json.dumps(man, indent=1))
    C.dump_config(cfg, out / "config.toml")
    if args.export_stream:
        scene = generate_scene(cfg.world.scene_seed, cfg.world.family)
        save_stream(frames, scene, "loop", Intrinsics(cfg.model.H, cfg.model.W), args.export_stream)
    g, t = report["geometry"], report["trajectory"]
    print(f"{cfg.mode}: ATE {t['ate_rmse']:.4f} Acc {g['accuracy']:.4f} Comp {g['completion']:.4f} "
          f"Chamfer {g['chamfer']:.4f} keyframes {result.n_keyframes} -> {out}")
    return EXIT_OK


def _keyframe_plys(out: Path, result) -> None:
    kdir = out / "keyframes"
    kdir.mkdir(exist_ok=True)
    for i, pts in enumerate(result.keyframe_clouds):
        write_ply(kdir / f"kf_{i:04d}.ply", pts)


def cmd_eval(args) -> int:
    run_dir = Path(args.run_dir)
    traj = run_dir / "trajectory.tum"
    if not traj.exists():
        raise DataError(f"{traj} not found")
    _, est_poses = read_tum(traj)
    if args.gt_manifest:
        frames, _ = load_stream(args.gt_manifest)
        gt_poses = [f.gt_pose for f in frames]
        run_meta = run_dir / "run.json"
        kf = json.loads(run_meta.read_text()).get("keyframe_frames") if run_meta.exists() else None
        gt_pts = gt_cloud(frames, kf, stride=args.gt_stride)
    else:
        _, gt_poses = read_tum(args.gt_trajectory or run_dir / "groundtruth.tum")
        if not args.gt_cloud:
            raise DataError("need --gt-manifest or --gt-cloud")
        gt_pts = read_ply(args.gt_cloud)
    cloud = read_ply(args.cloud or run_dir / "cloud.ply")
    report = evaluate_reconstruction(est_poses, gt_poses, cloud, gt_pts, args.max_dist, args.outlier_mode)
    out = Path(args.out) if args.out else run_dir
    out.mkdir(parents=True, exist_ok=True)
    write_report(out, report)
    body = {k: v for k, v in report.items() if k != "residuals"}
    print(json.dumps(body, indent=1))
    return EXIT_OK


ABLATION_HEADER = ["variant", "mode", "n_runs", "ATE", "Acc", "Comp", "Chamfer", "keyframes", "frame_ms"]


def cmd_ablate(args) -> int:
    cfg = _load_cfg(args, {"world.family": args.family, "seed": args.seed})
    predictor, _ = _load_predictor(args.checkpoint, cfg)
    out = Path(args.out) if args.out else output_root(cfg) / "ablation"
    out.mkdir(parents=True, exist_ok=True)
    scene_seeds = [cfg.world.scene_seed + k for k in range(args.n_seeds)]
    streams = {s: build_stream(cfg, s) for s in scene_seeds}
    rows, per_run = [], []
    for mode in C.MODES:
        metrics = []
        for s in scene_seeds:
            res = run_stream(predictor, streams[s], mode, cfg.tuner, cfg.frontend, seed=cfg.seed)
            rep = evaluate_run(res, streams[s])
            g = rep["geometry"]
            m = [rep["trajectory"]["ate_rmse"], g["accuracy"], g["completion"], g["chamfer"],
                 res.n_keyframes, 1000 * res.mean_frame_seconds]
            metrics.append(m)
            per_run.append([mode, s, *m[:5]])
        mean = np.mean(metrics, axis=0)
        rows.append([C.MODE_LABELS[mode], mode, len(scene_seeds), *[round(float(v), 6) for v in mean[:5]],
                     round(float(mean[5]), 3)])
    # wall-clock column is informative only; the reproducible table omits it
    write_csv(out / "ablation.csv", ABLATION_HEADER[:-1], [r[:-1] for r in rows])
    write_csv(out / "ablation_runs.csv", ["mode", "scene_seed", "ATE", "Acc", "Comp", "Chamfer", "keyframes"], per_run)
    (out / "timing.json").write_text(json.dumps({r[1]: r[-1] for r in rows}, indent=1))
    C.dump_config(cfg, out / "config.toml")
    for r in rows:
        print("  ".join(str(v) for v in r))
    return EXIT_OK


def cmd_export_ply(args) -> int:
    if args.stream:
        frames, _ = load_stream(args.stream)
        pts = gt_cloud(frames, stride=args.stride)
    elif args.input:
        pts = read_ply(args.input)
    else:
        raise UsageError("export-ply needs --stream or --input")
    write_ply(args.out, pts, binary=not args.ascii)
    print(f"{len(pts)} points -> {args.out}")
    return EXIT_OK


# ---------------------------------------------------------------- parser


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="promptrecon", description="Streaming reconstruction with online prompt tuning.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="verb", required=True, parser_class=_Parser)

    def common(sp):
        sp.add_argument("--config", help="TOML file with flat dotted keys")
        sp.add_argument("--set", action="append", metavar="KEY=VALUE", help="override a config key (repeatable)")
        sp.add_argument("--seed", type=int)

    sp = sub.add_parser("pretrain", help="train the backbone on the base family")
    common(sp)
    sp.add_argument("--steps", type=int)
    sp.add_argument("--out", help="checkpoint path")
    sp.add_argument("--log-every", type=int, default=100)
    sp.set_defaults(func=cmd_pretrain)

    sp = sub.add_parser("run", help="track one stream")
    common(sp)
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--mode", choices=sorted(C.MODES))
    sp.add_argument("--scene-seed", type=int)
    sp.add_argument("--family", choices=["base", "shifted"])
    sp.add_argument("--stream", help="stream manifest.json to replay instead of rendering")
    sp.add_argument("--export-stream", help="also write the rendered stream to this directory")
    sp.add_argument("--out")
    sp.set_defaults(func=cmd_run)

    sp = sub.add_parser("eval", help="score a run directory")
    sp.add_argument("run_dir")
    sp.add_argument("--gt-manifest", help="stream manifest.json with ground truth")
    sp.add_argument("--gt-trajectory")
    sp.add_argument("--gt-cloud")
    sp.add_argument("--cloud")
    sp.add_argument("--gt-stride", type=int, default=10)
    sp.add_argument("--max-dist", type=float, default=DEFAULT_MAX_DIST)
    sp.add_argument("--outlier-mode", choices=["discard", "clamp"], default="discard")
    sp.add_argument("--out")
    sp.set_defaults(func=cmd_eval)

    sp = sub.add_parser("ablate", help="baseline / local / global / full over several scenes")
    common(sp)
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--n-seeds", type=int, default=3)
    sp.add_argument("--family", choices=["base", "shifted"])
    sp.add_argument("--out")
    sp.set_defaults(func=cmd_ablate)

    sp = sub.add_parser("export-ply", help="write a point cloud as PLY")
    sp.add_argument("--stream", help="ground-truth cloud from a stream manifest")
    sp.add_argument("--input", help="re-encode an existing PLY")
    sp.add_argument("--stride", type=int, default=10)
    sp.add_argument("--ascii", action="store_true")
    sp.add_argument("--out", required=True)
    sp.set_defaults(func=cmd_export_ply)
    return p


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"promptrecon: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except PromptReconError as exc:
        print(f"promptrecon: {type(exc).__name__}: {exc}", file=sys.stderr)
        return exc.exit_code
    except FloatingPointError as exc:
        print(f"promptrecon: numerical failure: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
