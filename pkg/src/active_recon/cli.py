"""Command line entry point: ``run``, ``eval`` and ``mesh`` subcommands."""

from __future__ import annotations

import argparse
import json
import logging
import math
import os
import sys
from pathlib import Path

from .pipeline import ABLATIONS, OUT_ENV, POLICIES, RunConfig, holdout_poses, run_exploration


def _section(title, rows, stream):
    print(f"=== {title} ===", file=stream)
    for k, v in rows.items():
        if isinstance(v, float):
            v = f"{v:.6g}" if math.isfinite(v) else str(v)
        print(f"{k}: {v}", file=stream)


def _load_config(path):
    if path is None:
        return RunConfig()
    return RunConfig.load(path)


def cmd_run(args, stream=sys.stdout):
    cfg = _load_config(args.config)
    overrides = {}
    if args.seed is not None:
        overrides["seed"] = args.seed
    if args.policy is not None:
        overrides["policy"] = args.policy
    if args.ablate:
        overrides["ablations"] = tuple(cfg.ablations) + tuple(args.ablate)
    if args.steps is not None:
        overrides["steps"] = args.steps
    if overrides:
        d = cfg.to_dict()
        d.update(overrides)
        cfg = RunConfig.from_dict(d)
    out = args.out or cfg.out_dir or "runs/latest"
    report, ex = run_exploration(cfg, out)
    out = Path(os.environ.get(OUT_ENV) or out)
    _section("run", {"scene": cfg.scene, "policy": cfg.policy, "seed": cfg.seed,
                     "steps": ex.t, "ablations": ",".join(cfg.ablations) or "-",
                     "stopped_early": report.stopped_early}, stream)
    _section("metrics", {k: report.final[k] for k in ("CR", "Acc", "Com", "MAD")}, stream)
    _section("render", report.render, stream)
    _section("safety", {"collisions": report.collisions,
                        "min_clearance": report.min_clearance}, stream)
    figs = sorted((out / "figures").glob("*.png"))
    _section("files", {"out_dir": str(out), **{p.stem: str(p) for p in figs}}, stream)
    return 0


def _load_run(ckpt):
    from .implicit import load_checkpoint
    from .scene import get_scene
    from .splats import load_ply

    ckpt = Path(ckpt)
    cfg = RunConfig.load(ckpt / "config.json")
    scene = get_scene(cfg.scene)
    field = load_checkpoint(ckpt / "field.bin")
    splats = load_ply(ckpt / "splats.ply", scene.bounds, cfg.splats)
    return cfg, scene, field, splats


def cmd_eval(args, stream=sys.stdout):
    from .metrics import eval_geometry, eval_mad, eval_render

    cfg, scene, field, splats = _load_run(args.checkpoint)
    geo = eval_geometry(splats.mu, scene, 2.0 * cfg.voxel_size, n=cfg.n_eval_samples, seed=0)
    mad = eval_mad(field, scene, n=5000, seed=0, band=4 * cfg.voxel_size)
    rows = {"CR": geo["CR"], "Acc": geo["Acc"], "Com": geo["Com"], "MAD": mad,
            "splats": len(splats)}
    poses = holdout_poses(scene, cfg.n_holdout, seed=0)
    if poses:
        rows.update(eval_render(splats, poses, scene, cfg.intrinsics))
    _section("eval", rows, stream)
    with open(Path(args.checkpoint) / "eval.json", "w") as fh:
        json.dump({k: (v if not isinstance(v, float) or math.isfinite(v) else str(v))
                   for k, v in rows.items()}, fh, indent=1)
    return 0


def cmd_mesh(args, stream=sys.stdout):
    from .implicit import load_checkpoint
    from .meshing import export_mesh, write_ply_mesh
    from .scene import get_scene

    ckpt = Path(args.checkpoint)
    cfg = RunConfig.load(ckpt / "config.json")
    field = load_checkpoint(ckpt / "field.bin")
    mesh = export_mesh(field, get_scene(cfg.scene).bounds, args.res)
    path = ckpt / f"mesh_{args.res}.ply"
    write_ply_mesh(path, mesh)
    _section("mesh", {"vertices": len(mesh.vertices), "faces": len(mesh.faces),
                      "empty": mesh.empty, "path": str(path)}, stream)
    return 0


def build_parser():
    ap = argparse.ArgumentParser(prog="active-recon",
                                 description="Uncertainty-driven active reconstruction.")
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    r = sub.add_parser("run", help="run the exploration loop")
    r.add_argument("--config", help="JSON run configuration (defaults when omitted)")
    r.add_argument("--seed", type=int)
    r.add_argument("--policy", choices=POLICIES)
    r.add_argument("--ablate", nargs="+", choices=ABLATIONS, default=[])
    r.add_argument("--steps", type=int, help="override the step budget")
    r.add_argument("--out", help=f"output directory (env {OUT_ENV} takes precedence)")
    r.set_defaults(func=cmd_run)

    e = sub.add_parser("eval", help="re-evaluate a finished run directory")
    e.add_argument("--checkpoint", required=True)
    e.set_defaults(func=cmd_eval)

    m = sub.add_parser("mesh", help="extract the implicit zero level set")
    m.add_argument("--checkpoint", required=True)
    m.add_argument("--res", type=int, default=96)
    m.set_defaults(func=cmd_mesh)
    return ap


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (ValueError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
