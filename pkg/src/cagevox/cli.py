"""Command-line front end.

Subcommands: render (frames + timing report), fit (voxel field training),
metrics (PSNR tables), locate (point-location debugging), pose (rig +
parameter stream -> tetframe files).
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import json
import logging
import os
import sys
import time

import numpy as np

from . import anim, geometry, imageio
from .errors import CagevoxError, ConfigError
from .field import VoxelField
from .fit import LossConfig, TrainSet, fit
from .geometry import barycentric_coords, locate_points_bruteforce
from .lookup import build_bvh, locate_points
from .render import Camera, RenderConfig, Scene, render_image
from .scene import load_scene_config

logger = logging.getLogger(__name__)


def _parse_frame_range(text, num_frames):
    if text is None:
        return range(num_frames)
    if ".." in text:
        a, b = text.split("..", 1)
        lo = int(a) if a else 0
        hi = int(b) if b else num_frames - 1
        return range(lo, hi + 1)
    v = int(text)
    return range(v, v + 1)


def cmd_render(args) -> int:
    cfg = load_scene_config(args.config)
    render_cfg = cfg.render
    if args.seed is not None:
        render_cfg = dataclasses.replace(render_cfg, seed=args.seed)
    cameras = [Camera.load(p) for p in args.camera]
    os.makedirs(args.out, exist_ok=True)

    frames = _parse_frame_range(args.frames, cfg.num_frames)
    timing_rows = []
    scene = None
    for fi in frames:
        t0 = time.perf_counter()
        state = cfg.state_for_frame(fi)
        pose_s = time.perf_counter() - t0

        t0 = time.perf_counter()
        if scene is None:
            scene = Scene.build(
                cfg.cage, state, cfg.radiance, cfg.background,
                cfg.rotation_fraction, cfg.rotation_seed,
            )
            action = "build"
        else:
            scene, action = scene.with_state(state)
        refit_s = time.perf_counter() - t0

        for ci, cam in enumerate(cameras):
            t0 = time.perf_counter()
            frame = render_image(scene, cam, render_cfg, threads=args.threads)
            total_s = time.perf_counter() - t0
            stem = f"frame{fi:04d}_cam{ci}"
            imageio.write_ppm(os.path.join(args.out, stem + ".ppm"), frame.rgb)
            if args.float_buffers:
                imageio.write_f32(os.path.join(args.out, stem + "_rgb.f32"), frame.rgb)
                imageio.write_f32(os.path.join(args.out, stem + "_opacity.f32"), frame.opacity)
                imageio.write_f32(os.path.join(args.out, stem + "_depth.f32"), frame.depth)
            timing_rows.append(
                {
                    "frame": fi,
                    "camera": ci,
                    "bvh": action,
                    "pose_s": f"{pose_s:.6f}",
                    "refit_s": f"{refit_s:.6f}",
                    "segment_s": f"{frame.timings.get('segment', 0.0):.6f}",
                    "query_s": f"{frame.timings.get('query', 0.0):.6f}",
                    "integrate_s": f"{frame.timings.get('integrate', 0.0):.6f}",
                    "total_s": f"{total_s:.6f}",
                }
            )
            logger.info("frame %d cam %d rendered in %.3fs", fi, ci, total_s)

    with open(os.path.join(args.out, "timings.csv"), "w", newline="") as f:
        writer = csv.DictWriter(f, fieldnames=list(timing_rows[0].keys()))
        writer.writeheader()
        writer.writerows(timing_rows)
    return 0


def cmd_fit(args) -> int:
    base = os.path.dirname(os.path.abspath(args.manifest))
    with open(args.manifest, "r", encoding="utf-8") as f:
        doc = json.load(f)

    def resolve(p):
        return os.path.join(base, p)

    cage = geometry.load_cage(resolve(doc["cage"]))
    images = [imageio.read_image(resolve(p)) for p in doc["images"]]
    cameras = [Camera.load(resolve(p)) for p in doc["cameras"]]
    masks = [
        None if p is None else imageio.read_image(resolve(p))[:, :, 0] > 0.5
        for p in doc.get("masks", [None] * len(images))
    ]
    states = []
    for p in doc.get("states", [None] * len(images)):
        if p is None:
            states.append(None)
        else:
            states.append(
                geometry.DeformedState.for_cage(cage, geometry.load_frame(resolve(p)))
            )

    fdoc = doc["field"]
    if isinstance(fdoc, str):
        voxel = VoxelField.load(resolve(fdoc))
    else:
        voxel = VoxelField.zeros(
            resolution=tuple(fdoc["resolution"]),
            bounds=np.asarray(fdoc["bounds"], dtype=np.float64),
            lmax=int(fdoc.get("lmax", 2)),
        )

    ldoc = doc.get("loss", {})
    loss_cfg = LossConfig(
        lambda_outer=float(ldoc.get("lambda_outer", 1e-4)),
        lambda_gap=float(ldoc.get("lambda_gap", 2e-6)),
        rays_per_batch=int(ldoc.get("rays_per_batch", 1024)),
        iterations=int(ldoc.get("iterations", 2000)),
        lr=float(ldoc.get("lr", 1e-2)),
    )
    rdoc = doc.get("render", {})
    render_cfg = RenderConfig(
        n_coarse=int(rdoc.get("n_coarse", 64)),
        n_fine=int(rdoc.get("n_fine", 32)),
        seed=int(rdoc.get("seed", 0)),
    )
    seed = int(doc.get("seed", 0)) if args.seed is None else args.seed

    train = TrainSet(images=images, cameras=cameras, masks=masks, states=states)
    voxel, trace = fit(
        voxel, cage, train, loss_cfg,
        seed=seed,
        render_cfg=render_cfg,
        background=np.asarray(doc.get("background", (0, 0, 0)), dtype=np.float64),
        log_every=int(doc.get("log_every", 0)),
    )

    os.makedirs(os.path.dirname(os.path.abspath(args.out)) or ".", exist_ok=True)
    voxel.save(args.out)
    trace_path = args.trace or (os.path.splitext(args.out)[0] + "_loss.csv")
    with open(trace_path, "w", newline="") as f:
        writer = csv.DictWriter(
            f, fieldnames=["iteration", "rgb", "sparsity_outer", "sparsity_gap", "total"]
        )
        writer.writeheader()
        writer.writerows(trace)
    logger.info("fitted field written to %s (trace: %s)", args.out, trace_path)
    return 0


def cmd_metrics(args) -> int:
    rendered = sorted(
        p for p in os.listdir(args.rendered) if p.lower().endswith((".ppm", ".png"))
    )
    reference = sorted(
        p for p in os.listdir(args.reference) if p.lower().endswith((".ppm", ".png"))
    )
    if len(rendered) != len(reference):
        raise ConfigError(
            f"image count mismatch: {len(rendered)} rendered vs {len(reference)} reference"
        )
    rows = []
    for rp, fp in zip(rendered, reference):
        a = imageio.read_image(os.path.join(args.rendered, rp))
        b = imageio.read_image(os.path.join(args.reference, fp))
        rows.append((rp, imageio.psnr(a, b)))
    mean = float(np.mean([v for _, v in rows])) if rows else float("nan")
    for name, value in rows:
        print(f"{name}\t{value:.4f}")
    print(f"mean\t{mean:.4f}")
    if args.out:
        with open(args.out, "w", newline="") as f:
            writer = csv.writer(f)
            writer.writerow(["image", "psnr_db"])
            writer.writerows(rows)
            writer.writerow(["mean", mean])
    return 0


def cmd_locate(args) -> int:
    cfg = load_scene_config(args.config)
    state = cfg.state_for_frame(args.frame)
    bvh = build_bvh(cfg.cage, state)
    points = np.loadtxt(args.points, dtype=np.float64, ndmin=2)
    if points.shape[1] != 3:
        raise ConfigError(f"{args.points}: expected 3 columns")
    regions = locate_points(bvh, points, seed=args.seed or 0)
    oracle = None
    if args.oracle:
        oracle = locate_points_bruteforce(cfg.cage, points, state)
    mismatches = 0
    for i, (p, r) in enumerate(zip(points, regions)):
        parts = [f"{i}", f"region={int(r)}"]
        if 0 <= r < cfg.cage.num_tets:
            lam = barycentric_coords(state.vertices[cfg.cage.tets[r]], p)
            parts.append("bary=" + ",".join(f"{x:.6f}" for x in lam))
        if oracle is not None:
            ok = int(oracle[i]) == int(r)
            mismatches += not ok
            parts.append(f"oracle={int(oracle[i])}{'' if ok else ' MISMATCH'}")
        print("  ".join(parts))
    if oracle is not None:
        print(f"oracle agreement: {len(points) - mismatches}/{len(points)}")
        return 0 if mismatches == 0 else 1
    return 0


def cmd_pose(args) -> int:
    cage = geometry.load_cage(args.cage)
    rig = anim.load_rig(args.rig, cage.rest_vertices)
    rows = anim.load_pose_stream(args.params, rig.num_shapes, rig.num_bones)
    os.makedirs(args.out, exist_ok=True)
    for frame, params in rows:
        verts = anim.pose(rig, params)
        geometry.save_frame(os.path.join(args.out, f"frame{frame:04d}.tetframe"), verts)
    logger.info("wrote %d tetframes to %s", len(rows), args.out)
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="cagevox",
        description="Deform and render volumetric radiance fields with tetrahedral cages.",
    )
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("render", help="render frames from a scene config")
    p.add_argument("--config", required=True)
    p.add_argument("--camera", required=True, nargs="+", help="camera JSON file(s)")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--frames", help="frame range A..B (default: all)")
    p.add_argument("--seed", type=int)
    p.add_argument("--threads", type=int, default=1)
    p.add_argument("--deterministic", action="store_true",
                   help="deterministic accumulation (always on; accepted for compatibility)")
    p.add_argument("--float-buffers", action="store_true",
                   help="also write raw .f32 rgb/opacity/depth buffers")
    p.set_defaults(func=cmd_render)

    p = sub.add_parser("fit", help="fit a voxel field from a training manifest")
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True, help="output voxfield path")
    p.add_argument("--trace", help="loss trace CSV path")
    p.add_argument("--seed", type=int)
    p.add_argument("--threads", type=int, default=1)
    p.add_argument("--deterministic", action="store_true",
                   help="deterministic accumulation (always on; accepted for compatibility)")
    p.set_defaults(func=cmd_fit)

    p = sub.add_parser("metrics", help="PSNR between two image directories")
    p.add_argument("rendered")
    p.add_argument("reference")
    p.add_argument("--out", help="optional CSV output")
    p.set_defaults(func=cmd_metrics)

    p = sub.add_parser("locate", help="point-location debug queries")
    p.add_argument("--config", required=True)
    p.add_argument("--points", required=True, help="text file with x y z rows")
    p.add_argument("--frame", type=int, default=0)
    p.add_argument("--seed", type=int)
    p.add_argument("--oracle", action="store_true", help="compare with brute force")
    p.set_defaults(func=cmd_locate)

    p = sub.add_parser("pose", help="evaluate a rig parameter stream to tetframes")
    p.add_argument("--cage", required=True)
    p.add_argument("--rig", required=True)
    p.add_argument("--params", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_pose)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.INFO if args.verbose else logging.WARNING,
        format="%(levelname)s %(name)s: %(message)s",
    )
    try:
        return args.func(args)
    except CagevoxError as e:
        print(f"error: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
