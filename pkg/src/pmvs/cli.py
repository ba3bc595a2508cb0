"""Command-line surface.

Subcommands: synth, reconstruct, fuse, evaluate, export-depth, export-ply,
inspect, selftest.  Exit codes: 0 success, 1 usage, 2 data error,
3 internal error.
"""

import argparse
import json
import os
import struct
import sys

import numpy as np

from . import fusion as fusion_mod
from . import pipeline as pipeline_mod
from .errors import FormatError, PmvsError
from .geometry import load_camera
from .mapio import GeometryMap, load_map, save_pfm
from .synth import emit_scene, scene_from_config

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_DATA = 2
EXIT_INTERNAL = 3


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"error: {message}", file=sys.stderr)
        raise SystemExit(EXIT_USAGE)


def build_parser():
    p = _Parser(prog="pmvs", description="PatchMatch multi-view stereo toolkit")
    sub = p.add_subparsers(dest="command", required=True)

    sp = sub.add_parser("synth", help="render a synthetic scene with ground truth")
    sp.add_argument("scene_cfg")
    sp.add_argument("--out", required=True)
    sp.add_argument("--stages", type=int, default=3)

    rp = sub.add_parser("reconstruct", help="run the staged reconstruction pipeline")
    rp.add_argument("scene_cfg")
    rp.add_argument("--out", required=True)
    rp.add_argument("--resume", action="store_true")
    rp.add_argument("--stages", type=int, default=None)
    rp.add_argument("--threads", type=int,
                    default=int(os.environ.get("PMVS_THREADS", "1")))
    rp.add_argument("--photometric-only", action="store_true")

    fp = sub.add_parser("fuse", help="fuse reconstructed maps into a point cloud")
    fp.add_argument("scene_cfg")
    fp.add_argument("--recon", required=True, help="reconstruction output directory")
    fp.add_argument("--out", required=True, help="output PLY path")
    fp.add_argument("--min-consistent", type=int, default=2)
    fp.add_argument("--rel-depth", type=float, default=0.01)
    fp.add_argument("--reproj-px", type=float, default=2.0)
    fp.add_argument("--normal-deg", type=float, default=10.0)

    ep = sub.add_parser("evaluate", help="accuracy/completeness/F1 of a point cloud")
    ep.add_argument("cloud", help="reconstructed PLY")
    ep.add_argument("--gt", required=True, help="ground-truth PLY or synth scene dir")
    ep.add_argument("--thresholds", default="0.01,0.05")

    dp = sub.add_parser("export-depth", help="export a geometry map's depth as PFM")
    dp.add_argument("map")
    dp.add_argument("--out", required=True)

    pp = sub.add_parser("export-ply", help="unproject one geometry map to PLY")
    pp.add_argument("map")
    pp.add_argument("--camera", required=True)
    pp.add_argument("--out", required=True)

    ip = sub.add_parser("inspect", help="dump a map file's header and stats")
    ip.add_argument("map")

    sub.add_parser("selftest", help="run quick built-in oracle checks")
    return p


def _cmd_synth(args):
    with open(args.scene_cfg) as f:
        cfg = json.load(f)
    scene = scene_from_config(cfg)
    result = emit_scene(scene, args.out, stages=args.stages)
    print(f"wrote scene '{scene.name}' to {args.out}")
    print(f"reconstruction config: {result['config_path']}")
    return EXIT_OK


def _cmd_reconstruct(args):
    config = pipeline_mod.SceneConfig.from_file(args.scene_cfg)
    if args.stages is not None:
        config.stages = args.stages
    outputs = pipeline_mod.run_scene(config, args.out, threads=args.threads,
                                     photometric_only=args.photometric_only,
                                     resume=args.resume)
    for vid, path in sorted(outputs.items()):
        print(f"view {vid}: {path}")
    return EXIT_OK


def _final_fullres_maps(config, recon_dir):
    ledger = pipeline_mod.StageLedger.open(os.path.join(recon_dir, "ledger.json"), config)
    final = config.stages - 1
    scale = pipeline_mod.stage_scale(final)
    views, geoms = [], []
    for v in config.views:
        cam = load_camera(v.camera_path, v.view_id)
        gmap = ledger.verified_load(v.view_id, final, "geometry")
        views.append(cam)
        geoms.append(fusion_mod.upsample_for_fusion(gmap, scale, cam))
    return views, geoms


def _cmd_fuse(args):
    config = pipeline_mod.SceneConfig.from_file(args.scene_cfg)
    views, geoms = _final_fullres_maps(config, args.recon)
    th = fusion_mod.FusionThresholds(args.rel_depth, args.reproj_px,
                                     args.normal_deg, args.min_consistent)
    cloud = fusion_mod.fuse(views, geoms, th)
    fusion_mod.save_ply(args.out, cloud)
    print(f"fused {len(cloud)} points -> {args.out}")
    return EXIT_OK


def _load_gt_points(gt_arg):
    if os.path.isdir(gt_arg):
        pts = []
        for name in sorted(os.listdir(gt_arg)):
            if name.startswith("gt_") and name.endswith(".map"):
                vid = name[3:-4]
                gmap = load_map(os.path.join(gt_arg, name))
                cam = load_camera(os.path.join(gt_arg, f"view_{vid}.cam.txt"), vid)
                pts.append(_unproject_map(gmap, cam)[0])
        if not pts:
            raise FormatError(f"no gt_*.map files in {gt_arg}")
        return np.concatenate(pts)
    return fusion_mod.load_ply(gt_arg).positions


def _unproject_map(gmap: GeometryMap, cam):
    dirs = cam.ray_grid() @ cam.rotation
    pts = cam.center + gmap.depth.astype(np.float64)[..., None] * dirs
    nrm = gmap.normal.astype(np.float64) @ cam.rotation
    return pts[gmap.valid], nrm[gmap.valid]


def _cmd_evaluate(args):
    cloud = fusion_mod.load_ply(args.cloud)
    gt = _load_gt_points(args.gt)
    thresholds = [float(t) for t in args.thresholds.split(",") if t]
    report = fusion_mod.evaluate(cloud.positions, gt, thresholds)
    for line in report.lines():
        print(line)
    print(report.dump())
    return EXIT_OK


def _cmd_export_depth(args):
    m = load_map(args.map)
    if not isinstance(m, GeometryMap):
        raise FormatError(f"{args.map} is not a geometry map")
    save_pfm(args.out, np.where(m.valid, m.depth, 0.0))
    print(f"wrote {args.out}")
    return EXIT_OK


def _cmd_export_ply(args):
    m = load_map(args.map)
    if not isinstance(m, GeometryMap):
        raise FormatError(f"{args.map} is not a geometry map")
    cam = load_camera(args.camera)
    pts, nrm = _unproject_map(m, cam)
    n = len(pts)
    cloud = fusion_mod.FusedCloud(pts, nrm, np.zeros(n, dtype=np.int32),
                                  np.zeros(n, dtype=np.int32))
    fusion_mod.save_ply(args.out, cloud)
    print(f"wrote {n} points -> {args.out}")
    return EXIT_OK


def _cmd_inspect(args):
    with open(args.map, "rb") as f:
        head = f.read(21)
    if len(head) < 21 or head[:8] != b"PMVSMAP1":
        raise FormatError(f"{args.map}: bad magic or truncated header", offset=0)
    kind, h, w, c = struct.unpack("<BIII", head[8:21])
    print(f"magic=PMVSMAP1 kind={kind} height={h} width={w} channels={c}")
    m = load_map(args.map)  # full CRC check
    if isinstance(m, GeometryMap):
        d = m.depth[m.valid]
        print(f"geometry map: {int(m.valid.sum())}/{m.valid.size} valid pixels")
        if d.size:
            print(f"depth min={d.min():.6g} max={d.max():.6g} median={np.median(d):.6g}")
    else:
        arr = m.weights if hasattr(m, "weights") else np.asarray(getattr(m, "score", m))
        print(f"values min={arr.min():.6g} max={arr.max():.6g} mean={arr.mean():.6g}")
    return EXIT_OK


def _cmd_selftest(args):
    from .selftest import run_selftest
    ok = run_selftest()
    return EXIT_OK if ok else EXIT_INTERNAL


_COMMANDS = {
    "synth": _cmd_synth,
    "reconstruct": _cmd_reconstruct,
    "fuse": _cmd_fuse,
    "evaluate": _cmd_evaluate,
    "export-depth": _cmd_export_depth,
    "export-ply": _cmd_export_ply,
    "inspect": _cmd_inspect,
    "selftest": _cmd_selftest,
}


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return e.code if e.code is not None else EXIT_USAGE
    try:
        return _COMMANDS[args.command](args)
    except (PmvsError, FileNotFoundError, json.JSONDecodeError, KeyError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_DATA
    except Exception as e:  # internal failure
        print(f"internal error: {type(e).__name__}: {e}", file=sys.stderr)
        return EXIT_INTERNAL


if __name__ == "__main__":
    sys.exit(main())
