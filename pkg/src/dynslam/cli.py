"""Command-line surface: run, synth, mask, mesh, eval-ate, eval-recon.

Every command is deterministic given its configuration and seeds.  Exit
codes: 0 success, 2 usage or configuration problem, 3 broken or missing
data, 4 numerical failure.
"""

from __future__ import annotations

import argparse
import dataclasses
import sys
import textwrap
from pathlib import Path

import yaml

from . import __version__
from .config import (RunConfig, apply_overrides, config_to_dict, dump_config,
                     grid_from_dict, intrinsics_from_dict, load_config,
                     system_config)
from .dataio import (FlowStore, load_seg_mask, load_tum_sequence,
                     read_trajectory, write_mask_png, write_trajectory)
from .errors import ConfigError, DynSlamError, FormatError
from .evaluation import ate, extract_mesh, read_ply, recon_metrics, write_ply
from .field import (field_forward, load_checkpoint, params_from_arrays,
                    save_checkpoint)
from .motionmask import build_mask_for_keyframe
from .slam import run_system
from .synthetic import scene_spec_from_yaml, write_synthetic_dataset


def _resolve_config(args) -> RunConfig:
    """Config file, then --set overrides, then dedicated flags."""
    cfg = load_config(args.config) if args.config else RunConfig()
    overrides = list(args.set or [])
    if getattr(args, "threads", None) is not None:
        overrides.append(f"threads={args.threads}")
    if getattr(args, "out", None) is not None:
        cfg = apply_overrides(cfg, overrides)
        return dataclasses.replace(cfg, out_dir=str(args.out))
    return apply_overrides(cfg, overrides)


def _load_sequence(cfg: RunConfig):
    """Sequence, lazy flow store and seg masks for ``cfg.dataset``."""
    if not cfg.dataset.root:
        raise ConfigError("dataset.root is not set")
    root = Path(cfg.dataset.root)
    if not root.is_dir():
        raise ConfigError(f"dataset root does not exist: {root}")
    intr = cfg.intrinsics
    if cfg.dataset.kind == "synthetic":
        intr_file = root / "intrinsics.yaml"
        if intr_file.is_file():
            try:
                intr = intrinsics_from_dict(yaml.safe_load(intr_file.read_text()))
            except yaml.YAMLError as exc:
                raise FormatError(f"cannot parse {intr_file}: {exc}") from exc
    seq = load_tum_sequence(root, intr, max_dt=cfg.dataset.max_dt)
    flows = FlowStore(paths=seq.flow_paths)
    shape = (intr.height, intr.width)
    segs = {fid: load_seg_mask(p, shape)
            for fid, p in sorted(seq.seg_paths.items())}
    return seq, flows, segs


def cmd_run(args) -> int:
    cfg = _resolve_config(args)
    seq, flows, segs = _load_sequence(cfg)
    if not cfg.dataset.use_seg:
        segs = {}

    out = Path(cfg.out_dir)
    (out / "masks").mkdir(parents=True, exist_ok=True)
    (out / "config_resolved.yaml").write_text(dump_config(cfg))

    res = run_system(seq, flows=flows, segs=segs, sysc=system_config(cfg))

    entries = res.trajectory.entries
    write_trajectory(out / "trajectory.txt",
                     [e.timestamp for e in entries], [e.pose for e in entries])
    full = config_to_dict(cfg)
    save_checkpoint(out / "checkpoint.bin",
                    {k: full[k] for k in ("grid", "mlp", "truncation")},
                    res.params)
    for kf_id, mask in sorted(res.masks.items()):
        write_mask_png(out / "masks" / f"{kf_id:06d}.png", mask.dynamic)
    (out / "report.txt").write_text("\n".join(res.report_lines) + "\n")

    print(res.report_lines[-1])
    print(f"artifacts in {out}")
    return 0


def cmd_synth(args) -> int:
    spec = scene_spec_from_yaml(args.spec)
    out = write_synthetic_dataset(spec, args.out)
    n = len(sorted((out / "rgb").glob("*.png")))
    print(f"wrote {n} frames to {out}")
    return 0


def cmd_mask(args) -> int:
    cfg = _resolve_config(args)
    cfg = dataclasses.replace(
        cfg, dataset=dataclasses.replace(cfg.dataset, root=str(args.dataset)))
    seq, flows, segs = _load_sequence(cfg)

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    shape = (seq.intrinsics.height, seq.intrinsics.width)
    priors: list[int] = []
    for i, frame in enumerate(seq.frames):
        if i % cfg.tracker.kf_interval:
            continue
        mask = build_mask_for_keyframe(
            frame.id, priors, flows, cfg.mask, seg=segs.get(frame.id),
            seed=cfg.seed, shape=shape)
        write_mask_png(out / f"{frame.id:06d}.png", mask.dynamic)
        priors.append(frame.id)
    print(f"wrote {len(priors)} masks to {out}")
    return 0


def cmd_mesh(args) -> int:
    header, arrays, _extra = load_checkpoint(args.checkpoint)
    grid = grid_from_dict(header.get("grid", {}))
    try:
        params = params_from_arrays(grid, arrays)
    except KeyError as exc:
        raise FormatError(
            f"checkpoint {args.checkpoint} lacks field array {exc}") from exc

    def sdf_fn(pts):
        s, _h, _c, _cache = field_forward(pts, params, grid, need_color=False)
        return s

    mesh = extract_mesh(sdf_fn, grid.bounds_min, grid.bounds_max, args.voxel)
    write_ply(args.out, mesh)
    print(f"vertices {len(mesh.vertices)} faces {len(mesh.faces)} -> {args.out}")
    return 0


def cmd_eval_ate(args) -> int:
    result = ate(read_trajectory(args.est), read_trajectory(args.gt),
                 max_dt=args.max_dt)
    print(f"rmse {result.rmse}")
    print(f"std {result.std}")
    print(f"pairs {result.n_pairs}")
    return 0


def cmd_eval_recon(args) -> int:
    mesh = read_ply(args.mesh)
    reference = read_ply(args.reference).vertices
    m = recon_metrics(mesh, reference, n_samples=args.samples,
                      thresh=args.thresh, seed=args.seed)
    print(f"accuracy_cm {m.accuracy_cm}")
    print(f"completion_cm {m.completion_cm}")
    print(f"completion_ratio_pct {m.completion_ratio_pct}")
    return 0


def _add_config_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", "-c", metavar="FILE",
                   help="YAML run configuration (defaults listed below)")
    p.add_argument("--set", action="append", metavar="KEY=VALUE",
                   help="override one config field, e.g. tracker.kf_interval=5; "
                        "repeatable, wins over --config")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="dynslam",
        description="RGB-D SLAM with a neural implicit map and epipolar "
                    "motion masks.")
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    defaults_epilog = ("configuration defaults (every field may be set via "
                       "--config or --set):\n\n"
                       + textwrap.indent(dump_config(RunConfig()), "  "))

    p = sub.add_parser(
        "run", help="track and map a dataset, writing all run artifacts",
        epilog=defaults_epilog,
        formatter_class=argparse.RawDescriptionHelpFormatter)
    _add_config_flags(p)
    p.add_argument("--out", metavar="DIR",
                   help="output directory (default: out_dir from config)")
    p.add_argument("--threads", type=int, metavar="N",
                   help="worker cap; 1 is the bit-reproducible reference mode "
                        "(default: 1)")
    p.set_defaults(fn=cmd_run)

    p = sub.add_parser("synth",
                       help="render a synthetic RGB-D dataset from a scene spec")
    p.add_argument("spec", help="scene spec YAML")
    p.add_argument("--out", required=True, metavar="DIR",
                   help="dataset directory to create")
    p.set_defaults(fn=cmd_synth)

    p = sub.add_parser(
        "mask", help="write motion masks for a dataset's keyframe schedule",
        epilog=defaults_epilog,
        formatter_class=argparse.RawDescriptionHelpFormatter)
    p.add_argument("dataset", help="dataset root directory")
    _add_config_flags(p)
    p.add_argument("--out", required=True, metavar="DIR",
                   help="directory for the mask PNGs")
    p.set_defaults(fn=cmd_mask)

    p = sub.add_parser("mesh", help="extract a triangle mesh from a checkpoint")
    p.add_argument("checkpoint", help="checkpoint.bin from a run")
    p.add_argument("--out", required=True, metavar="PLY", help="output mesh path")
    p.add_argument("--voxel", type=float, default=0.02, metavar="M",
                   help="marching-cubes voxel size in meters (default: %(default)s)")
    p.set_defaults(fn=cmd_mesh)

    p = sub.add_parser("eval-ate",
                       help="absolute trajectory error between two TUM files")
    p.add_argument("est", help="estimated trajectory")
    p.add_argument("gt", help="reference trajectory")
    p.add_argument("--max-dt", type=float, default=0.02, metavar="S",
                   help="timestamp association tolerance (default: %(default)s)")
    p.set_defaults(fn=cmd_eval_ate)

    p = sub.add_parser("eval-recon",
                       help="accuracy/completion between a mesh and a reference cloud")
    p.add_argument("mesh", help="reconstructed mesh PLY")
    p.add_argument("reference", help="reference cloud PLY (vertices are the cloud)")
    p.add_argument("--samples", type=int, default=200_000, metavar="N",
                   help="surface samples per side (default: %(default)s)")
    p.add_argument("--thresh", type=float, default=0.05, metavar="M",
                   help="completion-ratio distance cutoff (default: %(default)s)")
    p.add_argument("--seed", type=int, default=0,
                   help="sampling seed (default: %(default)s)")
    p.set_defaults(fn=cmd_eval_recon)

    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.fn(args)
    except DynSlamError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
