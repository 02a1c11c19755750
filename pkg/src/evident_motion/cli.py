"""Command-line entry point: detect, eval, roc, synth, depthmap."""
from __future__ import annotations

import argparse
import logging
import os
import sys
import warnings
from dataclasses import fields, replace

import numpy as np
import yaml

from . import scan_io
from .evaluation import EvaluationError, SweepSpec, object_counts, points_in_mask, prf_frame, prf_labels, roc_sweep
from .evidential import DiscretizeParams, OccupancyParams
from .ground_filter import remove_ground
from .motion import MODES, WindowParams
from .pipeline import STAGES, ConfigError, GroundParams, PipelineConfig, frame_camera, load_sequence, run_sequence
from .preprocess import PreprocessParams, apply_pose, crop_far
from .validation import EmptyDepthmapError, ValidationParams, build_depthmap

log = logging.getLogger("evident_motion")

THREADS_ENV = "EVIDENT_MOTION_THREADS"

# flag name -> (config section, field)
PARAMS = {
    "crop_tau": ("preprocess", "crop_tau"),
    "dedup_window": ("preprocess", "dedup_window"),
    "dedup_radius": ("preprocess", "dedup_radius"),
    "icp": ("preprocess", "icp_enabled"),
    "icp_max_iter": ("preprocess", "icp_max_iter"),
    "icp_corr_dist": ("preprocess", "icp_corr_dist"),
    "ground_cell": ("ground", "cell_size"),
    "ground_slope": ("ground", "slope_s"),
    "ground_max_gap": ("ground", "max_gap"),
    "sigma_m": ("occupancy", "sigma_m"),
    "sigma_r": ("occupancy", "sigma_r"),
    "sigma_theta": ("occupancy", "theta_scale"),
    "range_kernel_scale": ("occupancy", "range_kernel_scale"),
    "table_step": ("occupancy", "conv_table_step"),
    "table_halfwidth": ("occupancy", "conv_table_halfwidth"),
    "r_sup": ("discretize", "r_sup"),
    "r_inf": ("discretize", "r_inf"),
    "k_half": ("window", "k_half"),
    "octree_resolution": ("window", "octree_resolution"),
    "leaf_fraction": ("window", "leaf_sample_fraction"),
    "leaf_majority": ("window", "leaf_majority"),
    "tau_np": ("window", "tau_np"),
    "neighbor_angle_mult": ("window", "neighbor_angle_mult"),
    "neighbor_cap": ("window", "neighbor_cap"),
    "seed": ("window", "seed"),
    "mode": ("window", "mode"),
    "exhaustive": ("window", "exhaustive"),
    "patch_height": ("validation", "patch_height_h"),
    "ncc_tau": ("validation", "ncc_tau"),
    "uniform_std": ("validation", "uniform_std"),
    "dilation_radius": ("validation", "dilation_radius"),
    "ncc_search_radius": ("validation", "ncc_search_radius"),
    "ssd_tau": ("validation", "ssd_tau"),
}
SWITCHES = {"icp", "exhaustive", "no_ground", "no_image_validation"}

_SECTIONS = {
    "preprocess": PreprocessParams,
    "ground": GroundParams,
    "occupancy": OccupancyParams,
    "discretize": DiscretizeParams,
    "window": WindowParams,
    "validation": ValidationParams,
}


def _default(name):
    section, field = PARAMS[name]
    return next(f.default for f in fields(_SECTIONS[section]) if f.name == field)


def add_param_flags(p: argparse.ArgumentParser) -> None:
    g = p.add_argument_group("parameters (defaults are the method's published values)")
    for name in PARAMS:
        flag = "--" + name.replace("_", "-")
        if name in SWITCHES:
            g.add_argument(flag, action="store_const", const=True, default=None)
        elif name == "mode":
            g.add_argument(flag, choices=MODES, default=None)
        else:
            d = _default(name)
            g.add_argument(flag, type=type(d), default=None, help=f"default {d:g}")
    g.add_argument("--no-ground", action="store_const", const=True, default=None, help="skip ground removal")
    g.add_argument("--no-image-validation", action="store_const", const=True, default=None)
    g.add_argument("--config", help="YAML mapping of parameter names to values; flags take precedence")


def load_config_file(path) -> dict:
    if not path:
        return {}
    with open(path, encoding="utf-8") as fh:
        data = yaml.safe_load(fh) or {}
    if not isinstance(data, dict):
        raise ConfigError(f"{path}: expected a key-value mapping")
    out = {}
    known = set(PARAMS) | SWITCHES
    for k, v in data.items():
        key = str(k).replace("-", "_")
        if key not in known:
            raise ConfigError(f"{path}: unknown parameter {k!r}")
        out[key] = v
    return out


def build_config(args) -> PipelineConfig:
    """Dataclass defaults, then the config file, then command-line flags."""
    values = load_config_file(getattr(args, "config", None))
    for name in list(PARAMS) + ["no_ground", "no_image_validation"]:
        v = getattr(args, name, None)
        if v is not None:
            values[name] = v
    sections = {s: {} for s in _SECTIONS}
    for name, v in values.items():
        if name in PARAMS:
            s, f = PARAMS[name]
            sections[s][f] = v
    try:
        made = {s: cls(**sections[s]) for s, cls in _SECTIONS.items()}
    except (TypeError, ValueError) as e:
        raise ConfigError(f"invalid parameter: {e}") from e
    if values.get("no_ground"):
        made["ground"] = replace(made["ground"], enabled=False)
    if values.get("no_image_validation"):
        made["validation"] = None
    return PipelineConfig(**made)


def apply_thread_env() -> int:
    """Honour EVIDENT_MOTION_THREADS (0 or unset = all available)."""
    import numba

    raw = os.environ.get(THREADS_ENV, "0").strip() or "0"
    try:
        n = int(raw)
    except ValueError:
        raise ConfigError(f"{THREADS_ENV} must be an integer, got {raw!r}") from None
    if n < 0:
        raise ConfigError(f"{THREADS_ENV} must be >= 0")
    cap = numba.config.NUMBA_NUM_THREADS
    n = cap if n == 0 else min(n, cap)
    numba.set_num_threads(n)
    return n


# --- subcommands -----------------------------------------------------------------

def cmd_detect(args) -> int:
    cfg = build_config(args)
    seq = load_sequence(args.input, need_images=cfg.validation is not None)
    if seq.poses is None and not cfg.preprocess.icp_enabled:
        raise ConfigError(f"{args.input}: poses.txt missing and ICP disabled")
    out_labels = os.path.join(args.output, "labels")
    os.makedirs(out_labels, exist_ok=True)
    timing_rows = []

    def on_result(r):
        scan_io.write_label_file(os.path.join(out_labels, scan_io.frame_name(r.index, ".label")), r.labels)
        timing_rows.append([r.index] + [r.timing.get(s, 0.0) for s in STAGES])
        log.info("frame %d: %d moving", r.index, int(np.sum(r.labels == scan_io.Label.MOVING)))

    run_sequence(seq, cfg, on_result)
    scan_io.write_csv(os.path.join(args.output, "timing.csv"), ["frame", *STAGES], timing_rows)
    return 0


def _read_labels(labels_dir, frames):
    out = []
    for i in frames:
        p = os.path.join(labels_dir, scan_io.frame_name(i, ".label"))
        if not os.path.exists(p):
            raise ConfigError(f"missing label file for frame {i}: {p}")
        out.append(scan_io.read_label_file(p))
    return out


def cmd_eval(args) -> int:
    seq = load_sequence(args.input)
    frames = [s.frame_index for s in seq.scans]
    labels = _read_labels(args.labels, frames)
    for lab, sc in zip(labels, seq.scans):
        if len(lab) != len(sc):
            raise ConfigError(f"frame {sc.frame_index}: {len(lab)} labels for {len(sc)} points")
    os.makedirs(os.path.dirname(os.path.abspath(args.output)), exist_ok=True)
    rows = []
    use_points = args.point_gt
    for n, (sc, lab) in enumerate(zip(seq.scans, labels)):
        i = sc.frame_index
        if use_points:
            gt = scan_io.read_label_file(os.path.join(args.input, "gt_labels", scan_io.frame_name(i, ".label")))
            ev = prf_labels(lab, gt == scan_io.Label.MOVING)
        else:
            mask = scan_io.read_raster(os.path.join(args.input, "gt_masks", scan_io.frame_name(i, ".pgm")))
            cam = frame_camera(seq, n)
            try:
                ev = prf_frame(lab, cam.pose.apply(sc.points), cam, mask)
            except EvaluationError as e:
                raise EvaluationError(f"frame {i}: {e}") from e
        rows.append(ev.row(i))
    scan_io.write_metrics_csv(args.output, rows)
    obj_dir = os.path.join(args.input, "gt_objects")
    if os.path.isdir(obj_dir) and seq.calib is not None and seq.poses is not None:
        members = {}
        for name in sorted(os.listdir(obj_dir)):
            per_frame = []
            for n, sc in enumerate(seq.scans):
                p = os.path.join(obj_dir, name, scan_io.frame_name(sc.frame_index, ".pgm"))
                cam = frame_camera(seq, n)
                per_frame.append(points_in_mask(cam.pose.apply(sc.points), cam, scan_io.read_raster(p))
                                 if os.path.exists(p) else np.zeros(len(sc), bool))
            members[name] = per_frame
        counts = object_counts(labels, members)
        base = os.path.splitext(args.output)[0]
        scan_io.write_csv(base + "_objects.csv", ["object", "detected", "partial", "visible_frames", "covered_frames"],
                          [[k, int(c.detected), int(c.partial), c.visible_frames, c.covered_frames]
                           for k, c in counts.items()])
    return 0


def _read_masks(root, seq):
    masks = []
    for sc in seq.scans:
        p = os.path.join(root, "gt_masks", scan_io.frame_name(sc.frame_index, ".pgm"))
        if not os.path.exists(p):
            raise ConfigError(f"missing ground-truth mask for frame {sc.frame_index}: {p}")
        masks.append(scan_io.read_raster(p))
    return masks


def cmd_roc(args) -> int:
    cfg = build_config(args)
    seq = load_sequence(args.input, need_images=cfg.validation is not None)
    masks = _read_masks(args.input, seq)
    spec = SweepSpec((args.sigma_r_lo, args.sigma_r_hi), (args.theta_lo, args.theta_hi), args.steps)
    rows = roc_sweep(seq, masks, cfg, spec, dilation=args.mask_dilation)
    os.makedirs(args.output, exist_ok=True)
    scan_io.write_csv(os.path.join(args.output, "roc.csv"), ["sigma_r", "theta", "precision", "recall"], rows)
    return 0


def cmd_synth(args) -> int:
    from . import synth

    if args.scene == "street":
        spec = synth.street_scene(frames=args.frames, moving=True, textured=args.textured)
    elif args.scene == "static":
        spec = synth.street_scene(frames=args.frames, moving=False, textured=args.textured)
    else:
        spec = synth.validation_scene(frames=args.frames, textured=args.textured)
    seq = synth.generate_sequence(spec, seed=args.seed)
    synth.write_sequence(seq, args.output)
    return 0


def cmd_depthmap(args) -> int:
    cfg = build_config(args)
    seq = load_sequence(args.input)
    try:
        n = seq.position(args.frame)
    except KeyError:
        raise ConfigError(f"frame {args.frame} not found in {args.input}") from None
    cam = frame_camera(seq, n)
    cropped, _ = crop_far(seq.scans[n], cfg.preprocess)
    if cfg.ground.enabled:
        cropped = cropped.subset(np.flatnonzero(~remove_ground(cropped, cfg.ground.cell_size, cfg.ground.slope_s,
                                                               cfg.ground.max_gap)))
    world = apply_pose(cropped, cam.pose)
    try:
        depth, d_max = build_depthmap(world.points, cam, cfg.validation or ValidationParams())
    except EmptyDepthmapError as e:
        raise EmptyDepthmapError(f"frame {args.frame}: {e}") from e
    os.makedirs(os.path.dirname(os.path.abspath(args.output)), exist_ok=True)
    scan_io.write_raster(args.output, depth)
    log.info("frame %d: d_max %.3f m", args.frame, d_max)
    return 0


# --- parser ----------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="evident-motion", description="Lidar moving-object detection with image validation")
    p.add_argument("-v", "--verbose", action="count", default=0)
    sub = p.add_subparsers(dest="command", required=True)

    d = sub.add_parser("detect", help="label every frame of a sequence")
    d.add_argument("--input", required=True, help="sequence directory (velodyne/, poses.txt, calib.txt, image/)")
    d.add_argument("--output", required=True)
    add_param_flags(d)
    d.set_defaults(func=cmd_detect)

    e = sub.add_parser("eval", help="per-frame precision/recall of a label directory")
    e.add_argument("--input", required=True, help="sequence directory with gt_masks/ (or gt_labels/)")
    e.add_argument("--labels", required=True, help="directory of <frame>.label files")
    e.add_argument("--output", required=True, help="metrics CSV path")
    e.add_argument("--point-gt", action="store_true", help="score against per-point gt_labels/ instead of masks")
    e.set_defaults(func=cmd_eval)

    r = sub.add_parser("roc", help="precision/recall over a sigma_r x sigma_theta grid")
    r.add_argument("--input", required=True)
    r.add_argument("--output", required=True)
    r.add_argument("--steps", type=int, default=3)
    r.add_argument("--sigma-r-lo", type=float, default=0.1)
    r.add_argument("--sigma-r-hi", type=float, default=0.45)
    r.add_argument("--theta-lo", type=float, default=0.0035)
    r.add_argument("--theta-hi", type=float, default=0.0088)
    r.add_argument("--mask-dilation", type=int, default=4)
    add_param_flags(r)
    r.set_defaults(func=cmd_roc)

    s = sub.add_parser("synth", help="write a synthetic labelled sequence")
    s.add_argument("--output", required=True)
    s.add_argument("--scene", choices=("street", "static", "validation"), default="street")
    s.add_argument("--frames", type=int, default=30)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--textured", action="store_true")
    s.set_defaults(func=cmd_synth)

    m = sub.add_parser("depthmap", help="write the dilated depth map of one frame as PGM")
    m.add_argument("--input", required=True)
    m.add_argument("--frame", type=int, required=True)
    m.add_argument("--output", required=True, help="output .pgm path")
    add_param_flags(m)
    m.set_defaults(func=cmd_depthmap)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    warnings.filterwarnings("ignore", message=".*TBB.*")
    logging.basicConfig(level=logging.WARNING - 10 * min(args.verbose, 2), format="%(levelname)s %(name)s: %(message)s")
    try:
        apply_thread_env()
        return args.func(args)
    except (ConfigError, scan_io.FormatError, EvaluationError, EmptyDepthmapError, FileNotFoundError,
            ValueError) as e:
        print(f"evident-motion {args.command}: error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
