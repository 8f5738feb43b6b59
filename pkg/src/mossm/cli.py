"""Command line front end.

Exit codes: 0 ok, 1 usage error, 2 data error, 3 numeric failure.
"""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

import numpy as np

from .errors import CheckpointMismatch, DataError, MOSError, NumericError, ParseError

__all__ = ["run", "main", "build_parser"]

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3

PLY_COLORS = {0: (64, 64, 64), 1: (160, 160, 160), 2: (255, 0, 0), 3: (0, 0, 255)}


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: error: {message}")


def _pairs(items):
    out = {}
    for item in items or []:
        if "=" not in item:
            raise UsageError(f"--set expects key=value, got {item!r}")
        k, v = item.split("=", 1)
        out[k.strip()] = v.strip()
    return out


# ---------------------------------------------------------------- commands

def cmd_synth(args):
    from .synth import generate_sequence, scene_suite, write_sequence

    out = Path(args.out)
    for i, spec in enumerate(scene_suite(args.suite, args.count, seed=args.seed)):
        write_sequence(generate_sequence(spec, args.frames), out / "sequences" / f"{i:02d}", args.scheme)
    print(f"wrote {args.count} {args.suite} sequences of {args.frames} scans to {out / 'sequences'}")


def _load_window(seq_dir, frame, F, scheme):
    from .aggregation import aggregate_scans
    from .train import load_kitti_sequence

    seq = load_kitti_sequence(seq_dir, scheme, frames=frame + 1)
    scans, poses, labels = seq.window(frame, F)
    return aggregate_scans(scans, poses, F), labels


def _write_cloud(path, points):
    path = Path(path)
    if path.suffix == ".npy":
        np.save(path, points)
    else:
        np.savetxt(path, points, fmt="%.6f", delimiter=",", header="x,y,z,t", comments="")


def _read_cloud(path):
    """Points as (N, 4) x, y, z, t from .npy, .csv or a KITTI .bin scan (t = 0)."""
    from .kitti_io import read_scan

    path = Path(path)
    if path.suffix == ".npy":
        pts = np.load(path, allow_pickle=False)
    elif path.suffix == ".csv":
        pts = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
    else:
        scan = read_scan(path)
        pts = np.column_stack([scan.xyz, np.zeros(len(scan))])
    pts = np.asarray(pts, dtype=np.float64)
    if pts.ndim != 2 or pts.shape[1] != 4:
        raise DataError(f"{path}: expected N x 4 points (x, y, z, t)")
    return pts


def cmd_aggregate(args):
    cloud, _ = _load_window(args.sequence, args.frame, args.F, args.scheme)
    _write_cloud(args.out, cloud.points)
    print(f"{len(cloud)} points from {cloud.num_scans} scans -> {args.out}")


def cmd_serialize(args):
    from .aggregation import SpatioTemporalCloud
    from .serialization import serialize

    pts = _read_cloud(args.cloud)
    t = pts[:, 3].astype(np.int64)
    cloud = SpatioTemporalCloud(pts, [int((t == k).sum()) for k in range(t.max() + 1)] if len(t) else [])
    seq = serialize(cloud, args.pattern, args.grid)
    lines = ["index,key"] + [f"{i},{k}" for i, k in zip(seq.order, seq.keys)]
    text = "\n".join(lines) + "\n"
    if args.out:
        Path(args.out).write_text(text)
    else:
        sys.stdout.write(text)


def _train_config(args):
    from .train import load_config, parse_config

    overrides = _pairs(args.set)
    if args.epochs is not None:
        overrides["epochs"] = str(args.epochs)
    overrides.setdefault("seed", str(args.seed))
    base = load_config(args.config)          # a broken file is a data error
    try:
        return parse_config(base.to_text(), overrides)
    except ParseError as exc:                # a broken flag is a usage error
        raise UsageError(str(exc)) from None


def _kitti_samples(dirs, cfg, scheme):
    from .train import load_kitti_sequence, make_samples

    out = []
    for d in dirs:
        out += make_samples(load_kitti_sequence(d, scheme), cfg.F, name=Path(d).name)
    return out


def cmd_train(args):
    from .train import synthetic_split, train_loop

    cfg = _train_config(args)
    if args.train_seq:
        if not args.val_seq:
            raise UsageError("--train-seq needs at least one --val-seq")
        train_set = _kitti_samples(args.train_seq, cfg, args.scheme)
        val_set = _kitti_samples(args.val_seq, cfg, args.scheme)
    else:
        train_set, val_set = synthetic_split(cfg)
    res = train_loop(train_set, val_set, cfg, out_dir=args.out, resume=args.resume, log=print)
    print(f"best IoU_MOS {res.best_iou:.4f} at epoch {res.best_epoch}; checkpoints in {args.out}")


def cmd_eval(args):
    from .kitti_io import label_path, read_labels, remap_mos_labels
    from .metrics import DistanceBinnedReport, distance_binned_eval
    from .network import load_model
    from .train import load_kitti_sequence, parse_config, predict

    seq_dir = Path(args.sequence)
    if (args.pred is None) == (args.checkpoint is None):
        raise UsageError("give exactly one of --pred or --checkpoint")
    model, F, grid = None, 1, None
    if args.checkpoint:
        model, header, _ = load_model(args.checkpoint)
        cfg = parse_config(header["meta"].get("train_config", ""))
        F, grid = cfg.F, cfg.grid_size
    seq = load_kitti_sequence(seq_dir, args.scheme)
    frames = range(F - 1, len(seq)) if args.frames is None else [int(f) for f in args.frames.split(",")]
    report = DistanceBinnedReport()
    for k in frames:
        gt = seq.labels[k]
        coords = seq.scans[k].xyz
        if model is None:
            pred = remap_mos_labels(read_labels(label_path(args.pred, k, folder=".")), args.scheme)
        else:
            cloud, _ = _load_window(seq_dir, k, F, args.scheme)
            pred = predict(model, cloud, grid)[: cloud.counts_per_scan[0]]
        report = report + distance_binned_eval(pred, gt, coords)
    if args.out:
        Path(args.out).write_text(report.to_csv())
    print(f"IoU_MOS {report.overall.iou:.4f}")


def cmd_bench(args):
    from .ssm import bench_scans

    r = bench_scans(length=args.length, channels=args.channels, state=args.state, batch=args.batch,
                    block=args.block, repeats=args.repeats, seed=args.seed)
    print(f"L={r['length']} block={r['block']}")
    print(f"sequential {r['sequential_tokens_per_s']:.0f} tokens/s")
    print(f"blocked    {r['blocked_tokens_per_s']:.0f} tokens/s")
    print(f"speedup {r['speedup']:.2f}x  max|diff| {r['max_abs_diff']:.2e}")


def write_ply(path, xyz, classes):
    xyz = np.asarray(xyz, dtype=np.float64)
    classes = np.asarray(classes, dtype=np.int64)
    if len(xyz) != len(classes):
        raise DataError(f"{len(xyz)} points but {len(classes)} labels")
    header = ["ply", "format ascii 1.0", f"element vertex {len(xyz)}",
              "property float x", "property float y", "property float z",
              "property uchar red", "property uchar green", "property uchar blue", "end_header"]
    rows = [f"{x:.6f} {y:.6f} {z:.6f} {' '.join(map(str, PLY_COLORS.get(int(c), PLY_COLORS[0])))}"
            for (x, y, z), c in zip(xyz, classes)]
    Path(path).write_text("\n".join(header + rows) + "\n")


def cmd_export(args):
    from .kitti_io import read_labels, read_scan, remap_mos_labels

    scan = read_scan(args.scan)
    classes = remap_mos_labels(read_labels(args.labels), args.scheme)
    write_ply(args.out, scan.xyz, classes)
    print(f"{len(scan)} points -> {args.out}")


# ---------------------------------------------------------------- parser

def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="mossm", description="Moving object segmentation with serialized selective scans.",
                epilog="exit codes: 0 ok, 1 usage error, 2 data error, 3 numeric failure")
    p.add_argument("--threads", type=int, default=None, metavar="N",
                   help="cap BLAS/OpenMP worker threads (default: all available cores)")
    p.add_argument("--seed", type=int, default=0, help="random seed for synth, train and bench (default 0)")
    sub = p.add_subparsers(dest="command", metavar="command", parser_class=_Parser)

    s = sub.add_parser("synth", help="write a synthetic KITTI-layout dataset")
    s.add_argument("--suite", default="easy", help="scene family: easy, ranges or crowded")
    s.add_argument("--count", type=int, default=1, help="number of sequences")
    s.add_argument("--frames", type=int, default=8, help="scans per sequence")
    s.add_argument("--scheme", default="mos2", help="label scheme for the written label files")
    s.add_argument("--out", required=True, help="dataset root; sequences go to OUT/sequences/NN")
    s.set_defaults(fn=cmd_synth)

    s = sub.add_parser("aggregate", help="stack F scans into the current frame")
    s.add_argument("sequence", help="KITTI sequence directory")
    s.add_argument("--frame", type=int, required=True, help="index of the current scan")
    s.add_argument("--F", type=int, default=8, help="number of scans to stack")
    s.add_argument("--scheme", default="mos2", help="label scheme")
    s.add_argument("--out", required=True, help="output .npy or .csv with columns x,y,z,t")
    s.set_defaults(fn=cmd_aggregate)

    s = sub.add_parser("serialize", help="dump space-filling curve keys as CSV (index,key)")
    s.add_argument("cloud", help=".npy/.csv (x,y,z,t) or KITTI .bin scan")
    s.add_argument("--pattern", default="hilbert", help="z, z-trans, hilbert or hilbert-trans")
    s.add_argument("--grid", type=float, default=0.09, help="voxel size in meters")
    s.add_argument("--out", default=None, help="CSV path (default: stdout)")
    s.set_defaults(fn=cmd_serialize)

    s = sub.add_parser("train", help="train on synthetic scenes or KITTI sequences")
    s.add_argument("--config", default=None, help="key=value config file")
    s.add_argument("--set", action="append", metavar="KEY=VALUE", help="override a config key (repeatable)")
    s.add_argument("--epochs", type=int, default=None, help="override the epoch count")
    s.add_argument("--train-seq", action="append", help="KITTI training sequence directory (repeatable)")
    s.add_argument("--val-seq", action="append", help="KITTI validation sequence directory (repeatable)")
    s.add_argument("--scheme", default="mos2", help="label scheme for KITTI sequences")
    s.add_argument("--resume", default=None, help="resume from a last.npz checkpoint")
    s.add_argument("--out", required=True, help="directory for best.npz, last.npz and trace.csv")
    s.set_defaults(fn=cmd_train)

    s = sub.add_parser("eval", help="distance-binned IoU of predictions or of a checkpoint")
    s.add_argument("sequence", help="KITTI sequence directory with ground-truth labels")
    s.add_argument("--pred", default=None, help="directory of predicted NNNNNN.label files")
    s.add_argument("--checkpoint", default=None, help="model checkpoint to run instead of --pred")
    s.add_argument("--frames", default=None, help="comma-separated frame indices (default: all)")
    s.add_argument("--scheme", default="mos2", help="label scheme")
    s.add_argument("--out", default=None, help="CSV path for the per-bin report")
    s.set_defaults(fn=cmd_eval)

    s = sub.add_parser("bench", help="time sequential against blocked scans")
    s.add_argument("--length", type=int, default=1000, help="sequence length L")
    s.add_argument("--channels", type=int, default=4, help="channels")
    s.add_argument("--state", type=int, default=4, help="state size")
    s.add_argument("--batch", type=int, default=1, help="batch size")
    s.add_argument("--block", type=int, default=64, help="block length of the blocked scan")
    s.add_argument("--repeats", type=int, default=3, help="timing repeats (best is kept)")
    s.set_defaults(fn=cmd_bench)

    s = sub.add_parser("export", help="write an ASCII PLY colored by class")
    s.add_argument("scan", help="KITTI .bin scan")
    s.add_argument("--labels", required=True, help="matching .label file")
    s.add_argument("--scheme", default="mos2", help="label scheme")
    s.add_argument("--out", required=True, help="output .ply")
    s.set_defaults(fn=cmd_export)
    return p


def run(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if args.command is None:
            parser.print_usage(sys.stderr)
            print("mossm: error: a command is required", file=sys.stderr)
            return EXIT_USAGE
        if args.threads is not None and args.threads < 1:
            raise UsageError("--threads must be at least 1")
        from threadpoolctl import threadpool_limits

        with threadpool_limits(limits=args.threads):
            args.fn(args)
        return EXIT_OK
    except SystemExit as exc:   # --help
        return int(exc.code or 0)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return EXIT_USAGE
    except NumericError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (DataError, CheckpointMismatch, OSError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (MOSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE


def main():
    sys.exit(run())
