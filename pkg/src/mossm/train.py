"""Training loop, evaluation and the pattern ablation harness."""

from __future__ import annotations

import csv
import io
import json
import math
import time
from dataclasses import dataclass, fields, replace
from pathlib import Path

import numpy as np

from . import tensor as T
from .aggregation import SpatioTemporalCloud, aggregate_scans, augment_random, devoxelize, voxelize, vote_labels
from .errors import ParseError
from .kitti_io import UNLABELED, label_path, read_calib, read_labels, read_poses, read_scan, remap_mos_labels, scan_path
from .losses import IGNORE, class_frequency_weights, joint_loss
from .metrics import DistanceBinnedReport, distance_binned_eval
from .network import MOSNet, StagePlan, load_model, prepare_input, save_model
from .optim import AdamW
from .synth import Sequence, generate_sequence, scene_suite

__all__ = [
    "TrainConfig",
    "Sample",
    "TRACE_COLUMNS",
    "load_config",
    "parse_config",
    "make_samples",
    "synthetic_split",
    "load_kitti_sequence",
    "collate",
    "predict",
    "evaluate",
    "train_loop",
    "TrainResult",
    "run_ablation",
]

TRACE_COLUMNS = ("epoch", "split", "loss_ce", "loss_ls", "iou_mos", "iou_close", "iou_medium", "iou_far")


@dataclass
class TrainConfig:
    lr: float = 0.00032
    weight_decay: float = 0.005
    epochs: int = 50
    F: int = 8
    grid_size: float = 0.09
    batch: int = 4
    seed: int = 0
    augment: bool = True
    weighted_ce: bool = False
    clip_norm: float = 0.0
    # model
    widths: tuple = (16, 32)
    depths: tuple = (1, 1)
    state_size: int = 8
    patterns: tuple = ("z", "z-trans", "hilbert", "hilbert-trans")
    num_classes: int = 2
    # synthetic data
    suite: str = "easy"
    train_scenes: int = 16
    val_scenes: int = 10
    windows_per_scene: int = 1

    def __post_init__(self):
        self.widths = tuple(int(w) for w in self.widths)
        self.depths = tuple(int(d) for d in self.depths)
        self.patterns = tuple(self.patterns)
        if self.lr <= 0:
            raise ValueError("lr must be positive")
        if self.grid_size <= 0:
            raise ValueError("grid_size must be positive")
        if self.F < 1:
            raise ValueError("F must be at least 1")
        if self.batch < 1 or self.epochs < 0:
            raise ValueError("batch must be >= 1 and epochs >= 0")

    def plan(self) -> StagePlan:
        return StagePlan.toy(widths=self.widths, depths=self.depths, state_size=self.state_size,
                             patterns=self.patterns, num_classes=self.num_classes, seed=self.seed)

    def to_text(self) -> str:
        lines = []
        for f in fields(self):
            v = getattr(self, f.name)
            lines.append(f"{f.name}={','.join(map(str, v)) if isinstance(v, tuple) else v}")
        return "\n".join(lines) + "\n"


def _coerce(name: str, raw: str, default):
    raw = raw.strip()
    try:
        if isinstance(default, bool):
            if raw.lower() in ("1", "true", "yes", "on"):
                return True
            if raw.lower() in ("0", "false", "no", "off"):
                return False
            raise ValueError(raw)
        if isinstance(default, int):
            return int(raw)
        if isinstance(default, float):
            return float(raw)
        if isinstance(default, tuple):
            items = [s.strip() for s in raw.split(",") if s.strip()]
            if default and isinstance(default[0], int):
                return tuple(int(s) for s in items)
            return tuple(items)
        return raw
    except ValueError:
        raise ParseError(f"bad value for {name}: {raw!r}") from None


def load_config(path=None, overrides: dict | None = None) -> TrainConfig:
    """Flat ``key=value`` file ('#' comments); ``overrides`` win over the file."""
    text = Path(path).read_text() if path is not None else ""
    return parse_config(text, overrides, where=str(path))


def parse_config(text: str, overrides: dict | None = None, where: str = "<config>") -> TrainConfig:
    known = {f.name: getattr(TrainConfig(), f.name) for f in fields(TrainConfig)}
    values = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ParseError(f"{where}:{lineno}: expected key=value")
        key, raw = (s.strip() for s in line.split("=", 1))
        if key not in known:
            raise ParseError(f"{where}:{lineno}: unknown key {key!r}")
        values[key] = _coerce(key, raw, known[key])
    for key, raw in (overrides or {}).items():
        if key not in known:
            raise ParseError(f"unknown config key {key!r}")
        values[key] = _coerce(key, raw, known[key]) if isinstance(raw, str) else raw
    return TrainConfig(**values)


# ---------------------------------------------------------------- data

@dataclass
class Sample:
    """One aggregated window: cloud in the current-scan frame and per-point class ids."""

    cloud: SpatioTemporalCloud
    labels: np.ndarray
    name: str = ""


def make_samples(seq: Sequence, F: int, frames=None, name: str = "") -> list[Sample]:
    frames = range(F - 1, len(seq)) if frames is None else frames
    out = []
    for k in frames:
        scans, poses, labels = seq.window(k, F)
        out.append(Sample(aggregate_scans(scans, poses, F), np.concatenate(labels), f"{name}@{k}"))
    return out


def synthetic_split(cfg: TrainConfig, suite: str | None = None):
    """Train and held-out samples drawn from disjoint scene seeds."""
    suite = suite or cfg.suite
    n_frames = cfg.F + cfg.windows_per_scene - 1

    def build(count, seed):
        out = []
        for spec in scene_suite(suite, count, seed=seed):
            out += make_samples(generate_sequence(spec, n_frames), cfg.F, name=spec.name)
        return out

    return build(cfg.train_scenes, 2 * cfg.seed + 1), build(cfg.val_scenes, 2 * cfg.seed + 2)


def load_kitti_sequence(seq_dir, scheme="mos2", frames=None) -> Sequence:
    """Read a KITTI-layout sequence directory (labels optional)."""
    seq_dir = Path(seq_dir)
    calib = read_calib(seq_dir / "calib.txt") if (seq_dir / "calib.txt").exists() else None
    poses = read_poses(seq_dir / "poses.txt", calib)
    n = len(poses) if frames is None else frames
    scans, labels = [], []
    for k in range(n):
        scan = read_scan(scan_path(seq_dir, k))
        scans.append(scan)
        lp = label_path(seq_dir, k)
        labels.append(remap_mos_labels(read_labels(lp), scheme) if lp.exists()
                      else np.full(len(scan), UNLABELED, dtype=np.int64))
    return Sequence(scans, poses[:n], labels)


def collate(samples, cfg: TrainConfig, rng=None):
    """Concatenate samples into one batched cloud; augments when ``rng`` is given."""
    pts, batch, labels = [], [], []
    counts = [0] * max(s.cloud.num_scans for s in samples)
    for b, s in enumerate(samples):
        cloud = s.cloud
        if rng is not None and cfg.augment:
            cloud = augment_random(cloud, int(rng.integers(2 ** 63 - 1)))
        pts.append(cloud.points)
        for t, c in enumerate(cloud.counts_per_scan):
            counts[t] += c
        batch.append(np.full(len(cloud), b, dtype=np.int64))
        labels.append(s.labels)
    # counts are per-scan totals; scans stay contiguous within each batch element
    merged = SpatioTemporalCloud(np.concatenate(pts), counts, batch=np.concatenate(batch))
    return merged, np.concatenate(labels)


def _targets(class_ids, num_classes):
    """Class id k (1..num_classes) becomes target k-1; unlabeled and unknown are ignored."""
    c = np.asarray(class_ids, dtype=np.int64)
    return np.where((c >= 1) & (c <= num_classes), c - 1, IGNORE)


def _forward(model: MOSNet, cloud: SpatioTemporalCloud, labels, cfg: TrainConfig):
    reps, grid = voxelize(cloud, cfg.grid_size)
    votes = vote_labels(labels, grid, max(int(labels.max(initial=0)) + 1, cfg.num_classes + 1))
    logits = model(prepare_input(reps, grid, model.plan))
    return logits, _targets(votes, cfg.num_classes), reps, grid


def predict(model: MOSNet, cloud: SpatioTemporalCloud, grid_size: float) -> np.ndarray:
    """Per-point class ids (1-based, matching kitti_io class constants)."""
    was = model.training
    model.eval()
    try:
        with T.no_tape():
            reps, grid = voxelize(cloud, grid_size)
            logits = model(prepare_input(reps, grid, model.plan))
    finally:
        model.train(was)
    return devoxelize(logits.data.argmax(axis=1) + 1, grid)


def evaluate(model: MOSNet, samples, cfg: TrainConfig):
    """Point-level evaluation on current-scan points.

    Returns (report, mean loss_ce, mean loss_ls, per-window IoUs).
    """
    was = model.training
    model.eval()
    report = DistanceBinnedReport()
    ce_sum = ls_sum = 0.0
    ious = []
    try:
        with T.no_tape():
            for s in samples:
                logits, targets, _, grid = _forward(model, s.cloud, s.labels, cfg)
                _, ce, ls = joint_loss(logits, targets)
                ce_sum += float(ce.data)
                ls_sum += float(ls.data)
                pred = devoxelize(logits.data.argmax(axis=1) + 1, grid)
                cur = s.cloud.t == 0
                r = distance_binned_eval(pred[cur], s.labels[cur], s.cloud.xyz[cur])
                ious.append(r.overall.iou)
                report = report + r
    finally:
        model.train(was)
    n = max(len(samples), 1)
    return report, ce_sum / n, ls_sum / n, ious


# ---------------------------------------------------------------- loop

@dataclass
class TrainResult:
    trace: list
    best_iou: float
    best_epoch: int
    model: MOSNet
    out_dir: Path | None

    def trace_csv(self) -> str:
        return _trace_csv(self.trace)


def _trace_csv(rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(TRACE_COLUMNS)
    for r in rows:
        w.writerow([r[c] if isinstance(r[c], (int, str)) else repr(float(r[c])) for c in TRACE_COLUMNS])
    return buf.getvalue()


def _row(epoch, split, ce, ls, report: DistanceBinnedReport):
    b = report.bins
    return {"epoch": epoch, "split": split, "loss_ce": ce, "loss_ls": ls, "iou_mos": report.overall.iou,
            "iou_close": b["close"].iou, "iou_medium": b["medium"].iou, "iou_far": b["far"].iou}


def _save_last(path, model, opt, epoch, best_iou, best_epoch, trace, cfg):
    extra = {f"opt/{k}": v for k, v in opt.state_arrays().items()}
    extra["epoch"] = np.array(epoch)
    extra["best_iou"] = np.array(best_iou)
    extra["best_epoch"] = np.array(best_epoch)
    extra["trace"] = np.frombuffer(json.dumps(trace).encode(), dtype=np.uint8)
    save_model(path, model, extra, meta={"train_config": cfg.to_text()})


def train_loop(train_set, val_set, cfg: TrainConfig, out_dir=None, model: MOSNet | None = None,
               resume=None, stop_after: int | None = None, log=None) -> TrainResult:
    """Train for ``cfg.epochs`` epochs with per-epoch seeded shuffling and augmentation.

    Writes ``trace.csv``, ``last.npz`` (model, optimizer, trace) and ``best.npz``
    into ``out_dir`` when given. ``resume`` names a ``last.npz`` to continue from;
    ``stop_after`` ends the run early after that epoch (used to test resumption).
    """
    model = model or MOSNet(cfg.plan())
    opt = AdamW(model.named_parameters(), lr=cfg.lr, weight_decay=cfg.weight_decay, clip_norm=cfg.clip_norm)
    trace, best_iou, best_epoch, start = [], -math.inf, -1, 0
    if resume is not None:
        model, header, extra = load_model(resume, model=model)
        opt.load_state_arrays({k[4:]: v for k, v in extra.items() if k.startswith("opt/")})
        start = int(extra["epoch"]) + 1
        best_iou, best_epoch = float(extra["best_iou"]), int(extra["best_epoch"])
        trace = json.loads(extra["trace"].tobytes().decode())
    out_dir = Path(out_dir) if out_dir is not None else None
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)
    weights = None
    if cfg.weighted_ce:
        weights = class_frequency_weights(_targets(np.concatenate([s.labels for s in train_set]), cfg.num_classes),
                                          cfg.num_classes)
    model.train()
    for epoch in range(start, cfg.epochs):
        rng = np.random.default_rng([cfg.seed, epoch])
        order = rng.permutation(len(train_set))
        ce_sum = ls_sum = 0.0
        steps = 0
        report = DistanceBinnedReport()
        for i in range(0, len(order), cfg.batch):
            batch = [train_set[j] for j in order[i:i + cfg.batch]]
            cloud, labels = collate(batch, cfg, rng)
            opt.zero_grad()
            with T.Tape() as tape:
                logits, targets, reps, _ = _forward(model, cloud, labels, cfg)
                total, ce, ls = joint_loss(logits, targets, class_weights=weights)
            tape.backward(total)
            opt.step()
            ce_sum += float(ce.data)
            ls_sum += float(ls.data)
            steps += 1
            cur = reps.t == 0
            pred = logits.data.argmax(axis=1) + 1
            report = report + distance_binned_eval(pred[cur], targets[cur] + 1, reps.xyz[cur])
        trace.append(_row(epoch, "train", ce_sum / max(steps, 1), ls_sum / max(steps, 1), report))
        if val_set:
            vrep, vce, vls, _ = evaluate(model, val_set, cfg)
            trace.append(_row(epoch, "val", vce, vls, vrep))
            score = vrep.overall.iou
        else:
            score = report.overall.iou
        score = -math.inf if math.isnan(score) else score
        if score > best_iou:
            best_iou, best_epoch = score, epoch
            if out_dir is not None:
                save_model(out_dir / "best.npz", model, meta={"epoch": epoch, "iou": score, "train_config": cfg.to_text()})
        if out_dir is not None:
            _save_last(out_dir / "last.npz", model, opt, epoch, best_iou, best_epoch, trace, cfg)
            (out_dir / "trace.csv").write_text(_trace_csv(trace))
        if log is not None:
            log(", ".join(f"{k}={v:.4f}" if isinstance(v, float) else f"{k}={v}" for k, v in trace[-1].items()))
        if stop_after is not None and epoch >= stop_after:
            break
    return TrainResult(trace, best_iou, best_epoch, model, out_dir)


def run_ablation(cfg: TrainConfig, out_csv, pattern_sets=None, data=None, log=None) -> list[dict]:
    """Train the same task once per pattern set and write a comparison CSV.

    The trend is reported as measured; no ordering between settings is assumed.
    """
    pattern_sets = pattern_sets or {"1-pattern": ("z",), "4-pattern": ("z", "z-trans", "hilbert", "hilbert-trans")}
    train_set, val_set = data if data is not None else synthetic_split(cfg)
    rows = []
    for label, patterns in pattern_sets.items():
        run_cfg = replace(cfg, patterns=tuple(patterns))
        t0 = time.perf_counter()
        res = train_loop(train_set, val_set, run_cfg, log=log)
        val_rows = [r for r in res.trace if r["split"] == "val"] or [r for r in res.trace if r["split"] == "train"]
        last = val_rows[-1]
        rows.append({"setting": label, "patterns": "+".join(run_cfg.patterns), "epochs": cfg.epochs,
                     "best_iou": res.best_iou, "final_iou": last["iou_mos"], "final_loss_ce": last["loss_ce"],
                     "final_loss_ls": last["loss_ls"], "seconds": time.perf_counter() - t0})
    out_csv = Path(out_csv)
    out_csv.parent.mkdir(parents=True, exist_ok=True)
    with out_csv.open("w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=list(rows[0]), lineterminator="\n")
        w.writeheader()
        w.writerows(rows)
    return rows
