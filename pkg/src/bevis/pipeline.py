"""End-to-end orchestration: dataset generation, two-stage training, full-scene
inference, evaluation and renders.

Stage order is fixed: the 2D network trains first; the 3D stage consumes its
frozen embeddings (and fails fast without a 2D checkpoint). Every step derives
its randomness from (seed, stage, step index), so runs are reproducible and
resumable, and scene generation parallelizes without changing its output.
"""

from __future__ import annotations

import csv
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .bev import BirdsEyeView, pad_to_multiple, rasterize, remove_ceiling
from .checkpoint import load_arrays, save_arrays
from .cloudio import load_cloud, save_cloud
from .config import PipelineConfig
from .grouping import (
    MeanShiftConfig,
    SplitConfig,
    assign_semantics,
    average_instance_sizes,
    mean_shift,
    split_inconsistent,
)
from .metrics import Instance, instances_from_labels, semantic_metrics, strict_ap
from .net2d import InstanceNet2D, PairLossConfig, embed_view, instance_loss_2d, masked_input, semantic_loss_2d, train_step_2d
from .net3d import (
    PropagationNet3D,
    augmented_features,
    build_knn,
    compute_targets,
    infer_full_scene,
    instance_loss_3d,
    sample_block,
)
from .nn import class_weights
from .optim import Adam, AdamConfig
from .render import render_view
from .scene import N_CLASSES, Labeling, PointCloud, SceneSpec, generate_scene
from .bev import augment as augment_view

MANIFEST = "manifest.txt"


def num_workers() -> int:
    try:
        return max(1, int(os.environ.get("BEVIS_NUM_WORKERS", "1")))
    except ValueError:
        return 1


# ---------------------------------------------------------------------------
# dataset generation


def scene_spec_for(cfg: PipelineConfig, index: int) -> SceneSpec:
    rng = np.random.default_rng([cfg.seed, 1, index])
    return SceneSpec(
        width=float(rng.uniform(cfg.room_min, cfg.room_max)),
        depth=float(rng.uniform(cfg.room_min, cfg.room_max)),
        height=cfg.room_height,
        n_objects=int(rng.integers(cfg.objects_min, cfg.objects_max + 1)),
        seed=int(rng.integers(0, 2**31 - 1)),
        ceiling=cfg.ceiling,
        density=cfg.density,
    )


def split_of(index: int, n_scenes: int) -> str:
    """8/1/1 split by index: the last two tenths are validation and test."""
    n_test = max(1, round(n_scenes / 10)) if n_scenes >= 3 else 0
    n_val = n_test
    if index >= n_scenes - n_test:
        return "test"
    if index >= n_scenes - n_test - n_val:
        return "val"
    return "train"


def _generate_one(args):
    cfg, index, out_dir = args
    cloud = generate_scene(scene_spec_for(cfg, index))
    name = f"scene_{index:03d}.bevpc"
    save_cloud(Path(out_dir) / name, cloud)
    return name


def generate_dataset(cfg: PipelineConfig, out_dir) -> Path:
    """Write n_scenes labeled clouds plus a train/val/test manifest."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    jobs = [(cfg, i, out_dir) for i in range(cfg.n_scenes)]
    workers = num_workers()
    if workers > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            names = list(pool.map(_generate_one, jobs))
    else:
        names = [_generate_one(job) for job in jobs]
    manifest = out_dir / MANIFEST
    with open(manifest, "w") as fh:
        for i, name in enumerate(names):
            fh.write(f"{name} {split_of(i, cfg.n_scenes)}\n")
    return manifest


def read_manifest(data_dir) -> list[tuple[str, str]]:
    path = Path(data_dir) / MANIFEST
    if not path.exists():
        raise FileNotFoundError(f"no manifest at {path}")
    out = []
    for line in path.read_text().splitlines():
        if line.strip():
            name, split = line.split()
            out.append((name, split))
    return out


def load_split(data_dir, split: str) -> list[tuple[str, PointCloud]]:
    return [
        (name, load_cloud(Path(data_dir) / name))
        for name, s in read_manifest(data_dir)
        if s == split
    ]


# ---------------------------------------------------------------------------
# shared helpers


def prepare_full_view(cloud: PointCloud, cfg: PipelineConfig) -> tuple[BirdsEyeView, np.ndarray]:
    """Rasterize the ceiling-trimmed cloud but keep indices into the full cloud.

    Returns the padded view plus the kept-point index array; the view's
    index_map is rewritten to reference the original point order so that
    unprojection addresses the full scene.
    """
    z = cloud.xyz[:, 2]
    ground = float(np.percentile(z, 1.0))
    z_cut = ground + cfg.ceiling_fraction * (z.max() - ground)
    kept = np.flatnonzero(z <= z_cut)
    view = rasterize(cloud.select(kept), cfg.cell_size, cfg.max_grid)
    remapped = np.full_like(view.index_map, -1)
    visible = view.index_map >= 0
    remapped[visible] = kept[view.index_map[visible]]
    view = BirdsEyeView(
        view.channels, view.valid, remapped, view.cell_size,
        view.origin, view.gt_semantic, view.gt_instance,
    )
    return pad_to_multiple(view, cfg.pad_multiple), kept


def build_net2d(cfg: PipelineConfig) -> InstanceNet2D:
    return InstanceNet2D(
        in_channels=4,
        widths=cfg.unet_widths,
        embed_dim=cfg.embed_dim,
        n_classes=N_CLASSES,
        seed=cfg.seed,
    )


def build_net3d(cfg: PipelineConfig) -> PropagationNet3D:
    # +1: the visibility flag rides along so the network can tell "unseen,
    # zero-filled" apart from an embedding that happens to be near zero
    return PropagationNet3D(
        in_dim=9 + cfg.embed_dim + 1,
        widths=cfg.edge_widths,
        embed_dim=cfg.embed_dim,
        n_classes=N_CLASSES,
        seed=cfg.seed + 1,
    )


def net3d_inputs(cloud: PointCloud, view: BirdsEyeView, embeddings: np.ndarray):
    feats, seen = augmented_features(cloud, view, embeddings)
    return np.hstack([feats, seen[:, None].astype(np.float64)]), seen


def adam_config(cfg: PipelineConfig) -> AdamConfig:
    return AdamConfig(
        base_lr=cfg.lr, decay_rate=cfg.lr_decay_rate, decay_interval=cfg.lr_decay_interval
    )


def _save_checkpoint(path, net, opt, extra=None):
    arrays = {name: p.data for name, p in net.params().items()}
    arrays.update(net.state())
    arrays.update(opt.state_arrays())
    if extra:
        arrays.update(extra)
    save_arrays(path, arrays)


# ---------------------------------------------------------------------------
# stage 2d


@dataclass
class TrainResult:
    checkpoint: Path
    curve: Path
    steps_run: int
    best_val: float


def _val_loss_2d(net, views, pair_cfg, weights):
    total = 0.0
    for i, view in enumerate(views):
        with ad.no_grad():
            emb, logits = net.forward(masked_input(view), training=False)
        l_inst, _ = instance_loss_2d(emb, view.gt_instance, view.valid, pair_cfg, seed=10_000 + i)
        l_sem, _ = semantic_loss_2d(logits, view.gt_semantic, view.valid, weights)
        total += l_inst.item() + l_sem.item()
    return total / max(len(views), 1)


def train_stage_2d(cfg: PipelineConfig, data_dir, out_dir, resume_from=None) -> TrainResult:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    train = load_split(data_dir, "train")
    val = load_split(data_dir, "val")
    if not train:
        raise ValueError("training split is empty")
    views = [prepare_full_view(cloud, cfg)[0] for _, cloud in train]
    val_views = [prepare_full_view(cloud, cfg)[0] for _, cloud in val]
    weights = class_weights(
        np.concatenate([v.gt_semantic[v.valid] for v in views]), N_CLASSES
    )
    pair_cfg = PairLossConfig(cfg.delta_var, cfg.delta_dist, cfg.samples_per_instance)
    net = build_net2d(cfg)
    opt = Adam(net.params(), adam_config(cfg))
    start_step = 0
    if resume_from is not None:
        arrays = load_arrays(resume_from)
        net.load_arrays(arrays)
        opt.load_state_arrays(arrays)
        start_step = int(arrays["train.step"])

    curve_path = out_dir / "curve_2d.csv"
    ckpt_path = out_dir / "ckpt_2d.bevis"
    best_val = np.inf
    stale = 0
    next_step = start_step
    with open(curve_path, "a" if start_step else "w", newline="") as fh:
        writer = csv.writer(fh)
        if not start_step:
            writer.writerow(["step", "l_var", "l_dist", "l_sem"])
        for step in range(start_step, cfg.steps_2d):
            rng = np.random.default_rng([cfg.seed, 2, step])
            picks = rng.integers(0, len(views), size=cfg.batch_size_2d)
            batch = []
            for pick in picks:
                view = views[pick]
                if cfg.augment:
                    view = augment_view(
                        view,
                        seed=int(rng.integers(0, 2**31 - 1)),
                        scale_range=(cfg.scale_min, cfg.scale_max),
                    )
                    view = pad_to_multiple(view, cfg.pad_multiple)
                batch.append(view)
            report = train_step_2d(net, opt, batch, pair_cfg, weights, seed=step)
            writer.writerow([step, repr(float(report.l_var)), repr(float(report.l_dist)), repr(float(report.l_sem))])
            next_step = step + 1
            if val_views and next_step % cfg.eval_every == 0:
                vloss = _val_loss_2d(net, val_views, pair_cfg, weights)
                if vloss < best_val - 1e-6:
                    best_val = vloss
                    stale = 0
                else:
                    stale += 1
                    if stale > cfg.patience:
                        break
    _save_checkpoint(ckpt_path, net, opt, extra={"train.step": np.array(float(next_step))})
    return TrainResult(ckpt_path, curve_path, next_step, float(best_val))


# ---------------------------------------------------------------------------
# stage 3d


def _scene_cache_for_3d(cfg, net2d, clouds):
    cache = []
    for _, cloud in clouds:
        view, _ = prepare_full_view(cloud, cfg)
        emb, _ = embed_view(net2d, view)
        feats, _ = net3d_inputs(cloud, view, emb)
        targets, defined = compute_targets(view, emb, cloud.gt_instance, len(cloud))
        cache.append((cloud, feats, targets, defined))
    return cache


def _block_loss_3d(net, cache_entry, rng, cfg, weights, training):
    cloud, feats, targets, defined = cache_entry
    center = cloud.xyz[int(rng.integers(0, len(cloud))), 0:2]
    idx = sample_block(cloud, center, cfg.block_diameter, cfg.block_points, rng)
    nb = build_knn(cloud.xyz[idx], cfg.knn_k)
    pred, logits = net.forward(feats[idx], nb, training=training)
    l_inst, _ = instance_loss_3d(pred, targets[idx], defined[idx])
    l_sem = ad.cross_entropy(logits, cloud.gt_semantic[idx], weights)
    return ad.add(l_inst, l_sem), l_inst.item(), l_sem.item()


def train_stage_3d(cfg: PipelineConfig, data_dir, out_dir, ckpt_2d, resume_from=None) -> TrainResult:
    ckpt_2d = Path(ckpt_2d)
    if not ckpt_2d.exists():
        raise FileNotFoundError(f"stage 3d needs the 2d checkpoint, none at {ckpt_2d}")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    train = load_split(data_dir, "train")
    val = load_split(data_dir, "val")
    if not train:
        raise ValueError("training split is empty")
    net2d = build_net2d(cfg)
    net2d.load_arrays(load_arrays(ckpt_2d))
    cache = _scene_cache_for_3d(cfg, net2d, train)
    val_cache = _scene_cache_for_3d(cfg, net2d, val)
    weights = class_weights(np.concatenate([c.gt_semantic for _, c in train]), N_CLASSES)
    avg_sizes = average_instance_sizes([c for _, c in train], N_CLASSES)

    net = build_net3d(cfg)
    opt = Adam(net.params(), adam_config(cfg))
    start_step = 0
    if resume_from is not None:
        arrays = load_arrays(resume_from)
        net.load_arrays(arrays)
        opt.load_state_arrays(arrays)
        start_step = int(arrays["train.step"])

    curve_path = out_dir / "curve_3d.csv"
    ckpt_path = out_dir / "ckpt_3d.bevis"
    best_val = np.inf
    stale = 0
    next_step = start_step
    with open(curve_path, "a" if start_step else "w", newline="") as fh:
        writer = csv.writer(fh)
        if not start_step:
            writer.writerow(["step", "l_inst", "l_sem"])
        for step in range(start_step, cfg.steps_3d):
            rng = np.random.default_rng([cfg.seed, 3, step])
            entry = cache[int(rng.integers(0, len(cache)))]
            loss, l_inst, l_sem = _block_loss_3d(net, entry, rng, cfg, weights, training=True)
            if not np.isfinite(loss.item()):
                raise FloatingPointError("non-finite training loss; step aborted")
            opt.zero_grad()
            loss.backward()
            opt.step()
            writer.writerow([step, repr(float(l_inst)), repr(float(l_sem))])
            next_step = step + 1
            if val_cache and next_step % cfg.eval_every == 0:
                vtotal = 0.0
                for vb in range(cfg.val_blocks):
                    vrng = np.random.default_rng([cfg.seed, 4, vb])
                    ventry = val_cache[vb % len(val_cache)]
                    with ad.no_grad():
                        vloss, _, _ = _block_loss_3d(net, ventry, vrng, cfg, weights, training=False)
                    vtotal += vloss.item()
                vtotal /= cfg.val_blocks
                if vtotal < best_val - 1e-6:
                    best_val = vtotal
                    stale = 0
                else:
                    stale += 1
                    if stale > cfg.patience:
                        break
    _save_checkpoint(
        ckpt_path,
        net,
        opt,
        extra={"train.step": np.array(float(next_step)), "split.avg_sizes": avg_sizes},
    )
    return TrainResult(ckpt_path, curve_path, next_step, float(best_val))


# ---------------------------------------------------------------------------
# inference


def infer_scene(cfg: PipelineConfig, cloud: PointCloud, net2d, net3d, avg_sizes):
    """Full pipeline for one scene; returns the labeling and the intermediates."""
    view, _ = prepare_full_view(cloud, cfg)
    emb, _ = embed_view(net2d, view)
    feats, seen = net3d_inputs(cloud, view, emb)
    f_inst, logits = infer_full_scene(net3d, feats, cloud.xyz, cfg.knn_k, cfg.block_diameter)
    ms_cfg = MeanShiftConfig(cfg.bandwidth, cfg.ms_max_iters, cfg.ms_tol, cfg.merge_radius)
    clusters = mean_shift(f_inst, ms_cfg)
    labeling, _ = assign_semantics(clusters, logits)
    labeling = split_inconsistent(labeling, SplitConfig(cfg.alpha, avg_sizes))
    labeling = labeling.canonical()
    return labeling, {"view": view, "embeddings": emb, "features": f_inst, "logits": logits, "seen": seen}


def save_prediction(path, labeling: Labeling):
    """Text format, one line per point: ``point_index instance_id semantic_id``."""
    with open(path, "w") as fh:
        for i, (inst, sem) in enumerate(zip(labeling.instance, labeling.semantic)):
            fh.write(f"{i} {inst} {sem}\n")


def load_prediction(path, n_points: int | None = None) -> Labeling:
    rows = []
    for line in Path(path).read_text().splitlines():
        if line.strip():
            idx, inst, sem = (int(x) for x in line.split())
            rows.append((idx, inst, sem))
    rows.sort()
    if n_points is not None and len(rows) != n_points:
        raise ValueError(f"{path}: expected {n_points} rows, found {len(rows)}")
    inst = np.array([r[1] for r in rows], dtype=np.int64)
    sem = np.array([r[2] for r in rows], dtype=np.int64)
    return Labeling(sem, inst)


def run_infer(cfg: PipelineConfig, data_dir, out_dir, ckpt_2d, ckpt_3d, split="test", render=False):
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    net2d = build_net2d(cfg)
    net2d.load_arrays(load_arrays(ckpt_2d))
    arrays3d = load_arrays(ckpt_3d)
    net3d = build_net3d(cfg)
    net3d.load_arrays(arrays3d)
    avg_sizes = arrays3d["split.avg_sizes"]
    written = []
    for name, cloud in load_split(data_dir, split):
        labeling, extras = infer_scene(cfg, cloud, net2d, net3d, avg_sizes)
        stem = Path(name).stem
        pred_path = out_dir / f"{stem}.pred.txt"
        save_prediction(pred_path, labeling)
        save_cloud(
            out_dir / f"{stem}.features.bevpc",
            cloud,
            features=extras["features"],
            logits=extras["logits"],
        )
        if render:
            render_view(extras["view"], extras["embeddings"], out_dir, stem)
        written.append(pred_path)
    return written


# ---------------------------------------------------------------------------
# evaluation


@dataclass
class EvalResult:
    ap_report: object
    semantic: object
    per_scene: dict
    csv_path: Path
    exit_code: int


def run_eval(cfg: PipelineConfig, pred_dir, gt_dir, out_dir, split="test") -> EvalResult:
    pred_dir, out_dir = Path(pred_dir), Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    scenes = load_split(gt_dir, split)
    if not scenes:
        raise ValueError(f"no scenes with split {split!r} in {gt_dir}")
    all_preds: list[Instance] = []
    all_gts: list[Instance] = []
    sem_pred_parts, sem_gt_parts = [], []
    per_scene = {}
    for name, cloud in scenes:
        stem = Path(name).stem
        pred_path = pred_dir / f"{stem}.pred.txt"
        if not pred_path.exists():
            raise FileNotFoundError(f"missing prediction for scene {name}: {pred_path}")
        pred = load_prediction(pred_path, len(cloud))
        gt = Labeling(cloud.gt_semantic, cloud.gt_instance)
        preds = instances_from_labels(pred, scene=stem)
        gts = instances_from_labels(gt, scene=stem)
        all_preds.extend(preds)
        all_gts.extend(gts)
        sem_pred_parts.append(pred.semantic)
        sem_gt_parts.append(gt.semantic)
        scene_report = strict_ap(preds, gts)
        scene_sem = semantic_metrics(pred.semantic, gt.semantic, N_CLASSES)
        per_scene[stem] = (scene_report, scene_sem)
    report = strict_ap(all_preds, all_gts)
    sem = semantic_metrics(np.concatenate(sem_pred_parts), np.concatenate(sem_gt_parts), N_CLASSES)

    csv_path = out_dir / "metrics.csv"
    with open(csv_path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["metric", "value"])
        writer.writerow(["ap_strict", repr(report.strict_mean)])
        for t in sorted(report.mean):
            writer.writerow([f"ap_{t:g}", repr(report.mean[t])])
        writer.writerow(["miou", repr(sem.miou)])
        writer.writerow(["oacc", repr(sem.oacc)])
        writer.writerow(["macc", repr(sem.macc)])
        for cls, iou in sorted(sem.per_class_iou.items()):
            writer.writerow([f"iou_class_{cls}", repr(iou)])
        for stem in sorted(per_scene):
            sr, ss = per_scene[stem]
            writer.writerow([f"scene_{stem}_ap_0.5", repr(sr.mean[0.5])])
            writer.writerow([f"scene_{stem}_miou", repr(ss.miou)])

    exit_code = 0
    if cfg.min_ap50 > 0 and report.ap50 < cfg.min_ap50:
        exit_code = 1
    if cfg.min_miou > 0 and sem.miou < cfg.min_miou:
        exit_code = 1
    return EvalResult(report, sem, per_scene, csv_path, exit_code)


def format_eval_table(result: EvalResult) -> str:
    lines = ["metric            value", "-" * 26]
    lines.append(f"AP (strict mean)  {result.ap_report.strict_mean:.4f}")
    for t in (0.25, 0.5, 0.75):
        lines.append(f"AP@{t:<4g}          {result.ap_report.mean[t]:.4f}")
    lines.append(f"mIoU              {result.semantic.miou:.4f}")
    lines.append(f"oAcc              {result.semantic.oacc:.4f}")
    lines.append(f"mAcc              {result.semantic.macc:.4f}")
    return "\n".join(lines)
