"""The pretrain / classify / segment pipelines behind the command line."""

from __future__ import annotations

import csv
import json
import logging
import os
import subprocess
from collections import OrderedDict
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import numpy as np

from .. import __version__
from ..classify import LinearHead, ProbeConfig, evaluate_accuracy, train_linear_probe
from ..dataio import AugmentPolicy, DatasetIndex, SliceRecord, few_shot_sample, load_records, read_manifest
from ..errors import ConfigError, DataError
from ..funet import FunetConfig, FunetModel, LossWeights, MaeDirect, SegTrainer
from ..mae import MaeConfig, MaeModel, Pretrainer
from ..metrics import multiclass_report, preset_class_names, stability_summary, volume_report
from ..nnkit.rng import STREAMS, get_state, set_state, stream
from . import checkpoint as ckpt_io
from .config import ExperimentConfig
from .report import emit_report, fmt_percent

log = logging.getLogger("maefuse")

THREADS_ENV = "MAEFUSE_THREADS"


# ---------------------------------------------------------------- plumbing


def rng_streams(seed: int) -> dict[str, np.random.Generator]:
    return {name: stream(seed, name) for name in STREAMS}


def effective_workers(requested: int) -> int:
    cap = os.environ.get(THREADS_ENV)
    if cap is None:
        return max(1, requested)
    try:
        return max(1, min(requested, int(cap)))
    except ValueError:
        raise ConfigError(f"{THREADS_ENV} must be an integer, got {cap!r}") from None


def version_string() -> str:
    """``v<package version>``, plus ``-g<commit>[-dirty]`` inside a git checkout."""
    base = f"v{__version__}"
    try:
        out = subprocess.run(
            ["git", "describe", "--always", "--dirty"],
            cwd=Path(__file__).resolve().parent,
            capture_output=True,
            text=True,
            timeout=5,
            check=True,
        )
    except (OSError, subprocess.SubprocessError):
        return base
    desc = out.stdout.strip()
    return f"{base}-g{desc}" if desc else base


def write_run_manifest(cfg: ExperimentConfig, out_dir: Path, trainable: int, extra: dict | None = None) -> Path:
    manifest = {
        "config": cfg.to_dict(),
        "config_hash": cfg.config_hash(),
        "seed": cfg.run.seed,
        "version": version_string(),
        "trainable_parameters": int(trainable),
    }
    manifest.update(extra or {})
    path = out_dir / "run_manifest.json"
    path.write_text(json.dumps(manifest, indent=1, sort_keys=True) + "\n")
    return path


def load_records_parallel(index: DatasetIndex, size: int, per_volume: bool, workers: int) -> list[SliceRecord]:
    """Preprocess slices, optionally in worker threads, keeping manifest order.

    Entries are grouped by volume so each worker reads a volume once; the
    groups come back in submission order and are scattered to their
    original positions.
    """
    if workers <= 1 or len(index.entries) < 2:
        return load_records(index, size=size, per_volume=per_volume)
    groups: OrderedDict[str, list[int]] = OrderedDict()
    for i, e in enumerate(index.entries):
        groups.setdefault(e.path, []).append(i)
    jobs = [index.subset(index.entries[i] for i in idx) for idx in groups.values()]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        results = list(pool.map(lambda sub: load_records(sub, size=size, per_volume=per_volume), jobs))
    out: list[SliceRecord | None] = [None] * len(index.entries)
    for idx, recs in zip(groups.values(), results):
        for i, r in zip(idx, recs):
            out[i] = r
    return out  # type: ignore[return-value]


def _policy(cfg: ExperimentConfig) -> AugmentPolicy | None:
    a = cfg.augment
    if not a.enabled:
        return None
    return AugmentPolicy(a.rotation_max_deg, a.flip_prob, (a.crop_scale_min, a.crop_scale_max))


def _records(cfg: ExperimentConfig, index: DatasetIndex, size: int, workers: int) -> list[SliceRecord]:
    return load_records_parallel(index, size, cfg.data.per_volume_clamp, workers)


def _write_loss_csv(path: Path, header: list[str], rows: list[list]) -> None:
    with path.open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for r in rows:
            w.writerow([repr(v) if isinstance(v, float) else v for v in r])


def load_mae(cfg: ExperimentConfig) -> MaeModel:
    """The frozen encoder for probing/segmentation: from checkpoint, or freshly initialized."""
    if cfg.checkpoint:
        ck = ckpt_io.load_checkpoint(cfg.path(cfg.checkpoint))
        mcfg = MaeConfig(**ck.config["mae"])
        model = MaeModel(mcfg, stream(cfg.run.seed, "init"))
        ckpt_io.restore(model, ck, restore_frozen=False)
    else:
        log.warning("no checkpoint given; using a randomly initialized encoder")
        model = MaeModel(cfg.mae_config(), stream(cfg.run.seed, "init"))
    return model.freeze()


# ---------------------------------------------------------------- pretrain


def run_pretrain(cfg: ExperimentConfig, workers: int = 1) -> Path:
    """Train the MAE for ``optim.steps`` total steps; writes checkpoint, loss.csv, run_manifest.json.

    With ``resume`` the run continues from ``<out_dir>/checkpoint.json``
    (weights, optimizer moments, RNG positions, step) up to the same total.
    """
    out = cfg.out_dir
    out.mkdir(parents=True, exist_ok=True)
    mcfg = cfg.mae_config()
    rngs = rng_streams(cfg.run.seed)
    records = _records(cfg, read_manifest(cfg.path(cfg.data.manifest)), mcfg.image_size, workers)
    model = MaeModel(mcfg, rngs["init"])
    trainer = Pretrainer(
        model,
        records,
        lr=cfg.optim.lr,
        batch_size=cfg.optim.batch_size,
        weight_decay=cfg.optim.weight_decay,
        data_rng=rngs["data"],
        mask_rng=rngs["mask"],
        augment_rng=rngs["augment"],
        policy=_policy(cfg),
    )
    loss_rows: list[list] = []
    ck_path = out / "checkpoint.json"
    if cfg.resume:
        if not ck_path.is_file():
            raise ConfigError(f"resume requested but {ck_path} does not exist")
        ck = ckpt_io.load_checkpoint(ck_path)
        if ck.config.get("mae") != mcfg.to_dict():
            raise ConfigError("resume checkpoint was written with a different model configuration")
        ckpt_io.restore(model, ck)
        if ck.optimizer is not None:
            ck.optimizer.lr = cfg.optim.lr
            ck.optimizer.weight_decay = cfg.optim.weight_decay
            trainer.opt.state = ck.optimizer
        for name, gen in rngs.items():
            if name in ck.rng:
                set_state(gen, ck.rng[name])
        trainer.step_count = ck.step
        loss_rows = _read_loss_rows(out / "loss.csv", ck.step)
        if ck.step > cfg.optim.steps:
            raise ConfigError(f"checkpoint is at step {ck.step}, beyond optim.steps={cfg.optim.steps}")
    while trainer.step_count < cfg.optim.steps:
        loss = trainer.step()
        loss_rows.append([trainer.step_count, loss])
    _write_loss_csv(out / "loss.csv", ["step", "loss"], loss_rows)
    path = ckpt_io.save_checkpoint(
        out,
        model,
        config={"experiment": cfg.to_dict(), "mae": mcfg.to_dict()},
        rng={k: get_state(g) for k, g in rngs.items()},
        step=trainer.step_count,
        optimizer=trainer.opt.state,
    )
    write_run_manifest(cfg, out, model.num_trainable(), {"steps_completed": trainer.step_count})
    return path


def _read_loss_rows(path: Path, upto: int) -> list[list]:
    if not path.is_file():
        return []
    rows = []
    with path.open(newline="") as fh:
        reader = csv.reader(fh)
        next(reader, None)
        for step, loss in reader:
            if int(step) <= upto:
                rows.append([int(step), float(loss)])
    return rows


# ---------------------------------------------------------------- classify


def run_classify(cfg: ExperimentConfig, workers: int = 1) -> tuple[Path, Path]:
    """Few-shot linear probing; emits report.csv/.md and, for n sweeps, fig4.csv."""
    out = cfg.out_dir
    out.mkdir(parents=True, exist_ok=True)
    mae = load_mae(cfg)
    size = mae.cfg.image_size
    train_index = read_manifest(cfg.path(cfg.data.manifest))
    class_names = train_index.class_names
    if len(class_names) < 2:
        raise DataError("classification needs at least two labelled classes")
    test_index = read_manifest(cfg.path(cfg.data.test_manifest), class_names=class_names)
    test_records = _records(cfg, test_index, size, workers)
    ns = list(cfg.data.sweep) if cfg.data.sweep_kind == "n_per_class" else [cfg.data.n_per_class]
    cache: dict[tuple, SliceRecord] = {}
    rows, fig_rows, loss_rows = [], [], []
    head: LinearHead | None = None
    for n in ns:
        rngs = rng_streams(cfg.run.seed)
        sample = few_shot_sample(train_index, n, rngs["data"])
        missing = [e for e in sample.entries if e.key not in cache]
        if missing:
            for e, r in zip(missing, _records(cfg, sample.subset(missing), size, workers)):
                cache[e.key] = r
        records = [cache[e.key] for e in sample.entries]
        pcfg = ProbeConfig(
            lr=cfg.optim.lr,
            batch_size=cfg.optim.batch_size,
            steps=max(cfg.optim.steps, 1),
            seed=cfg.run.seed,
            n_per_class=n,
            weight_decay=cfg.optim.weight_decay,
            augment=cfg.augment.enabled,
        )
        head, losses = train_linear_probe(records, mae, pcfg, class_names, _policy(cfg), rngs)
        acc = evaluate_accuracy(test_records, mae, head)
        row = {"model": "MAE-linear-probe", "n_per_class": n}
        row.update({name: a for name, a in zip(class_names, acc.per_class)})
        row["overall"] = acc.overall
        row["trainable_params"] = head.num_trainable()
        rows.append(row)
        fig_rows.append({"n_per_class": n, "accuracy": acc.overall})
        loss_rows.extend([n, i + 1, v] for i, v in enumerate(losses))
    _write_loss_csv(out / "loss.csv", ["n_per_class", "step", "loss"], loss_rows)
    paths = emit_report(rows, out, "report", percent=[*class_names, "overall"])
    if cfg.data.sweep_kind == "n_per_class":
        emit_report(fig_rows, out, "fig4", percent=["accuracy"])
    write_run_manifest(cfg, out, head.num_trainable() if head else 0, {"class_names": class_names})
    return paths


# ---------------------------------------------------------------- segment


def stride_subset(index: DatasetIndex, k: int) -> DatasetIndex:
    """Every k-th slice (index 0, k, 2k, ...) along each volume axis."""
    return index.subset(e for e in index.entries if e.index % k == 0)


def first_volumes(index: DatasetIndex, n: int) -> DatasetIndex:
    """Entries of the first ``n`` distinct volumes in manifest order."""
    order: list[str] = []
    for e in index.entries:
        if e.path not in order:
            order.append(e.path)
    if n > len(order):
        raise DataError(f"requested {n} training volumes but the manifest has {len(order)}")
    keep = set(order[:n])
    return index.subset(e for e in index.entries if e.path in keep)


def _seg_class_names(cfg: ExperimentConfig, records: list[SliceRecord]) -> list[str]:
    if cfg.data.region_preset:
        names = preset_class_names(cfg.data.region_preset)
        if cfg.funet.num_classes and cfg.funet.num_classes != len(names):
            raise ConfigError(f"funet.num_classes={cfg.funet.num_classes} conflicts with preset of {len(names)} classes")
        return names
    c = cfg.funet.num_classes or int(max(int(r.seg_mask.max()) for r in records)) + 1
    return ["background"] + [f"class{k}" for k in range(1, max(c, 2))]


def _build_seg_model(cfg: ExperimentConfig, mae: MaeModel, num_classes: int, strategy: str) -> FunetModel | MaeDirect:
    init = stream(cfg.run.seed, "init")
    desk = cfg.run.preset == "desk"
    f = cfg.funet
    if f.architecture == "direct":
        width = f.base_width or (8 if desk else 64)
        return MaeDirect(mae.cfg.enc_dim, width, num_classes, mae.cfg.image_size, init)
    overrides = {"fusion_strategy": strategy, "num_classes": num_classes, "loss_weights": tuple(f.loss_weights)}
    if f.base_width:
        overrides["base_width"] = f.base_width
    if f.fusion_layers:
        overrides["fusion_layers"] = list(f.fusion_layers)
    fcfg = FunetConfig.desk(**overrides) if desk else FunetConfig(**overrides)
    return FunetModel(fcfg, mae.cfg.enc_dim, mae.cfg.enc_layers, init)


def _evaluate_seg(trainer: SegTrainer, records: list[SliceRecord], class_names: list[str], per_slice: bool):
    images = np.stack([r.image for r in records])
    pred = trainer.predict(images)
    gt = np.stack([r.seg_mask for r in records])
    if per_slice:
        return multiclass_report(pred, gt, class_names, per_slice=True)
    volumes: OrderedDict[str, list[int]] = OrderedDict()
    for i, r in enumerate(records):
        volumes.setdefault(r.source[0], []).append(i)
    return volume_report(((pred[idx], gt[idx]) for idx in volumes.values()), class_names)


def run_segment(cfg: ExperimentConfig, workers: int = 1) -> tuple[Path, Path]:
    """Train MAE-FUnet (or MAE-direct) and report IoU/Dice.

    Without a sweep the report lists every region plus the mean row; with a
    stride/sample/fusion sweep it lists one mean row per sweep point, and
    stride/sample sweeps add Mean and STD rows.
    """
    out = cfg.out_dir
    out.mkdir(parents=True, exist_ok=True)
    mae = load_mae(cfg)
    size = mae.cfg.image_size
    train_index = read_manifest(cfg.path(cfg.data.manifest))
    test_index = read_manifest(cfg.path(cfg.data.test_manifest))
    if any(e.mask_path is None for e in train_index.entries + test_index.entries):
        raise DataError("segmentation manifests need a mask_path on every entry")
    all_train = _records(cfg, train_index, size, workers)
    by_key = {e.key: r for e, r in zip(train_index.entries, all_train)}
    test_records = _records(cfg, test_index, size, workers)
    class_names = _seg_class_names(cfg, all_train + test_records)
    kind = cfg.data.sweep_kind if cfg.data.sweep_kind in ("stride", "samples", "fusion") else ""
    points = list(cfg.data.sweep) if kind else [None]
    rows, loss_rows, summary_points = [], [], []
    trainable = 0
    for point in points:
        subset = train_index
        stride = point if kind == "stride" else cfg.data.stride
        n_vol = point if kind == "samples" else cfg.data.n_volumes
        strategy = point if kind == "fusion" else cfg.funet.fusion_strategy
        if n_vol:
            subset = first_volumes(subset, n_vol)
        subset = stride_subset(subset, stride)
        if not subset.entries:
            raise DataError(f"no training slices left at sweep point {point!r}")
        records = [by_key[e.key] for e in subset.entries]
        rngs = rng_streams(cfg.run.seed)
        model = _build_seg_model(cfg, mae, len(class_names), strategy)
        trainable = model.num_trainable()
        trainer = SegTrainer(
            model,
            mae,
            records,
            lr=cfg.optim.lr,
            batch_size=cfg.optim.batch_size,
            weight_decay=cfg.optim.weight_decay,
            loss_weights=LossWeights(*cfg.funet.loss_weights),
            data_rng=rngs["data"],
            augment_rng=rngs["augment"],
            policy=_policy(cfg),
        )
        for step in range(cfg.optim.steps):
            parts = trainer.step()
            loss_rows.append([_point_label(point), step + 1, parts["total"], parts["dice"], parts["focal"], parts["ce"]])
        report = _evaluate_seg(trainer, test_records, class_names, cfg.data.per_slice)
        if not kind:
            for r in report.rows():
                rows.append(
                    {"region": r.name, "iou": r.iou, "dice": r.dice, "empty": r.empty, "trainable_params": trainable}
                )
        else:
            label = {"stride": "stride", "samples": "sample_size", "fusion": "model"}[kind]
            value = f"MAE-FUnet-{point}" if kind == "fusion" else point
            rows.append({label: value, "iou": report.mean.iou, "dice": report.mean.dice, "trainable_params": trainable})
            summary_points.append((point, report.mean.iou, report.mean.dice))
    if kind in ("stride", "samples") and len(summary_points) >= 2:
        label = "stride" if kind == "stride" else "sample_size"
        iou = stability_summary([(p, i) for p, i, _ in summary_points], label)
        dice = stability_summary([(p, d) for p, _, d in summary_points], label)
        rows.append({label: "Mean", "iou": iou.mean, "dice": dice.mean, "trainable_params": trainable})
        rows.append(
            {label: "STD", "iou": fmt_percent(iou.std, 3), "dice": fmt_percent(dice.std, 3), "trainable_params": trainable}
        )
    _write_loss_csv(out / "loss.csv", ["point", "step", "total", "dice", "focal", "ce"], loss_rows)
    paths = emit_report(rows, out, "report", percent=["iou", "dice"])
    write_run_manifest(cfg, out, trainable, {"class_names": class_names})
    return paths


def _point_label(point) -> str:
    return "-" if point is None else str(point)
