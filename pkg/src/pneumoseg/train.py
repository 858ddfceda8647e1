"""Two-stage training: Adam, cosine annealing or plateau schedule, SWA, presets.

Stage 1 trains from initialization at the low resolution. Stage 2 loads the
stage-1 weights (SWA-averaged when SWA is on), restarts the learning-rate
schedule at ``lr_max`` with a fresh optimizer, and trains at the higher
resolution.
"""
from __future__ import annotations

import csv
import dataclasses
import json
import logging
import math
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import yaml

from . import rle
from .augment import AugmentParams, AugmentPipeline
from .ingest import DicomLite, list_images, load_image, preprocess, to_uint8
from .inference import binarize, apply_removal_threshold, predict_proba
from .losses import bce_dice, dsc, iou
from .model import ModelConfig, ResNet34UNet, build, load_state_dict, read_tensors, save_checkpoint, state_dict
from .synthetic import ANNOTATIONS, IMAGES
from .tensor import Tape, Tensor

log = logging.getLogger(__name__)

METRIC_COLUMNS = ("epoch", "stage", "lr", "train_loss", "val_loss", "val_iou")


class ConfigError(ValueError):
    pass


class TrainingDiverged(RuntimeError):
    def __init__(self, message, last_good=None):
        super().__init__(message if last_good is None else f"{message}; last good checkpoint: {last_good}")
        self.last_good = last_good


# -- schedules ---------------------------------------------------------------

def cosine_lr(epoch: int, total: int, lr_max: float, lr_min: float) -> float:
    """Per-epoch cosine annealing from lr_max (epoch 0) to lr_min (epoch total-1)."""
    if total < 2:
        raise ValueError(f"cosine annealing needs at least 2 epochs, got {total}")
    if not 0 <= epoch < total:
        raise ValueError(f"epoch {epoch} outside [0, {total})")
    if epoch == 0:
        return lr_max
    if epoch == total - 1:
        return lr_min
    return lr_min + 0.5 * (lr_max - lr_min) * (1 + math.cos(math.pi * epoch / (total - 1)))


@dataclass
class PlateauState:
    lr: float
    factor: float = 0.2
    patience: int = 5
    best: float = math.inf
    wait: int = 0


def plateau_lr(history, state: PlateauState) -> float:
    """Fold new validation losses into ``state``; return the current rate.

    The rate drops by ``factor`` once ``patience`` consecutive epochs fail to
    set a new minimum; the wait counter then restarts.
    """
    for loss in history:
        if loss < state.best:
            state.best = loss
            state.wait = 0
        else:
            state.wait += 1
            if state.wait >= state.patience:
                state.lr *= state.factor
                state.wait = 0
    return state.lr


# -- optimizer / averaging ---------------------------------------------------

@dataclass
class AdamState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    t: int = 0


def adam_step(params: dict, grads: dict, state: AdamState, lr: float | None = None):
    """Bias-corrected Adam update of ``params`` (name -> array) in place."""
    bad = [k for k, g in grads.items() if g is not None and not np.all(np.isfinite(g))]
    if bad:
        raise FloatingPointError(f"non-finite gradient in {len(bad)} tensor(s): {', '.join(bad[:10])}")
    lr = state.lr if lr is None else lr
    state.t += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1 - b1 ** state.t
    c2 = 1 - b2 ** state.t
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            continue
        if g.shape != p.shape:
            raise ValueError(f"gradient shape {g.shape} != parameter shape {p.shape} for {name}")
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(p)
            state.v[name] = np.zeros_like(p)
        v = state.v[name]
        m *= b1
        m += (1 - b1) * g
        v *= b2
        v += (1 - b2) * g * g
        p -= (lr * (m / c1) / (np.sqrt(v / c2) + state.eps)).astype(p.dtype)
    return params


class SwaAccumulator:
    """Running arithmetic mean of weight snapshots."""

    def __init__(self):
        self.mean: dict[str, np.ndarray] = {}
        self.n = 0

    def update(self, snapshot: dict):
        self.n += 1
        if self.n == 1:
            self.mean = {k: np.array(v, dtype=np.float64) for k, v in snapshot.items()}
            return self
        if snapshot.keys() != self.mean.keys():
            raise ValueError("snapshot tensor names differ from earlier snapshots")
        for k, v in snapshot.items():
            if v.shape != self.mean[k].shape:
                raise ValueError(f"snapshot shape {v.shape} != {self.mean[k].shape} for {k}")
            self.mean[k] += (np.asarray(v, dtype=np.float64) - self.mean[k]) / self.n
        return self

    def average(self) -> dict:
        if self.n == 0:
            raise ValueError("no SWA snapshots collected")
        return self.mean


def swa_update(acc: SwaAccumulator, snapshot) -> SwaAccumulator:
    return acc.update(snapshot)


def update_bn(model: ResNet34UNet, batches):
    """Re-estimate BN running statistics with one Train-mode pass, weights frozen."""
    states = model.batchnorms()
    saved = [s.momentum for s in states]
    for s in states:
        s.reset_running_stats()
        s.momentum = None
    model.train()
    for xb in batches:
        model(Tensor(xb))
    for s, m in zip(states, saved):
        s.momentum = m
    model.eval()


def swa_finalize(acc: SwaAccumulator, model: ResNet34UNet, train_batches) -> ResNet34UNet:
    avg = acc.average()
    for name, t in model.named_parameters().items():
        t.data[...] = avg[name].astype(t.dtype)
    update_bn(model, train_batches)
    return model


# -- configuration -----------------------------------------------------------

@dataclass
class StageConfig:
    resolution: int = 256
    batch_size: int = 16
    epochs: int = 10
    swa_last_k: int = 0

    def validate(self, swa: bool):
        if self.resolution <= 0 or self.resolution % 32:
            raise ConfigError(f"stage resolution {self.resolution} must be a positive multiple of 32")
        if self.batch_size < 1 or self.epochs < 1:
            raise ConfigError("batch_size and epochs must be positive")
        if swa and not 1 <= self.swa_last_k <= self.epochs:
            raise ConfigError(f"with SWA on, swa_last_k must be in [1, epochs={self.epochs}], got {self.swa_last_k}")


@dataclass
class SchedulerConfig:
    kind: str = "cosine"  # cosine | plateau
    lr_max: float = 1e-3
    lr_min: float = 1e-6
    factor: float = 0.2
    patience: int = 5


@dataclass
class ExperimentConfig:
    name: str = "custom"
    stages: list = field(default_factory=lambda: [StageConfig()])
    swa: bool = True
    b_th: float = 0.5
    r_th: int = 2048
    channels: int = 3
    val_fraction: float = 0.1
    seed: int = 0
    width_multiplier: float = 1.0
    stage2_init: str = "swa"  # swa | raw
    encoder1_projection: bool = False
    augment: AugmentParams = field(default_factory=AugmentParams)
    scheduler: SchedulerConfig = field(default_factory=SchedulerConfig)

    def validate(self):
        if not 1 <= len(self.stages) <= 2:
            raise ConfigError(f"an experiment has 1 or 2 stages, got {len(self.stages)}")
        for s in self.stages:
            s.validate(self.swa)
            if self.scheduler.kind == "cosine" and s.epochs < 2:
                raise ConfigError("cosine annealing needs at least 2 epochs per stage")
        if self.channels not in (1, 3):
            raise ConfigError(f"channels must be 1 or 3, got {self.channels}")
        if not 0 < self.b_th < 1:
            raise ConfigError(f"b_th must be in (0, 1), got {self.b_th}")
        if self.r_th < 0:
            raise ConfigError(f"r_th must be non-negative, got {self.r_th}")
        if not 0 <= self.val_fraction < 1:
            raise ConfigError(f"val_fraction must be in [0, 1), got {self.val_fraction}")
        if self.scheduler.kind not in ("cosine", "plateau"):
            raise ConfigError(f"scheduler kind must be cosine or plateau, got {self.scheduler.kind!r}")
        if self.stage2_init not in ("swa", "raw"):
            raise ConfigError(f"stage2_init must be swa or raw, got {self.stage2_init!r}")
        ModelConfig(**self.model_kwargs())
        return self

    def model_kwargs(self):
        return {"in_channels": self.channels, "width_multiplier": self.width_multiplier,
                "include_channel_adapter": self.channels == 1, "encoder1_projection": self.encoder1_projection}

    def to_dict(self):
        d = dataclasses.asdict(self)
        d["augment"]["gamma_range"] = list(self.augment.gamma_range)
        return d

    def to_yaml(self):
        return yaml.safe_dump(self.to_dict(), sort_keys=False)


def _build(cls, data, path):
    if not isinstance(data, dict):
        raise ConfigError(f"{path or 'config'}: expected a mapping, got {type(data).__name__}")
    known = {f.name for f in dataclasses.fields(cls)}
    unknown = sorted(set(data) - known)
    if unknown:
        raise ConfigError("invalid config keys: " + ", ".join(f"{path}{k}" for k in unknown))
    return cls(**data)


def config_from_dict(data: dict) -> ExperimentConfig:
    data = dict(data)
    problems = []
    for key, cls in (("augment", AugmentParams), ("scheduler", SchedulerConfig)):
        if key in data:
            try:
                data[key] = _build(cls, data[key], f"{key}.")
            except ConfigError as exc:
                problems.append(str(exc))
    if "stages" in data:
        stages = []
        for i, s in enumerate(data["stages"] or []):
            try:
                stages.append(_build(StageConfig, s, f"stages[{i}]."))
            except ConfigError as exc:
                problems.append(str(exc))
        data["stages"] = stages
    try:
        cfg = _build(ExperimentConfig, data, "")
    except ConfigError as exc:
        problems.append(str(exc))
        cfg = None
    if problems:
        raise ConfigError("; ".join(problems))
    return cfg.validate()


def load_config(path) -> ExperimentConfig:
    with open(path) as fh:
        return config_from_dict(yaml.safe_load(fh) or {})


def _exp(name, swa, b_th, channels, s1, s2=None, scheduler="cosine", val_fraction=0.1):
    stages = [StageConfig(256, s1[0], s1[1], 5 if swa else 0)]
    if s2:
        stages.append(StageConfig(512, s2[0], s2[1], 3 if swa else 0))
    return ExperimentConfig(name=name, stages=stages, swa=swa, b_th=b_th, r_th=2048, channels=channels,
                            val_fraction=val_fraction, scheduler=SchedulerConfig(kind=scheduler))


PRESETS = {
    "exp1": lambda: _exp("exp1", False, 0.5, 1, (40, 50), scheduler="plateau", val_fraction=0.2),
    "exp2": lambda: _exp("exp2", True, 0.55, 3, (40, 35)),
    "exp3": lambda: _exp("exp3", True, 0.55, 3, (40, 35), (14, 10)),
    "exp4": lambda: _exp("exp4", True, 0.75, 3, (40, 60), (14, 29)),
    "exp5": lambda: _exp("exp5", True, 0.75, 3, (64, 100), (16, 70)),
}


def preset(name: str) -> ExperimentConfig:
    try:
        return PRESETS[name]().validate()
    except KeyError:
        raise ConfigError(f"unknown preset {name!r}; choose from {', '.join(PRESETS)}") from None


DESK_RESOLUTIONS = (64, 128)
DESK_EPOCHS = (5, 3)
DESK_BATCH = (4, 4)


def desk_scale(cfg: ExperimentConfig) -> ExperimentConfig:
    """Shrink a preset for CPU runs: width 0.25, 64/128 px, 5+3 epochs."""
    cfg = dataclasses.replace(cfg, width_multiplier=0.25, stages=[
        StageConfig(DESK_RESOLUTIONS[i], min(s.batch_size, DESK_BATCH[i]), DESK_EPOCHS[i],
                    min(s.swa_last_k, DESK_EPOCHS[i]))
        for i, s in enumerate(cfg.stages)
    ])
    return cfg.validate()


# -- data --------------------------------------------------------------------

@dataclass
class Dataset:
    ids: list
    images: list  # uint8 H x W (native resolution)
    masks: list  # uint8 {0,1} H x W
    meta: list = field(default_factory=list)

    def __len__(self):
        return len(self.ids)

    def subset(self, idx):
        return Dataset([self.ids[i] for i in idx], [self.images[i] for i in idx], [self.masks[i] for i in idx],
                       [self.meta[i] for i in idx] if self.meta else [])


def load_dataset(data_dir, labels=None) -> Dataset:
    """Images from ``<data>/images`` (or ``<data>``) and masks from the annotation CSV."""
    data_dir = Path(data_dir)
    if not data_dir.is_dir():
        raise FileNotFoundError(f"data directory {data_dir} does not exist")
    img_dir = data_dir / IMAGES if (data_dir / IMAGES).is_dir() else data_dir
    labels = Path(labels) if labels else data_dir / ANNOTATIONS
    groups = rle.group_by_image(rle.parse_annotation_csv(labels)) if labels.exists() else {}
    ds = Dataset([], [], [], [])
    for path in list_images(img_dir):
        item = load_image(path)
        px = to_uint8(item)
        h, w = px.shape
        mask = rle.union_masks(groups.get(item.image_id, []), h, w) if item.image_id in groups \
            else np.zeros((h, w), np.uint8)
        ds.ids.append(item.image_id)
        ds.images.append(px)
        ds.masks.append(mask)
        ds.meta.append(item)
    if not ds.ids:
        raise FileNotFoundError(f"no .dcm or .pgm images under {img_dir}")
    return ds


def split_indices(ds: Dataset, val_fraction: float, seed: int):
    """Stratified (positive / negative) deterministic train/val split."""
    rng = np.random.default_rng([seed, 7919])
    positive = np.array([m.any() for m in ds.masks])
    train, val = [], []
    for flag in (True, False):
        idx = np.flatnonzero(positive == flag)
        idx = idx[rng.permutation(len(idx))]
        k = int(round(val_fraction * len(idx)))
        val += idx[:k].tolist()
        train += idx[k:].tolist()
    return sorted(train), sorted(val)


def prepare(ds: Dataset, resolution: int, channels: int):
    """Resize and normalize every sample once per stage."""
    samples = []
    for i in range(len(ds)):
        item = DicomLite(ds.ids[i], *ds.images[i].shape, 8, pixel_data=ds.images[i])
        samples.append(preprocess(item, ds.masks[i], resolution, channels))
    return samples


def _stack(samples):
    x = np.stack([s.image for s in samples]).astype(np.float32)
    y = np.stack([s.mask for s in samples])[:, None].astype(np.float32)
    return x, y


def _batches(n, batch_size, order=None):
    order = np.arange(n) if order is None else order
    for k in range(0, n, batch_size):
        chunk = order[k:k + batch_size]
        if len(chunk) >= 2 or n == 1:
            yield chunk


# -- training ----------------------------------------------------------------

@dataclass
class StageResult:
    stage: int
    history: list
    best_checkpoint: Path | None
    final_checkpoint: Path | None
    final_state: dict
    val: dict


def _params(model):
    return model.named_parameters()


def evaluate_samples(model, samples, b_th=0.5, r_th=0, removal_mode="whole", tta=False, batch_size=16):
    """Loss, mean IoU and mean DSC of binarized predictions on prepared samples."""
    if not samples:
        return {"val_loss": float("nan"), "val_iou": float("nan"), "val_dsc": float("nan")}
    model.eval()
    total_loss, ious, dscs = 0.0, [], []
    for chunk in _batches(len(samples), batch_size):
        x, y = _stack([samples[i] for i in chunk])
        prob = predict_proba(model, x, tta=tta)
        total_loss += float(bce_dice(Tensor(prob[:, None]), y).data) * len(chunk)
        for p, t in zip(prob, y[:, 0]):
            m = apply_removal_threshold(binarize(p, b_th), r_th, removal_mode)
            ious.append(iou(m, t))
            dscs.append(dsc(m, t))
    return {"val_loss": total_loss / len(samples), "val_iou": float(np.mean(ious)), "val_dsc": float(np.mean(dscs))}


def train_stage(model: ResNet34UNet, stage: StageConfig, train_samples, val_samples, cfg: ExperimentConfig,
                stage_index=0, out_dir=None, metrics_writer=None, progress=None) -> StageResult:
    """Train one stage; returns history and checkpoint paths.

    Each epoch: seeded shuffle, per-sample augmentation, forward, BCE-Dice,
    backward, Adam. Validation loss / IoU after each epoch; SWA snapshots at
    the end of each of the last ``swa_last_k`` epochs.
    """
    out = Path(out_dir) / f"stage{stage_index + 1}" if out_dir else None
    if out:
        out.mkdir(parents=True, exist_ok=True)
    sched = cfg.scheduler
    plateau = PlateauState(sched.lr_max, sched.factor, sched.patience) if sched.kind == "plateau" else None
    adam = AdamState(lr=sched.lr_max)
    pipeline = AugmentPipeline(cfg.augment, base_seed=cfg.seed * 1000 + stage_index)
    use_swa = cfg.swa and stage.swa_last_k > 0
    swa = SwaAccumulator()
    history = []
    best_loss, best_path, last_good = math.inf, None, None
    params = _params(model)
    for epoch in range(stage.epochs):
        t0 = time.perf_counter()
        lr = cosine_lr(epoch, stage.epochs, sched.lr_max, sched.lr_min) if plateau is None else plateau.lr
        rng = np.random.default_rng([cfg.seed, stage_index, epoch])
        order = rng.permutation(len(train_samples))
        model.train()
        losses, seen = 0.0, 0
        for chunk in _batches(len(train_samples), stage.batch_size, order):
            batch = [pipeline(train_samples[i], int(i), epoch) for i in chunk]
            x, y = _stack(batch)
            for t in params.values():
                t.grad = None
            with Tape() as tape:
                loss = bce_dice(model(Tensor(x)), y)
                value = float(loss.data)
                if not math.isfinite(value):
                    raise TrainingDiverged(f"stage {stage_index + 1} epoch {epoch}: loss is {value}", last_good)
                tape.backward(loss)
            adam_step({k: t.data for k, t in params.items()}, {k: t.grad for k, t in params.items()}, adam, lr)
            losses += value * len(chunk)
            seen += len(chunk)
        row = {"epoch": epoch, "stage": stage_index + 1, "lr": lr, "train_loss": losses / max(seen, 1)}
        row.update(evaluate_samples(model, val_samples, b_th=cfg.b_th, batch_size=stage.batch_size))
        row["seconds"] = time.perf_counter() - t0
        history.append(row)
        if metrics_writer:
            metrics_writer(row)
        if progress:
            progress(row)
        if out:
            last_good = out / "last.nts"
            save_checkpoint(model, last_good)
            if val_samples and row["val_loss"] < best_loss:
                best_loss = row["val_loss"]
                best_path = out / "best.nts"
                save_checkpoint(model, best_path)
        if use_swa and epoch >= stage.epochs - stage.swa_last_k:
            swa.update({k: t.data for k, t in params.items()})
        if plateau is not None and val_samples:
            plateau_lr([row["val_loss"]], plateau)
    raw_state = {k: v.copy() for k, v in state_dict(model).items()}
    if use_swa:
        bn_batches = (_stack([train_samples[i] for i in chunk])[0]
                      for chunk in _batches(len(train_samples), stage.batch_size))
        if out:
            save_checkpoint(model, out / "raw_final.nts")
        swa_finalize(swa, model, bn_batches)
    final_path = None
    if out:
        final_path = out / "final.nts"
        save_checkpoint(model, final_path)
    val = evaluate_samples(model, val_samples, b_th=cfg.b_th, batch_size=stage.batch_size)
    return StageResult(stage_index + 1, history, best_path, final_path, raw_state, val)


class MetricsCsv:
    def __init__(self, path):
        self.path = Path(path)
        with open(self.path, "w", newline="") as fh:
            csv.writer(fh, lineterminator="\n").writerow(METRIC_COLUMNS)

    def __call__(self, row):
        with open(self.path, "a", newline="") as fh:
            csv.writer(fh, lineterminator="\n").writerow([
                row["epoch"], row["stage"], f"{row['lr']:.8g}", f"{row['train_loss']:.8f}",
                f"{row['val_loss']:.8f}", f"{row['val_iou']:.8f}",
            ])


@dataclass
class ExperimentResult:
    config: ExperimentConfig
    model: ResNet34UNet
    stages: list
    out_dir: Path | None
    val_samples: list


def run_experiment(cfg: ExperimentConfig, data, out_dir=None, stage1_checkpoint=None, progress=None) -> ExperimentResult:
    """Run every stage of ``cfg`` on ``data`` (a Dataset or directory).

    With ``stage1_checkpoint`` the first stage is skipped and its weights are
    loaded from that file (stage-2-only resume).
    """
    cfg.validate()
    ds = data if isinstance(data, Dataset) else load_dataset(data)
    if stage1_checkpoint is not None and not Path(stage1_checkpoint).exists():
        raise FileNotFoundError(f"stage-1 checkpoint {stage1_checkpoint} not found")
    if stage1_checkpoint is not None and len(cfg.stages) < 2:
        raise ConfigError("a stage-1 checkpoint only makes sense for a 2-stage experiment")
    out = Path(out_dir) if out_dir else None
    writer = None
    if out:
        out.mkdir(parents=True, exist_ok=True)
        (out / "resolved_config.yaml").write_text(cfg.to_yaml())
        writer = MetricsCsv(out / "metrics.csv")
    train_idx, val_idx = split_indices(ds, cfg.val_fraction, cfg.seed)
    model = build(ModelConfig(**cfg.model_kwargs()), seed=cfg.seed)
    results = []
    val_samples = []
    for si, stage in enumerate(cfg.stages):
        if si == 0 and stage1_checkpoint is not None:
            load_state_dict(model, read_tensors(stage1_checkpoint))
            continue
        if si == 1 and results and cfg.stage2_init == "raw":
            load_state_dict(model, results[-1].final_state)
        train_samples = prepare(ds.subset(train_idx), stage.resolution, cfg.channels)
        val_samples = prepare(ds.subset(val_idx), stage.resolution, cfg.channels)
        log.info("stage %d: %d train / %d val at %dpx", si + 1, len(train_samples), len(val_samples), stage.resolution)
        results.append(train_stage(model, stage, train_samples, val_samples, cfg, si, out, writer, progress))
    if out:
        summary = {"name": cfg.name, "stages": [
            {"stage": r.stage, "final_val": r.val, "best_checkpoint": str(r.best_checkpoint) if r.best_checkpoint else None,
             "final_checkpoint": str(r.final_checkpoint) if r.final_checkpoint else None}
            for r in results]}
        (out / "summary.json").write_text(json.dumps(summary, indent=2))
    return ExperimentResult(cfg, model, results, out, val_samples)
