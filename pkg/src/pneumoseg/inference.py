"""Prediction and post-processing: flip TTA, binarization, small-mask removal, submission CSV, scoring."""
from __future__ import annotations

import csv
import io
import logging
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import ndimage

from . import rle
from .ingest import list_images, load_image, preprocess, resize_mask
from .losses import dsc, iou
from .tensor import ShapeError, Tensor

log = logging.getLogger(__name__)

REMOVAL_MODES = ("whole", "components")


@dataclass
class PredictConfig:
    b_th: float = 0.75
    r_th: int = 2048
    tta: bool = True
    removal_mode: str = "whole"
    connectivity: int = 4
    resolution: int = 512
    output_resolution: int = 1024

    def __post_init__(self):
        if not 0 < self.b_th < 1:
            raise ValueError(f"b_th must be in (0, 1), got {self.b_th}")
        if self.r_th < 0:
            raise ValueError(f"r_th must be non-negative, got {self.r_th}")
        if self.removal_mode not in REMOVAL_MODES:
            raise ValueError(f"removal_mode must be one of {REMOVAL_MODES}, got {self.removal_mode!r}")
        if self.connectivity not in (4, 8):
            raise ValueError(f"connectivity must be 4 or 8, got {self.connectivity}")
        if self.resolution <= 0 or self.resolution % 32:
            raise ValueError(f"resolution {self.resolution} must be a positive multiple of 32")
        if self.output_resolution <= 0:
            raise ValueError("output_resolution must be positive")


def _forward(model, x):
    return model(Tensor(x)).data[:, 0]


def predict_proba(model, x: np.ndarray, tta: bool = False) -> np.ndarray:
    """Probability maps (N, H, W) for a preprocessed batch (N, C, H, W).

    With ``tta`` the result is the mean of the plain prediction and the
    un-flipped prediction of the mirrored input.
    """
    x = np.asarray(x)
    if x.ndim == 3:
        x = x[None]
    if x.shape[-1] % 32 or x.shape[-2] % 32:
        raise ShapeError(f"input {x.shape[-2]}x{x.shape[-1]} is not divisible by 32")
    model.eval()
    plain = _forward(model, x)
    if not tta:
        return plain
    mirrored = _forward(model, np.ascontiguousarray(x[..., ::-1]))[..., ::-1]
    return (plain + mirrored) / plain.dtype.type(2)


def binarize(prob: np.ndarray, b_th: float) -> np.ndarray:
    return (np.asarray(prob) > b_th).astype(np.uint8)


def apply_removal_threshold(mask: np.ndarray, r_th: int, mode: str = "whole", connectivity: int = 4) -> np.ndarray:
    """Drop the whole mask (``whole``) or each component (``components``) smaller than ``r_th`` pixels."""
    mask = (np.asarray(mask) > 0).astype(np.uint8)
    if r_th <= 0:
        return mask
    if mode == "whole":
        return mask if np.count_nonzero(mask) >= r_th else np.zeros_like(mask)
    if mode != "components":
        raise ValueError(f"unknown removal mode {mode!r}")
    structure = ndimage.generate_binary_structure(2, 1 if connectivity == 4 else 2)
    labels, n = ndimage.label(mask, structure=structure)
    if n == 0:
        return mask
    sizes = np.bincount(labels.ravel())
    keep = sizes >= r_th
    keep[0] = False
    return keep[labels].astype(np.uint8)


def postprocess(prob, cfg: PredictConfig) -> np.ndarray:
    return apply_removal_threshold(binarize(prob, cfg.b_th), cfg.r_th, cfg.removal_mode, cfg.connectivity)


@dataclass
class SubmissionResult:
    records: list
    failures: list = field(default_factory=list)  # (path, message)
    latencies_ms: list = field(default_factory=list)

    @property
    def ok(self):
        return not self.failures

    def latency_summary(self):
        if not self.latencies_ms:
            return "no samples"
        a = np.asarray(self.latencies_ms)
        return f"{len(a)} samples, mean {a.mean():.1f} ms, median {np.median(a):.1f} ms, max {a.max():.1f} ms"


def predict_to_submission(model, image_paths, cfg: PredictConfig, out_csv=None, channels=None) -> SubmissionResult:
    """Predict each image in order and write one CSV row per image.

    Unreadable inputs are recorded in ``failures`` and skipped.
    """
    channels = channels or _input_channels(model)
    result = SubmissionResult([])
    for path in image_paths:
        try:
            item = load_image(path)
        except (OSError, ValueError) as exc:
            result.failures.append((str(path), str(exc)))
            log.error("cannot read %s: %s", path, exc)
            continue
        t0 = time.perf_counter()
        sample = preprocess(item, None, cfg.resolution, channels)
        prob = predict_proba(model, sample.image[None], tta=cfg.tta)[0]
        mask = postprocess(prob, cfg)
        if cfg.output_resolution != cfg.resolution:
            mask = resize_mask(mask, cfg.output_resolution)
        result.latencies_ms.append((time.perf_counter() - t0) * 1000)
        result.records.append(rle.rle_encode(mask, item.image_id))
    log.info("latency: %s", result.latency_summary())
    if out_csv is not None:
        rle.write_submission_csv(result.records, out_csv)
    return result


def _input_channels(model):
    return model.config.in_channels


@dataclass
class EvaluationReport:
    rows: list  # (image_id, dsc, iou)

    @property
    def mean_dsc(self):
        return float(np.mean([r[1] for r in self.rows])) if self.rows else float("nan")

    @property
    def mean_iou(self):
        return float(np.mean([r[2] for r in self.rows])) if self.rows else float("nan")

    def to_text(self):
        lines = [f"{'image_id':<40}{'DSC':>10}{'IoU':>10}"]
        lines += [f"{i:<40}{d:>10.4f}{j:>10.4f}" for i, d, j in self.rows]
        lines.append(f"{'mean':<40}{self.mean_dsc:>10.4f}{self.mean_iou:>10.4f}")
        return "\n".join(lines) + "\n"

    def to_csv(self):
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["image_id", "dsc", "iou"])
        for i, d, j in self.rows:
            w.writerow([i, f"{d:.6f}", f"{j:.6f}"])
        w.writerow(["mean", f"{self.mean_dsc:.6f}", f"{self.mean_iou:.6f}"])
        return buf.getvalue()


class IdMismatchError(ValueError):
    def __init__(self, only_pred, only_truth):
        self.only_pred, self.only_truth = sorted(only_pred), sorted(only_truth)
        parts = []
        if self.only_pred:
            parts.append(f"only in predictions: {', '.join(self.only_pred[:20])}")
        if self.only_truth:
            parts.append(f"only in truth: {', '.join(self.only_truth[:20])}")
        super().__init__("image id sets differ; " + "; ".join(parts))


def evaluate_records(pred_records, truth_records, height=1024, width=1024) -> EvaluationReport:
    """Per-image DSC/IoU after unioning multiple rows per image id."""
    pred = rle.group_by_image(pred_records)
    truth = rle.group_by_image(truth_records)
    if pred.keys() != truth.keys():
        raise IdMismatchError(set(pred) - set(truth), set(truth) - set(pred))
    rows = []
    for image_id in truth:
        p = rle.union_masks(pred[image_id], height, width)
        t = rle.union_masks(truth[image_id], height, width)
        rows.append((image_id, dsc(p, t), iou(p, t)))
    return EvaluationReport(rows)


def evaluate(pred_csv, truth_csv, height=1024, width=1024) -> EvaluationReport:
    return evaluate_records(rle.parse_annotation_csv(pred_csv), rle.parse_annotation_csv(truth_csv), height, width)


def list_inputs(directory) -> list[Path]:
    return list_images(directory)
