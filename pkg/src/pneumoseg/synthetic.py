"""Synthetic fixtures: ellipse-lesion datasets, DICOM sets with known metadata, golden CSVs."""
from __future__ import annotations

from pathlib import Path

import numpy as np
from scipy import ndimage

from . import rle
from .ingest import DicomLite, write_dicom, write_pgm

ANNOTATIONS = "annotations.csv"
IMAGES = "images"


def ellipse_mask(size, cy, cx, ry, rx, theta):
    r, c = np.mgrid[0:size, 0:size].astype(np.float64)
    y, x = r - cy, c - cx
    ct, st = np.cos(theta), np.sin(theta)
    u = (x * ct + y * st) / rx
    v = (-x * st + y * ct) / ry
    return (u * u + v * v <= 1.0).astype(np.uint8)


def blob_image(rng, size=64, min_blobs=1, max_blobs=3):
    """One chest-like frame: smooth background, noise, 1..3 bright ellipses.

    Returns (uint8 image, list of per-ellipse masks).
    """
    r, c = np.mgrid[0:size, 0:size] / size
    gy, gx = rng.uniform(-0.15, 0.15, 2)
    bg = 0.35 + gy * (r - 0.5) + gx * (c - 0.5)
    bg = bg + 0.05 * np.sin(2 * np.pi * (r * rng.uniform(2, 4) + rng.uniform()))
    masks = []
    img = bg.copy()
    for _ in range(int(rng.integers(min_blobs, max_blobs + 1))):
        ry, rx = rng.uniform(size * 0.06, size * 0.18, 2)
        cy, cx = rng.uniform(size * 0.2, size * 0.8, 2)
        m = ellipse_mask(size, cy, cx, ry, rx, rng.uniform(0, np.pi))
        if not m.any():
            continue
        masks.append(m)
        img = np.where(m > 0, img + rng.uniform(0.3, 0.45), img)
    img = ndimage.gaussian_filter(img, 0.6) + rng.normal(0, 0.04, img.shape)
    return np.clip(np.round(img * 255), 0, 255).astype(np.uint8), masks


def make_blob_dataset(n=200, size=64, seed=0, min_blobs=1, max_blobs=3):
    """List of (image_id, image, per-ellipse masks)."""
    rng = np.random.default_rng(seed)
    out = []
    for i in range(n):
        img, masks = blob_image(rng, size, min_blobs, max_blobs)
        out.append((f"blob_{i:04d}", img, masks))
    return out


def write_blob_dataset(out_dir, n=200, size=64, seed=0, min_blobs=1, max_blobs=3):
    """Write images/<id>.pgm plus annotations.csv with one RLE row per ellipse."""
    out = Path(out_dir)
    (out / IMAGES).mkdir(parents=True, exist_ok=True)
    records = []
    for image_id, img, masks in make_blob_dataset(n, size, seed, min_blobs, max_blobs):
        (out / IMAGES / f"{image_id}.pgm").write_bytes(write_pgm(img))
        if not masks:
            records.append(rle.RleRecord.empty(image_id))
        for m in masks:
            records.append(rle.rle_encode(m, image_id))
    rle.write_submission_csv(records, out / ANNOTATIONS)
    return out


# composition of the DICOM metadata fixture: (sex, view, positive, n_annotations, count)
STATS_COMPOSITION = (
    ("F", "AP", True, 1, 1),
    ("F", "PA", True, 2, 1),
    ("F", "PA", False, 0, 2),
    ("M", "AP", True, 1, 1),
    ("M", "AP", False, 0, 2),
    ("M", "PA", True, 3, 1),
    ("M", "PA", False, 0, 2),
)


def write_dicom_dataset(out_dir, size=64, seed=0, composition=STATS_COMPOSITION):
    """Ten (by default) DICOMs with known sex/view/label mix and their annotation CSV."""
    out = Path(out_dir)
    (out / IMAGES).mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(seed)
    records = []
    k = 0
    for sex, view, positive, n_ann, count in composition:
        for _ in range(count):
            uid = f"1.2.276.0.7230010.3.1.4.{seed}.{k}"
            img, masks = blob_image(rng, size, max(n_ann, 1), max(n_ann, 1))
            ds = DicomLite(uid, size, size, 8, sex, view, img)
            (out / IMAGES / f"{uid}.dcm").write_bytes(write_dicom(ds))
            if positive:
                records += [rle.rle_encode(m, uid) for m in masks[:n_ann]]
            else:
                records.append(rle.RleRecord.empty(uid))
            k += 1
    rle.write_submission_csv(records, out / ANNOTATIONS)
    return out


def write_golden_csvs(out_dir, seed=0):
    """A small annotation file with empty rows, multi-annotation ids, odd spacing."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(seed)
    lines = ["ImageId,EncodedPixels"]
    for i in range(6):
        if i % 3 == 0:
            lines.append(f"img{i}, -1")
            continue
        for _ in range(1 + (i % 2)):
            m = (rng.random((16, 16)) > 0.8).astype(np.uint8)
            lines.append(f"img{i}, {rle.rle_encode(m).payload()}")
    (out / "golden_annotations.csv").write_text("\n".join(lines) + "\n")
    return out
