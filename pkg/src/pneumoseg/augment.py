"""Seed-deterministic joint image/mask augmentation.

Four groups, applied in order, each with its own probability:

    A1  horizontal flip
    A2  one of random contrast, random gamma, random brightness (image only)
    A3  one of elastic transform, grid distortion, optical distortion
    A4  random sized crop

Randomness for a sample is drawn from a Philox stream keyed by
``(base_seed, epoch, sample_index)``, so results do not depend on loading
order or worker count.
"""
from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np
from scipy import ndimage

from .ingest import Sample, resize_image, resize_mask

GROUPS = ("A1", "A2", "A3", "A4")
PHOTOMETRIC = ("contrast", "gamma", "brightness")
DISTORTIONS = ("elastic", "grid", "optical")


@dataclass
class AugmentParams:
    groups: list = field(default_factory=lambda: list(GROUPS))
    p_flip: float = 0.5
    p_photometric: float = 0.5
    p_distort: float = 0.5
    p_crop: float = 0.5
    contrast_limit: float = 0.2
    brightness_limit: float = 0.2
    gamma_range: tuple = (0.8, 1.2)
    elastic_alpha: float = 34.0
    elastic_sigma: float = 4.0
    reference_resolution: int = 256
    grid_steps: int = 5
    grid_limit: float = 0.3
    optical_distort_limit: float = 0.25
    optical_shift_limit: float = 0.05
    crop_min_scale: float = 0.8

    def __post_init__(self):
        self.gamma_range = tuple(self.gamma_range)
        self.groups = list(self.groups)
        unknown = set(self.groups) - set(GROUPS)
        if unknown:
            raise ValueError(f"unknown augmentation groups {sorted(unknown)}; valid: {GROUPS}")
        for name in ("p_flip", "p_photometric", "p_distort", "p_crop"):
            p = getattr(self, name)
            if not 0 <= p <= 1:
                raise ValueError(f"{name}={p} outside [0, 1]")
        checks = [
            (0 <= self.contrast_limit < 1, "contrast_limit in [0, 1)"),
            (0 <= self.brightness_limit <= 1, "brightness_limit in [0, 1]"),
            (0 < self.gamma_range[0] <= self.gamma_range[1], "0 < gamma_range[0] <= gamma_range[1]"),
            (self.elastic_alpha >= 0 and self.elastic_sigma > 0, "elastic_alpha >= 0, elastic_sigma > 0"),
            (self.grid_steps >= 1 and 0 <= self.grid_limit < 1, "grid_steps >= 1, grid_limit in [0, 1)"),
            (0 <= self.optical_distort_limit < 1, "optical_distort_limit in [0, 1)"),
            (0 <= self.optical_shift_limit < 0.5, "optical_shift_limit in [0, 0.5)"),
            (0 < self.crop_min_scale <= 1, "crop_min_scale in (0, 1]"),
        ]
        for ok, msg in checks:
            if not ok:
                raise ValueError(f"invalid augmentation parameters: need {msg}")

    def only(self, *groups):
        """Copy with just the named groups enabled (ablation runs)."""
        return replace(self, groups=list(groups))

    def disabled(self):
        return replace(self, groups=[])


def sample_rng(base_seed: int, epoch: int, index: int) -> np.random.Generator:
    seq = np.random.SeedSequence([int(base_seed) & 0xFFFFFFFFFFFFFFFF, int(epoch), int(index)])
    return np.random.Generator(np.random.Philox(seq))


def _with(sample, image=None, mask=None):
    return Sample(image=sample.image if image is None else image,
                  mask=sample.mask if mask is None else mask, id=sample.id)


def horizontal_flip(sample: Sample) -> Sample:
    return _with(sample, np.ascontiguousarray(sample.image[..., ::-1]), np.ascontiguousarray(sample.mask[..., ::-1]))


def contrast(image, factor):
    mean = image.mean(axis=(-2, -1), keepdims=True)
    return np.clip((image - mean) * factor + mean, 0, 1).astype(np.float32)


def gamma(image, g):
    return np.clip(np.power(np.clip(image, 0, 1), g), 0, 1).astype(np.float32)


def brightness(image, delta):
    return np.clip(image + delta, 0, 1).astype(np.float32)


def photometric(sample: Sample, which: str, rng, params: AugmentParams | None = None) -> Sample:
    params = params or AugmentParams()
    if which == "contrast":
        img = contrast(sample.image, 1 + rng.uniform(-params.contrast_limit, params.contrast_limit))
    elif which == "gamma":
        img = gamma(sample.image, rng.uniform(*params.gamma_range))
    elif which == "brightness":
        img = brightness(sample.image, rng.uniform(-params.brightness_limit, params.brightness_limit))
    else:
        raise ValueError(f"unknown photometric transform {which!r}")
    return _with(sample, image=img)


def warp(sample: Sample, rows: np.ndarray, cols: np.ndarray) -> Sample:
    """Resample through a backward map: output (r, c) reads input (rows[r,c], cols[r,c]).

    Image bilinear, mask nearest, reflection outside the frame.
    """
    coords = np.stack([rows, cols])
    img = np.stack([
        ndimage.map_coordinates(ch.astype(np.float64), coords, order=1, mode="mirror") for ch in sample.image
    ]).astype(np.float32)
    mask = ndimage.map_coordinates(sample.mask, coords, order=0, mode="mirror").astype(np.uint8)
    return _with(sample, np.clip(img, 0, 1), mask)


def elastic_field(shape, alpha, sigma, rng):
    h, w = shape
    dy = ndimage.gaussian_filter(rng.uniform(-1, 1, shape), sigma, mode="constant") * alpha
    dx = ndimage.gaussian_filter(rng.uniform(-1, 1, shape), sigma, mode="constant") * alpha
    r, c = np.meshgrid(np.arange(h, dtype=np.float64), np.arange(w, dtype=np.float64), indexing="ij")
    return r + dy, c + dx


def _grid_axis(n, steps, limit, rng):
    # step boundaries jittered by (1 + U(-limit, limit)), then piecewise-linear map
    step = n / steps
    knots_out = np.arange(steps + 1) * step
    widths = step * (1 + rng.uniform(-limit, limit, steps))
    knots_in = np.concatenate([[0], np.cumsum(widths)])
    knots_in *= n / knots_in[-1]
    return np.interp(np.arange(n, dtype=np.float64), knots_out, knots_in)


def grid_field(shape, steps, limit, rng):
    h, w = shape
    rmap = _grid_axis(h, steps, limit, rng)
    cmap = _grid_axis(w, steps, limit, rng)
    return np.broadcast_to(rmap[:, None], shape).copy(), np.broadcast_to(cmap[None, :], shape).copy()


def optical_field(shape, k, dx=0.0, dy=0.0):
    """Radial barrel (k > 0 reads further out) / pincushion map around a shifted center."""
    h, w = shape
    cy = (h - 1) / 2 + dy * h
    cx = (w - 1) / 2 + dx * w
    r, c = np.meshgrid(np.arange(h, dtype=np.float64), np.arange(w, dtype=np.float64), indexing="ij")
    ny, nx = (r - cy) / (h / 2), (c - cx) / (w / 2)
    factor = 1 + k * (ny * ny + nx * nx)
    return cy + ny * factor * (h / 2), cx + nx * factor * (w / 2)


def geometric_distort(sample: Sample, which: str, rng, params: AugmentParams | None = None) -> Sample:
    params = params or AugmentParams()
    shape = sample.mask.shape
    if which == "elastic":
        scale = shape[0] / params.reference_resolution
        rows, cols = elastic_field(shape, params.elastic_alpha * scale, params.elastic_sigma * scale, rng)
    elif which == "grid":
        rows, cols = grid_field(shape, params.grid_steps, params.grid_limit, rng)
    elif which == "optical":
        k = rng.uniform(-params.optical_distort_limit, params.optical_distort_limit)
        sy, sx = rng.uniform(-params.optical_shift_limit, params.optical_shift_limit, 2)
        rows, cols = optical_field(shape, k, dx=sx, dy=sy)
    else:
        raise ValueError(f"unknown distortion {which!r}")
    return warp(sample, rows, cols)


def crop_box(size, rng, min_scale):
    side = int(round(rng.uniform(min_scale, 1.0) * size))
    side = min(max(side, 1), size)
    top = int(rng.integers(0, size - side + 1))
    left = int(rng.integers(0, size - side + 1))
    return top, left, side


def crop_resize(sample: Sample, top, left, side) -> Sample:
    s = sample.mask.shape[0]
    img = sample.image[:, top:top + side, left:left + side]
    msk = sample.mask[top:top + side, left:left + side]
    if side == s:
        return _with(sample, img.copy(), msk.copy())
    return _with(sample, np.clip(resize_image(img, s), 0, 1), resize_mask(msk, s))


def random_sized_crop(sample: Sample, rng, params: AugmentParams | None = None) -> Sample:
    params = params or AugmentParams()
    return crop_resize(sample, *crop_box(sample.mask.shape[0], rng, params.crop_min_scale))


@dataclass
class AugmentPipeline:
    params: AugmentParams = field(default_factory=AugmentParams)
    base_seed: int = 0

    def __call__(self, sample, sample_index, epoch=0):
        return apply(self, sample, sample_index, epoch)


def apply(pipeline: AugmentPipeline, sample: Sample, sample_index: int, epoch: int = 0) -> Sample:
    """Run the enabled groups on one sample with its (seed, epoch, index) stream.

    Every group consumes its draws whether or not it is enabled, so toggling
    one group leaves the randomness of the others unchanged.
    """
    p = pipeline.params
    rng = sample_rng(pipeline.base_seed, epoch, sample_index)
    on = set(p.groups)
    u = rng.random(4)
    pick_photo = int(rng.integers(len(PHOTOMETRIC)))
    pick_dist = int(rng.integers(len(DISTORTIONS)))
    sub = [np.random.Generator(np.random.Philox(int(s))) for s in rng.integers(0, 2**63, size=3)]
    if "A1" in on and u[0] < p.p_flip:
        sample = horizontal_flip(sample)
    if "A2" in on and u[1] < p.p_photometric:
        sample = photometric(sample, PHOTOMETRIC[pick_photo], sub[0], p)
    if "A3" in on and u[2] < p.p_distort:
        sample = geometric_distort(sample, DISTORTIONS[pick_dist], sub[1], p)
    if "A4" in on and u[3] < p.p_crop:
        sample = random_sized_crop(sample, sub[2], p)
    return sample
