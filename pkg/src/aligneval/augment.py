"""Seeded image augmentation: brightness shift, grid distortion, random crop.

A small seeded subset of the train split is augmented (one transform per
selected sample) and re-listed as extra train samples whose image refs point
at the written "-aug" PNG files. Every random draw comes from explicit seeds,
with per-sample seeds derived as seed XOR stable_hash(sample_id) so the
processing order (or any parallelism) cannot change the result.
"""

from __future__ import annotations

import math
import posixpath
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
from PIL import Image

from .codec import round_half_away_from_zero
from .dataset import DatasetSplit, SamplePair
from .util import derive_seed

KIND_BRIGHTNESS = "brightness"
KIND_GRID = "grid"
KIND_CROP = "crop"

# Sampling ranges used when augment_subset draws a transform parameter.
PARAMETER_RANGES = {
    KIND_BRIGHTNESS: (0.1, 0.5),
    KIND_GRID: (0.2, 0.8),
    KIND_CROP: (0.1, 0.5),
}

DEFAULT_GRID_CELLS = 4
DEFAULT_FRACTION = 0.10

AUG_SUFFIX = "-aug"


class AugmentError(ValueError):
    """Raised for out-of-range parameters or undersized images."""


@dataclass(frozen=True)
class AugmentationSpec:
    """A fully determined transform: kind, strength, and its own seed."""

    kind: str
    parameter: float
    seed: int
    grid_cells: int = DEFAULT_GRID_CELLS

    def __post_init__(self) -> None:
        if self.kind not in PARAMETER_RANGES:
            raise AugmentError(f"unknown augmentation kind {self.kind!r}")
        lo, hi = PARAMETER_RANGES[self.kind]
        # parameter 0 is allowed so identity behaviour stays testable
        if self.parameter != 0.0 and not lo <= self.parameter <= hi:
            raise AugmentError(
                f"{self.kind} parameter {self.parameter} outside [{lo}, {hi}]"
            )
        if self.grid_cells < 2:
            raise AugmentError(f"grid_cells {self.grid_cells} must be >= 2")


@dataclass
class ImageBuffer:
    """Decoded 8-bit RGB image; pixels is an (height, width, 3) uint8 array."""

    pixels: np.ndarray = field(repr=False)

    def __post_init__(self) -> None:
        arr = np.asarray(self.pixels)
        if arr.ndim != 3 or arr.shape[2] != 3 or arr.dtype != np.uint8:
            raise AugmentError("pixels must be an (H, W, 3) uint8 array")
        if arr.shape[0] < 1 or arr.shape[1] < 1:
            raise AugmentError("image has no pixels")
        self.pixels = arr

    @property
    def height(self) -> int:
        return int(self.pixels.shape[0])

    @property
    def width(self) -> int:
        return int(self.pixels.shape[1])

    @property
    def channels(self) -> int:
        return 3

    @classmethod
    def load(cls, path: str | Path) -> "ImageBuffer":
        """Decode a PNG or JPEG file to RGB."""
        with Image.open(path) as img:
            return cls(pixels=np.asarray(img.convert("RGB"), dtype=np.uint8))

    def save_png(self, path: str | Path) -> None:
        """Encode losslessly as PNG."""
        Image.fromarray(self.pixels, mode="RGB").save(path, format="PNG")


def brightness_adjust(image: ImageBuffer, alpha: float, sign: int = 1) -> ImageBuffer:
    """Scale all channels by (1 + sign*alpha), rounding then clamping to [0, 255]."""
    if not 0.0 <= alpha <= 1.0:
        raise AugmentError(f"brightness alpha {alpha} outside [0, 1]")
    if sign not in (1, -1):
        raise AugmentError(f"brightness sign {sign} must be +1 or -1")
    scaled = image.pixels.astype(np.float64) * (1.0 + sign * alpha)
    out = np.clip(np.floor(scaled + 0.5), 0.0, 255.0).astype(np.uint8)
    return ImageBuffer(pixels=out)


def _bilinear_sample(pixels: np.ndarray, src_x: np.ndarray, src_y: np.ndarray) -> np.ndarray:
    h, w = pixels.shape[:2]
    x0 = np.floor(src_x).astype(np.int64)
    y0 = np.floor(src_y).astype(np.int64)
    x1 = np.minimum(x0 + 1, w - 1)
    y1 = np.minimum(y0 + 1, h - 1)
    fx = (src_x - x0)[..., None]
    fy = (src_y - y0)[..., None]
    p = pixels.astype(np.float64)
    top = p[y0, x0] * (1.0 - fx) + p[y0, x1] * fx
    bottom = p[y1, x0] * (1.0 - fx) + p[y1, x1] * fx
    value = top * (1.0 - fy) + bottom * fy
    return np.clip(np.floor(value + 0.5), 0.0, 255.0).astype(np.uint8)


def grid_distort(
    image: ImageBuffer,
    beta: float,
    grid_cells: int = DEFAULT_GRID_CELLS,
    seed: int = 0,
) -> ImageBuffer:
    """Warp the image over a (grid_cells+1)^2 control lattice.

    Interior control points are displaced by seeded uniform offsets up to
    beta/2 of a cell per axis; border points stay fixed so the canvas keeps
    its size. Each output pixel takes its source position from bilinear
    interpolation of the corner displacements of its cell and samples the
    input bilinearly. beta 0 is the exact identity.
    """
    if not 0.0 <= beta <= 1.0:
        raise AugmentError(f"grid beta {beta} outside [0, 1]")
    if grid_cells < 2:
        raise AugmentError(f"grid_cells {grid_cells} must be >= 2")
    h, w = image.height, image.width
    if w < grid_cells or h < grid_cells:
        raise AugmentError(
            f"image {w}x{h} smaller than the {grid_cells}-cell grid"
        )
    g = grid_cells
    cell_w = w / g
    cell_h = h / g
    rng = np.random.default_rng(seed)
    disp_x = np.zeros((g + 1, g + 1))
    disp_y = np.zeros((g + 1, g + 1))
    max_dx = beta * cell_w / 2.0
    max_dy = beta * cell_h / 2.0
    disp_x[1:g, 1:g] = rng.uniform(-max_dx, max_dx, size=(g - 1, g - 1))
    disp_y[1:g, 1:g] = rng.uniform(-max_dy, max_dy, size=(g - 1, g - 1))

    ys, xs = np.mgrid[0:h, 0:w].astype(np.float64)
    gx = xs / cell_w
    gy = ys / cell_h
    j = np.clip(np.floor(gx).astype(np.int64), 0, g - 1)
    i = np.clip(np.floor(gy).astype(np.int64), 0, g - 1)
    u = gx - j
    v = gy - i
    w00 = (1.0 - u) * (1.0 - v)
    w01 = u * (1.0 - v)
    w10 = (1.0 - u) * v
    w11 = u * v
    dx = w00 * disp_x[i, j] + w01 * disp_x[i, j + 1] + w10 * disp_x[i + 1, j] + w11 * disp_x[i + 1, j + 1]
    dy = w00 * disp_y[i, j] + w01 * disp_y[i, j + 1] + w10 * disp_y[i + 1, j] + w11 * disp_y[i + 1, j + 1]
    src_x = np.clip(xs + dx, 0.0, w - 1.0)
    src_y = np.clip(ys + dy, 0.0, h - 1.0)
    return ImageBuffer(pixels=_bilinear_sample(image.pixels, src_x, src_y))


def random_crop(image: ImageBuffer, gamma: float, seed: int = 0) -> ImageBuffer:
    """Crop to round(w*(1-gamma)) x round(h*(1-gamma)) at a seeded offset.

    No resampling: every output pixel is an input pixel. gamma 0 returns the
    image unchanged.
    """
    if not 0.0 <= gamma < 1.0:
        raise AugmentError(f"crop gamma {gamma} outside [0, 1)")
    w, h = image.width, image.height
    out_w = round_half_away_from_zero(w * (1.0 - gamma))
    out_h = round_half_away_from_zero(h * (1.0 - gamma))
    if out_w < 1 or out_h < 1:
        raise AugmentError(f"crop of {w}x{h} at gamma {gamma} leaves no pixels")
    rng = np.random.default_rng(seed)
    off_x = int(rng.integers(0, w - out_w + 1))
    off_y = int(rng.integers(0, h - out_h + 1))
    out = image.pixels[off_y : off_y + out_h, off_x : off_x + out_w].copy()
    return ImageBuffer(pixels=out)


def apply_augmentation(image: ImageBuffer, spec: AugmentationSpec) -> ImageBuffer:
    """Run one fully specified transform."""
    if spec.kind == KIND_BRIGHTNESS:
        rng = np.random.default_rng(spec.seed)
        sign = 1 if int(rng.integers(0, 2)) == 1 else -1
        return brightness_adjust(image, spec.parameter, sign)
    if spec.kind == KIND_GRID:
        return grid_distort(image, spec.parameter, spec.grid_cells, spec.seed)
    return random_crop(image, spec.parameter, spec.seed)


def augmented_image_ref(image_ref: str) -> str:
    """Sibling PNG path for the augmented copy: stem gets the -aug suffix."""
    head, tail = posixpath.split(image_ref)
    stem, _ = posixpath.splitext(tail)
    return posixpath.join(head, f"{stem}{AUG_SUFFIX}.png")


def _draw_spec(rng: np.random.Generator) -> AugmentationSpec:
    kind = (KIND_BRIGHTNESS, KIND_GRID, KIND_CROP)[int(rng.integers(0, 3))]
    lo, hi = PARAMETER_RANGES[kind]
    parameter = float(rng.uniform(lo, hi))
    seed = int(rng.integers(0, 2**63))
    return AugmentationSpec(kind=kind, parameter=parameter, seed=seed)


def augment_subset(
    split: DatasetSplit,
    image_root: str | Path,
    fraction: float = DEFAULT_FRACTION,
    seed: int = 0,
) -> tuple[list[SamplePair], list[SamplePair]]:
    """Augment a seeded floor(fraction * |train|) subset of the train split.

    For each selected sample one transform kind is drawn uniformly, its
    parameter sampled from the kind's range, the image under image_root is
    transformed and written beside the original as PNG with the -aug suffix,
    and a new train sample (id suffixed -aug, labels unchanged) is created.
    The applied spec is recorded in the new sample's extra fields.

    Returns:
        (augmented samples, final train listing = original + augmented).
    """
    if not 0.0 < fraction <= 1.0:
        raise AugmentError(f"fraction {fraction} outside (0, 1]")
    root = Path(image_root)
    n = len(split.train)
    k = math.floor(fraction * n)
    master = np.random.default_rng(seed)
    chosen = sorted(int(i) for i in master.choice(n, size=k, replace=False))
    augmented: list[SamplePair] = []
    for idx in chosen:
        sample = split.train[idx]
        per_sample = np.random.default_rng(derive_seed(seed, sample.sample_id))
        spec = _draw_spec(per_sample)
        image = ImageBuffer.load(root / sample.image_ref)
        out_image = apply_augmentation(image, spec)
        out_ref = augmented_image_ref(sample.image_ref)
        out_path = root / out_ref
        out_path.parent.mkdir(parents=True, exist_ok=True)
        out_image.save_png(out_path)
        augmented.append(
            replace(
                sample,
                sample_id=f"{sample.sample_id}{AUG_SUFFIX}",
                image_ref=out_ref,
                elements=[replace(el) for el in sample.elements],
                extra={
                    **sample.extra,
                    "augmentation": {
                        "kind": spec.kind,
                        "parameter": spec.parameter,
                        "seed": spec.seed,
                        "grid_cells": spec.grid_cells,
                    },
                },
            )
        )
    final_train = list(split.train) + augmented
    return augmented, final_train
