"""Dataset ingestion, resizing and the synthetic lesion generator.

On disk a dataset is a manifest of tab-separated lines
``id<TAB>image_path<TAB>mask_path`` (paths relative to the manifest file),
8-bit RGB PNG images and 8-bit grayscale PNG masks with 0 = background and
255 = lesion.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np
from PIL import Image

from .errors import DatasetError, EmptyMaskError
from .geometry import Box, mask_to_bbox
from .tensor import bilinear_resize_array

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class LabeledSample:
    id: str
    image: np.ndarray   # [H, W, 3] float64 in [0, 1]
    mask: np.ndarray    # [H, W] uint8 in {0, 1}
    gt_box: Box         # tight box of the mask


def sample_from_arrays(sample_id: str, image: np.ndarray, mask: np.ndarray) -> LabeledSample:
    return LabeledSample(sample_id, image, mask.astype(np.uint8), mask_to_bbox(mask))


# ---------------------------------------------------------------------------
# PNG and manifest I/O

def load_image(path) -> np.ndarray:
    with Image.open(path) as im:
        arr = np.asarray(im.convert("RGB"), dtype=np.float64)
    return arr / 255.0


def save_image(path, image: np.ndarray) -> None:
    arr = np.clip(np.asarray(image) * 255.0, 0, 255).round().astype(np.uint8)
    Image.fromarray(arr, mode="RGB").save(path)


def load_mask(path) -> np.ndarray:
    with Image.open(path) as im:
        arr = np.asarray(im.convert("L"))
    bad = set(np.unique(arr)) - {0, 255}
    if bad:
        raise ValueError(f"mask values must be 0 or 255, found {sorted(bad)}")
    return (arr == 255).astype(np.uint8)


def save_mask(path, mask: np.ndarray) -> None:
    Image.fromarray((np.asarray(mask) != 0).astype(np.uint8) * 255, mode="L").save(path)


def load_dataset(manifest_path) -> list[LabeledSample]:
    """Read every manifest entry; empty-mask samples are skipped with a log
    message, malformed entries raise DatasetError naming the offending id."""
    manifest_path = Path(manifest_path)
    root = manifest_path.parent
    samples: list[LabeledSample] = []
    for lineno, line in enumerate(manifest_path.read_text().splitlines(), start=1):
        if not line.strip():
            continue
        parts = line.split("\t")
        if len(parts) != 3:
            raise DatasetError(f"line {lineno}", "expected 'id<TAB>image<TAB>mask'")
        sample_id, image_rel, mask_rel = parts
        try:
            image = load_image(root / image_rel)
            mask = load_mask(root / mask_rel)
        except (OSError, ValueError) as exc:
            raise DatasetError(sample_id, str(exc)) from exc
        if image.shape[:2] != mask.shape:
            raise DatasetError(sample_id, f"image {image.shape[:2]} and mask {mask.shape} sizes differ")
        try:
            samples.append(sample_from_arrays(sample_id, image, mask))
        except EmptyMaskError:
            logger.warning("skipping %s: empty mask", sample_id)
    return samples


def write_dataset(samples: Sequence[LabeledSample], out_dir, manifest_name: str = "manifest.tsv") -> Path:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    lines = []
    for s in samples:
        image_name = f"{s.id}.png"
        mask_name = f"{s.id}_mask.png"
        save_image(out_dir / image_name, s.image)
        save_mask(out_dir / mask_name, s.mask)
        lines.append(f"{s.id}\t{image_name}\t{mask_name}")
    manifest = out_dir / manifest_name
    manifest.write_text("\n".join(lines) + "\n")
    return manifest


# ---------------------------------------------------------------------------
# resizing

def nearest_resize_array(arr: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Nearest-neighbor resize with the same align-corners mapping as the
    bilinear kernel (keeps masks binary)."""
    h, w = arr.shape[:2]
    rows = np.rint(np.linspace(0.0, h - 1.0, out_h)).astype(np.intp)
    cols = np.rint(np.linspace(0.0, w - 1.0, out_w)).astype(np.intp)
    return arr[np.ix_(rows, cols)]


def resize_pair(sample: LabeledSample, size: int) -> LabeledSample:
    """Bilinear for the image, nearest-neighbor for the mask, box recomputed."""
    if sample.image.shape[:2] == (size, size):
        return sample
    image = bilinear_resize_array(sample.image, size, size)
    mask = nearest_resize_array(sample.mask, size, size)
    return sample_from_arrays(sample.id, image, mask)


def crop_rect_for_box(box: Box, margin: float, image_h: int, image_w: int) -> tuple[int, int, int, int]:
    """Integer pixel rect (r0, r1, c0, c1) covering the box expanded by
    ``margin`` of its width/height on each side, clipped to the image."""
    x1 = max(box.x1 - margin * box.width, 0.0)
    x2 = min(box.x2 + margin * box.width, float(image_w))
    y1 = max(box.y1 - margin * box.height, 0.0)
    y2 = min(box.y2 + margin * box.height, float(image_h))
    c0 = min(int(math.floor(x1)), image_w - 1)
    r0 = min(int(math.floor(y1)), image_h - 1)
    c1 = max(int(math.ceil(x2)), c0 + 1)
    r1 = max(int(math.ceil(y2)), r0 + 1)
    return r0, min(r1, image_h), c0, min(c1, image_w)


# ---------------------------------------------------------------------------
# synthetic lesions

_MAX_ATTEMPTS = 64


def synth_generate(n: int, seed: int, size: int = 64) -> list[LabeledSample]:
    """Textured skin-like backgrounds with one irregular elliptical blob each.

    The blob area lands in [2%, 30%] of the image and forms a single
    4-connected component; everything is drawn from one seeded generator, so
    identical seeds give bit-identical datasets.
    """
    if size < 32:
        raise ValueError(f"size must be >= 32, got {size}")
    rng = np.random.default_rng(seed)
    return [_synth_one(rng, size, f"synth_{i:04d}") for i in range(n)]


def _smooth_field(rng, size: int, cells: int, amplitude: float) -> np.ndarray:
    coarse = rng.uniform(-amplitude, amplitude, size=(cells, cells, 3))
    return bilinear_resize_array(coarse, size, size)


def _blob_mask(rng, size: int) -> np.ndarray:
    frac = rng.uniform(0.04, 0.22)
    aspect = rng.uniform(0.6, 1.6)
    a = size * math.sqrt(frac * aspect / math.pi)
    b = size * math.sqrt(frac / (aspect * math.pi))
    theta = rng.uniform(0.0, math.pi)
    amps = rng.uniform(0.0, 0.05, size=3)
    phases = rng.uniform(0.0, 2.0 * math.pi, size=3)
    reach = max(a, b) * (1.0 + float(amps.sum())) + 2.0
    if reach >= size / 2.0:
        reach = size / 2.0 - 1.0
    cy = rng.uniform(reach, size - reach)
    cx = rng.uniform(reach, size - reach)

    yy, xx = np.mgrid[0:size, 0:size]
    dx, dy = xx - cx, yy - cy
    xr = math.cos(theta) * dx + math.sin(theta) * dy
    yr = -math.sin(theta) * dx + math.cos(theta) * dy
    u, v = xr / a, yr / b
    rho = np.sqrt(u * u + v * v)
    phi = np.arctan2(v, u)
    boundary = 1.0
    for k, (amp, phase) in enumerate(zip(amps, phases), start=2):
        boundary = boundary + amp * np.sin(k * phi + phase)
    return (rho <= boundary).astype(np.uint8)


def _single_4connected(mask: np.ndarray) -> bool:
    total = int(mask.sum())
    if total == 0:
        return False
    seed = tuple(np.argwhere(mask)[0])
    seen = np.zeros_like(mask, dtype=bool)
    stack = [seed]
    seen[seed] = True
    count = 0
    h, w = mask.shape
    while stack:
        r, c = stack.pop()
        count += 1
        for rr, cc in ((r - 1, c), (r + 1, c), (r, c - 1), (r, c + 1)):
            if 0 <= rr < h and 0 <= cc < w and mask[rr, cc] and not seen[rr, cc]:
                seen[rr, cc] = True
                stack.append((rr, cc))
    return count == total


def _synth_one(rng: np.random.Generator, size: int, sample_id: str) -> LabeledSample:
    for _ in range(_MAX_ATTEMPTS):
        mask = _blob_mask(rng, size)
        frac = mask.mean()
        if 0.02 <= frac <= 0.30 and _single_4connected(mask):
            break
    else:
        raise RuntimeError("synthetic blob generation failed to converge")

    bg_base = np.array([0.80, 0.66, 0.58]) + rng.uniform(-0.06, 0.06, size=3)
    lesion_base = np.array([0.37, 0.24, 0.20]) + rng.uniform(-0.05, 0.05, size=3)
    bg = bg_base + _smooth_field(rng, size, 8, 0.07) + rng.uniform(-0.025, 0.025, size=(size, size, 3))
    lesion = lesion_base + _smooth_field(rng, size, 4, 0.05) + rng.uniform(-0.025, 0.025, size=(size, size, 3))
    image = np.where(mask[..., None] != 0, lesion, bg)
    # quantize to 8 bits so a save/load round trip is exact
    image_u8 = np.clip(image * 255.0, 0, 255).round().astype(np.uint8)
    return sample_from_arrays(sample_id, image_u8 / 255.0, mask)
