"""Deterministic synthetic shape dataset with exact ground-truth masks."""
from __future__ import annotations

import colorsys
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .seeding import seed_for
from .tensorio import write_tensor

SHAPES = ("disk", "square", "triangle", "plus", "ring", "diamond")
IMAGE_SIDE = 64
MIN_SIZE, MAX_SIZE = 12, 40
MIN_AREA, MAX_AREA = np.pi * 6 ** 2, MAX_SIZE ** 2


@dataclass
class SyntheticSample:
    image: np.ndarray      # (64, 64, 3) float32 in [0, 1]
    label: int
    gt_mask: np.ndarray    # (64, 64) uint8
    bbox: tuple            # (row_min, col_min, row_max, col_max), inclusive
    seed: int
    index: int = 0


def shape_mask(shape, size, center, side=IMAGE_SIDE):
    """Boolean mask of ``shape`` with side/diameter ``size`` at ``center`` (row, col)."""
    rows, cols = np.mgrid[0:side, 0:side].astype(np.float64)
    dy, dx = rows - center[0], cols - center[1]
    half = size / 2.0
    if shape == "disk":
        return dx ** 2 + dy ** 2 <= half ** 2
    if shape == "square":
        return (np.abs(dx) < half) & (np.abs(dy) < half)
    if shape == "triangle":
        depth = (dy + half) / size          # 0 at apex row, 1 at base row
        return (depth >= 0) & (depth <= 1) & (np.abs(dx) <= depth * half)
    if shape == "plus":
        arm = size / 6.0
        return ((np.abs(dx) < half) & (np.abs(dy) < arm)) | ((np.abs(dy) < half) & (np.abs(dx) < arm))
    if shape == "ring":
        r2 = dx ** 2 + dy ** 2
        return (r2 <= half ** 2) & (r2 >= (0.5 * half) ** 2)
    if shape == "diamond":
        return np.abs(dx) + np.abs(dy) <= half
    raise ValueError(f"unknown shape {shape!r}")


def value_noise(rng, side=IMAGE_SIDE, grid=8, amplitude=0.08):
    coarse = rng.uniform(-amplitude, amplitude, size=(grid + 1, grid + 1, 3))
    pos = np.linspace(0, grid, side)
    i0 = np.minimum(pos.astype(int), grid - 1)
    t = (pos - i0)[:, None]
    rows = coarse[i0] * (1 - t)[..., None] + coarse[i0 + 1] * t[..., None]
    out = rows[:, i0] * (1 - t.T)[..., None] + rows[:, i0 + 1] * t.T[..., None]
    return out


def bbox_of(mask):
    rows = np.flatnonzero(mask.any(axis=1))
    cols = np.flatnonzero(mask.any(axis=0))
    return (int(rows[0]), int(cols[0]), int(rows[-1]), int(cols[-1]))


def render_sample(seed, index, class_count=len(SHAPES), label=None):
    sample_seed = seed_for(seed, index, 0, "sample")
    rng = np.random.default_rng(sample_seed)
    if label is None:
        label = index % class_count
    shape = SHAPES[label % len(SHAPES)]
    size = int(rng.integers(MIN_SIZE, MAX_SIZE + 1))
    margin = MAX_SIZE / 2.0 + 1
    center = (rng.uniform(margin, IMAGE_SIDE - margin), rng.uniform(margin, IMAGE_SIDE - margin))
    # grow small shapes until the mask area is within bounds
    mask = shape_mask(shape, size, center)
    while mask.sum() < MIN_AREA and size < MAX_SIZE:
        size += 1
        mask = shape_mask(shape, size, center)
    hue = rng.uniform()
    value = rng.uniform(0.75, 1.0)
    color = np.array(colorsys.hsv_to_rgb(hue, 1.0, value))
    base = rng.uniform(0.2, 0.5)
    background = np.clip(base + value_noise(rng), 0, 1)
    image = np.where(mask[..., None], color, background)
    return SyntheticSample(image.astype(np.float32), int(label), mask.astype(np.uint8),
                           bbox_of(mask), int(sample_seed), int(index))


def render_disk(diameter, side=IMAGE_SIDE, color=(1.0, 0.8, 0.1)):
    """A single disk on a zero background (object-size study)."""
    c = (side - 1) / 2.0
    mask = shape_mask("disk", diameter, (c, c), side)
    image = np.where(mask[..., None], np.asarray(color), 0.0)
    return image.astype(np.float32), mask.astype(np.uint8)


def generate_dataset(count, seed, class_count=len(SHAPES), start=0):
    if class_count < 1 or class_count > len(SHAPES):
        raise ValueError(f"class_count must be in [1, {len(SHAPES)}]")
    if count < class_count:
        raise ValueError(f"count {count} cannot cover {class_count} classes")
    return [render_sample(seed, start + i, class_count) for i in range(count)]


def stack(samples):
    images = np.stack([s.image for s in samples])
    labels = np.array([s.label for s in samples])
    masks = np.stack([s.gt_mask for s in samples])
    return images, labels, masks


def dataset_std_color(images):
    return np.asarray(images, dtype=np.float64).reshape(-1, 3).std(axis=0)


def dataset_mean_color(images):
    return np.asarray(images, dtype=np.float64).reshape(-1, 3).mean(axis=0)


def write_dataset(samples, directory):
    """Write per-sample tensors plus a JSON-lines manifest; returns the manifest path."""
    directory = Path(directory)
    (directory / "images").mkdir(parents=True, exist_ok=True)
    (directory / "masks").mkdir(parents=True, exist_ok=True)
    lines = []
    for s in samples:
        image_path = f"images/{s.index:06d}.atns"
        mask_path = f"masks/{s.index:06d}.atns"
        write_tensor(directory / image_path, s.image)
        write_tensor(directory / mask_path, s.gt_mask.astype(np.float32))
        lines.append(json.dumps({"id": s.index, "label": s.label, "image_path": image_path,
                                 "mask_path": mask_path, "bbox": list(s.bbox), "seed": s.seed},
                                sort_keys=True))
    manifest = directory / "manifest.jsonl"
    manifest.write_text("\n".join(lines) + "\n")
    return manifest
