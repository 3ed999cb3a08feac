"""Synthetic fine-grained shape dataset.

Each class is a filled polygon whose vertex radii carry a small fixed
class-specific offset pattern -- the subtle signal.  Every rendered
instance adds per-vertex jitter, a random rotation, scale and center shift,
and pixel noise -- the nuisances, deliberately larger than the signal so
raw-pixel statistics are a poor classifier while a trained model can still
separate the classes.  Rendering is anti-aliased by supersampled coverage
and every random draw comes from a stream derived from (seed, split, index),
so datasets are byte-reproducible.
"""

from __future__ import annotations

import csv
import os
from dataclasses import dataclass, fields, replace

import numpy as np

from .rng import stream
from .tensor import load_tensor, save_tensor

_SUPERSAMPLE = 4


@dataclass(frozen=True)
class SynthSpec:
    num_classes: int = 8
    vertex_count: int = 7
    class_offset: float = 0.16   # per-class radial signature magnitude
    jitter: float = 0.05         # per-instance radial jitter
    noise: float = 0.05          # pixel noise amplitude
    train_per_class: int = 40
    test_per_class: int = 20
    image_size: int = 36         # raw size; training crops out a window
    base_radius: float = 0.30    # fraction of image size
    rot_jitter: float = 25.0     # degrees
    scale_range: float = 0.12
    center_jitter: float = 2.5   # pixels
    foreground: float = 0.85
    background: float = 0.10
    seed: int = 0

    def __post_init__(self):
        if self.num_classes < 2 or self.vertex_count < 3:
            raise ValueError("need >= 2 classes and >= 3 polygon vertices")
        if min(self.train_per_class, self.test_per_class, self.image_size) < 1:
            raise ValueError("counts and image_size must be positive")


@dataclass
class ImageBatch:
    """In-memory dataset split: fp64 images in [0,1], integer labels, ids."""

    images: np.ndarray  # (N, S, S, 1)
    labels: np.ndarray  # (N,) int64
    ids: list

    def __post_init__(self):
        if self.images.ndim != 4 or len(self.labels) != len(self.images):
            raise ValueError("inconsistent batch arrays")

    def __len__(self):
        return len(self.images)


def polygon_coverage(verts_y, verts_x, size: int) -> np.ndarray:
    """Anti-aliased fill fraction per pixel via supersampled even-odd test."""
    ss = _SUPERSAMPLE
    n = size * ss
    coords = (np.arange(n) + 0.5) / ss
    py, px = np.meshgrid(coords, coords, indexing="ij")
    inside = np.zeros((n, n), dtype=bool)
    v = len(verts_y)
    with np.errstate(divide="ignore", invalid="ignore"):
        for i in range(v):
            y1, x1 = verts_y[i], verts_x[i]
            y2, x2 = verts_y[(i + 1) % v], verts_x[(i + 1) % v]
            crosses = (y1 > py) != (y2 > py)
            x_at = (x2 - x1) * (py - y1) / (y2 - y1) + x1
            inside ^= crosses & (px < x_at)
    return inside.reshape(size, ss, size, ss).mean(axis=(1, 3))


def class_signatures(spec: SynthSpec) -> np.ndarray:
    """Fixed per-class radial offset patterns, (num_classes, vertex_count)."""
    out = np.zeros((spec.num_classes, spec.vertex_count))
    for c in range(spec.num_classes):
        rs = stream(spec.seed, "class-shape", c)
        out[c] = rs.fill_uniform(spec.vertex_count, -spec.class_offset, spec.class_offset)
    return out


def render_instance(spec: SynthSpec, signature: np.ndarray, rs) -> np.ndarray:
    """One (S, S, 1) image; draw order is fixed for reproducibility."""
    s = spec.image_size
    v = spec.vertex_count
    jit = rs.fill_uniform(v, -spec.jitter, spec.jitter)
    rot = np.deg2rad(rs.uniform(-spec.rot_jitter, spec.rot_jitter))
    zoom = rs.uniform(1.0 - spec.scale_range, 1.0 + spec.scale_range)
    cy = (s - 1) / 2.0 + rs.uniform(-spec.center_jitter, spec.center_jitter)
    cx = (s - 1) / 2.0 + rs.uniform(-spec.center_jitter, spec.center_jitter)
    noise = rs.fill_uniform(s * s, -spec.noise, spec.noise).reshape(s, s)

    angles = 2.0 * np.pi * np.arange(v) / v + rot
    radii = spec.base_radius * s * zoom * (1.0 + signature + jit)
    verts_y = cy + radii * np.sin(angles)
    verts_x = cx + radii * np.cos(angles)

    coverage = polygon_coverage(verts_y, verts_x, s)
    img = spec.background + (spec.foreground - spec.background) * coverage + noise
    return np.clip(img, 0.0, 1.0)[:, :, None]


def generate(spec: SynthSpec) -> tuple:
    """Render the train and test splits; returns (train, test) ImageBatch."""
    signatures = class_signatures(spec)

    def split(name: str, per_class: int) -> ImageBatch:
        n = spec.num_classes * per_class
        images = np.zeros((n, spec.image_size, spec.image_size, 1))
        labels = np.zeros(n, dtype=np.int64)
        for i in range(n):
            label = i % spec.num_classes
            rs = stream(spec.seed, name, i)
            images[i] = render_instance(spec, signatures[label], rs)
            labels[i] = label
        return ImageBatch(images, labels, list(range(n)))

    return split("train", spec.train_per_class), split("test", spec.test_per_class)


# ---------------------------------------------------------------------------
# on-disk layout: manifest csv + one tensor file per image
# ---------------------------------------------------------------------------

def write_split(directory, batch: ImageBatch) -> None:
    os.makedirs(directory, exist_ok=True)
    img_dir = os.path.join(directory, "images")
    os.makedirs(img_dir, exist_ok=True)
    with open(os.path.join(directory, "manifest.csv"), "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["id", "label", "path"])
        for i, img_id in enumerate(batch.ids):
            rel = os.path.join("images", f"img_{img_id:06d}.rgt")
            save_tensor(os.path.join(directory, rel), batch.images[i])
            writer.writerow([img_id, int(batch.labels[i]), rel])


def read_split(directory) -> ImageBatch:
    manifest = os.path.join(directory, "manifest.csv")
    images, labels, ids = [], [], []
    with open(manifest, newline="") as fh:
        for row in csv.DictReader(fh):
            ids.append(int(row["id"]))
            labels.append(int(row["label"]))
            images.append(load_tensor(os.path.join(directory, row["path"])))
    if not images:
        raise ValueError(f"{manifest}: empty dataset")
    return ImageBatch(np.stack(images), np.asarray(labels, dtype=np.int64), ids)


def write_dataset(root, train: ImageBatch, test: ImageBatch, spec: SynthSpec) -> None:
    os.makedirs(root, exist_ok=True)
    write_split(os.path.join(root, "train"), train)
    write_split(os.path.join(root, "test"), test)
    with open(os.path.join(root, "spec.txt"), "w") as fh:
        for f in fields(SynthSpec):
            fh.write(f"{f.name}={getattr(spec, f.name)}\n")


def read_dataset(root) -> tuple:
    return read_split(os.path.join(root, "train")), read_split(os.path.join(root, "test"))


def load_spec(path) -> SynthSpec:
    kinds = {f.name: type(getattr(SynthSpec(), f.name)) for f in fields(SynthSpec)}
    items = {}
    with open(path) as fh:
        for line in fh:
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            key, value = line.split("=", 1)
            key = key.strip()
            if key not in kinds:
                raise ValueError(f"unknown dataset spec key {key!r}")
            items[key] = kinds[key](value.strip()) if kinds[key] is not bool \
                else value.strip().lower() in ("true", "1", "yes")
    return replace(SynthSpec(), **items)


def nearest_centroid_accuracy(train: ImageBatch, test: ImageBatch) -> float:
    """Raw-pixel nearest-class-centroid baseline (the sanity floor)."""
    classes = np.unique(train.labels)
    centroids = np.stack([
        train.images[train.labels == c].reshape(np.sum(train.labels == c), -1).mean(axis=0)
        for c in classes])
    flat = test.images.reshape(len(test), -1)
    d2 = ((flat[:, None, :] - centroids[None, :, :]) ** 2).sum(axis=2)
    pred = classes[np.argmin(d2, axis=1)]
    return float(np.mean(pred == test.labels))
