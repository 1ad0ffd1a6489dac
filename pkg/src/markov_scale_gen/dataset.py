"""Procedural 32x32 image dataset: four filled shapes in two colorways.

Class id = shape * 2 + color, assigned round-robin (item i gets class i % 8),
with seeded jitter in position, size, and background so items within a class
vary. The generator plus a seed fully determines every emitted byte.
"""

from __future__ import annotations

import os

import numpy as np

from .ppm import read_image, write_ppm

SIDE = 32
NUM_CLASSES = 8
SHAPES = ("square", "circle", "triangle", "cross")
COLORS = (
    (0.9, -0.4, -0.4),
    (-0.4, -0.4, 0.9),
)
LABELS_FILE = "labels.txt"


def make_image(class_id: int, rng: np.random.Generator) -> np.ndarray:
    """One (32, 32, 3) image in [-1, 1] for the given class."""
    if not 0 <= class_id < NUM_CLASSES:
        raise ValueError(f"class id {class_id} outside [0, {NUM_CLASSES})")
    shape = SHAPES[class_id // 2]
    fg = np.array(COLORS[class_id % 2])
    cx = SIDE / 2 + rng.uniform(-3.0, 3.0)
    cy = SIDE / 2 + rng.uniform(-3.0, 3.0)
    r = rng.uniform(7.0, 11.0)
    yy, xx = np.mgrid[0:SIDE, 0:SIDE].astype(np.float64)
    dx, dy = xx - cx, yy - cy
    if shape == "square":
        mask = (np.abs(dx) <= r * 0.8) & (np.abs(dy) <= r * 0.8)
    elif shape == "circle":
        mask = dx * dx + dy * dy <= r * r
    elif shape == "triangle":
        mask = (dy >= -r) & (dy <= r) & (np.abs(dx) <= (dy + r) / 2.0)
    else:
        arm = r / 3.0
        mask = ((np.abs(dx) <= arm) & (np.abs(dy) <= r)) | (
            (np.abs(dy) <= arm) & (np.abs(dx) <= r)
        )
    bg = -0.85 + rng.uniform(-0.05, 0.05)
    img = np.full((SIDE, SIDE, 3), bg)
    img[mask] = fg
    img += rng.normal(0.0, 0.02, size=img.shape)
    return np.clip(img, -1.0, 1.0)


def generate_dataset(out_dir, count: int, seed: int = 0) -> list[tuple[str, int]]:
    """Write ``count`` images plus a labels index; returns (filename, class) pairs."""
    if count < 0:
        raise ValueError(f"count must be >= 0, got {count}")
    os.makedirs(out_dir, exist_ok=True)
    rng = np.random.default_rng(seed)
    index = []
    for i in range(count):
        cls = i % NUM_CLASSES
        name = f"img_{i:05d}.ppm"
        write_ppm(os.path.join(out_dir, name), make_image(cls, rng))
        index.append((name, cls))
    with open(os.path.join(out_dir, LABELS_FILE), "w") as f:
        for name, cls in index:
            f.write(f"{name} {cls}\n")
    return index


def load_dataset(data_dir) -> tuple[np.ndarray, np.ndarray]:
    """Read the labels index and all images: (N, 32, 32, 3) floats, (N,) labels."""
    labels_path = os.path.join(data_dir, LABELS_FILE)
    if not os.path.exists(labels_path):
        raise FileNotFoundError(
            f"no dataset index at {labels_path}; run the dataset command first"
        )
    images, labels = [], []
    with open(labels_path) as f:
        for line in f:
            line = line.strip()
            if not line:
                continue
            name, cls = line.rsplit(" ", 1)
            images.append(read_image(os.path.join(data_dir, name)))
            labels.append(int(cls))
    if images:
        return np.stack(images), np.asarray(labels, dtype=np.int64)
    return np.zeros((0, SIDE, SIDE, 3)), np.zeros(0, dtype=np.int64)
