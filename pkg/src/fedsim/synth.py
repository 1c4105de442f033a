"""Deterministic synthetic image corpus in the MNIST layout.

Generates 10-class 28x28 grayscale images: each class is a fixed ring of
Gaussian blobs around the image center, and each sample is a shifted,
rescaled, noised copy of its class prototype. Borders stay exactly zero
(like the MNIST family), which keeps corner trigger patterns realistic.
Useful as a self-contained stand-in when no real corpus is available;
everything is reproducible from the seed alone.
"""

from __future__ import annotations

import math

import numpy as np

from .data import LabeledDataset, write_idx

TRAIN_IMAGES = "train-images-idx3-ubyte"
TRAIN_LABELS = "train-labels-idx1-ubyte"
VAL_IMAGES = "t10k-images-idx3-ubyte"
VAL_LABELS = "t10k-labels-idx1-ubyte"


def _prototypes(n_classes, side, rng):
    """Per-class blob parameter lists: (angle, radius, sigma, amplitude)."""
    protos = []
    for cls in range(n_classes):
        n_blobs = 3 + cls % 3
        blobs = []
        for b in range(n_blobs):
            ang = 2.0 * math.pi * (cls / n_classes + b / n_blobs) + rng.uniform(-0.25, 0.25)
            blobs.append((ang, rng.uniform(2.5, 5.0), rng.uniform(1.6, 2.8),
                          rng.uniform(0.7, 1.0)))
        protos.append(tuple(blobs))
    if n_classes >= 8:
        # Classes 5 and 7 are near-siblings (think sandal vs. sneaker): the
        # same blob layout rotated slightly, so their boundary stays lossy.
        protos[7] = tuple(
            (ang + rng.uniform(0.28, 0.38), rad + rng.uniform(-0.4, 0.4),
             sig * rng.uniform(0.9, 1.1), amp * rng.uniform(0.9, 1.1))
            for ang, rad, sig, amp in protos[5]
        )
    return protos


def _balanced_labels(n, n_classes, rng):
    counts = np.full(n_classes, n // n_classes)
    counts[: n % n_classes] += 1
    return rng.permutation(np.repeat(np.arange(n_classes), counts))


def _render(blobs, side, rng):
    """One sample: the class blobs, each geometrically jittered, plus noise.

    The continuous per-blob jitter keeps intra-class variation high
    dimensional, so small classifiers generalize instead of memorizing
    sample tables, much as they would on handwriting-style data.
    """
    yy, xx = np.mgrid[0:side, 0:side].astype(np.float64)
    center = (side - 1) / 2.0
    dy, dx = rng.normal(0.0, 0.7, size=2)
    canvas = np.zeros((side, side))
    for ang, rad, sig, amp in blobs:
        a = ang + rng.normal(0.0, 0.12)
        r = rad + rng.normal(0.0, 0.4)
        cy = center + dy + r * math.sin(a)
        cx = center + dx + r * math.cos(a)
        s = sig * rng.uniform(0.85, 1.15)
        canvas += amp * rng.uniform(0.8, 1.1) * np.exp(
            -((yy - cy) ** 2 + (xx - cx) ** 2) / (2.0 * s**2)
        )
    canvas = np.clip(canvas, 0.0, 1.0)
    canvas[canvas < 0.08] = 0.0  # crisp zero background out to the borders
    support = canvas > 0
    img = canvas + rng.normal(0.0, 0.08, size=canvas.shape) * support
    img[:, 0] = img[:, -1] = 0.0
    img[0, :] = img[-1, :] = 0.0
    return np.clip(img, 0.0, 1.0)


def make_corpus(seed, n_train, n_val, n_classes=10, side=28):
    """Returns (train, val) LabeledDatasets; fully determined by the seed."""
    rng = np.random.default_rng([int(seed), 0xDA7A])
    protos = _prototypes(n_classes, side, rng)
    out = []
    for n in (n_train, n_val):
        labels = _balanced_labels(n, n_classes, rng)
        images = np.empty((n, side, side))
        for i, cls in enumerate(labels):
            images[i] = _render(protos[cls], side, rng)
        out.append(LabeledDataset(images, labels))
    return out[0], out[1]


def write_corpus(out_dir, seed, n_train, n_val, n_classes=10, side=28):
    """Write the corpus as a conventional IDX quadruple; returns the paths."""
    import os

    os.makedirs(out_dir, exist_ok=True)
    train, val = make_corpus(seed, n_train, n_val, n_classes, side)
    paths = {
        "train_images": os.path.join(out_dir, TRAIN_IMAGES),
        "train_labels": os.path.join(out_dir, TRAIN_LABELS),
        "val_images": os.path.join(out_dir, VAL_IMAGES),
        "val_labels": os.path.join(out_dir, VAL_LABELS),
    }
    write_idx(train, paths["train_images"], paths["train_labels"])
    write_idx(val, paths["val_images"], paths["val_labels"])
    return paths
