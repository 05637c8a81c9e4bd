"""Tiny offline stand-in for a digit corpus: five stroke classes drawn with
random position, thickness and noise on a 28x28 canvas."""

import numpy as np

from pcanet import LabeledDataset

CLASSES = ("vertical", "horizontal", "diagonal", "cross", "ring")


def _draw(kind, g, size=28):
    img = np.zeros((size, size))
    c = size / 2 + g.uniform(-5, 5, size=2)
    half = g.uniform(4, 10)
    width = g.uniform(1.0, 2.2)
    yy, xx = np.mgrid[:size, :size].astype(float)
    dy, dx = yy - c[0], xx - c[1]
    inside = (np.abs(dy) <= half) & (np.abs(dx) <= half)
    if kind == "vertical":
        img[inside & (np.abs(dx) <= width)] = 1
    elif kind == "horizontal":
        img[inside & (np.abs(dy) <= width)] = 1
    elif kind == "diagonal":
        img[inside & (np.abs(dx - dy) <= 1.4 * width)] = 1
    elif kind == "cross":
        img[inside & ((np.abs(dx) <= width) | (np.abs(dy) <= width))] = 1
    else:
        r = np.hypot(dy, dx)
        img[np.abs(r - 0.8 * half) <= width] = 1
    # clutter: a short random segment, then pixel noise
    a, b = g.uniform(2, size - 2, size=2), g.uniform(2, size - 2, size=2)
    for t in np.linspace(0, 1, 12):
        r, q = np.rint(a + t * (b - a)).astype(int)
        img[r, q] = max(img[r, q], g.uniform(0.4, 1.0))
    img += g.normal(0, 0.3, size=img.shape)
    return np.clip(img, 0, 1)


def make_shapes(n, seed=0, split="train"):
    g = np.random.default_rng(seed)
    labels = np.arange(n) % len(CLASSES)
    images = np.stack([_draw(CLASSES[lab], g) for lab in labels])
    return LabeledDataset(images, labels, np.full(n, split, dtype=object), len(CLASSES))
