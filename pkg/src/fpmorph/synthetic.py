"""Deterministic synthetic inputs standing in for photographs, CT slices and continent maps."""

from __future__ import annotations

import numpy as np
from scipy.special import expit

from .media import ImageField
from .sphere import SphereTessellation, cap_mask


def _grid(height, width):
    y = (np.arange(height) + 0.5) / height
    x = (np.arange(width) + 0.5) / width
    return np.meshgrid(x, y, indexing="xy")


def _blob(X, Y, cx, cy, rx, ry, soft=0.02):
    r = np.sqrt(((X - cx) / rx) ** 2 + ((Y - cy) / ry) ** 2)
    return expit((1.0 - r) / soft)


def portrait(size: int = 64, age: float = 0.0) -> ImageField:
    """Cartoon RGB head; ``age`` in [0, 1] greys the hair, pales the skin and adds creases."""
    X, Y = _grid(size, size)
    bg = np.stack([0.55 + 0.2 * Y, 0.65 + 0.1 * X, 0.85 - 0.2 * Y], axis=2)
    img = bg.copy()

    def paint(mask, color):
        nonlocal img
        img = img * (1 - mask[:, :, None]) + mask[:, :, None] * np.asarray(color)[None, None, :]

    hair_young = np.array([0.35, 0.2, 0.1])
    hair_old = np.array([0.78, 0.76, 0.74])
    hair = (1 - age) * hair_young + age * hair_old
    paint(_blob(X, Y, 0.5, 0.42, 0.36 + 0.02 * age, 0.36), hair)
    skin = (1 - age) * np.array([0.95, 0.76, 0.62]) + age * np.array([0.88, 0.74, 0.66])
    paint(_blob(X, Y, 0.5, 0.55, 0.26, 0.33 - 0.01 * age), skin)
    for ex in (0.4, 0.6):
        paint(_blob(X, Y, ex, 0.5, 0.045, 0.025), [0.1, 0.15, 0.25])
    lips = (1 - age) * np.array([0.8, 0.3, 0.35]) + age * np.array([0.7, 0.45, 0.45])
    paint(_blob(X, Y, 0.5, 0.72 + 0.01 * age, 0.08, 0.025), lips)
    if age > 0:
        crease = np.exp(-(((Y - 0.38) / 0.008) ** 2)) * _blob(X, Y, 0.5, 0.38, 0.14, 0.2)
        paint(age * 0.8 * crease, [0.6, 0.45, 0.4])
        for sx in (0.38, 0.62):
            fold = np.exp(-(((X - sx) / 0.01) ** 2)) * _blob(X, Y, sx, 0.66, 0.05, 0.07)
            paint(age * 0.7 * fold, [0.65, 0.5, 0.45])
    return ImageField(np.clip(img, 0.0, 1.0))


def lung_slice(size: int = 64, infection: float = 0.0) -> ImageField:
    """Grey-level chest cross-section; ``infection`` adds bright patches inside the lungs."""
    X, Y = _grid(size, size)
    body = _blob(X, Y, 0.5, 0.5, 0.46, 0.4)
    lungs = _blob(X, Y, 0.32, 0.5, 0.13, 0.26) + _blob(X, Y, 0.68, 0.5, 0.13, 0.26)
    img = 0.05 + 0.55 * body - 0.5 * lungs
    patches = _blob(X, Y, 0.3, 0.6, 0.07, 0.09, 0.1) + _blob(X, Y, 0.7, 0.42, 0.06, 0.1, 0.1)
    img = img + infection * 0.45 * patches * lungs
    return ImageField(np.clip(img, 0.0, 1.0))


PANGAEA = ([(0.0, 10.0)], [55.0])
CONTINENTS = (
    [(-100.0, 40.0), (20.0, 5.0), (110.0, 30.0), (135.0, -25.0), (-60.0, -15.0), (0.0, -85.0)],
    [30.0, 28.0, 30.0, 18.0, 20.0, 22.0],
)


def land_masks(tess: SphereTessellation) -> tuple[np.ndarray, np.ndarray]:
    """(supercontinent, dispersed continents) cell masks built from spherical caps."""
    return cap_mask(tess, *PANGAEA), cap_mask(tess, *CONTINENTS)
