"""Datasets and the procedural glyph generator used as a desk-scale benchmark."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

GLYPHS = ("bar", "cross", "square", "disc", "diagonal", "checker", "ring", "corner", "stripes", "dots")


class DataError(ValueError):
    pass


@dataclass
class Dataset:
    inputs: np.ndarray
    labels: np.ndarray
    split: str = "train"

    def __post_init__(self):
        self.labels = np.asarray(self.labels, dtype=np.int64).reshape(-1)
        if self.inputs.shape[0] != self.labels.shape[0]:
            raise DataError(f"{self.inputs.shape[0]} inputs but {self.labels.shape[0]} labels")

    def __len__(self) -> int:
        return self.labels.shape[0]

    @property
    def num_classes(self) -> int:
        return int(self.labels.max()) + 1 if len(self) else 0

    @property
    def input_shape(self) -> tuple[int, ...]:
        return tuple(self.inputs.shape[1:])

    def check_domain(self) -> None:
        if self.inputs.size and (self.inputs.min() < 0 or self.inputs.max() > 1):
            raise DataError("inputs must lie in [0, 1]")
        if self.labels.size and self.labels.min() < 0:
            raise DataError("labels must be nonnegative")

    def subset(self, idx) -> "Dataset":
        return Dataset(self.inputs[idx], self.labels[idx], self.split)


def _glyph_mask(kind: int, g: int) -> np.ndarray:
    c = (np.arange(g) + 0.5) / g
    v, u = np.meshgrid(c, c, indexing="ij")  # v rows, u columns
    th = 0.13
    r = np.hypot(u - 0.5, v - 0.5)
    name = GLYPHS[kind]
    if name == "bar":
        m = np.abs(v - 0.5) < th
    elif name == "cross":
        m = (np.abs(v - 0.5) < th) | (np.abs(u - 0.5) < th)
    elif name == "square":
        m = np.maximum(np.abs(u - 0.5), np.abs(v - 0.5)) > 0.5 - 2 * th
    elif name == "disc":
        m = r < 0.42
    elif name == "diagonal":
        m = np.abs(u - v) < 1.4 * th
    elif name == "checker":
        m = (np.floor(u * 4) + np.floor(v * 4)) % 2 == 0
    elif name == "ring":
        m = np.abs(r - 0.36) < th
    elif name == "corner":
        m = (u < 2 * th) | (v > 1 - 2 * th)
    elif name == "stripes":
        m = (np.abs(u - 0.22) < th) | (np.abs(u - 0.78) < th)
    else:
        pts = np.array([0.17, 0.5, 0.83])
        du = np.abs(u[..., None] - pts).min(-1)
        dv = np.abs(v[..., None] - pts).min(-1)
        m = np.hypot(du, dv) < th
    return m.astype(np.float64)


def generate_shapes_dataset(n: int, classes: int = 10, image_size: int = 12, noise: float = 0.05,
                            seed: int = 0, split: str = "train") -> Dataset:
    """Balanced grayscale glyph images of shape (n, 1, S, S) with values in [0, 1].

    Glyphs occupy a box of about 0.75*S pixels at a random offset, drawn with
    random contrast over a dim random background, plus clipped Gaussian noise.
    """
    if not 2 <= classes <= len(GLYPHS):
        raise DataError(f"classes must lie in [2, {len(GLYPHS)}], got {classes}")
    if image_size < 8:
        raise DataError(f"image size must be >= 8, got {image_size}")
    if n < 1:
        raise DataError(f"sample count must be positive, got {n}")
    if noise < 0:
        raise DataError(f"noise level must be nonnegative, got {noise}")
    rng = np.random.default_rng(seed)
    s = image_size
    g = max(5, int(round(0.75 * s)))
    masks = [_glyph_mask(k, g) for k in range(classes)]
    labels = rng.permutation(np.arange(n) % classes)
    images = np.empty((n, 1, s, s), dtype=np.float32)
    for i, k in enumerate(labels):
        bg = rng.uniform(0.0, 0.1)
        fg = rng.uniform(0.85, 1.0)
        oy, ox = rng.integers(0, s - g + 1, size=2)
        img = np.full((s, s), bg)
        img[oy:oy + g, ox:ox + g] += (fg - bg) * masks[k]
        img += noise * rng.standard_normal((s, s))
        images[i, 0] = np.clip(img, 0.0, 1.0)
    return Dataset(images, labels, split)


def two_pixel_dataset(n: int, seed: int = 0, split: str = "train") -> Dataset:
    """Two-feature, two-class points in the unit square split by a curved boundary."""
    rng = np.random.default_rng(seed)
    x = rng.uniform(0, 1, size=(n, 2))
    y = ((x[:, 0] - 0.5) ** 2 + (x[:, 1] - 0.5) ** 2 < 0.09).astype(np.int64)
    return Dataset(x.astype(np.float32), y, split)
