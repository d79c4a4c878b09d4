"""Image and label-map files.

Float images are linear RGB.  PNG export clamps to [0, 1] and applies the
sRGB transfer curve; ``.npy`` files hold the raw float64 values.
"""

from __future__ import annotations

from pathlib import Path

import numpy as np
from PIL import Image

# RegionLabelMap vocabulary; index = label id, value = palette colour
LABELS = ("background", "skin", "left_eye", "right_eye", "mouth", "nostrils", "eyebrows", "ears", "neck")
LABEL_IDS = {name: i for i, name in enumerate(LABELS)}
PALETTE = [
    (0, 0, 0),
    (230, 190, 160),
    (0, 120, 255),
    (0, 200, 255),
    (220, 30, 60),
    (120, 60, 30),
    (80, 40, 0),
    (255, 140, 0),
    (170, 170, 170),
]


def linear_to_srgb(x):
    x = np.clip(x, 0.0, 1.0)
    return np.where(x <= 0.0031308, 12.92 * x, 1.055 * np.power(x, 1 / 2.4) - 0.055)


def srgb_to_linear(x):
    x = np.asarray(x, dtype=np.float64)
    return np.where(x <= 0.04045, x / 12.92, np.power((x + 0.055) / 1.055, 2.4))


def save_png(image, path) -> None:
    img = np.asarray(image, dtype=np.float64)
    data = np.rint(linear_to_srgb(img) * 255.0).astype(np.uint8)
    Image.fromarray(data).save(path)


def save_float(image, path) -> None:
    np.save(path, np.asarray(image, dtype=np.float64))


def load_image(path) -> np.ndarray:
    """Linear float RGB from ``.npy`` (verbatim) or an 8-bit sRGB PNG/JPEG."""
    path = Path(path)
    if path.suffix == ".npy":
        return np.load(path).astype(np.float64)
    with Image.open(path) as im:
        data = np.asarray(im.convert("RGB"), dtype=np.float64) / 255.0
    return srgb_to_linear(data)


def save_labels(labels, path) -> None:
    """Indexed-colour PNG; pixel value is the label id."""
    labels = np.asarray(labels)
    if labels.min() < 0 or labels.max() >= len(LABELS):
        raise ValueError("label id outside the vocabulary")
    im = Image.fromarray(labels.astype(np.uint8), mode="P")
    im.putpalette([c for rgb in PALETTE for c in rgb])
    im.save(path)


def load_labels(path) -> np.ndarray:
    path = Path(path)
    if path.suffix == ".npy":
        labels = np.load(path)
    else:
        with Image.open(path) as im:
            if im.mode != "P":
                raise ValueError(f"{path}: label maps must be indexed-colour PNGs")
            labels = np.asarray(im)
    labels = labels.astype(np.int64)
    if labels.min() < 0 or labels.max() >= len(LABELS):
        raise ValueError(f"{path}: label id outside the vocabulary")
    return labels
