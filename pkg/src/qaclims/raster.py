"""Raster image helpers.

In memory an image is a float32 array of shape (H, W, 3) with values in
[0, 1]; on disk it is an 8-bit RGB PNG. Masks are (H, W) integer arrays
stored as single-channel PNGs.
"""

import hashlib
from pathlib import Path

import numpy as np
from PIL import Image


def to_uint8(image):
    return np.clip(np.round(np.asarray(image, dtype=np.float64) * 255.0), 0, 255).astype(np.uint8)


def image_digest(image):
    """Content hash of an image, stable across float/uint8 round trips."""
    arr = np.ascontiguousarray(to_uint8(image))
    h = hashlib.sha256()
    h.update(str(arr.shape).encode())
    h.update(arr.tobytes())
    return h.hexdigest()


def load_image(path):
    with Image.open(path) as im:
        arr = np.asarray(im.convert("RGB"), dtype=np.float32)
    return arr / 255.0


def save_image(image, path):
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(to_uint8(image)[..., :3]).save(path, format="PNG")


def load_mask(path):
    # Palette PNGs (VOC style) keep their raw indices under np.asarray.
    with Image.open(path) as im:
        if im.mode not in ("L", "P", "I", "I;16"):
            raise ValueError(f"{path}: expected a single-channel index image, got mode {im.mode}")
        return np.asarray(im).astype(np.int64)


def save_mask(mask, path):
    mask = np.asarray(mask)
    if mask.min() < 0 or mask.max() > 255:
        raise ValueError("mask indices must fit in 0..255")
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(mask.astype(np.uint8)).save(path, format="PNG")
