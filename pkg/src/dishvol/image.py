"""Grayscale raster type and file I/O."""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image


@dataclass
class ImageGray:
    """Single-channel 8-bit raster; pixel (0, 0) is the top-left corner."""

    pixels: np.ndarray

    def __post_init__(self):
        px = np.asarray(self.pixels)
        if px.ndim != 2:
            raise ValueError("ImageGray needs a 2-D array")
        if px.dtype != np.uint8:
            px = np.clip(np.round(px), 0, 255).astype(np.uint8)
        self.pixels = px

    @property
    def width(self) -> int:
        return self.pixels.shape[1]

    @property
    def height(self) -> int:
        return self.pixels.shape[0]

    @staticmethod
    def load(path) -> "ImageGray":
        """Read a PNG/PGM file; color images are converted with the
        ITU-R 601 luma weights 0.299/0.587/0.114."""
        with Image.open(Path(path)) as im:
            if im.mode not in ("L", "I;16"):
                im = im.convert("L")
            arr = np.asarray(im)
        if arr.dtype != np.uint8:
            arr = (arr / 256).astype(np.uint8)
        return ImageGray(arr)

    def save(self, path) -> None:
        Image.fromarray(self.pixels, mode="L").save(Path(path))


def as_gray_array(img) -> np.ndarray:
    """Accept an ImageGray or a bare 2-D array; return uint8 pixels."""
    if isinstance(img, ImageGray):
        return img.pixels
    return ImageGray(np.asarray(img)).pixels


def save_indexed_png(labels: np.ndarray, path) -> None:
    """Write a label raster as an indexed 8-bit PNG."""
    lab = np.asarray(labels)
    if lab.min() < 0 or lab.max() > 255:
        raise ValueError("labels must fit in uint8")
    im = Image.fromarray(lab.astype(np.uint8), mode="P")
    # simple distinguishable palette: spread hues over the index range
    palette = []
    for i in range(256):
        palette.extend([(i * 53) % 256, (i * 97) % 256, (i * 193) % 256])
    im.putpalette(palette)
    im.save(Path(path))


def load_indexed_png(path) -> np.ndarray:
    with Image.open(Path(path)) as im:
        if im.mode != "P":
            im = im.convert("P")
        return np.asarray(im).copy()
