"""PNG reading/writing and bilinear resizing for float32 [0, 1] images."""

from __future__ import annotations

import os
from pathlib import Path

import numpy as np
from PIL import Image

from .descriptors import to_gray

_f32 = np.float32


class ImageFormatError(ValueError):
    """PNG exists but uses a feature this pipeline does not support."""


def load_png(path: str | Path) -> np.ndarray:
    """Load a PNG as float32 grayscale in [0, 1].

    8-bit grayscale and RGB(A) are accepted (alpha is ignored, color goes
    through the usual luma weights).  Palette and 16-bit files are refused
    by name so the caller sees what to re-export.
    """
    with Image.open(path) as im:
        mode = im.mode
        if mode == "P":
            raise ImageFormatError(f"{path}: palette PNG not supported; export as 8-bit gray or RGB")
        if mode in ("I", "I;16", "I;16B", "I;16L", "F"):
            raise ImageFormatError(f"{path}: {mode} (high bit depth) not supported; export as 8-bit")
        if mode == "LA":
            im = im.convert("L")
        elif mode == "RGBA":
            im = im.convert("RGB")
        elif mode not in ("L", "RGB"):
            raise ImageFormatError(f"{path}: unsupported PNG mode '{mode}'")
        arr = np.asarray(im, dtype=_f32) / _f32(255.0)
    return to_gray(arr)


def save_png(path: str | Path, img: np.ndarray) -> None:
    """Write a float [0, 1] grayscale array as 8-bit PNG (atomic replace)."""
    img = np.asarray(img)
    if img.ndim != 2:
        raise ValueError(f"expected 2-D grayscale, got {img.shape}")
    q = np.clip(np.rint(img.astype(np.float64) * 255.0), 0, 255).astype(np.uint8)
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    Image.fromarray(q, mode="L").save(tmp, format="PNG")
    os.replace(tmp, path)


def save_mask_png(path: str | Path, mask: np.ndarray) -> None:
    """Write a binary mask as 0/255 PNG."""
    m = (np.asarray(mask) > 0).astype(np.uint8) * 255
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    Image.fromarray(m, mode="L").save(tmp, format="PNG")
    os.replace(tmp, path)


def load_mask_png(path: str | Path, expect_hw: tuple[int, int] | None = None) -> np.ndarray:
    """Load a mask PNG as uint8 {0, 1}; bytes above 127 count as anomalous."""
    with Image.open(path) as im:
        if im.mode != "L":
            im = im.convert("L")
        arr = np.asarray(im)
    mask = (arr > 127).astype(np.uint8)
    if expect_hw is not None and mask.shape != expect_hw:
        mask = resize_nearest(mask, *expect_hw)
    return mask


def resize_bilinear(img: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Bilinear resize with half-pixel centers (matches the upsample op)."""
    from .autodiff import bilinear_weights  # shares the weight convention

    img = np.asarray(img, dtype=_f32)
    if img.shape == (out_h, out_w):
        return img
    wh = bilinear_weights(img.shape[0], out_h)
    ww = bilinear_weights(img.shape[1], out_w)
    return np.ascontiguousarray(wh @ img @ ww.T, dtype=_f32)


def resize_nearest(img: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Nearest-neighbor resize with the same half-pixel source mapping."""
    img = np.asarray(img)
    if img.shape == (out_h, out_w):
        return img
    rows = np.clip(np.rint((np.arange(out_h) + 0.5) * img.shape[0] / out_h - 0.5), 0, img.shape[0] - 1).astype(np.int64)
    cols = np.clip(np.rint((np.arange(out_w) + 0.5) * img.shape[1] / out_w - 0.5), 0, img.shape[1] - 1).astype(np.int64)
    return np.ascontiguousarray(img[rows[:, None], cols[None, :]])
