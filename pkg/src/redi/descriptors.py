"""Hand-crafted image descriptors: HOG plus Sobel, Roberts and Canny edges.

All functions take float32 grayscale images in [0, 1] (shape H x W) and are
pure numpy, deterministic, and loop-free on the pixel axis.  Conventions
that vary between textbook presentations are pinned here:

* HOG gradients are central differences [-1, 0, 1] with replicated borders;
  orientations are unsigned in [0, 180); each pixel's magnitude is split
  linearly between the two nearest bin centers (centers at i * 180/bins,
  wrapping), cells are L2-normalized with eps = 1e-6, and the outermost
  ring of cells is dropped.
* Edge magnitudes are divided by the maximum possible kernel response so
  outputs stay in [0, 1].
* Canny works on the raw (unnormalized) Sobel responses of a 5x5 Gaussian
  blur (sigma 1.4); thresholds are quoted on the usual 0-255 scale and
  rescaled internally.  Non-maximum suppression breaks ties asymmetrically
  (strict > toward the positive gradient direction) so a symmetric step
  yields a single 1-pixel line.
"""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass

import numpy as np

_f32 = np.float32

SOBEL_X = np.array([[-1, 0, 1], [-2, 0, 2], [-1, 0, 1]], dtype=_f32)
SOBEL_Y = SOBEL_X.T.copy()
ROBERTS_X = np.array([[-1, 0], [0, 1]], dtype=_f32)
ROBERTS_Y = np.array([[0, -1], [1, 0]], dtype=_f32)
PREWITT_X = np.array([[-1, 0, 1], [-1, 0, 1], [-1, 0, 1]], dtype=_f32) / _f32(3.0)
PREWITT_Y = PREWITT_X.T.copy()


def _check_image(img: np.ndarray, what: str = "image") -> np.ndarray:
    img = np.asarray(img)
    if img.ndim != 2:
        raise ValueError(f"{what} must be 2-D grayscale, got shape {img.shape}")
    return img.astype(_f32, copy=False)


def to_gray(arr: np.ndarray) -> np.ndarray:
    """Collapse (H, W, 3) to luma (0.299, 0.587, 0.114); pass 2-D through."""
    arr = np.asarray(arr)
    if arr.ndim == 2:
        return arr.astype(_f32, copy=False)
    if arr.ndim == 3 and arr.shape[2] == 3:
        w = np.array([0.299, 0.587, 0.114], dtype=_f32)
        return (arr.astype(_f32) @ w).astype(_f32)
    raise ValueError(f"expected (H, W) or (H, W, 3), got {arr.shape}")


def _correlate2d(img: np.ndarray, kernel: np.ndarray) -> np.ndarray:
    """Same-size cross-correlation with edge-replicated padding."""
    kh, kw = kernel.shape
    # odd kernels center on the pixel; even kernels anchor their top-left there
    ph, pw = (kh - 1) // 2, (kw - 1) // 2
    pad = ((ph, kh - 1 - ph), (pw, kw - 1 - pw))
    xp = np.pad(img, pad, mode="edge")
    view = np.lib.stride_tricks.sliding_window_view(xp, kernel.shape)
    return np.einsum("ijkl,kl->ij", view, kernel, dtype=_f32, casting="same_kind")


# ---------------------------------------------------------------------------
# HOG


@dataclass(frozen=True)
class HogGrid:
    """Normalized interior cell histograms: (rows, cols, bins)."""

    cells: np.ndarray
    cell_px: int
    bins: int


def hog_compute(img: np.ndarray, bins: int = 9, cell: int = 8) -> HogGrid:
    """Histogram of oriented gradients over interior cells.

    The image is cropped to whole cells; images smaller than 3x3 cells are
    rejected because dropping the border ring would leave nothing.
    """
    img = _check_image(img)
    if bins < 2:
        raise ValueError("bins must be >= 2")
    if cell < 2:
        raise ValueError("cell must be >= 2")
    h, w = img.shape
    cy, cx = h // cell, w // cell
    if cy < 3 or cx < 3:
        raise ValueError(f"image {h}x{w} has {cy}x{cx} cells of {cell}px; need at least 3x3")
    img = img[: cy * cell, : cx * cell]

    padded = np.pad(img, 1, mode="edge")
    dx = (padded[1:-1, 2:] - padded[1:-1, :-2]).astype(_f32)
    dy = (padded[2:, 1:-1] - padded[:-2, 1:-1]).astype(_f32)
    mag = np.sqrt(dx * dx + dy * dy)
    ang = np.degrees(np.arctan2(dy, dx)) % 180.0

    width = 180.0 / bins
    t = ang / width
    lo = np.floor(t).astype(np.int64) % bins
    hi = (lo + 1) % bins
    w_hi = (t - np.floor(t)).astype(_f32)

    cell_row = np.arange(cy * cell) // cell
    cell_col = np.arange(cx * cell) // cell
    cell_idx = (cell_row[:, None] * cx + cell_col[None, :]).astype(np.int64)
    flat_lo = cell_idx * bins + lo
    flat_hi = cell_idx * bins + hi
    hist = np.bincount(flat_lo.ravel(), weights=(mag * (1.0 - w_hi)).ravel(), minlength=cy * cx * bins)
    hist += np.bincount(flat_hi.ravel(), weights=(mag * w_hi).ravel(), minlength=cy * cx * bins)
    hist = hist.reshape(cy, cx, bins).astype(_f32)

    norm = np.sqrt((hist * hist).sum(axis=2, keepdims=True) + _f32(1e-6) ** 2)
    hist = hist / norm
    return HogGrid(cells=np.ascontiguousarray(hist[1:-1, 1:-1]), cell_px=cell, bins=bins)


_STROKE_CACHE: dict[tuple[int, int], list[tuple[np.ndarray, np.ndarray]]] = {}


def _stroke_offsets(bins: int, cell: int) -> list[tuple[np.ndarray, np.ndarray]]:
    """Per-bin pixel offsets of a cell-length stroke through the cell center.

    The stroke runs perpendicular to the bin's gradient orientation (i.e.
    along the edge the gradient implies).
    """
    key = (bins, cell)
    cached = _STROKE_CACHE.get(key)
    if cached is not None:
        return cached
    out = []
    half = cell / 2.0
    for b in range(bins):
        grad_angle = np.deg2rad(b * 180.0 / bins)
        edge_angle = grad_angle + np.pi / 2.0
        dx, dy = np.cos(edge_angle), np.sin(edge_angle)
        ts = np.linspace(-half, half, 4 * cell)
        xs = np.round(ts * dx).astype(np.int64)
        ys = np.round(ts * dy).astype(np.int64)
        pairs = np.unique(np.stack([ys, xs], axis=1), axis=0)
        out.append((pairs[:, 0], pairs[:, 1]))
    _STROKE_CACHE[key] = out
    return out


def hog_render(grid: HogGrid, out_h: int, out_w: int) -> np.ndarray:
    """Draw each cell's histogram as oriented strokes; normalize by the max.

    Cell (i, j) of the grid corresponds to pixels of interior cell (i+1, j+1)
    of the source image, so strokes land where the gradients were measured.
    """
    canvas = np.zeros((out_h, out_w), dtype=np.float64)
    cell = grid.cell_px
    strokes = _stroke_offsets(grid.bins, cell)
    rows, cols, bins = grid.cells.shape
    for b in range(bins):
        oy, ox = strokes[b]
        weights = grid.cells[:, :, b]
        if not weights.any():
            continue
        ci = (np.arange(rows) + 1) * cell + (cell - 1) // 2
        cj = (np.arange(cols) + 1) * cell + (cell - 1) // 2
        full = (rows, cols, oy.size)
        ys = np.broadcast_to(ci[:, None, None] + oy[None, None, :], full).ravel()
        xs = np.broadcast_to(cj[None, :, None] + ox[None, None, :], full).ravel()
        ws = np.broadcast_to(weights[:, :, None], full).ravel()
        keep = (ys >= 0) & (ys < out_h) & (xs >= 0) & (xs < out_w)
        np.add.at(canvas, (ys[keep], xs[keep]), ws[keep])
    peak = canvas.max()
    if peak > 0:
        canvas /= peak
    return canvas.astype(_f32)


# ---------------------------------------------------------------------------
# edge maps


def sobel_edges(img: np.ndarray) -> np.ndarray:
    """Sobel gradient magnitude scaled to [0, 1] (max response = 4*sqrt(2))."""
    img = _check_image(img)
    gx = _correlate2d(img, SOBEL_X)
    gy = _correlate2d(img, SOBEL_Y)
    return (np.sqrt(gx * gx + gy * gy) / _f32(4.0 * np.sqrt(2.0))).astype(_f32)


def roberts_edges(img: np.ndarray) -> np.ndarray:
    """Roberts cross magnitude scaled to [0, 1] (max response = sqrt(2))."""
    img = _check_image(img)
    gx = _correlate2d(img, ROBERTS_X)
    gy = _correlate2d(img, ROBERTS_Y)
    return (np.sqrt(gx * gx + gy * gy) / _f32(np.sqrt(2.0))).astype(_f32)


def _gaussian_kernel5(sigma: float = 1.4) -> np.ndarray:
    ax = np.arange(-2, 3, dtype=np.float64)
    g1 = np.exp(-(ax * ax) / (2.0 * sigma * sigma))
    k = np.outer(g1, g1)
    return (k / k.sum()).astype(_f32)


def canny_edges(img: np.ndarray, low: float = 50.0, high: float = 100.0) -> np.ndarray:
    """Binary Canny edges; thresholds are on the conventional 0-255 scale.

    Pipeline: 5x5 Gaussian blur (sigma 1.4) -> raw Sobel responses -> L2
    magnitude -> 4-direction non-maximum suppression -> double threshold
    with 8-connected hysteresis from strong pixels.
    """
    img = _check_image(img)
    if not (0.0 < low <= high):
        raise ValueError(f"need 0 < low <= high, got low={low} high={high}")
    lo_t, hi_t = low / 255.0, high / 255.0

    blurred = _correlate2d(img, _gaussian_kernel5())
    gx = _correlate2d(blurred, SOBEL_X)
    gy = _correlate2d(blurred, SOBEL_Y)
    mag = np.sqrt(gx * gx + gy * gy)
    h, w = mag.shape

    # sector 0: E/W, 1: NE/SW, 2: N/S, 3: NW/SE (rows grow downward)
    ang = np.degrees(np.arctan2(gy, gx)) % 180.0
    sector = ((ang + 22.5) // 45.0).astype(np.int64) % 4
    offs = {0: (0, 1), 1: (1, 1), 2: (1, 0), 3: (1, -1)}
    padded = np.pad(mag, 1, mode="constant")

    def shifted(dy, dx):
        return padded[1 + dy : 1 + dy + h, 1 + dx : 1 + dx + w]

    keep = np.zeros_like(mag, dtype=bool)
    for s, (dy, dx) in offs.items():
        sel = sector == s
        fwd = shifted(dy, dx)
        bwd = shifted(-dy, -dx)
        # strict > toward the positive direction breaks plateau ties
        keep |= sel & (mag > fwd) & (mag >= bwd)
    nms = np.where(keep, mag, 0.0)

    strong = nms >= hi_t
    weak = nms >= lo_t
    edges = strong.copy()
    queue = deque(zip(*np.nonzero(strong)))
    while queue:
        y, x = queue.popleft()
        for dy in (-1, 0, 1):
            for dx in (-1, 0, 1):
                ny, nx = y + dy, x + dx
                if 0 <= ny < h and 0 <= nx < w and weak[ny, nx] and not edges[ny, nx]:
                    edges[ny, nx] = True
                    queue.append((ny, nx))
    return edges.astype(_f32)
