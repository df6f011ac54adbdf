"""Anomaly maps and evaluation metrics (AUROC, AP, PRO).

The anomaly map sums per-level cosine-distance maps between the reference
pyramid and the recalibrated pyramid, each bilinearly upsampled to input
resolution.  Metrics are exact rank statistics computed in float64; they
are deliberately free of any tolerance knobs so they can be checked against
brute-force oracles digit for digit.
"""

from __future__ import annotations

import json
import os
from collections import deque
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from .autodiff import bilinear_weights

_f32 = np.float32


# ---------------------------------------------------------------------------
# anomaly map


@dataclass
class AnomalyMap:
    pixel_scores: np.ndarray  # (H, W) float32, >= 0
    image_score: float
    layer_weights: tuple[float, ...]
    sigma: float


def cosine_distance_np(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """(N, C, H, W) x2 -> (N, H, W) of 1 - cos; zero-norm locations score 1."""
    a = np.asarray(a, _f32)
    b = np.asarray(b, _f32)
    if a.shape != b.shape:
        raise ValueError(f"pyramid level shape mismatch {a.shape} vs {b.shape}")
    dot = (a * b).sum(axis=1, dtype=_f32)
    na = np.sqrt((a * a).sum(axis=1, dtype=_f32))
    nb = np.sqrt((b * b).sum(axis=1, dtype=_f32))
    denom = na * nb
    cos = np.where(denom > 0, dot / np.where(denom > 0, denom, _f32(1.0)), _f32(0.0))
    return _f32(1.0) - cos


def upsample_np(m: np.ndarray, out_hw: tuple[int, int]) -> np.ndarray:
    """Bilinear upsample (N, H, W) to (N, out_h, out_w), same half-pixel
    convention as the autodiff op."""
    n, h, w = m.shape
    oh, ow = out_hw
    wh = bilinear_weights(h, oh)
    ww = bilinear_weights(w, ow)
    return np.einsum("oh,nhw,pw->nop", wh, m, ww).astype(_f32)


def _gaussian_1d(sigma: float) -> np.ndarray:
    radius = max(1, int(round(4.0 * sigma)))
    xs = np.arange(-radius, radius + 1, dtype=np.float64)
    k = np.exp(-(xs * xs) / (2.0 * sigma * sigma))
    return (k / k.sum()).astype(_f32)


def gaussian_blur(m: np.ndarray, sigma: float) -> np.ndarray:
    """Separable Gaussian with a 4-sigma truncated kernel, replicate borders."""
    if sigma <= 0:
        return m
    k = _gaussian_1d(sigma)
    r = (k.size - 1) // 2
    padded = np.pad(m, ((r, r), (0, 0)), mode="edge")
    rows = np.zeros_like(m)
    for i, kv in enumerate(k):
        rows += kv * padded[i : i + m.shape[0], :]
    padded = np.pad(rows, ((0, 0), (r, r)), mode="edge")
    out = np.zeros_like(m)
    for i, kv in enumerate(k):
        out += kv * padded[:, i : i + m.shape[1]]
    return out


def anomaly_map(
    pyr_ref,
    pyr_hat,
    out_hw: tuple[int, int],
    layer_weights=None,
    sigma: float = 0.0,
) -> AnomalyMap:
    """Sum of upsampled per-level cosine distances, optionally smoothed.

    `pyr_ref` and `pyr_hat` are matching lists of (1, C, H, W) arrays; the
    default weights (all 1) give the plain per-level sum.  The image score
    is the max of the final map, taken after smoothing when enabled.
    """
    if len(pyr_ref) != len(pyr_hat):
        raise ValueError("pyramid length mismatch")
    if layer_weights is None:
        layer_weights = (1.0,) * len(pyr_ref)
    layer_weights = tuple(float(w) for w in layer_weights)
    if len(layer_weights) != len(pyr_ref):
        raise ValueError(f"need {len(pyr_ref)} layer weights, got {len(layer_weights)}")
    if any(w < 0 for w in layer_weights):
        raise ValueError("layer weights must be non-negative")
    if sum(layer_weights) <= 0:
        raise ValueError("layer weights sum to zero")
    total = np.zeros(out_hw, dtype=_f32)
    for w, ref, hat in zip(layer_weights, pyr_ref, pyr_hat):
        if w == 0.0:
            continue
        d = cosine_distance_np(ref, hat)
        total += _f32(w) * upsample_np(d, out_hw)[0]
    total = np.maximum(total, 0.0)
    if sigma > 0:
        total = gaussian_blur(total, sigma)
    return AnomalyMap(
        pixel_scores=total,
        image_score=float(total.max()),
        layer_weights=layer_weights,
        sigma=float(sigma),
    )


# ---------------------------------------------------------------------------
# rank metrics


def _check_binary_labels(labels: np.ndarray) -> np.ndarray:
    labels = np.asarray(labels)
    if labels.ndim != 1:
        raise ValueError("labels must be 1-D")
    if not np.all((labels == 0) | (labels == 1)):
        raise ValueError("labels must be 0 or 1")
    return labels.astype(np.int64)


def _midranks(scores: np.ndarray) -> np.ndarray:
    """1-based ranks with ties sharing the mean rank of their block."""
    order = np.argsort(scores, kind="stable")
    ranks = np.empty(scores.size, dtype=np.float64)
    s = scores[order]
    i = 0
    while i < s.size:
        j = i
        while j + 1 < s.size and s[j + 1] == s[i]:
            j += 1
        ranks[order[i : j + 1]] = 0.5 * (i + j) + 1.0
        i = j + 1
    return ranks


def auroc(scores, labels) -> float:
    """Mann-Whitney U / (n_pos * n_neg); ties count half."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = _check_binary_labels(labels)
    if scores.shape != labels.shape:
        raise ValueError("scores and labels differ in length")
    if not np.all(np.isfinite(scores)):
        raise ValueError("scores contain non-finite values")
    n_pos = int(labels.sum())
    n_neg = labels.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise ValueError("auroc needs both classes present")
    ranks = _midranks(scores)
    u = ranks[labels == 1].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


def average_precision(scores, labels) -> float:
    """AP with tied scores processed as a block at the block-end precision."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = _check_binary_labels(labels)
    if scores.shape != labels.shape:
        raise ValueError("scores and labels differ in length")
    if not np.all(np.isfinite(scores)):
        raise ValueError("scores contain non-finite values")
    n_pos = int(labels.sum())
    if n_pos == 0:
        raise ValueError("average precision needs at least one positive")
    order = np.argsort(-scores, kind="stable")
    s = scores[order]
    l = labels[order]
    ap = 0.0
    seen = 0
    tp = 0
    i = 0
    while i < s.size:
        j = i
        while j + 1 < s.size and s[j + 1] == s[i]:
            j += 1
        block_tp = int(l[i : j + 1].sum())
        tp += block_tp
        seen = j + 1
        ap += block_tp * (tp / seen)
        i = j + 1
    return float(ap / n_pos)


# ---------------------------------------------------------------------------
# PRO


def connected_components(mask: np.ndarray) -> tuple[np.ndarray, int]:
    """8-connected labeling of a binary mask: (labels 0=bg, 1..n), n."""
    mask = np.asarray(mask)
    labels = np.zeros(mask.shape, dtype=np.int32)
    h, w = mask.shape
    current = 0
    for sy in range(h):
        for sx in range(w):
            if not mask[sy, sx] or labels[sy, sx]:
                continue
            current += 1
            q = deque([(sy, sx)])
            labels[sy, sx] = current
            while q:
                y, x = q.popleft()
                for dy in (-1, 0, 1):
                    for dx in (-1, 0, 1):
                        ny, nx = y + dy, x + dx
                        if 0 <= ny < h and 0 <= nx < w and mask[ny, nx] and not labels[ny, nx]:
                            labels[ny, nx] = current
                            q.append((ny, nx))
    return labels, current


def pro(maps, masks, fpr_limit: float = 0.3, thresholds: int = 100) -> float:
    """Per-region overlap integrated against pooled FPR up to `fpr_limit`.

    Thresholds are linearly spaced between the global score min and max;
    binarization is score >= threshold.  The curve gets a (0, 0) anchor
    (the t -> infinity limit) and the area up to `fpr_limit` is normalized
    by `fpr_limit`.
    """
    if len(maps) != len(masks):
        raise ValueError("maps and masks differ in length")
    if not maps:
        raise ValueError("pro needs at least one map")
    arrs = [np.asarray(getattr(m, "pixel_scores", m), dtype=np.float64) for m in maps]
    bins = [np.asarray(m) > 0 for m in masks]
    for a, b in zip(arrs, bins):
        if a.shape != b.shape:
            raise ValueError(f"map/mask shape mismatch {a.shape} vs {b.shape}")
    components = []  # (map_index, boolean component mask, size)
    for i, b in enumerate(bins):
        labels, n = connected_components(b)
        for c in range(1, n + 1):
            comp = labels == c
            components.append((i, comp, int(comp.sum())))
    if not components:
        raise ValueError("pro needs at least one anomalous component")
    n_normal = sum(int((~b).sum()) for b in bins)
    if n_normal == 0:
        raise ValueError("pro needs at least one normal pixel")

    gmin = min(float(a.min()) for a in arrs)
    gmax = max(float(a.max()) for a in arrs)
    grid = np.linspace(gmin, gmax, thresholds)

    fprs = [0.0]
    overlaps = [0.0]
    for t in grid[::-1]:  # descending threshold = ascending fpr
        fp = sum(int(((a >= t) & ~b).sum()) for a, b in zip(arrs, bins))
        ov = 0.0
        for i, comp, size in components:
            ov += float((arrs[i][comp] >= t).sum()) / size
        fprs.append(fp / n_normal)
        overlaps.append(ov / len(components))

    area = 0.0
    for k in range(1, len(fprs)):
        f0, f1 = fprs[k - 1], fprs[k]
        o0, o1 = overlaps[k - 1], overlaps[k]
        if f1 <= f0:
            continue
        hi = min(f1, fpr_limit)
        if hi <= f0:
            break
        o_hi = o0 + (o1 - o0) * (hi - f0) / (f1 - f0)
        area += 0.5 * (o0 + o_hi) * (hi - f0)
        if f1 >= fpr_limit:
            break
    return float(area / fpr_limit)


# ---------------------------------------------------------------------------
# evaluation


@dataclass
class EvalReport:
    auroc_det: float
    auroc_seg: float
    ap_seg: float
    pro_seg: float | None
    n_images: int
    n_pixels: int
    n_anomalous_images: int

    def to_json(self) -> str:
        d = {
            "auroc_det": self.auroc_det,
            "auroc_seg": self.auroc_seg,
            "ap_seg": self.ap_seg,
            "pro_seg": self.pro_seg,
            "n_images": self.n_images,
            "n_pixels": self.n_pixels,
            "n_anomalous_images": self.n_anomalous_images,
        }
        return json.dumps(d, indent=2, sort_keys=True)


def worker_count() -> int:
    """REDI_THREADS: 0 or unset = auto, otherwise the given count."""
    raw = os.environ.get("REDI_THREADS", "0")
    try:
        n = int(raw)
    except ValueError:
        raise ValueError(f"REDI_THREADS must be an integer, got '{raw}'")
    if n < 0:
        raise ValueError("REDI_THREADS must be >= 0")
    return n if n > 0 else (os.cpu_count() or 1)


def evaluate(samples, score_fn, mask_fn, per_image_seg: bool = False) -> EvalReport:
    """Score every test sample and reduce to the four metrics.

    `score_fn(sample) -> AnomalyMap` must be pure (it runs under a thread
    pool when REDI_THREADS allows); results are reduced in sample order
    regardless of scheduling.  auroc_seg pools pixels across images by
    default; per_image_seg averages per-image AUROCs instead (over the
    images whose masks contain both classes).
    """
    samples = list(samples)
    if not samples:
        raise ValueError("no samples to evaluate")
    threads = worker_count()
    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            maps = list(pool.map(score_fn, samples))
    else:
        maps = [score_fn(s) for s in samples]
    masks = [np.asarray(mask_fn(s)) for s in samples]

    img_labels = np.array([s.label for s in samples])
    img_scores = np.array([m.image_score for m in maps])
    pixel_scores = np.concatenate([m.pixel_scores.reshape(-1) for m in maps])
    pixel_labels = np.concatenate([(mk > 0).astype(np.int64).reshape(-1) for mk in masks])

    if per_image_seg:
        per = [
            auroc(m.pixel_scores.reshape(-1), (mk > 0).astype(np.int64).reshape(-1))
            for m, mk in zip(maps, masks)
            if (mk > 0).any() and not (mk > 0).all()
        ]
        if not per:
            raise ValueError("per-image seg AUROC needs at least one mixed-pixel mask")
        auroc_seg = float(np.mean(per))
    else:
        auroc_seg = auroc(pixel_scores, pixel_labels)

    anom = [(m, mk) for m, mk, s in zip(maps, masks, samples) if s.label == 1]
    pro_seg = None
    if anom and any((mk > 0).any() for _m, mk in anom):
        pro_seg = pro([m for m, _ in anom], [mk for _, mk in anom])

    return EvalReport(
        auroc_det=auroc(img_scores, img_labels),
        auroc_seg=auroc_seg,
        ap_seg=average_precision(pixel_scores, pixel_labels),
        pro_seg=pro_seg,
        n_images=len(samples),
        n_pixels=int(pixel_scores.size),
        n_anomalous_images=int(img_labels.sum()),
    )
