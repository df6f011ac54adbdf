"""Corpus handling: MVTec-style directory layout plus a synthetic generator.

Layout::

    <root>/<category>/train/good/*.png
    <root>/<category>/test/<defect-type>/*.png      (type "good" = normal)
    <root>/<category>/ground_truth/<defect-type>/<stem>_mask.png

The synthetic generator writes the same layout so every downstream tool
reads one format.  Generation is a pure function of the spec (texture
family, counts, seed): rerunning it produces byte-identical trees.
"""

from __future__ import annotations

import logging
import os
import shutil
import tempfile
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .pngio import load_mask_png, load_png, save_mask_png, save_png
from .rng import Stream

_f32 = np.float32
log = logging.getLogger(__name__)


@dataclass(frozen=True)
class Sample:
    id: str  # "<split>/<type>/<stem>", lexicographically sortable
    path: Path
    label: int  # 0 normal, 1 anomalous
    defect: str
    mask_path: Path | None


@dataclass
class CorpusIndex:
    root: Path
    category: str
    train: list[Sample]
    test: list[Sample]


def load_mvtec_layout(root: str | Path, category: str) -> CorpusIndex:
    """Index a corpus; deterministic ordering, eager validation."""
    root = Path(root)
    base = root / category
    if not base.is_dir():
        raise FileNotFoundError(f"no category directory at {base}")

    train_dir = base / "train" / "good"
    train_paths = sorted(train_dir.glob("*.png")) if train_dir.is_dir() else []
    if not train_paths:
        raise ValueError(f"empty training split: no PNGs under {train_dir}")
    train = [
        Sample(id=f"train/good/{p.stem}", path=p, label=0, defect="good", mask_path=None)
        for p in train_paths
    ]

    test_dir = base / "test"
    gt_dir = base / "ground_truth"
    test: list[Sample] = []
    if test_dir.is_dir():
        for type_dir in sorted(p for p in test_dir.iterdir() if p.is_dir()):
            defect = type_dir.name
            for p in sorted(type_dir.glob("*.png")):
                if defect == "good":
                    stray = gt_dir / defect / f"{p.stem}_mask.png"
                    if stray.exists():
                        log.warning("mask present for normal sample %s; ignoring it", p)
                    test.append(Sample(f"test/good/{p.stem}", p, 0, "good", None))
                else:
                    mask = gt_dir / defect / f"{p.stem}_mask.png"
                    if not mask.is_file():
                        raise FileNotFoundError(f"anomalous sample {p} has no mask at {mask}")
                    test.append(Sample(f"test/{defect}/{p.stem}", p, 1, defect, mask))
    test.sort(key=lambda s: s.id)
    return CorpusIndex(root=root, category=category, train=train, test=test)


def load_sample_image(sample: Sample, size: int | None = None) -> np.ndarray:
    from .pngio import resize_bilinear

    img = load_png(sample.path)
    if size is not None and img.shape != (size, size):
        img = resize_bilinear(img, size, size)
    return img


def load_sample_mask(sample: Sample, h: int, w: int) -> np.ndarray:
    """Binary mask at (h, w); all zeros for normal samples."""
    if sample.mask_path is None:
        return np.zeros((h, w), dtype=np.uint8)
    return load_mask_png(sample.mask_path, expect_hw=(h, w))


# ---------------------------------------------------------------------------
# synthetic corpus

TEXTURES = ("stripes", "checker", "blobs")
DEFECTS = ("patch", "scratch", "hole")


@dataclass(frozen=True)
class SynthSpec:
    seed: int = 0
    image_size: int = 64
    n_train: int = 200
    n_test_normal: int = 30
    n_test_anomalous: int = 30
    texture: str = "stripes"
    defects: tuple[str, ...] = DEFECTS
    # defect area as a fraction of the image; the generator further enforces
    # a mean absolute contrast of at least 0.1 inside the defect
    area_range: tuple[float, float] = (0.02, 0.10)
    contrast_floor: float = 0.1


def _rot_coords(size: int, theta: float, ox: float = 0.0, oy: float = 0.0):
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    u = (xx - ox) * np.cos(theta) + (yy - oy) * np.sin(theta)
    v = -(xx - ox) * np.sin(theta) + (yy - oy) * np.cos(theta)
    return u, v


def _texture_stripes(size: int, st: Stream) -> np.ndarray:
    period = float(st.uniform(1, 11.0, 15.0)[0])
    theta = 0.5 + float(st.uniform(1, -0.2, 0.2)[0])
    phase = float(st.uniform(1, 0.0, 2.0 * np.pi)[0])
    amp = float(st.uniform(1, 0.25, 0.33)[0])
    u, _ = _rot_coords(size, theta)
    return (0.5 + amp * np.sin(2.0 * np.pi * u / period + phase)).astype(_f32)


def _texture_checker(size: int, st: Stream) -> np.ndarray:
    period = 6 + st.below(4)  # 6..9 px squares
    theta = 0.3 + float(st.uniform(1, -0.1, 0.1)[0])
    ox = float(st.uniform(1, 0.0, float(period))[0])
    oy = float(st.uniform(1, 0.0, float(period))[0])
    u, v = _rot_coords(size, theta, ox, oy)
    parity = (np.floor(u / period) + np.floor(v / period)) % 2
    return np.where(parity > 0.5, _f32(0.68), _f32(0.32)).astype(_f32)


def _texture_blobs(size: int, st: Stream) -> np.ndarray:
    acc = np.zeros((size, size), dtype=np.float64)
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    for _ in range(12):
        cx = float(st.uniform(1, 0.0, size)[0])
        cy = float(st.uniform(1, 0.0, size)[0])
        sg = float(st.uniform(1, 6.0, 12.0)[0])
        sign = 1.0 if st.below(2) else -1.0
        acc += sign * np.exp(-((xx - cx) ** 2 + (yy - cy) ** 2) / (2.0 * sg * sg))
    peak = np.abs(acc).max()
    if peak > 0:
        acc /= peak
    return (0.5 + 0.3 * acc).astype(_f32)


_TEXTURE_FN = {"stripes": _texture_stripes, "checker": _texture_checker, "blobs": _texture_blobs}


def _defect_patch(img: np.ndarray, st: Stream, area: float):
    size = img.shape[0]
    px = max(int(round(np.sqrt(area) * size)), 3)
    aspect = float(st.uniform(1, 0.6, 1.6)[0])
    ph = min(max(int(round(px * aspect)), 3), size - 2)
    pw = min(max(int(round(px / aspect)), 3), size - 2)
    y0 = st.below(size - ph)
    x0 = st.below(size - pw)
    mask = np.zeros_like(img, dtype=np.uint8)
    mask[y0 : y0 + ph, x0 : x0 + pw] = 1
    region = img[y0 : y0 + ph, x0 : x0 + pw]
    # shift away from the nearer intensity bound so clipping keeps contrast
    delta = float(st.uniform(1, 0.28, 0.42)[0])
    if float(region.mean()) > 0.5:
        delta = -delta
    out = img.copy()
    out[y0 : y0 + ph, x0 : x0 + pw] = np.clip(region + _f32(delta), 0.0, 1.0)
    return out, mask


def _defect_scratch(img: np.ndarray, st: Stream, area: float):
    size = img.shape[0]
    thickness = 1 + st.below(2)
    target_px = max(int(area * size * size), int(0.012 * size * size))
    length = min(target_px // thickness, int(1.8 * size))
    x0, y0 = st.below(size), st.below(size)
    ang = float(st.uniform(1, 0.0, 2.0 * np.pi)[0])
    mask = np.zeros_like(img, dtype=np.uint8)
    pts = max(length, 2) * 4
    # two joined segments make a dog-leg
    mid = np.array([x0 + 0.5 * length * np.cos(ang), y0 + 0.5 * length * np.sin(ang)])
    ang2 = ang + float(st.uniform(1, -0.7, 0.7)[0])
    end = mid + np.array([0.5 * length * np.cos(ang2), 0.5 * length * np.sin(ang2)])
    for a, b in (((x0, y0), mid), (mid, end)):
        ts = np.linspace(0.0, 1.0, pts)
        xs = np.clip(np.round(a[0] * (1 - ts) + b[0] * ts), 0, size - 1).astype(int)
        ys = np.clip(np.round(a[1] * (1 - ts) + b[1] * ts), 0, size - 1).astype(int)
        for dy in range(thickness):
            for dx in range(thickness):
                mask[np.clip(ys + dy, 0, size - 1), np.clip(xs + dx, 0, size - 1)] = 1
    sel = mask == 1
    value = _f32(0.04) if float(img[sel].mean()) > 0.5 else _f32(0.96)
    out = img.copy()
    out[sel] = value
    return out, mask


def _defect_hole(img: np.ndarray, st: Stream, area: float):
    size = img.shape[0]
    r = max(np.sqrt(area * size * size / np.pi), 2.5)
    ry = r * float(st.uniform(1, 0.7, 1.3)[0])
    rx = max((area * size * size) / (np.pi * ry), 2.0)
    cy = ry + st.below(max(int(size - 2 * ry), 1))
    cx = rx + st.below(max(int(size - 2 * rx), 1))
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    mask = (((yy - cy) / ry) ** 2 + ((xx - cx) / rx) ** 2 <= 1.0).astype(np.uint8)
    out = img.copy()
    out[mask == 1] = 0.0
    return out, mask


_DEFECT_FN = {"patch": _defect_patch, "scratch": _defect_scratch, "hole": _defect_hole}


def _apply_defect(img: np.ndarray, kind: str, st: Stream, spec: SynthSpec):
    """Draw a defect that honors the area and contrast contracts.

    Border clipping can shrink a draw below the 1% area floor, so failed
    draws retry on derived sub-streams; the loop is deterministic and short.
    """
    for attempt in range(8):
        sub = st.derive("try", attempt)
        area = float(sub.uniform(1, *spec.area_range)[0])
        out, mask = _DEFECT_FN[kind](img, sub, area)
        sel = mask == 1
        frac = float(sel.sum()) / img.size
        if not (0.01 <= frac <= 0.15):
            continue
        # strengthen until the contrast floor holds; bounded, deterministic
        for _ in range(4):
            contrast = float(np.abs(out[sel].astype(np.float64) - img[sel].astype(np.float64)).mean())
            if contrast >= spec.contrast_floor:
                return out, mask
            out[sel] = np.clip(2.0 * out[sel] - img[sel], 0.0, 1.0)  # push further from original
        contrast = float(np.abs(out[sel].astype(np.float64) - img[sel].astype(np.float64)).mean())
        if contrast >= spec.contrast_floor:
            return out, mask
    raise RuntimeError(f"could not draw a valid '{kind}' defect in 8 attempts")


def generate_synthetic(spec: SynthSpec, out_root: str | Path, force: bool = False) -> CorpusIndex:
    """Write a corpus in the standard layout; atomic via temp dir + rename."""
    if spec.texture not in _TEXTURE_FN:
        raise ValueError(f"unknown texture '{spec.texture}'; choose from {TEXTURES}")
    for d in spec.defects:
        if d not in _DEFECT_FN:
            raise ValueError(f"unknown defect kind '{d}'; choose from {DEFECTS}")
    if spec.n_test_anomalous > 0 and not spec.defects:
        raise ValueError("anomalous samples requested but no defect kinds enabled")

    out_root = Path(out_root)
    final = out_root / spec.texture
    if final.exists():
        if not force:
            raise FileExistsError(f"{final} already exists; pass force to overwrite")
        shutil.rmtree(final)
    out_root.mkdir(parents=True, exist_ok=True)

    root_stream = Stream.from_seed(spec.seed).derive(f"synth/{spec.texture}/{spec.image_size}")
    texture_fn = _TEXTURE_FN[spec.texture]

    tmp = Path(tempfile.mkdtemp(prefix=".tmp-synth-", dir=out_root))
    try:
        train_dir = tmp / "train" / "good"
        train_dir.mkdir(parents=True)
        for i in range(spec.n_train):
            img = texture_fn(spec.image_size, root_stream.derive("train", i))
            save_png(train_dir / f"{i:03d}.png", img)

        good_dir = tmp / "test" / "good"
        good_dir.mkdir(parents=True)
        for i in range(spec.n_test_normal):
            img = texture_fn(spec.image_size, root_stream.derive("test-normal", i))
            save_png(good_dir / f"{i:03d}.png", img)

        for i in range(spec.n_test_anomalous):
            st = root_stream.derive("test-anomalous", i)
            img = texture_fn(spec.image_size, st.derive("texture"))
            kind = spec.defects[st.below(len(spec.defects))]
            out, mask = _apply_defect(img, kind, st.derive("defect"), spec)
            img_dir = tmp / "test" / kind
            gt_dir = tmp / "ground_truth" / kind
            img_dir.mkdir(parents=True, exist_ok=True)
            gt_dir.mkdir(parents=True, exist_ok=True)
            save_png(img_dir / f"{i:03d}.png", out)
            save_mask_png(gt_dir / f"{i:03d}_mask.png", mask)

        os.replace(tmp, final)
    except Exception:
        shutil.rmtree(tmp, ignore_errors=True)
        raise
    return load_mvtec_layout(out_root, spec.texture)
