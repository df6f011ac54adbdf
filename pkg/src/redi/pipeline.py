"""Persisted pipeline stages: checkpoint I/O and single-image scoring.

A recovery checkpoint is self-contained for inference: besides the network
weights it stores the frozen backbone used for prompt matching and the
prompt pool (training images plus their descriptors), so scoring a new
image needs no corpus on disk.  A discrimination checkpoint stores the
recalibration net together with the frozen backbone it was trained
against.  The two stages keep independent backbones on purpose; they may
legitimately be built from different specs.
"""

from __future__ import annotations

import subprocess
from dataclasses import dataclass
from datetime import datetime, timezone
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .checkpoint import load_checkpoint, save_checkpoint
from .discriminate import Backbone, FrbModel, aggregate, extract_pyramid, frb_forward
from .pngio import resize_bilinear
from .recover import (
    PromptPool,
    RecoverModel,
    iihp_input,
    imi_input,
    inference_mask,
    recover_forward,
    render_sketch,
    select_prompt,
)
from .scoring import AnomalyMap, anomaly_map

_f32 = np.float32


def _build_stamp() -> str:
    """Best-effort source revision; empty when not running from a git tree."""
    try:
        out = subprocess.run(
            ["git", "describe", "--always"],
            cwd=Path(__file__).resolve().parent,
            capture_output=True,
            text=True,
            timeout=10,
        )
    except (OSError, subprocess.TimeoutExpired):
        return ""
    return out.stdout.strip() if out.returncode == 0 else ""


def run_metadata(config, reproducible: bool = False) -> dict:
    """Common checkpoint metadata: config echo, build stamp, timestamp.

    The timestamp is the one run-dependent field; --reproducible zeroes it
    so repeated runs produce byte-identical checkpoints.
    """
    created = "" if reproducible else datetime.now(timezone.utc).isoformat(timespec="seconds")
    return {"config": config.to_dict(), "build": _build_stamp(), "created": created}


def _param_tensors(prefix: str, params: dict[str, ad.DiffTensor]) -> dict[str, np.ndarray]:
    return {f"{prefix}.{name}": p.values for name, p in sorted(params.items())}


def _take_params(tensors: dict[str, np.ndarray], prefix: str) -> dict[str, ad.DiffTensor]:
    pre = prefix + "."
    out = {n[len(pre):]: ad.param(v, n[len(pre):]) for n, v in tensors.items() if n.startswith(pre)}
    if not out:
        raise ValueError(f"checkpoint holds no '{pre}*' tensors")
    return out


def _backbone_tensors(backbone: Backbone) -> dict[str, np.ndarray]:
    return {f"backbone.conv{i}.w": k for i, k in enumerate(backbone.kernels)}


def _take_backbone(meta: dict, tensors: dict[str, np.ndarray]) -> Backbone:
    kernels = tuple(tensors[f"backbone.conv{i}.w"] for i in range(4))
    return Backbone(
        spec=meta["backbone_spec"],
        widths=tuple(int(w) for w in meta["widths"]),
        kernels=kernels,
    )


# ---------------------------------------------------------------------------
# recovery stage


@dataclass
class RecoverBundle:
    model: RecoverModel
    backbone: Backbone | None  # prompt-matching backbone; None for masking variants
    pool: PromptPool | None
    meta: dict


def save_recover_checkpoint(
    path,
    model: RecoverModel,
    config,
    backbone: Backbone | None = None,
    pool: PromptPool | None = None,
    reproducible: bool = False,
) -> None:
    if (model.variant == "hip") != (backbone is not None and pool is not None):
        raise ValueError("hip checkpoints need backbone and pool; masking variants take neither")
    meta = {
        "kind": "recover",
        "variant": model.variant,
        "image_size": model.image_size,
        "widths": list(model.widths),
        "hog_bins": model.hog_bins,
        "hog_cell": model.hog_cell,
        "backbone_spec": backbone.spec if backbone else None,
        "pool_ids": list(pool.ids) if pool else None,
        **run_metadata(config, reproducible),
    }
    tensors = _param_tensors("model", model.params)
    if backbone is not None:
        tensors.update(_backbone_tensors(backbone))
    if pool is not None:
        tensors["pool.images"] = pool.images
        tensors["pool.descriptors"] = pool.descriptors
    save_checkpoint(path, meta, tensors)


def load_recover_checkpoint(path) -> RecoverBundle:
    meta, tensors = load_checkpoint(path)
    if meta.get("kind") != "recover":
        raise ValueError(f"'{path}' is not a recovery checkpoint (kind={meta.get('kind')!r})")
    model = RecoverModel(
        params=_take_params(tensors, "model"),
        widths=tuple(int(w) for w in meta["widths"]),
        image_size=int(meta["image_size"]),
        variant=meta["variant"],
        hog_bins=int(meta["hog_bins"]),
        hog_cell=int(meta["hog_cell"]),
    )
    backbone = pool = None
    if meta["variant"] == "hip":
        backbone = _take_backbone(meta, tensors)
        pool = PromptPool(
            ids=list(meta["pool_ids"]),
            descriptors=tensors["pool.descriptors"],
            images=tensors["pool.images"],
        )
    return RecoverBundle(model=model, backbone=backbone, pool=pool, meta=meta)


# ---------------------------------------------------------------------------
# discrimination stage


@dataclass
class DiscBundle:
    frb: FrbModel
    backbone: Backbone
    meta: dict


def save_disc_checkpoint(
    path,
    frb: FrbModel,
    backbone: Backbone,
    config,
    recover_variant: str,
    reproducible: bool = False,
) -> None:
    meta = {
        "kind": "disc",
        "widths": list(frb.widths),
        "backbone_spec": backbone.spec,
        "recover_variant": recover_variant,  # "hip"/"imi"/"iihp", or "none"
        **run_metadata(config, reproducible),
    }
    tensors = _param_tensors("frb", frb.params)
    tensors.update(_backbone_tensors(backbone))
    save_checkpoint(path, meta, tensors)


def load_disc_checkpoint(path) -> DiscBundle:
    meta, tensors = load_checkpoint(path)
    if meta.get("kind") != "disc":
        raise ValueError(f"'{path}' is not a discrimination checkpoint (kind={meta.get('kind')!r})")
    frb = FrbModel(params=_take_params(tensors, "frb"), widths=tuple(int(w) for w in meta["widths"]))
    return DiscBundle(frb=frb, backbone=_take_backbone(meta, tensors), meta=meta)


# ---------------------------------------------------------------------------
# scoring


class Scorer:
    """Recover-then-discriminate scoring of single grayscale images.

    The recovery bundle is optional; without one the raw image feeds the
    discriminator directly (the `--recover none` ablation).  The variant
    the discriminator was trained against must match what the scorer is
    given, otherwise its features are meaningless.
    """

    def __init__(
        self,
        disc: DiscBundle,
        recover: RecoverBundle | None = None,
        layer_weights=None,
        sigma: float = 0.0,
    ):
        self.disc = disc
        self.recover = recover
        self.layer_weights = layer_weights
        self.sigma = float(sigma)
        self.image_size = int(disc.meta["config"]["image_size"])

        trained_with = disc.meta.get("recover_variant", "none")
        given = recover.model.variant if recover is not None else "none"
        if trained_with != given:
            raise ValueError(
                f"discriminator was trained with recovery '{trained_with}' but got '{given}'"
            )
        if recover is not None and recover.model.image_size != self.image_size:
            raise ValueError(
                f"stage size mismatch: recovery {recover.model.image_size}, "
                f"discriminator {self.image_size}"
            )

    def _prepare(self, img: np.ndarray) -> np.ndarray:
        img = np.asarray(img, _f32)
        if img.ndim != 2:
            raise ValueError(f"expected a grayscale (H, W) image, got shape {img.shape}")
        if img.shape != (self.image_size, self.image_size):
            img = resize_bilinear(img, self.image_size, self.image_size)
        return img

    def recover_image(self, img: np.ndarray) -> np.ndarray:
        """The recovery stage alone: resized input -> recovered image."""
        x = self._prepare(img)
        if self.recover is None:
            return x
        model = self.recover.model
        if model.variant == "hip":
            sketch = render_sketch(x, model.hog_bins, model.hog_cell)
            prompt, _ = select_prompt(x, self.recover.pool, self.recover.backbone)
            in_a, in_b = sketch, prompt
        elif model.variant == "imi":
            in_a = in_b = imi_input(x, inference_mask(x))
        else:
            in_a = in_b = iihp_input(x, render_sketch(x, model.hog_bins, model.hog_cell), inference_mask(x))
        a = ad.constant(np.asarray(in_a, _f32)[None, None])
        b = ad.constant(np.asarray(in_b, _f32)[None, None])
        return recover_forward(model, a, b).values[0, 0]

    def score_image(self, img: np.ndarray) -> AnomalyMap:
        x = self._prepare(img)
        y = self.recover_image(x)
        pyr_ref = extract_pyramid(self.disc.backbone, x[None, None])
        pyr_rec = extract_pyramid(self.disc.backbone, y[None, None])
        f_hat = frb_forward(self.disc.frb, aggregate(self.disc.frb, pyr_rec))
        return anomaly_map(
            pyr_ref,
            [f.values for f in f_hat],
            out_hw=(self.image_size, self.image_size),
            layer_weights=self.layer_weights,
            sigma=self.sigma,
        )
