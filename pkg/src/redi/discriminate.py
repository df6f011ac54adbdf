"""Feature discrimination: frozen backbone plus a trainable recalibration net.

The backbone is a small frozen conv stack whose post-activation taps at
strides 4, 8 and 16 form a three-level pyramid.  The recalibration net
(FRB) aggregates the pyramid of a recovered image at the deepest scale and
re-emits one tensor per level; training pulls those toward the backbone
features of the original image with a per-location cosine distance plus a
self-correlation (gram) term.

At inference the same two pyramids yield the anomaly map: wherever the
recalibrated recovered features disagree with the original's features the
cosine distance lights up.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import DiffTensor, NumericError, conv_forward
from .dataset import CorpusIndex, load_sample_image
from .optim import OptimizerState, adamw_step, decayed_lr
from .rng import Stream

_f32 = np.float32

PYRAMID_STRIDES = (4, 8, 16)


# ---------------------------------------------------------------------------
# frozen backbone


@dataclass(frozen=True)
class Backbone:
    spec: str
    widths: tuple[int, int, int]
    kernels: tuple[np.ndarray, ...]  # conv weights, no biases, frozen


def build_backbone(spec: str, widths: tuple[int, int, int] = (16, 32, 64)) -> Backbone:
    """Construct the frozen feature extractor.

    `seeded:N` draws He-uniform kernels from a dedicated stream; `import:PATH`
    reads kernels from a checkpoint written by `save_backbone`.
    """
    if spec.startswith("seeded:"):
        try:
            seed = int(spec.split(":", 1)[1])
        except ValueError:
            raise ValueError(f"bad backbone spec '{spec}': seed must be an integer")
        st = Stream.from_seed(seed).derive("backbone")
        w0, w1, w2 = widths
        shapes = [(w0, 1, 3, 3), (w0, w0, 3, 3), (w1, w0, 3, 3), (w2, w1, 3, 3)]
        kernels = tuple(
            st.derive("conv", i).he_uniform(s, s[1] * 9) for i, s in enumerate(shapes)
        )
        return Backbone(spec=spec, widths=tuple(widths), kernels=kernels)
    if spec.startswith("import:"):
        from .checkpoint import load_checkpoint

        path = spec.split(":", 1)[1]
        meta, tensors = load_checkpoint(path)
        if meta.get("kind") != "backbone":
            raise ValueError(f"'{path}' is not a backbone checkpoint (kind={meta.get('kind')!r})")
        widths = tuple(meta["widths"])
        kernels = tuple(tensors[f"conv{i}.w"] for i in range(4))
        return Backbone(spec=spec, widths=widths, kernels=kernels)
    raise ValueError(f"bad backbone spec '{spec}': expected 'seeded:N' or 'import:PATH'")


def save_backbone(backbone: Backbone, path: str) -> None:
    from .checkpoint import save_checkpoint

    tensors = {f"conv{i}.w": k for i, k in enumerate(backbone.kernels)}
    save_checkpoint(path, {"kind": "backbone", "widths": list(backbone.widths)}, tensors)


def extract_pyramid(backbone: Backbone, x: np.ndarray) -> list[np.ndarray]:
    """Plain-array forward pass: (N, 1, H, W) -> taps at strides 4, 8, 16."""
    x = np.asarray(x, _f32)
    if x.ndim != 4 or x.shape[1] != 1:
        raise ValueError(f"expected (N, 1, H, W), got {x.shape}")
    if x.shape[2] % 16 != 0 or x.shape[3] % 16 != 0:
        raise ValueError(f"spatial dims must be divisible by 16, got {x.shape[2]}x{x.shape[3]}")
    taps = []
    for i, k in enumerate(backbone.kernels):
        x = np.maximum(conv_forward(x, k, stride=2, padding=1), 0.0)
        if i >= 1:
            taps.append(x)
    return taps


# ---------------------------------------------------------------------------
# recalibration net


@dataclass
class FrbModel:
    params: dict[str, DiffTensor]
    widths: tuple[int, int, int]

    @classmethod
    def build(cls, init: Stream, widths: tuple[int, int, int] = (16, 32, 64)) -> "FrbModel":
        p: dict[str, DiffTensor] = {}

        def conv(name, out_ch, in_ch, k=3):
            p[f"{name}.w"] = ad.param(init.derive(name).he_uniform((out_ch, in_ch, k, k), in_ch * k * k), f"{name}.w")
            p[f"{name}.b"] = ad.param(np.zeros(out_ch, _f32), f"{name}.b")

        def deconv(name, in_ch, out_ch, k=2):
            p[f"{name}.w"] = ad.param(init.derive(name).he_uniform((in_ch, out_ch, k, k), in_ch * k * k), f"{name}.w")
            p[f"{name}.b"] = ad.param(np.zeros(out_ch, _f32), f"{name}.b")

        w0, w1, w2 = widths
        conv("agg.0", w0, w0)
        conv("agg.1", w1, w1)
        conv("agg.2", w2, w2)
        conv("bottleneck", w2, w0 + w1 + w2)
        conv("head.2", w2, w2)
        deconv("up.1", w2, w1)
        conv("head.1", w1, w1)
        deconv("up.0", w1, w0)
        conv("head.0", w0, w0)
        return cls(params=p, widths=tuple(widths))


def _conv(params, name, x, stride=1):
    y = ad.conv2d(x, params[f"{name}.w"], stride=stride, padding=1)
    return ad.add_channel_bias(y, params[f"{name}.b"])


def aggregate(frb: FrbModel, pyramid) -> DiffTensor:
    """Fuse all levels at the deepest scale: per-level strided 3x3 convs."""
    if len(pyramid) != 3:
        raise ValueError(f"expected a 3-level pyramid, got {len(pyramid)} levels")
    tens = [t if isinstance(t, DiffTensor) else ad.constant(np.asarray(t, _f32)) for t in pyramid]
    outs = []
    for i, (t, stride) in enumerate(zip(tens, (4, 2, 1))):
        outs.append(ad.relu(_conv(frb.params, f"agg.{i}", t, stride=stride)))
    return ad.concat_channels(outs)


def frb_forward(frb: FrbModel, agg: DiffTensor) -> list[DiffTensor]:
    """Decode the aggregate back into one raw tensor per pyramid level."""
    p = frb.params
    x = ad.relu(_conv(p, "bottleneck", agg))
    f2 = _conv(p, "head.2", x)
    x = ad.relu(ad.add_channel_bias(ad.conv2d_transpose(x, p["up.1.w"], stride=2, padding=0), p["up.1.b"]))
    f1 = _conv(p, "head.1", x)
    x = ad.relu(ad.add_channel_bias(ad.conv2d_transpose(x, p["up.0.w"], stride=2, padding=0), p["up.0.b"]))
    f0 = _conv(p, "head.0", x)
    return [f0, f1, f2]


# ---------------------------------------------------------------------------
# losses


def cosine_loss(f_hat, f_ref, counter: list[int] | None = None) -> DiffTensor:
    """Mean over levels of mean per-location cosine distance."""
    if len(f_hat) != len(f_ref):
        raise ValueError("pyramid length mismatch")
    total = None
    for a, b in zip(f_hat, f_ref):
        b = b if isinstance(b, DiffTensor) else ad.constant(np.asarray(b, _f32))
        d = ad.mean_all(ad.cosine_distance_map(a, b, counter=counter))
        total = d if total is None else ad.add(total, d)
    return ad.scale(total, 1.0 / len(f_hat))


def self_correlation(f, axis: str = "channel") -> DiffTensor:
    """Location-by-location gram of softmax-normalized features: (N, HW, HW).

    `axis` picks the softmax direction: "channel" normalizes each location's
    channel vector (default), "spatial" normalizes each channel map.
    """
    f = f if isinstance(f, DiffTensor) else ad.constant(np.asarray(f, _f32))
    if axis == "channel":
        return ad.gram_locations(ad.softmax_channels(f))
    if axis == "spatial":
        return ad.gram_locations(ad.softmax_spatial(f))
    raise ValueError(f"sc axis must be 'channel' or 'spatial', got '{axis}'")


def self_correlation_loss(f_hat, f_ref, axis: str = "channel") -> DiffTensor:
    """Mean over levels and batch of the Frobenius gram difference."""
    total = None
    for a, b in zip(f_hat, f_ref):
        ga = self_correlation(a, axis)
        gb = self_correlation(b, axis)
        d = ad.sub(ga, gb)
        per_image = ad.sqrt(ad.sum_axes(ad.mul(d, d), (1, 2)))
        lvl = ad.mean_all(per_image)
        total = lvl if total is None else ad.add(total, lvl)
    return ad.scale(total, 1.0 / len(f_hat))


def disc_loss(
    f_hat,
    f_ref,
    lam_s: float = 1.0,
    sc_axis: str = "channel",
    counter: list[int] | None = None,
) -> DiffTensor:
    ld = cosine_loss(f_hat, f_ref, counter=counter)
    if lam_s == 0.0:
        return ld
    return ad.add(ld, ad.scale(self_correlation_loss(f_hat, f_ref, sc_axis), lam_s))


# ---------------------------------------------------------------------------
# training


def _recover_all(recover_model, backbone, images: np.ndarray, ids: list[str], progress=None) -> np.ndarray:
    """Recover every image (batched).  Without a model, images pass through.

    `backbone` here is the prompt-matching backbone (the one the recovery
    stage trained with), not necessarily the discrimination backbone.
    """
    if recover_model is None:
        return images.copy()
    from .recover import (
        build_prompt_pool,
        iihp_input,
        imi_input,
        inference_mask,
        recover_forward,
        render_sketch,
        select_prompt,
    )

    n = images.shape[0]
    if recover_model.variant == "hip":
        sk = np.stack(
            [render_sketch(images[i, 0], recover_model.hog_bins, recover_model.hog_cell) for i in range(n)]
        )[:, None]
        pool = build_prompt_pool(backbone, images[:, 0], ids)
        pr = np.empty_like(images)
        for i in range(n):
            pr[i, 0], _ = select_prompt(images[i, 0], pool, backbone, exclude_id=ids[i])
        in_a, in_b = sk, pr
    else:
        # masking ablations hide a content-keyed rectangle here too; handed
        # the unmasked image they would copy it through, defect included
        masked = np.empty_like(images)
        for i in range(n):
            m = inference_mask(images[i, 0])
            if recover_model.variant == "imi":
                masked[i, 0] = imi_input(images[i, 0], m)
            else:
                sketch = render_sketch(images[i, 0], recover_model.hog_bins, recover_model.hog_cell)
                masked[i, 0] = iihp_input(images[i, 0], sketch, m)
        in_a = in_b = masked
    out = np.empty_like(images)
    for start in range(0, n, 32):
        a = ad.constant(in_a[start : start + 32])
        b = ad.constant(in_b[start : start + 32])
        out[start : start + 32] = recover_forward(recover_model, a, b).values
        if progress is not None:
            progress(start)
    return out


def train_discriminate(
    corpus: CorpusIndex,
    config,
    recover_model=None,
    backbone: Backbone | None = None,
    prompt_backbone: Backbone | None = None,
    progress=None,
) -> tuple[FrbModel, list[float]]:
    """Train the recalibration net against frozen backbone targets.

    Recovered images and both feature pyramids are precomputed once; each
    step only runs the FRB.  `prompt_backbone` is what the recovery stage
    matches prompts with (defaults to the discrimination backbone).
    Returns the model and per-epoch mean losses.
    """
    if backbone is None:
        backbone = build_backbone(config.backbone)
    root = Stream.from_seed(config.seed)
    frb = FrbModel.build(root.derive("frb-init"), backbone.widths)

    size = config.image_size
    images = np.stack([load_sample_image(s, size) for s in corpus.train])[:, None, :, :]
    ids = [s.id for s in corpus.train]
    recovered = _recover_all(recover_model, prompt_backbone or backbone, images, ids)
    pyr_ref = extract_pyramid(backbone, images)
    pyr_rec = extract_pyramid(backbone, recovered)
    n = images.shape[0]

    opt = OptimizerState.for_params(frb.params, weight_decay=config.weight_decay)
    shuffle = root.derive("shuffle")
    history: list[float] = []
    degenerate = [0]
    for epoch in range(config.disc_epochs):
        lr = decayed_lr(config.disc_lr, epoch, config.disc_epochs, config.decay_marks)
        perm = shuffle.permutation(n)
        epoch_loss = 0.0
        batches = 0
        for start in range(0, n, config.batch_size):
            idx = perm[start : start + config.batch_size]
            ad.zero_grads(frb.params)
            with ad.Tape() as tape:
                f_hat = frb_forward(frb, aggregate(frb, [lvl[idx] for lvl in pyr_rec]))
                loss = disc_loss(
                    f_hat,
                    [ad.constant(lvl[idx]) for lvl in pyr_ref],
                    lam_s=config.lam_s,
                    sc_axis=config.sc_axis,
                    counter=degenerate,
                )
            lval = float(loss.values)
            if not np.isfinite(lval):
                raise NumericError(f"non-finite discrimination loss at epoch {epoch} batch {batches}")
            tape.backward(loss)
            adamw_step(opt, frb.params, {k: p.grad for k, p in frb.params.items()}, lr)
            epoch_loss += lval
            batches += 1
        history.append(epoch_loss / max(batches, 1))
        if progress is not None:
            progress(epoch, history[-1])
    return frb, history
