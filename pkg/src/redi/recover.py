"""Recovery network: rebuild a clean image from descriptors plus a prompt.

Two independent encoders (one for the rendered gradient sketch, one for the
prompt image) are concatenated level by level and decoded with skip
connections from both.  The forward path never reads the original image;
everything it knows arrives through the sketch and the prompt.

Two masking ablations share the architecture: `imi` feeds a masked copy of
the image to both encoders, `iihp` splices the sketch into the masked-out
region.  Both keep masking at inference (with a content-keyed deterministic
rectangle): fed the unmasked image they would copy it straight through,
defect included, which is the shortcut the prompt design avoids.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import DiffTensor, NumericError
from .dataset import CorpusIndex, load_sample_image
from .descriptors import hog_compute, hog_render
from .optim import OptimizerState, adamw_step, decayed_lr
from .rng import Stream

_f32 = np.float32

VARIANTS = ("hip", "imi", "iihp")


# ---------------------------------------------------------------------------
# model


@dataclass
class RecoverModel:
    params: dict[str, DiffTensor]
    widths: tuple[int, ...]
    image_size: int
    variant: str = "hip"
    hog_bins: int = 9
    hog_cell: int = 8

    @classmethod
    def build(
        cls,
        init: Stream,
        image_size: int = 64,
        widths: tuple[int, ...] = (16, 32, 64),
        variant: str = "hip",
        hog_bins: int = 9,
        hog_cell: int = 8,
    ) -> "RecoverModel":
        if variant not in VARIANTS:
            raise ValueError(f"unknown variant '{variant}'; choose from {VARIANTS}")
        if image_size % (2 ** len(widths)) != 0:
            raise ValueError(f"image size {image_size} not divisible by {2 ** len(widths)}")
        p: dict[str, DiffTensor] = {}

        def conv(name, out_ch, in_ch, k):
            p[f"{name}.w"] = ad.param(init.derive(name).he_uniform((out_ch, in_ch, k, k), in_ch * k * k), f"{name}.w")
            p[f"{name}.b"] = ad.param(np.zeros(out_ch, _f32), f"{name}.b")

        def deconv(name, in_ch, out_ch, k):
            p[f"{name}.w"] = ad.param(init.derive(name).he_uniform((in_ch, out_ch, k, k), in_ch * k * k), f"{name}.w")
            p[f"{name}.b"] = ad.param(np.zeros(out_ch, _f32), f"{name}.b")

        for branch in ("sketch", "prompt"):
            in_ch = 1
            for i, w in enumerate(widths):
                conv(f"enc_{branch}.{i}", w, in_ch, 3)
                in_ch = w

        # decoder: deepest fused level is 2*widths[-1] channels
        ch = 2 * widths[-1]
        for i in range(len(widths) - 2, -1, -1):
            w = widths[i]
            deconv(f"dec.{i}.up", ch, w, 2)
            conv(f"dec.{i}.fuse", w, w + 2 * widths[i], 3)
            ch = w
        deconv("dec.out.up", ch, max(ch // 2, 4), 2)
        conv("dec.out.head", 1, max(ch // 2, 4), 3)
        return cls(params=p, widths=tuple(widths), image_size=image_size,
                   variant=variant, hog_bins=hog_bins, hog_cell=hog_cell)


def _conv(params, name, x, stride=1, padding=1):
    y = ad.conv2d(x, params[f"{name}.w"], stride=stride, padding=padding)
    return ad.add_channel_bias(y, params[f"{name}.b"])


def _deconv(params, name, x, stride=2):
    y = ad.conv2d_transpose(x, params[f"{name}.w"], stride=stride, padding=0)
    return ad.add_channel_bias(y, params[f"{name}.b"])


def _encode(params, branch: str, x, n_levels: int):
    feats = []
    for i in range(n_levels):
        x = ad.relu(_conv(params, f"enc_{branch}.{i}", x, stride=2, padding=1))
        feats.append(x)
    return feats


def recover_forward(model: RecoverModel, sketch, prompt) -> DiffTensor:
    """Batched forward: (N, 1, H, W) x2 -> (N, 1, H, W) in (0, 1)."""
    p = model.params
    n = len(model.widths)
    fa = _encode(p, "sketch", sketch, n)
    fb = _encode(p, "prompt", prompt, n)
    x = ad.concat_channels([fa[-1], fb[-1]])
    for i in range(n - 2, -1, -1):
        x = ad.relu(_deconv(p, f"dec.{i}.up", x))
        x = ad.concat_channels([x, fa[i], fb[i]])
        x = ad.relu(_conv(p, f"dec.{i}.fuse", x))
    x = ad.relu(_deconv(p, "dec.out.up", x))
    return ad.sigmoid(_conv(p, "dec.out.head", x))


def hip_forward(model: RecoverModel, hog_image: np.ndarray, prompt: np.ndarray) -> np.ndarray:
    """Single-image inference from the rendered sketch and the prompt."""
    a = np.asarray(hog_image, _f32)[None, None]
    b = np.asarray(prompt, _f32)[None, None]
    return recover_forward(model, ad.constant(a), ad.constant(b)).values[0, 0]


# ---------------------------------------------------------------------------
# masking-ablation inputs


def _check_binary_mask(m: np.ndarray) -> np.ndarray:
    m = np.asarray(m, _f32)
    vals = np.unique(m)
    if not np.all(np.isin(vals, (_f32(0.0), _f32(1.0)))):
        raise ValueError(f"mask must be binary 0/1, found values {vals[:5]}")
    return m


def imi_input(x: np.ndarray, mask: np.ndarray) -> np.ndarray:
    """Masked image: X * M (M == 0 marks the eliminated region)."""
    return np.asarray(x, _f32) * _check_binary_mask(mask)


def iihp_input(x: np.ndarray, sketch: np.ndarray, mask: np.ndarray) -> np.ndarray:
    """Masked image with the sketch spliced into the hole: X*M + H*(1-M)."""
    m = _check_binary_mask(mask)
    return np.asarray(x, _f32) * m + np.asarray(sketch, _f32) * (_f32(1.0) - m)


def random_rect_mask(size: int, st: Stream, frac: tuple[float, float] = (0.1, 0.4)) -> np.ndarray:
    """All-ones mask with one zeroed axis-aligned rectangle."""
    m = np.ones((size, size), dtype=_f32)
    h = max(int(float(st.uniform(1, *frac)[0]) * size), 1)
    w = max(int(float(st.uniform(1, *frac)[0]) * size), 1)
    y0 = st.below(size - h + 1)
    x0 = st.below(size - w + 1)
    m[y0 : y0 + h, x0 : x0 + w] = 0.0
    return m


def inference_mask(image: np.ndarray, frac: tuple[float, float] = (0.1, 0.4)) -> np.ndarray:
    """Eliminated-rectangle mask for a query at inference time.

    The masking variants must hide part of the query here exactly as during
    training; an unmasked query would be copied straight through, defect
    included.  There is no sample id at this point, so the stream is keyed
    on the pixel bytes, which keeps reruns bit-identical per image.
    """
    img = np.ascontiguousarray(np.asarray(image, _f32))
    digest = hashlib.blake2b(img.tobytes(), digest_size=8).digest()
    st = Stream.from_seed(0).derive("infer-mask", int.from_bytes(digest, "big"))
    return random_rect_mask(img.shape[-1], st, frac)


# ---------------------------------------------------------------------------
# prompt selection


@dataclass
class PromptPool:
    ids: list[str]
    descriptors: np.ndarray  # (n, c), spatial mean of the deepest backbone level
    images: np.ndarray  # (n, H, W)
    norms: np.ndarray = field(init=False)

    def __post_init__(self):
        self.norms = np.linalg.norm(self.descriptors.astype(np.float64), axis=1)


def build_prompt_pool(backbone, images: np.ndarray, ids: list[str]) -> PromptPool:
    """Descriptors for every candidate prompt, ordered lexicographically by id."""
    from .discriminate import extract_pyramid

    order = sorted(range(len(ids)), key=lambda i: ids[i])
    ids = [ids[i] for i in order]
    images = images[order]
    deepest = extract_pyramid(backbone, images[:, None, :, :])[-1]
    desc = deepest.mean(axis=(2, 3), dtype=_f32)
    return PromptPool(ids=ids, descriptors=desc, images=images)


def select_prompt(
    query_image: np.ndarray,
    pool: PromptPool,
    backbone,
    exclude_id: str | None = None,
) -> tuple[np.ndarray, str]:
    """Most-similar pool image by cosine over global descriptors.

    Ties resolve to the lexicographically smallest id (the pool is sorted,
    argmax takes the first maximum).  A zero-norm descriptor never wins
    unless every candidate is degenerate.
    """
    from .discriminate import extract_pyramid

    if not pool.ids:
        raise ValueError("prompt pool is empty")
    deepest = extract_pyramid(backbone, np.asarray(query_image, _f32)[None, None])[-1]
    q = deepest.mean(axis=(2, 3), dtype=np.float64)[0]
    qn = np.linalg.norm(q)
    denom = pool.norms * qn
    sims = np.where(denom > 0, (pool.descriptors.astype(np.float64) @ q) / np.where(denom > 0, denom, 1.0), -1.0)
    if exclude_id is not None:
        for i, pid in enumerate(pool.ids):
            if pid == exclude_id:
                sims[i] = -np.inf
    best = int(np.argmax(sims))
    if not np.isfinite(sims[best]):
        raise ValueError("prompt pool has no eligible member (query was the only candidate)")
    return pool.images[best], pool.ids[best]


# ---------------------------------------------------------------------------
# losses


def l2_loss(y, x) -> DiffTensor:
    d = ad.sub(y, x if isinstance(x, DiffTensor) else ad.constant(np.asarray(x, _f32)))
    return ad.mean_all(ad.mul(d, d))


_PREWITT: np.ndarray | None = None


def _prewitt_kernel() -> np.ndarray:
    global _PREWITT
    if _PREWITT is None:
        from .descriptors import PREWITT_X, PREWITT_Y

        _PREWITT = np.stack([PREWITT_X, PREWITT_Y])[:, None, :, :].astype(_f32)
    return _PREWITT


def _gradient_magnitude(t) -> DiffTensor:
    g = ad.conv2d(ad.replicate_pad(t, 1), ad.constant(_prewitt_kernel()), stride=1, padding=0)
    return ad.sqrt(ad.sum_axes(ad.mul(g, g), (1,)))


def msgms_loss(y, x, scales: int = 4, c: float = 0.0026) -> DiffTensor:
    """Multi-scale gradient-magnitude similarity distance, mean of 1 - GMS.

    Each scale halves the previous one with 2x2 average pooling; spatial
    extents must stay even, so H and W must be divisible by 2**(scales-1).
    """
    y = y if isinstance(y, DiffTensor) else ad.constant(np.asarray(y, _f32))
    x = x if isinstance(x, DiffTensor) else ad.constant(np.asarray(x, _f32))
    if y.shape != x.shape:
        raise ValueError(f"msgms shape mismatch {y.shape} vs {x.shape}")
    h, w = y.shape[2], y.shape[3]
    div = 2 ** (scales - 1)
    if h % div or w % div:
        raise ValueError(f"extents {h}x{w} not divisible by {div} for {scales} scales")
    total: DiffTensor | None = None
    for s in range(scales):
        gy = _gradient_magnitude(y)
        gx = _gradient_magnitude(x)
        num = ad.affine(ad.mul(gy, gx), 2.0, c)
        den = ad.affine(ad.add(ad.mul(gy, gy), ad.mul(gx, gx)), 1.0, c)
        gms = ad.div(num, den)
        dist = ad.mean_all(ad.affine(gms, -1.0, 1.0))
        total = dist if total is None else ad.add(total, dist)
        if s + 1 < scales:
            y = ad.avg_pool2(y)
            x = ad.avg_pool2(x)
    return ad.scale(total, 1.0 / scales)


def recover_loss(y, x, lam_m: float = 1.0, scales: int = 4) -> DiffTensor:
    return ad.add(l2_loss(y, x), ad.scale(msgms_loss(y, x, scales=scales), lam_m))


# ---------------------------------------------------------------------------
# training


def render_sketch(img: np.ndarray, bins: int, cell: int) -> np.ndarray:
    grid = hog_compute(img, bins=bins, cell=cell)
    return hog_render(grid, img.shape[0], img.shape[1])


def train_recover(
    corpus: CorpusIndex,
    config,
    backbone=None,
    progress=None,
) -> tuple[RecoverModel, list[float]]:
    """Train the recovery net on the corpus' normal split.

    Returns the model and per-epoch mean losses.  Precomputes sketches and
    prompt choices once; only the network itself runs per step.  Aborts with
    NumericError on a non-finite loss.
    """
    from .discriminate import build_backbone

    root = Stream.from_seed(config.seed)
    model = RecoverModel.build(
        root.derive("recover-init"),
        image_size=config.image_size,
        widths=tuple(config.widths),
        variant=config.variant,
        hog_bins=config.hog_bins,
        hog_cell=config.hog_cell,
    )
    size = config.image_size
    images = np.stack([load_sample_image(s, size) for s in corpus.train])[:, None, :, :]
    n = images.shape[0]

    if config.variant == "hip":
        if backbone is None:
            backbone = build_backbone(config.backbone)
        sketches = np.stack(
            [render_sketch(images[i, 0], config.hog_bins, config.hog_cell) for i in range(n)]
        )[:, None, :, :]
        pool = build_prompt_pool(backbone, images[:, 0], [s.id for s in corpus.train])
        prompts = np.empty_like(images)
        for i, s in enumerate(corpus.train):
            prompts[i, 0], _ = select_prompt(images[i, 0], pool, backbone, exclude_id=s.id)
    elif config.variant == "iihp":
        sketches = np.stack(
            [render_sketch(images[i, 0], config.hog_bins, config.hog_cell) for i in range(n)]
        )[:, None, :, :]

    opt = OptimizerState.for_params(model.params, weight_decay=config.weight_decay)
    shuffle = root.derive("shuffle")
    mask_stream = root.derive("masks")
    history: list[float] = []
    for epoch in range(config.epochs):
        lr = decayed_lr(config.lr, epoch, config.epochs, config.decay_marks)
        perm = shuffle.permutation(n)
        epoch_loss = 0.0
        batches = 0
        for start in range(0, n, config.batch_size):
            idx = perm[start : start + config.batch_size]
            targets = images[idx]
            if config.variant == "hip":
                in_a = sketches[idx]
                in_b = prompts[idx]
            else:
                masks = np.stack(
                    [random_rect_mask(size, mask_stream.derive("m", int(epoch * n) + int(i))) for i in idx]
                )[:, None, :, :]
                if config.variant == "imi":
                    in_a = in_b = images[idx] * masks
                else:
                    in_a = in_b = images[idx] * masks + sketches[idx] * (1.0 - masks)
            ad.zero_grads(model.params)
            with ad.Tape() as tape:
                y = recover_forward(model, ad.constant(in_a), ad.constant(in_b))
                loss = recover_loss(y, ad.constant(targets), lam_m=config.lam_m, scales=config.msgms_scales)
            lval = float(loss.values)
            if not np.isfinite(lval):
                raise NumericError(f"non-finite recover loss at epoch {epoch} batch {batches}")
            tape.backward(loss)
            adamw_step(opt, model.params, {k: p.grad for k, p in model.params.items()}, lr)
            epoch_loss += lval
            batches += 1
        history.append(epoch_loss / max(batches, 1))
        if progress is not None:
            progress(epoch, history[-1])
    return model, history
