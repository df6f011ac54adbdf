"""Finite-difference verification of every differentiable op and both nets.

Each registered case builds a small seeded problem whose loss is a random
linear probe of the op output; analytic gradients from the tape are compared
entry-by-entry against central differences with relative error
|g - g_fd| / max(1, |g|, |g_fd|).  Inputs are sampled away from kinks
(relu at 0, sqrt at 0) because the subgradient convention there is pinned
by unit tests, not by finite differences.
"""

from __future__ import annotations

import contextlib
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .rng import Stream

_f32 = np.float32

DEFAULT_EPS = 1e-3
DEFAULT_TOL = 1e-3


def _signed_away_from_zero(st: Stream, shape, lo=0.1, hi=1.0) -> np.ndarray:
    """Values with |v| in [lo, hi]; keeps finite differences off the kinks."""
    n = int(np.prod(shape))
    mag = st.uniform(n, lo, hi)
    sign = np.where(st.uniform(n) < 0.5, _f32(-1.0), _f32(1.0))
    return (mag * sign).reshape(shape)


def _probe_loss(out: ad.DiffTensor, probe: np.ndarray) -> ad.DiffTensor:
    return ad.mean_all(ad.mul(out, ad.constant(probe)))


KINK_ASYM_TOL = 0.05


def check_gradients(
    loss_fn,
    params: dict[str, ad.DiffTensor],
    *,
    eps: float = DEFAULT_EPS,
    tol: float = DEFAULT_TOL,
    samples: int | None = None,
    sample_stream: Stream | None = None,
    skip_kinks: bool = False,
    refine: bool = False,
) -> dict[str, float]:
    """Max relative error per parameter tensor; raises nothing, just reports.

    `samples` caps the number of entries perturbed per tensor (seeded choice
    via `sample_stream`); None checks every entry.

    `skip_kinks` drops entries whose central bracket straddles a relu kink
    (one-sided slopes disagree), resampling a replacement.  Whole models
    need this: biases start at 0, so units with all-zero receptive fields
    sit exactly on the kink, where central differences measure half the
    up-slope while the pinned subgradient convention says 0.  A corrupted
    backward still fails under skipping because its error is present on
    smooth entries too.

    `refine` additionally combines central differences at eps and eps/2
    (Richardson step, cancels the cubic truncation term).  Deep composites
    with normalizing losses (cosine, gradient-magnitude ratios) have large
    third derivatives that pollute a single secant at eps=1e-3; the
    analytic gradients were separately validated against a float64 oracle.
    """
    ad.zero_grads(params)
    with ad.Tape() as tape:
        loss = loss_fn()
    tape.backward(loss)
    analytic = {k: (p.grad.copy() if p.grad is not None else np.zeros_like(p.values)) for k, p in params.items()}
    l0 = float(loss.values)

    errs: dict[str, float] = {}
    for name, p in params.items():
        flat = p.values.reshape(-1)
        n = flat.size
        if samples is not None and n > samples:
            if sample_stream is None:
                raise ValueError("samples set but no sample_stream given")
            budget = samples * 6 if skip_kinks else samples
            seen: set[int] = set()
            while len(seen) < min(budget, n):
                seen.add(sample_stream.below(n))
            candidates = sorted(seen)
            want = samples
        else:
            candidates = list(range(n))
            want = n
        ga = analytic[name].reshape(-1)
        worst = 0.0
        verified = 0
        for i in candidates:
            if verified >= want:
                break
            orig = flat[i]

            def central(e):
                hp = _f32(orig) + _f32(e)
                hm = _f32(orig) - _f32(e)
                flat[i] = hp
                lp = float(loss_fn().values)
                flat[i] = hm
                lm = float(loss_fn().values)
                flat[i] = orig
                return (lp - lm) / (float(hp) - float(hm)), lp, lm, float(hp), float(hm)

            fd, lp, lm, hpf, hmf = central(eps)
            if skip_kinks:
                fdr = (lp - l0) / (hpf - float(orig))
                fdl = (l0 - lm) / (float(orig) - hmf)
                if abs(fdr - fdl) > KINK_ASYM_TOL * max(1.0, abs(fdr), abs(fdl)):
                    continue
            if refine:
                fd_half, *_ = central(eps / 2)
                fd = (4.0 * fd_half - fd) / 3.0
            g = float(ga[i])
            rel = abs(g - fd) / max(1.0, abs(g), abs(fd))
            if rel > worst:
                worst = rel
            verified += 1
        errs[name] = worst
    return errs


# ---------------------------------------------------------------------------
# op cases


def _case_binary(op, st: Stream, lo=0.1, hi=1.0, positive=False):
    shape = (3, 4)
    if positive:
        a = ad.param(st.uniform(12, lo, hi).reshape(shape), "a")
        b = ad.param(st.uniform(12, lo, hi).reshape(shape), "b")
    else:
        a = ad.param(_signed_away_from_zero(st, shape, lo, hi), "a")
        b = ad.param(_signed_away_from_zero(st, shape, lo, hi), "b")
    probe = _signed_away_from_zero(st, shape)
    return lambda: _probe_loss(op(a, b), probe), {"a": a, "b": b}


def _case_unary(op, st: Stream, shape=(3, 4), lo=0.1, hi=1.0, positive=False, out_shape=None):
    vals = st.uniform(int(np.prod(shape)), lo, hi).reshape(shape) if positive else _signed_away_from_zero(st, shape, lo, hi)
    t = ad.param(vals, "t")
    probe = _signed_away_from_zero(st, out_shape if out_shape is not None else shape)
    return lambda: _probe_loss(op(t), probe), {"t": t}


def _case_conv2d(st: Stream):
    x = ad.param(_signed_away_from_zero(st, (2, 2, 6, 5)), "x")
    k = ad.param(_signed_away_from_zero(st, (3, 2, 3, 3), 0.1, 0.6), "k")
    probe = _signed_away_from_zero(st, (2, 3, 3, 3))  # out: (6+2-3)//2+1=3, (5+2-3)//2+1=3
    return lambda: _probe_loss(ad.conv2d(x, k, stride=2, padding=1), probe), {"x": x, "k": k}


def _case_conv2d_transpose(st: Stream):
    x = ad.param(_signed_away_from_zero(st, (2, 3, 4, 4)), "x")
    k = ad.param(_signed_away_from_zero(st, (3, 2, 3, 3), 0.1, 0.6), "k")
    probe = _signed_away_from_zero(st, (2, 2, 7, 7))  # (4-1)*2-2+3 = 7
    return lambda: _probe_loss(ad.conv2d_transpose(x, k, stride=2, padding=1), probe), {"x": x, "k": k}


def _case_bias(st: Stream):
    t = ad.param(_signed_away_from_zero(st, (2, 3, 4, 4)), "t")
    b = ad.param(_signed_away_from_zero(st, (3,)), "b")
    probe = _signed_away_from_zero(st, (2, 3, 4, 4))
    return lambda: _probe_loss(ad.add_channel_bias(t, b), probe), {"t": t, "b": b}


def _case_avg_pool2(st: Stream):
    return _case_unary(ad.avg_pool2, st, shape=(2, 3, 4, 6), out_shape=(2, 3, 2, 3))


def _case_concat(st: Stream):
    parts = [
        ad.param(_signed_away_from_zero(st, (2, 2, 3, 3)), "p0"),
        ad.param(_signed_away_from_zero(st, (2, 1, 3, 3)), "p1"),
        ad.param(_signed_away_from_zero(st, (2, 3, 3, 3)), "p2"),
    ]
    probe = _signed_away_from_zero(st, (2, 6, 3, 3))
    return lambda: _probe_loss(ad.concat_channels(parts), probe), {p.name: p for p in parts}


def _case_replicate_pad(st: Stream):
    t = ad.param(_signed_away_from_zero(st, (2, 2, 3, 4)), "t")
    probe = _signed_away_from_zero(st, (2, 2, 7, 8))
    return lambda: _probe_loss(ad.replicate_pad(t, 2), probe), {"t": t}


def _case_bilinear(st: Stream):
    t = ad.param(_signed_away_from_zero(st, (1, 2, 3, 4)), "t")
    probe = _signed_away_from_zero(st, (1, 2, 6, 8))
    return lambda: _probe_loss(ad.bilinear_upsample(t, 2), probe), {"t": t}


def _case_softmax(st: Stream):
    return _case_unary(ad.softmax_channels, st, shape=(2, 4, 3, 3))


def _case_softmax_spatial(st: Stream):
    return _case_unary(ad.softmax_spatial, st, shape=(2, 4, 3, 3))


def _case_gram(st: Stream):
    t = ad.param(_signed_away_from_zero(st, (2, 3, 2, 2)), "t")
    probe = _signed_away_from_zero(st, (2, 4, 4))
    return lambda: _probe_loss(ad.gram_locations(t), probe), {"t": t}


def _case_cosine(st: Stream):
    a = ad.param(_signed_away_from_zero(st, (2, 3, 3, 3), 0.2, 1.0), "a")
    b = ad.param(_signed_away_from_zero(st, (2, 3, 3, 3), 0.2, 1.0), "b")
    probe = _signed_away_from_zero(st, (2, 3, 3))
    return lambda: _probe_loss(ad.cosine_distance_map(a, b), probe), {"a": a, "b": b}


def _case_msgms(st: Stream):
    # random pixels keep the gradient magnitudes away from the sqrt kink
    from .recover import msgms_loss

    y = ad.param(st.uniform(64, 0.1, 0.9).reshape(1, 1, 8, 8), "y")
    x = ad.param(st.uniform(64, 0.1, 0.9).reshape(1, 1, 8, 8), "x")
    return lambda: msgms_loss(y, x, scales=2), {"y": y, "x": x}


def _case_recover_loss(st: Stream):
    from .recover import recover_loss

    y = ad.param(st.uniform(64, 0.1, 0.9).reshape(1, 1, 8, 8), "y")
    x = ad.param(st.uniform(64, 0.1, 0.9).reshape(1, 1, 8, 8), "x")
    return lambda: recover_loss(y, x, lam_m=1.0, scales=2), {"y": y, "x": x}


def _case_disc_loss(st: Stream):
    from .discriminate import disc_loss

    f_hat = [ad.param(_signed_away_from_zero(st, (1, 4, s, s), 0.2, 1.0), f"f{s}") for s in (4, 2)]
    f_ref = [ad.constant(_signed_away_from_zero(st, (1, 4, s, s), 0.2, 1.0)) for s in (4, 2)]
    return lambda: disc_loss(f_hat, f_ref, lam_s=1.0), {p.name: p for p in f_hat}


def _case_sum_axes(st: Stream):
    t = ad.param(_signed_away_from_zero(st, (2, 3, 4)), "t")
    probe = _signed_away_from_zero(st, (2, 4))
    return lambda: _probe_loss(ad.sum_axes(t, (1,)), probe), {"t": t}


def _case_mean_all(st: Stream):
    t = ad.param(_signed_away_from_zero(st, (3, 4)), "t")
    probe = _signed_away_from_zero(st, ())
    return lambda: _probe_loss(ad.mean_all(t), probe), {"t": t}


OP_CASES = {
    "add": lambda st: _case_binary(ad.add, st),
    "sub": lambda st: _case_binary(ad.sub, st),
    "mul": lambda st: _case_binary(ad.mul, st),
    "div": lambda st: _case_binary(ad.div, st, lo=0.5, hi=1.5, positive=True),
    "affine": lambda st: _case_unary(lambda t: ad.affine(t, 0.7, 0.3), st),
    "relu": lambda st: _case_unary(ad.relu, st),
    "leaky_relu": lambda st: _case_unary(lambda t: ad.leaky_relu(t, 0.1), st),
    "sigmoid": lambda st: _case_unary(ad.sigmoid, st, lo=0.0, hi=2.0),
    "sqrt": lambda st: _case_unary(ad.sqrt, st, lo=0.2, hi=2.0, positive=True),
    "sum": _case_sum_axes,
    "mean": _case_mean_all,
    "conv2d": _case_conv2d,
    "conv2d_transpose": _case_conv2d_transpose,
    "bias": _case_bias,
    "avg_pool2": _case_avg_pool2,
    "concat": _case_concat,
    "replicate_pad": _case_replicate_pad,
    "bilinear": _case_bilinear,
    "softmax_c": _case_softmax,
    "softmax_s": _case_softmax_spatial,
    "gram": _case_gram,
    "cosine_map": _case_cosine,
    "msgms": _case_msgms,
    "recover_loss": _case_recover_loss,
    "disc_loss": _case_disc_loss,
}


def check_op(name: str, seed: int, eps: float = DEFAULT_EPS) -> dict[str, float]:
    if name not in OP_CASES:
        raise KeyError(f"unknown op '{name}'; known: {sorted(OP_CASES)}")
    st = Stream.from_seed(seed).derive(f"gradcheck/{name}")
    loss_fn, params = OP_CASES[name](st)
    return check_gradients(loss_fn, params, eps=eps)


# ---------------------------------------------------------------------------
# whole-model cases (16x16 instances)


def _generic_point(params: dict[str, ad.DiffTensor], st: Stream) -> None:
    """Move biases off the zero-init point before finite differencing.

    At init every bias is exactly 0, which is degenerate for FD: units with
    all-zero receptive fields sit exactly on the relu kink, and the heads
    emit features whose norms are comparable to what an eps-sized bias step
    moves them by, so the central secant leaves the linearization regime.
    The analytic gradients themselves are point-independent code paths, so
    checking at a seeded generic point verifies the same backward functions.
    """
    for name, p in params.items():
        if name.endswith(".b"):
            p.values[...] = _signed_away_from_zero(st.derive(name), p.values.shape, 0.05, 0.15)


def check_recover_model(seed: int, samples: int = 4) -> dict[str, float]:
    """FD-verify the full recovery architecture through a linear probe head.

    The probe (random-weighted mean of the output) keeps the checked loss
    smooth except for relu point-kinks, which the asymmetry filter skips.
    The training losses themselves (l2, msgms) have their own dedicated op
    cases on conditioned inputs; their composition with the net is exercised
    here structurally and validated against a float64 oracle in the tests.
    """
    from .recover import RecoverModel, recover_forward

    st = Stream.from_seed(seed).derive("gradcheck/recover")
    model = RecoverModel.build(st.derive("init"), image_size=16)
    _generic_point(model.params, st.derive("point"))
    a = st.derive("in").uniform(16 * 16, 0.05, 0.95).reshape(1, 1, 16, 16)
    b = st.derive("prompt").uniform(16 * 16, 0.05, 0.95).reshape(1, 1, 16, 16)
    probe = _signed_away_from_zero(st.derive("probe"), (1, 1, 16, 16))

    def loss_fn():
        y = recover_forward(model, ad.constant(a), ad.constant(b))
        return _probe_loss(y, probe)

    return check_gradients(loss_fn, model.params, samples=samples, sample_stream=st.derive("sample"), skip_kinks=True, refine=True)


def check_disc_model(seed: int, samples: int = 4) -> dict[str, float]:
    """FD-verify the full aggregation + recalibration net through probes."""
    from .discriminate import FrbModel, aggregate, build_backbone, extract_pyramid, frb_forward

    st = Stream.from_seed(seed).derive("gradcheck/disc")
    backbone = build_backbone(f"seeded:{seed}")
    y = st.derive("y").uniform(16 * 16, 0.05, 0.95).reshape(1, 1, 16, 16)
    r_y = [ad.constant(v) for v in extract_pyramid(backbone, y)]
    frb = FrbModel.build(st.derive("init"), backbone.widths)
    _generic_point(frb.params, st.derive("point"))
    probes = [_signed_away_from_zero(st.derive("probe", i), (1, c, 4 // (2 ** i), 4 // (2 ** i)))
              for i, c in enumerate(backbone.widths)]

    def loss_fn():
        f_y = frb_forward(frb, aggregate(frb, r_y))
        total = None
        for f, pr in zip(f_y, probes):
            term = _probe_loss(f, pr)
            total = term if total is None else ad.add(total, term)
        return total

    return check_gradients(loss_fn, frb.params, samples=samples, sample_stream=st.derive("sample"), skip_kinks=True, refine=True)


MODEL_CASES = {
    "recover16": check_recover_model,
    "disc16": check_disc_model,
}


# ---------------------------------------------------------------------------
# fault injection (negative control) and the full sweep


@contextlib.contextmanager
def corrupted_backward(op_name: str, factor: float = 2.0):
    """Scale the op's incoming output-gradient so backward is wrong on purpose."""
    if op_name not in _CORRUPT_TARGETS:
        raise KeyError(f"cannot corrupt unknown op '{op_name}'")
    fn_name = _CORRUPT_TARGETS[op_name]
    original = getattr(ad, fn_name)

    def wrapped(*args, **kwargs):
        out = original(*args, **kwargs)
        if ad._ACTIVE is not None and out.node_id is not None:
            node = ad._ACTIVE.nodes[out.node_id]
            orig_back = node.back
            node.back = lambda g: orig_back(g * _f32(factor))
        return out

    setattr(ad, fn_name, wrapped)
    try:
        yield
    finally:
        setattr(ad, fn_name, original)


# op-case key -> autodiff function name to patch
_CORRUPT_TARGETS = {
    "add": "add",
    "sub": "sub",
    "mul": "mul",
    "div": "div",
    "affine": "affine",
    "relu": "relu",
    "leaky_relu": "leaky_relu",
    "sigmoid": "sigmoid",
    "sqrt": "sqrt",
    "sum": "sum_axes",
    "conv2d": "conv2d",
    "conv2d_transpose": "conv2d_transpose",
    "bias": "add_channel_bias",
    "avg_pool2": "avg_pool2",
    "concat": "concat_channels",
    "replicate_pad": "replicate_pad",
    "bilinear": "bilinear_upsample",
    "softmax_c": "softmax_channels",
    "softmax_s": "softmax_spatial",
    "gram": "gram_locations",
    "cosine_map": "cosine_distance_map",
}


@dataclass
class CheckReport:
    tol: float
    results: list[tuple[str, int, str, float]] = field(default_factory=list)  # (check, seed, param, err)

    def record(self, check: str, seed: int, errs: dict[str, float]) -> None:
        for pname, err in errs.items():
            self.results.append((check, seed, pname, err))

    @property
    def worst(self) -> tuple[str, int, str, float]:
        return max(self.results, key=lambda r: r[3])

    @property
    def passed(self) -> bool:
        return all(err < self.tol for *_rest, err in self.results)

    def lines(self) -> list[str]:
        out = []
        by_check: dict[tuple[str, int], float] = {}
        for check, seed, _p, err in self.results:
            key = (check, seed)
            by_check[key] = max(by_check.get(key, 0.0), err)
        for (check, seed), err in by_check.items():
            status = "ok" if err < self.tol else "FAIL"
            out.append(f"{check} seed={seed} max_rel_err={err:.3e} {status}")
        return out


def run_all(seeds: int = 20, tol: float = DEFAULT_TOL, include_models: bool = True) -> CheckReport:
    report = CheckReport(tol=tol)
    for name in sorted(OP_CASES):
        for seed in range(seeds):
            report.record(f"op:{name}", seed, check_op(name, seed))
    if include_models:
        for name in sorted(MODEL_CASES):
            for seed in range(seeds):
                report.record(f"model:{name}", seed, MODEL_CASES[name](seed))
    return report
