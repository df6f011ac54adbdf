"""Command-line surface: corpus generation, training, inference, evaluation.

Exit codes: 0 success, 1 usage or input error, 2 numeric failure (NaN
during training), 3 I/O failure.  Every command is deterministic given its
flags, config file, and seed; --reproducible zeroes the one timestamp
field written into checkpoints so reruns are byte-identical.  Progress
goes to stderr; stdout carries only the contracted outputs.
"""

from __future__ import annotations

import os

# Cap BLAS pools before numpy initializes.  REDI_THREADS is the only knob
# that fans work out here; nested BLAS threading would oversubscribe and
# its reduction order is not pinned across thread counts.
for _var in ("OPENBLAS_NUM_THREADS", "OMP_NUM_THREADS", "MKL_NUM_THREADS"):
    os.environ.setdefault(_var, "1")

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from .autodiff import NumericError
from .config import TrainConfig, load_config
from .dataset import (
    DEFECTS,
    TEXTURES,
    SynthSpec,
    generate_synthetic,
    load_mvtec_layout,
    load_sample_image,
    load_sample_mask,
)
from .discriminate import build_backbone, train_discriminate
from .gradcheck import OP_CASES, check_op, corrupted_backward, run_all
from .pipeline import (
    Scorer,
    load_disc_checkpoint,
    load_recover_checkpoint,
    save_disc_checkpoint,
    save_recover_checkpoint,
)
from .pngio import load_png, save_png
from .recover import build_prompt_pool, render_sketch, train_recover
from .scoring import evaluate


def _say(msg: str) -> None:
    print(msg, file=sys.stderr)


def _epoch_progress(label: str):
    def cb(epoch, loss):
        _say(f"{label} epoch {epoch + 1}: loss={loss:.6f}")

    return cb


def _resolve_category(root: str, category: str | None) -> str:
    """Default to the corpus' sole category; ambiguity is an input error."""
    if category:
        return category
    base = Path(root)
    if not base.is_dir():
        raise FileNotFoundError(f"no corpus directory at {base}")
    cats = sorted(p.name for p in base.iterdir() if p.is_dir())
    if len(cats) != 1:
        raise ValueError(
            f"{base} holds {len(cats)} categories {cats}; pick one with --category"
        )
    return cats[0]


def _load_corpus(args):
    return load_mvtec_layout(args.corpus, _resolve_category(args.corpus, args.category))


def _parse_weights(raw: str | None):
    if raw is None:
        return None
    try:
        return tuple(float(tok) for tok in raw.split(","))
    except ValueError:
        raise ValueError(f"bad --layer-weights '{raw}': expected comma-separated numbers")


def _effective_sigma(args) -> float:
    return 0.0 if args.no_smooth else args.sigma


def _write_history(ckpt_path: str, history: list[float]) -> None:
    doc = {"epochs": len(history), "loss": [float(v) for v in history]}
    Path(ckpt_path + ".history.json").write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")


def _normalized_png(path, scores: np.ndarray) -> None:
    lo, hi = float(scores.min()), float(scores.max())
    flat = (scores - lo) / (hi - lo) if hi > lo else np.zeros_like(scores)
    save_png(path, flat)


def _write_raw_map(path, scores: np.ndarray) -> None:
    Path(path).write_bytes(np.asarray(scores, dtype="<f4").tobytes(order="C"))


def _build_scorer(args) -> Scorer:
    disc = load_disc_checkpoint(args.disc)
    rec = None if args.recover == "none" else load_recover_checkpoint(args.recover)
    return Scorer(
        disc,
        rec,
        layer_weights=_parse_weights(args.layer_weights),
        sigma=_effective_sigma(args),
    )


# ---------------------------------------------------------------------------
# commands


def cmd_synth(args) -> int:
    lo, hi = args.area_min, args.area_max
    if not (0.01 <= lo <= hi <= 0.15):
        raise ValueError(
            f"defect area fractions must satisfy 0.01 <= min <= max <= 0.15, got {lo}..{hi}"
        )
    defects = tuple(tok for tok in args.defects.split(",") if tok)
    spec = SynthSpec(
        seed=args.seed,
        image_size=args.size,
        n_train=args.n_train,
        n_test_normal=args.n_test_normal,
        n_test_anomalous=args.n_test_anomalous,
        texture=args.texture,
        defects=defects,
        area_range=(lo, hi),
    )
    # regeneration is a pure function of the spec, so overwriting is safe
    corpus = generate_synthetic(spec, args.out, force=True)
    print(f"wrote {len(corpus.train)} train / {len(corpus.test)} test under {Path(args.out) / spec.texture}")
    return 0


def cmd_render_hog(args) -> int:
    img = load_png(args.input)
    save_png(args.out, render_sketch(img, args.bins, args.cell))
    print(f"wrote {args.out}")
    return 0


def cmd_train_recover(args) -> int:
    cfg = load_config(
        args.config,
        {
            "seed": args.seed,
            "variant": args.variant,
            "epochs": args.epochs,
            "lr": args.lr,
            "image_size": args.image_size,
            "batch_size": args.batch_size,
            "backbone": args.backbone,
            "lam_m": args.lambda_m,
        },
    )
    corpus = _load_corpus(args)
    backbone = pool = None
    if cfg.variant == "hip":
        backbone = build_backbone(cfg.backbone)
    model, history = train_recover(
        corpus, cfg, backbone=backbone, progress=_epoch_progress("recover")
    )
    if cfg.variant == "hip":
        images = np.stack([load_sample_image(s, cfg.image_size) for s in corpus.train])
        pool = build_prompt_pool(backbone, images, [s.id for s in corpus.train])
    save_recover_checkpoint(
        args.out, model, cfg, backbone=backbone, pool=pool, reproducible=args.reproducible
    )
    _write_history(args.out, history)
    print(f"checkpoint {args.out} final_loss={history[-1]:.6f}")
    return 0


def cmd_train_disc(args) -> int:
    cfg = load_config(
        args.config,
        {
            "seed": args.seed,
            "disc_epochs": args.epochs,
            "disc_lr": args.lr,
            "image_size": args.image_size,
            "batch_size": args.batch_size,
            "backbone": args.backbone,
            "lam_s": args.lambda_s,
            "sc_axis": args.sc_axis,
        },
    )
    corpus = _load_corpus(args)
    bundle = None if args.recover == "none" else load_recover_checkpoint(args.recover)
    if bundle is not None and bundle.model.image_size != cfg.image_size:
        raise ValueError(
            f"recovery checkpoint is {bundle.model.image_size}px but config wants {cfg.image_size}px"
        )
    backbone = build_backbone(cfg.backbone)
    frb, history = train_discriminate(
        corpus,
        cfg,
        recover_model=bundle.model if bundle else None,
        backbone=backbone,
        prompt_backbone=bundle.backbone if bundle else None,
        progress=_epoch_progress("disc"),
    )
    save_disc_checkpoint(
        args.out,
        frb,
        backbone,
        cfg,
        recover_variant=bundle.model.variant if bundle else "none",
        reproducible=args.reproducible,
    )
    _write_history(args.out, history)
    print(f"checkpoint {args.out} final_loss={history[-1]:.6f}")
    return 0


def cmd_infer(args) -> int:
    scorer = _build_scorer(args)
    amap = scorer.score_image(load_png(args.image))
    prefix = args.out if args.out else str(Path(args.image).with_suffix(""))
    _normalized_png(prefix + ".heatmap.png", amap.pixel_scores)
    _write_raw_map(prefix + ".map.f32", amap.pixel_scores)
    print(f"score={amap.image_score:.6f}")
    return 0


def cmd_eval(args) -> int:
    scorer = _build_scorer(args)
    corpus = _load_corpus(args)
    if not corpus.test:
        raise ValueError(f"corpus {args.corpus} has no test samples")
    size = scorer.image_size
    cache: dict[str, object] = {}

    def score_fn(sample):
        amap = scorer.score_image(load_sample_image(sample, size))
        cache[sample.id] = amap
        return amap

    report = evaluate(
        corpus.test,
        score_fn,
        lambda s: load_sample_mask(s, size, size),
        per_image_seg=args.per_image_seg,
    )
    text = report.to_json()
    print(text)
    if args.out:
        Path(args.out).write_text(text + "\n")
    if args.dump_maps:
        dump = Path(args.dump_maps)
        dump.mkdir(parents=True, exist_ok=True)
        for sample in corpus.test:
            amap = cache[sample.id]
            stem = sample.id.replace("/", "_")
            _normalized_png(dump / f"{stem}.png", amap.pixel_scores)
            _write_raw_map(dump / f"{stem}.f32", amap.pixel_scores)
        _say(f"maps for {len(corpus.test)} images under {dump}")
    return 0


def cmd_gradcheck(args) -> int:
    names = args.op
    if not names and not args.all:
        raise ValueError("pass --all or --op NAME")

    def run() -> int:
        if args.all:
            report = run_all(seeds=args.seeds, tol=args.tol)
            for line in report.lines():
                print(line)
            check, seed, pname, err = report.worst
            verdict = "PASS" if report.passed else "FAIL"
            print(f"{verdict} worst={err:.3e} ({check} seed={seed} {pname}) tol={args.tol:g}")
            return 0 if report.passed else 1
        bad = 0
        for name in names:
            for seed in range(args.seeds):
                worst = max(check_op(name, seed).values())
                ok = worst <= args.tol
                bad += 0 if ok else 1
                print(f"op:{name} seed={seed} max_rel_err={worst:.3e} {'ok' if ok else 'FAIL'}")
        return 0 if bad == 0 else 1

    if args.corrupt:
        if args.corrupt not in OP_CASES:
            raise ValueError(f"unknown op '{args.corrupt}'; known: {sorted(OP_CASES)}")
        with corrupted_backward(args.corrupt):
            return run()
    return run()


# ---------------------------------------------------------------------------
# parser


def _add_corpus_args(p: argparse.ArgumentParser) -> None:
    p.add_argument("--corpus", required=True, help="corpus root directory")
    p.add_argument("--category", default=None, help="category name (default: the sole one)")


def _add_train_common(p: argparse.ArgumentParser) -> None:
    _add_corpus_args(p)
    p.add_argument("--out", required=True, help="checkpoint path to write")
    p.add_argument("--config", default=None, help="JSON config file")
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--epochs", type=int, default=None)
    p.add_argument("--lr", type=float, default=None)
    p.add_argument("--image-size", type=int, default=None)
    p.add_argument("--batch-size", type=int, default=None)
    p.add_argument("--backbone", default=None, help="'seeded:N' or 'import:PATH'")
    p.add_argument("--reproducible", action="store_true", help="zero the checkpoint timestamp")


def _add_scorer_args(p: argparse.ArgumentParser) -> None:
    p.add_argument("--disc", required=True, help="discrimination checkpoint")
    p.add_argument("--recover", default="none", help="recovery checkpoint, or 'none'")
    p.add_argument("--layer-weights", default=None, help="comma-separated per-level weights")
    p.add_argument("--sigma", type=float, default=0.0, help="gaussian smoothing of the map")
    p.add_argument("--no-smooth", action="store_true", help="force sigma to 0")


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="redi",
        description="Recover-then-discriminate anomaly detection for grayscale textures.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a seeded synthetic corpus")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--size", type=int, default=64)
    p.add_argument("--n-train", type=int, default=200)
    p.add_argument("--n-test-normal", type=int, default=30)
    p.add_argument("--n-test-anomalous", type=int, default=30)
    p.add_argument("--texture", default="stripes", choices=TEXTURES)
    p.add_argument("--defects", default=",".join(DEFECTS), help="comma-separated defect kinds")
    p.add_argument("--area-min", type=float, default=0.02, help="defect area fraction lower bound")
    p.add_argument("--area-max", type=float, default=0.10, help="defect area fraction upper bound")
    p.set_defaults(fn=cmd_synth)

    p = sub.add_parser("render-hog", help="render the orientation-histogram sketch of a PNG")
    p.add_argument("--in", dest="input", required=True, help="input PNG")
    p.add_argument("--bins", type=int, default=9)
    p.add_argument("--cell", type=int, default=8)
    p.add_argument("--out", required=True, help="output PNG")
    p.set_defaults(fn=cmd_render_hog)

    p = sub.add_parser("train-recover", help="train the recovery net")
    _add_train_common(p)
    p.add_argument("--variant", default=None, choices=("hip", "imi", "iihp"))
    p.add_argument("--lambda-m", type=float, default=None, help="structural loss weight")
    p.set_defaults(fn=cmd_train_recover)

    p = sub.add_parser("train-disc", help="train the feature recalibration net")
    _add_train_common(p)
    p.add_argument("--recover", required=True, help="recovery checkpoint, or 'none'")
    p.add_argument("--lambda-s", type=float, default=None, help="self-correlation loss weight")
    p.add_argument("--sc-axis", default=None, choices=("channel", "spatial"))
    p.set_defaults(fn=cmd_train_disc)

    p = sub.add_parser("infer", help="score one image")
    p.add_argument("--image", required=True, help="input PNG")
    _add_scorer_args(p)
    p.add_argument("--out", default=None, help="artifact prefix (default: beside the image)")
    p.set_defaults(fn=cmd_infer)

    p = sub.add_parser("eval", help="score a corpus' test split and report metrics")
    _add_corpus_args(p)
    _add_scorer_args(p)
    p.add_argument("--out", default=None, help="also write the JSON report here")
    p.add_argument("--dump-maps", default=None, help="directory for per-image maps")
    p.add_argument(
        "--per-image-seg",
        action="store_true",
        help="average per-image segmentation AUROCs instead of pooling pixels",
    )
    p.set_defaults(fn=cmd_eval)

    p = sub.add_parser("gradcheck", help="finite-difference audit of the autodiff engine")
    p.add_argument("--all", action="store_true", help="every op plus both model architectures")
    p.add_argument("--op", action="append", default=[], help="check one op (repeatable)")
    p.add_argument("--seeds", type=int, default=20)
    p.add_argument("--tol", type=float, default=1e-3)
    p.add_argument("--corrupt", default=None, help="sabotage an op's backward (negative control)")
    p.set_defaults(fn=cmd_gradcheck)

    return parser


def main(argv=None) -> int:
    try:
        args = _build_parser().parse_args(argv)
    except SystemExit as e:
        code = e.code if isinstance(e.code, int) else 1
        return 0 if code == 0 else 1
    try:
        return int(args.fn(args) or 0)
    except NumericError as e:
        _say(f"redi: numeric failure: {e}")
        return 2
    except FileNotFoundError as e:
        # a missing input path is a usage problem, not an I/O failure
        _say(f"redi: {e}")
        return 1
    except (ValueError, KeyError) as e:
        _say(f"redi: {e}")
        return 1
    except OSError as e:
        _say(f"redi: I/O failure: {e}")
        return 3


if __name__ == "__main__":
    sys.exit(main())
