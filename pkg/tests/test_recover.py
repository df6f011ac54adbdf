"""Recovery network: prompts, masking inputs, losses, training contracts."""

import inspect

import numpy as np
import pytest

from redi import autodiff as ad
from redi.autodiff import NumericError
from redi.config import TrainConfig
from redi.descriptors import PREWITT_X, PREWITT_Y
from redi.discriminate import build_backbone
from redi.recover import (
    PromptPool,
    RecoverModel,
    build_prompt_pool,
    hip_forward,
    iihp_input,
    imi_input,
    inference_mask,
    l2_loss,
    msgms_loss,
    random_rect_mask,
    recover_forward,
    recover_loss,
    render_sketch,
    select_prompt,
    train_recover,
)
from redi.rng import Stream

f32 = np.float32


# ---------------------------------------------------------------------------
# masks and masked inputs


def test_random_rect_mask_contract():
    st = Stream.from_seed(11)
    m = random_rect_mask(64, st)
    assert m.shape == (64, 64)
    assert set(np.unique(m)) == {0.0, 1.0}
    hole = 1.0 - m
    ys, xs = np.nonzero(hole)
    # one axis-aligned rectangle: the bounding box is fully zeroed
    assert hole.sum() == (ys.max() - ys.min() + 1) * (xs.max() - xs.min() + 1)
    assert 0.1 * 64 - 1 <= ys.max() - ys.min() + 1 <= 0.4 * 64 + 1


def test_random_rect_mask_deterministic():
    a = random_rect_mask(32, Stream.from_seed(3))
    b = random_rect_mask(32, Stream.from_seed(3))
    assert a.tobytes() == b.tobytes()


def test_inference_mask_keyed_on_content():
    st = Stream.from_seed(12)
    img = st.uniform(64 * 64, 0, 1).reshape(64, 64).astype(f32)
    assert inference_mask(img).tobytes() == inference_mask(img.copy()).tobytes()
    other = img.copy()
    other[5, 5] += 0.25
    assert inference_mask(other).tobytes() != inference_mask(img).tobytes()


def test_imi_input_examples():
    st = Stream.from_seed(13)
    x = st.uniform(8 * 8, 0, 1).reshape(8, 8).astype(f32)
    assert np.array_equal(imi_input(x, np.ones((8, 8), f32)), x)
    assert not imi_input(x, np.zeros((8, 8), f32)).any()
    m = np.zeros((8, 8), f32)
    m[2:5, 3:6] = 1.0
    got = imi_input(x, m)
    for i in range(8):
        for j in range(8):
            assert got[i, j] == (x[i, j] if m[i, j] == 1.0 else 0.0)


def test_iihp_input_examples():
    st = Stream.from_seed(14)
    x = st.uniform(8 * 8, 0, 1).reshape(8, 8).astype(f32)
    h = st.uniform(8 * 8, 0, 1).reshape(8, 8).astype(f32)
    assert np.array_equal(iihp_input(x, h, np.ones((8, 8), f32)), x)
    assert np.array_equal(iihp_input(x, h, np.zeros((8, 8), f32)), h)
    m = (st.uniform(8 * 8, 0, 1).reshape(8, 8) > 0.5).astype(f32)
    got = iihp_input(x, h, m)
    want = np.where(m == 1.0, x, h)
    assert np.abs(got - want).max() < 1e-7


def test_masked_inputs_reject_non_binary():
    x = np.ones((4, 4), f32)
    with pytest.raises(ValueError, match="binary"):
        imi_input(x, np.full((4, 4), 0.5, f32))
    with pytest.raises(ValueError, match="binary"):
        iihp_input(x, x, np.full((4, 4), 2.0, f32))


# ---------------------------------------------------------------------------
# prompt selection


@pytest.fixture(scope="module")
def backbone():
    return build_backbone("seeded:1")


def make_images(n, seed=21):
    st = Stream.from_seed(seed)
    return st.uniform(n * 64 * 64, 0, 1).reshape(n, 64, 64).astype(f32)


def test_select_prompt_duplicate_wins(backbone):
    imgs = make_images(3)
    imgs[1] = imgs[0]  # pool holds an exact duplicate of the query
    pool = build_prompt_pool(backbone, imgs, ["a", "b", "c"])
    query = imgs[0]
    chosen, cid = select_prompt(query, pool, backbone, exclude_id="a")
    assert cid == "b"
    assert np.array_equal(chosen, query)


def test_select_prompt_tie_breaks_lexicographically(backbone):
    img = make_images(1)[0]
    pool = build_prompt_pool(backbone, np.stack([img, img, img]), ["m", "z", "b"])
    _, cid = select_prompt(img, pool, backbone)
    assert cid == "b"


def test_select_prompt_matches_brute_force(backbone):
    from redi.discriminate import extract_pyramid

    imgs = make_images(5, seed=22)
    ids = ["p0", "p1", "p2", "p3", "p4"]
    pool = build_prompt_pool(backbone, imgs, ids)
    query = make_images(1, seed=23)[0]
    _, cid = select_prompt(query, pool, backbone)

    def descriptor(im):
        deep = extract_pyramid(backbone, im[None, None])[-1]
        return deep.mean(axis=(2, 3), dtype=np.float64).ravel()

    q = descriptor(query)
    best, best_sim = None, -np.inf
    for pid in sorted(ids):
        d = descriptor(imgs[ids.index(pid)])
        sim = q @ d / (np.linalg.norm(q) * np.linalg.norm(d))
        if sim > best_sim:
            best, best_sim = pid, sim
    assert cid == best


def test_select_prompt_excludes_query(backbone):
    imgs = make_images(2)
    pool = build_prompt_pool(backbone, imgs, ["a", "b"])
    _, cid = select_prompt(imgs[0], pool, backbone, exclude_id="a")
    assert cid == "b"
    only = build_prompt_pool(backbone, imgs[:1], ["a"])
    with pytest.raises(ValueError, match="eligible"):
        select_prompt(imgs[0], only, backbone, exclude_id="a")
    with pytest.raises(ValueError, match="empty"):
        select_prompt(imgs[0], PromptPool([], np.zeros((0, 4), f32), np.zeros((0, 64, 64), f32)), backbone)


# ---------------------------------------------------------------------------
# forward


def test_hip_forward_shape_and_range():
    model = RecoverModel.build(Stream.from_seed(1))
    st = Stream.from_seed(2)
    out = hip_forward(
        model,
        st.uniform(64 * 64, 0, 1).reshape(64, 64),
        st.uniform(64 * 64, 0, 1).reshape(64, 64),
    )
    assert out.shape == (64, 64)
    assert (out > 0).all() and (out < 1).all()


def test_hip_forward_never_sees_the_original():
    # the forward signature admits only the rendered sketch and the prompt
    names = list(inspect.signature(hip_forward).parameters)
    assert names == ["model", "hog_image", "prompt"]


def test_zero_parameters_give_half():
    model = RecoverModel.build(Stream.from_seed(1))
    for p in model.params.values():
        p.values[...] = 0.0
    out = hip_forward(model, np.zeros((64, 64), f32), np.zeros((64, 64), f32))
    assert np.allclose(out, 0.5, atol=1e-7)


def test_model_build_validation():
    with pytest.raises(ValueError, match="variant"):
        RecoverModel.build(Stream.from_seed(1), variant="gan")
    with pytest.raises(ValueError, match="divisible"):
        RecoverModel.build(Stream.from_seed(1), image_size=60)


# ---------------------------------------------------------------------------
# losses


def test_l2_examples():
    st = Stream.from_seed(15)
    x = st.uniform(2 * 1 * 4 * 4, 0, 1).reshape(2, 1, 4, 4).astype(f32)
    assert float(l2_loss(ad.constant(x), ad.constant(x.copy())).values) == 0.0
    shifted = float(l2_loss(ad.constant(x + 1.0), ad.constant(x)).values)
    assert abs(shifted - 1.0) < 1e-6
    y = st.uniform(x.size, 0, 1).reshape(x.shape).astype(f32)
    want = float(np.mean((y.astype(np.float64) - x) ** 2))
    assert abs(float(l2_loss(ad.constant(y), ad.constant(x)).values) - want) < 1e-6


def msgms_oracle(y, x, scales=1, c=0.0026):
    """Independent float64 evaluation of the multi-scale GMS distance."""

    def grad_mag(img):
        p = np.pad(img, 1, mode="edge").astype(np.float64)
        gx = np.zeros_like(img, np.float64)
        gy = np.zeros_like(img, np.float64)
        for i in range(img.shape[0]):
            for j in range(img.shape[1]):
                win = p[i : i + 3, j : j + 3]
                gx[i, j] = (win * PREWITT_X.astype(np.float64)).sum()
                gy[i, j] = (win * PREWITT_Y.astype(np.float64)).sum()
        return np.sqrt(gx * gx + gy * gy)

    total = 0.0
    for s in range(scales):
        gy_, gx_ = grad_mag(y), grad_mag(x)
        gms = (2.0 * gy_ * gx_ + c) / (gy_ * gy_ + gx_ * gx_ + c)
        total += float(np.mean(1.0 - gms))
        if s + 1 < scales:
            y = y.reshape(y.shape[0] // 2, 2, y.shape[1] // 2, 2).mean(axis=(1, 3))
            x = x.reshape(x.shape[0] // 2, 2, x.shape[1] // 2, 2).mean(axis=(1, 3))
    return total / scales


def test_msgms_identities():
    st = Stream.from_seed(16)
    x = st.uniform(1 * 1 * 8 * 8, 0, 1).reshape(1, 1, 8, 8).astype(f32)
    assert float(msgms_loss(ad.constant(x), ad.constant(x.copy())).values) == 0.0
    a = np.full((1, 1, 8, 8), 0.2, f32)
    b = np.full((1, 1, 8, 8), 0.9, f32)
    # both gradient fields vanish, GMS = c/c = 1 everywhere
    assert abs(float(msgms_loss(ad.constant(a), ad.constant(b)).values)) < 1e-7


def test_msgms_symmetric():
    st = Stream.from_seed(17)
    x = st.uniform(1 * 1 * 16 * 16, 0, 1).reshape(1, 1, 16, 16).astype(f32)
    y = st.uniform(x.size, 0, 1).reshape(x.shape).astype(f32)
    ab = float(msgms_loss(ad.constant(x), ad.constant(y)).values)
    ba = float(msgms_loss(ad.constant(y), ad.constant(x)).values)
    assert abs(ab - ba) < 1e-7


def test_msgms_matches_hand_oracle():
    st = Stream.from_seed(18)
    y = st.uniform(16, 0, 1).reshape(4, 4).astype(f32)
    x = st.uniform(16, 0, 1).reshape(4, 4).astype(f32)
    got = float(msgms_loss(ad.constant(y[None, None]), ad.constant(x[None, None]), scales=1).values)
    assert abs(got - msgms_oracle(y, x, scales=1)) < 1e-6
    got4 = float(msgms_loss(ad.constant(y[None, None]), ad.constant(x[None, None]), scales=3).values)
    assert abs(got4 - msgms_oracle(y, x, scales=3)) < 1e-6


def test_msgms_divisibility():
    x = np.zeros((1, 1, 6, 6), f32)
    with pytest.raises(ValueError, match="divisible"):
        msgms_loss(ad.constant(x), ad.constant(x), scales=4)


def test_recover_loss_additivity():
    st = Stream.from_seed(19)
    y = st.uniform(1 * 1 * 8 * 8, 0, 1).reshape(1, 1, 8, 8).astype(f32)
    x = st.uniform(y.size, 0, 1).reshape(y.shape).astype(f32)
    whole = float(recover_loss(ad.constant(y), ad.constant(x), lam_m=1.0, scales=2).values)
    l2 = float(l2_loss(ad.constant(y), ad.constant(x)).values)
    lm = float(msgms_loss(ad.constant(y), ad.constant(x), scales=2).values)
    assert abs(whole - (l2 + lm)) < 1e-7
    only_l2 = float(recover_loss(ad.constant(y), ad.constant(x), lam_m=0.0, scales=2).values)
    assert abs(only_l2 - l2) < 1e-7


def test_recover_loss_zero_on_match():
    x = make_images(1)[None]
    assert float(recover_loss(ad.constant(x), ad.constant(x.copy())).values) == 0.0


# ---------------------------------------------------------------------------
# training


def test_train_lr_zero_keeps_init(tiny_corpus):
    cfg = TrainConfig(seed=5, variant="imi", epochs=1, lr=0.0)
    model, history = train_recover(tiny_corpus, cfg)
    init = RecoverModel.build(
        Stream.from_seed(5).derive("recover-init"),
        image_size=cfg.image_size,
        widths=tuple(cfg.widths),
        variant="imi",
    )
    assert len(history) == 1
    for name, p in model.params.items():
        assert p.values.tobytes() == init.params[name].values.tobytes(), name


def test_train_deterministic(tiny_corpus):
    cfg = TrainConfig(seed=6, variant="imi", epochs=2)
    m1, h1 = train_recover(tiny_corpus, cfg)
    m2, h2 = train_recover(tiny_corpus, cfg)
    assert h1 == h2
    for name, p in m1.params.items():
        assert p.values.tobytes() == m2.params[name].values.tobytes(), name


def test_train_loss_decreases(tiny_corpus):
    cfg = TrainConfig(seed=7, variant="imi", epochs=4)
    _, history = train_recover(tiny_corpus, cfg)
    assert history[-1] < history[0]


def test_train_aborts_on_nan(tiny_corpus, monkeypatch):
    import redi.recover as rec

    monkeypatch.setattr(rec, "recover_loss", lambda *a, **k: ad.constant(np.float32("nan")))
    cfg = TrainConfig(seed=5, variant="imi", epochs=1)
    with pytest.raises(NumericError, match="epoch 0"):
        train_recover(tiny_corpus, cfg)


def test_render_sketch_shape():
    img = make_images(1)[0]
    sk = render_sketch(img, 9, 8)
    assert sk.shape == (64, 64)
    assert sk.dtype == np.float32
    assert 0.0 <= sk.min() and sk.max() <= 1.0
