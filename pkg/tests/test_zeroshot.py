import math

import numpy as np
import pytest

from mzs.embedder import ReferenceEmbedder, cosine
from mzs.zeroshot import (Adapter, build_prompt_pair, classify,
                          classify_ensemble, pn_softmax)


def test_pn_softmax_complement_is_exact():
    rng = np.random.default_rng(11)
    for _ in range(500):
        a, b = rng.normal(scale=50.0, size=2)
        assert pn_softmax(a, b) + pn_softmax(b, a) == 1.0


def test_pn_softmax_translation_invariance():
    # dyadic-grid logits keep a+c, b+c, and their difference exact in binary64,
    # so the identity must hold bitwise
    rng = np.random.default_rng(12)
    for _ in range(200):
        a, b = rng.integers(-8192, 8193, size=2) / 1024.0
        for c in (1.0, -7.5, 1000.0, -1000.0, 1.0 / 1024.0):
            assert pn_softmax(a + c, b + c) == pn_softmax(a, b)


def test_pn_softmax_known_values():
    assert pn_softmax(0.0, 0.0) == 0.5
    assert abs(pn_softmax(math.log(2.0), 0.0) - 2.0 / 3.0) <= 1e-12
    # extreme gaps saturate without overflow
    assert pn_softmax(1000.0, 0.0) == 1.0
    assert pn_softmax(0.0, 1000.0) == 0.0
    assert pn_softmax(1000.0, -1000.0) == 1.0
    assert pn_softmax(-1000.0, 1000.0) == 0.0
    assert pn_softmax(-1e308, 1e308) == 0.0


def test_pn_softmax_rejects_nonfinite():
    with pytest.raises(ValueError):
        pn_softmax(float("nan"), 0.0)
    with pytest.raises(ValueError):
        pn_softmax(0.0, float("inf"))


def test_pn_softmax_monotone_in_gap():
    gaps = np.linspace(-20.0, 20.0, 81)
    probs = [pn_softmax(g, 0.0) for g in gaps]
    assert all(b >= a for a, b in zip(probs, probs[1:]))


def test_prompt_pair_default_negative():
    pair = build_prompt_pair("interstitial lung disease")
    assert pair.positive == "interstitial lung disease"
    assert pair.negative == "no interstitial lung disease"
    pair2 = build_prompt_pair("emphysema", negative="clear lungs")
    assert pair2.negative == "clear lungs"
    with pytest.raises(ValueError):
        build_prompt_pair("  ")


def _random_montage(rng, px=96):
    return rng.random((px, px)).astype(np.float32)


def test_ranking_invariant_to_logit_scale():
    # ranking by p_pos must be bit-identical across positive scales
    backend = ReferenceEmbedder(seed=3, dim=64, resolution=32)
    pair = build_prompt_pair("interstitial lung disease")
    rng = np.random.default_rng(21)
    images = [_random_montage(rng, 48) for _ in range(100)]
    orders = []
    for scale in (1.0, 10.0, 100.0):
        probs = [classify(backend, im, pair, logit_scale=scale).p_pos for im in images]
        orders.append(np.argsort(np.argsort(probs)).tolist())
    assert orders[0] == orders[1] == orders[2]


def test_classify_probability_matches_manual_cosines():
    backend = ReferenceEmbedder(seed=0, dim=128, resolution=32)
    pair = build_prompt_pair("interstitial lung disease")
    rng = np.random.default_rng(31)
    from mzs.embedder import embed_image, embed_text
    from mzs.imaging import resize_bilinear
    for _ in range(10):
        img = _random_montage(rng, 64)
        res = classify(backend, img, pair, logit_scale=100.0)
        small = resize_bilinear(img, 32, 32)
        ei = embed_image(backend, small)
        want = pn_softmax(100.0 * cosine(ei, embed_text(backend, pair.positive)),
                          100.0 * cosine(ei, embed_text(backend, pair.negative)))
        assert res.p_pos == want


def _identity_adapter(d, model_id="ident"):
    eye = np.eye(d, dtype=np.float64)
    return Adapter(w_img=eye, w_txt=eye, model_id=model_id)


def test_identity_adapter_is_noop():
    backend = ReferenceEmbedder(seed=0, dim=64, resolution=32)
    pair = build_prompt_pair("interstitial lung disease")
    rng = np.random.default_rng(41)
    adapter = _identity_adapter(64)
    for _ in range(10):
        img = _random_montage(rng, 48)
        plain = classify(backend, img, pair)
        proj = classify(backend, img, pair, adapter=adapter)
        # adapter path renormalizes in float64; float32 unit norms differ at ~1e-8
        assert abs(plain.p_pos - proj.p_pos) <= 1e-8
        assert proj.model_ids == ("ident",)


def test_ensemble_mean_matches_members():
    backend = ReferenceEmbedder(seed=0, dim=32, resolution=32)
    pair = build_prompt_pair("interstitial lung disease")
    rng = np.random.default_rng(51)
    adapters = []
    for i in range(5):
        w_img = np.eye(32) + 0.05 * rng.normal(size=(32, 32))
        w_txt = np.eye(32) + 0.05 * rng.normal(size=(32, 32))
        adapters.append(Adapter(w_img=w_img, w_txt=w_txt, model_id=f"m{i}"))
    img = _random_montage(rng, 64)
    members = [classify(backend, img, pair, adapter=a).p_pos for a in adapters]
    ens = classify_ensemble(backend, adapters, img, pair)
    assert abs(ens.p_pos - float(np.mean(members))) <= 1e-15
    assert ens.model_ids == ("m0", "m1", "m2", "m3", "m4")


def test_ensemble_requires_members():
    backend = ReferenceEmbedder(seed=0, dim=32, resolution=32)
    pair = build_prompt_pair("x")
    with pytest.raises(ValueError):
        classify_ensemble(backend, [], np.zeros((32, 32), dtype=np.float32), pair)
