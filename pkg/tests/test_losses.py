import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from qaclims.encoders import MockEncoders
from qaclims.losses import (
    LossWeights,
    UndefinedSimilarityError,
    brc_loss,
    cosine_sim,
    frc_loss,
    mean_fg_text,
    reg_loss,
    step_losses,
    total_loss,
)
from qaclims.qape import ClassCorpus, build_baseline_corpus

LN2 = math.log(2.0)
sims = st.floats(-1.0, 1.0)
taus = st.floats(0.05, 2.0)


def frc_naive(s_ff, s_fb, tau):
    num = math.exp(s_ff / tau)
    return -math.log(num / (sum(math.exp(s / tau) for s in s_fb) + num))


def brc_naive(s_bf, s_bb, tau, on_bf=True):
    m = sum(s_bb) / len(s_bb)
    num = math.exp(m / tau)
    return -math.log(num / (math.exp(s_bf / (tau if on_bf else 1.0)) + num))


# --- cosine and mean --------------------------------------------------------


def test_cosine_cases():
    v = [0.3, -1.2, 2.0]
    assert cosine_sim(v, v) == pytest.approx(1.0, abs=1e-15)
    assert cosine_sim([1, 0], [0, 1]) == 0.0
    assert cosine_sim([1, 2], [2, 1]) == pytest.approx(4 / (math.sqrt(5) * math.sqrt(5)), abs=1e-15)
    with pytest.raises(UndefinedSimilarityError):
        cosine_sim([0, 0], [1, 0])


def test_mean_fg_text_cases():
    assert mean_fg_text([[1.0, 2.0]]) == [1.0, 2.0]
    assert mean_fg_text([[1.0, 0.0], [0.0, 1.0]]) == [0.5, 0.5]
    g = np.random.default_rng(0)
    embs = g.normal(size=(7, 5)).tolist()
    got = mean_fg_text(embs)
    for d in range(5):
        assert got[d] == pytest.approx(sum(e[d] for e in embs) / 7, abs=1e-15)
    with pytest.raises(ValueError):
        mean_fg_text([])


# --- FRC --------------------------------------------------------------------


def test_frc_examples():
    assert frc_loss(0.4, [0.4], 0.7) == pytest.approx(LN2, abs=1e-12)
    assert frc_loss(1.0, [0.0], 0.7) == pytest.approx(-math.log(math.exp(10 / 7) / (1 + math.exp(10 / 7))), abs=1e-14)
    assert frc_loss(1.0, [0.0], 0.7) == pytest.approx(0.2148, abs=1e-4)


def test_frc_limit_to_zero():
    vals = [frc_loss(s, [0.0], 0.7) for s in (1.0, 5.0, 20.0, 100.0)]
    assert all(a > b for a, b in zip(vals, vals[1:]))
    assert vals[-1] < 1e-50


@settings(max_examples=200, deadline=None)
@given(sims, st.lists(sims, min_size=1, max_size=10), taus)
def test_frc_matches_naive(s_ff, s_fb, tau):
    assert frc_loss(s_ff, s_fb, tau) == pytest.approx(frc_naive(s_ff, s_fb, tau), abs=1e-10)


@settings(max_examples=200, deadline=None)
@given(sims, st.lists(sims, min_size=1, max_size=10), taus, st.floats(0.01, 0.5))
def test_frc_positive_and_decreasing(s_ff, s_fb, tau, d):
    a = frc_loss(s_ff, s_fb, tau)
    assert 0 < a < math.inf
    assert frc_loss(s_ff + d, s_fb, tau) < a


@settings(max_examples=200, deadline=None)
@given(sims, st.lists(sims, min_size=1, max_size=10), taus)
def test_frc_negative_set_properties(s_ff, s_fb, tau):
    a = frc_loss(s_ff, s_fb, tau)
    # equal up to summation-order rounding
    assert frc_loss(s_ff, s_fb + [-math.inf], tau) == pytest.approx(a, rel=1e-15, abs=1e-15)
    bigger = frc_loss(s_ff, s_fb + [s_ff], tau)
    # the added term is exp(-a) relative to the sum; below machine epsilon it cannot show
    assert bigger > a if a < 30 else bigger >= a


@settings(max_examples=200, deadline=None)
@given(st.floats(-1, 1), st.lists(st.floats(-1, 1), min_size=1, max_size=6), taus,
       st.sampled_from([-2.0, -0.5, 0.25, 1.0]))
def test_frc_shift_invariance(s_ff, s_fb, tau, c):
    # dyadic grid values and shifts keep every shifted similarity exact
    s_ff = round(s_ff * 64) / 64
    s_fb = [round(s * 64) / 64 for s in s_fb]
    assert frc_loss(s_ff + c, [s + c for s in s_fb], tau) == frc_loss(s_ff, s_fb, tau)


def test_frc_rejects_bad_input():
    with pytest.raises(ValueError):
        frc_loss(0.1, [0.2], 0.0)
    with pytest.raises(ValueError):
        frc_loss(0.1, [], 0.7)


# --- BRC --------------------------------------------------------------------


def test_brc_examples():
    assert brc_loss(0.25, [0.1, 0.4], 0.7) == pytest.approx(LN2, abs=1e-12)
    assert brc_loss(1.0, [0.0], 0.7) == pytest.approx(-math.log(1 / (1 + math.exp(10 / 7))), abs=1e-14)
    # -ln(1 / (1 + e^(10/7))) evaluates to 1.6434
    assert brc_loss(1.0, [0.0], 0.7) == pytest.approx(1.6434, abs=1e-4)


def test_brc_verbatim_variant():
    got = brc_loss(0.5, [0.2], 0.7, brc_tau_on_bf=False)
    assert got == pytest.approx(brc_naive(0.5, [0.2], 0.7, on_bf=False), abs=1e-14)
    assert got != brc_loss(0.5, [0.2], 0.7)


@settings(max_examples=200, deadline=None)
@given(sims, st.lists(sims, min_size=1, max_size=10), taus, st.booleans())
def test_brc_matches_naive(s_bf, s_bb, tau, on_bf):
    got = brc_loss(s_bf, s_bb, tau, on_bf)
    assert got == pytest.approx(brc_naive(s_bf, s_bb, tau, on_bf), abs=1e-10)
    assert 0 < got < math.inf


@settings(max_examples=200, deadline=None)
@given(sims, sims, sims, taus)
def test_brc_mean_before_exp(s_bf, a, b, tau):
    assert brc_loss(s_bf, [a, b], tau) == pytest.approx(brc_loss(s_bf, [(a + b) / 2], tau), abs=1e-14)


@settings(max_examples=200, deadline=None)
@given(sims, sims, taus, st.floats(0.01, 0.5))
def test_brc_decreases_with_positive_similarity(s_bf, s_bb, tau, d):
    assert brc_loss(s_bf, [s_bb + d], tau) < brc_loss(s_bf, [s_bb], tau)


# --- REG and total ----------------------------------------------------------


def test_reg_examples():
    assert reg_loss(np.full((2, 3, 3), 0.5)) == 0.5
    assert reg_loss(np.array([[[1.0, 0.0], [0.0, 1.0]]])) == 0.5
    g = np.random.default_rng(3)
    m = g.random((3, 4, 5))
    brute = 0.0
    for k in range(3):
        for h in range(4):
            for w in range(5):
                brute += m[k, h, w]
    assert reg_loss(m) == pytest.approx(brute / 60, abs=1e-15)


@settings(max_examples=100, deadline=None)
@given(st.integers(1, 3), st.integers(1, 4), st.integers(1, 4), st.integers(0, 2**31))
def test_reg_zero_and_one_only_at_extremes(k, h, w, seed):
    assert reg_loss(np.zeros((k, h, w))) == 0.0
    assert reg_loss(np.ones((k, h, w))) == 1.0
    m = np.random.default_rng(seed).random((k, h, w))
    m.flat[0] = 0.5
    assert 0.0 < reg_loss(m) < 1.0


def test_total_examples():
    assert total_loss(1.0, 1.0, 1.0, LossWeights()).total == pytest.approx(18.2, abs=1e-12)
    assert total_loss(0.0, 0.0, 0.0, LossWeights()).total == 0.0
    assert total_loss(1.0, 1.0, 1.0, LossWeights(30, 24, 0.2)).total == pytest.approx(54.2, abs=1e-12)


def test_weights_validation():
    with pytest.raises(ValueError):
        LossWeights(tau=0.0)
    with pytest.raises(ValueError):
        LossWeights(alpha=-1.0)


# --- step_losses --------------------------------------------------------------


class ConstantEncoders:
    differentiable = True
    dim = 4

    def encode_image(self, images):
        lead = torch.as_tensor(images).shape[:-3]
        return torch.ones(lead + (4,), dtype=torch.float64)

    def encode_texts(self, texts):
        return torch.ones(len(texts), 4, dtype=torch.float64)


def test_step_losses_constant_encoders_give_ln2():
    corpus = {1: build_baseline_corpus("cat", 1)}
    g = torch.Generator().manual_seed(0)
    cam = torch.rand(1, 2, 2, generator=g, dtype=torch.float64)
    out = step_losses(torch.rand(8, 8, 3, dtype=torch.float64), cam, [1], corpus, 0.1, LossWeights(), ConstantEncoders())
    assert float(out.frc) == pytest.approx(LN2, abs=1e-12)
    assert float(out.brc) == pytest.approx(LN2, abs=1e-12)


def test_step_losses_baseline_corpus_runs(synth_bundle):
    manifest, samples, store, enc = synth_bundle
    s = samples[0]
    corpora = {c: build_baseline_corpus(manifest.classes[c], c) for c in s.labels}
    cam = torch.full((len(s.labels), 4, 4), 0.6, dtype=torch.float64)
    out = step_losses(s.image, cam, sorted(s.labels), corpora, 0.1, LossWeights(), enc)
    for v in out.as_floats().values():
        assert math.isfinite(v)


def test_step_losses_missing_corpus():
    with pytest.raises(KeyError):
        step_losses(torch.zeros(4, 4, 3), torch.zeros(1, 2, 2), [1], {}, 0.1, LossWeights(), ConstantEncoders())


def _gt_planes(sample):
    ids = sorted(sample.labels)
    return ids, torch.stack([torch.as_tensor(sample.mask == c, dtype=torch.float64) for c in ids])


def test_aligned_encoders_prefer_ground_truth(synth_bundle):
    manifest, samples, store, enc = synth_bundle
    enc64 = MockEncoders(enc.lexicon, dtype=torch.float64)
    w = LossWeights()
    for s in samples:
        ids, gt = _gt_planes(s)
        gt = 0.05 + 0.9 * gt
        corpora = {c: store.get(s.image_id, c) for c in ids}
        good = step_losses(s.image, gt, ids, corpora, 0.1, w, enc64)
        bad = step_losses(s.image, 1.0 - gt, ids, corpora, 0.1, w, enc64)
        assert float(good.frc + good.brc) < float(bad.frc + bad.brc)


def test_gradient_wrt_activation_matches_finite_differences(synth_bundle):
    manifest, samples, store, enc = synth_bundle
    enc64 = MockEncoders(enc.lexicon, dtype=torch.float64)
    s = samples[0]
    ids = sorted(s.labels)
    corpora = {c: store.get(s.image_id, c) for c in ids}
    image = torch.as_tensor(s.image, dtype=torch.float64)
    g = torch.Generator().manual_seed(5)
    cam = (0.1 + 0.8 * torch.rand(len(ids), 4, 4, generator=g, dtype=torch.float64)).requires_grad_()

    def f(c):
        return step_losses(image, c, ids, corpora, 0.0, LossWeights(), enc64).total

    f(cam).backward()
    eps = 1e-6
    for idx in [(0, 0, 0), (0, 1, 2), (0, 3, 3), (len(ids) - 1, 2, 1)]:
        d = torch.zeros_like(cam)
        d[idx] = eps
        with torch.no_grad():
            num = (f(cam + d) - f(cam - d)) / (2 * eps)
        assert float(cam.grad[idx]) == pytest.approx(float(num), rel=1e-4, abs=1e-9)
