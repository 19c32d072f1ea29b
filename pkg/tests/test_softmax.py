import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from outlier_lab import tensor as T
from outlier_lab.softmax import (BERT_ALPHA, SoftmaxConfig, SoftmaxConfigError, attention_normalize,
                                 causal_mask, clipped_softmax, cs_unclipped_sum, gamma_from_alpha,
                                 ncs_beta_from_alpha, ncs_gamma, ncs_softmax, stretch, vanilla_softmax)
from outlier_lab.tensor import ShapeError, Tape, Tensor, finite_diff_check

logits = arrays(np.float64, st.integers(1, 64), elements=st.floats(-20, 20, allow_nan=False))


def test_vanilla_uniform_and_stable():
    np.testing.assert_allclose(vanilla_softmax([0.0, 0, 0, 0]).data, [0.25] * 4)
    p = vanilla_softmax([1000.0, 0.0]).data
    assert p[0] == 1.0 and 0 <= p[1] < 1e-300


def test_vanilla_matches_extended_precision():
    x = np.array([0.0036904600724477227, 0.8962366125254096, -0.8224135660866527, -2.671775516271823,
                  -1.3640123555151678, -2.974939664989387, 0.18043080779231546, 4.0206457366636])
    # 50-digit mpmath evaluation of exp(x_i) / sum exp(x_j)
    ref = [0.01639919356710692, 0.04003597053271175, 0.007178770542225541, 0.001129489978683972,
           0.004176732930243983, 0.0008341033493823907, 0.019569505417468325, 0.9106762336821771]
    np.testing.assert_allclose(vanilla_softmax(x).data, ref, rtol=0, atol=1e-12)


def test_vanilla_rejects_empty():
    with pytest.raises(ShapeError):
        vanilla_softmax(np.array([]))


@pytest.mark.parametrize("alpha,T,expected", [(3.2, 128, -0.025), (12, 512, -0.0234375), (0, 77, 0.0)])
def test_gamma_from_alpha(alpha, T, expected):
    assert gamma_from_alpha(alpha, T) == pytest.approx(expected, abs=1e-15)


def test_gamma_from_alpha_rejects_zero_length():
    with pytest.raises(ValueError):
        gamma_from_alpha(1.0, 0)


def test_cs_unclipped_sum_values():
    assert cs_unclipped_sum(1, gamma_from_alpha(3.2, 128), 128) == pytest.approx(-2.175, abs=1e-12)
    assert cs_unclipped_sum(1, gamma_from_alpha(3.2, 64), 64) == pytest.approx(-2.15, abs=1e-12)
    assert cs_unclipped_sum(1, 0.0, 999) == 1


def test_ncs_gamma_values():
    assert ncs_gamma(1, -2.175, 128) == pytest.approx(-0.025, abs=1e-15)
    assert ncs_gamma(1, -2.175, 64) == pytest.approx(-127 / 2520, abs=1e-15)  # -3.175 / 63
    assert ncs_gamma(1, -2.175, 1) == 0.0


def test_default_beta_from_alpha():
    assert ncs_beta_from_alpha(1.0, BERT_ALPHA, 128) == pytest.approx(-2.175, abs=1e-12)


def test_clipped_hand_values():
    np.testing.assert_allclose(clipped_softmax([0.0, 0.0], 1, -0.5).data, [0.25, 0.25], atol=1e-15)
    out = clipped_softmax([50.0, 0, 0, 0], 1.2, -0.1).data
    assert out[0] == 1.0 and np.all(out[1:] == 0)


def test_ncs_hand_values():
    out = ncs_softmax([0.0, 0.0], 1, 0.9).data
    np.testing.assert_allclose(out, [0.45, 0.45], atol=1e-15)
    assert ncs_softmax([3.7], 1, -5.0).data.tolist() == [1.0]
    # uniform row at T=128 under beta=-2.175: 1/128 * 1.025 - 0.025 < 0 so all mass clips
    assert np.all(ncs_softmax(np.zeros(128), 1, -2.175).data == 0)


def test_ncs_length_mismatch():
    with pytest.raises(ShapeError):
        ncs_softmax(np.zeros(4), 1, 0.9, T=3)


@settings(max_examples=200, deadline=None)
@given(logits)
def test_collapse_is_bit_exact(x):
    np.testing.assert_array_equal(clipped_softmax(x, 1, 0.0).data, vanilla_softmax(x).data)


@settings(max_examples=100, deadline=None)
@given(logits, st.floats(1, 1.5), st.floats(-0.5, 0))
def test_preclip_sum_identity(x, zeta, gamma):
    pre = stretch(vanilla_softmax(x), zeta, gamma).data
    assert pre.sum() == pytest.approx(cs_unclipped_sum(zeta, gamma, len(x)), abs=1e-12)


@settings(max_examples=100, deadline=None)
@given(logits, st.floats(1, 1.5), st.floats(-0.5, 0))
def test_clip_bounds_and_monotone_sums(x, zeta, gamma):
    pre = stretch(vanilla_softmax(x), zeta, gamma).data
    out = clipped_softmax(x, zeta, gamma).data
    assert np.all((out >= 0) & (out <= 1))
    np.testing.assert_array_equal(out, np.clip(pre, 0, 1))
    low_only = np.clip(pre, 0, None).sum()
    assert low_only >= pre.sum() - 1e-12
    assert out.sum() <= low_only + 1e-12


def no_clip_logits(T, rng):
    # near-uniform logits: every stretched entry stays inside (0, 1)
    return rng.uniform(-0.01, 0.01, size=T)


@pytest.mark.parametrize("T", [4, 16, 64, 256])
def test_ncs_length_invariance(T):
    rng = np.random.default_rng(T)
    x = no_clip_logits(T, rng)
    pre = stretch(vanilla_softmax(x), 1.0, ncs_gamma(1.0, 0.9, T)).data
    assert np.all((pre > 0) & (pre < 1))
    assert abs(pre.sum() - 0.9) < 1e-10


def test_causal_ncs_row_sums():
    cfg = SoftmaxConfig("ncs", beta=0.9, direction="causal")
    out, pre = attention_normalize(np.zeros((3, 3)), cfg, causal_mask(3), return_preclip=True)
    np.testing.assert_allclose(pre.data.sum(-1), [1.0, 0.9, 0.9], atol=1e-12)
    assert out.data[0].tolist() == [1.0, 0.0, 0.0]
    assert np.all(out.data[np.triu_indices(3, 1)] == 0)


def test_causal_vanilla_rows():
    p = attention_normalize(np.random.default_rng(0).normal(size=(3, 3)), SoftmaxConfig(direction="causal"),
                            causal_mask(3)).data
    assert np.all(p[np.triu_indices(3, 1)] == 0)
    np.testing.assert_allclose(p.sum(-1), 1, atol=1e-15)


def test_bidirectional_cs_collapse_rowwise():
    s = np.random.default_rng(1).normal(size=(2, 5, 5))
    a = attention_normalize(s, SoftmaxConfig("clipped", gamma=0.0)).data
    np.testing.assert_array_equal(a, attention_normalize(s, SoftmaxConfig()).data)


def test_attention_normalize_errors():
    with pytest.raises(ValueError):
        attention_normalize(np.zeros((3, 3)), SoftmaxConfig(direction="causal"))
    with pytest.raises(ShapeError):
        attention_normalize(np.zeros((3, 3)), SoftmaxConfig(direction="causal"), causal_mask(4))
    with pytest.raises(ValueError):
        attention_normalize(np.zeros((3, 3)), SoftmaxConfig("ncs", alpha=1.0))


@pytest.mark.parametrize("kw", [
    dict(variant="clipped"),
    dict(variant="clipped", gamma=-0.1, alpha=1.0),
    dict(variant="clipped", gamma=0.1),
    dict(variant="clipped", zeta=0.9, gamma=-0.1),
    dict(variant="ncs", beta=1.5),
    dict(variant="vanilla", beta=0.9),
    dict(variant="sparse"),
])
def test_config_validation(kw):
    with pytest.raises(SoftmaxConfigError):
        SoftmaxConfig(**kw)


def test_config_resolve_and_roundtrip():
    cs = SoftmaxConfig("clipped", alpha=3.2).resolve(128)
    assert cs.gamma == pytest.approx(-0.025) and cs.alpha is None
    ncs = SoftmaxConfig("ncs", alpha=3.2).resolve(128)
    assert ncs.beta == pytest.approx(-2.175, abs=1e-12)
    assert SoftmaxConfig.from_dict(ncs.to_dict()) == ncs


def test_clipped_coordinates_get_zero_gradient():
    x = Tensor(np.array([4.0, 0.0, 0.1, -3.0]), requires_grad=True)
    w = np.array([0.3, -1.0, 2.0, 0.7])
    with Tape() as tape:
        out = clipped_softmax(x, 1.0, -0.2)
        tape.backward(T.sum_axis(T.mul(out, w)))
    clipped = (out.data == 0) | (out.data == 1)
    assert clipped.any()
    # perturbing a logit only moves unclipped outputs; gradient through clipped outputs is exactly zero
    with Tape() as tape:
        xt = Tensor(x.data, requires_grad=True)
        o = clipped_softmax(xt, 1.0, -0.2)
        tape.backward(T.sum_axis(T.mul(o, np.where(clipped, 1.0, 0.0))))
    np.testing.assert_array_equal(xt.grad, 0)


@pytest.mark.parametrize("variant", ["vanilla", "clipped", "ncs"])
def test_normalizer_gradients(variant):
    rng = np.random.default_rng(5)
    x = rng.normal(size=(4, 6)) * 0.3
    cfg = {"vanilla": SoftmaxConfig(), "clipped": SoftmaxConfig("clipped", gamma=-0.03),
           "ncs": SoftmaxConfig("ncs", beta=0.9)}[variant]
    w = rng.normal(size=(4, 6))
    _, pre = attention_normalize(x, cfg, return_preclip=True)
    assert np.min(np.minimum(np.abs(pre.data), np.abs(pre.data - 1))) > 1e-3
    f = lambda t: T.sum_axis(T.mul(attention_normalize(t, cfg), w))  # noqa: E731
    assert finite_diff_check(f, x) < 1e-5

