import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.special import erf

from credtrans.credibility import (
    Decoder, check_alpha, credibility_gate, decode, decompose_cls_attention, sample_gate,
)
from credtrans.errors import ConfigError
from credtrans.model import CredibilityTransformer, ModelConfig
from credtrans.training import OptimizerConfig, fit
from credtrans.transformer import attention
from conftest import schema_for

W = 10


def test_predict_mode_returns_transformer_token(rng):
    ct, cp = rng.normal(size=W), rng.normal(size=W)
    for alpha in (0.1, 0.5, 1.0):
        out, z = credibility_gate(ct, cp, alpha, train=False)
        assert z == 1
        np.testing.assert_array_equal(out.value, ct)


def test_alpha_one_always_transformer(rng):
    ct, cp = rng.normal(size=W), rng.normal(size=W)
    for _ in range(200):
        out, z = credibility_gate(ct, cp, 1.0, train=True, rng=rng)
        assert z == 1
    np.testing.assert_array_equal(out.value, ct)


def test_gate_frequency_is_binomial():
    rng = np.random.default_rng(2)
    draws = [sample_gate(0.9, rng) for _ in range(10_000)]
    assert abs(np.mean(draws) - 0.9) < 0.01


def test_gate_mixes_both_paths(rng):
    ct, cp = np.ones(W), np.zeros(W)
    out, z = credibility_gate(ct, cp, 0.5, train=False, z=0.9)
    np.testing.assert_allclose(out.value, 0.9)
    out, z = credibility_gate(ct, cp, 0.5, train=False, z=0)
    np.testing.assert_array_equal(out.value, cp)


@pytest.mark.parametrize("alpha", [-0.1, 1.01, float("nan")])
def test_alpha_out_of_range(alpha):
    with pytest.raises(ConfigError):
        check_alpha(alpha)


# ------------------------------------------------------------------ decoder


def test_decoder_parameter_count(rng):
    assert Decoder(W, rng).num_parameters() == 193


def test_untrained_decoder_is_constant(rng):
    dec = Decoder(W, rng, output_bias=-2.0)
    np.testing.assert_allclose(dec(rng.normal(size=(5, W))).value, np.exp(-2.0), rtol=1e-15)


def test_decoder_zero_weights(rng):
    dec = Decoder(W, rng)
    for p in dec.parameters():
        p.value[:] = 0.0
    np.testing.assert_array_equal(decode(rng.normal(size=(3, W)), dec).value, 1.0)


def test_decoder_bias_only(rng):
    dec = Decoder(W, rng, output_bias=np.log(0.0735))
    for p in dec.parameters():
        if p is not dec.out.bias:
            p.value[:] = 0.0
    np.testing.assert_allclose(decode(rng.normal(size=(3, W)), dec).value, 0.0735, rtol=1e-15)


def test_decoder_matches_composition(rng):
    dec = Decoder(W, rng)
    dec.hidden.bias.value = rng.normal(size=16)
    dec.out.weight.value = rng.normal(size=(16, 1))
    c = rng.normal(size=(4, W))
    z = c @ dec.hidden.weight.value + dec.hidden.bias.value
    z = 0.5 * z * (1 + erf(z / np.sqrt(2)))
    expected = np.exp(z @ dec.out.weight.value[:, 0] + dec.out.bias.value[0])
    np.testing.assert_allclose(dec(c).value, expected, rtol=1e-12)


@given(st.integers(0, 2**31))
def test_decoder_output_positive(seed):
    r = np.random.default_rng(seed)
    dec = Decoder(W, r)
    dec.out.weight.value = r.normal(scale=10, size=(16, 1))
    assert np.all(dec(r.normal(scale=3, size=(5, W))).value > 0)


# ------------------------------------------------------------ decomposition


def test_all_mass_on_cls_is_degenerate(rng):
    A = np.zeros((10, 10))
    A[:, -1] = 1.0
    with pytest.raises(ValueError, match="degenerate decomposition"):
        decompose_cls_attention(A, rng.normal(size=(10, W)))


def test_uniform_row_decomposition(rng):
    A = np.full((10, 10), 0.1)
    V = rng.normal(size=(10, W))
    d = decompose_cls_attention(A, V)
    assert d.P == pytest.approx(0.1, rel=1e-15)
    np.testing.assert_allclose(d.v_covariate, V[:9].mean(0), rtol=1e-13)


@settings(max_examples=50)
@given(st.integers(0, 2**31))
def test_random_decomposition_identity(seed):
    r = np.random.default_rng(seed)
    K, Q, V = (r.normal(size=(10, W)) for _ in range(3))
    H, A = attention(K, Q, V)
    d = decompose_cls_attention(A, V, atol=1e-12)
    np.testing.assert_allclose(d.reconstruct(), H.value[-1], rtol=0, atol=1e-12 * max(1, np.abs(H.value).max()))
    assert d.attention_row[:-1].sum() == pytest.approx(1 - d.P, abs=1e-12)


def test_identity_holds_on_model_forward(small_data):
    spec, data = small_data
    model = CredibilityTransformer.build(schema_for(spec), ModelConfig(), data, 0)
    batch = model.encode(data.subset(np.arange(50)))
    x = model.input_norm(model.tokenizer(batch))
    att = model.layers[0].attn
    K, Q, V = att.kqv(x)
    H, A = attention(K, Q, V)
    d = decompose_cls_attention(A, V)
    np.testing.assert_allclose(d.reconstruct(), H.value[:, -1], atol=1e-10)


# --------------------------------------------------------- model-level gate


def test_prior_predictor_is_constant_after_training(small_data):
    spec, data = small_data
    model = CredibilityTransformer.build(schema_for(spec), ModelConfig(alpha=0.5), data, 1)
    fit(model, data, OptimizerConfig(epochs=2, batch_size=128), seed=1)
    rng = np.random.default_rng(9)
    idx = rng.choice(data.n, 100, replace=False)
    mu = model.predict(data.subset(idx), z=0)
    assert np.ptp(mu) <= 1e-12 * mu.mean()
    assert np.ptp(model.predict(data.subset(idx))) > 0


def test_predict_mode_independent_of_alpha(small_data):
    spec, data = small_data
    model = CredibilityTransformer.build(schema_for(spec), ModelConfig(alpha=0.3), data, 4)
    part = data.subset(np.arange(40))
    base = model.predict(part)
    for alpha in (0.5, 0.9, 1.0):
        model.config.alpha = alpha
        np.testing.assert_array_equal(model.predict(part), base)
