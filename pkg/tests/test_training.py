import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from credtrans import autodiff as ad
from credtrans.autodiff import Parameter
from credtrans.data import Dataset, SyntheticSpec, default_synthetic_spec, generate_synthetic
from credtrans.errors import ConfigError, DataError, NumericalError
from credtrans.model import CredibilityTransformer, ModelConfig
from credtrans.training import (
    Ensemble, Optimizer, OptimizerConfig, deviance_loss, ensemble_predict, evaluate, fit,
    init_state, null_deviance, optimizer_step, poisson_deviance, stratified_split,
    train_ensemble, unit_deviances,
)
from conftest import schema_for
from gradcheck import check_gradients

# ---------------------------------------------------------------- deviance


def test_deviance_saturated_single():
    assert poisson_deviance([3.0], [3], [1.0]) == 0.0


def test_deviance_zero_count_limit():
    assert poisson_deviance([0.05], [0], [2.0]) == pytest.approx(0.2, rel=1e-15)


def test_deviance_hand_computation():
    mu, y, v = np.array([0.1, 0.4]), np.array([0.0, 2.0]), np.array([0.5, 1.0])
    expected = (2 / 2) * ((0.05 - 0) + (0.4 - 2 - 2 * math.log(0.4 / 2)))
    assert poisson_deviance(mu, y, v) == pytest.approx(expected, rel=1e-14)


def test_deviance_errors():
    with pytest.raises(ValueError):
        poisson_deviance([0.0], [1], [1.0])
    with pytest.raises(ValueError):
        poisson_deviance([-1.0], [1], [1.0])
    with pytest.raises(DataError):
        poisson_deviance([1.0], [1], [0.0])
    with pytest.raises(DataError):
        poisson_deviance([1.0], [1.5], [1.0])


@given(st.lists(st.tuples(st.floats(1e-4, 5), st.integers(0, 6), st.floats(0.01, 2)), min_size=1, max_size=30))
def test_deviance_nonnegative_and_zero_when_saturated(rows):
    mu, y, v = map(np.array, zip(*rows))
    assert poisson_deviance(mu, y, v) >= 0.0
    sat = np.where(y > 0, y / v, 1e-300)
    assert poisson_deviance(sat, y, v) <= 2 * np.sum(v * sat) / len(rows) + 1e-12


def test_loss_matches_numpy_deviance_and_gradient(rng):
    y = rng.poisson(0.3, size=20).astype(float)
    v = rng.uniform(0.1, 1, size=20)
    log_mu = Parameter(rng.normal(-1, 0.5, size=20))
    loss = deviance_loss(log_mu, y, v)
    assert float(loss.value) == pytest.approx(poisson_deviance(np.exp(log_mu.value), y, v), rel=1e-12)
    np.testing.assert_allclose(unit_deviances(np.exp(log_mu.value), y, v).mean(), float(loss.value), rtol=1e-12)
    assert check_gradients(lambda: deviance_loss(log_mu, y, v), [log_mu], rng) < 1e-6


def test_null_deviance_is_bias_only_model():
    data = Dataset({"x": np.zeros(4)}, exposure=[1, 0.5, 1, 2], counts=[0, 1, 0, 2])
    lam = 3 / 4.5
    assert null_deviance(data) == pytest.approx(poisson_deviance(np.full(4, lam), data.counts, data.exposure))


# -------------------------------------------------------------- optimizers


def _scalar_step(kind, g, theta=1.0, **kw):
    p = Parameter(np.array([theta]), decay=True)
    cfg = OptimizerConfig(kind=kind, **kw)
    state = init_state([p])
    optimizer_step([p], [np.array([g])], state, cfg)
    return p.value[0], state


def test_adam_first_step_scalar_oracle():
    g, lr, b1, b2, eps = 0.3, 0.01, 0.9, 0.999, 1e-7
    theta, _ = _scalar_step("adam", g, lr=lr, beta1=b1, beta2=b2, eps=eps)
    m, v = (1 - b1) * g, (1 - b2) * g * g
    step = lr * math.sqrt(1 - b2) / (1 - b1)
    assert theta == pytest.approx(1.0 - step * m / (math.sqrt(v) + eps), rel=1e-15)
    # first step moves by lr up to the eps term
    assert 1.0 - theta == pytest.approx(lr, rel=1e-4)


def test_zero_gradient_leaves_parameters():
    for kind in ("adam", "nadam", "adamW"):
        theta, _ = _scalar_step(kind, 0.0, theta=0.7)
        assert theta == 0.7


def test_adamw_decay_with_zero_gradient():
    theta, _ = _scalar_step("adamW", 0.0, theta=2.0, lr=0.01, weight_decay=0.02)
    assert theta == pytest.approx(2.0 * (1 - 0.01 * 0.02), rel=1e-15)


def test_nadam_matches_hand_recursion():
    lr, b1, b2, eps = 0.002, 0.9, 0.999, 1e-7
    grads = [0.5, -0.2, 0.1, 0.4]
    p = Parameter(np.array([1.0]))
    state = init_state([p])
    cfg = OptimizerConfig(kind="nadam", lr=lr, beta1=b1, beta2=b2, eps=eps)
    theta, m, v, prod = 1.0, 0.0, 0.0, 1.0
    for t, g in enumerate(grads, start=1):
        optimizer_step([p], [np.array([g])], state, cfg)
        mu_t = b1 * (1 - 0.5 * 0.96 ** (0.004 * t))
        mu_next = b1 * (1 - 0.5 * 0.96 ** (0.004 * (t + 1)))
        prod *= mu_t
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        m_hat = (1 - mu_t) * g / (1 - prod) + mu_next * m / (1 - prod * mu_next)
        theta -= lr * m_hat / (math.sqrt(v / (1 - b2**t)) + eps)
        assert p.value[0] == pytest.approx(theta, rel=1e-13)


def test_adam_multi_step_oracle():
    lr, b1, b2, eps = 0.01, 0.9, 0.98, 1e-7
    p = Parameter(np.array([0.5]))
    opt = Optimizer([p], OptimizerConfig(kind="adam", lr=lr, beta1=b1, beta2=b2, eps=eps))
    theta, m, v = 0.5, 0.0, 0.0
    for t, g in enumerate([1.0, -2.0, 0.5], start=1):
        p.grad[:] = g
        opt.step()
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        theta -= lr * math.sqrt(1 - b2**t) / (1 - b1**t) * m / (math.sqrt(v) + eps)
        assert p.value[0] == pytest.approx(theta, rel=1e-14)


def test_decay_skips_flagged_parameters(small_data):
    spec, data = small_data
    model = CredibilityTransformer.build(schema_for(spec), ModelConfig(), data, 0)
    before = model.state_dict()
    opt = Optimizer(model.parameters(), OptimizerConfig.adamw(lr=0.1))
    model.zero_grad()
    opt.step()
    for name, p in model.named_parameters():
        changed = not np.array_equal(p.value, before[name])
        decays = name.endswith("weight") or name.endswith("w_o") or name.endswith(".table")
        assert changed == (decays and np.any(before[name] != 0)), name
        if any(k in name for k in ("norm", "bias", "cls", "positional", "gate")):
            assert not changed, name


def test_optimizer_config_validation():
    with pytest.raises(ConfigError):
        OptimizerConfig(kind="sgd")
    with pytest.raises(ConfigError):
        OptimizerConfig(beta2=1.0)
    with pytest.raises(ConfigError):
        OptimizerConfig(kind="adam", weight_decay=0.1)
    with pytest.raises(ConfigError):
        OptimizerConfig.from_dict({"lr": 0.1, "momentum": 0.9})
    cfg = OptimizerConfig.from_dict({"preset": "normformer"})
    assert (cfg.kind, cfg.lr, cfg.beta2) == ("adam", 0.002, 0.98)
    cfg = OptimizerConfig.adamw()
    assert (cfg.weight_decay, cfg.beta2, cfg.batch_size) == (0.02, 0.95, 4096)


# --------------------------------------------------------------------- split


@settings(max_examples=30, deadline=None)
@given(st.integers(20, 3000), st.integers(0, 2**31))
def test_split_is_partition_of_ratio(n, seed):
    r = np.random.default_rng(seed)
    counts = r.poisson(0.1, size=n)
    tr, va = stratified_split(counts, seed, exposure=r.uniform(size=n))
    assert len(np.intersect1d(tr, va)) == 0 and len(tr) + len(va) == n
    assert len(va) == int(n * 0.1)
    occ = np.sum(counts > 0)
    assert abs(np.sum(counts[va] > 0) - occ / 10) <= 1


def test_split_is_seeded():
    counts = np.random.default_rng(0).poisson(0.1, size=500)
    a, b = stratified_split(counts, 3), stratified_split(counts, 3)
    np.testing.assert_array_equal(a[1], b[1])
    assert not np.array_equal(a[1], stratified_split(counts, 4)[1])


# -------------------------------------------------------------------- fitting


def _homogeneous(n, lam, seed):
    spec = SyntheticSpec(n=n, categorical=[], intercept=math.log(lam), continuous=[
        default_synthetic_spec().continuous[0], default_synthetic_spec().continuous[2]])
    for c in spec.continuous:
        c.coef = 0.0
    spec.interaction = None
    return spec, generate_synthetic(spec, seed)


def test_homogeneous_data_converges_to_null():
    spec, data = _homogeneous(4000, 0.1, 5)
    model = CredibilityTransformer.build(schema_for(spec), ModelConfig(), data, 0)
    run = fit(model, data, OptimizerConfig(epochs=8, batch_size=256, patience=3), seed=0)
    from credtrans.training import stratified_split as split
    _, va = split(data.counts, np.random.SeedSequence(0).spawn(3)[0], exposure=data.exposure)
    val = data.subset(va)
    null = null_deviance(val, data.subset(np.setdiff1d(np.arange(data.n), va)).empirical_frequency)
    assert abs(run.best_val_loss - null) / null < 0.01
    # epoch 0: the bias is the portfolio mean, so the model is the homogeneous predictor
    assert run.history[0]["val_loss"] == pytest.approx(null, rel=0.01)


def test_epoch_zero_train_loss_near_null(small_data):
    spec, data = small_data
    model = CredibilityTransformer.build(schema_for(spec), ModelConfig(), data, 2)
    run = fit(model, data, OptimizerConfig(epochs=0), seed=2)
    assert run.history[0]["train_loss"] == pytest.approx(null_deviance(data), rel=0.05)


def test_restored_snapshot_attains_minimum(small_data):
    spec, data = small_data
    model = CredibilityTransformer.build(schema_for(spec), ModelConfig(), data, 3)
    run = fit(model, data, OptimizerConfig(epochs=6, batch_size=64, lr=0.01, patience=2), seed=3)
    assert run.best_val_loss == min(run.val_losses)
    assert run.history[run.best_epoch]["val_loss"] == run.best_val_loss
    _, va = stratified_split(data.counts, np.random.SeedSequence(3).spawn(3)[0], exposure=data.exposure)
    vd = data.subset(va)
    assert poisson_deviance(model.predict(vd), vd.counts, vd.exposure) == run.best_val_loss


def test_fit_is_reproducible(small_data):
    spec, data = small_data
    cfg = OptimizerConfig(epochs=3, batch_size=128)
    runs = []
    for _ in range(2):
        model = CredibilityTransformer.build(schema_for(spec), ModelConfig(), data, 7)
        runs.append(fit(model, data, cfg, seed=7))
    assert runs[0].history == runs[1].history
    for k in runs[0].params:
        np.testing.assert_array_equal(runs[0].params[k], runs[1].params[k])


def test_divergence_raises(small_data):
    spec, data = small_data
    model = CredibilityTransformer.build(schema_for(spec), ModelConfig(), data, 3)
    model.decoder.out.bias.value[:] = 800.0
    with pytest.raises(NumericalError):
        fit(model, data, OptimizerConfig(epochs=1), seed=0)


def test_fit_rejects_empty(small_data):
    spec, data = small_data
    model = CredibilityTransformer.build(schema_for(spec), ModelConfig(), data, 3)
    with pytest.raises(DataError):
        fit(model, data.subset(np.array([], dtype=int)), OptimizerConfig(), seed=0)


def test_alpha_zero_predictor_is_portfolio_mean(small_data):
    spec, data = small_data
    model = CredibilityTransformer.build(schema_for(spec), ModelConfig(alpha=0.0), data, 5)
    fit(model, data, OptimizerConfig(epochs=3, batch_size=128), seed=5)
    mu = model.predict(data)
    assert np.ptp(mu) <= 1e-12 * mu.mean()
    assert mu[0] == pytest.approx(data.empirical_frequency, rel=0.01)


# ------------------------------------------------------------------ ensemble


class Const:
    def __init__(self, value):
        self.value = value

    def predict(self, data):
        return np.full(data.n, self.value)


def test_ensemble_examples():
    data = Dataset({"x": np.zeros(3)}, exposure=np.ones(3), counts=np.zeros(3))
    np.testing.assert_allclose(ensemble_predict([Const(0.05), Const(0.15)], data), 0.10, rtol=1e-15)
    np.testing.assert_array_equal(ensemble_predict([Const(0.07)], data), 0.07)
    with pytest.raises(ValueError):
        ensemble_predict([], data)
    with pytest.raises(ValueError):
        Ensemble([])


def test_ensemble_jensen(small_data):
    spec, data = small_data
    ens = train_ensemble(schema_for(spec), ModelConfig(), OptimizerConfig(epochs=2, batch_size=128),
                         data, seeds=[1, 2, 3])
    test = generate_synthetic(spec, 99)
    member = [evaluate(m, test)[0] for m in ens.members]
    dev, mu = evaluate(ens, test)
    assert dev <= np.mean(member) + 1e-15
    per_member = np.array([unit_deviances(m.predict(test), test.counts, test.exposure) for m in ens.members])
    assert np.all(unit_deviances(mu, test.counts, test.exposure) <= per_member.mean(0) + 1e-12)


def test_parallel_ensemble_matches_serial(small_data):
    spec, data = small_data
    args = (schema_for(spec), ModelConfig(), OptimizerConfig(epochs=1, batch_size=256), data, [4, 5])
    a, b = train_ensemble(*args, workers=1), train_ensemble(*args, workers=2)
    np.testing.assert_array_equal(a.predict(data), b.predict(data))


def test_strict_consistency_smoke():
    spec = default_synthetic_spec(200_000)
    data = generate_synthetic(spec, 11)
    true = poisson_deviance(data.true_rate, data.counts, data.exposure)
    for eps in (-0.1, 0.1):
        assert true < poisson_deviance(data.true_rate * (1 + eps), data.counts, data.exposure)


def test_evaluate_saturated_and_null():
    data = Dataset({"x": np.zeros(3)}, exposure=[1.0, 2.0, 1.0], counts=[1, 2, 3])
    assert evaluate(Const(data.empirical_frequency), data)[0] == pytest.approx(null_deviance(data))

    class Sat:
        def predict(self, d):
            return d.counts / d.exposure

    assert evaluate(Sat(), data)[0] == pytest.approx(0.0, abs=1e-15)


def test_loss_gradient_through_model(small_data, rng):
    spec, data = small_data
    model = CredibilityTransformer.build(schema_for(spec), ModelConfig(dropout=0.0), data, 0)
    part = data.subset(np.arange(8))
    batch = model.encode(part)
    fn = lambda: deviance_loss(model.forward(batch).log_mu, part.counts, part.exposure)  # noqa: E731
    assert check_gradients(fn, model.parameters(), rng, max_coords=5) < 1e-4
    assert np.isfinite(float(fn().value)) and isinstance(fn(), ad.Tensor)
