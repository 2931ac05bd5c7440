import csv

import numpy as np
import pytest

import dtmil.train as train_mod
from dtmil.errors import ConfigError, TrainingDiverged
from dtmil.model import ModelArch, backward_batch, bag_loss, forward_batch, init_model, predict_batch
from dtmil.train import (
    AdamState,
    BagSet,
    TrainConfig,
    adam_step,
    add_l2,
    constant_loss,
    evaluate_auc,
    train,
    write_log,
)
from gradcheck import max_rel_error, numeric_grad

SMALL = dict(gru_units=4, dense_units=8)


def toy_bags(seed, n=40, length=8, positive_value=5.0, negative_value=-5.0):
    """Positives hide one +5 instance among -5 instances; negatives are all -5."""
    rng = np.random.default_rng(seed)
    bags, labels = [], []
    for i in range(n):
        L = int(rng.integers(3, length + 1))
        b = np.full((L, 1), negative_value)
        y = i % 2
        if y:
            b[rng.integers(0, L)] = positive_value
        bags.append(b)
        labels.append(y)
    return BagSet.from_bags(bags, labels)


def noise_bags(seed, n=60, length=6, dim=3):
    rng = np.random.default_rng(seed)
    bags = [rng.normal(size=(int(rng.integers(2, length + 1)), dim)) for _ in range(n)]
    return BagSet.from_bags(bags, rng.integers(0, 2, n))


class TestConfig:
    def test_defaults(self):
        c = TrainConfig()
        assert (c.learning_rate, c.l2_coeff, c.beta1, c.beta2, c.adam_eps) == (0.002, 0.01, 0.9, 0.999, 1e-8)
        assert c.to_dict()["batch_size"] == 32

    @pytest.mark.parametrize("kw", [dict(learning_rate=0.0), dict(beta1=1.0), dict(beta2=-0.1), dict(l2_coeff=-1),
                                    dict(batch_size=0), dict(patience=0), dict(max_epochs=-1),
                                    dict(max_restarts=-1), dict(stuck_loss_ratio=0.0)])
    def test_invalid(self, kw):
        with pytest.raises(ConfigError):
            TrainConfig(**kw)


def scalar_setup(value):
    """A tiny model whose only non-zero gradient will be placed on b_out."""
    params = init_model(ModelArch(1, variant="shallow", gru_units=1), scheme="zeros")
    params.logistic.b_out[...] = value
    return params


class TestAdam:
    def test_zero_gradient_keeps_params(self):
        params = init_model(ModelArch(2, **SMALL), seed=0)
        before = params.copy()
        state = AdamState.zeros(params)
        adam_step(params, params.zeros_like(), state, TrainConfig())
        np.testing.assert_array_equal(params.flat(), before.flat())
        assert state.t == 1

    @pytest.mark.parametrize("g", [3.7, -0.02, 1e3])
    def test_first_step_is_sign_step(self, g):
        cfg = TrainConfig()
        params = scalar_setup(0.5)
        grads = params.zeros_like()
        grads.logistic.b_out[...] = g
        adam_step(params, grads, AdamState.zeros(params), cfg)
        delta = float(params.logistic.b_out) - 0.5
        # bias correction makes m_hat = g and v_hat = g^2 exactly
        assert delta == pytest.approx(-cfg.learning_rate * g / (abs(g) + cfg.adam_eps), rel=1e-12)
        assert delta == pytest.approx(-cfg.learning_rate * np.sign(g), rel=1e-5)

    def test_three_steps_on_quadratic(self):
        # f = 1.5 (theta - 0.4)^2 from theta = 2; trajectory from a 50-digit evaluation of the recurrence
        expected = [1.9980000000041666667, 1.9960000656043711842, 1.9940002404764707322]
        cfg = TrainConfig()
        params = scalar_setup(2.0)
        state = AdamState.zeros(params)
        for want in expected:
            grads = params.zeros_like()
            grads.logistic.b_out[...] = 3.0 * (float(params.logistic.b_out) - 0.4)
            adam_step(params, grads, state, cfg)
            assert float(params.logistic.b_out) == pytest.approx(want, abs=1e-15)
        assert state.t == 3
        assert all(np.all(v >= 0) for _, v in state.v.tensors())

    def test_non_finite_gradient_named(self):
        params = init_model(ModelArch(2, **SMALL), seed=0)
        grads = params.zeros_like()
        grads.dense.W_fc[0, 0] = np.nan
        with pytest.raises(TrainingDiverged, match="dense.W_fc"):
            adam_step(params, grads, AdamState.zeros(params), TrainConfig())


class TestL2:
    def test_zero_coefficient(self):
        params = init_model(ModelArch(2, **SMALL), seed=1)
        grads = params.copy()
        before = grads.flat()
        add_l2(grads, params, 0.0)
        np.testing.assert_array_equal(grads.flat(), before)

    def test_pure_decay_includes_biases(self):
        params = init_model(ModelArch(2, **SMALL), seed=1)
        for _, a in params.tensors():
            a += 0.3
        grads = params.zeros_like()
        add_l2(grads, params, 0.01)
        np.testing.assert_array_equal(grads.flat(), 0.01 * params.flat())
        assert np.all(grads.gru.b_z != 0) and float(grads.logistic.b_out) != 0

    def test_regularised_loss_finite_differences(self):
        rng = np.random.default_rng(3)
        arch = ModelArch(2, gru_units=3, dense_units=4)
        params = init_model(arch, seed=3)
        for _, a in params.tensors():
            a += rng.normal(scale=0.3, size=a.shape)
        x = rng.normal(size=(3, 5, 2))
        mask = np.arange(5) < np.array([[5], [3], [4]])
        y = np.array([1.0, 0.0, 1.0])
        lam = 0.01

        def objective():
            tr = forward_batch(x, mask, params)
            return float(np.mean(bag_loss(tr.y_hat, y))) + 0.5 * lam * float(np.sum(params.flat() ** 2))

        grads = params.zeros_like()
        backward_batch(forward_batch(x, mask, params), y, params, grads, weights=1.0 / 3)
        add_l2(grads, params, lam)
        for (name, g), (_, a) in zip(grads.tensors(), params.tensors()):
            assert max_rel_error(g, numeric_grad(objective, a)) < 1e-5, name


class TestTrain:
    def test_zero_epochs(self):
        data = toy_bags(0)
        arch = ModelArch(1, **SMALL)
        res = train(data, data, arch, TrainConfig(max_epochs=0, seed=4))
        assert res.log == [] and res.best_epoch == 0
        np.testing.assert_array_equal(res.params.flat(), init_model(arch, seed=4).flat())

    def test_empty_split(self):
        data = toy_bags(0)
        empty = BagSet.from_bags([], [])
        with pytest.raises(ConfigError):
            train(empty, data, ModelArch(1, **SMALL))
        with pytest.raises(ConfigError):
            train(data, empty, ModelArch(1, **SMALL))

    def test_width_mismatch(self):
        data = toy_bags(0)
        with pytest.raises(ConfigError):
            train(data, data, ModelArch(3, **SMALL))

    def test_separable_toy_reaches_auc_one(self):
        data = toy_bags(1)
        res = train(data, toy_bags(2), ModelArch(1), TrainConfig(max_epochs=50, patience=50, seed=0))
        assert any(r.train_auc == 1.0 for r in res.log)
        assert evaluate_auc(res.params, data) == 1.0

    def test_deterministic(self):
        data, val = toy_bags(3), toy_bags(4)
        cfg = TrainConfig(max_epochs=6, batch_size=8, seed=2)
        a = train(data, val, ModelArch(1, **SMALL), cfg)
        b = train(data, val, ModelArch(1, **SMALL), cfg)
        assert a.log == b.log
        np.testing.assert_array_equal(a.params.flat(), b.params.flat())

    def test_best_model_contract(self):
        data, val = noise_bags(0), noise_bags(1)
        res = train(data, val, ModelArch(3, **SMALL), TrainConfig(max_epochs=12, patience=12, batch_size=8,
                                                                   max_restarts=0))
        aucs = [r.val_auc for r in res.log]
        assert res.best_val_auc == max(aucs)
        assert res.log[res.best_epoch - 1].val_auc == res.best_val_auc
        assert evaluate_auc(res.params, val) == res.best_val_auc
        assert [r.is_best for r in res.log].count(True) >= 1

    def test_early_stopping(self):
        data, val = noise_bags(2), noise_bags(3)
        res = train(data, val, ModelArch(3, **SMALL), TrainConfig(max_epochs=100, patience=3, batch_size=16,
                                                                   max_restarts=0))
        assert len(res.log) - res.best_epoch == 3

    def test_single_batch_loss_decreases(self):
        failures = 0
        for seed in range(10):
            data = toy_bags(seed, n=16)
            losses = []
            train(data, data, ModelArch(1, **SMALL), TrainConfig(max_epochs=5, patience=5, batch_size=16, seed=seed,
                                                                 max_restarts=0),
                  on_epoch=lambda r, p: losses.append(r.train_loss))
            if not all(b < a for a, b in zip(losses, losses[1:])):
                failures += 1
        assert failures <= 1

    def test_regularisation_pull(self):
        data, val = noise_bags(5, n=64), noise_bags(6)
        norms = []

        def record(rec, params):
            norms.append(sum(float(np.sum(a ** 2)) for n, a in params.tensors() if ".W" in n or ".w" in n))

        train(data, val, ModelArch(3, **SMALL), TrainConfig(max_epochs=40, patience=40, batch_size=64,
                                                            l2_coeff=0.05, max_restarts=0), on_epoch=record)
        tail = norms[9:]
        assert all(b < a for a, b in zip(tail, tail[1:]))

    def test_divergence_keeps_last_good(self, monkeypatch):
        data = toy_bags(0)
        calls = []
        real = train_mod.backward_batch

        def flaky(*args, **kwargs):
            calls.append(1)
            return float("nan") if len(calls) == 3 else real(*args, **kwargs)

        monkeypatch.setattr(train_mod, "backward_batch", flaky)
        with pytest.raises(TrainingDiverged) as exc:
            train(data, data, ModelArch(1, **SMALL), TrainConfig(max_epochs=3, batch_size=16))
        assert exc.value.last_good is not None
        assert np.all(np.isfinite(exc.value.last_good.flat()))


class TestRestarts:
    def test_constant_loss(self):
        assert constant_loss([1, 0]) == pytest.approx(np.log(2.0))
        assert constant_loss([0, 0, 0, 1]) == pytest.approx(-(0.25 * np.log(0.25) + 0.75 * np.log(0.75)))

    def test_stalled_run_restarts(self):
        data, val = noise_bags(7), noise_bags(8)
        cfg = TrainConfig(max_epochs=4, patience=4, batch_size=16, max_restarts=2, restart_check_epoch=2)
        res = train(data, val, ModelArch(3, **SMALL), cfg)
        assert res.restarts == 2 and res.init_seed != cfg.seed
        assert len(res.log) == 4

    def test_healthy_run_unchanged(self):
        data, val = toy_bags(1), toy_bags(2)
        base = dict(max_epochs=8, patience=8, batch_size=8, seed=3)
        a = train(data, val, ModelArch(1), TrainConfig(max_restarts=0, **base))
        b = train(data, val, ModelArch(1), TrainConfig(max_restarts=2, **base))
        assert b.restarts == 0 and b.init_seed == 3
        assert a.log == b.log
        np.testing.assert_array_equal(a.params.flat(), b.params.flat())


def test_bagset_take_trims_padding():
    data = BagSet.from_bags([np.ones((2, 1)), np.ones((5, 1)), np.ones((3, 1))], [0, 1, 0])
    x, mask, y = data.take(np.array([0, 2]))
    assert x.shape == (2, 3, 1) and mask.sum() == 5 and y.tolist() == [0, 0]


def test_write_log(tmp_path):
    data = toy_bags(0)
    res = train(data, data, ModelArch(1, **SMALL), TrainConfig(max_epochs=3, batch_size=16))
    write_log(tmp_path / "log.csv", res.log)
    rows = list(csv.reader(open(tmp_path / "log.csv")))
    assert rows[0] == ["epoch", "train_loss", "train_auc", "val_auc", "is_best"]
    assert len(rows) == 4
    assert float(rows[1][1]) == res.log[0].train_loss


def test_predictions_use_padding_correctly():
    data = toy_bags(9)
    params = init_model(ModelArch(1, **SMALL), seed=0)
    _, y_hat = predict_batch(data.x, data.mask, params)
    for i in range(len(data)):
        n = int(data.mask[i].sum())
        _, yi = predict_batch(data.x[i:i + 1, :n], data.mask[i:i + 1, :n], params)
        assert yi[0] == pytest.approx(y_hat[i], abs=1e-15)
