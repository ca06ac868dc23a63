import logging
import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from mfbf.barrier import (
    ConstantManeuver,
    ExactBarrier,
    RolloutBarrier,
    SafetyFunction,
    admissible,
    gamma_straight,
    position_safety,
)
from mfbf.dynamics import ActionSet, DoubleIntegratorPlant, FixedWingPlant
from mfbf.learning import (
    Dataset,
    InputEncoder,
    LearnedBarrier,
    MLPRegressor,
    SamplerSpec,
    TrainConfig,
    derive_seed,
    encoder_for,
    expand_safe_set,
    expand_safe_set_with_max,
    fit_regressor,
    generate_dataset,
    iterate_expansion,
    learned_barrier,
    overprediction_rate,
    predict_with_uncertainty,
)
from mfbf.learning.mlp import _backprop
from mfbf.sim import ManeuverPolicy

from oracles import di_rollout_min

log = logging.getLogger(__name__)

DI = DoubleIntegratorPlant(0.1)
FW = FixedWingPlant()
DI_BOX = SamplerSpec((-1.0, -3.0), (3.0, 3.0))
FW_BOX = SamplerSpec()
DI_ACTIONS = ActionSet.from_values([0.0, 0.5, 1.0, 1.5, 2.0])


class ConstantNominal(ManeuverPolicy):
    """Constant nominal control that also advertises the filter's action set."""

    def __init__(self, u, action_set=DI_ACTIONS):
        super().__init__(ConstantManeuver([u]))
        self.action_set = action_set


def di_encoder(n_actions=0):
    return encoder_for(DI_BOX, DI, n_actions=n_actions)


def small_cfg(**kw):
    kw = {"hidden": (16, 16), "epochs": 30, "batch_size": 32, "dropout": 0.1, "mc_samples": 8,
          "optimizer": "adam", "lr": 1e-2, **kw}
    return TrainConfig(**kw)


def fw_states(rng, n):
    return FW_BOX.sample(range(n), seed=int(rng.integers(1 << 30)))


# -- configuration ---------------------------------------------------------


def test_train_config_validation():
    with pytest.raises(ValueError):
        TrainConfig(mc_samples=1)
    with pytest.raises(ValueError):
        TrainConfig(n_sigma=-0.1)
    with pytest.raises(ValueError):
        TrainConfig(optimizer="rmsprop")
    assert TrainConfig.full_scale().hidden == (1024,) * 4
    assert TrainConfig.full_scale().epochs == 10000


def test_encoder_width_for_two_vehicles():
    enc = encoder_for(FW_BOX, FW, pair_features=False)
    assert enc.n_features == 12
    assert encoder_for(FW_BOX, FW).n_features == 17
    assert encoder_for(FW_BOX, FW, n_actions=9).encode(np.zeros((2, 8)), [0, 8]).shape == (2, 26)
    with pytest.raises(ValueError):
        InputEncoder((0.0,), (1.0,), pair_features=True)


def test_normalization_round_trip(rng):
    enc = encoder_for(FW_BOX, FW)
    X = rng.uniform(-1e3, 1e3, (500, 8))
    np.testing.assert_allclose(enc.denormalize(enc.normalize(X)), X, rtol=0, atol=1e-12 * 1e3)
    Z = enc.normalize(FW_BOX.sample(range(200)))
    assert Z.min() >= -1 and Z.max() <= 1


@given(st.floats(-500, 500), st.floats(-500, 500), st.floats(-math.pi, math.pi))
def test_pair_features_are_rigid_motion_invariant(tx, ty, rot):
    enc = encoder_for(FW_BOX, FW)
    X = FW_BOX.sample(range(5), seed=3)
    c, s = math.cos(rot), math.sin(rot)
    Y = X.copy()
    for i in (0, 4):
        Y[:, i] = c * X[:, i] - s * X[:, i + 1] + tx
        Y[:, i + 1] = s * X[:, i] + c * X[:, i + 1] + ty
        Y[:, i + 2] = X[:, i + 2] + rot
    np.testing.assert_allclose(enc.encode(Y)[:, -5:], enc.encode(X)[:, -5:], atol=1e-9)


# -- regressor -------------------------------------------------------------


def test_backprop_matches_finite_differences(rng):
    enc = InputEncoder((-1.0,) * 3, (1.0,) * 3)
    model = MLPRegressor.init(enc, (6, 5), dropout=0.0, seed=2)
    F = rng.normal(size=(7, 3))
    y = rng.normal(size=7)

    def loss():
        r = model.forward(F) - y
        return 0.5 * np.mean(r * r)

    _, gW, gb = _backprop(model, F, y, rng, 0.0)
    eps = 1e-6
    for params, grads in ((model.weights, gW), (model.biases, gb)):
        for p, g in zip(params, grads):
            num = np.zeros_like(p)
            for idx in np.ndindex(p.shape):
                old = p[idx]
                p[idx] = old + eps
                up = loss()
                p[idx] = old - eps
                down = loss()
                p[idx] = old
                num[idx] = (up - down) / (2 * eps)
            np.testing.assert_allclose(g, num, rtol=1e-5, atol=1e-8)


def test_single_sample_overfit():
    x = FW_BOX.sample([0])
    X = np.repeat(x, 16, axis=0)
    y = np.full(16, 37.0)
    cfg = TrainConfig(hidden=(32, 32), epochs=3000, batch_size=16, optimizer="adam", lr=1e-3, val_fraction=0.0)
    model = fit_regressor(X, y, cfg, encoder_for(FW_BOX, FW), target_scale=50.0)
    assert abs(model.predict(x)[0] - 37.0) <= 0.01 * 50.0


def test_constant_target_and_history_length():
    X = FW_BOX.sample(range(2000), seed=5)
    y = np.full(len(X), -12.5)
    cfg = TrainConfig(hidden=(16, 16), epochs=200, batch_size=64, optimizer="adam", lr=3e-3, dropout=0.0)
    model = fit_regressor(X, y, cfg, encoder_for(FW_BOX, FW), target_scale=50.0)
    assert len(model.history["train_loss"]) == len(model.history["val_loss"]) == 200
    assert len(model.history["val_index"]) == 400
    # root-mean-square validation error within 1% of the clip
    assert model.history["val_loss"][-1] < (0.01 * 50.0) ** 2


def test_fit_rejects_bad_data():
    enc = di_encoder()
    cfg = small_cfg()
    with pytest.raises(ValueError):
        fit_regressor(np.zeros((1, 2)), [0.0], cfg, enc)
    with pytest.raises(ValueError):
        fit_regressor(np.array([[0.0, np.nan], [1.0, 0.0]]), [0.0, 1.0], cfg, enc)
    with pytest.raises(ValueError):
        fit_regressor(np.zeros((3, 2)), [0.0, 1.0, np.inf], cfg, enc)


def test_training_is_deterministic(rng):
    X = rng.uniform(-1, 3, (64, 2))
    y = X[:, 0] - 0.5 * X[:, 1]
    a = fit_regressor(X, y, small_cfg(), di_encoder())
    b = fit_regressor(X, y, small_cfg(), di_encoder())
    for wa, wb in zip(a.weights, b.weights):
        assert np.array_equal(wa, wb)
    assert a.history["val_loss"] == b.history["val_loss"]


@pytest.fixture(scope="module")
def di_model():
    X = DI_BOX.sample(range(400), seed=5)
    y = np.minimum(X[:, 0], 2.0)
    return fit_regressor(X, y, small_cfg(epochs=60, dropout=0.3, mc_samples=20), di_encoder())


def test_zero_dropout_gives_zero_sigma(rng):
    model = MLPRegressor.init(encoder_for(FW_BOX, FW), (16, 16), dropout=0.0, target_scale=50.0)
    X = fw_states(rng, 30)
    mean, sigma = predict_with_uncertainty(model, X, 10)
    assert np.all(sigma == 0.0)
    assert np.array_equal(mean, model.predict(X))
    h = LearnedBarrier(model, n_sigma=0.0, plant=FW)
    assert np.array_equal(h.value(X), model.predict(X))


def test_mc_sigma_is_reproducible_and_nonnegative(di_model, rng):
    X = rng.uniform(-2, 4, (300, 2))
    m1, s1 = predict_with_uncertainty(di_model, X, 20, seed=9)
    m2, s2 = predict_with_uncertainty(di_model, X, 20, seed=9)
    assert np.array_equal(m1, m2) and np.array_equal(s1, s2)
    assert np.all(s1 >= 0) and np.any(s1 > 0)
    with pytest.raises(ValueError):
        predict_with_uncertainty(di_model, X, 1)


def test_conservative_value_is_monotone_in_n_sigma(di_model, rng):
    X = rng.uniform(-2, 4, (300, 2))
    values = [LearnedBarrier(di_model, n, 20, plant=DI).value(X) for n in (0.0, 0.5, 1.0, 3.0)]
    for lo, hi in zip(values[1:], values[:-1]):
        assert np.all(lo <= hi)
    mean, sigma = LearnedBarrier(di_model, 3.0, 20, plant=DI).mean_sigma(X)
    np.testing.assert_allclose(values[-1], mean - 3.0 * sigma, rtol=0, atol=1e-12)


def test_checkpoint_round_trip(tmp_path, rng):
    X = fw_states(rng, 64)
    model = fit_regressor(X, X[:, 0] / 10, small_cfg(epochs=3), encoder_for(FW_BOX, FW), target_scale=50.0)
    path = tmp_path / "m.json"
    model.save(path)
    back = MLPRegressor.load(path)
    assert back.layer_sizes == model.layer_sizes == [17, 16, 16, 1]
    assert back.encoder == model.encoder and back.seed == model.seed and back.dropout == model.dropout
    for a, b in zip(back.weights + back.biases, model.weights + model.biases):
        assert np.array_equal(a, b)
    assert np.array_equal(back.predict_with_uncertainty(X, 8)[1], model.predict_with_uncertainty(X, 8)[1])
    back.save(tmp_path / "again.json")
    assert (tmp_path / "again.json").read_bytes() == path.read_bytes()


def test_checkpoint_rejects_unknown_format(tmp_path):
    (tmp_path / "bad.json").write_text('{"format": "other"}')
    with pytest.raises(ValueError):
        MLPRegressor.load(tmp_path / "bad.json")


def test_learned_barrier_dimension_checks(di_model):
    with pytest.raises(ValueError):
        LearnedBarrier(di_model, plant=FW)
    with pytest.raises(ValueError):
        LearnedBarrier(di_model)
    with pytest.raises(ValueError):
        learned_barrier(di_model, di_model, action_set=DI_ACTIONS)


# -- datasets --------------------------------------------------------------


def test_dataset_counts_and_determinism(tmp_path):
    nominal = ConstantNominal(1.0)
    a = generate_dataset(DI, position_safety, nominal, DI_BOX, 100, 50, seed=4)
    b = generate_dataset(DI, position_safety, nominal, DI_BOX, 100, 50, seed=4)
    assert len(a) == 100
    a.to_csv(tmp_path / "a.csv")
    b.to_csv(tmp_path / "b.csv")
    assert (tmp_path / "a.csv").read_bytes() == (tmp_path / "b.csv").read_bytes()
    back = Dataset.from_csv(tmp_path / "a.csv")
    assert np.array_equal(back.x0, a.x0) and np.array_equal(back.rho_min, a.rho_min)
    assert np.all(back.u_idx == -1) and np.all(np.isnan(back.rho_min_tail))
    with pytest.raises(ValueError):
        generate_dataset(DI, position_safety, nominal, DI_BOX, 0, 50)


def test_dataset_targets_match_scalar_rollouts():
    data = generate_dataset(DI, position_safety, ConstantManeuver([1.0]), DI_BOX, 20, 80, seed=1)
    for (p, v), r in zip(data.x0, data.rho_min):
        assert r == pytest.approx(di_rollout_min(p, v, lambda *_: 1.0, T=80), abs=1e-12)


def test_delta_records_post_first_step_minimum(tmp_path):
    T = 60
    data = generate_dataset(DI, position_safety, ConstantManeuver([1.0]), DI_BOX, 30, T, record_delta=True,
                            action_set=DI_ACTIONS, seed=2)
    assert np.all(data.has_delta)
    for (p, v), i, tail, u0 in zip(data.x0, data.u_idx, data.rho_min_tail, data.u0):
        u = DI_ACTIONS.actions[i, 0]
        assert u0[0] == u
        p1, v1 = p + 0.1 * v, v + 0.1 * u
        assert tail == pytest.approx(di_rollout_min(p1, v1, lambda *_: 1.0, T=T - 1), abs=1e-12)
    assert len(data.delta_samples()) == 30
    data.to_csv(tmp_path / "d.csv")
    back = Dataset.from_csv(tmp_path / "d.csv")
    assert np.array_equal(back.u_idx, data.u_idx) and np.array_equal(back.rho_min_tail, data.rho_min_tail)


def test_head_on_straight_dataset_gives_minus_ds():
    X0 = np.array([[0.0, 0.0, 0.0, 0.0, 600.0, 0.0, math.pi, 0.0]] * 2)
    data = generate_dataset(FW, SafetyFunction(25.0, 50.0), gamma_straight(), FW_BOX, 2, 500, X0=X0)
    np.testing.assert_allclose(data.rho_min, -25.0, rtol=0, atol=1e-9)


# -- expansion ---------------------------------------------------------------


def test_expansion_generates_the_expanded_target():
    h = RolloutBarrier(DI, ConstantManeuver([1.0]), position_safety, 200)
    X0 = np.array([[0.5, -1.0]] * 2)
    _, data, y = expand_safe_set(h, position_safety, 2, ConstantNominal(2.0), 200, DI, DI_BOX, small_cfg(epochs=2),
                                 clip=None, X0=X0, return_dataset=True)
    assert h.value(X0[0]) == pytest.approx(-0.05, abs=1e-9)
    np.testing.assert_allclose(y, 0.2, atol=1e-9)


def test_expansion_rejects_empty_dataset():
    h = RolloutBarrier(DI, ConstantManeuver([1.0]), position_safety, 50)
    for fn in (expand_safe_set, expand_safe_set_with_max):
        with pytest.raises(ValueError):
            fn(h, position_safety, 0, ConstantNominal(2.0), 50, DI, DI_BOX, small_cfg())


@pytest.mark.parametrize("h_value, start, expected", [(10.0, -5.0, 10.0), (-25.0, 30.0, 30.0)])
def test_max_target(h_value, start, expected):
    h = ExactBarrier(lambda X: np.full(X.shape[:-1], h_value), DI)
    nominal = ConstantNominal(0.0, ActionSet.from_values([0.0]))
    X0 = np.array([[start, 0.0]] * 2)
    _, _, y = expand_safe_set_with_max(h, position_safety, 2, nominal, 20, DI, DI_BOX, small_cfg(epochs=1),
                                       clip=None, X0=X0, return_dataset=True)
    assert np.all(y == expected)


def test_max_targets_dominate_plain_targets():
    h = RolloutBarrier(DI, ConstantManeuver([0.5]), position_safety, 100)
    args = (h, position_safety, 300, ConstantNominal(0.0), 100, DI, DI_BOX, small_cfg(epochs=1))
    _, d1, y1 = expand_safe_set(*args, clip=None, seed=8, return_dataset=True)
    _, d3, y3 = expand_safe_set_with_max(*args, clip=None, seed=8, return_dataset=True)
    assert np.array_equal(d1.x0, d3.x0)
    assert np.all(y3 >= y1)
    assert np.any(y3 > y1)


def test_exact_barrier_expansion_keeps_feasible_targets_nonnegative():
    h = RolloutBarrier(DI, ConstantManeuver([1.0]), position_safety, 200)
    X0 = DI_BOX.sample(range(400), seed=3)
    X0 = X0[h.value(X0) >= 0][:100]
    _, _, y = expand_safe_set(h, position_safety, len(X0), ConstantNominal(0.0), 200, DI, DI_BOX,
                              small_cfg(epochs=1), clip=None, X0=X0, return_dataset=True)
    assert np.all(y >= 0)


def _di_h0(seed=0):
    X = DI_BOX.sample(range(300), seed=seed)
    y = np.array([di_rollout_min(p, v, lambda *_: 1.0, T=100) for p, v in X])
    cfg = small_cfg(epochs=40, dropout=0.2)
    return LearnedBarrier(fit_regressor(X, y, cfg, di_encoder()), cfg.n_sigma, cfg.mc_samples, plant=DI)


def test_iterate_single_expansion_and_metrics():
    h0 = _di_h0()
    cfg = small_cfg(epochs=10, dropout=0.2)
    its = iterate_expansion(h0, 1, position_safety, 120, ConstantNominal(2.0), 60, DI, DI_BOX, cfg, clip=None,
                            seed=3, grid_metric=lambda b: int(np.sum(b.value(DI_BOX.sample(range(50))) < 0)))
    assert len(its) == 1 and its[0].index == 1
    m = its[0].metrics
    assert set(m) >= {"iteration", "val_mse", "train_mse", "overpred_pct", "mean_target", "unsafe_cells"}
    assert 0 <= m["overpred_pct"] <= 100
    va = its[0].model.history["val_index"]
    assert m["overpred_pct"] == pytest.approx(
        100 * overprediction_rate(its[0].barrier, its[0].dataset.x0[va], its[0].targets[va]))
    # the first iterate warm-starts from h0 and trains with its own derived seed
    assert its[0].model.seed == derive_seed(3, 1, 1)
    with pytest.raises(ValueError):
        iterate_expansion(h0, 0, position_safety, 10, ConstantNominal(2.0), 10, DI, DI_BOX, cfg)


def test_resumed_iteration_reproduces_the_full_run(tmp_path):
    h0 = _di_h0()
    cfg = small_cfg(epochs=8, dropout=0.2)
    kw = dict(clip=None, seed=11)
    args = (position_safety, 80, ConstantNominal(2.0), 50, DI, DI_BOX, cfg)
    full = iterate_expansion(h0, 2, *args, **kw)
    first = iterate_expansion(h0, 1, *args, **kw)
    first[0].model.save(tmp_path / "iter_001.json")
    model1 = MLPRegressor.load(tmp_path / "iter_001.json")
    h1 = LearnedBarrier(model1, cfg.n_sigma, cfg.mc_samples, plant=DI)
    resumed = iterate_expansion(h1, 1, *args, init=model1, start=2, **kw)
    assert resumed[0].index == 2
    assert np.array_equal(resumed[0].targets, full[1].targets)
    for a, b in zip(resumed[0].model.weights, full[1].model.weights):
        assert np.array_equal(a, b)


def test_hybrid_and_model_free_admissibility_agree():
    T = 100
    data = generate_dataset(DI, position_safety, ConstantManeuver([1.0]), DI_BOX, 3000, T, record_delta=True,
                            action_set=DI_ACTIONS, seed=6)
    cfg = small_cfg(hidden=(32, 32), epochs=150, dropout=0.0)
    model_h = fit_regressor(data.x0, data.rho_min, cfg, di_encoder())
    model_g = fit_regressor(data.x0, data.rho_min_tail, cfg, di_encoder(len(DI_ACTIONS)), action_index=data.u_idx)
    hybrid = learned_barrier(model_h, DI)
    free = learned_barrier(model_h, model_g, action_set=DI_ACTIONS)
    assert hybrid.mode == "hybrid" and free.mode == "model-free"
    rng = np.random.default_rng(21)
    X = DI_BOX.sample(range(200), seed=22)
    U = DI_ACTIONS.actions[rng.integers(len(DI_ACTIONS), size=len(X))]
    for lam in (0.5, 1.0):
        a = admissible(hybrid, X, U, lam)
        b = admissible(free, X, U, lam)
        # model-free check is g(x, u) >= (1 - lam) * value(x)
        np.testing.assert_array_equal(b, free.next_value(X, U) - (1 - lam) * free.value(X) >= 0)
        agree = float(np.mean(a == b))
        for i in np.flatnonzero(a != b):
            log.info("admissibility mismatch at x=%s u=%s (lam=%s)", X[i], U[i], lam)
        print(f"hybrid/model-free agreement at lam={lam}: {100 * agree:.1f}%")
        assert agree >= 0.9
