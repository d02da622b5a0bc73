import numpy as np
import pytest

from sscnn.data import make_windows
from sscnn.model import ModelConfig, init_params
from sscnn.train import (Adam, TrainConfig, TrainingDiverged, clip_by_global_norm, evaluate, fit, mae, mse,
                         seasonal_naive, train, write_history)


def test_metric_examples():
    assert mse([1.0, 2.0], [1.0, 2.0]) == 0.0
    assert mse([0.0, 0.0], [1.0, 1.0]) == 1.0 and mae([0.0, 0.0], [1.0, 1.0]) == 1.0
    assert mse([0.0, 2.0], [1.0, 1.0]) == 1.0 and mae([0.0, 2.0], [1.0, 1.0]) == 1.0
    with pytest.raises(ValueError):
        mse(np.zeros(2), np.zeros(3))


def test_adam_zero_gradient_keeps_params():
    p = [np.array([1.0, -2.0])]
    Adam([(2,)]).step(p, [np.zeros(2)])
    assert p[0].tolist() == [1.0, -2.0]


def test_adam_first_step_is_lr():
    p = [np.array([0.0])]
    Adam([(1,)], lr=0.0005).step(p, [np.array([1.0])])
    # m_hat = 1, v_hat = 1 -> step = lr / (1 + eps)
    assert p[0][0] == pytest.approx(-0.0005 / (1 + 1e-8), rel=1e-12)


def test_adam_descends_quadratic():
    theta = [np.array([3.0])]
    opt = Adam([(1,)], lr=0.1)
    seen = [3.0]
    for _ in range(2):
        opt.step(theta, [2 * theta[0]])
        seen.append(float(theta[0][0]))
    assert seen[0] > seen[1] > seen[2] > 0


def test_clip_by_global_norm():
    g = [np.array([3.0]), np.array([4.0])]
    assert clip_by_global_norm(g, 1.0) == 5.0
    np.testing.assert_allclose([g[0][0], g[1][0]], [0.6, 0.8])


def test_train_config_validation():
    with pytest.raises(ValueError):
        TrainConfig(learning_rate=0.0)
    with pytest.raises(ValueError):
        TrainConfig(batch_size=0)


def test_seasonal_naive():
    window = np.arange(8.0)[None]
    assert seasonal_naive(window, 6, 4).tolist() == [[4, 5, 6, 7, 4, 5]]


CFG = ModelConfig(n_series=2, t_in=48, t_out=12, channels=4, layers=2, cycle=24, delta=4)


def test_constant_series_trains_to_zero():
    values = np.full((2, 400), 3.0)
    res = fit(values, CFG, TrainConfig(max_epochs=5, seed=1))
    assert res.history[-1]["train_mse"] < 1e-4


def test_constant_series_from_nonzero_head_bias():
    """Start away from the trivial solution so the optimiser has to find it."""
    from sscnn.data import fit_normalizer
    values = np.full((2, 1000), 3.0)
    norm = fit_normalizer(values)
    tr, va, _ = make_windows(norm.apply(values), CFG.t_in, CFG.t_out)
    params = init_params(CFG, seed=2)
    params.head_b.value[...] = 0.01
    res = train(tr, va, CFG, TrainConfig(max_epochs=5, learning_rate=0.005, seed=2), params)
    assert res.history[-1]["train_mse"] < 1e-4


def test_periodic_series_reaches_low_validation_mse():
    rng = np.random.default_rng(0)
    values = np.tile(rng.normal(size=(2, 24)), 50)
    cfg = ModelConfig(**{**CFG.to_dict(), "channels": 8})
    res = fit(values, cfg, TrainConfig(max_epochs=8, seed=0))
    assert min(r["val_mse"] for r in res.history) < 1e-3


def test_best_parameters_restored_and_history_written(tmp_path):
    values = np.random.default_rng(3).normal(size=(2, 1000))
    res = fit(values, CFG, TrainConfig(max_epochs=4, patience=1, seed=0))
    best = min(res.history, key=lambda r: r["val_mse"])
    assert best["epoch"] == res.best_epoch
    _, val, _ = make_windows(res.normalizer.apply(values), CFG.t_in, CFG.t_out)
    got = evaluate(val, CFG, res.params, res.normalizer)
    assert got["mse_normalized"] == pytest.approx(best["val_mse"], rel=1e-12)
    write_history(tmp_path / "h.csv", res.history)
    lines = (tmp_path / "h.csv").read_text().splitlines()
    assert lines[0] == "epoch,train_mse,val_mse,val_mae,seconds" and len(lines) == len(res.history) + 1


def test_evaluate_denormalises():
    values = np.random.default_rng(4).normal(5.0, 10.0, size=(2, 1000))
    res = fit(values, CFG, TrainConfig(max_epochs=1, seed=0))
    _, _, test = make_windows(res.normalizer.apply(values), CFG.t_in, CFG.t_out)
    m = evaluate(test, CFG, res.params, res.normalizer)
    ratio = m["mse"] / m["mse_normalized"]
    assert np.min(res.normalizer.std) ** 2 * 0.99 < ratio < np.max(res.normalizer.std) ** 2 * 1.01


def test_same_seed_same_history():
    values = np.random.default_rng(5).normal(size=(2, 1000))
    a = fit(values, CFG, TrainConfig(max_epochs=2, seed=9))
    b = fit(values, CFG, TrainConfig(max_epochs=2, seed=9))
    strip = lambda h: [{k: v for k, v in r.items() if k != "seconds"} for r in h]  # noqa: E731
    assert strip(a.history) == strip(b.history)
    assert all(np.array_equal(x.value, y.value) for x, y in zip(a.params.tensors(), b.params.tensors()))


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_non_finite_loss_aborts_with_last_good_params():
    values = np.random.default_rng(6).normal(size=(2, 1000))
    params = init_params(CFG)
    params.head_w.value[0, 0] = np.inf
    tr, va, _ = make_windows(values, CFG.t_in, CFG.t_out)
    with pytest.raises(TrainingDiverged) as info:
        train(tr, va, CFG, TrainConfig(max_epochs=2), params)
    assert info.value.history == [] and info.value.params is not None
