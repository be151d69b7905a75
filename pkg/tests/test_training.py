import csv
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from hiest import autodiff as ad
from hiest.autodiff import Tensor
from hiest.checkpoint import load_checkpoint
from hiest.checks import toy_problem
from hiest.model import Hiest
from hiest.training import (
    Adam,
    NonFiniteGradientError,
    TrainConfig,
    TrainingError,
    clip_by_global_norm,
    compute_metrics,
    evaluate,
    metric_report,
    objective,
    persistence_forecast,
    train,
)

from conftest import logs_close, reports_close, small_config


# --- optimizer --------------------------------------------------------------
def test_zero_gradients_leave_parameters_unchanged():
    p = Tensor(np.array([1.5, -2.0]), requires_grad=True)
    opt = Adam({"p": p}, lr=0.1, weight_decay=0.0)
    for _ in range(3):
        p.grad = np.zeros(2)
        opt.step()
    np.testing.assert_array_equal(p.data, [1.5, -2.0])


def test_decoupled_weight_decay_shrinks_without_gradient():
    p = Tensor(np.array([1.0]), requires_grad=True)
    Adam({"p": p}, lr=0.1, weight_decay=0.5).step()
    assert p.data[0] == pytest.approx(1.0 - 0.1 * 0.5)


def test_quadratic_converges():
    x = Tensor(np.array([0.0]), requires_grad=True)
    opt = Adam({"x": x}, lr=1e-2, weight_decay=0.0)
    for _ in range(2000):
        d = ad.add_scalar(x, -3.0)
        ad.sum(ad.mul(d, d)).backward()
        opt.step()
    assert abs(x.data[0] - 3.0) < 1e-3


def test_clip_to_global_norm():
    grads = {"a": np.array([30.0, 0.0]), "b": np.array([0.0, 40.0])}
    clipped, norm = clip_by_global_norm(grads, 5.0)
    assert norm == 50.0
    total = math.sqrt(sum(float(np.sum(g * g)) for g in clipped.values()))
    assert total == pytest.approx(5.0, abs=1e-12)
    np.testing.assert_allclose(clipped["a"], [3.0, 0.0])


def test_step_clears_gradients():
    p = Tensor(np.ones(2), requires_grad=True)
    p.grad = np.ones(2)
    Adam({"p": p}).step()
    assert p.grad is None or not np.any(p.grad)


@pytest.mark.parametrize("bad", [np.nan, np.inf])
def test_non_finite_gradient_names_parameter(bad):
    ok = Tensor(np.ones(2), requires_grad=True)
    broken = Tensor(np.ones(2), requires_grad=True)
    ok.grad, broken.grad = np.ones(2), np.array([1.0, bad])
    with pytest.raises(NonFiniteGradientError, match="layer3.gcn"):
        Adam({"ok": ok, "layer3.gcn": broken}).step()


def test_optimizer_state_roundtrip():
    p = Tensor(np.ones(3), requires_grad=True)
    a = Adam({"p": p})
    p.grad = np.arange(3.0)
    a.step()
    b = Adam({"p": Tensor(np.ones(3), requires_grad=True)})
    b.load_state_dict(a.state_dict())
    assert b.t == 1 and np.array_equal(b.m["p"], a.m["p"]) and np.array_equal(b.v["p"], a.v["p"])


def test_theta_update_comes_from_auxiliary_terms_when_etas_zero():
    toy = toy_problem(0, eta1=0.0, eta2=0.0, eta3=0.0, eta4=0.0)
    theta = toy.model.params["mapping.theta"]
    parts = objective(toy.model, toy.batch)
    parts.total.backward()
    from_total = theta.grad.copy()
    ad.zero_grad(toy.model.parameters())
    parts = objective(toy.model, toy.batch)
    ad.add(parts.l_rec_gr, parts.l_ort).backward()
    np.testing.assert_allclose(from_total, theta.grad, rtol=1e-12, atol=1e-15)
    assert np.any(from_total)


# --- metrics ----------------------------------------------------------------
def test_perfect_predictions():
    y = np.random.default_rng(0).uniform(10, 20, size=(4, 12, 3, 1))
    r = metric_report(y, y, np.ones_like(y))
    assert all(v == 0.0 for row in r.rows() for k, v in row.items() if k != "horizon")


def test_ten_percent_over_prediction():
    y = np.full((2, 12, 3, 1), 100.0)
    m = compute_metrics(y * 1.1, y)
    assert m.mape == pytest.approx(10.0) and m.mae == pytest.approx(10.0) and m.rmse == pytest.approx(10.0)


def test_all_masked_is_not_applicable():
    y = np.ones((1, 12, 2, 1))
    m = compute_metrics(y, y, np.zeros_like(y))
    assert m.mae is None and m.mape is None and m.rmse is None
    assert "n/a" in metric_report(y, y, np.zeros_like(y)).table()


def test_mape_skips_zero_targets():
    m = compute_metrics(np.array([1.0, 110.0]), np.array([0.0, 100.0]))
    assert m.mape == pytest.approx(10.0) and m.mae == pytest.approx(5.5)


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_rmse_at_least_mae(seed):
    rng = np.random.default_rng(seed)
    pred, y = rng.normal(size=(3, 12, 4, 1)), rng.normal(size=(3, 12, 4, 1))
    mask = (rng.random(y.shape) < 0.8).astype(float)
    for row in metric_report(pred, y, mask).rows():
        if row["mae"] is not None:
            assert row["rmse"] >= row["mae"] - 1e-15 and row["mae"] >= 0


def test_report_horizons_and_csv(tmp_path):
    rng = np.random.default_rng(1)
    r = metric_report(rng.normal(size=(2, 12, 3, 1)), rng.normal(size=(2, 12, 3, 1)), None)
    assert list(r.horizons) == [3, 6, 12]
    r.write_csv(tmp_path / "m.csv")
    rows = list(csv.DictReader(open(tmp_path / "m.csv")))
    assert [row["horizon"] for row in rows] == ["3", "6", "12", "all"]


def test_persistence_repeats_last_input(tiny_problem):
    te = tiny_problem.test
    pred = persistence_forecast(te)
    assert pred.shape == (len(te), te.horizon, te.targets.shape[1], 1)
    np.testing.assert_array_equal(pred[3, 5], te.targets[3 + te.history - 1])


# --- training loop ----------------------------------------------------------
def _run(problem, seed=0, out=None, **kw):
    model = Hiest(small_config(), problem.hierarchy, seed=seed)
    cfg = TrainConfig(**{**dict(max_epochs=2, patience=5, seed=seed, batch_size=32), **kw})
    return model, train(model, problem.train, problem.val, cfg, out_dir=out)


def test_zero_learning_rate_keeps_validation_fixed(tiny_problem):
    _, res = _run(tiny_problem, lr=0.0, weight_decay=0.0, max_epochs=3)
    maes = [e["val_mae"] for e in res.epoch_log]
    assert maes[0] == maes[1] == maes[2]


def test_same_seed_same_logs(tiny_problem):
    m1, a = _run(tiny_problem)
    m2, b = _run(tiny_problem)
    assert logs_close(a.step_log, b.step_log) and logs_close(a.epoch_log, b.epoch_log)
    assert reports_close(evaluate(m1, tiny_problem.test), evaluate(m2, tiny_problem.test))


def test_log_files(tiny_problem, tmp_path):
    _, res = _run(tiny_problem, out=tmp_path)
    steps = list(csv.DictReader(open(tmp_path / "train_log.csv")))
    assert list(steps[0]) == ["step", "l_pre", "l_rec_ro", "l_rec_gr", "l_ort", "total"]
    assert len(steps) == len(res.step_log)
    for row in steps:
        parts = sum(float(row[k]) for k in ("l_pre", "l_rec_ro", "l_rec_gr", "l_ort"))
        assert float(row["total"]) == pytest.approx(parts, abs=1e-9)
    epochs = list(csv.DictReader(open(tmp_path / "epochs.csv")))
    assert list(epochs[0]) == ["epoch", "val_mae", "val_mape", "val_rmse"] and len(epochs) == 2


def test_early_stopping_keeps_best_checkpoint(tiny_problem, tmp_path):
    model, res = _run(tiny_problem, out=tmp_path, max_epochs=12, patience=2, lr=0.05)
    maes = [e["val_mae"] for e in res.epoch_log]
    best = int(np.argmin(maes))
    assert res.state.best_epoch == best and res.state.best_val_mae == min(maes)
    assert len(maes) <= 12 and (len(maes) == 12 or len(maes) - 1 - best == 2)
    _, arrays, extra, optim = load_checkpoint(tmp_path / "best.ckpt")
    assert extra["best_val_mae"] == min(maes) and not optim
    current = model.state_arrays()
    assert all(np.array_equal(arrays[k], current[k]) for k in current)
    assert evaluate(model, tiny_problem.val).overall.mae == pytest.approx(min(maes), abs=1e-12)


def test_resume_matches_uninterrupted_run(tiny_problem, tmp_path):
    straight, a = _run(tiny_problem, max_epochs=3)
    _run(tiny_problem, out=tmp_path, max_epochs=2)
    model = Hiest(small_config(), tiny_problem.hierarchy, seed=0)
    b = train(model, tiny_problem.train, tiny_problem.val,
              TrainConfig(max_epochs=3, patience=5, seed=0, batch_size=32), resume=tmp_path / "last.ckpt")
    assert b.epoch_log[-1]["val_mae"] == pytest.approx(a.epoch_log[-1]["val_mae"], abs=1e-12)
    assert logs_close(a.step_log[-len(b.step_log):], b.step_log)


def test_non_finite_loss_aborts(tiny_problem):
    model = Hiest(small_config(), tiny_problem.hierarchy)
    model.params["output.bias"].data[...] = np.nan
    with pytest.raises(TrainingError, match="step 0"):
        train(model, tiny_problem.train, tiny_problem.val, TrainConfig(max_epochs=1))


def test_training_loss_falls_over_first_epochs(smoke_run):
    first = smoke_run.result.train_loss_by_epoch[:5]
    assert all(b < a for a, b in zip(first, first[1:])), first
