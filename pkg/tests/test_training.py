import numpy as np
import pytest

from fast_stg import tensor as tn
from fast_stg.data import ConfigError, SeriesDataset, synth_generate
from fast_stg.model import FaST, ModelConfig
from fast_stg.tensor import Tensor
from fast_stg.training import (
    Adam,
    TrainConfig,
    clip_grad_norm,
    evaluate,
    huber,
    huber_loss,
    load_trained,
    lr_schedule,
    persistence_forecast,
    train,
)

SMALL = dict(N=6, T=8, P=4, d=8, e=2, a=3, L=1, steps_per_day=24)


@pytest.fixture(scope="module")
def small_ds():
    return synth_generate(6, 6, granularity=60, seed=1)


# ---------------------------------------------------------------- objective


@pytest.mark.parametrize("y, yhat, expected", [(1.7, 1.7, 0.0), (0.0, 0.5, 0.125), (0.0, -3.0, 2.5), (2.0, 5.0, 2.5)])
def test_huber_points(y, yhat, expected):
    assert huber_loss(np.array([[y]]), np.array([[yhat]]), 1.0).item() == pytest.approx(expected, abs=1e-15)


def test_huber_delta_scaling():
    assert huber(np.array([0.0]), np.array([3.0]), delta=2.0).data.item() == pytest.approx(4.0)


def test_huber_reduction_sum_then_batch_mean():
    Y = np.zeros((2, 3, 4))
    Yh = np.zeros((2, 3, 4))
    Yh[0, 0, 0] = 0.5  # 0.125
    Yh[1, 2, 3] = 3.0  # 2.5
    assert huber_loss(Y, Yh).item() == pytest.approx((0.125 + 2.5) / 2)


def test_huber_shape_mismatch():
    with pytest.raises(tn.ShapeError):
        huber_loss(np.zeros((2, 3)), np.zeros((3, 2)))


def test_huber_gradient():
    Yh = Tensor(np.array([[0.3, -2.0, 4.0]]), requires_grad=True)
    huber_loss(np.zeros((1, 3)), Yh).backward()
    assert Yh.grad.tolist() == [[0.3, -1.0, 1.0]]


# ---------------------------------------------------------------- schedule


@pytest.mark.parametrize("epoch, lr", [(0, 0.002), (9, 0.002), (10, 0.001), (25, 0.0005)])
def test_lr_schedule_points(epoch, lr):
    assert lr_schedule(epoch) == pytest.approx(lr, abs=1e-15)


def test_lr_schedule_monotone_piecewise():
    lrs = [lr_schedule(e) for e in range(60)]
    assert all(a >= b for a, b in zip(lrs, lrs[1:]))
    breaks = [e for e in range(1, 60) if lrs[e] != lrs[e - 1]]
    assert breaks == [10, 20, 30, 40, 50]


def test_lr_schedule_negative_epoch():
    with pytest.raises(ValueError):
        lr_schedule(-1)


# ---------------------------------------------------------------- Adam


def test_adam_zero_gradient():
    w = Tensor(np.array([1.0, -2.0]), requires_grad=True)
    opt = Adam({"w": w})
    w.grad = np.array([1.0, 1.0])
    opt.step(0.1)
    m_before = opt.m["w"].copy()
    before = w.data.copy()
    w.grad = np.zeros(2)
    opt.step(0.1)
    # the bias-corrected moment is still nonzero, so only a fresh optimizer is frozen
    assert np.allclose(opt.m["w"], 0.9 * m_before)
    fresh = Tensor(before.copy(), requires_grad=True)
    opt2 = Adam({"w": fresh})
    fresh.grad = np.zeros(2)
    opt2.step(0.1)
    assert np.array_equal(fresh.data, before)


def test_adam_first_step():
    w = Tensor(np.array([0.5]), requires_grad=True)
    w.grad = np.array([1.0])
    Adam({"w": w}).step(0.01)
    assert w.data.item() == pytest.approx(0.5 - 0.01 / (1 + 1e-8), abs=1e-15)


def test_adam_quadratic_bowl():
    w = Tensor(np.array([1.0]), requires_grad=True)
    opt = Adam({"w": w})
    losses = []
    for _ in range(100):
        w.grad = None
        loss = tn.sum(w * w)
        losses.append(loss.item())
        loss.backward()
        opt.step(0.01)
    assert all(b < a for a, b in zip(losses, losses[1:]))


def test_adam_non_finite_names_parameter():
    w = Tensor(np.array([1.0]), requires_grad=True, name="head.w2")
    w.grad = np.array([np.inf])
    with pytest.raises(FloatingPointError, match="head.w2"):
        Adam({"head.w2": w}).step(0.1)


def test_clip_grad_norm():
    a = Tensor(np.zeros(2), requires_grad=True)
    a.grad = np.array([3.0, 4.0])
    assert clip_grad_norm({"a": a}, 1.0) == pytest.approx(5.0)
    assert np.linalg.norm(a.grad) == pytest.approx(1.0)


def test_small_step_does_not_increase_batch_loss():
    cfg = ModelConfig(**SMALL)
    model = FaST(cfg, seed=0)
    opt = Adam(model.params)
    rng = np.random.default_rng(0)
    violations = 0
    for _ in range(20):
        X = rng.standard_normal((4, cfg.N, cfg.T))
        Y = rng.standard_normal((4, cfg.N, cfg.P))
        tod, dow = rng.integers(0, 24, 4), rng.integers(0, 7, 4)
        model.zero_grad()
        loss = huber_loss(Y, model(X, tod, dow)[0])
        loss.backward()
        opt.step(1e-5)
        with tn.no_grad():
            after = huber_loss(Y, model(X, tod, dow)[0]).item()
        violations += after > loss.item()
    assert violations <= 1


# ---------------------------------------------------------------- train loop


def quick_cfg(**kw):
    return TrainConfig(**{"max_epochs": 3, "batch_size": 16, **kw})


def test_train_history_and_best(small_ds):
    res = train(ModelConfig(**SMALL), quick_cfg(), small_ds)
    assert [r[0] for r in res.history] == [1, 2, 3]
    assert [r[3] for r in res.history] == [0.002] * 3
    vals = [r[2] for r in res.history]
    assert res.best_val_mae == min(vals)
    assert res.best_epoch == vals.index(min(vals)) + 1


def test_early_stop_patience_two(small_ds):
    seen = []

    def validate(model, epoch):
        seen.append(epoch)
        return [5.0, 4.0, 4.5, 4.5, 4.5, 4.5, 4.5][epoch]

    res = train(ModelConfig(**SMALL), quick_cfg(max_epochs=7, patience=2), small_ds, validate=validate)
    assert seen == [0, 1, 2, 3, 4]
    assert res.best_epoch == 2


def test_best_state_restored(small_ds):
    states = []

    def validate(model, epoch):
        states.append(model.state_dict())
        return [3.0, 1.0, 2.0][epoch]

    res = train(ModelConfig(**SMALL), quick_cfg(), small_ds, validate=validate)
    final = res.model.state_dict()
    assert all(np.array_equal(final[k], states[1][k]) for k in final)


def test_train_seed_deterministic(small_ds):
    a = train(ModelConfig(**SMALL), quick_cfg(max_epochs=2), small_ds)
    b = train(ModelConfig(**SMALL), quick_cfg(max_epochs=2), small_ds)
    assert [r[:4] for r in a.history] == [r[:4] for r in b.history]
    sa, sb = a.model.state_dict(), b.model.state_dict()
    assert all(np.array_equal(sa[k], sb[k]) for k in sa)


def test_train_rejects_mismatched_dataset(small_ds):
    with pytest.raises(ConfigError, match="N=7"):
        train(ModelConfig(**{**SMALL, "N": 7}), quick_cfg(), small_ds)
    with pytest.raises(ConfigError, match="steps_per_day"):
        train(ModelConfig(**{**SMALL, "steps_per_day": 96}), quick_cfg(), small_ds)


def test_raw_loss_scale_runs(small_ds):
    res = train(ModelConfig(**SMALL), quick_cfg(max_epochs=1, loss_scale="raw"), small_ds)
    assert np.isfinite(res.history[0][1])


def test_checkpoint_evaluate_bit_exact(tmp_path, small_ds):
    res = train(ModelConfig(**SMALL), quick_cfg(max_epochs=2), small_ds)
    before = evaluate(res.model, res.normalizer, small_ds, "test", res.train_cfg)
    ckpt, hist = res.save(tmp_path)
    model, norm, tcfg = load_trained(ckpt)
    assert tcfg == res.train_cfg
    after = evaluate(model, norm, small_ds, "test", tcfg)
    assert list(before.rows()) == list(after.rows())
    assert hist.read_text().splitlines()[0] == "epoch,train_loss,val_mae,lr,seconds"


def test_evaluate_per_step_and_mismatch(small_ds):
    res = train(ModelConfig(**SMALL), quick_cfg(max_epochs=1), small_ds)
    rep = evaluate(res.model, res.normalizer, small_ds, "val", res.train_cfg)
    assert len(rep.per_step) == SMALL["P"]
    assert rep.mae <= rep.rmse
    other = SeriesDataset(np.ones((5, 144)), 60)
    with pytest.raises(ConfigError, match="N=6"):
        evaluate(res.model, res.normalizer, other)


def test_persistence_baseline():
    ds = SeriesDataset(np.arange(20.0).reshape(1, 20), 60)
    Y_hat, Y = persistence_forecast(ds, (0, 20), 3, 2)
    assert Y_hat.shape == Y.shape == (16, 1, 2)
    assert np.array_equal(Y - Y_hat, np.tile([1.0, 2.0], (16, 1, 1)))
