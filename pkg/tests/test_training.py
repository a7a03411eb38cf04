import numpy as np
import pytest
from pytest_cases import fixture, parametrize

from emattn import ConfigError, ShapeError
from emattn.attention import EmaVariant, param_count_module
from emattn.data import synth_quadrant
from emattn.tape import Tape
from emattn.tensor import Tensor, full, randn
from emattn.training import TrainConfig, build_toy_net, sgd_step, topk_accuracy, train_toy

TOY_BASE_PARAMS = 16 * 27 + 16 + 16 * 16 * 9 + 16 + 4 * 16 + 4


@fixture(scope="module")
def small_task():
    return synth_quadrant(48, seed=10), synth_quadrant(16, seed=11)


# ------------- model


@parametrize(attention_hyper=[("none", None), ("ema", 8), ("ca", 4), ("se", 4)])
def test_toy_param_counts(attention_hyper):
    attention, hyper = attention_hyper
    model = build_toy_net(attention, seed=0)
    extra = 0 if attention == "none" else param_count_module(attention, 16, hyper)
    assert model.param_count() == TOY_BASE_PARAMS + extra
    assert model.hyper == hyper
    assert model.forward(randn((3, 3, 4, 4), seed=0)).shape == (3, 4)


def test_toy_net_with_ema_has_44_more_parameters():
    assert TOY_BASE_PARAMS == 2836
    assert build_toy_net("ema", 8).param_count() - build_toy_net("none").param_count() == 44


def test_toy_net_with_variants():
    model = build_toy_net("ema", variant=EmaVariant.ablation("EMA_no"), width=32)
    assert model.hyper == 32 and not model.variant.cross_spatial
    assert list(model.params)[2].startswith("attention.")
    assert model.forward(randn((2, 3, 4, 4), seed=0)).shape == (2, 4)

    gn = build_toy_net("ema", variant=EmaVariant("full", 8, group_norm=True))
    assert gn.param_count() == TOY_BASE_PARAMS + param_count_module("ema", 16, 8, group_norm=True)


def test_toy_net_is_determined_by_its_seed():
    a, b, c = build_toy_net("ca", seed=1), build_toy_net("ca", seed=1), build_toy_net("ca", seed=2)
    assert all(np.array_equal(a.params[k].data, b.params[k].data) for k in a.params)
    assert not np.array_equal(a.params["conv2.weight"].data, c.params["conv2.weight"].data)


@parametrize(kwargs=[dict(attention="cbam"), dict(attention="ca", variant=EmaVariant("full", 8)),
                     dict(attention="ema", hyper=4, variant=EmaVariant("full", 8)), dict(attention="ema", hyper=32),
                     dict(attention="ca", hyper=3)])
def test_toy_net_errors(kwargs):
    with pytest.raises(ConfigError):
        build_toy_net(**kwargs)


# ------------- optimizer


def _params(*values):
    return {"w%s" % i: full((2,), v) for i, v in enumerate(values)}


def test_sgd_with_zero_learning_rate_is_the_identity():
    params = {"w": randn((3, 2), seed=0), "b": randn((2,), seed=1)}
    grads = {"w": randn((3, 2), seed=2), "b": randn((2,), seed=3)}
    new, velocity = sgd_step(params, grads, None, TrainConfig(lr=0.))
    for k in params:
        assert np.array_equal(new[k].data, params[k].data)
    new, _ = sgd_step(new, grads, velocity, TrainConfig(lr=0.))
    assert all(np.array_equal(new[k].data, params[k].data) for k in params)


def test_sgd_without_momentum_and_decay_is_plain_descent():
    params = {"w": randn((3, 2), seed=0)}
    grads = {"w": randn((3, 2), seed=1)}
    velocity = {"w": randn((3, 2), seed=2)}
    cfg = TrainConfig(lr=0.1, momentum=0., weight_decay=0.)
    new, _ = sgd_step(params, grads, velocity, cfg)
    assert np.array_equal(new["w"].data, params["w"].data - 0.1 * grads["w"].data)


def test_sgd_two_steps_on_a_scalar():
    cfg = TrainConfig(lr=0.1, momentum=0.9, weight_decay=0.01)
    theta, grad = {"w": full((), 1.)}, {"w": full((), 0.5)}
    theta, v = sgd_step(theta, grad, None, cfg)
    assert abs(v["w"].item() - 0.51) <= 1e-12
    assert abs(theta["w"].item() - 0.949) <= 1e-12
    theta, v = sgd_step(theta, grad, v, cfg)
    assert abs(v["w"].item() - (0.9 * 0.51 + 0.5 + 0.01 * 0.949)) <= 1e-12
    assert abs(theta["w"].item() - 0.852151) <= 1e-12


def test_sgd_errors():
    with pytest.raises(ShapeError):
        sgd_step(_params(1.), {"other": full((2,), 0.)}, None, TrainConfig())
    with pytest.raises(ShapeError):
        sgd_step(_params(1.), {"w0": full((3,), 0.)}, None, TrainConfig())
    with pytest.raises(ShapeError):
        sgd_step(_params(1.), _params(0.), {"w0": full((1,), 0.)}, TrainConfig())


def test_small_step_does_not_increase_the_loss():
    model = build_toy_net("ema", seed=0)
    ds = synth_quadrant(8, seed=0)
    cfg = TrainConfig(lr=1e-6, momentum=0., weight_decay=0.)
    checked = 0
    for i in range(len(ds)):
        x, y = ds.batch([i])
        with Tape() as tape:
            watched = {k: tape.watch(v) for k, v in model.params.items()}
            loss = model.loss(x, y, watched)
        grads = tape.backward(loss)
        grads = {k: grads[w] for k, w in watched.items()}
        if np.sqrt(sum(float(np.sum(g.data ** 2)) for g in grads.values())) <= 1e-3:
            continue
        new, _ = sgd_step(model.params, grads, None, cfg)
        assert model.loss(x, y, new).item() <= loss.item()
        checked += 1
    assert checked > 0


@parametrize(kwargs=[dict(lr=-1.), dict(momentum=1.), dict(weight_decay=-1e-3), dict(batch_size=0),
                     dict(steps=-1), dict(steps=2.5)])
def test_train_config_errors(kwargs):
    with pytest.raises(ConfigError):
        TrainConfig(**kwargs)


def test_topk_accuracy():
    logits = np.array([[0.1, 0.9, 0.], [0.8, 0.1, 0.1]])
    assert topk_accuracy(logits, np.array([1, 1])) == 0.5
    assert topk_accuracy(logits, np.array([1, 1]), k=2) == 1.
    assert topk_accuracy(np.zeros((0, 3)), np.array([], dtype=np.int64)) == 0.


# ------------- training


def test_zero_steps(small_task):
    train, val = small_task
    report = train_toy(build_toy_net("ema"), train, val, TrainConfig(steps=0))
    d = report.to_dict()
    assert d["steps"] == 0 and d["losses"] == [] and d["epochs"] == []
    assert report.initial_loss is None
    assert d["final_val_accuracy"] == d["initial_val_accuracy"]
    assert "top5" not in d


def test_epochs_and_partial_epochs(small_task):
    train, val = small_task
    report = train_toy(build_toy_net("se"), train, val, TrainConfig(steps=7, batch_size=16))
    assert len(report.losses) == 7
    assert [e["steps"] for e in report.epochs] == [3, 3, 1]
    assert all(0. <= e["val_accuracy"] <= 1. for e in report.epochs)


def test_training_is_reproducible(small_task):
    train, val = small_task
    cfg = TrainConfig(steps=6, batch_size=16, seed=3)
    a = train_toy(build_toy_net("ema", seed=1), train, val, cfg)
    b = train_toy(build_toy_net("ema", seed=1), train, val, cfg)
    assert a.losses == b.losses
    assert a.to_dict() == b.to_dict()

    c = train_toy(build_toy_net("ema", seed=1), train, val, TrainConfig(steps=6, batch_size=16, seed=4))
    assert c.losses != a.losses


def test_training_updates_the_model(small_task):
    train, val = small_task
    model = build_toy_net("ca")
    before = dict(model.params)
    report = train_toy(model, train, val, TrainConfig(steps=3, batch_size=16))
    assert not np.array_equal(model.params["fc.weight"].data, before["fc.weight"].data)
    assert report.param_count == model.param_count()
    assert isinstance(model.params["fc.weight"], Tensor)


def test_class_count_mismatch(small_task):
    train, val = small_task
    with pytest.raises(ConfigError):
        train_toy(build_toy_net("none", num_classes=10), train, val, TrainConfig(steps=1))


@pytest.mark.slow
def test_ema_toy_net_learns_the_quadrant_task():
    train, val = synth_quadrant(2000, seed=0), synth_quadrant(500, seed=1)
    cfg = TrainConfig(steps=500)

    report = train_toy(build_toy_net("ema", variant=EmaVariant.ablation("EMA_32"), width=32), train, val, cfg)
    assert report.final_val_accuracy >= 0.75
    assert report.final_epoch_loss <= report.initial_loss / 2

    for name in ("EMA_no", "EMA_16"):
        other = train_toy(build_toy_net("ema", variant=EmaVariant.ablation(name), width=32), train, val, cfg)
        assert len(other.losses) == 500
        assert all(np.isfinite(other.losses))
