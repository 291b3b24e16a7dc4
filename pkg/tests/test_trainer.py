import numpy as np
import pytest
from hypothesis import given, strategies as st

from clecnn import enseval, network, trainer
from clecnn.data import SynthConfig, generate_synthetic, load_images, make_folds
from clecnn.errors import ConfigError, DataError, DivergenceError
from clecnn.network import Checkpoint, RegimeSpec, build, get_spec
from clecnn.tensor import make_rng
from clecnn.trainer import OptimizerState, TrainConfig, best_epoch, sgd_step, should_stop


def scalar_param(w=1.0, b=0.0):
    return network.Dense(np.array([[w]]), np.array([b]), "p")


def step(p, g, state, cfg, lr, gb=0.0, mult=None):
    return sgd_step({"p": p}, {"p": (np.array([[g]]), np.array([gb]))}, state, cfg, lr, mult)


# ---------------------------------------------------------------- optimizer

def test_plain_descent():
    p = scalar_param()
    step(p, 2.0, OptimizerState(), TrainConfig(momentum=0.0, l2=0.0), 0.1)
    assert p.weights[0, 0] == pytest.approx(0.8, abs=1e-15)


def test_momentum_substitution():
    p = scalar_param()
    state = OptimizerState(velocity={"p": (np.array([[0.1]]), np.array([0.0]))})
    step(p, 2.0, state, TrainConfig(momentum=0.9, l2=0.0), 0.1)
    assert p.weights[0, 0] == pytest.approx(1 + 0.09 - 0.2, abs=1e-15)
    assert state.velocity["p"][0][0, 0] == pytest.approx(0.09 - 0.2, abs=1e-15)


@pytest.mark.parametrize("mu", [0.0, 0.5, 0.9, 0.99])
def test_momentum_closed_form(mu):
    alpha, g = 0.01, 1.7
    p = scalar_param(0.0)
    state = OptimizerState()
    cfg = TrainConfig(momentum=mu, l2=0.0)
    w = 0.0
    for i in range(1, 11):
        step(p, g, state, cfg, alpha)
        v = -alpha * g * (1 - mu ** i) / (1 - mu)
        w += v
        assert abs(state.velocity["p"][0][0, 0] - v) <= 1e-12
        assert abs(p.weights[0, 0] - w) <= 1e-12


def test_l2_decays_weights_but_not_biases():
    p = scalar_param(2.0, 3.0)
    step(p, 0.0, OptimizerState(), TrainConfig(momentum=0.0, l2=0.5), 0.1)
    assert p.weights[0, 0] == pytest.approx(2.0 - 0.1 * 0.5 * 2.0)
    assert p.bias[0] == 3.0


def test_frozen_layer_is_bitwise_unchanged():
    p = scalar_param(0.123456789, 0.5)
    before = (p.weights.tobytes(), p.bias.tobytes())
    state = OptimizerState()
    for _ in range(5):
        step(p, 1e3, state, TrainConfig(), 0.1, gb=7.0, mult={"p": 0.0})
    assert (p.weights.tobytes(), p.bias.tobytes()) == before
    assert "p" not in state.velocity


def test_nonfinite_gradient_names_layer_and_iteration():
    p = scalar_param()
    state = OptimizerState(iteration=41)
    with pytest.raises(DivergenceError) as err:
        step(p, np.nan, state, TrainConfig(), 0.1)
    assert err.value.layer == "p" and err.value.iteration == 41
    assert p.weights[0, 0] == 1.0


def test_quadratic_descent_decreases():
    p = scalar_param(3.0)
    for _ in range(20):
        before = p.weights[0, 0] ** 2
        step(p, 2 * p.weights[0, 0], OptimizerState(), TrainConfig(momentum=0.0, l2=0.0), 1e-3)
        assert p.weights[0, 0] ** 2 < before


def test_lr_schedule_and_multiplier():
    cfg = TrainConfig(lr_gamma=0.1, lr_step=10)
    s = OptimizerState()
    assert s.lr(cfg, 0.01) == 0.01
    s.epoch = 10
    assert s.lr(cfg, 0.01) == pytest.approx(0.001)
    s.epoch = 25
    assert s.lr(cfg, 0.01, 0.5) == pytest.approx(0.00005)
    assert TrainConfig().lr_for("DT") == 0.01 and TrainConfig().lr_for("SFT") == 0.001
    assert TrainConfig(base_lr=0.3).lr_for("DFT") == 0.3


@pytest.mark.parametrize("kwargs", [dict(base_lr=0), dict(momentum=1.0), dict(l2=-1), dict(batch_size=0),
                                    dict(patience=0)])
def test_config_validation(kwargs):
    with pytest.raises(ConfigError):
        TrainConfig(**kwargs)


# ---------------------------------------------------------------- early stopping

def test_early_stop_example():
    losses = [1.0, 0.9, 0.95, 0.96, 0.97]
    assert not any(should_stop(losses[:i], 3) for i in range(1, 5))
    assert should_stop(losses, 3)
    assert best_epoch(losses) == 2


def test_monotone_decrease_never_stops():
    losses = list(np.linspace(1, 0.1, 30))
    assert not any(should_stop(losses[:i], 3) for i in range(1, 31))
    assert best_epoch(losses) == 30


@given(st.lists(st.floats(0, 10), min_size=1, max_size=40))
def test_stop_rule_properties(losses):
    stop_at = next((i for i in range(1, len(losses) + 1) if should_stop(losses[:i], 3)), None)
    if stop_at is not None:
        tail = losses[stop_at - 4:stop_at]
        assert all(b > a for a, b in zip(tail, tail[1:]))
    b = best_epoch(losses)
    assert losses[b - 1] == min(losses)
    assert not should_stop(losses, None)


# ---------------------------------------------------------------- training runs

@pytest.fixture(scope="module")
def memorize_set(tmp_path_factory):
    root = tmp_path_factory.mktemp("mem") / "d"
    imgs = load_images(generate_synthetic(SynthConfig(5, (8, 8), image_size=64, crop_size=64, seed=5), root))
    ps = imgs.patient_set
    return imgs.subset(ps[:4]), imgs.subset(ps[4:])


def test_overfit_sanity(memorize_set):
    train_set, val_set = memorize_set
    assert len(train_set) == 32
    cfg = TrainConfig(max_epochs=200, patience=None, batch_size=8, lr_step=1000)
    res = trainer.train(build(get_spec("net1-mini"), rng=make_rng(0)), train_set, val_set, cfg)
    assert len(res.history) == 200
    assert res.history[-1]["train_loss"] < 0.05


def short_cfg(**kw):
    return TrainConfig(**{"max_epochs": 4, "batch_size": 8, **kw})


def test_train_is_bit_deterministic(small_images, tmp_path):
    dev, _ = small_images
    ps = dev.patient_set
    runs = []
    for k in range(2):
        model = build(get_spec("net1-mini"), rng=make_rng(1))
        res = trainer.train(model, dev.subset(ps[4:]), dev.subset(ps[:4]), short_cfg(seed=3), tmp_path / f"h{k}.csv")
        runs.append(network.checkpoint_bytes(res.checkpoint(get_spec("net1-mini"))))
    assert runs[0] == runs[1]
    assert (tmp_path / "h0.csv").read_bytes() == (tmp_path / "h1.csv").read_bytes()
    header = (tmp_path / "h0.csv").read_text().splitlines()[0]
    assert header == "epoch,train_loss,val_loss,lr"


def test_best_epoch_is_restored(small_images):
    dev, _ = small_images
    ps = dev.patient_set
    model = build(get_spec("net1-mini"), rng=make_rng(2))
    res = trainer.train(model, dev.subset(ps[4:]), dev.subset(ps[:4]), short_cfg(max_epochs=6))
    vals = [h["val_loss"] for h in res.history]
    assert res.best_val_loss == min(vals) and res.best_epoch == best_epoch(vals)
    # the returned model carries the best epoch's weights
    assert trainer.evaluate_loss(model, dev.subset(ps[:4]), 64) == pytest.approx(min(vals), rel=1e-6)


def test_sft_freezes_everything_but_classifier(small_images):
    dev, _ = small_images
    ps = dev.patient_set
    spec = get_spec("net1-mini")
    donor = Checkpoint.from_model(build(spec, rng=make_rng(9)))
    model = build(spec, RegimeSpec("SFT", donor), make_rng(0))
    fc_before = model.params["fc3"].weights.copy()
    trainer.train(model, dev.subset(ps[4:]), dev.subset(ps[:4]), short_cfg(max_epochs=3))
    for name in ("conv1", "conv2"):
        assert model.params[name].weights.tobytes() == donor.records[name][0].tobytes()
        assert model.params[name].bias.tobytes() == donor.records[name][1].tobytes()
    assert not np.array_equal(model.params["fc3"].weights, fc_before)


def test_train_guards(small_images):
    dev, _ = small_images
    ps = dev.patient_set
    model = build(get_spec("net1-mini"), rng=make_rng(0))
    with pytest.raises(DataError, match="crosses"):
        trainer.train(model, dev.subset(ps[:5]), dev.subset(ps[4:6]), short_cfg())
    one_class = dev.subset(ps[4:])
    keep = one_class.labels == 1
    one_class = type(one_class)(one_class.images[keep], one_class.labels[keep],
                                [p for p, k in zip(one_class.patients, keep) if k],
                                [i for i, k in zip(one_class.ids, keep) if k])
    with pytest.raises(DataError, match="missing a class"):
        trainer.train(model, one_class, dev.subset(ps[:4]), short_cfg())


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_huge_learning_rate_diverges(small_images):
    dev, _ = small_images
    ps = dev.patient_set
    model = build(get_spec("net1-mini"), rng=make_rng(0))
    with pytest.raises(DivergenceError):
        trainer.train(model, dev.subset(ps[4:]), dev.subset(ps[:4]), short_cfg(base_lr=1e12, max_epochs=3))


def test_generator_quality_gate(small_images):
    """A mini-net trained on synthetic patients separates held-out patients."""
    dev, test = small_images
    ps = dev.patient_set
    cfg = TrainConfig(max_epochs=30, batch_size=8, lr_step=15)
    model = build(get_spec("net1-mini"), rng=make_rng(0))
    trainer.train(model, dev.subset(ps[4:]), dev.subset(ps[:4]), cfg)
    probs = trainer.predict(model, test, 64)
    assert enseval.roc_auc(probs[:, 1], test.labels).auc > 0.9


# ---------------------------------------------------------------- cross-validation and grid search

@pytest.fixture(scope="module")
def dev_manifest(small_dataset):
    return small_dataset[1]


def test_run_cv_returns_one_best_checkpoint_per_fold(small_images, dev_manifest):
    dev, _ = small_images
    plan = make_folds(dev_manifest, 5, seed=0)
    assert sorted(p for f in plan.folds for p in f) == sorted(dev.patient_set)
    results = trainer.run_cv(plan, get_spec("net1-mini"), RegimeSpec("DT"), short_cfg(max_epochs=3), dev)
    assert [r.fold for r in results] == list(range(5))
    for r in results:
        assert r.val_loss == min(h["val_loss"] for h in r.history)
        assert r.checkpoint.metadata["fold"] == r.fold and r.checkpoint.metadata["val_loss"] == r.val_loss
    with pytest.raises(ConfigError):
        trainer.run_cv(make_folds(dev_manifest, 2, 0).folds, get_spec("net1-mini"), RegimeSpec("DT"), short_cfg(), dev)


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_grid_search(small_images, dev_manifest, tmp_path):
    dev, _ = small_images
    plan = make_folds(dev_manifest, 3, seed=0)
    spec, regime, base = get_spec("net1-mini"), RegimeSpec("DT"), short_cfg(max_epochs=2)
    best, table = trainer.grid_search([{"base_lr": 0.01}], plan, spec, regime, dev, base)
    assert best == {"base_lr": 0.01}
    grid = [{"base_lr": 0.1}, {"base_lr": 1e-6}, {"base_lr": 1e-6}, {"base_lr": 1e12}]
    best, table = trainer.grid_search(grid, plan, spec, regime, dev, base, tmp_path / "grid.csv")
    assert table[1]["fold_losses"] == table[2]["fold_losses"]
    assert table[3]["status"] == "failed"
    rows = trainer.read_grid_table(tmp_path / "grid.csv")
    ok = [r for r in rows if r["status"] == "ok"]
    recomputed = min(ok, key=lambda r: (float(r["mean_val_loss"]), int(r["index"])))
    assert best == grid[int(recomputed["index"])]
    for r in ok:
        folds = [float(r[f"fold{i}_val_loss"]) for i in range(3)]
        assert float(r["mean_val_loss"]) == pytest.approx(np.mean(folds), rel=1e-12)
    with pytest.raises(ConfigError):
        trainer.grid_search([], plan, spec, regime, dev)
