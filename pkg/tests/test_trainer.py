import math

import numpy as np
import pytest
from conftest import central_difference, relative_error

from concutmix.dataset import build_longtailed, make_synthetic_source, split_per_class
from concutmix.semantic_space import PROTOTYPES, NonFiniteLossError, embed
from concutmix.trainer import (
    TrainConfig,
    Trainer,
    classify,
    soft_cross_entropy,
    train,
)


def separable(seed, num_classes=4, n_max=100, val=20, imbalance=10, sep=2.0):
    src = make_synthetic_source(num_classes, n_max + val, (8, 8, 3), sep, seed=seed)
    val_set, rest = split_per_class(src, val)
    return build_longtailed(rest, imbalance, seed), val_set


@pytest.fixture(scope="module")
def tiny():
    return separable(0, n_max=24, val=6, imbalance=4)


def test_soft_ce_confident_correct():
    loss, _ = soft_cross_entropy([50.0, 0.0, 0.0], [1.0, 0.0, 0.0])
    assert loss < 1e-20


def test_soft_ce_uniform():
    loss, grad = soft_cross_entropy(np.zeros(4), np.full(4, 0.25))
    assert loss == pytest.approx(math.log(4), abs=1e-15)
    np.testing.assert_allclose(grad, 0, atol=1e-15)


@pytest.mark.parametrize("seed", range(20))
def test_soft_ce_gradient(seed):
    rng = np.random.default_rng(seed)
    k = int(rng.integers(2, 8))
    logits = rng.normal(0, 3, size=k)
    target = rng.dirichlet(np.ones(k))
    _, grad = soft_cross_entropy(logits, target)
    num = central_difference(lambda: soft_cross_entropy(logits, target)[0], logits)
    assert relative_error(grad, num) < 1e-4


def test_soft_ce_batch_is_mean():
    rng = np.random.default_rng(1)
    logits = rng.normal(size=(3, 4))
    target = rng.dirichlet(np.ones(4), size=3)
    loss, grad = soft_cross_entropy(logits, target)
    rows = [soft_cross_entropy(logits[i], target[i]) for i in range(3)]
    assert loss == pytest.approx(np.mean([r[0] for r in rows]))
    np.testing.assert_allclose(grad, np.stack([r[1] for r in rows]) / 3)


def test_classify_uniform_logits(tiny):
    train_set, val_set = tiny
    trainer = Trainer(TrainConfig(epochs=0), train_set, val_set)
    model = trainer.model
    for k in list(model.params):
        if k.startswith("classifier"):
            model.params[k][:] = 0.0
    pred, conf, logits = classify(model, val_set.images[0])
    assert pred == 0
    assert conf == pytest.approx(1 / 4)
    assert classify(model, val_set.images[0])[0] == pred


def test_classify_probabilities_sum_to_one(tiny):
    train_set, val_set = tiny
    model = Trainer(TrainConfig(epochs=0), train_set, val_set).model
    _, conf, logits = classify(model, val_set.images[3])
    p = np.exp(logits - logits.max())
    assert abs((p / p.sum()).sum() - 1) < 1e-9
    assert conf == pytest.approx((p / p.sum()).max())


def test_zero_epochs(tiny):
    result = train(TrainConfig(epochs=0), *tiny)
    assert result.records == []
    fresh = Trainer(TrainConfig(epochs=0), *tiny).model
    for k, v in fresh.params.items():
        np.testing.assert_array_equal(result.model.params[k], v)


def test_config_validation():
    with pytest.raises(ValueError):
        TrainConfig(epochs=2, warmup_epochs=3)
    with pytest.raises(ValueError):
        TrainConfig(alpha=0, beta=0)
    with pytest.raises(ValueError):
        TrainConfig(fg_sampler="weird")
    assert TrainConfig(epochs=200).warmup_epochs == 100
    with pytest.raises(ValueError, match="unknown"):
        TrainConfig.from_dict({"epoch": 3})


def _params_equal(a, b):
    return all(np.array_equal(a.params[k], b.params[k]) for k in a.params)


def test_omega_zero_matches_cutmix_baseline(tiny):
    cfg = dict(epochs=4, warmup_epochs=1, batch_size=16, seed=3)
    a = train(TrainConfig(omega=0.0, **cfg), *tiny)
    b = train(TrainConfig(method="cutmix", **cfg), *tiny)
    assert _params_equal(a.model, b.model)
    assert a.records == b.records


def test_warmup_identity(tiny):
    cfg = dict(epochs=4, warmup_epochs=3, batch_size=16, seed=5)
    a = Trainer(TrainConfig(**cfg), *tiny)
    b = Trainer(TrainConfig(method="cutmix", **cfg), *tiny)
    for epoch in range(3):
        ra, rb = a.run_epoch(epoch), b.run_epoch(epoch)
        assert ra == rb
        assert _params_equal(a.model, b.model)
        assert ra.gamma_mean == 0.0
    assert a.run_epoch(3).gamma_mean > 0
    b.run_epoch(3)
    assert not _params_equal(a.model, b.model)


def test_gamma_audit(tiny):
    result = train(TrainConfig(epochs=4, warmup_epochs=2, batch_size=16, omega=0.5), *tiny)
    gammas = [r.gamma_mean for r in result.records]
    assert gammas[:2] == [0.0, 0.0]
    assert all(g > 0 for g in gammas[2:])


def test_determinism(tiny):
    cfg = TrainConfig(epochs=3, warmup_epochs=1, batch_size=16, seed=9)
    a, b = train(cfg, *tiny), train(cfg, *tiny)
    assert a.records == b.records
    assert _params_equal(a.model, b.model)


def _one_step_grads(tiny, **overrides):
    trainer = Trainer(TrainConfig(epochs=1, batch_size=8, momentum=0.0, weight_decay=0.0,
                                  **overrides), *tiny)
    before = {k: v.copy() for k, v in trainer.model.params.items()}
    trainer.step(0)
    return {k: trainer.model.params[k] - before[k] for k in before}


def test_beta_zero_freezes_classifier(tiny):
    delta = _one_step_grads(tiny, beta=0.0)
    assert not delta["classifier.weight"].any() and not delta["classifier.bias"].any()
    assert delta["projector.fc1.weight"].any()


def test_alpha_zero_freezes_prototypes(tiny):
    delta = _one_step_grads(tiny, alpha=0.0)
    assert not delta[PROTOTYPES].any()
    assert not delta["projector.fc2.weight"].any()
    assert delta["classifier.weight"].any()


def test_raw_feature_and_cosine_options_run(tiny):
    for extra in ({"raw_features": True}, {"metric": "cosine", "phi": "linear"}):
        result = train(TrainConfig(epochs=2, warmup_epochs=1, batch_size=16, **extra), *tiny)
        assert result.records[-1].gamma_mean > 0


def test_conv_backbone_trains(tiny):
    result = train(TrainConfig(epochs=2, batch_size=16, backbone="conv", hidden_dim=8), *tiny)
    assert np.isfinite(result.records[-1].train_loss_ce)


@pytest.mark.parametrize("seed", range(5))
def test_separable_four_classes_reach_90_percent(seed):
    train_set, val_set = separable(seed)
    result = train(TrainConfig(epochs=30, seed=seed), train_set, val_set)
    assert result.records[-1].val_top1 >= 0.9
    for r in result.records:
        assert 0 <= r.val_top1 <= 1
        assert all(a is None or 0 <= a <= 1 for a in (r.acc_many, r.acc_medium, r.acc_few))


def test_embeddings_unchanged_by_evaluation(tiny):
    trainer = Trainer(TrainConfig(epochs=1, batch_size=16), *tiny)
    trainer.run_epoch(0)
    before = embed(trainer.model, tiny[1].images).raw
    train(TrainConfig(epochs=0), *tiny)
    np.testing.assert_array_equal(before, embed(trainer.model, tiny[1].images).raw)


@pytest.mark.parametrize("schedule, half, end", [
    ("constant", 0.05, 0.05), ("linear", 0.025, 0.0), ("cosine", 0.025, 0.0),
])
def test_lr_schedules(tiny, schedule, half, end):
    trainer = Trainer(TrainConfig(epochs=2, lr_schedule=schedule), *tiny)
    trainer.step_count = trainer.total_steps // 2
    assert trainer.current_lr() == pytest.approx(half, abs=0.05 / trainer.total_steps)
    trainer.step_count = trainer.total_steps
    assert trainer.current_lr() == pytest.approx(end, abs=1e-15)


def test_non_finite_loss_aborts(tiny):
    trainer = Trainer(TrainConfig(epochs=1, batch_size=8), *tiny)
    trainer.model.params["projector.fc2.weight"][:] = np.nan
    with pytest.raises(NonFiniteLossError):
        trainer.step(0)
