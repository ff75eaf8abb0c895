import numpy as np
import pytest

from trajsyn.adversarial import (AdvTrainConfig, AttackConfig, adv_train, evaluate, fat_local_train,
                                 pgd_attack, project)
from trajsyn.datasets import LabeledDataset, generate_blobs, partition_iid
from trajsyn.fed_sim import FLConfig, local_train, run_federated
from trajsyn.models import ModelSpec, ModelState, flatten, init_model, loss_and_grad

LINEAR = ModelSpec("mlp", [4, 2], (4,), 2)


def ce_binary(margin):
    return np.log1p(np.exp(-margin))


@pytest.fixture(scope="module")
def blobs_model():
    train = generate_blobs(3, 200, 32, seed=1000)
    test = generate_blobs(3, 300, 32, seed=1001)
    spec = ModelSpec("mlp", [32, 3], (32,), 3)
    fl = run_federated(train, partition_iid(train, 4), spec, FLConfig(num_clients=4, rounds=10, batch_size=10))
    return fl.final, train, test


def test_zero_epsilon_returns_input_exactly():
    rng = np.random.default_rng(0)
    x = rng.uniform(0, 1, (5, 4))
    state = ModelState(LINEAR, rng.standard_normal(LINEAR.param_count))
    for norm in ("inf", "2"):
        out = pgd_attack(state, x, rng.integers(0, 2, 5), AttackConfig(epsilon=0.0, norm=norm, random_start=True))
        assert out.tobytes() == x.tobytes()


def test_linear_oracle_linf():
    rng = np.random.default_rng(1)
    w = rng.standard_normal((2, 4))
    b = rng.standard_normal(2)
    state = ModelState(LINEAR, flatten([w, b]))
    x = rng.uniform(0.3, 0.7, (6, 4))
    y = rng.integers(0, 2, 6)
    eps = 0.1
    cfg = AttackConfig(epsilon=eps, eta=0.025, steps=10, norm="inf", clamp_range=None)
    x_adv = pgd_attack(state, x, y, cfg)
    direction = w[1 - y] - w[y]              # gradient sign of CE wrt x for a linear binary model
    np.testing.assert_allclose(x_adv, x + eps * np.sign(direction), rtol=0, atol=1e-9)
    margin = np.einsum("ij,ij->i", w[y] - w[1 - y], x) + b[y] - b[1 - y]
    margin_adv = margin - eps * np.abs(w[y] - w[1 - y]).sum(axis=1)
    before, _ = loss_and_grad(state, x, y)
    after, _ = loss_and_grad(state, x_adv, y)
    assert after - before == pytest.approx(np.mean(ce_binary(margin_adv) - ce_binary(margin)), abs=1e-12)


def test_raw_gradient_step_mode_respects_ball():
    rng = np.random.default_rng(2)
    state = ModelState(LINEAR, rng.standard_normal(LINEAR.param_count))
    x = rng.uniform(0, 1, (8, 4))
    cfg = AttackConfig(epsilon=0.05, eta=0.5, steps=3, sign_step=False)
    x_adv = pgd_attack(state, x, rng.integers(0, 2, 8), cfg)
    assert np.abs(x_adv - x).max() <= 0.05 + 1e-9


def test_l2_projection_radial():
    x = np.zeros((1, 2))
    cfg = AttackConfig(epsilon=1.0, norm="2", clamp_range=None)
    np.testing.assert_allclose(project(np.array([[3.0, 4.0]]), x, cfg), [[0.6, 0.8]], rtol=1e-15)
    inside = np.array([[0.3, 0.4]])
    assert project(inside, x, cfg).tobytes() == inside.tobytes()


def test_constraints_over_random_instances():
    rng = np.random.default_rng(3)
    state = ModelState(LINEAR, rng.standard_normal(LINEAR.param_count))
    for _ in range(100):
        norm = str(rng.choice(["inf", "2"]))
        cfg = AttackConfig(epsilon=float(rng.uniform(0.01, 0.5)), eta=float(rng.uniform(0.01, 0.3)),
                           steps=int(rng.integers(1, 6)), norm=norm, random_start=bool(rng.integers(2)),
                           seed=int(rng.integers(100)))
        x = rng.uniform(0, 1, (4, 4))
        x_adv = pgd_attack(state, x, rng.integers(0, 2, 4), cfg)
        d = x_adv - x
        size = np.abs(d).max(axis=1) if norm == "inf" else np.sqrt((d ** 2).sum(axis=1))
        assert np.all(size <= cfg.epsilon + 1e-9)
        assert x_adv.min() >= 0 and x_adv.max() <= 1


def test_random_start_deterministic_given_seed():
    rng = np.random.default_rng(4)
    state = ModelState(LINEAR, rng.standard_normal(LINEAR.param_count))
    x, y = rng.uniform(0, 1, (5, 4)), rng.integers(0, 2, 5)
    cfg = AttackConfig(epsilon=0.2, random_start=True, seed=9)
    assert pgd_attack(state, x, y, cfg).tobytes() == pgd_attack(state, x, y, cfg).tobytes()


@pytest.mark.parametrize("kwargs", [dict(epsilon=-0.1), dict(eta=0.0), dict(steps=0), dict(norm="1")])
def test_invalid_attack_config(kwargs):
    with pytest.raises(ValueError):
        AttackConfig(**kwargs)


def test_attack_lowers_accuracy_on_trained_model(blobs_model):
    model, _, test = blobs_model
    ev = evaluate(model, test, AttackConfig(epsilon=0.1))
    assert ev["adv_acc"] <= ev["clean_acc"]
    assert ev["clean_acc"] > 85


def test_attack_strength_monotone_in_epsilon(blobs_model):
    model, _, test = blobs_model
    accs = [evaluate(model, test, AttackConfig(epsilon=e))["adv_acc"] for e in (0.02, 0.05, 0.1, 0.2)]
    assert all(a >= b - 1.0 for a, b in zip(accs, accs[1:]))


def test_untrained_model_is_near_chance():
    data = generate_blobs(10, 200, 16, seed=3)
    spec = ModelSpec("mlp", [16, 10], (16,), 10)
    acc = np.mean([evaluate(init_model(spec, s), data)["clean_acc"] for s in range(5)])
    assert abs(acc - 10.0) <= 5.0


def test_perfect_margin_model_is_unbroken():
    # classes at x0 = 0.2 and x0 = 0.8 separated by the hyperplane x0 = 0.5
    x = np.array([[0.2, 0.5, 0.5, 0.5], [0.8, 0.5, 0.5, 0.5]] * 5)
    data = LabeledDataset(x, [0, 1] * 5, 2)
    w = np.array([[-10.0, 0, 0, 0], [10.0, 0, 0, 0]])
    state = ModelState(LINEAR, flatten([w, np.array([5.0, -5.0])]))
    ev = evaluate(state, data, AttackConfig(epsilon=0.2))
    assert ev["clean_acc"] == ev["adv_acc"] == 100.0


def test_zero_epochs_returns_model():
    state = init_model(LINEAR, 0)
    data = LabeledDataset(np.zeros((2, 4)), [0, 1], 2)
    assert adv_train(state, data, AttackConfig(), AdvTrainConfig(epochs=0)) is state


def test_fat_with_null_attack_equals_local_train():
    shard = generate_blobs(2, 20, 4, seed=2)
    cfg = FLConfig(batch_size=8)
    state = init_model(LINEAR, 1)
    plain = local_train(state, shard, cfg, np.random.default_rng(5))
    fat = fat_local_train(state, shard, cfg, np.random.default_rng(5), attack=AttackConfig(epsilon=0.0, steps=1))
    assert plain.theta.tobytes() == fat.theta.tobytes()


@pytest.mark.parametrize("mode", ["batch", "epoch"])
def test_adv_training_improves_robustness(blobs_model, mode):
    model, train, test = blobs_model
    attack = AttackConfig(epsilon=0.1)
    hardened = adv_train(model, train.subset(np.arange(0, 600, 3)), attack,
                         AdvTrainConfig(epochs=15, batch_size=32, mode=mode))
    base, robust = evaluate(model, test, attack), evaluate(hardened, test, attack)
    assert robust["adv_acc"] > base["adv_acc"]


def test_adv_train_mix_zero_is_clean_training():
    data = generate_blobs(2, 20, 4, seed=2)
    state = init_model(LINEAR, 2)
    cfg = AdvTrainConfig(epochs=2, batch_size=8, mix=0.0)
    mixed = adv_train(state, data, AttackConfig(epsilon=0.3), cfg)
    fl = FLConfig(num_clients=1, rounds=1, lr=cfg.lr, momentum=cfg.momentum, weight_decay=cfg.weight_decay,
                  batch_size=8)
    rng = np.random.default_rng([cfg.seed, 11])
    buf = np.zeros(state.param_count)
    clean = state
    for _ in range(2):
        clean = local_train(clean, data, fl, rng, momentum_buffer=buf,
                            perturb=lambda s, x, y: (rng.random(x.shape[0]), x)[1])
    assert mixed.theta.tobytes() == clean.theta.tobytes()
