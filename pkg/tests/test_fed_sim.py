import numpy as np
import pytest

from trajsyn.adversarial import evaluate
from trajsyn.datasets import LabeledDataset, generate_blobs, partition_iid
from trajsyn.fed_sim import FLConfig, TrainingError, client_rng, fedavg, local_train, run_federated
from trajsyn.models import ModelSpec, ModelState, init_model, loss_and_grad

SPEC = ModelSpec("mlp", [8, 6, 3], (8,), 3)


@pytest.fixture(scope="module")
def blobs():
    return generate_blobs(3, 40, 8, seed=1)


def brute_mean(thetas):
    out = []
    for j in range(len(thetas[0])):
        acc = 0.0
        for th in thetas:
            acc += th[j]
        out.append(acc / len(thetas))
    return np.array(out)


def test_fedavg_matches_brute_force_mean():
    rng = np.random.default_rng(0)
    states = [ModelState(SPEC, rng.standard_normal(SPEC.param_count)) for _ in range(5)]
    np.testing.assert_allclose(fedavg(states).theta, brute_mean([s.theta for s in states]), rtol=0, atol=1e-12)


def test_fedavg_idempotent_and_symmetric():
    theta = np.random.default_rng(1).standard_normal(SPEC.param_count)
    same = fedavg([ModelState(SPEC, theta)] * 4)
    np.testing.assert_array_equal(same.theta, theta)
    np.testing.assert_array_equal(fedavg([ModelState(SPEC, theta), ModelState(SPEC, -theta)]).theta,
                                  np.zeros_like(theta))


def test_fedavg_spec_mismatch():
    other = ModelSpec("mlp", [8, 3], (8,), 3)
    with pytest.raises(ValueError, match="spec mismatch"):
        fedavg([init_model(SPEC, 0), init_model(other, 0)])


def test_zero_lr_leaves_theta_unchanged(blobs):
    state = init_model(SPEC, 0)
    out = local_train(state, blobs, FLConfig(lr=0.0), np.random.default_rng(0))
    assert out.theta.tobytes() == state.theta.tobytes()


def test_full_batch_step_matches_hand_sgd(blobs):
    cfg = FLConfig(lr=0.1, momentum=0.9, weight_decay=1e-2, batch_size=len(blobs))
    state = init_model(SPEC, 2)
    _, g = loss_and_grad(state, blobs.inputs, blobs.labels)
    expected = state.theta - 0.1 * (g + 1e-2 * state.theta)
    out = local_train(state, blobs, cfg, np.random.default_rng(0))
    np.testing.assert_allclose(out.theta, expected, rtol=0, atol=1e-12)


def test_momentum_recurrence_over_two_steps(blobs):
    # with two full-batch epochs the second step carries mu * first direction
    cfg = FLConfig(lr=0.1, momentum=0.5, weight_decay=0.0, batch_size=len(blobs), local_epochs_per_round=2)
    state = init_model(SPEC, 3)
    _, g1 = loss_and_grad(state, blobs.inputs, blobs.labels)
    theta1 = state.theta - 0.1 * g1
    _, g2 = loss_and_grad(ModelState(SPEC, theta1), blobs.inputs, blobs.labels)
    expected = theta1 - 0.1 * (0.5 * g1 + g2)
    out = local_train(state, blobs, cfg, np.random.default_rng(0))
    np.testing.assert_allclose(out.theta, expected, rtol=0, atol=1e-12)


def test_memorizes_single_sample():
    one = LabeledDataset(np.array([[0.1] * 4 + [0.9] * 4]), [1], 3)
    cfg = FLConfig(lr=0.1, local_epochs_per_round=400, batch_size=1, weight_decay=0.0)
    losses = []
    local_train(init_model(SPEC, 0), one, cfg, np.random.default_rng(0), step_losses=losses)
    assert losses[-1] < 1e-3


@pytest.mark.filterwarnings("ignore:overflow:RuntimeWarning")
def test_non_finite_loss_reports_context(blobs):
    state = ModelState(SPEC, np.full(SPEC.param_count, 1e308))
    with pytest.raises(TrainingError, match="round 3, client 1"):
        local_train(state, blobs, FLConfig(), np.random.default_rng(0), context="(round 3, client 1)")


def test_empty_shard_rejected():
    empty = LabeledDataset(np.zeros((0, 8)), np.zeros(0, dtype=int), 3)
    with pytest.raises(TrainingError):
        local_train(init_model(SPEC, 0), empty, FLConfig(), np.random.default_rng(0))


def test_lr_schedule():
    cfg = FLConfig(rounds=6, lr=0.01, decay_round=4, decayed_lr=0.001)
    assert [cfg.lr_at(t) for t in range(1, 7)] == [0.01] * 4 + [0.001] * 2


@pytest.mark.parametrize("kwargs", [dict(rounds=0), dict(rounds=3, decay_round=4, decayed_lr=0.1),
                                    dict(decay_round=2), dict(lr=-1.0)])
def test_invalid_fl_config(kwargs):
    with pytest.raises(ValueError):
        FLConfig(**kwargs)


def test_client_rng_streams_are_distinct_and_reproducible():
    a = client_rng(0, 1, 2).random(4)
    np.testing.assert_array_equal(a, client_rng(0, 1, 2).random(4))
    assert not np.array_equal(a, client_rng(0, 2, 1).random(4))


def test_single_client_single_round_equals_local_train(blobs):
    cfg = FLConfig(num_clients=1, rounds=1, batch_size=8, seed=4)
    plan = partition_iid(blobs, 1)
    init = init_model(SPEC, 0)
    fl = run_federated(blobs, plan, SPEC, cfg, initial=init)
    direct = local_train(init, blobs.subset(plan.shards[0]), cfg, client_rng(4, 0, 1))
    assert fl.final.theta.tobytes() == direct.theta.tobytes()


def test_trajectories_and_records(blobs):
    cfg = FLConfig(num_clients=3, rounds=4, batch_size=8)
    fl = run_federated(blobs, partition_iid(blobs, 3), SPEC, cfg)
    assert [len(t) for t in fl.trajectories] == [4, 4, 4]
    assert all(s.param_count == SPEC.param_count for t in fl.trajectories for s in t)
    for rec in fl.records:
        np.testing.assert_allclose(rec.aggregated.theta, brute_mean([s.theta for s in rec.client_states]),
                                   rtol=0, atol=1e-12)
        assert all(ms >= 0 for ms in rec.client_wall_ms)
    # each client appends its own post-training state for every round
    for i in range(3):
        for t, rec in enumerate(fl.records):
            assert fl.trajectories[i][t].theta.tobytes() == rec.client_states[i].theta.tobytes()
    # every shard of 40 samples at batch 8 takes 5 steps per round
    assert [len(s) for s in fl.step_times] == [4 * 5] * 3


def test_parallel_equals_serial(blobs):
    base = dict(num_clients=4, rounds=3, batch_size=8, seed=7)
    serial = run_federated(blobs, partition_iid(blobs, 4), SPEC, FLConfig(**base))
    parallel = run_federated(blobs, partition_iid(blobs, 4), SPEC, FLConfig(**base, workers=4))
    assert serial.final.theta.tobytes() == parallel.final.theta.tobytes()
    for a, b in zip(serial.trajectories, parallel.trajectories):
        assert all(x.theta.tobytes() == y.theta.tobytes() for x, y in zip(a, b))


def test_persistent_momentum_changes_trajectory(blobs):
    base = dict(num_clients=2, rounds=2, batch_size=8)
    reset = run_federated(blobs, partition_iid(blobs, 2), SPEC, FLConfig(**base))
    kept = run_federated(blobs, partition_iid(blobs, 2), SPEC, FLConfig(**base, persist_momentum=True))
    assert reset.records[0].aggregated.theta.tobytes() == kept.records[0].aggregated.theta.tobytes()
    assert reset.final.theta.tobytes() != kept.final.theta.tobytes()


def test_after_round_hook_replaces_global(blobs):
    seen = []

    def hook(t, state):
        seen.append(t)
        return state.with_theta(np.zeros(state.param_count))

    fl = run_federated(blobs, partition_iid(blobs, 2), SPEC, FLConfig(num_clients=2, rounds=3), after_round=hook)
    assert seen == [1, 2, 3]
    assert not fl.final.theta.any()


def test_blobs_federated_accuracy_above_85():
    train = generate_blobs(3, 200, 32, seed=1000)
    test = generate_blobs(3, 300, 32, seed=1001)
    spec = ModelSpec("mlp", [32, 3], (32,), 3)
    cfg = FLConfig(num_clients=4, rounds=10, batch_size=10)
    fl = run_federated(train, partition_iid(train, 4), spec, cfg)
    assert evaluate(fl.final, test)["clean_acc"] > 85.0
