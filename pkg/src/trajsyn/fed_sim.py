"""Federated training simulation: local SGD, FedAvg and trajectory capture."""

from __future__ import annotations

import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .autodiff import NonFiniteError
from .datasets import LabeledDataset, PartitionPlan
from .models import ModelSpec, ModelState, init_model, loss_and_grad


class TrainingError(RuntimeError):
    pass


@dataclass(frozen=True)
class FLConfig:
    num_clients: int = 4
    rounds: int = 10
    local_epochs_per_round: int = 1
    lr: float = 0.05
    decay_round: int | None = None
    decayed_lr: float | None = None
    momentum: float = 0.9
    weight_decay: float = 5e-4
    batch_size: int = 16
    seed: int = 0
    persist_momentum: bool = False
    server_is_client: bool = True
    workers: int = 1

    def __post_init__(self):
        if self.rounds < 1:
            raise ValueError("rounds must be >= 1")
        if self.num_clients < 1 or self.local_epochs_per_round < 1 or self.batch_size < 1:
            raise ValueError("num_clients, local_epochs_per_round and batch_size must be >= 1")
        if self.lr < 0 or self.momentum < 0 or self.weight_decay < 0:
            raise ValueError("lr, momentum and weight_decay must be non-negative")
        if self.decay_round is not None:
            if not 1 <= self.decay_round <= self.rounds:
                raise ValueError("decay_round must lie in [1, rounds]")
            if self.decayed_lr is None or self.decayed_lr < 0:
                raise ValueError("decay_round needs a non-negative decayed_lr")

    def lr_at(self, round_index: int) -> float:
        """Learning rate for 1-based ``round_index``; the decay applies after ``decay_round``."""
        if self.decay_round is not None and round_index > self.decay_round:
            return self.decayed_lr
        return self.lr


@dataclass
class RoundRecord:
    round: int
    client_states: list
    aggregated: ModelState
    client_wall_ms: list
    client_losses: list
    client_step_ms: list = field(default_factory=list)


def client_rng(seed: int, client_id: int, round_index: int, stream: int = 0) -> np.random.Generator:
    """Independent stream per (seed, client, round), identical in serial or parallel runs."""
    return np.random.default_rng([seed, client_id, round_index, stream])


Perturb = Callable[[ModelState, np.ndarray, np.ndarray], np.ndarray]


def local_train(state: ModelState, shard: LabeledDataset, config: FLConfig, rng: np.random.Generator,
                lr: float | None = None, momentum_buffer: np.ndarray | None = None,
                perturb: Perturb | None = None, step_times: list | None = None,
                step_losses: list | None = None, context: str = "") -> ModelState:
    """Minibatch SGD with momentum and L2 weight decay on one client shard.

    Update per step: ``buf = momentum * buf + (g + wd * theta)``, ``theta -= lr * buf``.
    ``perturb(state, x, y)`` replaces each batch before the gradient step
    (adversarial training hooks in here).  ``momentum_buffer`` is updated in
    place when given, otherwise a fresh zero buffer is used.  Wall time of
    every optimizer step (perturbation included) is appended to
    ``step_times`` in milliseconds and its batch loss to ``step_losses``.
    """
    if len(shard) == 0:
        raise TrainingError(f"empty shard {context}".strip())
    lr = config.lr if lr is None else lr
    theta = state.theta.copy()
    buf = np.zeros_like(theta) if momentum_buffer is None else momentum_buffer
    n = len(shard)
    for epoch in range(config.local_epochs_per_round):
        order = rng.permutation(n)
        for start in range(0, n, config.batch_size):
            t0 = time.perf_counter()
            idx = order[start:start + config.batch_size]
            x, y = shard.inputs[idx], shard.labels[idx]
            current = ModelState(state.spec, theta)
            if perturb is not None:
                x = perturb(current, x, y)
            try:
                loss, g = loss_and_grad(current, x, y)
            except NonFiniteError as exc:
                raise TrainingError(f"non-finite loss {context} epoch {epoch}: {exc}".strip()) from exc
            if not np.isfinite(loss) or not np.all(np.isfinite(g)):
                raise TrainingError(f"non-finite loss {context} epoch {epoch}".strip())
            g = g + config.weight_decay * theta
            buf *= config.momentum
            buf += g
            theta = theta - lr * buf
            if step_losses is not None:
                step_losses.append(loss)
            if step_times is not None:
                step_times.append((time.perf_counter() - t0) * 1e3)
    return ModelState(state.spec, theta)


def fedavg(states: list[ModelState]) -> ModelState:
    """Elementwise mean of client parameter vectors, summed in list order.

    Computed as ``theta_0 + sum_i (theta_i - theta_0) / N``: the same mean,
    but exact when all inputs agree and when they cancel in pairs.
    """
    if not states:
        raise ValueError("fedavg needs at least one state")
    spec = states[0].spec
    for s in states[1:]:
        if s.spec != spec:
            raise ValueError(f"fedavg: spec mismatch {s.spec} vs {spec}")
    base = states[0].theta
    total = np.zeros_like(base)
    for s in states[1:]:
        total += s.theta - base
    return ModelState(spec, base + total / len(states))


@dataclass
class FederatedResult:
    final: ModelState
    trajectories: list
    records: list

    @property
    def step_times(self) -> list:
        """Per-client list of every optimizer-step wall time (ms)."""
        n = len(self.trajectories)
        out = [[] for _ in range(n)]
        for rec in self.records:
            for i in range(n):
                out[i].extend(rec.client_step_ms[i])
        return out


def run_federated(dataset: LabeledDataset, plan: PartitionPlan, spec: ModelSpec, config: FLConfig,
                  initial: ModelState | None = None, trainer=None, after_round=None,
                  round_offset: int = 0) -> FederatedResult:
    """T rounds of: every client trains from the global model, then FedAvg.

    ``trainer`` defaults to :func:`local_train` and receives the same
    arguments; FAT swaps in an adversarial trainer.  ``after_round(t, global)``
    may return a replacement global model (server-side post-processing).
    Returns the final global model, one trajectory of T checkpoints per
    client, and per-round records.
    """
    trainer = trainer or local_train
    shards = [dataset.subset(idx) for idx in plan.shards]
    n = len(shards)
    global_state = initial if initial is not None else init_model(spec, config.seed)
    trajectories: list[list[ModelState]] = [[] for _ in range(n)]
    buffers = [np.zeros(spec.param_count) for _ in range(n)] if config.persist_momentum else [None] * n
    records = []

    def run_client(i: int, t: int):
        times: list[float] = []
        losses: list[float] = []
        t0 = time.perf_counter()
        state = trainer(global_state, shards[i], config, client_rng(config.seed, i, t + round_offset),
                        lr=config.lr_at(t), momentum_buffer=buffers[i], step_times=times,
                        step_losses=losses, context=f"(round {t}, client {i})")
        return state, (time.perf_counter() - t0) * 1e3, times, losses[-1]

    for t in range(1, config.rounds + 1):
        if config.workers > 1:
            with ThreadPoolExecutor(config.workers) as pool:
                results = list(pool.map(lambda i: run_client(i, t), range(n)))
        else:
            results = [run_client(i, t) for i in range(n)]
        states = [r[0] for r in results]
        for i, s in enumerate(states):
            trajectories[i].append(ModelState(s.spec, s.theta))
        global_state = fedavg(states)
        if after_round is not None:
            replaced = after_round(t, global_state)
            if replaced is not None:
                global_state = replaced
        records.append(RoundRecord(
            round=t,
            client_states=states,
            aggregated=global_state,
            client_wall_ms=[r[1] for r in results],
            client_losses=[r[3] for r in results],
            client_step_ms=[r[2] for r in results],
        ))
    return FederatedResult(global_state, trajectories, records)
