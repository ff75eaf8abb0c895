"""PGD attacks, adversarial training, the FAT client trainer and robust evaluation."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .datasets import LabeledDataset
from .fed_sim import FLConfig, TrainingError, local_train
from .models import ModelState, forward, forward_tensor


class AttackError(RuntimeError):
    pass


@dataclass(frozen=True)
class AttackConfig:
    epsilon: float = 0.1
    eta: float = 0.025
    steps: int = 10
    norm: str = "inf"
    random_start: bool = False
    clamp_range: tuple | None = (0.0, 1.0)
    sign_step: bool = True
    seed: int = 0

    def __post_init__(self):
        if self.epsilon < 0 or self.eta <= 0 or self.steps < 1:
            raise ValueError("need epsilon >= 0, eta > 0 and steps >= 1")
        if self.norm not in ("inf", "2"):
            raise ValueError(f"norm must be 'inf' or '2', got {self.norm!r}")
        if self.clamp_range is not None:
            object.__setattr__(self, "clamp_range", tuple(float(v) for v in self.clamp_range))


def _input_grad(state: ModelState, x: np.ndarray, y: np.ndarray) -> np.ndarray:
    xt = Tensor(x, requires_grad=True)
    loss = ad.softmax_cross_entropy(forward_tensor(state.spec, Tensor(state.theta), xt), y, reduction="sum")
    g = ad.grad(loss, xt).data
    if not np.all(np.isfinite(g)):
        raise AttackError("non-finite input gradient")
    return g


def _row_norms(v: np.ndarray) -> np.ndarray:
    return np.sqrt((v.reshape(v.shape[0], -1) ** 2).sum(axis=1)).reshape((-1,) + (1,) * (v.ndim - 1))


def project(x_adv: np.ndarray, x: np.ndarray, config: AttackConfig) -> np.ndarray:
    """Project onto the epsilon-ball around ``x`` and then into ``clamp_range``."""
    eps = config.epsilon
    if config.norm == "inf":
        x_adv = np.clip(x_adv, x - eps, x + eps)
    else:
        delta = x_adv - x
        norms = _row_norms(delta)
        scale = np.where(norms > eps, eps / np.maximum(norms, 1e-300), 1.0)
        x_adv = x + delta * scale
    if config.clamp_range is not None:
        x_adv = np.clip(x_adv, *config.clamp_range)
    return x_adv


def pgd_attack(state: ModelState, x, labels, config: AttackConfig,
               rng: np.random.Generator | None = None) -> np.ndarray:
    """Iterated loss ascent on the inputs, projected after every step.

    The l-inf step is ``eta * sign(grad)`` (``sign_step=False`` takes the raw
    gradient instead); the l2 step moves ``eta`` along the normalized
    gradient.  The clamp is applied after the ball projection, so for inputs
    already inside the clamp range the ball constraint still holds.
    """
    x = np.asarray(x, dtype=np.float64)
    labels = np.asarray(labels)
    if config.epsilon == 0:
        return x.copy()
    x_adv = x.copy()
    if config.random_start:
        rng = rng if rng is not None else np.random.default_rng(config.seed)
        if config.norm == "inf":
            x_adv = x + rng.uniform(-config.epsilon, config.epsilon, size=x.shape)
        else:
            d = rng.standard_normal(x.shape)
            d *= config.epsilon * rng.uniform(0, 1, size=(x.shape[0],) + (1,) * (x.ndim - 1)) / np.maximum(_row_norms(d), 1e-300)
            x_adv = x + d
        x_adv = project(x_adv, x, config)
    for _ in range(config.steps):
        g = _input_grad(state, x_adv, labels)
        if config.norm == "inf":
            step = np.sign(g) if config.sign_step else g
        else:
            step = g / np.maximum(_row_norms(g), 1e-12)
        x_adv = project(x_adv + config.eta * step, x, config)
    return x_adv


@dataclass(frozen=True)
class AdvTrainConfig:
    epochs: int = 20
    lr: float = 0.05
    momentum: float = 0.9
    weight_decay: float = 5e-4
    batch_size: int = 128
    mode: str = "batch"
    mix: float = 1.0
    seed: int = 0

    def __post_init__(self):
        if self.epochs < 0 or self.batch_size < 1:
            raise ValueError("epochs >= 0 and batch_size >= 1 required")
        if self.mode not in ("batch", "epoch"):
            raise ValueError(f"mode must be 'batch' or 'epoch', got {self.mode!r}")
        if not 0.0 <= self.mix <= 1.0:
            raise ValueError("mix must lie in [0, 1]")


def _mix(x_clean: np.ndarray, x_adv: np.ndarray, mix: float, rng: np.random.Generator) -> np.ndarray:
    if mix >= 1.0:
        return x_adv
    take = rng.random(x_clean.shape[0]) < mix
    return np.where(take.reshape((-1,) + (1,) * (x_clean.ndim - 1)), x_adv, x_clean)


def adv_train(state: ModelState, dataset: LabeledDataset, attack: AttackConfig, config: AdvTrainConfig,
              step_times: list | None = None, step_losses: list | None = None) -> ModelState:
    """Min-max training: every minibatch is replaced by its PGD perturbation.

    With ``mode="epoch"`` the whole dataset is attacked once at the start of
    each epoch and the epoch trains on that fixed perturbed copy.
    """
    if config.epochs == 0:
        return state
    if len(dataset) == 0:
        raise TrainingError("adversarial training needs a nonempty dataset")
    rng = np.random.default_rng([config.seed, 11])
    fl = FLConfig(num_clients=1, rounds=1, local_epochs_per_round=1, lr=config.lr,
                  momentum=config.momentum, weight_decay=config.weight_decay,
                  batch_size=config.batch_size, seed=config.seed)
    buf = np.zeros(state.param_count)
    for epoch in range(config.epochs):
        if config.mode == "epoch":
            x_adv = pgd_attack(state, dataset.inputs, dataset.labels, attack, rng)
            data = LabeledDataset(_mix(dataset.inputs, x_adv, config.mix, rng), dataset.labels, dataset.class_count)
            perturb = None
        else:
            data = dataset

            def perturb(current, x, y):
                return _mix(x, pgd_attack(current, x, y, attack, rng), config.mix, rng)
        state = local_train(state, data, fl, rng, momentum_buffer=buf, perturb=perturb,
                            step_times=step_times, step_losses=step_losses,
                            context=f"(adversarial epoch {epoch})")
    return state


def fat_local_train(state: ModelState, shard: LabeledDataset, config: FLConfig, rng: np.random.Generator,
                    attack: AttackConfig, **kwargs) -> ModelState:
    """Client-side adversarial training: :func:`local_train` on PGD-perturbed batches."""

    def perturb(current, x, y):
        return pgd_attack(current, x, y, attack, rng)

    return local_train(state, shard, config, rng, perturb=perturb, **kwargs)


def accuracy(state: ModelState, x, y) -> float:
    if len(y) == 0:
        return float("nan")
    return 100.0 * float(np.mean(forward(state, x).argmax(axis=1) == np.asarray(y)))


def evaluate(state: ModelState, test: LabeledDataset, attack: AttackConfig | None = None,
             batch_size: int = 512) -> dict:
    """Clean and PGD accuracy (percent) plus mean clean cross-entropy."""
    correct_clean = correct_adv = 0
    loss_sum = 0.0
    rng = np.random.default_rng([attack.seed, 13]) if attack is not None else None
    for start in range(0, len(test), batch_size):
        x = test.inputs[start:start + batch_size]
        y = test.labels[start:start + batch_size]
        with ad.no_grad():
            logits = forward_tensor(state.spec, Tensor(state.theta), Tensor(x))
            loss_sum += ad.softmax_cross_entropy(logits, y, reduction="sum").item()
        correct_clean += int(np.sum(logits.data.argmax(axis=1) == y))
        if attack is not None:
            x_adv = pgd_attack(state, x, y, attack, rng)
            correct_adv += int(np.sum(forward(state, x_adv).argmax(axis=1) == y))
    n = len(test)
    return {
        "clean_acc": 100.0 * correct_clean / n,
        "adv_acc": 100.0 * correct_adv / n if attack is not None else None,
        "loss": loss_sum / n,
    }


