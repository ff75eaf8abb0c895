"""Trajectory-matching dataset distillation driven by federated client trajectories.

One distillation step:

1. sample a client segment ``(theta_t, theta_{t+N})`` from the manifest;
2. start a student at ``theta_t`` and take K differentiable SGD steps on the
   synthetic images;
3. score the student with the normalized matching loss
   ``||theta_hat_K - theta_{t+N}||^2 / ||theta_t - theta_{t+N}||^2``;
4. move the images one plain SGD step against the meta-gradient.
"""

from __future__ import annotations

import hashlib
import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import NonFiniteError, Tensor
from .datasets import LabeledDataset, save_idx
from .models import ModelSpec, ModelState, forward_tensor, init_model, loss_and_grad, predict
from .trajectory_store import TrajectoryManifest, sample_segment

log = logging.getLogger(__name__)

FULL_BATCH_LIMIT = 512


class DegenerateSegmentError(ValueError):
    pass


class InsufficientServerDataError(ValueError):
    pass


@dataclass(frozen=True)
class DistillConfig:
    steps: int = 200
    unroll: int = 10
    expert_delta: int = 2
    student_lr: float = 0.01
    synth_lr: float = 0.1
    ipc: int = 2
    batch_size: int = 128
    init: str = "real"
    seed: int = 0
    max_start_round: int | None = None
    learn_student_lr: bool = False
    lr_lr: float = 1e-5
    per_layer_norm: bool = False

    def __post_init__(self):
        if self.steps < 0 or self.unroll < 1 or self.expert_delta < 1 or self.ipc < 1:
            raise ValueError("steps >= 0 and unroll, expert_delta, ipc >= 1 required")
        if self.student_lr <= 0 or self.synth_lr < 0:
            raise ValueError("student_lr must be > 0 and synth_lr >= 0")
        if self.init not in ("real", "gaussian"):
            raise ValueError(f"unknown init mode {self.init!r}")

    def digest(self) -> str:
        return hashlib.sha256(json.dumps(asdict(self), sort_keys=True).encode()).hexdigest()[:16]


@dataclass(eq=False)
class SyntheticDataset:
    images: np.ndarray
    labels: np.ndarray
    ipc: int
    class_count: int
    student_lr: float | None = None
    loss_history: list = field(default_factory=list)

    def __post_init__(self):
        counts = np.bincount(self.labels, minlength=self.class_count)
        if not np.all(counts == self.ipc):
            raise ValueError(f"synthetic labels must hold exactly {self.ipc} per class, got {counts}")

    def copy(self) -> "SyntheticDataset":
        return SyntheticDataset(self.images.copy(), self.labels.copy(), self.ipc, self.class_count,
                                self.student_lr, list(self.loss_history))

    def exported(self) -> LabeledDataset:
        """Images clamped to [0, 1]: the form that leaves the distillation stage."""
        return LabeledDataset(np.clip(self.images, 0.0, 1.0), self.labels, self.class_count)


def init_synthetic(server_shard: LabeledDataset, ipc: int, mode: str, rng: np.random.Generator) -> SyntheticDataset:
    """Seed the synthetic set from real server samples or rescaled Gaussian noise."""
    k = server_shard.class_count
    labels = np.repeat(np.arange(k), ipc)
    if mode == "real":
        picks = []
        for c in range(k):
            idx = np.flatnonzero(server_shard.labels == c)
            if idx.size < ipc:
                raise InsufficientServerDataError(
                    f"class {c} has {idx.size} server samples, {ipc} images per class requested"
                )
            picks.append(rng.choice(idx, size=ipc, replace=False))
        images = server_shard.inputs[np.concatenate(picks)].copy()
    elif mode == "gaussian":
        noise = rng.standard_normal((k * ipc,) + server_shard.input_shape)
        lo, hi = noise.min(), noise.max()
        images = (noise - lo) / (hi - lo) if hi > lo else np.full_like(noise, 0.5)
    else:
        raise ValueError(f"unknown init mode {mode!r}")
    return SyntheticDataset(images, labels, ipc, k)


def matching_loss(theta_hat, theta_target, theta_start, spec: ModelSpec | None = None,
                  per_layer: bool = False):
    """Normalized trajectory-matching loss.

    Accepts numpy arrays (returns a float) or tensors (returns a scalar
    tensor).  With ``per_layer`` and a ``spec`` the ratio is averaged over
    parameter blocks instead of taken over the whole vector.
    """
    as_float = not any(isinstance(v, Tensor) for v in (theta_hat, theta_target, theta_start))
    theta_hat, theta_target, theta_start = (ad.constant(v) for v in (theta_hat, theta_target, theta_start))
    if not theta_hat.shape == theta_target.shape == theta_start.shape:
        raise ad.ShapeError(
            f"matching_loss: shapes {theta_hat.shape}, {theta_target.shape}, {theta_start.shape} differ"
        )
    if per_layer:
        if spec is None:
            raise ValueError("per-layer matching needs the model spec")
        bounds = np.cumsum([0] + [int(np.prod(s)) for s in spec.param_shapes])
        blocks = [slice(a, b) for a, b in zip(bounds[:-1], bounds[1:])]
    else:
        blocks = [slice(None)]
    total = None
    for blk in blocks:
        den = ad.l2_norm_squared(ad.sub(theta_start[blk], theta_target[blk]))
        if den.item() < 1e-24:
            raise DegenerateSegmentError("degenerate expert segment: start equals target")
        num = ad.l2_norm_squared(ad.sub(theta_hat[blk], theta_target[blk]))
        term = ad.div(num, den)
        total = term if total is None else ad.add(total, term)
    if len(blocks) > 1:
        total = ad.mul(total, 1.0 / len(blocks))
    return total.item() if as_float else total


def _student_batches(n: int, config: DistillConfig, rng: np.random.Generator):
    if n <= FULL_BATCH_LIMIT:
        return [None] * config.unroll
    return [rng.choice(n, size=config.batch_size, replace=False) for _ in range(config.unroll)]


def distill_step(synth: SyntheticDataset, manifest: TrajectoryManifest, spec: ModelSpec,
                 config: DistillConfig, rng: np.random.Generator, step_index: int = 0) -> tuple[SyntheticDataset, float]:
    """One meta-gradient update of the synthetic images; returns (synth, loss)."""
    seg = sample_segment(manifest, config.expert_delta, rng, config.max_start_round)
    images = Tensor(synth.images, requires_grad=True)
    lr0 = synth.student_lr if synth.student_lr is not None else config.student_lr
    lr = Tensor(lr0, requires_grad=True) if config.learn_student_lr else lr0
    labels = synth.labels
    batches = _student_batches(len(labels), config, rng)

    unrolled = ad.UnrolledSGD(Tensor(seg.theta_start, requires_grad=True), lr)
    try:
        for idx in batches:
            x = images if idx is None else images[idx]
            y = labels if idx is None else labels[idx]
            unrolled.step(lambda th: ad.softmax_cross_entropy(forward_tensor(spec, th, x), y))
        loss = matching_loss(unrolled.theta, seg.theta_target, seg.theta_start, spec, config.per_layer_norm)
        leaves = [images, lr] if config.learn_student_lr else [images]
        grads = ad.backward_through_update(loss, unrolled, leaves)
    except NonFiniteError as exc:
        log.warning("distill step %d rejected: %s", step_index, exc)
        return synth, float("nan")

    g_img = grads[0].data
    new_images = synth.images - config.synth_lr * g_img
    if not np.all(np.isfinite(new_images)):
        log.warning("distill step %d rejected: non-finite images", step_index)
        return synth, loss.item()
    out = SyntheticDataset(new_images, synth.labels, synth.ipc, synth.class_count,
                           synth.student_lr, synth.loss_history)
    if config.learn_student_lr:
        out.student_lr = max(lr0 - config.lr_lr * grads[1].item(), 1e-8)
    return out, loss.item()


def distill(manifest: TrajectoryManifest, server_shard: LabeledDataset, spec: ModelSpec,
            config: DistillConfig, progress=None) -> SyntheticDataset:
    """Run ``config.steps`` distillation steps from a server-data (or noise) init.

    The loss of every step is kept in ``loss_history`` on the result.
    """
    rng = np.random.default_rng([config.seed, 7])
    synth = init_synthetic(server_shard, config.ipc, config.init, rng)
    if tuple(synth.images.shape[1:]) != spec.input_shape:
        raise ad.ShapeError(f"server data shape {synth.images.shape[1:]} vs model input {spec.input_shape}")
    synth.loss_history = []
    for step in range(config.steps):
        synth, loss = distill_step(synth, manifest, spec, config, rng, step)
        synth.loss_history.append(loss)
        if progress is not None:
            progress(step, loss)
    return synth


def train_student(data: LabeledDataset, spec: ModelSpec, seed: int, epochs: int = 300,
                  lr: float = 0.5) -> ModelState:
    """Fresh model trained by full-batch gradient descent on ``data`` only."""
    state = init_model(spec, seed)
    theta = state.theta
    for _ in range(epochs):
        _, g = loss_and_grad(ModelState(spec, theta), data.inputs, data.labels)
        theta = theta - lr * g
    return ModelState(spec, theta)


def student_accuracy(data: LabeledDataset, spec: ModelSpec, test: LabeledDataset, seed: int,
                     epochs: int = 300, lr: float = 0.5) -> float:
    """Test accuracy (percent) of :func:`train_student`."""
    state = train_student(data, spec, seed, epochs, lr)
    return 100.0 * float(np.mean(predict(state, test.inputs) == test.labels))


def export_synthetic(synth: SyntheticDataset, out_dir, config: DistillConfig | None = None,
                     dtype: str = "f8") -> dict:
    """Write clamped images/labels as IDX plus a metadata JSON; returns the metadata."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    data = synth.exported()
    save_idx(data, out_dir / "dsyn-images.idx", out_dir / "dsyn-labels.idx", dtype=dtype)
    finite = [v for v in synth.loss_history if np.isfinite(v)]
    meta = {
        "ipc": synth.ipc,
        "class_count": synth.class_count,
        "input_shape": list(data.input_shape),
        "init": config.init if config else None,
        "config_hash": config.digest() if config else None,
        "final_loss": finite[-1] if finite else None,
        "student_lr": synth.student_lr,
        "images": "dsyn-images.idx",
        "labels": "dsyn-labels.idx",
    }
    (out_dir / "dsyn-meta.json").write_text(json.dumps(meta, indent=2))
    return meta


def load_synthetic(out_dir) -> LabeledDataset:
    from .datasets import load_idx

    out_dir = Path(out_dir)
    meta = json.loads((out_dir / "dsyn-meta.json").read_text())
    data = load_idx(out_dir / meta["images"], out_dir / meta["labels"], meta["class_count"])
    shape = tuple(meta["input_shape"])
    return LabeledDataset(data.inputs.reshape((len(data),) + shape), data.labels, data.class_count)
