"""Experiment orchestration for the vanilla, TrajSyn, TrajSynFed and FAT arms."""

from __future__ import annotations

import csv
import functools
import json
import logging
import math
import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .adversarial import adv_train, evaluate, fat_local_train
from .config import RunConfig, prepare_output_dir, save_config
from .datasets import (LabeledDataset, generate_blobs, load_cifar10_binary, load_idx,
                       partition_iid)
from .distill import SyntheticDataset, distill, export_synthetic
from .fed_sim import FederatedResult, run_federated
from .models import ModelSpec, ModelState, forward, init_model
from .trajectory_store import save_checkpoint, write_trajectories

log = logging.getLogger(__name__)

METRICS_HEADER = ["run_id", "pipeline", "phase", "round", "client_id", "clean_acc", "adv_acc", "loss", "wall_ms"]
SERVER_ID = -1
SERVER_CHECKPOINT_ID = 2**32 - 1


class PipelineError(RuntimeError):
    def __init__(self, phase: str, cause: Exception):
        super().__init__(f"phase {phase} failed: {cause}")
        self.phase = phase


class InsufficientStepsError(ValueError):
    pass


def _fmt(v) -> str:
    if v is None or (isinstance(v, float) and math.isnan(v)):
        return ""
    if isinstance(v, float):
        return repr(v)
    return str(v)


class MetricsWriter:
    """Single writer for the metrics CSV; every row is flushed immediately."""

    def __init__(self, path, run_id: str, pipeline: str):
        self.path = Path(path)
        self.run_id = run_id
        self.pipeline = pipeline
        self._fh = open(self.path, "w", newline="")
        self._csv = csv.writer(self._fh)
        self._csv.writerow(METRICS_HEADER)
        self.rows = 0

    def row(self, phase: str, round_index: int, client_id: int, clean_acc=None, adv_acc=None,
            loss=None, wall_ms=None) -> None:
        for acc in (clean_acc, adv_acc):
            if acc is not None and not 0.0 <= acc <= 100.0:
                raise ValueError(f"accuracy {acc} outside [0, 100]")
        if wall_ms is not None and wall_ms < 0:
            raise ValueError("wall_ms must be non-negative")
        self._csv.writerow([self.run_id, self.pipeline, phase, round_index, client_id,
                            _fmt(clean_acc), _fmt(adv_acc), _fmt(loss), _fmt(wall_ms)])
        self._fh.flush()
        self.rows += 1

    def close(self) -> None:
        self._fh.close()


def write_metrics(path, rows: list[dict]) -> None:
    """Write metrics rows (dicts keyed by the CSV header) in one go."""
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=METRICS_HEADER)
        w.writeheader()
        for r in rows:
            w.writerow({k: _fmt(r.get(k)) for k in METRICS_HEADER})


def read_metrics(path) -> list[dict]:
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def measure_client_step_time(step_times: list[list[float]], warmup: int = 10, min_steps: int = 100) -> dict:
    """Median per-step wall time for each client after dropping warmup steps.

    Returns ``{"per_client": [...], "median": median of the per-client medians}``.
    """
    per_client = []
    for i, times in enumerate(step_times):
        kept = times[warmup:]
        if len(kept) < min_steps:
            raise InsufficientStepsError(f"client {i}: {len(kept)} timed steps after warmup, need {min_steps}")
        per_client.append(float(np.median(kept)))
    return {"per_client": per_client, "median": float(np.median(per_client))}


# --- data -----------------------------------------------------------------


def build_datasets(config: RunConfig) -> tuple[LabeledDataset, LabeledDataset]:
    d = config.dataset
    if d.kind == "blobs":
        kw = dict(spread=d.spread, means_seed=d.means_seed, strong_dims=d.strong_dims,
                  weak_amplitude=d.weak_amplitude)
        train = generate_blobs(d.classes, d.per_class, d.dims, seed=2 * config.seed + 1000, **kw)
        test = generate_blobs(d.classes, d.test_per_class, d.dims, seed=2 * config.seed + 1001, **kw)
        return train, test
    if d.kind == "idx":
        train = load_idx(d.images_path, d.labels_path)
        test = load_idx(d.test_images_path, d.test_labels_path, train.class_count)
        return train, test
    return load_cifar10_binary(d.cifar_train_path), load_cifar10_binary(d.cifar_test_path)


def build_spec(config: RunConfig, train: LabeledDataset) -> ModelSpec:
    m = config.model
    return ModelSpec(m.architecture, m.layer_sizes, train.input_shape, train.class_count, m.activation)


def server_shard(config: RunConfig, train: LabeledDataset) -> LabeledDataset:
    plan = partition_iid(train, config.fl.num_clients, config.fl.server_is_client, config.seed)
    return train.subset(plan.server_shard)


# --- pipeline ---------------------------------------------------------------


@dataclass
class PipelineResult:
    summary: dict
    final: ModelState
    fl: FederatedResult
    synthetic: SyntheticDataset | None = None
    fl2: FederatedResult | None = None


class _Phase:
    def __init__(self, name: str):
        self.name = name

    def __enter__(self):
        log.info("phase %s", self.name)
        return self

    def __exit__(self, exc_type, exc, tb):
        if exc is not None and not isinstance(exc, PipelineError):
            raise PipelineError(self.name, exc) from exc
        return False


def log_fl_rounds(writer: MetricsWriter, phase: str, result: FederatedResult, test: LabeledDataset,
            server_ms: dict | None = None) -> None:
    for rec in result.records:
        for i, state in enumerate(rec.client_states):
            acc = 100.0 * float(np.mean(forward(state, test.inputs).argmax(axis=1) == test.labels))
            writer.row(phase, rec.round, i, clean_acc=acc, loss=rec.client_losses[i], wall_ms=rec.client_wall_ms[i])
        ev = evaluate(rec.aggregated, test)
        writer.row(phase, rec.round, SERVER_ID, clean_acc=ev["clean_acc"], loss=ev["loss"],
                   wall_ms=(server_ms or {}).get(rec.round, 0.0))


def run_distillation(config: RunConfig, manifest, shard: LabeledDataset, spec: ModelSpec,
                     writer: MetricsWriter | None = None) -> SyntheticDataset:
    last = [time.perf_counter()]

    def progress(step, loss):
        now = time.perf_counter()
        if writer is not None:
            writer.row("distill", step + 1, SERVER_ID, loss=loss, wall_ms=(now - last[0]) * 1e3)
        last[0] = now

    return distill(manifest, shard, spec, config.distill, progress=progress)


def run_pipeline(config: RunConfig) -> PipelineResult:
    """Run one arm end to end, writing metrics.csv, summary.json and config.json.

    vanilla: FL only.  trajsyn: FL, distillation from the client trajectories,
    server adversarial training on the synthetic set.  trajsynfed: trajsyn
    followed by a second FL phase with server adversarial training after each
    aggregation.  fat: FL where every client trains adversarially.
    """
    out = prepare_output_dir(config.output_dir)
    save_config(config, out / "config.json")
    run_id = config.resolved_run_id
    writer = MetricsWriter(out / "metrics.csv", run_id, config.pipeline)
    try:
        return _run(config, out, run_id, writer)
    finally:
        writer.close()


def _run(config: RunConfig, out: Path, run_id: str, writer: MetricsWriter) -> PipelineResult:
    with _Phase("setup"):
        train, test = build_datasets(config)
        spec = build_spec(config, train)
        plan = partition_iid(train, config.fl.num_clients, config.fl.server_is_client, config.seed)
        init = init_model(spec, config.seed)

    trainer = None
    if config.pipeline == "fat":
        trainer = functools.partial(fat_local_train, attack=config.attack)
    with _Phase("fl"):
        fl = run_federated(train, plan, spec, config.fl, initial=init, trainer=trainer)
        log_fl_rounds(writer, "fl", fl, test)
        manifest = write_trajectories(out / "trajectories", fl.trajectories, spec, run_id)
        save_checkpoint(out / "model_fl.tsyn", fl.final.theta, SERVER_CHECKPOINT_ID, config.fl.rounds)
    final = fl.final
    synth = None
    fl2 = None
    client_times = fl.step_times

    if config.pipeline in ("trajsyn", "trajsynfed"):
        with _Phase("distill"):
            shard = train.subset(plan.server_shard)
            synth = run_distillation(config, manifest, shard, spec, writer)
            export_synthetic(synth, out / "dsyn", config.distill)
            dsyn = synth.exported()
        with _Phase("advtrain"):
            losses: list[float] = []
            t0 = time.perf_counter()
            final = adv_train(final, dsyn, config.attack, config.adv_train, step_losses=losses)
            ev = evaluate(final, test)
            writer.row("advtrain", config.adv_train.epochs, SERVER_ID, clean_acc=ev["clean_acc"],
                       loss=losses[-1] if losses else None, wall_ms=(time.perf_counter() - t0) * 1e3)
            save_checkpoint(out / "model_adv.tsyn", final.theta, SERVER_CHECKPOINT_ID, 0)

    if config.pipeline == "trajsynfed":
        with _Phase("fl2"):
            server_ms: dict[int, float] = {}
            server_cfg = type(config.adv_train)(**{**vars(config.adv_train),
                                                   "epochs": config.trajsynfed.server_adv_epochs})

            def harden(t, global_state):
                t0 = time.perf_counter()
                hardened = adv_train(global_state, dsyn, config.attack, server_cfg)
                server_ms[t] = (time.perf_counter() - t0) * 1e3
                return hardened

            fl2 = run_federated(train, plan, spec, config.fl, initial=final, after_round=harden,
                                round_offset=config.fl.rounds)
            log_fl_rounds(writer, "fl2", fl2, test, server_ms)
            final = fl2.final
            client_times = [a + b for a, b in zip(fl.step_times, fl2.step_times)]

    with _Phase("final"):
        ev = evaluate(final, test, config.attack)
        writer.row("final", 0, SERVER_ID, clean_acc=ev["clean_acc"], adv_acc=ev["adv_acc"], loss=ev["loss"])
        save_checkpoint(out / "model_final.tsyn", final.theta, SERVER_CHECKPOINT_ID, 0)
        timing = measure_client_step_time(client_times, config.timing.warmup, config.timing.min_steps)
        summary = {
            "run_id": run_id,
            "pipeline": config.pipeline,
            "seed": config.seed,
            "clean_acc": ev["clean_acc"],
            "adv_acc": ev["adv_acc"],
            "loss": ev["loss"],
            "client_step_ms_median": timing["median"],
            "client_step_ms_per_client": timing["per_client"],
            "client_total_ms": float(np.mean([np.sum(t) for t in client_times])),
            "client_optimizer_steps": [len(t) for t in client_times],
            "distill_final_loss": (synth.loss_history[-1] if synth and synth.loss_history else None),
            "metrics_rows": writer.rows,
        }
        (out / "summary.json").write_text(json.dumps(summary, indent=2))
    return PipelineResult(summary, final, fl, synth, fl2)


def expected_metric_rows(config: RunConfig) -> int:
    """Row count of metrics.csv implied by a config (header excluded)."""
    per_fl = config.fl.rounds * (config.fl.num_clients + 1)
    rows = per_fl + 1
    if config.pipeline in ("trajsyn", "trajsynfed"):
        rows += config.distill.steps + 1
    if config.pipeline == "trajsynfed":
        rows += per_fl
    return rows
