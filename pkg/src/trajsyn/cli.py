"""Command line entry point: ``trajsyn <command> --config run.json [--seed N] [--out DIR]``.

Stages can run separately and hand over through files:
``fedtrain`` writes the trajectory manifest and ``model_fl.tsyn``;
``distill`` reads the manifest and writes ``dsyn/``; ``advtrain`` reads a
model checkpoint and ``dsyn/``; ``eval`` scores any checkpoint.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import sys
from pathlib import Path

import numpy as np

from .adversarial import adv_train, evaluate
from .config import ConfigError, load_config, prepare_output_dir, save_config
from .distill import export_synthetic, load_synthetic
from .fed_sim import run_federated
from .datasets import partition_iid
from .harness import (SERVER_CHECKPOINT_ID, MetricsWriter, PipelineError, build_datasets, build_spec,
                      log_fl_rounds, run_distillation, run_pipeline, server_shard)
from .models import init_model
from .trajectory_store import (CheckpointError, TrajectoryManifest, load_checkpoint, save_checkpoint,
                               write_trajectories)


def _common() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(add_help=False)
    p.add_argument("--config", default=argparse.SUPPRESS, help="JSON run configuration")
    p.add_argument("--seed", type=int, default=argparse.SUPPRESS, help="override the config seed")
    p.add_argument("--out", default=argparse.SUPPRESS, help="override the output directory")
    return p


def build_parser() -> argparse.ArgumentParser:
    common = _common()
    parser = argparse.ArgumentParser(prog="trajsyn", parents=[common])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)
    sub.add_parser("fedtrain", parents=[common], help="federated training with trajectory capture")
    p = sub.add_parser("distill", parents=[common], help="distill D_syn from a trajectory manifest")
    p.add_argument("--manifest", help="manifest file or directory (default OUT/trajectories)")
    p = sub.add_parser("advtrain", parents=[common], help="adversarially train a checkpoint on D_syn")
    p.add_argument("--model", help="checkpoint to harden (default OUT/model_fl.tsyn)")
    p.add_argument("--dsyn", help="exported synthetic set directory (default OUT/dsyn)")
    p = sub.add_parser("eval", parents=[common], help="clean and PGD accuracy of a checkpoint")
    p.add_argument("--model", required=True)
    sub.add_parser("pipeline", parents=[common], help="run the configured pipeline end to end")
    p = sub.add_parser("bench", parents=[common], help="client per-step timing across pipelines")
    p.add_argument("--pipelines", default="vanilla,trajsyn,fat,trajsynfed")
    return parser


def _config(args):
    if not hasattr(args, "config"):
        raise ConfigError("--config is required")
    return load_config(args.config, seed=getattr(args, "seed", None), output_dir=getattr(args, "out", None))


def cmd_fedtrain(config) -> dict:
    out = prepare_output_dir(config.output_dir)
    save_config(config, out / "config.json")
    train, test = build_datasets(config)
    spec = build_spec(config, train)
    plan = partition_iid(train, config.fl.num_clients, config.fl.server_is_client, config.seed)
    writer = MetricsWriter(out / "metrics.csv", config.resolved_run_id, config.pipeline)
    try:
        fl = run_federated(train, plan, spec, config.fl, initial=init_model(spec, config.seed))
        log_fl_rounds(writer, "fl", fl, test)
    finally:
        writer.close()
    write_trajectories(out / "trajectories", fl.trajectories, spec, config.resolved_run_id)
    save_checkpoint(out / "model_fl.tsyn", fl.final.theta, SERVER_CHECKPOINT_ID, config.fl.rounds)
    return {"manifest": str(out / "trajectories" / "manifest.json"), "model": str(out / "model_fl.tsyn"),
            **evaluate(fl.final, test)}


def cmd_distill(config, manifest_path=None) -> dict:
    out = prepare_output_dir(config.output_dir)
    manifest = TrajectoryManifest.load(manifest_path or out / "trajectories")
    train, _ = build_datasets(config)
    spec = build_spec(config, train)
    if spec != manifest.spec:
        raise ConfigError(f"manifest model spec {manifest.spec} does not match config {spec}")
    synth = run_distillation(config, manifest, server_shard(config, train), spec)
    return export_synthetic(synth, out / "dsyn", config.distill)


def cmd_advtrain(config, model_path=None, dsyn_path=None) -> dict:
    out = prepare_output_dir(config.output_dir)
    train, test = build_datasets(config)
    spec = build_spec(config, train)
    state = load_checkpoint(model_path or out / "model_fl.tsyn", spec)
    dsyn = load_synthetic(dsyn_path or out / "dsyn")
    hardened = adv_train(state, dsyn, config.attack, config.adv_train)
    save_checkpoint(out / "model_adv.tsyn", hardened.theta, SERVER_CHECKPOINT_ID, 0)
    return {"model": str(out / "model_adv.tsyn"), **evaluate(hardened, test, config.attack)}


def cmd_eval(config, model_path) -> dict:
    train, test = build_datasets(config)
    state = load_checkpoint(model_path, build_spec(config, train))
    return evaluate(state, test, config.attack)


def cmd_bench(config, pipelines: str) -> dict:
    rows = {}
    for name in pipelines.split(","):
        cfg = dataclasses.replace(config, pipeline=name, output_dir=str(Path(config.output_dir) / name))
        summary = run_pipeline(cfg).summary
        rows[name] = {k: summary[k] for k in ("client_step_ms_median", "client_total_ms", "clean_acc", "adv_acc")}
    base = rows.get("vanilla")
    if base:
        for r in rows.values():
            r["step_ratio_vs_vanilla"] = r["client_step_ms_median"] / base["client_step_ms_median"]
            r["total_ratio_vs_vanilla"] = r["client_total_ms"] / base["client_total_ms"]
    return rows


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        config = _config(args)
        if args.command == "fedtrain":
            result = cmd_fedtrain(config)
        elif args.command == "distill":
            result = cmd_distill(config, args.manifest)
        elif args.command == "advtrain":
            result = cmd_advtrain(config, args.model, args.dsyn)
        elif args.command == "eval":
            result = cmd_eval(config, args.model)
        elif args.command == "pipeline":
            result = run_pipeline(config).summary
        else:
            result = cmd_bench(config, args.pipelines)
    except PipelineError as exc:
        print(f"trajsyn: {exc}", file=sys.stderr)
        return 2
    except (ConfigError, CheckpointError, OSError, ValueError) as exc:
        print(f"trajsyn {args.command}: {exc}", file=sys.stderr)
        return 1
    print(json.dumps(result, indent=2, default=lambda o: o.tolist() if isinstance(o, np.ndarray) else str(o)))
    return 0


if __name__ == "__main__":
    sys.exit(main())
