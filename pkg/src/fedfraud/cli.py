"""Command-line pipeline: generate, pretrain, train, attack, evaluate, sweep, audit.

Artifacts live under an output root (``--out`` or the FEDFRAUD_OUT
environment variable): the dataset as CSV, model parameters in the tensor
bundle format, message traces as newline-delimited JSON, and metric rows
appended to ``metrics.ndjson``.  Exit codes: 0 success, 1 bad
configuration, 2 missing upstream artifact, 3 isolation violation.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
import time
from dataclasses import fields

import numpy as np

from . import datagen, federation, metrics, report
from .encoder import EncoderConfig, PretrainConfig, SequenceEncoder, pretrain
from .errors import AuditViolation, ConfigError, MissingArtifactError
from .experiment import (
    ExperimentConfig,
    build_simulation,
    build_streams,
    cell_key,
    format_epsilon,
    parse_epsilon,
    p2p_stream,
    run_attack_suite,
    run_cell,
    sweep_cells,
)
from .seeding import stable_seed

ENV_OUT = "FEDFRAUD_OUT"
DEFAULT_OUT = "fedfraud-out"


# ----------------------------------------------------------------------
# Configuration
# ----------------------------------------------------------------------


def parse_config_file(path):
    """Flat key=value pairs; blank lines and '#' comments are ignored."""
    if not os.path.exists(path):
        raise ConfigError(f"config file {path} does not exist")
    values = {}
    with open(path, encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, 1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigError(f"{path}:{lineno}: expected key=value, got {raw.strip()!r}")
            key, value = line.split("=", 1)
            values[key.strip()] = value.strip()
    return values


def _coerce(name, text, kind):
    try:
        if kind is bool:
            if text.lower() in ("true", "1", "yes"):
                return True
            if text.lower() in ("false", "0", "no"):
                return False
            raise ValueError(text)
        if kind is int:
            return int(text)
        if kind is float:
            return parse_epsilon(text)
        if kind is tuple:
            return tuple(parse_epsilon(part) for part in text.split(",") if part.strip())
        return text
    except ValueError:
        raise ConfigError(f"config key {name}={text!r} is not a valid {kind.__name__}") from None


def load_experiment_config(args) -> ExperimentConfig:
    values = parse_config_file(args.config) if args.config else {}
    field_map = {f.name: f for f in fields(ExperimentConfig)}
    kwargs = {}
    for key, text in values.items():
        if key not in field_map:
            raise ConfigError(f"unknown config key {key!r}")
        default = field_map[key].default
        kind = tuple if key == "epsilon_grid" else type(default)
        kwargs[key] = _coerce(key, text, kind)
    config = ExperimentConfig(**kwargs)
    if args.seed is not None:
        config.base_seed = args.seed
    return config.validate()


def output_root(args):
    root = args.out or os.environ.get(ENV_OUT) or DEFAULT_OUT
    os.makedirs(root, exist_ok=True)
    return root


def _say(args, *parts):
    if not args.quiet:
        print(*parts)


# ----------------------------------------------------------------------
# Artifact paths and helpers
# ----------------------------------------------------------------------


def dataset_paths(root):
    d = os.path.join(root, "dataset")
    return os.path.join(d, "transactions.csv"), os.path.join(d, "accounts.csv")


def require_dataset(root):
    tx_path, acct_path = dataset_paths(root)
    for path in (tx_path, acct_path):
        if not os.path.exists(path):
            raise MissingArtifactError(path, "generate")
    return datagen.load_dataset(tx_path, acct_path)


def run_dir(root, config, epsilon, seed):
    name = f"{config.protocol}_eps{format_epsilon(epsilon)}_seed{seed}"
    return os.path.join(root, "runs", name)


def require_run(root, config, epsilon, seed):
    path = run_dir(root, config, epsilon, seed)
    meta = os.path.join(path, "run.json")
    if not os.path.exists(meta):
        raise MissingArtifactError(meta, "train")
    return path


def _manifest(path, payload):
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True)
        fh.write("\n")


def _cell_epsilon(args, config):
    if args.epsilon is None:
        return config.epsilon_grid[0]
    return parse_epsilon(args.epsilon)


# ----------------------------------------------------------------------
# Subcommands
# ----------------------------------------------------------------------


def cmd_generate(args):
    config = load_experiment_config(args)
    root = output_root(args)
    dataset = datagen.generate(config.dataset_config())
    tx_path, acct_path = dataset_paths(root)
    os.makedirs(os.path.dirname(tx_path), exist_ok=True)
    datagen.save_dataset(dataset, tx_path, acct_path)
    _manifest(os.path.join(root, "dataset", "manifest.json"), {
        "fingerprint": config.fingerprint(),
        "transactions": len(dataset.transactions),
        "accounts": len(dataset.accounts),
        "fraud_cases": sum(t.label for t in dataset.transactions),
    })
    _say(args, f"wrote {len(dataset.transactions)} transactions to {tx_path}")
    return 0


def cmd_pretrain(args):
    config = load_experiment_config(args)
    root = output_root(args)
    dataset = require_dataset(root)
    train_part, _ = datagen.split(dataset, 0.75)
    out = os.path.join(root, "pretrain")
    os.makedirs(out, exist_ok=True)
    epochs = config.pretrain_epochs or 5
    seed = config.base_seed
    traces = {}
    for b in sorted({a.bank for a in dataset.accounts}):
        fwd = SequenceEncoder(EncoderConfig(cell=config.cell), seed=stable_seed("encoder", seed, b))
        bwd = SequenceEncoder(EncoderConfig(cell=config.cell), seed=stable_seed("bwd-encoder", seed, b))
        accounts = [a for a in dataset.accounts if a.bank == b]
        trace = pretrain(train_part, accounts, fwd, bwd,
                         PretrainConfig(epochs=epochs, seed=stable_seed("pretrain", seed, b),
                                        history_limit=config.history_limit))
        fwd.bundle.save(os.path.join(out, f"encoder_bank{b}.params"))
        bwd.bundle.save(os.path.join(out, f"bwd_encoder_bank{b}.params"))
        traces[str(b)] = trace
        _say(args, f"bank {b}: loss {trace[0]:.4f} -> {trace[-1]:.4f}")
    _manifest(os.path.join(out, "manifest.json"),
              {"fingerprint": config.fingerprint(), "epochs": epochs, "loss_traces": traces})
    return 0


def cmd_train(args):
    config = load_experiment_config(args)
    root = output_root(args)
    dataset = require_dataset(root)
    epsilon = _cell_epsilon(args, config)
    seed = config.base_seed
    train_stream, _, _, _ = build_streams(dataset, config, seed)
    sim = build_simulation(dataset, config, epsilon, seed, full_trace=False)
    stream = p2p_stream(sim, train_stream) if config.protocol == "p2p" else train_stream
    trace = federation.train(sim, stream)

    path = run_dir(root, config, epsilon, seed)
    os.makedirs(path, exist_ok=True)
    sim.scorer.bundle.save(os.path.join(path, "scorer.params"))
    for b, bank in sim.banks.items():
        bank.encoder.bundle.save(os.path.join(path, f"encoder_bank{b}.params"))
    for b, mlp in sim.preprocessors.items():
        mlp.bundle.save(os.path.join(path, f"preprocessor_bank{b}.params"))
    sim.log.save(os.path.join(path, "trace.ndjson"))
    _manifest(os.path.join(path, "run.json"), {
        "fingerprint": config.fingerprint(),
        "protocol": config.protocol,
        "epsilon": format_epsilon(epsilon),
        "seed": seed,
        "loss_trace": trace,
    })
    _say(args, f"trained {path} (final loss {trace[-1]['train_loss']:.4f})")
    return 0


def _restore_simulation(root, config, epsilon, seed):
    dataset = require_dataset(root)
    path = require_run(root, config, epsilon, seed)
    sim = build_simulation(dataset, config, epsilon, seed)
    sim.scorer.bundle.load(os.path.join(path, "scorer.params"))
    for b, bank in sim.banks.items():
        bank.encoder.bundle.load(os.path.join(path, f"encoder_bank{b}.params"))
    for b, mlp in sim.preprocessors.items():
        mlp.bundle.load(os.path.join(path, f"preprocessor_bank{b}.params"))
    return dataset, sim


def cmd_evaluate(args):
    config = load_experiment_config(args)
    root = output_root(args)
    epsilon = _cell_epsilon(args, config)
    seed = config.base_seed
    dataset, sim = _restore_simulation(root, config, epsilon, seed)
    _, val_stream, _, _ = build_streams(dataset, config, seed)
    scores = federation.score_samples(sim, val_stream, noise_seed=("cell-eval", seed))
    labels = np.array([lab for _, lab in val_stream])
    scored = metrics.ScoredSet(scores, labels)
    row = {
        "stage": "evaluate",
        "protocol": config.protocol,
        "epsilon": format_epsilon(epsilon),
        "seed": seed,
        "fingerprint": config.fingerprint(),
        "auc_pr": metrics.auc_pr(scored),
        "auc_roc": metrics.auc_roc(scored),
    }
    row.update(metrics.curve_metrics(scored))
    report.write_rows(os.path.join(root, "metrics.ndjson"), [row], append=True)
    _say(args, report.row_line(row))
    return 0


def cmd_attack(args):
    config = load_experiment_config(args)
    root = output_root(args)
    epsilon = _cell_epsilon(args, config)
    seed = config.base_seed
    dataset, sim = _restore_simulation(root, config, epsilon, seed)
    _, _, members, split_time = build_streams(dataset, config, seed)
    row = {
        "stage": "attack",
        "protocol": config.protocol,
        "epsilon": format_epsilon(epsilon),
        "seed": seed,
        "fingerprint": config.fingerprint(),
    }
    row.update(run_attack_suite(sim, dataset, members, split_time, seed, config))
    report.write_rows(os.path.join(root, "metrics.ndjson"), [row], append=True)
    _say(args, report.row_line(row))
    return 0


def _sweep_cell(payload):
    config_kwargs, epsilon, seed = payload
    config = ExperimentConfig(**config_kwargs)
    started = time.time()
    row = run_cell(config, epsilon, seed)
    return row, time.time() - started


def cmd_sweep(args):
    config = load_experiment_config(args)
    root = output_root(args)
    sweep_dir = os.path.join(root, "sweep")
    os.makedirs(sweep_dir, exist_ok=True)
    rows_path = os.path.join(sweep_dir, "rows.ndjson")
    fingerprint = config.fingerprint()

    done = {}
    if os.path.exists(rows_path):
        for row in report.read_rows(rows_path):
            if row.get("fingerprint") == fingerprint:
                done[cell_key(row["protocol"], parse_epsilon(row["epsilon"]), row["seed"])] = row

    cells = sweep_cells(config)
    pending = [(eps, seed) for eps, seed in cells
               if cell_key(config.protocol, eps, seed) not in done]
    _say(args, f"{len(cells)} cells, {len(cells) - len(pending)} already done")

    from dataclasses import asdict
    runtimes = {}
    new_rows = []

    def record(eps, seed, row, elapsed):
        done[cell_key(config.protocol, eps, seed)] = row
        runtimes[cell_key(config.protocol, eps, seed)] = round(elapsed, 3)
        new_rows.append(row)
        report.write_rows(rows_path, [row], append=True)
        _say(args, f"  {config.protocol} eps={format_epsilon(eps)} seed={seed} "
                   f"auc_pr={row['auc_pr']:.4f} ({elapsed:.1f}s)")

    payloads = [(asdict(config), eps, seed) for eps, seed in pending]
    if args.parallel > 1 and payloads:
        import concurrent.futures as cf
        with cf.ProcessPoolExecutor(max_workers=args.parallel) as pool:
            for (eps, seed), (row, elapsed) in zip(
                pending, pool.map(_sweep_cell, payloads)
            ):
                record(eps, seed, row, elapsed)
    else:
        for payload, (eps, seed) in zip(payloads, pending):
            row, elapsed = _sweep_cell(payload)
            record(eps, seed, row, elapsed)

    all_rows = [done[cell_key(config.protocol, eps, seed)] for eps, seed in cells]
    aggregates = report.aggregate(all_rows)
    report.write_delimited(os.path.join(sweep_dir, "report.tsv"), aggregates)
    table = report.render_table(aggregates)
    with open(os.path.join(sweep_dir, "report.txt"), "w", encoding="utf-8") as fh:
        fh.write(table)
    figures = report.render_figures(aggregates, sweep_dir)
    _manifest(os.path.join(sweep_dir, "manifest.json"), {
        "fingerprint": fingerprint,
        "cells": [cell_key(config.protocol, eps, seed) for eps, seed in cells],
        "runtimes_s": runtimes,
        "figures": [os.path.basename(f) for f in figures],
    })
    _say(args, table)
    return 0


def audit_trace(records):
    """Check cross-party messages against the allowed kinds; tally budgets.

    Returns (violations, usage) where usage maps each publishing party to
    its private-profile count and budget.
    """
    violations = []
    usage = {}
    for i, rec in enumerate(records):
        kind = rec.get("kind")
        sender = rec.get("sender", "?")
        receiver = rec.get("receiver", "?")
        if sender != receiver and kind not in federation.ALLOWED_MESSAGE_KINDS:
            violations.append({"index": i, "kind": kind, "sender": sender,
                               "receiver": receiver})
        if kind == "private_profile":
            payload = rec.get("payload") or {}
            entry = usage.setdefault(sender, {"messages": 0, "epsilon": payload.get("epsilon")})
            entry["messages"] += payload.get("count", 1)
    return violations, usage


def cmd_audit(args):
    root = output_root(args)
    traces = []
    if args.trace:
        traces = [args.trace]
    else:
        for dirpath, _, filenames in os.walk(root):
            for name in filenames:
                if name == "trace.ndjson":
                    traces.append(os.path.join(dirpath, name))
    if not traces:
        raise MissingArtifactError(os.path.join(root, "runs", "*", "trace.ndjson"), "train")
    total_violations = []
    for path in sorted(traces):
        records = report.read_rows(path)
        violations, usage = audit_trace(records)
        _say(args, f"{path}: {len(violations)} violations")
        for party in sorted(usage):
            entry = usage[party]
            _say(args, f"  {party}: {entry['messages']} private profiles"
                       f" (epsilon={entry['epsilon']})")
        total_violations.extend({"trace": path, **v} for v in violations)
    if total_violations:
        for v in total_violations:
            print(f"VIOLATION {v['trace']}#{v['index']}: {v['kind']} "
                  f"{v['sender']} -> {v['receiver']}", file=sys.stderr)
        raise AuditViolation(f"{len(total_violations)} disallowed cross-party messages")
    _say(args, "0 violations")
    return 0


# ----------------------------------------------------------------------
# Entry point
# ----------------------------------------------------------------------


def build_parser():
    parser = argparse.ArgumentParser(
        prog="fedfraud",
        description="Privacy-preserving collaborative fraud detection simulator.",
    )
    parser.add_argument("--config", help="key=value config file")
    parser.add_argument("--seed", type=int, help="base seed override")
    parser.add_argument("--out", help=f"output root (default ${ENV_OUT} or {DEFAULT_OUT})")
    parser.add_argument("--parallel", type=int, default=1, help="parallel sweep workers")
    parser.add_argument("--quiet", action="store_true", help="suppress progress output")
    sub = parser.add_subparsers(dest="command", required=True)
    for name, fn in COMMANDS.items():
        p = sub.add_parser(name)
        p.set_defaults(func=fn)
        if name in ("train", "evaluate", "attack"):
            p.add_argument("--epsilon", help="privacy budget for this cell")
        if name == "audit":
            p.add_argument("--trace", help="audit a single trace file")
    return parser


COMMANDS = {
    "generate": cmd_generate,
    "pretrain": cmd_pretrain,
    "train": cmd_train,
    "attack": cmd_attack,
    "evaluate": cmd_evaluate,
    "sweep": cmd_sweep,
    "audit": cmd_audit,
}


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except MissingArtifactError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except AuditViolation as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
