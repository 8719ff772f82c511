"""Command-line experiment runner: ``flame generate|train|evaluate|report``."""

from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
from pathlib import Path

from . import checkpoint, config as config_mod
from .data import (CLASS_NAMES, generate_synthetic, partition_non_iid, read_kpjl,
                   read_manifest, split_train_val_test, to_arrays, write_kpjl, write_manifest)
from .federation import evaluate_params, run_centralized, run_federated
from .metrics import write_metrics_csv
from .model import AttentionAccumulator, KeypointTransformer, count_parameters

log = logging.getLogger("flame")

ALGOS = ("centralized", "fedavg", "flame")
LOG_LEVELS = {"error": logging.ERROR, "warn": logging.WARNING,
              "info": logging.INFO, "debug": logging.DEBUG}
SPLITS = ("train", "val", "test")


def _setup_logging():
    level = LOG_LEVELS.get(os.environ.get("FLAME_LOG_LEVEL", "info").lower(), logging.INFO)
    # a fresh handler per call follows whatever sys.stderr currently is
    for old in [h for h in log.handlers if getattr(h, "_flame_cli", False)]:
        log.removeHandler(old)
    handler = logging.StreamHandler(sys.stderr)
    handler.setFormatter(logging.Formatter("%(message)s"))
    handler._flame_cli = True
    log.addHandler(handler)
    log.setLevel(level)
    log.propagate = False


def _load_config(args) -> config_mod.ExperimentConfig:
    base = config_mod.PROFILES[args.profile] if args.profile else None
    if args.config:
        cfg = config_mod.load(args.config, base)
    else:
        cfg = base or config_mod.PROFILES["paper"]
    return config_mod.with_overrides(cfg, seed=args.seed, output=args.out)


def _data_dir(cfg) -> Path:
    return Path(cfg.data.path) if cfg.data.path else Path(cfg.experiment.output) / "data"


def _write_snapshot(directory: Path, cfg):
    (directory / "config.ini").write_text(config_mod.dumps(cfg), encoding="utf-8")


def histogram_table(clients, n_classes=4) -> str:
    header = f"{'client':>6} " + " ".join(f"{name[:12]:>12}" for name in CLASS_NAMES[:n_classes])
    lines = [header + f" {'total':>7}"]
    for c in clients:
        h = c.class_histogram(n_classes)
        lines.append(f"{c.client_id:>6} " + " ".join(f"{v:>12d}" for v in h) + f" {h.sum():>7d}")
    return "\n".join(lines)


# --------------------------------------------------------------------------
# subcommands


def cmd_generate(cfg) -> Path:
    out = _data_dir(cfg)
    out.mkdir(parents=True, exist_ok=True)
    samples = generate_synthetic(cfg.generator_spec(), cfg.data.n_samples)
    parts = split_train_val_test(samples, cfg.data.split, cfg.experiment.seed)
    for name, part in zip(SPLITS, parts):
        write_kpjl(out / f"{name}.kpjl", part)
    clients = partition_non_iid(parts[0], cfg.data.clients, cfg.data.alpha, cfg.experiment.seed)
    write_manifest(out / "manifest.json", clients)
    _write_snapshot(out, cfg)
    print(histogram_table(clients, cfg.model.n_classes))
    log.info("wrote %d/%d/%d sequences and a %d-client manifest to %s",
             *map(len, parts), len(clients), out)
    return out


def _load_split(cfg, name):
    path = _data_dir(cfg) / f"{name}.kpjl"
    if not path.exists():
        raise FileNotFoundError(f"{path} not found; run 'flame generate' first")
    return read_kpjl(path)


def _run_dir(cfg, algo) -> Path:
    return Path(cfg.experiment.output) / algo


def cmd_train(cfg, algo: str, parallel: int = 1) -> Path:
    if algo not in ALGOS:
        raise ValueError(f"unknown algo {algo!r}")
    train = _load_split(cfg, "train")
    test = _load_split(cfg, "test")
    run_dir = _run_dir(cfg, algo)
    run_dir.mkdir(parents=True, exist_ok=True)
    _write_snapshot(run_dir, cfg)
    log_path = run_dir / "runlog.jsonl"
    if algo == "centralized":
        state = run_centralized(train, cfg.model, cfg.train.centralized_epochs, cfg.fed_config(),
                                test=test, log_path=log_path)
    else:
        fed = cfg.fed_config("all" if algo == "fedavg" else None)
        clients = read_manifest(_data_dir(cfg) / "manifest.json", train)
        state = run_federated(fed, clients, cfg.model, test=test, parallel=parallel,
                              log_path=log_path, checkpoint_dir=run_dir, algo=algo)
        for event in state.events:
            log.warning(event)
    checkpoint.save(run_dir / "final.flam", state.params)
    rows = [dict(round=r.round, transmitted_params=r.transmitted_params,
                 cumulative_params=r.cumulative_params, **r.metrics.as_row())
            for r in state.history if r.metrics is not None]
    if rows:
        write_metrics_csv(run_dir / "metrics.csv", rows)
        state.history[-1].confusion.write_csv(run_dir / "confusion.csv")
    return run_dir


def cmd_evaluate(cfg, algo: str) -> dict:
    run_dir = _run_dir(cfg, algo)
    params = checkpoint.load(run_dir / "final.flam")
    model = KeypointTransformer(cfg.model, params)
    rows = []
    for split in ("val", "test"):
        X, y = to_arrays(_load_split(cfg, split), cfg.model.seq_len, cfg.data.confidence_threshold)
        if not len(y):
            continue
        rep, cm = evaluate_params(params, cfg.model, X, y)
        rows.append(dict(split=split, **rep.as_row()))
        cm.write_csv(run_dir / f"confusion_{split}.csv")
        if split == "test":
            acc = AttentionAccumulator()
            for i in range(0, len(X), 256):
                acc.update(model.forward(X[i:i + 256].astype(cfg.model.np_dtype))[1])
            acc.result().write_csv(run_dir / "keypoint_importance.csv",
                                   run_dir / "time_importance.csv")
    write_metrics_csv(run_dir / "evaluation.csv", rows)
    per_group, total = count_parameters(params)
    print(f"{algo}: {total} parameters")
    for r in rows:
        print(f"  {r['split']:>5}: acc={r['accuracy']:.2f} P={r['precision']:.2f} "
              f"R={r['recall']:.2f} F1={r['f1']:.2f}")
    return {r["split"]: r for r in rows}


# --------------------------------------------------------------------------
# report


def summarize_run(path) -> dict:
    """Final-round scores and the per-client upload size of one run log."""
    records = []
    with open(path, encoding="utf-8") as fh:
        for n, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                records.append(json.loads(line))
            except json.JSONDecodeError as exc:
                raise ValueError(f"{path}:{n}: malformed run log line ({exc.msg})") from None
    if not records:
        raise ValueError(f"{path}: empty run log")
    last = records[-1]
    for key in ("round", "transmitted_params", "cumulative_params"):
        if key not in last:
            raise ValueError(f"{path}: run log lacks {key!r}")
    scores = {k: last.get(k) for k in ("test_accuracy", "precision", "recall", "f1")}
    participants = last.get("participants") or 0
    per_client = last["transmitted_params"] / participants if participants else None
    return dict(name=last.get("algo") or Path(path).parent.name, path=str(path),
                rounds=last["round"], **scores, transmitted_per_client=per_client,
                cumulative_params=last["cumulative_params"],
                incomplete=any(v is None for v in scores.values()))


def transmission_reduction(fedavg: dict, flame: dict) -> float:
    """Percent fewer uploaded parameters per client per round, after warm-up."""
    return 100.0 * (1.0 - flame["transmitted_per_client"] / fedavg["transmitted_per_client"])


def _fmt(v, spec=".2f"):
    return "-" if v is None else format(v, spec)


def cmd_report(paths, out_csv=None) -> tuple[list[dict], float | None, int]:
    rows = [summarize_run(p) for p in paths]
    warnings = sum(r["incomplete"] for r in rows)
    print(f"{'method':<14}{'accuracy':>10}{'precision':>11}{'recall':>9}{'f1':>8}"
          f"{'transmitted':>13}  note")
    for r in rows:
        print(f"{r['name']:<14}{_fmt(r['test_accuracy']):>10}{_fmt(r['precision']):>11}"
              f"{_fmt(r['recall']):>9}{_fmt(r['f1']):>8}{_fmt(r['transmitted_per_client'], ',.0f'):>13}"
              f"  {'incomplete' if r['incomplete'] else ''}")
    by_name = {r["name"]: r for r in rows}
    reduction = None
    if "fedavg" in by_name and "flame" in by_name and by_name["fedavg"]["transmitted_per_client"]:
        reduction = transmission_reduction(by_name["fedavg"], by_name["flame"])
        print(f"FLAMe vs FedAvg transmission reduction: {reduction:.1f}%")
    if warnings:
        log.warning("%d run(s) with missing metrics", warnings)
    if out_csv:
        with open(out_csv, "w", newline="") as fh:
            fields = ["name", "path", "rounds", "test_accuracy", "precision", "recall", "f1",
                      "transmitted_per_client", "cumulative_params", "incomplete"]
            w = csv.DictWriter(fh, fieldnames=fields)
            w.writeheader()
            w.writerows(rows)
    return rows, reduction, warnings


# --------------------------------------------------------------------------
# entry point


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", metavar="PATH")
    common.add_argument("--seed", type=int)
    common.add_argument("--profile", choices=sorted(config_mod.PROFILES))
    common.add_argument("--out", metavar="DIR")
    parser = argparse.ArgumentParser(prog="flame", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)
    sub.add_parser("generate", parents=[common], help="synthesize and partition a dataset")
    p = sub.add_parser("train", parents=[common], help="run centralized, fedavg or flame training")
    p.add_argument("--algo", choices=ALGOS, default="flame")
    p.add_argument("--parallel", type=int, default=os.cpu_count() or 1)
    p = sub.add_parser("evaluate", parents=[common], help="score a trained checkpoint")
    p.add_argument("--algo", choices=ALGOS, default="flame")
    p = sub.add_parser("report", help="compare run logs")
    p.add_argument("logs", nargs="+", metavar="RUNLOG")
    p.add_argument("--out", metavar="DIR")
    return parser


def main(argv=None) -> int:
    _setup_logging()
    args = build_parser().parse_args(argv)
    try:
        if args.command == "report":
            out_csv = None
            if args.out:
                Path(args.out).mkdir(parents=True, exist_ok=True)
                out_csv = Path(args.out) / "report.csv"
            cmd_report(args.logs, out_csv)
            return 0
        cfg = _load_config(args)
        if args.command == "generate":
            cmd_generate(cfg)
        elif args.command == "train":
            cmd_train(cfg, args.algo, max(1, args.parallel))
        else:
            cmd_evaluate(cfg, args.algo)
    except config_mod.ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except (OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
