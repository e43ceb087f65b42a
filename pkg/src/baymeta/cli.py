"""Experiment runner.

Subcommands:

* ``baymeta run <config>`` -- execute the configured mode and write its
  artifacts (loss or round traces, metrics CSV, score histogram, run summary
  JSON) into the output directory.
* ``baymeta checks`` -- run the numerical property suites and write a
  pass/fail report.
* ``baymeta report <run_dir>`` -- print the metrics of a finished run.

Exit codes: 0 ok, 1 config error, 2 divergence, 3 check failure.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import sys
import time
from pathlib import Path

import numpy as np

from . import checks as checks_mod
from .config import ConfigError, RunConfig, load, serialize
from .diffnet import ParamVector
from .episodes import episode_stream_seed, gen_task, sample_episode
from .estimators import CoresetNNDetector
from .evalmetrics import ScoreReport, episode_report, score_histogram
from .fedsim import federated_train
from .metalearn import (
    DivergenceError,
    adapt_and_score,
    proto_adapt_and_score,
    train_centralized,
    train_protomaml,
)


def save_checkpoint(path: str | Path, params: ParamVector) -> None:
    record = {
        "version": 1,
        "layout": [[name, list(shape)] for name, shape in params.layout],
        "values": params.values.tolist(),
    }
    Path(path).write_text(json.dumps(record))


def load_checkpoint(path: str | Path) -> ParamVector:
    record = json.loads(Path(path).read_text())
    if record.get("version") != 1:
        raise ValueError(f"unsupported checkpoint version {record.get('version')}")
    layout = tuple((name, tuple(shape)) for name, shape in record["layout"])
    return ParamVector(values=np.array(record["values"], dtype=float), layout=layout)


def _write_csv(path: Path, header: list[str], rows) -> None:
    with path.open("w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        writer.writerows(rows)


def _evaluate(score_fn, config: RunConfig) -> tuple[ScoreReport, np.ndarray]:
    """Score held-out test episodes; returns the report and pooled scores."""
    hp = config.hyperparams()
    family = config.family()
    per_episode = []
    for ep in range(config["eval.test_episodes"]):
        task = gen_task(family, 0, "test", task_index=ep)
        episode = sample_episode(
            task, hp.support_size, hp.query_normals, hp.query_anomalies,
            seed=episode_stream_seed(config.seed, 0, ep, "test"),
        )
        per_episode.append((np.asarray(score_fn(episode)), episode.query_y))
    report = episode_report(per_episode, pooled=config["eval.pooled"])
    pooled_scores = np.concatenate([s for s, _ in per_episode])
    return report, pooled_scores


def _run_mode(config: RunConfig, outdir: Path) -> list[str]:
    mode = config.mode
    seed = config.seed
    net = config.net()
    prior = config.prior()
    ref = config.reference()
    family = config.family()
    artifacts: list[str] = []

    def emit_metrics(report: ScoreReport, pooled_scores: np.ndarray, method: str) -> None:
        _write_csv(
            outdir / "metrics.csv",
            ["method", "task_family", "anomaly_kind_heldout", "metric", "mean", "stderr", "n_episodes"],
            report.as_rows(method, f"synthetic-h{family.heterogeneity:g}", family.heldout_kind),
        )
        _write_csv(outdir / "score_histogram.csv", ["bin_lo", "bin_hi", "count"],
                   score_histogram(pooled_scores))
        artifacts.extend(["metrics.csv", "score_histogram.csv"])

    if mode in ("centralized", "centralized_contrastive"):
        hp = config.hyperparams(contrastive=(mode == "centralized_contrastive"))
        params, trace = train_centralized(net, prior, family, hp, seed, ref)
        _write_csv(outdir / "loss.csv", ["epoch_or_round", "train_loss", "val_loss"], trace.rows())
        save_checkpoint(outdir / "params.json", params)
        artifacts.extend(["loss.csv", "params.json"])
        report, pooled = _evaluate(
            lambda ep: adapt_and_score(net, params, ep.support, ep.query_x, prior, hp, ref),
            config,
        )
        emit_metrics(report, pooled, mode)

    elif mode in ("federated", "federated_contrastive"):
        hp = config.hyperparams(contrastive=(mode == "federated_contrastive"))
        ckpt = config["fed.checkpoint_every"] or None
        params, trace = federated_train(
            net, prior, family, hp, n_clients=config["fed.clients"],
            rounds=config["fed.rounds"], seed=seed,
            participation=config.participation(), ref=ref,
            checkpoint_every=ckpt, workers=config["fed.workers"],
        )
        _write_csv(outdir / "fedtrace.csv",
                   ["round", "grad_norm", "mean_loss", "participation_size"], trace.rows())
        save_checkpoint(outdir / "params.json", params)
        artifacts.extend(["fedtrace.csv", "params.json"])
        report, pooled = _evaluate(
            lambda ep: adapt_and_score(net, params, ep.support, ep.query_x, prior, hp, ref),
            config,
        )
        emit_metrics(report, pooled, mode)

    elif mode == "protomaml":
        hp = config.hyperparams(contrastive=False)
        params, trace = train_protomaml(net, family, hp, seed)
        _write_csv(outdir / "loss.csv", ["epoch_or_round", "train_loss", "val_loss"], trace.rows())
        save_checkpoint(outdir / "params.json", params)
        artifacts.extend(["loss.csv", "params.json"])
        report, pooled = _evaluate(
            lambda ep: proto_adapt_and_score(net, params, ep.support, ep.query_x, hp),
            config,
        )
        emit_metrics(report, pooled, mode)

    elif mode == "coreset_nn":
        from .diffnet import embed

        params = net.init_params(seed)
        fraction = config["eval.coreset_fraction"]

        def score_fn(ep):
            detector = CoresetNNDetector(fraction=fraction, seed=seed)
            detector.fit(embed(net, params, ep.support))
            return detector.score_samples(embed(net, params, ep.query_x))

        report, pooled = _evaluate(score_fn, config)
        emit_metrics(report, pooled, mode)

    elif mode == "checks":
        results = checks_mod.run_all()
        lines = [f"{'PASS' if r.passed else 'FAIL'} {r.name}: {r.detail}" for r in results]
        (outdir / "checks_report.txt").write_text("\n".join(lines) + "\n")
        artifacts.append("checks_report.txt")
        for line in lines:
            print(line)
        if not all(r.passed for r in results):
            raise CheckFailure("one or more property suites failed")
    else:  # pragma: no cover - config validation rejects unknown modes
        raise ConfigError(f"unhandled mode {mode}")
    return artifacts


class CheckFailure(RuntimeError):
    pass


def cmd_run(config_path: str, outdir_arg: str | None) -> int:
    try:
        config = load(config_path)
    except FileNotFoundError:
        print(f"config file not found: {config_path}", file=sys.stderr)
        return 1
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 1

    outdir = Path(outdir_arg or config["output_dir"])
    outdir.mkdir(parents=True, exist_ok=True)
    config_text = serialize(config)
    started = time.time()
    try:
        artifacts = _run_mode(config, outdir)
    except DivergenceError as exc:
        print(f"divergence: {exc}", file=sys.stderr)
        return 2
    except CheckFailure as exc:
        print(f"checks failed: {exc}", file=sys.stderr)
        _write_summary(outdir, config, config_text, started, ["checks_report.txt"])
        return 3

    _write_summary(outdir, config, config_text, started, artifacts)
    return 0


def _write_summary(outdir: Path, config: RunConfig, config_text: str,
                   started: float, artifacts: list[str]) -> None:
    summary = {
        "mode": config.mode,
        "seed": config.seed,
        "config": config.entries,
        "config_hash": hashlib.sha256(config_text.encode()).hexdigest(),
        "wall_time_s": round(time.time() - started, 3),
        "artifacts": sorted(artifacts),
    }
    (outdir / "summary.json").write_text(json.dumps(summary, indent=2, default=str))


def cmd_checks(outdir_arg: str | None, fast: bool) -> int:
    results = checks_mod.run_all(fast=fast)
    lines = [f"{'PASS' if r.passed else 'FAIL'} {r.name}: {r.detail}" for r in results]
    for line in lines:
        print(line)
    if outdir_arg:
        outdir = Path(outdir_arg)
        outdir.mkdir(parents=True, exist_ok=True)
        (outdir / "checks_report.txt").write_text("\n".join(lines) + "\n")
    return 0 if all(r.passed for r in results) else 3


def cmd_report(run_dir: str) -> int:
    run = Path(run_dir)
    summary_path = run / "summary.json"
    if not summary_path.exists():
        print(f"no summary.json under {run_dir}", file=sys.stderr)
        return 1
    summary = json.loads(summary_path.read_text())
    print(f"mode={summary['mode']} seed={summary['seed']} wall_time={summary['wall_time_s']}s")
    metrics = run / "metrics.csv"
    if metrics.exists():
        with metrics.open() as fh:
            for row in csv.DictReader(fh):
                print(
                    f"  {row['method']:<26} {row['metric']:<8} "
                    f"{float(row['mean']):.4f} +/- {float(row['stderr']):.4f} "
                    f"(n={row['n_episodes']})"
                )
    return 0


def main(argv: list[str] | None = None) -> int:
    parser = argparse.ArgumentParser(prog="baymeta", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p_run = sub.add_parser("run", help="execute a configured experiment")
    p_run.add_argument("config", help="path to a dotted-key config file")
    p_run.add_argument("--outdir", default=None, help="override output directory")

    p_checks = sub.add_parser("checks", help="run the numerical property suites")
    p_checks.add_argument("--outdir", default=None)
    p_checks.add_argument("--fast", action="store_true", help="smaller sample counts")

    p_report = sub.add_parser("report", help="print metrics of a finished run")
    p_report.add_argument("run_dir")

    args = parser.parse_args(argv)
    if args.command == "run":
        return cmd_run(args.config, args.outdir)
    if args.command == "checks":
        return cmd_checks(args.outdir, args.fast)
    return cmd_report(args.run_dir)


if __name__ == "__main__":
    sys.exit(main())
