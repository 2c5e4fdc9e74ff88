"""Command-line orchestration: simulate, train, calibrate, evaluate, attack-search.

Every command is deterministic under a fixed (config, seed) pair; outputs
carry the configuration digest.  Exit codes: 0 success, 1 runtime failure,
2 usage or configuration error.
"""

from __future__ import annotations

import argparse
import csv
import json
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from .adversary import FAMILIES
from .attacks import Null, attack_to_dict, representative_attack
from .config import ExperimentConfig, config_digest, load_config
from .datasets import read_dataset, write_dataset
from .defender import calibrate_threshold, cusum_step, load_model, save_model, score_stream
from .finite_key import asymptotic_reference_rate
from .simulator import simulate_stream
from .training import (
    TrainingAborted,
    _search_family,
    auc,
    derive_seed,
    evaluate_model,
    minimax_train,
    miss_at_far,
    permutation_importance,
    retained_fraction,
)

USAGE_ERROR = 2
RUNTIME_ERROR = 1


class UsageError(ValueError):
    pass


def _load_experiment(path: str | None) -> ExperimentConfig:
    if path is None:
        return ExperimentConfig()
    try:
        return load_config(path)
    except (OSError, ValueError, TypeError, KeyError) as exc:
        raise UsageError(f"cannot load config {path}: {exc}") from exc


def _build_schedule(cfg: ExperimentConfig, family: str, strength: float, n: int, seed: int):
    feas = cfg.resolved_feasible()
    if family == "null":
        return [Null()] * n
    if family == "mixed":
        rng = np.random.Generator(np.random.Philox(key=derive_seed(seed, 0xE7A1)))
        schedule = []
        for _ in range(n):
            if rng.random() < 0.3:
                fam = FAMILIES[int(rng.integers(0, len(FAMILIES)))]
                sign = 1.0 if rng.random() < 0.5 else -1.0
                schedule.append(
                    representative_attack(fam, feas, cfg.channel, cfg.decoy, strength, sign)
                )
            else:
                schedule.append(Null())
        return schedule
    if family in FAMILIES:
        attack = representative_attack(family, feas, cfg.channel, cfg.decoy, strength)
        return [attack] * n
    raise UsageError(f"unknown attack family {family!r}")


def cmd_simulate(args) -> int:
    cfg = _load_experiment(args.config)
    schedule = _build_schedule(cfg, args.family, args.strength, args.blocks, args.seed)
    blocks = simulate_stream(
        cfg.channel,
        cfg.decoy,
        schedule,
        cfg.train.block_size if args.pulses is None else args.pulses,
        base_seed=args.seed,
        randomize=args.randomize,
    )
    write_dataset(args.out, blocks, config_digest(cfg))
    print(f"wrote {len(blocks)} blocks to {args.out}")
    return 0


def cmd_train(args) -> int:
    cfg = _load_experiment(args.config)
    train_cfg = cfg.to_train_config(seed=args.seed)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    history_path = Path(args.history) if args.history else out.with_suffix(".history.csv")
    try:
        model, history = minimax_train(train_cfg)
    except TrainingAborted as exc:
        _write_history(history_path, exc.history)
        print(f"training aborted: {exc}", file=sys.stderr)
        return RUNTIME_ERROR
    save_model(model, out)
    _write_history(history_path, history)
    last = history[-1]
    print(
        f"trained {len(history)} rounds: lambda_mix={last.lambda_mix:.2f} "
        f"tau={last.tau:.6g} final_miss={last.miss_rate:.3f} "
        f"worst_attack={last.best_family} (digest {config_digest(cfg)})"
    )
    return 0


def _write_history(path: Path, history) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(
            ["round", "lambda_mix", "tau", "best_family", "best_loss",
             "miss_rate", "pool_blocks", "best_attack"]
        )
        for rec in history:
            writer.writerow(
                [rec.round, repr(rec.lambda_mix), repr(rec.tau), rec.best_family,
                 repr(rec.best_loss), repr(rec.miss_rate), rec.pool_blocks,
                 json.dumps(rec.best_attack, sort_keys=True)]
            )


def _read_dataset_checked(path):
    try:
        return read_dataset(path)
    except (ValueError, KeyError) as exc:
        raise UsageError(f"bad dataset {path}: {exc}") from exc


def cmd_calibrate(args) -> int:
    model = load_model(args.model)
    data = _read_dataset_checked(args.data)
    if any(b.truth.attacked for b in data.blocks):
        raise UsageError("calibration dataset must be honest-only")
    scores = score_stream(model, model.normalizer.apply(data.features))
    model.tau = calibrate_threshold(scores, args.far)
    model.calibrations += 1
    save_model(model, args.out)
    print(f"calibrated tau={model.tau!r} at FAR={args.far} -> {args.out}")
    return 0


def cmd_evaluate(args) -> int:
    model = load_model(args.model)
    cfg = _load_experiment(args.config)
    data = _read_dataset_checked(args.data)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    far_grid = [float(v) for v in args.far_grid.split(",")]

    scores = score_stream(model, model.normalizer.apply(data.features))
    labels = data.labels
    families = sorted({f for f in data.families if f != "null"})
    s_honest = scores[labels == 0]
    if s_honest.size == 0:
        raise UsageError("dataset has no honest rows to calibrate against")

    with open(out / "miss_at_far.csv", "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["family", "far", "miss", "auc"])
        for fam in families:
            s_atk = scores[[f == fam for f in data.families]]
            for far in far_grid:
                writer.writerow(
                    [fam, far, miss_at_far(s_honest, s_atk, far), auc(s_honest, s_atk)]
                )

    for fam in families:
        s_atk = scores[[f == fam for f in data.families]]
        thresholds = np.unique(np.concatenate([s_honest, s_atk]))
        if thresholds.size > 512:
            thresholds = thresholds[:: thresholds.size // 512 + 1]
        with open(out / f"roc_{fam}.csv", "w", newline="", encoding="utf-8") as fh:
            writer = csv.writer(fh)
            writer.writerow(["threshold", "fpr", "tpr"])
            for t in thresholds:
                writer.writerow(
                    [repr(float(t)), float(np.mean(s_honest >= t)), float(np.mean(s_atk >= t))]
                )

    r0_ref = asymptotic_reference_rate(cfg.channel, cfg.decoy)
    with open(out / "retained_vs_far.csv", "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(
            ["far", "pooled_with", "pooled_without", "per_block_with",
             "per_block_without", "discard_rate"]
        )
        for far in far_grid:
            tau = calibrate_threshold(s_honest, far)
            rep = retained_fraction(
                data.blocks, model, cfg.budget, cfg.decoy, r0_ref, tau=tau
            )
            writer.writerow(
                [far, rep.pooled_with, rep.pooled_without, rep.per_block_with,
                 rep.per_block_without, rep.discard_rate]
            )

    with open(out / "latency.csv", "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["onset_index", "delay_blocks", "censored"])
        for onset, delay, censored in _stream_latencies(model, scores, labels):
            writer.writerow([onset, "" if delay is None else delay, int(censored)])

    if families:
        imp = permutation_importance(
            lambda f: score_stream(model, model.normalizer.apply(f)),
            data.features,
            labels,
            seed=derive_seed(args.seed, 0x1337),
        )
        from .telemetry import FEATURE_NAMES

        with open(out / "importance.csv", "w", newline="", encoding="utf-8") as fh:
            writer = csv.writer(fh)
            writer.writerow(["feature", "delta_auc"])
            for name, v in zip(FEATURE_NAMES, imp):
                writer.writerow([name, repr(float(v))])

    print(f"evaluation artifacts written to {out}")
    return 0


def _stream_latencies(model, scores, labels):
    """CUSUM delays for each honest-to-attacked transition in the stream."""
    if model.cusum is None:
        return
    state = model.cusum
    onsets = [
        t for t in range(len(labels)) if labels[t] == 1 and (t == 0 or labels[t - 1] == 0)
    ]
    for onset in onsets:
        st = replace(state, S=0.0)
        end = onset
        while end < len(labels) and labels[end] == 1:
            end += 1
        delay, censored = None, True
        for t in range(onset, end):
            st, alarm = cusum_step(st, float(scores[t]))
            if alarm:
                delay, censored = t - onset, False
                break
        yield onset, delay, censored


def cmd_attack_search(args) -> int:
    model = load_model(args.model)
    cfg = _load_experiment(args.config)
    if args.family not in FAMILIES:
        raise UsageError(f"unknown attack family {args.family!r}")
    train_cfg = cfg.to_train_config(seed=args.seed)
    honest = simulate_stream(
        cfg.channel,
        cfg.decoy,
        [Null()] * max(8, model.window),
        train_cfg.block_size,
        base_seed=derive_seed(args.seed, 0xC7),
    )
    from .telemetry import extract_features

    ctx = model.normalizer.apply(
        np.array([extract_features(b) for b in honest])
    )[-(model.window - 1) :]
    r0_ref = asymptotic_reference_rate(cfg.channel, cfg.decoy)
    log: list[dict] = []
    state, _ = _search_family(
        args.family, model, ctx, train_cfg, r0_ref, derive_seed(args.seed, 0x5EA), log
    )
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    with open(out, "w", encoding="utf-8") as fh:
        for row in log:
            fh.write(json.dumps(row, sort_keys=True) + "\n")
    best = attack_to_dict(state.best_attack) if state.best_attack else {"family": "null"}
    print(json.dumps({"best_attack": best, "best_loss": state.best_loss}, sort_keys=True))
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="qkdguard",
        description="Decoy-state BB84 link simulator with adversarial detection",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("simulate", help="simulate a block stream to a dataset file")
    p.add_argument("--config", default=None)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.add_argument("--blocks", type=int, default=100)
    p.add_argument("--pulses", type=int, default=None, help="pulses per block")
    p.add_argument("--family", default="null",
                   choices=["null", "mixed", *FAMILIES])
    p.add_argument("--strength", type=float, default=0.5)
    p.add_argument("--randomize", action="store_true")
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("train", help="run the alternating minimax training loop")
    p.add_argument("--config", default=None)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.add_argument("--history", default=None)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("calibrate", help="recalibrate the alarm threshold")
    p.add_argument("--model", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--far", type=float, default=0.01)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_calibrate)

    p = sub.add_parser("evaluate", help="emit metric CSVs for a labeled dataset")
    p.add_argument("--model", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--config", default=None)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.add_argument("--far-grid", default="0.001,0.0025,0.005,0.01,0.02,0.05")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("attack-search", help="search attacks against a frozen model")
    p.add_argument("--model", required=True)
    p.add_argument("--config", default=None)
    p.add_argument("--family", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_attack_search)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return USAGE_ERROR
    except (ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return RUNTIME_ERROR


if __name__ == "__main__":
    sys.exit(main())
