"""Command-line entry point: ``mototp {generate,train,eval,states,augment}``.

Exit codes: 0 success, 2 user or configuration error, 3 numerical failure.
"""
from __future__ import annotations

import argparse
import configparser
import hashlib
import json
import logging
import os
import sys
import time
import warnings
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import __version__
from .data import NormalizationStats, impute, load_corpus, normalize, stack_windows, window, write_session_csv
from .layers import ConfigError
from .schema import CLASS_NAMES, SCHEMA_HASH, SchemaError
from .tensor import NumericError

logger = logging.getLogger("mototp")

EXIT_OK, EXIT_USAGE, EXIT_NUMERIC = 0, 2, 3
SEED_ENV = "MOTO_TP_SEED"


class UsageError(Exception):
    """A user-facing error that maps to exit code 2."""


# ------------------------------------------------------------------ helpers


def read_kv(path) -> dict[str, str]:
    """Read a plain ``key = value`` file (``#`` comments, no sections)."""
    p = Path(path)
    if not p.is_file():
        raise UsageError(f"config file not found: {p}")
    parser = configparser.ConfigParser(interpolation=None, delimiters=("=",), comment_prefixes=("#",))
    parser.optionxform = str
    try:
        parser.read_string("[main]\n" + p.read_text(encoding="utf-8"))
    except configparser.Error as exc:
        raise UsageError(f"{p}: {exc}") from None
    return dict(parser["main"])


def resolve_seed(flag, config: dict | None = None) -> int:
    if flag is not None:
        return int(flag)
    if config and "seed" in config:
        return int(config["seed"])
    env = os.environ.get(SEED_ENV)
    if env not in (None, ""):
        try:
            return int(env)
        except ValueError:
            raise UsageError(f"{SEED_ENV} must be an integer, got {env!r}") from None
    return 0


def file_sha256(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def write_manifest(out_dir: Path, subcommand: str, config: dict, seeds, inputs: dict, outputs: list, started: float):
    doc = {
        "subcommand": subcommand,
        "config": config,
        "seeds": list(seeds),
        "inputs": {k: str(v) for k, v in inputs.items()},
        "outputs": {str(p.name): file_sha256(p) for p in outputs},
        "schema_hash": SCHEMA_HASH,
        "tool_version": __version__,
        "wall_clock_seconds": round(time.time() - started, 3),
    }
    path = out_dir / "manifest.json"
    path.write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return path


def _load_sessions(data_dir):
    p = Path(data_dir)
    if not p.is_dir():
        raise UsageError(f"data directory not found: {p}")
    sessions = load_corpus(p)
    if not sessions:
        raise UsageError(f"no sessions found under {p}")
    return sessions


def _load_model(checkpoint):
    from .model import load_checkpoint

    p = Path(checkpoint)
    if not p.is_file():
        raise UsageError(f"checkpoint not found: {p}")
    model, header = load_checkpoint(p)
    extra = header.get("extra", {})
    stats = NormalizationStats.from_dict(extra["normalization"]) if "normalization" in extra else None
    return model, extra, stats


def _windows_for(sessions, extra, stats):
    T, stride = int(extra.get("window", 64)), int(extra.get("stride", 32))
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        ws = window(impute(sessions), T, stride)
    if not ws:
        raise UsageError(f"no rides are at least {T} samples long")
    X, y = stack_windows(ws)
    if stats is not None:
        X = normalize(X, stats)
    return ws, X, y


# --------------------------------------------------------------- generate


def cmd_generate(args) -> list[Path]:
    from .synth import (
        PROFILES,
        CollisionModel,
        GeneratorConfig,
        generate_corpus,
        manifest,
        validate_corpus,
    )

    seed = resolve_seed(args.seed)
    profiles = dict(PROFILES)
    for item in args.override or []:
        profiles = _apply_override(profiles, item)
    collision = CollisionModel.null() if args.null_collision else CollisionModel()
    try:
        cfg = GeneratorConfig(args.rides_per_class, args.duration, seed, args.noise_scale, collision)
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    rides = generate_corpus(cfg, profiles)
    outputs = []
    for ride in rides:
        p = out / f"{ride.ride_id}.csv"
        write_session_csv(p, [ride])
        outputs.append(p)
    report = validate_corpus(rides, profiles)
    (out / "validation.txt").write_text(report.to_text(), encoding="utf-8")
    (out / "generation.json").write_text(manifest(cfg, profiles) + "\n", encoding="utf-8")
    outputs += [out / "validation.txt", out / "generation.json"]
    print(f"wrote {len(rides)} sessions to {out}; validation {'PASS' if report.passed else 'FAIL'}")
    args._manifest = (out, {"rides_per_class": cfg.rides_per_class, "duration": cfg.duration,
                            "noise_scale": cfg.noise_scale, "null_collision": bool(args.null_collision),
                            "overrides": list(args.override or [])}, [seed], {}, outputs)
    return outputs


def _apply_override(profiles, item: str):
    """``HTP.mean_speed=50`` style profile override."""
    try:
        key, value = item.split("=", 1)
        cls_name, fld = key.strip().split(".", 1)
        number = float(value)
    except ValueError:
        raise UsageError(f"invalid profile override {item!r}; expected CLASS.field=number") from None
    match = [lab for lab, p in profiles.items() if p.name == cls_name.strip().upper()]
    if not match:
        raise UsageError(f"unknown class in override {item!r}")
    prof = profiles[match[0]]
    fld = fld.strip()
    if fld in ("name", "label", "interpolated") or not hasattr(prof, fld):
        raise UsageError(f"unknown profile field in override {item!r}")
    if not np.isfinite(number) or number < 0:
        raise UsageError(f"profile values must be finite and non-negative: {item!r}")
    if fld == "braking_duty" and not 0 < number < 1:
        raise UsageError(f"braking_duty must be in (0, 1): {item!r}")
    out = dict(profiles)
    out[match[0]] = replace(prof, **{fld: number})
    return out


# ------------------------------------------------------------------ train

_DATA_KEYS = ("window", "stride", "norm_mode", "holdout")


def cmd_train(args) -> list[Path]:
    from .model import save_checkpoint
    from .training import TrainConfig, prepare_dataset, train

    data_dir = Path(args.data)
    if not data_dir.is_dir():
        raise UsageError(f"data directory not found: {data_dir}")
    raw = read_kv(args.config) if args.config else {}
    overrides = {
        "seed": args.seed, "max_epochs": args.epochs, "batch_size": args.batch_size,
        "variant": args.variant, "window": args.window, "stride": args.stride,
    }
    for k, v in overrides.items():
        if v is not None:
            raw[k] = str(v)
    raw["seed"] = str(resolve_seed(args.seed, raw))
    data_opts = {k: raw.pop(k) for k in _DATA_KEYS if k in raw}
    try:
        tcfg = TrainConfig.from_mapping(raw)
        T = int(data_opts.get("window", 64))
        stride = int(data_opts.get("stride", 32))
        holdout = data_opts.get("holdout", "true").strip().lower() not in ("0", "false", "no")
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    sessions = _load_sessions(data_dir)
    ds = prepare_dataset(sessions, T, stride, tcfg.split_fraction, tcfg.val_fraction, tcfg.seed,
                         data_opts.get("norm_mode", "schema"), holdout=holdout)
    has_val = ds.X_val.shape[0] > 0
    model, log = train(tcfg, ds.X_train, ds.y_train, ds.X_val if has_val else None, ds.y_val if has_val else None)

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    extra = {
        "normalization": ds.stats.to_dict(),
        "window": T,
        "stride": stride,
        "train_config": tcfg.to_dict(),
        "splits": {
            "train": sorted(set(ds.groups_train.tolist())),
            "val": sorted(set(ds.groups_val.tolist())),
            "test": sorted(set(ds.groups_test.tolist())),
        },
        "best_epoch": log.best_epoch,
        "best_val_loss": log.best["val_loss"],
        "best_val_acc": log.best["val_acc"],
    }
    ckpt = out / "model.ckpt"
    save_checkpoint(ckpt, model, extra)
    log_path = out / "training_log.csv"
    log.write_csv(log_path)
    outputs = [ckpt, log_path]
    if ds.X_test.shape[0] > 0:
        acc = float(np.mean(model.predict(ds.X_test) == ds.y_test))
        print(f"test accuracy {acc:.4f} on {ds.X_test.shape[0]} windows")
    print(f"best epoch {log.best_epoch}: val loss {log.best['val_loss']:.4f}, val acc {log.best['val_acc']:.4f}")
    cfg_snapshot = dict(tcfg.to_dict(), window=T, stride=stride, holdout=holdout)
    args._manifest = (out, cfg_snapshot, [tcfg.seed], {"data": data_dir}, outputs)
    return outputs


# ------------------------------------------------------------------- eval


def cmd_eval(args) -> list[Path]:
    from .metrics import MetricsReport
    from .plots import calibration_svg, roc_svg, write_svg

    model, extra, stats = _load_model(args.checkpoint)
    sessions = _load_sessions(args.data)
    if args.split != "all":
        keep = set(extra.get("splits", {}).get(args.split, []))
        if not keep:
            raise UsageError(f"checkpoint records no {args.split!r} split")
        sessions = [s for s in sessions if s.ride_id in keep]
        if not sessions:
            raise UsageError(f"none of the {args.split!r} rides are present in {args.data}")
    _, X, y = _windows_for(sessions, extra, stats)
    P = model.predict_proba(X)
    report = MetricsReport.compute(P, y)
    out = Path(args.report_dir)
    report.write(out)
    write_svg(out / "roc.svg", roc_svg(P, y, CLASS_NAMES))
    write_svg(out / "calibration.svg", calibration_svg(report.calibration, CLASS_NAMES))
    print(report.to_text(), end="")
    outputs = [out / n for n in ("metrics.csv", "metrics.txt", "confusion_matrix.csv", "roc.svg", "calibration.svg")]
    args._manifest = (out, {"split": args.split}, [], {"checkpoint": args.checkpoint, "data": args.data}, outputs)
    return outputs


# ----------------------------------------------------------------- states


def cmd_states(args) -> list[Path]:
    from .states import (
        DEFAULT_RULES,
        INDETERMINATE,
        StateProbabilities,
        classify_state,
        intervention_for,
        load_rules,
        smooth_state,
        write_decisions_csv,
    )

    rules = DEFAULT_RULES
    if args.rules:
        if not Path(args.rules).is_file():
            raise UsageError(f"rules file not found: {args.rules}")
        rules = load_rules(args.rules)
    k = 1 if args.strict else args.smooth_k
    if k < 1:
        raise UsageError("--smooth-k must be >= 1")
    model, extra, stats = _load_model(args.checkpoint)
    ws, X, _ = _windows_for(_load_sessions(args.data), extra, stats)
    P = model.predict_proba(X)
    stride = int(extra.get("stride", 32))
    from .synth import SAMPLE_RATE_HZ

    rows = []
    by_ride: dict[str, list[int]] = {}
    for i, w in enumerate(ws):
        by_ride.setdefault(w.ride_id, []).append(i)
    for ride, idx in by_ride.items():
        decisions = [classify_state(StateProbabilities.from_class_vector(P[i]), rules) for i in idx]
        raw = [d.phase for d in decisions]
        smooth = smooth_state(raw, k)
        for n, (i, d, sm) in enumerate(zip(idx, decisions, smooth)):
            p = StateProbabilities.from_class_vector(P[i])
            rows.append({
                "timestamp": f"{n * stride / SAMPLE_RATE_HZ:.2f}", "ride_id": ride,
                "raw_phase": d.phase, "smoothed_phase": sm,
                "intervention": intervention_for(sm, rules) if sm != INDETERMINATE else "none",
                "p_ntp": p.p_ntp, "p_ltp": p.p_ltp, "p_htp": p.p_htp,
            })
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    dpath = out / "decisions.csv"
    write_decisions_csv(dpath, rows)
    phases = [r["smoothed_phase"] for r in rows]
    labels = [1, 2, 3, 4, 5, 6, INDETERMINATE]
    occ_lines = ["phase,count,fraction"]
    for ph in labels:
        c = sum(1 for x in phases if x == ph)
        occ_lines.append(f"{ph},{c},{c / len(phases):.6f}")
    opath = out / "occupancy.csv"
    opath.write_text("\n".join(occ_lines) + "\n", encoding="utf-8")
    print("\n".join(occ_lines))
    args._manifest = (out, {"smooth_k": k, "rules": args.rules or "default"}, [],
                      {"checkpoint": args.checkpoint, "data": args.data}, [dpath, opath])
    return [dpath, opath]


# ---------------------------------------------------------------- augment


def cmd_augment(args) -> list[Path]:
    from .augment import MODES, AugmentConfig, run_experiment, write_result
    from .training import TrainConfig

    modes = tuple(m.strip() for m in args.modes.split(",") if m.strip())
    bad = [m for m in modes if m not in MODES]
    if bad:
        raise UsageError(f"unknown modes {bad}; choose from {MODES}")
    modes = tuple(m for m in MODES if m in modes)
    if args.seeds:
        seeds = tuple(int(s) for s in args.seeds.split(","))
    else:
        seeds = (resolve_seed(None),)
    if "predicted" in modes and not args.checkpoint and not args.train_upstream:
        raise UsageError("predicted mode requires --checkpoint (or --train-upstream)")
    if args.checkpoint and not Path(args.checkpoint).is_file():
        raise UsageError(f"checkpoint not found: {args.checkpoint}")
    sessions = _load_sessions(args.corpus)
    if any(s.collision is None for s in sessions):
        raise UsageError("corpus lacks collision labels")
    cfg = AugmentConfig(
        modes=modes, seeds=seeds, upstream=args.checkpoint, train_upstream=args.train_upstream,
        hard=args.hard, window=args.window, stride=args.stride,
        train=TrainConfig(max_epochs=args.epochs),
    )
    result = run_experiment(cfg, sessions)
    out = Path(args.out)
    write_result(result, out)
    print(result.to_text(), end="")
    outputs = [out / "augment.csv", out / "augment_summary.txt"]
    args._manifest = (out, {"modes": list(modes), "hard": args.hard, "window": args.window, "stride": args.stride,
                            "epochs": args.epochs, "train_upstream": args.train_upstream},
                      list(seeds), {"corpus": args.corpus, "checkpoint": args.checkpoint or ""}, outputs)
    return outputs


# ------------------------------------------------------------------ parser


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="mototp", description="Rider time-pressure classification toolkit")
    p.add_argument("--threads", type=int, default=None, help="cap on numerical worker threads")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("generate", help="write a synthetic session corpus")
    g.add_argument("--rides-per-class", type=int, default=200)
    g.add_argument("--duration", type=int, default=192, help="samples per ride at 100 Hz")
    g.add_argument("--seed", type=int, default=None)
    g.add_argument("--noise-scale", type=float, default=1.0)
    g.add_argument("--null-collision", action="store_true", help="collision labels independent of TP")
    g.add_argument("--override", action="append", metavar="CLASS.field=value", help="profile override")
    g.add_argument("--out", required=True)
    g.set_defaults(func=cmd_generate)

    t = sub.add_parser("train", help="train an MTPS model")
    t.add_argument("--data", required=True)
    t.add_argument("--config", help="key = value training options")
    t.add_argument("--out", required=True)
    t.add_argument("--seed", type=int, default=None)
    t.add_argument("--epochs", type=int, default=None)
    t.add_argument("--batch-size", type=int, default=None)
    t.add_argument("--variant", default=None)
    t.add_argument("--window", type=int, default=None)
    t.add_argument("--stride", type=int, default=None)
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="evaluate a checkpoint")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--data", required=True)
    e.add_argument("--report-dir", required=True)
    e.add_argument("--split", choices=("all", "train", "val", "test"), default="all")
    e.set_defaults(func=cmd_eval)

    s = sub.add_parser("states", help="map predictions to rider-state phases")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--data", required=True)
    s.add_argument("--rules")
    s.add_argument("--smooth-k", type=int, default=3)
    s.add_argument("--strict", action="store_true", help="no temporal smoothing (k = 1)")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_states)

    a = sub.add_parser("augment", help="TP-augmented collision prediction experiment")
    a.add_argument("--corpus", required=True)
    a.add_argument("--checkpoint")
    a.add_argument("--train-upstream", action="store_true", help="fit the upstream model per seed instead")
    a.add_argument("--modes", default="baseline,predicted,oracle")
    a.add_argument("--seeds", default=None, help="comma-separated seeds")
    a.add_argument("--hard", action="store_true", help="append one-hot predictions instead of probabilities")
    a.add_argument("--window", type=int, default=64)
    a.add_argument("--stride", type=int, default=32)
    a.add_argument("--epochs", type=int, default=20)
    a.add_argument("--out", required=True)
    a.set_defaults(func=cmd_augment)
    return p


def _run(args) -> int:
    started = time.time()
    args._manifest = None
    args.func(args)
    if args._manifest is not None:
        out, cfg, seeds, inputs, outputs = args._manifest
        write_manifest(Path(out), args.command, cfg, seeds, inputs, outputs, started)
    return EXIT_OK


def main(argv=None) -> int:
    from .states import RuleConfigError
    from .training import StratificationError

    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        if args.threads is not None:
            if args.threads < 1:
                raise UsageError("--threads must be >= 1")
            from threadpoolctl import threadpool_limits

            with threadpool_limits(limits=args.threads):
                return _run(args)
        return _run(args)
    except RuleConfigError as exc:
        print(f"error: malformed rules: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (UsageError, SchemaError, ConfigError, StratificationError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (NumericError, FloatingPointError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
