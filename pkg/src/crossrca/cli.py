"""Batch command line: simulate, train, detect, localize, evaluate.

Every subcommand reads an optional JSON ``--config`` file, then applies
``--set key=value`` overrides (dotted keys reach nested sections, values are
parsed as JSON when possible), then the direct flags.

Exit codes: 0 success, 2 input or validation problem, 3 no anomaly,
4 no candidates, 5 training diverged.
"""
from __future__ import annotations

import argparse
import copy
import csv
import json
import logging
import sys
from dataclasses import fields
from pathlib import Path

import numpy as np

from .core import aggregate_panel, build_tree, format_key
from .errors import (DivergenceError, InsufficientHistoryError, NoAnomalyError, NoCandidateError,
                     RcaError)
from .evaluation import evaluate_cases, write_eval_csv
from .forecast import detect_3sigma, flag_series, forecast_panel
from .gat import GatConfig, GatModel, train
from .ingest import DatasetManifest, load_csv, read_expected_csv, write_expected_csv
from .localize import GaConfig, LocalizeConfig, localize
from .oracle import ExactModel
from .synth import SynthConfig, generate_dataset, isolate_case, read_labels, write_synth

logger = logging.getLogger("crossrca")

EXIT_OK, EXIT_INPUT, EXIT_NO_ANOMALY, EXIT_NO_CANDIDATES, EXIT_DIVERGED = 0, 2, 3, 4, 5

DEFAULTS = {
    "manifest": None,
    "model": None,  # model file, or "oracle" for the exact relationship
    "labels": None,
    "expected": None,  # optional CSV of expected values for localize
    "monitored": None,  # defaults to the last derived metric
    "t": None,
    "out": "out",
    "name": "synth",
    "seed": 0,
    "order": None,
    "min_history": None,
    "synth": {},
    "gat": {},
    "ga": {},
    "localize": {},
    "eval": {"truth": "labels", "threshold": 0.8, "timing": True, "baseline": True},
}


class InputProblem(Exception):
    """Bad configuration or files; maps to exit code 2."""


def parse_value(text: str):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def apply_override(cfg: dict, assignment: str) -> None:
    if "=" not in assignment:
        raise InputProblem(f"--set expects key=value, got {assignment!r}")
    key, value = assignment.split("=", 1)
    parts = key.strip().split(".")
    node = cfg
    for p in parts[:-1]:
        node = node.setdefault(p, {})
        if not isinstance(node, dict):
            raise InputProblem(f"--set {key}: {p} is not a section")
    node[parts[-1]] = parse_value(value.strip())


def build_config(args) -> dict:
    cfg = copy.deepcopy(DEFAULTS)
    if args.config:
        try:
            loaded = json.loads(Path(args.config).read_text(encoding="utf-8"))
        except (OSError, json.JSONDecodeError) as exc:
            raise InputProblem(f"cannot read config {args.config}: {exc}") from exc
        for k, v in loaded.items():
            if isinstance(v, dict) and isinstance(cfg.get(k), dict):
                cfg[k].update(v)
            else:
                cfg[k] = v
    for item in args.set or []:
        apply_override(cfg, item)
    direct = {"manifest": args.manifest, "model": args.model, "labels": args.labels,
              "expected": args.expected, "monitored": args.monitored, "t": args.t,
              "out": args.out, "seed": args.seed, "order": args.order}
    for k, v in direct.items():
        if v is not None:
            cfg[k] = v
    if args.f_index is not None:
        cfg["synth"]["f_index"] = args.f_index
    if args.epochs is not None:
        cfg["gat"]["epochs"] = args.epochs
    if args.t_delta is not None:
        cfg["localize"]["t_delta"] = args.t_delta
    # one seed drives every stage unless a section sets its own
    for section in ("synth", "gat", "ga"):
        cfg[section].setdefault("seed", cfg["seed"])
    return cfg


def _make(cls, options: dict):
    names = {f.name for f in fields(cls)}
    unknown = set(options) - names
    if unknown:
        raise InputProblem(f"unknown {cls.__name__} keys: {sorted(unknown)}")
    opts = {k: tuple(v) if isinstance(v, list) else v for k, v in options.items()}
    try:
        return cls(**opts)
    except (TypeError, ValueError) as exc:
        raise InputProblem(f"{cls.__name__}: {exc}") from exc


def localize_config(cfg) -> LocalizeConfig:
    opts = dict(cfg["localize"])
    opts["ga"] = _make(GaConfig, cfg["ga"])
    return _make(LocalizeConfig, opts)


def _require(cfg, key):
    if not cfg.get(key):
        raise InputProblem(f"missing required setting {key!r}")
    return cfg[key]


def _out_dir(cfg) -> Path:
    out = Path(cfg["out"])
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise InputProblem(f"cannot create output directory {out}: {exc}") from exc
    return out


def load_dataset(cfg):
    """Manifest -> (dims, metrics, tree, leaf panel, full panel, manifest)."""
    manifest = DatasetManifest.read(_require(cfg, "manifest"))
    dims, metrics, leaf = load_csv(manifest)
    tree = build_tree(dims, leaf.keys)
    full = aggregate_panel(leaf, tree, metrics, allow_missing=True)
    return dims, metrics, tree, leaf, full, manifest


def _monitored(cfg, metrics):
    name = cfg.get("monitored") or metrics.derived[-1][0]
    if name not in metrics.names or name in metrics.fundamentals:
        raise InputProblem(f"monitored metric {name!r} is not a derived metric")
    return name


def load_model(cfg, metrics):
    path = _require(cfg, "model")
    if path == "oracle":
        return ExactModel(metrics)
    try:
        return GatModel.load(path, metrics)
    except OSError as exc:
        raise InputProblem(f"cannot read model {path}: {exc}") from exc


# -- subcommands -------------------------------------------------------

def cmd_simulate(cfg) -> int:
    config = _make(SynthConfig, cfg["synth"])
    ds = generate_dataset(config)
    out = _out_dir(cfg)
    try:
        manifest = write_synth(ds, out, cfg["name"])
    except OSError as exc:
        raise InputProblem(f"cannot write dataset: {exc}") from exc
    print(f"wrote {manifest} ({ds.tree.n_leaves} leaves, T={config.T}, "
          f"{len(ds.labels)} anomalies, g={ds.g})")
    return EXIT_OK


def cmd_train(cfg) -> int:
    _, metrics, tree, _, full, _ = load_dataset(cfg)
    config = _make(GatConfig, cfg["gat"])
    model, log = train(config, tree, full, metrics)
    out = _out_dir(cfg)
    path = Path(cfg.get("model") or out / "model.txt")
    model.save(path)
    log.write_csv(out / "training_log.csv")
    print(f"wrote {path}; {log.epochs} epochs, best validation mse "
          f"{log.val_mse[log.best_epoch]:.6g} at epoch {log.best_epoch}")
    return EXIT_OK


def _root_flags(cfg, full, tree, monitored):
    series = full.series(tree.root, monitored)
    min_history = cfg.get("min_history")
    if min_history is None:
        min_history = max(3, full.T // 5)
    return flag_series(series, cfg.get("order"), min_history)


def cmd_detect(cfg) -> int:
    _, metrics, tree, _, full, _ = load_dataset(cfg)
    monitored = _monitored(cfg, metrics)
    flags, expected = _root_flags(cfg, full, tree, monitored)
    out = _out_dir(cfg)
    series = full.series(tree.root, monitored)
    with open(out / "detect.csv", "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["timestamp", "real", "expected", "anomaly"])
        for t in range(full.T):
            w.writerow([full.time_labels[t], repr(float(series[t])),
                        "" if np.isnan(expected[t]) else repr(float(expected[t])), int(flags[t])])
    hits = [full.time_labels[t] for t in np.flatnonzero(flags)]
    print(f"{len(hits)} anomalous timestamps on {monitored}: {', '.join(hits)}")
    return EXIT_OK if hits else EXIT_NO_ANOMALY


def latest_onset(flags) -> int:
    """First timestamp of the most recent run of consecutive flags.

    A spike enters the forecast history of the following timestamps and can
    flag them too; the onset of the run is the anomaly itself.
    """
    idx = np.flatnonzero(flags)
    t = int(idx[-1])
    while t - 1 >= 0 and flags[t - 1]:
        t -= 1
    return t


def cmd_localize(cfg) -> int:
    dims, metrics, tree, _, full, _ = load_dataset(cfg)
    monitored = _monitored(cfg, metrics)
    model = load_model(cfg, metrics)
    t = cfg.get("t")
    if t is None:
        flags, _ = _root_flags(cfg, full, tree, monitored)
        if not flags.any():
            print("no anomaly detected on the monitored root metric")
            return EXIT_NO_ANOMALY
        t = latest_onset(flags)
    t = int(t)
    if not 0 <= t < full.T:
        raise InputProblem(f"timestamp index {t} outside 0..{full.T - 1}")
    if cfg.get("expected"):
        fp = read_expected_csv(cfg["expected"], dims.dimensions, t, None)
    else:
        fp = forecast_panel(full, t, cfg.get("order"))
    i, m = fp.key_index.get(tree.root), (fp.metrics.index(monitored) if monitored in fp.metrics else None)
    if i is None or m is None:
        raise InputProblem("expected values must include the root and the monitored metric")
    v_root = full.get(t, tree.root, monitored)
    if not detect_3sigma(v_root, fp.expected[i, m], fp.sigma[i, m]):
        print(f"no anomaly on {monitored} at timestamp {full.time_labels[t]}")
        return EXIT_NO_ANOMALY
    out = _out_dir(cfg)
    report = localize(full, fp, model, tree, metrics, monitored, localize_config(cfg))
    report.write(out / "report.jsonl", out / "summary.txt")
    if not cfg.get("expected"):
        write_expected_csv(fp, out / "expected.csv", dims.dimensions, full.time_labels[t])
    sys.stdout.write(report.summary())
    return EXIT_OK


def cmd_evaluate(cfg) -> int:
    _, metrics, tree, leaf, _, manifest = load_dataset(cfg)
    monitored = _monitored(cfg, metrics)
    model = load_model(cfg, metrics)
    labels_path = cfg.get("labels") or Path(manifest.data_path).with_name(
        Path(manifest.data_path).stem + ".labels.csv")
    try:
        labels = read_labels(labels_path)
    except OSError as exc:
        raise InputProblem(f"cannot read labels {labels_path}: {exc}") from exc
    if not labels:
        raise InputProblem(f"{labels_path} holds no labelled anomalies")
    ev = cfg["eval"]
    cases = []
    for i, lab in enumerate(labels):
        case_leaf = isolate_case(leaf, labels, i)
        panel = aggregate_panel(case_leaf, tree, metrics, allow_missing=True)
        truth = lab.keys if ev.get("truth", "labels") == "labels" else None
        cases.append((panel, lab.t, truth))
    rows = evaluate_cases(cases, tree, metrics, monitored, model, localize_config(cfg),
                          cfg.get("order"), ev.get("threshold", 0.8), ev.get("baseline", True),
                          ev.get("timing", True))
    out = _out_dir(cfg)
    write_eval_csv(rows, out / "eval.csv")
    for r in rows:
        if r["case_id"] == "ALL":
            print(f"{r['method']}: P={r['P']:.3f} R={r['R']:.3f} F1={r['F1']:.3f} "
                  f"over {len(labels)} cases")
    return EXIT_OK


COMMANDS = {
    "simulate": cmd_simulate,
    "train": cmd_train,
    "detect": cmd_detect,
    "localize": cmd_localize,
    "evaluate": cmd_evaluate,
}


def make_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="crossrca", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", help="JSON file with settings")
        p.add_argument("--set", action="append", metavar="KEY=VALUE", help="override a setting")
        p.add_argument("--manifest")
        p.add_argument("--model", help="model file, or 'oracle'")
        p.add_argument("--labels")
        p.add_argument("--expected", help="CSV of expected values (localize)")
        p.add_argument("--monitored")
        p.add_argument("--t", type=int, help="timestamp index to analyse")
        p.add_argument("--out")
        p.add_argument("--seed", type=int)
        p.add_argument("--order", type=int, help="AR order")
        p.add_argument("--f-index", type=int, dest="f_index")
        p.add_argument("--epochs", type=int)
        p.add_argument("--t-delta", type=float, dest="t_delta")
        p.add_argument("-v", "--verbose", action="store_true")
    return parser


def main(argv=None) -> int:
    args = make_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = build_config(args)
        return COMMANDS[args.command](cfg)
    except NoAnomalyError as exc:
        print(f"no anomaly: {exc}", file=sys.stderr)
        return EXIT_NO_ANOMALY
    except NoCandidateError as exc:
        print(f"no candidates: {exc}", file=sys.stderr)
        return EXIT_NO_CANDIDATES
    except DivergenceError as exc:
        print(f"training diverged: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    except (InputProblem, RcaError, InsufficientHistoryError, OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT


if __name__ == "__main__":
    sys.exit(main())
