"""Command-line front end: simulate, train, diagnose, evaluate.

Exit codes: 0 ok, 2 configuration error, 3 data error, 4 numeric failure.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import fields
from pathlib import Path
from typing import Optional, Sequence

from .errors import ConfigError, DataError, ModelFormatError, TrainingDivergence
from .pipeline import (RunConfig, TrainedModels, diagnose, evaluate_models, graph_for, held_out_cases, load_inputs,
                       reference_baselines, train, write_evaluation)
from .events import TelemetryIndex
from .simulator import SimConfig, simulate
from .telemetry import MODALITIES

logger = logging.getLogger("diagfusion")

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC = 0, 2, 3, 4

# flag destination -> RunConfig field
_FLAG_FIELDS = {
    "traces": "traces", "logs": "logs", "metrics": "metrics", "deployment": "deployment", "labels": "labels",
    "dim": "dim", "target_size": "target_size", "k_hops": "k_hops", "lead_minutes": "lead_minutes",
    "seed": "seed", "repeat": "repeat",
}


def _add_run_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="JSON file with RunConfig fields; flags override it")
    p.add_argument("--traces")
    p.add_argument("--logs")
    p.add_argument("--metrics")
    p.add_argument("--deployment")
    p.add_argument("--labels")
    p.add_argument("--dim", type=int)
    p.add_argument("--target-size", type=int)
    p.add_argument("--k-hops", type=int)
    p.add_argument("--lead-minutes", type=float)
    p.add_argument("--seed", type=int)
    p.add_argument("--no-augment", action="store_true", default=None)
    p.add_argument("--disable-modality", action="append", choices=MODALITIES, default=None)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="diagfusion", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="count", default=0)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("simulate", help="generate synthetic telemetry with injected failures")
    p.add_argument("config_path", nargs="?", help="simulator JSON config (defaults if omitted)")
    p.add_argument("out_dir")
    p.add_argument("--seed", type=int, help="override the config seed")

    p = sub.add_parser("train", help="train embedding and GNN models")
    p.add_argument("data_dir")
    p.add_argument("out_dir")
    _add_run_flags(p)
    p.add_argument("--repeat", type=int, help="train N models with seeds seed..seed+N-1")

    p = sub.add_parser("diagnose", help="diagnose one time window")
    p.add_argument("data_dir")
    p.add_argument("models_dir")
    p.add_argument("window_start", type=int, help="epoch milliseconds")
    p.add_argument("window_end", type=int, help="epoch milliseconds")
    p.add_argument("-o", "--output", help="result JSON path (default: <models_dir>/diagnosis-<start>.json)")
    _add_run_flags(p)

    p = sub.add_parser("evaluate", help="evaluate models on labelled test cases")
    p.add_argument("data_dir")
    p.add_argument("models_dir")
    p.add_argument("test_labels", nargs="?", help="labels JSONL (default: cases after the training cutoff)")
    p.add_argument("-o", "--output", help="report directory (default: <models_dir>/eval)")
    _add_run_flags(p)
    return parser


def read_config_file(path) -> dict:
    try:
        with open(path, encoding="utf-8") as fh:
            doc = json.load(fh)
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigError(f"{path}: cannot read run config: {exc}") from exc
    if not isinstance(doc, dict):
        raise ConfigError(f"{path}: run config must be a JSON object")
    unknown = set(doc) - {f.name for f in fields(RunConfig)}
    if unknown:
        raise ConfigError(f"{path}: unknown config keys {sorted(unknown)}")
    return doc


def run_config(args: argparse.Namespace, base: Optional[dict] = None) -> RunConfig:
    """Defaults, then ``base`` (e.g. a model manifest), then --config, then flags."""
    doc = dict(base or {})
    if getattr(args, "config", None):
        doc.update(read_config_file(args.config))
    for dest, name in _FLAG_FIELDS.items():
        value = getattr(args, dest, None)
        if value is not None:
            doc[name] = value
    if getattr(args, "no_augment", None):
        doc["augment"] = False
    if getattr(args, "disable_modality", None):
        doc["disabled_modalities"] = sorted(set(doc.get("disabled_modalities", [])) | set(args.disable_modality))
    known = {f.name for f in fields(RunConfig)}
    try:
        cfg = RunConfig(**{k: v for k, v in doc.items() if k in known})
    except TypeError as exc:
        raise ConfigError(f"bad run config: {exc}") from exc
    return cfg.with_data_dir(args.data_dir)


def _manifest_defaults(models_dir) -> dict:
    path = Path(models_dir) / "manifest.json"
    try:
        with open(path, encoding="utf-8") as fh:
            return dict(json.load(fh).get("hyperparameters", {}))
    except OSError as exc:
        raise DataError(f"{path}: cannot read model manifest: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise ModelFormatError(f"{path}: corrupt manifest: {exc}") from exc


def cmd_simulate(args: argparse.Namespace) -> int:
    config = SimConfig.load(args.config_path) if args.config_path else SimConfig()
    if args.seed is not None:
        config.seed = args.seed
    written = simulate(config, args.out_dir)
    for path in written:
        print(path)
    return EXIT_OK


def cmd_train(args: argparse.Namespace) -> int:
    cfg = run_config(args)
    cfg.validate()
    out = Path(args.out_dir)
    base_seed = cfg.seed
    for rep in range(cfg.repeat):
        cfg.seed = base_seed + rep
        target = out if cfg.repeat == 1 else out / f"rep-{rep}"
        models = train(cfg, cache_dir=out / "cache")
        models.save(target)
        losses = models.manifest["final_losses"]
        print(f"{target}: embedding loss {losses['embedding']:.4f}, gnn loss {losses['gnn']:.4f}")
    return EXIT_OK


def cmd_diagnose(args: argparse.Namespace) -> int:
    cfg = run_config(args, _manifest_defaults(args.models_dir))
    cfg.validate()
    if args.window_end < args.window_start:
        raise ConfigError("window_end precedes window_start")
    models = TrainedModels.load(args.models_dir)
    deployment, telemetry = load_inputs(cfg)
    index = TelemetryIndex(telemetry, deployment.group_of)
    graph = graph_for(models, deployment, telemetry)
    result = diagnose(index, (args.window_start, args.window_end), models, graph, deployment, cfg)
    text = json.dumps(result.to_dict(), indent=2)
    print(text)
    out = Path(args.output) if args.output else Path(args.models_dir) / f"diagnosis-{args.window_start}.json"
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_text(text + "\n", encoding="utf-8")
    return EXIT_OK


def cmd_evaluate(args: argparse.Namespace) -> int:
    cfg = run_config(args, _manifest_defaults(args.models_dir))
    cfg.validate()
    models = TrainedModels.load(args.models_dir)
    deployment, telemetry = load_inputs(cfg)
    test_cases = held_out_cases(cfg, models, deployment, args.test_labels)
    report, rows = evaluate_models(cfg, models, test_cases, deployment, telemetry)
    out = Path(args.output) if args.output else Path(args.models_dir) / "eval"
    write_evaluation(out, report, rows)

    a = " ".join(f"A@{k}={v:.3f}" for k, v in report.a_at_k.items())
    print(f"{report.n_cases} cases  {a}  Avg@5={report.avg_at_5:.3f}")
    print(f"type P={report.precision:.3f} R={report.recall:.3f} F1={report.f1:.3f}")
    ref = reference_baselines(cfg, models, deployment, test_cases)
    if ref is not None:
        print(f"baselines: random A@3={ref['random_a_at_3']:.3f}  "
              f"majority ({ref['majority_type']}) F1={ref['majority_f1']:.3f}")
    print(f"report written to {out}")
    return EXIT_OK


COMMANDS = {"simulate": cmd_simulate, "train": cmd_train, "diagnose": cmd_diagnose, "evaluate": cmd_evaluate}


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.WARNING - 10 * min(args.verbose, 2),
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return COMMANDS[args.command](args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (DataError, ModelFormatError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except TrainingDivergence as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
