"""Training, real-time diagnosis and evaluation wired end to end."""
from __future__ import annotations

import hashlib
import json
import logging
from collections import Counter
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Optional, Sequence

from .drain import ParseTree
from .embedding import EmbeddingModel, two_phase_train
from .errors import ConfigError, DataError
from .evaluation import EvalReport, evaluate, weighted_prf, write_case_csv, write_report
from .events import (EventSequence, ExtractionConfig, TelemetryIndex, case_sequences, read_events,
                     relabel, write_events)
from .gnn import (DependencyGraph, GnnModel, GnnParams, build_dependency_graph, forward, load_model,
                  save_model, train_gnn)
from .telemetry import (MODALITIES, DeploymentMap, FailureCase, Telemetry, load_deployment, load_labels,
                        load_telemetry, split_by_time)

logger = logging.getLogger(__name__)

MANIFEST_VERSION = 1
TOP_INSTANCES = 5


@dataclass
class RunConfig:
    traces: Optional[str] = None
    logs: Optional[str] = None
    metrics: Optional[str] = None
    deployment: Optional[str] = None
    labels: Optional[str] = None
    dim: int = 100
    target_size: int = 1000
    k_hops: int = 2
    lead_minutes: float = 10.0
    seed: int = 0
    augment: bool = True
    disabled_modalities: list[str] = field(default_factory=list)
    repeat: int = 1
    train_fraction: float = 2 / 3
    embed_epochs: int = 50
    embed_lr: float = 0.1
    embed_batch: int = 32
    gnn_epochs: int = 1000
    gnn_lr: float = 1e-2
    hidden: int = 64
    baseline_window: int = 60
    k_sigma: float = 3.0

    @classmethod
    def from_file(cls, path) -> "RunConfig":
        try:
            with open(path, encoding="utf-8") as fh:
                doc = json.load(fh)
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"{path}: cannot read run config: {exc}") from exc
        unknown = set(doc) - {f.name for f in fields(cls)}
        if unknown:
            raise ConfigError(f"{path}: unknown config keys {sorted(unknown)}")
        return cls(**doc)

    def with_data_dir(self, data_dir) -> "RunConfig":
        """Fill unset telemetry paths with the standard file names in ``data_dir``."""
        d = Path(data_dir)
        for name, fname in (("traces", "traces.jsonl"), ("logs", "logs.jsonl"), ("metrics", "metrics.jsonl"),
                            ("deployment", "deployment.json"), ("labels", "labels.jsonl")):
            if getattr(self, name) is None:
                setattr(self, name, str(d / fname))
        return self

    def validate(self) -> None:
        checks = [
            (self.dim > 0, "dim must be positive"),
            (self.target_size >= 0, "target_size must be >= 0"),
            (0 <= self.k_hops <= 10, "k_hops must be in 0..10"),
            (self.lead_minutes >= 0, "lead_minutes must be >= 0"),
            (self.repeat >= 1, "repeat must be >= 1"),
            (0 < self.train_fraction <= 1, "train_fraction must be in (0, 1]"),
            (self.embed_epochs > 0 and self.gnn_epochs > 0, "epochs must be positive"),
            (self.embed_lr > 0 and self.gnn_lr > 0, "learning rates must be positive"),
            (self.hidden > 0, "hidden must be positive"),
            (self.baseline_window >= 2, "baseline_window must be >= 2"),
            (set(self.disabled_modalities) <= set(MODALITIES), f"modalities must be among {MODALITIES}"),
        ]
        for ok, msg in checks:
            if not ok:
                raise ConfigError(msg)
        if self.deployment is None or not Path(self.deployment).exists():
            raise ConfigError(f"deployment file not found: {self.deployment}")

    @property
    def extraction(self) -> ExtractionConfig:
        return ExtractionConfig(baseline_window=self.baseline_window, k_sigma=self.k_sigma,
                                lead_ms=int(self.lead_minutes * 60_000))

    @property
    def modalities(self) -> list[str]:
        return [m for m in MODALITIES if m not in self.disabled_modalities]

    def hyperparameters(self) -> dict:
        skip = {"traces", "logs", "metrics", "deployment", "labels"}
        return {k: v for k, v in asdict(self).items() if k not in skip}


def _sha256(path) -> Optional[str]:
    if path is None or not Path(path).exists():
        return None
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def load_inputs(cfg: RunConfig) -> tuple[DeploymentMap, Telemetry]:
    deployment = load_deployment(cfg.deployment)
    telemetry = load_telemetry(cfg.traces, cfg.logs, cfg.metrics)
    if cfg.disabled_modalities:
        telemetry = telemetry.without(*cfg.disabled_modalities)
    return deployment, telemetry


@dataclass
class TrainedModels:
    embedding: EmbeddingModel
    gnn: GnnModel
    tree: ParseTree
    graph: DependencyGraph
    manifest: dict

    def save(self, out_dir) -> None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        self.embedding.save(out / "embedding.json")
        save_model(self.gnn, out / "gnn.json")
        self.tree.save(out / "parse_tree.json")
        with open(out / "graph.json", "w", encoding="utf-8") as fh:
            json.dump(self.graph.to_dict(), fh)
        with open(out / "manifest.json", "w", encoding="utf-8") as fh:
            json.dump(self.manifest, fh, indent=2, sort_keys=True)

    @classmethod
    def load(cls, models_dir) -> "TrainedModels":
        d = Path(models_dir)
        try:
            with open(d / "graph.json", encoding="utf-8") as fh:
                graph = DependencyGraph.from_dict(json.load(fh))
            with open(d / "manifest.json", encoding="utf-8") as fh:
                manifest = json.load(fh)
        except OSError as exc:
            raise DataError(f"{d}: missing model files: {exc}") from exc
        return cls(EmbeddingModel.load(d / "embedding.json"), load_model(d / "gnn.json"),
                   ParseTree.load(d / "parse_tree.json"), graph, manifest)


def fit_parse_tree(telemetry: Telemetry, until_ms: float) -> ParseTree:
    """Template tree fitted on the log lines before ``until_ms``, then frozen."""
    tree = ParseTree()
    tree.fit(line.message for line in telemetry.logs if line.timestamp < until_ms)
    return tree.freeze()


def labelled_sequences(index: TelemetryIndex, cases: Sequence[FailureCase], tree: ParseTree,
                       instances: list[str], cfg: RunConfig) -> list[EventSequence]:
    out = []
    for case in cases:
        out += relabel(case_sequences(index, case, tree, instances, cfg.extraction, cfg.modalities), case)
    return out


def _by_case(sequences: Sequence[EventSequence]) -> dict[str, list[EventSequence]]:
    grouped: dict[str, list[EventSequence]] = {}
    for s in sequences:
        grouped.setdefault(s.case_id, []).append(s)
    return grouped


def train(cfg: RunConfig, cache_dir: Optional[Path] = None) -> TrainedModels:
    """Extraction -> event embedding (with augmentation) -> dependency graph -> GNN."""
    cfg.validate()
    deployment, telemetry = load_inputs(cfg)
    if cfg.labels is None or not Path(cfg.labels).exists():
        raise DataError(f"labels file not found: {cfg.labels}")
    cases = load_labels(cfg.labels, deployment)
    n_train = max(1, round(cfg.train_fraction * len(cases)))
    train_cases, test_cases = split_by_time(cases, n_train)
    lead = cfg.extraction.lead_ms
    cutoff = test_cases[0].start - lead if test_cases else float("inf")
    instances = deployment.instances

    cache_key = hashlib.sha256(json.dumps({
        "inputs": {k: _sha256(getattr(cfg, k)) for k in ("traces", "logs", "metrics", "deployment", "labels")},
        "extraction": asdict(cfg.extraction), "modalities": cfg.modalities,
        "train_cases": [c.case_id for c in train_cases],
    }, sort_keys=True).encode()).hexdigest()

    sequences = tree = None
    if cache_dir is not None:
        key_path, events_path, tree_path = (Path(cache_dir) / n for n in
                                            ("events.key", "events.jsonl", "parse_tree.json"))
        if key_path.exists() and events_path.exists() and tree_path.exists() \
                and key_path.read_text().strip() == cache_key:
            logger.info("reusing cached events from %s", events_path)
            tree = ParseTree.load(tree_path)
            sequences = read_events(events_path, train_cases, instances)
    if sequences is None:
        tree = fit_parse_tree(telemetry, cutoff)
        index = TelemetryIndex(telemetry, deployment.group_of)
        sequences = labelled_sequences(index, train_cases, tree, instances, cfg)
        if cache_dir is not None:
            Path(cache_dir).mkdir(parents=True, exist_ok=True)
            write_events(Path(cache_dir) / "events.jsonl", sequences)
            tree.save(Path(cache_dir) / "parse_tree.json")
            (Path(cache_dir) / "events.key").write_text(cache_key + "\n")

    embedding = two_phase_train(sequences, dim=cfg.dim, epochs=cfg.embed_epochs, lr=cfg.embed_lr, seed=cfg.seed,
                                target_size=cfg.target_size, use_augmentation=cfg.augment,
                                batch_size=cfg.embed_batch)
    graph = build_dependency_graph((s for s in telemetry.traces if s.timestamp < cutoff), deployment)
    grouped = _by_case(sequences)
    gnn_cases = [(deployment.group_of[c.root_cause_instance], c.failure_type, grouped[c.case_id])
                 for c in train_cases]
    gnn = train_gnn(gnn_cases, graph, embedding, deployment.groups,
                    params=GnnParams(hidden=cfg.hidden, hops=cfg.k_hops, lr=cfg.gnn_lr, epochs=cfg.gnn_epochs),
                    seed=cfg.seed)
    manifest = {
        "version": MANIFEST_VERSION,
        "seed": cfg.seed,
        "hyperparameters": cfg.hyperparameters(),
        "augment": cfg.augment,
        "dim": cfg.dim,
        "train_cases": len(train_cases),
        "train_cutoff": None if not test_cases else test_cases[0].start,
        "classes": embedding.classes,
        "groups": gnn.groups,
        "types": gnn.types,
        "inputs": {k: _sha256(getattr(cfg, k)) for k in ("traces", "logs", "metrics", "deployment", "labels")},
        "final_losses": {"embedding": float(embedding.loss_history[-1]), "gnn": float(gnn.loss_history[-1])},
    }
    return TrainedModels(embedding, gnn, tree, graph, manifest)


@dataclass
class DiagnosisResult:
    case_id: str
    ranked_groups: list[tuple[str, float]]
    ranked_instances: list[str]
    failure_type: list[tuple[str, float]]
    sequence_lengths: dict[str, int] = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "case_id": self.case_id,
            "ranked_groups": [{"group": g, "p": p} for g, p in self.ranked_groups],
            "ranked_instances": list(self.ranked_instances),
            "failure_type": [{"type": t, "p": p} for t, p in self.failure_type],
        }


def rank_instances(ranked_groups: Sequence[tuple[str, float]], lengths: dict[str, int],
                   deployment: DeploymentMap, top: int = TOP_INSTANCES) -> list[str]:
    """Instances of each group in rank order, longest event sequence first."""
    out = []
    for group, _ in ranked_groups:
        members = [i for i in deployment.instances_in(group) if i in lengths]
        out += sorted(members, key=lambda i: (-lengths[i], i))
        if len(out) >= top:
            break
    return out[:top]


def diagnose_sequences(sequences: Sequence[EventSequence], models: TrainedModels, graph: DependencyGraph,
                       deployment: DeploymentMap, case_id: str = "") -> DiagnosisResult:
    p_s, p_t = forward(graph, sequences, models.gnn, models.embedding)
    ranked_groups = sorted(zip(models.gnn.groups, p_s.tolist()), key=lambda gp: (-gp[1], gp[0]))
    types = sorted(zip(models.gnn.types, p_t.tolist()), key=lambda tp: (-tp[1], tp[0]))
    lengths = {s.instance: len(s) for s in sequences}
    return DiagnosisResult(case_id, ranked_groups, rank_instances(ranked_groups, lengths, deployment), types,
                           lengths)


def diagnose(index: TelemetryIndex, window: tuple[int, int], models: TrainedModels, graph: DependencyGraph,
             deployment: DeploymentMap, cfg: RunConfig, case_id: str = "") -> DiagnosisResult:
    """Extract events for the window, run the GNN, and rank groups, instances
    and failure types."""
    start, end = window
    ext = cfg.extraction
    if not index.has_data(start - ext.lead_ms, end):
        raise DataError("empty diagnosis window")
    case = FailureCase(case_id or f"window-{start}", start, end, "", "")
    modalities = [m for m in cfg.modalities if m not in index.missing]
    sequences = case_sequences(index, case, models.tree, graph.nodes, ext, modalities)
    return diagnose_sequences(sequences, models, graph, deployment, case.case_id)


def graph_for(models: TrainedModels, deployment: DeploymentMap, telemetry: Telemetry) -> DependencyGraph:
    """The trained graph, or a rebuilt one when the deployment's instances changed."""
    if models.graph.nodes == deployment.instances:
        return models.graph
    logger.info("deployment differs from training snapshot; rebuilding dependency graph")
    return build_dependency_graph(telemetry.traces, deployment)


def evaluate_models(cfg: RunConfig, models: TrainedModels, test_cases: Sequence[FailureCase],
                    deployment: DeploymentMap, telemetry: Telemetry) -> tuple[EvalReport, list[dict]]:
    if not test_cases:
        raise DataError("no test cases to evaluate")
    index = TelemetryIndex(telemetry, deployment.group_of)
    graph = graph_for(models, deployment, telemetry)
    ranked, pred, true, rows = [], [], [], []
    for case in test_cases:
        res = diagnose(index, (case.start, case.end), models, graph, deployment, cfg, case.case_id)
        ranked.append((res.ranked_instances, case.root_cause_instance))
        pred.append(res.failure_type[0][0])
        true.append(case.failure_type)
        rank = res.ranked_instances.index(case.root_cause_instance) + 1 \
            if case.root_cause_instance in res.ranked_instances else ""
        rows.append({"case_id": case.case_id, "root_instance": case.root_cause_instance, "rank": rank,
                     "ranked_instances": " ".join(res.ranked_instances), "true_type": case.failure_type,
                     "pred_type": res.failure_type[0][0]})
    return evaluate(ranked, pred, true), rows


def held_out_cases(cfg: RunConfig, models: TrainedModels, deployment: DeploymentMap,
                   test_labels=None) -> list[FailureCase]:
    """Explicit test labels, or the labelled cases after the training cutoff."""
    if test_labels is not None:
        return load_labels(test_labels, deployment)
    cutoff = models.manifest.get("train_cutoff")
    if cutoff is None:
        raise DataError("model was trained on all cases; pass explicit test labels")
    return [c for c in load_labels(cfg.labels, deployment) if c.start >= cutoff]


def write_evaluation(out_dir, report: EvalReport, rows: list[dict]) -> None:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    write_report(out / "report.json", report)
    write_case_csv(out / "cases.csv", rows)


def baselines(test_cases: Sequence[FailureCase], train_types: Sequence[str], n_instances: int) -> dict:
    """Reference points: expected A@3 of a uniformly random ranking and the
    weighted F1 of always predicting the most frequent training type."""
    majority = Counter(train_types).most_common(1)[0][0]
    _, _, f1 = weighted_prf([majority] * len(test_cases), [c.failure_type for c in test_cases])
    return {"random_a_at_3": min(3, n_instances) / n_instances, "majority_type": majority, "majority_f1": f1}


@dataclass
class Experiment:
    models: TrainedModels
    report: EvalReport
    rows: list[dict]
    reference: dict


def run_experiment(cfg: RunConfig, cache_dir: Optional[Path] = None,
                   diagnosis_cfg: Optional[RunConfig] = None) -> Experiment:
    """Train on the earlier cases and evaluate on the held-out rest.

    ``diagnosis_cfg`` lets diagnosis differ from training, e.g. with a
    modality switched off."""
    models = train(cfg, cache_dir)
    deployment, telemetry = load_inputs(cfg)
    test_cases = held_out_cases(cfg, models, deployment)
    report, rows = evaluate_models(diagnosis_cfg or cfg, models, test_cases, deployment, telemetry)
    return Experiment(models, report, rows, reference_baselines(cfg, models, deployment, test_cases))


def reference_baselines(cfg: RunConfig, models: TrainedModels, deployment: DeploymentMap,
                        test_cases: Sequence[FailureCase]) -> Optional[dict]:
    """Baselines fitted on the model's training cases, if the labels are at hand."""
    if cfg.labels is None or not Path(cfg.labels).exists():
        return None
    cases = load_labels(cfg.labels, deployment)
    train_cases, _ = split_by_time(cases, models.manifest.get("train_cases", len(cases)))
    if not train_cases:
        return None
    return baselines(test_cases, [c.failure_type for c in train_cases], len(deployment.instances))
