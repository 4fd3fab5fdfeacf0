"""Telemetry records, deployment and label data, and their JSON-lines loaders."""
from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Optional, TypeVar

from .errors import DataError

logger = logging.getLogger(__name__)

LOG_LEVELS = ("INFO", "WARN", "DEBUG", "ERROR")
MODALITIES = ("trace", "log", "metric")

# Fraction of skipped lines above which a file is rejected.
MAX_SKIP_FRACTION = 0.01


@dataclass(frozen=True, slots=True)
class TraceSpan:
    timestamp: int
    caller_instance: str
    callee_instance: str
    response_time: float
    status_code: str


@dataclass(frozen=True, slots=True)
class LogLine:
    timestamp: int
    instance: str
    level: str
    message: str


@dataclass(frozen=True, slots=True)
class MetricSample:
    timestamp: int
    instance: str
    metric_name: str
    value: float


@dataclass(frozen=True)
class DeploymentMap:
    host_of: dict[str, str]
    group_of: dict[str, str]

    @property
    def instances(self) -> list[str]:
        return sorted(self.group_of)

    @property
    def groups(self) -> list[str]:
        return sorted(set(self.group_of.values()))

    def instances_in(self, group: str) -> list[str]:
        return sorted(i for i, g in self.group_of.items() if g == group)


@dataclass(frozen=True, slots=True)
class FailureCase:
    case_id: str
    start: int
    end: int
    root_cause_instance: str
    failure_type: str


@dataclass
class Telemetry:
    """The three telemetry streams plus which modalities are missing."""

    traces: list[TraceSpan] = field(default_factory=list)
    logs: list[LogLine] = field(default_factory=list)
    metrics: list[MetricSample] = field(default_factory=list)
    missing: frozenset[str] = frozenset()
    skipped: dict[str, int] = field(default_factory=dict)

    def __post_init__(self):
        if not self.missing:
            self.missing = frozenset(
                m for m, recs in zip(MODALITIES, (self.traces, self.logs, self.metrics)) if not recs
            )

    def without(self, *modalities: str) -> "Telemetry":
        """Copy with the given modalities dropped (treated as missing)."""
        unknown = set(modalities) - set(MODALITIES)
        if unknown:
            raise ValueError(f"unknown modalities {sorted(unknown)}")
        return Telemetry(
            traces=[] if "trace" in modalities else self.traces,
            logs=[] if "log" in modalities else self.logs,
            metrics=[] if "metric" in modalities else self.metrics,
            missing=self.missing | frozenset(modalities),
        )


class _BadField(ValueError):
    def __init__(self, field_name: str, reason: str):
        super().__init__(f"field {field_name!r}: {reason}")
        self.field_name = field_name


def _get(rec: dict, key: str, typ: type):
    if key not in rec:
        raise _BadField(key, "missing")
    value = rec[key]
    if typ is int:
        if isinstance(value, bool) or not isinstance(value, int):
            raise _BadField(key, f"expected integer, got {value!r}")
    elif typ is float:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise _BadField(key, f"expected number, got {value!r}")
        value = float(value)
    elif not isinstance(value, typ):
        raise _BadField(key, f"expected {typ.__name__}, got {value!r}")
    return value


def _parse_span(rec: dict) -> TraceSpan:
    caller = _get(rec, "caller", str)
    callee = _get(rec, "callee", str)
    if not caller:
        raise _BadField("caller", "empty instance id")
    if not callee:
        raise _BadField("callee", "empty instance id")
    rt = _get(rec, "rt_ms", float)
    if rt < 0:
        raise _BadField("rt_ms", f"negative response time {rt}")
    return TraceSpan(_get(rec, "ts", int), caller, callee, rt, _get(rec, "status", str))


def _parse_log(rec: dict) -> LogLine:
    level = _get(rec, "level", str)
    if level not in LOG_LEVELS:
        raise _BadField("level", f"unknown level {level!r}")
    return LogLine(_get(rec, "ts", int), _get(rec, "instance", str), level, _get(rec, "msg", str))


def _parse_metric(rec: dict) -> MetricSample:
    return MetricSample(
        _get(rec, "ts", int), _get(rec, "instance", str), _get(rec, "metric", str),
        _get(rec, "value", float),
    )


T = TypeVar("T")


def read_jsonl(path: Path, parse: Callable[[dict], T]) -> tuple[list[T], int]:
    """Parse a JSON-lines file; returns (records sorted by timestamp, skipped count).

    Bad lines are skipped with a warning. If more than 1% of the file's lines
    are bad, a DataError naming the first offending line is raised instead.
    """
    records: list[T] = []
    problems: list[str] = []
    n_lines = 0
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            n_lines += 1
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
                if not isinstance(rec, dict):
                    raise _BadField("<record>", "not a JSON object")
                records.append(parse(rec))
            except _BadField as exc:
                problems.append(f"{path}:{lineno}: {exc}")
            except json.JSONDecodeError as exc:
                problems.append(f"{path}:{lineno}: field '<json>': {exc.msg}")
    if problems:
        if len(problems) > MAX_SKIP_FRACTION * n_lines:
            raise DataError(
                f"{len(problems)} of {n_lines} lines malformed (limit {MAX_SKIP_FRACTION:.0%}); "
                f"first: {problems[0]}"
            )
        for msg in problems:
            logger.warning("skipped line %s", msg)
    records.sort(key=lambda r: r.timestamp)
    return records, len(problems)


def load_telemetry(
    trace_path: Optional[Path | str],
    log_path: Optional[Path | str],
    metric_path: Optional[Path | str],
) -> Telemetry:
    """Load the three telemetry streams. A ``None`` or non-existent path marks
    that modality as missing."""
    out: dict[str, list] = {}
    skipped: dict[str, int] = {}
    missing = set()
    for modality, path, parse in (
        ("trace", trace_path, _parse_span),
        ("log", log_path, _parse_log),
        ("metric", metric_path, _parse_metric),
    ):
        if path is None or not Path(path).exists():
            out[modality] = []
            missing.add(modality)
            continue
        out[modality], skipped[modality] = read_jsonl(Path(path), parse)
        if not out[modality]:
            missing.add(modality)
    return Telemetry(out["trace"], out["log"], out["metric"], frozenset(missing), skipped)


def load_deployment(path: Path | str) -> DeploymentMap:
    try:
        with open(path, encoding="utf-8") as fh:
            doc = json.load(fh)
        entries = doc["instances"]
    except (OSError, json.JSONDecodeError, KeyError, TypeError) as exc:
        raise DataError(f"{path}: cannot read deployment: {exc}") from exc
    host_of: dict[str, str] = {}
    group_of: dict[str, str] = {}
    no_group = []
    for entry in entries:
        iid = entry.get("id")
        if not isinstance(iid, str) or not iid:
            raise DataError(f"{path}: instance entry without id: {entry!r}")
        if iid in group_of or iid in no_group:
            raise DataError(f"{path}: duplicate instance {iid!r}")
        group = entry.get("group")
        if not isinstance(group, str) or not group:
            no_group.append(iid)
            continue
        group_of[iid] = group
        if entry.get("host"):
            host_of[iid] = entry["host"]
    if no_group:
        raise DataError(f"{path}: instances without group: {', '.join(no_group)}")
    return DeploymentMap(host_of=host_of, group_of=group_of)


def _parse_case(rec: dict) -> FailureCase:
    return FailureCase(
        _get(rec, "case_id", str), _get(rec, "start", int), _get(rec, "end", int),
        _get(rec, "root_instance", str), _get(rec, "failure_type", str),
    )


def load_labels(path: Path | str, deployment: DeploymentMap) -> list[FailureCase]:
    cases = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                case = _parse_case(json.loads(line))
            except (_BadField, json.JSONDecodeError) as exc:
                raise DataError(f"{path}:{lineno}: {exc}") from exc
            if case.start >= case.end:
                raise DataError(f"{path}:{lineno}: case {case.case_id}: start {case.start} >= end {case.end}")
            if case.root_cause_instance not in deployment.group_of:
                raise DataError(
                    f"{path}:{lineno}: case {case.case_id}: unknown root instance {case.root_cause_instance!r}"
                )
            cases.append(case)
    cases.sort(key=lambda c: c.start)
    for a, b in zip(cases, cases[1:]):
        if b.start < a.end:
            logger.warning("cases %s and %s overlap", a.case_id, b.case_id)
    return cases


def write_labels(path: Path | str, cases: Iterable[FailureCase]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for c in cases:
            fh.write(json.dumps({
                "case_id": c.case_id, "start": c.start, "end": c.end,
                "root_instance": c.root_cause_instance, "failure_type": c.failure_type,
            }) + "\n")


def split_by_time(cases: list[FailureCase], n_train: int) -> tuple[list[FailureCase], list[FailureCase]]:
    """Chronological split: the earliest ``n_train`` cases train, the rest test."""
    ordered = sorted(cases, key=lambda c: c.start)
    return ordered[:n_train], ordered[n_train:]
