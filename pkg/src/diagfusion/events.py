"""Anomaly event extraction from traces, logs and metrics, and per-instance
event sequences for failure cases."""
from __future__ import annotations

import json
import logging
import re
from collections import Counter, defaultdict
from dataclasses import dataclass, field, replace
from typing import Iterable, Mapping, Optional

import numpy as np

from .anomaly import DOWN, UP, detect_categorical_surge, sigma_flags
from .drain import ParseTree
from .telemetry import FailureCase, Telemetry

logger = logging.getLogger(__name__)

TRACE, LOG, METRIC = "T", "L", "M"
KIND_ORDER = {TRACE: 0, LOG: 1, METRIC: 2}
NON_ROOT = "non-root-cause"

_WS = re.compile(r"\s+")


def _clean(name: str) -> str:
    return _WS.sub("_", name)


def trace_token(caller_group: str, callee_group: str) -> str:
    return f"T:{_clean(caller_group)}→{_clean(callee_group)}"


def log_token(template_id: int) -> str:
    return f"L:{template_id}"


def metric_token(metric: str, direction: str) -> str:
    return f"M:{_clean(metric)}:{direction}"


@dataclass(frozen=True, slots=True)
class Event:
    """A unified anomaly event.

    ``payload`` is ``(caller, callee)`` for trace events (``instance`` is the
    caller), ``(template_id,)`` for log events and ``(metric, direction)`` for
    metric events. ``token`` is the vocabulary unit used for embedding.
    """

    kind: str
    timestamp: int
    instance: str
    payload: tuple
    token: str

    def sort_key(self):
        return (self.timestamp, KIND_ORDER[self.kind], self.token)

    def instances(self) -> tuple[str, ...]:
        if self.kind == TRACE:
            caller, callee = self.payload
            return (caller,) if caller == callee else (caller, callee)
        return (self.instance,)


@dataclass
class EventSequence:
    instance: str
    case_id: str
    events: list[Event] = field(default_factory=list)
    label: str = NON_ROOT

    @property
    def tokens(self) -> list[str]:
        return [e.token for e in self.events]

    def __len__(self) -> int:
        return len(self.events)


@dataclass(frozen=True)
class ExtractionConfig:
    baseline_window: int = 60
    k_sigma: float = 3.0
    sub_window_ms: int = 30_000
    surge_min_count: int = 5
    surge_min_history: int = 5
    surge_history_windows: int = 10
    dedup_ms: int = 1_000
    lead_ms: int = 600_000


class TelemetryIndex:
    """Column arrays per series for fast windowed extraction."""

    def __init__(self, telemetry: Telemetry, group_of: Optional[Mapping[str, str]] = None):
        self.group_of = dict(group_of or {})
        self.missing = telemetry.missing

        metric_cols = defaultdict(lambda: ([], []))
        for s in telemetry.metrics:
            ts, vals = metric_cols[(s.instance, s.metric_name)]
            ts.append(s.timestamp)
            vals.append(s.value)
        self.metric_series = {
            k: (np.asarray(ts, dtype=np.int64), np.asarray(v, dtype=float))
            for k, (ts, v) in sorted(metric_cols.items())
        }

        trace_cols = defaultdict(lambda: ([], [], []))
        for sp in telemetry.traces:
            ts, rt, st = trace_cols[(sp.caller_instance, sp.callee_instance)]
            ts.append(sp.timestamp)
            rt.append(sp.response_time)
            st.append(sp.status_code)
        self.trace_groups = {
            k: (np.asarray(ts, dtype=np.int64), np.asarray(rt, dtype=float), st)
            for k, (ts, rt, st) in sorted(trace_cols.items())
        }

        log_cols = defaultdict(lambda: ([], []))
        for line in telemetry.logs:
            ts, msgs = log_cols[line.instance]
            ts.append(line.timestamp)
            msgs.append(line.message)
        self.log_streams = {
            k: (np.asarray(ts, dtype=np.int64), msgs) for k, (ts, msgs) in sorted(log_cols.items())
        }

    def group(self, instance: str) -> str:
        return self.group_of.get(instance, instance)

    def has_data(self, lo: int, hi: int) -> bool:
        """Whether any record of any modality falls in [lo, hi]."""
        for cols in (self.metric_series, self.trace_groups, self.log_streams):
            for ts, *_ in cols.values():
                i = np.searchsorted(ts, lo, "left")
                if i < len(ts) and ts[i] <= hi:
                    return True
        return False


def _window(ts: np.ndarray, lo: int, hi: int) -> tuple[int, int]:
    return int(np.searchsorted(ts, lo, "left")), int(np.searchsorted(ts, hi, "right"))


def _flags_in_window(ts, values, lo, hi, cfg: ExtractionConfig) -> tuple[int, np.ndarray]:
    i0, i1 = _window(ts, lo, hi)
    start = max(0, i0 - cfg.baseline_window)
    flags = sigma_flags(values[start:i1], cfg.baseline_window, cfg.k_sigma)
    return i0, flags[i0 - start:]


def _as_index(data, group_of=None) -> TelemetryIndex:
    if isinstance(data, TelemetryIndex):
        return data
    if isinstance(data, Telemetry):
        return TelemetryIndex(data, group_of)
    raise TypeError(f"expected Telemetry or TelemetryIndex, got {type(data).__name__}")


def extract_metric_events(data, window: tuple[int, int], cfg: ExtractionConfig = ExtractionConfig()) -> list[Event]:
    index = _as_index(data)
    lo, hi = window
    events = []
    for (instance, metric), (ts, values) in index.metric_series.items():
        i0, flags = _flags_in_window(ts, values, lo, hi, cfg)
        for j in np.flatnonzero(flags):
            direction = UP if flags[j] > 0 else DOWN
            events.append(Event(METRIC, int(ts[i0 + j]), instance, (metric, direction),
                                metric_token(metric, direction)))
    return events


def extract_trace_events(data, window: tuple[int, int], cfg: ExtractionConfig = ExtractionConfig()) -> list[Event]:
    """One event per anomalous (caller, callee) pair per anomalous sub-window.

    Sub-windows form a grid anchored at the window start. A sub-window is
    anomalous when any response time in it is a k-sigma outlier or some status
    code surges relative to the preceding sub-windows.
    """
    index = _as_index(data)
    lo, hi = window
    sub = cfg.sub_window_ms
    n_win = (hi - lo) // sub + 1
    n_hist = cfg.surge_history_windows
    events = []
    for (caller, callee), (ts, rt, status) in index.trace_groups.items():
        anomalous = set()
        i0, flags = _flags_in_window(ts, rt, lo, hi, cfg)
        for j in np.flatnonzero(flags):
            anomalous.add(int((ts[i0 + j] - lo) // sub))

        h0, h1 = _window(ts, lo - n_hist * sub, hi)
        if h1 > h0:
            counts: dict[int, Counter] = defaultdict(Counter)
            for k in range(h0, h1):
                counts[int((ts[k] - lo) // sub)][status[k]] += 1
            # history windows only count once the pair has started reporting
            first_win = (int(ts[0]) - lo) // sub
            for w in range(n_win):
                if w in anomalous or not counts.get(w):
                    continue
                history = [counts.get(m, {}) for m in range(max(w - n_hist, first_win), w)]
                if detect_categorical_surge(counts[w], history, cfg.k_sigma,
                                            cfg.surge_min_count, cfg.surge_min_history):
                    anomalous.add(w)

        token = trace_token(index.group(caller), index.group(callee))
        for w in sorted(anomalous):
            events.append(Event(TRACE, lo + w * sub, caller, (caller, callee), token))
    return events


def extract_log_events(data, window: tuple[int, int], tree: ParseTree,
                       cfg: ExtractionConfig = ExtractionConfig()) -> list[Event]:
    """One event per log line; a line repeating its instance's previous
    template within ``dedup_ms`` of the last emitted event is dropped."""
    index = _as_index(data)
    lo, hi = window
    events = []
    for instance, (ts, msgs) in index.log_streams.items():
        i0, i1 = _window(ts, lo, hi)
        prev_tid, last_ts = None, None
        for k in range(i0, i1):
            tid = tree.lookup(msgs[k])
            t = int(ts[k])
            if tid == prev_tid and t - last_ts <= cfg.dedup_ms:
                continue
            events.append(Event(LOG, t, instance, (tid,), log_token(tid)))
            prev_tid, last_ts = tid, t
    return events


def extract_events(data, window: tuple[int, int], tree: ParseTree,
                   cfg: ExtractionConfig = ExtractionConfig(),
                   modalities: Iterable[str] = ("trace", "log", "metric")) -> list[Event]:
    modalities = set(modalities)
    events = []
    if "trace" in modalities:
        events += extract_trace_events(data, window, cfg)
    if "log" in modalities:
        events += extract_log_events(data, window, tree, cfg)
    if "metric" in modalities:
        events += extract_metric_events(data, window, cfg)
    return events


def build_event_sequences(events: Iterable[Event], case: FailureCase, instances: Iterable[str],
                          lead_ms: int = ExtractionConfig.lead_ms) -> list[EventSequence]:
    """Group events by instance (trace events go to caller and callee) and
    order each group by (timestamp, kind, token)."""
    lo, hi = case.start - lead_ms, case.end
    seqs = {i: EventSequence(i, case.case_id) for i in instances}
    for e in events:
        if not lo <= e.timestamp <= hi:
            continue
        for inst in e.instances():
            if inst in seqs:
                seqs[inst].events.append(e)
    for s in seqs.values():
        s.events.sort(key=Event.sort_key)
    return list(seqs.values())


def relabel(sequences: list[EventSequence], case: FailureCase) -> list[EventSequence]:
    if not any(s.instance == case.root_cause_instance for s in sequences):
        raise ValueError(f"case {case.case_id}: root instance {case.root_cause_instance!r} has no sequence")
    return [
        replace(s, label=case.failure_type if s.instance == case.root_cause_instance else NON_ROOT)
        for s in sequences
    ]


def case_sequences(index: TelemetryIndex, case: FailureCase, tree: ParseTree, instances: list[str],
                   cfg: ExtractionConfig = ExtractionConfig(),
                   modalities: Iterable[str] = ("trace", "log", "metric")) -> list[EventSequence]:
    """Extraction plus grouping for one case window (unlabelled)."""
    window = (case.start - cfg.lead_ms, case.end)
    events = extract_events(index, window, tree, cfg, modalities)
    return build_event_sequences(events, case, instances, cfg.lead_ms)


# events.jsonl stage cache

def _payload(e: Event) -> dict:
    if e.kind == TRACE:
        return {"caller": e.payload[0], "callee": e.payload[1], "token": e.token}
    if e.kind == LOG:
        return {"template_id": e.payload[0], "token": e.token}
    return {"metric": e.payload[0], "direction": e.payload[1], "token": e.token}


def _event_from(rec: dict) -> Event:
    p = rec["payload"]
    kind = rec["kind"]
    if kind == TRACE:
        payload = (p["caller"], p["callee"])
    elif kind == LOG:
        payload = (p["template_id"],)
    elif kind == METRIC:
        payload = (p["metric"], p["direction"])
    else:
        raise ValueError(f"unknown event kind {kind!r}")
    # a trace event's own instance is its caller, whichever sequence holds it
    instance = payload[0] if kind == TRACE else rec["instance"]
    return Event(kind, rec["ts"], instance, payload, p["token"])


def write_events(path, sequences: Iterable[EventSequence]) -> None:
    """One line per (sequence, event) membership."""
    with open(path, "w", encoding="utf-8") as fh:
        for s in sequences:
            for e in s.events:
                fh.write(json.dumps({
                    "ts": e.timestamp, "kind": e.kind, "instance": s.instance, "payload": _payload(e),
                    "case_id": s.case_id, "label": s.label,
                }, sort_keys=True) + "\n")


def read_events(path, cases: list[FailureCase], instances: list[str]) -> list[EventSequence]:
    """Rebuild labelled sequences (including empty ones) from an events dump."""
    by_key: dict[tuple[str, str], list[Event]] = defaultdict(list)
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            if line.strip():
                rec = json.loads(line)
                ev = _event_from(rec)
                by_key[(rec["case_id"], rec["instance"])].append(ev)
    out = []
    for case in cases:
        seqs = [EventSequence(i, case.case_id, sorted(by_key.get((case.case_id, i), []), key=Event.sort_key))
                for i in instances]
        out += relabel(seqs, case)
    return out
