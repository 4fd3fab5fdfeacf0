"""Deterministic synthetic microservice telemetry with injected failures.

Config is a single JSON document; see ``SimConfig`` and docs/simconfig.md.
"""
from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Optional

import numpy as np

from .errors import ConfigError
from .telemetry import FailureCase, write_labels

logger = logging.getLogger(__name__)

STATUS_CODES = ("200", "500")
LEVELS = ("INFO", "WARN", "DEBUG", "ERROR")
DEFAULT_START_MS = 1_700_000_100_000  # multiple of 30 s


@dataclass
class GroupSpec:
    name: str
    instances: int = 2


@dataclass
class EdgeSpec:
    caller: str
    callee: str
    rate: float = 0.25        # spans per second per caller instance
    rt_mean: float = 50.0     # ms
    rt_std: float = 5.0
    error_rate: float = 0.002


@dataclass
class MetricSpec:
    name: str
    mean: float
    std: float


@dataclass
class MetricShift:
    metric: str
    direction: str            # "up" | "down"
    magnitude: float          # in baseline std units


@dataclass
class LogBurst:
    template: str             # "{group}" and "{p}" placeholders
    rate: float               # lines per second
    level: str = "ERROR"


@dataclass
class FailureSignature:
    metrics: list[MetricShift] = field(default_factory=list)
    logs: list[LogBurst] = field(default_factory=list)
    rt_multiplier: float = 1.0
    status_flip: float = 0.0
    status: str = "500"

    def has_effect(self) -> bool:
        return bool(self.metrics or self.logs or self.rt_multiplier != 1.0 or self.status_flip > 0)


@dataclass
class CaseSpec:
    count: int = 300
    mix: dict[str, float] = field(default_factory=dict)   # empty -> uniform
    duration_s: int = 240
    slot_minutes: float = 36.0
    warmup_minutes: float = 40.0
    jitter_s: int = 60


def _default_groups():
    return [GroupSpec(g, 2) for g in ("frontend", "auth", "catalog", "billing", "storage")]


def _default_edges():
    return [EdgeSpec("frontend", "auth"), EdgeSpec("frontend", "catalog"), EdgeSpec("auth", "billing"),
            EdgeSpec("catalog", "storage"), EdgeSpec("billing", "storage")]


def _default_metrics():
    return [MetricSpec("cpu_util", 40.0, 3.0), MetricSpec("mem_util", 55.0, 2.0),
            MetricSpec("net_out", 800.0, 40.0)]


def _default_failures():
    return {
        "memory_up": FailureSignature(metrics=[MetricShift("mem_util", "up", 6.0)], rt_multiplier=3.0),
        "memory_free": FailureSignature(metrics=[MetricShift("mem_util", "down", 6.0)], rt_multiplier=2.0),
        "login_error": FailureSignature(logs=[LogBurst(
            "[{group}] uuid: {p} information has expired, mobile phone login is invalid", 0.5)]),
        "access_denied": FailureSignature(
            logs=[LogBurst("[{group}] access denied for user {p} on protected resource", 0.5)],
            status_flip=0.9),
        "file_not_found": FailureSignature(
            logs=[LogBurst("[{group}] file not found: /data/{p}.bin while loading assets", 0.5)],
            metrics=[MetricShift("net_out", "down", 6.0)]),
    }


def _default_log_templates():
    return [
        "[{group}] request handled in {p} ms",
        "[{group}] cache hit ratio {p} percent",
        "[{group}] connection pool size {p} active",
        "[{group}] scheduled job {p} completed successfully",
    ]


@dataclass
class SimConfig:
    seed: int = 42
    start_ms: int = DEFAULT_START_MS
    groups: list[GroupSpec] = field(default_factory=_default_groups)
    n_hosts: int = 5
    hosts: dict[str, str] = field(default_factory=dict)   # instance -> host; empty -> round robin
    topology: list[EdgeSpec] = field(default_factory=_default_edges)
    metrics: list[MetricSpec] = field(default_factory=_default_metrics)
    metric_interval_ms: int = 30_000
    log_templates: list[str] = field(default_factory=_default_log_templates)
    log_rate_per_min: float = 1.0
    failures: dict[str, FailureSignature] = field(default_factory=_default_failures)
    cases: CaseSpec = field(default_factory=CaseSpec)
    damping: float = 0.5
    horizon_minutes: float = 0.0

    # derived views

    @property
    def instances(self) -> list[str]:
        return [f"{g.name}-{k}" for g in self.groups for k in range(g.instances)]

    @property
    def group_of(self) -> dict[str, str]:
        return {f"{g.name}-{k}": g.name for g in self.groups for k in range(g.instances)}

    def host_of(self) -> dict[str, str]:
        if self.hosts:
            return dict(self.hosts)
        return {inst: f"host-{i % self.n_hosts}" for i, inst in enumerate(self.instances)}

    def horizon(self) -> tuple[int, int]:
        c = self.cases
        span = c.warmup_minutes * 60_000 + c.count * c.slot_minutes * 60_000
        span = max(span, self.horizon_minutes * 60_000)
        return self.start_ms, self.start_ms + int(span)

    def validate(self) -> None:
        names = [g.name for g in self.groups]
        if not names or len(set(names)) != len(names):
            raise ConfigError("groups must be non-empty and unique")
        if any(g.instances < 1 for g in self.groups):
            raise ConfigError("every group needs at least one instance")
        for e in self.topology:
            for g in (e.caller, e.callee):
                if g not in names:
                    raise ConfigError(f"topology references unknown group {g!r}")
            if e.caller == e.callee:
                raise ConfigError(f"topology self loop on {e.caller!r}")
            if e.rate < 0 or e.rt_std < 0:
                raise ConfigError(f"negative rate or rt_std on edge {e.caller}->{e.callee}")
        if _has_cycle(names, [(e.caller, e.callee) for e in self.topology]):
            raise ConfigError("topology has a cycle at group level")
        metric_names = {m.name for m in self.metrics}
        for name, sig in self.failures.items():
            if not sig.has_effect():
                raise ConfigError(f"failure type {name!r} has no effect")
            for s in sig.metrics:
                if s.metric not in metric_names:
                    raise ConfigError(f"failure type {name!r} shifts unknown metric {s.metric!r}")
                if s.direction not in ("up", "down"):
                    raise ConfigError(f"failure type {name!r}: direction must be up/down")
            for b in sig.logs:
                if b.level not in LEVELS or b.rate <= 0:
                    raise ConfigError(f"failure type {name!r}: bad log burst {b}")
        unknown = set(self.cases.mix) - set(self.failures)
        if unknown:
            raise ConfigError(f"case mix references unknown failure types {sorted(unknown)}")
        if self.cases.count > 0 and len(self.failures) < 1:
            raise ConfigError("cases requested but no failure types defined")
        if self.cases.duration_s * 1000 + self.cases.jitter_s * 1000 >= self.cases.slot_minutes * 60_000:
            raise ConfigError("case duration plus jitter must fit in a slot (windows may not overlap)")
        if self.metric_interval_ms <= 0:
            raise ConfigError("metric_interval_ms must be positive")

    # JSON

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, doc: dict) -> "SimConfig":
        try:
            kw = dict(doc)
            unknown = set(kw) - {f.name for f in fields(cls)}
            if unknown:
                raise ConfigError(f"unknown config keys {sorted(unknown)}")
            if "groups" in kw:
                kw["groups"] = [GroupSpec(**g) for g in kw["groups"]]
            if "topology" in kw:
                kw["topology"] = [EdgeSpec(**e) for e in kw["topology"]]
            if "metrics" in kw:
                kw["metrics"] = [MetricSpec(**m) for m in kw["metrics"]]
            if "failures" in kw:
                kw["failures"] = {
                    name: FailureSignature(
                        metrics=[MetricShift(**m) for m in sig.get("metrics", [])],
                        logs=[LogBurst(**b) for b in sig.get("logs", [])],
                        **{k: v for k, v in sig.items() if k not in ("metrics", "logs")},
                    )
                    for name, sig in kw["failures"].items()
                }
            if "cases" in kw:
                kw["cases"] = CaseSpec(**kw["cases"])
            cfg = cls(**kw)
        except (TypeError, AttributeError) as exc:
            raise ConfigError(f"invalid simulator config: {exc}") from exc
        cfg.validate()
        return cfg

    @classmethod
    def load(cls, path) -> "SimConfig":
        try:
            with open(path, encoding="utf-8") as fh:
                doc = json.load(fh)
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"{path}: cannot read simulator config: {exc}") from exc
        return cls.from_dict(doc)


def imbalanced(config: SimConfig, rare: str, share: float = 0.05) -> SimConfig:
    """Copy of ``config`` whose case mix gives ``rare`` the given share and
    splits the rest evenly over the other failure types."""
    if rare not in config.failures:
        raise ConfigError(f"unknown failure type {rare!r}")
    if not 0 < share < 1:
        raise ConfigError("share must be in (0, 1)")
    out = SimConfig.from_dict(json.loads(json.dumps(config.to_dict())))
    rest = (1 - share) / (len(out.failures) - 1)
    out.cases.mix = {t: share if t == rare else rest for t in out.failures}
    return out


def _has_cycle(nodes, edges) -> bool:
    succ = {n: [] for n in nodes}
    for a, b in edges:
        succ[a].append(b)
    state = dict.fromkeys(nodes, 0)

    def visit(n) -> bool:
        state[n] = 1
        for m in succ[n]:
            if state[m] == 1 or (state[m] == 0 and visit(m)):
                return True
        state[n] = 2
        return False

    return any(state[n] == 0 and visit(n) for n in nodes)


@dataclass
class SimTelemetry:
    """Columnar telemetry; instance columns index into ``instances``."""

    instances: list[str]
    metric_names: list[str]
    metric_ts: np.ndarray           # (n_t,)
    metric_values: np.ndarray       # (n_inst, n_metric, n_t)
    span_ts: np.ndarray
    span_caller: np.ndarray
    span_callee: np.ndarray
    span_rt: np.ndarray
    span_status: np.ndarray         # index into STATUS_CODES (or extra codes)
    log_ts: np.ndarray
    log_inst: np.ndarray
    log_level: np.ndarray
    log_msg: list[str]
    status_codes: list[str] = field(default_factory=lambda: list(STATUS_CODES))

    def copy(self) -> "SimTelemetry":
        return SimTelemetry(
            list(self.instances), list(self.metric_names), self.metric_ts.copy(), self.metric_values.copy(),
            self.span_ts.copy(), self.span_caller.copy(), self.span_callee.copy(), self.span_rt.copy(),
            self.span_status.copy(), self.log_ts.copy(), self.log_inst.copy(), self.log_level.copy(),
            list(self.log_msg), list(self.status_codes),
        )


def _instance_edges(config: SimConfig) -> list[tuple[int, int, EdgeSpec]]:
    """Sticky routing: caller instance k calls callee instance k mod n."""
    idx = {inst: i for i, inst in enumerate(config.instances)}
    by_group = {g.name: [f"{g.name}-{k}" for k in range(g.instances)] for g in config.groups}
    out = []
    for e in config.topology:
        callees = by_group[e.callee]
        for k, caller in enumerate(by_group[e.caller]):
            out.append((idx[caller], idx[callees[k % len(callees)]], e))
    return out


def _fill(template: str, group: str, rng: np.random.Generator) -> str:
    return template.format(group=group, p=f"{int(rng.integers(0, 1 << 28)):07x}")


def generate_baseline(config: SimConfig) -> SimTelemetry:
    config.validate()
    seeds = np.random.SeedSequence(config.seed).spawn(4)
    rng_m, rng_s, rng_l = (np.random.default_rng(s) for s in seeds[:3])
    t0, t1 = config.horizon()
    instances = config.instances
    groups = config.group_of

    metric_ts = np.arange(t0, t1, config.metric_interval_ms, dtype=np.int64)
    means = np.array([m.mean for m in config.metrics])
    stds = np.array([m.std for m in config.metrics])
    noise = rng_m.standard_normal((len(instances), len(config.metrics), len(metric_ts)))
    metric_values = means[None, :, None] + stds[None, :, None] * noise

    cols = {k: [] for k in ("ts", "caller", "callee", "rt", "status")}
    for caller, callee, e in _instance_edges(config):
        if e.rate <= 0:
            continue
        step = 1000.0 / e.rate
        base = np.arange(t0, t1 - step, step)
        ts = (base + rng_s.uniform(0, step, len(base))).astype(np.int64)
        cols["ts"].append(ts)
        cols["caller"].append(np.full(len(ts), caller))
        cols["callee"].append(np.full(len(ts), callee))
        cols["rt"].append(np.maximum(rng_s.normal(e.rt_mean, e.rt_std, len(ts)), 0.1))
        cols["status"].append((rng_s.random(len(ts)) < e.error_rate).astype(np.int8))
    span = {k: np.concatenate(v) if v else np.array([], dtype=float) for k, v in cols.items()}
    order = np.argsort(span["ts"], kind="stable")
    span = {k: v[order] for k, v in span.items()}

    log_ts, log_inst, log_msg = [], [], []
    if config.log_rate_per_min > 0 and config.log_templates:
        step = 60_000.0 / config.log_rate_per_min
        for i, inst in enumerate(instances):
            base = np.arange(t0, t1 - step, step)
            ts = (base + rng_l.uniform(0, step, len(base))).astype(np.int64)
            choice = rng_l.integers(0, len(config.log_templates), len(ts))
            log_ts.append(ts)
            log_inst.append(np.full(len(ts), i))
            log_msg += [_fill(config.log_templates[c], groups[inst], rng_l) for c in choice]
    log_ts_a = np.concatenate(log_ts) if log_ts else np.array([], dtype=np.int64)
    return SimTelemetry(
        instances, [m.name for m in config.metrics], metric_ts, metric_values,
        span["ts"].astype(np.int64), span["caller"].astype(np.int64), span["callee"].astype(np.int64),
        span["rt"].astype(float), span["status"].astype(np.int8),
        log_ts_a, (np.concatenate(log_inst) if log_inst else np.array([], dtype=np.int64)),
        np.zeros(len(log_ts_a), dtype=np.int8), log_msg,
    )


def plan_cases(config: SimConfig) -> list[FailureCase]:
    """Failure types (exact counts from the mix), roots and windows."""
    rng = np.random.default_rng(np.random.SeedSequence(config.seed).spawn(4)[3])
    c = config.cases
    types = sorted(config.failures)
    weights = np.array([c.mix.get(t, 0.0) if c.mix else 1.0 for t in types], dtype=float)
    if c.count and weights.sum() <= 0:
        raise ConfigError("case mix weights sum to zero")
    quota = weights / weights.sum() * c.count if c.count else np.zeros(len(types))
    counts = np.floor(quota).astype(int)
    for i in np.argsort(-(quota - counts), kind="stable")[: c.count - counts.sum()]:
        counts[i] += 1
    kinds = np.repeat(np.arange(len(types)), counts)
    rng.shuffle(kinds)
    instances = config.instances
    t0, _ = config.horizon()
    out = []
    for i, k in enumerate(kinds):
        slot = t0 + int(c.warmup_minutes * 60_000 + i * c.slot_minutes * 60_000)
        start = slot + int(rng.integers(0, c.jitter_s + 1)) * 1000
        root = instances[int(rng.integers(0, len(instances)))]
        out.append(FailureCase(f"case-{i:04d}", start, start + c.duration_s * 1000, root, types[k]))
    return out


def inject_failures(config: SimConfig, baseline: SimTelemetry,
                    cases: Optional[list[FailureCase]] = None) -> tuple[SimTelemetry, list[FailureCase]]:
    """Apply each case's signature to its root instance (and, damped, to the
    instances it calls) inside the case window."""
    cases = plan_cases(config) if cases is None else sorted(cases, key=lambda x: x.start)
    for a, b in zip(cases, cases[1:]):
        if b.start <= a.end:
            raise ConfigError(f"case windows overlap: {a.case_id} and {b.case_id}")
    tel = baseline.copy()
    rng = np.random.default_rng(np.random.SeedSequence([config.seed, 1]))
    idx = {inst: i for i, inst in enumerate(tel.instances)}
    groups = config.group_of
    metric_std = {m.name: m.std for m in config.metrics}
    downstream: dict[int, set[int]] = {}
    for caller, callee, _ in _instance_edges(config):
        downstream.setdefault(caller, set()).add(callee)

    new_ts, new_inst, new_level, new_msg = [], [], [], []
    for case in cases:
        sig = config.failures[case.failure_type]
        root = idx[case.root_cause_instance]
        targets = [(root, 1.0)] + [(d, config.damping) for d in sorted(downstream.get(root, ()))]
        m_sel = slice(*np.searchsorted(tel.metric_ts, [case.start, case.end + 1]))
        s0, s1 = np.searchsorted(tel.span_ts, [case.start, case.end + 1])
        callers, callees = tel.span_caller[s0:s1], tel.span_callee[s0:s1]
        touched = np.zeros(s1 - s0, dtype=bool)
        for inst, scale in targets:
            for shift in sig.metrics:
                m = tel.metric_names.index(shift.metric)
                sign = 1.0 if shift.direction == "up" else -1.0
                tel.metric_values[inst, m, m_sel] += sign * scale * shift.magnitude * metric_std[shift.metric]
            incident = ~touched & ((callers == inst) | (callees == inst))
            touched |= incident
            hit = s0 + np.flatnonzero(incident)
            if sig.rt_multiplier != 1.0:
                tel.span_rt[hit] *= 1.0 + (sig.rt_multiplier - 1.0) * scale
            if sig.status_flip > 0:
                if sig.status not in tel.status_codes:
                    tel.status_codes.append(sig.status)
                code = tel.status_codes.index(sig.status)
                flip = hit[rng.random(len(hit)) < sig.status_flip * scale]
                tel.span_status[flip] = code
        for burst in sig.logs:
            step = 1000.0 / burst.rate
            offsets = np.arange(0, case.end - case.start, step)
            ts = (case.start + offsets + rng.uniform(0, step * 0.5, len(offsets))).astype(np.int64)
            ts = ts[ts <= case.end]
            new_ts.append(ts)
            new_inst.append(np.full(len(ts), root))
            new_level.append(np.full(len(ts), LEVELS.index(burst.level), dtype=np.int8))
            new_msg += [_fill(burst.template, groups[case.root_cause_instance], rng) for _ in ts]
    if new_ts:
        tel.log_ts = np.concatenate([tel.log_ts, *new_ts])
        tel.log_inst = np.concatenate([tel.log_inst, *new_inst])
        tel.log_level = np.concatenate([tel.log_level, *new_level])
        tel.log_msg = tel.log_msg + new_msg
    return tel, cases


def write_telemetry(out_dir, tel: SimTelemetry, config: SimConfig, cases: list[FailureCase]) -> list[Path]:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    inst = [json.dumps(i) for i in tel.instances]
    paths = []

    p = out / "traces.jsonl"
    order = np.argsort(tel.span_ts, kind="stable")
    codes = [json.dumps(c) for c in tel.status_codes]
    ts, ca, ce, rt, st = (tel.span_ts[order].tolist(), tel.span_caller[order].tolist(),
                          tel.span_callee[order].tolist(), tel.span_rt[order].tolist(),
                          tel.span_status[order].tolist())
    with open(p, "w", encoding="utf-8") as fh:
        fh.writelines(
            f'{{"ts": {t}, "caller": {inst[a]}, "callee": {inst[b]}, "rt_ms": {r:.3f}, "status": {codes[s]}}}\n'
            for t, a, b, r, s in zip(ts, ca, ce, rt, st)
        )
    paths.append(p)

    p = out / "logs.jsonl"
    order = np.argsort(tel.log_ts, kind="stable")
    with open(p, "w", encoding="utf-8") as fh:
        fh.writelines(
            f'{{"ts": {int(tel.log_ts[k])}, "instance": {inst[tel.log_inst[k]]}, '
            f'"level": "{LEVELS[tel.log_level[k]]}", "msg": {json.dumps(tel.log_msg[k])}}}\n'
            for k in order.tolist()
        )
    paths.append(p)

    p = out / "metrics.jsonl"
    names = [json.dumps(n) for n in tel.metric_names]
    values = tel.metric_values.transpose(2, 0, 1).tolist()   # (t, inst, metric)
    with open(p, "w", encoding="utf-8") as fh:
        for t, per_inst in zip(tel.metric_ts.tolist(), values):
            fh.writelines(
                f'{{"ts": {t}, "instance": {inst[i]}, "metric": {names[m]}, "value": {v:.4f}}}\n'
                for i, row in enumerate(per_inst) for m, v in enumerate(row)
            )
    paths.append(p)

    p = out / "deployment.json"
    hosts = config.host_of()
    groups = config.group_of
    with open(p, "w", encoding="utf-8") as fh:
        json.dump({"instances": [{"id": i, "host": hosts[i], "group": groups[i]} for i in tel.instances]},
                  fh, indent=1)
    paths.append(p)

    p = out / "labels.jsonl"
    write_labels(p, cases)
    paths.append(p)
    return paths


def simulate(config: SimConfig, out_dir) -> list[Path]:
    """Generate, inject and write the five output files."""
    baseline = generate_baseline(config)
    tel, cases = inject_failures(config, baseline)
    return write_telemetry(out_dir, tel, config, cases)
