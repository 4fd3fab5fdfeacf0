"""Dependency graph, topology-adaptive graph convolution with max-pool readout,
and the joint root-cause-group / failure-type classifier."""
from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from typing import Iterable, Optional, Sequence

import numpy as np

from .embedding import EmbeddingModel, embed_event, softmax
from .errors import ModelFormatError, TrainingDivergence
from .events import EventSequence
from .telemetry import DeploymentMap, TraceSpan

logger = logging.getLogger(__name__)

GNN_VERSION = 1
LOG_CLAMP = 1e-12


@dataclass
class DependencyGraph:
    nodes: list[str]
    adjacency: np.ndarray

    def __post_init__(self):
        self.position = {n: i for i, n in enumerate(self.nodes)}

    @property
    def degree(self) -> np.ndarray:
        return self.adjacency.sum(axis=1)

    @property
    def normalized_adjacency(self) -> np.ndarray:
        """D^-1/2 A D^-1/2 with zero rows/columns for isolated nodes."""
        deg = self.degree
        inv = np.zeros_like(deg, dtype=float)
        inv[deg > 0] = deg[deg > 0] ** -0.5
        return inv[:, None] * self.adjacency * inv[None, :]

    def to_dict(self) -> dict:
        return {"nodes": self.nodes, "adjacency": self.adjacency.astype(int).tolist()}

    @classmethod
    def from_dict(cls, doc: dict) -> "DependencyGraph":
        return cls(list(doc["nodes"]), np.array(doc["adjacency"], dtype=float))


def build_dependency_graph(spans: Iterable[TraceSpan], deployment: DeploymentMap) -> DependencyGraph:
    """Bidirectional edges for every observed call plus edges between
    instances sharing a host; no self loops."""
    nodes = deployment.instances
    pos = {n: i for i, n in enumerate(nodes)}
    adj = np.zeros((len(nodes), len(nodes)))
    for sp in spans:
        a, b = pos.get(sp.caller_instance), pos.get(sp.callee_instance)
        if a is not None and b is not None and a != b:
            adj[a, b] = adj[b, a] = 1.0
    by_host: dict[str, list[int]] = {}
    for inst, host in deployment.host_of.items():
        if inst in pos:
            by_host.setdefault(host, []).append(pos[inst])
    for members in by_host.values():
        for a in members:
            for b in members:
                if a != b:
                    adj[a, b] = 1.0
    return DependencyGraph(nodes, adj)


@dataclass
class GnnModel:
    thetas: np.ndarray        # (K+1) x dim x hidden
    w_s: np.ndarray           # hidden x S
    b_s: np.ndarray
    w_t: np.ndarray           # hidden x T
    b_t: np.ndarray
    groups: list[str]
    types: list[str]
    version: int = GNN_VERSION
    loss_history: list[float] = field(default_factory=list, compare=False, repr=False)

    @property
    def hops(self) -> int:
        return self.thetas.shape[0] - 1

    @property
    def dim(self) -> int:
        return self.thetas.shape[1]

    @property
    def hidden(self) -> int:
        return self.thetas.shape[2]

    @classmethod
    def init(cls, dim: int, hidden: int, hops: int, groups: Sequence[str], types: Sequence[str],
             seed: int = 0) -> "GnnModel":
        rng = np.random.default_rng(seed)

        def glorot(*shape):
            bound = np.sqrt(6.0 / (shape[-2] + shape[-1]))
            return rng.uniform(-bound, bound, size=shape)

        return cls(glorot(hops + 1, dim, hidden), glorot(hidden, len(groups)), np.zeros(len(groups)),
                   glorot(hidden, len(types)), np.zeros(len(types)), list(groups), list(types))

    def params(self) -> dict[str, np.ndarray]:
        return {"thetas": self.thetas, "w_s": self.w_s, "b_s": self.b_s, "w_t": self.w_t, "b_t": self.b_t}

    def to_dict(self) -> dict:
        doc = {"version": self.version, "hops": self.hops, "dim": self.dim, "hidden": self.hidden,
               "groups": self.groups, "types": self.types}
        doc.update({k: v.tolist() for k, v in self.params().items()})
        return doc

    @classmethod
    def from_dict(cls, doc: dict) -> "GnnModel":
        if doc.get("version") != GNN_VERSION:
            raise ModelFormatError(f"GNN model version {doc.get('version')!r} unsupported (expected {GNN_VERSION})")
        try:
            model = cls(*(np.array(doc[k], dtype=float) for k in ("thetas", "w_s", "b_s", "w_t", "b_t")),
                        groups=list(doc["groups"]), types=list(doc["types"]))
        except (KeyError, TypeError, ValueError) as exc:
            raise ModelFormatError(f"corrupt GNN model (version {doc.get('version')}): {exc}") from exc
        if model.thetas.shape != (doc["hops"] + 1, doc["dim"], doc["hidden"]):
            raise ModelFormatError("corrupt GNN model: weight shapes disagree with header")
        return model


def save_model(model: GnnModel, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(model.to_dict(), fh)


def load_model(path) -> GnnModel:
    try:
        with open(path, encoding="utf-8") as fh:
            doc = json.load(fh)
    except json.JSONDecodeError as exc:
        raise ModelFormatError(f"{path}: not a model file: {exc}") from exc
    return GnnModel.from_dict(doc)


def instance_representation(sequence: EventSequence | Sequence[str], model: EmbeddingModel) -> np.ndarray:
    tokens = sequence.tokens if isinstance(sequence, EventSequence) else list(sequence)
    if not tokens:
        return np.zeros(model.dim)
    return np.mean([embed_event(model, t) for t in tokens], axis=0)


def node_features(graph: DependencyGraph, sequences: Sequence[EventSequence], model: EmbeddingModel) -> np.ndarray:
    """Rows of instance representations in graph node order."""
    by_inst = {s.instance: s for s in sequences}
    missing = [n for n in graph.nodes if n not in by_inst]
    if missing:
        raise ValueError(f"no event sequence for graph nodes {missing}")
    return np.stack([instance_representation(by_inst[n], model) for n in graph.nodes])


def hop_features(norm_adj: np.ndarray, x: np.ndarray, hops: int) -> np.ndarray:
    """Stack of Â^k X for k = 0..hops, shape (hops+1, n, d)."""
    out = [x]
    for _ in range(hops):
        out.append(norm_adj @ out[-1])
    return np.stack(out)


def tagconv_forward(graph: DependencyGraph, x: np.ndarray, model: GnnModel) -> np.ndarray:
    """ReLU(sum_k Â^k X Θ_k)."""
    x = np.asarray(x, dtype=float)
    if x.shape != (len(graph.nodes), model.dim):
        raise ValueError(f"feature matrix shape {x.shape} != ({len(graph.nodes)}, {model.dim})")
    p = hop_features(graph.normalized_adjacency, x, model.hops)
    return np.maximum(sum(p[k] @ model.thetas[k] for k in range(len(p))), 0.0)


def readout(h: np.ndarray) -> np.ndarray:
    return h.max(axis=-2)


def heads(r: np.ndarray, model: GnnModel) -> tuple[np.ndarray, np.ndarray]:
    return softmax(r @ model.w_s + model.b_s), softmax(r @ model.w_t + model.b_t)


def forward_features(graph: DependencyGraph, x: np.ndarray, model: GnnModel) -> tuple[np.ndarray, np.ndarray]:
    return heads(readout(tagconv_forward(graph, x, model)), model)


def forward(graph: DependencyGraph, sequences: Sequence[EventSequence], gnn: GnnModel,
            embed_model: EmbeddingModel) -> tuple[np.ndarray, np.ndarray]:
    """(group probabilities, failure-type probabilities) for one case."""
    return forward_features(graph, node_features(graph, sequences, embed_model), gnn)


def joint_loss(pred_s, pred_t, y_s, y_t) -> float:
    """Mean over cases of the two heads' cross-entropies (one-hot labels)."""
    pred_s, pred_t = np.atleast_2d(pred_s), np.atleast_2d(pred_t)
    y_s, y_t = np.atleast_2d(y_s), np.atleast_2d(y_t)
    ce_s = -(y_s * np.log(np.maximum(pred_s, LOG_CLAMP))).sum(axis=1)
    ce_t = -(y_t * np.log(np.maximum(pred_t, LOG_CLAMP))).sum(axis=1)
    return float(np.mean(ce_s + ce_t))


def loss_and_gradients(model: GnnModel, hop_x: np.ndarray, y_s: np.ndarray, y_t: np.ndarray):
    """Joint loss and its gradients for a batch of cases.

    ``hop_x`` has shape (F, K+1, n, d) (see :func:`hop_features`); ``y_s`` and
    ``y_t`` are class indices. The max-pool gradient goes to the first node
    attaining the maximum.
    """
    f = hop_x.shape[0]
    z = sum(hop_x[:, k] @ model.thetas[k] for k in range(model.thetas.shape[0]))
    h = np.maximum(z, 0.0)
    win = h.argmax(axis=1)                       # (F, hidden)
    r = np.take_along_axis(h, win[:, None, :], axis=1)[:, 0, :]
    p_s = softmax(r @ model.w_s + model.b_s)
    p_t = softmax(r @ model.w_t + model.b_t)
    rows = np.arange(f)
    loss = float(np.mean(-np.log(np.maximum(p_s[rows, y_s], LOG_CLAMP))
                         - np.log(np.maximum(p_t[rows, y_t], LOG_CLAMP))))

    d_s = p_s.copy()
    d_s[rows, y_s] -= 1.0
    d_s /= f
    d_t = p_t.copy()
    d_t[rows, y_t] -= 1.0
    d_t /= f
    grads = {"w_s": r.T @ d_s, "b_s": d_s.sum(axis=0), "w_t": r.T @ d_t, "b_t": d_t.sum(axis=0)}
    d_r = d_s @ model.w_s.T + d_t @ model.w_t.T
    d_h = np.zeros_like(h)
    np.put_along_axis(d_h, win[:, None, :], d_r[:, None, :], axis=1)
    d_z = d_h * (z > 0)
    flat_dz = d_z.reshape(-1, d_z.shape[-1])
    grads["thetas"] = np.stack([hop_x[:, k].reshape(-1, hop_x.shape[-1]).T @ flat_dz
                                for k in range(hop_x.shape[1])])
    return loss, grads


@dataclass(frozen=True)
class GnnParams:
    hidden: int = 64
    hops: int = 2
    lr: float = 1e-2
    epochs: int = 1000
    optimizer: str = "adam"


def fit_gnn(x: np.ndarray, y_s: np.ndarray, y_t: np.ndarray, graph: DependencyGraph,
            groups: Sequence[str], types: Sequence[str], params: GnnParams = GnnParams(),
            seed: int = 0) -> GnnModel:
    """Full-batch training on stacked node features ``x`` of shape (F, n, d)."""
    model = GnnModel.init(x.shape[2], params.hidden, params.hops, groups, types, seed)
    a_hat = graph.normalized_adjacency
    hop_x = np.stack([hop_features(a_hat, xi, params.hops) for xi in x])
    y_s, y_t = np.asarray(y_s), np.asarray(y_t)
    weights = model.params()
    m = {k: np.zeros_like(v) for k, v in weights.items()}
    v2 = {k: np.zeros_like(v) for k, v in weights.items()}
    beta1, beta2, eps = 0.9, 0.999, 1e-8
    for epoch in range(1, params.epochs + 1):
        loss, grads = loss_and_gradients(model, hop_x, y_s, y_t)
        if not np.isfinite(loss):
            raise TrainingDivergence(f"GNN loss became {loss} at epoch {epoch}")
        model.loss_history.append(loss)
        for k, w in weights.items():
            g = grads[k]
            if params.optimizer == "sgd":
                w -= params.lr * g
                continue
            m[k] = beta1 * m[k] + (1 - beta1) * g
            v2[k] = beta2 * v2[k] + (1 - beta2) * g * g
            m_hat = m[k] / (1 - beta1 ** epoch)
            v_hat = v2[k] / (1 - beta2 ** epoch)
            w -= params.lr * m_hat / (np.sqrt(v_hat) + eps)
    if not all(np.isfinite(w).all() for w in weights.values()):
        raise TrainingDivergence("GNN weights became non-finite")
    return model


def train_gnn(cases: Sequence[tuple[str, str, Sequence[EventSequence]]], graph: DependencyGraph,
              embed_model: EmbeddingModel, groups: Sequence[str], types: Optional[Sequence[str]] = None,
              params: GnnParams = GnnParams(), seed: int = 0) -> GnnModel:
    """Train on ``(root_group, failure_type, sequences)`` triples."""
    types = sorted({t for _, t, _ in cases}) if types is None else list(types)
    groups = list(groups)
    unknown = sorted({g for g, _, _ in cases} - set(groups))
    if unknown:
        raise ValueError(f"unknown service group labels {unknown}")
    if len(types) < 2:
        raise ValueError("need at least 2 failure types")
    x = np.stack([node_features(graph, seqs, embed_model) for _, _, seqs in cases])
    y_s = np.array([groups.index(g) for g, _, _ in cases])
    y_t = np.array([types.index(t) for _, t, _ in cases])
    return fit_gnn(x, y_s, y_t, graph, groups, types, params, seed)
