"""Supervised bag-of-events embedding (fastText-style classifier) with
nearest-neighbour augmentation for class balancing."""
from __future__ import annotations

import json
import logging
from collections import defaultdict
from dataclasses import dataclass, field, replace
from typing import Iterable, Optional, Sequence, Union

import numpy as np

from .errors import ModelFormatError, TrainingDivergence
from .events import LOG, METRIC, TRACE, Event, EventSequence

logger = logging.getLogger(__name__)

UNK = "<unk>"
UNK_INDEX = 0
BIGRAM_SEP = " "
MODEL_VERSION = 1

TokenSeq = Union[EventSequence, Sequence[str]]


def _tokens(seq: TokenSeq) -> list[str]:
    return seq.tokens if isinstance(seq, EventSequence) else list(seq)


def bigram(a: str, b: str) -> str:
    return f"{a}{BIGRAM_SEP}{b}"


@dataclass
class Vocabulary:
    tokens: list[str] = field(default_factory=lambda: [UNK])
    is_unigram: list[bool] = field(default_factory=lambda: [False])

    def __post_init__(self):
        self.index = {t: i for i, t in enumerate(self.tokens)}

    def __len__(self) -> int:
        return len(self.tokens)

    def __contains__(self, token: str) -> bool:
        return token in self.index

    def get(self, token: str) -> int:
        return self.index.get(token, UNK_INDEX)

    def _add(self, token: str, unigram: bool) -> None:
        if token not in self.index:
            self.index[token] = len(self.tokens)
            self.tokens.append(token)
            self.is_unigram.append(unigram)

    @property
    def unigram_indices(self) -> np.ndarray:
        return np.flatnonzero(self.is_unigram)

    def features(self, tokens: Sequence[str]) -> np.ndarray:
        """Indices of the unigrams and adjacent bigrams of a token sequence;
        out-of-vocabulary entries map to the unknown index, an empty sequence
        to the unknown index alone."""
        if not tokens:
            return np.array([UNK_INDEX], dtype=np.int64)
        idx = [self.get(t) for t in tokens]
        idx += [self.get(bigram(a, b)) for a, b in zip(tokens, tokens[1:])]
        return np.asarray(idx, dtype=np.int64)


def build_vocabulary(sequences: Iterable[TokenSeq], min_count: int = 1) -> Vocabulary:
    """Unigrams seen at least ``min_count`` times plus bigrams of adjacent
    kept unigrams, indexed by first appearance after the unknown token."""
    seqs = [_tokens(s) for s in sequences]
    counts: dict[str, int] = defaultdict(int)
    for toks in seqs:
        for t in toks:
            counts[t] += 1
    vocab = Vocabulary()
    for toks in seqs:
        for i, t in enumerate(toks):
            if counts[t] < min_count:
                continue
            vocab._add(t, True)
            if i > 0 and counts[toks[i - 1]] >= min_count:
                vocab._add(bigram(toks[i - 1], t), False)
    return vocab


@dataclass
class EmbeddingModel:
    vocab: Vocabulary
    input_matrix: np.ndarray   # |V| x dim
    output_matrix: np.ndarray  # dim x C
    classes: list[str]
    version: int = MODEL_VERSION
    loss_history: list[float] = field(default_factory=list, compare=False, repr=False)

    @property
    def dim(self) -> int:
        return self.input_matrix.shape[1]

    def hidden(self, seq: TokenSeq) -> np.ndarray:
        return self.input_matrix[self.vocab.features(_tokens(seq))].mean(axis=0)

    def predict_proba(self, sequences: Iterable[TokenSeq]) -> np.ndarray:
        h = np.stack([self.hidden(s) for s in sequences])
        return softmax(h @ self.output_matrix)

    def predict(self, sequences: Iterable[TokenSeq]) -> list[str]:
        return [self.classes[i] for i in self.predict_proba(sequences).argmax(axis=1)]

    # persistence

    def to_dict(self) -> dict:
        return {
            "version": self.version, "dim": self.dim, "classes": list(self.classes),
            "vocab": self.vocab.index,
            "unigram": [bool(u) for u in self.vocab.is_unigram],
            "input": self.input_matrix.tolist(), "output": self.output_matrix.tolist(),
        }

    @classmethod
    def from_dict(cls, doc: dict) -> "EmbeddingModel":
        if doc.get("version") != MODEL_VERSION:
            raise ModelFormatError(
                f"embedding model version {doc.get('version')!r} unsupported (expected {MODEL_VERSION})"
            )
        try:
            tokens = [None] * len(doc["vocab"])
            for t, i in doc["vocab"].items():
                tokens[i] = t
            vocab = Vocabulary(tokens, list(doc["unigram"]))
            model = cls(vocab, np.array(doc["input"], dtype=float), np.array(doc["output"], dtype=float),
                        list(doc["classes"]))
        except (KeyError, IndexError, TypeError, ValueError) as exc:
            raise ModelFormatError(f"corrupt embedding model (version {doc.get('version')}): {exc}") from exc
        if model.input_matrix.shape != (len(tokens), doc["dim"]) or None in tokens:
            raise ModelFormatError("corrupt embedding model: matrix/vocabulary shape mismatch")
        return model

    def save(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(self.to_dict(), fh)

    @classmethod
    def load(cls, path) -> "EmbeddingModel":
        try:
            with open(path, encoding="utf-8") as fh:
                doc = json.load(fh)
        except json.JSONDecodeError as exc:
            raise ModelFormatError(f"{path}: not a model file: {exc}") from exc
        return cls.from_dict(doc)


def softmax(z: np.ndarray) -> np.ndarray:
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


@dataclass
class _Batch:
    idx: np.ndarray      # concatenated feature indices
    weight: np.ndarray   # 1/len of the owning example
    starts: np.ndarray   # segment start of each example
    y: np.ndarray


def _make_batch(feats: Sequence[np.ndarray], y: np.ndarray) -> _Batch:
    lens = np.array([len(f) for f in feats])
    return _Batch(
        idx=np.concatenate(feats),
        weight=np.repeat(1.0 / lens, lens),
        starts=np.concatenate([[0], np.cumsum(lens)[:-1]]),
        y=np.asarray(y),
    )


def batch_loss_grad(w_in: np.ndarray, w_out: np.ndarray, batch: _Batch):
    """Mean negative log-likelihood of a batch and its gradients.

    Returns ``(loss, rows, row_grads, grad_out)`` where ``row_grads[i]`` is
    the input-matrix gradient for row ``rows[i]``.
    """
    contrib = w_in[batch.idx] * batch.weight[:, None]
    h = np.add.reduceat(contrib, batch.starts, axis=0)
    p = softmax(h @ w_out)
    n = len(batch.y)
    loss = -np.mean(np.log(np.maximum(p[np.arange(n), batch.y], 1e-300)))
    dlogits = p
    dlogits[np.arange(n), batch.y] -= 1.0
    dlogits /= n
    grad_out = h.T @ dlogits
    dh = dlogits @ w_out.T
    seg = np.repeat(np.arange(n), np.diff(np.append(batch.starts, len(batch.idx))))
    per_idx = dh[seg] * batch.weight[:, None]
    order = np.argsort(batch.idx, kind="stable")
    rows, first = np.unique(batch.idx[order], return_index=True)
    row_grads = np.add.reduceat(per_idx[order], first, axis=0)
    return loss, rows, row_grads, grad_out


def loss_and_gradients(model: EmbeddingModel, sequences: Sequence[TokenSeq], labels: Sequence[str]):
    """Full-data loss with dense gradients for both matrices."""
    feats = [model.vocab.features(_tokens(s)) for s in sequences]
    y = np.array([model.classes.index(lab) for lab in labels])
    loss, rows, row_grads, grad_out = batch_loss_grad(model.input_matrix, model.output_matrix, _make_batch(feats, y))
    grad_in = np.zeros_like(model.input_matrix)
    grad_in[rows] = row_grads
    return loss, grad_in, grad_out


def dataset_loss(model: EmbeddingModel, sequences: Sequence[TokenSeq], labels: Sequence[str]) -> float:
    feats = [model.vocab.features(_tokens(s)) for s in sequences]
    y = np.array([model.classes.index(lab) for lab in labels])
    return batch_loss_grad(model.input_matrix, model.output_matrix.copy(), _make_batch(feats, y))[0]


def train_embedding(
    sequences: Sequence[EventSequence],
    dim: int = 100,
    epochs: int = 50,
    lr: float = 0.1,
    seed: int = 0,
    batch_size: Optional[int] = 32,
    min_count: int = 1,
    decay: bool = True,
    labels: Optional[Sequence[str]] = None,
) -> EmbeddingModel:
    """Train the classifier with mini-batch SGD (linear learning-rate decay).

    ``labels`` defaults to each sequence's ``label``; ``batch_size=None``
    means full-batch training.
    """
    if labels is None:
        labels = [s.label for s in sequences]
    classes = sorted(set(labels))
    if len(classes) < 2:
        raise ValueError(f"need at least 2 classes to train, got {classes}")
    if dim <= 0:
        raise ValueError("dim must be positive")
    vocab = build_vocabulary(sequences, min_count)
    rng = np.random.default_rng(seed)
    w_in = rng.uniform(-1.0 / dim, 1.0 / dim, size=(len(vocab), dim))
    w_out = np.zeros((dim, len(classes)))
    model = EmbeddingModel(vocab, w_in, w_out, classes)

    feats = [vocab.features(_tokens(s)) for s in sequences]
    cls_index = {c: i for i, c in enumerate(classes)}
    y = np.array([cls_index[lab] for lab in labels])
    n = len(feats)
    bs = n if batch_size is None else batch_size
    n_batches = (n + bs - 1) // bs
    total = epochs * n_batches
    step = 0
    for _ in range(epochs):
        order = rng.permutation(n)
        epoch_loss = 0.0
        for b in range(n_batches):
            sel = order[b * bs:(b + 1) * bs]
            batch = _make_batch([feats[i] for i in sel], y[sel])
            loss, rows, row_grads, grad_out = batch_loss_grad(w_in, w_out, batch)
            if not np.isfinite(loss):
                raise TrainingDivergence(f"embedding loss became {loss} at step {step}")
            rate = lr * (1.0 - step / total) if decay else lr
            w_in[rows] -= rate * row_grads
            w_out -= rate * grad_out
            epoch_loss += loss * len(sel)
            step += 1
        model.loss_history.append(epoch_loss / n)
    if not (np.isfinite(w_in).all() and np.isfinite(w_out).all()):
        raise TrainingDivergence("embedding weights became non-finite")
    return model


def embed_event(model: EmbeddingModel, token: str) -> np.ndarray:
    return model.input_matrix[model.vocab.get(token)]


class NearestNeighbours:
    """Exact Euclidean nearest unigram neighbour of a token (self excluded,
    ties to the lower vocabulary index)."""

    def __init__(self, model: EmbeddingModel):
        self.model = model
        self.candidates = model.vocab.unigram_indices
        self._cache: dict[int, Optional[int]] = {}

    def __call__(self, token: str) -> Optional[str]:
        i = self.model.vocab.index.get(token)
        if i is None or not self.model.vocab.is_unigram[i]:
            return None
        if i not in self._cache:
            cand = self.candidates[self.candidates != i]
            if len(cand) == 0:
                self._cache[i] = None
            else:
                diff = self.model.input_matrix[cand] - self.model.input_matrix[i]
                self._cache[i] = int(cand[np.argmin(np.einsum("ij,ij->i", diff, diff))])
        j = self._cache[i]
        return None if j is None else self.model.vocab.tokens[j]


def event_for_token(template: Event, token: str) -> Event:
    """An event at the same time/instance as ``template`` carrying ``token``."""
    kind, _, rest = token.partition(":")
    if kind == TRACE:
        payload = tuple(rest.split("→", 1))
    elif kind == LOG:
        payload = (int(rest),)
    elif kind == METRIC:
        payload = tuple(rest.rsplit(":", 1))
    else:
        raise ValueError(f"cannot decode token {token!r}")
    return replace(template, kind=kind, payload=payload, token=token)


def augment(sequences: Sequence[EventSequence], model_f0: EmbeddingModel, target_size: int = 1000,
            seed: int = 0) -> list[EventSequence]:
    """Grow every class to ``target_size`` sequences by copying a random
    original and swapping one of its events for that event's nearest
    neighbour in the embedding space. Originals are always kept."""
    rng = np.random.default_rng(seed)
    nearest = NearestNeighbours(model_f0)
    by_class: dict[str, list[EventSequence]] = defaultdict(list)
    for s in sequences:
        by_class[s.label].append(s)

    out = list(sequences)
    for label, members in by_class.items():
        need = target_size - len(members)
        if need <= 0:
            continue
        # (sequence, positions whose event has a neighbour)
        sources = []
        for s in members:
            pos = [k for k, e in enumerate(s.events) if nearest(e.token) is not None]
            if pos:
                sources.append((s, pos))
        if not sources:
            logger.warning("class %r has no replaceable events; copying its sequences verbatim", label)
            out += [replace(members[k % len(members)], events=list(members[k % len(members)].events))
                    for k in range(need)]
            continue
        for _ in range(need):
            src, pos = sources[rng.integers(len(sources))]
            k = pos[rng.integers(len(pos))]
            events = list(src.events)
            events[k] = event_for_token(events[k], nearest(events[k].token))
            out.append(replace(src, events=events))
    return out


def two_phase_train(
    sequences: Sequence[EventSequence],
    dim: int = 100,
    epochs: int = 50,
    lr: float = 0.1,
    seed: int = 0,
    target_size: int = 1000,
    use_augmentation: bool = True,
    **kwargs,
) -> EmbeddingModel:
    """Train f0 on the originals, augment with it, and return f1 trained on
    the expanded set (f1 is trained on the originals alone when augmentation
    is disabled or adds nothing)."""
    f0 = train_embedding(sequences, dim, epochs, lr, seed, **kwargs)
    if not use_augmentation:
        return f0
    expanded = augment(sequences, f0, target_size, seed)
    if len(expanded) == len(sequences):
        return f0
    return train_embedding(expanded, dim, epochs, lr, seed, **kwargs)
