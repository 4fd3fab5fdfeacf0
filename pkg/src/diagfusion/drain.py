"""Fixed-depth parse tree log template miner (Drain-style)."""
from __future__ import annotations

import hashlib
import json
import re
from dataclasses import dataclass, field

WILDCARD = "<*>"
EMPTY_TEMPLATE_ID = 0

_HAS_DIGIT = re.compile(r"\d")


def template_id(template: str) -> int:
    """Stable unsigned 64-bit hash of a template string (never 0)."""
    h = int.from_bytes(hashlib.blake2b(template.encode("utf-8"), digest_size=8).digest(), "big")
    return h or 1


@dataclass
class Cluster:
    tokens: list[str]
    size: int = 1

    @property
    def template(self) -> str:
        return " ".join(self.tokens)


@dataclass
class _Node:
    children: dict[str, "_Node"] = field(default_factory=dict)
    clusters: list[Cluster] = field(default_factory=list)


class ParseTree:
    """Masks digit-bearing tokens, routes a message by token count and then by
    its first ``depth - 2`` tokens, and matches it to the most similar template
    in the leaf.

    While unfrozen, a matched template is generalised (differing positions
    become ``<*>``). Once frozen, existing templates never change so their ids
    stay stable; unmatched messages still get new templates.
    """

    def __init__(self, depth: int = 4, sim_threshold: float = 0.4, max_children: int = 100):
        if depth < 3:
            raise ValueError("depth must be >= 3")
        self.depth = depth
        self.sim_threshold = sim_threshold
        self.max_children = max_children
        self.frozen = False
        self._root = _Node()

    @staticmethod
    def tokenize(message: str) -> list[str]:
        """Whitespace tokens with digit-bearing tokens masked as ``<*>``."""
        return [WILDCARD if _HAS_DIGIT.search(t) else t for t in message.split()]

    def _leaf(self, tokens: list[str], create: bool) -> _Node | None:
        node = self._root.children.get(str(len(tokens)))
        if node is None:
            if not create:
                return None
            node = self._root.children[str(len(tokens))] = _Node()
        for tok in tokens[: self.depth - 2]:
            child = node.children.get(tok)
            if child is None and create and len(node.children) < self.max_children:
                child = node.children[tok] = _Node()
            if child is None:
                child = node.children.get(WILDCARD)
            if child is None:
                if not create:
                    return None
                child = node.children[WILDCARD] = _Node()
            node = child
        return node

    @staticmethod
    def similarity(template: list[str], tokens: list[str]) -> float:
        return sum(a == b for a, b in zip(template, tokens)) / len(tokens)

    def _best(self, leaf: _Node, tokens: list[str]) -> Cluster | None:
        best, best_sim = None, -1.0
        for cluster in leaf.clusters:
            sim = self.similarity(cluster.tokens, tokens)
            if sim > best_sim:
                best, best_sim = cluster, sim
        if best is not None and best_sim >= self.sim_threshold:
            return best
        return None

    def add(self, message: str) -> int:
        """Parse a message, learning from it; returns its template id."""
        tokens = self.tokenize(message)
        if not tokens:
            return EMPTY_TEMPLATE_ID
        leaf = self._leaf(tokens, create=True)
        cluster = self._best(leaf, tokens)
        if cluster is None:
            cluster = Cluster(list(tokens))
            leaf.clusters.append(cluster)
        else:
            cluster.size += 1
            if not self.frozen:
                cluster.tokens = [a if a == b else WILDCARD for a, b in zip(cluster.tokens, tokens)]
        return template_id(cluster.template)

    def match(self, message: str) -> int | None:
        """Template id of a message without modifying the tree (None if unmatched)."""
        tokens = self.tokenize(message)
        if not tokens:
            return EMPTY_TEMPLATE_ID
        leaf = self._leaf(tokens, create=False)
        if leaf is None:
            return None
        cluster = self._best(leaf, tokens)
        return None if cluster is None else template_id(cluster.template)

    def lookup(self, message: str) -> int:
        """Read-only parse: the matched template's id, or for an unmatched
        message the id of its digit-masked token string."""
        tid = self.match(message)
        if tid is None:
            tid = template_id(" ".join(self.tokenize(message)))
        return tid

    def fit(self, messages) -> "ParseTree":
        for msg in messages:
            self.add(msg)
        return self

    def freeze(self) -> "ParseTree":
        self.frozen = True
        return self

    def clusters(self) -> list[Cluster]:
        out = []
        stack = [self._root]
        while stack:
            node = stack.pop()
            out.extend(node.clusters)
            stack.extend(node.children[k] for k in sorted(node.children, reverse=True))
        return out

    def templates(self) -> dict[int, str]:
        return {template_id(c.template): c.template for c in self.clusters()}

    # serialisation

    def to_dict(self) -> dict:
        def dump(node: _Node) -> dict:
            return {
                "children": {k: dump(v) for k, v in node.children.items()},
                "clusters": [[c.tokens, c.size] for c in node.clusters],
            }

        return {
            "version": 1, "depth": self.depth, "sim_threshold": self.sim_threshold,
            "max_children": self.max_children, "frozen": self.frozen, "root": dump(self._root),
        }

    @classmethod
    def from_dict(cls, doc: dict) -> "ParseTree":
        tree = cls(doc["depth"], doc["sim_threshold"], doc["max_children"])
        tree.frozen = doc["frozen"]

        def load(d: dict) -> _Node:
            node = _Node()
            node.children = {k: load(v) for k, v in d["children"].items()}
            node.clusters = [Cluster(list(toks), size) for toks, size in d["clusters"]]
            return node

        tree._root = load(doc["root"])
        return tree

    def save(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(self.to_dict(), fh, sort_keys=True)

    @classmethod
    def load(cls, path) -> "ParseTree":
        with open(path, encoding="utf-8") as fh:
            return cls.from_dict(json.load(fh))


def parse_log_message(tree: ParseTree, message: str) -> int:
    return tree.add(message)
