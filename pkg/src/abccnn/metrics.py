"""Answer accuracy and thresholded Wu-Palmer (WUPS) scoring."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence


class TaxonomyError(ValueError):
    pass


class Taxonomy:
    """Rooted word tree; the root has depth 1."""

    def __init__(self, edges: Iterable[tuple[str, str]]):
        self.parent: dict[str, str | None] = {}
        roots = []
        for child, parent in edges:
            if child in self.parent:
                raise TaxonomyError(f"{child!r} has two parents")
            if parent == "ROOT":
                roots.append(child)
                self.parent[child] = None
            else:
                self.parent[child] = parent
        if len(roots) != 1:
            raise TaxonomyError(f"expected exactly one root, found {len(roots)}")
        self.root = roots[0]
        for child, parent in self.parent.items():
            if parent is not None and parent not in self.parent:
                raise TaxonomyError(f"parent {parent!r} of {child!r} is not in the taxonomy")
        self.depth: dict[str, int] = {}
        for word in self.parent:
            self._depth(word)

    def _depth(self, word: str) -> int:
        chain = []
        node: str | None = word
        while node is not None and node not in self.depth:
            if node in chain:
                raise TaxonomyError(f"cycle through {node!r}")
            chain.append(node)
            node = self.parent[node]
        d = 0 if node is None else self.depth[node]
        for n in reversed(chain):
            d += 1
            self.depth[n] = d
        return self.depth[word]

    def __contains__(self, word: str) -> bool:
        return word in self.parent

    def __len__(self) -> int:
        return len(self.parent)

    def lca(self, a: str, b: str) -> str:
        # lift the deeper node, then both together
        while self.depth[a] > self.depth[b]:
            a = self.parent[a]
        while self.depth[b] > self.depth[a]:
            b = self.parent[b]
        while a != b:
            a, b = self.parent[a], self.parent[b]
        return a

    @classmethod
    def from_lines(cls, lines: Iterable[str]) -> "Taxonomy":
        edges = []
        for raw in lines:
            line = raw.strip()
            if not line:
                continue
            parts = line.split()
            if len(parts) != 2:
                raise TaxonomyError(f"malformed taxonomy line {raw!r}")
            edges.append((parts[0], parts[1]))
        return cls(edges)

    @classmethod
    def load(cls, path: str | Path) -> "Taxonomy":
        return cls.from_lines(Path(path).read_text(encoding="utf-8").splitlines())


def wup_similarity(a: str, b: str, t: Taxonomy) -> float:
    if a not in t or b not in t:
        return 1.0 if a == b else 0.0
    if a == b:
        return 1.0
    return 2.0 * t.depth[t.lca(a, b)] / (t.depth[a] + t.depth[b])


def _check_lengths(predictions: Sequence, truths: Sequence) -> None:
    if len(predictions) != len(truths):
        raise ValueError(f"{len(predictions)} predictions for {len(truths)} ground truths")


def wups_score(predictions: Sequence[str], truths: Sequence[str], threshold: float, t: Taxonomy) -> float:
    """Mean WUP, with pairs scoring below ``threshold`` down-weighted by 0.1.

    The sum is exactly rounded, so the score does not depend on item order.
    """
    _check_lengths(predictions, truths)
    if not predictions:
        return 0.0
    scores = (wup_similarity(p, g, t) for p, g in zip(predictions, truths))
    return math.fsum(s if s >= threshold else 0.1 * s for s in scores) / len(predictions)


def accuracy(predictions: Sequence[str], truths: Sequence[str]) -> float:
    _check_lengths(predictions, truths)
    if not predictions:
        return 0.0
    return sum(p == g for p, g in zip(predictions, truths)) / len(predictions)


@dataclass
class EvalReport:
    acc: float
    wups09: float
    wups00: float
    per_category: dict[str, float] = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "acc": self.acc,
            "wups09": self.wups09,
            "wups00": self.wups00,
            "per_category": dict(sorted(self.per_category.items())),
        }

    def format(self) -> str:
        cats = "  ".join(f"{k}={v:.4f}" for k, v in sorted(self.per_category.items()))
        return f"ACC {self.acc:.4f}  WUPS0.9 {self.wups09:.4f}  WUPS0.0 {self.wups00:.4f}  [{cats}]"


def build_report(
    predictions: Sequence[str], truths: Sequence[str], categories: Sequence[str], t: Taxonomy
) -> EvalReport:
    _check_lengths(predictions, truths)
    _check_lengths(categories, truths)
    per_cat = {}
    for cat in sorted(set(categories)):
        idx = [i for i, c in enumerate(categories) if c == cat]
        per_cat[cat] = accuracy([predictions[i] for i in idx], [truths[i] for i in idx])
    return EvalReport(
        acc=accuracy(predictions, truths),
        wups09=wups_score(predictions, truths, 0.9, t),
        wups00=wups_score(predictions, truths, 0.0, t),
        per_category=per_cat,
    )
