"""Fusion of image, attended features and question into a single-word answer."""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import DimensionError, Tensor

PROB_FLOOR = 1e-12


class AnswerVocabulary:
    """Answer dictionary; kept separate from the question dictionary."""

    def __init__(self, words: Iterable[str] = ()):
        self.words: list[str] = []
        self.index: dict[str, int] = {}
        for w in words:
            if w not in self.index:
                self.index[w] = len(self.words)
                self.words.append(w)

    def __len__(self) -> int:
        return len(self.words)

    def __contains__(self, word: str) -> bool:
        return word in self.index

    def __eq__(self, other) -> bool:
        return isinstance(other, AnswerVocabulary) and self.words == other.words

    def to_text(self) -> str:
        return "".join(w + "\n" for w in self.words)

    def save(self, path: str | Path) -> None:
        Path(path).write_text(self.to_text(), encoding="utf-8")

    @classmethod
    def load(cls, path: str | Path) -> "AnswerVocabulary":
        return cls(Path(path).read_text(encoding="utf-8").splitlines())


@dataclass
class AnswerParams:
    W_ih: Tensor  # (d_h, C*N*N)
    W_rh: Tensor  # (d_h, C_r*N*N)
    W_sh: Tensor  # (d_h, d_s)
    b_h: Tensor
    W_ha: Tensor  # (A, d_h)
    b_a: Tensor

    def __post_init__(self):
        d_h = self.b_h.shape[0]
        if any(w.shape[0] != d_h for w in (self.W_ih, self.W_rh, self.W_sh)) or self.W_ha.shape[1] != d_h:
            raise DimensionError("inconsistent fused feature size")
        if self.b_a.shape != (self.W_ha.shape[0],) or self.W_ha.shape[0] < 2:
            raise DimensionError("answer classifier needs at least two answers")


def _flatten(x: Tensor, batched: bool) -> Tensor:
    return x.reshape((x.shape[0], -1) if batched else (-1,))


def fuse(I: Tensor, I_r: Tensor, s: Tensor, p: AnswerParams) -> Tensor:
    """g(W_ih I + W_rh I_r + W_sh s + b_h) on channel-major flattened maps."""
    batched = s.ndim == 2
    pre = ad.affine(p.W_ih, _flatten(I, batched), p.b_h)
    pre = pre + ad.matmul(_flatten(I_r, batched), p.W_rh) + ad.matmul(s, p.W_sh)
    return ad.scaled_tanh(pre)


def logits(h: Tensor, p: AnswerParams) -> Tensor:
    return ad.affine(p.W_ha, h, p.b_a)


def predict(h: Tensor, p: AnswerParams, av: AnswerVocabulary) -> tuple[str, np.ndarray]:
    probs = ad.softmax(logits(h, p)).data
    # np.argmax returns the first maximum, i.e. the lowest index on ties
    return av.words[int(np.argmax(probs))], probs


def cross_entropy_loss(probs: Tensor, target: int | Sequence[int] | np.ndarray) -> Tensor:
    """-log p[target] with p clamped at 1e-12; batch mean for (B, A) input."""
    target = np.asarray(target)
    A = probs.shape[-1]
    if np.any(target < 0) or np.any(target >= A):
        raise IndexError(f"target index out of range for {A} answers")
    if probs.ndim == 2 and target.shape != (probs.shape[0],):
        raise DimensionError("one target per batch row required")
    nll = ad.neg(ad.log(ad.pick(probs, target), floor=PROB_FLOOR))
    return nll if probs.ndim == 1 else ad.mean_all(nll)
