"""Question tokenization, question dictionary and the LSTM question encoder."""

from __future__ import annotations

import unicodedata
from dataclasses import dataclass, fields
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import DimensionError, Tensor

BEGIN, END, OOV = "#B#", "#E#", "#OOV#"
RESERVED = (BEGIN, END, OOV)


class EmptyQuestionError(ValueError):
    pass


def tokenize(question: str) -> list[str]:
    """Lowercase, drop punctuation, split on whitespace, wrap in #B#/#E#."""
    text = "".join(ch for ch in question.lower() if not unicodedata.category(ch).startswith("P"))
    words = text.split()
    if not words:
        raise EmptyQuestionError(f"question {question!r} has no words")
    return [BEGIN, *words, END]


class Vocabulary:
    """Word <-> index map with the reserved symbols at 0, 1, 2."""

    def __init__(self, words: Iterable[str] = ()):
        self.words: list[str] = list(RESERVED)
        self.index: dict[str, int] = {w: i for i, w in enumerate(self.words)}
        for w in words:
            self.add(w)

    def add(self, word: str) -> int:
        if word not in self.index:
            self.index[word] = len(self.words)
            self.words.append(word)
        return self.index[word]

    def __len__(self) -> int:
        return len(self.words)

    def __contains__(self, word: str) -> bool:
        return word in self.index

    def __eq__(self, other) -> bool:
        return isinstance(other, Vocabulary) and self.words == other.words

    def lookup(self, word: str) -> int:
        return self.index.get(word, self.index[OOV])

    def encode(self, tokens: Sequence[str]) -> list[int]:
        return [self.lookup(t) for t in tokens]

    @classmethod
    def build(cls, questions: Iterable[str]) -> "Vocabulary":
        vocab = cls()
        for q in questions:
            for tok in tokenize(q):
                vocab.add(tok)
        return vocab

    def to_text(self) -> str:
        return "".join(w + "\n" for w in self.words)

    def save(self, path: str | Path) -> None:
        Path(path).write_text(self.to_text(), encoding="utf-8")

    @classmethod
    def load(cls, path: str | Path) -> "Vocabulary":
        words = Path(path).read_text(encoding="utf-8").splitlines()
        if tuple(words[:3]) != RESERVED:
            raise ValueError(f"{path}: first three entries must be {RESERVED}")
        return cls(words[3:])


@dataclass
class LstmParams:
    W_vi: Tensor
    W_hi: Tensor
    b_i: Tensor
    W_vf: Tensor
    W_hf: Tensor
    b_f: Tensor
    W_vo: Tensor
    W_ho: Tensor
    b_o: Tensor
    W_vg: Tensor
    W_hg: Tensor
    b_g: Tensor

    def __post_init__(self):
        d_h, d_e = self.W_vi.shape
        for gate in "ifog":
            if (
                getattr(self, f"W_v{gate}").shape != (d_h, d_e)
                or getattr(self, f"W_h{gate}").shape != (d_h, d_h)
                or getattr(self, f"b_{gate}").shape != (d_h,)
            ):
                raise DimensionError(f"inconsistent LSTM parameter shapes for gate {gate}")

    @property
    def hidden_size(self) -> int:
        return self.W_vi.shape[0]

    @property
    def input_size(self) -> int:
        return self.W_vi.shape[1]

    def named(self) -> dict[str, Tensor]:
        return {f.name: getattr(self, f.name) for f in fields(self)}

    @classmethod
    def zeros(cls, d_e: int, d_h: int) -> "LstmParams":
        kw = {}
        for gate in "ifog":
            kw[f"W_v{gate}"] = Tensor(np.zeros((d_h, d_e)), requires_grad=True)
            kw[f"W_h{gate}"] = Tensor(np.zeros((d_h, d_h)), requires_grad=True)
            kw[f"b_{gate}"] = Tensor(np.zeros(d_h), requires_grad=True)
        return cls(**kw)

    @classmethod
    def uniform(cls, d_e: int, d_h: int, rng: np.random.Generator, scale: float = 0.08) -> "LstmParams":
        p = cls.zeros(d_e, d_h)
        for name, t in p.named().items():
            if name.startswith("W_"):
                t.data[...] = rng.uniform(-scale, scale, size=t.shape)
        return p


def _gate(W_v: Tensor, v: Tensor, W_h: Tensor, h: Tensor, b: Tensor) -> Tensor:
    return ad.affine(W_v, v, b) + ad.matmul(h, W_h)


def lstm_step(
    v_t: Tensor, h_prev: Tensor, c_prev: Tensor, p: LstmParams, probe: dict | None = None
) -> tuple[Tensor, Tensor]:
    if v_t.shape[-1] != p.input_size or h_prev.shape[-1] != p.hidden_size or c_prev.shape != h_prev.shape:
        raise DimensionError(
            f"lstm_step: v{v_t.shape} h{h_prev.shape} c{c_prev.shape} vs params "
            f"({p.hidden_size}x{p.input_size})"
        )
    pre = {gate: _gate(getattr(p, f"W_v{gate}"), v_t, getattr(p, f"W_h{gate}"), h_prev, getattr(p, f"b_{gate}"))
           for gate in "ifog"}
    if probe is not None:
        for gate, t in pre.items():
            probe.setdefault(f"lstm_{gate}", []).append(t.data)
    i, f, o = ad.sigmoid(pre["i"]), ad.sigmoid(pre["f"]), ad.sigmoid(pre["o"])
    g = ad.tanh(pre["g"])
    c = f * c_prev + i * g
    h = o * ad.tanh(c)
    return h, c


def encode_question(tokens: Sequence[str], vocab: Vocabulary, emb: Tensor, p: LstmParams) -> Tensor:
    """Mean of the LSTM hidden states over every token (``#B#``/``#E#`` included)."""
    if not tokens:
        raise EmptyQuestionError("empty token list")
    ids = np.array(vocab.encode(tokens))
    return encode_batch(ids[None, :], np.array([len(ids)]), emb, p).reshape(p.hidden_size)


def encode_batch(
    ids: np.ndarray, lengths: np.ndarray, emb: Tensor, p: LstmParams, probe: dict | None = None
) -> Tensor:
    """Encode a right-padded (B, T) id matrix; padded steps leave the state untouched."""
    if emb.ndim != 2 or emb.shape[1] != p.input_size:
        raise DimensionError(f"embedding table {emb.shape} does not match LSTM input {p.input_size}")
    ids = np.asarray(ids)
    lengths = np.asarray(lengths)
    if np.any(lengths < 1):
        raise EmptyQuestionError("empty token list")
    B, T = ids.shape
    d_h = p.hidden_size
    h = ad.constant(np.zeros((B, d_h)))
    c = ad.constant(np.zeros((B, d_h)))
    total = None
    for t in range(T):
        live = (t < lengths)[:, None]
        v_t = ad.take_rows(emb, ids[:, t])
        h_new, c_new = lstm_step(v_t, h, c, p, probe)
        if live.all():
            h, c = h_new, c_new
            contrib = h
        else:
            h = ad.where_mask(live, h_new, h)
            c = ad.where_mask(live, c_new, c)
            contrib = ad.where_mask(live, h_new, ad.constant(np.zeros((B, d_h))))
        total = contrib if total is None else total + contrib
    return total * ad.constant((1.0 / lengths)[:, None])

