"""The full question-guided attention network and its parameter set."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .answer import AnswerParams, AnswerVocabulary, cross_entropy_loss, fuse, logits
from .attention import AttentionParams, attention_map, configure_kernel, reduce_channels, uniform_map, weight_features
from .autodiff import Tensor
from .question import LstmParams, Vocabulary, encode_batch


@dataclass
class ModelDims:
    grid: int = 3  # N
    channels: int = 183  # C
    reduced: int = 16  # C_r
    embed: int = 32  # d_e
    question: int = 64  # d_s, the LSTM state size
    hidden: int = 64  # d_h, the fused feature size
    kernel: int = 1  # CCK spatial extent
    attention: bool = True


@dataclass
class Batch:
    features: np.ndarray  # (B, C, N, N), already normalized
    ids: np.ndarray  # (B, T) right-padded question ids
    lengths: np.ndarray  # (B,)
    targets: np.ndarray | None = None  # (B,) answer indices


def _param(shape) -> Tensor:
    return Tensor(np.zeros(shape), requires_grad=True)


class ABCCNN:
    def __init__(self, dims: ModelDims, qvocab: Vocabulary, avocab: AnswerVocabulary):
        self.dims = dims
        self.qvocab = qvocab
        self.avocab = avocab
        d = dims
        cells = d.grid * d.grid
        self.embedding = _param((len(qvocab), d.embed))
        self.lstm = LstmParams.zeros(d.embed, d.question)
        ksize = d.channels * d.kernel * d.kernel
        self.att = AttentionParams(
            W_sk=_param((ksize, d.question)) if d.attention else None,
            b_k=_param(ksize) if d.attention else None,
            W_reduce=_param((d.reduced, d.channels, 1, 1)),
            kh=d.kernel,
            kw=d.kernel,
        )
        self.ans = AnswerParams(
            W_ih=_param((d.hidden, d.channels * cells)),
            W_rh=_param((d.hidden, d.reduced * cells)),
            W_sh=_param((d.hidden, d.question)),
            b_h=_param(d.hidden),
            W_ha=_param((len(avocab), d.hidden)),
            b_a=_param(len(avocab)),
        )
        # fixed per-channel scaling of the image features (mean stays 0)
        self.feature_mean = np.zeros(d.channels)
        self.feature_std = np.ones(d.channels)

    def named_parameters(self) -> dict[str, Tensor]:
        out = {"embedding": self.embedding}
        out.update({f"lstm.{k}": v for k, v in self.lstm.named().items()})
        if self.att.W_sk is not None:
            out["att.W_sk"] = self.att.W_sk
            out["att.b_k"] = self.att.b_k
        out["att.W_reduce"] = self.att.W_reduce
        for k in ("W_ih", "W_rh", "W_sh", "b_h", "W_ha", "b_a"):
            out[f"ans.{k}"] = getattr(self.ans, k)
        return out

    def parameters(self) -> list[Tensor]:
        return list(self.named_parameters().values())

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.zero_grad()

    def normalize(self, raw: np.ndarray) -> np.ndarray:
        """Scale raw (…, C, N, N) cell features by the stored per-channel statistics."""
        shape = (-1, 1, 1)
        return (raw - self.feature_mean.reshape(shape)) / self.feature_std.reshape(shape)

    def fit_normalizer(self, raw: np.ndarray, floor: float = 1e-6) -> None:
        """Per-channel std over every training cell, no centering; constant channels keep scale 1."""
        flat = np.moveaxis(raw, 1, 0).reshape(raw.shape[1], -1)
        std = flat.std(axis=1)
        self.feature_mean = np.zeros(raw.shape[1])
        self.feature_std = np.where(std > floor, std, 1.0)

    def forward(self, batch: Batch, probe: dict | None = None) -> dict[str, Tensor]:
        I = ad.constant(batch.features)
        s = encode_batch(batch.ids, batch.lengths, self.embedding, self.lstm, probe)
        if self.dims.attention:
            k = configure_kernel(s, self.att)
            if probe is not None:
                probe["cck"] = [ad.affine(self.att.W_sk, s, self.att.b_k).data]
            m = attention_map(k, I)
        else:
            m = uniform_map((I.shape[0], I.shape[2], I.shape[3]))
        I_r = reduce_channels(weight_features(I, m), self.att)
        h = fuse(I, I_r, s, self.ans)
        z = logits(h, self.ans)
        if probe is not None:
            probe["reduce"] = [I_r.data]
            flat = lambda x: x.reshape((x.shape[0], -1))
            pre = (
                ad.affine(self.ans.W_ih, flat(I), self.ans.b_h)
                + ad.matmul(flat(I_r), self.ans.W_rh)
                + ad.matmul(s, self.ans.W_sh)
            )
            probe["fuse"] = [pre.data]
            probe["classify"] = [z.data]
        out = {"s": s, "m": m, "h": h, "logits": z, "probs": ad.softmax(z)}
        if batch.targets is not None:
            out["loss"] = cross_entropy_loss(out["probs"], batch.targets)
        return out

    def make_batch(self, features: np.ndarray, questions: list[list[str]], answers=None) -> Batch:
        """Batch from raw features and tokenized questions (answers optional)."""
        ids = [self.qvocab.encode(q) for q in questions]
        T = max(len(x) for x in ids)
        mat = np.zeros((len(ids), T), dtype=np.int64)
        for i, x in enumerate(ids):
            mat[i, : len(x)] = x
        targets = None
        if answers is not None:
            targets = np.array([self.avocab.index[a] for a in answers], dtype=np.int64)
        return Batch(self.normalize(features), mat, np.array([len(x) for x in ids]), targets)
