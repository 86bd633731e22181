"""End-to-end training: data loading, initialization, adadelta, evaluation, checkpoints."""

from __future__ import annotations

import csv
import hashlib
import io
import json
import logging
import struct
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import autodiff as ad
from .answer import AnswerVocabulary
from .autodiff import NumericalError, Tensor
from .metrics import EvalReport, Taxonomy, build_report
from .model import ABCCNN, Batch, ModelDims
from .question import Vocabulary, tokenize
from .shapeworld import QAItem, cell_features, read_image, read_jsonl

log = logging.getLogger(__name__)


class CompatibilityError(ValueError):
    """Checkpoint and dataset disagree (vocabularies, grid or feature size)."""


@dataclass
class TrainConfig:
    batch_size: int = 64
    lr: float = 0.1
    epochs: int = 50
    seed: int = 0
    rho: float = 0.95
    eps: float = 1e-6
    init_passes: int = 10
    dims: ModelDims = field(default_factory=ModelDims)

    def __post_init__(self):
        if isinstance(self.dims, dict):
            self.dims = ModelDims(**self.dims)
        if self.batch_size < 1 or self.epochs < 0:
            raise ValueError("batch size must be >= 1 and epochs >= 0")
        d = self.dims
        if min(d.grid, d.channels, d.reduced, d.embed, d.question, d.hidden, d.kernel) < 1:
            raise ValueError("model dimensions must be positive")


# ---------------------------------------------------------------- data


@dataclass
class Split:
    items: list[QAItem]
    features: np.ndarray  # (n, C, N, N) raw cell features
    tokens: list[list[str]]

    def __len__(self) -> int:
        return len(self.items)

    @property
    def answers(self) -> list[str]:
        return [it.answer for it in self.items]

    @property
    def categories(self) -> list[str]:
        return [it.category for it in self.items]

    def subset(self, idx: Sequence[int]) -> "Split":
        return Split([self.items[i] for i in idx], self.features[list(idx)], [self.tokens[i] for i in idx])


def load_split(data_dir: str | Path, split: str, grid: int = 3, cache: dict | None = None) -> Split:
    data_dir = Path(data_dir)
    items = read_jsonl(data_dir / f"{split}.jsonl")
    cache = {} if cache is None else cache
    feats = []
    for it in items:
        if it.image_path not in cache:
            cache[it.image_path] = cell_features(read_image(data_dir / it.image_path), grid)
        feats.append(cache[it.image_path])
    features = np.stack(feats) if feats else np.zeros((0, 0, grid, grid))
    return Split(items, features, [tokenize(it.question) for it in items])


def dataset_vocabularies(data_dir: str | Path, train: Split | None = None) -> tuple[Vocabulary, AnswerVocabulary]:
    """Dictionaries shipped with the dataset, or built from its train split."""
    data_dir = Path(data_dir)
    qpath, apath = data_dir / "question_vocab.txt", data_dir / "answer_vocab.txt"
    if qpath.exists() and apath.exists():
        return Vocabulary.load(qpath), AnswerVocabulary.load(apath)
    train = train or load_split(data_dir, "train")
    return Vocabulary.build(it.question for it in train.items), AnswerVocabulary(train.answers)


def vocab_hash(vocab) -> str:
    return hashlib.sha256(vocab.to_text().encode("utf-8")).hexdigest()


# ---------------------------------------------------------------- optimizer


class Adadelta:
    """Adadelta with a global scale on the update (the "learning rate")."""

    def __init__(self, params: Sequence[Tensor], lr: float = 0.1, rho: float = 0.95, eps: float = 1e-6):
        self.params = list(params)
        self.lr, self.rho, self.eps = lr, rho, eps
        self.sq_grad = [np.zeros_like(p.data) for p in self.params]
        self.sq_delta = [np.zeros_like(p.data) for p in self.params]

    def step(self, grads: Sequence[np.ndarray] | None = None) -> None:
        grads = [p.grad for p in self.params] if grads is None else list(grads)
        if len(grads) != len(self.params):
            raise ValueError("one gradient per parameter required")
        rho, eps = self.rho, self.eps
        for p, g, eg, ed in zip(self.params, grads, self.sq_grad, self.sq_delta):
            if g.shape != p.data.shape:
                raise ad.DimensionError(f"gradient {g.shape} does not match parameter {p.data.shape}")
            eg *= rho
            eg += (1 - rho) * g * g
            delta = -np.sqrt(ed + eps) / np.sqrt(eg + eps) * g
            ed *= rho
            ed += (1 - rho) * delta * delta
            p.data += self.lr * delta


def adadelta_step(state: Adadelta, params: Sequence[Tensor], grads: Sequence[np.ndarray]) -> None:
    if [id(p) for p in params] != [id(p) for p in state.params]:
        raise ValueError("optimizer state belongs to a different parameter list")
    state.step(grads)


# ---------------------------------------------------------------- initialization

# layer name -> parameter names scaled together
_LAYERS = {
    "lstm_i": ("lstm.W_vi", "lstm.W_hi"),
    "lstm_f": ("lstm.W_vf", "lstm.W_hf"),
    "lstm_o": ("lstm.W_vo", "lstm.W_ho"),
    "lstm_g": ("lstm.W_vg", "lstm.W_hg"),
    "cck": ("att.W_sk",),
    "reduce": ("att.W_reduce",),
    "fuse": ("ans.W_ih", "ans.W_rh", "ans.W_sh"),
    "classify": ("ans.W_ha",),
}


def layer_stds(model: ABCCNN, batch: Batch) -> dict[str, float]:
    probe: dict = {}
    model.forward(batch, probe)
    return {k: float(np.std(np.concatenate([a.ravel() for a in v]))) for k, v in probe.items()}


def init_params(model: ABCCNN, batch: Batch, rng: np.random.Generator, max_passes: int = 10) -> dict[str, float]:
    """Scaled-uniform draw, then per-layer rescaling until pre-activation std is in [0.9, 1.1].

    Biases are zero. Returns the final per-layer standard deviations.
    """
    if batch.features.shape[0] == 0:
        raise ValueError("empty calibration batch")
    params = model.named_parameters()
    for name, p in params.items():
        if name == "embedding":
            p.data[...] = rng.uniform(-0.08, 0.08, size=p.shape)
        elif name.split(".")[-1].startswith("b"):
            p.data[...] = 0.0
        else:
            fan_in = int(np.prod(p.shape[1:]))
            lim = np.sqrt(3.0 / fan_in)
            p.data[...] = rng.uniform(-lim, lim, size=p.shape)
    stds: dict[str, float] = {}
    for _ in range(max_passes):
        # forward order matters: later layers are measured after earlier rescaling
        for layer, names in _LAYERS.items():
            s = layer_stds(model, batch).get(layer)
            if s is None:
                continue
            if not np.isfinite(s) or s <= 0:
                raise NumericalError(f"degenerate activations in layer {layer}")
            for n in names:
                params[n].data /= s
        stds = layer_stds(model, batch)
        if all(0.9 <= s <= 1.1 for s in stds.values()):
            break
    else:
        log.warning("init did not reach unit activation scale: %s", stds)
    return stds


# ---------------------------------------------------------------- inference and evaluation


def batches(n: int, size: int):
    for start in range(0, n, size):
        yield np.arange(start, min(n, start + size))


def infer(model: ABCCNN, split: Split, batch_size: int = 256, jobs: int = 1):
    """Predicted answers, probability rows and attention maps for every item."""

    def run(idx):
        b = model.make_batch(split.features[idx], [split.tokens[i] for i in idx])
        out = model.forward(b)
        return out["probs"].data, out["m"].data

    chunks = list(batches(len(split), batch_size))
    if jobs > 1:
        with ThreadPoolExecutor(max_workers=jobs) as pool:
            results = list(pool.map(run, chunks))
    else:
        results = [run(c) for c in chunks]
    if not results:
        return [], np.zeros((0, len(model.avocab))), np.zeros((0, model.dims.grid, model.dims.grid))
    probs = np.concatenate([r[0] for r in results])
    maps = np.concatenate([r[1] for r in results])
    preds = [model.avocab.words[i] for i in probs.argmax(axis=1)]
    return preds, probs, maps


def evaluate(model: ABCCNN, split: Split, taxonomy: Taxonomy, jobs: int = 1) -> EvalReport:
    preds, _, _ = infer(model, split, jobs=jobs)
    return build_report(preds, split.answers, split.categories, taxonomy)


# ---------------------------------------------------------------- training


@dataclass
class History:
    rows: list[dict] = field(default_factory=list)

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["epoch", "loss", "train_acc", "val_acc"])
        for r in self.rows:
            w.writerow([r["epoch"], repr(r["loss"]), repr(r["train_acc"]), repr(r["val_acc"])])
        return buf.getvalue()


def build_model(cfg: TrainConfig, train: Split, qvocab: Vocabulary, avocab: AnswerVocabulary) -> ABCCNN:
    dims = cfg.dims
    if train.features.shape[1] != dims.channels:
        dims = ModelDims(**{**asdict(dims), "channels": int(train.features.shape[1])})
    model = ABCCNN(dims, qvocab, avocab)
    model.fit_normalizer(train.features)
    rng = np.random.default_rng([cfg.seed, 0])
    calib = rng.choice(len(train), size=min(len(train), 256), replace=False)
    calib_batch = model.make_batch(train.features[calib], [train.tokens[i] for i in calib])
    init_params(model, calib_batch, rng, cfg.init_passes)
    return model


def train(
    cfg: TrainConfig,
    train_split: Split,
    val_split: Split | None = None,
    qvocab: Vocabulary | None = None,
    avocab: AnswerVocabulary | None = None,
    on_epoch: Callable[[int, ABCCNN, History], None] | None = None,
) -> tuple[ABCCNN, History]:
    if len(train_split) == 0:
        raise ValueError("empty training set")
    qvocab = qvocab or Vocabulary.build(it.question for it in train_split.items)
    avocab = avocab or AnswerVocabulary(train_split.answers)
    model = build_model(cfg, train_split, qvocab, avocab)
    opt = Adadelta(model.parameters(), cfg.lr, cfg.rho, cfg.eps)
    sampler = np.random.default_rng([cfg.seed, 1])
    n = len(train_split)
    steps = max(1, -(-n // cfg.batch_size))
    targets_all = np.array([avocab.index[a] for a in train_split.answers])
    normalized = model.normalize(train_split.features)
    hist = History()
    for epoch in range(1, cfg.epochs + 1):
        losses = []
        for _ in range(steps):
            idx = sampler.integers(0, n, size=cfg.batch_size)
            b = model.make_batch(train_split.features[idx], [train_split.tokens[i] for i in idx])
            b.features = normalized[idx]
            b.targets = targets_all[idx]
            model.zero_grad()
            loss = model.forward(b)["loss"]
            if not np.isfinite(loss.item()):
                raise NumericalError(f"non-finite loss at epoch {epoch}")
            loss.backward()
            opt.step()
            losses.append(loss.item())
        train_acc = evaluate_accuracy(model, train_split)
        val_acc = evaluate_accuracy(model, val_split) if val_split is not None and len(val_split) else float("nan")
        hist.rows.append(
            {"epoch": epoch, "loss": float(np.mean(losses)), "train_acc": train_acc, "val_acc": val_acc}
        )
        log.info("epoch %d loss %.4f train %.4f val %.4f", epoch, hist.rows[-1]["loss"], train_acc, val_acc)
        if on_epoch is not None:
            on_epoch(epoch, model, hist)
    return model, hist


def evaluate_accuracy(model: ABCCNN, split: Split) -> float:
    preds, _, _ = infer(model, split)
    return float(np.mean([p == a for p, a in zip(preds, split.answers)]))


# ---------------------------------------------------------------- checkpoints

MAGIC = b"ABCCNN-CKPT\x00"


def save_checkpoint(model: ABCCNN, cfg: TrainConfig, path: str | Path, extra: dict | None = None) -> None:
    header = {
        "config": asdict(cfg),
        "dims": asdict(model.dims),
        "question_vocab": model.qvocab.words[3:],
        "answer_vocab": model.avocab.words,
        "question_vocab_sha256": vocab_hash(model.qvocab),
        "answer_vocab_sha256": vocab_hash(model.avocab),
        **(extra or {}),
    }
    tensors = dict(model.named_parameters())
    tensors["feature_mean"] = model.feature_mean
    tensors["feature_std"] = model.feature_std
    buf = io.BytesIO()
    buf.write(MAGIC)
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    buf.write(struct.pack("<I", len(blob)))
    buf.write(blob)
    buf.write(struct.pack("<I", len(tensors)))
    for name, t in tensors.items():
        raw = name.encode("utf-8")
        buf.write(struct.pack("<I", len(raw)))
        buf.write(raw)
        ad.write_tensor(buf, t)
    tmp = Path(str(path) + ".tmp")
    tmp.write_bytes(buf.getvalue())
    tmp.replace(path)


def load_checkpoint(path: str | Path) -> tuple[ABCCNN, TrainConfig, dict]:
    with open(path, "rb") as fh:
        if fh.read(len(MAGIC)) != MAGIC:
            raise ValueError(f"{path} is not a checkpoint")
        (hlen,) = struct.unpack("<I", fh.read(4))
        header = json.loads(fh.read(hlen).decode("utf-8"))
        (count,) = struct.unpack("<I", fh.read(4))
        tensors = {}
        for _ in range(count):
            (nlen,) = struct.unpack("<I", fh.read(4))
            name = fh.read(nlen).decode("utf-8")
            tensors[name] = ad.read_tensor(fh)
    cfg = TrainConfig(**header["config"])
    model = ABCCNN(ModelDims(**header["dims"]), Vocabulary(header["question_vocab"]), AnswerVocabulary(header["answer_vocab"]))
    for name, p in model.named_parameters().items():
        if tensors[name].shape != p.shape:
            raise ValueError(f"checkpoint tensor {name} has shape {tensors[name].shape}, expected {p.shape}")
        p.data[...] = tensors[name]
    model.feature_mean = tensors["feature_mean"].copy()
    model.feature_std = tensors["feature_std"].copy()
    return model, cfg, header


def check_compatible(header: dict, qvocab: Vocabulary, avocab: AnswerVocabulary) -> None:
    if header["question_vocab_sha256"] != vocab_hash(qvocab) or header["answer_vocab_sha256"] != vocab_hash(avocab):
        raise CompatibilityError("checkpoint vocabularies do not match the dataset")
