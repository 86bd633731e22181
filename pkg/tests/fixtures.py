"""Small synthetic models, splits and the primitive gradient table for fast tests."""

import numpy as np

from abccnn import autodiff as ad
from abccnn.answer import AnswerVocabulary
from abccnn.autodiff import Tensor
from abccnn.model import ABCCNN, ModelDims
from abccnn.question import Vocabulary, tokenize
from abccnn.shapeworld import QAItem
from abccnn.training import Split

MICRO_QUESTIONS = ["what color is the circle", "where is the red square", "how many squares are there"]
MICRO_ANSWERS = ["red", "blue", "green", "top", "left", "two"]


def micro_model(seed: int = 0, attention: bool = True, kernel: int = 1, scale: float = 0.3) -> ABCCNN:
    """N=3, C=8, C_r=4, d_e=d_h=d_s=8, A=6, every parameter drawn from N(0, scale^2)."""
    dims = ModelDims(grid=3, channels=8, reduced=4, embed=8, question=8, hidden=8, kernel=kernel, attention=attention)
    model = ABCCNN(dims, Vocabulary.build(MICRO_QUESTIONS), AnswerVocabulary(MICRO_ANSWERS))
    rng = np.random.default_rng(seed)
    for p in model.parameters():
        p.data[...] = rng.normal(scale=scale, size=p.shape)
    return model


def micro_batch(model: ABCCNN, seed: int = 1, size: int = 3):
    rng = np.random.default_rng(seed)
    feats = rng.uniform(0, 1, size=(size, model.dims.channels, 3, 3))
    qs = [tokenize(MICRO_QUESTIONS[i % len(MICRO_QUESTIONS)]) for i in range(size)]
    answers = [MICRO_ANSWERS[i % len(MICRO_ANSWERS)] for i in range(size)]
    return model.make_batch(feats, qs, answers)


def toy_split(n: int, seed: int = 0, channels: int = 8) -> Split:
    """Random features with questions and answers cycling through the micro vocabularies."""
    rng = np.random.default_rng(seed)
    items = [
        QAItem(f"img{i}.ppm", MICRO_QUESTIONS[i % 3], MICRO_ANSWERS[i % 6], "object", [(0, 0)]) for i in range(n)
    ]
    feats = rng.uniform(0, 1, size=(n, channels, 3, 3))
    return Split(items, feats, [tokenize(it.question) for it in items])


PRIMITIVES = {
    "affine": lambda rng, ins: ad.affine(ins[0], ins[1], ins[2]),
    "conv2d_same": lambda rng, ins: ad.conv2d_same(ins[3], ins[4]),
    "conv2d_same_per_item": lambda rng, ins: ad.conv2d_same(ins[8], ins[9]),
    "sigmoid": lambda rng, ins: ad.activation("sigmoid", ins[1]),
    "tanh": lambda rng, ins: ad.activation("tanh", ins[1]),
    "scaled_tanh": lambda rng, ins: ad.activation("scaled_tanh", ins[1]),
    "softmax_spatial": lambda rng, ins: ad.softmax_spatial(ins[5]),
    "channel_scale": lambda rng, ins: ad.channel_scale(ins[3], ins[6]),
    "softmax": lambda rng, ins: ad.softmax(ins[1]),
    "take_rows": lambda rng, ins: ad.take_rows(ins[0], np.array([0, 2, 2, 1]) % ins[0].shape[0]),
    "pick_log": lambda rng, ins: ad.log(ad.pick(ad.softmax(ins[7]), np.array([0, 1])), floor=1e-12),
    "add_broadcast": lambda rng, ins: ad.add(ins[0], ins[1]),
    "mul_broadcast": lambda rng, ins: ad.mul(ins[0], ins[1]),
    "neg": lambda rng, ins: ad.neg(ins[3]),
    "scale": lambda rng, ins: ad.scale(ins[3], -2.5),
    "log": lambda rng, ins: ad.log(ad.add(ad.mul(ins[5], ins[5]), ad.constant(0.5))),
    "reshape": lambda rng, ins: ad.reshape(ins[3], (-1,)),
    "sum_all": lambda rng, ins: ad.sum_all(ins[8]),
    "mean_all": lambda rng, ins: ad.mean_all(ins[8]),
    "matmul": lambda rng, ins: ad.matmul(ad.reshape(ins[1], (1, -1)), ins[0]),
    "where_mask": lambda rng, ins: ad.where_mask(np.arange(ins[5].data.size).reshape(ins[5].shape) % 2 == 0, ins[5], ins[6]),
}


def random_primitive_inputs(rng):
    """Leaves indexed by PRIMITIVES: affine, conv (shared and per-item), spatial maps, logits."""
    o, i = rng.integers(1, 4), rng.integers(1, 5)
    C, H, W = rng.integers(1, 3), rng.integers(1, 4), rng.integers(1, 4)
    k = int(rng.choice([1, 3]))
    shapes = [(o, i), (i,), (o,), (C, H, W), (2, C, k, k), (H, W), (H, W), (2, 3), (2, C, H, W), (2, 1, C, k, k)]
    return [Tensor(rng.normal(size=s), requires_grad=True) for s in shapes]
