import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from abccnn import autodiff as ad
from abccnn.answer import AnswerVocabulary
from abccnn.autodiff import NumericalError, Tensor
from abccnn.metrics import Taxonomy
from abccnn.model import ModelDims
from abccnn.question import Vocabulary
from abccnn.shapeworld import GeneratorConfig, write_dataset
from abccnn.training import (
    Adadelta,
    CompatibilityError,
    TrainConfig,
    adadelta_step,
    build_model,
    check_compatible,
    dataset_vocabularies,
    evaluate,
    infer,
    init_params,
    layer_stds,
    load_checkpoint,
    load_split,
    save_checkpoint,
    train,
)
from fixtures import MICRO_ANSWERS, micro_batch, micro_model, toy_split
from oracles import adadelta_trace

MICRO = dict(grid=3, channels=8, reduced=4, embed=8, question=8, hidden=8)


# ---------------------------------------------------------------- adadelta


def test_adadelta_first_step():
    x = Tensor(np.array([3.0]), requires_grad=True)
    opt = Adadelta([x], lr=1.0)
    opt.step([np.array([1.0])])
    assert opt.sq_grad[0][0] == pytest.approx(0.05, abs=1e-15)
    dx = x.data[0] - 3.0
    assert dx == pytest.approx(-math.sqrt(1e-6 / 0.050001), abs=1e-12)
    assert round(dx, 7) == -0.0044721


def test_adadelta_two_step_trace_on_square():
    x = Tensor(np.array([1.5]), requires_grad=True)
    opt = Adadelta([x], lr=1.0)
    got = []
    for _ in range(2):
        opt.step([2 * x.data])
        got.append(x.data[0])
    expected = adadelta_trace(1.5, 2, lambda v: 2 * v)
    assert got == pytest.approx(expected, abs=1e-12)


def test_adadelta_lr_scales_update_only():
    xs = adadelta_trace(1.5, 3, lambda v: 2 * v, lr=0.1)
    x = Tensor(np.array([1.5]), requires_grad=True)
    opt = Adadelta([x], lr=0.1)
    for _ in range(3):
        opt.step([2 * x.data])
    assert x.data[0] == pytest.approx(xs[-1], abs=1e-12)


def test_adadelta_zero_gradient():
    x = Tensor(np.array([1.0, -2.0]), requires_grad=True)
    opt = Adadelta([x])
    opt.step([np.array([1.0, 1.0])])
    before = x.data.copy()
    eg, ed = opt.sq_grad[0].copy(), opt.sq_delta[0].copy()
    opt.step([np.zeros(2)])
    assert np.array_equal(x.data, before)
    np.testing.assert_allclose(opt.sq_grad[0], 0.95 * eg, rtol=1e-15)
    np.testing.assert_allclose(opt.sq_delta[0], 0.95 * ed, rtol=1e-15)


@settings(max_examples=100, deadline=None)
@given(st.floats(-1e3, 1e3).filter(lambda v: abs(v) > 1e-6))
def test_adadelta_step_decreases_half_square(x0):
    x = Tensor(np.array([x0]), requires_grad=True)
    opt = Adadelta([x])
    opt.step([x.data.copy()])
    assert 0.5 * x.data[0] ** 2 < 0.5 * x0**2


def test_adadelta_shape_mismatch():
    x = Tensor(np.zeros(3), requires_grad=True)
    opt = Adadelta([x])
    with pytest.raises(ad.DimensionError):
        opt.step([np.zeros(4)])
    with pytest.raises(ValueError):
        adadelta_step(opt, [Tensor(np.zeros(3), requires_grad=True)], [np.zeros(3)])


def test_adadelta_state_nonnegative():
    rng = np.random.default_rng(0)
    x = Tensor(rng.normal(size=(4, 5)), requires_grad=True)
    opt = Adadelta([x])
    for _ in range(20):
        opt.step([rng.normal(size=(4, 5))])
    assert (opt.sq_grad[0] >= 0).all() and (opt.sq_delta[0] >= 0).all()


# ---------------------------------------------------------------- model


@pytest.mark.parametrize("attention,kernel", [(True, 1), (True, 3), (False, 1)], ids=["att", "att-3x3", "no-att"])
def test_end_to_end_gradients(attention, kernel):
    model = micro_model(attention=attention, kernel=kernel)
    batch = micro_batch(model)
    f = lambda: model.forward(batch)["loss"]
    # 3x3 kernels have border taps with gradients near 1e-8, where central differences
    # at h=1e-4 carry only a few significant digits; compare those absolutely
    floor = 1e-6 if kernel > 1 else 1e-8
    for name, p in model.named_parameters().items():
        assert ad.grad_check(f, p, floor=floor) < 1e-4, name


def test_no_att_differs_only_by_cck_parameters():
    att = micro_model(attention=True).named_parameters()
    no = micro_model(attention=False).named_parameters()
    assert set(att) - set(no) == {"att.W_sk", "att.b_k"}
    assert sum(p.data.size for p in att.values()) - sum(p.data.size for p in no.values()) == 8 * 8 + 8


def test_no_att_map_is_uniform():
    model = micro_model(attention=False)
    m = model.forward(micro_batch(model))["m"].data
    np.testing.assert_allclose(m, 1 / 9, atol=1e-15)


def test_gradients_cleared_between_batches():
    model = micro_model()
    batch = micro_batch(model)
    grads = []
    for _ in range(2):
        model.zero_grad()
        model.forward(batch)["loss"].backward()
        grads.append([p.grad.copy() for p in model.parameters()])
    for a, b in zip(*grads):
        assert np.array_equal(a, b)


def test_batched_forward_matches_single_items():
    model = micro_model()
    batch = micro_batch(model, size=3)
    out = model.forward(batch)["probs"].data
    for i in range(3):
        single = model.make_batch(np.zeros((1, 8, 3, 3)), [["#B#"]])
        single.features = batch.features[i : i + 1]
        single.ids = batch.ids[i : i + 1, : batch.lengths[i]]
        single.lengths = batch.lengths[i : i + 1]
        np.testing.assert_allclose(model.forward(single)["probs"].data[0], out[i], rtol=1e-12, atol=1e-15)


# ---------------------------------------------------------------- initialization


def _init_setup(seed=0):
    split = toy_split(64, seed=3)
    cfg = TrainConfig(seed=seed, dims=ModelDims(**MICRO))
    return cfg, split


def test_init_unit_activation_scale_and_zero_biases():
    cfg, split = _init_setup()
    model = build_model(cfg, split, Vocabulary.build(it.question for it in split.items), AnswerVocabulary(split.answers))
    batch = model.make_batch(split.features, split.tokens)
    stds = layer_stds(model, batch)
    assert set(stds) >= {"lstm_i", "lstm_f", "lstm_o", "lstm_g", "cck", "reduce", "fuse", "classify"}
    for layer, s in stds.items():
        assert 0.9 <= s <= 1.1, layer
    for name, p in model.named_parameters().items():
        if name.split(".")[-1].startswith("b"):
            assert not p.data.any(), name


def test_init_deterministic():
    cfg, split = _init_setup()
    qv, av = Vocabulary.build(it.question for it in split.items), AnswerVocabulary(split.answers)
    a, b = build_model(cfg, split, qv, av), build_model(cfg, split, qv, av)
    for (n, p), q in zip(a.named_parameters().items(), b.parameters()):
        assert np.array_equal(p.data, q.data), n
    c = build_model(TrainConfig(seed=1, dims=ModelDims(**MICRO)), split, qv, av)
    assert not np.array_equal(a.ans.W_ha.data, c.ans.W_ha.data)


def test_init_rejects_empty_batch():
    model = micro_model()
    batch = micro_batch(model)
    batch.features = batch.features[:0]
    with pytest.raises(ValueError):
        init_params(model, batch, np.random.default_rng(0))


# ---------------------------------------------------------------- training and evaluation


def test_memorizes_single_item():
    split = toy_split(1)
    cfg = TrainConfig(epochs=200, seed=0, dims=ModelDims(**MICRO))
    model, hist = train(cfg, split, avocab=AnswerVocabulary(MICRO_ANSWERS))
    assert hist.rows[-1]["train_acc"] == 1.0
    t = Taxonomy([("thing", "ROOT"), *[(w, "thing") for w in MICRO_ANSWERS]])
    r = evaluate(model, split, t)
    assert r.acc == 1.0 and r.wups09 == 1.0 and r.wups00 == 1.0


def test_untrained_uniform_model_is_at_chance():
    split = toy_split(400, seed=5)
    for i, it in enumerate(split.items):
        it.answer = MICRO_ANSWERS[i % 4]
    model = micro_model()
    model.avocab = AnswerVocabulary(MICRO_ANSWERS[:4])
    model.ans.W_ha.data = np.zeros((4, 8))
    model.ans.b_a.data = np.zeros(4)
    preds, probs, _ = infer(model, split)
    np.testing.assert_allclose(probs, 0.25, rtol=1e-15)
    assert np.mean([p == a for p, a in zip(preds, split.answers)]) == 0.25


def test_infer_parallel_matches_serial():
    model = micro_model()
    split = toy_split(50, seed=6)
    p1, q1, m1 = infer(model, split, batch_size=7, jobs=1)
    p2, q2, m2 = infer(model, split, batch_size=7, jobs=3)
    assert p1 == p2 and np.array_equal(q1, q2) and np.array_equal(m1, m2)


def test_empty_training_set():
    with pytest.raises(ValueError):
        train(TrainConfig(epochs=1, dims=ModelDims(**MICRO)), toy_split(0))


def test_non_finite_loss_aborts():
    split = toy_split(20)
    with np.errstate(all="ignore"), pytest.raises(NumericalError):
        train(TrainConfig(epochs=3, lr=1e300, dims=ModelDims(**MICRO)), split)


def test_config_validation():
    with pytest.raises(ValueError):
        TrainConfig(batch_size=0)
    with pytest.raises(ValueError):
        TrainConfig(dims={**MICRO, "hidden": 0})


@pytest.fixture(scope="module")
def small_dataset(tmp_path_factory):
    root = tmp_path_factory.mktemp("sw")
    write_dataset(GeneratorConfig(seed=7, n_train=300, n_test=60), root)
    return root


def test_first_epoch_lowers_loss(small_dataset):
    tr = load_split(small_dataset, "train")
    qv, av = dataset_vocabularies(small_dataset)
    cfg = TrainConfig(epochs=1, seed=1)
    fresh = build_model(cfg, tr, qv, av)
    initial = fresh.forward(fresh.make_batch(tr.features, tr.tokens, tr.answers))["loss"].item()
    model, hist = train(cfg, tr, None, qv, av)
    after = model.forward(model.make_batch(tr.features, tr.tokens, tr.answers))["loss"].item()
    assert after < initial
    assert math.isnan(hist.rows[0]["val_acc"])


def test_training_deterministic_checkpoints(small_dataset, tmp_path):
    tr = load_split(small_dataset, "train")
    te = load_split(small_dataset, "test")
    qv, av = dataset_vocabularies(small_dataset)
    cfg = TrainConfig(epochs=2, seed=4, dims=ModelDims(reduced=4, embed=8, question=8, hidden=8))
    blobs, csvs = [], []
    for run in range(2):
        model, hist = train(cfg, tr, te, qv, av)
        save_checkpoint(model, cfg, tmp_path / f"{run}.ckpt")
        blobs.append((tmp_path / f"{run}.ckpt").read_bytes())
        csvs.append(hist.to_csv())
    assert blobs[0] == blobs[1] and csvs[0] == csvs[1]
    assert csvs[0].splitlines()[0] == "epoch,loss,train_acc,val_acc"
    assert len(csvs[0].splitlines()) == 3


def test_checkpoint_round_trip(tmp_path):
    model = micro_model(seed=9)
    model.feature_std = np.linspace(0.5, 2.0, 8)
    cfg = TrainConfig(dims=ModelDims(**MICRO))
    save_checkpoint(model, cfg, tmp_path / "m.ckpt", {"epoch": 3})
    back, cfg2, header = load_checkpoint(tmp_path / "m.ckpt")
    assert cfg2 == cfg and header["epoch"] == 3
    assert not (tmp_path / "m.ckpt.tmp").exists()
    batch = micro_batch(model)
    assert np.array_equal(model.forward(batch)["probs"].data, back.forward(batch)["probs"].data)
    assert np.array_equal(back.feature_std, model.feature_std)
    check_compatible(header, model.qvocab, model.avocab)
    with pytest.raises(CompatibilityError):
        check_compatible(header, model.qvocab, AnswerVocabulary(MICRO_ANSWERS[::-1]))


def test_checkpoint_bad_magic(tmp_path):
    (tmp_path / "x.ckpt").write_bytes(b"not a checkpoint at all")
    with pytest.raises(ValueError):
        load_checkpoint(tmp_path / "x.ckpt")
