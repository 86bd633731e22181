import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from abccnn import autodiff as ad
from abccnn.attention import (
    AttentionParams,
    attention_map,
    configure_kernel,
    read_map_csv,
    reduce_channels,
    weight_features,
    write_map_csv,
    write_map_pgm,
)
from abccnn.autodiff import Tensor


def params(C=4, d_s=4, C_r=2, k=1, rng=None, zero=False):
    rng = rng or np.random.default_rng(0)
    n = C * k * k
    mk = (lambda s: np.zeros(s)) if zero else (lambda s: rng.normal(size=s))
    return AttentionParams(
        W_sk=Tensor(mk((n, d_s)), requires_grad=True),
        b_k=Tensor(mk(n), requires_grad=True),
        W_reduce=Tensor(mk((C_r, C, 1, 1)), requires_grad=True),
        kh=k,
        kw=k,
    )


def test_zero_projection_gives_half_kernel():
    k = configure_kernel(Tensor(np.ones(4)), params(zero=True))
    assert k.shape == (1, 4, 1, 1)
    assert np.all(k.data == 0.5)


def test_kernel_layout_for_3x3():
    p = params(C=2, k=3)
    k = configure_kernel(Tensor(np.ones(4)), p)
    assert k.shape == (1, 2, 3, 3)
    assert np.all((k.data > 0) & (k.data < 1))


def test_distinct_embeddings_give_distinct_kernels():
    rng = np.random.default_rng(1)
    p = params(rng=rng)
    for _ in range(20):
        a, b = rng.normal(size=4), rng.normal(size=4)
        assert not np.allclose(configure_kernel(Tensor(a), p).data, configure_kernel(Tensor(b), p).data)


def test_kernel_gradient_wrt_embedding():
    rng = np.random.default_rng(2)
    p = params(C=3, k=3, rng=rng)
    s = Tensor(rng.normal(size=4), requires_grad=True)
    probe = ad.constant(rng.normal(size=(1, 3, 3, 3)))
    assert ad.grad_check(lambda: ad.sum_all(configure_kernel(s, p) * probe), s) < 1e-5


def test_kernel_dimension_mismatch():
    with pytest.raises(ad.DimensionError):
        configure_kernel(Tensor(np.ones(5)), params())


def test_even_kernel_rejected():
    with pytest.raises(ad.ConfigError):
        params(k=2)


def test_zero_kernel_uniform_map():
    I = Tensor(np.random.default_rng(3).normal(size=(4, 3, 3)))
    m = attention_map(Tensor(np.zeros((1, 4, 1, 1))), I).data
    np.testing.assert_allclose(m, 1 / 9, atol=1e-12)


def test_map_concentrates_on_matching_cell():
    # cell (2, 0) carries the kernel direction with a large magnitude; the rest are orthogonal
    k = np.array([1.0, 0.0, 0.0, 0.0])
    I = np.zeros((4, 3, 3))
    I[1:, :, :] = np.random.default_rng(4).uniform(0, 1, size=(3, 3, 3))
    I[0, 2, 0] = 10.0
    m = attention_map(Tensor(k.reshape(1, 4, 1, 1)), Tensor(I)).data
    # z is 10 at the cell and 0 elsewhere: mass e^10 / (e^10 + 8)
    assert m[2, 0] == pytest.approx(np.exp(10) / (np.exp(10) + 8), rel=1e-12)
    assert m[2, 0] > 0.9


def test_constant_channel_leaves_map_unchanged():
    rng = np.random.default_rng(5)
    k = Tensor(rng.uniform(size=(1, 4, 1, 1)))
    I = rng.normal(size=(4, 3, 3))
    shifted = I.copy()
    shifted[2] += 7.5
    np.testing.assert_allclose(attention_map(k, Tensor(I)).data, attention_map(k, Tensor(shifted)).data, atol=1e-14)


def test_channel_mismatch():
    with pytest.raises(ad.DimensionError):
        attention_map(Tensor(np.ones((1, 3, 1, 1))), Tensor(np.ones((4, 3, 3))))


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**32 - 1), st.permutations(list(range(9))))
def test_one_by_one_kernel_is_cell_permutation_equivariant(seed, perm):
    rng = np.random.default_rng(seed)
    k = Tensor(rng.uniform(size=(1, 5, 1, 1)))
    I = rng.normal(size=(5, 3, 3))
    Ip = I.reshape(5, 9)[:, perm].reshape(5, 3, 3)
    m = attention_map(k, Tensor(I)).data.reshape(9)
    mp = attention_map(k, Tensor(Ip)).data.reshape(9)
    np.testing.assert_allclose(mp, m[perm], atol=1e-14)


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2**32 - 1), st.sampled_from([1, 3]))
def test_map_invariants(seed, ks):
    rng = np.random.default_rng(seed)
    k = Tensor(rng.uniform(size=(1, 6, ks, ks)))
    m = attention_map(k, Tensor(rng.uniform(0, 5, size=(6, 3, 3)))).data
    assert abs(m.sum() - 1) < 1e-9
    assert np.all((m > 0) & (m < 1))


def test_batched_map_matches_single():
    rng = np.random.default_rng(6)
    p = params(C=4, k=3, rng=rng)
    S = rng.normal(size=(3, 4))
    I = rng.normal(size=(3, 4, 3, 3))
    batched = attention_map(configure_kernel(Tensor(S), p), Tensor(I)).data
    for b in range(3):
        single = attention_map(configure_kernel(Tensor(S[b]), p), Tensor(I[b])).data
        np.testing.assert_allclose(batched[b], single, atol=1e-14)


def test_weight_features_uniform_and_one_hot():
    I = np.random.default_rng(7).normal(size=(3, 3, 3))
    np.testing.assert_allclose(weight_features(Tensor(I), Tensor(np.full((3, 3), 1 / 9))).data, I / 9, rtol=1e-15)
    m = np.zeros((3, 3))
    m[0, 1] = 1
    out = weight_features(Tensor(I), Tensor(m)).data
    mask = np.ones((3, 3), bool)
    mask[0, 1] = False
    assert not out[:, mask].any()


def test_weight_features_matches_loop():
    rng = np.random.default_rng(8)
    I, m = rng.normal(size=(4, 3, 3)), rng.uniform(size=(3, 3))
    out = weight_features(Tensor(I), Tensor(m)).data
    for c in range(4):
        for i in range(3):
            for j in range(3):
                assert out[c, i, j] == I[c, i, j] * m[i, j]


def test_reduce_selector_and_zero():
    I = np.random.default_rng(9).normal(size=(4, 3, 3))
    sel = np.zeros((2, 4, 1, 1))
    sel[0, 0] = sel[1, 1] = 1
    p = AttentionParams(None, None, Tensor(sel))
    np.testing.assert_array_equal(reduce_channels(Tensor(I), p).data, I[:2])
    p0 = AttentionParams(None, None, Tensor(np.zeros((2, 4, 1, 1))))
    assert not reduce_channels(Tensor(I), p0).data.any()


def test_reduce_matches_per_cell_matmul():
    rng = np.random.default_rng(10)
    I, W = rng.normal(size=(5, 3, 3)), rng.normal(size=(3, 5, 1, 1))
    out = reduce_channels(Tensor(I), AttentionParams(None, None, Tensor(W))).data
    for i in range(3):
        for j in range(3):
            np.testing.assert_allclose(out[:, i, j], W[:, :, 0, 0] @ I[:, i, j], rtol=1e-13)


def test_reduce_channel_mismatch():
    with pytest.raises(ad.DimensionError):
        reduce_channels(Tensor(np.ones((3, 3, 3))), AttentionParams(None, None, Tensor(np.ones((2, 4, 1, 1)))))


def test_map_exports(tmp_path):
    m = attention_map(Tensor(np.random.default_rng(11).uniform(size=(1, 2, 1, 1))),
                      Tensor(np.random.default_rng(12).normal(size=(2, 3, 3)))).data
    write_map_csv(m, tmp_path / "m.csv")
    back = read_map_csv(tmp_path / "m.csv")
    assert np.array_equal(back, m)
    assert abs(back.sum() - 1) < 1e-9
    write_map_pgm(m, tmp_path / "m.pgm")
    raw = (tmp_path / "m.pgm").read_bytes()
    assert raw.startswith(b"P5")
    pix = np.frombuffer(raw[-9:], dtype=np.uint8).reshape(3, 3)
    assert pix.max() == 255
    np.testing.assert_array_equal(pix, np.rint(255 * m / m.max()).astype(np.uint8))
