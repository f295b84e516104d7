import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mmfusion.encoders import (
    AttentionHead,
    ConvSpec,
    DenseLayer,
    EmbeddingTable,
    PatchEmbedder,
    RnnCell,
    attention,
    conv2d_forward,
    conv_output_shape,
    dense_forward,
    embed_sequence,
    max_pool,
    patchify,
    rnn_forward,
    transformer_encoder_block,
)
from mmfusion.errors import (
    EmptySequence,
    IndivisibleImage,
    NonIntegerOutput,
    NonPositiveOutput,
    ShapeMismatch,
    TokenOutOfRange,
)
from mmfusion.tensor import Rng


# --- conv shapes -------------------------------------------------------------


def _placements(w_in, f, s, p):
    """Count kernel placements by walking the padded input."""
    count, start = 0, 0
    while start + f <= w_in + 2 * p:
        count += 1
        start += s
    return count


def test_conv_shape_examples():
    assert conv_output_shape(ConvSpec(28, 28, 1, 5, 1, 2)) == (28, 28)
    assert conv_output_shape(ConvSpec(7, 7, 1, 3, 2, 0)) == (3, 3)
    with pytest.raises(NonPositiveOutput):
        conv_output_shape(ConvSpec(4, 4, 1, 5, 1, 0))
    with pytest.raises(NonIntegerOutput):
        conv_output_shape(ConvSpec(6, 6, 1, 3, 2, 0))


def test_conv_shape_matches_exhaustive_count():
    checked = 0
    for w in range(1, 13):
        for f in range(1, 6):
            for p in range(0, 3):
                for s in range(1, 4):
                    spec = ConvSpec(w, w, 1, f, s, p)
                    if w - f + 2 * p < 0:
                        with pytest.raises(NonPositiveOutput):
                            conv_output_shape(spec)
                        continue
                    if (w - f + 2 * p) % s:
                        with pytest.raises(NonIntegerOutput):
                            conv_output_shape(spec)
                        continue
                    assert conv_output_shape(spec)[0] == _placements(w, f, s, p)
                    checked += 1
    assert checked > 300


# --- conv values -------------------------------------------------------------


def _conv_naive(x, k, b, s, p):
    d_in, h, w = x.shape
    xp = np.zeros((d_in, h + 2 * p, w + 2 * p))
    xp[:, p:p + h, p:p + w] = x
    d_out, _, f, _ = k.shape
    ho, wo = (h - f + 2 * p) // s + 1, (w - f + 2 * p) // s + 1
    out = np.zeros((d_out, ho, wo))
    for o in range(d_out):
        for i in range(ho):
            for j in range(wo):
                acc = b[o]
                for c in range(d_in):
                    for u in range(f):
                        for v in range(f):
                            acc += k[o, c, u, v] * xp[c, i * s + u, j * s + v]
                out[o, i, j] = acc
    return out


def test_conv_ones_times_two():
    out = conv2d_forward(np.ones((1, 3, 3)), ConvSpec(3, 3, 1, 1), [[[[2.0]]]], [0.0])
    np.testing.assert_array_equal(out, np.full((1, 3, 3), 2.0))


def test_conv_identity_kernel(rng):
    x = rng.normal(size=(1, 5, 5))
    k = np.zeros((1, 1, 3, 3))
    k[0, 0, 1, 1] = 1
    np.testing.assert_array_equal(conv2d_forward(x, ConvSpec(5, 5, 1, 3, 1, 1), k, [0.0]), x)


@pytest.mark.parametrize("d_in,d_out,size,f,s,p", [(1, 1, 4, 3, 1, 0), (2, 3, 5, 3, 2, 1), (3, 2, 6, 2, 2, 0)])
def test_conv_matches_naive(rng, d_in, d_out, size, f, s, p):
    x = rng.normal(size=(d_in, size, size))
    k = rng.normal(size=(d_out, d_in, f, f))
    b = rng.normal(size=d_out)
    out = conv2d_forward(x, ConvSpec(size, size, d_in, f, s, p, d_out), k, b)
    np.testing.assert_allclose(out, _conv_naive(x, k, b, s, p), rtol=0, atol=1e-12)


def test_conv_shift_equivariance(rng):
    x = np.zeros((1, 8, 8))
    x[0, 2:5, 2:5] = rng.normal(size=(3, 3))
    shifted = np.roll(x, 1, axis=2)
    k = rng.normal(size=(1, 1, 3, 3))
    spec = ConvSpec(8, 8, 1, 3, 1, 1)
    a = conv2d_forward(x, spec, k, [0.3])
    b = conv2d_forward(shifted, spec, k, [0.3])
    np.testing.assert_allclose(b[:, 1:-1, 2:-1], a[:, 1:-1, 1:-2], atol=1e-12)


def test_conv_shape_mismatch():
    with pytest.raises(ShapeMismatch):
        conv2d_forward(np.ones((1, 3, 3)), ConvSpec(4, 4, 1, 1), [[[[1.0]]]], [0.0])


# --- pooling -------------------------------------------------------------------


def _pool_naive(x, w, s):
    c, h, wd = x.shape
    ho, wo = (h - w) // s + 1, (wd - w) // s + 1
    out = np.empty((c, ho, wo))
    for k in range(c):
        for i in range(ho):
            for j in range(wo):
                out[k, i, j] = max(x[k, i * s + u, j * s + v] for u in range(w) for v in range(w))
    return out


def test_max_pool_examples(rng):
    assert max_pool([[[1, 2], [3, 4]]], 2, 2).tolist() == [[[4]]]
    np.testing.assert_array_equal(max_pool(np.full((2, 4, 4), 1.5), 2, 2), np.full((2, 2, 2), 1.5))
    x = rng.normal(size=(1, 4, 4))
    np.testing.assert_array_equal(max_pool(x, 2, 2), _pool_naive(x, 2, 2))
    x = rng.normal(size=(3, 5, 5))
    np.testing.assert_array_equal(max_pool(x, 3, 1), _pool_naive(x, 3, 1))


# --- dense, recurrent, embedding ----------------------------------------------------


def test_dense_examples():
    assert dense_forward(DenseLayer(np.array([[1.0, 2.0]]), np.array([1.0])), [3, 4]).tolist() == [12.0]
    assert dense_forward(DenseLayer(np.array([[1.0, 2.0]]), np.array([-12.0]), "relu"), [3, 4]).tolist() == [0.0]
    out = dense_forward(DenseLayer(np.zeros((1, 2)), np.array([0.5]), "tanh"), [3, 4])
    assert out[0] == pytest.approx(0.46211716, abs=1e-8)


def test_rnn_examples(rng):
    zero = RnnCell(np.zeros((3, 2)), np.zeros((3, 3)), np.zeros(3))
    assert not rnn_forward(zero, rng.normal(size=(4, 2))).any()
    cell = RnnCell(rng.normal(size=(3, 2)), rng.normal(size=(3, 3)), rng.normal(size=3))
    x = rng.normal(size=(1, 2))
    np.testing.assert_allclose(rnn_forward(cell, x), np.tanh(cell.W_x @ x[0] + cell.b), atol=1e-15)
    scalar = RnnCell(np.ones((1, 1)), np.ones((1, 1)), np.zeros(1))
    h2 = rnn_forward(scalar, [[0.5], [0.25]])[0]
    assert h2 == pytest.approx(math.tanh(0.25 + math.tanh(0.5)), abs=1e-15)
    assert h2 == pytest.approx(0.6120, abs=5e-5)


def test_rnn_empty_sequence():
    with pytest.raises(EmptySequence):
        rnn_forward(RnnCell.init(Rng(0), 2, 3), np.zeros((0, 2)))


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**32), st.integers(1, 6))
def test_rnn_output_in_open_interval(seed, T):
    rng = Rng(seed)
    cell = RnnCell.init(rng, 3, 4)
    h = rnn_forward(cell, rng.normal((T, 3)))
    assert np.all(np.abs(h) < 1)


def test_embedding_examples():
    table = EmbeddingTable(np.arange(12.0).reshape(4, 3))
    rows = embed_sequence(table, [0, 0])
    np.testing.assert_array_equal(rows[0], rows[1])
    assert embed_sequence(EmbeddingTable(np.eye(4)), [2]).tolist() == [[0, 0, 1, 0]]
    with pytest.raises(TokenOutOfRange):
        embed_sequence(table, [-1])
    with pytest.raises(TokenOutOfRange):
        embed_sequence(table, [4])


# --- vision transformer ------------------------------------------------------------


def test_patchify_identity_case():
    img = np.arange(9.0).reshape(3, 3)
    out = patchify(img, PatchEmbedder(np.ones((1, 1)), np.zeros((9, 1))))
    assert out[:, 0].tolist() == list(range(9))


def test_patchify_zero_image_gives_positional(rng):
    pos = rng.normal(size=(9, 4))
    out = patchify(np.zeros((6, 6)), PatchEmbedder(rng.normal(size=(4, 4)), pos))
    np.testing.assert_array_equal(out, pos)


def test_patch_zero_holds_top_left_pixels():
    img = np.arange(36.0).reshape(6, 6)
    out = patchify(img, PatchEmbedder(np.eye(4), np.zeros((9, 4))))
    assert sorted(out[0]) == [img[0, 0], img[0, 1], img[1, 0], img[1, 1]]
    assert out[0].tolist() == [0, 1, 6, 7]
    assert out[5].tolist() == [16, 17, 22, 23]


def test_patchify_indivisible():
    with pytest.raises(IndivisibleImage):
        patchify(np.zeros((4, 4)), PatchEmbedder(np.ones((2, 1)), np.zeros((9, 2))))


def test_attention_hand_example():
    head = AttentionHead(np.array([[1.0, 0.0]]), np.array([[1.0, 0.0]]), np.eye(2))
    X = np.array([[1.0, 0.0], [0.0, 1.0]])  # columns are tokens
    out = attention(head, X)
    e = math.e
    # per-token q and k are [1, 0]; V rows [1,0] and [0,1]; row 0 weights softmax([1, 0])
    np.testing.assert_allclose(out[0], [e / (e + 1), 1 / (e + 1)], atol=1e-12)
    assert out[0] == pytest.approx([0.7311, 0.2689], abs=1e-4)


def test_attention_single_token(rng):
    head = AttentionHead.init(Rng(4), 3, 2)
    x = rng.normal(size=(3, 1))
    np.testing.assert_allclose(attention(head, x), (head.W_v @ x).T, atol=1e-15)


def test_attention_zero_query_gives_v_mean(rng):
    X = rng.normal(size=(3, 5))
    for zero in ("W_q", "W_k"):
        head = AttentionHead.init(Rng(2), 3, 3)
        setattr(head, zero, np.zeros((3, 3)))
        V = (head.W_v @ X).T
        np.testing.assert_allclose(attention(head, X), np.tile(V.mean(axis=0), (5, 1)), atol=1e-12)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**32), st.integers(1, 7))
def test_attention_convex_and_equivariant(seed, T):
    rng = Rng(seed)
    head = AttentionHead.init(rng, 4, 3)
    X = rng.normal((4, T))
    out = attention(head, X)
    V = (head.W_v @ X).T
    assert np.all(out >= V.min(axis=0) - 1e-12) and np.all(out <= V.max(axis=0) + 1e-12)
    perm = np.array(Rng(seed + 1).permutation(T))
    np.testing.assert_allclose(attention(head, X[:, perm]), out[perm], atol=1e-12)


def test_positional_codes_break_equivariance():
    emb = PatchEmbedder.init(Rng(0), 4, 4)
    head = AttentionHead.init(Rng(1), 4, 4)
    img = Rng(2).normal((6, 6))
    tokens = patchify(img, emb)
    # swap the top-left and top-middle patches in pixel space
    swapped = img.copy()
    swapped[0:2, 0:2], swapped[0:2, 2:4] = img[0:2, 2:4], img[0:2, 0:2].copy()
    out = attention(head, tokens.T)
    out_swapped = attention(head, patchify(swapped, emb).T)
    assert not np.allclose(out_swapped[[1, 0]], out[[0, 1]])
    no_pos = PatchEmbedder(emb.projection, np.zeros((9, 4)))
    a = attention(head, patchify(img, no_pos).T)
    b = attention(head, patchify(swapped, no_pos).T)
    np.testing.assert_allclose(b[[1, 0, *range(2, 9)]], a, atol=1e-12)


def test_encoder_block_residual_only(rng):
    X = rng.normal(size=(9, 4))
    head = AttentionHead(np.zeros((4, 4)), np.zeros((4, 4)), np.zeros((4, 4)))
    mlp = (DenseLayer(np.zeros((4, 4)), np.zeros(4)), DenseLayer(np.zeros((4, 4)), np.zeros(4)))
    np.testing.assert_array_equal(transformer_encoder_block(X, head, mlp), X)


def test_encoder_block_shape(rng):
    r = Rng(3)
    head = AttentionHead.init(r, 5, 5)
    mlp = (DenseLayer.init(r, 5, 5, "relu"), DenseLayer.init(r, 5, 5))
    assert transformer_encoder_block(rng.normal(size=(9, 5)), head, mlp).shape == (9, 5)
    with pytest.raises(ShapeMismatch):
        transformer_encoder_block(rng.normal(size=(9, 5)), AttentionHead.init(r, 5, 3), mlp)
