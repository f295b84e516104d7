"""Modality encoders: convolution, dense/recurrent layers, word embeddings and
the 3x3-patch vision transformer.

Each building block comes in two forms. The ``*_var`` functions operate on
:class:`~mmfusion.autograd.Var` handles (batched, differentiable) and are what
the model uses. The plain functions take parameter containers and numpy
arrays for a single example, validate shapes, and return numpy results.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import autograd as ag
from .autograd import Tape, Var
from .errors import (
    EmptySequence,
    IndivisibleImage,
    NonIntegerOutput,
    NonPositiveOutput,
    ShapeMismatch,
    TokenOutOfRange,
)
from .tensor import Rng

PATCH_GRID = 3
N_PATCHES = PATCH_GRID * PATCH_GRID
# unit scale: small positional codes are swamped by patch content and learn slowly
POSITIONAL_STD = 1.0


# --- convolution -----------------------------------------------------------


@dataclass
class ConvSpec:
    W_in: int
    H_in: int
    D_in: int
    F: int
    S: int = 1
    P: int = 0
    D_out: int = 1

    def __post_init__(self):
        if self.F < 1 or self.S < 1 or self.P < 0:
            raise ValueError("need F >= 1, S >= 1, P >= 0")

    @property
    def W_out(self) -> int:
        return conv_output_shape(self)[0]

    @property
    def H_out(self) -> int:
        return conv_output_shape(self)[1]


def _out_extent(n_in: int, f: int, s: int, p: int) -> int:
    span = n_in - f + 2 * p
    if span < 0:
        raise NonPositiveOutput(f"kernel {f} does not fit extent {n_in} with padding {p}")
    if span % s:
        raise NonIntegerOutput(f"({n_in} - {f} + 2*{p}) not divisible by stride {s}")
    return span // s + 1


def conv_output_shape(spec: ConvSpec) -> tuple[int, int]:
    """``(W_out, H_out)`` with ``out = (in - F + 2P)/S + 1``; never truncates."""
    return (_out_extent(spec.W_in, spec.F, spec.S, spec.P),
            _out_extent(spec.H_in, spec.F, spec.S, spec.P))


def conv2d_forward(input, spec: ConvSpec, kernels, bias) -> np.ndarray:
    input = np.asarray(input, dtype=np.float64)
    kernels = np.asarray(kernels, dtype=np.float64)
    bias = np.asarray(bias, dtype=np.float64)
    if input.shape != (spec.D_in, spec.H_in, spec.W_in):
        raise ShapeMismatch(f"input {input.shape} does not match spec")
    if kernels.shape != (spec.D_out, spec.D_in, spec.F, spec.F) or bias.shape != (spec.D_out,):
        raise ShapeMismatch("kernel or bias shape does not match spec")
    conv_output_shape(spec)
    tape = Tape()
    out = ag.conv2d(tape.leaf(input[None]), tape.leaf(kernels), tape.leaf(bias), spec.S, spec.P)
    return out.value[0]


def max_pool(input, window: int, stride: int) -> np.ndarray:
    input = np.asarray(input, dtype=np.float64)
    _out_extent(input.shape[-2], window, stride, 0)
    _out_extent(input.shape[-1], window, stride, 0)
    return ag.max_pool(Tape().leaf(input), window, stride).value


# --- dense and recurrent -------------------------------------------------


@dataclass
class DenseLayer:
    weights: np.ndarray
    bias: np.ndarray
    activation: str = "identity"

    @classmethod
    def init(cls, rng: Rng, m_in: int, m_out: int, activation="identity"):
        return cls(rng.normal((m_out, m_in), 0.0, 1.0 / math.sqrt(m_in)),
                   np.zeros(m_out), activation)


def dense_var(x: Var, w: Var, b: Var, activation: str = "identity") -> Var:
    """``phi(x @ w.T + b)`` over the last axis of ``x``."""
    return ag.ACTIVATIONS[activation](ag.matmul(x, ag.transpose(w)) + b)


def dense_forward(layer: DenseLayer, x) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    w = np.asarray(layer.weights, dtype=np.float64)
    if x.ndim != 1 or w.shape[1] != x.shape[0] or len(layer.bias) != w.shape[0]:
        raise ShapeMismatch(f"weights {w.shape} vs input {x.shape}")
    tape = Tape()
    y = dense_var(tape.leaf(x[None]), tape.leaf(w), tape.leaf(layer.bias), layer.activation)
    return y.value[0]


@dataclass
class RnnCell:
    W_x: np.ndarray
    W_h: np.ndarray
    b: np.ndarray

    @classmethod
    def init(cls, rng: Rng, d_in: int, d_h: int):
        return cls(rng.normal((d_h, d_in), 0.0, 1.0 / math.sqrt(d_in)),
                   rng.normal((d_h, d_h), 0.0, 1.0 / math.sqrt(d_h)),
                   np.zeros(d_h))


def rnn_step_var(x_t: Var, h: Var | None, w_x: Var, w_h: Var, b: Var) -> Var:
    pre = ag.matmul(x_t, ag.transpose(w_x)) + b
    if h is not None:
        pre = pre + ag.matmul(h, ag.transpose(w_h))
    return ag.tanh(pre)


def rnn_var(xs: Var, w_x: Var, w_h: Var, b: Var) -> list[Var]:
    """Run the Elman recurrence over ``xs`` [N, T, d_in]; returns h_1..h_T.

    ``h_0`` is zero, so the first step skips the ``W_h`` product.
    """
    T = xs.shape[1]
    if T < 1:
        raise EmptySequence("sequence is empty")
    states, h = [], None
    for t in range(T):
        h = rnn_step_var(ag.take(xs, t, axis=1), h, w_x, w_h, b)
        states.append(h)
    return states


def rnn_forward(cell: RnnCell, sequence) -> np.ndarray:
    seq = np.asarray(sequence, dtype=np.float64)
    if seq.ndim != 2 or seq.shape[0] < 1:
        raise EmptySequence("need a [T, d_in] sequence with T >= 1")
    if seq.shape[1] != cell.W_x.shape[1]:
        raise ShapeMismatch("input width does not match W_x")
    tape = Tape()
    states = rnn_var(tape.leaf(seq[None]), tape.leaf(cell.W_x), tape.leaf(cell.W_h), tape.leaf(cell.b))
    return states[-1].value[0]


# --- embeddings ------------------------------------------------------------


@dataclass
class EmbeddingTable:
    table: np.ndarray

    @property
    def vocab_size(self) -> int:
        return self.table.shape[0]

    @property
    def dim(self) -> int:
        return self.table.shape[1]

    @classmethod
    def init(cls, rng: Rng, vocab_size: int, dim: int):
        return cls(rng.normal((vocab_size, dim)))


def check_tokens(tokens, vocab_size: int) -> np.ndarray:
    tokens = np.asarray(tokens, dtype=np.int64)
    if tokens.size and (tokens.min() < 0 or tokens.max() >= vocab_size):
        raise TokenOutOfRange(f"token outside [0, {vocab_size})")
    return tokens


def embed_sequence(table: EmbeddingTable, tokens) -> np.ndarray:
    tokens = check_tokens(tokens, table.vocab_size)
    return ag.embedding(Tape().leaf(table.table), tokens).value


# --- vision transformer ----------------------------------------------------


@dataclass
class PatchEmbedder:
    projection: np.ndarray  # [d_model, patch_pixels]
    positional: np.ndarray  # [9, d_model]

    @property
    def d_model(self) -> int:
        return self.projection.shape[0]

    @classmethod
    def init(cls, rng: Rng, patch_pixels: int, d_model: int):
        return cls(rng.normal((d_model, patch_pixels), 0.0, 1.0 / math.sqrt(patch_pixels)),
                   rng.normal((N_PATCHES, d_model), 0.0, POSITIONAL_STD))


@dataclass
class AttentionHead:
    W_q: np.ndarray
    W_k: np.ndarray
    W_v: np.ndarray

    @property
    def d_q(self) -> int:
        return self.W_q.shape[0]

    @classmethod
    def init(cls, rng: Rng, d_model: int, d_q: int):
        std = 1.0 / math.sqrt(d_model)
        return cls(*(rng.normal((d_q, d_model), 0.0, std) for _ in range(3)))


def check_image(h: int, w: int):
    if h % PATCH_GRID or w % PATCH_GRID:
        raise IndivisibleImage(f"{h}x{w} image is not divisible into a 3x3 grid")


def patchify_var(images: Var, projection: Var, positional: Var) -> Var:
    """[N, H, W] -> [N, 9, d_model]: flatten patches, project, add positions."""
    check_image(*images.shape[1:])
    return ag.matmul(ag.patches(images, PATCH_GRID), ag.transpose(projection)) + positional


def patchify(image, embedder: PatchEmbedder) -> np.ndarray:
    image = np.asarray(image, dtype=np.float64)
    check_image(*image.shape)
    pix = (image.shape[0] // PATCH_GRID) * (image.shape[1] // PATCH_GRID)
    if embedder.projection.shape[1] != pix:
        raise ShapeMismatch(f"projection expects {embedder.projection.shape[1]} pixels, patch has {pix}")
    tape = Tape()
    out = patchify_var(tape.leaf(image[None]), tape.leaf(embedder.projection),
                       tape.leaf(embedder.positional))
    return out.value[0]


def attention_var(x: Var, w_q: Var, w_k: Var, w_v: Var) -> Var:
    """Single-head scaled dot-product self-attention; ``x`` holds tokens as rows."""
    q = ag.matmul(x, ag.transpose(w_q))
    k = ag.matmul(x, ag.transpose(w_k))
    v = ag.matmul(x, ag.transpose(w_v))
    d_q = w_q.shape[0]
    scores = ag.scale(ag.matmul(q, ag.transpose(k)), 1.0 / math.sqrt(d_q))
    return ag.matmul(ag.softmax(scores), v)


def attention(head: AttentionHead, X) -> np.ndarray:
    """Self-attention over ``X`` [d_model, T] (tokens are columns); returns [T, d_q]."""
    X = np.asarray(X, dtype=np.float64)
    if X.ndim != 2 or X.shape[1] < 1 or X.shape[0] != head.W_q.shape[1]:
        raise ShapeMismatch(f"X {X.shape} does not match head width {head.W_q.shape[1]}")
    tape = Tape()
    out = attention_var(tape.leaf(X.T[None]), tape.leaf(head.W_q), tape.leaf(head.W_k),
                        tape.leaf(head.W_v))
    return out.value[0]


def encoder_block_var(x: Var, w_q: Var, w_k: Var, w_v: Var,
                      w1: Var, b1: Var, w2: Var, b2: Var) -> Var:
    """Attention with residual, then a two-layer relu MLP with residual."""
    y = x + attention_var(x, w_q, w_k, w_v)
    return y + dense_var(dense_var(y, w1, b1, "relu"), w2, b2)


def transformer_encoder_block(X, head: AttentionHead, mlp: tuple[DenseLayer, DenseLayer]) -> np.ndarray:
    X = np.asarray(X, dtype=np.float64)
    d_model = X.shape[-1]
    if head.W_q.shape[1] != d_model or head.d_q != d_model:
        raise ShapeMismatch("attention head must map d_model -> d_model for the residual")
    first, second = mlp
    if first.weights.shape[1] != d_model or second.weights.shape[0] != d_model:
        raise ShapeMismatch("mlp widths do not match d_model")
    tape = Tape()
    leaf = tape.leaf
    out = encoder_block_var(leaf(X[None]), leaf(head.W_q), leaf(head.W_k), leaf(head.W_v),
                            leaf(first.weights), leaf(first.bias),
                            leaf(second.weights), leaf(second.bias))
    return out.value[0]
