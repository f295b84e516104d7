"""Fusion strategies and the assembled multimodal model.

Branches always appear in the order CNN, RNN, VIT, FCN. The CNN and VIT
branches read the image, RNN reads the token sequence and FCN reads the
structured vector. Fusion modes:

``early``
    raw image pixels, mean token embedding and the structured vector are
    concatenated and passed through one dense encoder.
``late``
    branch features are concatenated.
``intermediate``
    branch features followed by each branch's mid-level activation.
``attention``
    branch features are treated as tokens for one self-attention head and
    the outputs are mean-pooled.
``weighted_sum``
    softmax of learned per-branch logits weights the branch features.

The fused vector goes through a relu hidden layer and a softmax classifier.
"""
from __future__ import annotations

import math
import zlib
from dataclasses import asdict, dataclass, replace
from typing import Mapping, Sequence

import numpy as np

from . import autograd as ag
from .autograd import Tape, Var
from .data import Batch, MultimodalSample, collate
from .encoders import (
    POSITIONAL_STD,
    AttentionHead,
    attention_var,
    check_image,
    check_tokens,
    dense_var,
    encoder_block_var,
    patchify_var,
    rnn_var,
)
from .errors import DimMismatch, ModalityMissing, NoActiveBranch
from .tensor import Rng, splitmix64

BRANCHES = ("cnn", "rnn", "vit", "fcn")
FUSION_MODES = ("early", "intermediate", "late", "attention", "weighted_sum")
BRANCH_INPUT = {"cnn": "image", "vit": "image", "rnn": "tokens", "fcn": "structured"}


@dataclass
class ModelConfig:
    n_classes: int = 3
    image_size: int = 6
    max_len: int = 8
    vocab_size: int = 16
    d_s: int = 4
    branches: tuple[str, ...] = BRANCHES
    fusion_mode: str = "attention"
    d_f: int = 16
    conv_channels: int = 8
    conv_kernel: int = 3
    conv_padding: int = 1
    cnn_pool: int = 2
    embed_dim: int = 16
    rnn_hidden: int = 32
    d_model: int = 8
    depth: int = 1
    fcn_hidden: int = 16
    classifier_hidden: int = 8
    projection_activation: str = "tanh"

    def __post_init__(self):
        self.branches = tuple(b for b in BRANCHES if b in set(self.branches))
        if not self.branches:
            raise NoActiveBranch("at least one branch must be active")
        if self.fusion_mode not in FUSION_MODES:
            raise ValueError(f"fusion mode must be one of {FUSION_MODES}")
        if self.d_f < 1:
            raise ValueError("d_f must be at least 1")
        check_image(self.image_size, self.image_size)

    @property
    def conv_out(self) -> int:
        return self.image_size - self.conv_kernel + 2 * self.conv_padding + 1

    @property
    def pool_out(self) -> int:
        return (self.conv_out - self.cnn_pool) // self.cnn_pool + 1

    @property
    def mid_dims(self) -> dict[str, int]:
        return {"cnn": self.conv_channels * self.pool_out ** 2, "rnn": self.rnn_hidden,
                "vit": self.d_model, "fcn": self.fcn_hidden}

    @property
    def early_dim(self) -> int:
        active = set(self.branches)
        dim = self.image_size ** 2 if active & {"cnn", "vit"} else 0
        dim += self.embed_dim if "rnn" in active else 0
        return dim + (self.d_s if "fcn" in active else 0)

    @property
    def fused_dim(self) -> int:
        k = len(self.branches)
        if self.fusion_mode == "late":
            return k * self.d_f
        if self.fusion_mode == "intermediate":
            return k * self.d_f + sum(self.mid_dims[b] for b in self.branches)
        return self.d_f


def _stream(seed: int, name: str) -> Rng:
    return Rng(splitmix64(seed ^ zlib.crc32(name.encode())))


def _normal(seed, name, shape, fan_in):
    return _stream(seed, name).normal(shape, 0.0, 1.0 / math.sqrt(fan_in))


class MultimodalModel:
    """Parameter store plus the batched forward pass.

    Every parameter is drawn from its own substream keyed by name, so models
    with different active branches share identical weights where they overlap.
    """

    def __init__(self, config: ModelConfig, seed: int = 0, params: Mapping[str, np.ndarray] | None = None):
        self.config = config
        self.seed = seed
        self.params: dict[str, np.ndarray] = self._init_params() if params is None else {
            k: np.array(v, dtype=np.float64) for k, v in params.items()}

    def _init_params(self) -> dict[str, np.ndarray]:
        c, s = self.config, self.seed
        shapes: dict[str, tuple[tuple[int, ...], int | None]] = {}

        def dense(prefix, m_in, m_out):
            shapes[f"{prefix}.w"] = ((m_out, m_in), m_in)
            shapes[f"{prefix}.b"] = ((m_out,), None)

        active = set(c.branches)
        if c.fusion_mode == "early":
            if "rnn" in active:
                shapes["rnn.embed"] = ((c.vocab_size, c.embed_dim), 1)
            dense("early.encoder", c.early_dim, c.d_f)
        else:
            if "cnn" in active:
                k = c.conv_kernel
                shapes["cnn.kernels"] = ((c.conv_channels, 1, k, k), k * k)
                shapes["cnn.bias"] = ((c.conv_channels,), None)
                dense("cnn.proj", c.mid_dims["cnn"], c.d_f)
            if "rnn" in active:
                shapes["rnn.embed"] = ((c.vocab_size, c.embed_dim), 1)
                shapes["rnn.w_x"] = ((c.rnn_hidden, c.embed_dim), c.embed_dim)
                shapes["rnn.w_h"] = ((c.rnn_hidden, c.rnn_hidden), c.rnn_hidden)
                shapes["rnn.b"] = ((c.rnn_hidden,), None)
                dense("rnn.proj", c.rnn_hidden, c.d_f)
            if "vit" in active:
                pix = (c.image_size // 3) ** 2
                shapes["vit.projection"] = ((c.d_model, pix), pix)
                shapes["vit.positional"] = ((9, c.d_model), -1)
                for i in range(c.depth):
                    for w in ("w_q", "w_k", "w_v"):
                        shapes[f"vit.block{i}.{w}"] = ((c.d_model, c.d_model), c.d_model)
                    dense(f"vit.block{i}.mlp1", c.d_model, c.d_model)
                    dense(f"vit.block{i}.mlp2", c.d_model, c.d_model)
                dense("vit.proj", c.d_model, c.d_f)
            if "fcn" in active:
                dense("fcn.hidden", c.d_s, c.fcn_hidden)
                dense("fcn.proj", c.fcn_hidden, c.d_f)
            if c.fusion_mode == "attention":
                for w in ("w_q", "w_k", "w_v"):
                    shapes[f"fusion.{w}"] = ((c.d_f, c.d_f), c.d_f)
            elif c.fusion_mode == "weighted_sum":
                shapes["fusion.logits"] = ((len(c.branches),), None)
        dense("head.hidden", c.fused_dim, c.classifier_hidden)
        dense("head.out", c.classifier_hidden, c.n_classes)

        params = {}
        for name, (shape, fan_in) in shapes.items():
            if fan_in is None:
                params[name] = np.zeros(shape)
            elif fan_in == -1:
                params[name] = _stream(s, name).normal(shape, 0.0, POSITIONAL_STD)
            else:
                params[name] = _normal(s, name, shape, fan_in)
        return params

    def copy(self) -> "MultimodalModel":
        return MultimodalModel(replace(self.config), self.seed, self.params)

    def leaves(self, tape: Tape) -> dict[str, Var]:
        return {k: tape.leaf(v, "param") for k, v in self.params.items()}

    # --- forward -------------------------------------------------------------

    def check_batch(self, batch: Batch):
        needed = {BRANCH_INPUT[b] for b in self.config.branches}
        have = {"image": batch.images, "tokens": batch.tokens, "structured": batch.structured}
        for m in sorted(needed):
            if have[m] is None:
                raise ModalityMissing(f"sample lacks the {m} modality")
        if "tokens" in needed:
            check_tokens(batch.tokens, self.config.vocab_size)

    def encode(self, tape: Tape, batch: Batch, P: Mapping[str, Var]) -> tuple[dict, dict]:
        """Per-branch final features [N, d_f] and mid-level features."""
        c = self.config
        n = len(batch)
        finals, mids = {}, {}
        active = set(c.branches)
        if "cnn" in active:
            x = tape.leaf(batch.images[:, None], "input")
            h = ag.relu(ag.conv2d(x, P["cnn.kernels"], P["cnn.bias"], 1, c.conv_padding))
            h = ag.reshape(ag.max_pool(h, c.cnn_pool, c.cnn_pool), (n, -1))
            mids["cnn"] = h
            finals["cnn"] = dense_var(h, P["cnn.proj.w"], P["cnn.proj.b"], c.projection_activation)
        if "rnn" in active:
            emb = ag.embedding(P["rnn.embed"], batch.tokens)
            states = rnn_var(emb, P["rnn.w_x"], P["rnn.w_h"], P["rnn.b"])
            mids["rnn"] = states[math.ceil(len(states) / 2) - 1]
            finals["rnn"] = dense_var(states[-1], P["rnn.proj.w"], P["rnn.proj.b"], c.projection_activation)
        if "vit" in active:
            x = tape.leaf(batch.images, "input")
            tokens = patchify_var(x, P["vit.projection"], P["vit.positional"])
            mids["vit"] = ag.mean(tokens, axis=1)
            for i in range(c.depth):
                b = f"vit.block{i}."
                tokens = encoder_block_var(tokens, P[b + "w_q"], P[b + "w_k"], P[b + "w_v"],
                                           P[b + "mlp1.w"], P[b + "mlp1.b"],
                                           P[b + "mlp2.w"], P[b + "mlp2.b"])
            finals["vit"] = dense_var(ag.mean(tokens, axis=1), P["vit.proj.w"], P["vit.proj.b"], c.projection_activation)
        if "fcn" in active:
            x = tape.leaf(batch.structured, "input")
            h = dense_var(x, P["fcn.hidden.w"], P["fcn.hidden.b"], "relu")
            mids["fcn"] = h
            finals["fcn"] = dense_var(h, P["fcn.proj.w"], P["fcn.proj.b"], c.projection_activation)
        return finals, mids

    def early_input(self, tape: Tape, batch: Batch, P: Mapping[str, Var]) -> Var:
        active = set(self.config.branches)
        n = len(batch)
        parts = []
        if active & {"cnn", "vit"}:
            parts.append(tape.leaf(batch.images.reshape(n, -1), "input"))
        if "rnn" in active:
            parts.append(ag.mean(ag.embedding(P["rnn.embed"], batch.tokens), axis=1))
        if "fcn" in active:
            parts.append(tape.leaf(batch.structured, "input"))
        return ag.concat(parts, axis=-1) if len(parts) > 1 else parts[0]

    def fuse(self, tape: Tape, batch: Batch, P: Mapping[str, Var]) -> tuple[Var, dict]:
        c = self.config
        mode = c.fusion_mode
        if mode == "early":
            raw = self.early_input(tape, batch, P)
            fused = dense_var(raw, P["early.encoder.w"], P["early.encoder.b"], "relu")
            return fused, {"raw": raw}
        finals, mids = self.encode(tape, batch, P)
        feats = [finals[b] for b in c.branches]
        if mode == "late":
            fused = late_fuse_var(feats)
        elif mode == "intermediate":
            fused = intermediate_fuse_var(feats, [mids[b] for b in c.branches])
        elif mode == "attention":
            fused = attention_fuse_var(feats, P["fusion.w_q"], P["fusion.w_k"], P["fusion.w_v"])
        else:
            fused = weighted_sum_fuse_var(feats, P["fusion.logits"])
        return fused, {"finals": finals, "mids": mids}

    def classify(self, fused: Var, P: Mapping[str, Var]) -> Var:
        h = dense_var(fused, P["head.hidden.w"], P["head.hidden.b"], "relu")
        return ag.softmax(dense_var(h, P["head.out.w"], P["head.out.b"]))

    def forward(self, tape: Tape, batch: Batch, P: Mapping[str, Var] | None = None):
        """Returns ``(probs [N, n_classes], leaves, extras)``."""
        self.check_batch(batch)
        if P is None:
            P = self.leaves(tape)
        fused, extras = self.fuse(tape, batch, P)
        extras["fused"] = fused
        return self.classify(fused, P), P, extras

    def predict_proba(self, batch: Batch) -> np.ndarray:
        return self.forward(Tape(), batch)[0].value


# --- fusion primitives (differentiable) ------------------------------------


def late_fuse_var(features: Sequence[Var]) -> Var:
    _check_dims([f.shape[-1] for f in features])
    return ag.concat(list(features), axis=-1) if len(features) > 1 else features[0]


def intermediate_fuse_var(finals: Sequence[Var], mids: Sequence[Var]) -> Var:
    """Final features (late-fuse order) followed by the mid-level features."""
    return ag.concat([late_fuse_var(finals), *mids], axis=-1)


def attention_fuse_var(features: Sequence[Var], w_q: Var, w_k: Var, w_v: Var) -> Var:
    _check_dims([f.shape[-1] for f in features])
    tokens = ag.stack(list(features), axis=-2)
    return ag.mean(attention_var(tokens, w_q, w_k, w_v), axis=-2)


def weighted_sum_fuse_var(features: Sequence[Var], logits: Var) -> Var:
    _check_dims([f.shape[-1] for f in features])
    k = len(features)
    if logits.shape != (k,):
        raise DimMismatch(f"{logits.shape[0]} logits for {k} features")
    weights = ag.softmax(ag.reshape(logits, (1, k)))
    stacked = ag.stack(list(features), axis=-2)  # [..., k, d_f]
    out = ag.matmul(weights, stacked)            # [..., 1, d_f]
    return ag.reshape(out, stacked.shape[:-2] + (stacked.shape[-1],))


def _check_dims(dims):
    if not dims:
        raise NoActiveBranch("no features to fuse")
    if len(set(dims)) != 1:
        raise DimMismatch(f"feature dimensions differ: {dims}")


# --- single-example wrappers -------------------------------------------------


def _ordered(features) -> list[np.ndarray]:
    if isinstance(features, Mapping):
        unknown = set(features) - set(BRANCHES)
        if unknown:
            raise KeyError(f"unknown branches {sorted(unknown)}")
        return [np.asarray(features[b], dtype=np.float64) for b in BRANCHES if b in features]
    return [np.asarray(f, dtype=np.float64) for f in features]


def late_fuse(features) -> np.ndarray:
    """Concatenate branch features. A mapping is ordered CNN, RNN, VIT, FCN
    whatever its insertion order; a sequence is taken as already ordered."""
    feats = _ordered(features)
    _check_dims([f.shape[-1] for f in feats])
    return np.concatenate(feats)


def attention_fuse(features, fuse_head: AttentionHead) -> np.ndarray:
    feats = _ordered(features)
    tape = Tape()
    out = attention_fuse_var([tape.leaf(f) for f in feats], tape.leaf(fuse_head.W_q),
                             tape.leaf(fuse_head.W_k), tape.leaf(fuse_head.W_v))
    return out.value


def weighted_sum_fuse(features, logits) -> np.ndarray:
    feats = _ordered(features)
    tape = Tape()
    return weighted_sum_fuse_var([tape.leaf(f) for f in feats],
                                 tape.leaf(np.asarray(logits, dtype=np.float64))).value


def _single(sample: MultimodalSample, model: MultimodalModel) -> Batch:
    return collate([sample], model.config.max_len)


def _mode_forward(sample, model, mode):
    if model.config.fusion_mode != mode:
        raise ValueError(f"model is configured for {model.config.fusion_mode!r} fusion")
    return model.predict_proba(_single(sample, model))[0]


def early_fuse(sample: MultimodalSample, model: MultimodalModel) -> np.ndarray:
    return _mode_forward(sample, model, "early")


def intermediate_fuse(sample: MultimodalSample, model: MultimodalModel) -> np.ndarray:
    return _mode_forward(sample, model, "intermediate")


def model_forward(sample: MultimodalSample, model: MultimodalModel, tape: Tape) -> int:
    """Record one sample's forward pass on ``tape``; returns the probability node id."""
    probs, _, _ = model.forward(tape, _single(sample, model))
    return ag.reshape(probs, (model.config.n_classes,)).id


def config_dict(config: ModelConfig) -> dict:
    return asdict(config)
