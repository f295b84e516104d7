"""Finite-difference audit of every differentiable op kind.

Each check builds small N(0, 1) inputs, runs the op on a fresh
tape and reduces its output to a scalar with fixed random weights. The
reverse-mode gradient of every input is then compared with central
differences.
"""
from __future__ import annotations

import math
import zlib
from dataclasses import dataclass
from typing import Callable, Iterable, Sequence

import numpy as np

from . import autograd as ag
from .autograd import Tape, Var
from .data import Batch
from .encoders import (
    attention_var,
    dense_var,
    encoder_block_var,
    patchify_var,
    rnn_step_var,
)
from .fusion import (
    FUSION_MODES,
    ModelConfig,
    MultimodalModel,
    attention_fuse_var,
    intermediate_fuse_var,
    late_fuse_var,
    weighted_sum_fuse_var,
)
from .tensor import Rng, splitmix64

TOLERANCE = 1e-4
SCALE_FLOOR = 1e-2  # with TOLERANCE this is an absolute floor of 1e-6
SEEDS = (0, 1, 2, 3, 4)
FD_STEP = 1e-5

Builder = Callable[[Rng], tuple[dict[str, np.ndarray], Callable[[dict[str, Var]], Var]]]


@dataclass(frozen=True)
class GradCheck:
    name: str
    build: Builder


@dataclass(frozen=True)
class GradResult:
    name: str
    max_rel_error: float

    @property
    def passed(self) -> bool:
        return self.max_rel_error <= TOLERANCE


def rel_error(analytic, numeric) -> float:
    a = np.asarray(analytic, dtype=np.float64)
    n = np.asarray(numeric, dtype=np.float64)
    scale = np.maximum(np.maximum(np.abs(a), np.abs(n)), SCALE_FLOOR)
    return float(np.max(np.abs(a - n) / scale)) if a.size else 0.0


def _scalar(out: Var, weights: np.ndarray) -> Var:
    return ag.sum_all(out * out.tape.leaf(weights))


def check_once(check: GradCheck, seed: int) -> float:
    rng = Rng(splitmix64(seed ^ zlib.crc32(check.name.encode())))
    inputs, fn = check.build(rng)

    def run(values):
        tape = Tape()
        leaves = {k: tape.leaf(v) for k, v in values.items()}
        return tape, leaves, fn(leaves)

    _, _, probe = run(inputs)
    weights = rng.normal(probe.shape)
    _, leaves, out = run(inputs)
    _scalar(out, weights).backward()

    worst = 0.0
    for name, value in inputs.items():
        def f(x, name=name):
            return float(np.sum(run({**inputs, name: x})[2].value * weights))
        numeric = ag.finite_difference_grad(f, value, FD_STEP)
        err = rel_error(leaves[name].grad, numeric)
        worst = max(worst, err if math.isfinite(err) else math.inf)
    return worst


def run_checks(checks: Iterable[GradCheck] | None = None,
               seeds: Sequence[int] = SEEDS) -> list[GradResult]:
    checks = default_checks() if checks is None else checks
    return [GradResult(c.name, max(check_once(c, s) for s in seeds)) for c in checks]


# --- the checks ----------------------------------------------------------------


def _n(rng, *shape):
    return rng.normal(shape)


def _away_from_zero(x):
    return np.sign(x) * (np.abs(x) + 1.0)


def _binary(op):
    def build(rng):
        return {"a": _n(rng, 3, 4), "b": _n(rng, 3, 4)}, lambda v: op(v["a"], v["b"])
    return build


def _div(rng):
    return ({"a": _n(rng, 3, 4), "b": _away_from_zero(_n(rng, 3, 4))},
            lambda v: ag.div(v["a"], v["b"]))


def _broadcast_add(rng):
    return {"a": _n(rng, 2, 3, 4), "b": _n(rng, 4)}, lambda v: v["a"] + v["b"]


def _unary(op):
    def build(rng):
        return {"x": _n(rng, 3, 4)}, lambda v: op(v["x"])
    return build


def _matmul(rng):
    return {"a": _n(rng, 2, 3, 4), "b": _n(rng, 4, 2)}, lambda v: ag.matmul(v["a"], v["b"])


def _shape_ops(rng):
    def fn(v):
        x = ag.transpose(ag.reshape(v["x"], (4, 3)))
        parts = [ag.take(x, 0, axis=0), ag.mean(x, axis=0)]
        return ag.concat([ag.stack(parts, axis=0), x], axis=0)
    return {"x": _n(rng, 3, 4)}, fn


def _conv(stride, padding):
    def build(rng):
        return ({"x": _n(rng, 1, 2, 4, 4), "k": _n(rng, 3, 2, 2, 2), "b": _n(rng, 3)},
                lambda v: ag.conv2d(v["x"], v["k"], v["b"], stride, padding))
    return build


def _max_pool(rng):
    return {"x": _n(rng, 2, 4, 4)}, lambda v: ag.max_pool(v["x"], 2, 2)


def _dense(rng):
    return ({"x": _n(rng, 3, 4), "w": _n(rng, 2, 4), "b": _n(rng, 2)},
            lambda v: dense_var(v["x"], v["w"], v["b"], "tanh"))


def _rnn_step(rng):
    return ({"x": _n(rng, 2, 3), "h": _n(rng, 2, 4), "w_x": _n(rng, 4, 3),
             "w_h": _n(rng, 4, 4), "b": _n(rng, 4)},
            lambda v: rnn_step_var(v["x"], v["h"], v["w_x"], v["w_h"], v["b"]))


def _embedding(rng):
    tokens = np.array([[0, 3, 1], [3, 3, 2]])
    return {"table": _n(rng, 4, 3)}, lambda v: ag.embedding(v["table"], tokens)


def _patchify(rng):
    return ({"images": _n(rng, 2, 3, 3), "proj": _n(rng, 4, 1), "pos": _n(rng, 9, 4)},
            lambda v: patchify_var(v["images"], v["proj"], v["pos"]))


def _attention(rng):
    return ({"x": _n(rng, 2, 4, 3), "q": _n(rng, 2, 3), "k": _n(rng, 2, 3), "v": _n(rng, 4, 3)},
            lambda v: attention_var(v["x"], v["q"], v["k"], v["v"]))


def _encoder_block(rng):
    names = ("x", "q", "k", "v", "w1", "b1", "w2", "b2")
    shapes = ((2, 4, 3), (3, 3), (3, 3), (3, 3), (4, 3), (4,), (3, 4), (3,))
    inputs = {k: rng.normal(s) for k, s in zip(names, shapes)}
    return inputs, lambda v: encoder_block_var(*(v[k] for k in names))


def _features(rng, k=3):
    return {f"f{i}": _n(rng, 2, 4) for i in range(k)}


def _late_fuse(rng):
    return _features(rng), lambda v: late_fuse_var([v["f0"], v["f1"], v["f2"]])


def _intermediate_fuse(rng):
    inputs = {**_features(rng, 2), "m0": _n(rng, 2, 3), "m1": _n(rng, 2, 2)}
    return inputs, lambda v: intermediate_fuse_var([v["f0"], v["f1"]], [v["m0"], v["m1"]])


def _attention_fuse(rng):
    inputs = {**_features(rng), "q": _n(rng, 4, 4), "k": _n(rng, 4, 4), "v": _n(rng, 4, 4)}
    return inputs, lambda v: attention_fuse_var([v["f0"], v["f1"], v["f2"]], v["q"], v["k"], v["v"])


def _weighted_sum_fuse(rng):
    inputs = {**_features(rng), "logits": _n(rng, 3)}
    return inputs, lambda v: weighted_sum_fuse_var([v["f0"], v["f1"], v["f2"]], v["logits"])


def _early_fuse(rng):
    inputs = {"image": _n(rng, 2, 4), "seq": _n(rng, 2, 3), "w": _n(rng, 4, 4 + 3), "b": _n(rng, 4)}
    return inputs, lambda v: dense_var(ag.concat([v["image"], v["seq"]], axis=-1), v["w"], v["b"], "relu")


def _cross_entropy(rng):
    labels = np.array([0, 3, 1])
    probs = np.abs(_n(rng, 3, 4)) + 0.1
    return {"p": probs}, lambda v: ag.cross_entropy(v["p"], labels)


def _softmax_cross_entropy(rng):
    labels = np.array([2, 0, 1])
    return {"z": _n(rng, 3, 4)}, lambda v: ag.cross_entropy(ag.softmax(v["z"]), labels)


TINY = dict(n_classes=3, image_size=3, max_len=3, vocab_size=5, d_s=2, d_f=3, conv_channels=2,
            cnn_pool=3, embed_dim=2, rnn_hidden=3, d_model=3, fcn_hidden=3, classifier_hidden=3)


def _model(mode):
    def build(rng):
        model = MultimodalModel(ModelConfig(fusion_mode=mode, **TINY))
        params = {k: rng.normal(v.shape, 0.0, 0.5) for k, v in model.params.items()}
        batch = Batch(rng.normal((2, 3, 3)), np.array([[1, 4, 0], [2, 2, 3]]),
                      rng.normal((2, 2)), np.array([0, 2]))

        def fn(v):
            probs, _, _ = model.forward(next(iter(v.values())).tape, batch, v)
            return ag.cross_entropy(probs, batch.labels)
        return params, fn
    return build


def default_checks() -> list[GradCheck]:
    checks = [
        ("matmul", _matmul),
        ("add", _binary(ag.add)),
        ("add_broadcast", _broadcast_add),
        ("sub", _binary(ag.sub)),
        ("mul", _binary(ag.mul)),
        ("div", _div),
        ("scale", _unary(lambda x: ag.scale(x, -2.5))),
        ("relu", _unary(ag.relu)),
        ("tanh", _unary(ag.tanh)),
        ("sigmoid", _unary(ag.sigmoid)),
        ("shape_ops", _shape_ops),
        ("softmax", _unary(ag.softmax)),
        ("conv2d", _conv(1, 0)),
        ("conv2d_stride_pad", _conv(2, 1)),
        ("max_pool", _max_pool),
        ("dense", _dense),
        ("rnn_step", _rnn_step),
        ("embedding", _embedding),
        ("patchify", _patchify),
        ("attention", _attention),
        ("encoder_block", _encoder_block),
        ("fuse_early", _early_fuse),
        ("fuse_late", _late_fuse),
        ("fuse_intermediate", _intermediate_fuse),
        ("fuse_attention", _attention_fuse),
        ("fuse_weighted_sum", _weighted_sum_fuse),
        ("cross_entropy", _cross_entropy),
        ("softmax_cross_entropy", _softmax_cross_entropy),
    ]
    checks += [(f"model_{mode}", _model(mode)) for mode in FUSION_MODES]
    return [GradCheck(name, build) for name, build in checks]


def format_report(results: Sequence[GradResult]) -> str:
    width = max(len(r.name) for r in results)
    lines = [f"{r.name:<{width}}  {r.max_rel_error:.3e}  {'ok' if r.passed else 'FAIL'}"
             for r in results]
    return "\n".join(lines)
