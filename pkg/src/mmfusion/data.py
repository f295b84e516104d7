"""Synthetic multimodal data, preprocessing helpers and the ``MMDS`` format.

Each sample carries an image, a token sequence and a structured vector that
all describe one class label. A modality is *informative* when it shows the
true class and otherwise shows the prototype of a uniformly drawn class.
Informativeness is decided by one shared uniform ``u``: modality ``m`` is
uninformative when ``u`` lands in an arc of length ``1 - s_m``, and the arcs
are laid end to end around the unit circle. Arcs only overlap once their
lengths sum past one, so at default strengths at most one modality is
corrupted per sample and the modalities complement each other.
"""
from __future__ import annotations

import math
import os
import struct
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .errors import BadMagic, BadSpec, FormatError, NonSquareRotate, VersionMismatch
from .tensor import Rng, read_exact, read_tensor, splitmix64, write_tensor

DATASET_MAGIC = b"MMDS"
DATASET_VERSION = 1
PAD_TOKEN = 0
MODALITIES = ("image", "tokens", "structured")

# Prototype strengths, picked so a single informative modality is classified
# correctly about 94% of the time at noise 0.3.
IMAGE_AMPLITUDE = 0.26
STRUCT_AMPLITUDE = 0.80
# probability of erasing the class bigram, per unit noise
TOKEN_ERASURE = 0.2


@dataclass(eq=False)
class MultimodalSample:
    image: np.ndarray | None
    tokens: list[int] | None
    structured: np.ndarray | None
    label: int

    def __eq__(self, other):
        if not isinstance(other, MultimodalSample):
            return NotImplemented

        def same(a, b):
            if a is None or b is None:
                return a is b
            a, b = np.asarray(a), np.asarray(b)
            return a.shape == b.shape and np.array_equal(a, b)

        return (self.label == other.label and same(self.image, other.image)
                and same(self.tokens, other.tokens) and same(self.structured, other.structured))


@dataclass
class DatasetSpec:
    n_samples: int = 1000
    n_classes: int = 3
    size: int = 6
    max_len: int = 8
    vocab_size: int = 16
    d_s: int = 4
    s_img: float = 0.75
    s_seq: float = 0.75
    s_struct: float = 0.75
    noise: float = 0.3
    seed: int = 1

    def validate(self):
        if self.n_samples < 1:
            raise BadSpec("n_samples must be at least 1")
        if not 2 <= self.n_classes <= min(4, self.d_s):
            raise BadSpec("n_classes must lie in [2, min(4, d_s)]")
        if self.size not in (6, 12):
            raise BadSpec("image size must be 6 or 12")
        if self.max_len < 2:
            raise BadSpec("max_len must be at least 2")
        if self.vocab_size < 2 * self.n_classes + 2:
            raise BadSpec("vocab_size too small for the class bigrams")
        for name in ("s_img", "s_seq", "s_struct"):
            if not 0.0 <= getattr(self, name) <= 1.0:
                raise BadSpec(f"{name} must lie in [0, 1]")
        if self.noise < 0:
            raise BadSpec("noise must be non-negative")
        return self

    @property
    def strengths(self) -> tuple[float, float, float]:
        return (self.s_img, self.s_seq, self.s_struct)

    @property
    def min_len(self) -> int:
        return max(2, self.max_len // 2)

    @property
    def token_erasure(self) -> float:
        return min(1.0, TOKEN_ERASURE * self.noise)


def image_prototype(spec: DatasetSpec, c: int) -> np.ndarray:
    """Class ``c`` lights quadrant ``c`` (row-major over the 2x2 quadrants)."""
    half = spec.size // 2
    img = np.zeros((spec.size, spec.size))
    r, q = divmod(c, 2)
    img[r * half:(r + 1) * half, q * half:(q + 1) * half] = IMAGE_AMPLITUDE * 3.0 / half
    return img


def struct_prototype(spec: DatasetSpec, c: int) -> np.ndarray:
    v = np.zeros(spec.d_s)
    v[c] = STRUCT_AMPLITUDE
    return v


def class_bigram(c: int) -> tuple[int, int]:
    return (2 * c + 1, 2 * c + 2)


def corruption_arcs(strengths: Sequence[float]) -> list[tuple[float, float]]:
    """Start and length of each modality's uninformative arc on [0, 1)."""
    arcs, start = [], 0.0
    for s in strengths:
        arcs.append((start, 1.0 - s))
        start = (start + 1.0 - s) % 1.0
    return arcs


def _in_arc(u: float, arc: tuple[float, float]) -> bool:
    start, length = arc
    return length >= 1.0 or (u - start) % 1.0 < length


def indicator_configs(strengths: Sequence[float]) -> list[tuple[float, tuple[bool, ...]]]:
    """Probability of every informativeness pattern the shared draw can produce."""
    arcs = corruption_arcs(strengths)
    cuts = sorted({0.0, 1.0} | {a % 1.0 for a, _ in arcs} | {(a + l) % 1.0 for a, l in arcs})
    probs: dict[tuple[bool, ...], float] = {}
    for lo, hi in zip(cuts, cuts[1:]):
        if hi <= lo:
            continue
        mid = 0.5 * (lo + hi)
        key = tuple(not _in_arc(mid, arc) for arc in arcs)
        probs[key] = probs.get(key, 0.0) + (hi - lo)
    return [(p, k) for k, p in probs.items()]


def _sample_tokens(spec: DatasetSpec, rng: Rng, c: int) -> list[int]:
    """Neutral background tokens carrying the class bigram at a random
    position; the bigram is erased with probability ``token_erasure``."""
    n_pool = 2 * spec.n_classes
    n_neutral = spec.vocab_size - 1 - n_pool
    length = spec.min_len + rng.randint(spec.max_len - spec.min_len + 1)
    toks = [1 + n_pool + rng.randint(n_neutral) for _ in range(length)]
    j = rng.randint(length - 1)
    if rng.uniform() >= spec.token_erasure:
        toks[j], toks[j + 1] = class_bigram(c)
    return toks


def generate_sample(spec: DatasetSpec, i: int) -> MultimodalSample:
    rng = Rng(splitmix64(spec.seed ^ i))
    C = spec.n_classes
    label = rng.randint(C)
    u = rng.uniform()
    shown = []
    for arc in corruption_arcs(spec.strengths):
        alt = rng.randint(C)
        shown.append(alt if _in_arc(u, arc) else label)
    image = image_prototype(spec, shown[0]) + spec.noise * rng.normal((spec.size, spec.size))
    tokens = _sample_tokens(spec, rng, shown[1])
    structured = struct_prototype(spec, shown[2]) + spec.noise * rng.normal((spec.d_s,))
    return MultimodalSample(image, tokens, structured, label)


def generate(spec: DatasetSpec) -> list[MultimodalSample]:
    """Draw ``spec.n_samples`` samples; sample ``i`` uses its own substream."""
    spec.validate()
    return [generate_sample(spec, i) for i in range(spec.n_samples)]


# --- Bayes oracle ------------------------------------------------------------


def modality_loglik(spec: DatasetSpec, sample: MultimodalSample) -> np.ndarray:
    """[3, n_classes] log-likelihood of each modality under each shown class,
    up to a per-modality constant."""
    C = spec.n_classes
    var = max(spec.noise, 1e-9) ** 2
    out = np.empty((3, C))
    for c in range(C):
        out[0, c] = -np.sum((sample.image - image_prototype(spec, c)) ** 2) / (2 * var)
        out[2, c] = -np.sum((sample.structured - struct_prototype(spec, c)) ** 2) / (2 * var)
        a, b = class_bigram(c)
        t = sample.tokens
        count = sum(1 for k in range(len(t) - 1) if t[k] == a and t[k + 1] == b)
        out[1, c] = math.log(count) if count else -np.inf
    if np.all(np.isinf(out[1])):
        out[1] = 0.0  # bigram erased: tokens carry no class information
    return out


def bayes_posterior(spec: DatasetSpec, sample: MultimodalSample,
                    use: Sequence[bool] = (True, True, True)) -> np.ndarray:
    """Exact class posterior given the modalities flagged in ``use``."""
    ll = modality_loglik(spec, sample)
    lik = np.exp(ll - ll.max(axis=1, keepdims=True))
    agnostic = lik.mean(axis=1)
    post = np.zeros(spec.n_classes)
    for prob, informative in indicator_configs(spec.strengths):
        term = np.full(spec.n_classes, prob)
        for m in range(3):
            if use[m]:
                term = term * (lik[m] if informative[m] else agnostic[m])
        post += term
    return post / post.sum()


def bayes_accuracy(spec: DatasetSpec, n: int = 10_000, seed: int | None = None) -> dict[str, float]:
    """Monte-Carlo accuracy of the Bayes classifier per modality and jointly.

    Ties in the posterior earn fractional credit (a uniform tie-break).
    """
    mc = DatasetSpec(**{**spec.__dict__, "n_samples": n,
                        "seed": spec.seed + 0x5EED if seed is None else seed})
    samples = generate(mc)
    views = {"image": (True, False, False), "tokens": (False, True, False),
             "structured": (False, False, True), "joint": (True, True, True)}
    hits = dict.fromkeys(views, 0.0)
    for s in samples:
        for name, use in views.items():
            post = bayes_posterior(mc, s, use)
            best = np.flatnonzero(post >= post.max() * (1 - 1e-12))
            if s.label in best:
                hits[name] += 1.0 / len(best)
    return {k: v / n for k, v in hits.items()}


# --- preprocessing -----------------------------------------------------------


def standardize(values, stats=None, floor: float = 1e-8):
    """Per-feature ``(x - mean) / std`` over axis 0; returns ``(out, (mean, std))``.

    Pass the stats from the training split when transforming val/test data.
    """
    values = np.asarray(values, dtype=np.float64)
    if stats is None:
        stats = (values.mean(axis=0), np.maximum(values.std(axis=0), floor))
    mean, std = stats
    return (values - mean) / std, stats


AUGMENTATIONS = ("rotate90", "flip_h", "flip_v", "scale")


def augment(image, rng: Rng, kinds: Sequence[str]) -> np.ndarray:
    """Apply each enabled augmentation with probability 1/2, in canonical order.

    ``scale`` multiplies intensities by a factor drawn from [0.8, 1.2].
    """
    image = np.asarray(image, dtype=np.float64)
    unknown = set(kinds) - set(AUGMENTATIONS)
    if unknown:
        raise ValueError(f"unknown augmentations {sorted(unknown)}")
    if "rotate90" in kinds and image.shape[0] != image.shape[1]:
        raise NonSquareRotate(f"cannot rotate a {image.shape} image")
    for kind in AUGMENTATIONS:
        if kind not in kinds or rng.uniform() >= 0.5:
            continue
        if kind == "rotate90":
            image = np.rot90(image, -1)
        elif kind == "flip_h":
            image = image[:, ::-1]
        elif kind == "flip_v":
            image = image[::-1, :]
        else:
            image = image * (0.8 + 0.4 * rng.uniform())
    return np.ascontiguousarray(image)


def pad_or_truncate(tokens: Sequence[int], L: int, pad_token: int = PAD_TOKEN) -> list[int]:
    if L < 1:
        raise ValueError("L must be at least 1")
    tokens = list(tokens)[:L]
    return tokens + [pad_token] * (L - len(tokens))


@dataclass
class Batch:
    images: np.ndarray | None      # [N, H, W]
    tokens: np.ndarray | None      # [N, L] int
    structured: np.ndarray | None  # [N, d_s]
    labels: np.ndarray             # [N]

    def __len__(self):
        return len(self.labels)


def collate(samples: Sequence[MultimodalSample], max_len: int) -> Batch:
    def stack(attr, fn):
        vals = [getattr(s, attr) for s in samples]
        if any(v is None for v in vals):
            return None
        return np.stack([fn(v) for v in vals])

    return Batch(
        stack("image", lambda v: np.asarray(v, dtype=np.float64)),
        stack("tokens", lambda v: np.asarray(pad_or_truncate(v, max_len), dtype=np.int64)),
        stack("structured", lambda v: np.asarray(v, dtype=np.float64)),
        np.array([s.label for s in samples], dtype=np.int64),
    )


# --- MMDS files --------------------------------------------------------------


@dataclass
class DatasetMeta:
    n_classes: int
    H: int
    W: int
    L_max: int
    vocab_size: int
    d_s: int

    @classmethod
    def from_spec(cls, spec: DatasetSpec):
        return cls(spec.n_classes, spec.size, spec.size, spec.max_len, spec.vocab_size, spec.d_s)


def dump_dataset(fh, samples: Sequence[MultimodalSample], meta: DatasetMeta) -> None:
    fh.write(DATASET_MAGIC)
    fh.write(struct.pack("<8I", DATASET_VERSION, len(samples), meta.n_classes, meta.H, meta.W,
                         meta.L_max, meta.vocab_size, meta.d_s))
    for s in samples:
        write_tensor(fh, s.image)
        fh.write(struct.pack(f"<I{len(s.tokens)}I", len(s.tokens), *s.tokens))
        write_tensor(fh, s.structured)
        fh.write(struct.pack("<I", s.label))


def atomic_write(path, writer) -> None:
    """Run ``writer(fh)`` against a temp file and rename it over ``path``."""
    path = os.fspath(path)
    tmp = f"{path}.tmp{os.getpid()}"
    try:
        with open(tmp, "wb") as fh:
            writer(fh)
        os.replace(tmp, path)
    finally:
        if os.path.exists(tmp):
            os.remove(tmp)


def save_dataset(path, samples: Sequence[MultimodalSample], meta: DatasetMeta) -> None:
    atomic_write(path, lambda fh: dump_dataset(fh, samples, meta))


def read_dataset(path) -> tuple[list[MultimodalSample], DatasetMeta]:
    with open(path, "rb") as fh:
        if read_exact(fh, 4) != DATASET_MAGIC:
            raise BadMagic(f"{path} is not an MMDS file")
        (version,) = struct.unpack("<I", read_exact(fh, 4))
        if version != DATASET_VERSION:
            raise VersionMismatch(f"MMDS version {version}, expected {DATASET_VERSION}")
        n, *dims = struct.unpack("<7I", read_exact(fh, 28))
        meta = DatasetMeta(*dims)
        samples = []
        for _ in range(n):
            image = read_tensor(fh)
            (count,) = struct.unpack("<I", read_exact(fh, 4))
            tokens = list(struct.unpack(f"<{count}I", read_exact(fh, 4 * count)))
            structured = read_tensor(fh)
            (label,) = struct.unpack("<I", read_exact(fh, 4))
            samples.append(MultimodalSample(image, tokens, structured, label))
        if fh.read(1):
            raise FormatError("trailing bytes after last sample")
    return samples, meta


def load_dataset(path) -> list[MultimodalSample]:
    return read_dataset(path)[0]
