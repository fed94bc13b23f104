"""Deterministic synthetic paired-modality corpora.

Each class gets a unit-norm image prototype and a disjoint block of caption
tokens; pairs are the noisy prototype plus a random caption from the class
block interleaved with a small shared stop-token pool. Corpora persist as
UTF-8 line-delimited JSON records.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

PAD_ID = 0
STOP_TOKENS = (1, 2, 3, 4)
RESERVED_TOKENS = 1 + len(STOP_TOKENS)


class CorpusFormatError(ValueError):
    """A corpus file line failed to parse or validate."""


@dataclass(frozen=True)
class CorpusSpec:
    n_classes: int = 8
    n_pairs: int = 512
    d_img: int = 64
    vocab_size: int = 128
    tokens_per_caption: int = 12
    class_token_block: int = 8
    noise_sigma: float = 0.1
    seed: int = 0

    def __post_init__(self):
        if self.n_classes < 1:
            raise ValueError("n_classes must be >= 1")
        if self.n_pairs < 0:
            raise ValueError("n_pairs must be >= 0")
        if self.tokens_per_caption < 1:
            raise ValueError("tokens_per_caption must be >= 1")
        if self.class_token_block < 1:
            raise ValueError("class_token_block must be >= 1")
        if self.noise_sigma < 0:
            raise ValueError("noise_sigma must be >= 0")
        if self.n_classes * self.class_token_block + RESERVED_TOKENS > self.vocab_size:
            raise ValueError(
                "vocab_size too small for the class token blocks plus "
                f"{RESERVED_TOKENS} reserved tokens")


@dataclass
class PairRecord:
    id: int
    class_id: int
    image: np.ndarray
    tokens: list
    caption: str

    def __eq__(self, other):
        return (self.id == other.id and self.class_id == other.class_id
                and np.array_equal(self.image, other.image)
                and self.tokens == other.tokens
                and self.caption == other.caption)


@dataclass
class PairCorpus:
    spec_d_img: int
    records: list = field(default_factory=list)

    def __len__(self):
        return len(self.records)

    def __eq__(self, other):
        return (self.spec_d_img == other.spec_d_img
                and self.records == other.records)

    def class_ids(self):
        return np.array([r.class_id for r in self.records], dtype=np.int64)

    def images(self):
        return np.stack([r.image for r in self.records]) if self.records else \
            np.zeros((0, self.spec_d_img))

    def padded_tokens(self):
        """Token matrix padded with PAD_ID to the longest caption."""
        if not self.records:
            return np.zeros((0, 1), dtype=np.int64)
        length = max(len(r.tokens) for r in self.records)
        out = np.full((len(self.records), length), PAD_ID, dtype=np.int64)
        for i, r in enumerate(self.records):
            out[i, :len(r.tokens)] = r.tokens
        return out


def class_token_range(spec, class_id):
    """Half-open token-id range of a class's disjoint block."""
    start = RESERVED_TOKENS + class_id * spec.class_token_block
    return start, start + spec.class_token_block


def generate(spec):
    """Deterministic corpus: per-class unit prototypes, noisy images, and
    captions mixing class-block tokens with the shared stop pool."""
    rng = np.random.default_rng(spec.seed)
    protos = rng.standard_normal((spec.n_classes, spec.d_img))
    protos /= np.linalg.norm(protos, axis=1, keepdims=True)

    records = []
    for i in range(spec.n_pairs):
        c = i % spec.n_classes
        img = protos[c] + spec.noise_sigma * rng.standard_normal(spec.d_img)
        img /= np.linalg.norm(img)
        lo, hi = class_token_range(spec, c)
        pool = list(STOP_TOKENS) + list(range(lo, hi))
        tokens = [int(pool[k]) for k in
                  rng.integers(0, len(pool), size=spec.tokens_per_caption)]
        if not any(t >= RESERVED_TOKENS for t in tokens):
            tokens[0] = lo  # keep at least one class token per caption
        caption = f"class {c}: " + " ".join(f"tok{t}" for t in tokens)
        records.append(PairRecord(i, c, img, tokens, caption))
    return PairCorpus(spec.d_img, records)


def class_prototypes(spec):
    """The unit prototypes the generator would draw for this spec."""
    rng = np.random.default_rng(spec.seed)
    protos = rng.standard_normal((spec.n_classes, spec.d_img))
    return protos / np.linalg.norm(protos, axis=1, keepdims=True)


def save_corpus(corpus, path):
    """One JSON object per line; floats serialized with round-trip repr."""
    with open(path, "w", encoding="utf-8") as fh:
        for r in corpus.records:
            obj = {
                "id": int(r.id),
                "class": int(r.class_id),
                "image": [float(x) for x in r.image],
                "tokens": [int(t) for t in r.tokens],
                "caption": r.caption,
            }
            fh.write(json.dumps(obj) + "\n")


def load_corpus(path, d_img=None):
    """Inverse of save_corpus; malformed lines fail with their line number."""
    records = []
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.rstrip("\n")
            if not line:
                raise CorpusFormatError(f"line {lineno}: blank line")
            try:
                obj = json.loads(line)
                rec = PairRecord(
                    id=int(obj["id"]),
                    class_id=int(obj["class"]),
                    image=np.array(obj["image"], dtype=np.float64),
                    tokens=[int(t) for t in obj["tokens"]],
                    caption=str(obj["caption"]),
                )
            except (json.JSONDecodeError, KeyError, TypeError, ValueError) as e:
                raise CorpusFormatError(f"line {lineno}: {e}") from e
            records.append(rec)
    if records:
        width = records[0].image.size
        for lineno, r in enumerate(records, start=1):
            if r.image.size != width:
                raise CorpusFormatError(
                    f"line {lineno}: image width {r.image.size} != {width}")
    else:
        width = d_img if d_img is not None else 0
    return PairCorpus(width, records)


@dataclass
class PairBatch:
    ids: np.ndarray
    class_ids: np.ndarray
    images: np.ndarray
    tokens: np.ndarray


def batch_iter(corpus, batch_size, seed=0, shuffle=True):
    """One epoch of batches; deterministic per seed, final short batch kept.

    Within a batch, pair (i, i) is the positive; every cross pairing is a
    negative, including same-class items.
    """
    if batch_size < 1:
        raise ValueError("batch_size must be >= 1")
    n = len(corpus)
    order = np.arange(n)
    if shuffle:
        order = np.random.default_rng(seed).permutation(n)
    images = corpus.images()
    tokens = corpus.padded_tokens()
    ids = np.array([r.id for r in corpus.records], dtype=np.int64)
    classes = corpus.class_ids()
    for start in range(0, n, batch_size):
        sel = order[start:start + batch_size]
        yield PairBatch(ids[sel], classes[sel], images[sel], tokens[sel])
