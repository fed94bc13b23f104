"""Evaluation protocols: zero-shot classification from class prompt
templates, text-to-image retrieval with recall@k, and a deterministic 2-D
principal-component projection of embeddings."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import encoders as enc
from .data import STOP_TOKENS, class_token_range


@dataclass
class ClassPrompt:
    """Synthetic prompt templates for one class: token sequences from the
    class block framed by shared stop tokens."""

    class_id: int
    templates: list

    def __post_init__(self):
        if not self.templates:
            raise ValueError("each class needs at least one template")


@dataclass
class EvalResult:
    top1: float
    top5: float
    topk: float
    predictions: np.ndarray
    confusion: np.ndarray


def default_prompts(spec, n_templates=4, body_len=6):
    """Per class, class-block token runs framed by stop tokens."""
    prompts = []
    for c in range(spec.n_classes):
        lo, hi = class_token_range(spec, c)
        block = list(range(lo, hi))
        templates = []
        for t in range(n_templates):
            body = [block[(t + j) % len(block)] for j in range(body_len)]
            templates.append([STOP_TOKENS[t % len(STOP_TOKENS)]] + body
                             + [STOP_TOKENS[(t + 1) % len(STOP_TOKENS)]])
        prompts.append(ClassPrompt(c, templates))
    return prompts


def build_class_embeddings(params, prompts):
    """One unit-norm embedding per class: normalize each template embedding,
    average, then normalize again."""
    out = np.zeros((len(prompts), params.dims.d_e))
    for i, prompt in enumerate(prompts):
        length = max(len(t) for t in prompt.templates)
        tokens = np.zeros((len(prompt.templates), length), dtype=np.int64)
        for j, t in enumerate(prompt.templates):
            tokens[j, :len(t)] = t
        embeds = enc.text_embeddings(params, tokens)  # already unit rows
        mean = embeds.mean(axis=0)
        norm = np.linalg.norm(mean)
        if norm < 1e-12:
            raise ValueError(
                f"class {prompt.class_id}: template embeddings average to "
                "zero and cannot be normalized")
        out[i] = mean / norm
    return out


def zero_shot_classify(params, images, labels, class_embeds, k=5):
    """Predict the class whose prompt embedding is closest (cosine) to each
    image embedding; ties go to the lowest class id."""
    if class_embeds.shape[1] != params.dims.d_e:
        raise ValueError("class embedding width mismatch")
    c = class_embeds.shape[0]
    if k > c:
        raise ValueError("k exceeds the number of classes")
    embeds = enc.image_embeddings(params, images)  # unit rows
    norms = np.linalg.norm(class_embeds, axis=1, keepdims=True)
    sims = embeds @ (class_embeds / norms).T
    order = np.lexsort((np.tile(np.arange(c), (sims.shape[0], 1)),
                        -sims), axis=1)
    labels = np.asarray(labels, dtype=np.int64)
    preds = order[:, 0]

    def acc(kk):
        if not len(labels):
            return 0.0
        return float((order[:, :kk] == labels[:, None]).any(axis=1).mean())

    confusion = np.zeros((c, c), dtype=np.int64)
    for t, p in zip(labels, preds):
        confusion[t, p] += 1
    return EvalResult(acc(1), acc(min(5, c)), acc(k), preds, confusion)


def retrieve(params, query_tokens, corpus, k):
    """Rank corpus images by cosine similarity to the query text embedding.

    Returns at most k (id, score) pairs, descending score, ties by id.
    """
    if len(corpus) == 0:
        raise ValueError("empty corpus")
    if k > len(corpus):
        raise ValueError("k exceeds corpus size")
    tokens = np.asarray(query_tokens, dtype=np.int64).reshape(1, -1)
    q = enc.text_embeddings(params, tokens)[0]
    embeds = enc.image_embeddings(params, corpus.images())
    scores = embeds @ q  # both sides unit-norm
    ids = np.array([r.id for r in corpus.records], dtype=np.int64)
    order = np.lexsort((ids, -scores))
    return [(int(ids[i]), float(scores[i])) for i in order[:k]]


def recall_at_k(rankings, truth, k):
    """Fraction of queries whose top-k ranked ids intersect the truth set."""
    if len(rankings) != len(truth):
        raise ValueError("rankings and truth lengths disagree")
    if not rankings:
        return 0.0
    hits = 0
    for ranked, relevant in zip(rankings, truth):
        if set(ranked[:k]) & set(relevant):
            hits += 1
    return hits / len(rankings)


def _power_iteration(cov, start, tol=1e-10, max_iter=10000):
    v = start / np.linalg.norm(start)
    for _ in range(max_iter):
        w = cov @ v
        norm = np.linalg.norm(w)
        if norm < 1e-300:
            return v, 0.0
        w /= norm
        if np.linalg.norm(w - v) < tol or np.linalg.norm(w + v) < tol:
            v = w
            break
        v = w
    return v, float(v @ cov @ v)


def project_2d(embeddings):
    """Mean-centered projection onto the top-2 principal axes, via power
    iteration with deflation. Sign convention: first nonzero loading of each
    axis is positive."""
    x = np.asarray(embeddings, dtype=np.float64)
    if x.ndim != 2 or x.shape[0] < 2:
        raise ValueError("project_2d needs at least 2 points")
    centered = x - x.mean(axis=0)
    cov = centered.T @ centered / (x.shape[0] - 1)
    start = np.ones(cov.shape[0])
    axes = []
    work = cov.copy()
    for _ in range(2):
        v, lam = _power_iteration(work, start)
        for prev in axes:  # guard rank-deficient data: keep axes orthogonal
            v = v - (v @ prev) * prev
        norm = np.linalg.norm(v)
        if norm < 1e-12:
            for i in range(cov.shape[0]):
                v = np.zeros(cov.shape[0])
                v[i] = 1.0
                for prev in axes:
                    v = v - (v @ prev) * prev
                norm = np.linalg.norm(v)
                if norm > 0.5:
                    break
        v = v / norm
        nz = np.nonzero(np.abs(v) > 1e-12)[0]
        if len(nz) and v[nz[0]] < 0:
            v = -v
        axes.append(v)
        work = work - lam * np.outer(v, v)
    return centered @ np.stack(axes, axis=1)
