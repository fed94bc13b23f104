"""Toy dual encoders: a small image MLP, a mean-pooling text encoder over a
learned embedding table, and strictly linear projection heads into a shared
embedding space.

These stand in structurally for the large pretrained encoders of the full
setup: two modality-specific feature widths joined only through the linear
heads.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T


@dataclass(frozen=True)
class Dims:
    """Widths of the toy architecture. d_e is the shared embedding size."""

    d_img: int = 64
    d_hid: int = 256
    d_i: int = 256
    d_emb: int = 32
    d_t: int = 48
    d_e: int = 32
    vocab_size: int = 128

    def __post_init__(self):
        for name, value in self.__dict__.items():
            if value < 1:
                raise ValueError(f"dimension {name} must be >= 1, got {value}")


PARAM_NAMES = ("image_w1", "image_w2", "text_embed", "text_mlp",
               "proj_image", "proj_text")

IMAGE_GROUP = ("image_w1", "image_w2", "proj_image")
TEXT_GROUP = ("text_embed", "text_mlp", "proj_text")

PAD_ID = 0


@dataclass
class ModelParams:
    """All trainable arrays, keyed by the names in PARAM_NAMES."""

    dims: Dims
    arrays: dict

    def copy(self):
        return ModelParams(self.dims, {k: v.copy() for k, v in self.arrays.items()})


def init_params(seed, dims=Dims()):
    """Glorot-uniform initialization, deterministic per seed."""
    rng = np.random.default_rng(seed)

    def glorot(fan_in, fan_out):
        limit = np.sqrt(6.0 / (fan_in + fan_out))
        return rng.uniform(-limit, limit, size=(fan_in, fan_out))

    arrays = {
        "image_w1": glorot(dims.d_img, dims.d_hid),
        "image_w2": glorot(dims.d_hid, dims.d_i),
        "text_embed": glorot(dims.vocab_size, dims.d_emb),
        "text_mlp": glorot(dims.d_emb, dims.d_t),
        "proj_image": glorot(dims.d_i, dims.d_e),
        "proj_text": glorot(dims.d_t, dims.d_e),
    }
    return ModelParams(dims, arrays)


def leaf_params(tape, params):
    """Register every parameter array as a tape leaf; returns name -> Tensor."""
    return {name: tape.leaf(params.arrays[name]) for name in PARAM_NAMES}


def encode_image(leaves, dims, batch):
    """Two-layer rectified MLP over image vectors."""
    if batch.shape[1] != dims.d_img:
        raise T.ShapeError(
            f"image batch width {batch.shape[1]} != d_img {dims.d_img}")
    h = T.relu(T.matmul(batch, leaves["image_w1"]))
    return T.matmul(h, leaves["image_w2"])


def embed_mean(table, tokens, pad_id=PAD_ID):
    """Mean of non-pad token embeddings per row; differentiable into the
    table via scatter-add."""
    tokens = np.asarray(tokens, dtype=np.int64)
    if tokens.ndim != 2:
        raise T.ShapeError("tokens must be a rank-2 integer matrix")
    vocab = table.shape[0]
    if np.any(tokens < 0) or np.any(tokens >= vocab):
        raise ValueError("token id outside vocabulary")
    mask = tokens != pad_id
    counts = mask.sum(axis=1)
    if np.any(counts == 0):
        raise ValueError("row with no non-pad tokens")
    tab = table.data
    n, length = tokens.shape
    out = np.zeros((n, tab.shape[1]))
    for i in range(n):
        out[i] = tab[tokens[i][mask[i]]].sum(axis=0) / counts[i]

    def bwd(g, tokens=tokens, mask=mask, counts=counts, shape=tab.shape):
        grad = np.zeros(shape, dtype=np.float64)
        for i in range(tokens.shape[0]):
            np.add.at(grad, tokens[i][mask[i]], g[i] / counts[i])
        return [grad]

    return T._result(out, "embed_mean", [table], bwd)


def encode_text(leaves, dims, tokens, pad_id=PAD_ID):
    """Mean-pooled token embeddings through one dense layer."""
    pooled = embed_mean(leaves["text_embed"], tokens, pad_id)
    return T.matmul(pooled, leaves["text_mlp"])


def project(features, head):
    """Pure linear map into the shared embedding space (no bias, no
    nonlinearity; callers normalize where the training recipe says so)."""
    return T.matmul(features, head)


def forward_embeddings(tape, params, images, tokens):
    """Full forward pass to row-normalized shared-space embeddings.

    Returns (leaves, image_embeds, text_embeds); everything stays on the tape
    so losses built on top remain differentiable.
    """
    leaves = leaf_params(tape, params)
    img_batch = tape.leaf(np.asarray(images, dtype=np.float64))
    i_f = encode_image(leaves, params.dims, img_batch)
    t_f = encode_text(leaves, params.dims, tokens)
    i_e = T.l2_normalize_rows(project(i_f, leaves["proj_image"]))
    t_e = T.l2_normalize_rows(project(t_f, leaves["proj_text"]))
    return leaves, i_e, t_e


def image_embeddings(params, images):
    """Forward-only normalized image embeddings as a plain array."""
    tape = T.Tape()
    leaves = leaf_params(tape, params)
    i_f = encode_image(leaves, params.dims, tape.leaf(np.asarray(images, dtype=np.float64)))
    return T.l2_normalize_rows(project(i_f, leaves["proj_image"])).data.copy()


def text_embeddings(params, tokens):
    """Forward-only normalized text embeddings as a plain array."""
    tape = T.Tape()
    leaves = leaf_params(tape, params)
    t_f = encode_text(leaves, params.dims, tokens)
    return T.l2_normalize_rows(project(t_f, leaves["proj_text"])).data.copy()
