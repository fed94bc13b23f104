"""Deterministic end-to-end training of the toy dual encoders.

Per batch: encode both modalities, project through the linear heads,
row-normalize, compute the contrastive loss and the contextual loss on the
same normalized point sets, backward, then a two-group Adam update (image-side
arrays at lr_image, text-side arrays at lr_text).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from . import encoders as enc
from . import losses
from .data import PairCorpus, batch_iter

ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-8

CHECKPOINT_VERSION = 1

FINE_TUNE_HEAD_LR = 1e-2


class CheckpointFormatError(ValueError):
    """Checkpoint file is corrupt or has an unrecognized version."""


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 30
    batch_size: int = 32
    lr_image: float = 1e-4
    lr_text: float = 1e-6
    weight_decay: float = 1e-3
    decoupled_decay: bool = False
    loss: losses.LossConfig = field(default_factory=losses.LossConfig)
    seed: int = 0

    def __post_init__(self):
        if self.epochs < 0:
            raise ValueError("epochs must be >= 0")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.lr_image < 0 or self.lr_text < 0 or self.weight_decay < 0:
            raise ValueError("rates must be non-negative")


class AdamState:
    """First/second moments per parameter array plus a shared step counter."""

    def __init__(self, arrays):
        self.m = {k: np.zeros_like(v) for k, v in arrays.items()}
        self.v = {k: np.zeros_like(v) for k, v in arrays.items()}
        self.t = 0


def adam_step(params, grads, state, lr, weight_decay=0.0, decoupled=False):
    """One Adam update over a dict of arrays, in place.

    Coupled decay adds weight_decay * theta to the gradient before the
    moment updates; decoupled decay shrinks theta directly.
    """
    state.t += 1
    t = state.t
    for name, theta in params.items():
        g = grads[name]
        if g.shape != theta.shape:
            raise T.ShapeError(f"gradient shape mismatch for {name}")
        if not np.all(np.isfinite(g)):
            raise T.NumericError(f"non-finite gradient for {name}")
        if weight_decay and not decoupled:
            g = g + weight_decay * theta
        m = state.m[name]
        v = state.v[name]
        m *= ADAM_BETA1
        m += (1 - ADAM_BETA1) * g
        v *= ADAM_BETA2
        v += (1 - ADAM_BETA2) * g * g
        m_hat = m / (1 - ADAM_BETA1 ** t)
        v_hat = v / (1 - ADAM_BETA2 ** t)
        theta -= lr * m_hat / (np.sqrt(v_hat) + ADAM_EPS)
        if weight_decay and decoupled:
            theta -= lr * weight_decay * theta


@dataclass
class Checkpoint:
    format_version: int
    dims: enc.Dims
    params: enc.ModelParams
    config: TrainConfig
    final_epoch: int
    history: list  # rows of (epoch, total, contrastive, contextual)


@dataclass
class LossReport:
    history: list

    def epoch_means(self):
        return [row[1] for row in self.history]


def _batch_loss(params, batch, cfg):
    """Forward + backward on one batch; returns (breakdown, grads dict)."""
    tape = T.Tape()
    leaves, i_e, t_e = enc.forward_embeddings(
        tape, params, batch.images, batch.tokens)
    total, breakdown = losses.total_loss(i_e, t_e, i_e, t_e, cfg.loss)
    grad_map = T.backward(total)
    grads = {}
    for name in enc.PARAM_NAMES:
        leaf = leaves[name]
        flat = grad_map.get(leaf.node_id)
        shape = params.arrays[name].shape
        grads[name] = (np.zeros(shape) if flat is None
                       else flat.reshape(shape))
    return breakdown, grads


def train(cfg, corpus, params):
    """Optimize a copy of params on the corpus; deterministic per seed.

    Returns (Checkpoint, LossReport).
    """
    if len(corpus) == 0:
        raise ValueError("corpus is empty")
    params = params.copy()
    image_state = AdamState({k: params.arrays[k] for k in enc.IMAGE_GROUP})
    text_state = AdamState({k: params.arrays[k] for k in enc.TEXT_GROUP})
    history = []
    for epoch in range(cfg.epochs):
        sums = np.zeros(3)
        n_batches = 0
        for bi, batch in enumerate(batch_iter(
                corpus, cfg.batch_size, seed=cfg.seed + epoch, shuffle=True)):
            try:
                breakdown, grads = _batch_loss(params, batch, cfg)
            except T.NumericError as e:
                raise T.NumericError(
                    f"epoch {epoch + 1} batch {bi}: {e}") from e
            adam_step({k: params.arrays[k] for k in enc.IMAGE_GROUP},
                      grads, image_state, cfg.lr_image,
                      cfg.weight_decay, cfg.decoupled_decay)
            adam_step({k: params.arrays[k] for k in enc.TEXT_GROUP},
                      grads, text_state, cfg.lr_text,
                      cfg.weight_decay, cfg.decoupled_decay)
            sums += (breakdown.total, breakdown.contrastive,
                     breakdown.contextual)
            n_batches += 1
        means = sums / n_batches
        history.append((epoch + 1, float(means[0]), float(means[1]),
                        float(means[2])))
    ckpt = Checkpoint(CHECKPOINT_VERSION, params.dims, params, cfg,
                      cfg.epochs, history)
    return ckpt, LossReport(history)


def split_corpus(corpus, seed, fractions=(0.8, 0.1, 0.1)):
    """Deterministic shuffled train/val/test split."""
    n = len(corpus)
    order = np.random.default_rng(seed).permutation(n)
    n_train = int(round(fractions[0] * n))
    n_val = int(round(fractions[1] * n))
    def take(idx):
        return PairCorpus(corpus.spec_d_img,
                          [corpus.records[i] for i in idx])
    return (take(order[:n_train]),
            take(order[n_train:n_train + n_val]),
            take(order[n_train + n_val:]))


def _classifier_forward(tape, params, head_leaf, images):
    leaves = enc.leaf_params(tape, params)
    i_f = enc.encode_image(leaves, params.dims,
                           tape.leaf(np.asarray(images, dtype=np.float64)))
    i_e = T.l2_normalize_rows(enc.project(i_f, leaves["proj_image"]))
    return leaves, T.matmul(i_e, head_leaf)


def _cross_entropy(logits, labels):
    """Mean softmax cross-entropy of logits (N,C) against integer labels."""
    n, c = logits.shape
    onehot = np.zeros((n, c))
    onehot[np.arange(n), labels] = 1.0
    picked = T.reduce(T.mul(logits, T.build([n, c], onehot.reshape(-1))),
                      "all", "sum")
    m = T.reduce(logits, "rows", "max")
    lse = T.add(T.log(T.reduce(T.exp(T.sub(logits, m)), "rows", "sum")), m)
    return T.scale(T.sub(T.reduce(lse, "all", "sum"), picked), 1.0 / n)


def _classify(params, head, images):
    tape = T.Tape()
    head_leaf = tape.leaf(head)
    _, logits = _classifier_forward(tape, params, head_leaf, images)
    return logits.data.copy()


def _topk_accuracy(logits, labels, ks=(1, 5)):
    # stable ranking: higher logit first, ties by lower class id
    order = np.lexsort((np.tile(np.arange(logits.shape[1]),
                                (logits.shape[0], 1)), -logits), axis=1)
    out = {}
    for k in ks:
        k_eff = min(k, logits.shape[1])
        hits = (order[:, :k_eff] == labels[:, None]).any(axis=1)
        out[k] = float(hits.mean()) if len(labels) else 0.0
    return out


@dataclass
class FineTuneResult:
    checkpoint: Checkpoint
    head: np.ndarray
    top1: float
    top5: float


def fine_tune(ckpt, labeled, cfg, n_classes=None):
    """Attach a linear head on image embeddings and continue end-to-end with
    softmax cross-entropy; reports top-1/top-5 on the held-out test split.

    The fresh head trains at FINE_TUNE_HEAD_LR; pretrained arrays keep their
    modality learning rates from cfg.
    """
    params = ckpt.params.copy()
    classes = labeled.class_ids()
    if n_classes is None:
        n_classes = int(classes.max()) + 1 if len(classes) else 1
    if len(classes) and classes.max() >= n_classes:
        raise ValueError("class id exceeds configured class count")
    train_split, _val, test_split = split_corpus(labeled, cfg.seed)

    rng = np.random.default_rng(cfg.seed)
    limit = np.sqrt(6.0 / (params.dims.d_e + n_classes))
    head = rng.uniform(-limit, limit, size=(params.dims.d_e, n_classes))

    image_state = AdamState({k: params.arrays[k] for k in enc.IMAGE_GROUP})
    text_state = AdamState({k: params.arrays[k] for k in enc.TEXT_GROUP})
    head_state = AdamState({"head": head})
    for epoch in range(cfg.epochs):
        for batch in batch_iter(train_split, cfg.batch_size,
                                seed=cfg.seed + epoch, shuffle=True):
            tape = T.Tape()
            head_leaf = tape.leaf(head)
            leaves, logits = _classifier_forward(
                tape, params, head_leaf, batch.images)
            loss = _cross_entropy(logits, batch.class_ids)
            grad_map = T.backward(loss)
            grads = {}
            for name in enc.PARAM_NAMES:
                flat = grad_map.get(leaves[name].node_id)
                shape = params.arrays[name].shape
                grads[name] = (np.zeros(shape) if flat is None
                               else flat.reshape(shape))
            head_grad = grad_map.get(head_leaf.node_id)
            head_grad = (np.zeros_like(head) if head_grad is None
                         else head_grad.reshape(head.shape))
            adam_step({k: params.arrays[k] for k in enc.IMAGE_GROUP},
                      grads, image_state, cfg.lr_image,
                      cfg.weight_decay, cfg.decoupled_decay)
            adam_step({k: params.arrays[k] for k in enc.TEXT_GROUP},
                      grads, text_state, cfg.lr_text,
                      cfg.weight_decay, cfg.decoupled_decay)
            adam_step({"head": head}, {"head": head_grad}, head_state,
                      FINE_TUNE_HEAD_LR, cfg.weight_decay,
                      cfg.decoupled_decay)

    eval_split = test_split if len(test_split) else labeled
    logits = _classify(params, head, eval_split.images())
    acc = _topk_accuracy(logits, eval_split.class_ids())
    new_ckpt = Checkpoint(CHECKPOINT_VERSION, params.dims, params,
                          cfg, ckpt.final_epoch + cfg.epochs, ckpt.history)
    return FineTuneResult(new_ckpt, head, acc[1], acc[5])


# checkpoint serialization: versioned text, hex floats for bit-exactness

def _write_array(fh, name, arr):
    fh.write(f"[param {name}] {' '.join(str(s) for s in arr.shape)}\n")
    for row in np.atleast_2d(arr):
        fh.write(" ".join(float(x).hex() for x in row) + "\n")


def save_checkpoint(ckpt, path):
    cfg, loss = ckpt.config, ckpt.config.loss
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(f"format_version {ckpt.format_version}\n")
        fh.write("[dims] " + " ".join(
            f"{k}={getattr(ckpt.dims, k)}"
            for k in ("d_img", "d_hid", "d_i", "d_emb", "d_t", "d_e",
                      "vocab_size")) + "\n")
        fh.write("[config] " + " ".join([
            f"epochs={cfg.epochs}", f"batch_size={cfg.batch_size}",
            f"lr_image={cfg.lr_image!r}", f"lr_text={cfg.lr_text!r}",
            f"weight_decay={cfg.weight_decay!r}",
            f"decoupled_decay={int(cfg.decoupled_decay)}",
            f"seed={cfg.seed}", f"tau={loss.tau!r}",
            f"lambda_w={loss.lambda_w!r}", f"alpha={loss.alpha!r}",
            f"h={loss.h!r}", f"eps={loss.eps!r}",
            f"symmetric_contextual={int(loss.symmetric_contextual)}",
        ]) + "\n")
        fh.write(f"final_epoch {ckpt.final_epoch}\n")
        for name in enc.PARAM_NAMES:
            _write_array(fh, name, ckpt.params.arrays[name])
        fh.write("[history]\n")
        fh.write("epoch,loss,contrastive,contextual\n")
        for epoch, total, con, cx in ckpt.history:
            fh.write(f"{epoch},{total!r},{con!r},{cx!r}\n")


def load_checkpoint(path):
    with open(path, "r", encoding="utf-8") as fh:
        lines = fh.read().splitlines()
    try:
        pos = 0
        tag, version = lines[pos].split()
        if tag != "format_version":
            raise CheckpointFormatError("missing format_version header")
        if int(version) != CHECKPOINT_VERSION:
            raise CheckpointFormatError(
                f"unsupported checkpoint version {version}")
        pos += 1
        dims_kv = dict(kv.split("=") for kv in lines[pos].split()[1:])
        dims = enc.Dims(**{k: int(v) for k, v in dims_kv.items()})
        pos += 1
        cfg_kv = dict(kv.split("=") for kv in lines[pos].split()[1:])
        loss = losses.LossConfig(
            tau=float(cfg_kv["tau"]), lambda_w=float(cfg_kv["lambda_w"]),
            alpha=float(cfg_kv["alpha"]), h=float(cfg_kv["h"]),
            eps=float(cfg_kv["eps"]),
            symmetric_contextual=bool(int(cfg_kv["symmetric_contextual"])))
        cfg = TrainConfig(
            epochs=int(cfg_kv["epochs"]),
            batch_size=int(cfg_kv["batch_size"]),
            lr_image=float(cfg_kv["lr_image"]),
            lr_text=float(cfg_kv["lr_text"]),
            weight_decay=float(cfg_kv["weight_decay"]),
            decoupled_decay=bool(int(cfg_kv["decoupled_decay"])),
            loss=loss, seed=int(cfg_kv["seed"]))
        pos += 1
        final_epoch = int(lines[pos].split()[1])
        pos += 1
        arrays = {}
        for name in enc.PARAM_NAMES:
            header = lines[pos].split()
            if header[0] != "[param" or header[1].rstrip("]") != name:
                raise CheckpointFormatError(
                    f"expected parameter section {name}")
            shape = tuple(int(s) for s in header[2:])
            pos += 1
            rows = shape[0] if len(shape) == 2 else 1
            data = []
            for _ in range(rows):
                data.append([float.fromhex(tok)
                             for tok in lines[pos].split()])
                pos += 1
            arrays[name] = np.array(data, dtype=np.float64).reshape(shape)
        if lines[pos] != "[history]":
            raise CheckpointFormatError("missing history section")
        pos += 2  # skip header row
        history = []
        for line in lines[pos:]:
            epoch, total, con, cx = line.split(",")
            history.append((int(epoch), float(total), float(con), float(cx)))
    except (IndexError, KeyError, ValueError) as e:
        if isinstance(e, CheckpointFormatError):
            raise
        raise CheckpointFormatError(f"corrupt checkpoint: {e}") from e
    params = enc.ModelParams(dims, arrays)
    return Checkpoint(CHECKPOINT_VERSION, dims, params, cfg,
                      final_epoch, history)
