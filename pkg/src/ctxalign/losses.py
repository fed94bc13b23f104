"""Alignment objectives for dual-encoder image/text batches.

Three pieces:

* a bidirectional temperature-scaled contrastive loss over the batch
  similarity matrix (matched pair against all in-batch negatives),
* a contextual loss built from a nearest-neighbor affinity field between the
  two projected point sets,
* their weighted combination.

All paths are built from recorded tensor ops, so gradients flow to both
inputs.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import tensor as T


@dataclass(frozen=True)
class LossConfig:
    """Hyperparameters of the combined objective.

    tau: softmax temperature of the contrastive loss.
    lambda_w: weight of the image-to-text direction inside the contrastive
        loss (the text-to-image direction gets 1 - lambda_w).
    alpha: weight of the contextual term in the total loss.
    h: bandwidth of the exponential affinity.
    eps: stabilizer added to the per-row minimum distance.
    symmetric_contextual: also average in the transposed-direction contextual
        loss (off by default).
    """

    tau: float = 1.0
    lambda_w: float = 0.75
    alpha: float = 0.5
    h: float = 0.5
    eps: float = 1e-5
    symmetric_contextual: bool = False

    def __post_init__(self):
        if self.tau <= 0:
            raise ValueError("tau must be > 0")
        if not 0.0 <= self.lambda_w <= 1.0:
            raise ValueError("lambda_w must be in [0, 1]")
        if self.alpha < 0:
            raise ValueError("alpha must be >= 0")
        if self.h <= 0:
            raise ValueError("h must be > 0")
        if self.eps <= 0:
            raise ValueError("eps must be > 0")


@dataclass
class AffinityReport:
    """Intermediate matrices of the contextual pipeline, kept for inspection.

    D holds pairwise cosine distances, D_norm the per-row-min normalized
    distances, W the exponential affinities and CX the row-normalized
    contextual affinities. cx_tensor keeps the differentiable scalar alive on
    its tape; cx_scalar is its plain value.
    """

    D: np.ndarray
    D_norm: np.ndarray
    W: np.ndarray
    CX: np.ndarray
    cx_scalar: float
    col_argmax: np.ndarray
    cx_tensor: "T.Tensor" = field(repr=False, default=None)


@dataclass(frozen=True)
class LossBreakdown:
    contrastive: float
    contextual: float
    total: float


def cosine_similarity_matrix(v_e, u_e):
    """Pairwise cosine similarities: entry (i, k) compares row i of v_e with
    row k of u_e."""
    if v_e.data.ndim != 2 or u_e.data.ndim != 2:
        raise T.ShapeError("cosine_similarity_matrix requires rank-2 inputs")
    if v_e.shape[1] != u_e.shape[1]:
        raise T.ShapeError(
            f"feature widths disagree: {v_e.shape} vs {u_e.shape}")
    vn = T.l2_normalize_rows(v_e, guard=1e-15)
    un = T.l2_normalize_rows(u_e, guard=1e-15)
    # un has rows as the second point set; transpose via matmul with it
    return T.matmul(vn, _transpose(un))


def _transpose(t):
    """Recorded transpose (rank 2)."""
    x = t.data
    if x.ndim != 2:
        raise T.ShapeError("transpose requires a rank-2 tensor")

    def bwd(g):
        return [g.T]

    return T._result(x.T, "transpose", [t], bwd)


def _logsumexp_rows(s):
    """Row-wise log-sum-exp of a matrix, stabilized by the row max -> (n,1)."""
    m = T.reduce(s, "rows", "max")
    e = T.exp(T.sub(s, m))
    return T.add(T.log(T.reduce(e, "rows", "sum")), m)


def _logsumexp_cols(s):
    m = T.reduce(s, "cols", "max")
    e = T.exp(T.sub(s, m))
    return T.add(T.log(T.reduce(e, "cols", "sum")), m)


def contrastive_loss(v_e, u_e, cfg):
    """Bidirectional in-batch contrastive loss.

    Per item: negative log-softmax of the matched similarity against all N
    candidates (temperature tau), averaged over the batch with the two
    directions weighted lambda_w / (1 - lambda_w).
    """
    n = v_e.shape[0]
    if u_e.shape[0] != n:
        raise T.ShapeError("batch sizes disagree")
    s = T.scale(cosine_similarity_matrix(v_e, u_e), 1.0 / cfg.tau)
    eye = T.build([n, n], np.eye(n).reshape(-1))
    trace = T.reduce(T.mul(s, eye), "all", "sum")
    lse_v2u = T.reduce(_logsumexp_rows(s), "all", "sum")
    lse_u2v = T.reduce(_logsumexp_cols(s), "all", "sum")
    lam = cfg.lambda_w
    per_dir = T.add(
        T.scale(T.sub(lse_v2u, trace), lam),
        T.scale(T.sub(lse_u2v, trace), 1.0 - lam),
    )
    return T.scale(per_dir, 1.0 / n)


def contextual_affinity(u_p, v_p, cfg):
    """Nearest-neighbor affinity field between two projected point sets.

    Pipeline: cosine distance, per-row-min normalization (with eps),
    exponential similarity at bandwidth h, row-stochastic normalization.
    Returns a fully populated AffinityReport whose cx_tensor stays on the
    inputs' tape.
    """
    n = u_p.shape[0]
    if v_p.shape[0] != n:
        raise T.ShapeError("point sets must have equal size")
    if n < 2:
        raise T.ShapeError("contextual affinity needs at least 2 points")
    d = T.offset(T.neg(cosine_similarity_matrix(u_p, v_p)), 1.0)
    d_min = T.reduce(d, "rows", "min")
    d_norm = T.div(d, T.offset(d_min, cfg.eps))
    w = T.exp(T.scale(T.offset(T.neg(d_norm), 1.0), 1.0 / cfg.h))
    cx = T.div(w, T.reduce(w, "rows", "sum"))
    col_max = T.reduce(cx, "cols", "max")
    cx_scalar = T.scale(T.reduce(col_max, "all", "sum"), 1.0 / n)
    return AffinityReport(
        D=d.data.copy(),
        D_norm=d_norm.data.copy(),
        W=w.data.copy(),
        CX=cx.data.copy(),
        cx_scalar=cx_scalar.item(),
        col_argmax=np.argmax(cx.data, axis=0),
        cx_tensor=cx_scalar,
    )


def contextual_similarity(report):
    """Set-to-set similarity: mean over columns of the per-column maximum
    contextual affinity. Lies in (0, 1]."""
    n = report.CX.shape[0]
    return float(np.max(report.CX, axis=0).sum() / n)


def contextual_loss(u_p, v_p, cfg):
    """Negative log of the set-to-set contextual similarity."""
    report = contextual_affinity(u_p, v_p, cfg)
    loss = T.neg(T.log(report.cx_tensor))
    if cfg.symmetric_contextual:
        rev = contextual_affinity(v_p, u_p, cfg)
        loss = T.scale(T.add(loss, T.neg(T.log(rev.cx_tensor))), 0.5)
    return loss


def total_loss(v_e, u_e, v_p, u_p, cfg):
    """Contrastive plus alpha-weighted contextual loss.

    Returns (scalar tensor, LossBreakdown).
    """
    n = v_e.shape[0]
    if not (u_e.shape[0] == v_p.shape[0] == u_p.shape[0] == n):
        raise T.ShapeError("batch sizes disagree across inputs")
    l_con = contrastive_loss(v_e, u_e, cfg)
    l_cx = contextual_loss(u_p, v_p, cfg)
    total = T.add(l_con, T.scale(l_cx, cfg.alpha))
    breakdown = LossBreakdown(
        contrastive=l_con.item(),
        contextual=l_cx.item(),
        total=total.item(),
    )
    return total, breakdown


def write_affinity_report(report, path):
    """Dump the report matrices as a sectioned delimited-text file."""
    sections = [
        ("D", report.D),
        ("D_norm", report.D_norm),
        ("W", report.W),
        ("CX", report.CX),
    ]
    lines = []
    for name, mat in sections:
        lines.append(f"# {name}")
        for row in np.atleast_2d(mat):
            lines.append(",".join(repr(float(x)) for x in row))
    lines.append("# cx_scalar")
    lines.append(repr(float(report.cx_scalar)))
    lines.append("# col_argmax")
    lines.append(",".join(str(int(i)) for i in report.col_argmax))
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("\n".join(lines) + "\n")
