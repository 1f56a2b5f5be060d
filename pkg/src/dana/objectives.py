"""Loss functions for alignment, domain confusion and link prediction.

All functions take a :class:`~dana.tensor.Tape` first and return a ``1x1``
tensor so the result can be differentiated.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import DimensionError, ValidationError
from .model import AlignmentModel, classify_domain
from .tensor import Tape, Tensor

__all__ = [
    "LossReport",
    "Batch",
    "anchor_nll",
    "domain_ce",
    "total_loss",
    "mse_loss",
    "linkpred_loss",
    "regularization",
]

LN2 = math.log(2.0)


@dataclass(frozen=True)
class LossReport:
    total: float
    alignment: float
    domain: float
    regularization: float


@dataclass
class Batch:
    """Everything one training step needs besides the model.

    ``cand_a``/``cand_b`` of ``None`` mean the full vertex set. ``logq_a`` and
    ``logq_b`` (length ``|V|``) switch on the expected-count correction of
    sampled softmax. ``neg_a``/``neg_b`` are only read by the MSE objective.
    """

    anchors: np.ndarray
    verts_a: np.ndarray
    verts_b: np.ndarray
    cand_a: np.ndarray | None = None
    cand_b: np.ndarray | None = None
    logq_a: np.ndarray | None = None
    logq_b: np.ndarray | None = None
    neg_a: np.ndarray | None = None
    neg_b: np.ndarray | None = None


def _anchor_array(anchors) -> np.ndarray:
    a = np.asarray(anchors, dtype=np.int64).reshape(-1, 2)
    if a.shape[0] == 0:
        raise ValidationError("anchor batch is empty")
    return a


def _direction_logp(tape: Tape, query: Tensor, target_emb: Tensor, pos: Tensor, targets, cand, logq):
    """``log p(target | query)`` against a candidate set, positives appended."""
    n = target_emb.shape[0]
    cand = np.arange(n) if cand is None else np.asarray(cand, dtype=np.int64).reshape(-1)
    if cand.size == 0:
        raise ValidationError("candidate set is empty")
    logits = tape.matmul_nt(query, tape.gather_rows(target_emb, cand))
    num = pos
    if logq is not None:
        logq = np.asarray(logq, dtype=np.float64)
        logits = tape.add(logits, Tensor(np.broadcast_to(-logq[cand], logits.shape)))
        num = tape.add(pos, Tensor(-logq[targets][:, None]))
    in_cand = np.zeros(n, dtype=bool)
    in_cand[cand] = True
    mask = np.ones((logits.shape[0], logits.shape[1] + 1), dtype=bool)
    mask[:, -1] = ~in_cand[targets]
    lse = tape.log_sum_exp_rows(tape.concat_cols(logits, num), mask)
    return tape.sub(num, lse)


def anchor_nll(tape: Tape, ra: Tensor, rb: Tensor, anchors, cand_a=None, cand_b=None,
               logq_a=None, logq_b=None) -> Tensor:
    """Negative log of the averaged two-way softmax likelihood of anchor pairs.

    For a pair ``(i, j)`` the forward probability is
    ``exp(rb_j . ra_i) / sum_{c in cand_b + {j}} exp(rb_c . ra_i)`` and the
    backward probability is the mirror image; the loss sums
    ``-log((p_fwd + p_bwd) / 2)`` over pairs. Omitting candidates gives the
    exact full softmax.
    """
    pairs = _anchor_array(anchors)
    ia, jb = pairs[:, 0], pairs[:, 1]
    qa = tape.gather_rows(ra, ia)
    qb = tape.gather_rows(rb, jb)
    pos = tape.row_dot(qa, qb)
    lp_ab = _direction_logp(tape, qa, rb, pos, jb, cand_b, logq_b)
    lp_ba = _direction_logp(tape, qb, ra, pos, ia, cand_a, logq_a)
    mix = tape.sum(tape.logaddexp(lp_ab, lp_ba))
    return tape.add(tape.scale(mix, -1.0), Tensor([[pairs.shape[0] * LN2]]))


def domain_ce(tape: Tape, probs: Tensor, labels) -> Tensor:
    """Summed ``-log p(true domain)``; probabilities below 1e-12 are clamped."""
    labels = np.asarray(labels, dtype=np.int64).reshape(-1)
    if labels.shape[0] != probs.shape[0]:
        raise DimensionError(f"{probs.shape[0]} probability rows but {labels.shape[0]} labels")
    picked = tape.log_clamped(tape.pick(probs, labels), 1e-12)
    return tape.scale(tape.sum(picked), -1.0)


def regularization(tape: Tape, params) -> Tensor:
    """Sum of squared Frobenius norms."""
    total = None
    for p in params:
        term = tape.frobenius_sq(p)
        total = term if total is None else tape.add(total, term)
    return total if total is not None else Tensor([[0.0]])


def mse_loss(tape: Tape, ra: Tensor, rb: Tensor, anchors, neg_a, neg_b) -> Tensor:
    """Distance objective: pull anchors together, push sampled negatives apart.

    Per anchor ``(i, j)`` with ``C`` negatives from each side:
    ``|ra_i - rb_j| - (sum_c |ra_i - rb_c| + sum_c |ra_c - rb_j|) / (2C)``.
    """
    pairs = _anchor_array(anchors)
    neg_a = np.asarray(neg_a, dtype=np.int64)
    neg_b = np.asarray(neg_b, dtype=np.int64)
    z = pairs.shape[0]
    if neg_a.ndim != 2 or neg_b.ndim != 2 or neg_a.shape[0] != z or neg_b.shape[0] != z:
        raise ValidationError("need one row of negatives per anchor from each network")
    if neg_a.shape[1] != neg_b.shape[1] or neg_a.shape[1] < 1:
        raise ValidationError(f"negative counts differ: {neg_a.shape[1]} vs {neg_b.shape[1]}")
    c = neg_a.shape[1]
    ia, jb = pairs[:, 0], pairs[:, 1]
    d_pos = tape.sum(tape.row_norms(tape.sub(tape.gather_rows(ra, ia), tape.gather_rows(rb, jb))))
    d_nb = tape.row_norms(tape.sub(tape.gather_rows(ra, np.repeat(ia, c)), tape.gather_rows(rb, neg_b.ravel())))
    d_na = tape.row_norms(tape.sub(tape.gather_rows(ra, neg_a.ravel()), tape.gather_rows(rb, np.repeat(jb, c))))
    d_neg = tape.add(tape.sum(d_nb), tape.sum(d_na))
    return tape.sub(d_pos, tape.scale(d_neg, 1.0 / (2.0 * c)))


def linkpred_loss(tape: Tape, r: Tensor, edges, negatives) -> Tensor:
    """Skip-gram style edge likelihood with ``C`` sampled negatives per edge."""
    edges = np.asarray(edges, dtype=np.int64).reshape(-1, 2)
    negatives = np.asarray(negatives, dtype=np.int64)
    if negatives.ndim != 2 or negatives.shape[0] != edges.shape[0]:
        raise DimensionError("need one row of negatives per edge")
    c = negatives.shape[1]
    if c < 1:
        raise ValidationError("need at least one negative per edge")
    src, dst = edges[:, 0], edges[:, 1]
    ri = tape.gather_rows(r, src)
    pos = tape.sum(tape.log_sigmoid(tape.row_dot(ri, tape.gather_rows(r, dst))))
    neg_dot = tape.row_dot(tape.gather_rows(r, np.repeat(src, c)), tape.gather_rows(r, negatives.ravel()))
    neg = tape.sum(tape.log_sigmoid(tape.scale(neg_dot, -1.0)))
    return tape.scale(tape.add(pos, tape.scale(neg, 1.0 / c)), -1.0)


def total_loss(tape: Tape, model: AlignmentModel, batch: Batch, gamma: float, lam: float):
    """Combined objective ``alignment + gamma * domain + lam * regularization``.

    The domain term passes through the gradient reversal layer, so a single
    backward pass yields descent directions for the classifier and ascent on
    the domain loss for the encoders. Without the adversarial flag (or with
    ``gamma == 0``) the classifier sees detached embeddings and the encoders
    receive nothing from the domain term.

    Returns ``(total_tensor, LossReport)``.
    """
    ra, rb = model.embed(tape)
    if model.config.objective == "mse":
        align = mse_loss(tape, ra, rb, batch.anchors, batch.neg_a, batch.neg_b)
    else:
        align = anchor_nll(tape, ra, rb, batch.anchors, batch.cand_a, batch.cand_b, batch.logq_a, batch.logq_b)

    xa = tape.gather_rows(ra, batch.verts_a)
    xb = tape.gather_rows(rb, batch.verts_b)
    coupled = model.adversarial and gamma != 0.0
    if not coupled:
        xa, xb = xa.detach(), xb.detach()
    clf = model.classifier
    pa = classify_domain(tape, clf, xa, adversarial=model.adversarial)
    pb = classify_domain(tape, clf, xb, adversarial=model.adversarial)
    domain = tape.add(
        domain_ce(tape, pa, np.zeros(len(batch.verts_a), dtype=np.int64)),
        domain_ce(tape, pb, np.ones(len(batch.verts_b), dtype=np.int64)),
    )
    reg = regularization(tape, model.parameters())
    total = tape.add(tape.add(align, tape.scale(domain, gamma)), tape.scale(reg, lam))
    report = LossReport(total.item(), align.item(), domain.item(), reg.item())
    return total, report
