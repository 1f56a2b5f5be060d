"""Ranking metrics for alignment and link prediction, plus a linear domain probe."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ValidationError

__all__ = [
    "RankTable",
    "rank_anchors",
    "hits_at_k",
    "mrr",
    "alignment_metrics",
    "linkpred_metrics",
    "average_precision",
    "ProbeResult",
    "domain_probe",
]

_CHUNK = 1024


@dataclass(frozen=True)
class RankTable:
    """1-based rank of the true counterpart for every test pair, both directions."""

    a_to_b: np.ndarray
    b_to_a: np.ndarray
    n_a: int
    n_b: int

    def __len__(self):
        return int(self.a_to_b.shape[0])


def _unit_rows(x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    nrm = np.linalg.norm(x, axis=1, keepdims=True)
    return np.divide(x, nrm, out=np.zeros_like(x), where=nrm > 0)


def _ranks(queries: np.ndarray, cands: np.ndarray, truth: np.ndarray) -> np.ndarray:
    """Rank of ``truth[i]`` among all candidates by descending score, ties by index."""
    out = np.empty(truth.shape[0], dtype=np.int64)
    idx = np.arange(cands.shape[0])
    for lo in range(0, truth.shape[0], _CHUNK):
        hi = min(lo + _CHUNK, truth.shape[0])
        s = queries[lo:hi] @ cands.T
        t = truth[lo:hi]
        st = s[np.arange(hi - lo), t][:, None]
        better = (s > st) | ((s == st) & (idx[None, :] < t[:, None]))
        out[lo:hi] = 1 + better.sum(axis=1)
    return out


def rank_anchors(ra, rb, pairs) -> RankTable:
    """Cosine ranks of the true counterpart over every vertex of the other network."""
    pairs = np.asarray(pairs, dtype=np.int64).reshape(-1, 2)
    ua, ub = _unit_rows(ra), _unit_rows(rb)
    ia, jb = pairs[:, 0], pairs[:, 1]
    return RankTable(
        a_to_b=_ranks(ua[ia], ub, jb),
        b_to_a=_ranks(ub[jb], ua, ia),
        n_a=ua.shape[0],
        n_b=ub.shape[0],
    )


def hits_at_k(t: RankTable, k: int) -> float:
    if k < 1:
        raise ValidationError(f"k must be >= 1, got {k}")
    if len(t) == 0:
        raise ValidationError("empty test set")
    hits = int(np.sum(t.a_to_b <= k)) + int(np.sum(t.b_to_a <= k))
    return hits / (2.0 * len(t))


def mrr(t: RankTable) -> float:
    if len(t) == 0:
        raise ValidationError("empty test set")
    return float(np.concatenate([1.0 / t.a_to_b, 1.0 / t.b_to_a]).mean())


def alignment_metrics(ra, rb, pairs, ks=(1, 5, 10, 30, 50)) -> dict:
    table = rank_anchors(ra, rb, pairs)
    out = {f"hits@{k}": hits_at_k(table, k) for k in ks}
    out["mrr"] = mrr(table)
    return out


def average_precision(relevant_ranks) -> float:
    """AP from the 1-based ranks of the relevant items."""
    r = np.sort(np.asarray(relevant_ranks, dtype=np.float64))
    if r.size == 0:
        raise ValidationError("no relevant items")
    return float(np.mean(np.arange(1, r.size + 1) / r))


def linkpred_metrics(r, train_edges, test_edges, ks=(3, 5, 10)) -> dict:
    """Mean average precision and Recall@k over source vertices with held-out arcs.

    For each such source every other vertex is scored by dot product, its
    training targets are removed, and the remaining list is ranked
    descending with ties broken by ascending index.
    """
    r = np.asarray(r, dtype=np.float64)
    n = r.shape[0]
    train_edges = np.asarray(train_edges, dtype=np.int64).reshape(-1, 2)
    test_edges = np.asarray(test_edges, dtype=np.int64).reshape(-1, 2)
    train_t: dict[int, set] = {}
    for s, d in train_edges:
        train_t.setdefault(int(s), set()).add(int(d))
    test_t: dict[int, set] = {}
    for s, d in test_edges:
        test_t.setdefault(int(s), set()).add(int(d))
    if not test_t:
        raise ValidationError("no source vertex has a held-out edge")
    aps = []
    recalls = {k: [] for k in ks}
    idx = np.arange(n)
    for s in sorted(test_t):
        targets = np.array(sorted(test_t[s]), dtype=np.int64)
        if set(targets.tolist()) & train_t.get(s, set()):
            raise ValidationError(f"vertex {s}: test edges overlap training edges")
        keep = np.ones(n, dtype=bool)
        keep[s] = False
        keep[list(train_t.get(s, ()))] = False
        scores = r @ r[s]
        cand = idx[keep]
        cs = scores[cand]
        # rank of each target among remaining candidates
        tr = []
        for t in targets:
            st = scores[t]
            tr.append(1 + int(np.sum((cs > st) | ((cs == st) & (cand < t)))))
        tr = np.array(tr)
        aps.append(average_precision(tr))
        for k in ks:
            recalls[k].append(float(np.mean(tr <= k)))
    out = {"map": float(np.mean(aps))}
    for k in ks:
        out[f"recall@{k}"] = float(np.mean(recalls[k]))
    out["sources"] = len(aps)
    return out


@dataclass(frozen=True)
class ProbeResult:
    accuracy: float
    weights: np.ndarray
    bias: float
    mean: np.ndarray
    scale: np.ndarray
    test_mask_a: np.ndarray
    test_mask_b: np.ndarray

    def predict(self, x) -> np.ndarray:
        """Predicted domain (0 = A, 1 = B) per row."""
        z = (np.asarray(x, dtype=np.float64) - self.mean) / self.scale
        return (z @ self.weights + self.bias > 0).astype(np.int64)


def domain_probe(ra, rb, heldout: float = 0.5, seed: int = 0, steps: int = 500, lr: float = 0.1) -> ProbeResult:
    """Train a fresh logistic classifier to tell the two embedding sets apart.

    The split is stratified by domain. Features are centred on the
    training-split mean (scale is kept) before full-batch gradient descent.
    Returns the held-out accuracy together with the fitted probe.
    """
    ra = np.asarray(ra, dtype=np.float64)
    rb = np.asarray(rb, dtype=np.float64)
    if ra.shape[0] == 0 or rb.shape[0] == 0:
        raise ValidationError("both embedding sets must be non-empty")
    if not 0.0 < heldout < 1.0:
        raise ValidationError(f"held-out fraction must lie in (0, 1), got {heldout}")
    rng = np.random.default_rng(seed)

    def split(n):
        mask = np.zeros(n, dtype=bool)
        n_test = min(max(1, int(round(heldout * n))), n - 1) if n > 1 else 0
        mask[rng.permutation(n)[:n_test]] = True
        return mask

    ta, tb = split(ra.shape[0]), split(rb.shape[0])
    x_tr = np.concatenate([ra[~ta], rb[~tb]])
    y_tr = np.concatenate([np.zeros((~ta).sum()), np.ones((~tb).sum())])
    x_te = np.concatenate([ra[ta], rb[tb]])
    y_te = np.concatenate([np.zeros(ta.sum()), np.ones(tb.sum())])
    mean = x_tr.mean(axis=0)
    scale = np.ones_like(mean)
    z = (x_tr - mean) / scale
    w = np.zeros(z.shape[1])
    b = 0.0
    for _ in range(steps):
        p = 0.5 * (1.0 + np.tanh(0.5 * (z @ w + b)))
        g = p - y_tr
        w -= lr * (z.T @ g) / len(y_tr)
        b -= lr * float(g.mean())
    probe = ProbeResult(0.0, w, b, mean, scale, ta, tb)
    acc = float(np.mean(probe.predict(x_te) == y_te)) if len(y_te) else float("nan")
    return ProbeResult(acc, w, b, mean, scale, ta, tb)
