"""Candidate and negative samplers used by the training loop."""
from __future__ import annotations

import numpy as np

from .errors import ValidationError

__all__ = [
    "LogUniformSampler",
    "sample_candidates",
    "sample_vertex_batch",
    "sample_uniform_negatives",
]


class LogUniformSampler:
    """Zipfian sampler over vertices ranked by degree.

    Rank ``r`` (0-based) is drawn with probability
    ``(ln(r + 2) - ln(r + 1)) / ln(n + 1)``. By default rank 0 is the
    highest-degree vertex, ties going to the lower index. ``order="id"``
    ranks vertices by raw index instead.
    """

    def __init__(self, degrees, order: str = "degree"):
        degrees = np.asarray(degrees, dtype=np.float64)
        n = degrees.shape[0]
        if n < 1:
            raise ValidationError("sampler needs at least one vertex")
        if order == "degree":
            # stable sort on -degree keeps ascending index among ties
            self.rank_order = np.argsort(-degrees, kind="stable")
        elif order == "id":
            self.rank_order = np.arange(n)
        else:
            raise ValidationError(f"unknown rank order {order!r}")
        self.n = n
        r = np.arange(n, dtype=np.float64)
        self.probs = (np.log(r + 2.0) - np.log(r + 1.0)) / np.log(n + 1.0)
        # closed form of the cumulative sum, exact at the last entry
        self.cdf = np.log(r + 2.0) / np.log(n + 1.0)
        self.cdf[-1] = 1.0
        self.vertex_prob = np.empty(n)
        self.vertex_prob[self.rank_order] = self.probs

    def draw_ranks(self, size: int, rng: np.random.Generator) -> np.ndarray:
        u = rng.random(size)
        return np.minimum(np.searchsorted(self.cdf, u, side="right"), self.n - 1)

    def expected_count(self, vertices, tries: int) -> np.ndarray:
        """Probability that each vertex appears within ``tries`` raw draws."""
        p = self.vertex_prob[np.asarray(vertices, dtype=np.int64)]
        return -np.expm1(tries * np.log1p(-np.minimum(p, 1.0 - 1e-16)))


def sample_candidates(s: LogUniformSampler, count: int, rng: np.random.Generator,
                      return_tries: bool = False):
    """Draw ``count`` distinct vertices, rejecting repeats.

    Returns vertex indices in the order first drawn, optionally with the
    total number of raw draws used.
    """
    if not 1 <= count <= s.n:
        raise ValidationError(f"candidate count must lie in [1, {s.n}], got {count}")
    chosen: list[int] = []
    seen = np.zeros(s.n, dtype=bool)
    tries = 0
    while len(chosen) < count:
        need = count - len(chosen)
        ranks = s.draw_ranks(max(2 * need, 16), rng)
        for r in ranks:
            tries += 1
            if not seen[r]:
                seen[r] = True
                chosen.append(int(r))
                if len(chosen) == count:
                    break
    out = s.rank_order[np.asarray(chosen, dtype=np.int64)]
    return (out, tries) if return_tries else out


def sample_vertex_batch(n: int, size: int, rng: np.random.Generator) -> np.ndarray:
    """``size`` vertex indices drawn uniformly with replacement."""
    if size < 1:
        raise ValidationError(f"vertex batch size must be >= 1, got {size}")
    return rng.integers(0, n, size=size)


def sample_uniform_negatives(n: int, count: int, exclude, rng: np.random.Generator) -> np.ndarray:
    """``count`` indices uniform over ``[0, n)`` minus ``exclude``, with replacement.

    ``exclude`` may also be a sequence, giving one row of ``count`` draws per
    excluded index.
    """
    if n < 2:
        raise ValidationError("negative sampling needs at least 2 vertices")
    if count < 1:
        raise ValidationError(f"negative count must be >= 1, got {count}")
    exclude = np.asarray(exclude, dtype=np.int64)
    if exclude.ndim == 0:
        draw = rng.integers(0, n - 1, size=count)
        return draw + (draw >= exclude)
    draw = rng.integers(0, n - 1, size=(exclude.shape[0], count))
    return draw + (draw >= exclude[:, None])
