"""Finite-photon outcome counts drawn by sequential conditional binomials."""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True, eq=False)
class CountVector:
    counts: np.ndarray
    S: int

    def __post_init__(self):
        c = np.asarray(self.counts, dtype=np.int64)
        if np.any(c < 0):
            raise ValueError("counts must be nonnegative")
        if int(c.sum()) != int(self.S):
            raise ValueError("counts do not sum to S")
        object.__setattr__(self, "counts", c)
        object.__setattr__(self, "S", int(self.S))


def sample_counts(P, S: int, rng: np.random.Generator) -> CountVector:
    """
    Multinomial(S, P) draw in O(len(P)) time.

    Outcome j receives Binomial(S_remaining, p_j / p_remaining); numpy's
    binomial sampler switches between inversion and BTPE internally.
    """
    p = np.asarray(P, dtype=float)
    if np.any(p < 0) or not np.all(np.isfinite(p)):
        raise ValueError("probabilities must be finite and nonnegative")
    S = int(S)
    if S < 0:
        raise ValueError("S must be nonnegative")
    total = math.fsum(p)
    if abs(total - 1.0) > 1e-9:
        raise ValueError(f"probabilities sum to {total}, expected 1")
    p = p / total
    # remaining mass, accumulated from the tail so the last ratio is exactly 1
    tail = np.cumsum(p[::-1])[::-1]
    counts = np.zeros(p.size, dtype=np.int64)
    left = S
    for j in range(p.size - 1):
        if left == 0:
            break
        r = 0.0 if tail[j] <= 0 else min(1.0, p[j] / tail[j])
        k = int(rng.binomial(left, r))
        counts[j] = k
        left -= k
    counts[-1] += left
    return CountVector(counts, S)


def empirical_probs(cv: CountVector) -> np.ndarray:
    if cv.S < 1:
        raise ValueError("empirical probabilities need S >= 1")
    return cv.counts / cv.S
