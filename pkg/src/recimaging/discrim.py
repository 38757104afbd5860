"""Binary hypothesis testing: likelihood-ratio decisions and Chernoff exponents."""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from .sampling import CountVector, sample_counts

H0, H1 = 0, 1
GOLDEN_MAX_ITER = 200
GOLDEN_TOL = 1e-10


@dataclass(frozen=True, eq=False)
class Hypothesis:
    label: int
    P: np.ndarray
    prior: float = 0.5

    def __post_init__(self):
        object.__setattr__(self, "P", np.asarray(self.P, dtype=float))
        if not 0.0 < self.prior < 1.0:
            raise ValueError("prior weight must lie in (0, 1)")


def log_likelihood_ratio(counts, p0, p1) -> float:
    """
    log[P(n|H1)/P(n|H0)] over outcomes with positive probability under both.

    Returns +inf or -inf when an observed outcome is impossible under one
    hypothesis (+inf if impossible under H0).
    """
    n = np.asarray(counts.counts if isinstance(counts, CountVector) else counts, dtype=float)
    p0 = np.asarray(p0, dtype=float)
    p1 = np.asarray(p1, dtype=float)
    seen = n > 0
    imp0 = seen & (p0 <= 0)
    imp1 = seen & (p1 <= 0)
    if imp0.any() and not imp1.any():
        return math.inf
    if imp1.any() and not imp0.any():
        return -math.inf
    both = seen & (p0 > 0) & (p1 > 0)
    return math.fsum(n[both] * (np.log(p1[both]) - np.log(p0[both])))


def likelihood_ratio_decide(counts, h0: Hypothesis, h1: Hypothesis) -> int:
    """Pick H1 only if its posterior log-odds are strictly positive; ties go to H0."""
    llr = log_likelihood_ratio(counts, h0.P, h1.P)
    return H1 if llr + math.log(h1.prior) - math.log(h0.prior) > 0 else H0


def _bhattacharyya_family(p0, p1):
    """t -> log sum_i p0^t p1^(1-t) over the common support, with its support mask."""
    p0 = np.asarray(p0, dtype=float)
    p1 = np.asarray(p1, dtype=float)
    both = (p0 > 0) & (p1 > 0)
    l0, l1 = np.log(p0[both]), np.log(p1[both])

    def f(t):
        z = t * l0 + (1 - t) * l1
        m = z.max()
        return m + math.log(np.exp(z - m).sum())

    return f, both.any()


def chernoff_exponent(p0, p1) -> float:
    """
    C = -log min_{t in [0,1]} sum_i p0_i^t p1_i^(1-t).

    The sum is continued from the open interval, so outcomes impossible
    under either hypothesis drop out at the endpoints too. Disjoint
    supports give math.inf.
    """
    f, overlap = _bhattacharyya_family(p0, p1)
    if not overlap:
        return math.inf
    # golden-section search on the convex function f
    g = (math.sqrt(5.0) - 1.0) / 2.0
    a, b = 0.0, 1.0
    c, d = b - g * (b - a), a + g * (b - a)
    fc, fd = f(c), f(d)
    for _ in range(GOLDEN_MAX_ITER):
        if b - a < GOLDEN_TOL:
            break
        if fc < fd:
            b, d, fd = d, c, fc
            c = b - g * (b - a)
            fc = f(c)
        else:
            a, c, fc = c, d, fd
            d = a + g * (b - a)
            fd = f(d)
    best = min(f(0.0), f(1.0), fc, fd, f(0.5 * (a + b)))
    return max(0.0, -best)


@dataclass
class DiscriminationRow:
    method: str
    alpha: float
    S: int
    P_succ_mean: float
    varsigma: float
    chernoff_C: float


def error_exponent_scan(
    povm_builder: Callable[[float], tuple],
    alphas: Sequence[float],
    S: int,
    repetitions: int,
    rng: np.random.Generator,
    method: str = "",
) -> list:
    """
    Monte-Carlo LRT success rate and Chernoff exponent per alpha.

    ``povm_builder(alpha)`` returns the outcome probabilities (p0, p1) of
    the two hypotheses. Each repetition draws one count vector under each
    hypothesis (equal priors).
    """
    rows = []
    for a in alphas:
        p0, p1 = povm_builder(float(a))
        h0, h1 = Hypothesis(H0, p0), Hypothesis(H1, p1)
        correct = 0
        for _ in range(repetitions):
            correct += likelihood_ratio_decide(sample_counts(p0, S, rng), h0, h1) == H0
            correct += likelihood_ratio_decide(sample_counts(p1, S, rng), h0, h1) == H1
        ps = correct / (2 * repetitions)
        vs = -math.log(1.0 - ps) if ps < 1.0 else math.inf
        rows.append(DiscriminationRow(method, float(a), int(S), ps, vs, chernoff_exponent(p0, p1)))
    return rows


def augment_features(class_means: np.ndarray, scale: np.ndarray, n_per_class: int, rng: np.random.Generator):
    """
    Gaussian jitter around class-mean eigentask vectors.

    ``scale`` is the per-component jitter width (the binomial standard error
    of each eigentask at the experiment's S). Returns (features, labels).
    """
    class_means = np.atleast_2d(class_means)
    X = class_means[:, None, :] + scale * rng.standard_normal((class_means.shape[0], n_per_class, class_means.shape[1]))
    y = np.repeat(np.arange(class_means.shape[0]), n_per_class)
    return X.reshape(-1, class_means.shape[1]), y


def eigentask_standard_error(R: np.ndarray, P: np.ndarray, S: int) -> np.ndarray:
    """Standard deviation of R^T P_hat under multinomial sampling of S photons."""
    P = np.asarray(P, dtype=float)
    cov = (np.diag(P) - np.outer(P, P)) / S
    return np.sqrt(np.maximum(np.einsum("jk,jl,lk->k", R, cov, R), 0.0))
