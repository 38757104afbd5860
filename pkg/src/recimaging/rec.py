"""
Resolvable expressive capacity of a measurement.

The prior-averaged first and second moments of the outcome probabilities,
D = diag(E[P]) and G = E[P P^T], define the generalized eigenproblem
V r = beta^2 G r with V = D - G. It is solved through the symmetric matrix
W = D^-1/2 G D^-1/2, whose eigenvalues are lambda = 1/(1 + beta^2).
"""
from __future__ import annotations

import math
import warnings
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from .povm import CoeffTensor

BETA_CUTOFF = 1e15
LAMBDA_FLOOR = 1.0 / (1.0 + BETA_CUTOFF)
D_FLOOR = 1e-20


@dataclass(frozen=True, eq=False)
class PriorEnsemble:
    """
    Probability vectors of W scenes under one measurement.

    ``weights`` defaults to uniform; quadrature ensembles pass their own.
    """

    prob_vectors: np.ndarray
    weights: Optional[np.ndarray] = None
    moments: Optional[np.ndarray] = None
    povm_ref: str = ""

    def __post_init__(self):
        P = np.atleast_2d(np.asarray(self.prob_vectors, dtype=float))
        if P.shape[0] < 2:
            raise ValueError("ensemble needs at least two scenes")
        if np.any(np.abs(P.sum(axis=1) - 1.0) > 1e-9):
            raise ValueError("ensemble rows must sum to 1")
        object.__setattr__(self, "prob_vectors", P)
        if self.weights is None:
            w = np.full(P.shape[0], 1.0 / P.shape[0])
        else:
            w = np.asarray(self.weights, dtype=float)
            if w.shape != (P.shape[0],) or np.any(w < 0):
                raise ValueError("weights must be nonnegative, one per scene")
            w = w / math.fsum(w)
        object.__setattr__(self, "weights", w)

    @property
    def W(self) -> int:
        return self.prob_vectors.shape[0]


def _compensated_sum(terms) -> np.ndarray:
    """Neumaier summation of a stream of equally shaped arrays."""
    s = None
    for t in terms:
        if s is None:
            s = np.array(t, dtype=float)
            comp = np.zeros_like(s)
            continue
        u = s + t
        big = np.abs(s) >= np.abs(t)
        comp += np.where(big, (s - u) + t, (t - u) + s)
        s = u
    return s + comp


def build_dg(ensemble: PriorEnsemble):
    """D = diag(E[P]) and G = E[P P^T] with compensated summation."""
    P, w = ensemble.prob_vectors, ensemble.weights
    d = _compensated_sum(wi * p for wi, p in zip(w, P))
    G = _compensated_sum(wi * np.outer(p, p) for wi, p in zip(w, P))
    G = 0.5 * (G + G.T)
    return np.diag(d), G


def moment_stats(moment_list: Sequence[np.ndarray], N: int, weights=None):
    """
    Prior moment statistics d[n, q] = E[x_{n,q}] and g[n1, q1, n2, q2].

    ``moment_list`` holds one (Q, >= N+1) moment array per scene.
    """
    X = np.array([np.asarray(x)[:, : N + 1].T for x in moment_list])  # (W, N+1, Q)
    W = X.shape[0]
    w = np.full(W, 1.0 / W) if weights is None else np.asarray(weights) / np.sum(weights)
    d = _compensated_sum(wi * x for wi, x in zip(w, X))
    g = _compensated_sum(wi * np.multiply.outer(x, x) for wi, x in zip(w, X))
    return d, g


def build_dg_series(tensor: CoeffTensor, d: np.ndarray, g: np.ndarray, alpha: float, N: int):
    """
    D and G assembled from the moment expansion, truncated at order N.

    Every outcome probability is truncated at order N, so G is the exact
    second moment of the truncated probabilities and stays PSD.
    """
    if N > tensor.max_order:
        raise ValueError(f"truncation order {N} exceeds tensor order {tensor.max_order}")
    if not alpha > 0:
        raise ValueError("alpha must be positive")
    c = tensor.c[:, :, : N + 1]  # (K, Q, N+1)
    K, Q, _ = c.shape
    Ca = (c * alpha ** np.arange(N + 1)).transpose(0, 2, 1).reshape(K, (N + 1) * Q)
    dv = np.asarray(d)[: N + 1].reshape(-1)
    gm = np.asarray(g)[: N + 1, :, : N + 1, :].reshape((N + 1) * Q, (N + 1) * Q)
    D = np.diag(Ca @ dv)
    G = Ca @ gm @ Ca.T
    return D, 0.5 * (G + G.T)


@dataclass(frozen=True, eq=False)
class RecSpectrum:
    """
    Eigen-solution restricted to the kept outcomes.

    Columns of ``R`` are the eigentask coefficient vectors r_k, with
    R^T D R = I. ``beta_sq`` uses BETA_CUTOFF for unresolved eigenvalues.
    """

    beta_sq: np.ndarray
    lam: np.ndarray
    R: np.ndarray
    Y: np.ndarray
    kept: np.ndarray
    d: np.ndarray
    G: np.ndarray
    n_outcomes: int
    clamp_count: int = 0

    @property
    def censored(self) -> np.ndarray:
        return self.beta_sq >= BETA_CUTOFF

    @property
    def D(self) -> np.ndarray:
        return np.diag(self.d)


def _fix_sign(Y: np.ndarray) -> np.ndarray:
    Y = Y.copy()
    for k in range(Y.shape[1]):
        col = Y[:, k]
        nz = np.flatnonzero(np.abs(col) > 1e-12 * np.abs(col).max())
        if nz.size and col[nz[0]] < 0:
            Y[:, k] = -col
    return Y


def solve_spectrum(D, G, d_floor: float = D_FLOOR, lambda_floor: float = LAMBDA_FLOOR) -> RecSpectrum:
    """
    Solve V r = beta^2 G r by symmetric diagonalization of D^-1/2 G D^-1/2.

    Outcomes with D_jj < d_floor are dropped. Eigenvalues are sorted in
    descending order (beta^2 ascending); eigenvalues below ``lambda_floor``
    are reported as beta^2 = BETA_CUTOFF.
    """
    D = np.asarray(D, dtype=float)
    d_all = np.diag(D) if D.ndim == 2 else D
    G = np.asarray(G, dtype=float)
    kept = np.flatnonzero(d_all >= d_floor)
    if kept.size == 0:
        raise ValueError("every outcome fell below the D floor")
    d = d_all[kept]
    Gk = G[np.ix_(kept, kept)]
    s = 1.0 / np.sqrt(d)
    Wm = s[:, None] * Gk * s[None, :]
    Wm = 0.5 * (Wm + Wm.T)
    lam, Y = np.linalg.eigh(Wm)
    order = np.argsort(-lam, kind="stable")
    lam, Y = lam[order], Y[:, order]
    bad = (lam < 0) | (lam > 1)
    clamps = int(bad.sum())
    if np.any((lam > 1 + 1e-9) | (lam < -1e-9)):
        warnings.warn(f"eigenvalues outside [0, 1] beyond round-off: {lam.min()}, {lam.max()}")
    lam = np.clip(lam, 0.0, 1.0)
    Y = _fix_sign(Y)
    with np.errstate(divide="ignore"):
        beta_sq = np.where(lam < lambda_floor, BETA_CUTOFF, (1.0 - lam) / np.maximum(lam, lambda_floor))
    beta_sq = np.minimum(beta_sq, BETA_CUTOFF)
    R = s[:, None] * Y
    return RecSpectrum(beta_sq, lam, R, Y, kept, d, Gk, int(d_all.size), clamps)


def total_rec(spectrum: RecSpectrum, S: float) -> float:
    """C_T(S) = sum_k 1/(1 + beta_k^2/S); censored eigenvalues contribute 0."""
    if not S > 0:
        raise ValueError("S must be positive")
    b = spectrum.beta_sq[~spectrum.censored]
    return float(np.sum(1.0 / (1.0 + b / S)))


def trace_rec(D, G, S: float) -> float:
    """Direct matrix form Tr((G + V/S)^-1 G) on the outcomes with positive D."""
    d = np.diag(D) if np.ndim(D) == 2 else np.asarray(D)
    k = np.flatnonzero(d >= D_FLOOR)
    Dk = np.diag(d[k])
    Gk = np.asarray(G)[np.ix_(k, k)]
    A = Gk + (Dk - Gk) / S
    return float(np.trace(np.linalg.solve(A, Gk)))


def eigentask_values(spectrum: RecSpectrum, P) -> np.ndarray:
    """xi_k = sum_j R[j, k] P_j over the kept outcomes; P may be (n,) or (W, n)."""
    P = np.asarray(P, dtype=float)
    if P.shape[-1] != spectrum.n_outcomes:
        raise ValueError(f"expected {spectrum.n_outcomes} outcomes, got {P.shape[-1]}")
    return P[..., spectrum.kept] @ spectrum.R


def capacity_of(spectrum: RecSpectrum, f_values, ensemble: PriorEnsemble, S: float) -> float:
    """
    Capacity C[f] = v^T (G + V/S)^-1 v / E[f^2] with v = E[f P].

    Evaluated in the eigenbasis, where G + V/S is diagonal.
    """
    f = np.asarray(f_values, dtype=float)
    w = ensemble.weights
    f2 = math.fsum(w * f * f)
    if f2 <= 0:
        raise ValueError("target function has zero norm")
    v = (w * f) @ ensemble.prob_vectors[:, spectrum.kept]
    u = spectrum.Y.T @ (v / np.sqrt(spectrum.d))
    lam = spectrum.lam
    return float(np.sum(u * u / (lam + (1.0 - lam) / S)) / f2)


def scaling_fit(alphas, beta_sq, cutoff: float = BETA_CUTOFF, min_points: int = 3) -> np.ndarray:
    """
    Log-log slopes of beta_k^2 against alpha, one per column of ``beta_sq``.

    Entries at or above ``cutoff`` are excluded.
    """
    a = np.asarray(alphas, dtype=float)
    B = np.asarray(beta_sq, dtype=float)
    if B.ndim == 1:
        B = B[:, None]
    if B.shape[0] != a.size:
        raise ValueError("one row of beta^2 per alpha expected")
    slopes = np.empty(B.shape[1])
    for k in range(B.shape[1]):
        ok = (B[:, k] < cutoff) & (B[:, k] > 0)
        if ok.sum() < min_points:
            raise ValueError(f"eigenvalue {k}: only {int(ok.sum())} points below the cutoff")
        slopes[k] = np.polyfit(np.log(a[ok]), np.log(B[ok, k]), 1)[0]
    return slopes


@dataclass(frozen=True)
class PrefactorDecomposition:
    eig_g: np.ndarray
    eig_C: np.ndarray
    lam_hat: np.ndarray


def prefactor_decomposition(tensor: CoeffTensor, d, g, D, alpha: float, N: Optional[int] = None):
    """
    Eigenvalues of g and of the alpha-weighted overlap matrix C = A^T A,
    where A has columns alpha^n D^-1/2 C_{n,q}. Their sorted products
    approximate the REC eigenvalues lambda_k.
    """
    N = tensor.max_order if N is None else N
    dd = np.diag(D) if np.ndim(D) == 2 else np.asarray(D)
    if np.any(dd <= 0):
        raise ValueError("D must be positive definite")
    c = tensor.c[:, :, : N + 1]
    K, Q, _ = c.shape
    A = (c * alpha ** np.arange(N + 1)).transpose(0, 2, 1).reshape(K, -1) / np.sqrt(dd)[:, None]
    gm = np.asarray(g)[: N + 1, :, : N + 1, :].reshape((N + 1) * Q, (N + 1) * Q)
    eg = np.sort(np.linalg.eigvalsh(0.5 * (gm + gm.T)))[::-1]
    eC = np.sort(np.linalg.eigvalsh(A.T @ A))[::-1]
    return PrefactorDecomposition(eg, eC, eC * eg)


def predicted_basis(tensor: CoeffTensor, D, alpha: float, N: Optional[int] = None) -> np.ndarray:
    """
    Orthonormalized columns of D^-1/2 C_n in order n = 0, 1, ... (the z_n
    vectors). Restricted to the outcomes with positive D.
    """
    N = tensor.max_order if N is None else N
    dd = np.diag(D) if np.ndim(D) == 2 else np.asarray(D)
    k = np.flatnonzero(dd >= D_FLOOR)
    c = tensor.c[k][:, :, : N + 1]
    A = (c * alpha ** np.arange(N + 1)).transpose(0, 2, 1).reshape(k.size, -1) / np.sqrt(dd[k])[:, None]
    Z = np.zeros_like(A)
    for i in range(A.shape[1]):
        v = A[:, i].copy()
        for _ in range(2):
            v -= Z[:, :i] @ (Z[:, :i].T @ v)
        nv = np.linalg.norm(v)
        Z[:, i] = v / nv if nv > 1e-300 else 0.0
    return Z


def basis_deviation(spectrum: RecSpectrum, Z, assignment=None) -> np.ndarray:
    """
    Delta y_k^2 = |y_hat_k - y_k|^2 for the columns of Y.

    ``assignment[k]`` lists the Z columns that predict y_k (default: column
    k alone); y_hat_k is the normalized least-squares fit of y_k in their
    span, sign-aligned with y_k.
    """
    Z = np.asarray(Z, dtype=float)
    Y = spectrum.Y
    if Z.shape[0] != Y.shape[0]:
        raise ValueError("predicted basis has the wrong number of outcomes")
    if assignment is None:
        assignment = [[k] for k in range(min(Z.shape[1], Y.shape[1]))]
    out = np.empty(len(assignment))
    for k, cols in enumerate(assignment):
        y = Y[:, k]
        Zk = Z[:, list(cols)]
        coef = Zk.T @ y
        yh = Zk @ coef
        nrm = np.linalg.norm(yh)
        if nrm < 1e-14:
            yh = Zk[:, 0]
        else:
            yh = yh / nrm
        if yh @ y < 0:
            yh = -yh
        out[k] = float(np.sum((yh - y) ** 2))
    return out


def spade_assignment(n_eig: int) -> list:
    """Columns predicting SPADE eigenvectors: z_0, then pairs (z_{2ceil(k/2)-1}, z_{2ceil(k/2)})."""
    out = [[0]]
    for k in range(1, n_eig):
        m = 2 * math.ceil(k / 2)
        out.append([m - 1, m])
    return out


def reparameterization_check(ensemble: PriorEnsemble, rng: Optional[np.random.Generator] = None,
                             tol: float = 1e-12) -> bool:
    """
    Check that D, G and beta^2 depend only on the ensemble of probability
    vectors: shuffling, relabeling the scene parameters and duplicating every
    scene must leave them unchanged.
    """
    rng = np.random.default_rng(0) if rng is None else rng
    D0, G0 = build_dg(ensemble)
    b0 = solve_spectrum(D0, G0).beta_sq
    perm = rng.permutation(ensemble.W)
    variants = [
        PriorEnsemble(ensemble.prob_vectors[perm], ensemble.weights[perm]),
        PriorEnsemble(ensemble.prob_vectors, ensemble.weights,
                      moments=None if ensemble.moments is None else ensemble.moments[perm]),
        PriorEnsemble(np.concatenate([ensemble.prob_vectors] * 2),
                      np.concatenate([ensemble.weights] * 2)),
    ]
    for e in variants:
        D, G = build_dg(e)
        if np.abs(D - D0).max() > tol or np.abs(G - G0).max() > tol:
            return False
        b = solve_spectrum(D, G).beta_sq
        if not np.allclose(b, b0, rtol=1e-8, atol=0):
            return False
    return True
