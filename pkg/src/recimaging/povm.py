"""
Measurement families and their outcome probabilities.

Each Povm lists its physical outcomes followed by a sink outcome carrying
the remaining probability 1 - sum_j P_j, so every probability vector is a
valid sampling distribution.

Probabilities are available two ways: ``exact_probabilities`` integrates
the PSF of every emitter, while ``coefficient_tensor`` plus
``moment_probabilities`` use the moment expansion
P_j = sum_{q,n} c[j, q, n] x[q, n] alpha^n.
"""
from __future__ import annotations

import json
import math
import warnings
from dataclasses import dataclass
from typing import Optional

import numpy as np

from .modes import (
    Grid,
    MAX_DERIVATIVE_ORDER,
    PsfModel,
    derivative_family,
    derivative_values,
    eval_psf,
    gram_schmidt_joint,
    gram_schmidt_single,
)
from .scene import Scene

PIXEL_QUAD_NODES = 64
CHOP_TOL = 1e-14
NEGATIVE_REPORT_TOL = 1e-12
KINDS = ("direct", "binary-spade", "spade", "separate-spade", "orthogonalized-spade")


@dataclass(frozen=True)
class OutcomeSpec:
    label: str
    weight: float = 1.0
    interval: Optional[tuple] = None
    coeffs: Optional[dict] = None  # mode as a combination of named basis modes


@dataclass(frozen=True, eq=False)
class Povm:
    """
    A truncated measurement plus its sink.

    Projector families keep their normalized modes as rows of ``modes`` on
    ``grid``; direct imaging keeps the pixel ``edges``.
    """

    kind: str
    outcomes: tuple
    psf: PsfModel
    params: dict
    grid: Optional[Grid] = None
    modes: Optional[np.ndarray] = None
    edges: Optional[np.ndarray] = None
    has_sink: bool = True

    @property
    def n_outcomes(self) -> int:
        """Number of outcomes including the sink."""
        return len(self.outcomes) + 1

    @property
    def labels(self) -> list:
        return [o.label for o in self.outcomes] + ["sink"]

    @property
    def weights(self) -> np.ndarray:
        return np.array([o.weight for o in self.outcomes])

    def to_dict(self) -> dict:
        d = {
            "kind": self.kind,
            "psf": self.psf.to_dict(),
            "params": self.params,
            "outcomes": [
                {k: v for k, v in (("label", o.label), ("weight", o.weight),
                                   ("interval", list(o.interval) if o.interval else None),
                                   ("coeffs", o.coeffs)) if v is not None}
                for o in self.outcomes
            ],
        }
        return d

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)

    @classmethod
    def from_dict(cls, d: dict) -> "Povm":
        return build_povm(d["kind"], PsfModel(**d["psf"]), **d["params"])


def build_direct_imaging(region, t_max: int, psf: PsfModel = PsfModel()) -> Povm:
    """``t_max`` equal pixels tiling ``region``, plus a sink for light outside it."""
    lo, hi = map(float, region)
    if not hi > lo:
        raise ValueError("region needs hi > lo")
    if t_max < 1:
        raise ValueError("t_max must be positive")
    edges = np.linspace(lo, hi, t_max + 1)
    outcomes = tuple(
        OutcomeSpec(f"pixel_{j}", 1.0, (float(edges[j]), float(edges[j + 1]))) for j in range(t_max)
    )
    return Povm("direct", outcomes, psf, {"region": [lo, hi], "t_max": int(t_max)}, edges=edges)


def build_binary_spade(sigma: float = 1.0, xi: float = 1.0, center: float = 0.0) -> Povm:
    """Projection onto a width-xi Gaussian mode at ``center``; the sink is its complement."""
    if not (sigma > 0 and xi > 0):
        raise ValueError("sigma and xi must be positive")
    psf = PsfModel("gaussian", sigma)
    grid = Grid.around([center], max(sigma, xi))
    mode = eval_psf(PsfModel("gaussian", xi), grid.points - center)
    return Povm(
        "binary-spade",
        (OutcomeSpec("P_0", 1.0, coeffs={"phi_0": 1.0}),),
        psf,
        {"sigma": sigma, "xi": xi, "center": center},
        grid=grid,
        modes=mode[None, :],
    )


def _spade_outcomes(B: np.ndarray, names, Q: int, l_max: int, weight: float):
    """
    Outcome list [b_j^(0) for j; then phi_{j,+/-}^(l) for l < l_max, j].

    ``B[l*Q + j]`` is basis mode (l, j) and ``names`` gives its label.
    """
    rows, specs = [], []
    for j in range(Q):
        rows.append(B[j])
        specs.append(OutcomeSpec(f"P_0_{j}" if Q > 1 else "P_0", weight, coeffs={names[j]: 1.0}))
    r = 1.0 / math.sqrt(2.0)
    for l in range(l_max):
        for j in range(Q):
            lo, hi = l * Q + j, (l + 1) * Q + j
            for sgn, tag in ((1.0, "+"), (-1.0, "-")):
                rows.append(r * (B[lo] + sgn * B[hi]))
                lab = f"P_{l}{tag}_{j}" if Q > 1 else f"P_{l}{tag}"
                specs.append(OutcomeSpec(lab, weight, coeffs={names[lo]: r, names[hi]: sgn * r}))
    return np.array(rows), tuple(specs)


def _check_l_max(l_max: int) -> None:
    if l_max < 0 or l_max > MAX_DERIVATIVE_ORDER:
        raise ValueError(f"l_max must lie in [0, {MAX_DERIVATIVE_ORDER}]")


def build_spade_single(psf: PsfModel, centroid: float, L: float, l_max: int) -> Povm:
    """SPADE at one centroid: [1/2 b_0; 1/2 phi_{l,+/-} for l < l_max]."""
    _check_l_max(l_max)
    grid = Grid.around([centroid], psf.sigma)
    ob = gram_schmidt_single(derivative_family(psf, [centroid], [L], l_max, grid))
    if ob.truncated:
        raise ValueError(f"basis degenerate beyond order {ob.size - 1}")
    names = [f"b_{l}" for l in range(ob.size)]
    modes, outcomes = _spade_outcomes(ob.matrix(), names, 1, l_max, 0.5)
    params = {"centroid": float(centroid), "L": float(L), "l_max": int(l_max)}
    return Povm("spade", outcomes, psf, params, grid=grid, modes=modes)


def build_separate_spade(psf: PsfModel, centroids, L, l_max: int) -> Povm:
    """Independent SPADE bases at every centroid, each outcome weighted 1/(2Q)."""
    _check_l_max(l_max)
    centroids = [float(u) for u in np.atleast_1d(centroids)]
    Q = len(centroids)
    sizes = np.broadcast_to(np.asarray(L, dtype=float), (Q,))
    grid = Grid.around(centroids, psf.sigma)
    bases = []
    for u, Lq in zip(centroids, sizes):
        ob = gram_schmidt_single(derivative_family(psf, [u], [Lq], l_max, grid))
        if ob.truncated:
            raise ValueError(f"basis degenerate beyond order {ob.size - 1}")
        bases.append(ob.matrix())
    # interleave into the (l, j) ordering shared with the orthogonalized family
    B = np.array([bases[j][l] for l in range(l_max + 1) for j in range(Q)])
    names = [f"b_{j}_{l}" for l in range(l_max + 1) for j in range(Q)]
    modes, outcomes = _spade_outcomes(B, names, Q, l_max, 1.0 / (2 * Q))
    params = {"centroids": centroids, "L": sizes.tolist(), "l_max": int(l_max)}
    return Povm("separate-spade", outcomes, psf, params, grid=grid, modes=modes)


def build_orthogonalized_spade(psf: PsfModel, centroids, L, l_max: int) -> Povm:
    """Jointly orthogonalized SPADE: [1/2 b_j^(0); 1/2 phi_{j,+/-}^(l)]."""
    _check_l_max(l_max)
    centroids = [float(u) for u in np.atleast_1d(centroids)]
    Q = len(centroids)
    if len(set(centroids)) < Q:
        raise ValueError("centroids must be distinct")
    sizes = np.broadcast_to(np.asarray(L, dtype=float), (Q,))
    grid = Grid.around(centroids, psf.sigma)
    ob = gram_schmidt_joint(derivative_family(psf, centroids, sizes, l_max, grid), Q)
    if ob.truncated:
        raise ValueError(f"joint basis degenerate beyond order {ob.size // Q - 1}")
    names = [f"b_{j}^{l}" for l in range(l_max + 1) for j in range(Q)]
    modes, outcomes = _spade_outcomes(ob.matrix(), names, Q, l_max, 0.5)
    params = {"centroids": centroids, "L": sizes.tolist(), "l_max": int(l_max)}
    return Povm("orthogonalized-spade", outcomes, psf, params, grid=grid, modes=modes)


def build_povm(kind: str, psf: PsfModel = PsfModel(), **params) -> Povm:
    """Dispatch on the family name used in configs and manifests."""
    if kind == "direct":
        return build_direct_imaging(params["region"], params["t_max"], psf)
    if kind == "binary-spade":
        return build_binary_spade(params.get("sigma", psf.sigma), params["xi"], params.get("center", 0.0))
    if kind == "spade":
        return build_spade_single(psf, params["centroid"], params["L"], params["l_max"])
    if kind == "separate-spade":
        return build_separate_spade(psf, params["centroids"], params["L"], params["l_max"])
    if kind == "orthogonalized-spade":
        return build_orthogonalized_spade(psf, params["centroids"], params["L"], params["l_max"])
    raise ValueError(f"unknown measurement kind {kind!r}")


def _with_sink(P: np.ndarray) -> np.ndarray:
    # clip float noise so the vector stays a valid sampling distribution
    return np.append(P, max(0.0, 1.0 - math.fsum(P)))


def _pixel_nodes(edges: np.ndarray):
    x, w = np.polynomial.legendre.leggauss(PIXEL_QUAD_NODES)
    a, b = edges[:-1, None], edges[1:, None]
    half = 0.5 * (b - a)
    return (a + b) / 2 + half * x, half * w  # (t_max, nodes) each


def exact_probabilities(povm: Povm, scene: Scene) -> np.ndarray:
    """Outcome probabilities of ``scene``, sink last."""
    pos, inten = scene.emitters()
    if povm.edges is not None:
        v, w = _pixel_nodes(povm.edges)
        amp = eval_psf(povm.psf, v[:, :, None] - pos[None, None, :])
        P = np.einsum("tk,tks,s->t", w, amp * amp, inten)
    else:
        g = povm.grid
        amp = eval_psf(povm.psf, g.points[:, None] - pos[None, :])
        ov = (povm.modes * g.weights) @ amp
        P = povm.weights * ((ov * ov) @ inten)
    return _with_sink(P)


@dataclass(frozen=True, eq=False)
class CoeffTensor:
    """
    Moment coefficients c[j, q, n], sink row included.

    The tensor is independent of alpha: source sizes enter only through their
    ratios, and ``alpha_ref`` records the alpha that reproduces the sizes the
    tensor was built for.
    """

    c: np.ndarray
    alpha_ref: float
    max_order: int
    centroids: tuple = ()
    sizes: tuple = ()


def coefficient_tensor(povm: Povm, centroids, sizes, max_order: int, chop: float = CHOP_TOL) -> CoeffTensor:
    """
    Moment-expansion coefficients of every outcome.

    Derivative modes are evaluated with the unit-alpha sizes L_q / alpha_ref,
    so no power of alpha is divided out numerically. Entries below ``chop``
    are round-off (mostly from the sink row, formed as 1 - sum) and are set
    to zero so they cannot masquerade as alpha-independent signal.
    """
    if not 0 <= max_order <= MAX_DERIVATIVE_ORDER:
        raise ValueError(f"max_order must lie in [0, {MAX_DERIVATIVE_ORDER}]")
    centroids = np.atleast_1d(np.asarray(centroids, dtype=float))
    Q = centroids.size
    sizes = np.broadcast_to(np.asarray(sizes, dtype=float), (Q,)).copy()
    sigma = povm.psf.sigma
    alpha_ref = float(sizes.max() / sigma)
    unit = sizes / alpha_ref
    M = max_order
    n_phys = len(povm.outcomes)
    c = np.zeros((n_phys + 1, Q, max_order + 1))
    for q in range(Q):
        if povm.edges is not None:
            v, w = _pixel_nodes(povm.edges)
            F = np.array([derivative_values(povm.psf, m, centroids[q], unit[q], v) for m in range(M + 1)])
            for n in range(max_order + 1):
                for m in range(n + 1):
                    c[:n_phys, q, n] += np.einsum("tk,tk,tk->t", w, F[m], F[n - m])
        else:
            g = povm.grid
            F = np.array([derivative_values(povm.psf, m, centroids[q], unit[q], g.points) for m in range(M + 1)])
            A = (povm.modes * g.weights) @ F.T  # (outcomes, orders)
            for n in range(max_order + 1):
                for m in range(n + 1):
                    c[:n_phys, q, n] += povm.weights * A[:, m] * A[:, n - m]
        # the sink closes the trace: total probability is x_0 at every order
        c[n_phys, q, :] = -c[:n_phys, q, :].sum(axis=0)
        c[n_phys, q, 0] += 1.0
    c[np.abs(c) < chop] = 0.0
    return CoeffTensor(c, alpha_ref, max_order, tuple(centroids), tuple(sizes))


def moment_probabilities(tensor: CoeffTensor, x, alpha: float) -> np.ndarray:
    """Truncated moment expansion of the outcome probabilities (may dip below zero)."""
    if not alpha > 0:
        raise ValueError("alpha must be positive")
    x = np.atleast_2d(np.asarray(x, dtype=float))
    N = tensor.max_order
    if x.shape[1] < N + 1:
        raise ValueError(f"need moments up to order {N}")
    powers = alpha ** np.arange(N + 1)
    P = np.einsum("jqn,qn,n->j", tensor.c, x[:, : N + 1], powers)
    if P.min() < -NEGATIVE_REPORT_TOL:
        warnings.warn(f"truncated expansion gives negative probabilities (min {P.min():.3g})")
    return P
