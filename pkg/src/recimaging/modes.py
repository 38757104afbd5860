"""
PSF algebra on a one-dimensional grid.

Mode functions are sampled on a uniform grid and inner products use the
trapezoid rule. For the Gaussian PSF the derivative modes are evaluated in
closed form through the probabilists' Hermite recurrence; other PSFs fall
back on central finite differences.
"""
from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field
from functools import cached_property
from typing import Callable, Optional, Sequence

import numpy as np

MAX_DERIVATIVE_ORDER = 8
ZERO_TOL = 1e-10
PIVOT_TOL = 1e-10
DEFAULT_POINTS = 4001
DEFAULT_PAD = 10.0


@dataclass(frozen=True)
class Grid:
    """Uniform grid on [lo, hi] with trapezoid weights."""

    lo: float
    hi: float
    n_points: int = DEFAULT_POINTS

    def __post_init__(self):
        if not self.hi > self.lo:
            raise ValueError(f"grid needs hi > lo, got [{self.lo}, {self.hi}]")
        if self.n_points < 2:
            raise ValueError("grid needs at least 2 points")

    @classmethod
    def around(cls, centroids, sigma=1.0, pad=DEFAULT_PAD, n_points=DEFAULT_POINTS):
        """Grid spanning ``pad`` PSF widths beyond the outermost centroids."""
        c = np.atleast_1d(np.asarray(centroids, dtype=float))
        return cls(float(c.min() - pad * sigma), float(c.max() + pad * sigma), n_points)

    @cached_property
    def points(self) -> np.ndarray:
        return np.linspace(self.lo, self.hi, self.n_points)

    @cached_property
    def weights(self) -> np.ndarray:
        h = (self.hi - self.lo) / (self.n_points - 1)
        w = np.full(self.n_points, h)
        w[0] = w[-1] = 0.5 * h
        return w

    def refined(self) -> "Grid":
        """Same interval with the spacing halved."""
        return Grid(self.lo, self.hi, 2 * self.n_points - 1)


@dataclass(frozen=True, eq=False)
class ModeFunction:
    """Real amplitude sampled on a grid."""

    grid: Grid
    values: np.ndarray

    def __post_init__(self):
        v = np.asarray(self.values, dtype=float)
        if v.shape != (self.grid.n_points,):
            raise ValueError("mode values do not match the grid size")
        object.__setattr__(self, "values", v)

    def norm(self) -> float:
        return math.sqrt(inner_product(self, self))

    def normalized(self) -> "ModeFunction":
        return ModeFunction(self.grid, self.values / self.norm())

    def scaled(self, c: float) -> "ModeFunction":
        return ModeFunction(self.grid, c * self.values)


@dataclass(frozen=True)
class PsfModel:
    """Amplitude PSF. ``kind='custom'`` takes an arbitrary callable."""

    kind: str = "gaussian"
    sigma: float = 1.0
    func: Optional[Callable[[np.ndarray], np.ndarray]] = field(default=None, compare=False)

    def __post_init__(self):
        if not self.sigma > 0:
            raise ValueError(f"sigma must be positive, got {self.sigma}")
        if self.kind not in ("gaussian", "custom"):
            raise ValueError(f"unknown PSF kind {self.kind!r}")
        if self.kind == "custom" and self.func is None:
            raise ValueError("custom PSF needs a callable")

    def to_dict(self) -> dict:
        if self.kind != "gaussian":
            raise ValueError("only the Gaussian PSF is serializable")
        return {"kind": self.kind, "sigma": self.sigma}


def eval_psf(psf: PsfModel, u):
    """PSF amplitude psi(u)."""
    u = np.asarray(u, dtype=float)
    if psf.kind == "gaussian":
        s2 = psf.sigma ** 2
        out = np.exp(-u * u / (4.0 * s2)) / (2.0 * math.pi * s2) ** 0.25
    else:
        out = np.asarray(psf.func(u), dtype=float)
    return float(out) if out.ndim == 0 else out


def _hermite_he(n: int, s: np.ndarray) -> np.ndarray:
    h0 = np.ones_like(s)
    if n == 0:
        return h0
    h1 = s.copy()
    for k in range(1, n):
        h0, h1 = h1, s * h1 - k * h0
    return h1


def _check_order(n: int) -> None:
    if n < 0:
        raise ValueError("derivative order must be nonnegative")
    if n > MAX_DERIVATIVE_ORDER:
        raise ValueError(
            f"derivative order {n} exceeds the supported maximum {MAX_DERIVATIVE_ORDER}"
        )


def derivative_values(psf: PsfModel, n: int, centroid: float, size: float, v) -> np.ndarray:
    """
    Values of psi_q^(n)(v) = d^n psi(v - u)/du^n at u = centroid, times size^n/n!.

    Parameters
    ----------
    psf : PsfModel
    n : int
        Derivative order, at most MAX_DERIVATIVE_ORDER.
    centroid, size : float
        Expansion point u_q and source size L_q.
    v : array_like
        Evaluation points.
    """
    _check_order(n)
    if not size > 0:
        raise ValueError("source size must be positive")
    v = np.asarray(v, dtype=float)
    t = v - centroid
    if psf.kind == "gaussian":
        r = math.sqrt(2.0) * psf.sigma
        s = t / r
        base = np.exp(-0.5 * s * s) / (2.0 * math.pi * psf.sigma ** 2) ** 0.25
        return base * _hermite_he(n, s) * (size / r) ** n / math.factorial(n)
    return fd_derivative_values(psf, n, centroid, size, v)


def fd_derivative_values(psf, n, centroid, size, v, h=None) -> np.ndarray:
    """Finite-difference counterpart of :func:`derivative_values`."""
    _check_order(n)
    v = np.asarray(v, dtype=float)
    if n == 0:
        return eval_psf(psf, v - centroid) * np.ones_like(v)
    if h is None:
        h = psf.sigma * 0.15
    # wide central stencil; relative L2 error stays below ~1e-6 up to n = 6,
    # beyond that cancellation in double precision dominates
    half = n // 2 + 4
    offsets = np.arange(-half, half + 1)
    coef = _fd_weights(offsets, n)
    acc = np.zeros_like(v)
    for o, c in zip(offsets, coef):
        acc += c * eval_psf(psf, v - (centroid + o * h))
    return acc / h ** n * size ** n / math.factorial(n)


def _fd_weights(offsets: np.ndarray, n: int) -> np.ndarray:
    # weights w with sum_i w_i o_i^k = n! delta_{kn}, k < len(offsets)
    m = len(offsets)
    A = np.vander(offsets.astype(float), m, increasing=True).T
    rhs = np.zeros(m)
    rhs[n] = math.factorial(n)
    return np.linalg.solve(A, rhs)


def derivative_mode(psf: PsfModel, n: int, centroid: float, size: float, grid: Grid) -> ModeFunction:
    """Unnormalized derivative mode psi_q^(n) on ``grid``."""
    return ModeFunction(grid, derivative_values(psf, n, centroid, size, grid.points))


def inner_product(f: ModeFunction, g: ModeFunction) -> float:
    if f.grid != g.grid:
        raise ValueError("mode functions live on different grids")
    return float(np.dot(f.grid.weights * f.values, g.values))


@dataclass(frozen=True, eq=False)
class OrthoBasis:
    """
    Orthonormal modes from an ordered raw family.

    ``overlap_table[i, l]`` is <raw_i|b_l> with the raw norm included, so for
    derivative modes it carries the alpha scaling.
    """

    modes: tuple
    overlap_table: np.ndarray
    raw_norms: np.ndarray
    pivots: np.ndarray
    truncated: bool = False

    @property
    def grid(self) -> Grid:
        return self.modes[0].grid

    @property
    def size(self) -> int:
        return len(self.modes)

    @property
    def min_pivot(self) -> float:
        return float(self.pivots.min())

    def matrix(self) -> np.ndarray:
        """Mode values stacked as rows."""
        return np.array([b.values for b in self.modes])


def _orthonormalize(raw: Sequence[ModeFunction], pivot_tol: float):
    if len(raw) == 0:
        raise ValueError("need at least one raw mode")
    grid = raw[0].grid
    for r in raw:
        if r.grid != grid:
            raise ValueError("raw modes live on different grids")
    w = grid.weights
    norms = np.array([r.norm() for r in raw])
    if np.any(norms == 0):
        raise ValueError("raw mode with zero norm")
    unit = np.array([r.values / nr for r, nr in zip(raw, norms)])
    basis = []
    pivots = []
    for v0 in unit:
        v = v0.copy()
        for _ in range(2):  # modified Gram-Schmidt plus one reorthogonalization
            for b in basis:
                v -= np.dot(w * b, v) * b
        p = math.sqrt(np.dot(w * v, v))
        if p < pivot_tol:
            break
        basis.append(v / p)
        pivots.append(p)
    B = np.array(basis)
    table = norms[:, None] * (unit * w) @ B.T
    return grid, B, table, norms, np.array(pivots)


def gram_schmidt_single(raw: Sequence[ModeFunction], pivot_tol: float = PIVOT_TOL) -> OrthoBasis:
    """
    Orthonormalize raw modes in the given order.

    If a raw mode is (numerically) in the span of the earlier ones the
    basis is truncated there and a warning reports the achieved order.
    """
    grid, B, table, norms, pivots = _orthonormalize(raw, pivot_tol)
    truncated = len(B) < len(raw)
    if truncated:
        warnings.warn(f"Gram-Schmidt truncated at order {len(B) - 1} of {len(raw) - 1}")
    modes = tuple(ModeFunction(grid, b) for b in B)
    return OrthoBasis(modes, table, norms, pivots, truncated)


def gram_schmidt_joint(raw: Sequence[ModeFunction], Q: int, pivot_tol: float = PIVOT_TOL) -> OrthoBasis:
    """
    Joint orthonormalization over Q sources.

    ``raw`` is ordered by derivative order first and source index second, so
    mode (l, j) sits at position l*Q + j. Sequential Gram-Schmidt in that
    order gives <psi_k^(m)|b_j^(l)> = 0 whenever (m, k) precedes (l, j).
    """
    if Q < 1 or len(raw) % Q:
        raise ValueError(f"raw family of length {len(raw)} does not split into Q={Q} sources")
    grid, B, table, norms, pivots = _orthonormalize(raw, pivot_tol)
    if len(B) < Q:
        raise ValueError("coincident or nearly coincident centroids: zeroth-order modes are degenerate")
    full = (len(B) // Q) * Q
    truncated = full < len(raw)
    if truncated:
        warnings.warn(f"joint Gram-Schmidt truncated at order {full // Q - 1} of {len(raw) // Q - 1}")
    B, table, pivots = B[:full], table[:, :full], pivots[:full]
    modes = tuple(ModeFunction(grid, b) for b in B)
    return OrthoBasis(modes, table, norms, pivots, truncated)


def derivative_family(psf: PsfModel, centroids, sizes, max_order: int, grid: Grid) -> list:
    """Raw modes psi_q^(m) ordered by m ascending, then q ascending."""
    centroids = np.atleast_1d(np.asarray(centroids, dtype=float))
    sizes = np.broadcast_to(np.asarray(sizes, dtype=float), centroids.shape)
    return [
        derivative_mode(psf, m, float(u), float(L), grid)
        for m in range(max_order + 1)
        for u, L in zip(centroids, sizes)
    ]
