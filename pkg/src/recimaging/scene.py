"""Compact sources, moments, random scene generators and image ingestion."""
from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

MAX_REDRAWS = 1000
NORM_TOL = 1e-12


@dataclass(frozen=True, eq=False)
class CompactSource:
    """Point emitters at the centers of ``len(pixels)`` equal segments of [u-L/2, u+L/2]."""

    centroid: float
    size: float
    pixels: np.ndarray

    def __post_init__(self):
        p = np.asarray(self.pixels, dtype=float).ravel()
        if not self.size > 0:
            raise ValueError("source size must be positive")
        if p.size == 0:
            raise ValueError("source needs at least one pixel")
        if np.any(p < 0) or not np.all(np.isfinite(p)):
            raise ValueError("pixel intensities must be finite and nonnegative")
        object.__setattr__(self, "pixels", p)

    @property
    def positions(self) -> np.ndarray:
        n = self.pixels.size
        return self.centroid - self.size / 2 + (np.arange(n) + 0.5) * self.size / n

    @property
    def total(self) -> float:
        return float(self.pixels.sum())


@dataclass(frozen=True, eq=False)
class Scene:
    sources: tuple

    def __post_init__(self):
        object.__setattr__(self, "sources", tuple(self.sources))
        if not self.sources:
            raise ValueError("scene needs at least one source")
        tot = math.fsum(float(v) for s in self.sources for v in s.pixels)
        if abs(tot - 1.0) > NORM_TOL:
            raise ValueError(f"scene intensities sum to {tot}, expected 1")

    @classmethod
    def normalized(cls, sources: Sequence[CompactSource]) -> "Scene":
        tot = math.fsum(float(v) for s in sources for v in s.pixels)
        if tot <= 0:
            raise ValueError("scene has zero total intensity")
        return cls(tuple(CompactSource(s.centroid, s.size, s.pixels / tot) for s in sources))

    @classmethod
    def points(cls, positions, weights=None, size: float = 1.0) -> "Scene":
        """Point sources, each its own single-pixel compact source."""
        positions = np.atleast_1d(np.asarray(positions, dtype=float))
        if weights is None:
            weights = np.ones_like(positions)
        return cls.normalized([CompactSource(float(u), size, [w]) for u, w in zip(positions, weights)])

    @property
    def Q(self) -> int:
        return len(self.sources)

    @property
    def centroids(self) -> np.ndarray:
        return np.array([s.centroid for s in self.sources])

    @property
    def sizes(self) -> np.ndarray:
        return np.array([s.size for s in self.sources])

    def emitters(self):
        """All (position, intensity) pairs, flattened across sources."""
        pos = np.concatenate([s.positions for s in self.sources])
        inten = np.concatenate([s.pixels for s in self.sources])
        return pos, inten

    def to_dict(self) -> dict:
        return {
            "sources": [
                {"centroid": s.centroid, "size": s.size, "pixels": s.pixels.tolist()}
                for s in self.sources
            ]
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Scene":
        return cls(tuple(CompactSource(s["centroid"], s["size"], s["pixels"]) for s in d["sources"]))

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "Scene":
        return cls.from_dict(json.loads(text))


def moments(scene: Scene, max_order: int) -> np.ndarray:
    """
    Normalized moments x[q, n] = sum I ((u - u_q)/L_q)^n.

    Returns an array of shape (Q, max_order + 1).
    """
    x = np.zeros((scene.Q, max_order + 1))
    n = np.arange(max_order + 1)
    for q, s in enumerate(scene.sources):
        z = (s.positions - s.centroid) / s.size
        if np.any(np.abs(z) > 0.5 + 1e-12):
            raise ValueError(f"pixel of source {q} lies outside its segment")
        x[q] = (s.pixels[:, None] * z[:, None] ** n).sum(axis=0)
    return x


@dataclass(frozen=True)
class SceneGeneratorConfig:
    """
    Settings for the random scene generators.

    ``eta`` lists the intervals where the indicator is 1. ``case`` is one of
    'active' (pixels may light only where eta=1), 'inactive' (only where
    eta=0) or 'unrestricted'.
    """

    centroids: tuple = (0.0,)
    sizes: tuple = (1.0,)
    n_pixels: int = 20
    p0: float = 0.5
    eta: tuple = ()
    case: str = "unrestricted"

    def __post_init__(self):
        c = tuple(float(v) for v in np.atleast_1d(self.centroids))
        s = np.broadcast_to(np.asarray(self.sizes, dtype=float), (len(c),))
        object.__setattr__(self, "centroids", c)
        object.__setattr__(self, "sizes", tuple(float(v) for v in s))
        object.__setattr__(self, "eta", tuple(tuple(map(float, iv)) for iv in self.eta))
        if not 0.0 <= self.p0 <= 1.0:
            raise ValueError("p0 must lie in [0, 1]")
        if self.n_pixels < 1:
            raise ValueError("n_pixels must be positive")
        if any(v <= 0 for v in self.sizes):
            raise ValueError("source sizes must be positive")
        if self.case not in ("active", "inactive", "unrestricted"):
            raise ValueError(f"unknown case {self.case!r}")

    @property
    def Q(self) -> int:
        return len(self.centroids)

    def positions(self, q: int) -> np.ndarray:
        L = self.sizes[q]
        return self.centroids[q] - L / 2 + (np.arange(self.n_pixels) + 0.5) * L / self.n_pixels

    def indicator(self, u: np.ndarray) -> np.ndarray:
        out = np.zeros(u.shape, dtype=bool)
        for lo, hi in self.eta:
            out |= (u >= lo) & (u < hi)
        return out

    def admissible(self, q: int) -> np.ndarray:
        u = self.positions(q)
        if self.case == "active":
            return self.indicator(u)
        if self.case == "inactive":
            return ~self.indicator(u)
        return np.ones(u.shape, dtype=bool)


def generate_scene(cfg: SceneGeneratorConfig, rng: np.random.Generator) -> Scene:
    """Bernoulli(p0) pixels on admissible positions, normalized; all-zero draws are redrawn."""
    masks = [cfg.admissible(q) for q in range(cfg.Q)]
    if not any(m.any() for m in masks):
        raise ValueError("no admissible pixels for this configuration")
    for _ in range(MAX_REDRAWS):
        pix = [(rng.random(cfg.n_pixels) < cfg.p0) & m for m in masks]
        if any(p.any() for p in pix):
            return Scene.normalized(
                [CompactSource(u, L, p.astype(float)) for u, L, p in zip(cfg.centroids, cfg.sizes, pix)]
            )
    raise RuntimeError(f"no nonzero scene after {MAX_REDRAWS} draws")


def generate_uniform_random_scene(cfg: SceneGeneratorConfig, rng: np.random.Generator) -> Scene:
    """Uniform [0, 1) pixel intensities on every source, jointly normalized."""
    return Scene.normalized(
        [CompactSource(u, L, rng.random(cfg.n_pixels)) for u, L in zip(cfg.centroids, cfg.sizes)]
    )


def _read_pgm(data: bytes) -> np.ndarray:
    # tokenizer that skips '#' comments in the header
    pos = 0

    def next_token():
        nonlocal pos
        while True:
            while pos < len(data) and data[pos:pos + 1].isspace():
                pos += 1
            if pos < len(data) and data[pos:pos + 1] == b"#":
                while pos < len(data) and data[pos:pos + 1] not in (b"\n", b"\r"):
                    pos += 1
                continue
            break
        start = pos
        while pos < len(data) and not data[pos:pos + 1].isspace():
            pos += 1
        if start == pos:
            raise ValueError("truncated PGM header")
        return data[start:pos]

    magic = next_token()
    if magic not in (b"P2", b"P5"):
        raise ValueError(f"not a PGM file (magic {magic!r})")
    try:
        w, h, maxval = (int(next_token()) for _ in range(3))
    except ValueError as e:
        raise ValueError(f"malformed PGM header: {e}") from None
    if w <= 0 or h <= 0 or not 0 < maxval <= 65535:
        raise ValueError("invalid PGM dimensions or maxval")
    if magic == b"P2":
        try:
            vals = [int(next_token()) for _ in range(w * h)]
        except ValueError as e:
            raise ValueError(f"malformed PGM body: {e}") from None
        img = np.array(vals, dtype=float)
    else:
        pos += 1  # single whitespace after maxval
        dtype = np.dtype(">u2") if maxval > 255 else np.dtype("u1")
        body = data[pos:pos + w * h * dtype.itemsize]
        if len(body) < w * h * dtype.itemsize:
            raise ValueError("truncated PGM body")
        img = np.frombuffer(body, dtype=dtype).astype(float)
    if np.any(img > maxval) or np.any(img < 0):
        raise ValueError("PGM value out of range")
    return img.reshape(h, w)


def _read_csv_matrix(text: str) -> np.ndarray:
    rows = [r for r in csv.reader(text.splitlines()) if r and any(c.strip() for c in r)]
    if not rows:
        raise ValueError("empty CSV image")
    try:
        img = np.array([[float(c) for c in r] for r in rows])
    except ValueError as e:
        raise ValueError(f"malformed CSV image: {e}") from None
    if img.ndim != 2:
        raise ValueError("CSV rows have unequal lengths")
    return img


def read_image(path) -> np.ndarray:
    path = Path(path)
    data = path.read_bytes()
    if data[:2] in (b"P2", b"P5"):
        return _read_pgm(data)
    return _read_csv_matrix(data.decode())


def ingest_raster_image(path, M: int, centroids, size: float = 0.1, uneven: bool = False) -> Scene:
    """
    Rasterize an image row-major into M consecutive segments.

    Segment m becomes the pixel vector of a compact source at ``centroids[m]``
    of width ``size``. Gray levels are used as intensities and the whole
    scene is normalized jointly. A pixel count not divisible by M is an
    error unless ``uneven`` is set, in which case the first (H*W mod M)
    segments get one extra pixel.
    """
    return scene_from_image(read_image(path), M, centroids, size, uneven)


def scene_from_image(img: np.ndarray, M: int, centroids, size: float = 0.1, uneven: bool = False) -> Scene:
    flat = np.asarray(img, dtype=float).ravel()
    if M < 1 or flat.size < M or (flat.size % M and not uneven):
        raise ValueError(f"{flat.size} pixels do not split into {M} equal segments")
    if np.any(flat < 0):
        raise ValueError("negative gray level")
    centroids = np.atleast_1d(np.asarray(centroids, dtype=float))
    if centroids.size != M:
        raise ValueError("need one centroid per segment")
    segs = np.array_split(flat, M)
    return Scene.normalized([CompactSource(float(u), size, s) for u, s in zip(centroids, segs)])
