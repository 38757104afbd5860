"""
Named scenarios, configuration handling and artifact output.

A configuration is a nested JSON object::

    {"scenario": "single-source", "methods": ["direct", "spade"], "seed": 1,
     "output_dir": "out", "physical": {...}, "prior": {...},
     "sampling": {...}, "learning": {...}}

Each scenario has its own defaults; keys it does not know are rejected.
Every random stage draws from its own seed, derived from the master seed
and the stage name, so results do not depend on the worker count or on
which other methods are run alongside.
"""
from __future__ import annotations

import copy
import csv
import hashlib
import io
import json
import math
import os
import platform
import re
import time
import zlib
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Optional

import numpy as np

from . import __version__
from .discrim import augment_features, eigentask_standard_error, error_exponent_scan
from .learn import SweepResult, TaskDataset, TrainConfig, fit_scaler, predict, run_k_sweep, train_softmax
from .modes import PIVOT_TOL, PsfModel
from .povm import (
    CHOP_TOL,
    KINDS,
    Povm,
    build_binary_spade,
    build_direct_imaging,
    build_orthogonalized_spade,
    build_separate_spade,
    build_spade_single,
    coefficient_tensor,
    exact_probabilities,
)
from .rec import (
    BETA_CUTOFF,
    D_FLOOR,
    LAMBDA_FLOOR,
    PriorEnsemble,
    build_dg,
    build_dg_series,
    eigentask_values,
    moment_stats,
    scaling_fit,
    solve_spectrum,
    total_rec,
)
from .sampling import empirical_probs, sample_counts
from .scene import (
    Scene,
    SceneGeneratorConfig,
    generate_scene,
    generate_uniform_random_scene,
    ingest_raster_image,
    moments,
)

SCENARIOS = (
    "two-point",
    "single-source",
    "multi-source",
    "general-source",
    "classify-qr",
    "classify-multisource",
    "face",
    "discriminate",
)
SECTIONS = ("physical", "prior", "sampling", "learning")
WORKERS_ENV = "REC_IMAGING_WORKERS"
EIGVEC_DUMP = 8  # eigenvectors k = 0..EIGVEC_DUMP are written out


class ConfigError(ValueError):
    """Raised by ``run`` for an invalid configuration; carries the report."""

    def __init__(self, violations):
        self.violations = list(violations)
        super().__init__("; ".join(self.violations))


# ---------------------------------------------------------------- defaults

def _logspace(a, b, n):
    return [float(v) for v in np.logspace(a, b, n)]


_LEARNING = {"K": list(range(17)), "l2": 1e-4, "max_epochs": 5000, "grad_tol": 1e-6}

DEFAULTS = {
    "two-point": {
        "methods": ["binary-spade"],
        "physical": {"sigma": 1.0, "xi": 1.0, "gammas": [0.05, 0.1, 0.2]},
        "prior": {"quad_nodes": 201, "quad_span": 8.0},
        "sampling": {"S": _logspace(0, 14, 15)},
        "learning": {},
    },
    "single-source": {
        "methods": ["direct", "spade"],
        "physical": {"sigma": 1.0, "alphas": _logspace(-3, -1, 5), "centroid": 0.0,
                     "region": [-5.0, 5.0], "t_max": 50, "l_max": 4},
        "prior": {"N_max": 20, "W": 50, "series_order": 8},
        "sampling": {"S": _logspace(0, 14, 29)},
        "learning": {},
    },
    "multi-source": {
        "methods": ["direct", "separate-spade", "orthogonalized-spade"],
        "physical": {"sigma": 1.0, "alphas": _logspace(-3, -1, 5), "Q": 2, "centroids": [-0.5, 0.5],
                     "region": None, "t_max": 50, "l_max": 4},
        "prior": {"N_max": 20, "W": 50, "series_order": 8},
        "sampling": {"S": _logspace(0, 14, 29)},
        "learning": {},
    },
    "general-source": {
        "methods": ["direct"],
        "physical": {"sigma": 1.0, "L": 10.0, "region": [-10.0, 10.0], "t_max": 50},
        "prior": {"n_pixels": 200, "W": 200, "p0": 0.2, "eta": None, "eta_width": [0.2, 0.6]},
        "sampling": {"S": _logspace(0, 14, 29)},
        "learning": {},
    },
    "classify-qr": {
        "methods": ["direct"],
        "physical": {"sigma": 1.0, "L": 10.0, "region": [-10.0, 10.0], "t_max": 50},
        "prior": {"n_pixels": 200, "W": 200, "p0": 0.2, "eta": None, "eta_width": [0.2, 0.6],
                  "w_test": 100},
        "sampling": {"S": [1e2, 1e4, 1e6], "repetitions": 20, "ct_S": _logspace(0, 14, 29)},
        "learning": dict(_LEARNING, K=list(range(31))),
    },
    "classify-multisource": {
        "methods": ["direct", "separate-spade", "orthogonalized-spade"],
        "physical": {"sigma": 1.0, "alpha": 0.1, "Lbig": 10.0, "Q": 4, "centroids": [-3.0, -1.0, 1.0, 3.0],
                     "region": None, "t_max": 50, "l_max": 4},
        "prior": {"n_pixels": 20, "W": 200, "p0": 0.5, "eta": None, "eta_fraction": 0.5,
                  "w_test": 100},
        "sampling": {"S": [1e4, 1e7, 1e10], "repetitions": 20, "ct_S": _logspace(0, 14, 29)},
        "learning": dict(_LEARNING),
    },
    "face": {
        "methods": ["direct", "separate-spade", "orthogonalized-spade"],
        "physical": {"sigma": 1.0, "alpha": 0.1, "Lbig": 10.0, "M": 3, "centroids": [-1.5, 0.0, 1.5],
                     "region": None, "t_max": 50, "l_max": 4},
        "prior": {"image_dir": None, "n_person": 20, "w_train": 9, "w_test": 1,
                  "n_pixels": 20, "p0": 0.7, "eta_fraction": 0.5},
        "sampling": {"S": [1e6, 1e8, 1e10], "repetitions": 20, "ct_S": _logspace(0, 14, 29)},
        "learning": dict(_LEARNING),
    },
    "discriminate": {
        "methods": ["direct", "spade"],
        "physical": {"sigma": 1.0, "d_sep": 0.6, "alphas": _logspace(-1, 0, 5),
                     "region": [-5.0, 5.0], "t_max": 50, "l_max": 4},
        "prior": {},
        "sampling": {"S": 10000, "repetitions": 1000},
        "learning": dict(_LEARNING, K=[0, 1], augment=500),
    },
}

ALLOWED_METHODS = {
    "two-point": {"binary-spade"},
    "single-source": {"direct", "spade"},
    "multi-source": {"direct", "separate-spade", "orthogonalized-spade"},
    "general-source": {"direct"},
    "classify-qr": {"direct"},
    "classify-multisource": {"direct", "separate-spade", "orthogonalized-spade"},
    "face": {"direct", "separate-spade", "orthogonalized-spade"},
    "discriminate": {"direct", "spade"},
}

SCENARIO_HELP = {
    "two-point": "binary SPADE on a Gaussian prior of two-point separations; beta_1^2 vs closed form",
    "single-source": "beta_k^2 scaling with alpha and C_T(S) for one compact source",
    "multi-source": "direct vs separate vs orthogonalized SPADE for several compact sources",
    "general-source": "REC spectrum of direct imaging for a source wider than the PSF",
    "classify-qr": "two-case classification of binary sources beyond the Rayleigh limit",
    "classify-multisource": "two-case classification of several compact sources",
    "face": "multi-class recognition of rasterized images (or synthetic classes) split into compact sources",
    "discriminate": "one-vs-two point sources: likelihood ratio, Chernoff exponent, learned classifier",
}


# -------------------------------------------------------------- validation

def _is_num(v) -> bool:
    return isinstance(v, (int, float)) and not isinstance(v, bool) and math.isfinite(v)


def _is_int(v) -> bool:
    return isinstance(v, int) and not isinstance(v, bool)


def _num_list(v) -> bool:
    return isinstance(v, list) and len(v) > 0 and all(_is_num(x) for x in v)


def _interval_list(v) -> bool:
    return isinstance(v, list) and all(
        isinstance(iv, list) and len(iv) == 2 and all(_is_num(x) for x in iv) and iv[0] < iv[1] for iv in v
    )


# key -> (check, message); keys not listed accept any JSON value
_CHECKS = {
    "sigma": (lambda v: _is_num(v) and v > 0, "must be a positive number"),
    "xi": (lambda v: _is_num(v) and v > 0, "must be a positive number"),
    "alpha": (lambda v: _is_num(v) and v > 0, "must be a positive number"),
    "L": (lambda v: _is_num(v) and v > 0, "must be a positive number"),
    "Lbig": (lambda v: _is_num(v) and v > 0, "must be a positive number"),
    "d_sep": (lambda v: _is_num(v) and v > 0, "must be a positive number"),
    "centroid": (_is_num, "must be a number"),
    "quad_span": (lambda v: _is_num(v) and v > 0, "must be a positive number"),
    "gammas": (lambda v: _num_list(v) and min(v) > 0, "must be a nonempty list of positive numbers"),
    "alphas": (lambda v: _num_list(v) and min(v) > 0, "must be a nonempty list of positive numbers"),
    "centroids": (_num_list, "must be a nonempty list of numbers"),
    "region": (lambda v: v is None or (_num_list(v) and len(v) == 2 and v[0] < v[1]),
               "must be null or [lo, hi] with lo < hi"),
    "t_max": (lambda v: _is_int(v) and v >= 1, "must be a positive integer"),
    "l_max": (lambda v: _is_int(v) and 0 <= v <= 7, "must be an integer in [0, 7]"),
    "Q": (lambda v: _is_int(v) and v >= 1, "must be a positive integer"),
    "M": (lambda v: _is_int(v) and v >= 1, "must be a positive integer"),
    "quad_nodes": (lambda v: _is_int(v) and v >= 3, "must be an integer >= 3"),
    "N_max": (lambda v: _is_int(v) and v >= 1, "must be a positive integer"),
    "n_pixels": (lambda v: _is_int(v) and v >= 1, "must be a positive integer"),
    "W": (lambda v: _is_int(v) and v >= 2, "must be an integer >= 2"),
    "w_train": (lambda v: _is_int(v) and v >= 1, "must be a positive integer"),
    "w_test": (lambda v: _is_int(v) and v >= 1, "must be a positive integer"),
    "n_person": (lambda v: _is_int(v) and v >= 2, "must be an integer >= 2"),
    "series_order": (lambda v: _is_int(v) and 0 <= v <= 8, "must be an integer in [0, 8]"),
    "p0": (lambda v: _is_num(v) and 0 < v <= 1, "must lie in (0, 1]"),
    "eta_fraction": (lambda v: _is_num(v) and 0 < v < 1, "must lie in (0, 1)"),
    "eta": (lambda v: v is None or _interval_list(v), "must be null or a list of [lo, hi] intervals"),
    "eta_width": (lambda v: _num_list(v) and len(v) == 2 and 0 < v[0] <= v[1], "must be [min, max] widths"),
    "image_dir": (lambda v: v is None or isinstance(v, str), "must be null or a path"),
    "S": (lambda v: (_is_num(v) and v >= 1) or (_num_list(v) and min(v) >= 1),
          "must be a number >= 1 or a nonempty list of them"),
    "ct_S": (lambda v: _num_list(v) and min(v) > 0, "must be a nonempty list of positive numbers"),
    "repetitions": (lambda v: _is_int(v) and v >= 1, "must be a positive integer"),
    "K": (lambda v: isinstance(v, list) and len(v) > 0 and all(_is_int(k) and k >= 0 for k in v),
          "must be a nonempty list of nonnegative integers"),
    "l2": (lambda v: _is_num(v) and v >= 0, "must be a nonnegative number"),
    "max_epochs": (lambda v: _is_int(v) and v >= 1, "must be a positive integer"),
    "grad_tol": (lambda v: _is_num(v) and v > 0, "must be a positive number"),
    "augment": (lambda v: _is_int(v) and v >= 1, "must be a positive integer"),
}


def with_defaults(config: dict) -> dict:
    """Scenario defaults overlaid with ``config``; unknown keys are kept for validation to report."""
    scen = config.get("scenario")
    if scen not in DEFAULTS:
        return copy.deepcopy(config)
    out = copy.deepcopy(DEFAULTS[scen])
    out.update({"scenario": scen, "seed": 0, "output_dir": "rec-out"})
    for k, v in config.items():
        if k in SECTIONS and isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k].update(copy.deepcopy(v))
        else:
            out[k] = copy.deepcopy(v)
    return out


def validate(config: dict) -> list:
    """
    Schema and physical-sanity violations of a configuration, as
    "field.path: message" strings. An empty list means the config is valid.
    Defaults are applied first; the input is not modified.
    """
    v = []
    if not isinstance(config, dict):
        return ["<root>: configuration must be a JSON object"]
    scen = config.get("scenario")
    if scen not in SCENARIOS:
        return [f"scenario: must be one of {', '.join(SCENARIOS)} (got {scen!r})"]
    cfg = with_defaults(config)
    known = {"scenario", "methods", "seed", "output_dir", *SECTIONS}
    for k in cfg:
        if k not in known:
            v.append(f"{k}: unknown key")
    if not _is_int(cfg.get("seed")) or cfg["seed"] < 0:
        v.append("seed: must be a nonnegative integer")
    if not isinstance(cfg.get("output_dir"), str) or not cfg["output_dir"]:
        v.append("output_dir: must be a nonempty path")
    methods = cfg.get("methods")
    if not isinstance(methods, list) or not methods:
        v.append("methods: must be a nonempty list")
    else:
        for i, m in enumerate(methods):
            if m not in KINDS:
                v.append(f"methods[{i}]: unknown method {m!r}")
            elif m not in ALLOWED_METHODS[scen]:
                v.append(f"methods[{i}]: {m!r} is not available for scenario {scen}")
        if len(set(methods)) != len(methods):
            v.append("methods: duplicate entries")
    for sec in SECTIONS:
        body = cfg.get(sec)
        if not isinstance(body, dict):
            v.append(f"{sec}: must be an object")
            continue
        allowed = DEFAULTS[scen][sec]
        for k, val in body.items():
            if k not in allowed:
                v.append(f"{sec}.{k}: unknown key for scenario {scen}")
            elif k in _CHECKS and not _CHECKS[k][0](val):
                v.append(f"{sec}.{k}: {_CHECKS[k][1]} (got {val!r})")
    if v:
        return v
    return _physical_checks(cfg)


def _physical_checks(cfg: dict) -> list:
    scen = cfg["scenario"]
    ph, pr, sa, le = (cfg[s] for s in SECTIONS)
    v = []
    if "centroids" in ph:
        c = np.asarray(ph["centroids"], dtype=float)
        nq = ph.get("Q", ph.get("M"))
        key = "Q" if "Q" in ph else "M"
        if nq is not None and c.size != nq:
            v.append(f"physical.centroids: {key}={nq} needs {nq} centroids, got {c.size}")
        if c.size > 1:
            gap = float(np.min(np.diff(np.sort(c))))
            size = ph["sigma"] * (max(ph["alphas"]) if "alphas" in ph else ph["alpha"])
            if gap <= 0:
                v.append("physical.centroids: coincident centroids")
            elif size >= gap:
                v.append(f"physical.centroids: source size alpha*sigma = {size:g} must be below the "
                         f"smallest centroid gap {gap:g}")
        if "Lbig" in ph:
            half = ph["Lbig"] / 2
            size = ph["sigma"] * ph["alpha"]
            if np.any(np.abs(c) + size / 2 > half + 1e-12):
                v.append(f"physical.centroids: sources must lie within [-Lbig/2, Lbig/2] = [{-half:g}, {half:g}]")
    if scen == "two-point" and ph["xi"] <= 0:
        v.append("physical.xi: must be positive")
    if scen in ("general-source", "classify-qr"):
        lo, hi = ph["region"]
        if lo > -ph["L"] / 2 or hi < ph["L"] / 2:
            v.append("physical.region: must cover the source interval [-L/2, L/2]")
        if pr["eta_width"][1] >= ph["L"]:
            v.append("prior.eta_width: widths must be smaller than L")
    if scen == "face" and pr["image_dir"] is not None and not Path(pr["image_dir"]).is_dir():
        v.append(f"prior.image_dir: {pr['image_dir']!r} is not a directory")
    if "K" in le and "t_max" in ph and scen in ("classify-qr",):
        if max(le["K"]) >= ph["t_max"] + 1:
            v.append(f"learning.K: at most {ph['t_max']} for {ph['t_max']} pixels plus a sink")
    if scen == "discriminate" and not _is_num(sa["S"]):
        v.append("sampling.S: discriminate takes a single photon number")
    if scen == "discriminate" and max(le["K"]) > 1:
        v.append("learning.K: two hypotheses resolve at most eigentasks 0 and 1")
    return v


# ---------------------------------------------------------------- overrides

def load_config(path) -> dict:
    text = Path(path).read_text()
    try:
        cfg = json.loads(text)
    except json.JSONDecodeError as e:
        raise ConfigError([f"<file>: invalid JSON at line {e.lineno}: {e.msg}"]) from None
    return cfg


def apply_overrides(config: dict, overrides) -> dict:
    """
    Apply "dotted.path=value" overrides; values are parsed as JSON when
    possible and kept as strings otherwise.
    """
    cfg = copy.deepcopy(config)
    for item in overrides or ():
        if "=" not in item:
            raise ConfigError([f"--set {item!r}: expected key=value"])
        key, raw = item.split("=", 1)
        try:
            val = json.loads(raw)
        except json.JSONDecodeError:
            val = raw
        parts = key.strip().split(".")
        node = cfg
        for p in parts[:-1]:
            nxt = node.setdefault(p, {})
            if not isinstance(nxt, dict):
                raise ConfigError([f"{key}: {p} is not an object"])
            node = nxt
        node[parts[-1]] = val
    return cfg


# ----------------------------------------------------------------- manifest

def git_style_hash(data: bytes) -> str:
    """sha256 over a git-like blob header plus the content."""
    return hashlib.sha256(b"blob %d\0" % len(data) + data).hexdigest()


def canonical_json(obj) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"))


def stage_seed(master: int, stage: str) -> int:
    """Deterministic per-stage seed from the master seed and the stage name."""
    ss = np.random.SeedSequence([int(master), zlib.crc32(stage.encode())])
    return int(ss.generate_state(1, dtype=np.uint64)[0])


@dataclass
class RunManifest:
    config: dict
    input_hash: str
    seeds: dict = field(default_factory=dict)
    version: str = __version__
    constants: dict = field(default_factory=dict)
    timing: dict = field(default_factory=dict)
    artifacts: dict = field(default_factory=dict)
    environment: dict = field(default_factory=dict)

    def rng(self, stage: str) -> np.random.Generator:
        if stage not in self.seeds:
            self.seeds[stage] = stage_seed(self.config["seed"], stage)
        return np.random.default_rng(self.seeds[stage])

    def to_dict(self) -> dict:
        return {
            "config": self.config,
            "input_hash": self.input_hash,
            "seeds": dict(sorted(self.seeds.items())),
            "version": self.version,
            "constants": self.constants,
            "timing": self.timing,
            "artifacts": dict(sorted(self.artifacts.items())),
            "environment": self.environment,
        }


def _constants() -> dict:
    return {
        "BETA_CUTOFF": BETA_CUTOFF,
        "LAMBDA_FLOOR": LAMBDA_FLOOR,
        "D_FLOOR": D_FLOOR,
        "PIVOT_TOL": PIVOT_TOL,
        "CHOP_TOL": CHOP_TOL,
    }


def _image_files(image_dir) -> list:
    """(person, path) pairs in natural order of person folder and file name."""
    def key(p: Path):
        return [int(t) if t.isdigit() else t for t in re.split(r"(\d+)", p.name)]

    root = Path(image_dir)
    out = []
    for person in sorted((p for p in root.iterdir() if p.is_dir()), key=key):
        files = sorted((f for f in person.iterdir() if f.is_file()), key=key)
        if files:
            out.append((person.name, files))
    return out


def _input_hash(cfg: dict) -> str:
    # where the artifacts go does not change what they contain
    h = hashlib.sha256(canonical_json({k: v for k, v in cfg.items() if k != "output_dir"}).encode())
    img = cfg.get("prior", {}).get("image_dir")
    if cfg["scenario"] == "face" and img:
        for person, files in _image_files(img):
            for f in files:
                h.update(f"{person}/{f.name}".encode())
                h.update(git_style_hash(f.read_bytes()).encode())
    return h.hexdigest()


# ------------------------------------------------------------------- output

def _fmt(x) -> str:
    if isinstance(x, (bool, np.bool_)):
        return "1" if x else "0"
    if isinstance(x, (int, np.integer)):
        return str(int(x))
    if isinstance(x, (float, np.floating)):
        return repr(float(x))
    return str(x)


@dataclass
class Table:
    columns: tuple
    rows: list = field(default_factory=list)

    def add(self, *row):
        if len(row) != len(self.columns):
            raise ValueError(f"row of length {len(row)} for columns {self.columns}")
        self.rows.append(row)


def emit_plotdata(tables: dict, out_dir, manifest_hash: str) -> dict:
    """
    Write one CSV per table: a "# manifest=<hash>" line, a header row, then
    the rows. Floats are written with full round-trip precision and never
    pre-logged. Returns {name: path}.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    paths = {}
    for name, t in tables.items():
        buf = io.StringIO()
        buf.write(f"# manifest={manifest_hash}\n")
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(t.columns)
        for r in t.rows:
            w.writerow([_fmt(x) for x in r])
        p = out_dir / f"{name}.csv"
        p.write_text(buf.getvalue())
        paths[name] = p
    return paths


def _pmap(fn: Callable, items: list) -> list:
    """Order-preserving map, run in a process pool when REC_IMAGING_WORKERS > 1."""
    try:
        n = int(os.environ.get(WORKERS_ENV, "1"))
    except ValueError:
        n = 1
    if n <= 1 or len(items) <= 1:
        return [fn(it) for it in items]
    with ProcessPoolExecutor(max_workers=min(n, len(items))) as ex:
        return list(ex.map(fn, items))


# ------------------------------------------------------------ shared pieces

def _build(kind: str, psf: PsfModel, ph: dict, centroids, sizes) -> Povm:
    centroids = [float(c) for c in centroids]
    if kind == "direct":
        region = ph.get("region")
        if region is None:
            pad = 5.0 * psf.sigma
            region = [min(centroids) - pad, max(centroids) + pad]
        return build_direct_imaging(region, ph["t_max"], psf)
    if kind == "spade":
        return build_spade_single(psf, centroids[0], sizes[0], ph["l_max"])
    if kind == "separate-spade":
        return build_separate_spade(psf, centroids, sizes, ph["l_max"])
    if kind == "orthogonalized-spade":
        return build_orthogonalized_spade(psf, centroids, sizes, ph["l_max"])
    raise ValueError(f"method {kind!r} is not supported here")


def _spectrum_rows(tables, method, alpha, sp, S_list, with_ct=True):
    for k, (b, lam, c) in enumerate(zip(sp.beta_sq, sp.lam, sp.censored)):
        tables["beta"].add(method, alpha, k, b, lam, c)
    if with_ct:
        for S in S_list:
            tables["ct"].add(S, method, alpha, total_rec(sp, S))
    for k in range(min(EIGVEC_DUMP + 1, sp.R.shape[1])):
        for j, r in zip(sp.kept, sp.R[:, k]):
            tables["eigvec"].add(method, alpha, k, int(j), r)


def _spectrum_tables():
    return {
        "beta": Table(("method", "alpha", "k", "beta_sq", "lambda", "censored")),
        "ct": Table(("S", "method", "alpha", "C_T")),
        "eigvec": Table(("method", "alpha", "k", "outcome", "r")),
    }


def _check_row(tables, method, alpha, sp):
    R, d = sp.R, sp.d
    ortho = float(np.abs(R.T @ (d[:, None] * R) - np.eye(R.shape[1])).max())
    r0 = R[:, 0]
    tables["checks"].add(method, alpha, sp.beta_sq[0], float(np.ptp(r0) / np.abs(r0).max()), ortho,
                         sp.clamp_count)


# ---------------------------------------------------------------- scenarios

def two_point_beta1_exact(gamma: float, xi: float = 1.0, sigma: float = 1.0) -> float:
    """
    Closed-form beta_1^2 of binary SPADE for a two-point source whose
    separation has a zero-mean Gaussian prior of width gamma.
    """
    A = xi ** 2 + sigma ** 2
    g2 = gamma ** 2
    num = -math.sqrt(2) * xi * sigma * (g2 + 4 * A) + math.sqrt(A) * math.sqrt(g2 + 2 * A) * math.sqrt(A * (g2 + 4 * A))
    den = xi * sigma * (4 * math.sqrt(2) * xi ** 2 + math.sqrt(2) * (g2 + 4 * sigma ** 2)
                        - 4 * math.sqrt(A) * math.sqrt(g2 + 2 * A))
    return num / den


def two_point_ensemble(povm: Povm, gamma: float, nodes: int = 201, span: float = 8.0) -> PriorEnsemble:
    """
    Gauss-Legendre quadrature over separations l in [-span*gamma, span*gamma]
    weighted by exp(-l^2 / 2 gamma^2); each node is a pair of equal points at +-l/2.
    """
    x, w = np.polynomial.legendre.leggauss(nodes)
    ls = span * gamma * x
    wt = w * np.exp(-ls ** 2 / (2 * gamma ** 2))
    P = np.array([exact_probabilities(povm, Scene.points([-l / 2, l / 2])) for l in ls])
    return PriorEnsemble(P, wt)


def _run_two_point(cfg, man, tables):
    ph, pr, sa = cfg["physical"], cfg["prior"], cfg["sampling"]
    sigma, xi = ph["sigma"], ph["xi"]
    pv = build_binary_spade(sigma, xi, 0.0)
    tables.update(_spectrum_tables())
    tables["closed_form"] = Table(("gamma", "beta1_sq", "beta1_sq_exact", "beta1_sq_series", "rel_err"))
    for g in ph["gammas"]:
        sp = solve_spectrum(*build_dg(two_point_ensemble(pv, g, pr["quad_nodes"], pr["quad_span"])))
        a = g / sigma
        _spectrum_rows(tables, "binary-spade", a, sp, sa["S"])
        ex = two_point_beta1_exact(g, xi, sigma)
        tables["closed_form"].add(g, sp.beta_sq[1], ex, 8 / a ** 2 + 0.75 - a ** 2 / 64, sp.beta_sq[1] / ex - 1)


def _scaling_cell(args):
    kind, ph, centroids, sigma, N, d, g, alphas, S_list = args
    psf = PsfModel("gaussian", sigma)
    Q = len(centroids)
    # unit sizes of sigma keep alpha_ref = 1, so alpha below is L/sigma
    pv = _build(kind, psf, ph, centroids, [sigma] * Q)
    tensor = coefficient_tensor(pv, centroids, [sigma] * Q, N)
    return [(a, solve_spectrum(*build_dg_series(tensor, d, g, a, N))) for a in alphas]


def _run_scaling(cfg, man, tables):
    ph, pr, sa = cfg["physical"], cfg["prior"], cfg["sampling"]
    sigma = ph["sigma"]
    centroids = [ph["centroid"]] if "centroid" in ph else list(ph["centroids"])
    Q, N = len(centroids), pr["series_order"]
    gen = SceneGeneratorConfig(centroids=tuple(centroids), sizes=(1.0,) * Q, n_pixels=pr["N_max"])
    rng = man.rng("prior")
    X = [moments(generate_uniform_random_scene(gen, rng), N) for _ in range(pr["W"])]
    d, g = moment_stats(X, N)
    tables.update(_spectrum_tables())
    tables["slopes"] = Table(("method", "k", "slope", "n_points"))
    tables["checks"] = Table(("method", "alpha", "beta0_sq", "r0_spread", "RtDR_err", "clamped"))
    alphas = ph["alphas"]
    cells = [(m, ph, centroids, sigma, N, d, g, alphas, sa["S"]) for m in cfg["methods"]]
    for m, res in zip(cfg["methods"], _pmap(_scaling_cell, cells)):
        B = []
        for a, sp in res:
            _spectrum_rows(tables, m, a, sp, sa["S"])
            _check_row(tables, m, a, sp)
            B.append(sp.beta_sq)
        n = min(len(b) for b in B)
        B = np.array([b[:n] for b in B])
        for k in range(1, n):
            ok = int(np.sum(B[:, k] < BETA_CUTOFF))
            if ok == 0:
                continue
            try:
                s = float(scaling_fit(alphas, B[:, k])[0])
            except ValueError:
                s = math.nan
            tables["slopes"].add(m, k, s, ok)


def alternating_eta(L: float, widths, rng: np.random.Generator) -> list:
    """Alternating on/off blocks over [-L/2, L/2] with widths drawn uniformly from ``widths``."""
    edges = [-L / 2]
    while edges[-1] < L / 2:
        edges.append(edges[-1] + rng.uniform(*widths))
    edges[-1] = L / 2
    return [[edges[i], edges[i + 1]] for i in range(0, len(edges) - 1, 2)]


def random_pixel_eta(gen: SceneGeneratorConfig, fraction: float, rng: np.random.Generator) -> list:
    """Indicator covering a random ``fraction`` of each source's pixel cells."""
    eta = []
    for q in range(gen.Q):
        h = gen.sizes[q] / (2 * gen.n_pixels)
        for u, on in zip(gen.positions(q), rng.random(gen.n_pixels) < fraction):
            if on:
                eta.append([float(u - h), float(u + h)])
    return eta


def _two_case_configs(cfg, man):
    """Active and inactive generator configs of the two-case tasks."""
    ph, pr = cfg["physical"], cfg["prior"]
    if "L" in ph:
        base = dict(centroids=(0.0,), sizes=(ph["L"],), n_pixels=pr["n_pixels"], p0=pr["p0"])
        eta = pr["eta"] if pr["eta"] is not None else alternating_eta(ph["L"], pr["eta_width"], man.rng("eta"))
    else:
        size = ph["alpha"] * ph["sigma"]
        base = dict(centroids=tuple(ph["centroids"]), sizes=(size,) * len(ph["centroids"]),
                    n_pixels=pr["n_pixels"], p0=pr["p0"])
        eta = pr["eta"]
        if eta is None:
            eta = random_pixel_eta(SceneGeneratorConfig(**base), pr["eta_fraction"], man.rng("eta"))
    return [SceneGeneratorConfig(eta=tuple(map(tuple, eta)), case=c, **base) for c in ("active", "inactive")]


def _draw_scenes(gens, n_per_class, rng):
    scenes = [generate_scene(gc, rng) for gc in gens for _ in range(n_per_class)]
    return scenes, np.repeat(np.arange(len(gens)), n_per_class)


def _hyper(le) -> TrainConfig:
    return TrainConfig(l2=le["l2"], max_epochs=le["max_epochs"], grad_tol=le["grad_tol"])


def _sweep_cell(args):
    """Spectrum plus K sweep of one method on shared training scenes."""
    kind, ph, centroids, sizes, train, labels, gens, w_test, K, S_list, reps, hyper, seed = args
    psf = PsfModel("gaussian", ph["sigma"])
    pv = _build(kind, psf, ph, centroids, sizes)
    Ptr = np.array([exact_probabilities(pv, s) for s in train])
    sp = solve_spectrum(*build_dg(PriorEnsemble(Ptr)))

    def make_test(rng):
        scenes, y = _draw_scenes(gens, w_test, rng)
        return np.array([exact_probabilities(pv, s) for s in scenes]), y

    K = [k for k in K if k < sp.R.shape[1]]
    res = run_k_sweep(sp, Ptr, labels, make_test, K, S_list, reps, np.random.default_rng(seed), hyper, kind)
    return sp, res


def _sweep_tables(tables):
    tables.update(_spectrum_tables())
    tables["accuracy"] = Table(("method", "K", "S", "repetition", "accuracy"))
    tables["accuracy_summary"] = Table(("method", "K", "S", "mean", "min", "max"))
    tables["peaks"] = Table(("method", "S", "peak_K", "peak_mean", "C_T", "floor_C_T"))


def _record_sweep(tables, method, alpha, sp, res, ct_S):
    _spectrum_rows(tables, method, alpha, sp, ct_S)
    for K, S, rep, acc in res.records:
        tables["accuracy"].add(method, K, S, rep, acc)
    for K, S, mean, lo, hi in res.summary():
        tables["accuracy_summary"].add(method, K, S, mean, lo, hi)
    for S in sorted({r[1] for r in res.records}):
        _, m = res.mean_curve(S)
        c = total_rec(sp, S)
        tables["peaks"].add(method, S, res.peak_K(S), float(m.max()), c, math.floor(c))


def _run_two_case(cfg, man, tables, spectrum_only=False):
    ph, pr, sa, le = (cfg[s] for s in SECTIONS)
    gens = _two_case_configs(cfg, man)
    train, labels = _draw_scenes(gens, pr["W"], man.rng("train"))
    if "L" in ph:
        centroids, sizes, alpha = [0.0], [ph["L"]], ph["L"] / ph["sigma"]
    else:
        centroids, sizes, alpha = ph["centroids"], [ph["alpha"] * ph["sigma"]] * len(ph["centroids"]), ph["alpha"]
    if spectrum_only:
        tables.update(_spectrum_tables())
        for m in cfg["methods"]:
            pv = _build(m, PsfModel("gaussian", ph["sigma"]), ph, centroids, sizes)
            sp = solve_spectrum(*build_dg(PriorEnsemble([exact_probabilities(pv, s) for s in train])))
            _spectrum_rows(tables, m, alpha, sp, sa["S"])
        return
    _sweep_tables(tables)
    S_list = sa["S"] if isinstance(sa["S"], list) else [sa["S"]]
    cells = [(m, ph, centroids, sizes, train, labels, gens, pr["w_test"], le["K"], S_list, sa["repetitions"],
              _hyper(le), man.rng(f"test/{m}").integers(2 ** 63)) for m in cfg["methods"]]
    for m, (sp, res) in zip(cfg["methods"], _pmap(_sweep_cell, cells)):
        _record_sweep(tables, m, alpha, sp, res, sa["ct_S"])


def _face_cell(args):
    """Per repetition: fresh train/test split (or fresh synthetic draws), spectrum, K sweep."""
    kind, ph, sizes, classes, w_train, w_test, K, S_list, reps, hyper, seed = args
    psf = PsfModel("gaussian", ph["sigma"])
    centroids = ph["centroids"]
    pv = _build(kind, psf, ph, centroids, sizes)
    rng = np.random.default_rng(seed)
    cache = {}

    def probs(item):
        key = id(item)
        if key not in cache:
            scene = item if isinstance(item, Scene) else ingest_raster_image(item, len(centroids), centroids, sizes[0], uneven=True)
            cache[key] = exact_probabilities(pv, scene)
        return cache[key]

    records, spectra = [], []
    for rep in range(reps):
        tr, te, ytr, yte = [], [], [], []
        for c, source in enumerate(classes):
            if isinstance(source, SceneGeneratorConfig):
                tr += [generate_scene(source, rng) for _ in range(w_train)]
                te += [generate_scene(source, rng) for _ in range(w_test)]
            else:
                idx = rng.permutation(len(source))
                tr += [source[i] for i in idx[:w_train]]
                te += [source[i] for i in idx[w_train:w_train + w_test]]
            ytr += [c] * w_train
            yte += [c] * w_test
        Ptr = np.array([probs(s) for s in tr])
        Pte = np.array([probs(s) for s in te])
        sp = solve_spectrum(*build_dg(PriorEnsemble(Ptr)))
        Ks = [k for k in K if k < sp.R.shape[1]]
        res = run_k_sweep(sp, Ptr, np.array(ytr), lambda r: (Pte, np.array(yte)), Ks, S_list, 1, rng, hyper, kind)
        records += [(k, S, rep, acc) for k, S, _, acc in res.records]
        spectra.append(sp)
        if isinstance(classes[0], SceneGeneratorConfig):
            cache.clear()
    return spectra, records


def _run_face(cfg, man, tables):
    ph, pr, sa, le = (cfg[s] for s in SECTIONS)
    size = ph["alpha"] * ph["sigma"]
    sizes = [size] * len(ph["centroids"])
    if pr["image_dir"]:
        people = _image_files(pr["image_dir"])[: pr["n_person"]]
        need = pr["w_train"] + pr["w_test"]
        short = [p for p, f in people if len(f) < need]
        if len(people) < 2 or short:
            raise RuntimeError(f"image_dir needs >= 2 people with >= {need} images each (short: {short})")
        classes = [[str(f) for f in files] for _, files in people]
    else:
        rng = man.rng("classes")
        base = SceneGeneratorConfig(centroids=tuple(ph["centroids"]), sizes=tuple(sizes),
                                    n_pixels=pr["n_pixels"], p0=pr["p0"])
        classes = [
            SceneGeneratorConfig(centroids=base.centroids, sizes=base.sizes, n_pixels=base.n_pixels, p0=base.p0,
                                 eta=tuple(map(tuple, random_pixel_eta(base, pr["eta_fraction"], rng))),
                                 case="active")
            for _ in range(pr["n_person"])
        ]
    _sweep_tables(tables)
    S_list = sa["S"]
    cells = [(m, ph, sizes, classes, pr["w_train"], pr["w_test"], le["K"], S_list, sa["repetitions"],
              _hyper(le), man.rng(f"split/{m}").integers(2 ** 63)) for m in cfg["methods"]]

    for m, (spectra, records) in zip(cfg["methods"], _pmap(_face_cell, cells)):
        res = SweepResult(m, records)
        # the first split's spectrum stands for the method in the beta/C_T tables
        _record_sweep(tables, m, ph["alpha"], spectra[0], res, sa["ct_S"])


def one_vs_two_points(povm: Povm, separation: float, centroid: float = 0.0):
    """Outcome probabilities of one point at the centroid and of two equal points +-separation/2 around it."""
    p0 = exact_probabilities(povm, Scene.points([centroid]))
    p1 = exact_probabilities(povm, Scene.points([centroid - separation / 2, centroid + separation / 2]))
    return p0, p1


def _disc_cell(args):
    kind, ph, S, reps, le, seed = args
    psf = PsfModel("gaussian", ph["sigma"])
    d_sep = ph["d_sep"]
    pv = _build(kind, psf, ph, [0.0], [d_sep])
    rng = np.random.default_rng(seed)
    rows = error_exponent_scan(lambda a: one_vs_two_points(pv, a * d_sep), ph["alphas"], S, reps, rng, kind)
    learned = []
    hyper = _hyper(le)
    for a in ph["alphas"]:
        p0, p1 = one_vs_two_points(pv, a * d_sep)
        sp = solve_spectrum(*build_dg(PriorEnsemble([p0, p1])))
        xi = eigentask_values(sp, np.array([p0, p1]))
        scale = np.array([eigentask_standard_error(sp.R, p[sp.kept], S) for p in (p0, p1)])
        best = 0.0
        for K in [k for k in le["K"] if k < sp.R.shape[1]]:
            X, y = [], []
            for c in range(2):
                Xc, _ = augment_features(xi[c, : K + 1], scale[c, : K + 1], le["augment"], rng)
                X.append(Xc)
                y.append(np.full(le["augment"], c))
            ds = TaskDataset(np.concatenate(X), np.concatenate(y))
            sc = fit_scaler(ds)
            model = train_softmax(ds, sc, hyper)
            correct = 0
            for _ in range(reps):
                for c, p in enumerate((p0, p1)):
                    f = eigentask_values(sp, empirical_probs(sample_counts(p, S, rng)))[: K + 1]
                    correct += int(predict(model, sc, f)[0] == c)
            acc = correct / (2 * reps)
            learned.append((a, K, acc))
            best = max(best, acc)
        learned.append((a, -1, best))
    return rows, learned


def _run_discriminate(cfg, man, tables):
    ph, sa, le = cfg["physical"], cfg["sampling"], cfg["learning"]
    S = int(sa["S"])
    tables["discrimination"] = Table(("method", "alpha", "S", "P_succ_mean", "varsigma", "chernoff_C",
                                      "chernoff_P_succ"))
    tables["learned"] = Table(("method", "alpha", "S", "K", "P_succ"))
    tables["exponent_slopes"] = Table(("method", "quantity", "slope", "n_points"))
    cells = [(m, ph, S, sa["repetitions"], le, man.rng(f"mc/{m}").integers(2 ** 63)) for m in cfg["methods"]]
    for m, (rows, learned) in zip(cfg["methods"], _pmap(_disc_cell, cells)):
        for r in rows:
            tables["discrimination"].add(m, r.alpha, r.S, r.P_succ_mean, r.varsigma, r.chernoff_C,
                                         1.0 - math.exp(-S * r.chernoff_C))
        for a, K, acc in learned:
            tables["learned"].add(m, a, S, "peak" if K < 0 else K, acc)
        a = np.array([r.alpha for r in rows])
        for q, vals in (("chernoff_C", [r.chernoff_C for r in rows]), ("varsigma", [r.varsigma for r in rows])):
            v = np.array(vals)
            ok = np.isfinite(v) & (v > 0)
            s = float(np.polyfit(np.log(a[ok]), np.log(v[ok]), 1)[0]) if ok.sum() >= 2 else math.nan
            tables["exponent_slopes"].add(m, q, s, int(ok.sum()))


_RUNNERS = {
    "two-point": _run_two_point,
    "single-source": _run_scaling,
    "multi-source": _run_scaling,
    "general-source": lambda c, m, t: _run_two_case(c, m, t, spectrum_only=True),
    "classify-qr": _run_two_case,
    "classify-multisource": _run_two_case,
    "face": _run_face,
    "discriminate": _run_discriminate,
}


@dataclass
class RunResult:
    paths: dict
    manifest: RunManifest
    tables: dict


def run(config: dict, output_dir: Optional[str] = None) -> RunResult:
    """
    Validate ``config``, run its scenario and write the CSV tables plus
    manifest.json into the output directory.
    """
    cfg = with_defaults(config)
    if output_dir is not None:
        cfg["output_dir"] = str(output_dir)
    problems = validate(cfg)
    if problems:
        raise ConfigError(problems)
    man = RunManifest(config=cfg, input_hash=_input_hash(cfg), constants=_constants(),
                      environment={"python": platform.python_version(), "numpy": np.__version__})
    tables: dict = {}
    t0 = time.perf_counter()
    _RUNNERS[cfg["scenario"]](cfg, man, tables)
    man.timing["run_seconds"] = time.perf_counter() - t0
    out = Path(cfg["output_dir"])
    paths = emit_plotdata(tables, out, man.input_hash)
    man.artifacts = {n: git_style_hash(p.read_bytes()) for n, p in paths.items()}
    mpath = out / "manifest.json"
    mpath.write_text(json.dumps(man.to_dict(), indent=2, sort_keys=True) + "\n")
    paths["manifest"] = mpath
    return RunResult(paths, man, tables)
