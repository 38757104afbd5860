"""
Softmax regression on truncated eigentask features.

Models are trained on noiseless eigentasks and tested on eigentasks
estimated from sampled counts, so the truncation order K trades signal
against sampling noise.
"""
from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .rec import RecSpectrum, eigentask_values
from .sampling import empirical_probs, sample_counts


@dataclass(frozen=True, eq=False)
class TaskDataset:
    features: np.ndarray
    labels: np.ndarray

    def __post_init__(self):
        X = np.atleast_2d(np.asarray(self.features, dtype=float))
        y = np.asarray(self.labels)
        if X.shape[0] != y.shape[0]:
            raise ValueError("one label per feature vector expected")
        object.__setattr__(self, "features", X)
        object.__setattr__(self, "labels", y)

    @property
    def K(self) -> int:
        return self.features.shape[1] - 1


@dataclass(frozen=True, eq=False)
class FeatureScaler:
    scale: np.ndarray
    flagged: np.ndarray

    def apply(self, X) -> np.ndarray:
        X = np.asarray(X, dtype=float)
        if X.shape[-1] != self.scale.size:
            raise ValueError(f"expected {self.scale.size} features, got {X.shape[-1]}")
        return X / self.scale


def fit_scaler(train: TaskDataset) -> FeatureScaler:
    """Per-component mean absolute value; all-zero components get scale 1."""
    X = train.features
    if X.shape[0] == 0:
        raise ValueError("cannot fit a scaler on an empty set")
    s = np.mean(np.abs(X), axis=0)
    flagged = ~(s > 0)
    if flagged.any():
        warnings.warn(f"features {np.flatnonzero(flagged).tolist()} are identically zero")
    return FeatureScaler(np.where(flagged, 1.0, s), flagged)


@dataclass(frozen=True)
class TrainConfig:
    l2: float = 1e-4
    max_epochs: int = 5000
    grad_tol: float = 1e-6
    step0: float = 1.0
    armijo: float = 1e-4
    seed: int = 0


@dataclass(frozen=True, eq=False)
class ClassifierModel:
    W: np.ndarray
    b: np.ndarray
    classes: np.ndarray
    epochs: int
    final_loss: float
    grad_norm: float
    hyper: TrainConfig


def _log_softmax(Z: np.ndarray) -> np.ndarray:
    m = Z.max(axis=1, keepdims=True)
    return Z - m - np.log(np.exp(Z - m).sum(axis=1, keepdims=True))


def softmax_loss_grad(W, b, X, Y, l2: float):
    """
    Mean cross-entropy plus (l2/2)|W|^2 and its gradient.

    ``Y`` is the one-hot label matrix (n, C); W is (C, d), b is (C,).
    """
    Z = X @ W.T + b
    logp = _log_softmax(Z)
    n = X.shape[0]
    loss = -np.sum(Y * logp) / n + 0.5 * l2 * np.sum(W * W)
    E = (np.exp(logp) - Y) / n
    return loss, E.T @ X + l2 * W, E.sum(axis=0)


def train_softmax(train: TaskDataset, scaler: FeatureScaler, hyper: TrainConfig = TrainConfig()) -> ClassifierModel:
    """
    Full-batch gradient descent with Armijo backtracking from zero weights.

    The trial step is the Barzilai-Borwein step s.s / s.y from the last
    move (twice the last accepted step when s.y <= 0), then halved until the
    Armijo condition holds, so the loss decreases monotonically without a
    hand-tuned learning rate.
    """
    X = scaler.apply(train.features)
    if not np.all(np.isfinite(X)):
        raise ValueError("scaled features are not finite")
    classes, y = np.unique(train.labels, return_inverse=True)
    if classes.size < 2:
        raise ValueError("training set needs at least two classes")
    Y = np.eye(classes.size)[y]
    W = np.zeros((classes.size, X.shape[1]))
    b = np.zeros(classes.size)
    loss, gW, gb = softmax_loss_grad(W, b, X, Y, hyper.l2)
    step = hyper.step0
    epoch = 0
    gnorm = math.sqrt(np.sum(gW * gW) + np.sum(gb * gb))
    while epoch < hyper.max_epochs and gnorm >= hyper.grad_tol:
        while True:
            Wn, bn = W - step * gW, b - step * gb
            ln, gWn, gbn = softmax_loss_grad(Wn, bn, X, Y, hyper.l2)
            if not math.isfinite(ln):
                raise FloatingPointError(f"loss diverged at step size {step}")
            if ln <= loss - hyper.armijo * step * gnorm * gnorm:
                break
            step *= 0.5
            if step < 1e-20:
                break
        if step < 1e-20:
            break
        # s = -step * g, y = g_new - g
        sy = -step * (np.sum(gW * (gWn - gW)) + np.sum(gb * (gbn - gb)))
        ss = step * step * gnorm * gnorm
        W, b, loss, gW, gb = Wn, bn, ln, gWn, gbn
        gnorm = math.sqrt(np.sum(gW * gW) + np.sum(gb * gb))
        epoch += 1
        step = min(ss / sy if sy > 0 else 2.0 * step, 1e6)
    return ClassifierModel(W, b, classes, epoch, float(loss), gnorm, hyper)


def predict_proba(model: ClassifierModel, scaler: FeatureScaler, xi) -> np.ndarray:
    X = np.atleast_2d(scaler.apply(xi))
    if X.shape[1] != model.W.shape[1]:
        raise ValueError("feature length does not match the model")
    return np.exp(_log_softmax(X @ model.W.T + model.b))


def predict(model: ClassifierModel, scaler: FeatureScaler, xi):
    """
    Class ids and probabilities; ties go to the lowest class id.

    Returns a scalar class for a single feature vector.
    """
    p = predict_proba(model, scaler, xi)
    idx = np.argmax(p, axis=1)  # first maximum wins
    cls = model.classes[idx]
    if np.ndim(xi) == 1:
        return cls[0], p[0]
    return cls, p


@dataclass
class SweepResult:
    """Per-repetition accuracies and their (K, S) summary."""

    method: str
    records: list = field(default_factory=list)  # (K, S, repetition, accuracy)

    def summary(self) -> list:
        out = {}
        for K, S, _, acc in self.records:
            out.setdefault((K, S), []).append(acc)
        return [
            (K, S, float(np.mean(v)), float(np.min(v)), float(np.max(v)))
            for (K, S), v in sorted(out.items(), key=lambda kv: (kv[0][1], kv[0][0]))
        ]

    def mean_curve(self, S) -> tuple:
        rows = [r for r in self.summary() if r[1] == S]
        return np.array([r[0] for r in rows]), np.array([r[2] for r in rows])

    def peak_K(self, S) -> int:
        Ks, m = self.mean_curve(S)
        return int(Ks[np.argmax(m)])


def run_k_sweep(
    spectrum: RecSpectrum,
    train_P: np.ndarray,
    train_labels,
    make_test: Callable[[np.random.Generator], tuple],
    K_list: Sequence[int],
    S_list: Sequence[float],
    repetitions: int,
    rng: np.random.Generator,
    hyper: TrainConfig = TrainConfig(),
    method: str = "",
) -> SweepResult:
    """
    Success probability over truncation orders K and photon budgets S.

    One model per K is trained on noiseless eigentasks of ``train_P``.
    Each repetition calls ``make_test(rng)`` for fresh test scenes
    (probability vectors and labels) and draws fresh counts for every S.
    """
    K_list = [int(k) for k in K_list]
    n_eig = spectrum.R.shape[1]
    if max(K_list) >= n_eig:
        raise ValueError(f"K up to {max(K_list)} requested but only {n_eig} eigentasks exist")
    xi_train = eigentask_values(spectrum, train_P)
    models = {}
    for K in K_list:
        ds = TaskDataset(xi_train[:, : K + 1], np.asarray(train_labels))
        sc = fit_scaler(ds)
        models[K] = (train_softmax(ds, sc, hyper), sc)
    res = SweepResult(method)
    for rep in range(repetitions):
        test_P, test_labels = make_test(rng)
        test_labels = np.asarray(test_labels)
        for S in S_list:
            P_hat = np.array([empirical_probs(sample_counts(p, int(S), rng)) for p in test_P])
            xi = eigentask_values(spectrum, P_hat)
            for K in K_list:
                model, sc = models[K]
                pred, _ = predict(model, sc, xi[:, : K + 1])
                res.records.append((K, S, rep, float(np.mean(pred == test_labels))))
    return res
