import numpy as np
import pytest

from recimaging.learn import (
    ClassifierModel,
    FeatureScaler,
    TaskDataset,
    TrainConfig,
    fit_scaler,
    predict,
    predict_proba,
    run_k_sweep,
    softmax_loss_grad,
    train_softmax,
)
from recimaging.rec import PriorEnsemble, build_dg, eigentask_values, solve_spectrum


def toy_dataset():
    x = np.array([-1.0, -1.0, -1.0, 1.0, 1.0, 1.0])
    return TaskDataset(np.column_stack([np.ones(6), x]), np.array([0, 0, 0, 1, 1, 1]))


def numerical_grad(f, x, h=1e-6):
    g = np.zeros_like(x)
    it = np.nditer(x, flags=["multi_index"])
    for _ in it:
        i = it.multi_index
        xp, xm = x.copy(), x.copy()
        xp[i] += h
        xm[i] -= h
        g[i] = (f(xp) - f(xm)) / (2 * h)
    return g


class TestScaler:
    def test_mean_abs(self):
        ds = TaskDataset([[2.0, -2.0], [2.0, -2.0]], [0, 1])
        np.testing.assert_allclose(fit_scaler(ds).scale, [2.0, 2.0])

    def test_self_application(self):
        rng = np.random.default_rng(42)
        ds = TaskDataset(rng.standard_normal((30, 4)), rng.integers(0, 2, 30))
        sc = fit_scaler(ds)
        np.testing.assert_allclose(np.mean(np.abs(sc.apply(ds.features)), axis=0), 1.0, rtol=1e-12)

    def test_zero_component_flagged(self):
        ds = TaskDataset([[1.0, 0.0], [3.0, 0.0]], [0, 1])
        with pytest.warns(UserWarning, match="identically zero"):
            sc = fit_scaler(ds)
        np.testing.assert_array_equal(sc.scale, [2.0, 1.0])
        np.testing.assert_array_equal(sc.flagged, [False, True])

    def test_empty(self):
        with pytest.raises(ValueError):
            fit_scaler(TaskDataset(np.zeros((0, 2)), np.zeros(0)))

    def test_length_mismatch(self):
        sc = FeatureScaler(np.ones(3), np.zeros(3, bool))
        with pytest.raises(ValueError):
            sc.apply(np.ones(2))


class TestGradient:
    @pytest.mark.parametrize("seed", range(10))
    def test_central_difference(self, seed):
        rng = np.random.default_rng(seed)
        n, d, C = 12, 4, 3
        X = rng.standard_normal((n, d))
        Y = np.eye(C)[rng.integers(0, C, n)]
        W = rng.standard_normal((C, d))
        b = rng.standard_normal(C)
        l2 = 1e-2
        _, gW, gb = softmax_loss_grad(W, b, X, Y, l2)
        nW = numerical_grad(lambda w: softmax_loss_grad(w, b, X, Y, l2)[0], W)
        nb = numerical_grad(lambda v: softmax_loss_grad(W, v, X, Y, l2)[0], b)
        a = np.concatenate([gW.ravel(), gb])
        f = np.concatenate([nW.ravel(), nb])
        rel = np.abs(a - f) / np.maximum(np.abs(a) + np.abs(f), 1e-8)
        assert rel.max() < 1e-5


class TestTraining:
    def test_separable_toy(self):
        ds = toy_dataset()
        sc = fit_scaler(ds)
        m = train_softmax(ds, sc)
        pred, _ = predict(m, sc, ds.features)
        np.testing.assert_array_equal(pred, ds.labels)

    def test_deterministic(self):
        rng = np.random.default_rng(42)
        ds = TaskDataset(rng.standard_normal((40, 3)), rng.integers(0, 3, 40))
        sc = fit_scaler(ds)
        a, b = train_softmax(ds, sc), train_softmax(ds, sc)
        np.testing.assert_array_equal(a.W, b.W)
        np.testing.assert_array_equal(a.b, b.b)

    def test_label_permutation(self):
        rng = np.random.default_rng(7)
        X = rng.standard_normal((60, 3))
        y = rng.integers(0, 3, 60)
        perm = np.array([2, 0, 1])
        ds1, ds2 = TaskDataset(X, y), TaskDataset(X, perm[y])
        sc = fit_scaler(ds1)
        m1, m2 = train_softmax(ds1, sc), train_softmax(ds2, sc)
        np.testing.assert_allclose(m2.W[perm], m1.W, atol=1e-6)
        p1, _ = predict(m1, sc, X)
        p2, _ = predict(m2, sc, X)
        assert np.mean(p1 == y) == np.mean(p2 == perm[y])

    def test_loss_decreases(self):
        rng = np.random.default_rng(1)
        X = rng.standard_normal((50, 3))
        y = (X[:, 0] + 0.5 * rng.standard_normal(50) > 0).astype(int)
        ds = TaskDataset(X, y)
        sc = fit_scaler(ds)
        losses = [train_softmax(ds, sc, TrainConfig(max_epochs=e)).final_loss for e in (0, 1, 5, 20, 100)]
        assert all(b <= a for a, b in zip(losses, losses[1:]))

    def test_converges(self):
        ds = toy_dataset()
        m = train_softmax(ds, fit_scaler(ds), TrainConfig(max_epochs=20000))
        assert m.grad_norm < 1e-6

    def test_single_class(self):
        ds = TaskDataset([[1.0], [2.0]], [0, 0])
        with pytest.raises(ValueError):
            train_softmax(ds, fit_scaler(ds))

    def test_nonfinite_features(self):
        ds = TaskDataset([[1.0], [np.inf]], [0, 1])
        sc = FeatureScaler(np.ones(1), np.zeros(1, bool))
        with pytest.raises(ValueError):
            train_softmax(ds, sc)


class TestPredict:
    def _zero_model(self, d=2):
        return ClassifierModel(np.zeros((2, d)), np.zeros(2), np.array([0, 1]), 0, 0.0, 0.0, TrainConfig())

    def test_tie_goes_to_lowest(self):
        sc = FeatureScaler(np.ones(2), np.zeros(2, bool))
        cls, p = predict(self._zero_model(), sc, np.array([0.3, -1.0]))
        assert cls == 0
        np.testing.assert_allclose(p, [0.5, 0.5])

    def test_probabilities_sum_to_one(self):
        ds = toy_dataset()
        sc = fit_scaler(ds)
        m = train_softmax(ds, sc)
        p = predict_proba(m, sc, np.random.default_rng(0).standard_normal((10, 2)))
        np.testing.assert_allclose(p.sum(axis=1), 1.0, atol=1e-12)

    def test_joint_rescaling(self):
        rng = np.random.default_rng(3)
        ds = TaskDataset(rng.standard_normal((30, 3)), rng.integers(0, 3, 30))
        sc = fit_scaler(ds)
        m = train_softmax(ds, sc)
        xi = rng.standard_normal(3)
        c = np.array([1.0, 7.5, 1.0])
        sc2 = FeatureScaler(sc.scale * c, sc.flagged)
        assert predict(m, sc, xi)[0] == predict(m, sc2, xi * c)[0]

    def test_length_mismatch(self):
        sc = FeatureScaler(np.ones(3), np.zeros(3, bool))
        with pytest.raises(ValueError):
            predict(self._zero_model(2), sc, np.ones(3))


class TestSweep:
    def _setup(self):
        rng = np.random.default_rng(42)
        protos = rng.dirichlet(np.ones(6), size=3)
        labels = np.repeat(np.arange(3), 10)
        P = np.array([rng.dirichlet(200 * protos[c]) for c in labels])
        sp = solve_spectrum(*build_dg(PriorEnsemble(P)))
        return rng, protos, P, labels, sp

    def test_records_and_summary(self):
        rng, protos, P, labels, sp = self._setup()

        def make_test(r):
            y = np.repeat(np.arange(3), 4)
            return np.array([r.dirichlet(200 * protos[c]) for c in y]), y

        res = run_k_sweep(sp, P, labels, make_test, [0, 2, 4], [1e2, 1e6], 3, rng, method="toy")
        assert len(res.records) == 3 * 2 * 3
        summ = res.summary()
        assert len(summ) == 6
        for K, S, mean, lo, hi in summ:
            assert lo <= mean <= hi
        Ks, m = res.mean_curve(1e6)
        np.testing.assert_array_equal(Ks, [0, 2, 4])
        assert res.peak_K(1e6) in (2, 4)
        # K = 0 only sees the constant task: chance level
        assert m[0] <= 0.5

    def test_noiseless_more_features_help_on_train(self):
        _, _, P, labels, sp = self._setup()
        xi = eigentask_values(sp, P)
        acc = []
        for K in (0, 4):
            ds = TaskDataset(xi[:, : K + 1], labels)
            sc = fit_scaler(ds)
            pred, _ = predict(train_softmax(ds, sc), sc, ds.features)
            acc.append(np.mean(pred == labels))
        assert acc[1] >= acc[0]

    def test_K_too_large(self):
        rng, _, P, labels, sp = self._setup()
        with pytest.raises(ValueError):
            run_k_sweep(sp, P, labels, lambda r: (P, labels), [10], [1e3], 1, rng)
