import math
from collections import Counter

import numpy as np
import pytest

from dsf.config import ExperimentConfig
from dsf.evaluation import EmbeddingTable, EvaluationError, default_k, knn_eval, linear_probe
from dsf.experiments import run_experiment
from dsf.training import generate_dataset
from dsf.vmf import as_unit


def table(rng, n, p, n_classes=10, split="train"):
    return EmbeddingTable(as_unit(rng.standard_normal((n, p))), np.arange(n) % n_classes, split)


def brute_force_knn(train, test, k):
    correct = 0
    for q, label in zip(test.embeddings, test.labels):
        sims = train.embeddings @ q
        order = sorted(range(len(sims)), key=lambda i: (-sims[i], i))[:k]
        votes = Counter(int(train.labels[i]) for i in order)
        best = max(votes.values())
        correct += min(c for c, v in votes.items() if v == best) == label
    return correct / len(test)


def clustered(rng, n_classes=10, n=500, p=8, kappa_noise=0.05):
    centers = as_unit(rng.standard_normal((n_classes, p)))
    labels = np.arange(n) % n_classes
    return as_unit(centers[labels] + kappa_noise * rng.standard_normal((n, p))), labels


class TestEmbeddingTable:
    def test_rejects_non_unit_rows(self):
        with pytest.raises(EvaluationError):
            EmbeddingTable(np.ones((2, 3)), [0, 1])

    def test_rejects_length_mismatch(self):
        with pytest.raises(EvaluationError):
            EmbeddingTable(np.eye(3), [0, 1])

    def test_csv_round_trip(self, tmp_path):
        t = table(np.random.default_rng(0), 20, 5)
        t.to_csv(tmp_path / "t.csv")
        back = EmbeddingTable.from_csv(tmp_path / "t.csv")
        np.testing.assert_array_equal(back.embeddings, t.embeddings)
        np.testing.assert_array_equal(back.labels, t.labels)

    def test_csv_errors(self, tmp_path):
        (tmp_path / "empty.csv").write_text("")
        with pytest.raises(EvaluationError):
            EmbeddingTable.from_csv(tmp_path / "empty.csv")
        (tmp_path / "bad.csv").write_text("0,1.0,0.0\nx,0.0,1.0\n")
        with pytest.raises(EvaluationError, match=":2:"):
            EmbeddingTable.from_csv(tmp_path / "bad.csv")


class TestKnn:
    def test_self_match(self):
        t = table(np.random.default_rng(1), 300, 8)
        assert knn_eval(t, t, k=1) == 1.0

    @pytest.mark.parametrize("k", [1, 4, 15])
    def test_matches_brute_force(self, k):
        rng = np.random.default_rng(k)
        x, y = clustered(rng, 5, 200, 6, kappa_noise=0.8)
        train = EmbeddingTable(x[:150], y[:150])
        test = EmbeddingTable(x[150:], y[150:], "test")
        assert knn_eval(train, test, k) == brute_force_knn(train, test, k)

    def test_permuted_labels_near_chance(self):
        rng = np.random.default_rng(2)
        x, y = clustered(rng, 10, 2000, 8)
        accs = []
        for _ in range(20):
            perm = rng.permutation(y)
            accs.append(knn_eval(EmbeddingTable(x[:1500], perm[:1500]), EmbeddingTable(x[1500:], perm[1500:]), 50))
        assert abs(np.mean(accs) - 0.1) <= 0.03

    def test_separated_clusters(self):
        ds = generate_dataset(10, 1000, 16, 1e5, seed=0)
        t = EmbeddingTable(ds.points, ds.labels)
        assert knn_eval(EmbeddingTable(ds.points[:800], ds.labels[:800]), EmbeddingTable(ds.points[800:], ds.labels[800:]), 50) == 1.0
        assert knn_eval(t, t) == 1.0

    def test_vote_tie_goes_to_smaller_class(self):
        train = EmbeddingTable(np.array([[1.0, 0.0], [0.0, 1.0]]), [3, 1])
        test = EmbeddingTable(as_unit(np.array([[0.9, 0.1]])), [1], "test")
        assert knn_eval(train, test, k=2) == 1.0

    def test_rotation_invariance(self):
        rng = np.random.default_rng(3)
        x, y = clustered(rng, 10, 600, 8, kappa_noise=0.7)
        q, _ = np.linalg.qr(rng.standard_normal((8, 8)))
        a = knn_eval(EmbeddingTable(x[:400], y[:400]), EmbeddingTable(x[400:], y[400:]), 20)
        xr = as_unit(x @ q.T)
        b = knn_eval(EmbeddingTable(xr[:400], y[:400]), EmbeddingTable(xr[400:], y[400:]), 20)
        assert a == b

    def test_default_k(self):
        assert default_k(4000) == 200
        assert default_k(500) == 50
        assert default_k(3) == 1

    def test_errors(self):
        t = table(np.random.default_rng(0), 10, 3)
        with pytest.raises(EvaluationError):
            knn_eval(t, t, k=11)
        with pytest.raises(EvaluationError):
            knn_eval(EmbeddingTable(np.empty((0, 3)), []), t)


class TestLinearProbe:
    def test_separable_training_accuracy(self):
        rng = np.random.default_rng(4)
        x, y = clustered(rng, 4, 400, 6, kappa_noise=0.05)
        t = EmbeddingTable(x, y)
        _, train_acc = linear_probe(t, t, epochs=50, return_train_accuracy=True)
        assert train_acc == 1.0

    def test_permuted_labels_near_chance(self):
        rng = np.random.default_rng(5)
        x, y = clustered(rng, 10, 2000, 8)
        perm = rng.permutation(y)
        acc = linear_probe(EmbeddingTable(x[:1500], perm[:1500]), EmbeddingTable(x[1500:], perm[1500:]), epochs=30)
        assert abs(acc - 0.1) < 0.05

    def test_deterministic(self):
        rng = np.random.default_rng(6)
        x, y = clustered(rng, 10, 500, 8, kappa_noise=0.8)
        tr, te = EmbeddingTable(x[:400], y[:400]), EmbeddingTable(x[400:], y[400:])
        assert linear_probe(tr, te, epochs=20, seed=3) == linear_probe(tr, te, epochs=20, seed=3)

    @pytest.mark.filterwarnings("ignore::RuntimeWarning")
    def test_non_finite_loss_aborts(self):
        rng = np.random.default_rng(7)
        x, y = clustered(rng, 3, 90, 4, kappa_noise=0.5)
        t = EmbeddingTable(x, y)
        with pytest.raises(EvaluationError):
            linear_probe(t, t, epochs=5, lr=math.inf)

    def test_probe_tracks_knn_on_default_benchmark(self):
        result, _ = run_experiment(ExperimentConfig())
        assert result["linear_accuracy"] >= result["knn_accuracy"] - 0.05
