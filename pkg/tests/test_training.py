import json
import math

import numpy as np
import pytest

from dsf import training
from dsf.config import AugmentationConfig, ExperimentConfig
from dsf.evaluation import EmbeddingTable, knn_eval
from dsf.losses import LossOutput
from dsf.training import (
    DatasetError,
    Encoder,
    TrainingDivergedError,
    batch_views,
    epoch_summary,
    generate_dataset,
    load_checkpoint,
    make_views,
    policy_from_config,
    save_checkpoint,
    train,
)
from dsf.vmf import as_unit


def small_config(**overrides):
    base = {
        "dataset.n_points": 600,
        "optimizer.epochs": 2,
        "optimizer.batch_size": 32,
    }
    base.update(overrides)
    return ExperimentConfig().replace(**base)


def strip_clock(records):
    return [{k: v for k, v in r.items() if k != "wall_clock"} for r in records]


class TestDataset:
    def test_deterministic_bytes(self):
        a = generate_dataset(4, 200, 8, 20.0, seed=3)
        b = generate_dataset(4, 200, 8, 20.0, seed=3)
        assert a.points.tobytes() == b.points.tobytes()
        assert a.labels.tobytes() == b.labels.tobytes()
        assert a.points.tobytes() != generate_dataset(4, 200, 8, 20.0, seed=4).points.tobytes()

    def test_concentrated_classes(self):
        # typical angle is sqrt((d_in - 1) / kappa) radians, so keep d_in small
        ds = generate_dataset(2, 400, 4, 1e5, seed=0)
        cos = np.sum(ds.points * ds.centers[ds.labels], axis=1)
        assert np.degrees(np.arccos(np.clip(cos, -1, 1))).max() < 1.0

    def test_center_separation(self):
        ds = generate_dataset(10, 100, 16, 30.0, min_separation_deg=45.0, seed=1)
        g = ds.centers @ ds.centers.T
        np.fill_diagonal(g, -1)
        assert np.degrees(np.arccos(g.max())) >= 45.0

    def test_infeasible_separation(self):
        with pytest.raises(DatasetError):
            generate_dataset(10, 100, 2, 30.0, min_separation_deg=170.0, seed=0)

    def test_bad_arguments(self):
        with pytest.raises(DatasetError):
            generate_dataset(1, 100, 4)
        with pytest.raises(DatasetError):
            generate_dataset(3, 100, 4, kappa=[1.0, -1.0, 2.0])

    def test_balanced_and_stratified(self):
        ds = generate_dataset(10, 5000, 16, 30.0, seed=0)
        assert np.all(np.bincount(ds.labels) == 500)
        tr, te = ds.train_test_split(0.2, seed=0)
        assert np.all(np.bincount(ds.labels[te]) == 100)
        assert np.intersect1d(tr, te).size == 0 and tr.size + te.size == 5000

    def test_raw_points_are_separable_by_knn(self):
        ds = generate_dataset(10, 5000, 16, 30.0, seed=0)
        tr, te = ds.train_test_split(0.2, seed=0)
        acc = knn_eval(EmbeddingTable(ds.points[tr], ds.labels[tr]), EmbeddingTable(ds.points[te], ds.labels[te]))
        assert acc >= 0.95


class TestViews:
    def test_no_noise_gives_copies(self):
        x = as_unit(np.arange(1.0, 9.0))
        v = make_views(x, AugmentationConfig(noise_kappa=math.inf, views_per_group=3, dropout_prob=0.0), seed=0)
        assert v.shape == (6, 8)
        np.testing.assert_array_equal(v, np.tile(x, (6, 1)))

    def test_two_views_for_single_view_groups(self):
        v = make_views(np.ones(4), AugmentationConfig(views_per_group=1), seed=0)
        assert v.shape == (2, 4)

    def test_deterministic_per_seed(self):
        spec = AugmentationConfig(views_per_group=2)
        x = as_unit(np.arange(1.0, 17.0))
        assert make_views(x, spec, 5).tobytes() == make_views(x, spec, 5).tobytes()
        assert make_views(x, spec, 5).tobytes() != make_views(x, spec, 6).tobytes()

    def test_positive_pair_signal(self):
        ds = generate_dataset(10, 1000, 16, 30.0, seed=2)
        v = as_unit(batch_views(ds.points, 50.0, 1, 0.1, np.random.default_rng(0)))
        same = np.sum(v[:, 0] * v[:, 1], axis=1).mean()
        shuffled = np.random.default_rng(1).permutation(1000)
        across = np.sum(v[:, 0] * v[shuffled, 1], axis=1).mean()
        assert same > across

    def test_norm_preserved_without_dropout(self):
        x = np.random.default_rng(0).standard_normal((5, 6)) * 3
        v = batch_views(x, 20.0, 2, 0.0, np.random.default_rng(1))
        expected = np.repeat(np.linalg.norm(x, axis=-1)[:, None], 4, axis=1)
        np.testing.assert_allclose(np.linalg.norm(v, axis=-1), expected, rtol=1e-12)


class TestEncoder:
    @pytest.mark.parametrize("activation", ["tanh", "relu"])
    def test_backward_matches_finite_differences(self, activation):
        rng = np.random.default_rng(0)
        enc = Encoder(5, [7, 6], 4, activation, seed=1)
        x = rng.standard_normal((3, 5))
        w = rng.standard_normal((3, 4))
        out, cache = enc.forward(x)
        grads = enc.backward(cache, w)
        h = 1e-6
        for k, param in enumerate(enc.params):
            for idx in list(np.ndindex(param.shape))[:10]:
                old = param[idx]
                param[idx] = old + h
                up = np.sum(enc.forward(x)[0] * w)
                param[idx] = old - h
                down = np.sum(enc.forward(x)[0] * w)
                param[idx] = old
                assert grads[k][idx] == pytest.approx((up - down) / (2 * h), rel=1e-5, abs=1e-8)

    def test_embeddings_unit_norm(self):
        enc = Encoder(16, [64], 8, seed=0)
        z = enc.embed(np.random.default_rng(0).standard_normal((50, 16)))
        np.testing.assert_allclose(np.linalg.norm(z, axis=1), 1.0, atol=1e-7)

    def test_seeded_init(self):
        a, b = Encoder(4, [3], 2, seed=9), Encoder(4, [3], 2, seed=9)
        assert all(np.array_equal(x, y) for x, y in zip(a.params, b.params))


class TestTrain:
    def test_zero_learning_rate_constant_loss(self):
        cfg = small_config(**{
            "optimizer.lr": 0.0,
            "optimizer.batch_size": 480,
            "optimizer.epochs": 5,
            "augmentation.noise_kappa": math.inf,
            "augmentation.dropout_prob": 0.0,
        })
        for method in ("cosine", "dsf"):
            _, recs = train(cfg.replace(**{"loss.method": method}))
            losses = np.array([r["loss"] for r in recs])
            assert len(losses) == 5
            assert np.ptp(losses) < 1e-12

    @pytest.mark.parametrize("method", ["cosine", "loss_avg", "fea_avg", "dsf"])
    def test_deterministic_metrics(self, method):
        m = 1 if method == "cosine" else 2
        cfg = small_config(**{"loss.method": method, "augmentation.views_per_group": m})
        _, a = train(cfg)
        _, b = train(cfg)
        assert strip_clock(a) == strip_clock(b)

    def test_record_fields(self):
        _, recs = train(small_config(), max_steps=3)
        assert len(recs) == 3
        for r in recs:
            assert set(r) >= {"step", "epoch", "loss", "margin_pos", "margin_neg", "margin", "mean_kappa", "wall_clock"}
            assert r["margin"] == pytest.approx(r["margin_pos"] - r["margin_neg"])
        _, recs = train(small_config(**{"loss.method": "cosine"}), max_steps=1)
        assert recs[0]["mean_kappa"] is None

    @pytest.mark.parametrize("negatives", ["in_batch", "queue"])
    def test_checkpoint_resume_is_bitwise(self, tmp_path, negatives):
        cfg = small_config(**{"loss.negatives": negatives, "loss.queue_size": 100, "augmentation.views_per_group": 2})
        _, full = train(cfg, max_steps=20)
        state, first = train(cfg, max_steps=9)
        save_checkpoint(tmp_path / "ck.npz", state)
        resumed, rest = train(cfg, state=load_checkpoint(tmp_path / "ck.npz"), max_steps=20)
        assert resumed.step == 20
        assert [r["loss"] for r in first + rest] == [r["loss"] for r in full]

    def test_checkpoint_contents(self, tmp_path):
        cfg = small_config(**{"loss.negatives": "queue"})
        state, _ = train(cfg, max_steps=4)
        save_checkpoint(tmp_path / "ck.npz", state)
        back = load_checkpoint(tmp_path / "ck.npz")
        assert back.step == 4 and back.config == state.config
        assert all(np.array_equal(a, b) for a, b in zip(back.params, state.params))
        assert all(np.array_equal(a, b) for a, b in zip(back.velocity, state.velocity))
        np.testing.assert_array_equal(back.queue_mu, state.queue_mu)
        np.testing.assert_array_equal(back.queue_kappa, state.queue_kappa)

    @pytest.mark.parametrize("method", ["cosine", "fea_avg", "dsf"])
    def test_queue_length(self, method):
        cfg = small_config(**{"loss.method": method, "loss.negatives": "queue", "loss.queue_size": 100})
        for steps in (1, 3, 5):
            state, _ = train(cfg, max_steps=steps)
            assert state.queue_mu.shape[0] == min(steps * 32, 100)
            if method == "dsf":
                assert state.queue_kappa.shape[0] == min(steps * 32, 100)

    def test_queue_evicts_oldest(self):
        cfg = small_config(**{"loss.negatives": "queue", "loss.queue_size": 40})
        s2, _ = train(cfg, max_steps=2)
        s3, _ = train(cfg, max_steps=3)
        # after step 3 the queue is the last 8 keys of step 2 followed by 32 new ones
        np.testing.assert_array_equal(s3.queue_mu[:8], s2.queue_mu[-8:])

    def test_logged_kappa_respects_ceiling(self):
        cfg = small_config(**{"optimizer.epochs": 3})
        _, recs = train(cfg)
        ceiling = policy_from_config(cfg).kappa_ceiling(cfg.encoder.p)
        assert all(0 < r["mean_kappa"] <= ceiling for r in recs)

    def test_metrics_file(self, tmp_path):
        path = tmp_path / "m.jsonl"
        _, recs = train(small_config(), max_steps=4, metrics_path=path)
        lines = [json.loads(line) for line in path.read_text().splitlines()]
        assert [l["step"] for l in lines] == [0, 1, 2, 3]
        assert lines[-1]["loss"] == recs[-1]["loss"]

    def test_divergence_guard(self, monkeypatch):
        real = training.compute_loss

        def poisoned(*args, **kwargs):
            out = real(*args, **kwargs)
            return LossOutput(math.nan, out.grad_features, out.margin_pos, out.margin_neg, out.keys)

        monkeypatch.setattr(training, "compute_loss", poisoned)
        with pytest.raises(TrainingDivergedError) as info:
            train(small_config(), max_steps=3)
        assert info.value.step == 0

    def test_epoch_summary(self):
        _, recs = train(small_config())
        rows = epoch_summary(recs)
        assert [r["epoch"] for r in rows] == [0, 1]
        assert rows[0]["loss"] == pytest.approx(np.mean([r["loss"] for r in recs if r["epoch"] == 0]))

    def test_batch_larger_than_train_set(self):
        with pytest.raises(ValueError):
            train(small_config(**{"optimizer.batch_size": 500}))


class TestDsfMargin:
    def test_margin_grows_past_cosine_bound(self):
        cfg = ExperimentConfig().replace(**{"optimizer.epochs": 15})
        _, recs = train(cfg)
        rows = epoch_summary(recs)
        assert rows[-1]["margin"] > rows[0]["margin"]
        # cosine margins are capped at 2 / tau <= 2 for any tau >= 1
        assert rows[-1]["margin"] > 2.0
