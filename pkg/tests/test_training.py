"""Tests for the SGD trainer: optimizer arithmetic, schedules, cropping,
the training loop, and checkpoint serialization."""

import numpy as np
import pytest

from nivec.aggregation import build_aggregation_head
from nivec.corpus import FeatureSequence, SynthSpec, generate_synthetic_corpus
from nivec.frame_net import (BatchNorm, FullyConnected, build_frame_network,
                             iter_buffers, iter_params)
from nivec.training import (
    ClassifierHead,
    DivergenceError,
    SpeakerNet,
    TrainConfig,
    cross_entropy,
    load_checkpoint,
    lr_schedule,
    sample_crop,
    save_checkpoint,
    sgd_step,
    train,
)


def tiny_model(num_speakers=4, dim=6, seed=0):
    rng = np.random.default_rng(seed)
    net = build_frame_network("tdnn", dim, width=8, out_dim=8, rng=rng)
    agg = build_aggregation_head("meanstd", 8)
    clf = ClassifierHead(agg.out_dim, 8, num_speakers, rng)
    return SpeakerNet(net, agg, clf)


def tiny_corpus(tmp_path, num_speakers=4, utts=4, seed=0):
    spec = SynthSpec(num_speakers=num_speakers, utts_per_speaker=utts,
                     min_frames=40, max_frames=60, feature_dim=6,
                     speaker_dim=3, num_components=4, channel_noise=0.1,
                     seed=seed)
    return generate_synthetic_corpus(spec, tmp_path / "corpus")


class TestSgdStep:
    def test_hand_computed_update(self):
        fc = FullyConnected(1, 1)
        fc.params["W"] = np.array([[1.0]])
        fc.params["b"] = np.array([0.0])
        fc.grads["W"] = np.array([[1.0]])
        fc.grads["b"] = np.array([0.0])
        sgd_step(fc, lr=0.05, weight_decay=0.001)
        # 1 - 0.05 * (1 + 0.001 * 1) = 0.94995
        np.testing.assert_allclose(fc.params["W"], 0.94995, rtol=0.0, atol=1e-15)
        np.testing.assert_allclose(fc.params["b"], 0.0, atol=0.0)

    def test_no_decay_parameters_skip_weight_decay(self):
        bn = BatchNorm(3)
        bn.grads["gamma"] = np.zeros(3)
        bn.grads["beta"] = np.zeros(3)
        sgd_step(bn, lr=0.1, weight_decay=0.5)
        np.testing.assert_array_equal(bn.params["gamma"], np.ones(3))
        np.testing.assert_array_equal(bn.params["beta"], np.zeros(3))

        fc = FullyConnected(2, 2)
        fc.params["W"] = np.ones((2, 2))
        fc.grads["W"] = np.zeros((2, 2))
        fc.grads["b"] = np.zeros(2)
        sgd_step(fc, lr=0.1, weight_decay=0.5)
        np.testing.assert_allclose(fc.params["W"], 0.95, atol=1e-15)

    def test_missing_gradient_rejected(self):
        fc = FullyConnected(2, 2)
        with pytest.raises(ValueError, match="gradient"):
            sgd_step(fc, lr=0.1, weight_decay=0.0)

    def test_non_finite_gradient_raises_divergence(self):
        fc = FullyConnected(1, 1)
        fc.grads["W"] = np.array([[np.inf]])
        fc.grads["b"] = np.zeros(1)
        with pytest.raises(DivergenceError):
            sgd_step(fc, lr=0.1, weight_decay=0.0)

    def test_momentum_accumulates_velocity(self):
        fc = FullyConnected(1, 1)
        fc.params["W"] = np.array([[0.0]])
        fc.params["b"] = np.array([0.0])
        fc.grads["W"] = np.array([[1.0]])
        fc.grads["b"] = np.array([0.0])
        vel = {}
        sgd_step(fc, lr=0.1, weight_decay=0.0, momentum=0.9, velocities=vel)
        np.testing.assert_allclose(fc.params["W"], -0.1, atol=1e-15)
        fc.grads["W"] = np.array([[1.0]])
        sgd_step(fc, lr=0.1, weight_decay=0.0, momentum=0.9, velocities=vel)
        # v2 = 0.9 * 1 + 1 = 1.9; W = -0.1 - 0.1 * 1.9 = -0.29
        np.testing.assert_allclose(fc.params["W"], -0.29, atol=1e-15)

    def test_momentum_without_velocity_dict_rejected(self):
        fc = FullyConnected(1, 1)
        fc.grads["W"] = np.zeros((1, 1))
        fc.grads["b"] = np.zeros(1)
        with pytest.raises(ValueError, match="velocity"):
            sgd_step(fc, lr=0.1, weight_decay=0.0, momentum=0.9, velocities=None)


class TestSchedule:
    def test_geometric_endpoints_and_midpoint(self):
        cfg = TrainConfig(lr_start=0.05, lr_end=0.0002)
        assert lr_schedule(0, 100, cfg) == 0.05
        assert abs(lr_schedule(100, 100, cfg) - 0.0002) <= 1e-18
        mid = lr_schedule(50, 100, cfg)
        np.testing.assert_allclose(mid, np.sqrt(0.05 * 0.0002), rtol=1e-12)

    def test_linear_midpoint_is_mean(self):
        cfg = TrainConfig(lr_start=0.04, lr_end=0.02, schedule="linear")
        np.testing.assert_allclose(lr_schedule(5, 10, cfg), 0.03, atol=1e-15)

    def test_constant_when_endpoints_equal(self):
        cfg = TrainConfig(lr_start=0.01, lr_end=0.01)
        for step in (0, 3, 10):
            assert lr_schedule(step, 10, cfg) == 0.01

    def test_monotone_decreasing(self):
        cfg = TrainConfig(lr_start=0.05, lr_end=0.0002)
        lrs = [lr_schedule(s, 20, cfg) for s in range(21)]
        assert all(a > b for a, b in zip(lrs, lrs[1:]))

    def test_out_of_range_step_rejected(self):
        cfg = TrainConfig()
        with pytest.raises(ValueError):
            lr_schedule(-1, 10, cfg)
        with pytest.raises(ValueError):
            lr_schedule(11, 10, cfg)


class TestCrossEntropy:
    def test_uniform_logits_give_log_k(self):
        loss, grad = cross_entropy(np.zeros((6, 4)), np.array([0, 1, 2, 3, 0, 1]))
        np.testing.assert_allclose(loss, np.log(4.0), atol=1e-12)
        np.testing.assert_allclose(grad.sum(axis=1), 0.0, atol=1e-12)

    def test_two_class_hand_case(self):
        loss, grad = cross_entropy(np.array([[0.0, 0.0]]), np.array([0]))
        np.testing.assert_allclose(loss, np.log(2.0), atol=1e-12)
        np.testing.assert_allclose(grad, [[-0.5, 0.5]], atol=1e-12)

    def test_confident_correct_has_small_loss(self):
        logits = np.array([[30.0, 0.0], [0.0, 30.0]])
        loss, _ = cross_entropy(logits, np.array([0, 1]))
        assert loss < 1e-10
        loss_wrong, _ = cross_entropy(logits, np.array([1, 0]))
        assert loss_wrong > 10.0

    def test_gradient_rows_sum_to_zero(self):
        rng = np.random.default_rng(0)
        logits = rng.standard_normal((9, 5))
        labels = rng.integers(0, 5, size=9)
        _, grad = cross_entropy(logits, labels)
        np.testing.assert_allclose(grad.sum(axis=1), 0.0, atol=1e-12)

    def test_label_out_of_range_rejected(self):
        with pytest.raises(ValueError):
            cross_entropy(np.zeros((2, 3)), np.array([0, 3]))


class TestSampleCrop:
    def test_long_sequence_gives_contiguous_slice(self):
        frames = np.arange(50, dtype=np.float64)[:, None]
        seq = FeatureSequence("u", frames)
        rng = np.random.default_rng(1)
        for _ in range(10):
            crop = sample_crop(seq, 20, rng)
            assert crop.frames.shape == (20, 1)
            start = int(crop.frames[0, 0])
            np.testing.assert_array_equal(crop.frames, frames[start:start + 20])

    def test_short_sequence_wraps_cyclically(self):
        frames = np.arange(3, dtype=np.float64)[:, None]
        seq = FeatureSequence("u", frames)
        rng = np.random.default_rng(2)
        crop = sample_crop(seq, 7, rng)
        assert crop.frames.shape == (7, 1)
        vals = crop.frames[:, 0].astype(int)
        diffs = (vals[1:] - vals[:-1]) % 3
        assert np.all(diffs == 1)

    def test_deterministic_under_seed(self):
        frames = np.random.default_rng(3).standard_normal((40, 2))
        seq = FeatureSequence("u", frames, frame_shift=0.02)
        a = sample_crop(seq, 15, np.random.default_rng(7))
        b = sample_crop(seq, 15, np.random.default_rng(7))
        np.testing.assert_array_equal(a.frames, b.frames)
        assert a.utterance_id == "u" and a.frame_shift == 0.02

    def test_exact_length_returns_whole_sequence(self):
        frames = np.arange(5, dtype=np.float64)[:, None]
        crop = sample_crop(FeatureSequence("u", frames), 5, np.random.default_rng(0))
        np.testing.assert_array_equal(crop.frames, frames)

    def test_bad_crop_length_rejected(self):
        seq = FeatureSequence("u", np.zeros((4, 1)))
        with pytest.raises(ValueError):
            sample_crop(seq, 0, np.random.default_rng(0))


class TestTrainConfig:
    def test_json_round_trip(self):
        cfg = TrainConfig(crop_frames=123, lr_start=0.01, lr_end=0.001, epochs=5)
        assert TrainConfig.from_json(cfg.to_json()) == cfg

    def test_zero_learning_rate_allowed(self):
        cfg = TrainConfig(lr_start=0.0, lr_end=0.0)
        assert cfg.lr_start == 0.0

    @pytest.mark.parametrize("kwargs", [
        {"batch_size": 0},
        {"crop_frames": 0},
        {"lr_start": 0.001, "lr_end": 0.01},
        {"lr_start": 0.01, "lr_end": 0.0},
        {"schedule": "cosine"},
        {"epochs": -1},
        {"segments_per_speaker": 0},
    ])
    def test_invalid_configs_rejected(self, kwargs):
        with pytest.raises(ValueError):
            TrainConfig(**kwargs)


class TestFullBatchDescent:
    def test_loss_mostly_decreases_on_fixed_batch(self):
        model = tiny_model(num_speakers=4, dim=5, seed=11)
        rng = np.random.default_rng(12)
        x = rng.standard_normal((8, 24, 5))
        x[:4, :, 0] += 3.0
        x[2:6, :, 2] -= 3.0
        labels = np.array([0, 0, 1, 1, 2, 2, 3, 3])
        losses = []
        for _ in range(50):
            logits = model.forward(x, train=True)
            loss, dlogits = cross_entropy(logits, labels)
            losses.append(loss)
            model.zero_grads()
            model.backward(dlogits)
            sgd_step(model, lr=0.02, weight_decay=0.0)
        violations = sum(b > a + 1e-12 for a, b in zip(losses, losses[1:]))
        assert violations <= 3, f"{violations} increases in 50 full-batch steps"
        assert losses[-1] < losses[0]


class TestTrainLoop:
    def test_learns_tiny_corpus(self, tmp_path):
        manifest = tiny_corpus(tmp_path)
        model = tiny_model(seed=5)
        cfg = TrainConfig(crop_frames=30, batch_size=8, epochs=10,
                          segments_per_speaker=8, seed=3)
        result = train(model, manifest, cfg)
        assert not result.diverged
        assert result.steps == 40
        assert result.final_accuracy >= 0.95

    def test_loss_curve_file_and_determinism(self, tmp_path):
        manifest = tiny_corpus(tmp_path)
        cfg = TrainConfig(crop_frames=20, batch_size=8, epochs=2,
                          segments_per_speaker=4, seed=9)
        path = tmp_path / "curve.csv"
        r1 = train(tiny_model(seed=5), manifest, cfg, loss_curve_path=path)
        r2 = train(tiny_model(seed=5), manifest, cfg)
        assert [row[2] for row in r1.loss_curve] == [row[2] for row in r2.loss_curve]
        lines = path.read_text().splitlines()
        assert lines[0] == "step,lr,loss,accuracy"
        assert len(lines) == 1 + r1.steps

        r3 = train(tiny_model(seed=5), manifest,
                   TrainConfig(crop_frames=20, batch_size=8, epochs=2,
                               segments_per_speaker=4, seed=10))
        assert [row[2] for row in r1.loss_curve] != [row[2] for row in r3.loss_curve]

    def test_zero_lr_run_leaves_parameters_unchanged(self, tmp_path):
        manifest = tiny_corpus(tmp_path)
        model = tiny_model(seed=6)
        before = {p: owner.params[k].copy() for p, owner, k in iter_params(model)}
        cfg = TrainConfig(crop_frames=20, batch_size=8, epochs=1,
                          segments_per_speaker=4, lr_start=0.0, lr_end=0.0,
                          weight_decay=0.0)
        result = train(model, manifest, cfg)
        assert not result.diverged and result.steps > 0
        for p, owner, k in iter_params(model):
            np.testing.assert_array_equal(owner.params[k], before[p])

    def test_transform_applied_once_per_utterance(self, tmp_path):
        manifest = tiny_corpus(tmp_path)
        seen = []

        def spy(seq):
            seen.append(seq.utterance_id)
            return seq

        cfg = TrainConfig(crop_frames=20, batch_size=8, epochs=1,
                          segments_per_speaker=4)
        train(tiny_model(), manifest, cfg, transform=spy)
        assert sorted(seen) == sorted(e.utterance_id for e in manifest.entries)

    def test_single_speaker_rejected(self, tmp_path):
        manifest = tiny_corpus(tmp_path)
        only = sorted(manifest.speakers())[0]
        with pytest.raises(ValueError, match="speakers"):
            train(tiny_model(), manifest.subset([only]), TrainConfig())

    def test_divergent_loss_aborts_with_warning(self, tmp_path, monkeypatch):
        manifest = tiny_corpus(tmp_path)
        calls = {"n": 0}

        def poisoned(logits, labels):
            calls["n"] += 1
            loss, grad = cross_entropy(logits, labels)
            if calls["n"] > 2:
                return float("nan"), grad
            return loss, grad

        monkeypatch.setattr("nivec.training.cross_entropy", poisoned)
        cfg = TrainConfig(crop_frames=20, batch_size=8, epochs=2,
                          segments_per_speaker=8)
        path = tmp_path / "curve.csv"
        with pytest.warns(UserWarning, match="diverged"):
            result = train(tiny_model(), manifest, cfg, loss_curve_path=path)
        assert result.diverged
        assert result.steps == 2
        assert len(path.read_text().splitlines()) == 3

    def test_divergent_gradient_restores_parameters(self, tmp_path, monkeypatch):
        manifest = tiny_corpus(tmp_path)
        model = tiny_model(seed=8)
        real = sgd_step
        calls = {"n": 0}

        def poisoned(m, lr, wd, momentum=0.0, velocities=None):
            calls["n"] += 1
            if calls["n"] > 2:
                raise DivergenceError("injected")
            real(m, lr, wd, momentum, velocities)

        monkeypatch.setattr("nivec.training.sgd_step", poisoned)
        cfg = TrainConfig(crop_frames=20, batch_size=8, epochs=1,
                          segments_per_speaker=8)
        with pytest.warns(UserWarning, match="diverged"):
            result = train(model, manifest, cfg)
        assert result.diverged and result.steps == 2
        for _, owner, k in iter_params(model):
            assert np.all(np.isfinite(owner.params[k]))


class TestCheckpoints:
    def test_round_trip_preserves_model(self, tmp_path):
        manifest = tiny_corpus(tmp_path)
        model = tiny_model(seed=13)
        cfg = TrainConfig(crop_frames=20, batch_size=8, epochs=1,
                          segments_per_speaker=4)
        train(model, manifest, cfg)
        path = tmp_path / "model.nivc"
        save_checkpoint(model, path, meta={"note": "t"})
        back, meta = load_checkpoint(path)
        assert meta == {"note": "t"}
        assert back.config() == model.config()
        for (p1, o1, k1), (p2, o2, k2) in zip(iter_params(model), iter_params(back)):
            assert p1 == p2
            np.testing.assert_array_equal(o1.params[k1], o2.params[k2])
        for (p1, o1, k1), (p2, o2, k2) in zip(iter_buffers(model), iter_buffers(back)):
            assert p1 == p2
            np.testing.assert_array_equal(o1.buffers[k1], o2.buffers[k2])
        seq = manifest.load(manifest.entries[0].utterance_id)
        np.testing.assert_array_equal(model.embed(seq.frames), back.embed(seq.frames))

    def test_save_is_deterministic(self, tmp_path):
        model = tiny_model(seed=14)
        p1, p2 = tmp_path / "a.nivc", tmp_path / "b.nivc"
        save_checkpoint(model, p1)
        save_checkpoint(model, p2)
        assert p1.read_bytes() == p2.read_bytes()
