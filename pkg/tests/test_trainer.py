"""Tests for augmentation, the optimizer, and the two-stage training loop."""

import json

import numpy as np
import pytest
from pydantic import ValidationError

from lfsynth.diffcore import Tensor
from lfsynth.errors import ConfigError, IncompatibilityError, TrainingDivergedError
from lfsynth.losses import LossReport
from lfsynth.model import load_checkpoint, read_checkpoint
from lfsynth.observability import MockObservabilityClient
from lfsynth.synthgen import Sample, load_corpus
from lfsynth.trainer import (
    AdamState,
    AugmentRecord,
    TrainConfig,
    TrainState,
    apply_augment,
    augment,
    fit,
    train_step,
)


@pytest.fixture
def sample(rng):
    lr = rng.uniform(0.2, 0.8, size=(3, 3, 8, 8, 1))
    return Sample(center=lr[1, 1].copy(), lr=lr, hr=rng.uniform(size=(3, 3, 16, 16, 1)))


class TestTrainConfig:
    """Tests for training configuration validation."""

    def test_defaults(self):
        """Default schedule and optimizer settings."""
        config = TrainConfig()

        assert config.lr == 1e-4
        assert config.gamma_range == (0.4, 1.0)
        assert config.stage1_iters <= config.total_iters

    def test_stage_boundary(self, tiny_train_config):
        """Iterations before stage1_iters belong to stage 1."""
        assert tiny_train_config.stage(0) == 1
        assert tiny_train_config.stage(1) == 2

    def test_stage1_longer_than_run(self):
        """stage1_iters may not exceed total_iters."""
        with pytest.raises(ValidationError, match="stage1_iters"):
            TrainConfig(total_iters=5, stage1_iters=6)

    def test_gamma_range_validated(self):
        """Gamma bounds must be positive and ordered."""
        with pytest.raises(ValidationError):
            TrainConfig(gamma_range=(0.0, 1.0))
        with pytest.raises(ValidationError):
            TrainConfig(gamma_range=(1.0, 0.5))

    def test_crop_must_divide(self, tiny_config):
        """Crops must be divisible by 2^depth."""
        with pytest.raises(ConfigError):
            TrainConfig(net=tiny_config, crop=(6, 8)).check()

    def test_loads_from_json(self, tiny_config):
        """Configs round-trip through JSON."""
        config = TrainConfig(net=tiny_config, total_iters=7, stage1_iters=3)

        assert TrainConfig.model_validate_json(config.model_dump_json()) == config


class TestAugmentation:
    """Tests for gamma and crop augmentation."""

    def test_identity_gamma_keeps_values(self, sample, rng):
        """Gamma 1 and a full-size crop leave the sample unchanged."""
        out, record = augment(sample, rng, gamma_range=(1.0, 1.0))

        assert record.gamma == 1.0
        np.testing.assert_array_equal(out.lr, sample.lr)
        np.testing.assert_array_equal(out.hr, sample.hr)

    def test_crop_is_consistent_across_resolutions(self, sample):
        """The HR crop covers the same scene area at twice the extent."""
        record = AugmentRecord(gamma=1.0, top=2, left=1, height=4, width=4)
        out = apply_augment(sample, record)

        assert out.lr.shape == (3, 3, 4, 4, 1)
        assert out.hr.shape == (3, 3, 8, 8, 1)
        np.testing.assert_array_equal(out.center, sample.center[2:6, 1:5])
        np.testing.assert_array_equal(out.hr, sample.hr[:, :, 4:12, 2:10])

    def test_gamma_applies_everywhere(self, sample):
        """The same exponent is applied to input, LR and HR fields."""
        out = apply_augment(sample, AugmentRecord(gamma=0.5, top=0, left=0, height=8, width=8))

        np.testing.assert_allclose(out.center, np.sqrt(sample.center))
        np.testing.assert_allclose(out.lr, np.sqrt(sample.lr))
        np.testing.assert_allclose(out.hr, np.sqrt(sample.hr))

    def test_crop_window_stays_inside(self, sample, rng):
        """Jittered crop windows never leave the frame."""
        for _ in range(20):
            _, record = augment(sample, rng, crop=(4, 4), jitter=0.5)
            assert 0 <= record.top <= 4
            assert 0 <= record.left <= 4
            assert 0.4 <= record.gamma <= 1.0

    def test_oversized_crop(self, sample, rng):
        """Crops larger than the field are rejected."""
        with pytest.raises(ConfigError):
            augment(sample, rng, crop=(16, 16))

    def test_record_serializes(self):
        """Augment records are logged as plain dicts."""
        record = AugmentRecord(gamma=0.7, top=1, left=2, height=3, width=4)

        assert record.to_dict() == {"gamma": 0.7, "top": 1, "left": 2, "height": 3, "width": 4}


class TestAdam:
    """Tests for the optimizer."""

    def test_first_step_moves_by_learning_rate(self, tiny_params):
        """Bias-corrected first step has magnitude lr in every coordinate."""
        name = "encoder.1.conv1.bias"
        grads = {name: np.array([2.0, -3.0])}
        adam = AdamState()
        updated = adam.update(tiny_params, grads, lr=0.01)

        np.testing.assert_allclose(updated[name].data, [-0.01, 0.01], rtol=1e-6)
        assert adam.step == 1

    def test_frozen_parameters_untouched(self, tiny_params):
        """Frozen groups keep their values and get no moments."""
        frozen = tiny_params.with_frozen({"spatial"})
        grads = {name: np.ones(frozen[name].shape) for name in frozen.names()}
        adam = AdamState()
        updated = adam.update(frozen, grads, lr=0.1)

        name = "spatial.branch1.out.kernel"
        np.testing.assert_array_equal(updated[name].data, frozen[name].data)
        assert name not in adam.m
        assert "encoder.1.conv1.kernel" in adam.m

    def test_extras_round_trip(self, tiny_params):
        """Moments survive conversion to checkpoint extras."""
        adam = AdamState()
        adam.update(tiny_params, {"encoder.1.conv1.bias": np.ones(2)}, lr=0.1)
        restored = AdamState.from_extras(adam.to_extras(), adam.step)

        assert restored.step == 1
        np.testing.assert_array_equal(
            restored.m["encoder.1.conv1.bias"], adam.m["encoder.1.conv1.bias"]
        )
        np.testing.assert_array_equal(
            restored.v["encoder.1.conv1.bias"], adam.v["encoder.1.conv1.bias"]
        )


class TestTrainStep:
    """Tests for a single optimization step."""

    def test_stage_one_freezes_spatial_decoder(self, tiny_params, tiny_train_config, sample):
        """Stage 1 updates the encoder and angular decoder only."""
        config = tiny_train_config.model_copy(update={"stage1_iters": 2})
        state = TrainState(iteration=0, params=tiny_params)
        state, report = train_step(state, sample, config)

        name = "spatial.branch1.conv1.kernel"
        np.testing.assert_array_equal(state.params[name].data, tiny_params[name].data)
        changed = "angular.head.out.kernel"
        assert not np.array_equal(state.params[changed].data, tiny_params[changed].data)
        assert state.iteration == 1
        assert state.history[-1]["stage"] == 1
        assert np.isfinite(report.total)

    def test_zero_learning_rate_keeps_parameters(self, tiny_params, tiny_train_config, sample):
        """A step with lr 0 leaves every parameter bit-exact."""
        config = tiny_train_config.model_copy(update={"lr": 0.0})
        state, _ = train_step(TrainState(iteration=1, params=tiny_params), sample, config)

        for name in tiny_params.names():
            np.testing.assert_array_equal(state.params[name].data, tiny_params[name].data)

    def test_stage_two_updates_everything(self, tiny_params, tiny_train_config, sample):
        """Stage 2 trains the spatial decoder too."""
        state = TrainState(iteration=1, params=tiny_params)
        state, _ = train_step(state, [sample, sample], tiny_train_config)

        name = "spatial.branch1.conv1.kernel"
        assert not np.array_equal(state.params[name].data, tiny_params[name].data)
        assert state.history[-1]["stage"] == 2

    def test_divergence_names_term(self, tiny_params, tiny_train_config, sample, monkeypatch):
        """A non-finite loss term stops training with the term named."""

        def diverged(*args, **kwargs):
            nan = float("nan")
            return LossReport(
                global_loss=nan,
                local_loss=0.0,
                tv=0.0,
                sr=0.0,
                pixel=0.0,
                total=nan,
                total_tensor=Tensor(0.0),
            )

        monkeypatch.setattr("lfsynth.trainer.compute_loss", diverged)
        state = TrainState(iteration=3, params=tiny_params)

        with pytest.raises(TrainingDivergedError) as exc_info:
            train_step(state, sample, tiny_train_config)
        assert exc_info.value.iteration == 3
        assert exc_info.value.term == "global"


class TestFit:
    """Tests for full training runs on a tiny corpus."""

    def test_writes_log_and_checkpoints(self, tmp_path, tiny_train_config, tiny_corpus):
        """A run leaves a JSON-lines log, a last and a final checkpoint."""
        client = MockObservabilityClient()
        result = fit(tiny_train_config, tiny_corpus, tmp_path / "run", client=client)

        lines = [json.loads(line) for line in result.log.read_text().splitlines()]
        assert lines[0]["type"] == "header"
        entries = lines[1:]
        assert [e["iter"] for e in entries] == [0, 1, 2, 3]
        assert [e["stage"] for e in entries] == [1, 2, 2, 2]
        assert {"global", "local", "tv", "sr", "pixel", "total", "augment"} <= set(entries[0])
        assert (tmp_path / "run" / "last.ckpt").is_file()
        assert result.checkpoint == tmp_path / "run" / "final.ckpt"
        assert load_checkpoint(result.checkpoint).frozen == frozenset()

    def test_trace_has_stage_spans(self, tmp_path, tiny_train_config, tiny_corpus):
        """The run is traced with one span per stage and checkpoint events."""
        client = MockObservabilityClient()
        fit(tiny_train_config, tiny_corpus, tmp_path / "run", client=client)

        trace = client.traces[0]
        assert trace.name == "training-run"
        assert [s.name for s in trace.spans] == ["stage-1-angular", "stage-2-joint"]
        assert all(s.ended for s in trace.spans)
        assert trace.spans[1].status == "ok"
        assert any(e["name"] == "checkpoint" for e in trace.spans[1].events)
        assert trace.output_data["iterations"] == 4

    def test_checkpoint_writes_are_child_spans(self, tmp_path, tiny_train_config, tiny_corpus):
        """Each periodic checkpoint is written inside its own child span of the stage."""
        client = MockObservabilityClient()
        fit(tiny_train_config, tiny_corpus, tmp_path / "run", client=client)

        joint = client.traces[0].spans[1]
        writes = joint.children
        assert [w.name for w in writes] == ["checkpoint-write", "checkpoint-write"]
        assert [w.input_data["iteration"] for w in writes] == [2, 4]
        assert all(w.ended and w.parent_span_id == joint.span_id for w in writes)

    def test_trace_metadata_describes_run(self, tmp_path, tiny_train_config, tiny_corpus):
        """The trace carries the seed, view grid and network fingerprint."""
        client = MockObservabilityClient()
        fit(tiny_train_config, tiny_corpus, tmp_path / "run", client=client)

        metadata = client.traces[0].metadata
        assert metadata["seed"] == 3
        assert metadata["angular"] == 3
        assert metadata["net_fingerprint"] == tiny_train_config.net.fingerprint()
        assert metadata["start_iter"] == 0

    def test_runs_are_reproducible(self, tmp_path, tiny_train_config, tiny_corpus):
        """Two runs with the same seed end with identical parameters."""
        a = fit(tiny_train_config, tiny_corpus, tmp_path / "a", client=MockObservabilityClient())
        b = fit(tiny_train_config, tiny_corpus, tmp_path / "b", client=MockObservabilityClient())

        for name in a.state.params.names():
            np.testing.assert_array_equal(a.state.params[name].data, b.state.params[name].data)

    def test_resume_matches_uninterrupted_run(self, tmp_path, tiny_train_config, tiny_corpus):
        """Stopping after two iterations and resuming reproduces the full run."""
        full = fit(
            tiny_train_config, tiny_corpus, tmp_path / "full", client=MockObservabilityClient()
        )

        first_half = tiny_train_config.model_copy(update={"total_iters": 2})
        fit(first_half, tiny_corpus, tmp_path / "split", client=MockObservabilityClient())
        resumed = fit(
            tiny_train_config,
            tiny_corpus,
            tmp_path / "split",
            resume=True,
            client=MockObservabilityClient(),
        )

        assert resumed.state.iteration == 4
        for name in full.state.params.names():
            np.testing.assert_array_equal(
                resumed.state.params[name].data, full.state.params[name].data
            )
        entries = resumed.log.read_text().splitlines()[1:]
        assert [json.loads(e)["iter"] for e in entries] == [0, 1, 2, 3]

    def test_resume_rejects_other_network(self, tmp_path, tiny_train_config, tiny_corpus):
        """Resuming with a different network config fails on the checkpoint."""
        fit(tiny_train_config, tiny_corpus, tmp_path / "run", client=MockObservabilityClient())
        net = tiny_train_config.net.model_copy(update={"base_filters": 4})
        other = tiny_train_config.model_copy(update={"net": net})

        with pytest.raises(IncompatibilityError):
            fit(other, tiny_corpus, tmp_path / "run", resume=True)

    def test_last_checkpoint_keeps_optimizer_state(self, tmp_path, tiny_train_config, tiny_corpus):
        """last.ckpt stores Adam moments and the iteration counter."""
        fit(tiny_train_config, tiny_corpus, tmp_path / "run", client=MockObservabilityClient())
        ckpt = read_checkpoint(tmp_path / "run" / "last.ckpt")

        assert ckpt.metadata["iteration"] == 4
        assert ckpt.metadata["adam_step"] == 4
        assert any(key.startswith("adam.m.") for key in ckpt.extras)

    @pytest.mark.slow
    def test_loss_decreases(self, tmp_path, tiny_config, tiny_corpus):
        """Loss trends down over a short run."""
        config = TrainConfig(
            total_iters=60, stage1_iters=20, lr=1e-3, checkpoint_every=0, net=tiny_config
        )
        result = fit(config, tiny_corpus, tmp_path / "run", client=MockObservabilityClient())

        totals = [h["total"] for h in result.state.history]
        assert np.mean(totals[-10:]) < np.mean(totals[:10])

    def test_corpus_samples_train(self, tiny_corpus, tiny_params, tiny_train_config):
        """Rendered corpus samples go through a training step."""
        sample = load_corpus(tiny_corpus)[0]
        state = TrainState(iteration=0, params=tiny_params)
        state, report = train_step(state, sample, tiny_train_config)

        assert np.isfinite(report.total)
