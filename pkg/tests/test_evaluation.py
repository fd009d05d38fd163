"""Tests for scene scoring, flow-sign agreement, and the residual-order ablation."""

import json

import numpy as np
import pytest

from lfsynth.diffcore import Tensor, bilinear_resize
from lfsynth.evaluation import (
    ABLATION_TABLE,
    EvaluationReport,
    SceneScore,
    evaluate_model,
    flow_sign_agreement,
    run_ablation,
    score_sample,
)
from lfsynth.lfops import shift_views, view_offsets
from lfsynth.lightfield import LightField, load_array, psnr
from lfsynth.model import NetConfig, ResidualOrder, synth_hr_x4
from lfsynth.observability import MockObservabilityClient
from lfsynth.synthgen import SceneSpec, load_corpus, make_dataset, render
from lfsynth.trainer import TrainConfig, fit


@pytest.fixture
def geometry(rng):
    """A textured 3x3 field over a plane at disparity 0.2."""
    truth = rng.uniform(0.1, 0.9, size=(3, 3, 12, 12, 1))
    disparity = np.full((3, 3, 12, 12), 0.2)
    occlusion = np.zeros((3, 3, 12, 12), dtype=bool)
    return truth, disparity, occlusion


def ideal_flow(disparity: np.ndarray, eta: float) -> np.ndarray:
    offsets = view_offsets(disparity.shape[0])
    scale = eta - disparity
    return np.stack(
        [scale * offsets[:, :, 1, None, None], scale * offsets[:, :, 0, None, None]], axis=-1
    )


class TestFlowSignAgreement:
    """Tests for the flow-sign diagnostic."""

    def test_ideal_flow_agrees(self, geometry):
        """The ideal flow has the ideal sign everywhere."""
        truth, disparity, occlusion = geometry
        flow = ideal_flow(disparity, 0.8)

        assert flow_sign_agreement(flow, disparity, occlusion, truth, 0.8) == 1.0

    def test_negated_flow_disagrees(self, geometry):
        """Flipping the flow flips every sign."""
        truth, disparity, occlusion = geometry
        flow = -ideal_flow(disparity, 0.8)

        assert flow_sign_agreement(flow, disparity, occlusion, truth, 0.8) == 0.0

    def test_occluded_pixels_ignored(self, geometry):
        """Occluded pixels do not count either way."""
        truth, disparity, _ = geometry
        flow = ideal_flow(disparity, 0.8)
        flow[:, :, :, :6] *= -1.0
        occlusion = np.zeros(disparity.shape, dtype=bool)
        occlusion[:, :, :, :6] = True

        assert flow_sign_agreement(flow, disparity, occlusion, truth, 0.8) == 1.0

    def test_single_view_has_no_diagnostic(self):
        """A 1x1 grid has no outer columns."""
        flow = np.zeros((1, 1, 4, 4, 2))
        disparity = np.zeros((1, 1, 4, 4))
        occlusion = np.zeros(disparity.shape, dtype=bool)

        assert flow_sign_agreement(flow, disparity, occlusion, flow[..., :1], 0.8) is None

    def test_zero_ideal_flow_has_no_diagnostic(self, geometry):
        """When eta equals the disparity no pixel qualifies."""
        truth, disparity, occlusion = geometry
        flow = np.ones(disparity.shape + (2,))

        assert flow_sign_agreement(flow, disparity, occlusion, truth, 0.2) is None


class TestScoring:
    """Tests for scoring a network on corpus scenes."""

    def test_score_sample_fields(self, tiny_params, tiny_corpus):
        """Scores carry PSNR, baseline PSNR, HR metrics and the flow diagnostic."""
        sample = load_corpus(tiny_corpus)[0]
        score = score_sample(tiny_params, sample)

        assert score.scene_id == "scene_000"
        assert score.psnr_db > 0.0
        assert score.baseline_psnr_db > 0.0
        assert score.hr_ssim is not None
        assert score.flow_sign_agreement is None or 0.0 <= score.flow_sign_agreement <= 1.0

    def test_evaluate_model_summary(self, tiny_params, tiny_corpus):
        """The report summarizes medians over scenes."""
        report = evaluate_model(tiny_params, load_corpus(tiny_corpus))

        assert len(report.scenes) == 2
        assert set(report.summary()) == {
            "median_psnr_db",
            "median_baseline_psnr_db",
            "mean_flow_sign_agreement",
        }

    def test_report_medians(self):
        """Medians and means are taken over the scene list."""
        report = EvaluationReport(
            scenes=[
                SceneScore(scene_id="a", psnr_db=20.0, baseline_psnr_db=10.0, hr_psnr_db=18.0),
                SceneScore(
                    scene_id="b",
                    psnr_db=30.0,
                    baseline_psnr_db=14.0,
                    hr_psnr_db=25.0,
                    flow_sign_agreement=0.75,
                ),
            ]
        )

        assert report.median_psnr_db == 25.0
        assert report.median_baseline_psnr_db == 12.0
        assert report.mean_flow_sign_agreement == 0.75


class TestAblation:
    """Tests for the residual-order ablation."""

    def test_writes_one_row_per_order(self, tmp_path, tiny_train_config, tiny_corpus):
        """Each order is trained and scored into ablation.json."""
        config = tiny_train_config.model_copy(update={"total_iters": 2})
        orders = [ResidualOrder.FLOW_THEN_INTENSITY, ResidualOrder.SINGLE_INTENSITY]
        client = MockObservabilityClient()

        table = run_ablation(config, tiny_corpus, tmp_path, orders=orders, client=client)

        saved = json.loads((tmp_path / ABLATION_TABLE).read_text())
        assert saved == table
        assert [row["residual_order"] for row in table] == [o.value for o in orders]
        assert all(np.isfinite(row["final_total_loss"]) for row in table)
        assert (tmp_path / "single_intensity" / "final.ckpt").is_file()
        names = [t.name for t in client.traces]
        assert names.count("ablation-variant") == 2
        assert names.count("training-run") == 2
        variants = [t for t in client.traces if t.name == "ablation-variant"]
        assert [t.metadata["residual_order"] for t in variants] == [o.value for o in orders]
        assert all(t.metadata["held_out_scenes"] == 2 for t in variants)

    @pytest.mark.slow
    def test_every_residual_order(self, tmp_path, tiny_train_config, tiny_corpus):
        """All six residual orders train, score and appear in the table in order."""
        config = tiny_train_config.model_copy(update={"total_iters": 6, "checkpoint_every": 0})
        client = MockObservabilityClient()

        table = run_ablation(config, tiny_corpus, tmp_path, client=client)

        assert [row["residual_order"] for row in table] == [o.value for o in ResidualOrder]
        for row in table:
            assert np.isfinite(row["final_total_loss"])
            assert np.isfinite(row["median_psnr_db"])
            assert np.isfinite(row["median_hr_psnr_db"])
            assert (tmp_path / row["residual_order"] / "final.ckpt").is_file()
        assert [t.name for t in client.traces].count("ablation-variant") == len(ResidualOrder)


@pytest.fixture(scope="module")
def desk_run(tmp_path_factory):
    """A desk-scale network trained on rendered scenes, plus held-out scenes."""
    root = tmp_path_factory.mktemp("desk")
    make_dataset(n_scenes=16, hw=(64, 64), angular=5, seed=100, out_dir=root / "train")
    make_dataset(n_scenes=4, hw=(64, 64), angular=5, seed=200, out_dir=root / "eval")
    config = TrainConfig(
        total_iters=1200, stage1_iters=300, lr=5e-4, checkpoint_every=0, net=NetConfig.desk()
    )
    result = fit(config, root / "train", root / "run", client=MockObservabilityClient())
    return result.state.params, root / "eval"


@pytest.mark.slow
class TestDeskScaleLearning:
    """A desk-scale network learns view synthesis from rendered scenes."""

    def test_beats_shift_baseline(self, desk_run):
        """Held-out PSNR clears the shift-only baseline by 3 dB."""
        params, eval_dir = desk_run

        report = evaluate_model(params, load_corpus(eval_dir))

        assert report.median_psnr_db >= report.median_baseline_psnr_db + 3.0

    def test_flow_signs_follow_depth(self, desk_run):
        """Learned flow has the sign of the ideal flow on most textured pixels."""
        params, eval_dir = desk_run

        report = evaluate_model(params, load_corpus(eval_dir))

        assert report.mean_flow_sign_agreement is not None
        assert report.mean_flow_sign_agreement >= 0.8

    def test_x4_beats_bilinear_baseline(self, desk_run):
        """Two passes to 4x score at least as well as bilinear 4x of the shifted view."""
        params, eval_dir = desk_run
        manifest = json.loads((eval_dir / "manifest.json").read_text())

        for scene in manifest["scenes"]:
            spec = SceneSpec.model_validate(scene["spec"])
            truth_x4 = LightField.from_array(render(spec, scale=4)[0])
            center = Tensor(load_array(eval_dir / scene["files"]["lr"])[2, 2])

            x4 = synth_hr_x4(params, center)
            shifted = shift_views(center, 5, params.config.eta)
            baseline = bilinear_resize(bilinear_resize(shifted.views, 2), 2)

            assert psnr(x4, truth_x4) >= psnr(LightField(baseline).clamp(), truth_x4)
