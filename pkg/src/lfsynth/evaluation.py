"""Scoring trained networks on synthetic scenes and the residual-order ablation."""

from __future__ import annotations

import json
import logging
from collections.abc import Sequence
from pathlib import Path

import numpy as np
from pydantic import BaseModel

from lfsynth.diffcore import Tensor
from lfsynth.lfops import shift_views, view_offsets
from lfsynth.lightfield.field import LightField
from lfsynth.lightfield.metrics import SSIM_MIN_EXTENT, psnr, ssim
from lfsynth.model import ModelParams, ResidualOrder, forward
from lfsynth.observability import ObservabilityClient, get_observability_client
from lfsynth.synthgen import Sample, load_corpus
from lfsynth.trainer import TrainConfig, fit

logger = logging.getLogger(__name__)

TEXTURE_THRESHOLD = 5e-3
ABLATION_TABLE = "ablation.json"


class SceneScore(BaseModel):
    scene_id: str
    psnr_db: float
    baseline_psnr_db: float
    hr_psnr_db: float
    hr_ssim: float | None = None
    flow_sign_agreement: float | None = None


class EvaluationReport(BaseModel):
    scenes: list[SceneScore]

    @property
    def median_psnr_db(self) -> float:
        return float(np.median([s.psnr_db for s in self.scenes]))

    @property
    def median_baseline_psnr_db(self) -> float:
        return float(np.median([s.baseline_psnr_db for s in self.scenes]))

    @property
    def mean_flow_sign_agreement(self) -> float | None:
        values = [s.flow_sign_agreement for s in self.scenes if s.flow_sign_agreement is not None]
        return float(np.mean(values)) if values else None

    def summary(self) -> dict[str, float | None]:
        return {
            "median_psnr_db": self.median_psnr_db,
            "median_baseline_psnr_db": self.median_baseline_psnr_db,
            "mean_flow_sign_agreement": self.mean_flow_sign_agreement,
        }


def flow_sign_agreement(
    flow: np.ndarray,
    view_disparity: np.ndarray,
    occlusion: np.ndarray,
    truth_lr: np.ndarray,
    eta: float,
) -> float | None:
    """Share of pixels in the outermost view columns whose horizontal flow has the ideal sign.

    Only textured, non-occluded pixels with a non-zero ideal flow count.
    Returns None when no pixel qualifies.
    """
    angular = flow.shape[0]
    offsets = view_offsets(angular)
    reach = angular // 2
    if reach == 0:
        return None
    agree = total = 0
    for v in range(angular):
        for u in range(angular):
            dh = offsets[v, u, 1]
            if abs(dh) != reach:
                continue
            ideal = (eta - view_disparity[v, u]) * dh
            gy, gx = np.gradient(truth_lr[v, u, ..., 0])
            usable = (
                ~occlusion[v, u]
                & (np.hypot(gx, gy) > TEXTURE_THRESHOLD)
                & (np.abs(ideal) > 1e-6)
            )
            total += int(usable.sum())
            agree += int((np.sign(flow[v, u, ..., 0]) == np.sign(ideal))[usable].sum())
    return agree / total if total else None


def score_sample(params: ModelParams, sample: Sample, eta: float | None = None) -> SceneScore:
    config = params.config
    eta = config.eta if eta is None else eta
    center = Tensor(sample.center)
    out = forward(params, center, clamp=True, strict=False)
    truth_lr = LightField.from_array(sample.lr, check_range=False)
    truth_hr = LightField.from_array(sample.hr, check_range=False)
    baseline = shift_views(center, config.angular, eta, allow_even=config.mode == "table")

    hr_ssim = None
    if min(sample.hr.shape[2:4]) >= SSIM_MIN_EXTENT:
        hr_ssim = ssim(out.lf_hr, truth_hr)
    agreement = None
    if sample.view_disparity is not None and sample.occlusion is not None:
        agreement = flow_sign_agreement(
            out.flow.flows.data, sample.view_disparity, sample.occlusion, sample.lr, eta
        )
    return SceneScore(
        scene_id=sample.scene_id,
        psnr_db=psnr(out.lf_lr.clamp(), truth_lr),
        baseline_psnr_db=psnr(baseline, truth_lr),
        hr_psnr_db=psnr(out.lf_hr, truth_hr),
        hr_ssim=hr_ssim,
        flow_sign_agreement=agreement,
    )


def evaluate_model(
    params: ModelParams, samples: Sequence[Sample], eta: float | None = None
) -> EvaluationReport:
    """Synthesized-field PSNR against the shift-only baseline, plus flow-sign agreement."""
    scores = [score_sample(params, sample, eta) for sample in samples]
    report = EvaluationReport(scenes=scores)
    logger.info(f"Evaluated {len(scores)} scenes: {report.summary()}")
    return report


def run_ablation(
    train_config: TrainConfig,
    corpus: str | Path,
    out_dir: str | Path,
    eval_corpus: str | Path | None = None,
    orders: Sequence[ResidualOrder] = tuple(ResidualOrder),
    client: ObservabilityClient | None = None,
) -> list[dict[str, object]]:
    """Train one network per residual order and tabulate held-out scores.

    The table is written to ``out_dir/ablation.json`` and returned.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    client = client or get_observability_client()
    held_out = load_corpus(eval_corpus or corpus)
    table: list[dict[str, object]] = []
    for order in orders:
        trace = client.create_trace(name="ablation-variant", run_id=order.value)
        trace.set_metadata({"residual_order": order.value, "held_out_scenes": len(held_out)})
        net = train_config.net.model_copy(update={"residual_order": order})
        config = train_config.model_copy(update={"net": net})
        result = fit(config, corpus, out / order.value, client=client)
        report = evaluate_model(result.state.params, held_out)
        row = {
            "residual_order": order.value,
            "median_psnr_db": report.median_psnr_db,
            "median_baseline_psnr_db": report.median_baseline_psnr_db,
            "median_hr_psnr_db": float(np.median([s.hr_psnr_db for s in report.scenes])),
            "final_total_loss": result.final_report.total if result.final_report else None,
        }
        trace.set_output(row)
        table.append(row)
        logger.info(f"Ablation {order.value}: {row}")
    (out / ABLATION_TABLE).write_text(json.dumps(table, indent=2, sort_keys=True))
    client.flush()
    return table
