"""Two-stage training: angular decoder alone with the spatial decoder frozen, then joint.

Every iteration draws its randomness from ``default_rng([seed, iteration])`` so
an interrupted run resumed from its last checkpoint follows the same trajectory
as an uninterrupted one.
"""

from __future__ import annotations

import json
import logging
from collections.abc import Sequence
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import numpy as np
from pydantic import BaseModel, Field, field_validator, model_validator

from lfsynth.diffcore import Tape, Tensor, backward
from lfsynth.errors import ConfigError, NumericError, TrainingDivergedError
from lfsynth.lightfield.field import LightField
from lfsynth.losses import LossReport, LossWeights, TvTarget, total_objective
from lfsynth.model import (
    ModelParams,
    NetConfig,
    build,
    forward,
    read_checkpoint,
    save_checkpoint,
)
from lfsynth.observability import ObservabilityClient, Span, get_observability_client
from lfsynth.synthgen import Sample, load_corpus

logger = logging.getLogger(__name__)

LOG_NAME = "train_log.jsonl"
LAST_CHECKPOINT = "last.ckpt"
FINAL_CHECKPOINT = "final.ckpt"
STAGE_SPANS = {1: "stage-1-angular", 2: "stage-2-joint"}


class TrainConfig(BaseModel):
    """Every knob of a training run; loaded from JSON."""

    total_iters: int = Field(default=1200, ge=1)
    stage1_iters: int = Field(default=300, ge=0)
    batch_size: int = Field(default=1, ge=1)
    lr: float = Field(default=1e-4, ge=0.0, allow_inf_nan=False)
    beta1: float = Field(default=0.9, ge=0.0, lt=1.0)
    beta2: float = Field(default=0.999, ge=0.0, lt=1.0)
    eps: float = Field(default=1e-8, gt=0.0)
    weights: LossWeights = Field(default_factory=LossWeights)
    gamma_range: tuple[float, float] = (0.4, 1.0)
    crop: tuple[int, int] | None = None
    crop_jitter: float = Field(default=0.125, ge=0.0, le=0.5)
    seed: int = 0
    checkpoint_every: int = Field(default=100, ge=0)
    net: NetConfig = Field(default_factory=NetConfig)
    stage1_zero_sr: bool = False
    tv_target: TvTarget = "flow"

    @field_validator("gamma_range")
    @classmethod
    def _check_gamma(cls, value: tuple[float, float]) -> tuple[float, float]:
        low, high = value
        if not (0.0 < low <= high < float("inf")):
            raise ValueError(f"gamma_range must satisfy 0 < low <= high, got {value}")
        return value

    @model_validator(mode="after")
    def _check_schedule(self) -> TrainConfig:
        if self.stage1_iters > self.total_iters:
            raise ValueError(
                f"stage1_iters ({self.stage1_iters}) exceeds total_iters ({self.total_iters})"
            )
        return self

    @property
    def crop_hw(self) -> tuple[int, int]:
        return tuple(self.crop) if self.crop is not None else tuple(self.net.input_hw)

    def check(self) -> None:
        self.net.check()
        step = 2**self.net.depth
        h, w = self.crop_hw
        if h % step or w % step:
            raise ConfigError(f"crop {self.crop_hw} must be divisible by 2^depth = {step}")

    def stage(self, iteration: int) -> int:
        return 1 if iteration < self.stage1_iters else 2


@dataclass(frozen=True)
class AugmentRecord:
    """Gamma exponent and LR crop window applied to one sample."""

    gamma: float
    top: int
    left: int
    height: int
    width: int

    def to_dict(self) -> dict[str, Any]:
        return {
            "gamma": self.gamma,
            "top": self.top,
            "left": self.left,
            "height": self.height,
            "width": self.width,
        }


def apply_augment(sample: Sample, record: AugmentRecord) -> Sample:
    """Apply a recorded gamma and crop to the input view, LR field and HR field alike."""
    t, lft, h, w = record.top, record.left, record.height, record.width
    lr = sample.lr[:, :, t : t + h, lft : lft + w]
    hr = sample.hr[:, :, 2 * t : 2 * (t + h), 2 * lft : 2 * (lft + w)]
    center = sample.center[t : t + h, lft : lft + w]
    if record.gamma != 1.0:
        lr, hr, center = (np.power(a, record.gamma) for a in (lr, hr, center))
    crop = (slice(None), slice(None), slice(t, t + h), slice(lft, lft + w))
    return Sample(
        center=np.array(center),
        lr=np.array(lr),
        hr=np.array(hr),
        scene_id=sample.scene_id,
        view_disparity=sample.view_disparity[crop] if sample.view_disparity is not None else None,
        occlusion=sample.occlusion[crop] if sample.occlusion is not None else None,
    )


def augment(
    sample: Sample,
    rng: np.random.Generator,
    gamma_range: tuple[float, float] = (0.4, 1.0),
    crop: tuple[int, int] | None = None,
    jitter: float = 0.125,
) -> tuple[Sample, AugmentRecord]:
    """Random gamma plus a crop near the center, within +-jitter of each extent."""
    h, w = sample.lr.shape[2:4]
    ch, cw = crop if crop is not None else (h, w)
    if ch > h or cw > w:
        raise ConfigError(f"crop {(ch, cw)} larger than field extent {(h, w)}")
    gamma = float(rng.uniform(*gamma_range))

    def offset(extent: int, size: int) -> int:
        base = (extent - size) // 2
        spread = int(jitter * extent)
        shift = int(rng.integers(-spread, spread + 1)) if spread else 0
        return int(np.clip(base + shift, 0, extent - size))

    record = AugmentRecord(gamma=gamma, top=offset(h, ch), left=offset(w, cw), height=ch, width=cw)
    return apply_augment(sample, record), record


@dataclass
class AdamState:
    """Adam moments per trainable parameter and the shared step counter."""

    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    step: int = 0

    def update(
        self,
        params: ModelParams,
        grads: dict[str, np.ndarray],
        lr: float,
        beta1: float = 0.9,
        beta2: float = 0.999,
        eps: float = 1e-8,
    ) -> ModelParams:
        """One Adam step over non-frozen parameters; frozen ones keep values and moments."""
        self.step += 1
        correction1 = 1.0 - beta1**self.step
        correction2 = 1.0 - beta2**self.step
        updates: dict[str, np.ndarray] = {}
        for name in params.trainable_names():
            g = grads.get(name)
            if g is None:
                g = np.zeros(params[name].shape)
            m = beta1 * self.m.get(name, np.zeros_like(g)) + (1.0 - beta1) * g
            v = beta2 * self.v.get(name, np.zeros_like(g)) + (1.0 - beta2) * g * g
            self.m[name], self.v[name] = m, v
            step = lr * (m / correction1) / (np.sqrt(v / correction2) + eps)
            updates[name] = params[name].data - step
        return params.replace_values(updates)

    def to_extras(self) -> dict[str, np.ndarray]:
        extras = {f"adam.m.{k}": a for k, a in self.m.items()}
        extras.update({f"adam.v.{k}": a for k, a in self.v.items()})
        return extras

    @classmethod
    def from_extras(cls, extras: dict[str, np.ndarray], step: int) -> AdamState:
        state = cls(step=step)
        for key, arr in extras.items():
            if key.startswith("adam.m."):
                state.m[key[len("adam.m.") :]] = arr
            elif key.startswith("adam.v."):
                state.v[key[len("adam.v.") :]] = arr
        return state


@dataclass
class TrainState:
    iteration: int
    params: ModelParams
    adam: AdamState = field(default_factory=AdamState)
    history: list[dict[str, Any]] = field(default_factory=list)


def _frozen_for(stage: int) -> frozenset[str]:
    return frozenset({"spatial"}) if stage == 1 else frozenset()


def _check_report(report: LossReport, iteration: int) -> None:
    for term, value in report.terms().items():
        if not np.isfinite(value):
            raise TrainingDivergedError(iteration, term)


def compute_loss(
    params: ModelParams,
    sample: Sample,
    weights: LossWeights,
    tv_target: TvTarget = "flow",
    tape: Tape | None = None,
) -> LossReport:
    """Forward pass and total objective on one sample (records on ``tape`` if given)."""

    def run() -> LossReport:
        out = forward(params, Tensor(sample.center), strict=False)
        return total_objective(
            out.lf_lr,
            LightField.from_array(sample.lr, check_range=False),
            out.lf_hr,
            LightField.from_array(sample.hr, check_range=False),
            out.flow,
            weights,
            tv_target=tv_target,
        )

    if tape is None:
        return run()
    with tape:
        return run()


def train_step(
    state: TrainState,
    batch: Sample | Sequence[Sample],
    config: TrainConfig,
) -> tuple[TrainState, LossReport]:
    """Forward, objective, backward, and an Adam update that skips frozen groups.

    Raises:
        TrainingDivergedError: A loss term or gradient became non-finite.
    """
    samples = [batch] if isinstance(batch, Sample) else list(batch)
    stage = config.stage(state.iteration)
    params = state.params
    if params.frozen != _frozen_for(stage):
        params = params.with_frozen(_frozen_for(stage))
    weights = config.weights
    if stage == 1 and config.stage1_zero_sr:
        weights = weights.model_copy(update={"lambda_sr": 0.0})

    grads: dict[str, np.ndarray] = {}
    reports: list[LossReport] = []
    for sample in samples:
        tape = Tape()
        try:
            report = compute_loss(params, sample, weights, config.tv_target, tape)
            _check_report(report, state.iteration)
            leaf_grads = backward(report.total_tensor, tape)
        except TrainingDivergedError:
            raise
        except NumericError as e:
            raise TrainingDivergedError(state.iteration, e.operation or "total") from e
        reports.append(report)
        for name in params.trainable_names():
            g = leaf_grads.get(params[name])
            if g is not None:
                grads[name] = grads[name] + g if name in grads else g.copy()

    if len(samples) > 1:
        grads = {k: g / len(samples) for k, g in grads.items()}
    new_params = state.adam.update(
        params, grads, config.lr, config.beta1, config.beta2, config.eps
    )
    report = reports[0] if len(reports) == 1 else _average_reports(reports)
    state.params = new_params
    state.history.append(report.to_log_record(state.iteration, stage))
    state.iteration += 1
    return state, report


def _average_reports(reports: list[LossReport]) -> LossReport:
    def avg(attr: str) -> float:
        return float(np.mean([getattr(r, attr) for r in reports]))

    return LossReport(
        global_loss=avg("global_loss"),
        local_loss=avg("local_loss"),
        tv=avg("tv"),
        sr=avg("sr"),
        pixel=avg("pixel"),
        total=avg("total"),
        total_tensor=Tensor(avg("total")),
    )


@dataclass
class FitResult:
    checkpoint: Path
    log: Path
    state: TrainState
    final_report: LossReport | None


def _save_state(state: TrainState, path: Path) -> Path:
    return save_checkpoint(
        state.params,
        path,
        extras=state.adam.to_extras(),
        metadata={"iteration": state.iteration, "adam_step": state.adam.step},
    )


def _restore(config: TrainConfig, out_dir: Path, resume: bool) -> TrainState:
    last = out_dir / LAST_CHECKPOINT
    if resume and last.is_file():
        ckpt = read_checkpoint(last, expected=config.net)
        iteration = int(ckpt.metadata.get("iteration", 0))
        adam = AdamState.from_extras(ckpt.extras, int(ckpt.metadata.get("adam_step", 0)))
        history: list[dict[str, Any]] = []
        log = out_dir / LOG_NAME
        if log.is_file():
            kept = []
            for line in log.read_text().splitlines():
                record = json.loads(line)
                if "iter" not in record:
                    kept.append(line)
                elif record["iter"] < iteration:
                    kept.append(line)
                    history.append({k: v for k, v in record.items() if k != "augment"})
            # entries written after the checkpoint are replayed
            log.write_text("".join(f"{line}\n" for line in kept))
        logger.info(f"Resuming from {last} at iteration {iteration}")
        return TrainState(iteration=iteration, params=ckpt.params, adam=adam, history=history)
    return TrainState(iteration=0, params=build(config.net, seed=config.seed))


def fit(
    config: TrainConfig,
    corpus_manifest: str | Path,
    out_dir: str | Path,
    resume: bool = False,
    client: ObservabilityClient | None = None,
) -> FitResult:
    """Run both stages over the corpus, writing checkpoints and a JSON-lines loss log."""
    config.check()
    samples = load_corpus(corpus_manifest)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    log_path = out / LOG_NAME
    state = _restore(config, out, resume)
    if state.iteration == 0:
        header = {"type": "header", "config": config.model_dump(mode="json")}
        log_path.write_text(json.dumps(header, sort_keys=True) + "\n")

    client = client or get_observability_client()
    trace = client.create_trace(name="training-run", run_id=out.name)
    trace.set_input({"config": config.model_dump(mode="json"), "corpus": str(corpus_manifest)})
    trace.add_tag("residual_order", config.net.residual_order.value)
    trace.set_metadata(
        {
            "seed": config.seed,
            "angular": config.net.angular,
            "net_fingerprint": config.net.fingerprint(),
            "start_iter": state.iteration,
        }
    )
    logger.info(f"Tracing training run {trace.get_context()}")

    span: Span | None = None
    current_stage = 0
    report: LossReport | None = None
    try:
        with log_path.open("a") as log:
            for it in range(state.iteration, config.total_iters):
                stage = config.stage(it)
                if stage != current_stage:
                    if span is not None:
                        span.end()
                    span = trace.create_span(STAGE_SPANS[stage])
                    span.set_input({"start_iter": it})
                    current_stage = stage
                    logger.info(f"Stage {stage} begins at iteration {it}")

                rng = np.random.default_rng([config.seed, it])
                picks = rng.integers(0, len(samples), size=config.batch_size)
                batch, records = [], []
                for idx in picks:
                    augmented, record = augment(
                        samples[int(idx)],
                        rng,
                        config.gamma_range,
                        config.crop_hw,
                        config.crop_jitter,
                    )
                    batch.append(augmented)
                    records.append(record.to_dict())
                state, report = train_step(state, batch, config)
                entry = state.history[-1] | {"augment": records}
                log.write(json.dumps(entry, sort_keys=True) + "\n")
                log.flush()
                logger.debug(f"iter {it}: total {report.total:.6f}")

                every = config.checkpoint_every
                if every and state.iteration % every == 0:
                    write = span.create_span("checkpoint-write")
                    write.set_input({"iteration": state.iteration})
                    _save_state(state, out / LAST_CHECKPOINT)
                    write.end()
                    span.add_event("checkpoint", {"iteration": state.iteration})
    except TrainingDivergedError as e:
        if span is not None:
            span.set_status("error")
            span.end()
        trace.set_output({"error": str(e), "iteration": e.iteration})
        client.flush()
        logger.error(str(e))
        raise

    _save_state(state, out / LAST_CHECKPOINT)
    final = save_checkpoint(
        state.params.with_frozen(()),
        out / FINAL_CHECKPOINT,
        metadata={"iteration": state.iteration},
    )
    if span is not None:
        if report is not None:
            span.set_output(report.terms())
        span.set_status("ok")
        span.end()
    trace.set_output({"iterations": state.iteration, "final": report.terms() if report else None})
    client.flush()
    logger.info(f"Training finished after {state.iteration} iterations: {final}")
    return FitResult(checkpoint=final, log=log_path, state=state, final_report=report)
