"""Finite-difference gradient checker."""

from __future__ import annotations

import logging
from collections.abc import Callable, Sequence

import numpy as np
from pydantic import BaseModel, Field

from lfsynth.diffcore.tensor import Tape, Tensor, backward
from lfsynth.errors import ArgumentError

logger = logging.getLogger(__name__)


class InputCheck(BaseModel):
    """Comparison for one input tensor."""

    index: int
    shape: list[int]
    checked: int = Field(description="Number of coordinates perturbed")
    rel_error: float


class GradcheckReport(BaseModel):
    """Per-input relative errors between analytic and central-difference gradients."""

    eps: float
    inputs: list[InputCheck]

    @property
    def max_rel_error(self) -> float:
        return max((c.rel_error for c in self.inputs), default=0.0)

    def passed(self, tolerance: float = 1e-4) -> bool:
        return self.max_rel_error <= tolerance


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    """||a - n|| / max(||a||, ||n||, 1e-12)."""
    diff = float(np.linalg.norm(analytic - numeric))
    scale = max(float(np.linalg.norm(analytic)), float(np.linalg.norm(numeric)), 1e-12)
    return diff / scale


def _evaluate(fn: Callable[..., Tensor], values: Sequence[np.ndarray]) -> float:
    return fn(*[Tensor(v) for v in values]).item()


def gradcheck(
    fn: Callable[..., Tensor],
    inputs: Sequence[np.ndarray | Tensor],
    eps: float = 1e-5,
    sample: int | None = None,
    seed: int = 0,
) -> GradcheckReport:
    """Compare reverse-mode gradients of a scalar function with central differences.

    Args:
        fn: Maps tensors (one per input) to a scalar tensor.
        inputs: Points at which to differentiate.
        eps: Finite-difference step.
        sample: If set, perturb at most this many randomly chosen coordinates per
            input (the full gradient is still computed analytically).
        seed: Seed for coordinate sampling.

    Returns:
        GradcheckReport with one entry per input.
    """
    if not eps > 0:
        raise ArgumentError(f"eps must be positive, got {eps}")
    values = [np.array(x.data if isinstance(x, Tensor) else x, dtype=np.float64) for x in inputs]
    leaves = [Tensor(v, requires_grad=True) for v in values]
    with Tape() as tape:
        loss = fn(*leaves)
    grads = backward(loss, tape)
    analytic = [grads.get(leaf, np.zeros(leaf.shape)) for leaf in leaves]

    rng = np.random.default_rng(seed)
    checks: list[InputCheck] = []
    for idx, base in enumerate(values):
        flat_count = base.size
        coords = np.arange(flat_count)
        if sample is not None and sample < flat_count:
            coords = np.sort(rng.choice(flat_count, size=sample, replace=False))
        numeric = np.zeros(len(coords))
        for j, flat in enumerate(coords):
            position = np.unravel_index(flat, base.shape)
            perturbed = [v.copy() for v in values]
            perturbed[idx][position] = base[position] + eps
            plus = _evaluate(fn, perturbed)
            perturbed[idx][position] = base[position] - eps
            minus = _evaluate(fn, perturbed)
            numeric[j] = (plus - minus) / (2.0 * eps)
        selected = analytic[idx].reshape(-1)[coords]
        checks.append(
            InputCheck(
                index=idx,
                shape=list(base.shape),
                checked=len(coords),
                rel_error=relative_error(selected, numeric),
            )
        )
    report = GradcheckReport(eps=eps, inputs=checks)
    logger.debug(f"gradcheck: max relative error {report.max_rel_error:.3e}")
    return report
