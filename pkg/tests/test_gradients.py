"""Finite-difference checks of every differentiable operator and the training objective."""

import numpy as np
import pytest

from lfsynth.diffcore import (
    Tape,
    Tensor,
    backward,
    bilinear_resize,
    conv2d,
    conv2d_transpose,
    gradcheck,
    grid_sample,
    leaky_relu,
    ops,
    reduce_mean_var,
    relative_error,
)
from lfsynth.errors import ArgumentError
from lfsynth.lightfield import LightField
from lfsynth.losses import LossWeights, global_lf_loss, local_lf_loss, total_variation
from lfsynth.synthgen import Sample
from lfsynth.trainer import compute_loss

TOLERANCE = 1e-6


def weighted_sum(t: Tensor, seed: int = 99) -> Tensor:
    """Scalar projection <t, w> with fixed random weights."""
    w = np.random.default_rng(seed).normal(size=t.shape)
    return ops.reduce_sum(ops.mul(t, Tensor(w)))


class TestGradcheckHelper:
    """Tests for the checker itself."""

    def test_relative_error_of_equal_vectors(self):
        """Identical gradients have zero relative error."""
        assert relative_error(np.ones(3), np.ones(3)) == 0.0

    def test_detects_wrong_gradient(self):
        """A deliberately broken backward rule fails the check."""
        from lfsynth.diffcore.tensor import emit

        def broken_square(t: Tensor) -> Tensor:
            return emit("broken", (t,), t.data * t.data, lambda g: (g * t.data,))

        report = gradcheck(lambda x: ops.reduce_sum(broken_square(x)), [np.array([1.0, 2.0])])

        assert not report.passed()

    def test_sampled_coordinates(self):
        """Sampling limits how many coordinates are perturbed."""
        x = np.random.default_rng(0).normal(size=(10, 10))
        report = gradcheck(lambda t: ops.reduce_sum(ops.square(t)), [x], sample=7)

        assert report.inputs[0].checked == 7
        assert report.passed(TOLERANCE)

    def test_eps_must_be_positive(self):
        """A zero step is rejected."""
        with pytest.raises(ArgumentError):
            gradcheck(lambda t: ops.reduce_sum(t), [np.ones(2)], eps=0.0)


class TestOperatorGradients:
    """Analytic gradients agree with central differences."""

    def test_elementwise_chain(self, rng):
        """add, sub, mul, neg, scale and square compose correctly."""
        a, b = rng.normal(size=(3, 4)), rng.normal(size=(3, 4))

        def fn(x, y):
            z = ops.sub(ops.mul(x, y), ops.scale(ops.neg(ops.square(x)), 0.5))
            return weighted_sum(ops.add(z, y))

        assert gradcheck(fn, [a, b]).passed(TOLERANCE)

    def test_absolute_away_from_zero(self, rng):
        """|x| away from its kink."""
        a = rng.uniform(0.5, 1.0, size=(4,)) * rng.choice([-1.0, 1.0], size=4)

        assert gradcheck(lambda x: weighted_sum(ops.absolute(x)), [a]).passed(TOLERANCE)

    def test_leaky_relu_away_from_zero(self, rng):
        """Both branches of the leaky ReLU."""
        a = rng.uniform(0.5, 1.0, size=(6,)) * rng.choice([-1.0, 1.0], size=6)

        assert gradcheck(lambda x: weighted_sum(leaky_relu(x, 0.2)), [a]).passed(TOLERANCE)

    def test_clip_inside_range(self, rng):
        """Clip passes gradients where values are strictly inside."""
        a = rng.uniform(0.2, 0.8, size=(5,))

        assert gradcheck(lambda x: weighted_sum(ops.clip(x, 0.0, 1.0)), [a]).passed(TOLERANCE)

    def test_reductions_and_shapes(self, rng):
        """sum, mean, reshape, transpose, getitem, stack and concat."""
        a = rng.normal(size=(2, 3, 4))

        def fn(x):
            y = ops.transpose(ops.reshape(x, (6, 4)), (1, 0))
            parts = [ops.mean(y, 0), ops.reduce_sum(y[1:3], 0)]
            stacked = ops.stack(parts)
            return weighted_sum(ops.concat([stacked, ops.reshape(x[0], (2, 6))], axis=1))

        assert gradcheck(fn, [a]).passed(TOLERANCE)

    def test_mean_and_variance(self, rng):
        """Angular mean and unbiased variance over two axes."""
        a = rng.normal(size=(3, 3, 4))

        def fn(x):
            m, v = reduce_mean_var(x, (0, 1))
            return ops.add(weighted_sum(m, 1), weighted_sum(v, 2))

        assert gradcheck(fn, [a]).passed(TOLERANCE)

    @pytest.mark.parametrize("stride", [1, 2])
    def test_conv2d(self, rng, stride):
        """Input, kernel and bias gradients of the same-padded convolution."""
        x = rng.normal(size=(5, 6, 2))
        k = rng.normal(size=(3, 3, 2, 3))
        b = rng.normal(size=(3,))

        def fn(xt, kt, bt):
            return weighted_sum(conv2d(xt, kt, bt, stride=stride))

        assert gradcheck(fn, [x, k, b]).passed(TOLERANCE)

    def test_conv2d_transpose(self, rng):
        """Input, kernel and bias gradients of the transpose convolution."""
        x = rng.normal(size=(3, 4, 3))
        k = rng.normal(size=(3, 3, 2, 3))
        b = rng.normal(size=(2,))

        def fn(xt, kt, bt):
            return weighted_sum(conv2d_transpose(xt, kt, bt, stride=2))

        assert gradcheck(fn, [x, k, b]).passed(TOLERANCE)

    def test_grid_sample(self, rng):
        """Source and coordinate gradients at fractional in-frame positions."""
        source = rng.normal(size=(2, 5, 6, 2))
        cells = rng.integers(0, 4, size=(2, 3, 3, 2)).astype(float)
        coords = cells + rng.uniform(0.2, 0.8, size=cells.shape)

        def fn(src, crd):
            return weighted_sum(grid_sample(src, crd))

        assert gradcheck(fn, [source, coords]).passed(TOLERANCE)

    def test_grid_sample_shared_source(self, rng):
        """Gradients into a source shared across coordinate grids accumulate."""
        source = rng.normal(size=(4, 4, 1))
        coords = rng.integers(0, 3, size=(3, 2, 2, 2)) + rng.uniform(0.2, 0.8, size=(3, 2, 2, 2))

        assert gradcheck(
            lambda s, c: weighted_sum(grid_sample(s, c)), [source, coords]
        ).passed(TOLERANCE)

    def test_bilinear_resize(self, rng):
        """Resize gradient over a batched field."""
        a = rng.normal(size=(2, 3, 4, 1))

        assert gradcheck(lambda x: weighted_sum(bilinear_resize(x, 2)), [a]).passed(TOLERANCE)


class TestLossGradients:
    """Gradients of the light-field objective terms."""

    def test_global_and_local_losses(self, rng):
        """Mean/variance L1 losses away from their kinks."""
        truth = rng.uniform(size=(3, 3, 4, 4, 1))
        pred = rng.uniform(size=(3, 3, 4, 4, 1))

        def fn(p):
            lf = LightField(p)
            target = LightField(Tensor(truth))
            return ops.add(global_lf_loss(lf, target), local_lf_loss(lf, target))

        assert gradcheck(fn, [pred], sample=40).passed(1e-5)

    def test_total_variation(self, rng):
        """Squared-difference smoothness term."""
        flows = rng.normal(size=(2, 2, 4, 5, 2))

        assert gradcheck(total_variation, [flows]).passed(TOLERANCE)


class TestNetworkGradient:
    """End-to-end gradient of the loss with respect to network parameters."""

    def test_kernel_gradient_matches_differences(self, tiny_params, rng):
        """Backward through the whole network agrees with perturbing kernel entries."""
        lr = rng.uniform(0.2, 0.8, size=(3, 3, 8, 8, 1))
        sample = Sample(center=lr[1, 1].copy(), lr=lr, hr=rng.uniform(size=(3, 3, 16, 16, 1)))
        weights = LossWeights()
        name = "encoder.1.conv1.kernel"

        tape = Tape()
        report = compute_loss(tiny_params, sample, weights, tape=tape)
        grads = backward(report.total_tensor, tape)
        analytic = grads[tiny_params[name]]

        eps = 1e-6
        base = tiny_params[name].numpy()
        positions = [(0, 0, 0, 0), (1, 1, 0, 1), (2, 1, 0, 0), (1, 2, 0, 1)]
        numeric, selected = [], []
        for pos in positions:
            plus, minus = base.copy(), base.copy()
            plus[pos] += eps
            minus[pos] -= eps
            up = compute_loss(tiny_params.replace_values({name: plus}), sample, weights).total
            down = compute_loss(tiny_params.replace_values({name: minus}), sample, weights).total
            numeric.append((up - down) / (2 * eps))
            selected.append(analytic[pos])

        assert relative_error(np.array(selected), np.array(numeric)) < 1e-3
