"""Kernel op contracts, spec'd examples, and gradient agreement with finite differences."""

import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from entadapt import tensor as T
from entadapt.tensor import (
    BatchNormState,
    NonFiniteError,
    Tensor,
    backward,
    finite_diff_grad,
)


def gradient_discrepancy(analytic, numeric, rtol=1e-3, atol=1e-4):
    """Max relative error with an absolute floor (|a-n| below atol passes)."""
    a = np.asarray(analytic, dtype=np.float64)
    n = np.asarray(numeric, dtype=np.float64)
    denom = np.maximum(np.abs(a) + np.abs(n), atol / rtol)
    return float(np.max(np.abs(a - n) / denom)) if a.size else 0.0


def make_state(c, mean=None, var=None, gamma=None, beta=None, eps=1e-5, trainable=False):
    return BatchNormState(
        mean=np.zeros(c, np.float32) if mean is None else np.asarray(mean, np.float32),
        var=np.ones(c, np.float32) if var is None else np.asarray(var, np.float32),
        gamma=Tensor(np.ones(c, np.float32) if gamma is None else gamma, requires_grad=trainable),
        beta=Tensor(np.zeros(c, np.float32) if beta is None else beta, requires_grad=trainable),
        eps=eps,
    )


class TestConv2d:
    def test_identity_kernel(self):
        x = Tensor(np.arange(4, dtype=np.float32).reshape(1, 1, 2, 2))
        w = Tensor(np.ones((1, 1, 1, 1), np.float32))
        b = Tensor(np.zeros(1, np.float32))
        out = T.conv2d(x, w, b)
        np.testing.assert_array_equal(out.data, x.data)

    def test_constant_image_box_kernel(self):
        # hand oracle: every interior output of a 3x3 all-ones kernel on a
        # constant image c is 9c
        c = 0.7
        x = Tensor(np.full((1, 1, 5, 5), c, np.float32))
        w = Tensor(np.ones((1, 1, 3, 3), np.float32))
        b = Tensor(np.zeros(1, np.float32))
        out = T.conv2d(x, w, b, stride=1, pad=0)
        assert out.shape == (1, 1, 3, 3)
        np.testing.assert_allclose(out.data, 9 * c, rtol=1e-6)

    def test_zero_input_gives_bias(self):
        x = Tensor(np.zeros((1, 1, 3, 3), np.float32))
        w = Tensor(np.random.default_rng(0).normal(size=(2, 1, 3, 3)).astype(np.float32))
        b = Tensor(np.array([1.5, -2.0], np.float32))
        out = T.conv2d(x, w, b)
        np.testing.assert_array_equal(out.data[0, 0], 1.5)
        np.testing.assert_array_equal(out.data[0, 1], -2.0)

    def test_output_shape_formula(self):
        x = Tensor(np.zeros((2, 3, 11, 9), np.float32))
        w = Tensor(np.zeros((4, 3, 3, 3), np.float32))
        b = Tensor(np.zeros(4, np.float32))
        out = T.conv2d(x, w, b, stride=2, pad=1)
        assert out.shape == (2, 4, (11 + 2 - 3) // 2 + 1, (9 + 2 - 3) // 2 + 1)

    def test_channel_mismatch(self):
        x = Tensor(np.zeros((1, 2, 4, 4), np.float32))
        w = Tensor(np.zeros((1, 3, 3, 3), np.float32))
        b = Tensor(np.zeros(1, np.float32))
        with pytest.raises(ValueError, match="channel mismatch"):
            T.conv2d(x, w, b)

    def test_empty_batch(self):
        x = Tensor(np.zeros((0, 1, 4, 4), np.float32))
        w = Tensor(np.zeros((2, 1, 3, 3), np.float32))
        b = Tensor(np.zeros(2, np.float32))
        assert T.conv2d(x, w, b, pad=1).shape == (0, 2, 4, 4)


class TestBatchNorm:
    def test_batch_mode_hand_example(self):
        # mean 2, population variance 2/3
        x = Tensor(np.array([1.0, 2.0, 3.0], np.float32).reshape(3, 1, 1, 1))
        state = make_state(1, eps=1e-12)
        out = T.batch_norm(x, state, "batch")
        np.testing.assert_allclose(
            out.data.ravel(), [-1.2247449, 0.0, 1.2247449], atol=1e-5
        )

    def test_stored_identity_stats(self):
        rng = np.random.default_rng(1)
        x = Tensor(rng.normal(size=(4, 3, 5, 5)).astype(np.float32))
        state = make_state(3, eps=1e-12)
        out = T.batch_norm(x, state, "stored")
        np.testing.assert_allclose(out.data, x.data, atol=1e-6)

    def test_constant_channel_batch_mode(self):
        x = Tensor(np.full((4, 2, 3, 3), 5.0, np.float32))
        out = T.batch_norm(x, make_state(2), "batch")
        np.testing.assert_allclose(out.data, 0.0, atol=1e-6)

    def test_batch_mode_standardizes(self):
        rng = np.random.default_rng(2)
        x = Tensor((rng.normal(2.0, 3.0, size=(16, 4, 6, 6))).astype(np.float32))
        out = T.batch_norm(x, make_state(4), "batch")
        mean = out.data.mean(axis=(0, 2, 3))
        var = out.data.var(axis=(0, 2, 3))
        assert np.abs(mean).max() < 1e-4
        assert np.abs(var - 1.0).max() < 1e-3

    def test_stats_override(self):
        rng = np.random.default_rng(3)
        x = Tensor(rng.normal(size=(2, 2, 3, 3)).astype(np.float32))
        state = make_state(2, mean=[5.0, 5.0], var=[4.0, 4.0], eps=1e-12)
        override = (np.zeros(2, np.float32), np.ones(2, np.float32))
        out = T.batch_norm(x, state, "stored", stats=override)
        np.testing.assert_allclose(out.data, x.data, atol=1e-5)

    def test_empty_batch_mode_errors(self):
        x = Tensor(np.zeros((0, 2, 3, 3), np.float32))
        with pytest.raises(ValueError, match="non-empty"):
            T.batch_norm(x, make_state(2), "batch")

    def test_channel_mismatch(self):
        x = Tensor(np.zeros((1, 3, 2, 2), np.float32))
        with pytest.raises(ValueError, match="channel mismatch"):
            T.batch_norm(x, make_state(2), "stored")

    def test_replace_stats_pair(self):
        state = make_state(2)
        state.replace_stats(np.array([1.0, 2.0]), np.array([3.0, 4.0]))
        np.testing.assert_array_equal(state.mean, [1.0, 2.0])
        with pytest.raises(ValueError):
            state.replace_stats(np.zeros(3), np.ones(3))
        with pytest.raises(ValueError):
            state.replace_stats(np.zeros(2), -np.ones(2))


class TestAffineModulate:
    def test_identity_is_bit_exact(self):
        rng = np.random.default_rng(4)
        x = Tensor(rng.normal(size=(2, 3, 4, 4)).astype(np.float32))
        out = T.affine_modulate(x, Tensor(np.ones(3)), Tensor(np.zeros(3)))
        np.testing.assert_array_equal(out.data, x.data)

    def test_scalar_case(self):
        x = Tensor(np.array([[[[0.5]]]], np.float32))
        out = T.affine_modulate(x, Tensor([2.0]), Tensor([1.0]))
        assert out.data.ravel()[0] == np.float32(2.0)

    def test_zero_scale_gives_constant(self):
        rng = np.random.default_rng(5)
        x = Tensor(rng.normal(size=(2, 1, 3, 3)).astype(np.float32))
        out = T.affine_modulate(x, Tensor([0.0]), Tensor([0.25]))
        np.testing.assert_array_equal(out.data, 0.25)

    def test_length_mismatch(self):
        x = Tensor(np.zeros((1, 2, 2, 2), np.float32))
        with pytest.raises(ValueError, match="length mismatch"):
            T.affine_modulate(x, Tensor([1.0]), Tensor([0.0]))

    @settings(max_examples=25, deadline=None)
    @given(
        hnp.arrays(
            np.float32,
            (2, 3, 2, 2),
            elements=st.floats(-10, 10, width=32, allow_nan=False),
        )
    )
    def test_identity_property(self, arr):
        out = T.affine_modulate(Tensor(arr), Tensor(np.ones(3)), Tensor(np.zeros(3)))
        np.testing.assert_array_equal(out.data, np.asarray(arr, np.float32))


class TestSimpleOps:
    def test_relu(self):
        out = T.relu(Tensor(np.array([[-1.0, 0.0, 2.0]], np.float32)))
        np.testing.assert_array_equal(out.data, [[0.0, 0.0, 2.0]])

    def test_avg_pool_of_constant(self):
        x = Tensor(np.full((1, 1, 4, 4), 3.25, np.float32))
        out = T.avg_pool(x, 2)
        np.testing.assert_array_equal(out.data, 3.25)

    def test_avg_pool_divisibility(self):
        with pytest.raises(ValueError, match="divide"):
            T.avg_pool(Tensor(np.zeros((1, 1, 5, 5), np.float32)), 2)

    def test_linear_identity(self):
        x = Tensor(np.array([[1.0, 2.0, 3.0]], np.float32))
        out = T.linear(x, Tensor(np.eye(3, dtype=np.float32)), Tensor(np.zeros(3)))
        np.testing.assert_array_equal(out.data, x.data)

    def test_flatten_shapes(self):
        x = Tensor(np.zeros((2, 3, 4, 5), np.float32))
        assert T.flatten(x).shape == (2, 60)

    def test_add_shape_mismatch(self):
        with pytest.raises(ValueError, match="shape mismatch"):
            T.add(Tensor(np.zeros(2)), Tensor(np.zeros(3)))


class TestSoftmaxAndLosses:
    def test_uniform_probs(self):
        logits = Tensor(np.zeros((3, 10), np.float32))
        np.testing.assert_allclose(T.softmax_probs(logits).data, 0.1, atol=1e-7)

    def test_max_shift_stability(self):
        out = T.softmax_probs(Tensor(np.array([[1000.0, 0.0]], np.float32)))
        np.testing.assert_allclose(out.data, [[1.0, 0.0]], atol=1e-6)

    def test_closed_form(self):
        out = T.softmax_probs(Tensor(np.array([[math.log(3.0), 0.0]], np.float32)))
        np.testing.assert_allclose(out.data, [[0.75, 0.25]], atol=1e-6)

    @settings(max_examples=40, deadline=None)
    @given(
        hnp.arrays(
            np.float32, (3, 5), elements=st.floats(-30, 30, width=32, allow_nan=False)
        ),
        st.floats(-20, 20),
    )
    def test_rows_sum_to_one_and_shift_invariance(self, logits, shift):
        p = T.softmax_probs(Tensor(logits)).data
        np.testing.assert_allclose(p.sum(axis=1), 1.0, atol=1e-6)
        p2 = T.softmax_probs(Tensor(logits + np.float32(shift))).data
        np.testing.assert_allclose(p, p2, atol=1e-5)

    def test_entropy_uniform_is_log_c(self):
        loss = T.entropy_loss(Tensor(np.zeros((4, 10), np.float32)))
        assert abs(loss.item() - math.log(10)) < 1e-6

    def test_entropy_one_hot_limit(self):
        logits = np.zeros((1, 10), np.float32)
        logits[0, 0] = 60.0
        assert T.entropy_loss(Tensor(logits)).item() < 1e-6

    def test_entropy_binary_symmetric(self):
        loss = T.entropy_loss(Tensor(np.zeros((1, 2), np.float32)))
        assert abs(loss.item() - math.log(2)) < 1e-6

    @settings(max_examples=40, deadline=None)
    @given(
        hnp.arrays(
            np.float32, (4, 6), elements=st.floats(-40, 40, width=32, allow_nan=False)
        )
    )
    def test_entropy_bounds(self, logits):
        h = T.entropy_loss(Tensor(logits)).item()
        assert -1e-6 <= h <= math.log(6) + 1e-6

    def test_entropy_log_c_only_at_uniform(self):
        peaked = np.zeros((1, 10), np.float32)
        peaked[0, 0] = 1.0
        assert T.entropy_loss(Tensor(peaked)).item() < math.log(10) - 1e-6

    def test_cross_entropy_perfect(self):
        logits = np.zeros((1, 10), np.float32)
        logits[0, 3] = 60.0
        loss = T.cross_entropy_loss(Tensor(logits), np.array([3]))
        assert loss.item() < 1e-6

    def test_cross_entropy_uniform(self):
        loss = T.cross_entropy_loss(Tensor(np.zeros((2, 10), np.float32)), np.array([0, 7]))
        assert abs(loss.item() - math.log(10)) < 1e-6

    def test_cross_entropy_quarter(self):
        # p(true) = 0.25 -> loss = ln 4
        logits = np.log(np.array([[0.25, 0.25, 0.25, 0.25]], np.float32))
        loss = T.cross_entropy_loss(Tensor(logits), np.array([0]))
        assert abs(loss.item() - math.log(4)) < 1e-5

    def test_cross_entropy_label_range(self):
        with pytest.raises(ValueError, match=r"labels must lie"):
            T.cross_entropy_loss(Tensor(np.zeros((1, 3), np.float32)), np.array([3]))

    def test_cross_entropy_empty_mask(self):
        with pytest.raises(ValueError, match="no examples"):
            T.cross_entropy_loss(
                Tensor(np.zeros((2, 3), np.float32)),
                np.array([0, 1]),
                sample_mask=np.zeros(2),
            )

    def test_single_class_rejected(self):
        with pytest.raises(ValueError, match="2 classes"):
            T.entropy_loss(Tensor(np.zeros((1, 1), np.float32)))


class TestBackward:
    def test_uniform_entropy_gradient_is_zero(self):
        logits = Tensor(np.zeros((2, 10), np.float32), requires_grad=True)
        loss = T.entropy_loss(logits)
        grads = backward(loss, {"logits": logits})
        np.testing.assert_allclose(grads["logits"], 0.0, atol=1e-7)

    def test_affine_beta_gradient_counts_positions(self):
        # d(sum of outputs)/d(beta[c]) = number of positions in channel c;
        # the output sum is built from kernel ops via an all-ones linear head
        rng = np.random.default_rng(6)
        x = Tensor(rng.normal(size=(2, 3, 4, 5)).astype(np.float32))
        gamma = Tensor(np.ones(3), requires_grad=True)
        beta = Tensor(np.zeros(3), requires_grad=True)
        flat = T.flatten(T.affine_modulate(x, gamma, beta))
        w = Tensor(np.ones((2, flat.shape[1]), np.float32))
        logits = T.linear(flat, w, Tensor(np.zeros(2)))
        # both logits equal the output sum s, so cross-entropy is constant ln 2
        # and useless here; instead seed the sum through entropy of [s, 0]
        # by an explicit finite-difference check of the analytic rule
        grads = backward(
            T.cross_entropy_loss(logits, np.array([0, 1])), {"beta": beta}
        )
        # cross-entropy of equal logits has zero gradient; the structural
        # check is that a buffer exists with the right shape
        assert grads["beta"].shape == (3,)

        def f(params):
            out = T.affine_modulate(x, Tensor(params["gamma"]), Tensor(params["beta"]))
            return float(out.data.sum(dtype=np.float64))

        fd = finite_diff_grad(f, {"gamma": gamma.data, "beta": beta.data}, step=1e-2)
        np.testing.assert_allclose(fd["beta"], 2 * 4 * 5, rtol=1e-4)

    def test_gradients_only_for_trainable(self):
        x = Tensor(np.random.default_rng(7).normal(size=(3, 4)).astype(np.float32))
        w = Tensor(np.random.default_rng(8).normal(size=(4, 4)).astype(np.float32), requires_grad=True)
        b = Tensor(np.zeros(4, np.float32))
        loss = T.entropy_loss(T.linear(x, w, b))
        grads = backward(loss, {"w": w})
        assert set(grads) == {"w"}

    def test_not_trainable_param_rejected(self):
        w = Tensor(np.ones((2, 2), np.float32))
        x = Tensor(np.ones((1, 2), np.float32))
        loss = T.entropy_loss(T.linear(x, w, Tensor(np.zeros(2))))
        with pytest.raises(ValueError, match="not marked trainable"):
            backward(loss, {"w": w})

    def test_detached_param_rejected(self):
        w = Tensor(np.ones((2, 2), np.float32), requires_grad=True)
        other = Tensor(np.ones(3, np.float32), requires_grad=True)
        x = Tensor(np.ones((1, 2), np.float32))
        loss = T.entropy_loss(T.linear(x, w, Tensor(np.zeros(2))))
        with pytest.raises(ValueError, match="detached"):
            backward(loss, {"w": w, "other": other})

    def test_loss_not_recorded_rejected(self):
        w = Tensor(np.ones((2, 2), np.float32), requires_grad=True)
        with pytest.raises(ValueError, match="recorded forward"):
            backward(Tensor(1.0), {"w": w})

    def test_no_grad_blocks_recording(self):
        w = Tensor(np.ones((2, 2), np.float32), requires_grad=True)
        x = Tensor(np.ones((1, 2), np.float32))
        with T.no_grad():
            loss = T.entropy_loss(T.linear(x, w, Tensor(np.zeros(2))))
        with pytest.raises(ValueError, match="recorded forward"):
            backward(loss, {"w": w})

    def test_shared_parameter_accumulates(self):
        # the same gamma drives two modulation sites; gradients must add
        x = Tensor(np.ones((1, 2, 2, 2), np.float32))
        gamma = Tensor(np.array([1.0, 2.0]), requires_grad=True)
        beta = Tensor(np.zeros(2))
        y1 = T.affine_modulate(x, gamma, beta)
        y2 = T.affine_modulate(y1, gamma, beta)
        w = Tensor(np.zeros((2, 8), np.float32))
        logits = T.linear(T.flatten(y2), w, Tensor(np.array([0.0, 1.0])))
        loss = T.cross_entropy_loss(logits, np.array([0]))
        grads = backward(loss, {"gamma": gamma})

        def f(params):
            g = Tensor(params["gamma"])
            z1 = T.affine_modulate(x, g, beta)
            z2 = T.affine_modulate(z1, g, beta)
            lg = T.linear(T.flatten(z2), w, Tensor(np.array([0.0, 1.0])))
            return T.cross_entropy_loss(lg, np.array([0])).item()

        fd = finite_diff_grad(f, {"gamma": gamma.data}, step=1e-3)
        assert gradient_discrepancy(grads["gamma"], fd["gamma"]) < 1e-3


class TestFiniteDiff:
    def test_quadratic(self):
        fd = finite_diff_grad(
            lambda p: float(p["p"] ** 2), {"p": np.array(3.0, np.float32)}, step=1e-3
        )
        assert abs(float(fd["p"]) - 6.0) < 1e-3

    def test_constant_function(self):
        fd = finite_diff_grad(lambda p: 1.25, {"p": np.arange(4.0, dtype=np.float32)})
        np.testing.assert_array_equal(fd["p"], 0.0)

    def test_step_validation(self):
        with pytest.raises(ValueError):
            finite_diff_grad(lambda p: 0.0, {"p": np.zeros(1)}, step=0.0)

    def test_cross_oracle_entropy(self):
        rng = np.random.default_rng(9)
        logits = Tensor(rng.normal(size=(4, 5)).astype(np.float32), requires_grad=True)
        loss = T.entropy_loss(logits)
        analytic = backward(loss, {"logits": logits})["logits"]

        def f(params):
            return T.entropy_loss(Tensor(params["logits"])).item()

        fd = finite_diff_grad(f, {"logits": logits.data}, step=1e-3)
        assert gradient_discrepancy(analytic, fd["logits"]) < 1e-3


def _composite_loss(x, conv_w, conv_b, state, gamma, beta, lin_w, lin_b, labels=None):
    h = T.conv2d(x, conv_w, conv_b, stride=1, pad=1)
    h = T.batch_norm(h, state, "stored")
    h = T.affine_modulate(h, gamma, beta)
    h = T.relu(h)
    h = T.avg_pool(h, 2)
    logits = T.linear(T.flatten(h), lin_w, lin_b)
    if labels is None:
        return T.entropy_loss(logits)
    return T.cross_entropy_loss(logits, labels)


@pytest.mark.parametrize("loss_kind", ["entropy", "cross_entropy"])
@pytest.mark.parametrize("mode", ["stored", "batch"])
def test_composite_gradients_match_finite_differences(loss_kind, mode):
    # The finite-difference oracle is only valid away from relu kinks: a step
    # that flips an activation state measures a different function. Resample
    # until every relu input clears a margin larger than any perturbation the
    # probe can cause.
    # Any single-coordinate probe moves a pre-relu value by at most
    # step * max|upstream value| (one kernel tap, one scale, or one shift),
    # so a per-site margin of a few multiples of step suffices.
    step, margin = 2e-3, 1e-2
    n, c, hw, classes = 2, 3, 4, 4
    for seed in range(10, 400):
        rng = np.random.default_rng(seed)
        x = Tensor(rng.normal(size=(n, 2, hw, hw)).astype(np.float32))
        conv_w = Tensor(
            rng.normal(0, 0.5, size=(c, 2, 3, 3)).astype(np.float32), requires_grad=True
        )
        conv_b = Tensor(np.zeros(c, np.float32), requires_grad=True)
        gamma = Tensor(np.ones(c, np.float32), requires_grad=True)
        beta = Tensor(np.zeros(c, np.float32), requires_grad=True)
        state = make_state(
            c, mean=rng.normal(0, 0.2, c), var=rng.uniform(0.5, 1.5, c), trainable=True
        )
        feat = c * (hw // 2) ** 2
        lin_w = Tensor(
            rng.normal(0, 0.3, size=(classes, feat)).astype(np.float32), requires_grad=True
        )
        lin_b = Tensor(np.zeros(classes, np.float32), requires_grad=True)
        labels = rng.integers(0, classes, size=n) if loss_kind == "cross_entropy" else None

        def run(state_mode, capture=None):
            h = T.conv2d(x, conv_w, conv_b, stride=1, pad=1)
            h = T.batch_norm(h, state, state_mode)
            h = T.affine_modulate(h, gamma, beta)
            if capture is not None:
                capture.append(h.data)
            h = T.relu(h)
            h = T.avg_pool(h, 2)
            logits = T.linear(T.flatten(h), lin_w, lin_b)
            if labels is None:
                return T.entropy_loss(logits)
            return T.cross_entropy_loss(logits, labels)

        pre_relu: list = []
        with T.no_grad():
            run(mode, capture=pre_relu)
        if np.abs(pre_relu[0]).min() > margin:
            break
    else:
        pytest.fail("no kink-free sample found")

    params = {
        "conv_w": conv_w,
        "conv_b": conv_b,
        "gamma": gamma,
        "beta": beta,
        "bn_gamma": state.gamma,
        "bn_beta": state.beta,
        "lin_w": lin_w,
        "lin_b": lin_b,
    }
    loss = run(mode)
    analytic = backward(loss, params)

    def f(values):
        saved = {k: params[k].data for k in values}
        try:
            for k, v in values.items():
                params[k].data = np.asarray(v, np.float32)
            with T.no_grad():
                return run(mode).item()
        finally:
            for k, v in saved.items():
                params[k].data = v

    fd = finite_diff_grad(f, {k: p.data for k, p in params.items()}, step=step)
    for name in params:
        err = gradient_discrepancy(analytic[name], fd[name])
        assert err < 1e-3, f"{name} gradient mismatch: {err}"


class TestFiniteContract:
    def test_tensor_rejects_nan(self):
        with pytest.raises(NonFiniteError):
            Tensor(np.array([1.0, np.nan], np.float32))

    def test_tensor_rejects_inf(self):
        with pytest.raises(NonFiniteError):
            Tensor(np.array([np.inf], np.float32))

    def test_op_output_overflow_detected(self):
        big = Tensor(np.full((1, 4), 3e38, np.float32))
        w = Tensor(np.full((4, 4), 3.0, np.float32))
        with pytest.raises(NonFiniteError):
            T.linear(big, w, Tensor(np.zeros(4)))

    def test_shape_invariant(self):
        t = Tensor(np.zeros((3, 4), np.float32))
        assert math.prod(t.shape) == t.data.size
