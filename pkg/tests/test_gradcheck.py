"""Finite-difference verification of every differentiable op's backward map."""

import numpy as np
import pytest

from uharmony import ops
from uharmony.errors import ConfigurationError, VerificationError
from uharmony.gradcheck import grad_check, rel_err
from uharmony.tensor import GradTape, Tensor, apply_op

RNG = np.random.default_rng(2024)


def randt(*shape, lo=-2.0, hi=2.0, away_from=None, margin=0.05):
    x = RNG.uniform(lo, hi, size=shape)
    if away_from is not None:
        # nudge values off a kink so central differences stay valid
        d = x - away_from
        x = np.where(np.abs(d) < margin, away_from + np.sign(d + 1e-12) * margin, x)
    return Tensor(x)


def test_linear_op_exact():
    rep = grad_check(lambda x: ops.scale(x, 3.0), [randt(5)], name="scale3", tol=1e-10)
    assert rep.passed, rep.summary()


@pytest.mark.parametrize(
    "name,fn,make_inputs,tol",
    [
        ("add", ops.add, lambda: [randt(3, 4), randt(3, 4)], 1e-6),
        ("mul", ops.mul, lambda: [randt(3, 4), randt(3, 4)], 1e-6),
        ("scale", lambda a: ops.scale(a, -1.7), lambda: [randt(6)], 1e-6),
        ("add_bias", ops.add_bias, lambda: [randt(2, 3, 2, 2, 2), randt(3)], 1e-6),
        ("pow2", lambda a: ops.pow_int(a, 2), lambda: [randt(8)], 1e-6),
        ("pow3", lambda a: ops.pow_int(a, 3), lambda: [randt(8)], 1e-6),
        ("matmul", ops.matmul, lambda: [randt(3, 4), randt(4, 2)], 1e-6),
        ("linear", ops.linear, lambda: [randt(3, 5), randt(2, 5), randt(2)], 1e-6),
        ("softplus", ops.softplus, lambda: [randt(10)], 1e-6),
        (
            "leaky_relu",
            ops.leaky_relu,
            lambda: [randt(12, away_from=0.0)],
            1e-6,
        ),
        ("conv3d_p0", ops.conv3d, lambda: [randt(1, 2, 4, 4, 4), randt(3, 2, 3, 3, 3)], 1e-6),
        (
            "conv3d_p1s2",
            lambda x, k: ops.conv3d(x, k, stride=2, padding=1),
            lambda: [randt(2, 2, 5, 5, 5), randt(2, 2, 3, 3, 3)],
            1e-6,
        ),
        ("downsample2", ops.downsample2, lambda: [randt(1, 2, 4, 4, 4)], 1e-6),
        ("upsample2", ops.upsample2, lambda: [randt(1, 2, 3, 3, 3)], 1e-6),
        ("concat", ops.concat_channels, lambda: [randt(1, 2, 3, 3, 3), randt(1, 1, 3, 3, 3)], 1e-6),
        (
            "slice_channels",
            lambda x: ops.slice_channels(x, [0, 2]),
            lambda: [randt(1, 4, 2, 2, 2)],
            1e-6,
        ),
        ("gap", ops.global_avg_pool, lambda: [randt(2, 3, 3, 3, 3)], 1e-6),
        ("reduce_mean", lambda x: ops.reduce_spatial(x, "mean"), lambda: [randt(2, 2, 3, 3, 3)], 1e-6),
        ("reduce_var", lambda x: ops.reduce_spatial(x, "var"), lambda: [randt(2, 2, 3, 3, 3)], 1e-6),
        ("softmax", ops.softmax, lambda: [randt(8)], 1e-6),
        ("sum_all", ops.sum_all, lambda: [randt(2, 3)], 1e-6),
        ("mean_all", ops.mean_all, lambda: [randt(2, 3)], 1e-6),
        ("adapt", lambda x: ops.adapt_modalities(x, 3), lambda: [randt(1, 2, 3, 3, 3)], 1e-6),
    ],
)
def test_op_backward(name, fn, make_inputs, tol):
    rep = grad_check(fn, make_inputs(), name=name, tol=tol, rng=np.random.default_rng(1))
    assert rep.passed, rep.summary()


def test_softmax_random_8_vector():
    rep = grad_check(ops.softmax, [randt(8)], name="softmax8", tol=1e-6)
    assert rep.passed, rep.summary()


def test_requires_float64():
    with pytest.raises(ConfigurationError):
        grad_check(ops.softmax, [Tensor(np.zeros(3, dtype=np.float32))])


def test_nonfinite_analytic_gradient_is_hard_failure():
    def bad_op(x):
        return apply_op("bad", (x,), x.data * 1.0, lambda g: (g * np.nan,))

    with pytest.raises(VerificationError, match="bad_case"):
        grad_check(bad_op, [randt(4)], name="bad_case")


def test_rel_err_denominator():
    assert rel_err(0.0, 0.0) == 0.0
    assert rel_err(1e-12, 0.0) == pytest.approx(1e-12 / 1e-8)


def test_deliberately_wrong_backward_is_caught():
    def wrong(x):
        return apply_op("wrong", (x,), x.data * 2.0, lambda g: (g * 3.0,))

    rep = grad_check(wrong, [randt(5)], name="wrong", tol=1e-4)
    assert not rep.passed


def test_max_coords_sampling():
    rep = grad_check(
        ops.conv3d,
        [randt(1, 2, 6, 6, 6), randt(2, 2, 3, 3, 3)],
        name="conv_sampled",
        tol=1e-6,
        max_coords=25,
    )
    assert rep.passed
    assert all(r.n_checked <= 25 for r in rep.inputs)
