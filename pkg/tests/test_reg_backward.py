import numpy as np
import pytest

from tvseg.grid_calculus import div, project_unit_disc
from tvseg.reg_activation import (
    ActivationMode,
    RegActConfig,
    reg_relu_onestep,
    reg_softmax_iterative,
    reg_softmax_onestep,
    softmax,
)
from tvseg.reg_backward import (
    GradReport,
    TapeError,
    finite_diff_check,
    lambda_gradient,
    merge_reports,
    project_unit_disc_vjp,
    reg_relu_onestep_backward,
    reg_softmax_onestep_backward,
    reg_softmax_unrolled_backward,
    softmax_jvp,
    update_lambda,
)

def onestep_loss(cfg, w):
    return lambda x: float(np.vdot(w, reg_softmax_onestep(x, cfg)[0]))


def unrolled_loss(cfg, w):
    return lambda x: float(np.vdot(w, reg_softmax_iterative(x, cfg)[0]))


class TestSoftmaxJvp:
    def test_zero_direction(self):
        a = softmax(np.array([[[0.3]], [[-0.2]], [[1.0]]]))
        np.testing.assert_array_equal(softmax_jvp(a, np.zeros_like(a)), np.zeros_like(a))

    def test_constant_direction_is_annihilated(self, rng):
        a = softmax(rng.normal(size=(4, 3, 3)))
        np.testing.assert_allclose(softmax_jvp(a, np.ones_like(a)), 0.0, atol=1e-15)

    def test_uniform_two_classes(self):
        a = np.full((2, 1, 1), 0.5)
        g = np.array([[[1.0]], [[0.0]]])
        np.testing.assert_allclose(softmax_jvp(a, g).ravel(), [0.25, -0.25], atol=1e-15)

    def test_matches_finite_differences(self, rng):
        o = rng.normal(size=(3, 4, 4))
        w = rng.normal(size=o.shape)
        report = finite_diff_check(lambda x: float(np.vdot(w, softmax(x))), o, softmax_jvp(softmax(o), w))
        assert report.passed, report


class TestProjectionVjp:
    def test_identity_inside(self, rng):
        xi = 0.1 * rng.normal(size=(2, 2, 3, 3))
        g = rng.normal(size=xi.shape)
        np.testing.assert_array_equal(project_unit_disc_vjp(xi, g), g)

    def test_radial_direction_is_removed_outside(self):
        xi = np.array([3.0, 4.0]).reshape(2, 1, 1, 1)
        g = np.array([0.6, 0.8]).reshape(2, 1, 1, 1)
        np.testing.assert_allclose(project_unit_disc_vjp(xi, g), 0.0, atol=1e-15)

    def test_matches_finite_differences(self, rng):
        xi = 2.0 * rng.normal(size=(2, 1, 3, 3))
        w = rng.normal(size=xi.shape)
        report = finite_diff_check(lambda x: float(np.vdot(w, project_unit_disc(x))), xi,
                                   project_unit_disc_vjp(xi, w), tolerance=1e-7)
        assert report.passed, report


class TestOneStepBackward:
    @pytest.mark.parametrize('kappa', [0.25, 2.0])
    def test_matches_finite_differences(self, rng, kappa):
        o = rng.normal(size=(3, 4, 4))
        w = rng.normal(size=o.shape)
        cfg = RegActConfig(lam=0.5, kappa=kappa)
        _, tape = reg_softmax_onestep(o, cfg)
        report = finite_diff_check(onestep_loss(cfg, w), o, reg_softmax_onestep_backward(tape, w))
        assert report.passed, report
        assert report.max_relative_error <= 1e-6

    def test_zero_lambda_is_plain_softmax_backward(self, rng):
        o = rng.normal(size=(3, 5, 5))
        d_a = rng.normal(size=o.shape)
        _, tape = reg_softmax_onestep(o, RegActConfig(lam=0.0))
        np.testing.assert_array_equal(reg_softmax_onestep_backward(tape, d_a), softmax_jvp(softmax(o), d_a))

    def test_linear_in_upstream_gradient(self, rng):
        o = rng.normal(size=(3, 4, 5))
        _, tape = reg_softmax_onestep(o, RegActConfig(lam=0.7, kappa=2.0))
        g1, g2 = rng.normal(size=(2,) + o.shape)
        combined = reg_softmax_onestep_backward(tape, 2.0 * g1 - 3.0 * g2)
        separate = 2.0 * reg_softmax_onestep_backward(tape, g1) - 3.0 * reg_softmax_onestep_backward(tape, g2)
        np.testing.assert_allclose(combined, separate, atol=1e-12)

    def test_per_pixel_shift_invariance(self, rng):
        o = rng.normal(size=(3, 4, 4))
        shift = rng.normal(size=(1, 4, 4))
        cfg = RegActConfig(lam=0.6)
        a, tape = reg_softmax_onestep(o, cfg)
        shifted, _ = reg_softmax_onestep(o + shift, cfg)
        np.testing.assert_allclose(shifted, a, atol=1e-12)
        g_o = reg_softmax_onestep_backward(tape, rng.normal(size=o.shape))
        np.testing.assert_allclose(g_o.sum(axis=0), 0.0, atol=1e-10)

    def test_zero_upstream_gradient(self, rng):
        _, tape = reg_softmax_onestep(rng.normal(size=(2, 3, 3)), RegActConfig())
        np.testing.assert_array_equal(reg_softmax_onestep_backward(tape, np.zeros((2, 3, 3))), np.zeros((2, 3, 3)))

    def test_shape_mismatch(self, rng):
        _, tape = reg_softmax_onestep(rng.normal(size=(2, 3, 3)), RegActConfig())
        with pytest.raises(TapeError):
            reg_softmax_onestep_backward(tape, np.zeros((2, 3, 4)))

    def test_mode_mismatch(self, rng):
        _, _, tape = reg_softmax_iterative(rng.normal(size=(2, 3, 3)),
                                           RegActConfig(iterations=2, mode=ActivationMode.ITERATIVE))
        with pytest.raises(TapeError):
            reg_softmax_onestep_backward(tape, np.zeros((2, 3, 3)))

    def test_kind_mismatch(self, rng):
        _, tape = reg_relu_onestep(rng.normal(size=(2, 3, 3)), RegActConfig())
        with pytest.raises(TapeError):
            reg_softmax_onestep_backward(tape, np.zeros((2, 3, 3)))


class TestUnrolledBackward:
    def test_single_iteration_equals_one_step(self, rng):
        o = rng.normal(size=(3, 4, 4))
        d_a = rng.normal(size=o.shape)
        # tau * lam == kappa makes both schemes take the same step
        _, tape = reg_softmax_onestep(o, RegActConfig(lam=1.0, kappa=0.125))
        _, _, unrolled = reg_softmax_iterative(o, RegActConfig(lam=1.0, tau=0.125, iterations=1,
                                                               mode=ActivationMode.ITERATIVE))
        np.testing.assert_allclose(reg_softmax_unrolled_backward(unrolled, d_a),
                                   reg_softmax_onestep_backward(tape, d_a), atol=1e-14)

    @pytest.mark.parametrize('iterations', [1, 3, 5])
    def test_matches_finite_differences(self, rng, iterations):
        o = rng.normal(size=(2, 3, 3))
        w = rng.normal(size=o.shape)
        cfg = RegActConfig(lam=0.8, iterations=iterations, mode=ActivationMode.ITERATIVE)
        _, _, tape = reg_softmax_iterative(o, cfg)
        report = finite_diff_check(unrolled_loss(cfg, w), o, reg_softmax_unrolled_backward(tape, w), tolerance=1e-5)
        assert report.passed, report

    def test_zero_lambda_is_plain_softmax_backward(self, rng):
        o = rng.normal(size=(3, 4, 4))
        d_a = rng.normal(size=o.shape)
        _, _, tape = reg_softmax_iterative(o, RegActConfig(lam=0.0, iterations=4, mode=ActivationMode.ITERATIVE))
        np.testing.assert_allclose(reg_softmax_unrolled_backward(tape, d_a), softmax_jvp(softmax(o), d_a),
                                   atol=1e-15)

    def test_rejects_one_step_tape(self, rng):
        _, tape = reg_softmax_onestep(rng.normal(size=(2, 2, 2)), RegActConfig())
        with pytest.raises(TapeError):
            reg_softmax_unrolled_backward(tape, np.zeros((2, 2, 2)))


class TestReluBackward:
    @pytest.mark.parametrize('kappa', [0.25, 2.0])
    def test_matches_finite_differences(self, rng, kappa):
        n = rng.normal(size=(2, 3, 3))
        # keep every pre-activation well away from the kink at zero
        o = np.sign(n) * (0.5 + np.abs(n))
        w = rng.normal(size=o.shape)
        cfg = RegActConfig(lam=0.1, kappa=kappa)
        _, tape = reg_relu_onestep(o, cfg)
        report = finite_diff_check(lambda x: float(np.vdot(w, reg_relu_onestep(x, cfg)[0])), o,
                                   reg_relu_onestep_backward(tape, w))
        assert report.passed, report


class TestLambdaGradient:
    def test_matches_finite_differences_with_frozen_dual(self, rng):
        o = rng.normal(size=(3, 4, 4))
        w = rng.normal(size=o.shape)
        cfg = RegActConfig(lam=0.4, kappa=2.0)
        _, tape = reg_softmax_onestep(o, cfg)
        shift = div(tape.etas[-1])
        report = finite_diff_check(lambda lam: float(np.vdot(w, softmax(o - lam[0] * shift))),
                                   np.array([cfg.lam]), np.array([lambda_gradient(tape, w)]))
        assert report.passed, report

    def test_constant_logits_give_zero(self):
        o = np.broadcast_to(np.array([0.4, -1.0])[:, None, None], (2, 3, 3)).copy()
        _, tape = reg_softmax_onestep(o, RegActConfig(lam=0.9))
        assert lambda_gradient(tape, np.ones_like(o)) == 0.0

    def test_zero_upstream_gradient(self, rng):
        _, tape = reg_softmax_onestep(rng.normal(size=(2, 3, 3)), RegActConfig())
        assert lambda_gradient(tape, np.zeros((2, 3, 3))) == 0.0

    def test_rejects_iterative_tape(self, rng):
        _, _, tape = reg_softmax_iterative(rng.normal(size=(2, 2, 2)),
                                           RegActConfig(iterations=3, mode=ActivationMode.ITERATIVE))
        with pytest.raises(TapeError):
            lambda_gradient(tape, np.zeros((2, 2, 2)))


class TestUpdateLambda:
    def test_descent_step(self):
        assert update_lambda(0.5, 0.2, 0.5) == pytest.approx(0.4)

    def test_clamped_at_zero(self):
        assert update_lambda(0.05, 1.0, 0.1) == 0.0

    def test_zero_gradient(self):
        assert update_lambda(0.3, 0.0, 0.01) == 0.3

    def test_invalid_rate(self):
        with pytest.raises(ValueError):
            update_lambda(0.3, 1.0, 0.0)


class TestFiniteDiffCheck:
    def test_exact_gradient_passes(self, rng):
        x = rng.normal(size=10)
        report = finite_diff_check(lambda v: float(np.sum(v ** 2)), x, 2.0 * x, tolerance=1e-9)
        assert report.passed
        assert report.max_relative_error <= 1e-9
        assert report.probes == 10

    def test_doubled_gradient_fails(self, rng):
        x = rng.normal(size=10)
        report = finite_diff_check(lambda v: float(np.sum(v ** 2)), x, 4.0 * x)
        assert not report.passed
        assert report.max_relative_error == pytest.approx(1.0, abs=1e-6)

    def test_large_points_are_sampled(self, rng):
        x = rng.normal(size=500)
        report = finite_diff_check(lambda v: float(np.sum(v ** 2)), x, 2.0 * x, max_probes=50)
        assert report.probes == 50
        assert report.passed

    def test_explicit_probes(self, rng):
        x = rng.normal(size=100)
        report = finite_diff_check(lambda v: float(np.sum(v ** 2)), x, 2.0 * x, probes=[0, 5, 99])
        assert report.probes == 3

    def test_point_is_restored(self, rng):
        x = rng.normal(size=6)
        copy = x.copy()
        finite_diff_check(lambda v: float(np.sum(v ** 3)), x, 3.0 * x ** 2)
        np.testing.assert_array_equal(x, copy)

    def test_non_finite_forward_fails(self):
        report = finite_diff_check(lambda v: float('nan'), np.zeros(3), np.zeros(3))
        assert report.non_finite == 3
        assert not report.passed

    @pytest.mark.parametrize('epsilon', [1e-8, 1e-2])
    def test_epsilon_range(self, epsilon):
        with pytest.raises(ValueError):
            finite_diff_check(lambda v: 0.0, np.zeros(2), np.zeros(2), epsilon=epsilon)

    def test_size_mismatch(self):
        with pytest.raises(ValueError):
            finite_diff_check(lambda v: 0.0, np.zeros(3), np.zeros(2))


class TestMergeReports:
    def test_worst_case_wins(self):
        first = GradReport(1e-8, 1e-9, 10, True, 1e-6, 0)
        second = GradReport(1e-3, 1e-4, 5, False, 1e-5, 1)
        merged = merge_reports([first, second])
        assert merged.max_relative_error == 1e-3
        assert merged.probes == 15
        assert merged.non_finite == 1
        assert not merged.passed

    def test_empty(self):
        with pytest.raises(ValueError):
            merge_reports([])
