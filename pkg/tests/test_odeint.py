import numpy as np
import pytest

from obsnode import autodiff as ad
from obsnode.autodiff import Tape, Tensor, grad_check
from obsnode.errors import NumericError
from obsnode.odeint import (ControlPath, IntegrationConfig, convergence_order,
                            integrate)


def decay(z, a, params):
    return ad.scale(z, -1.0)


CONST_CONTROL = ControlPath(np.array([0.0]), np.array([[0.0]]))


class TestControlPath:
    def test_value_lookup(self):
        c = ControlPath(np.array([0.0, 1.0, 2.5]),
                        np.array([[1.0], [2.0], [3.0]]))
        assert c.value_at(0.0)[0] == 1.0
        assert c.value_at(0.99)[0] == 1.0
        assert c.value_at(1.0)[0] == 2.0
        assert c.value_at(10.0)[0] == 3.0
        # times before the first knot clamp to the first value
        assert c.value_at(-1.0)[0] == 1.0

    def test_nonincreasing_knots_rejected(self):
        with pytest.raises(ValueError):
            ControlPath(np.array([0.0, 0.0]), np.zeros((2, 1)))

    def test_value_count_must_match(self):
        with pytest.raises(ValueError):
            ControlPath(np.array([0.0, 1.0]), np.zeros((3, 1)))


class TestIntegrationConfig:
    def test_bad_method(self):
        with pytest.raises(ValueError):
            IntegrationConfig(method="heun")

    def test_bad_step(self):
        with pytest.raises(ValueError):
            IntegrationConfig(step_size=0.0)


class TestIntegrate:
    def test_exponential_decay_rk4(self):
        cfg = IntegrationConfig(method="rk4", step_size=0.05)
        (zT,) = integrate(decay, Tensor([1.0]), CONST_CONTROL, 0.0, 1.0, cfg, [1.0])
        assert abs(zT.data[0] - np.exp(-1.0)) < 1e-7

    def test_query_at_t0_returns_initial_state(self):
        cfg = IntegrationConfig(step_size=0.1)
        z0, zT = integrate(decay, Tensor([2.0]), CONST_CONTROL, 0.0, 1.0, cfg, [0.0, 1.0])
        assert z0.data[0] == 2.0

    def test_piecewise_constant_control_is_exact(self):
        # dz/dt = a with a = 1 on [0,1) and a = -2 on [1,3]; z(3) = 1 - 4 = -3
        control = ControlPath(np.array([0.0, 1.0]), np.array([[1.0], [-2.0]]))
        field = lambda z, a, p: a
        cfg = IntegrationConfig(method="rk4", step_size=0.4)
        (zT,) = integrate(field, Tensor([0.0]), control, 0.0, 3.0, cfg, [3.0])
        assert abs(zT.data[0] - (-3.0)) < 1e-12

    def test_chained_segments_bit_identical(self):
        control = ControlPath(np.array([0.0, 1.0]), np.array([[0.5], [-0.25]]))
        field = lambda z, a, p: ad.hadamard(z, a)
        cfg = IntegrationConfig(method="rk4", step_size=0.1)
        z1, z2 = integrate(field, Tensor([1.0]), control, 0.0, 2.0, cfg, [1.0, 2.0])
        (z1b,) = integrate(field, Tensor([1.0]), control, 0.0, 1.0, cfg, [1.0])
        (z2b,) = integrate(field, z1b, control, 1.0, 2.0, cfg, [2.0])
        assert z1.data[0] == z1b.data[0]
        assert z2.data[0] == z2b.data[0]

    def test_query_outside_span_rejected(self):
        cfg = IntegrationConfig(step_size=0.1)
        with pytest.raises(ValueError):
            integrate(decay, Tensor([1.0]), CONST_CONTROL, 0.0, 1.0, cfg, [2.0])

    def test_max_steps_guard(self):
        cfg = IntegrationConfig(step_size=1e-4, max_steps=10)
        with pytest.raises(NumericError):
            integrate(decay, Tensor([1.0]), CONST_CONTROL, 0.0, 1.0, cfg, [1.0])

    @pytest.mark.filterwarnings("ignore:overflow")
    def test_blowup_raises(self):
        # dz/dt = z^2 from z0 = 2 escapes in finite time; euler overflows
        field = lambda z, a, p: ad.square(z)
        cfg = IntegrationConfig(method="euler", step_size=0.1)
        with pytest.raises(NumericError):
            integrate(field, Tensor([2.0]), CONST_CONTROL, 0.0, 50.0, cfg, [50.0])

    def test_batched_state(self):
        cfg = IntegrationConfig(method="rk4", step_size=0.05)
        z0 = Tensor(np.array([[1.0, 2.0], [3.0, 4.0]]))
        (zT,) = integrate(decay, z0, CONST_CONTROL, 0.0, 1.0, cfg, [1.0])
        np.testing.assert_allclose(zT.data, z0.data * np.exp(-1.0), rtol=1e-7)


class TestConvergenceOrder:
    def test_rk4_is_fourth_order(self):
        cfg = IntegrationConfig(method="rk4", step_size=0.25)
        p = convergence_order(decay, [1.0], CONST_CONTROL, 0.0, 1.0, cfg,
                              reference=[np.exp(-1.0)])
        assert abs(p - 4.0) < 0.2

    def test_euler_is_first_order(self):
        cfg = IntegrationConfig(method="euler", step_size=0.1)
        p = convergence_order(decay, [1.0], CONST_CONTROL, 0.0, 1.0, cfg,
                              reference=[np.exp(-1.0)])
        assert abs(p - 1.0) < 0.1

    def test_inconclusive_when_exact(self):
        field = lambda z, a, p: a
        cfg = IntegrationConfig(method="rk4", step_size=0.5)
        control = ControlPath(np.array([0.0]), np.array([[1.0]]))
        assert convergence_order(field, [0.0], control, 0.0, 1.0, cfg,
                                 reference=[1.0]) is None


class TestAdjoint:
    def test_gradient_wrt_initial_state(self):
        # z(1) = z0 e^{-1}, so d z(1)/d z0 = e^{-1}
        cfg = IntegrationConfig(method="rk4", step_size=0.02)
        z0 = Tensor([1.3], requires_grad=True)
        with Tape() as tape:
            (zT,) = integrate(decay, z0, CONST_CONTROL, 0.0, 1.0, cfg, [1.0])
            tape.backward(ad.tsum(zT))
        assert abs(z0.grad[0] - np.exp(-1.0)) < 1e-6

    def test_gradient_wrt_field_parameter(self):
        # dz/dt = theta z with z0 = 1: z(1) = e^theta, d/dtheta = e^theta
        cfg = IntegrationConfig(method="rk4", step_size=0.02)
        theta = Tensor([0.4], requires_grad=True)
        field = lambda z, a, p: ad.hadamard(z, p)
        with Tape() as tape:
            (zT,) = integrate(field, Tensor([1.0]), CONST_CONTROL, 0.0, 1.0,
                              cfg, [1.0], params=theta)
            tape.backward(ad.tsum(zT))
        assert abs(theta.grad[0] - np.exp(0.4)) < 1e-6

    def test_adjoint_matches_finite_differences(self):
        cfg = IntegrationConfig(method="rk4", step_size=0.1)
        control = ControlPath(np.array([0.0, 0.7]), np.array([[0.3], [-0.6]]))

        def field(z, a, p):
            return ad.add(ad.tanh(z), a)

        def f(z0):
            (zT,) = integrate(field, z0, control, 0.0, 1.5, cfg, [1.5])
            return ad.tsum(ad.square(zT))

        err = grad_check(f, Tensor(np.array([0.2, -0.5, 1.0])))
        assert err < 1e-6
