import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from vcl_lab import autodiff as ad
from vcl_lab.autodiff import Tensor
from vcl_lab.vcl import (VclConfig, VclConfigError, VclDiagnostic, VclUnitState, split_minibatch, vcl_layer_loss,
                         vcl_total_loss, vcl_unit_loss)


def scalar_loss(a, b, beta):
    """Plain-numpy reference for one unit."""
    return (1.0 - np.var(a, ddof=1) / (np.var(b, ddof=1) + beta)) ** 2


class TestConfig:
    def test_defaults(self):
        cfg = VclConfig()
        assert (cfg.n, cfg.gamma, cfg.beta_init) == (2, 0.01, 1.0)

    @pytest.mark.parametrize("kwargs", [{"n": 1}, {"n": 2.5}, {"gamma": -0.1}, {"beta_init": 0.0}])
    def test_rejects(self, kwargs):
        with pytest.raises(VclConfigError):
            VclConfig(**kwargs)

    def test_zero_gamma_allowed(self):
        assert VclConfig(gamma=0.0).gamma == 0.0

    def test_batch_check(self):
        VclConfig(n=5).check_batch(10)
        with pytest.raises(VclConfigError, match="exceeds"):
            VclConfig(n=5).check_batch(9)


class TestUnitLoss:
    def test_hand_value(self):
        s1 = np.array([[1.0], [3.0]])  # var 2
        s2 = np.array([[0.0], [2.0]])  # var 2
        loss = vcl_unit_loss(s1, s2, np.array([2.0])).data
        assert loss[0] == pytest.approx(0.25)  # (1 - 2/4)^2

    def test_matches_reference(self, rng):
        a, b = rng.normal(size=(4, 3)), rng.normal(size=(4, 3))
        beta = rng.uniform(0.5, 1.5, 3)
        got = vcl_unit_loss(a, b, beta).data
        want = [scalar_loss(a[:, j], b[:, j], beta[j]) for j in range(3)]
        np.testing.assert_allclose(got, want, rtol=1e-12)

    def test_fixed_point_has_zero_loss_and_gradient(self):
        s1 = Tensor(np.array([[0.0], [4.0]]), requires_grad=True)  # var 8
        s2 = Tensor(np.array([[1.0], [3.0]]), requires_grad=True)  # var 2
        beta = Tensor(np.array([6.0]), requires_grad=True)
        loss = ad.tsum(vcl_unit_loss(s1, s2, beta))
        assert loss.item() == 0.0
        ad.backward(loss)
        for t in (s1, s2, beta):
            np.testing.assert_array_equal(t.grad, 0.0)

    def test_diagnostic_floor(self):
        z = np.zeros((2, 1))
        with pytest.raises(VclDiagnostic):
            vcl_unit_loss(z, z, np.array([0.0]), check=True)
        assert vcl_unit_loss(z, z, np.array([1.0]), check=True).data[0] == 1.0

    @given(st.integers(0, 2**32 - 1), st.floats(0.1, 10.0))
    @settings(max_examples=40, deadline=None)
    def test_scale_equivariance(self, seed, c):
        rng = np.random.default_rng(seed)
        a, b = rng.normal(size=(5, 2)), rng.normal(size=(5, 2))
        beta = rng.uniform(0.2, 2.0, 2)
        l1 = vcl_unit_loss(a, b, beta).data
        l2 = vcl_unit_loss(c * a, c * b, c * c * beta).data
        np.testing.assert_allclose(l1, l2, rtol=1e-9)

    @given(st.integers(0, 2**32 - 1))
    @settings(max_examples=40, deadline=None)
    def test_nonnegative(self, seed):
        rng = np.random.default_rng(seed)
        assert np.all(vcl_unit_loss(rng.normal(size=(3, 4)), rng.normal(size=(3, 4)),
                                    rng.uniform(0.01, 3.0, 4)).data >= 0.0)


class TestAggregation:
    def test_split_uses_first_two_blocks(self, rng):
        x = Tensor(rng.normal(size=(9, 2)), requires_grad=True)
        s1, s2 = split_minibatch(x, 3)
        np.testing.assert_array_equal(s1.data, x.data[:3])
        np.testing.assert_array_equal(s2.data, x.data[3:6])
        ad.backward(ad.tsum(vcl_unit_loss(s1, s2, np.ones(2))))
        np.testing.assert_array_equal(x.grad[6:], 0.0)
        assert np.any(x.grad[:6] != 0.0)

    def test_split_too_small(self):
        with pytest.raises(VclConfigError):
            split_minibatch(np.ones((5, 2)), 3)

    def test_layer_then_sum_matches_scalar_recomputation(self, rng):
        cfg = VclConfig(n=3, gamma=0.37)
        widths = [4, 7, 2]
        pre = [rng.normal(size=(10, w)) for w in widths]
        states = [VclUnitState(w, 1.0) for w in widths]
        for st_ in states:
            st_.beta.data[:] = rng.uniform(0.5, 2.0, st_.beta.shape)
        total = vcl_total_loss([vcl_layer_loss(z, s, cfg) for z, s in zip(pre, states)], cfg.gamma).item()
        ref = 0.0
        for z, s in zip(pre, states):
            ref += np.mean([scalar_loss(z[:3, j], z[3:6, j], s.beta.data[j]) for j in range(z.shape[1])])
        assert abs(total - cfg.gamma * ref) <= 1e-12 * max(1.0, abs(total))

    def test_gamma_zero_gives_zero(self, rng):
        cfg = VclConfig(n=2)
        loss = vcl_layer_loss(rng.normal(size=(4, 3)), VclUnitState(3), cfg)
        assert vcl_total_loss([loss], 0.0).item() == 0.0

    def test_empty_layer_list(self):
        with pytest.raises(ValueError):
            vcl_total_loss([], 0.01)

    def test_beta_is_learnable(self, rng):
        st_ = VclUnitState(3, beta_init=0.5)
        np.testing.assert_array_equal(st_.beta.data, 0.5)
        ad.backward(vcl_layer_loss(rng.normal(size=(4, 3)), st_, VclConfig(n=2)))
        assert st_.beta.grad.shape == (3,)
