import math

import numpy as np
import pytest
from hypothesis import assume, given, settings
from hypothesis import strategies as st

from manipplan.kinematics import geometric_jacobian, planar_chain
from manipplan.manipulability import (
    Classification,
    SingularityCostParams,
    classify_configuration,
    ellipsoid,
    likelihood,
    manipulability,
    manipulability_gradient,
    singularity_cost,
    singularity_cost_value,
)

from .oracles import manipulability_fd


def planar_xy_jacobian(chain, q):
    return geometric_jacobian(chain, q, task_dim=2)


class TestManipulabilityMeasure:
    def test_planar_right_angle_is_one(self, planar2r):
        # |det J| = l1 l2 |sin q2| for the two-link arm, worked by hand.
        for q1 in (0.0, 0.9, -2.3):
            lam = manipulability(planar_xy_jacobian(planar2r, [q1, np.pi / 2]))
            assert lam == pytest.approx(1.0, abs=1e-12)

    def test_fully_extended_arm_is_singular(self, planar2r):
        lam = manipulability(planar_xy_jacobian(planar2r, [0.4, 0.0]))
        assert lam == pytest.approx(0.0, abs=1e-12)

    def test_identity_jacobian(self):
        assert manipulability(np.eye(3)) == pytest.approx(1.0, abs=1e-15)

    def test_analytic_sine_oracle_across_elbow_range(self, planar2r):
        # lambda(q2) = |sin q2| for unit links; 100 samples over (0, pi).
        for q2 in np.linspace(0.01, np.pi - 0.01, 100):
            lam = manipulability(planar_xy_jacobian(planar2r, [0.3, q2]))
            assert lam == pytest.approx(abs(math.sin(q2)), abs=1e-9)

    def test_more_rows_than_columns_rejected(self):
        with pytest.raises(ValueError):
            manipulability(np.ones((3, 2)))

    def test_non_finite_rejected(self):
        with pytest.raises(ValueError):
            manipulability(np.array([[np.nan, 0.0]]))

    def test_nonnegative_and_zero_only_when_rank_deficient(self, rng):
        for _ in range(50):
            jac = rng.standard_normal((3, 5))
            assert manipulability(jac) > 0.0
        deficient = np.outer(rng.standard_normal(3), rng.standard_normal(5))
        assert manipulability(deficient) == pytest.approx(0.0, abs=1e-12)

    def test_rotation_invariance(self, ur10, rng):
        # The measure only sees the column space metric, so rotating the
        # task frame (R on the linear rows, R on the angular rows) keeps it.
        from scipy.spatial.transform import Rotation

        for _ in range(20):
            q = rng.uniform(-np.pi, np.pi, 6)
            rot = Rotation.random(random_state=int(rng.integers(1 << 31))).as_matrix()
            jac3 = geometric_jacobian(ur10, q, task_dim=3)
            lam3 = manipulability(jac3)
            assert manipulability(rot @ jac3) == pytest.approx(lam3, rel=1e-9)
            jac6 = geometric_jacobian(ur10, q, task_dim=6)
            block = np.zeros((6, 6))
            block[:3, :3] = rot
            block[3:, 3:] = rot
            assert manipulability(block @ jac6) == pytest.approx(manipulability(jac6), rel=1e-9)


class TestEllipsoid:
    def test_diagonal_jacobian(self):
        ell = ellipsoid(np.diag([3.0, 2.0, 1.0]))
        np.testing.assert_allclose(ell.singular_values, [3.0, 2.0, 1.0], atol=1e-14)
        np.testing.assert_allclose(np.abs(ell.axes), np.eye(3), atol=1e-14)
        assert ell.volume_measure == pytest.approx(6.0, rel=1e-12)

    def test_rank_deficient_axis_degenerates(self, rng):
        jac = np.outer(rng.standard_normal(3), rng.standard_normal(4))
        ell = ellipsoid(jac)
        assert ell.singular_values[-1] == pytest.approx(0.0, abs=1e-12)
        assert ell.volume_measure == pytest.approx(0.0, abs=1e-12)

    def test_svd_reconstruction(self, rng):
        for _ in range(20):
            jac = rng.standard_normal((3, 6))
            ell = ellipsoid(jac)
            # Recover the right factor from U and sigma; the reconstruction
            # must reproduce J and the axes must be orthonormal.
            vt = (ell.axes / ell.singular_values).T @ jac
            np.testing.assert_allclose(ell.axes @ np.diag(ell.singular_values) @ vt, jac, atol=1e-10)
            np.testing.assert_allclose(vt @ vt.T, np.eye(3), atol=1e-10)
            np.testing.assert_allclose(ell.axes.T @ ell.axes, np.eye(3), atol=1e-9)

    def test_sorted_descending(self, rng):
        sv = ellipsoid(rng.standard_normal((4, 7))).singular_values
        assert np.all(np.diff(sv) <= 0.0)


class TestManipulabilityGradient:
    def test_planar_stationary_at_right_angle(self, planar2r):
        grad = manipulability_gradient(planar2r, [0.2, np.pi / 2], task_dim=2)
        assert grad.values[1] == pytest.approx(0.0, abs=1e-10)
        assert not grad.degenerate

    def test_planar_analytic_derivative(self, planar2r):
        # d lambda / d q2 = cos q2 for unit links.
        grad = manipulability_gradient(planar2r, [1.1, np.pi / 4], task_dim=2)
        assert grad.values[1] == pytest.approx(math.cos(np.pi / 4), abs=1e-9)

    def test_matches_finite_differences_on_ur10(self, ur10, rng):
        checked = 0
        worst = 0.0
        while checked < 100:
            q = rng.uniform(-np.pi, np.pi, 6)
            lam = manipulability(geometric_jacobian(ur10, q, task_dim=6))
            if lam <= 0.01:
                continue
            checked += 1
            grad = manipulability_gradient(ur10, q, task_dim=6).values
            fd = manipulability_fd(ur10, q, 6, step=1e-6)
            worst = max(worst, np.abs(grad - fd).max() / np.abs(fd).max())
        assert worst < 1e-4

    def test_degenerate_flag_at_singularity(self, planar2r):
        grad = manipulability_gradient(planar2r, [0.0, 0.0], task_dim=2)
        assert grad.degenerate
        assert np.all(np.isfinite(grad.values))


class TestSingularityCost:
    def params(self, lambda_max=1.0, sigma=1e-4):
        return SingularityCostParams(lambda_max=lambda_max, sigma_sbar=sigma)

    def test_zero_cost_at_lambda_max(self, planar2r):
        cost = singularity_cost(planar2r, [0.5, np.pi / 2], self.params(), task_dim=2)
        assert cost.h == pytest.approx(0.0, abs=1e-12)

    def test_planar_log_derivative_is_negative_cotangent(self, planar2r):
        cost = singularity_cost(planar2r, [0.9, np.pi / 4], self.params(), task_dim=2)
        assert cost.gradient[1] == pytest.approx(-1.0, abs=1e-9)

    def test_cancellation_identity_on_ur10(self, ur10, rng):
        # The log-cost Jacobian equals -(1/lambda) * d lambda / dq without
        # ever multiplying by lambda; both paths must agree to 1e-10.
        params = SingularityCostParams(lambda_max=ur10.lambda_max, sigma_sbar=1e-4)
        checked = 0
        worst = 0.0
        while checked < 100:
            q = rng.uniform(-np.pi, np.pi, 6)
            lam = manipulability(geometric_jacobian(ur10, q, task_dim=6))
            if lam <= 1e-6:
                continue
            checked += 1
            cost = singularity_cost(ur10, q, params, task_dim=6)
            grad = manipulability_gradient(ur10, q, task_dim=6).values
            expected = -grad / lam
            worst = max(worst, np.abs(cost.gradient - expected).max() / np.abs(expected).max())
        assert worst < 1e-10

    def test_clamped_at_singularity(self, planar2r):
        params = self.params()
        cost = singularity_cost(planar2r, [0.0, 0.0], params, task_dim=2)
        assert cost.degenerate
        assert cost.h == pytest.approx(math.log(1.0 / params.lambda_floor), rel=1e-9)
        assert np.all(np.isfinite(cost.gradient))

    def test_value_shortcut_matches_full_cost(self, ur10, rng):
        params = SingularityCostParams(lambda_max=ur10.lambda_max, sigma_sbar=1e-4)
        for _ in range(10):
            q = rng.uniform(-np.pi, np.pi, 6)
            full = singularity_cost(ur10, q, params, task_dim=6)
            assert singularity_cost_value(ur10, q, params, task_dim=6) == pytest.approx(full.h, rel=1e-12)

    def test_params_ordering_enforced(self):
        with pytest.raises(ValueError):
            SingularityCostParams(lambda_max=1.0, sigma_sbar=1e-4, near_singular_threshold=2.0)
        with pytest.raises(ValueError):
            SingularityCostParams(lambda_max=-1.0, sigma_sbar=1e-4)
        with pytest.raises(ValueError):
            SingularityCostParams(lambda_max=1.0, sigma_sbar=0.0)


class TestClassifier:
    def test_exact_singularity_is_nearly_singular(self):
        params = SingularityCostParams(lambda_max=2.0, sigma_sbar=1e-4)
        assert classify_configuration(0.0, params) is Classification.NEARLY_SINGULAR

    def test_boundary_goes_to_not_nearly_singular(self):
        # The comparison is strict, so the threshold itself is acceptable.
        params = SingularityCostParams(lambda_max=2.0, sigma_sbar=1e-4)
        assert classify_configuration(params.near_singular_threshold, params) is Classification.NOT_NEARLY_SINGULAR

    def test_lambda_max_not_nearly_singular(self):
        params = SingularityCostParams(lambda_max=2.0, sigma_sbar=1e-4)
        assert classify_configuration(2.0, params) is Classification.NOT_NEARLY_SINGULAR

    def test_negative_rejected(self):
        params = SingularityCostParams(lambda_max=2.0, sigma_sbar=1e-4)
        with pytest.raises(ValueError):
            classify_configuration(-0.1, params)


class TestLikelihood:
    def test_maximized_at_zero_cost(self):
        assert likelihood(0.0, 1e-4) == 1.0

    def test_unit_mahalanobis_point(self):
        sigma = 3e-3
        h = math.sqrt(2.0 * sigma)
        assert likelihood(h, sigma) == pytest.approx(math.exp(-1.0), rel=1e-12)

    @given(
        h1=st.floats(min_value=0.0, max_value=50.0),
        h2=st.floats(min_value=0.0, max_value=50.0),
        sigma=st.floats(min_value=1e-6, max_value=1e2),
    )
    @settings(max_examples=200, deadline=None)
    def test_decreasing_in_magnitude(self, h1, h2, sigma):
        # Stay inside the exp-representable range; the true value is always
        # positive but underflows to 0.0 beyond exponent ~ -700.
        assume(0.5 * max(h1, h2) ** 2 / sigma < 700.0)
        lo, hi = sorted((h1, h2))
        assert 0.0 < likelihood(hi, sigma) <= likelihood(lo, sigma) <= 1.0
        assert likelihood(-hi, sigma) == likelihood(hi, sigma)

    def test_sigma_must_be_positive(self):
        with pytest.raises(ValueError):
            likelihood(1.0, 0.0)
