import numpy as np
import pytest

from evpnet import ops
from evpnet.gradcheck import finite_diff_check, sample_away_from_kinks
from evpnet.selftest import GRADIENT_CASES
from evpnet.tensor import Parameter, Tensor, emit, precision


@pytest.mark.parametrize("name", sorted(GRADIENT_CASES))
def test_analytic_gradient_matches_central_differences(name):
    with precision("f64"):
        for seed in range(2):
            fn, params = GRADIENT_CASES[name](np.random.default_rng([seed, 99]))
            report = finite_diff_check(fn, params, tolerance=1e-5)
            assert report.passed, str(report)


class TestChecker:
    def test_detects_wrong_gradient(self):
        def bad_square(a):
            return emit(a.data**2, (a,), lambda g: (g * a.data,))  # missing factor 2

        x = Tensor(np.array([1.0, -2.0]), requires_grad=True)
        report = finite_diff_check(lambda: ops.sum(bad_square(x)), [x])
        assert not report.passed
        assert report.max_rel_error == pytest.approx(0.5, rel=1e-6)

    def test_resets_gradients(self):
        p = Parameter(np.array([1.0, 2.0]))
        x = Tensor(np.array([3.0]), requires_grad=True)
        finite_diff_check(lambda: ops.sum(ops.mul(p, x)), [p, x])
        np.testing.assert_array_equal(p.grad, [0.0, 0.0])
        assert x.grad is None

    def test_report_lists_every_parameter(self):
        a = Tensor(np.ones(2), requires_grad=True)
        b = Tensor(np.ones(2), requires_grad=True)
        report = finite_diff_check(lambda: ops.sum(ops.mul(a, b)), [a, b])
        assert len(report.entries) == 2
        assert "PASS" in str(report)

    def test_kink_resampling(self, rng):
        x = sample_away_from_kinks(lambda g: g.standard_normal(50), lambda a: np.abs(a).min(), 1e-2, rng)
        assert np.abs(x).min() > 1e-2

    def test_kink_resampling_gives_up(self, rng):
        with pytest.raises(RuntimeError, match="could not draw"):
            sample_away_from_kinks(lambda g: 0.0, lambda a: 0.0, 1.0, rng, max_tries=5)
