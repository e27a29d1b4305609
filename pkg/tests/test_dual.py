import numpy as np
from numpy.testing import assert_allclose

import dual
from dual import Dual
from idm import acceleration_from_columns


def _central_difference(f, x, h=1e-6):
    grads = []
    for j in range(len(x)):
        step = np.zeros_like(x)
        step[j] = h
        grads.append((f(x + step) - f(x - step)) / (2 * h))
    return np.array(grads)


class TestDual:

    def test_variables_seed_unit_directions(self):
        x, y = Dual.variables(np.array([[1.0, 2.0], [3.0, 4.0]]))
        assert_allclose(x.val, [1.0, 3.0])
        assert_allclose(x.eps, [[1.0, 0.0], [1.0, 0.0]])
        assert_allclose(y.eps, [[0.0, 1.0], [0.0, 1.0]])

    def test_rational_expression(self):
        x, = Dual.variables(np.array([[0.5], [2.0]]))
        f = x * x / (1.0 + x) - 3.0 / x
        xv = x.val
        expected = (xv ** 2 + 2 * xv) / (1 + xv) ** 2 + 3.0 / xv ** 2
        assert_allclose(f.eps[:, 0], expected, rtol=1e-12)

    def test_constant_and_dual_powers(self):
        x, y = Dual.variables(np.array([[1.5, 2.5]]))
        f = x ** 4.0 + x ** y + 2.0 ** y
        assert_allclose(f.val, 1.5 ** 4 + 1.5 ** 2.5 + 2.0 ** 2.5)
        assert_allclose(f.eps[0, 0], 4 * 1.5 ** 3 + 2.5 * 1.5 ** 1.5, rtol=1e-12)
        assert_allclose(
            f.eps[0, 1], 1.5 ** 2.5 * np.log(1.5) + 2.0 ** 2.5 * np.log(2.0), rtol=1e-12
        )

    def test_power_at_zero_base_has_zero_derivative(self):
        x, = Dual.variables(np.array([[0.0]]))
        f = x ** 4.0
        assert f.val[0] == 0.0
        assert f.eps[0, 0] == 0.0

    def test_sqrt_exp_log(self):
        x, = Dual.variables(np.array([[0.7]]))
        f = dual.sqrt(x) + dual.exp(x) * dual.log(x)
        expected = 0.5 / np.sqrt(0.7) + np.exp(0.7) * np.log(0.7) + np.exp(0.7) / 0.7
        assert_allclose(f.eps[0, 0], expected, rtol=1e-12)

    def test_plain_values_pass_through(self):
        assert dual.sqrt(4.0) == 2.0
        assert dual.value_of(3.0) == 3.0

    def test_numpy_array_on_the_left_defers(self):
        x, = Dual.variables(np.array([[2.0], [3.0]]))
        f = np.array([1.0, 2.0]) * x
        assert isinstance(f, Dual)
        assert_allclose(f.eps[:, 0], [1.0, 2.0])


class TestModelGradient:

    def test_idm_gradient_matches_finite_differences(self, literature):
        p = literature.model_copy(update={"s1": 0.3}).to_array()
        v, dv, s = np.array([4.2]), np.array([0.4]), np.array([11.0])

        cols = Dual.variables(p[None, :])
        ad = acceleration_from_columns(cols, v, dv, s).eps[0]
        fd = _central_difference(lambda q: acceleration_from_columns(q, v, dv, s)[0], p)
        assert_allclose(ad, fd, rtol=1e-5, atol=1e-8)
