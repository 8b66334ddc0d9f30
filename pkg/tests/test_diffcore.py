import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from maskrank import diffcore as dc


def check_grad(build, x, tol=1e-7, h=1e-5):
    """Compare backward() against central differences for scalar ``build(tensor)``."""

    def run(v):
        tape = dc.Tape()
        out = build(tape.param("x", v))
        return tape, out

    tape, out = run(x)
    analytic = dc.backward(tape, output=out)["x"]
    numeric = dc.finite_diff_grad(lambda v: run(v)[1].item(), x, h)
    err = dc.relative_error(analytic, numeric)
    assert err < tol, err


@pytest.fixture
def rng():
    return np.random.Generator(np.random.PCG64(7))


class TestPrimitiveGradients:
    def test_affine_leading_dims(self, rng):
        w = rng.normal(size=(4, 3))
        b = rng.normal(size=3)
        c = rng.normal(size=(2, 5, 3))
        check_grad(lambda x: dc.reduce_sum(dc.mul(dc.affine(x, w, b), c)), rng.normal(size=(2, 5, 4)))

    def test_affine_weight_and_bias(self, rng):
        xs = rng.normal(size=(6, 4))
        c = rng.normal(size=(6, 3))
        check_grad(lambda w: dc.reduce_sum(dc.mul(dc.affine(xs, w, np.ones(3)), c)), rng.normal(size=(4, 3)))
        check_grad(lambda b: dc.reduce_sum(dc.mul(dc.affine(xs, np.ones((4, 3)), b), c)), rng.normal(size=3))

    def test_relu_away_from_zero(self, rng):
        x = rng.normal(size=10)
        x[np.abs(x) < 0.1] = 0.5
        c = rng.normal(size=10)
        check_grad(lambda t: dc.reduce_sum(dc.mul(dc.relu(t), c)), x)

    def test_concat_and_mean_pool(self, rng):
        other = rng.normal(size=(3, 2))
        c = rng.normal(size=5)
        check_grad(
            lambda t: dc.reduce_sum(dc.mul(dc.mean_pool(dc.concat([t, other], axis=1), axis=0), c)),
            rng.normal(size=(3, 3)),
        )

    def test_l2_normalize_rows(self, rng):
        c = rng.normal(size=(4, 5))
        check_grad(lambda t: dc.reduce_sum(dc.mul(dc.l2_normalize(t, axis=-1), c)), rng.normal(size=(4, 5)))

    def test_dot_all_shape_combinations(self, rng):
        v = rng.normal(size=4)
        m = rng.normal(size=(3, 4))
        c = rng.normal(size=(5, 3))
        check_grad(lambda t: dc.dot(t, v), rng.normal(size=4))
        check_grad(lambda t: dc.reduce_sum(dc.mul(dc.dot(t, m), c[0])), rng.normal(size=4))
        check_grad(lambda t: dc.reduce_sum(dc.mul(dc.dot(m, t), c[0])), rng.normal(size=4))
        check_grad(lambda t: dc.reduce_sum(dc.mul(dc.dot(t, m), c)), rng.normal(size=(5, 4)))
        check_grad(lambda t: dc.reduce_sum(dc.dot(t, t)), rng.normal(size=(3, 4)))

    def test_exp_log(self, rng):
        check_grad(lambda t: dc.reduce_sum(dc.log(dc.add(dc.exp(t), 1.0))), rng.normal(size=6))

    def test_clip_gate_away_from_threshold(self):
        x = np.array([0.2, 0.99, 1.01, 3.0, -1.0])
        check_grad(lambda t: dc.reduce_sum(dc.mul(dc.clip_gate(t), t)), x)

    def test_broadcasting_arithmetic(self, rng):
        row = rng.normal(size=(1, 4))
        check_grad(lambda t: dc.reduce_sum(dc.mul(dc.sub(t, row), dc.add(t, 2.0))), rng.normal(size=(3, 4)))
        full = rng.normal(size=(3, 4))
        check_grad(lambda t: dc.reduce_sum(dc.mul(dc.sub(full, t), t)), rng.normal(size=(1, 4)))

    def test_take_repeated_indices_scatter_add(self, rng):
        x = rng.normal(size=5)
        check_grad(lambda t: dc.reduce_sum(dc.mul(dc.take(t, [0, 0, 3]), np.array([1.0, 2.0, 3.0]))), x)
        tape = dc.Tape()
        t = tape.param("x", x)
        out = dc.reduce_sum(dc.take(t, [1, 1, 1]))
        np.testing.assert_array_equal(dc.backward(tape, output=out)["x"], [0, 3, 0, 0, 0])

    def test_reduce_mean_axis(self, rng):
        c = rng.normal(size=3)
        check_grad(lambda t: dc.reduce_sum(dc.mul(dc.reduce_mean(t, axis=0), c)), rng.normal(size=(4, 3)))

    def test_operator_overloads(self, rng):
        check_grad(lambda t: dc.reduce_sum((t * t - 3.0 + (-t)) * 2.0), rng.normal(size=4))
        check_grad(lambda t: dc.reduce_sum(1.0 - t[1:] + t[0]), rng.normal(size=4))

    def test_custom_node(self, rng):
        def cube(t):
            v = t.value
            return dc.custom([t], v**3, lambda g: (3 * v**2 * g,))

        check_grad(lambda t: dc.reduce_sum(cube(t)), rng.normal(size=4))


class TestBackwardSemantics:
    def test_chain_rule_by_hand(self):
        tape = dc.Tape()
        x = tape.param("x", 3.0)
        y = dc.mul(x, x)
        out = dc.log(y)
        assert dc.backward(tape, output=out)["x"] == pytest.approx(2.0 / 3.0, abs=1e-15)

    def test_unreachable_parameter_gets_zeros(self):
        tape = dc.Tape()
        x = tape.param("x", [1.0, 2.0])
        tape.param("unused", np.ones((2, 2)))
        out = dc.reduce_sum(x)
        g = dc.backward(tape, output=out)
        np.testing.assert_array_equal(g["unused"], np.zeros((2, 2)))
        np.testing.assert_array_equal(g["x"], [1.0, 1.0])

    def test_non_scalar_output_rejected(self):
        tape = dc.Tape()
        x = tape.param("x", [1.0, 2.0])
        out = dc.exp(x)
        with pytest.raises(dc.DiffcoreError):
            dc.backward(tape, output=out)

    def test_defaults_to_last_recorded_node(self):
        tape = dc.Tape()
        x = tape.param("x", 2.0)
        dc.mul(x, x)
        assert dc.backward(tape)["x"] == pytest.approx(4.0)

    def test_seed_scales_gradient(self):
        tape = dc.Tape()
        x = tape.param("x", 2.0)
        out = dc.mul(x, x)
        assert dc.backward(tape, seed=0.5, output=out)["x"] == pytest.approx(2.0)

    def test_duplicate_parameter_name(self):
        tape = dc.Tape()
        tape.param("x", 1.0)
        with pytest.raises(dc.DiffcoreError):
            tape.param("x", 2.0)

    def test_mixing_tapes_rejected(self):
        a = dc.Tape().param("a", [1.0])
        b = dc.Tape().param("b", [1.0])
        with pytest.raises(dc.DiffcoreError):
            dc.add(a, b)


class TestEdgeCases:
    def test_degenerate_normalize(self):
        tape = dc.Tape()
        with pytest.raises(dc.DegenerateVectorError):
            dc.l2_normalize(tape.param("x", np.zeros(3)))
        with pytest.raises(dc.DegenerateVectorError):
            dc.l2_normalize(tape.param("y", np.full(3, 1e-14)))

    def test_degenerate_is_value_error(self):
        assert issubclass(dc.DegenerateVectorError, ValueError)

    def test_gate_is_strict(self):
        tape = dc.Tape()
        x = tape.param("x", [1.0, np.nextafter(1.0, 2.0), 0.5])
        out = dc.clip_gate(x, 1.0)
        np.testing.assert_array_equal(out.value, [0.0, np.nextafter(1.0, 2.0), 0.0])
        g = dc.backward(tape, output=dc.reduce_sum(out))["x"]
        np.testing.assert_array_equal(g, [0.0, 1.0, 0.0])

    def test_relu_subgradient_zero_at_kink(self):
        tape = dc.Tape()
        x = tape.param("x", [0.0, 1.0, -1.0])
        g = dc.backward(tape, output=dc.reduce_sum(dc.relu(x)))["x"]
        np.testing.assert_array_equal(g, [0.0, 1.0, 0.0])

    def test_log_of_nonpositive(self):
        with pytest.raises(dc.DiffcoreError):
            dc.log(dc.Tape().param("x", [0.0]))

    def test_shape_mismatch(self):
        tape = dc.Tape()
        with pytest.raises(dc.DiffcoreError):
            dc.affine(tape.param("x", np.ones(3)), np.ones((4, 2)))
        with pytest.raises(dc.DiffcoreError):
            dc.dot(tape.param("y", np.ones(3)), np.ones(4))


class TestFiniteDifferences:
    def test_quadratic_exact(self):
        x = np.array([1.0, -2.0, 0.5])
        g = dc.finite_diff_grad(lambda v: float(np.sum(v**2)), x)
        np.testing.assert_allclose(g, 2 * x, atol=1e-9)

    def test_input_left_unchanged(self):
        x = np.array([1.0, 2.0])
        dc.finite_diff_grad(lambda v: float(v @ v), x)
        np.testing.assert_array_equal(x, [1.0, 2.0])

    @pytest.mark.filterwarnings("ignore::RuntimeWarning")
    def test_non_finite_raises(self):
        with pytest.raises(dc.OracleError):
            dc.finite_diff_grad(lambda v: float(np.log(v[0])), np.array([0.0]))

    def test_relative_error(self):
        assert dc.relative_error([1.0, 2.0], [1.0, 2.0]) == 0.0
        assert dc.relative_error([0.0], [0.0]) == 0.0
        assert dc.relative_error([1.0, 0.0], [1.1, 0.0]) == pytest.approx(0.1 / 1.1)


finite = st.floats(-10, 10, allow_nan=False, allow_infinity=False)


class TestProperties:
    @settings(max_examples=50, deadline=None)
    @given(arrays(np.float64, (3, 4), elements=finite))
    def test_normalize_gives_unit_rows(self, x):
        norms = np.linalg.norm(x, axis=1)
        if np.any(norms < 1e-6):
            return
        y = dc.l2_normalize(dc.Tape().param("x", x)).value
        np.testing.assert_allclose(np.linalg.norm(y, axis=1), 1.0, atol=1e-12)

    @settings(max_examples=50, deadline=None)
    @given(arrays(np.float64, (4,), elements=finite), arrays(np.float64, (4,), elements=finite))
    def test_normalize_gradient_orthogonal_to_output(self, x, g):
        if np.linalg.norm(x) < 1e-3:
            return
        tape = dc.Tape()
        y = dc.l2_normalize(tape.param("x", x))
        grad = dc.backward(tape, output=dc.dot(y, tape.constant(g)))["x"]
        # scale invariance: the gradient has no component along x
        assert abs(grad @ x) <= 1e-9 * max(1.0, np.linalg.norm(grad) * np.linalg.norm(x))

    @settings(max_examples=50, deadline=None)
    @given(arrays(np.float64, (5,), elements=finite))
    def test_sum_gradient_is_ones(self, x):
        tape = dc.Tape()
        g = dc.backward(tape, output=dc.reduce_sum(tape.param("x", x)))["x"]
        np.testing.assert_array_equal(g, np.ones(5))
