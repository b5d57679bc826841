"""Tape primitives: forward values, exact adjoints, and the gradient
checker itself. Every primitive's analytic gradient is compared against
central finite differences on seeded inputs."""

import numpy as np
import pytest

from ordinalproto.diffcore import OP_KINDS, Tape, finite_difference_check

H = 1e-5
FD_TOL = 1e-4


def _scalarize(tape, node, rng):
    """Reduce a node to 1x1 through a fixed random weighting.

    A plain sum would zero the adjoint through softmax-like ops whose
    outputs have constant sums.
    """
    shape = tape.value(node).shape
    weights = tape.constant(rng.uniform(0.5, 1.5, size=shape))
    return tape.sum_all(tape.mul(node, weights))


class TestForwardValues:
    def test_add_ones(self):
        tape = Tape()
        a = tape.constant(np.ones((2, 2)))
        b = tape.constant(np.ones((2, 2)))
        out = tape.record("add", (a, b))
        np.testing.assert_array_equal(tape.value(out), np.full((2, 2), 2.0))

    def test_matmul_identity(self):
        rng = np.random.default_rng(0)
        m = rng.normal(size=(2, 5))
        tape = Tape()
        out = tape.matmul(tape.constant(np.eye(2)), tape.constant(m))
        np.testing.assert_array_equal(tape.value(out), m)

    def test_row_softmax_direct_evaluation(self):
        # softmax([0, ln 3]) = [1, 3] / 4
        tape = Tape()
        out = tape.row_softmax(tape.constant([[0.0, np.log(3.0)]]), 1.0)
        np.testing.assert_allclose(tape.value(out), [[0.25, 0.75]], atol=1e-15)

    def test_row_softmax_rows_sum_to_one(self):
        # cosine-scale inputs: the operating range of the similarity tables
        rng = np.random.default_rng(1)
        tape = Tape()
        out = tape.row_softmax(tape.constant(rng.uniform(-1, 1, size=(6, 8))), 0.07)
        value = tape.value(out)
        np.testing.assert_allclose(value.sum(axis=1), 1.0, atol=1e-12)
        assert (value > 0).all() and (value < 1).all()

    def test_col_softmax_cols_sum_to_one(self):
        rng = np.random.default_rng(2)
        tape = Tape()
        out = tape.col_softmax(tape.constant(rng.normal(size=(6, 8))), 0.5)
        np.testing.assert_allclose(tape.value(out).sum(axis=0), 1.0, atol=1e-12)

    def test_l2_normalize_unit_rows(self):
        rng = np.random.default_rng(3)
        tape = Tape()
        out = tape.l2_normalize_rows(tape.constant(rng.normal(size=(5, 7))))
        np.testing.assert_allclose(
            np.linalg.norm(tape.value(out), axis=1), 1.0, atol=1e-12
        )

    def test_kl_of_identical_distributions_is_zero(self):
        rng = np.random.default_rng(4)
        p = rng.uniform(0.1, 1.0, size=(3, 4))
        p /= p.sum(axis=1, keepdims=True)
        tape = Tape()
        out = tape.kl_div(tape.constant(p), tape.constant(p))
        assert abs(tape.value(out)[0, 0]) < 1e-15

    def test_kl_zero_rows_contribute_nothing(self):
        p = np.array([[0.0, 0.0], [1.0, 0.0]])
        q = np.array([[0.3, 0.7], [0.5, 0.5]])
        tape = Tape()
        out = tape.kl_div(tape.constant(p), tape.constant(q))
        assert tape.value(out)[0, 0] == pytest.approx(np.log(2.0), abs=1e-15)


class TestRecordContract:
    def test_unknown_op_kind_rejected(self):
        tape = Tape()
        a = tape.constant(np.ones((2, 2)))
        with pytest.raises(ValueError, match="unknown op kind"):
            tape.record("outer-product", (a, a))

    def test_shape_mismatch_reports_shapes(self):
        tape = Tape()
        a = tape.constant(np.ones((2, 3)))
        b = tape.constant(np.ones((2, 3)))
        with pytest.raises(ValueError, match=r"\(2, 3\)"):
            tape.matmul(a, b)

    def test_zero_row_normalization_rejected_with_index(self):
        tape = Tape()
        a = tape.constant(np.array([[1.0, 0.0], [0.0, 0.0]]))
        with pytest.raises(ValueError, match="row 1"):
            tape.l2_normalize_rows(a)

    def test_kl_rejects_zero_prediction_on_support(self):
        tape = Tape()
        p = tape.constant(np.array([[1.0, 0.0]]))
        q = tape.constant(np.array([[0.0, 1.0]]))
        with pytest.raises(ValueError, match="support"):
            tape.kl_div(p, q)

    def test_nonpositive_temperature_rejected(self):
        tape = Tape()
        a = tape.constant(np.ones((2, 2)))
        with pytest.raises(ValueError, match="temperature"):
            tape.row_softmax(a, 0.0)

    def test_all_listed_op_kinds_are_recordable(self):
        assert set(OP_KINDS) >= {
            "matmul", "add", "elementwise-mul", "row-softmax-with-temperature",
            "col-softmax-with-temperature", "l2-normalize-rows",
            "kl-divergence-rows", "scalar-scale", "concat-rows", "weighted-sum",
        }


class TestBackward:
    def test_sum_gradient_is_ones(self):
        rng = np.random.default_rng(5)
        tape = Tape()
        p = tape.parameter(rng.normal(size=(2, 3)), "p")
        grads = tape.backward(tape.sum_all(p))
        np.testing.assert_array_equal(grads["p"], np.ones((2, 3)))

    def test_half_squared_norm_gradient_equals_parameter(self):
        rng = np.random.default_rng(6)
        value = rng.normal(size=(3, 3))
        tape = Tape()
        p = tape.parameter(value, "p")
        loss = tape.scale(tape.sum_all(tape.mul(p, p)), 0.5)
        np.testing.assert_allclose(tape.backward(loss)["p"], value, atol=1e-15)

    def test_non_scalar_loss_rejected(self):
        tape = Tape()
        p = tape.parameter(np.ones((2, 2)), "p")
        with pytest.raises(ValueError, match="1x1"):
            tape.backward(p)

    def test_unreached_parameter_gets_zero_gradient(self):
        tape = Tape()
        p = tape.parameter(np.ones((2, 2)), "used")
        q = tape.parameter(np.ones((3, 4)), "unused")
        grads = tape.backward(tape.sum_all(p))
        np.testing.assert_array_equal(grads["unused"], np.zeros((3, 4)))
        assert grads["unused"].shape == tape.value(q).shape

    def test_backward_is_linear_in_the_loss(self):
        """grad(a + b) == grad(a) + grad(b) entrywise within 1e-12."""
        rng = np.random.default_rng(7)
        value = rng.normal(size=(4, 4))

        def grads_of(which):
            tape = Tape()
            p = tape.parameter(value, "p")
            loss_a = tape.sum_all(tape.mul(p, p))
            loss_b = tape.sum_all(tape.tanh(p))
            if which == "a":
                return tape.backward(loss_a)["p"]
            if which == "b":
                return tape.backward(loss_b)["p"]
            return tape.backward(tape.weighted_sum([loss_a, loss_b], [1.0, 1.0]))["p"]

        np.testing.assert_allclose(
            grads_of("sum"), grads_of("a") + grads_of("b"), atol=1e-12
        )

    def test_kl_of_softmax_gradient_matches_finite_differences(self):
        """KL(one-hot, row-softmax(P/T)) at one-hot-consistent logits."""
        labels = np.array([0, 2, 1])
        y = np.zeros((3, 3))
        y[np.arange(3), labels] = 1.0
        logits = 2.0 * y  # peaked toward the labels

        def loss_of(p):
            tape = Tape()
            node = tape.parameter(p, "p")
            return tape.value(tape.kl_div(tape.constant(y), tape.row_softmax(node, 0.5)))[0, 0]

        tape = Tape()
        p = tape.parameter(logits, "p")
        loss = tape.kl_div(tape.constant(y), tape.row_softmax(p, 0.5))
        analytic = tape.backward(loss)["p"]
        assert finite_difference_check(loss_of, logits, analytic, h=H) <= FD_TOL


def _fd_case(name, build, shapes, seed):
    """Check one primitive's adjoint, w.r.t. each input in turn."""
    rng = np.random.default_rng(seed)
    values = [rng.normal(size=shape) for shape in shapes]
    for target in range(len(values)):

        def assemble(target_value):
            tape = Tape()
            nodes = []
            for i, v in enumerate(values):
                if i == target:
                    nodes.append(tape.parameter(target_value, "p"))
                else:
                    nodes.append(tape.constant(v))
            out = build(tape, nodes)
            reduced = _scalarize(tape, out, np.random.default_rng(seed + 99))
            return tape, reduced

        tape, loss = assemble(values[target])
        analytic = tape.backward(loss)["p"]

        def f(p):
            t, l = assemble(p)
            return t.value(l)[0, 0]

        err = finite_difference_check(f, values[target], analytic, h=H)
        assert err <= FD_TOL, f"{name} input {target}: relative error {err}"


class TestPrimitiveGradients:
    """Analytic Jacobian-vector products vs central differences, sizes
    up to 8x8, h = 1e-5, relative error <= 1e-4."""

    def test_matmul(self):
        _fd_case("matmul", lambda t, n: t.matmul(n[0], n[1]), [(4, 8), (8, 3)], 10)

    def test_add_same_shape(self):
        _fd_case("add", lambda t, n: t.add(n[0], n[1]), [(5, 6), (5, 6)], 11)

    def test_add_broadcast_bias(self):
        _fd_case("add-bias", lambda t, n: t.add(n[0], n[1]), [(7, 4), (1, 4)], 12)

    def test_elementwise_mul(self):
        _fd_case("mul", lambda t, n: t.mul(n[0], n[1]), [(6, 6), (6, 6)], 13)

    def test_row_softmax(self):
        _fd_case("row-softmax", lambda t, n: t.row_softmax(n[0], 0.7), [(5, 8)], 14)

    def test_col_softmax(self):
        _fd_case("col-softmax", lambda t, n: t.col_softmax(n[0], 1.3), [(8, 5)], 15)

    def test_l2_normalize_rows(self):
        _fd_case("l2-normalize", lambda t, n: t.l2_normalize_rows(n[0]), [(6, 8)], 16)

    def test_scalar_scale(self):
        _fd_case("scale", lambda t, n: t.scale(n[0], -2.5), [(4, 4)], 17)

    def test_concat_rows(self):
        _fd_case(
            "concat", lambda t, n: t.concat_rows([n[0], n[1], n[2]]),
            [(2, 5), (3, 5), (1, 5)], 18,
        )

    def test_weighted_sum(self):
        _fd_case(
            "weighted-sum",
            lambda t, n: t.weighted_sum([n[0], n[1]], [0.3, -1.7]),
            [(4, 6), (4, 6)], 19,
        )

    def test_transpose(self):
        _fd_case("transpose", lambda t, n: t.transpose(n[0]), [(3, 7)], 20)

    def test_tanh(self):
        _fd_case("tanh", lambda t, n: t.tanh(n[0]), [(8, 8)], 21)

    def test_kl_wrt_prediction(self):
        rng = np.random.default_rng(22)
        target = rng.uniform(0.0, 1.0, size=(4, 5))
        target[0, :] = 0.0  # an all-zero target row must stay differentiable
        nonzero = target.sum(axis=1) > 0
        target[nonzero] /= target[nonzero].sum(axis=1, keepdims=True)
        q0 = rng.uniform(0.5, 2.0, size=(4, 5))

        def assemble(q):
            tape = Tape()
            node = tape.parameter(q, "p")
            return tape, tape.kl_div(tape.constant(target), node)

        tape, loss = assemble(q0)
        analytic = tape.backward(loss)["p"]

        def f(q):
            t, l = assemble(q)
            return t.value(l)[0, 0]

        assert finite_difference_check(f, q0, analytic, h=H) <= FD_TOL


class TestFiniteDifferenceCheck:
    def test_sum_of_squares_closed_form(self):
        """Analytic gradient of sum(P^2) is 2P; error <= 1e-6."""
        rng = np.random.default_rng(0)
        p = rng.normal(size=(4, 4))
        err = finite_difference_check(lambda m: float((m * m).sum()), p, 2.0 * p, h=H)
        assert err <= 1e-6

    def test_constant_function_has_zero_error(self):
        p = np.ones((3, 3))
        err = finite_difference_check(lambda m: 7.0, p, np.zeros((3, 3)), h=H)
        assert err == 0.0

    def test_wrong_gradient_is_caught(self):
        rng = np.random.default_rng(1)
        p = rng.normal(size=(3, 3))
        err = finite_difference_check(lambda m: float((m * m).sum()), p, 3.0 * p, h=H)
        assert err > 0.1

    def test_non_finite_value_reported_with_entry(self):
        p = np.zeros((2, 2))

        def f(m):
            return float("nan") if m[1, 1] != 0 else 0.0

        with pytest.raises(FloatingPointError, match=r"\(1, 1\)"):
            finite_difference_check(f, p, np.zeros((2, 2)), h=H)
