import numpy as np
import pytest

from src import autodiff as ad
from src.autodiff import ContractError, DimensionError, Tape
from tests.conftest import assert_gradients_close, central_difference


def test_product_rule():
    tape = Tape()
    x, y = tape.variable(3.0), tape.variable(4.0)
    grads = tape.backward(x * y)
    assert grads[x] == pytest.approx(4.0)
    assert grads[y] == pytest.approx(3.0)


def test_identity_input_gradient_is_one():
    tape = Tape()
    x = tape.variable(2.5)
    assert tape.backward(ad.activation("identity", x))[x] == pytest.approx(1.0)


def test_relu_derivative_at_zero_is_zero():
    tape = Tape()
    x = tape.variable(np.array([0.0, -1.0, 2.0]))
    grads = tape.backward(ad.total(ad.activation("relu", x)))
    np.testing.assert_array_equal(grads[x], [0.0, 0.0, 1.0])


def test_euclidean_norm_at_zero_gives_zero_subgradient():
    tape = Tape()
    v = tape.variable(np.zeros(3))
    grads = tape.backward(ad.euclidean_norm(v))
    np.testing.assert_array_equal(grads[v], np.zeros(3))
    assert tape.diagnostics["zero_norm_subgradients"] == 1


def test_euclidean_norm_values():
    assert float(ad.euclidean_norm(np.array([3.0, 4.0])).value) == pytest.approx(5.0)
    assert float(ad.euclidean_norm(np.zeros(2)).value) == 0.0
    rows = ad.euclidean_norm(np.array([[3.0, 4.0], [0.0, 1.0]])).value
    np.testing.assert_allclose(rows, [5.0, 1.0])


def test_losses():
    assert float(ad.loss("mse", np.array([2.0]), np.array([0.0])).value) == pytest.approx(4.0)
    ce = float(ad.loss("cross_entropy", np.array([0.0, 0.0]), np.array([1.0, 0.0])).value)
    assert ce == pytest.approx(np.log(2.0))


def test_cross_entropy_is_stable_for_large_logits():
    value = ad.loss("cross_entropy", np.array([1000.0, -1000.0]), np.array([0.0, 1.0])).value
    assert np.isfinite(value)
    assert float(value) == pytest.approx(2000.0)


def test_cross_entropy_rejects_non_distribution_targets():
    with pytest.raises(ContractError):
        ad.loss("cross_entropy", np.array([0.0, 0.0]), np.array([1.0, 1.0]))


def test_loss_shape_mismatch():
    with pytest.raises(DimensionError):
        ad.loss("mse", np.zeros(2), np.zeros(3))


def test_matvec_shape_mismatch():
    with pytest.raises(DimensionError):
        ad.matvec(np.zeros((2, 3)), np.zeros(2))


def test_backward_needs_scalar():
    tape = Tape()
    x = tape.variable(np.ones(2))
    with pytest.raises(ContractError):
        tape.backward(ad.scale(x, 2.0))


def test_tape_is_single_use():
    tape = Tape()
    x = tape.variable(1.0)
    out = ad.square_sum(x)
    tape.backward(out)
    with pytest.raises(ContractError):
        tape.backward(out)


def test_unreached_variable_gets_zero_and_constant_gets_nothing():
    tape = Tape()
    x, unused = tape.variable(2.0), tape.variable(np.ones(3))
    c = tape.constant(5.0)
    grads = tape.backward(x * c)
    assert grads[x] == pytest.approx(5.0)
    np.testing.assert_array_equal(grads[unused], np.zeros(3))
    assert c not in grads
    with pytest.raises(KeyError):
        grads[c]


def test_adjoints_accumulate_over_shared_subexpressions():
    tape = Tape()
    x = tape.variable(3.0)
    y = x * x + x
    assert tape.backward(y)[x] == pytest.approx(7.0)


def test_sigmoid_does_not_overflow():
    values = ad.sigmoid_values(np.array([-1000.0, 0.0, 1000.0]))
    np.testing.assert_allclose(values, [0.0, 0.5, 1.0])


@pytest.mark.parametrize("kind", ["sigmoid", "relu", "identity"])
def test_composite_gradient_matches_finite_differences(kind):
    rng = np.random.default_rng(0)
    for _ in range(20):
        w = rng.standard_normal((3, 4))
        b = rng.standard_normal(3)
        x0 = rng.standard_normal((5, 4))
        target = rng.standard_normal((5, 3))

        def value(x):
            z = x @ w.T + b
            return float(ad.loss("mse", ad.activation_values(kind, z), target).value)

        tape = Tape()
        x = tape.variable(x0)
        out = ad.loss("mse", ad.activation(kind, ad.add(ad.matvec(w, x), b)), target)
        assert_gradients_close(tape.backward(out)[x], central_difference(value, x0))


def test_quotient_of_norms_gradient():
    rng = np.random.default_rng(1)
    for _ in range(20):
        a0, b0 = rng.standard_normal(3), rng.standard_normal(3)

        def value(a):
            return float(np.linalg.norm(np.tanh(a)) / np.linalg.norm(a - b0))

        tape = Tape()
        a = tape.variable(a0)
        # tanh(a) = 2 * sigmoid(2a) - 1
        tanh = ad.sub(ad.scale(ad.activation("sigmoid", ad.scale(a, 2.0)), 2.0), 1.0)
        out = ad.div(ad.euclidean_norm(tanh), ad.euclidean_norm(ad.sub(a, b0)))
        assert_gradients_close(tape.backward(out)[a], central_difference(value, a0))


def test_cross_entropy_gradient_matches_finite_differences():
    rng = np.random.default_rng(2)
    for _ in range(20):
        logits0 = rng.standard_normal((4, 5))
        target = np.eye(5)[rng.integers(0, 5, size=4)]
        tape = Tape()
        logits = tape.variable(logits0)
        out = ad.loss("cross_entropy", logits, target)
        numeric = central_difference(lambda z: float(ad.loss("cross_entropy", z, target).value), logits0)
        assert_gradients_close(tape.backward(out)[logits], numeric)


def test_sum_reduction_gives_per_row_gradients():
    tape = Tape()
    p = tape.variable(np.array([[1.0], [3.0]]))
    out = ad.loss("mse", p, np.zeros((2, 1)), reduction="sum")
    np.testing.assert_allclose(tape.backward(out)[p], [[2.0], [6.0]])


def test_adjoints_are_linear():
    rng = np.random.default_rng(3)
    x0 = rng.standard_normal(4)
    a, b = 2.5, -0.75

    def gradient_of(combine):
        tape = Tape()
        x = tape.variable(x0)
        f = ad.euclidean_norm(x)
        g = ad.total(ad.activation("sigmoid", x))
        return tape.backward(combine(f, g))[x]

    df = gradient_of(lambda f, g: f)
    dg = gradient_of(lambda f, g: g)
    combined = gradient_of(lambda f, g: ad.add(ad.scale(f, a), ad.scale(g, b)))
    np.testing.assert_allclose(combined, a * df + b * dg, rtol=1e-12, atol=1e-15)
