import numpy as np
import pytest

from src.autodiff import ContractError
from src.lipreg import (
    DegeneratePairError,
    PairSampler,
    PairSet,
    adversarial_update,
    empirical_lipschitz,
    grid_lipschitz,
    lip_value_and_param_gradient,
    lipschitz_on_grid,
    lipschitz_quotient,
    load_pairs_csv,
    pair_predictions,
    pair_quotients,
    quotient_input_gradients,
    resample_pairs,
    save_pairs_csv,
)
from src.network import Layer, Network, forward, init_network, layerwise_lipschitz_bound
from tests.conftest import assert_gradients_close, central_difference, with_parameter


def test_quotient_of_linear_map(diag_net):
    assert lipschitz_quotient(diag_net, [0.0, 0.0], [1.0, 0.0]) == pytest.approx(2.0)
    assert lipschitz_quotient(diag_net, [0.0, 0.0], [0.0, 1.0]) == pytest.approx(1.0)


def test_quotient_is_symmetric(small_net):
    x, y = np.array([0.1, -0.4, 2.0]), np.array([1.3, 0.2, -0.7])
    assert lipschitz_quotient(small_net, x, y) == lipschitz_quotient(small_net, y, x)


def test_coincident_pair_is_rejected(diag_net):
    with pytest.raises(DegeneratePairError):
        lipschitz_quotient(diag_net, [1.0, 1.0], [1.0, 1.0])


def test_empty_pair_set(diag_net):
    with pytest.raises(ContractError):
        empirical_lipschitz(diag_net, PairSet(np.zeros((0, 2)), np.zeros((0, 2))))


def test_ties_pick_lowest_index(diag_net):
    pairs = PairSet.from_pairs([([0.0, 0.0], [0.0, 1.0]), ([0.0, 0.0], [1.0, 0.0]), ([1.0, 1.0], [2.0, 1.0])])
    report = empirical_lipschitz(diag_net, pairs)
    assert report.argmax == 1
    assert report.max_value == pytest.approx(2.0)


def test_abs_net_bound_gap(abs_net):
    grid = np.linspace(-1.0, 1.0, 2001)
    pairs = PairSet(grid[:-1, None], grid[1:, None])
    lip = empirical_lipschitz(abs_net, pairs).max_value
    assert 0.999 <= lip <= 1.0 + 1e-12
    assert layerwise_lipschitz_bound(abs_net) == pytest.approx(2.0, abs=1e-9)


def test_empirical_never_exceeds_layerwise_bound():
    rng = np.random.default_rng(0)
    for seed in range(50):
        depth = rng.integers(1, 4)
        dims = [int(d) for d in rng.integers(1, 6, size=depth + 1)]
        activations = [str(a) for a in rng.choice(["sigmoid", "relu", "identity"], size=depth)]
        net = init_network(dims, activations, seed)
        for layer in net.layers:
            layer.weights *= 3.0
        left = rng.standard_normal((30, dims[0]))
        pairs = PairSet(left, left + rng.standard_normal((30, dims[0])))
        bound = layerwise_lipschitz_bound(net)
        assert empirical_lipschitz(net, pairs).max_value <= bound + 1e-9


def test_bound_holds_for_near_tied_singular_values():
    rng = np.random.default_rng(11)
    u, _ = np.linalg.qr(rng.standard_normal((4, 4)))
    v, _ = np.linalg.qr(rng.standard_normal((4, 4)))
    w = u @ np.diag([1.0, 0.999, 0.5, 0.1]) @ v.T
    net = Network([Layer(w, np.zeros(4), "identity")])
    pairs = PairSet(np.zeros((1, 4)), v[:, :1].T)
    assert empirical_lipschitz(net, pairs).max_value == pytest.approx(1.0)
    assert empirical_lipschitz(net, pairs).max_value <= layerwise_lipschitz_bound(net) + 1e-9


def test_adversarial_updates_approach_top_singular_value(diag_net):
    pairs = PairSet.from_pairs([([0.0, 0.0], [1e-3, 1.0])])
    assert pair_quotients(diag_net, pairs)[0] == pytest.approx(1.0, abs=1e-5)
    for _ in range(200):
        pairs = adversarial_update(diag_net, pairs, tau=0.1)
    assert pair_quotients(diag_net, pairs)[0] >= 1.95
    assert pair_quotients(diag_net, pairs)[0] <= 2.0 + 1e-12


def test_adversarial_update_does_not_decrease_quotient_for_small_steps(small_net):
    rng = np.random.default_rng(2)
    left = rng.standard_normal((10, 3))
    pairs = PairSet(left, left + 0.5 * rng.standard_normal((10, 3)))
    before = pair_quotients(small_net, pairs)
    after = pair_quotients(small_net, adversarial_update(small_net, pairs, tau=1e-3))
    assert np.all(after >= before - 1e-12)


def test_adversarial_update_needs_positive_step(diag_net):
    pairs = PairSet.from_pairs([([0.0, 0.0], [1.0, 1.0])])
    with pytest.raises(ContractError):
        adversarial_update(diag_net, pairs, tau=0.0)


def test_one_adversarial_step_matches_numeric_gradient():
    net = init_network([2, 4, 2], ["sigmoid", "identity"], seed=5)
    for layer in net.layers:
        layer.weights *= 3.0
    x, x_prime = np.array([0.3, -0.2]), np.array([0.9, 0.4])
    tau = 0.1
    lip = lipschitz_quotient(net, x, x_prime)
    g_left = central_difference(lambda z: lipschitz_quotient(net, z, x_prime), x)
    g_right = central_difference(lambda z: lipschitz_quotient(net, x, z), x_prime)

    updated = adversarial_update(net, PairSet([x], [x_prime]), tau=tau)
    np.testing.assert_allclose(updated.left[0], x + tau * lip * g_left, atol=1e-5)
    np.testing.assert_allclose(updated.right[0], x_prime + tau * lip * g_right, atol=1e-5)
    assert updated.repairs == 0


def test_collapsed_pair_is_repaired():
    # A constant network has zero input gradient, so the pair stays put;
    # a pair below the separation threshold is re-drawn from the sampler.
    net = Network([Layer(np.zeros((1, 1)), np.ones(1))])
    sampler = PairSampler(0.5, bounds=(-1.0, 1.0), input_dim=1, seed=3)
    pairs = PairSet([[0.0]], [[1e-9]], min_separation=1e-6, sampler=sampler)
    updated = adversarial_update(net, pairs, tau=0.1)
    assert updated.repairs == 1
    assert updated.separations()[0] >= 1e-6


def _repair_once(pairs):
    net = Network([Layer(np.zeros((1, 1)), np.ones(1))])
    return adversarial_update(net, pairs, tau=0.1)


def test_reseeded_copies_repair_independently():
    sampler = PairSampler(0.5, bounds=(-1.0, 1.0), input_dim=1, seed=3)
    shared = PairSet([[0.0]], [[1e-9]], min_separation=1e-6, sampler=sampler)

    alone = _repair_once(shared.copy(seed=20))
    first, second = shared.copy(seed=10), shared.copy(seed=20)
    _repair_once(first)
    after_other = _repair_once(second)

    assert first.sampler is not second.sampler
    assert first.sampler is not sampler
    np.testing.assert_array_equal(alone.left, after_other.left)
    np.testing.assert_array_equal(alone.right, after_other.right)


def test_plain_copy_keeps_the_sampler():
    sampler = PairSampler(0.5, bounds=(-1.0, 1.0), input_dim=1, seed=3)
    pairs = PairSet([[0.0]], [[0.5]], sampler=sampler)
    assert pairs.copy().sampler is sampler


def test_clamped_sampler_keeps_pairs_in_box():
    source = np.random.default_rng(0).uniform(0.0, 1.0, size=(20, 5))
    sampler = PairSampler(2.0, source=source, clamp=(0.0, 1.0), seed=1)
    pairs = resample_pairs(sampler, 20)
    net = init_network([5, 3], ["identity"], seed=0)
    for _ in range(5):
        pairs = adversarial_update(net, pairs, tau=1.0)
    assert pairs.left.min() >= 0.0 and pairs.left.max() <= 1.0
    assert pairs.right.min() >= 0.0 and pairs.right.max() <= 1.0


def test_resampled_pairs_are_separated_and_seeded():
    a = resample_pairs(PairSampler(0.0, bounds=(-4.0, 4.0), seed=9), 50)
    b = resample_pairs(PairSampler(0.0, bounds=(-4.0, 4.0), seed=9), 50)
    assert np.all(a.separations() >= a.min_separation)
    np.testing.assert_array_equal(a.left, b.left)
    np.testing.assert_array_equal(a.right, b.right)
    assert a.draw_attempts > 1


def test_sampler_cannot_draw_more_than_its_source():
    sampler = PairSampler(0.1, source=np.zeros((3, 2)))
    with pytest.raises(ContractError):
        sampler.draw(4)


def test_quotient_input_gradients_match_finite_differences(small_net):
    rng = np.random.default_rng(5)
    for _ in range(20):
        left = rng.standard_normal((1, 3))
        right = left + rng.standard_normal((1, 3))
        pairs = PairSet(left, right)
        _, grad_left, grad_right = quotient_input_gradients(small_net, pairs)
        numeric_left = central_difference(lambda x: lipschitz_quotient(small_net, x[0], right[0]), left)
        numeric_right = central_difference(lambda x: lipschitz_quotient(small_net, left[0], x[0]), right)
        assert_gradients_close(grad_left, numeric_left)
        assert_gradients_close(grad_right, numeric_right)


def test_lip_param_gradient_matches_finite_differences():
    rng = np.random.default_rng(6)
    for seed in range(20):
        net = init_network([2, 4, 2], ["sigmoid", "identity"], seed)
        left = rng.standard_normal((5, 2))
        pairs = PairSet(left, left + rng.standard_normal((5, 2)))
        report, grad = lip_value_and_param_gradient(net, pairs)
        i = report.argmax
        for index, layer_grad in enumerate(grad):
            for name, analytic in (("weights", layer_grad.weights), ("bias", layer_grad.bias)):
                numeric = central_difference(
                    lambda p: lipschitz_quotient(with_parameter(net, index, name, p), pairs.left[i], pairs.right[i]),
                    getattr(net.layers[index], name),
                )
                assert_gradients_close(analytic, numeric)


def test_grid_lipschitz_of_ground_truth():
    xs = np.linspace(-4.0, 4.0, 401)
    assert grid_lipschitz(xs, 0.5 * np.maximum(np.abs(xs) - 3.0, 0.0)) == pytest.approx(0.5)


def test_lipschitz_on_grid_of_linear_net():
    net = Network([Layer(np.array([[-3.0]]), np.array([1.0]))])
    assert lipschitz_on_grid(net, -1.0, 1.0, 11) == pytest.approx(3.0)


def test_pair_predictions(small_net):
    pairs = PairSet(np.zeros((2, 3)), np.ones((2, 3)))
    rows = pair_predictions(small_net, pairs)
    assert len(rows) == 2
    assert set(rows[0]) >= {"quotient", "left_class", "right_class", "left_confidence"}
    assert rows[0]["left_class"] == int(np.argmax(forward(small_net, np.zeros(3))))


def test_pairs_csv_round_trip(tmp_path):
    pairs = PairSet([[0.1, 0.2], [1.0 / 3.0, 2.0]], [[0.3, 0.4], [5.0, 6.0]])
    loaded = load_pairs_csv(save_pairs_csv(pairs, tmp_path / "pairs.csv"))
    np.testing.assert_array_equal(loaded.left, pairs.left)
    np.testing.assert_array_equal(loaded.right, pairs.right)
