import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from madi import adaptation as da
from madi import autodiff as ad
from madi.autodiff import Tensor, gradient_check
from oracles import mmd_double_sum, nt_xent_pairs


def centroids(vectors: dict, view="target"):
    chars = sorted(vectors)
    return da.CentroidSet(chars, Tensor(np.array([vectors[c] for c in chars], float), requires_grad=True),
                          [1] * len(chars), view)


# ------------------------------------------------------------ frame labels
def test_assignment_is_argmax_with_low_id_ties():
    a, b, blank = 0, 1, 2
    rows = np.eye(3)[[a, blank, b]]
    np.testing.assert_array_equal(da.assign_frame_labels(np.log(rows + 1e-30)), [a, blank, b])
    assert da.assign_frame_labels(np.zeros((1, 4)))[0] == 0


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 10_000))
def test_assignment_ignores_per_row_offsets(seed):
    rng = np.random.default_rng(seed)
    lp = rng.standard_normal((7, 5))
    shifted = lp + rng.standard_normal((7, 1)) * 10
    np.testing.assert_array_equal(da.assign_frame_labels(lp), da.assign_frame_labels(shifted))
    np.testing.assert_array_equal(da.assign_frame_labels(lp), lp.argmax(axis=1))


def test_gather_examples():
    f = Tensor(np.array([[1.0, 0.0], [2.0, 2.0], [3.0, 1.0]]))
    sets = da.gather_character_features(f, np.array([0, 2, 0]), blank=2)
    assert list(sets) == [0]
    np.testing.assert_array_equal(sets[0].data, [[1.0, 0.0], [3.0, 1.0]])
    assert da.gather_character_features(f, np.array([2, 2, 2]), blank=2) == {}
    singles = da.gather_character_features(f, np.array([0, 1, 3]), blank=2)
    assert all(v.shape[0] == 1 for v in singles.values())


def test_centroid_is_the_mean():
    c = da.compute_centroids({0: Tensor(np.array([[1.0, 2.0], [3.0, 4.0]]))})
    np.testing.assert_array_equal(c.vectors.data, [[2.0, 3.0]])
    assert c.counts == [2]
    single = da.compute_centroids({1: Tensor(np.array([[5.0, -1.0]]))})
    np.testing.assert_array_equal(single.vectors.data, [[5.0, -1.0]])
    x = np.random.default_rng(0).standard_normal((6, 3))
    perm = da.compute_centroids({0: Tensor(x[::-1].copy())})
    np.testing.assert_allclose(perm.vectors.data, da.compute_centroids({0: Tensor(x)}).vectors.data, atol=1e-15)


# --------------------------------------------------------------------- MMD
def test_mmd_singleton_closed_form():
    val = da.mmd_squared(np.array([[0.0]]), np.array([[2.0]]), [2.0]).item()
    assert val == pytest.approx(2 - 2 * np.exp(-1), abs=1e-12)
    assert val == pytest.approx(1.264241, abs=1e-6)


def test_mmd_identical_sets_and_symmetry():
    rng = np.random.default_rng(1)
    a, b = rng.standard_normal((5, 3)), rng.standard_normal((4, 3))
    assert abs(da.mmd_squared(a, a.copy(), [0.5, 2.0]).item()) < 1e-12
    assert da.mmd_squared(a, b, [1.0]).item() == pytest.approx(da.mmd_squared(b, a, [1.0]).item(), abs=1e-14)


def test_mmd_matches_double_sum():
    rng = np.random.default_rng(2)
    for _ in range(20):
        a = rng.standard_normal((int(rng.integers(1, 6)), 3))
        b = rng.standard_normal((int(rng.integers(1, 6)), 3)) + 0.5
        bw = list(rng.uniform(0.2, 4.0, size=int(rng.integers(1, 4))))
        assert abs(da.mmd_squared(a, b, bw).item() - mmd_double_sum(a, b, bw)) < 1e-10


def test_median_bandwidths():
    pts = np.array([[0.0], [1.0], [3.0]])  # squared distances 1, 9, 4 -> median 4
    assert da.median_bandwidths(pts, (0.5, 1.0, 2.0)) == [2.0, 4.0, 8.0]


def test_matching_loss_rules():
    rng = np.random.default_rng(3)
    x = {0: Tensor(rng.standard_normal((3, 2))), 1: Tensor(rng.standard_normal((2, 2)))}
    same = {c: Tensor(v.data.copy()) for c, v in x.items()}
    loss, shared = da.matching_loss(x, same, bandwidths=[1.0])
    assert shared == 2 and abs(loss.item()) < 1e-12

    y = {1: Tensor(rng.standard_normal((4, 2))), 2: Tensor(rng.standard_normal((1, 2)))}
    loss, shared = da.matching_loss(x, y, bandwidths=[1.0, 3.0])
    assert shared == 1
    assert loss.item() == pytest.approx(da.mmd_squared(x[1], y[1], [1.0, 3.0]).item(), abs=1e-15)

    loss, shared = da.matching_loss({0: x[0]}, {2: y[2]})
    assert shared == 0 and loss.item() == 0.0


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10_000))
def test_matching_loss_is_non_negative(seed):
    rng = np.random.default_rng(seed)
    src = {c: Tensor(rng.standard_normal((int(rng.integers(1, 5)), 3))) for c in range(3)}
    tgt = {c: Tensor(rng.standard_normal((int(rng.integers(1, 5)), 3)) * 2) for c in range(1, 4)}
    assert da.matching_loss(src, tgt)[0].item() >= -1e-12


# ----------------------------------------------------------------- NT-Xent
def test_two_character_hand_case():
    e1, e2 = [1.0, 0.0], [0.0, 1.0]
    expected = -np.log(np.e / (np.e + 2))
    assert expected == pytest.approx(0.551445, abs=1e-6)
    loss, n = da.discrimination_loss(centroids({0: e1, 1: e2}), centroids({0: e1, 1: e2}, "augmented"), 1.0)
    assert n == 2 and loss.item() == pytest.approx(expected, abs=1e-12)
    loss, _ = da.cdcl_loss(centroids({0: e1, 1: e2}, "source"), centroids({0: e1, 1: e2}), 1.0)
    assert loss.item() == pytest.approx(expected, abs=1e-12)


def test_single_shared_character_gives_zero():
    for fn in (da.discrimination_loss, da.cdcl_loss):
        loss, n = fn(centroids({0: [1.0, 2.0]}), centroids({0: [0.5, -1.0]}), 0.1)
        assert n == 1 and loss.item() == pytest.approx(0.0, abs=1e-12)


def random_views(rng, n_first, n_second, dim=4):
    first = {int(c): rng.standard_normal(dim) for c in rng.choice(6, n_first, replace=False)}
    second = {int(c): rng.standard_normal(dim) for c in rng.choice(6, n_second, replace=False)}
    return first, second


def test_nt_xent_matches_pairwise_oracle():
    rng = np.random.default_rng(4)
    for _ in range(30):
        first, second = random_views(rng, int(rng.integers(1, 6)), int(rng.integers(1, 6)))
        tau = float(rng.uniform(0.05, 2.0))
        for fn in (da.discrimination_loss, da.cdcl_loss):
            got = fn(centroids(first), centroids(second), tau)[0].item()
            assert abs(got - nt_xent_pairs(first, second, tau)) < 1e-10


def test_nt_xent_ignores_centroid_scale_and_view_order():
    rng = np.random.default_rng(5)
    first, second = random_views(rng, 5, 4)
    base = da.discrimination_loss(centroids(first), centroids(second), 0.1)[0].item()
    scaled = da.discrimination_loss(centroids({c: 3 * v for c, v in first.items()}),
                                    centroids({c: 3 * v for c, v in second.items()}), 0.1)[0].item()
    swapped = da.discrimination_loss(centroids(second), centroids(first), 0.1)[0].item()
    one = {c: v * (c + 1.5) for c, v in first.items()}
    rescaled_one = da.discrimination_loss(centroids(one), centroids(second), 0.1)[0].item()
    assert abs(scaled - base) < 1e-10
    assert abs(swapped - base) < 1e-10
    assert abs(rescaled_one - base) < 1e-10


def test_rotating_a_negative_away_lowers_the_loss():
    anchor = np.array([1.0, 0.0])
    losses = []
    for angle in np.linspace(0.2, np.pi / 2, 6):
        neg = np.array([np.cos(angle), np.sin(angle)])
        # character 1 is absent from the second view, so it only ever acts as a negative
        losses.append(da.discrimination_loss(centroids({0: anchor, 1: neg}),
                                             centroids({0: anchor, 2: [0.0, -1.0]}), 0.5)[0].item())
    assert all(a > b for a, b in zip(losses, losses[1:]))


# --------------------------------------------------------------------- DAT
def test_dat_chance_and_perfect():
    rng = np.random.default_rng(6)
    disc = da.init_discriminator(4, width=5, seed=0)
    disc["disc.w2"].data[:] = 0.0
    disc["disc.b2"].data[:] = 0.0
    loss, info = da.dat_loss(Tensor(rng.standard_normal((3, 4))), Tensor(rng.standard_normal((2, 4))), disc, 1.0)
    assert loss.item() == pytest.approx(np.log(2), abs=1e-12)

    # a discriminator reading feature 0, which is +5 on source and -5 on target
    disc["disc.w1"].data[:] = 0.0
    disc["disc.w1"].data[0, 0] = 1.0
    disc["disc.b1"].data[:] = 0.0
    disc["disc.b1"].data[0] = 10.0
    disc["disc.w2"].data[0, 0] = 20.0
    disc["disc.b2"].data[:] = -200.0
    src = np.zeros((3, 4))
    src[:, 0] = 5.0
    tgt = np.zeros((2, 4))
    tgt[:, 0] = -5.0
    loss, info = da.dat_loss(Tensor(src), Tensor(tgt), disc, 1.0)
    assert loss.item() < 1e-12 and info["domain_accuracy"] == 1.0


@pytest.mark.parametrize("s", [0.0, 0.3, 1.0])
def test_dat_encoder_gradient_is_reversed(s):
    rng = np.random.default_rng(7)
    disc = da.init_discriminator(4, width=6, seed=1)
    x_src = Tensor(rng.standard_normal((3, 4)), requires_grad=True)
    x_tgt = Tensor(rng.standard_normal((2, 4)), requires_grad=True)
    ad.backward(da.dat_loss(x_src, x_tgt, disc, s)[0])
    reversed_grad = x_src.grad.copy()

    # the same classifier written out without any reversal
    x_src.grad = None
    h = ad.relu(ad.concat([x_src, x_tgt]) @ disc["disc.w1"] + disc["disc.b1"])
    logits = (h @ disc["disc.w2"] + disc["disc.b2"]).reshape(-1)
    ad.backward(da.binary_cross_entropy_with_logits(logits, np.array([1, 1, 1, 0, 0])))
    np.testing.assert_allclose(reversed_grad, -s * x_src.grad, rtol=0, atol=1e-15)


def test_grl_schedule():
    assert da.grl_schedule(0.0, 0.5) == 0.0
    assert da.grl_schedule(1.0, 0.5) == pytest.approx(0.5, rel=1e-4)
    assert da.grl_schedule(0.3, 0.5, ramp=False) == 0.5


# ------------------------------------------------------------------- total
def test_total_loss_weights():
    assert da.total_loss(1.0, 0.2, 0.3, 5.0, 5.0) == pytest.approx(3.5)
    assert da.total_loss(1.0, 0.2, 0.3, 0.0, 0.0) == 1.0
    assert da.total_loss(1.0, 0.2, 0.3, 5.0, 0.0) == da.total_loss(1.0, 0.2, 0.3, 5.0, 5.0, "CMatch")
    assert da.total_loss(1.0, 0.2, 0.3, 5.0, 5.0, "SO") == 1.0


def test_config_validation():
    assert da.AdaptationConfig(method="madi").method == "MADI"
    with pytest.raises(ValueError):
        da.AdaptationConfig(tau=0.0)
    with pytest.raises(ValueError):
        da.AdaptationConfig(method="MADI", beta=0.0)
    with pytest.raises(ValueError):
        da.AdaptationConfig(method="nope")
    assert da.AdaptationConfig(method="CMatch").uses_target_ctc
    assert not da.AdaptationConfig(method="DAT").uses_target_ctc
    assert da.AdaptationConfig(method="DAT", target_ctc=True).uses_target_ctc


# --------------------------------------------------------------- gradients
def test_adaptation_loss_gradients():
    rng = np.random.default_rng(8)
    src = {c: Tensor(rng.standard_normal((int(rng.integers(1, 4)), 3)), requires_grad=True) for c in range(3)}
    tgt = {c: Tensor(rng.standard_normal((int(rng.integers(1, 4)), 3)), requires_grad=True) for c in range(1, 4)}
    leaves = list(src.values()) + list(tgt.values())
    assert gradient_check(lambda: da.matching_loss(src, tgt, bandwidths=[0.7, 2.0])[0], leaves) < 1e-4

    a = centroids({c: rng.standard_normal(3) for c in range(4)})
    b = centroids({c: rng.standard_normal(3) for c in range(1, 5)})
    assert gradient_check(lambda: da.discrimination_loss(a, b, 0.1)[0], [a.vectors, b.vectors]) < 1e-4
    assert gradient_check(lambda: da.cdcl_loss(a, b, 0.5)[0], [a.vectors, b.vectors]) < 1e-4

    disc = da.init_discriminator(3, width=4, seed=2)
    xs = Tensor(rng.standard_normal((3, 3)), requires_grad=True)
    xt = Tensor(rng.standard_normal((2, 3)), requires_grad=True)
    f = lambda: da.dat_loss(xs, xt, disc, 0.0)[0]
    assert gradient_check(f, list(disc.values())) < 1e-4
