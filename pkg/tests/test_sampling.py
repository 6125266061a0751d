import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy import stats

from cwrec.data import InteractionDataset, preprocess, split_dataset
from cwrec.datasets import toy_path
from cwrec.errors import InvalidConstant, InvalidPrior
from cwrec.optim import TrainSchedule
from cwrec.sampling import PriorEstimate, Sampler, estimate_prior, sample_batch


def small_train(seed=0, nu=30, ni=20):
    rng = np.random.default_rng(seed)
    mask = rng.random((nu, ni)) < 0.25
    mask[np.arange(nu), rng.integers(ni, size=nu)] = True
    u, i = np.nonzero(mask)
    return InteractionDataset.from_pairs(nu, ni, u, i)


def test_default_batch_size():
    assert TrainSchedule().batch_size == 1024


def test_batch_shapes_and_membership():
    train = small_train()
    b = sample_batch(train, batch_size=64, N=7, M=4, seed=1)
    assert b.negs.shape == (64, 7) and b.extra_pos.shape == (64, 4)
    for u, i, negs, extra in b.rows:
        pos = set(train.positives(u).tolist())
        assert i in pos and set(extra) <= pos
        assert all(0 <= j < train.num_items for j in negs)


def test_single_positive_user_repeats_extra():
    train = InteractionDataset.from_pairs(1, 5, [0], [3])
    b = sample_batch(train, batch_size=3, N=2, M=4, seed=0)
    assert np.all(b.extra_pos == 3)


def test_zero_negatives():
    b = sample_batch(small_train(), batch_size=5, N=0, M=1, seed=0)
    assert b.negs.shape == (5, 0)


def test_sampler_reproducible():
    train = small_train()
    a = sample_batch(train, 32, 5, 2, seed=9)
    b = sample_batch(train, 32, 5, 2, seed=9)
    for x, y in ((a.users, b.users), (a.pos, b.pos), (a.negs, b.negs), (a.extra_pos, b.extra_pos)):
        np.testing.assert_array_equal(x, y)


def test_epoch_covers_every_pair_once():
    train = small_train()
    seen = []
    for batch in Sampler(train, 3, 1, seed=0).epoch(17):
        seen += list(zip(batch.users.tolist(), batch.pos.tolist()))
    assert sorted(seen) == sorted(zip(train.users.tolist(), train.items.tolist()))


def test_negative_draws_are_uniform():
    train = InteractionDataset.from_pairs(3, 20, [0, 1, 2], [0, 5, 7])
    b = sample_batch(train, batch_size=1000, N=1000, M=0, seed=0)
    counts = np.bincount(b.negs.ravel(), minlength=20)
    assert stats.chisquare(counts).pvalue > 0.01


def test_anchor_is_uniform_over_pairs():
    train = InteractionDataset.from_pairs(2, 4, [0, 0, 0, 1], [0, 1, 2, 3])
    b = sample_batch(train, batch_size=40000, N=1, M=0, seed=3)
    counts = np.bincount(b.pos, minlength=4)
    assert stats.chisquare(counts).pvalue > 0.01


# prior ----------------------------------------------------------------------------

def test_constant_prior():
    p = estimate_prior(small_train(), "constant", 0.1)
    assert np.all(p.tau_plus == 0.1) and np.allclose(p.tau_minus, 0.9)


@pytest.mark.parametrize("c", [-0.1, 1.0, 1.5])
def test_constant_prior_range(c):
    with pytest.raises(InvalidConstant):
        estimate_prior(small_train(), "constant", c)


def test_constant_prior_needs_value():
    with pytest.raises(InvalidConstant):
        estimate_prior(small_train(), "constant", None)


def test_per_user_rate_near_degenerate():
    train = InteractionDataset.from_pairs(2, 10, [0] * 9 + [1], list(range(9)) + [9])
    p = estimate_prior(train, "per_user_rate")
    assert p.tau_plus[0] == pytest.approx(9 / 10)


def test_prior_reaching_one_is_rejected():
    train = InteractionDataset.from_pairs(1, 3, [0, 0, 0], [0, 1, 2])
    with pytest.raises(InvalidPrior):
        estimate_prior(train, "per_user_rate")


def test_uniform_popularity_matches_rate():
    # every item held by exactly 2 users
    users = [0, 1, 0, 2, 1, 2]
    items = [0, 0, 1, 1, 2, 2]
    train = InteractionDataset.from_pairs(3, 3, users, items)
    a = estimate_prior(train, "popularity").tau_plus
    b = estimate_prior(train, "per_user_rate").tau_plus
    np.testing.assert_allclose(a, b, rtol=1e-14)


def test_popularity_formula():
    train = small_train(3)
    pop = train.item_degrees()
    p = estimate_prior(train, "popularity").tau_plus
    for u in (0, 5, 17):
        assert p[u] == pytest.approx(pop[train.positives(u)].sum() / pop.sum())


def test_prior_estimate_validation():
    with pytest.raises(InvalidPrior):
        PriorEstimate("constant", np.array([0.1, 1.0]))


@settings(max_examples=20, deadline=None)
@given(seed=st.integers(0, 1000), mode=st.sampled_from(["per_user_rate", "popularity"]))
def test_prior_below_one_after_k_core(seed, mode):
    split = split_dataset(preprocess(toy_path()), seed=seed)
    tp = estimate_prior(split.train, mode).tau_plus
    assert np.all(tp < 1) and np.all(tp >= 0)
