import math
import zlib

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from cwrec.backbones import EmbeddingTable
from cwrec.errors import WrongNegativeCount
from cwrec.evaluation import dcg_full, heaviside_ranks
from cwrec.losses import (
    LossConfig,
    PairScoreContext,
    compute_loss,
    corrected_expectation_estimator,
    log_phi,
    loss_bpr,
    loss_bsl,
    loss_corrected,
    loss_cw,
    loss_psl,
    loss_sl,
    loss_weighted,
    phi,
)
from cwrec.sampling import PriorEstimate

from helpers import gradient_error, loss_value, random_problem

EXP_FORM = dict(sigma_form="exp_of_activation")


def ctx_of(r_ui, r_uj, r_uik=None):
    return PairScoreContext(np.atleast_1d(r_ui), np.atleast_2d(r_uj),
                            None if r_uik is None else np.atleast_2d(r_uik))


def random_ctx(rng, B=4, N=6, M=3):
    return PairScoreContext(rng.uniform(-0.5, 0.5, B), rng.uniform(-0.5, 0.5, (B, N)),
                            rng.uniform(-0.5, 0.5, (B, M)))


# phi ---------------------------------------------------------------------------

def test_phi_exp_recovers_softmax_term():
    cfg = LossConfig(activation="exp", tau=0.3, **EXP_FORM)
    assert phi(0.12, cfg) == pytest.approx(math.exp(0.12 / 0.3), rel=1e-15)


def test_phi_relu_at_zero_is_one():
    assert phi(0.0, LossConfig(activation="relu", **EXP_FORM)) == 1.0


def test_phi_relu_half_at_quarter_temperature():
    cfg = LossConfig(activation="relu", tau=0.25, **EXP_FORM)
    assert phi(0.5, cfg) == pytest.approx(7.389056, abs=1e-6)


def test_phi_forms_agree_for_exp_activation():
    d = np.linspace(-1, 1, 11)
    a = phi(d, LossConfig(activation="exp", sigma_form="raw_power", tau=0.2))
    b = phi(d, LossConfig(activation="exp", sigma_form="exp_of_activation", tau=0.2))
    np.testing.assert_allclose(a, b, rtol=1e-13)


@pytest.mark.parametrize("act", ["exp", "relu", "tanh", "atan"])
def test_raw_power_dominates_step_and_is_one_at_zero(act):
    cfg = LossConfig(activation=act, sigma_form="raw_power", tau=1.0)
    assert phi(0.0, cfg) == pytest.approx(1.0, abs=1e-15)
    d = np.linspace(-1, 1, 201)
    assert np.all(phi(d, cfg) >= (d >= 0) - 1e-15)


@pytest.mark.parametrize("form", ["exp_of_activation", "raw_power"])
@pytest.mark.parametrize("act", ["exp", "relu", "tanh", "atan"])
def test_log_phi_derivative(form, act):
    cfg = LossConfig(activation=act, sigma_form=form, tau=0.3)
    d = np.array([-0.83, -0.4, -0.05, 0.07, 0.3, 0.91])
    h = 1e-6
    num = (log_phi(d + h, cfg)[0] - log_phi(d - h, cfg)[0]) / (2 * h)
    np.testing.assert_allclose(log_phi(d, cfg)[1], num, rtol=1e-6, atol=1e-8)


# BPR ---------------------------------------------------------------------------

def test_bpr_equal_scores_is_log2():
    out = loss_bpr(ctx_of([0.3, -0.1], [[0.3], [-0.1]]))
    assert out.value == pytest.approx(math.log(2), abs=1e-15)
    np.testing.assert_allclose(out.row_values, math.log(2), atol=1e-15)


def test_bpr_asymptote():
    assert loss_bpr(ctx_of([40.0], [[-40.0]])).value < 1e-30


def test_bpr_matches_scalar_formula():
    rng = np.random.default_rng(3)
    r_ui, r_uj = rng.normal(size=3), rng.normal(size=(3, 1))
    expect = np.mean([-math.log(1 / (1 + math.exp(-(a - b[0])))) for a, b in zip(r_ui, r_uj)])
    assert loss_bpr(ctx_of(r_ui, r_uj)).value == pytest.approx(expect, rel=1e-13)


def test_bpr_rejects_multiple_negatives():
    with pytest.raises(WrongNegativeCount):
        loss_bpr(ctx_of([0.0], [[0.1, 0.2]]))


# SL / BSL / PSL ------------------------------------------------------------------

def test_sl_single_zero_difference():
    assert loss_sl(ctx_of([0.2], [[0.2]]), LossConfig(kind="SL")).value == pytest.approx(0.0, abs=1e-15)


def test_sl_two_zero_differences_unit_temperature():
    out = loss_sl(ctx_of([0.1], [[0.1, 0.1]]), LossConfig(kind="SL", tau=1.0))
    assert out.value == pytest.approx(math.log(2), abs=1e-15)


def test_sl_rejects_empty_negatives():
    with pytest.raises(WrongNegativeCount):
        loss_sl(PairScoreContext([0.1], np.empty((1, 0))), LossConfig(kind="SL"))


def test_bsl_equal_temperatures_is_sl():
    ctx = random_ctx(np.random.default_rng(0))
    cfg = LossConfig(kind="BSL", tau=0.2, tau2=0.2)
    assert loss_bsl(ctx, cfg).value == pytest.approx(loss_sl(ctx, cfg).value, abs=1e-12)


def test_bsl_single_pair_at_zero_difference():
    ctx = ctx_of([0.25], [[0.25]])
    cfg = LossConfig(kind="BSL", tau=0.2, tau2=0.5)
    assert loss_bsl(ctx, cfg).value == pytest.approx(loss_sl(ctx, cfg).value, abs=1e-12)


def test_psl_exp_is_sl():
    ctx = random_ctx(np.random.default_rng(1))
    a = loss_psl(ctx, LossConfig(kind="PSL", activation="exp", tau=0.2))
    b = loss_sl(ctx, LossConfig(kind="SL", tau=0.2))
    assert a.value == pytest.approx(b.value, abs=1e-12)
    np.testing.assert_allclose(a.grad_r_uj, b.grad_r_uj, atol=1e-12)


def test_psl_relu_floor():
    ctx = ctx_of([0.5], [[-0.5, -0.5, -0.5]])
    out = loss_psl(ctx, LossConfig(kind="PSL", activation="relu", **EXP_FORM))
    assert out.value == pytest.approx(math.log(3), abs=1e-15)


# L_W -----------------------------------------------------------------------------

def test_weighted_beta_zero_is_psl():
    ctx = random_ctx(np.random.default_rng(2))
    for act in ("exp", "relu", "tanh", "atan"):
        cfg = LossConfig(kind="L_W", beta=0.0, activation=act)
        assert loss_weighted(ctx, cfg).value == pytest.approx(loss_psl(ctx, cfg).value, abs=1e-12)


def test_weighted_single_negative_arithmetic():
    ctx = ctx_of([0.0], [[0.2]])
    cfg = LossConfig(kind="L_W", beta=0.8, tau=1.0, activation="exp")
    assert loss_weighted(ctx, cfg).value == pytest.approx(0.04, abs=1e-15)


@given(beta=st.floats(0.0, 10.0), tau=st.floats(0.05, 2.0))
def test_weight_prefers_confident_negatives_above_threshold(beta, tau):
    cfg = LossConfig(kind="L_W", beta=beta, tau=tau, activation="relu", **EXP_FORM)

    def summand(d):
        return math.exp(-beta * d) * phi(d, cfg)

    if beta > 1 / (2 * tau) * (1 + 1e-9):
        assert summand(-0.9) > summand(0.9)
    elif beta < 1 / (2 * tau) * (1 - 1e-9):
        assert summand(-0.9) < summand(0.9)


# L_C / CW ------------------------------------------------------------------------

def test_corrected_without_prior_is_sl():
    ctx = random_ctx(np.random.default_rng(4))
    cfg = LossConfig(kind="L_C", activation="exp")
    assert loss_corrected(ctx, cfg, 0.0).value == pytest.approx(loss_sl(ctx, cfg).value, abs=1e-12)


def test_corrected_point_masses():
    a, tau, tp, N = 0.15, 0.2, 0.5, 4
    ctx = ctx_of([0.0], [[a] * N], [[a] * 3])
    cfg = LossConfig(kind="L_C", activation="exp", tau=tau)
    inner = math.exp(a / tau) - tp * math.exp(a / tau)
    assert inner == pytest.approx(0.5 * math.exp(a / tau))
    expect = math.log(N / (1 - tp)) + math.log(inner)
    assert loss_corrected(ctx, cfg, tp).value == pytest.approx(expect, rel=1e-13)


def test_corrected_clamp_boundary():
    ctx = ctx_of([0.0], [[-0.4, -0.4]], [[0.4, 0.4]])
    cfg = LossConfig(kind="L_C", activation="exp", tau=0.2)
    tp = 0.5
    out = loss_corrected(ctx, cfg, tp)
    assert out.value == pytest.approx(math.log(2 / (1 - tp) * cfg.eps_clamp), rel=1e-13)
    assert out.clamp_rate == 1.0
    assert not np.any(out.grad_r_uj) and not np.any(out.grad_r_uik) and not np.any(out.grad_r_ui)


def test_cw_double_reduction():
    rng = np.random.default_rng(5)
    for N in (1, 6):
        ctx = random_ctx(rng, N=N)
        for Q in (None, 1.0, 7.5):
            cfg = LossConfig(kind="CW", beta=0.0, activation="tanh", Q=Q)
            Qv = N if Q is None else Q
            got = loss_cw(ctx, cfg, 0.0).value - math.log(Qv / N)
            assert got == pytest.approx(loss_psl(ctx, cfg).value, abs=1e-12)


def test_cw_single_negative_single_positive():
    d1 = 0.13
    ctx = ctx_of([0.0], [[d1]], [[d1]])
    for tp in (0.0, 0.05, 0.3):
        cfg = LossConfig(kind="CW", beta=0.8, activation="relu", tau=0.2)
        assert loss_cw(ctx, cfg, tp).value == pytest.approx(math.log(1 * phi(d1, cfg)), abs=1e-12)


def test_cw_uses_per_user_prior():
    ctx = PairScoreContext([0.1, 0.1], [[0.0, 0.2], [0.0, 0.2]], [[0.1], [0.1]], users=[0, 1])
    prior = PriorEstimate("per_user_rate", np.array([0.0, 0.2]))
    cfg = LossConfig(kind="CW")
    out = loss_cw(ctx, cfg, prior)
    assert out.row_values[0] == pytest.approx(loss_cw(PairScoreContext([0.1], [[0.0, 0.2]], [[0.1]]), cfg, 0.0).value)
    assert out.row_values[0] != pytest.approx(out.row_values[1])


def test_compute_loss_needs_prior_for_corrected():
    with pytest.raises(ValueError):
        compute_loss(random_ctx(np.random.default_rng(0)), LossConfig(kind="CW"), None)


# estimator -----------------------------------------------------------------------

def test_estimator_without_prior_is_mean():
    x = np.array([1.0, 2.0, 4.0])
    assert corrected_expectation_estimator(x, [100.0], 0.0) == pytest.approx(7 / 3)


def test_estimator_two_point_mixture():
    mix = [2.0] * 5 + [5.0] * 5
    assert corrected_expectation_estimator(mix, [2.0] * 7, 0.5) == pytest.approx(5.0, abs=1e-15)


# gradients -----------------------------------------------------------------------

@pytest.mark.parametrize("form", ["exp_of_activation", "raw_power"])
@pytest.mark.parametrize("kind", ["SL", "BSL", "PSL", "L_W", "L_C", "CW"])
@pytest.mark.parametrize("act", ["exp", "relu", "tanh", "atan"])
def test_gradients_match_finite_differences(kind, act, form):
    rng = np.random.default_rng(zlib.crc32(f"{kind}-{act}-{form}".encode()))
    cfg = LossConfig(kind=kind, tau=0.2, tau2=0.5, beta=0.8, activation=act, sigma_form=form)
    prior = 0.1 if kind in ("L_C", "CW") else None
    for _ in range(3):
        table, batch = random_problem(rng)
        assert gradient_error(table, batch, cfg, prior) < 1e-4


def test_bpr_gradient_dot_scores():
    rng = np.random.default_rng(9)
    table, batch = random_problem(rng, N=1, M=0)
    assert gradient_error(table, batch, LossConfig(kind="BPR")) < 1e-4


def test_gradients_cover_exactly_batch_embeddings():
    rng = np.random.default_rng(10)
    table, batch = random_problem(rng, num_items=40)
    ctx = PairScoreContext.from_embeddings(table, batch)
    out = compute_loss(ctx, LossConfig(kind="CW"), 0.1)
    touched = set(np.concatenate([batch.pos, batch.negs.ravel(), batch.extra_pos.ravel()]).tolist())
    assert {k for k in out.grads if k[0] == "item"} == {("item", i) for i in touched}
    assert {k for k in out.grads if k[0] == "user"} == {("user", int(u)) for u in batch.users}
    assert all(np.all(np.isfinite(g)) for g in out.grads.values())


# invariants ----------------------------------------------------------------------

@settings(max_examples=40, deadline=None)
@given(seed=st.integers(0, 2**31), alpha=st.sampled_from([0.1, 10.0]),
       kind=st.sampled_from(["SL", "BSL", "PSL", "L_W", "L_C", "CW"]))
def test_losses_invariant_to_vector_rescaling(seed, alpha, kind):
    rng = np.random.default_rng(seed)
    table, batch = random_problem(rng)
    cfg = LossConfig(kind=kind, tau2=0.4)
    prior = 0.1 if kind in ("L_C", "CW") else None
    before = loss_value(table, batch, cfg, prior)
    scaled = EmbeddingTable(table.user_vecs.copy(), table.item_vecs.copy())
    scaled.user_vecs[0] *= alpha
    scaled.item_vecs[int(batch.negs[0, 0])] *= alpha
    assert loss_value(scaled, batch, cfg, prior) == pytest.approx(before, abs=1e-9)


@settings(max_examples=200, deadline=None)
@given(seed=st.integers(0, 2**31), n_pos=st.integers(1, 10))
def test_rank_chain_inequality(seed, n_pos):
    rng = np.random.default_rng(seed)
    scores = rng.normal(size=30)
    positives = rng.choice(30, size=n_pos, replace=False)
    pi = np.array([np.sum(scores >= scores[i]) for i in positives])
    np.testing.assert_array_equal(pi, heaviside_ranks(scores, positives))
    lhs = -math.log(dcg_full(scores, positives)) + math.log(n_pos)
    rhs = float(np.mean(np.log(pi)))
    assert lhs <= rhs


def test_estimator_unbiased_on_mixture():
    rng = np.random.default_rng(0)
    tau, tp, n = 0.2, 0.3, 500
    mu_p, mu_n, sd = 0.2, -0.2, 0.1
    truth = math.exp(mu_n / tau + sd**2 / (2 * tau**2))
    est = []
    for _ in range(1000):
        is_pos = rng.random(n) < tp
        d = np.where(is_pos, rng.normal(mu_p, sd, n), rng.normal(mu_n, sd, n))
        est.append(corrected_expectation_estimator(np.exp(d / tau), np.exp(rng.normal(mu_p, sd, n) / tau), tp))
    est = np.array(est)
    assert abs(est.mean() - truth) < 3 * est.std(ddof=1) / math.sqrt(len(est))
