import numpy as np
import pytest

from ldn.autodiff import NumericError
from ldn.depth import (
    DepthPosterior,
    exact_posterior,
    elbo_minibatch,
    kl_categorical,
    log_marginal_likelihood,
    make_prior,
    posterior_from_logits,
    predict_marginal,
    prune_95,
    prune_argmax,
    prune_expected,
    truncate_posterior,
)


def random_simplex(rng, k):
    v = rng.gamma(1.0, 1.0, size=k)
    return v / v.sum()


class TestPrior:
    def test_single_depth(self):
        prior = make_prior(0, 0.3)
        np.testing.assert_array_equal(prior.probs, [1.0])

    def test_two_depths_closed_form(self):
        prior = make_prior(1, 0.5)
        np.testing.assert_allclose(prior.probs, [2.0 / 3.0, 1.0 / 3.0], atol=1e-15)

    def test_three_depths_decay_085(self):
        prior = make_prior(2, 0.85)
        raw = np.array([0.85, 0.7225, 0.614125])
        np.testing.assert_allclose(prior.probs, raw / raw.sum(), atol=1e-15)

    def test_normalized_and_decreasing(self):
        prior = make_prior(50, 0.85)
        assert abs(prior.probs.sum() - 1.0) < 1e-12
        assert (np.diff(prior.probs) < 0).all()

    def test_gamma_out_of_range(self):
        with pytest.raises(ValueError):
            make_prior(3, 1.0)
        with pytest.raises(ValueError):
            make_prior(3, 0.0)
        with pytest.raises(ValueError):
            make_prior(3, -0.5)


class TestPosterior:
    def test_zero_logits_give_uniform(self):
        post = posterior_from_logits(np.zeros(4))
        np.testing.assert_allclose(post.probs, 0.25)

    def test_extreme_logits_are_stable(self):
        post = posterior_from_logits(np.array([1000.0, 0.0]))
        assert np.isfinite(post.probs).all()
        np.testing.assert_allclose(post.probs, [1.0, 0.0], atol=1e-300)

    def test_matches_high_precision_softmax(self):
        import mpmath

        mpmath.mp.dps = 40
        rng = np.random.default_rng(0)
        logits = rng.normal(0.0, 5.0, size=6)
        z = [mpmath.exp(mpmath.mpf(v)) for v in logits]
        total = sum(z)
        expected = [float(v / total) for v in z]
        post = posterior_from_logits(logits)
        np.testing.assert_allclose(post.probs, expected, rtol=1e-14)

    def test_non_finite_rejected(self):
        with pytest.raises(NumericError):
            posterior_from_logits(np.array([np.nan, 0.0]))

    def test_point_mass_is_exact(self):
        post = DepthPosterior.point_mass(2, 5)
        np.testing.assert_array_equal(post.probs, [0, 0, 1, 0, 0])


class TestKl:
    def test_identical_distributions(self):
        q = np.array([0.2, 0.3, 0.5])
        assert kl_categorical(q, q) == 0.0

    def test_point_mass_vs_uniform(self):
        assert abs(kl_categorical([1.0, 0.0], [0.5, 0.5]) - np.log(2.0)) < 1e-15

    def test_matches_bruteforce_and_nonnegative(self):
        rng = np.random.default_rng(1)
        for _ in range(200):
            q = random_simplex(rng, 5)
            p = random_simplex(rng, 5)
            val = kl_categorical(q, p)
            brute = sum(qi * np.log(qi / pi) for qi, pi in zip(q, p) if qi > 0)
            assert abs(val - brute) < 1e-12
            assert val >= 0.0

    def test_infinite_divergence_rejected(self):
        with pytest.raises(ValueError):
            kl_categorical([0.5, 0.5], [1.0, 0.0])

    def test_zero_mass_convention(self):
        # q may have zeros where p has support: 0 log 0 = 0
        assert kl_categorical([0.0, 1.0], [0.5, 0.5]) == pytest.approx(np.log(2.0))


class TestElbo:
    def test_point_mass_selects_one_depth(self):
        rng = np.random.default_rng(2)
        loglik = rng.normal(-1.0, 0.3, size=(10, 4))
        prior = make_prior(3, 0.85)
        alpha = DepthPosterior.point_mass(2, 4)
        expected = loglik[:, 2].sum() - kl_categorical(alpha.probs, prior.probs)
        assert abs(elbo_minibatch(loglik, alpha, prior, 10) - expected) < 1e-12

    def test_constant_table_scales_to_n_total(self):
        prior = make_prior(2, 0.85)
        loglik = np.full((5, 3), -0.25)
        alpha = np.array([0.2, 0.3, 0.5])
        val = elbo_minibatch(loglik, alpha, prior, 20)
        expected = 20 * (-0.25) - kl_categorical(alpha, prior.probs)
        assert abs(val - expected) < 1e-12

    def test_matches_bruteforce_double_loop(self):
        rng = np.random.default_rng(3)
        loglik = rng.normal(-1.0, 0.5, size=(7, 5))
        alpha = random_simplex(rng, 5)
        prior = make_prior(4, 0.7)
        val = elbo_minibatch(loglik, alpha, prior, 21)
        brute = (21 / 7) * sum(
            loglik[n, i] * alpha[i] for n in range(7) for i in range(5)
        ) - kl_categorical(alpha, prior.probs)
        assert abs(val - brute) < 1e-10

    def test_batch_larger_than_total_rejected(self):
        prior = make_prior(1, 0.85)
        with pytest.raises(ValueError):
            elbo_minibatch(np.zeros((5, 2)), [0.5, 0.5], prior, 3)

    def test_non_finite_loglik_rejected(self):
        prior = make_prior(1, 0.85)
        with pytest.raises(NumericError):
            elbo_minibatch(np.array([[0.0, -np.inf]]), [0.5, 0.5], prior, 1)


class TestExactPosterior:
    def test_uniform_likelihood_returns_prior(self):
        prior = make_prior(4, 0.85)
        post = exact_posterior(np.zeros((6, 5)), prior)
        np.testing.assert_allclose(post.probs, prior.probs, atol=1e-12)

    def test_hand_bayes_rule(self):
        prior = make_prior(1, 0.5)
        # overwrite with a uniform prior via equal logits on both depths
        uniform = make_prior(1, 0.999999999)
        loglik = np.array([[np.log(0.9), np.log(0.1)]])
        post = exact_posterior(loglik, uniform)
        np.testing.assert_allclose(post.probs, [0.9, 0.1], atol=1e-6)

    def test_extreme_dominance_no_overflow(self):
        prior = make_prior(3, 0.85)
        loglik = np.zeros((10, 4))
        loglik[:, 2] = 50.0  # e^500 total advantage
        post = exact_posterior(loglik, prior)
        assert np.isfinite(post.probs).all()
        assert post.probs[2] >= 1.0 - 1e-10

    def test_shift_invariance(self):
        rng = np.random.default_rng(4)
        prior = make_prior(5, 0.85)
        loglik = rng.normal(-2.0, 1.0, size=(8, 6))
        base = exact_posterior(loglik, prior).probs
        shifted = exact_posterior(loglik + 123.456, prior).probs
        np.testing.assert_allclose(base, shifted, atol=1e-9)


class TestLogMarginal:
    def test_single_depth_is_plain_loglik(self):
        prior = make_prior(0, 0.85)
        loglik = np.array([[-1.0], [-2.0]])
        assert abs(log_marginal_likelihood(loglik, prior) - (-3.0)) < 1e-12

    def test_elbo_at_exact_posterior_is_tight(self):
        rng = np.random.default_rng(5)
        prior = make_prior(4, 0.85)
        loglik = rng.normal(-1.0, 2.0, size=(12, 5))
        post = exact_posterior(loglik, prior)
        elbo = elbo_minibatch(loglik, post, prior, 12)
        logz = log_marginal_likelihood(loglik, prior)
        assert abs(elbo - logz) < 1e-9

    def test_elbo_is_a_lower_bound_for_any_posterior(self):
        rng = np.random.default_rng(6)
        prior = make_prior(3, 0.85)
        loglik = rng.normal(-1.0, 2.0, size=(9, 4))
        logz = log_marginal_likelihood(loglik, prior)
        for _ in range(100):
            alpha = random_simplex(rng, 4)
            assert elbo_minibatch(loglik, alpha, prior, 9) <= logz + 1e-9


class TestPruning:
    def test_argmax_basic(self):
        assert prune_argmax([0.1, 0.8, 0.1]).d_opt == 1

    def test_argmax_tie_breaks_shallow(self):
        assert prune_argmax([0.25, 0.25, 0.25, 0.25]).d_opt == 0
        assert prune_argmax([0.2, 0.4, 0.4]).d_opt == 1

    def test_p95_first_above_threshold(self):
        alpha = np.array([0.01, 0.32, 0.33, 0.34])
        # threshold 0.95 * 0.34 = 0.323: first qualifying index is 2
        assert prune_95(alpha).d_opt == 2

    def test_p95_point_mass(self):
        assert prune_95(DepthPosterior.point_mass(3, 5).probs).d_opt == 3

    def test_p95_equal_pair_takes_min(self):
        assert prune_95([0.5, 0.5]).d_opt == 0

    def test_p95_never_deeper_than_argmax(self):
        rng = np.random.default_rng(7)
        for _ in range(200):
            alpha = random_simplex(rng, 8)
            assert prune_95(alpha).d_opt <= prune_argmax(alpha).d_opt

    def test_expected_point_mass(self):
        assert prune_expected(DepthPosterior.point_mass(2, 4).probs).d_opt == 2

    def test_expected_half_rounds_up(self):
        assert prune_expected([0.5, 0.5]).d_opt == 1

    def test_expected_symmetric(self):
        assert prune_expected([0.25, 0.5, 0.25]).d_opt == 1

    def test_results_lie_in_range(self):
        rng = np.random.default_rng(8)
        for _ in range(100):
            alpha = random_simplex(rng, 6)
            for fn in (prune_argmax, prune_95, prune_expected):
                res = fn(alpha)
                assert 0 <= res.d_opt <= 5
                assert abs(res.truncated.sum() - 1.0) < 1e-12


class TestTruncate:
    def test_reassigns_tail_mass(self):
        out = truncate_posterior(np.array([0.2, 0.3, 0.5]), 1)
        np.testing.assert_allclose(out, [0.2, 0.8])

    def test_full_depth_unchanged(self):
        alpha = np.array([0.2, 0.3, 0.5])
        np.testing.assert_allclose(truncate_posterior(alpha, 2), alpha)

    def test_depth_zero_collapses(self):
        np.testing.assert_allclose(truncate_posterior(np.array([0.2, 0.3, 0.5]), 0), [1.0])

    def test_mass_conserved(self):
        rng = np.random.default_rng(9)
        for _ in range(100):
            alpha = random_simplex(rng, 7)
            d = int(rng.integers(0, 7))
            out = truncate_posterior(alpha, d)
            assert len(out) == d + 1
            assert abs(out.sum() - 1.0) < 1e-12
            np.testing.assert_allclose(out[:d], alpha[:d])

    def test_range_checked(self):
        with pytest.raises(ValueError):
            truncate_posterior(np.array([1.0]), 1)


class TestPredictMarginal:
    def test_point_mass_selects_single_depth(self):
        rng = np.random.default_rng(10)
        probs = rng.dirichlet(np.ones(3), size=(4, 2)).transpose(0, 1, 2)
        out = predict_marginal(probs, np.array([0.0, 1.0]))
        np.testing.assert_allclose(out, probs[:, 1, :])

    def test_symmetric_mixture(self):
        probs = np.array([[[1.0, 0.0], [0.0, 1.0]]])
        out = predict_marginal(probs, np.array([0.5, 0.5]))
        np.testing.assert_allclose(out, [[0.5, 0.5]])

    def test_matches_bruteforce_weighted_sum(self):
        rng = np.random.default_rng(11)
        probs = rng.dirichlet(np.ones(4), size=(5, 3))
        alpha = random_simplex(rng, 3)
        out = predict_marginal(probs, alpha)
        brute = np.zeros((5, 4))
        for n in range(5):
            for i in range(3):
                brute[n] += probs[n, i] * alpha[i]
        np.testing.assert_allclose(out, brute, atol=1e-12)

    def test_rows_stay_normalized(self):
        rng = np.random.default_rng(12)
        for _ in range(100):
            probs = rng.dirichlet(np.ones(3), size=(6, 4))
            alpha = random_simplex(rng, 4)
            rows = predict_marginal(probs, alpha).sum(axis=1)
            np.testing.assert_allclose(rows, 1.0, atol=1e-10)

    def test_length_mismatch_rejected(self):
        with pytest.raises(ValueError):
            predict_marginal(np.ones((2, 3, 2)) / 2.0, np.array([0.5, 0.5]))
