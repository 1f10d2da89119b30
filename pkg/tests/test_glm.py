import itertools
import math

import numpy as np
import pytest

from spikemmd import (
    DomainError,
    GlmParams,
    GradVec,
    InsufficientDataError,
    OptimizationError,
    ParameterError,
    ShapeError,
    SpikeTrain,
    TrialSet,
    conditional_intensity,
    fit_mle,
    load_params,
    log_likelihood,
    nll_gradient,
    relative_ll_per_spike,
    sample_free_running,
    save_params,
    score_function,
)
from spikemmd.errors import GradientUndefinedError
from spikemmd.glm import homogeneous_baseline, loglik_rows
from spikemmd.optim import FitConfig


def all_binary_sequences(t):
    return np.array(list(itertools.product([0, 1], repeat=t)), dtype=np.int64)


def central_diff(f, theta, step=1e-5):
    g = np.zeros_like(theta)
    for i in range(theta.size):
        hi, lo = theta.copy(), theta.copy()
        hi[i] += step
        lo[i] -= step
        g[i] = (f(hi) - f(lo)) / (2 * step)
    return g


class TestConditionalIntensity:
    def test_homogeneous(self):
        out = conditional_intensity(GlmParams(math.log(5.0), []), SpikeTrain([0, 0, 0], 1.0))
        assert np.allclose(out.lam, 5.0)
        assert not out.clipped

    def test_single_lag(self):
        out = conditional_intensity(GlmParams(0.0, [1.0]), SpikeTrain([1, 0, 0], 1.0))
        assert np.allclose(out.lam, [1.0, math.e, 1.0])

    def test_cap_engages(self):
        out = conditional_intensity(
            GlmParams(0.0, [100.0]), SpikeTrain([1, 1, 1], 1.0), lam_max=1e6
        )
        assert out.clipped
        assert out.lam.max() == pytest.approx(1e6)

    def test_history_free_independent_of_counts(self):
        p = GlmParams(1.3, [])
        a = conditional_intensity(p, SpikeTrain([1, 0, 1], 0.1))
        b = conditional_intensity(p, SpikeTrain([0, 1, 0], 0.1))
        assert np.array_equal(a.lam, b.lam)

    def test_stimulus_shape_checked(self):
        p = GlmParams(0.0, [], stimulus_filter=[0.5])
        with pytest.raises(ShapeError):
            conditional_intensity(p, SpikeTrain([0, 0], 1.0), u=np.ones(3))


class TestLogLikelihood:
    def test_poisson_plugin(self):
        # lam*dt = 1 per bin, two spikes: each term is -1
        p = GlmParams(math.log(1.0), [])
        assert log_likelihood(p, SpikeTrain([1, 1], 1.0), obs="poisson") == pytest.approx(-2.0)

    def test_bernoulli_all_zero_identity(self):
        p = GlmParams(0.4, [0.3, -0.2])
        x = SpikeTrain([0] * 7, 0.1)
        lam = conditional_intensity(p, x).lam
        expected = -np.sum(lam * 0.1)
        assert log_likelihood(p, x, obs="bernoulli") == pytest.approx(expected)

    def test_bernoulli_rejects_counts(self):
        with pytest.raises(DomainError):
            log_likelihood(GlmParams(0.0, []), SpikeTrain([2, 0], 1.0), obs="bernoulli")

    def test_unknown_obs(self):
        with pytest.raises(ParameterError):
            log_likelihood(GlmParams(0.0, []), SpikeTrain([1], 1.0), obs="gamma")

    @pytest.mark.parametrize("seed", [0, 1, 2])
    def test_bernoulli_normalization_t8(self, seed):
        rng = np.random.default_rng(seed)
        params = GlmParams(rng.normal(0.5, 0.5), rng.normal(0, 0.7, 3))
        seqs = all_binary_sequences(8)
        mass = np.exp(loglik_rows(params, seqs, 0.1, "bernoulli")).sum()
        assert mass == pytest.approx(1.0, abs=1e-10)


class TestGradients:
    @pytest.mark.parametrize("obs", ["poisson", "bernoulli"])
    def test_matches_finite_differences(self, obs):
        rng = np.random.default_rng(3)
        for _ in range(10):
            t, n_h, n_a = 30, 3, 2
            u = rng.normal(0, 0.5, t)
            x = SpikeTrain(rng.integers(0, 2, t), 0.05)
            theta = np.concatenate(
                [[rng.normal(0, 0.5)], rng.normal(0, 0.4, n_h), rng.normal(0, 0.3, n_a)]
            )

            def ll(vec):
                return log_likelihood(
                    GlmParams.from_vector(vec, n_h, n_a), x, u=u, obs=obs
                )

            params = GlmParams.from_vector(theta, n_h, n_a)
            got = score_function(params, x, u=u, obs=obs).to_vector()
            want = central_diff(ll, theta)
            assert np.max(np.abs(got - want)) <= 1e-5 * max(1.0, np.max(np.abs(want)))

    def test_nll_gradient_is_negated_score(self):
        x = SpikeTrain([1, 0, 1, 1, 0], 0.1)
        p = GlmParams(0.2, [0.5, -0.3])
        s = score_function(p, x, obs="poisson").to_vector()
        g = nll_gradient(p, x, obs="poisson").to_vector()
        assert np.array_equal(g, -s)

    def test_all_zero_train_zero_history_grad(self):
        x = SpikeTrain([0] * 10, 0.1)
        g = nll_gradient(GlmParams(0.0, [0.4, 0.2]), x, obs="poisson")
        assert np.allclose(g.d_history, 0.0)

    def test_capped_input_refused(self):
        p = GlmParams(0.0, [100.0])
        x = SpikeTrain([1, 1, 1], 1.0)
        with pytest.raises(GradientUndefinedError):
            nll_gradient(p, x, obs="poisson")

    def test_zero_mean_score_by_enumeration(self):
        params = GlmParams(1.1, [-0.6, 0.4])
        t, dt = 8, 0.1
        seqs = all_binary_sequences(t)
        probs = np.exp(loglik_rows(params, seqs, dt, "bernoulli"))
        from spikemmd.glm import score_matrix

        scores, _ = score_matrix(params, seqs, dt, "bernoulli")
        mean_score = probs @ scores
        assert np.max(np.abs(mean_score)) < 1e-10

    def test_homogeneous_mle_stationarity(self):
        counts = np.array([[1, 0, 1, 0, 0], [0, 1, 0, 0, 1]])
        trials = TrialSet.from_counts(counts, 0.1)
        p = homogeneous_baseline(trials)
        total = sum(
            nll_gradient(p, tr, obs="poisson").d_bias for tr in trials.trials
        )
        assert abs(total) < 1e-8


class TestSampling:
    def test_requires_positive_n(self):
        with pytest.raises(ParameterError):
            sample_free_running(GlmParams(0.0, []), 0.1, "poisson", 0, 5)

    def test_homogeneous_rate_recovered(self):
        rate = 30.0
        ts, flags = sample_free_running(
            GlmParams(math.log(rate), []), 0.001, "bernoulli", 200, 500, seed=4
        )
        se = math.sqrt(rate / (200 * 500 * 0.001))
        assert abs(ts.mean_rate() - rate) < 3 * se
        assert not flags.any()

    def test_refractory_suppresses_consecutive_spikes(self):
        p = GlmParams(math.log(50.0), [-30.0])
        ts, _ = sample_free_running(p, 0.001, "bernoulli", 50, 400, seed=5)
        mat = ts.counts_matrix()
        assert int((mat[:, 1:] * mat[:, :-1]).sum()) == 0

    def test_self_excitation_flags_runaway(self):
        p = GlmParams(math.log(20.0), [3.0, 3.0])
        ts, flags = sample_free_running(p, 0.001, "poisson", 20, 800, seed=6)
        assert flags.mean() > 0.5
        assert ts.mean_rate() > 10 * 20.0

    def test_deterministic_and_stream_separated(self):
        p = GlmParams(math.log(10.0), [-1.0])
        a, _ = sample_free_running(p, 0.002, "bernoulli", 4, 100, seed=9, stream=3)
        b, _ = sample_free_running(p, 0.002, "bernoulli", 4, 100, seed=9, stream=3)
        c, _ = sample_free_running(p, 0.002, "bernoulli", 4, 100, seed=9, stream=4)
        assert np.array_equal(a.counts_matrix(), b.counts_matrix())
        assert not np.array_equal(a.counts_matrix(), c.counts_matrix())

    def test_trial_streams_independent_of_batch_size(self):
        p = GlmParams(math.log(10.0), [])
        big, _ = sample_free_running(p, 0.002, "bernoulli", 6, 50, seed=2)
        small, _ = sample_free_running(p, 0.002, "bernoulli", 3, 50, seed=2)
        assert np.array_equal(big.counts_matrix()[:3], small.counts_matrix())

    def test_sampling_matches_likelihood_t5(self):
        # empirical sequence frequencies track exp(log_likelihood)
        t, dt, n = 5, 0.2, 200_000
        params = GlmParams(1.0, [-1.2, 0.5])
        ts, _ = sample_free_running(params, dt, "bernoulli", n, t, seed=12)
        mat = ts.counts_matrix()
        codes = mat @ (1 << np.arange(t))
        freq = np.bincount(codes, minlength=2**t) / n
        seqs = all_binary_sequences(t)
        seq_codes = seqs @ (1 << np.arange(t))
        probs = np.exp(loglik_rows(params, seqs, dt, "bernoulli"))
        probs_by_code = np.zeros(2**t)
        probs_by_code[seq_codes] = probs
        se = np.sqrt(probs_by_code * (1 - probs_by_code) / n)
        assert np.all(np.abs(freq - probs_by_code) <= 4 * se + 1e-12)


class TestFitMle:
    def test_homogeneous_recovery(self):
        rate = 25.0
        data, _ = sample_free_running(
            GlmParams(math.log(rate), []), 0.001, "poisson", 30, 400, seed=7
        )
        cfg = FitConfig(history_bins=0, max_iters=2000, learning_rate=0.1)
        params, trace = fit_mle(data, "poisson", cfg)
        emp_rate = data.mean_rate()
        assert params.bias == pytest.approx(math.log(emp_rate), abs=1e-4)
        assert trace.records[-1].grad_norm < cfg.tolerance

    def test_convexity_two_inits_agree(self):
        truth = GlmParams(math.log(30.0), [-2.0, 0.5])
        data, _ = sample_free_running(truth, 0.005, "bernoulli", 20, 200, seed=8)
        cfg = FitConfig(history_bins=2, max_iters=5000, learning_rate=0.1)
        _, trace_a = fit_mle(data, "bernoulli", cfg)
        _, trace_b = fit_mle(
            data, "bernoulli", cfg, init=GlmParams(0.5, [0.4, -0.4])
        )
        assert trace_a.final_nll() == pytest.approx(trace_b.final_nll(), abs=1e-6)

    def test_error_shrinks_with_more_trials(self):
        truth = GlmParams(math.log(30.0), [-2.5, -1.0])
        big, _ = sample_free_running(truth, 0.005, "bernoulli", 80, 300, seed=9)
        cfg = FitConfig(history_bins=2, max_iters=5000, learning_rate=0.1)
        small = TrialSet(big.trials[:10])
        p_small, _ = fit_mle(small, "bernoulli", cfg)
        p_big, _ = fit_mle(big, "bernoulli", cfg)
        err_small = np.linalg.norm(p_small.to_vector() - truth.to_vector())
        err_big = np.linalg.norm(p_big.to_vector() - truth.to_vector())
        assert err_big < err_small

    def test_ridge_shrinks_history(self):
        truth = GlmParams(math.log(30.0), [-2.0, -1.0])
        data, _ = sample_free_running(truth, 0.005, "bernoulli", 20, 200, seed=10)
        cfg = FitConfig(history_bins=2, max_iters=5000, learning_rate=0.1)
        plain, _ = fit_mle(data, "bernoulli", cfg)
        ridged, _ = fit_mle(data, "bernoulli", cfg.with_(lambda_ridge=1.0))
        assert np.linalg.norm(ridged.history) < np.linalg.norm(plain.history)


class TestRelativeLl:
    def test_baseline_itself_is_zero(self):
        data, _ = sample_free_running(
            GlmParams(math.log(20.0), []), 0.001, "bernoulli", 10, 300, seed=3
        )
        p = homogeneous_baseline(data)
        assert relative_ll_per_spike(p, data, "bernoulli") == pytest.approx(0.0)

    def test_true_structured_model_beats_baseline(self):
        truth = GlmParams(math.log(40.0), [-3.0, -1.5])
        data, _ = sample_free_running(truth, 0.005, "bernoulli", 30, 300, seed=4)
        assert relative_ll_per_spike(truth, data, "bernoulli") > 0

    def test_no_spikes_rejected(self):
        trials = TrialSet.from_counts(np.zeros((2, 10), dtype=int), 0.01)
        with pytest.raises(InsufficientDataError):
            relative_ll_per_spike(GlmParams(0.0, []), trials, "poisson")


class TestParamsIO:
    def test_roundtrip_exact(self, tmp_path):
        p = GlmParams(-3.2188758248682006, [0.1, -2.5e-7, 3.0], [1e-17, -4.4])
        path = tmp_path / "params.txt"
        save_params(p, 0.0001, "poisson", path)
        q, dt, obs = load_params(path)
        assert dt == 0.0001
        assert obs == "poisson"
        assert q.bias == p.bias
        assert np.array_equal(q.history, p.history)
        assert np.array_equal(q.stimulus_filter, p.stimulus_filter)

    def test_no_stimulus_roundtrip(self, tmp_path):
        p = GlmParams(0.5, [])
        path = tmp_path / "params.txt"
        save_params(p, 0.01, "bernoulli", path)
        q, _, _ = load_params(path)
        assert q.stimulus_filter is None
        assert q.n_history == 0

    def test_missing_field_rejected(self, tmp_path):
        path = tmp_path / "params.txt"
        path.write_text("bias = 0.0\n")
        from spikemmd import ParseError

        with pytest.raises(ParseError):
            load_params(path)
