import itertools
import math

import numpy as np
import pytest

from spikemmd import (
    ContractError,
    FitConfig,
    GlmParams,
    KernelSpec,
    NoQualifyingAlphaError,
    ParameterError,
    ShapeError,
    SpikeTrain,
    TrialSet,
    fit_joint,
    fit_mle,
    fit_mmd,
    gram,
    mmd2_between,
    mmd2_biased,
    mmd2_grad_modelbased,
    mmd2_grad_score,
    mmd2_unbiased,
    sample_free_running,
    select_alpha,
)
from spikemmd.glm import loglik_rows, score_matrix
from spikemmd.kernels import feature_matrix, resolve_spec
from spikemmd.mmd import mmd2_unbiased_from_features
from spikemmd.optim import FitTrace


def central_diff(f, theta, step=1e-5):
    g = np.zeros_like(theta)
    for i in range(theta.size):
        hi, lo = theta.copy(), theta.copy()
        hi[i] += step
        lo[i] -= step
        g[i] = (f(hi) - f(lo)) / (2 * step)
    return g


class TestMmd2Unbiased:
    def test_constant_kernel_cancels(self):
        g = np.full((4, 4), 0.7)
        assert mmd2_unbiased(g, g, g).value == pytest.approx(0.0)

    def test_hand_arithmetic(self):
        g_dd = np.array([[5.0, 1.0], [1.0, 5.0]])
        g_mm = np.array([[9.0, 0.0], [0.0, 9.0]])
        g_dm = np.full((2, 2), 0.5)
        est = mmd2_unbiased(g_dd, g_mm, g_dm)
        assert est.value == pytest.approx(1.0 + 0.0 - 1.0)
        assert est.estimator == "unbiased"

    def test_requires_two_per_side(self):
        one = np.ones((1, 1))
        two = np.ones((2, 2))
        with pytest.raises(ParameterError):
            mmd2_unbiased(one, two, np.ones((1, 2)))

    def test_shape_checked(self):
        with pytest.raises(ShapeError):
            mmd2_unbiased(np.ones((2, 2)), np.ones((2, 2)), np.ones((3, 2)))

    def test_identical_distribution_centered_at_zero(self):
        rng = np.random.default_rng(0)
        reps = 600
        vals = np.empty(reps)
        for r in range(reps):
            f = rng.normal(0, 1, (12, 3))
            g = rng.normal(0, 1, (10, 3))
            vals[r] = mmd2_unbiased_from_features(f, g).value
        se = vals.std() / math.sqrt(reps)
        assert abs(vals.mean()) < 3 * se

    def test_feature_identity_matches_gram_path(self):
        rng = np.random.default_rng(1)
        f = rng.normal(0, 1, (7, 4))
        g = rng.normal(0, 1, (5, 4))
        direct = mmd2_unbiased(f @ f.T, g @ g.T, f @ g.T).value
        linear = mmd2_unbiased_from_features(f, g).value
        assert linear == pytest.approx(direct, abs=1e-12)


class TestMmd2Biased:
    def test_identical_sets_zero(self):
        f = np.random.default_rng(2).normal(0, 1, (6, 3))
        assert mmd2_biased(f, f.copy()).value == 0.0

    def test_hand_value(self):
        f_data = np.array([[1.0, 0.0]])
        f_model = np.array([[0.0, 1.0]])
        assert mmd2_biased(f_data, f_model).value == pytest.approx(2.0)

    def test_nonnegative_always(self):
        rng = np.random.default_rng(3)
        for _ in range(200):
            f = rng.normal(0, 1, (rng.integers(1, 6), 4))
            g = rng.normal(0, 1, (rng.integers(1, 6), 4))
            assert mmd2_biased(f, g).value >= 0.0

    def test_matches_v_statistic(self):
        rng = np.random.default_rng(4)
        f = rng.normal(0, 1, (6, 5))
        g = rng.normal(0, 1, (9, 5))
        n, m = 6, 9
        v_stat = (
            (f @ f.T).sum() / n**2
            + (g @ g.T).sum() / m**2
            - 2 * (f @ g.T).sum() / (n * m)
        )
        assert mmd2_biased(f, g).value == pytest.approx(v_stat, abs=1e-10)

    def test_dimension_mismatch(self):
        with pytest.raises(ShapeError):
            mmd2_biased(np.ones((2, 3)), np.ones((2, 4)))

    def test_gap_to_unbiased_shrinks_with_size(self):
        rng = np.random.default_rng(5)
        gaps = []
        for n in (8, 32, 128):
            rep = []
            for _ in range(30):
                f = rng.normal(0, 1, (n, 3))
                g = rng.normal(0.2, 1, (n, 3))
                rep.append(
                    abs(
                        mmd2_biased(f, g).value
                        - mmd2_unbiased_from_features(f, g).value
                    )
                )
            gaps.append(np.mean(rep))
        assert gaps[0] > gaps[1] > gaps[2]


class TestUnbiasednessOracle:
    def test_linear_count_kernel_population_value(self):
        # iid Bernoulli bins; feature = total count; population value
        # ((p - q) * t)^2 is the squared mean gap
        rng = np.random.default_rng(6)
        t, n, m = 20, 8, 10
        p_spike, q_spike = 0.3, 0.45
        reps = 2000
        vals = np.empty(reps)
        for r in range(reps):
            f = rng.binomial(1, p_spike, (n, t)).sum(axis=1, keepdims=True).astype(float)
            g = rng.binomial(1, q_spike, (m, t)).sum(axis=1, keepdims=True).astype(float)
            vals[r] = mmd2_unbiased_from_features(f, g).value
        population = (t * (p_spike - q_spike)) ** 2
        se = vals.std() / math.sqrt(reps)
        assert abs(vals.mean() - population) < 4 * se


def all_binary_sequences(t):
    return np.array(list(itertools.product([0, 1], repeat=t)), dtype=np.int64)


class TestScoreGradient:
    def setup_method(self):
        rng = np.random.default_rng(7)
        self.t, self.dt = 6, 0.05
        self.params = GlmParams.from_vector(np.array([1.2, -0.8, 0.5]), 2, 0)
        self.data = TrialSet.from_counts(rng.integers(0, 2, (5, self.t)), self.dt)
        self.spec = KernelSpec("cumcount-gaussian", sigma=0.7)

    def population_gradient(self):
        seqs = all_binary_sequences(self.t)
        seq_ts = TrialSet.from_counts(seqs, self.dt)
        k_ss = gram(self.spec, seq_ts, seq_ts)
        k_ds = gram(self.spec, self.data, seq_ts)

        def pop_mmd2(vec):
            p = GlmParams.from_vector(vec, 2, 0)
            w = np.exp(loglik_rows(p, seqs, self.dt, "bernoulli"))
            return float(w @ k_ss @ w - 2.0 * (k_ds @ w).mean())

        return central_diff(pop_mmd2, self.params.to_vector(), step=1e-6)

    @pytest.mark.parametrize("baseline", [False, True])
    def test_unbiased_against_enumeration(self, baseline):
        want = self.population_gradient()
        reps, m = 4000, 8
        acc = np.empty((reps, 3))
        for r in range(reps):
            samp, _ = sample_free_running(
                self.params, self.dt, "bernoulli", m, self.t, seed=42, stream=r + 1
            )
            grad, _ = mmd2_grad_score(
                self.params, self.data, samp, self.spec, "bernoulli",
                baseline=baseline,
            )
            acc[r] = grad.to_vector()
        se = acc.std(axis=0) / math.sqrt(reps)
        assert np.all(np.abs(acc.mean(axis=0) - want) <= 4 * se)

    def test_model_based_spec_rejected(self):
        samp, _ = sample_free_running(
            self.params, self.dt, "bernoulli", 4, self.t, seed=1
        )
        with pytest.raises(ContractError):
            mmd2_grad_score(
                self.params, self.data, samp, KernelSpec("mean-ci"), "bernoulli"
            )

    def test_constant_kernel_with_baseline_exactly_zero(self):
        # constant features make every kernel weight equal; the leave-one-out
        # centering then cancels the gradient identically
        samp, _ = sample_free_running(
            self.params, self.dt, "bernoulli", 6, self.t, seed=3
        )
        ones = TrialSet.from_counts(
            np.ones((5, self.t), dtype=int), self.dt
        )
        spec = KernelSpec("cumcount-gaussian", sigma=1e12)
        grad, _ = mmd2_grad_score(
            self.params, ones, samp, spec, "bernoulli", baseline=True
        )
        assert np.max(np.abs(grad.to_vector())) < 1e-9


class TestModelBasedGradient:
    @pytest.mark.parametrize(
        "tag,kw",
        [
            ("feature-mean-history", {}),
            ("history-autocorr", {"max_lag": 6}),
            ("mean-ci", {}),
        ],
    )
    def test_matches_frozen_sample_finite_differences(self, tag, kw):
        rng = np.random.default_rng(8)
        t, dt = 20, 0.05
        data = TrialSet.from_counts(rng.integers(0, 2, (6, t)), dt)
        samp = TrialSet.from_counts(rng.integers(0, 2, (5, t)), dt)
        spec = KernelSpec(tag, **kw)
        theta = np.concatenate([[0.3], rng.normal(0, 0.4, 3)])

        def mval(vec):
            p = GlmParams.from_vector(vec, 3, 0)
            g_dd = gram(spec, data, data, params=p)
            g_mm = gram(spec, samp, samp, params=p)
            g_dm = gram(spec, data, samp, params=p)
            return mmd2_unbiased(g_dd, g_mm, g_dm).value

        p0 = GlmParams.from_vector(theta, 3, 0)
        got, n_exc = mmd2_grad_modelbased(p0, data, samp, spec)
        want = central_diff(mval, theta)
        assert n_exc == 0
        assert np.max(np.abs(got.to_vector() - want)) <= 1e-5 * max(
            1.0, np.max(np.abs(want))
        )

    def test_history_autocorr_zero_at_origin(self):
        rng = np.random.default_rng(9)
        data = TrialSet.from_counts(rng.integers(0, 2, (4, 15)), 0.01)
        samp = TrialSet.from_counts(rng.integers(0, 2, (4, 15)), 0.01)
        p = GlmParams(0.0, [0.0, 0.0])
        grad, _ = mmd2_grad_modelbased(
            p, data, samp, KernelSpec("history-autocorr", max_lag=5)
        )
        assert np.allclose(grad.to_vector(), 0.0)

    def test_fixed_spec_rejected(self):
        rng = np.random.default_rng(10)
        data = TrialSet.from_counts(rng.integers(0, 2, (4, 15)), 0.01)
        with pytest.raises(ContractError):
            mmd2_grad_modelbased(
                GlmParams(0.0, [0.1]), data, data,
                KernelSpec("cumcount-gaussian", sigma=1.0),
            )

    def test_biased_path_chain_rule_identity(self):
        # gradient of the biased estimate equals
        # 2 * gap @ d(gap)/d(theta) with the mean-feature gap
        rng = np.random.default_rng(11)
        t, dt = 18, 0.05
        data = TrialSet.from_counts(rng.integers(0, 2, (5, t)), dt)
        samp = TrialSet.from_counts(rng.integers(0, 2, (4, t)), dt)
        spec = KernelSpec("history-autocorr", max_lag=5)
        theta = np.concatenate([[0.1], rng.normal(0, 0.5, 2)])

        def biased_val(vec):
            p = GlmParams.from_vector(vec, 2, 0)
            f_d = feature_matrix(spec, data.counts_matrix(), dt, p)
            f_m = feature_matrix(spec, samp.counts_matrix(), dt, p)
            return mmd2_biased(f_d, f_m).value

        from spikemmd.kernels import feature_jacobians

        p0 = GlmParams.from_vector(theta, 2, 0)
        f_d, j_d, _ = feature_jacobians(spec, p0, data.counts_matrix(), dt)
        f_m, j_m, _ = feature_jacobians(spec, p0, samp.counts_matrix(), dt)
        gap = f_d.mean(axis=0) - f_m.mean(axis=0)
        grad_gap = j_d.mean(axis=0) - j_m.mean(axis=0)
        analytic = 2.0 * gap @ grad_gap
        want = central_diff(biased_val, theta, step=1e-6)
        assert np.max(np.abs(analytic - want)) <= 1e-6 * max(1.0, np.max(np.abs(want)))

    def test_full_gradient_decomposition_enumeration(self):
        # frozen-kernel gradient plus the omitted score terms together match
        # the gradient of the full expectation (enumeration + differences)
        rng = np.random.default_rng(12)
        t, dt, n_h = 5, 0.08, 1
        params = GlmParams.from_vector(np.array([0.9, -0.7]), n_h, 0)
        data = TrialSet.from_counts(rng.integers(0, 2, (4, t)), dt)
        spec = KernelSpec("mean-ci")
        seqs = all_binary_sequences(t)
        seq_ts = TrialSet.from_counts(seqs, dt)

        def pop_mmd2(vec):
            p = GlmParams.from_vector(vec, n_h, 0)
            w = np.exp(loglik_rows(p, seqs, dt, "bernoulli"))
            k_ss = gram(spec, seq_ts, seq_ts, params=p)
            k_ds = gram(spec, data, seq_ts, params=p)
            k_dd = gram(spec, data, data, params=p)
            n = data.n_trials
            dd = (k_dd.sum() - np.trace(k_dd)) / (n * (n - 1))
            return float(dd + w @ k_ss @ w - 2.0 * (k_ds @ w).mean())

        want = central_diff(pop_mmd2, params.to_vector(), step=1e-6)
        reps, m = 3000, 6
        acc = np.empty((reps, 2))
        for r in range(reps):
            samp, _ = sample_free_running(
                params, dt, "bernoulli", m, t, seed=77, stream=r + 1
            )
            frozen, _ = mmd2_grad_modelbased(params, data, samp, spec)
            # score-correction terms for the sampling-distribution dependence
            scores, _ = score_matrix(params, samp.counts_matrix(), dt, "bernoulli")
            g_mm = gram(spec, samp, samp, params=params)
            g_dm = gram(spec, data, samp, params=params)
            w1 = g_mm.sum(axis=0) - np.diag(g_mm)
            w2 = g_dm.sum(axis=0)
            corr = (2.0 / (m * (m - 1))) * scores.T @ w1 - (
                2.0 / (data.n_trials * m)
            ) * scores.T @ w2
            acc[r] = frozen.to_vector() + corr
        se = acc.std(axis=0) / math.sqrt(reps)
        assert np.all(np.abs(acc.mean(axis=0) - want) <= 4 * se)


def quick_config(**kw):
    defaults = dict(
        history_bins=1, samples_per_step=20, learning_rate=0.05,
        max_iters=40, seed=5, eval_samples=50,
    )
    defaults.update(kw)
    return FitConfig(**defaults)


class TestFitMmd:
    def test_model_based_kernel_rejected(self):
        rng = np.random.default_rng(13)
        data = TrialSet.from_counts(rng.integers(0, 2, (4, 20)), 0.01)
        with pytest.raises(ContractError):
            fit_mmd(data, KernelSpec("mean-ci"), "bernoulli", quick_config())

    def test_homogeneous_rate_recovery(self):
        rate = 30.0
        data, _ = sample_free_running(
            GlmParams(math.log(rate), []), 0.005, "bernoulli", 40, 200, seed=6
        )
        cfg = quick_config(history_bins=0, max_iters=250, samples_per_step=60,
                           learning_rate=0.03, tail_average=60)
        spec = KernelSpec("cumcount-gaussian")
        params, trace = fit_mmd(data, spec, "bernoulli", cfg)
        assert params.bias == pytest.approx(math.log(data.mean_rate()), abs=0.15)
        assert isinstance(trace, FitTrace)
        assert trace.iterations == 250

    def test_deterministic_given_seed(self):
        rng = np.random.default_rng(14)
        data = TrialSet.from_counts(rng.integers(0, 2, (8, 30)), 0.01)
        spec = KernelSpec("cumcount-gaussian")
        p1, t1 = fit_mmd(data, spec, "bernoulli", quick_config())
        p2, t2 = fit_mmd(data, spec, "bernoulli", quick_config())
        assert np.array_equal(p1.to_vector(), p2.to_vector())
        a = [(r.nll, r.mmd2_raw, r.grad_norm) for r in t1.records]
        b = [(r.nll, r.mmd2_raw, r.grad_norm) for r in t2.records]
        assert a == b


class TestFitJoint:
    def test_alpha_zero_matches_mle(self):
        truth = GlmParams(math.log(30.0), [-2.0])
        data, _ = sample_free_running(truth, 0.005, "bernoulli", 25, 150, seed=7)
        mle_params, _ = fit_mle(
            data, "bernoulli", quick_config(max_iters=5000, learning_rate=0.1)
        )
        joint_params, _ = fit_joint(
            data,
            KernelSpec("history-autocorr", max_lag=10),
            "bernoulli",
            quick_config(alpha=0.0, max_iters=300, samples_per_step=20,
                         learning_rate=0.05),
        )
        assert np.allclose(
            joint_params.to_vector(), mle_params.to_vector(), atol=5e-3
        )

    def test_large_alpha_penalizes_likelihood(self):
        truth = GlmParams(math.log(30.0), [-2.0])
        data, _ = sample_free_running(truth, 0.005, "bernoulli", 25, 150, seed=8)
        spec = KernelSpec("history-autocorr", max_lag=10)
        from spikemmd import relative_ll_per_spike

        small, _ = fit_joint(data, spec, "bernoulli",
                             quick_config(alpha=0.0, max_iters=200))
        big, _ = fit_joint(data, spec, "bernoulli",
                           quick_config(alpha=1e4, max_iters=200))
        rel_small = relative_ll_per_spike(small, data, "bernoulli")
        rel_big = relative_ll_per_spike(big, data, "bernoulli")
        assert rel_big < rel_small


class TestSelectAlpha:
    def test_grid_validation(self):
        rng = np.random.default_rng(15)
        data = TrialSet.from_counts(rng.integers(0, 2, (4, 20)), 0.01)
        spec = KernelSpec("history-autocorr", max_lag=5)
        with pytest.raises(ParameterError):
            select_alpha(data, spec, "bernoulli", [], quick_config())
        with pytest.raises(ParameterError):
            select_alpha(data, spec, "bernoulli", [1.0, 0.5], quick_config())

    def test_well_specified_selects_zero(self):
        truth = GlmParams(math.log(30.0), [-2.0])
        data, _ = sample_free_running(truth, 0.005, "bernoulli", 30, 150, seed=9)
        spec = KernelSpec("history-autocorr", max_lag=10)
        cfg = quick_config(max_iters=150, samples_per_step=20, eval_samples=300)
        alpha, report = select_alpha(data, spec, "bernoulli", [0.0, 1.0], cfg)
        assert alpha == 0.0
        assert report.rows[0].rate_ok

    def test_singleton_grid_pass(self):
        truth = GlmParams(math.log(30.0), [-2.0])
        data, _ = sample_free_running(truth, 0.005, "bernoulli", 30, 150, seed=10)
        spec = KernelSpec("history-autocorr", max_lag=10)
        cfg = quick_config(max_iters=150, samples_per_step=20, eval_samples=300)
        alpha, _ = select_alpha(data, spec, "bernoulli", [10.0], cfg)
        assert alpha == 10.0

    def test_no_qualifying_alpha_raises_with_report(self):
        # a sampler that can never match the data rate: fit a model to data
        # whose rate is far from what tiny max_iters can reach
        rng = np.random.default_rng(16)
        counts = rng.binomial(1, 0.9, (6, 40))
        data = TrialSet.from_counts(counts, 0.001)
        spec = KernelSpec("history-autocorr", max_lag=5)
        cfg = quick_config(max_iters=2, samples_per_step=10, eval_samples=40)
        init = GlmParams(math.log(1.0), np.zeros(1))
        with pytest.raises(NoQualifyingAlphaError) as exc:
            select_alpha(data, spec, "bernoulli", [0.001], cfg, init=init)
        assert exc.value.report is not None
        assert len(exc.value.report.rows) == 1


class TestMmd2Between:
    def test_null_fluctuates_around_zero(self):
        params = GlmParams(math.log(25.0), [-1.5])
        data, _ = sample_free_running(params, 0.005, "bernoulli", 40, 120, seed=11)
        spec = resolve_spec(KernelSpec("cumcount-gaussian"), data)
        vals = []
        for s in range(25):
            fresh, _ = sample_free_running(
                params, 0.005, "bernoulli", 40, 120, seed=100 + s
            )
            vals.append(mmd2_between(data, fresh, spec).value)
        vals = np.array(vals)
        # same process on both sides: estimates straddle zero
        assert abs(vals.mean()) < 4 * vals.std(ddof=1) / math.sqrt(vals.size)

    def test_biased_requires_feature_map(self):
        rng = np.random.default_rng(17)
        data = TrialSet.from_counts(rng.integers(0, 2, (4, 20)), 0.01)
        with pytest.raises(ContractError):
            mmd2_between(
                data, data, KernelSpec("cumcount-gaussian", sigma=1.0),
                estimator="biased",
            )
