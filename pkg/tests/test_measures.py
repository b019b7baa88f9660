"""Tests for the Gaussian and Gibbs samplers, estimators and diagnostics."""

import json
import math

import mpmath
import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from numpy.testing import assert_allclose

from fracnls import streams
from fracnls.measures import (
    MeasureConfig,
    SampleBatch,
    SamplingError,
    WeightedSample,
    classify_growth,
    default_observables,
    draw_gibbs,
    draw_proposals,
    ensemble_estimate,
    gaussian_ensemble,
    gibbs_log_weight,
    growth_exponent,
    iter_jsonl,
    lambda_k,
    mean_weight,
    mode_std,
    no_growth,
    partition_stability,
    PartitionRow,
    sample_gaussian,
    sample_gibbs,
    weighted_estimate,
)
from fracnls.spectral import ModelParams, SpectralState, mass


def defocusing(n=4, alpha=0.75, **kw):
    return MeasureConfig(ModelParams(alpha, -1, n), **kw)


def abs2(c, n):
    z = c[:, n]
    return z.real ** 2 + z.imag ** 2


class TestConfig:
    def test_focusing_needs_cutoff(self):
        with pytest.raises(ValueError):
            MeasureConfig(ModelParams(0.75, 1, 4))
        MeasureConfig(ModelParams(0.75, 1, 4), l2_cutoff=2.0)

    def test_rejection_only_defocusing(self):
        with pytest.raises(ValueError):
            MeasureConfig(ModelParams(0.75, 1, 4), l2_cutoff=2.0, method="rejection")

    @pytest.mark.parametrize("kw", [dict(zero_mode="free"), dict(method="mcmc"),
                                    dict(sigma0=0.0), dict(l2_cutoff=-1.0)])
    def test_invalid(self, kw):
        with pytest.raises(ValueError):
            defocusing(**kw)

    def test_envelope(self):
        assert defocusing().log_envelope == 0
        assert defocusing(zero_mode="gaussian", sigma0=0.5).log_envelope == pytest.approx(4.0)
        with pytest.raises(ValueError):
            MeasureConfig(ModelParams(0.75, 1, 4), l2_cutoff=2.0).log_envelope


class TestStreams:
    def test_block_rng_deterministic(self):
        a = streams.block_rng(5, 3).standard_normal(10)
        b = streams.block_rng(5, 3).standard_normal(10)
        c = streams.block_rng(5, 4).standard_normal(10)
        assert np.array_equal(a, b)
        assert not np.array_equal(a, c)

    def test_seed_range(self):
        with pytest.raises(ValueError):
            streams.block_rng(-1, 0)
        with pytest.raises(ValueError):
            streams.block_rng(0, -1)

    def test_blocks_for(self):
        assert list(streams.blocks_for(0, 1)) == [0]
        assert list(streams.blocks_for(1000, 1030)) == [0, 1]
        assert list(streams.blocks_for(5, 5)) == []

    def test_ordered_map_workers(self):
        assert streams.ordered_map(abs, [-1, 2, -3], workers=2) == [1, 2, 3]

    def test_chunked(self):
        assert streams.chunked(5, 2) == [(0, 2), (2, 4), (4, 5)]


class TestGaussianSampler:
    def test_mode_std(self):
        assert_allclose(mode_std(2, 0.75), [2 ** -0.75, 1, 0, 1, 2 ** -0.75])

    def test_pinned_zero_mode(self):
        c = gaussian_ensemble(defocusing(), 0, 2000)
        assert np.all(c[:, 4] == 0)

    def test_single_draw(self):
        rng = np.random.default_rng(0)
        u = sample_gaussian(defocusing(zero_mode="gaussian", sigma0=2.0), rng)
        assert isinstance(u, SpectralState) and u[0] != 0

    def test_sample_index_determinism(self):
        cfg = defocusing(n=3)
        full = gaussian_ensemble(cfg, 11, 3000)
        part = draw_proposals(cfg, 11, 1500, 2100)
        assert np.array_equal(full[1500:2100], part)
        assert np.array_equal(gaussian_ensemble(cfg, 11, 3000, workers=2), full)

    def test_second_moment_mode_two(self):
        c = gaussian_ensemble(defocusing(n=4), 1, 100_000)
        x = abs2(c, 4 + 2)
        est = x.mean()
        se = x.std(ddof=1) / math.sqrt(len(x))
        assert abs(est - 2 * 2 ** -1.5) < 3 * se
        assert 2 * 2 ** -1.5 == pytest.approx(0.70711, abs=1e-5)

    def test_modes_uncorrelated(self):
        c = gaussian_ensemble(defocusing(n=3), 2, 100_000)
        for a, b in [(1, 2), (-1, 1), (3, -2)]:
            x = c[:, 3 + a] * c[:, 3 + b]
            for part in (x.real, x.imag):
                assert abs(part.mean()) < 3 * part.std(ddof=1) / math.sqrt(len(part))
        z = c[:, 4]
        prod = z.real * z.imag
        assert abs(prod.mean()) < 3 * prod.std(ddof=1) / math.sqrt(len(prod))

    def test_zero_mode_proposal_scale(self):
        c = gaussian_ensemble(defocusing(n=2, zero_mode="gaussian", sigma0=0.5), 3, 50_000)
        x = abs2(c, 2)
        assert abs(x.mean() - 2 * 0.25) < 3 * x.std(ddof=1) / math.sqrt(len(x))


class TestWeights:
    def test_zero_state(self):
        assert gibbs_log_weight(SpectralState.zeros(3), defocusing(n=3)) == 0

    def test_plane_wave(self):
        u = SpectralState.from_modes(3, {1: 1.0})
        assert gibbs_log_weight(u, defocusing(n=3)) == pytest.approx(-0.25)

    def test_cutoff(self):
        cfg = MeasureConfig(ModelParams(0.75, 1, 2), l2_cutoff=1.0)
        u = SpectralState.from_modes(2, {1: 2.0})  # mass 4 > B^2
        assert gibbs_log_weight(u, cfg) == -math.inf
        v = SpectralState.from_modes(2, {1: 0.5})
        assert gibbs_log_weight(v, cfg) == pytest.approx(0.25 * 0.0625)

    def test_zero_mode_correction(self):
        cfg = defocusing(n=2, zero_mode="gaussian", sigma0=0.5)
        u = SpectralState.from_modes(2, {0: 1.0})
        assert gibbs_log_weight(u, cfg) == pytest.approx(-0.25 + 1 / (2 * 0.25))

    @given(st.integers(0, 10_000), st.floats(0.3, 3.0))
    @settings(max_examples=25, deadline=None)
    def test_envelope_bounds_weight(self, seed, sigma0):
        cfg = defocusing(n=3, zero_mode="gaussian", sigma0=sigma0)
        rng = np.random.default_rng(seed)
        c = rng.standard_normal((64, 7)) * rng.uniform(0.01, 3) + 0j
        c[:, 3] = rng.uniform(0, 3) * np.exp(1j * rng.uniform(0, 6.3, 64))
        assert np.all(gibbs_log_weight(c, cfg) <= cfg.log_envelope + 1e-12)

    def test_defocusing_weights_nonpositive(self):
        b = draw_gibbs(defocusing(n=6), 4, 5000)
        assert np.all(b.log_weights <= 0)


class TestGibbsSampler:
    def test_rejection_outputs(self):
        b = draw_gibbs(defocusing(method="rejection"), 3, 500)
        assert len(b) == 500
        assert np.all(b.log_weights == 0)
        assert np.all(np.diff(b.indices) > 0)
        assert 0 < b.acceptance_rate < 1
        assert b.n_proposed == b.indices[-1] + 1

    def test_rejection_prefix_property(self):
        cfg = defocusing(method="rejection")
        small = draw_gibbs(cfg, 9, 200)
        large = draw_gibbs(cfg, 9, 400, workers=2)
        assert np.array_equal(large.coeffs[:200], small.coeffs)

    def test_accepted_are_proposals(self):
        cfg = defocusing(method="rejection")
        b = draw_gibbs(cfg, 5, 50)
        props = draw_proposals(cfg, 5, 0, int(b.indices[-1]) + 1)
        assert np.array_equal(props[b.indices], b.coeffs)

    def test_sample_gibbs_list(self):
        out = sample_gibbs(defocusing(method="rejection"), 1, 10)
        assert len(out) == 10 and all(isinstance(s, WeightedSample) for s in out)
        assert all(s.log_weight == 0 for s in out)

    def test_count_validated(self):
        with pytest.raises(ValueError):
            draw_gibbs(defocusing(), 0, 0)

    def test_low_acceptance_aborts(self):
        cfg = defocusing(n=8, method="rejection")
        with pytest.raises(SamplingError, match="acceptance"):
            draw_gibbs(cfg, 0, 10_000, min_acceptance=0.5)

    @pytest.mark.parametrize("zero_mode", ["pinned", "gaussian"])
    def test_rejection_matches_importance(self, zero_mode):
        cfg = defocusing(n=4, zero_mode=zero_mode)
        rej = draw_gibbs(MeasureConfig(cfg.params, None, zero_mode, 1.0, "rejection"), 21, 4000)
        imp = draw_gibbs(cfg, 22, 200_000)
        observables = dict(default_observables(cfg.params))
        names = ["quartic", "mass", "abs2_1", "abs2_-2", "h_norm_0.1"]
        for name in names:
            a = ensemble_estimate(rej, observables[name])
            b = ensemble_estimate(imp, observables[name])
            assert abs(a.estimate - b.estimate) < 3 * math.hypot(a.std_error, b.std_error), name

    def test_focusing_cutoff(self):
        cfg = MeasureConfig(ModelParams(0.75, 1, 4), l2_cutoff=2.0)
        b = draw_gibbs(cfg, 6, 20_000)
        alive = np.isfinite(b.log_weights)
        assert 0 < alive.sum() < len(b)
        assert np.all(mass(b.coeffs[alive]) <= 4.0)
        assert np.all(np.abs(b.coeffs[alive, 4]) <= 2.0)
        gcfg = MeasureConfig(ModelParams(0.75, 1, 4), l2_cutoff=2.0, zero_mode="gaussian")
        g = draw_gibbs(gcfg, 6, 20_000)
        alive = np.isfinite(g.log_weights)
        assert np.all(np.abs(g.coeffs[alive, 4]) <= 2.0)


class TestEstimators:
    def test_uniform_weights(self):
        x = np.arange(10.0)
        e = weighted_estimate(x, np.zeros(10))
        assert e.estimate == pytest.approx(4.5)
        assert e.ess == pytest.approx(10)
        assert e.std_error == pytest.approx(x.std(ddof=0) / math.sqrt(10))

    def test_single_weight(self):
        lw = np.full(5, -np.inf)
        lw[3] = -7.0
        e = weighted_estimate(np.arange(5.0), lw)
        assert e.estimate == 3.0 and e.ess == pytest.approx(1.0) and e.std_error == 0

    def test_all_zero(self):
        with pytest.raises(ValueError):
            weighted_estimate(np.ones(3), np.full(3, -np.inf))

    def test_shift_invariant(self):
        rng = np.random.default_rng(0)
        x, lw = rng.standard_normal(50), rng.standard_normal(50)
        a, b = weighted_estimate(x, lw), weighted_estimate(x, lw + 800.0)
        assert a.estimate == pytest.approx(b.estimate)
        assert a.ess == pytest.approx(b.ess)

    @given(st.lists(st.floats(-30, 5), min_size=1, max_size=40))
    @settings(max_examples=40, deadline=None)
    def test_ess_bounds(self, lws):
        e = weighted_estimate(np.ones(len(lws)), np.array(lws))
        assert 1 - 1e-9 <= e.ess <= len(lws) + 1e-9
        assert e.std_error >= 0

    def test_known_mean_gaussian(self):
        c = gaussian_ensemble(defocusing(n=4), 8, 100_000)
        batch = SampleBatch(c, np.zeros(len(c)), np.arange(len(c)), len(c))
        e = ensemble_estimate(batch, lambda x: abs2(x, 6))
        assert abs(e.estimate - 0.70711) < 3 * e.std_error

    def test_list_of_samples(self):
        samples = [WeightedSample(SpectralState.from_modes(1, {1: v}), 0.0) for v in (1.0, 3.0)]
        e = ensemble_estimate(samples, mass)
        assert e.estimate == pytest.approx(5.0)

    def test_mean_weight(self):
        e = mean_weight(np.log([1.0, 2.0, 3.0]))
        assert e.estimate == pytest.approx(2.0)
        assert e.std_error == pytest.approx(1 / math.sqrt(3))


class TestPartition:
    def test_defocusing_bounded(self):
        rows = partition_stability(defocusing(), [4, 8, 16], 20_000, seed=2)
        assert all(0 < r.z <= 1 for r in rows)
        assert no_growth(rows)

    def test_monotone_in_cutoff(self):
        p = ModelParams(0.75, 1, 8)
        z1 = partition_stability(MeasureConfig(p, l2_cutoff=1.0), [8], 20_000, seed=4)[0].z
        z2 = partition_stability(MeasureConfig(p, l2_cutoff=2.0), [8], 20_000, seed=4)[0].z
        assert z2 > z1

    def test_ascending_required(self):
        with pytest.raises(ValueError):
            partition_stability(defocusing(), [8, 4], 100)

    def test_degenerate_flag(self):
        assert PartitionRow(4, 1.0, 0.1, 3.0).degenerate
        assert not PartitionRow(4, 1.0, 0.1, 30.0).degenerate

    def test_no_growth_detects_trend(self):
        rows = [PartitionRow(4, 1.0, 0.01, 100), PartitionRow(8, 2.0, 0.01, 100)]
        assert not no_growth(rows)

    def test_seed_reproducible(self):
        a = partition_stability(defocusing(), [4], 3000, seed=1)
        b = partition_stability(defocusing(), [4], 3000, seed=1, workers=2)
        assert a == b


class TestLambda:
    def test_zeta_limit(self):
        lam = lambda_k(0.75, 0.0, 10 ** 6)
        limit = 2 * float(mpmath.zeta(1.5))
        assert limit == pytest.approx(5.22475, abs=1e-5)
        assert abs(float(lam[-1]) - limit) / limit < 0.01
        # tail of sum n^-1.5 beyond k is about 2/sqrt(k)
        assert limit - float(lam[-1]) == pytest.approx(2 * 2 / math.sqrt(1e6), rel=1e-3)

    def test_harmonic(self):
        lam = lambda_k(0.75, 0.25, 10 ** 6)
        expected = 2 * float(mpmath.harmonic(10 ** 6))
        assert float(lam[-1]) == pytest.approx(expected, rel=1e-12)
        assert float(lam[-1]) == pytest.approx(28.78, abs=0.01)
        assert not classify_growth(lam).convergent

    def test_partial_sums(self):
        assert_allclose(lambda_k(0.75, 0.0, 3).astype(float),
                        2 * np.cumsum([1, 2 ** -1.5, 3 ** -1.5]))

    def test_k_max_validated(self):
        with pytest.raises(ValueError):
            lambda_k(0.75, 0.0, 0)

    @pytest.mark.parametrize("alpha,s", [(0.75, 0.45), (0.6, 0.3), (0.9, 0.6)])
    def test_power_exponent(self, alpha, s):
        lam = lambda_k(alpha, s, 10 ** 6)
        d = classify_growth(lam)
        assert d.kind == "power"
        assert d.exponent == pytest.approx(2 * s - 2 * alpha + 1, abs=0.05)

    @pytest.mark.parametrize("alpha", [0.6, 0.7, 0.8, 0.9, 1.0])
    @pytest.mark.parametrize("offset", [-0.1, -0.05, 0.0, 0.05])
    def test_threshold_grid(self, alpha, offset):
        s = alpha - 0.5 + offset
        d = classify_growth(lambda_k(alpha, s, 10 ** 6))
        assert d.convergent == (offset < 0)

    def test_growth_exponent_needs_points(self):
        with pytest.raises(ValueError):
            growth_exponent(lambda_k(0.75, 0, 3))


class TestSerialization:
    def test_jsonl(self):
        samples = [WeightedSample(SpectralState.from_modes(1, {1: 1.0}), -0.5),
                   WeightedSample(SpectralState.zeros(1), -math.inf)]
        lines = list(iter_jsonl(samples, 0.75))
        first, second = (json.loads(x) for x in lines)
        assert first["log_weight"] == -0.5
        assert first["state"]["coeffs"][2] == [1.0, 0.0]
        assert second["log_weight"] is None
