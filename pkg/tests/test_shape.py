import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from oracles import autocorr_direct, covariance_dense
from splitleak import models as M
from splitleak.data import synth_dataset
from splitleak.errors import DegenerateSignal, NoPeakFound, NoValidFactorization, NonFinite, TooFewSamples
from splitleak.experiments import capture_features, random_edge
from splitleak.shape import (
    AutocorrProfile,
    autocorrelation,
    covariance_block,
    covariance_row_means,
    detect_width,
    divisors,
    enumerate_shapes,
    estimate_shape,
)
from splitleak.wire import write_capture

captures = arrays(
    np.float64,
    st.tuples(st.integers(2, 12), st.integers(2, 40)),
    elements=st.floats(-100, 100, allow_nan=False, width=32),
)


@settings(max_examples=60, deadline=None)
@given(captures)
def test_row_means_match_dense_covariance(x):
    mu = covariance_row_means(x)
    ref = covariance_dense(x).mean(axis=1)
    scale = max(np.abs(ref).max(), 1e-300)
    assert np.abs(mu - ref).max() / scale <= 1e-10 or np.abs(mu - ref).max() < 1e-12


def test_row_means_large_d_against_dense():
    x = np.random.default_rng(0).normal(size=(64, 2048)) + np.linspace(0, 3, 2048)
    ref = covariance_dense(x).mean(axis=1)
    assert np.abs(covariance_row_means(x) - ref).max() / np.abs(ref).max() <= 1e-10


@settings(max_examples=40, deadline=None)
@given(captures, arrays(np.float64, 40, elements=st.floats(-50, 50)))
def test_shift_invariance(x, c):
    shifted = x + c[: x.shape[1]]
    np.testing.assert_allclose(covariance_row_means(shifted), covariance_row_means(x), atol=1e-8 * (1 + np.abs(x).max() ** 2))


def test_scale_covariance_and_width_invariance():
    feats = _edge_capture(8, 8, 256).astype(np.float64)
    a = autocorrelation(covariance_row_means(feats), 40)
    b = autocorrelation(covariance_row_means(3.0 * feats), 40)
    np.testing.assert_allclose(b.values, 81.0 * a.values, rtol=1e-9)
    assert estimate_shape(3.0 * feats).width == estimate_shape(feats).width


def test_covariance_block_matches_dense():
    x = np.random.default_rng(1).normal(size=(20, 30))
    np.testing.assert_allclose(covariance_block(x, 5, 17), covariance_dense(x)[5:17, 5:17], atol=1e-12)
    with pytest.raises(ValueError):
        covariance_block(x, 10, 5)


def test_capture_validation():
    with pytest.raises(TooFewSamples):
        covariance_row_means(np.ones((1, 8)))
    bad = np.ones((3, 4))
    bad[1, 2] = np.nan
    with pytest.raises(NonFinite):
        covariance_row_means(bad)


@settings(max_examples=40)
@given(arrays(np.float64, st.integers(3, 30), elements=st.integers(-1000, 1000).map(lambda v: v / 100)), st.data())
def test_autocorrelation_matches_direct_sum(mu, data):
    if not np.any(mu):
        return
    k_max = data.draw(st.integers(1, len(mu) - 1))
    prof = autocorrelation(mu, k_max)
    for k in range(1, k_max + 1):
        assert prof.at(k) == pytest.approx(autocorr_direct(mu, k), rel=1e-9, abs=1e-9)
    assert prof.r0 == pytest.approx(autocorr_direct(mu, 0))


def test_one_hot_and_all_ones():
    e = np.zeros(16)
    e[3] = 1.0
    prof = autocorrelation(e, 10)
    assert prof.r0 == 1.0 and not prof.values.any()
    ones = autocorrelation(np.ones(16), 15)
    assert ones.values.tolist() == [16.0 - k for k in range(1, 16)]


def test_zero_signal_is_degenerate():
    with pytest.raises(DegenerateSignal):
        autocorrelation(np.zeros(8), 4)
    with pytest.raises(DegenerateSignal):
        estimate_shape(np.tile(np.arange(64.0), (10, 1)))


def test_planted_period_8():
    d = 512
    mu = 1.0 + np.cos(2 * np.pi * np.arange(d) / 8)
    width, score = detect_width(autocorrelation(mu, 64), d)
    assert width == 8 and 0 < score <= 1


def test_monotone_profile_has_no_peak():
    prof = AutocorrProfile(np.arange(1, 21), np.linspace(1, 0, 20), 2.0)
    with pytest.raises(NoPeakFound):
        detect_width(prof, 64)


def test_peak_only_at_divisor_lags():
    # strong peak at lag 7 is ignored because 7 does not divide 64
    vals = np.full(20, 0.1)
    vals[6] = 5.0
    vals[3] = 1.0
    width, _ = detect_width(AutocorrProfile(np.arange(1, 21), vals, 10.0), 64)
    assert width == 4


def test_tie_goes_to_smaller_lag():
    vals = np.zeros(20)
    vals[3] = vals[7] = 1.0
    assert detect_width(AutocorrProfile(np.arange(1, 21), vals, 2.0), 64)[0] == 4


def test_divisors():
    assert divisors(12) == [1, 2, 3, 4, 6, 12]
    assert divisors(1) == [1]


def test_enumerate_shapes_examples():
    assert enumerate_shapes(2048, 8) == [(32, 8, 8)]
    assert enumerate_shapes(512, 8, 0.5) == [(16, 4, 8)]
    with pytest.raises(NoValidFactorization):
        enumerate_shapes(100, 7)
    # 8*8 does not divide 8*6*5: nearest heights that do are listed
    cands = enumerate_shapes(240, 8)
    assert 1 <= len(cands) <= 3 and all(c * h * w == 240 for c, h, w in cands)
    assert [h for _, h, _ in cands] == [6, 10, 5]


@settings(max_examples=100)
@given(st.integers(1, 64), st.integers(1, 16), st.integers(1, 16), st.floats(0.25, 4))
def test_candidates_always_factor_d(c, h, w, r):
    d = c * h * w
    for cc, hh, ww in enumerate_shapes(d, w, r):
        assert cc * hh * ww == d and ww == w


def _edge_capture(c, w, n, seed=0):
    data = synth_dataset(n, shape=(3, 32, 32), seed=100 + seed)
    return capture_features(random_edge(c, w, seed=seed), data.images)


def test_synthetic_cnn_features_888():
    est = estimate_shape(_edge_capture(8, 8, 512))
    assert est.width == 8 and est.shape == (8, 8, 8)
    assert est.profile.normalized[0] <= 1.0


def test_tinyvgg32_block_split_width():
    spec = M.preset("tinyvgg32")
    k = spec.block_split(2)
    assert spec.feature_shape(k) == (32, 8, 8)
    model = M.build_model(spec, seed=0)
    feats = capture_features(M.split_at(model, k).edge, synth_dataset(512, shape=(3, 32, 32), seed=100).images)
    assert estimate_shape(feats).width == 8


def test_estimate_from_capture_file(tmp_path):
    feats = _edge_capture(4, 8, 128)
    write_capture(tmp_path / "c.slkx", feats)
    assert estimate_shape(tmp_path / "c.slkx").shape == estimate_shape(feats).shape


def test_stage_labels_on_errors():
    with pytest.raises(TooFewSamples) as err:
        estimate_shape(np.ones((1, 16)))
    assert err.value.stage == "covariance"
    with pytest.raises(DegenerateSignal) as err:
        estimate_shape(np.ones((4, 16)))
    assert err.value.stage == "autocorrelation"


def test_n_equals_two_is_allowed_to_miss():
    # recorded, not asserted: tiny captures may fail or mis-estimate
    try:
        estimate_shape(_edge_capture(8, 8, 2))
    except NoPeakFound:
        pass
