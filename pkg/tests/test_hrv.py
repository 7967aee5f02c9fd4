import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

import oracles
from bcg2ecg.hrv import (
    SegmentMetrics,
    agreement,
    bland_altman,
    error_histogram,
    pearson,
    segment_metrics,
)

rr_lists = st.lists(st.floats(0.26, 3.0), min_size=1, max_size=20)


class TestSegmentMetrics:
    def test_constant_rr(self):
        m = segment_metrics([1.0, 1.0, 1.0])
        assert (m.hr_bpm, m.mhbi_ms, m.rmssd_ms, m.sdnn_ms, m.n_rr) == (60.0, 1000.0, 0.0, 0.0, 3)

    def test_single_interval(self):
        m = segment_metrics([0.8])
        assert m.hr_bpm == pytest.approx(75.0)
        assert m.mhbi_ms == pytest.approx(800.0)
        assert m.rmssd_ms is None and m.sdnn_ms is None

    def test_even_length_median(self):
        assert segment_metrics([0.5, 1.0]).hr_bpm == pytest.approx(60 / 0.75)

    def test_empty(self):
        with pytest.raises(ValueError):
            segment_metrics([])

    def test_random_lists_match_brute_force(self):
        rng = np.random.default_rng(0)
        for _ in range(1000):
            rr = rng.uniform(0.3, 2.0, size=rng.integers(1, 15)).tolist()
            got = segment_metrics(rr)
            ref = oracles.hrv(rr)
            for a, b in zip((got.hr_bpm, got.mhbi_ms, got.rmssd_ms, got.sdnn_ms), ref):
                if b is None:
                    assert a is None
                else:
                    assert abs(a - b) <= 1e-9 * max(1.0, abs(b))

    @given(st.lists(st.floats(0.3, 2.0), min_size=5, max_size=15), st.integers(0, 14))
    def test_hr_uses_median(self, rr, i):
        i %= len(rr)
        bumped = list(rr)
        bumped[i] += 0.2
        expected = 60 / oracles.median(bumped)
        assert segment_metrics(bumped).hr_bpm == pytest.approx(expected, rel=1e-12)
        if oracles.median(bumped) == oracles.median(rr):
            assert segment_metrics(bumped).hr_bpm == segment_metrics(rr).hr_bpm

    @given(st.lists(st.floats(0.3, 2.0), min_size=2, max_size=15), st.floats(-0.2, 0.5))
    def test_translation(self, rr, c):
        a, b = segment_metrics(rr), segment_metrics([v + c for v in rr])
        assert b.rmssd_ms == pytest.approx(a.rmssd_ms, abs=1e-6)
        assert b.sdnn_ms == pytest.approx(a.sdnn_ms, abs=1e-6)
        assert b.mhbi_ms - a.mhbi_ms == pytest.approx(c * 1000, abs=1e-6)


class TestPearson:
    def test_affine(self):
        x = np.arange(10.0)
        assert pearson(x, 2 * x + 3) == pytest.approx(1.0, abs=1e-15)
        assert pearson(x, -x) == pytest.approx(-1.0, abs=1e-15)

    def test_zero_variance(self):
        assert math.isnan(pearson([1, 1, 1], [1, 2, 3]))

    def test_brute_force(self):
        rng = np.random.default_rng(1)
        for _ in range(200):
            n = int(rng.integers(2, 40))
            x, y = rng.normal(size=n), rng.normal(size=n)
            assert abs(pearson(x, y) - oracles.pearson(x, y)) <= 1e-12

    @given(st.floats(0.1, 100), st.floats(-100, 100), st.integers(0, 2**31 - 1))
    def test_positive_affine_invariance(self, a, b, seed):
        rng = np.random.default_rng(seed)
        x, y = rng.normal(size=20), rng.normal(size=20)
        assert abs(pearson(a * x + b, y) - pearson(x, y)) <= 1e-12

    def test_length_checks(self):
        with pytest.raises(ValueError):
            pearson([1, 2], [1, 2, 3])
        with pytest.raises(ValueError):
            pearson([1], [1])


class TestBlandAltman:
    def test_identical(self):
        assert bland_altman([1, 2, 3], [1, 2, 3]).as_tuple() == (0.0, 0.0, 0.0)

    def test_constant_offset(self):
        ba = bland_altman([2.0, 3.0, 4.0], [1.0, 2.0, 3.0])
        assert ba.as_tuple() == pytest.approx((1.0, 1.0, 1.0), abs=1e-15)
        assert ba.rows[0] == (1.5, 1.0)

    def test_brute_force(self):
        rng = np.random.default_rng(2)
        for _ in range(200):
            n = int(rng.integers(2, 40))
            x, y = rng.normal(60, 10, size=n), rng.normal(60, 10, size=n)
            got = bland_altman(x, y).as_tuple()
            ref = oracles.bland_altman(x, y)
            assert max(abs(a - b) for a, b in zip(got, ref)) <= 1e-12

    def test_length_mismatch(self):
        with pytest.raises(ValueError):
            bland_altman([1, 2], [1, 2, 3])


class TestHistogram:
    def test_identical(self):
        h = error_histogram([60, 70], [60, 70])
        assert h.counts[0] == 2 and sum(h.counts) == 2

    def test_offset(self):
        h = error_histogram([61.5, 71.5], [60, 70])
        assert h.counts[1] == 2

    def test_overflow(self):
        h = error_histogram([80, 69.9], [60, 60])
        assert h.counts[-1] == 1 and h.counts[9] == 1
        assert h.edges[-1] == 10.0

    @given(st.lists(st.tuples(st.floats(30, 200), st.floats(30, 200)), min_size=1, max_size=40))
    def test_brute_force_binning(self, pairs):
        p, g = zip(*pairs)
        h = error_histogram(p, g)
        expected = [0] * 11
        for a, b in pairs:
            e = abs(a - b)
            expected[min(int(math.floor(e)), 10)] += 1
        assert h.counts == expected


def m(hr, n_rr=3):
    return SegmentMetrics(hr, 60000 / hr, 10.0 + hr / 10, 20.0 + hr / 20, n_rr)


class TestAgreement:
    def test_pairing_and_exclusions(self):
        gt = {("a", 0): m(60), ("a", 1): m(70), ("b", 0): m(80), ("b", 1): None}
        cand = {("a", 0): m(61), ("a", 1): None, ("b", 0): m(79), ("b", 1): m(65)}
        rep = agreement(cand, gt)
        assert rep.n_segments_included == 2
        assert rep.n_excluded == 2
        assert sum(rep.abs_error_histogram.counts) == rep.n_segments_included
        assert rep.hr_pairs == [(61, 60), (79, 80)]

    def test_median_differences(self):
        gt = {("a", i): m(60 + i) for i in range(3)} | {("b", i): m(80 + i) for i in range(3)}
        cand = {("a", i): m(62 + i) for i in range(3)} | {("b", i): m(81 + i) for i in range(3)}
        rep = agreement(cand, gt)
        assert rep.median_hr_diff_per_subject == pytest.approx(1.5)
        assert rep.median_hr_diff_pooled == pytest.approx(np.median([62, 63, 64, 81, 82, 83]) - np.median([60, 61, 62, 80, 81, 82]))
        assert rep.r("hr") == pytest.approx(pearson([62, 63, 64, 81, 82, 83], [60, 61, 62, 80, 81, 82]))

    def test_single_interval_segments_skip_hrv(self):
        gt = {("a", i): SegmentMetrics(60 + i, 1000, None, None, 1) for i in range(4)}
        cand = {("a", i): SegmentMetrics(61 + i, 990, None, None, 1) for i in range(4)}
        rep = agreement(cand, gt)
        assert rep.metrics["rmssd"].n == 0 and rep.r("rmssd") is None
        assert rep.r("hr") == pytest.approx(1.0)
        assert rep.to_dict()["metrics"]["rmssd"]["bland_altman"] is None
