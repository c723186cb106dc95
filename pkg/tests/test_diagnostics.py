import math

import mpmath
import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import special, stats

from eveneuron.diagnostics import (EpochDiagnostics, RunRecord, analyze_records, band_occupancy,
                                   betainc_reg, collapse_fraction, drift, pearson, reparam_proxy,
                                   selection_score, student_t_two_sided, zscore_within)
from eveneuron.numkernel import Rng


def oracle_pearson(xs, ys):
    """Textbook r from raw sums, p by integrating the t density with mpmath."""
    mpmath.mp.dps = 40
    n = len(xs)
    xs = [mpmath.mpf(x) for x in xs]
    ys = [mpmath.mpf(y) for y in ys]
    mx, my = sum(xs) / n, sum(ys) / n
    sxy = sum((x - mx) * (y - my) for x, y in zip(xs, ys))
    sxx = sum((x - mx) ** 2 for x in xs)
    syy = sum((y - my) ** 2 for y in ys)
    r = sxy / mpmath.sqrt(sxx * syy)
    df = n - 2
    t = abs(r) * mpmath.sqrt(df / (1 - r * r))
    c = mpmath.gamma((df + 1) / mpmath.mpf(2)) / (mpmath.sqrt(df * mpmath.pi) * mpmath.gamma(df / mpmath.mpf(2)))
    tail = mpmath.quad(lambda s: c * (1 + s * s / df) ** (-(df + 1) / mpmath.mpf(2)), [t, mpmath.inf])
    return float(r), float(2 * tail)


class TestBandOccupancy:
    def test_all_inside(self):
        assert band_occupancy([0.6, 1.0, 1.9], 0.5, 2.0) == (0.0, 0.0, 1.0, 0.0)

    def test_mixed(self):
        lo, hi, inside, out = band_occupancy([0.1, 1.0, 3.0], 0.5, 2.0)
        assert lo == hi == inside == pytest.approx(1 / 3)
        assert out == pytest.approx(2 / 3)

    def test_boundaries_inside(self):
        assert band_occupancy([0.5, 2.0], 0.5, 2.0)[2] == 1.0


class TestReparamProxy:
    def test_zero(self):
        mu = np.ones((2, 3, 1))
        assert reparam_proxy(mu, mu, 1) == 0.0

    def test_half(self):
        d = np.where(np.arange(8) % 2 == 0, 0.5, -0.5).reshape(8, 1, 1)
        assert reparam_proxy(d, np.zeros_like(d), 1) == 0.5

    def test_gaussian_mad(self):
        c = 0.7
        e = c * Rng(2).normal((100_000, 1, 1))
        assert abs(reparam_proxy(e, np.zeros_like(e), 1) / (c * math.sqrt(2 / math.pi)) - 1) < 0.02


class TestCollapse:
    def test_examples(self):
        assert collapse_fraction([0.0, 0.0]) == 1.0
        assert collapse_fraction([5.0, 9.0]) == 0.0
        assert collapse_fraction([0.001, 0.5], 0.01) == 0.5


class TestDrift:
    def test_examples(self):
        assert drift([3.0] * 8) == 0.0
        assert drift([1, 1, 1, 2], window=3) == pytest.approx(1.0, abs=1e-7)
        assert drift([0.0] * 5) == 0.0
        assert drift([1.0]) == 0.0


class TestSelection:
    def test_examples(self):
        assert selection_score(0.3, 0.0, 1.0, w_out=0.5, w_kl=0.0) == 0.3
        assert selection_score(0.2, 0.5, 0.0, w_out=0.5) == pytest.approx(0.25)
        assert selection_score(0.2, 0.9, 4.0, w_out=0.0, w_kl=0.0) == 0.2


class TestPearson:
    def test_perfect(self):
        xs = np.arange(10.0)
        r, p = pearson(xs, 2 * xs + 1)
        assert r == pytest.approx(1.0, abs=1e-12) and p < 1e-12
        r, _ = pearson(xs, -xs)
        assert r == pytest.approx(-1.0, abs=1e-12)

    def test_small_example_against_oracle(self):
        r, p = pearson([1, 2, 3, 4], [1, 3, 2, 4])
        ro, po = oracle_pearson([1, 2, 3, 4], [1, 3, 2, 4])
        assert abs(r - 0.8) < 1e-12 and abs(r - ro) < 1e-12
        assert abs(p - po) < 1e-6 and abs(p - 0.2) < 1e-12  # df = 2: p = 1 - t / sqrt(2 + t^2)

    @pytest.mark.parametrize("seed", range(5))
    def test_random_against_oracle(self, seed):
        r_ = Rng(seed)
        xs = r_.normal(15)
        ys = 0.4 * xs + r_.normal(15)
        r, p = pearson(xs, ys)
        ro, po = oracle_pearson(xs.tolist(), ys.tolist())
        assert abs(r - ro) < 1e-12
        assert abs(p - po) < 1e-10

    def test_degenerate(self):
        with pytest.raises(ValueError):
            pearson([1, 2, 3], [5, 5, 5])
        with pytest.raises(ValueError):
            pearson([1, 2], [1, 2])

    @settings(max_examples=50, deadline=None)
    @given(st.floats(0.1, 20), st.floats(0.1, 20), st.floats(0.001, 0.999))
    def test_betainc_matches_scipy(self, a, b, x):
        assert betainc_reg(a, b, x) == pytest.approx(special.betainc(a, b, x), rel=1e-10, abs=1e-14)

    @pytest.mark.parametrize("t,df", [(0.0, 3), (1.3, 5), (4.2, 58), (10.0, 2)])
    def test_t_tail_matches_scipy(self, t, df):
        assert student_t_two_sided(t, df) == pytest.approx(2 * stats.t.sf(t, df), rel=1e-10)


class TestRecords:
    def make(self, **kw):
        base = dict(config={"a": 1}, seed=3, dataset="ds", epochs=[EpochDiagnostics(epoch=0, val_mse=0.5)],
                    best_epoch=0, val_mse=0.5, test_mse=0.6, final_out=0.25, final_kl=1.0)
        base.update(kw)
        return RunRecord(**base)

    def test_roundtrip(self, tmp_path):
        rec = self.make()
        rec.save(tmp_path / "r.json")
        back = RunRecord.load(tmp_path / "r.json")
        assert back == rec
        assert back.to_json() == rec.to_json()

    def test_completed(self):
        assert self.make().completed
        assert not self.make(aborted=True).completed
        assert not self.make(test_mse=None).completed

    def test_zscore_within(self):
        z = zscore_within([1.0, 3.0, 10.0, 30.0], ["a", "a", "b", "b"])
        np.testing.assert_allclose(z, [-1, 1, -1, 1])

    def test_analysis_normalizes_per_dataset(self):
        recs = []
        outs = [0.1, 0.3, 0.5, 0.7]
        for ds, scale in (("a", 1.0), ("b", 1000.0)):
            for o in outs:
                recs.append(self.make(dataset=ds, final_out=o, test_mse=scale * (1 + o)))
        res = analyze_records(recs)
        assert res.r == pytest.approx(1.0, abs=1e-12)
        assert res.n == 8 and res.datasets == ["a", "b"]
        # pooling raw values would be dominated by the scale gap
        r_raw, _ = pearson([r.final_out for r in recs], [r.test_mse for r in recs])
        assert r_raw < 0.5

    def test_analysis_needs_three(self):
        with pytest.raises(ValueError):
            analyze_records([self.make(), self.make(), self.make(aborted=True)])

    def test_analysis_constant_out(self):
        with pytest.raises(ValueError):
            analyze_records([self.make(test_mse=v) for v in (1.0, 2.0, 3.0)])


def test_band_occupancy_tolerance():
    e = [0.5 * (1 - 1e-12), 2.0 * (1 + 1e-12)]
    assert band_occupancy(e, 0.5, 2.0)[3] == 1.0
    assert band_occupancy(e, 0.5, 2.0, rtol=1e-6)[3] == 0.0
