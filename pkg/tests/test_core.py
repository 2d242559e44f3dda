import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from abshrink.core import (
    ExperimentReadout,
    SelectionRule,
    ValidationError,
    apply_selection,
    effective_sample_size,
    read_readouts,
    two_sided_p,
    write_readouts,
)


class TestEffectiveSampleSize:
    @pytest.mark.parametrize("nt,nc,expected", [
        (1_000_000, 1_000_000, 500_000),
        (2_000_000, 2_000_000, 1_000_000),
        (1_000_000, 3_000_000, 750_000),
    ])
    def test_examples(self, nt, nc, expected):
        np.testing.assert_allclose(effective_sample_size(nt, nc), expected, rtol=1e-14)

    @pytest.mark.parametrize("nt,nc", [(0, 5), (5, 0), (-1, 3)])
    def test_rejects_nonpositive(self, nt, nc):
        with pytest.raises(ValidationError):
            effective_sample_size(nt, nc)

    @given(st.integers(1, 10**8), st.integers(1, 10**8), st.integers(1, 50))
    def test_symmetric_homogeneous_bounded(self, a, b, c):
        n = effective_sample_size(a, b)
        assert n == pytest.approx(effective_sample_size(b, a), rel=1e-14)
        assert effective_sample_size(c * a, c * b) == pytest.approx(c * n, rel=1e-12)
        assert 0 < n <= min(a, b)


class TestTwoSidedP:
    def test_examples(self):
        assert two_sided_p(0.0, 1.0) == 1.0
        np.testing.assert_allclose(two_sided_p(1.959964, 1.0), 0.05, atol=1e-6)
        np.testing.assert_allclose(two_sided_p(2.575829 * 3, 3.0), 0.01, atol=1e-6)

    def test_far_tail_is_not_zero(self):
        # complementary form keeps tiny p-values representable
        assert 0 < two_sided_p(30.0, 1.0) < 1e-190

    @given(st.floats(-50, 50), st.floats(1e-3, 1e3))
    def test_symmetric(self, d, se):
        assert two_sided_p(-d, se) == two_sided_p(d, se)

    def test_monotone(self):
        p = two_sided_p(np.linspace(0, 10, 200), 1.0)
        assert np.all(np.diff(p) <= 0)


def _readouts(deltas, n=1000, s2=1.0):
    return [ExperimentReadout(f"e{i}", "m", float(d), n, n, s2) for i, d in enumerate(deltas)]


class TestReadout:
    def test_derived(self):
        r = ExperimentReadout("a", "m", 0.1, 1_000_000, 3_000_000, 2.0)
        np.testing.assert_allclose(r.effective_n, 750_000)
        np.testing.assert_allclose(r.se2, 2.0 / 750_000)
        np.testing.assert_allclose(r.se, math.sqrt(2.0 / 750_000))

    @pytest.mark.parametrize("kwargs", [
        dict(delta=float("nan")), dict(delta=float("inf")), dict(n_treat=0),
        dict(sigma2_pooled=0.0), dict(sigma2_pooled=-1.0),
    ])
    def test_invalid(self, kwargs):
        base = dict(experiment_id="a", metric_id="m", delta=0.0, n_treat=10, n_control=10, sigma2_pooled=1.0)
        base.update(kwargs)
        with pytest.raises(ValidationError):
            ExperimentReadout(**base)


class TestSelection:
    def test_null_readout_not_selected(self):
        assert apply_selection(_readouts([0.0]), SelectionRule.p_below(0.05)) == []

    def test_all_is_identity(self):
        rs = _readouts([0.3, -2.0, 5.0])
        assert apply_selection(rs, SelectionRule.all()) == rs
        assert apply_selection(rs, SelectionRule.p_below(1.0)) == rs

    def test_abs_delta(self):
        rs = _readouts([0.5, -1.0, 1.0, 1.5])
        got = apply_selection(rs, SelectionRule.abs_delta_above(1.0))
        assert [r.delta for r in got] == [1.5]

    def test_null_selection_rate(self):
        rng = np.random.default_rng(11)
        se = math.sqrt(1.0 / 500)
        rs = _readouts(rng.standard_normal(10_000) * se)
        frac = len(apply_selection(rs, SelectionRule.p_below(0.05))) / 10_000
        assert abs(frac - 0.05) <= 0.01

    @given(st.lists(st.floats(-5, 5), min_size=1, max_size=40), st.floats(0.001, 1), st.floats(0.001, 1))
    def test_nested(self, deltas, t1, t2):
        t1, t2 = sorted((t1, t2))
        rs = _readouts(deltas, n=2, s2=1.0)
        small = {r.experiment_id for r in apply_selection(rs, SelectionRule.p_below(t1))}
        big = {r.experiment_id for r in apply_selection(rs, SelectionRule.p_below(t2))}
        assert small <= big

    def test_bad_thresholds(self):
        with pytest.raises(ValidationError):
            SelectionRule.p_below(0.0)
        with pytest.raises(ValidationError):
            SelectionRule.abs_delta_above(-1)

    def test_labels(self):
        assert SelectionRule.p_below(0.01).label == "p<0.01"
        assert SelectionRule.all().label == "All"


class TestCsv:
    def test_round_trip(self, tmp_path):
        rs = _readouts([0.123456789012, -3e-5, 7.0])
        write_readouts(tmp_path / "r.csv", rs)
        back = read_readouts(tmp_path / "r.csv")
        assert [r.experiment_id for r in back] == [r.experiment_id for r in rs]
        np.testing.assert_allclose([r.delta for r in back], [r.delta for r in rs], rtol=1e-8)

    def test_line_numbers_in_errors(self, tmp_path):
        p = tmp_path / "bad.csv"
        p.write_text("experiment_id,metric_id,delta,n_treat,n_control,sigma2_pooled\n"
                     "a,m,0.1,10,10,1\n"
                     "b,m,oops,10,10,1\n")
        with pytest.raises(ValidationError, match=":3"):
            read_readouts(p)

    def test_missing_column(self, tmp_path):
        p = tmp_path / "bad.csv"
        p.write_text("experiment_id,delta\n")
        with pytest.raises(ValidationError, match="missing"):
            read_readouts(p)
