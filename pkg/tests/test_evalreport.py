import math
import warnings

import numpy as np
import pytest

from abshrink.core import SelectionRule, ValidationError, z_quantile
from abshrink.evalreport import (
    DEFAULT_BUCKETS,
    EvalReport,
    EvalRow,
    Estimates,
    read_report,
    score_against_split_b,
    score_against_truth,
    triples_csv,
)
from abshrink.posteriors import posterior_moments
from abshrink.simlab import builtin_case, generate_arrays
from abshrink.splitreg import SplitPair


def _unadjusted(ids, delta, se2):
    return Estimates.from_moments(ids, delta, se2, delta, se2)


def split_identity(n=10_000, seed=21):
    """Score known-prior split-A posteriors against the truth and against split B."""
    sc = builtin_case(1, n_train=n, seed=seed)
    d = generate_arrays(sc, "train")
    sa = d.se2_half
    mean, var, _ = posterior_moments(sc.prior, d.delta_a, sa)
    est = Estimates.from_moments(d.ids, d.delta_a, sa, mean, var)
    truth = score_against_truth(est, dict(zip(d.ids, d.mu)), DEFAULT_BUCKETS, "theoretical")
    split = score_against_split_b(est, d.pairs(), DEFAULT_BUCKETS, "theoretical")
    return d, mean, truth, split


class TestTruth:
    def test_perfect(self):
        ids = ["a", "b", "c"]
        mu = np.array([1.0, -2.0, 0.5])
        est = Estimates.from_moments(ids, mu, np.ones(3), mu, np.ones(3))
        r = score_against_truth(est, dict(zip(ids, mu)), (SelectionRule.all(),), "m")
        assert r.rows[0] == EvalRow("m", "All", 3, 0.0, 1.0, 1.0)

    def test_nominal_coverage(self):
        rng = np.random.default_rng(0)
        n = 10_000
        mu = rng.normal(size=n)
        se2 = rng.choice([0.5, 1.0, 2.0], n)
        delta = mu + rng.normal(0, np.sqrt(se2))
        ids = [str(i) for i in range(n)]
        r = score_against_truth(_unadjusted(ids, delta, se2), dict(zip(ids, mu)))
        row = r.row("method", "All")
        assert abs(row.coverage - 0.95) <= 0.01
        assert row.var_s == 1.0

    def test_case1_unadjusted_p01(self):
        d = generate_arrays(builtin_case(1, n_train=200_000, seed=12), "train")
        r = score_against_truth(_unadjusted(d.ids, d.delta, d.se2), dict(zip(d.ids, d.mu))).scaled()
        row = r.row("method", "p<0.01")
        assert abs(row.rmse - 2.17) <= 0.1
        assert abs(row.coverage - 0.706) <= 0.02

    def test_nested_counts(self):
        d = generate_arrays(builtin_case(2, n_train=3000, seed=13), "train")
        r = score_against_truth(_unadjusted(d.ids, d.delta, d.se2), dict(zip(d.ids, d.mu)))
        counts = [row.count for row in r.rows]
        assert counts == sorted(counts) and counts[-1] == 3000

    def test_selection_uses_delta(self):
        ids = ["a", "b"]
        est = Estimates.from_moments(ids, [10.0, 0.0], [1.0, 1.0], [0.0, 0.0], [1.0, 1.0])
        r = score_against_truth(est, {"a": 0.0, "b": 10.0}, (SelectionRule.p_below(0.05),))
        assert r.rows[0].count == 1 and r.rows[0].rmse == 0.0

    def test_orphans(self):
        est = _unadjusted(["a", "b"], np.zeros(2), np.ones(2))
        with pytest.raises(ValidationError, match="only in estimates \\['b'\\]"):
            score_against_truth(est, {"a": 0.0, "c": 1.0})
        with pytest.raises(ValidationError):
            score_against_truth(est, {"a": 0.0, "b": 0.0}, buckets=())

    def test_empty_bucket(self):
        est = _unadjusted(["a"], np.zeros(1), np.ones(1))
        row = score_against_truth(est, {"a": 0.0}, (SelectionRule.p_below(0.01),)).rows[0]
        assert row.count == 0 and math.isnan(row.rmse)


class TestSplitB:
    def test_degenerate(self):
        pairs = [SplitPair(f"e{i}", x, 2.0, x, 1e-12, 1e-12) for i, x in enumerate([1.0, -2.0])]
        est = _unadjusted([p.experiment_id for p in pairs], np.array([1.0, -2.0]), np.full(2, 2.0))
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", RuntimeWarning)  # -se2_b rounds below zero
            r = score_against_split_b(est, pairs, (SelectionRule.all(),))
        assert r.rows[0].rmse < 1e-5

    def test_algebraic_identity(self):
        rng = np.random.default_rng(1)
        da, db = rng.normal(size=50), rng.normal(size=50) * 3
        pairs = [SplitPair(f"e{i}", a, 2.0, b, 2.0, 1.0) for i, (a, b) in enumerate(zip(da, db))]
        mean = 0.5 * da
        est = Estimates.from_moments([p.experiment_id for p in pairs], da, np.full(50, 2.0), mean, np.ones(50))
        row = score_against_split_b(est, pairs, (SelectionRule.all(),)).rows[0]
        np.testing.assert_allclose(row.rmse ** 2 + 2.0, np.mean((mean - db) ** 2), rtol=1e-12)

    def test_negative_floor(self):
        pairs = [SplitPair(f"e{i}", 0.0, 2.0, 0.0, 2.0, 1.0) for i in range(3)]
        est = _unadjusted([p.experiment_id for p in pairs], np.zeros(3), np.full(3, 2.0))
        with pytest.warns(RuntimeWarning, match="floored"):
            r = score_against_split_b(est, pairs, (SelectionRule.all(),))
        assert r.rows[0].rmse == 0.0 and r.notes

    def test_matches_truth(self):
        d, mean, truth, split = split_identity()
        for b in DEFAULT_BUCKETS:
            t, s = truth.row("theoretical", b.label), split.row("theoretical", b.label)
            sel = b.mask(d.delta_a, d.se2_half)
            diff = (mean[sel] - d.delta_b[sel]) ** 2 - d.se2_half[sel] - (mean[sel] - d.mu[sel]) ** 2
            se_mse = diff.std(ddof=1) / math.sqrt(sel.sum())
            assert abs(s.rmse ** 2 - t.rmse ** 2) <= 3 * se_mse
            assert abs(s.coverage - t.coverage) <= 0.02


class TestOutput:
    def test_csv_round_trip(self, tmp_path):
        rep = EvalReport([EvalRow("eb", "p<0.01", 10, 0.123456789123, 0.9, 0.4), EvalRow("raw", "All", 5, 1.0, 0.95, None)])
        text = rep.to_csv()
        assert text.splitlines()[0] == "method,bucket,count,rmse,coverage,var_s"
        (tmp_path / "r.csv").write_text(text)
        back = read_report(tmp_path / "r.csv")
        assert back.rows[1] == rep.rows[1]
        np.testing.assert_allclose(back.rows[0].rmse, 0.123456789, rtol=1e-12)

    def test_scaled_and_text(self):
        rep = EvalReport([EvalRow("eb", "All", 10, 0.05, 0.9, 0.4)]).scaled(0.1)
        assert rep.rows[0].rmse == pytest.approx(0.5)
        txt = rep.to_text()
        assert "eb" in txt and "90.0%" in txt and "0.40" in txt

    def test_read_errors(self, tmp_path):
        f = tmp_path / "bad.csv"
        f.write_text("method,bucket,count,rmse,coverage,var_s\nm,All,x,1,1,\n")
        with pytest.raises(ValidationError, match=":2"):
            read_report(f)

    def test_triples(self):
        lines = triples_csv([1.0], [2.0], [0.5]).splitlines()
        assert lines == ["delta_a,delta_b,predicted", "1,2,0.5"]
