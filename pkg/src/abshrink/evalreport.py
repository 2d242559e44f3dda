"""
Scoring of adjusted estimates by selection bucket.

Two scorers share one report type:

* :func:`score_against_truth` - simulations, where the true effect is known.
* :func:`score_against_split_b` - real data.  Estimates come from split A
  and the independent split B stands in for the truth:
  ``E(mu_hat - mu)^2 = E(mu_hat - delta_b)^2 - se2_b`` and an interval for
  ``delta_b`` is widened by ``se2_b``.

Selection always uses the observed delta that produced the estimate, never
the truth.
"""

from __future__ import annotations

import csv
import io
import math
import warnings
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from .core import SelectionRule, ValidationError, fmt, z_quantile

DEFAULT_BUCKETS = (SelectionRule.p_below(0.01), SelectionRule.p_below(0.05), SelectionRule.all())
REPORT_UNIT = 0.1


@dataclass(frozen=True)
class Estimates:
    """Aligned per-experiment estimates.

    ``delta`` and ``se2`` are the readout the estimates were computed from;
    they drive bucket selection and ``Var_S``.
    """

    ids: tuple
    delta: np.ndarray
    se2: np.ndarray
    mean: np.ndarray
    var: np.ndarray
    ci_low: np.ndarray
    ci_high: np.ndarray

    def __post_init__(self):
        n = len(self.ids)
        for name in ("delta", "se2", "mean", "var", "ci_low", "ci_high"):
            arr = np.asarray(getattr(self, name), dtype=float)
            if arr.shape != (n,):
                raise ValidationError(f"{name} has shape {arr.shape}, expected ({n},)")
            object.__setattr__(self, name, arr)
        object.__setattr__(self, "ids", tuple(self.ids))

    @classmethod
    def from_moments(cls, ids, delta, se2, mean, var, alpha=0.05):
        half = z_quantile(alpha) * np.sqrt(np.asarray(var, dtype=float))
        mean = np.asarray(mean, dtype=float)
        return cls(tuple(ids), delta, se2, mean, var, mean - half, mean + half)


@dataclass(frozen=True)
class EvalRow:
    method: str
    bucket: str
    count: int
    rmse: float
    coverage: float
    var_s: float | None


@dataclass
class EvalReport:
    rows: list = field(default_factory=list)
    notes: list = field(default_factory=list)

    def extend(self, other: "EvalReport"):
        self.rows.extend(other.rows)
        self.notes.extend(other.notes)
        return self

    def row(self, method, bucket) -> EvalRow:
        for r in self.rows:
            if r.method == method and r.bucket == bucket:
                return r
        raise KeyError((method, bucket))

    def scaled(self, unit=REPORT_UNIT) -> "EvalReport":
        """RMSE expressed in multiples of ``unit``."""
        rows = [EvalRow(r.method, r.bucket, r.count, r.rmse / unit, r.coverage, r.var_s) for r in self.rows]
        return EvalReport(rows, list(self.notes))

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["method", "bucket", "count", "rmse", "coverage", "var_s"])
        for r in self.rows:
            w.writerow([r.method, r.bucket, r.count, fmt(r.rmse), fmt(r.coverage),
                        "" if r.var_s is None else fmt(r.var_s)])
        return buf.getvalue()

    def to_text(self) -> str:
        head = f"{'Method':<14}{'Bucket':<10}{'Count':>7}{'RMSE':>9}{'Coverage':>10}{'Var_S':>8}"
        lines = [head, "-" * len(head)]
        last = None
        for r in self.rows:
            name = r.method if r.method != last else ""
            last = r.method
            vs = "-" if r.var_s is None else f"{r.var_s:.2f}"
            lines.append(f"{name:<14}{r.bucket:<10}{r.count:>7}{r.rmse:>9.3f}{100 * r.coverage:>9.1f}%{vs:>8}")
        return "\n".join(lines) + "\n"


def _check_buckets(buckets):
    buckets = tuple(buckets)
    if not buckets:
        raise ValidationError("at least one bucket is required")
    return buckets


def _align(estimates: Estimates, keys: Sequence[str]):
    """Index of each key in ``estimates.ids``; both sides must match exactly."""
    pos = {k: i for i, k in enumerate(estimates.ids)}
    if len(pos) != len(estimates.ids):
        raise ValidationError("duplicate experiment ids in estimates")
    keys = list(keys)
    orphans_est = sorted(set(pos) - set(keys))
    orphans_ref = sorted(set(keys) - set(pos))
    if orphans_est or orphans_ref:
        raise ValidationError(f"experiment ids do not match: only in estimates {orphans_est[:10]}, "
                              f"only in reference {orphans_ref[:10]}")
    return np.array([pos[k] for k in keys], dtype=int)


def score_against_truth(estimates: Estimates, truths: Mapping[str, float], buckets=DEFAULT_BUCKETS,
                        method="method", var_s=True) -> EvalReport:
    """Per-bucket RMSE, coverage and ``mean(var / se2)`` against the true effects."""
    buckets = _check_buckets(buckets)
    order = _align(estimates, list(truths))
    mu = np.array([truths[estimates.ids[i]] for i in order], dtype=float)
    e = estimates
    rows = []
    for rule in buckets:
        sel = rule.mask(e.delta[order], e.se2[order])
        idx = order[sel]
        m = mu[sel]
        n = int(idx.size)
        if n == 0:
            rows.append(EvalRow(method, rule.label, 0, math.nan, math.nan, None))
            continue
        rmse = math.sqrt(float(np.mean((e.mean[idx] - m) ** 2)))
        cov = float(np.mean((e.ci_low[idx] <= m) & (m <= e.ci_high[idx])))
        vs = float(np.mean(e.var[idx] / e.se2[idx])) if var_s else None
        rows.append(EvalRow(method, rule.label, n, rmse, cov, vs))
    return EvalReport(rows)


def score_against_split_b(estimates: Estimates, pairs, buckets=DEFAULT_BUCKETS, method="method",
                          alpha=0.05, var_s=True) -> EvalReport:
    """Score split-A estimates against the held-out split B.

    ``estimates.delta`` / ``estimates.se2`` must be the split-A readout.
    """
    buckets = _check_buckets(buckets)
    pairs = list(pairs)
    order = _align(estimates, [p.experiment_id for p in pairs])
    db = np.array([p.delta_b for p in pairs])
    sb = np.array([p.se2_b for p in pairs])
    e = estimates
    z = z_quantile(alpha)
    rows, notes = [], []
    for rule in buckets:
        sel = rule.mask(e.delta[order], e.se2[order])
        idx = order[sel]
        n = int(idx.size)
        if n == 0:
            rows.append(EvalRow(method, rule.label, 0, math.nan, math.nan, None))
            continue
        mse = float(np.mean((e.mean[idx] - db[sel]) ** 2) - np.mean(sb[sel]))
        if mse < 0:
            msg = f"{method}/{rule.label}: split-B MSE estimate {mse:.3g} < 0, floored at 0"
            warnings.warn(msg, RuntimeWarning, stacklevel=2)
            notes.append(msg)
            mse = 0.0
        half = z * np.sqrt(e.var[idx] + sb[sel])
        cov = float(np.mean(np.abs(db[sel] - e.mean[idx]) <= half))
        vs = float(np.mean(e.var[idx] / e.se2[idx])) if var_s else None
        rows.append(EvalRow(method, rule.label, n, math.sqrt(mse), cov, vs))
    return EvalReport(rows, notes)


def triples_csv(delta_a, delta_b, predicted) -> str:
    """``delta_a,delta_b,predicted`` rows for external charting."""
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["delta_a", "delta_b", "predicted"])
    for a, b, p in zip(delta_a, delta_b, predicted):
        w.writerow([fmt(a), fmt(b), fmt(p)])
    return buf.getvalue()


def read_report(path) -> EvalReport:
    rows = []
    with open(path, newline="", encoding="utf-8") as fh:
        for lineno, r in enumerate(csv.DictReader(fh), start=2):
            try:
                rows.append(EvalRow(r["method"], r["bucket"], int(r["count"]), float(r["rmse"]),
                                    float(r["coverage"]), float(r["var_s"]) if r["var_s"] else None))
            except (KeyError, TypeError, ValueError) as exc:
                raise ValidationError(f"{path}:{lineno}: {exc}") from None
    return EvalReport(rows)
