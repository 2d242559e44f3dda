"""
Conditional maximum likelihood under two-sided truncation ``|delta| >= K``.

A selected readout is a draw from ``Normal(mu, s^2)`` truncated to
``|x| >= K``.  The conditional MLE solves ``E[X | selected; mu] = delta``,
found by the bias-correction fixed point ``mu <- delta - bias(mu)``.  The
fixed point map has slope ``1 - Var(X | sel) / s^2`` which drops below -1
for small ``mu`` (the truncated law is bimodal there), so when the iteration
fails the root is found by bisection on ``[0, |delta|]``, which always
brackets it.

Confidence intervals invert the exact conditional test: ``mu`` belongs to
the interval when the conditional survival function of ``delta`` lies in
``[alpha/2, 1 - alpha/2]``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy import special

from .core import ExperimentReadout, NumericalError, SelectionRule, SelectionKind, ValidationError, z_quantile
from .posteriors import PosteriorSummary, _adjusted_p

MAX_ITER = 10_000
_LOG_SQRT_2PI = 0.5 * math.log(2 * math.pi)


@dataclass(frozen=True)
class CmleResult:
    mu_hat: float
    iterations: int
    converged: bool
    ci_low: float = math.nan
    ci_high: float = math.nan
    equivalent_variance: float = math.nan
    used_fallback: bool = False


def _log_selected_mass(mu, s, K):
    """``log P(|X| >= K)`` for ``X ~ Normal(mu, s^2)``."""
    a = (K - mu) / s
    b = (-K - mu) / s
    return np.logaddexp(special.log_ndtr(b), special.log_ndtr(-a))


def _bias(mu, s, K):
    a = (K - mu) / s
    b = (-K - mu) / s
    log_den = _log_selected_mass(mu, s, K)
    if not np.all(np.isfinite(log_den)):
        raise NumericalError(f"selection region |x| >= {K} has negligible probability")
    return s * (np.exp(-0.5 * a * a - _LOG_SQRT_2PI - log_den) - np.exp(-0.5 * b * b - _LOG_SQRT_2PI - log_den))


def expected_selection_bias(mu, sigma_delta, K):
    """``E[delta - mu | |delta| > K]`` for ``delta ~ Normal(mu, sigma_delta^2)``."""
    if not sigma_delta > 0 or not K > 0:
        raise ValidationError("sigma_delta and K must be positive")
    out = _bias(np.asarray(mu, dtype=float), float(sigma_delta), float(K))
    return float(out) if np.ndim(out) == 0 else out


def _check_selected(delta, s, K):
    delta = np.asarray(delta, dtype=float)
    s = np.asarray(s, dtype=float)
    K = np.asarray(K, dtype=float)
    if np.any(s <= 0) or np.any(K <= 0):
        raise ValidationError("sigma_delta and K must be positive")
    if np.any(np.abs(delta) < K):
        raise ValidationError("readout was not selected: |delta| < K")
    return np.broadcast_arrays(delta, s, K)


def _bisect(fn, lo, hi, tol, max_iter=400):
    """Vectorized bisection for increasing ``fn`` with ``fn(lo) <= 0 <= fn(hi)``."""
    lo, hi = lo.copy(), hi.copy()
    it = 0
    while np.any(hi - lo > tol) and it < max_iter:
        mid = 0.5 * (lo + hi)
        up = fn(mid) > 0
        hi = np.where(up, mid, hi)
        lo = np.where(up, lo, mid)
        it += 1
    return 0.5 * (lo + hi), it


def cmle_solve_many(delta, sigma_delta, K, max_iter=MAX_ITER):
    """Vectorized :func:`cmle_solve`.

    Returns
    -------
    mu_hat, iterations, converged, used_fallback : arrays
    """
    delta, s, K = _check_selected(delta, sigma_delta, K)
    shape = delta.shape
    delta, s, K = delta.ravel(), s.ravel(), K.ravel()
    mu = delta.copy()
    iters = np.zeros(delta.size, dtype=int)
    done = np.zeros(delta.size, dtype=bool)
    for _ in range(max_iter):
        idx = np.flatnonzero(~done)
        if idx.size == 0:
            break
        with np.errstate(over="ignore", invalid="ignore"):
            try:
                new = delta[idx] - _bias(mu[idx], s[idx], K[idx])
            except NumericalError:
                new = np.full(idx.size, np.nan)
        bad = ~np.isfinite(new)
        new = np.where(bad, mu[idx], new)
        step = np.abs(new - mu[idx])
        mu[idx] = new
        iters[idx] += 1
        done[idx] = (step < 1e-10 * s[idx]) | bad
        # iterates escaping the bracket [0, |delta|] can no longer be trusted
        done[idx] |= np.abs(new) > 10 * np.abs(delta[idx]) + 10 * s[idx]
    resid = np.abs(mu + _safe_bias(mu, s, K) - delta)
    fallback = ~(resid < 1e-8 * s) | (np.sign(mu) * np.sign(delta) < 0) | (np.abs(mu) > np.abs(delta))
    if fallback.any():
        f = np.flatnonzero(fallback)
        sign = np.sign(delta[f])
        d, sf, kf = np.abs(delta[f]), s[f], K[f]
        root, extra = _bisect(lambda m: m + _bias(m, sf, kf) - d, np.zeros(f.size), d.copy(), 1e-14 * sf)
        mu[f] = sign * root
        iters[f] += extra
    converged = np.abs(mu + _safe_bias(mu, s, K) - delta) < 1e-8 * s
    return (mu.reshape(shape), iters.reshape(shape), converged.reshape(shape), fallback.reshape(shape))


def _safe_bias(mu, s, K):
    with np.errstate(over="ignore", invalid="ignore"):
        try:
            return _bias(mu, s, K)
        except NumericalError:
            return np.full(np.shape(mu), np.nan)


def cmle_solve(delta, sigma_delta, K, max_iter=MAX_ITER) -> CmleResult:
    """Conditional MLE of ``mu`` from one selected readout (point estimate only)."""
    mu, it, conv, fb = cmle_solve_many(float(delta), float(sigma_delta), float(K), max_iter=max_iter)
    return CmleResult(float(mu), int(it), bool(conv), used_fallback=bool(fb))


def _log_cond_sf(delta, mu, s, K):
    """``log P(X > delta | |X| >= K)`` for ``delta >= K``."""
    return special.log_ndtr((mu - delta) / s) - _log_selected_mass(mu, s, K)


def cmle_ci_many(delta, sigma_delta, K, alpha=0.05):
    """Vectorized inverted-test interval; returns ``(low, high)`` arrays."""
    if not 0 < alpha < 1:
        raise ValidationError(f"alpha must lie in (0, 1), got {alpha}")
    delta, s, K = _check_selected(delta, sigma_delta, K)
    shape = delta.shape
    sign = np.where(delta < 0, -1.0, 1.0).ravel()
    d, s, K = np.abs(delta).ravel(), s.ravel(), K.ravel()
    out = []
    for level in (alpha / 2, 1 - alpha / 2):
        target = math.log(level)

        def fn(m):
            return _log_cond_sf(d, m, s, K) - target

        # bracket: survival -> 0 as mu -> -inf and -> 1 as mu -> +inf
        lo, hi = d - 10 * s, d + 10 * s
        for _ in range(200):
            low_bad = fn(lo) > 0
            high_bad = fn(hi) < 0
            if not (low_bad.any() or high_bad.any()):
                break
            lo = np.where(low_bad, lo - 2 * (hi - lo), lo)
            hi = np.where(high_bad, hi + 2 * (hi - lo), hi)
        root, _ = _bisect(fn, lo, hi, 1e-10 * s)
        out.append(root)
    low, high = out
    # mirror negative readouts
    low, high = np.where(sign > 0, low, -high), np.where(sign > 0, high, -low)
    return low.reshape(shape), high.reshape(shape)


def cmle_ci(delta, sigma_delta, K, alpha=0.05):
    """``(low, high)`` for one selected readout."""
    low, high = cmle_ci_many(float(delta), float(sigma_delta), float(K), alpha)
    return float(low), float(high)


def cmle_estimate(delta, sigma_delta, K, alpha=0.05) -> CmleResult:
    """Point estimate plus interval and its equivalent variance."""
    r = cmle_solve(delta, sigma_delta, K)
    low, high = cmle_ci(delta, sigma_delta, K, alpha)
    eqv = ((high - low) / (2 * z_quantile(alpha))) ** 2
    return CmleResult(r.mu_hat, r.iterations, r.converged, low, high, eqv, r.used_fallback)


def threshold_for(rule: SelectionRule, se):
    """Per-readout truncation point ``K`` implied by a selection rule."""
    se = np.asarray(se, dtype=float)
    if rule.kind is SelectionKind.ABS_DELTA_ABOVE:
        return np.full(se.shape, rule.value)
    if rule.kind is SelectionKind.P_VALUE_BELOW and rule.value < 1:
        return z_quantile(rule.value) * se
    raise ValidationError("CMLE needs a selection threshold (p-value below 1 or |delta| above K)")


def cmle_adjust(delta, se2, rule: SelectionRule, alpha=0.05):
    """Adjust arrays of readouts selected by ``rule``.

    Readouts that do not pass the rule are returned unchanged with the
    nominal interval; CMLE only applies to selected readouts.

    Returns
    -------
    mean, variance, ci_low, ci_high, adjusted_p : arrays
    """
    delta = np.asarray(delta, dtype=float)
    se2 = np.asarray(se2, dtype=float)
    se = np.sqrt(se2)
    K = threshold_for(rule, se)
    z = z_quantile(alpha)
    mean, var = delta.copy(), se2.copy()
    low, high = delta - z * se, delta + z * se
    sel = np.abs(delta) >= K
    if sel.any():
        mean[sel] = cmle_solve_many(delta[sel], se[sel], K[sel])[0]
        low[sel], high[sel] = cmle_ci_many(delta[sel], se[sel], K[sel], alpha)
        var[sel] = ((high[sel] - low[sel]) / (2 * z)) ** 2
    return mean, var, low, high, _adjusted_p(mean, var)


def cmle_summary(readout: ExperimentReadout, rule: SelectionRule, alpha=0.05) -> PosteriorSummary:
    mean, var, low, high, p = (float(x[0]) for x in cmle_adjust([readout.delta], [readout.se2], rule, alpha))
    return PosteriorSummary(mean, var, var, low, high, p, alpha)
