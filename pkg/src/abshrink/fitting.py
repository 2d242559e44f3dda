"""
Hyperparameter estimation from historical readouts.

* :func:`fit_mle2` - marginal (type-II) maximum likelihood for one prior family.
* :func:`fit_sure_gaussian` - scale of a Gaussian prior by minimizing Stein's
  unbiased risk estimate of the linear shrinkage rule.
* :func:`fit_ghidorah` - EM for the zero / Gaussian / Laplace mixture.

Fitting is deterministic; there is no randomness anywhere in this module.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy import optimize

from .core import ExperimentReadout, ValidationError, norm_logpdf, readout_arrays
from .posteriors import (
    Gaussian,
    Huber,
    Laplace,
    Mixture,
    PriorModel,
    huber_loglik,
    laplace_moments,
    mixture_components,
)

SCALE_BOUNDS = (1e-12, 1e6)  # multiples of median(se2)
FAMILIES = ("gaussian", "laplace", "huber", "mixture")
COLLAPSE_SCALE = 1e-6  # slab scale, in multiples of median(se2), below which it acts as a point mass


@dataclass
class FitResult:
    prior: PriorModel
    loglik: float
    n_used: int
    iterations: int
    converged: bool
    sure_risk: float | None = None
    trace: list = field(default_factory=list)
    notes: list = field(default_factory=list)


def as_arrays(data, min_n=2):
    """Accept a sequence of readouts or a ``(delta, se2)`` pair of arrays."""
    if isinstance(data, tuple) and len(data) == 2 and not isinstance(data[0], ExperimentReadout):
        delta, se2 = (np.asarray(x, dtype=float).ravel() for x in data)
        delta, se2 = np.broadcast_arrays(delta, se2)
    else:
        delta, se2 = readout_arrays(data)
    if delta.size < min_n:
        raise ValidationError(f"need at least {min_n} readouts, got {delta.size}")
    if not (np.all(np.isfinite(delta)) and np.all(se2 > 0)):
        raise ValidationError("readouts must have finite delta and positive se2")
    return delta, se2


def _bounds(se2):
    med = float(np.median(se2))
    return SCALE_BOUNDS[0] * med, SCALE_BOUNDS[1] * med


def _log_search(objective, lo, hi, x0=None, window=3.0):
    """Minimize ``objective(x)`` over ``x in [lo, hi]`` by bounded Brent on ``log x``.

    With ``x0`` the search starts in ``log x0 +- window`` and widens while the
    optimum sits on the edge of the window.  Endpoints of the full range are
    always compared, so monotone objectives land exactly on a bound.
    """
    llo, lhi = math.log(lo), math.log(hi)

    def f(t):
        return float(objective(math.exp(t)))

    if x0 is None:
        a, b = llo, lhi
    else:
        c = min(max(math.log(x0), llo), lhi)
        a, b = max(llo, c - window), min(lhi, c + window)
    while True:
        res = optimize.minimize_scalar(f, bounds=(a, b), method="bounded",
                                       options={"xatol": 1e-9, "maxiter": 500})
        t, val = float(res.x), float(res.fun)
        near_a = a > llo and t - a < 1e-3
        near_b = b < lhi and b - t < 1e-3
        if not (near_a or near_b):
            break
        a, b = (max(llo, a - 2 * window), b) if near_a else (a, min(lhi, b + 2 * window))
    best_t, best = t, val
    for edge in (llo, lhi):
        fe = f(edge)
        if fe <= best:
            best_t, best = edge, fe
    return math.exp(best_t), best


def sure_objective(tau2, delta, se2):
    """Heteroskedastic SURE of ``mu_hat = tau2 / (tau2 + se2) * delta`` (summed over readouts)."""
    shrink = se2 / (tau2 + se2)
    return float(np.sum(shrink ** 2 * delta ** 2 + se2 * (tau2 - se2) / (tau2 + se2)))


def fit_sure_gaussian(readouts):
    """Gaussian prior variance minimizing SURE.

    Returns
    -------
    (tau2, sure_risk)
    """
    delta, se2 = as_arrays(readouts)
    lo, hi = _bounds(se2)
    tau2, risk = _log_search(lambda t: sure_objective(t, delta, se2), lo, hi)
    return tau2, risk


def _fit_scale(loglik_fn, lo, hi, x0=None):
    x, negll = _log_search(lambda v: -float(np.sum(loglik_fn(v))), lo, hi, x0=x0)
    return x, -negll


def fit_mle2(readouts, family: str, init: PriorModel | None = None, **kwargs) -> FitResult:
    """Maximize the summed marginal log-likelihood over one prior family.

    Parameters
    ----------
    readouts : sequence of ExperimentReadout or (delta, se2)
    family : {'gaussian', 'laplace', 'huber', 'mixture'}
        ``'mixture'`` runs :func:`fit_ghidorah`; extra keyword arguments
        (``freeze_weights``, ``max_iter``...) are forwarded there.
    init : PriorModel, optional
        Starting point; scale parameters are searched on log scale.
    """
    family = family.lower()
    if family not in FAMILIES:
        raise ValidationError(f"unknown prior family {family!r}; expected one of {FAMILIES}")
    delta, se2 = as_arrays(readouts)
    lo, hi = _bounds(se2)
    n = delta.size

    if family == "gaussian":
        x0 = init.tau2 if isinstance(init, Gaussian) else None
        tau2, ll = _fit_scale(lambda t: norm_logpdf(delta, t + se2), lo, hi, x0)
        return FitResult(Gaussian(tau2), ll, n, 1, True)

    if family == "laplace":
        x0 = init.nu2 if isinstance(init, Laplace) else None
        nu2, ll = _fit_scale(lambda v: laplace_moments(delta, se2, v)[2], lo, hi, x0)
        return FitResult(Laplace(nu2), ll, n, 1, True)

    if family == "huber":
        return _fit_huber(delta, se2, init, lo, hi)

    return fit_ghidorah((delta, se2), init=init, **kwargs)


def _fit_huber(delta, se2, init, lo, hi):
    if isinstance(init, Huber):
        start = np.log([init.tau2, init.k])
    else:
        tau2 = fit_mle2((delta, se2), "gaussian").prior.tau2
        tau2 = max(tau2, float(np.median(se2)) * 1e-3)
        start = np.log([tau2, math.sqrt(tau2)])
    llo, lhi = math.log(lo), math.log(hi)

    def negll(theta):
        t = np.clip(theta, llo, lhi)
        return -float(np.sum(huber_loglik(delta, se2, math.exp(t[0]), math.exp(t[1]))))

    res = optimize.minimize(negll, start, method="Nelder-Mead",
                            options={"xatol": 1e-7, "fatol": 1e-9, "maxiter": 4000, "maxfev": 8000})
    t = np.clip(res.x, llo, lhi)
    prior = Huber(math.exp(t[0]), math.exp(t[1]))
    return FitResult(prior, -float(res.fun), delta.size, int(res.nit), bool(res.success),
                     notes=[] if res.success else [str(res.message)])


def _floored_weights(resp_sums, floor):
    """Maximize ``sum_k R_k log w_k`` over the simplex with ``w_k >= floor``."""
    r = np.asarray(resp_sums, dtype=float)
    active = np.zeros(r.size, dtype=bool)
    while True:
        free = ~active
        w = np.full(r.size, floor)
        mass = 1.0 - floor * active.sum()
        rs = r[free].sum()
        w[free] = r[free] / rs * mass if rs > 0 else mass / free.sum()
        newly = free & (w < floor)
        if not newly.any():
            return w, active
        active |= newly


def _absorb_collapsed(prior: Mixture, collapse_scale, floor, ll_prev, loglik_of, notes, it):
    """Hand the weight of a slab shrunk to a point mass to the zero head.

    A slab that narrow is indistinguishable from the zero head, and EM
    cannot move weight between identical heads.  The merge is kept only
    when the likelihood stays at or above the previous iterate's.
    """
    w = np.array(prior.weights)
    moved = []
    for head, scale in ((1, prior.tau2), (2, prior.nu2)):
        if scale <= collapse_scale and w[head] > floor:
            w[0] += w[head] - floor
            w[head] = floor
            moved.append(head)
    if not moved:
        return prior
    merged = Mixture(float(w[0]), float(w[1]), 1.0 - float(w[0]) - float(w[1]), prior.tau2, prior.nu2)
    if loglik_of(merged) < ll_prev:
        return prior
    notes.append(f"iter {it}: heads {moved} collapsed to a point mass, weight moved to the zero head")
    return merged


def fit_ghidorah(readouts, init: Mixture | None = None, *, freeze_weights=False,
                 tol=1e-8, max_iter=500, weight_floor=1e-6) -> FitResult:
    """Fit the zero / Gaussian / Laplace mixture prior by EM.

    Starting values: both scales from :func:`fit_sure_gaussian` and equal
    weights, unless ``init`` is given.  Each M-step sets the weights to the
    mean responsibilities (no weight below ``weight_floor``) and maximizes the
    responsibility-weighted marginal log-likelihood of each continuous head by
    a 1-D log-scale search.  A new scale is only accepted when it does not
    lower that weighted objective, so the likelihood never decreases.

    Stops when the total marginal log-likelihood improves by less than
    ``tol`` (relative) or after ``max_iter`` iterations.
    """
    delta, se2 = as_arrays(readouts, min_n=3)
    n = delta.size
    lo, hi = _bounds(se2)
    notes = []
    sure_risk = None
    if init is None:
        tau2, sure_risk = fit_sure_gaussian((delta, se2))
        floor_scale = float(np.median(se2))
        if tau2 <= lo * (1 + 1e-9):
            # null-looking data: start the slabs at the noise scale so they can separate from the zero head
            notes.append(f"SURE scale at lower bound; slabs initialized at median se2 = {floor_scale:.6g}")
            tau2 = floor_scale
        prior = Mixture(1 / 3, 1 / 3, 1 / 3, tau2, tau2)
    else:
        if not isinstance(init, Mixture):
            raise ValidationError("fit_ghidorah init must be a Mixture prior")
        prior = init

    collapse_scale = COLLAPSE_SCALE * float(np.median(se2))

    def loglik_of(p):
        return float(np.sum(mixture_components(delta, se2, p)["loglik"]))

    ll = loglik_of(prior)
    trace = [(0, ll)]
    converged = False
    it = 0
    for it in range(1, max_iter + 1):
        q = mixture_components(delta, se2, prior)["q"]
        sums = q.sum(axis=1)
        if freeze_weights:
            w = prior.weights
        else:
            w, active = _floored_weights(sums, weight_floor)
            if active.any():
                notes.append(f"iter {it}: weight floor applied to heads {np.flatnonzero(active).tolist()}")
        tau2, nu2 = prior.tau2, prior.nu2
        if sums[1] > 0:
            rg = q[1]
            obj = lambda t: norm_logpdf(delta, t + se2) @ rg
            cand, val = _fit_scale(lambda t: obj(t) * np.ones(1), lo, hi, x0=tau2)
            if val >= obj(tau2):
                tau2 = cand
        if sums[2] > 0:
            rl = q[2]
            obj = lambda v: laplace_moments(delta, se2, v)[2] @ rl
            cand, val = _fit_scale(lambda v: obj(v) * np.ones(1), lo, hi, x0=nu2)
            if val >= obj(nu2):
                nu2 = cand
        w = w / w.sum()
        new_prior = Mixture(float(w[0]), float(w[1]), 1.0 - float(w[0]) - float(w[1]), tau2, nu2) \
            if not freeze_weights else Mixture(prior.p0, prior.pG, prior.pL, tau2, nu2)
        if not freeze_weights:
            new_prior = _absorb_collapsed(new_prior, collapse_scale, weight_floor, ll, loglik_of, notes, it)
        new_ll = loglik_of(new_prior)
        trace.append((it, new_ll))
        prior = new_prior
        if abs(new_ll - ll) < tol * max(abs(ll), 1.0):
            converged = True
            ll = new_ll
            break
        ll = new_ll
    if not converged:
        notes.append(f"EM stopped after {max_iter} iterations without meeting tol={tol:g}")
    return FitResult(prior, ll, n, it, converged, sure_risk=sure_risk, trace=trace, notes=notes)
