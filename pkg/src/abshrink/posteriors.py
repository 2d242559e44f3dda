"""
Empirical-Bayes posteriors for a normal readout ``delta ~ N(mu, se2)``.

Closed forms exist for the Gaussian, Laplace and three-headed
(zero / Gaussian / Laplace) mixture priors.  Everything else goes through
:func:`posterior_quadrature`, which also serves as the independent check of
the closed forms.

All array-valued helpers broadcast over ``delta`` and ``se2``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, fields
from typing import Callable, NamedTuple

import numpy as np
from numpy.polynomial.legendre import leggauss
from scipy import special

from .core import (
    ConfigurationError,
    NumericalError,
    ValidationError,
    fmt,
    log_norm_cdf,
    norm_cdf,
    norm_logpdf,
    z_quantile,
)

LOG_FLOOR = -1e300


# ---------------------------------------------------------------------------
# prior models
# ---------------------------------------------------------------------------

def _positive(name, value):
    value = float(value)
    if not (value > 0 and math.isfinite(value)):
        raise ValidationError(f"{name} must be positive and finite, got {value}")
    return value


class PriorModel:
    """Base class of the tagged prior union; subclasses are frozen dataclasses."""

    kind: str = ""
    point_mass: float = 0.0

    @property
    def variance(self) -> float:
        raise NotImplementedError

    def log_density(self, mu):
        """Log density of the continuous part, normalized to integrate to one."""
        raise NotImplementedError

    @property
    def breakpoints(self) -> tuple:
        return ()

    @property
    def scale(self) -> float:
        """Rough width of the density peak, used to size quadrature panels."""
        return math.sqrt(self.variance)

    def params(self) -> dict:
        return {f.name: getattr(self, f.name) for f in fields(self)}


@dataclass(frozen=True)
class Zero(PriorModel):
    kind = "zero"
    point_mass = 1.0

    @property
    def variance(self):
        return 0.0


@dataclass(frozen=True)
class Gaussian(PriorModel):
    tau2: float
    kind = "gaussian"

    def __post_init__(self):
        object.__setattr__(self, "tau2", _positive("tau2", self.tau2))

    @property
    def variance(self):
        return self.tau2

    def log_density(self, mu):
        return norm_logpdf(mu, self.tau2)


@dataclass(frozen=True)
class Laplace(PriorModel):
    """Laplace prior parameterized by its variance ``nu2`` (rate ``sqrt(2 / nu2)``)."""

    nu2: float
    kind = "laplace"

    def __post_init__(self):
        object.__setattr__(self, "nu2", _positive("nu2", self.nu2))

    @property
    def variance(self):
        return self.nu2

    @property
    def rate(self):
        return math.sqrt(2.0 / self.nu2)

    @property
    def breakpoints(self):
        return (0.0,)

    @property
    def scale(self):
        return 1.0 / self.rate

    def log_density(self, mu):
        lam = self.rate
        return np.log(lam / 2.0) - lam * np.abs(mu)


@dataclass(frozen=True)
class Huber(PriorModel):
    """Gaussian core of variance ``tau2`` joined at ``|mu| = k`` to exponential tails."""

    tau2: float
    k: float
    kind = "huber"

    def __post_init__(self):
        object.__setattr__(self, "tau2", _positive("tau2", self.tau2))
        object.__setattr__(self, "k", _positive("k", self.k))

    @property
    def _half_mass(self):
        tau, k = math.sqrt(self.tau2), self.k
        core = tau * math.sqrt(2 * math.pi) * (special.ndtr(k / tau) - 0.5)
        tail = self.tau2 / k * math.exp(-k * k / (2 * self.tau2))
        return core, tail

    @property
    def log_norm(self):
        core, tail = self._half_mass
        return math.log(2.0 * (core + tail))

    @property
    def variance(self):
        tau, k, t2 = math.sqrt(self.tau2), self.k, self.tau2
        kappa = k / tau
        core = tau ** 3 * math.sqrt(2 * math.pi) * (
            special.ndtr(kappa) - 0.5 - kappa * math.exp(-0.5 * kappa * kappa) / math.sqrt(2 * math.pi))
        c = k / t2
        tail = math.exp(-k * k / (2 * t2)) * (k * k / c + 2 * k / c ** 2 + 2 / c ** 3)
        return 2.0 * (core + tail) / math.exp(self.log_norm)

    @property
    def breakpoints(self):
        return (-self.k, self.k)

    @property
    def scale(self):
        return min(math.sqrt(self.tau2), self.tau2 / self.k)

    def log_density(self, mu):
        mu = np.abs(np.asarray(mu, dtype=float))
        inner = -mu * mu / (2 * self.tau2)
        outer = (self.k ** 2 - 2 * self.k * mu) / (2 * self.tau2)
        return np.where(mu <= self.k, inner, outer) - self.log_norm


@dataclass(frozen=True)
class StudentT(PriorModel):
    """Student-t prior with ``df > 2`` degrees of freedom and variance ``scale2``."""

    df: float
    scale2: float
    kind = "student_t"

    def __post_init__(self):
        df = float(self.df)
        if not df > 2:
            raise ValidationError(f"StudentT needs df > 2 for a finite variance, got {df}")
        object.__setattr__(self, "df", df)
        object.__setattr__(self, "scale2", _positive("scale2", self.scale2))

    @property
    def variance(self):
        return self.scale2

    @property
    def t_scale(self):
        return math.sqrt(self.scale2 * (self.df - 2) / self.df)

    @property
    def scale(self):
        return self.t_scale

    def log_density(self, mu):
        nu, c = self.df, self.t_scale
        x = np.asarray(mu, dtype=float) / c
        return (special.gammaln((nu + 1) / 2) - special.gammaln(nu / 2)
                - 0.5 * np.log(nu * np.pi) - np.log(c)
                - (nu + 1) / 2 * np.log1p(x * x / nu))


@dataclass(frozen=True)
class Mixture(PriorModel):
    """Three-headed prior: point mass at zero, Gaussian(tau2) and Laplace(nu2)."""

    p0: float
    pG: float
    pL: float
    tau2: float
    nu2: float
    kind = "mixture"

    def __post_init__(self):
        w = [float(self.p0), float(self.pG), float(self.pL)]
        if min(w) < 0 or abs(sum(w) - 1.0) > 1e-12:
            raise ValidationError(f"mixture weights must be nonnegative and sum to 1, got {w}")
        for name, v in zip(("p0", "pG", "pL"), w):
            object.__setattr__(self, name, v)
        object.__setattr__(self, "tau2", _positive("tau2", self.tau2))
        object.__setattr__(self, "nu2", _positive("nu2", self.nu2))

    @property
    def weights(self):
        return np.array([self.p0, self.pG, self.pL])

    @property
    def point_mass(self):
        return self.p0

    @property
    def variance(self):
        return self.pG * self.tau2 + self.pL * self.nu2

    @property
    def breakpoints(self):
        return (0.0,)

    @property
    def scale(self):
        return min(math.sqrt(self.tau2), math.sqrt(self.nu2 / 2))

    def log_density(self, mu):
        # continuous part, renormalized to unit mass
        cont = self.pG + self.pL
        if cont <= 0:
            raise ValidationError("mixture has no continuous component")
        with np.errstate(divide="ignore"):
            return np.logaddexp(np.log(self.pG / cont) + Gaussian(self.tau2).log_density(mu),
                                np.log(self.pL / cont) + Laplace(self.nu2).log_density(mu))


@dataclass(frozen=True)
class ZeroInflated(PriorModel):
    """Point mass ``p0`` at zero plus ``1 - p0`` times any continuous ``base`` prior."""

    p0: float
    base: PriorModel
    kind = "zero_inflated"

    def __post_init__(self):
        p0 = float(self.p0)
        if not 0 <= p0 < 1:
            raise ValidationError(f"p0 must lie in [0, 1), got {p0}")
        if isinstance(self.base, (Zero, Mixture, ZeroInflated)):
            raise ValidationError("base of a zero-inflated prior must be a continuous prior")
        object.__setattr__(self, "p0", p0)

    @property
    def point_mass(self):
        return self.p0

    @property
    def variance(self):
        return (1 - self.p0) * self.base.variance

    @property
    def breakpoints(self):
        return self.base.breakpoints

    @property
    def scale(self):
        return self.base.scale

    def log_density(self, mu):
        return self.base.log_density(mu)

    def params(self):
        return {"p0": self.p0, "base": self.base}


PRIOR_KINDS = {cls.kind: cls for cls in (Zero, Gaussian, Laplace, Huber, StudentT, Mixture, ZeroInflated)}


def prior_to_dict(prior: PriorModel, prefix="") -> dict:
    out = {f"{prefix}kind": prior.kind}
    for name, value in prior.params().items():
        if isinstance(value, PriorModel):
            out.update(prior_to_dict(value, prefix=f"{prefix}{name}."))
        else:
            out[f"{prefix}{name}"] = format(value, ".17g")
    return out


def prior_from_dict(data: dict, prefix="") -> PriorModel:
    try:
        kind = data[f"{prefix}kind"]
    except KeyError:
        raise ConfigurationError(f"missing key {prefix}kind") from None
    if kind not in PRIOR_KINDS:
        raise ValidationError(f"unknown prior kind {kind!r}")
    cls = PRIOR_KINDS[kind]
    if cls is ZeroInflated:
        return ZeroInflated(float(data[f"{prefix}p0"]), prior_from_dict(data, prefix=f"{prefix}base."))
    kwargs = {}
    for f in fields(cls):
        key = f"{prefix}{f.name}"
        if key not in data:
            raise ConfigurationError(f"prior {kind!r} is missing {key}")
        kwargs[f.name] = float(data[key])
    return cls(**kwargs)


def dump_prior(prior: PriorModel) -> str:
    return "".join(f"{k}={v}\n" for k, v in prior_to_dict(prior).items())


def parse_kv(text: str) -> dict:
    """Parse flat ``key=value`` lines; ``#`` starts a comment."""
    out = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValidationError(f"line {lineno}: expected key=value, got {line!r}")
        key, value = line.split("=", 1)
        out[key.strip()] = value.strip()
    return out


def load_prior(text: str) -> PriorModel:
    return prior_from_dict(parse_kv(text))


# ---------------------------------------------------------------------------
# posterior summaries
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class PosteriorSummary:
    mean: float
    variance: float
    variance_uncapped: float
    ci_low: float
    ci_high: float
    adjusted_p: float
    alpha: float = 0.05
    component_posteriors: tuple | None = None
    evidence: float | None = None


def _adjusted_p(mean, variance):
    mean = np.asarray(mean, dtype=float)
    variance = np.asarray(variance, dtype=float)
    with np.errstate(divide="ignore", invalid="ignore"):
        z = np.abs(mean) / np.sqrt(variance)
    p = 2.0 * special.ndtr(-z)
    # degenerate posteriors: a point at zero is fully ambiguous, elsewhere certain
    p = np.where(variance > 0, p, np.where(mean == 0, 1.0, 0.0))
    return np.minimum(p, 1.0)


def adjusted_p(summary: PosteriorSummary) -> float:
    """``2 min(P(mu >= 0), P(mu <= 0))`` under the normal approximation to the posterior."""
    return float(_adjusted_p(summary.mean, summary.variance))


def credible_interval(summary: PosteriorSummary, alpha=0.05):
    if not 0 < alpha < 1:
        raise ValidationError(f"alpha must lie in (0, 1), got {alpha}")
    half = z_quantile(alpha) * math.sqrt(summary.variance)
    return summary.mean - half, summary.mean + half


def summarize(mean, variance_uncapped, se2, alpha=0.05, cap=True, component_posteriors=None, evidence=None):
    """Build a :class:`PosteriorSummary`, capping the variance at ``se2``."""
    mean = float(mean)
    var_u = max(float(variance_uncapped), 0.0)
    var = min(var_u, float(se2)) if cap else var_u
    half = z_quantile(alpha) * math.sqrt(var)
    return PosteriorSummary(
        mean=mean, variance=var, variance_uncapped=var_u,
        ci_low=mean - half, ci_high=mean + half,
        adjusted_p=float(_adjusted_p(mean, var)), alpha=alpha,
        component_posteriors=None if component_posteriors is None else tuple(map(float, component_posteriors)),
        evidence=None if evidence is None else float(evidence),
    )


def _check_inputs(delta, se2):
    delta = np.asarray(delta, dtype=float)
    se2 = np.asarray(se2, dtype=float)
    if not np.all(np.isfinite(delta)):
        raise ValidationError("delta must be finite")
    if not np.all((se2 > 0) & np.isfinite(se2)):
        raise ValidationError("se2 must be positive and finite")
    return delta, se2


def _scalar(x):
    return float(x) if np.ndim(x) == 0 else x


# ---------------------------------------------------------------------------
# closed forms
# ---------------------------------------------------------------------------

def gaussian_moments(delta, se2, tau2):
    shrink = tau2 / (tau2 + se2)
    return shrink * delta, shrink * se2, norm_logpdf(delta, tau2 + se2)


def posterior_gaussian(delta, se2, tau2):
    """James-Stein posterior ``N(tau2/(tau2+se2) delta, tau2 se2/(tau2+se2))``.

    Returns ``(mean, var)``; broadcasts over arrays.
    """
    delta, se2 = _check_inputs(delta, se2)
    tau2 = np.asarray(tau2, dtype=float)
    if np.any(tau2 <= 0):
        raise ValidationError("tau2 must be positive")
    mean, var, _ = gaussian_moments(delta, se2, tau2)
    return _scalar(mean), _scalar(var)


def laplace_moments(delta, se2, nu2):
    """Posterior mean, variance and marginal log-likelihood under a Laplace prior.

    With ``lam = sqrt(2/nu2)`` and ``b = lam se2`` the posterior splits into a
    normal ``N(delta + b, se2)`` truncated to ``mu < 0`` and ``N(delta - b, se2)``
    truncated to ``mu > 0``, with weights proportional to ``F(delta)`` and
    ``F(-delta)`` where ``F(d) = exp(lam d) Phi((-d - b)/sd)``.  Everything is
    kept in log space; ``exp(lam d)`` alone overflows for moderate ``d``.
    """
    lam = np.sqrt(2.0 / np.asarray(nu2, dtype=float))
    sd = np.sqrt(se2)
    b = lam * se2
    u = (-delta - b) / sd
    log_fp = lam * delta + log_norm_cdf(u)
    log_fm = -lam * delta + log_norm_cdf((delta - b) / sd)
    log_g = np.logaddexp(log_fp, log_fm)
    half_gap = 0.5 * (log_fp - log_fm)
    # w = F(d) / (F(d) + F(-d));  2w - 1 = tanh(gap/2),  w(1-w) = 1 / (4 cosh^2(gap/2))
    mean = delta + b * np.tanh(half_gap)
    w1mw = 0.25 / np.cosh(np.clip(half_gap, -350, 350)) ** 2
    log_f = lam * delta + norm_logpdf(u) - np.log(lam * sd)
    var = se2 - 2.0 * b * b * (np.exp(log_f - log_g) - 2.0 * w1mw)
    if not (np.all(np.isfinite(mean)) and np.all(np.isfinite(var))):
        raise NumericalError(
            f"Laplace posterior overflowed (max |delta|/sd = {np.max(np.abs(delta) / sd):.3g}, "
            f"min nu/sd = {np.min(np.sqrt(nu2) / sd):.3g})")
    loglik = np.log(lam / 2.0) + 0.5 * lam * lam * se2 + log_g
    return mean, var, loglik


def posterior_laplace(delta, se2, nu2):
    """Posterior ``(mean, var)`` under a zero-mean Laplace prior of variance ``nu2``."""
    delta, se2 = _check_inputs(delta, se2)
    if np.any(np.asarray(nu2) <= 0):
        raise ValidationError("nu2 must be positive")
    mean, var, _ = laplace_moments(delta, se2, nu2)
    return _scalar(mean), _scalar(var)


def _log_interval(a, b):
    """``log(Phi(b) - Phi(a))`` for ``a <= b``, accurate in both tails."""
    a, b = np.broadcast_arrays(np.asarray(a, float), np.asarray(b, float))
    upper = a > 0  # both in the right tail: use survival functions
    hi = np.where(upper, log_norm_cdf(-a), log_norm_cdf(b))
    lo = np.where(upper, log_norm_cdf(-b), log_norm_cdf(a))
    with np.errstate(divide="ignore"):
        return hi + np.log1p(-np.exp(lo - hi))


def huber_loglik(delta, se2, tau2, k):
    """Closed-form log marginal of a Huber prior convolved with ``N(0, se2)``.

    The core contributes a truncated Gaussian product, each tail an
    exponential-times-Gaussian integral.
    """
    prior = Huber(tau2, k)
    sd = np.sqrt(se2)
    m = tau2 * delta / (tau2 + se2)
    v = tau2 * se2 / (tau2 + se2)
    core = (0.5 * np.log(2 * np.pi * tau2) + norm_logpdf(delta, tau2 + se2)
            + _log_interval((-k - m) / np.sqrt(v), (k - m) / np.sqrt(v)))
    c = k / tau2
    common = k * k / (2 * tau2) + 0.5 * c * c * se2
    right = common - c * delta + log_norm_cdf((delta - c * se2 - k) / sd)
    left = common + c * delta + log_norm_cdf((-delta - c * se2 - k) / sd)
    return np.logaddexp(core, np.logaddexp(right, left)) - prior.log_norm


# ---------------------------------------------------------------------------
# quadrature
# ---------------------------------------------------------------------------

class QuadratureMoments(NamedTuple):
    mean: float
    var: float
    evidence: float
    log_evidence: float


_GL_X, _GL_W = leggauss(20)


def _gl(func, a, b):
    """20-point Gauss-Legendre on each panel ``[a_i, b_i]``; returns (k, n_panels)."""
    half = 0.5 * (b - a)
    mid = 0.5 * (b + a)
    nodes = mid[:, None] + half[:, None] * _GL_X[None, :]
    vals = func(nodes.ravel()).reshape(-1, *nodes.shape)
    return (vals * _GL_W).sum(axis=-1) * half


def posterior_quadrature(prior_density: Callable, delta, se2, *, point_mass=0.0, log_density=False,
                         scale=None, prior_var=None, breakpoints=(), rtol=1e-13, max_rounds=60):
    """Posterior moments of ``mu`` by adaptive composite Gauss-Legendre quadrature.

    The prior is ``point_mass * delta_0 + (1 - point_mass) * prior_density``.

    Parameters
    ----------
    prior_density : callable
        Density of the continuous part (or its log when ``log_density``).
        It should integrate to one for ``evidence`` to be meaningful; the
        moments only need it up to a constant.
    delta, se2 : float
        Observation and its noise variance.
    scale : float, optional
        Width of the sharpest feature of the prior; panels start no wider
        than half of ``min(scale, sqrt(se2))``.
    prior_var : float, optional
        Prior variance; the integration range is
        ``[min(0, delta), max(0, delta)]`` padded by ``12 sqrt(se2 + prior_var)``.
    breakpoints : sequence of float
        Kinks of the prior density; always used as panel edges.

    Returns
    -------
    QuadratureMoments
        ``(mean, var, evidence, log_evidence)``.

    Raises
    ------
    NumericalError
        If panels are still being refined after ``max_rounds`` bisection rounds.
    """
    delta, se2 = float(delta), float(se2)
    if not math.isfinite(delta) or not se2 > 0:
        raise ValidationError("delta must be finite and se2 positive")
    if not 0 <= point_mass <= 1:
        raise ValidationError("point_mass must lie in [0, 1]")
    log_m0 = float(norm_logpdf(delta, se2))
    if point_mass >= 1:
        return QuadratureMoments(0.0, 0.0, math.exp(log_m0), log_m0)

    sd_noise = math.sqrt(se2)
    pv = se2 if prior_var is None else float(prior_var)
    pad = 12.0 * math.sqrt(se2 + pv)
    lo, hi = min(0.0, delta) - pad, max(0.0, delta) + pad
    width = 0.5 * min(sd_noise, scale if scale else sd_noise)
    n0 = int(min(max(math.ceil((hi - lo) / width), 8), 200_000))
    edges = np.unique(np.concatenate([np.linspace(lo, hi, n0 + 1),
                                      [x for x in breakpoints if lo < x < hi]]))

    if log_density:
        logp = prior_density
    else:
        def logp(mu):
            with np.errstate(divide="ignore"):
                return np.log(prior_density(mu))

    def log_integrand(mu):
        return norm_logpdf(delta - mu, se2) + logp(mu)

    # shift/centre from a coarse pass so the integrand is O(1) near its peak
    probe = 0.5 * (edges[:-1] + edges[1:])
    lvals = log_integrand(probe)
    if not np.any(np.isfinite(lvals)):
        raise NumericalError("prior density vanishes over the integration range")
    shift = float(np.max(lvals))
    centre = float(probe[np.argmax(lvals)])

    def func(mu):
        w = np.exp(log_integrand(mu) - shift)
        d = mu - centre
        return np.stack([w, w * d, w * d * d])

    a, b = edges[:-1], edges[1:]
    total = np.zeros(3)
    residual = np.zeros(3)
    first = _gl(func, a, b).sum(axis=1)
    span = hi - lo
    scales = np.array([abs(first[0]), abs(first[0]) * sd_noise, abs(first[0]) * se2])
    if scales[0] == 0:
        raise NumericalError("quadrature evidence underflowed on the initial grid")
    for _ in range(max_rounds):
        mid = 0.5 * (a + b)
        whole = _gl(func, a, b)
        halves = _gl(func, a, mid) + _gl(func, mid, b)
        err = np.abs(whole - halves)
        allowed = (rtol * scales)[:, None] * np.maximum((b - a) / span, 1e-3)
        ok = np.all(err <= allowed, axis=0)
        total += halves[:, ok].sum(axis=1)
        residual += err[:, ok].sum(axis=1)
        if ok.all():
            break
        a, b = np.concatenate([a[~ok], mid[~ok]]), np.concatenate([mid[~ok], b[~ok]])
    else:
        raise NumericalError(
            f"quadrature did not converge: {a.size} panels unresolved, "
            f"estimated residual {residual[0] / max(total[0], 1e-300):.3g} (relative)")

    z0, z1, z2 = total
    m1 = z1 / z0
    cont_mean = centre + m1
    cont_var = max(z2 / z0 - m1 * m1, 0.0)
    log_cont = math.log(z0) + shift
    if point_mass <= 0:
        return QuadratureMoments(cont_mean, cont_var, math.exp(log_cont), log_cont)
    # mix analytically with the point mass at zero
    la = math.log(point_mass) + log_m0
    lb = math.log1p(-point_mass) + log_cont
    log_ev = float(np.logaddexp(la, lb))
    q_cont = math.exp(lb - log_ev)
    mean = q_cont * cont_mean
    second = q_cont * (cont_var + cont_mean ** 2)
    return QuadratureMoments(mean, max(second - mean * mean, 0.0), math.exp(log_ev), log_ev)


def quadrature_for(prior: PriorModel, delta, se2, **kwargs) -> QuadratureMoments:
    """Run :func:`posterior_quadrature` with the panel hints of ``prior``."""
    if isinstance(prior, Zero):
        return posterior_quadrature(None, delta, se2, point_mass=1.0)
    if isinstance(prior, Mixture) and prior.pG + prior.pL == 0:
        return posterior_quadrature(None, delta, se2, point_mass=1.0)
    base_var = prior.base.variance if isinstance(prior, ZeroInflated) else prior.variance
    if isinstance(prior, Mixture):
        base_var = max(prior.tau2, prior.nu2)
    return posterior_quadrature(prior.log_density, delta, se2, point_mass=prior.point_mass,
                                log_density=True, scale=prior.scale, prior_var=base_var,
                                breakpoints=prior.breakpoints, **kwargs)


def _truncated_normal_moments(m, s, alpha, beta):
    """Mean and variance of ``N(m, s^2)`` restricted to ``[m + alpha s, m + beta s]``.

    Infinite ``alpha`` / ``beta`` are allowed.  Returns ``(mean, var, log_mass)``.
    """
    log_z = _log_interval(alpha, beta)
    with np.errstate(invalid="ignore", over="ignore"):
        ra = np.exp(norm_logpdf(alpha) - log_z)
        rb = np.exp(norm_logpdf(beta) - log_z)
        a_ra = np.where(np.isfinite(alpha), alpha * ra, 0.0)
        b_rb = np.where(np.isfinite(beta), beta * rb, 0.0)
    ra = np.where(np.isfinite(alpha), ra, 0.0)
    rb = np.where(np.isfinite(beta), rb, 0.0)
    mean = m + s * (ra - rb)
    var = s * s * np.maximum(1.0 + a_ra - b_rb - (ra - rb) ** 2, 0.0)
    return mean, var, log_z


def huber_moments(delta, se2, tau2, k):
    """Posterior mean, variance and log marginal under a Huber prior, in closed form.

    The posterior is a mixture of three truncated normals: the core
    ``N(tau2 delta/(tau2+se2), tau2 se2/(tau2+se2))`` on ``[-k, k]`` and the
    tails ``N(delta -+ c se2, se2)`` on ``mu > k`` / ``mu < -k`` with
    ``c = k / tau2``.
    """
    delta = np.asarray(delta, dtype=float)
    se2 = np.asarray(se2, dtype=float)
    prior = Huber(tau2, k)
    sd = np.sqrt(se2)
    c = k / tau2
    m_core = tau2 * delta / (tau2 + se2)
    s_core = np.sqrt(tau2 * se2 / (tau2 + se2))
    mean_c, var_c, lz_c = _truncated_normal_moments(m_core, s_core, (-k - m_core) / s_core, (k - m_core) / s_core)
    m_r, m_l = delta - c * se2, delta + c * se2
    inf = np.full(np.shape(delta), np.inf)
    mean_r, var_r, lz_r = _truncated_normal_moments(m_r, sd, (k - m_r) / sd, inf)
    mean_l, var_l, lz_l = _truncated_normal_moments(m_l, sd, -inf, (-k - m_l) / sd)
    common = k * k / (2 * tau2) + 0.5 * c * c * se2
    logs = np.stack(np.broadcast_arrays(
        0.5 * np.log(2 * np.pi * tau2) + norm_logpdf(delta, tau2 + se2) + lz_c,
        common - c * delta + lz_r,
        common + c * delta + lz_l))
    log_tot = special.logsumexp(logs, axis=0)
    w = np.exp(logs - log_tot)
    means = np.stack(np.broadcast_arrays(mean_c, mean_r, mean_l))
    vars_ = np.stack(np.broadcast_arrays(var_c, var_r, var_l))
    # pieces with zero weight may carry non-finite moments
    means = np.where(w > 0, means, 0.0)
    vars_ = np.where(w > 0, vars_, 0.0)
    mean = (w * means).sum(axis=0)
    var = (w * (vars_ + (means - mean) ** 2)).sum(axis=0)
    return mean, var, log_tot - prior.log_norm


def posterior_huber(delta, se2, tau2, k):
    """Posterior ``(mean, var)`` under the Huber prior."""
    delta, se2 = _check_inputs(delta, se2)
    mean, var, _ = huber_moments(delta, se2, tau2, k)
    return _scalar(mean), _scalar(var)


# ---------------------------------------------------------------------------
# mixture and dispatch
# ---------------------------------------------------------------------------

def mixture_components(delta, se2, prior: Mixture):
    """Per-head log marginals and posterior moments.

    Returns a dict with ``log_m`` (3, n), ``q`` (3, n) responsibilities,
    ``mean_g``, ``var_g``, ``mean_l``, ``var_l`` and ``loglik``.
    """
    delta = np.asarray(delta, dtype=float)
    se2 = np.asarray(se2, dtype=float)
    mean_g, var_g, lg = gaussian_moments(delta, se2, prior.tau2)
    mean_l, var_l, ll = laplace_moments(delta, se2, prior.nu2)
    l0 = norm_logpdf(delta, se2)
    with np.errstate(divide="ignore"):
        logw = np.log(prior.weights)
    log_m = np.stack(np.broadcast_arrays(l0, lg, ll))
    joint = log_m + logw.reshape(3, *([1] * (log_m.ndim - 1)))
    loglik = special.logsumexp(joint, axis=0)
    q = np.exp(joint - loglik)
    return dict(log_m=log_m, q=q, mean_g=mean_g, var_g=var_g, mean_l=mean_l, var_l=var_l, loglik=loglik)


def mixture_moments(delta, se2, prior: Mixture):
    c = mixture_components(delta, se2, prior)
    q0, qg, ql = c["q"]
    mean = qg * c["mean_g"] + ql * c["mean_l"]
    var = (qg * c["var_g"] + ql * c["var_l"]
           + qg * c["mean_g"] ** 2 + ql * c["mean_l"] ** 2 - mean ** 2)
    return mean, np.maximum(var, 0.0), c["loglik"], c["q"]


def posterior_mixture(delta, se2, prior: Mixture, alpha=0.05) -> PosteriorSummary:
    """Posterior under the zero / Gaussian / Laplace mixture, variance capped at ``se2``."""
    delta, se2 = _check_inputs(delta, se2)
    if not isinstance(prior, Mixture):
        raise ValidationError("posterior_mixture needs a Mixture prior")
    mean, var, loglik, q = mixture_moments(float(delta), float(se2), prior)
    return summarize(mean, var, se2, alpha=alpha, component_posteriors=np.ravel(q), evidence=loglik)


def posterior_moments(prior: PriorModel, delta, se2):
    """Vectorized ``(mean, var_uncapped, loglik)`` for any prior.

    Closed forms where available, quadrature per element otherwise.
    """
    delta, se2 = _check_inputs(delta, se2)
    delta, se2 = np.broadcast_arrays(delta, se2)
    if isinstance(prior, Zero):
        return np.zeros_like(delta), np.zeros_like(delta), norm_logpdf(delta, se2)
    if isinstance(prior, Gaussian):
        return gaussian_moments(delta, se2, prior.tau2)
    if isinstance(prior, Laplace):
        return laplace_moments(delta, se2, prior.nu2)
    if isinstance(prior, Mixture):
        mean, var, loglik, _ = mixture_moments(delta, se2, prior)
        return mean, var, loglik
    if isinstance(prior, Huber):
        return huber_moments(delta, se2, prior.tau2, prior.k)
    if isinstance(prior, ZeroInflated) and isinstance(prior.base, (Gaussian, Laplace)):
        is_g = isinstance(prior.base, Gaussian)
        mix = Mixture(prior.p0, (1 - prior.p0) * is_g, (1 - prior.p0) * (not is_g),
                      prior.base.variance, prior.base.variance)
        mean, var, loglik, _ = mixture_moments(delta, se2, mix)
        return mean, var, loglik
    out = np.empty((3,) + delta.shape)
    for idx in np.ndindex(delta.shape):
        r = quadrature_for(prior, delta[idx], se2[idx])
        out[(slice(None),) + idx] = (r.mean, r.var, r.log_evidence)
    return out[0], out[1], out[2]


def posterior(prior: PriorModel, delta, se2, alpha=0.05, cap=True) -> PosteriorSummary:
    """Full :class:`PosteriorSummary` of a single readout under ``prior``."""
    if isinstance(prior, Mixture):
        s = posterior_mixture(delta, se2, prior, alpha=alpha)
        return s if cap else summarize(s.mean, s.variance_uncapped, se2, alpha, cap=False,
                                       component_posteriors=s.component_posteriors, evidence=s.evidence)
    mean, var, loglik = posterior_moments(prior, float(delta), float(se2))
    return summarize(mean, var, se2, alpha=alpha, cap=cap, evidence=loglik)


def marginal_loglik(prior: PriorModel, delta, se2):
    """Log density of ``delta`` after integrating ``mu`` out of the prior.

    Closed form for Zero, Gaussian, Laplace, Huber and Mixture priors;
    quadrature otherwise.  Values below ``-1e300`` are returned as
    ``-1e300`` with a ``RuntimeWarning`` rather than ``-inf``.
    """
    delta, se2 = _check_inputs(delta, se2)
    delta, se2 = np.broadcast_arrays(delta, se2)
    if isinstance(prior, Zero):
        out = norm_logpdf(delta, se2)
    elif isinstance(prior, Gaussian):
        out = norm_logpdf(delta, prior.tau2 + se2)
    elif isinstance(prior, Laplace):
        out = laplace_moments(delta, se2, prior.nu2)[2]
    elif isinstance(prior, Huber):
        out = huber_loglik(delta, se2, prior.tau2, prior.k)
    else:
        out = posterior_moments(prior, delta, se2)[2]
    out = np.asarray(out, dtype=float)
    if np.any(~np.isfinite(out)):
        import warnings
        warnings.warn("marginal log-likelihood underflowed; clamped to -1e300", RuntimeWarning, stacklevel=2)
        out = np.where(np.isfinite(out), out, LOG_FLOOR)
    return _scalar(out)
