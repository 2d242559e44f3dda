"""
Training-free adjustment from a bound on the Bayes factor.

For a two-sided p-value ``z < 1/e`` the Bayes factor in favour of the null
against any local alternative is at least ``B(z) = -e z log z``; for
``z >= 1/e`` the bound is taken as 1.  With prior odds ``p / (1 - p)`` for a
real effect this caps the posterior probability of a real effect at

    q = O / (1 + O),   O = odds / B(z)

and the readout is summarized as if ``mean = q delta`` and
``var = q se2 + q^3 (1 - q) delta^2`` (capped at ``se2``).
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .core import ExperimentReadout, ValidationError, two_sided_p
from .posteriors import PosteriorSummary, summarize

INV_E = math.exp(-1.0)


@dataclass(frozen=True)
class PriorOdds:
    """Prior probability of a real effect."""

    p_h1: float = 0.5

    def __post_init__(self):
        if not 0 < self.p_h1 < 1:
            raise ValidationError(f"p_h1 must lie in (0, 1), got {self.p_h1}")

    @property
    def odds(self) -> float:
        return self.p_h1 / (1.0 - self.p_h1)

    @classmethod
    def parse(cls, text: str) -> "PriorOdds":
        """``'a:b'`` means odds ``a`` to ``b`` in favour of a real effect; a bare number is ``p_h1``."""
        try:
            if ":" in text:
                a, b = (float(x) for x in text.split(":", 1))
                if not (a > 0 and b > 0):
                    raise ValueError
                return cls(a / (a + b))
            return cls(float(text))
        except ValueError:
            raise ValidationError(f"cannot parse prior odds {text!r}; expected a:b") from None


def bayes_factor_bound(z):
    """``-e z log z`` on ``(0, 1/e)``, 1 on ``[1/e, 1]``."""
    z = np.asarray(z, dtype=float)
    if np.any((z <= 0) | (z > 1) | ~np.isfinite(z)):
        raise ValidationError("p-value must lie in (0, 1]")
    with np.errstate(divide="ignore", invalid="ignore"):
        b = np.where(z < INV_E, -math.e * z * np.log(z), 1.0)
    b = np.minimum(b, 1.0)
    return float(b) if b.ndim == 0 else b


def h1_posterior_bound(z, odds: PriorOdds = PriorOdds()):
    """Upper bound on ``P(H1 | data)`` given the p-value ``z``."""
    b = bayes_factor_bound(z)
    post = odds.odds / np.asarray(b, dtype=float)
    q = np.where(np.isinf(post), 1.0, post / (1.0 + post))
    return float(q) if q.ndim == 0 else q


def localh1_moments(delta, se2, odds: PriorOdds = PriorOdds()):
    """Vectorized ``(mean, var_uncapped)`` bounds."""
    delta = np.asarray(delta, dtype=float)
    se2 = np.asarray(se2, dtype=float)
    z = np.maximum(two_sided_p(delta, np.sqrt(se2)), np.finfo(float).tiny)
    q = np.asarray(h1_posterior_bound(z, odds))
    return q * delta, q * se2 + q ** 3 * (1 - q) * delta ** 2


def localh1_estimate(readout: ExperimentReadout, odds: PriorOdds = PriorOdds(), alpha=0.05) -> PosteriorSummary:
    mean, var = localh1_moments(readout.delta, readout.se2, odds)
    return summarize(float(mean), float(var), readout.se2, alpha=alpha)
