"""
Experiment readouts, selection rules and the frequentist z-test summaries
shared by every estimator.
"""

from __future__ import annotations

import csv
import enum
import math
from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np
from scipy import special

READOUT_COLUMNS = ("experiment_id", "metric_id", "delta", "n_treat", "n_control", "sigma2_pooled")


class ValidationError(ValueError):
    """Bad user input: arguments, files, configuration."""


class ConfigurationError(ValidationError):
    """A model or command references something that was not supplied."""


class NumericalError(ArithmeticError):
    """A computation could not be carried out to the requested accuracy."""


def effective_sample_size(n_treat, n_control):
    """Harmonic combination ``(1/N_T + 1/N_C)^-1`` so that ``Var(delta) = sigma^2 / N``."""
    if n_treat <= 0 or n_control <= 0:
        raise ValidationError(f"sample sizes must be positive, got {n_treat}, {n_control}")
    return 1.0 / (1.0 / n_treat + 1.0 / n_control)


def norm_cdf(x):
    return special.ndtr(x)


def norm_sf(x):
    return special.ndtr(-np.asarray(x, dtype=float))


def log_norm_cdf(x):
    # scipy's log_ndtr uses an asymptotic series in the far left tail
    return special.log_ndtr(x)


def norm_logpdf(x, var=1.0):
    x = np.asarray(x, dtype=float)
    return -0.5 * x * x / var - 0.5 * np.log(2.0 * np.pi * var)


def z_quantile(alpha):
    """Two-sided critical value ``z_{alpha/2}``."""
    return float(special.ndtri(1.0 - alpha / 2.0))


def two_sided_p(delta, se):
    """``2 (1 - Phi(|delta| / se))``, computed through the survival function."""
    se = np.asarray(se, dtype=float)
    if np.any(se <= 0):
        raise ValidationError("standard error must be positive")
    z = np.abs(np.asarray(delta, dtype=float)) / se
    p = 2.0 * special.ndtr(-z)
    return float(p) if np.ndim(p) == 0 else p


@dataclass(frozen=True)
class ExperimentReadout:
    experiment_id: str
    metric_id: str
    delta: float
    n_treat: int
    n_control: int
    sigma2_pooled: float

    def __post_init__(self):
        if not math.isfinite(self.delta):
            raise ValidationError(f"{self.experiment_id}: delta must be finite")
        if self.n_treat < 1 or self.n_control < 1:
            raise ValidationError(f"{self.experiment_id}: sample sizes must be >= 1")
        if not (self.sigma2_pooled > 0 and math.isfinite(self.sigma2_pooled)):
            raise ValidationError(f"{self.experiment_id}: sigma2_pooled must be positive and finite")

    @property
    def effective_n(self) -> float:
        return effective_sample_size(self.n_treat, self.n_control)

    @property
    def se2(self) -> float:
        return self.sigma2_pooled / self.effective_n

    @property
    def se(self) -> float:
        return math.sqrt(self.se2)

    @property
    def p_value(self) -> float:
        return two_sided_p(self.delta, self.se)


class SelectionKind(enum.Enum):
    ALL = "all"
    P_VALUE_BELOW = "p_below"
    ABS_DELTA_ABOVE = "abs_delta_above"


@dataclass(frozen=True)
class SelectionRule:
    """Two-sided selection on the observed delta.

    Use the constructors :meth:`all`, :meth:`p_below` and :meth:`abs_delta_above`.
    """

    kind: SelectionKind
    value: float | None = None

    @classmethod
    def all(cls):
        return cls(SelectionKind.ALL)

    @classmethod
    def p_below(cls, threshold):
        if not 0 < threshold <= 1:
            raise ValidationError(f"p-value threshold must lie in (0, 1], got {threshold}")
        return cls(SelectionKind.P_VALUE_BELOW, float(threshold))

    @classmethod
    def abs_delta_above(cls, k):
        if not k > 0:
            raise ValidationError(f"K must be positive, got {k}")
        return cls(SelectionKind.ABS_DELTA_ABOVE, float(k))

    @property
    def label(self) -> str:
        if self.kind is SelectionKind.ALL:
            return "All"
        if self.kind is SelectionKind.P_VALUE_BELOW:
            return "All" if self.value >= 1.0 else f"p<{self.value:g}"
        return f"|d|>{self.value:g}"

    def mask(self, delta, se2):
        """Boolean selection mask over arrays of deltas and noise variances."""
        delta = np.asarray(delta, dtype=float)
        if self.kind is SelectionKind.ALL:
            return np.ones(delta.shape, dtype=bool)
        if self.kind is SelectionKind.ABS_DELTA_ABOVE:
            return np.abs(delta) > self.value
        if self.value >= 1.0:
            return np.ones(delta.shape, dtype=bool)
        return np.asarray(two_sided_p(delta, np.sqrt(se2))) < self.value


def apply_selection(readouts: Sequence[ExperimentReadout], rule: SelectionRule) -> list[ExperimentReadout]:
    """Stable-ordered subset of ``readouts`` passing ``rule``."""
    readouts = list(readouts)
    if rule.kind is SelectionKind.ALL or not readouts:
        return readouts
    delta = np.array([r.delta for r in readouts])
    se2 = np.array([r.se2 for r in readouts])
    keep = rule.mask(delta, se2)
    return [r for r, k in zip(readouts, keep) if k]


def readout_arrays(readouts: Iterable[ExperimentReadout]):
    """Return ``(delta, se2)`` float arrays."""
    readouts = list(readouts)
    return (np.array([r.delta for r in readouts], dtype=float),
            np.array([r.se2 for r in readouts], dtype=float))


def _parse_float(text, what, where):
    try:
        value = float(text)
    except (TypeError, ValueError):
        raise ValidationError(f"{where}: cannot parse {what} from {text!r}") from None
    if not math.isfinite(value):
        raise ValidationError(f"{where}: {what} must be finite")
    return value


def _parse_int(text, what, where):
    value = _parse_float(text, what, where)
    if value != int(value):
        raise ValidationError(f"{where}: {what} must be an integer, got {text!r}")
    return int(value)


def read_readouts(path) -> list[ExperimentReadout]:
    """Parse a readout CSV (header required, see ``READOUT_COLUMNS``)."""
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        missing = [c for c in READOUT_COLUMNS if c not in (reader.fieldnames or [])]
        if missing:
            raise ValidationError(f"{path}: missing columns {missing}")
        out = []
        for lineno, row in enumerate(reader, start=2):
            where = f"{path}:{lineno}"
            out.append(ExperimentReadout(
                experiment_id=row["experiment_id"],
                metric_id=row["metric_id"],
                delta=_parse_float(row["delta"], "delta", where),
                n_treat=_parse_int(row["n_treat"], "n_treat", where),
                n_control=_parse_int(row["n_control"], "n_control", where),
                sigma2_pooled=_parse_float(row["sigma2_pooled"], "sigma2_pooled", where),
            ))
    return out


def write_readouts(path, readouts: Iterable[ExperimentReadout]):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(READOUT_COLUMNS)
        for r in readouts:
            writer.writerow([r.experiment_id, r.metric_id, fmt(r.delta), r.n_treat, r.n_control,
                             fmt(r.sigma2_pooled)])


def fmt(x, digits=9) -> str:
    """Numeric output format used by every writer."""
    return format(float(x), f".{digits}g")
