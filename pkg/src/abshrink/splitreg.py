"""
Regression with experiment splitting.

Every training experiment is observed as two independent halves.  A model
fitted to predict ``delta_b`` from split-A quantities predicts ``E(mu | A)``
because ``delta_b`` is an unbiased replicate.  The theory-assisted variant
(TARwES) feeds empirical-Bayes posterior means as regression features; the
features are evaluated at the split-A noise variance during training and at
the full-traffic variance when predicting, which is how the model scales up
to the full sample size.

Models never have an intercept and are trained on sign-mirrored data, so
their predictions are odd in ``delta``.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Mapping, Sequence

import numpy as np

from .core import (
    ConfigurationError,
    ExperimentReadout,
    NumericalError,
    ValidationError,
    fmt,
)
from .posteriors import (
    PosteriorSummary,
    PriorModel,
    parse_kv,
    posterior_moments,
    prior_from_dict,
    prior_to_dict,
    summarize,
)

EB_KINDS = ("eb_gaussian", "eb_laplace", "eb_ghidorah")
FEATURE_KINDS = ("raw_delta",) + EB_KINDS + ("aux_raw", "aux_eb")
SECOND_MOMENT_KINDS = ("abs_delta", "sq_delta", "se2", "eb_mean_sq", "eb_m2")


@dataclass(frozen=True)
class SplitPair:
    experiment_id: str
    delta_a: float
    se2_a: float
    delta_b: float
    se2_b: float
    full_se2: float
    aux: Mapping = field(default_factory=dict)

    def __post_init__(self):
        if not (self.se2_a > 0 and self.se2_b > 0 and self.full_se2 > 0):
            raise ValidationError(f"{self.experiment_id}: variances must be positive")
        slack = 1e-9 * self.full_se2
        if self.se2_a < self.full_se2 - slack or self.se2_b < self.full_se2 - slack:
            raise ValidationError(f"{self.experiment_id}: split variances cannot be below the full-traffic variance")

    def mirrored(self) -> "SplitPair":
        aux = {k: (-d, s) for k, (d, s) in self.aux.items()}
        return replace(self, delta_a=-self.delta_a, delta_b=-self.delta_b, aux=aux)


@dataclass(frozen=True)
class Feature:
    """One regression input.

    ``prior`` names an entry of the model's fitted priors; ``metric`` names
    an auxiliary metric.  String form: ``kind[:metric][:prior]``.
    """

    kind: str
    prior: str | None = None
    metric: str | None = None

    def __post_init__(self):
        if self.kind not in FEATURE_KINDS + SECOND_MOMENT_KINDS:
            raise ValidationError(f"unknown feature kind {self.kind!r}")
        if self.kind in EB_KINDS + ("aux_eb", "eb_mean_sq", "eb_m2") and not self.prior:
            raise ValidationError(f"feature {self.kind} needs a prior name")
        if self.kind.startswith("aux") and not self.metric:
            raise ValidationError(f"feature {self.kind} needs a metric name")

    @property
    def tag(self) -> str:
        return ":".join(x for x in (self.kind, self.metric, self.prior) if x)

    @classmethod
    def parse(cls, tag: str) -> "Feature":
        parts = tag.strip().split(":")
        kind = parts[0]
        if kind == "aux_raw":
            return cls(kind, metric=parts[1] if len(parts) > 1 else None)
        if kind == "aux_eb":
            return cls(kind, metric=parts[1] if len(parts) > 1 else None, prior=parts[2] if len(parts) > 2 else None)
        return cls(kind, prior=parts[1] if len(parts) > 1 else None)


def raw_delta():
    return Feature("raw_delta")


def eb(kind, prior_name=None):
    """``eb('gaussian')`` -> ``Feature('eb_gaussian', prior='gaussian')``."""
    return Feature(f"eb_{kind}", prior=prior_name or kind)


DEFAULT_SPEC = (raw_delta(), eb("gaussian"), eb("laplace"))
PLUS_SPEC = DEFAULT_SPEC + (eb("ghidorah"),)


def aux_spec(metric, prior_name="laplace"):
    return (Feature("aux_raw", metric=metric), Feature("aux_eb", prior=prior_name, metric=metric))


def _prior(priors, name):
    try:
        return priors[name]
    except KeyError:
        raise ConfigurationError(f"feature references prior {name!r} which was not supplied") from None


def _aux(aux, metric):
    if aux is None or metric not in aux:
        raise ConfigurationError(f"feature references auxiliary metric {metric!r} which was not supplied")
    d, s = aux[metric]
    return np.asarray(d, dtype=float), np.asarray(s, dtype=float)


def make_features(delta, se2, spec: Sequence[Feature], fitted_priors: Mapping[str, PriorModel], aux=None):
    """Evaluate ``spec`` at the given noise variance.

    ``delta`` and ``se2`` may be arrays of shape (n,), giving an (n, p)
    matrix; scalars give a length-p vector.  ``aux`` maps metric name to a
    ``(delta, se2)`` pair of the same shape.
    """
    scalar = np.ndim(delta) == 0
    delta = np.atleast_1d(np.asarray(delta, dtype=float))
    se2 = np.broadcast_to(np.asarray(se2, dtype=float), delta.shape)
    cols = []
    for f in spec:
        if f.kind == "raw_delta":
            cols.append(delta)
        elif f.kind in EB_KINDS:
            cols.append(posterior_moments(_prior(fitted_priors, f.prior), delta, se2)[0])
        elif f.kind == "aux_raw":
            cols.append(np.atleast_1d(_aux(aux, f.metric)[0]))
        elif f.kind == "aux_eb":
            d, s = _aux(aux, f.metric)
            cols.append(np.atleast_1d(posterior_moments(_prior(fitted_priors, f.prior), d, s)[0]))
        elif f.kind == "abs_delta":
            cols.append(np.abs(delta))
        elif f.kind == "sq_delta":
            cols.append(delta * delta)
        elif f.kind == "eb_mean_sq":
            cols.append(posterior_moments(_prior(fitted_priors, f.prior), delta, se2)[0] ** 2)
        elif f.kind == "se2":
            cols.append(np.array(se2, dtype=float))
        else:  # eb_m2: posterior second moment var + mean^2
            m, v, _ = posterior_moments(_prior(fitted_priors, f.prior), delta, se2)
            cols.append(v + m * m)
    X = np.column_stack(cols) if cols else np.zeros((delta.size, 0))
    return X[0] if scalar else X


# ---------------------------------------------------------------------------
# solvers
# ---------------------------------------------------------------------------

def ridge_fit(X, y, lam):
    """Solve ``(X'X + lam I) beta = X'y`` through least squares on the augmented system."""
    X = np.asarray(X, dtype=float)
    y = np.asarray(y, dtype=float)
    if X.ndim != 2 or X.shape[0] != y.shape[0]:
        raise ValidationError(f"shape mismatch: X {X.shape}, y {y.shape}")
    if lam < 0:
        raise ValidationError("lambda must be nonnegative")
    p = X.shape[1]
    if lam == 0:
        if np.linalg.matrix_rank(X) < p:
            raise NumericalError("design matrix is rank deficient; use a ridge penalty lambda > 0")
        A, b = X, y
    else:
        A = np.vstack([X, np.sqrt(lam) * np.eye(p)])
        b = np.concatenate([y, np.zeros(p)])
    beta, *_ = np.linalg.lstsq(A, b, rcond=None)
    return beta


def nnls_kkt_residual(X, y, beta):
    """Largest violation of the NNLS optimality conditions at ``beta``."""
    grad = X.T @ (y - X @ beta)
    pos = beta > 0
    parts = [np.abs(grad[pos]), np.maximum(grad[~pos], 0.0), np.maximum(-beta, 0.0)]
    return float(max((p.max() if p.size else 0.0) for p in parts))


def nnls_fit(X, y, max_iter=10_000, tol=None):
    """Non-negative least squares by the Lawson-Hanson active-set method."""
    X = np.asarray(X, dtype=float)
    y = np.asarray(y, dtype=float)
    m, n = X.shape
    if y.shape != (m,):
        raise ValidationError(f"shape mismatch: X {X.shape}, y {y.shape}")
    if tol is None:
        tol = 10 * np.finfo(float).eps * max(m, n) * max(1.0, np.linalg.norm(X, 1) * np.linalg.norm(y, np.inf))
    x = np.zeros(n)
    passive = np.zeros(n, dtype=bool)
    w = X.T @ y
    it = 0
    while (~passive).any() and w[~passive].max() > tol:
        j = np.flatnonzero(~passive)[np.argmax(w[~passive])]
        passive[j] = True
        while True:
            it += 1
            if it > max_iter:
                raise NumericalError(f"NNLS exceeded {max_iter} iterations; "
                                     f"KKT residual {nnls_kkt_residual(X, y, x):.3g}")
            z = np.zeros(n)
            z[passive] = np.linalg.lstsq(X[:, passive], y, rcond=None)[0]
            if (z[passive] > 0).all():
                x = z
                break
            bad = passive & (z <= 0)
            alpha = np.min(x[bad] / (x[bad] - z[bad]))
            x = x + alpha * (z - x)
            passive &= x > tol
            x[~passive] = 0.0
        w = X.T @ (y - X @ x)
    return x


@dataclass(frozen=True)
class Regularizer:
    kind: str = "ridge"
    lam: float | None = None  # None: 1e-4 * trace(X'X) / p

    def __post_init__(self):
        if self.kind not in ("ridge", "nnls", "ols"):
            raise ValidationError(f"unknown regularizer {self.kind!r}")

    def fit(self, X, y):
        if self.kind == "nnls":
            return nnls_fit(X, y), None
        if self.kind == "ols":
            return ridge_fit(X, y, 0.0), 0.0
        lam = self.lam
        if lam is None:
            lam = 1e-4 * float(np.einsum("ij,ij->", X, X)) / max(X.shape[1], 1)
        return ridge_fit(X, y, lam), lam


# ---------------------------------------------------------------------------
# models
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class SecondMomentModel:
    features: tuple
    coefficients: np.ndarray
    regularizer: Regularizer

    def predict(self, delta, se2, fitted_priors, aux=None):
        return make_features(delta, se2, self.features, fitted_priors, aux) @ self.coefficients


@dataclass(frozen=True)
class TarwesModel:
    features: tuple
    coefficients: np.ndarray
    regularizer: Regularizer
    fitted_priors: Mapping = field(default_factory=dict)
    second_moment: SecondMomentModel | None = None
    lam_used: float | None = None

    def predict_mean(self, delta, se2, aux=None):
        return make_features(delta, se2, self.features, self.fitted_priors, aux) @ self.coefficients

    def predict_variance(self, delta, se2, aux=None):
        """Posterior variance: ``se2`` unless a second-moment model is attached."""
        se2 = np.broadcast_to(np.asarray(se2, dtype=float), np.shape(delta))
        if self.second_moment is None:
            return np.array(se2, dtype=float)
        m2 = self.second_moment.predict(delta, se2, self.fitted_priors, aux)
        mean = self.predict_mean(delta, se2, aux)
        return np.clip(m2 - mean * mean, 1e-12 * se2, se2)

    def to_text(self) -> str:
        lines = {
            "kind": "tarwes",
            "features": ";".join(f.tag for f in self.features),
            "coef": ",".join(format(c, ".17g") for c in self.coefficients),
            "regularizer": self.regularizer.kind,
        }
        if self.regularizer.lam is not None:
            lines["lambda"] = format(self.regularizer.lam, ".17g")
        if self.second_moment is not None:
            sm = self.second_moment
            lines["sm.features"] = ";".join(f.tag for f in sm.features)
            lines["sm.coef"] = ",".join(format(c, ".17g") for c in sm.coefficients)
            lines["sm.regularizer"] = sm.regularizer.kind
        for name, prior in self.fitted_priors.items():
            lines.update(prior_to_dict(prior, prefix=f"prior.{name}."))
        return "".join(f"{k}={v}\n" for k, v in lines.items())

    @classmethod
    def from_text(cls, text: str) -> "TarwesModel":
        kv = parse_kv(text)
        if kv.get("kind") != "tarwes":
            raise ValidationError("not a TARwES model file")
        names = {k.split(".")[1] for k in kv if k.startswith("prior.")}
        priors = {n: prior_from_dict(kv, prefix=f"prior.{n}.") for n in sorted(names)}
        feats = tuple(Feature.parse(t) for t in kv["features"].split(";") if t)
        coef = np.array([float(c) for c in kv["coef"].split(",")])
        if coef.size != len(feats):
            raise ValidationError("coefficient count does not match feature count")
        lam = float(kv["lambda"]) if "lambda" in kv else None
        sm = None
        if "sm.features" in kv:
            sm = SecondMomentModel(tuple(Feature.parse(t) for t in kv["sm.features"].split(";") if t),
                                   np.array([float(c) for c in kv["sm.coef"].split(",")]),
                                   Regularizer(kv.get("sm.regularizer", "ridge")))
        return cls(feats, coef, Regularizer(kv.get("regularizer", "ridge"), lam), priors, sm)


def symmetrize(pairs: Sequence[SplitPair]) -> list[SplitPair]:
    """Original pairs followed by their sign-flipped copies."""
    pairs = list(pairs)
    return pairs + [p.mirrored() for p in pairs]


def _split_arrays(pairs):
    pairs = list(pairs)
    da = np.array([p.delta_a for p in pairs], dtype=float)
    sa = np.array([p.se2_a for p in pairs], dtype=float)
    db = np.array([p.delta_b for p in pairs], dtype=float)
    sb = np.array([p.se2_b for p in pairs], dtype=float)
    metrics = set()
    for p in pairs:
        metrics.update(p.aux)
    aux = {m: (np.array([p.aux[m][0] if m in p.aux else np.nan for p in pairs]),
               np.array([p.aux[m][1] if m in p.aux else np.nan for p in pairs])) for m in metrics}
    return da, sa, db, sb, aux


def _design(pairs, spec, priors):
    da, sa, db, sb, aux = _split_arrays(symmetrize(pairs))
    return make_features(da, sa, spec, priors, aux), db, sb


def train_rwes_linear(pairs: Sequence[SplitPair]) -> TarwesModel:
    """Intercept-free least squares of ``delta_b`` on ``delta_a`` over mirrored pairs."""
    pairs = list(pairs)
    if len(pairs) < 2:
        raise ValidationError("need at least 2 split pairs")
    X, y, _ = _design(pairs, (raw_delta(),), {})
    if not np.any(X):
        raise ValidationError("all split-A deltas are zero; the slope is undefined")
    beta = ridge_fit(X, y, 0.0)
    return TarwesModel((raw_delta(),), beta, Regularizer("ols"), {}, lam_used=0.0)


def train_tarwes(pairs: Sequence[SplitPair], spec: Sequence[Feature] = DEFAULT_SPEC,
                 fitted_priors: Mapping[str, PriorModel] | None = None,
                 regularizer: Regularizer | str = "ridge") -> TarwesModel:
    """Fit the theory-assisted regression of ``delta_b`` on EB features of split A.

    ``fitted_priors`` must already be fitted (on full-traffic readouts) and
    cover every prior named in ``spec``.
    """
    pairs = list(pairs)
    spec = tuple(spec)
    priors = dict(fitted_priors or {})
    if isinstance(regularizer, str):
        regularizer = Regularizer(regularizer)
    if len(pairs) < max(len(spec), 2):
        raise ValidationError(f"need at least {max(len(spec), 2)} split pairs, got {len(pairs)}")
    X, y, _ = _design(pairs, spec, priors)
    beta, lam = regularizer.fit(X, y)
    return TarwesModel(spec, beta, regularizer, priors, lam_used=lam)


def default_second_moment_spec(fitted_priors: Mapping[str, PriorModel]):
    return (Feature("sq_delta"), Feature("se2")) + tuple(Feature("eb_m2", prior=n) for n in fitted_priors)


def train_second_moment(pairs: Sequence[SplitPair], spec: Sequence[Feature] | None = None,
                        fitted_priors: Mapping[str, PriorModel] | None = None,
                        regularizer: Regularizer | str = "nnls") -> SecondMomentModel:
    """Regress ``delta_b**2 - se2_b`` (an unbiased target for ``E(mu^2 | A)``) on even features."""
    priors = dict(fitted_priors or {})
    spec = tuple(spec) if spec is not None else default_second_moment_spec(priors)
    if isinstance(regularizer, str):
        regularizer = Regularizer(regularizer)
    pairs = list(pairs)
    if len(pairs) < max(len(spec), 2):
        raise ValidationError("not enough split pairs for the second-moment model")
    X, db, sb = _design(pairs, spec, priors)
    beta, _ = regularizer.fit(X, db * db - sb)
    return SecondMomentModel(spec, beta, regularizer)


def predict_tarwes(model: TarwesModel, readout: ExperimentReadout, alpha=0.05, aux=None) -> PosteriorSummary:
    """Adjusted summary of a full-traffic readout; features use its full ``se2``."""
    se2 = readout.se2
    mean = float(model.predict_mean(readout.delta, se2, aux))
    var = float(model.predict_variance(np.float64(readout.delta), se2, aux))
    return summarize(mean, var, se2, alpha=alpha)


def read_pairs(path) -> list[SplitPair]:
    """Parse a split-pair CSV; extra ``aux_<metric>`` / ``aux_<metric>_se2`` columns become aux data."""
    import csv

    need = ("experiment_id", "delta_a", "se2_a", "delta_b", "se2_b", "full_se2")
    out = []
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        cols = reader.fieldnames or []
        missing = [c for c in need if c not in cols]
        if missing:
            raise ValidationError(f"{path}: missing columns {missing}")
        aux_names = [c[4:] for c in cols if c.startswith("aux_") and not c.endswith("_se2")]
        for lineno, row in enumerate(reader, start=2):
            try:
                vals = {c: float(row[c]) for c in need[1:]}
                aux = {m: (float(row[f"aux_{m}"]), float(row.get(f"aux_{m}_se2") or vals["se2_a"]))
                       for m in aux_names if row.get(f"aux_{m}") not in (None, "")}
            except (TypeError, ValueError) as exc:
                raise ValidationError(f"{path}:{lineno}: {exc}") from None
            if not all(np.isfinite(list(vals.values()))):
                raise ValidationError(f"{path}:{lineno}: non-finite value")
            out.append(SplitPair(row["experiment_id"], aux=aux, **vals))
    return out


def write_pairs(path, pairs: Sequence[SplitPair]):
    import csv

    pairs = list(pairs)
    metrics = sorted({m for p in pairs for m in p.aux})
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["experiment_id", "delta_a", "se2_a", "delta_b", "se2_b", "full_se2"]
                   + [c for m in metrics for c in (f"aux_{m}", f"aux_{m}_se2")])
        for p in pairs:
            row = [p.experiment_id, fmt(p.delta_a), fmt(p.se2_a), fmt(p.delta_b), fmt(p.se2_b), fmt(p.full_se2)]
            for m in metrics:
                row += [fmt(p.aux[m][0]), fmt(p.aux[m][1])] if m in p.aux else ["", ""]
            w.writerow(row)
