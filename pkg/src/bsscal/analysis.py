"""Posterior prediction, discrepancy effects, sensitivity, cross-validation
and posterior summaries."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .basis import ModelCatalog
from .errors import ValidationError
from .mcmc import Chain, ChainConfig, FactoredDesign, run_chain
from .model import (
    Dataset,
    DiscretePrior,
    OutputTransform,
    PriorSpec,
    ScaledBeta,
    UniformPrior,
    scale_columns,
)


def _quantiles(draws, level):
    lo, hi = 0.5 * (1.0 - level), 0.5 * (1.0 + level)
    q = np.quantile(draws, [lo, hi], axis=0)
    return q[0], q[1]


def _realization_index(n_samples, n_realizations):
    if n_realizations <= 0 or n_samples == 0:
        return np.zeros(0, dtype=int)
    if n_realizations > n_samples:
        return np.arange(n_realizations) % n_samples
    # spacing is at least one sample, so rounding keeps the indices distinct
    return np.linspace(0, n_samples - 1, n_realizations).round().astype(int)


# --------------------------------------------------------------------------
# prediction
# --------------------------------------------------------------------------

@dataclass(eq=False)
class PredictionResult:
    """Posterior predictions on original output units.

    ``*_draws`` hold the requested realizations, shape (R, n_points, C).
    ``zeta_*`` (emulator plus discrepancy) are None when not requested.
    """

    x: np.ndarray
    t: np.ndarray | None
    output_names: tuple
    level: float
    eta_mean: np.ndarray
    eta_lower: np.ndarray
    eta_upper: np.ndarray
    eta_draws: np.ndarray
    zeta_mean: np.ndarray | None = None
    zeta_lower: np.ndarray | None = None
    zeta_upper: np.ndarray | None = None
    zeta_draws: np.ndarray | None = None

    @property
    def n_points(self):
        return self.x.shape[0]

    def mean(self, with_discrepancy=True):
        return self.zeta_mean if with_discrepancy and self.zeta_mean is not None else self.eta_mean


def _point_matrix(values, specs, label):
    values = np.atleast_2d(np.asarray(values, dtype=float))
    if values.shape[1] != len(specs):
        values = values.reshape(-1, len(specs))
    return values, scale_columns(values, specs, label)


def emulator_draws(chain: Chain, x, t=None, samples=None):
    """Emulator values (transformed scale) for each sample: (S, n, C).

    ``t`` (native units) fixes the parameters for every sample; by default
    each sample is evaluated at its own theta.
    """
    cat = chain.catalog
    x_nat, x_unit = _point_matrix(x, cat.inputs, "prediction")
    samples = np.arange(chain.n_samples) if samples is None else np.asarray(samples)
    B = chain.B[samples]
    if t is None:
        design = FactoredDesign(cat.emulator_evaluator(), cat.n_inputs, x_unit)
        tf = design.theta_factors(chain.theta[samples])
        return np.einsum("nb,sb,sbc->snc", design.xmatrix(), tf, B, optimize=True)
    t_nat = np.atleast_2d(np.asarray(t, dtype=float))
    if t_nat.shape[0] == 1 and x_nat.shape[0] > 1:
        t_nat = np.repeat(t_nat, x_nat.shape[0], axis=0)
    _, t_unit = _point_matrix(t_nat, cat.parameters, "prediction")
    phi = cat.emulator_evaluator().matrix(np.hstack([x_unit, t_unit]))
    return np.einsum("nb,sbc->snc", phi, B, optimize=True)


def discrepancy_draws(chain: Chain, x, samples=None):
    cat = chain.catalog
    _, x_unit = _point_matrix(x, cat.inputs, "prediction")
    samples = np.arange(chain.n_samples) if samples is None else np.asarray(samples)
    psi = cat.discrepancy_evaluator().matrix(x_unit)
    return np.einsum("nb,sbc->snc", psi, chain.C[samples], optimize=True)


def predict(chain: Chain, x, t=None, with_discrepancy=True, n_realizations=50, level=0.95):
    """Posterior mean, pointwise equal-tailed band and realizations.

    Each draw is inverse-transformed before summarizing.
    """
    if chain.n_samples == 0:
        raise ValidationError("chain has no recorded samples")
    x_nat = np.atleast_2d(np.asarray(x, dtype=float)).reshape(-1, chain.catalog.n_inputs)
    eta = emulator_draws(chain, x_nat, t)
    pick = _realization_index(chain.n_samples, n_realizations)
    inv = chain.transform.inverse
    eta_nat = inv(eta)
    lo, hi = _quantiles(eta_nat, level)
    out = PredictionResult(
        x=x_nat,
        t=None if t is None else np.atleast_2d(np.asarray(t, dtype=float)),
        output_names=chain.output_names,
        level=level,
        eta_mean=eta_nat.mean(axis=0),
        eta_lower=lo,
        eta_upper=hi,
        eta_draws=eta_nat[pick],
    )
    if with_discrepancy:
        zeta_nat = inv(eta + discrepancy_draws(chain, x_nat))
        lo, hi = _quantiles(zeta_nat, level)
        out.zeta_mean = zeta_nat.mean(axis=0)
        out.zeta_lower, out.zeta_upper = lo, hi
        out.zeta_draws = zeta_nat[pick]
    return out


# --------------------------------------------------------------------------
# discrepancy main effects
# --------------------------------------------------------------------------

@dataclass(eq=False)
class EffectCurve:
    input_name: str
    output_name: str
    grid: np.ndarray
    mean: np.ndarray
    lower: np.ndarray
    upper: np.ndarray

    @property
    def significant(self):
        """Grid mask where the band excludes zero."""
        return (self.lower > 0) | (self.upper < 0)


def discrepancy_effects(chain: Chain, grid=50, level=0.95):
    """Main-effect curves of the discrepancy for every input and output.

    Curves are on the transformed output scale (an additive component has
    no meaning after a nonlinear inverse transform).  ``grid`` is a point
    count for continuous inputs or a dict name -> native grid values.
    """
    if chain.n_samples == 0:
        raise ValidationError("chain has no recorded samples")
    cat = chain.catalog
    disc = cat.discrepancy_evaluator()
    curves = []
    starts = disc.col_offsets
    for p, spec in enumerate(cat.inputs):
        if isinstance(grid, dict) and spec.name in grid:
            g = np.asarray(grid[spec.name], dtype=float)
        elif spec.is_categorical:
            g = np.arange(1, spec.n_levels + 1, dtype=float)
        else:
            n = grid if isinstance(grid, int) else 50
            g = np.linspace(spec.lo, spec.hi, n)
        unit = scale_columns(g[:, None], [spec])[:, 0]
        total = np.zeros((chain.n_samples, len(g), chain.C.shape[2]))
        for k, comp in enumerate(cat.discrepancy):
            if comp.kind != "main" or comp.variables != (p,):
                continue
            pts = np.full((len(g), cat.n_inputs), 0.5)
            for q, other in enumerate(cat.inputs):
                if other.is_categorical:
                    pts[:, q] = 1.0
            pts[:, p] = unit
            block = disc.block(k, disc.variable_columns(pts))
            coef = chain.C[:, starts[k] : starts[k + 1], :]
            total += np.einsum("nb,sbc->snc", block, coef, optimize=True)
        lo, hi = _quantiles(total, level)
        mean = total.mean(axis=0)
        for c, name in enumerate(chain.output_names):
            curves.append(EffectCurve(spec.name, name, g, mean[:, c], lo[:, c], hi[:, c]))
    return curves


# --------------------------------------------------------------------------
# sensitivity
# --------------------------------------------------------------------------

@dataclass(eq=False)
class SensitivityResult:
    """Total-effect indices ``T[location, output, parameter]``."""

    x: np.ndarray
    parameter_names: tuple
    output_names: tuple
    T: np.ndarray
    n_mc: int
    negative: list = field(default_factory=list)
    mc_tolerance: float = float("nan")

    def rows(self):
        for i in range(self.T.shape[0]):
            for c, out in enumerate(self.output_names):
                for q, par in enumerate(self.parameter_names):
                    yield i, self.x[i], out, par, float(self.T[i, c, q])


def sample_prior_matrix(priors: PriorSpec, catalog: ModelCatalog, n, rng):
    """``n`` prior draws of theta on the unit scale (levels for categorical)."""
    out = np.empty((n, catalog.n_params))
    for q, (spec, prior) in enumerate(zip(catalog.parameters, priors.theta)):
        if isinstance(prior, DiscretePrior):
            out[:, q] = rng.choice(len(prior.weights), size=n, p=prior.weights) + 1.0
        elif isinstance(prior, ScaledBeta):
            v = prior.lo + (prior.hi - prior.lo) * rng.beta(prior.a, prior.b, size=n)
            out[:, q] = (v - spec.lo) / (spec.hi - spec.lo)
        elif isinstance(prior, UniformPrior):
            v = rng.uniform(prior.lo, prior.hi, size=n)
            out[:, q] = (v - spec.lo) / (spec.hi - spec.lo)
        else:
            raise ValidationError(f"unsupported prior {type(prior).__name__}")
    return out


def jansen_total_indices(func, A, B):
    """Jansen total-effect estimates.

    ``func`` maps an (n, Q) matrix to (n, C) outputs; ``A`` and ``B`` are
    independent (n, Q) samples from the input distribution.  Returns (C, Q).
    """
    A = np.asarray(A, dtype=float)
    B = np.asarray(B, dtype=float)
    fA = np.atleast_2d(np.asarray(func(A), dtype=float).reshape(A.shape[0], -1))
    fB = np.asarray(func(B), dtype=float).reshape(B.shape[0], -1)
    var = np.var(np.vstack([fA, fB]), axis=0)
    T = np.zeros((fA.shape[1], A.shape[1]))
    for q in range(A.shape[1]):
        AB = A.copy()
        AB[:, q] = B[:, q]
        fAB = np.asarray(func(AB), dtype=float).reshape(A.shape[0], -1)
        with np.errstate(invalid="ignore", divide="ignore"):
            T[:, q] = np.mean((fA - fAB) ** 2, axis=0) / (2.0 * var)
    return T


def total_sensitivity(chain: Chain, x_grid, n_mc=10000, seed=0, full_posterior=False,
                      n_draws=100, priors: PriorSpec | None = None):
    """Total-effect indices of each parameter under its prior, per x location.

    The emulator uses posterior-mean coefficients by default; with
    ``full_posterior`` the indices are averaged over ``n_draws`` evenly
    spaced posterior draws.  Outputs are on original units.
    """
    if n_mc < 1000:
        raise ValidationError("n_mc must be at least 1000")
    cat = chain.catalog
    priors = priors or chain.priors
    x_nat, x_unit = _point_matrix(x_grid, cat.inputs, "sensitivity")
    rng = np.random.default_rng(seed)
    A = sample_prior_matrix(priors, cat, n_mc, rng)
    Bm = sample_prior_matrix(priors, cat, n_mc, rng)
    design = FactoredDesign(cat.emulator_evaluator(), cat.n_inputs, x_unit)
    xmat = design.xmatrix()
    if full_posterior:
        coefs = chain.B[_realization_index(chain.n_samples, min(n_draws, chain.n_samples))]
    else:
        coefs = chain.B.mean(axis=0)[None]
    inv = chain.transform.inverse
    T = np.zeros((x_nat.shape[0], chain.B.shape[2], cat.n_params))
    for i in range(x_nat.shape[0]):
        for coef in coefs:
            def f(th, row=xmat[i], coef=coef):
                return inv((design.theta_factors(th) * row) @ coef)

            T[i] += jansen_total_indices(f, A, Bm)
        T[i] /= len(coefs)
    negative = [tuple(int(v) for v in ix) for ix in np.argwhere(T < 0)]
    return SensitivityResult(
        x=x_nat,
        parameter_names=tuple(s.name for s in cat.parameters),
        output_names=chain.output_names,
        T=T,
        n_mc=n_mc,
        negative=negative,
        mc_tolerance=3.0 / np.sqrt(n_mc),
    )


# --------------------------------------------------------------------------
# R^2 and cross-validation
# --------------------------------------------------------------------------

def r_squared(y, yhat):
    """``1 - SSE/SST`` per output column, ignoring NaN observations."""
    y = np.asarray(y, dtype=float)
    yhat = np.asarray(yhat, dtype=float)
    if y.ndim == 1:
        return float(r_squared(y[:, None], yhat.reshape(-1, 1))[0])
    out = np.full(y.shape[1], np.nan)
    for c in range(y.shape[1]):
        ok = ~np.isnan(y[:, c])
        if ok.sum() < 2:
            continue
        yc = y[ok, c]
        sst = np.sum((yc - yc.mean()) ** 2)
        if sst > 0:
            out[c] = 1.0 - np.sum((yc - yhat[ok, c]) ** 2) / sst
    return out


@dataclass(eq=False)
class Fold:
    value: float
    rows: np.ndarray
    eta: np.ndarray
    zeta: np.ndarray
    notes: list = field(default_factory=list)


@dataclass(eq=False)
class CVResult:
    fold_key: str
    folds: list
    output_names: tuple
    in_sample_eta: np.ndarray
    in_sample_zeta: np.ndarray
    out_sample_eta: np.ndarray
    out_sample_zeta: np.ndarray

    def summary_rows(self):
        for c, name in enumerate(self.output_names):
            yield name, "in-sample", "eta", float(self.in_sample_eta[c])
            yield name, "in-sample", "eta+delta", float(self.in_sample_zeta[c])
            yield name, "out-of-sample", "eta", float(self.out_sample_eta[c])
            yield name, "out-of-sample", "eta+delta", float(self.out_sample_zeta[c])


def cross_validate(data: Dataset, priors: PriorSpec, catalog: ModelCatalog, config: ChainConfig,
                   fold_key, transform: OutputTransform | None = None):
    """Leave-one-value-out cross-validation over an experimental input."""
    names = [s.name for s in catalog.inputs]
    p = names.index(fold_key) if isinstance(fold_key, str) else int(fold_key)
    key_name = names[p]
    values = np.unique(data.x_exp[:, p])
    if len(values) < 2:
        raise ValidationError(f"fold key {key_name!r} needs at least 2 distinct values")
    full = run_chain(data, priors, catalog, config, transform)
    fit = predict(full, data.x_exp, n_realizations=0)
    in_eta = r_squared(data.y_exp, fit.eta_mean)
    in_zeta = r_squared(data.y_exp, fit.zeta_mean)

    eta_all = np.full(data.y_exp.shape, np.nan)
    zeta_all = np.full(data.y_exp.shape, np.nan)
    folds = []
    for v in values:
        held = np.flatnonzero(data.x_exp[:, p] == v)
        train = np.flatnonzero(data.x_exp[:, p] != v)
        notes = []
        sub = data.subset_experimental(train)
        for c, name in enumerate(data.output_names):
            if np.all(np.isnan(sub.y_exp[:, c])):
                notes.append(f"output {name} has no training observations in this fold")
            if np.all(np.isnan(data.y_exp[held, c])):
                notes.append(f"output {name} has no held-out observations in this fold")
        chain = run_chain(sub, priors, catalog, config, transform)
        pred = predict(chain, data.x_exp[held], n_realizations=0)
        eta_all[held] = pred.eta_mean
        zeta_all[held] = pred.zeta_mean
        folds.append(Fold(float(v), held, pred.eta_mean, pred.zeta_mean, notes))
    return CVResult(
        fold_key=key_name,
        folds=folds,
        output_names=tuple(data.output_names),
        in_sample_eta=in_eta,
        in_sample_zeta=in_zeta,
        out_sample_eta=r_squared(data.y_exp, eta_all),
        out_sample_zeta=r_squared(data.y_exp, zeta_all),
    )


# --------------------------------------------------------------------------
# posterior summaries
# --------------------------------------------------------------------------

SUMMARY_QUANTILES = (0.025, 0.25, 0.5, 0.75, 0.975)


@dataclass(eq=False)
class ThetaSummary:
    names: tuple
    continuous: dict            # name -> dict(mean, sd, quantiles, hist, edges)
    categorical: dict           # name -> level probabilities (array of G)
    correlation: np.ndarray     # among continuous parameters
    max_abs_correlation: float

    def rows(self):
        for name, s in self.continuous.items():
            yield name, "mean", s["mean"]
            yield name, "sd", s["sd"]
            for q, v in zip(SUMMARY_QUANTILES, s["quantiles"]):
                yield name, f"q{q:g}", v
        for name, probs in self.categorical.items():
            for g, pr in enumerate(probs):
                yield name, f"P(level={g + 1})", pr


def summarize_theta(chain: Chain, bins=20):
    if chain.n_samples == 0:
        raise ValidationError("chain has no recorded samples")
    native = chain.theta_native()
    cont, cats, cont_idx = {}, {}, []
    for q, spec in enumerate(chain.catalog.parameters):
        col = native[:, q]
        if spec.is_categorical:
            counts = np.bincount(col.astype(int) - 1, minlength=spec.n_levels)
            cats[spec.name] = counts / counts.sum()
        else:
            cont_idx.append(q)
            hist, edges = np.histogram(col, bins=bins, range=(spec.lo, spec.hi))
            cont[spec.name] = {
                "mean": float(col.mean()),
                "sd": float(col.std()),
                "quantiles": np.quantile(col, SUMMARY_QUANTILES),
                "hist": hist,
                "edges": edges,
            }
    if len(cont_idx) >= 2:
        sub = native[:, cont_idx]
        sd = sub.std(axis=0)
        with np.errstate(invalid="ignore", divide="ignore"):
            corr = np.cov(sub, rowvar=False, bias=True) / np.outer(sd, sd)
        off = corr[~np.eye(len(cont_idx), dtype=bool)]
        max_abs = float(np.nanmax(np.abs(off))) if np.any(np.isfinite(off)) else float("nan")
    else:
        corr = np.ones((len(cont_idx), len(cont_idx)))
        max_abs = 0.0
    return ThetaSummary(
        names=tuple(s.name for s in chain.catalog.parameters),
        continuous=cont,
        categorical=cats,
        correlation=corr,
        max_abs_correlation=max_abs,
    )


# --------------------------------------------------------------------------
# study metrics
# --------------------------------------------------------------------------

@dataclass(eq=False)
class StudyMetric:
    metric: str
    parameter: str
    estimate: float
    stderr: float
    per_dataset: np.ndarray


def _mean_se(values):
    values = np.asarray(values, dtype=float)
    n = len(values)
    se = float(values.std(ddof=1) / np.sqrt(n)) if n > 1 else float("nan")
    return float(values.mean()), se


def categorical_credible_set(probs, level=0.95):
    """Smallest set of levels (1-based) whose posterior mass reaches ``level``."""
    order = np.argsort(-np.asarray(probs), kind="stable")
    mass = np.cumsum(np.asarray(probs)[order])
    k = int(np.searchsorted(mass, level - 1e-12) + 1)
    return set((order[:k] + 1).tolist())


def study_metrics(chains, truths, level=0.95):
    """ARPMSE per continuous parameter and APP per categorical parameter.

    ``truths`` is one native theta vector per chain (or a single shared
    vector).  Interval coverage at ``level`` is reported alongside.
    """
    chains = list(chains)
    if not chains:
        raise ValidationError("no chains supplied")
    truths = np.atleast_2d(np.asarray(truths, dtype=float))
    if truths.shape[0] == 1:
        truths = np.repeat(truths, len(chains), axis=0)
    params = chains[0].catalog.parameters
    out = []
    for q, spec in enumerate(params):
        if spec.is_categorical:
            app, cover = [], []
            for ch, tr in zip(chains, truths):
                lv = ch.theta[:, q].astype(int)
                probs = np.bincount(lv - 1, minlength=spec.n_levels) / len(lv)
                app.append(probs[int(tr[q]) - 1])
                cover.append(float(int(tr[q]) in categorical_credible_set(probs, level)))
            m, se = _mean_se(app)
            out.append(StudyMetric("APP", spec.name, m, se, np.array(app)))
            m, se = _mean_se(cover)
            out.append(StudyMetric("coverage", spec.name, m, se, np.array(cover)))
        else:
            rpmse, cover = [], []
            for ch, tr in zip(chains, truths):
                col = ch.theta_native()[:, q]
                rpmse.append(np.sqrt(np.mean((col - tr[q]) ** 2)))
                lo, hi = _quantiles(col, level)
                cover.append(float(lo <= tr[q] <= hi))
            m, se = _mean_se(rpmse)
            out.append(StudyMetric("ARPMSE", spec.name, m, se, np.array(rpmse)))
            m, se = _mean_se(cover)
            out.append(StudyMetric("coverage", spec.name, m, se, np.array(cover)))
    return out


__all__ = [
    "CVResult",
    "EffectCurve",
    "PredictionResult",
    "SensitivityResult",
    "StudyMetric",
    "ThetaSummary",
    "categorical_credible_set",
    "cross_validate",
    "discrepancy_draws",
    "discrepancy_effects",
    "emulator_draws",
    "jansen_total_indices",
    "predict",
    "r_squared",
    "sample_prior_matrix",
    "study_metrics",
    "summarize_theta",
    "total_sensitivity",
]
