"""Datasets, scaling, output transforms, priors and the sampler state."""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy import special, stats

from .basis import CATEGORICAL, CONTINUOUS, INPUT, PARAMETER, ModelCatalog, VariableSpec
from .errors import ConfigError, NumericalError, ValidationError

RANGE_SLACK = 1e-9


# --------------------------------------------------------------------------
# scaling
# --------------------------------------------------------------------------

def scale_to_unit(value, spec: VariableSpec, where=""):
    """Map a native value to [0, 1]; categorical levels pass through unchanged."""
    if spec.is_categorical:
        return value
    v = np.asarray(value, dtype=float)
    span = spec.hi - spec.lo
    slack = RANGE_SLACK * max(1.0, abs(span))
    bad = (v < spec.lo - slack) | (v > spec.hi + slack)
    if np.any(bad):
        first = np.flatnonzero(np.atleast_1d(bad))[0]
        offending = np.atleast_1d(v)[first]
        loc = f" ({where} row {first + 1})" if where else ""
        raise ValidationError(
            f"{spec.name}={float(offending)!r} outside [{spec.lo}, {spec.hi}]{loc}"
        )
    out = np.clip((v - spec.lo) / span, 0.0, 1.0)
    return float(out) if out.ndim == 0 else out


def unscale_from_unit(u, spec: VariableSpec):
    if spec.is_categorical:
        return u
    out = spec.lo + np.asarray(u, dtype=float) * (spec.hi - spec.lo)
    return float(out) if out.ndim == 0 else out


# --------------------------------------------------------------------------
# output transforms
# --------------------------------------------------------------------------

_TRANSFORMS = ("identity", "sqrt", "log", "logit")


@dataclass(frozen=True)
class OutputTransform:
    """Per-output variance-stabilizing transform (identity/sqrt/log/logit)."""

    kinds: tuple

    def __post_init__(self):
        object.__setattr__(self, "kinds", tuple(self.kinds))
        for k in self.kinds:
            if k not in _TRANSFORMS:
                raise ValidationError(f"unknown output transform {k!r}")

    @classmethod
    def identity(cls, n_outputs):
        return cls(("identity",) * n_outputs)

    def check(self, y):
        """Return domain violations as messages (NaN entries are ignored)."""
        y = np.atleast_2d(np.asarray(y, dtype=float))
        problems = []
        for c, kind in enumerate(self.kinds):
            col = y[:, c]
            obs = ~np.isnan(col)
            if kind == "sqrt":
                bad = obs & (col < 0)
            elif kind == "log":
                bad = obs & (col <= 0)
            elif kind == "logit":
                bad = obs & ((col <= 0) | (col >= 1))
            else:
                bad = obs & ~np.isfinite(col)
            for r in np.flatnonzero(bad):
                problems.append(f"row {r + 1}, output {c + 1}: value {float(col[r])!r} invalid for {kind} transform")
        return problems

    def forward(self, y):
        y = np.asarray(y, dtype=float)
        problems = self.check(y)
        if problems:
            raise ValidationError(problems[0], problems)
        out = np.array(y, dtype=float, order="C", copy=True)
        view = out.reshape(-1, len(self.kinds))
        for c, kind in enumerate(self.kinds):
            col = view[:, c]
            if kind == "sqrt":
                view[:, c] = np.sqrt(col)
            elif kind == "log":
                view[:, c] = np.log(col)
            elif kind == "logit":
                view[:, c] = special.logit(col)
        return out

    def inverse(self, z):
        out = np.array(z, dtype=float, order="C", copy=True)
        view = out.reshape(-1, len(self.kinds))
        for c, kind in enumerate(self.kinds):
            col = view[:, c]
            if kind == "sqrt":
                view[:, c] = col * col
            elif kind == "log":
                view[:, c] = np.exp(col)
            elif kind == "logit":
                view[:, c] = special.expit(col)
        return out


def apply_transform(y, transform: OutputTransform):
    return transform.forward(y)


def invert_transform(z, transform: OutputTransform):
    return transform.inverse(z)


# --------------------------------------------------------------------------
# data
# --------------------------------------------------------------------------

@dataclass
class Dataset:
    """Experimental and simulator data in native units.

    Categorical columns hold 1-based level indices.  Missing experimental
    outputs are NaN; simulator outputs must be complete.
    """

    x_exp: np.ndarray
    y_exp: np.ndarray
    x_sim: np.ndarray
    t_sim: np.ndarray
    y_sim: np.ndarray
    output_names: tuple = ()

    def __post_init__(self):
        self.x_exp = np.atleast_2d(np.asarray(self.x_exp, dtype=float))
        self.x_sim = np.atleast_2d(np.asarray(self.x_sim, dtype=float))
        self.t_sim = np.asarray(self.t_sim, dtype=float).reshape(self.x_sim.shape[0], -1)
        self.y_sim = np.asarray(self.y_sim, dtype=float).reshape(self.x_sim.shape[0], -1)
        self.y_exp = np.asarray(self.y_exp, dtype=float).reshape(self.x_exp.shape[0], self.y_sim.shape[1])
        if not self.output_names:
            self.output_names = tuple(f"y{c + 1}" for c in range(self.y_sim.shape[1]))
        self.output_names = tuple(self.output_names)

    @property
    def n_exp(self):
        return self.x_exp.shape[0]

    @property
    def n_sim(self):
        return self.x_sim.shape[0]

    @property
    def n_outputs(self):
        return self.y_sim.shape[1]

    @property
    def missing(self):
        return np.isnan(self.y_exp)

    def subset_experimental(self, rows):
        rows = np.asarray(rows, dtype=int)
        return Dataset(self.x_exp[rows], self.y_exp[rows], self.x_sim, self.t_sim, self.y_sim, self.output_names)


def _check_columns(values, specs, label):
    problems = []
    for j, spec in enumerate(specs):
        col = values[:, j]
        for r, v in enumerate(col):
            if np.isnan(v):
                problems.append(f"{label} row {r + 1}, {spec.name}: missing value")
            elif spec.is_categorical:
                if v != round(v) or not 1 <= v <= spec.n_levels:
                    problems.append(f"{label} row {r + 1}, {spec.name}: level {float(v)!r} not in 1..{spec.n_levels}")
            else:
                slack = RANGE_SLACK * max(1.0, spec.hi - spec.lo)
                if v < spec.lo - slack or v > spec.hi + slack:
                    problems.append(
                        f"{label} row {r + 1}, {spec.name}: value {float(v)!r} outside [{spec.lo}, {spec.hi}]"
                    )
    return problems


def validate_dataset(data: Dataset, variables, transform: OutputTransform | None = None):
    """Check shapes, ranges, levels and missingness; return a list of problems."""
    inputs = [v for v in variables if v.role == INPUT]
    params = [v for v in variables if v.role == PARAMETER]
    problems = []
    p, q, c = len(inputs), len(params), data.n_outputs
    if data.x_exp.shape[1] != p and data.n_exp:
        problems.append(f"experimental inputs have {data.x_exp.shape[1]} columns, expected {p}")
    if data.x_sim.shape[1] != p:
        problems.append(f"simulator inputs have {data.x_sim.shape[1]} columns, expected {p}")
    if data.t_sim.shape[1] != q:
        problems.append(f"simulator parameters have {data.t_sim.shape[1]} columns, expected {q}")
    if data.y_exp.shape[1] != c and data.n_exp:
        problems.append(f"experimental outputs have {data.y_exp.shape[1]} columns, expected {c}")
    if problems:
        return problems
    problems += _check_columns(data.x_exp, inputs, "experimental")
    problems += _check_columns(data.x_sim, inputs, "simulator")
    problems += _check_columns(data.t_sim, params, "simulator")
    for r in np.flatnonzero(np.isnan(data.y_sim).any(axis=1)):
        problems.append(f"simulator row {r + 1}: simulator outputs must be complete")
    for r in np.flatnonzero(data.missing.all(axis=1)):
        problems.append(f"experimental row {r + 1}: no observed outputs")
    if transform is not None:
        if len(transform.kinds) != c:
            problems.append(f"{len(transform.kinds)} transforms given for {c} outputs")
        else:
            problems += ["experimental " + m for m in transform.check(data.y_exp)]
            problems += ["simulator " + m for m in transform.check(data.y_sim)]
    return problems


@dataclass(eq=False)
class PreparedData:
    """Unit-scaled inputs and transformed outputs, ready for the sampler."""

    x_exp: np.ndarray       # N x P on unit scale
    y_exp: np.ndarray       # N x C transformed, NaN where missing
    w_sim: np.ndarray       # M x (P + Q) on unit scale
    y_sim: np.ndarray       # M x C transformed
    missing: np.ndarray     # N x C boolean

    @property
    def n_exp(self):
        return self.x_exp.shape[0]

    @property
    def n_sim(self):
        return self.w_sim.shape[0]

    @property
    def n_outputs(self):
        return self.y_sim.shape[1]


def scale_columns(values, specs, label=""):
    out = np.empty_like(np.asarray(values, dtype=float))
    for j, spec in enumerate(specs):
        out[:, j] = scale_to_unit(values[:, j], spec, where=label) if len(values) else values[:, j]
    return out


def prepare_data(data: Dataset, catalog: ModelCatalog, transform: OutputTransform | None = None):
    transform = transform or OutputTransform.identity(data.n_outputs)
    problems = validate_dataset(data, catalog.variables, transform)
    if problems:
        raise ValidationError(f"{len(problems)} data problem(s); first: {problems[0]}", problems)
    x_exp = scale_columns(data.x_exp, catalog.inputs, "experimental")
    w_sim = np.hstack([
        scale_columns(data.x_sim, catalog.inputs, "simulator"),
        scale_columns(data.t_sim, catalog.parameters, "simulator"),
    ])
    return PreparedData(
        x_exp=x_exp.reshape(data.n_exp, catalog.n_inputs),
        y_exp=transform.forward(data.y_exp),
        w_sim=w_sim,
        y_sim=transform.forward(data.y_sim),
        missing=data.missing.copy(),
    )


# --------------------------------------------------------------------------
# priors
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class ScaledBeta:
    """``(hi - lo) * Beta(a, b) + lo`` on the native scale."""

    a: float
    b: float
    lo: float
    hi: float

    def __post_init__(self):
        if self.a <= 0 or self.b <= 0:
            raise ConfigError("Beta shape parameters must be positive")
        if not self.lo < self.hi:
            raise ConfigError("Beta prior needs lo < hi")

    def logpdf(self, v):
        return float(stats.beta.logpdf((v - self.lo) / (self.hi - self.lo), self.a, self.b) - math.log(self.hi - self.lo))

    def sample(self, rng):
        return self.lo + (self.hi - self.lo) * rng.beta(self.a, self.b)

    def variance(self):
        a, b = self.a, self.b
        return (self.hi - self.lo) ** 2 * a * b / ((a + b) ** 2 * (a + b + 1))

    def mean(self):
        return self.lo + (self.hi - self.lo) * self.a / (self.a + self.b)


@dataclass(frozen=True)
class UniformPrior:
    lo: float
    hi: float

    def __post_init__(self):
        if not self.lo < self.hi:
            raise ConfigError("uniform prior needs lo < hi")

    def logpdf(self, v):
        if self.lo <= v <= self.hi:
            return -math.log(self.hi - self.lo)
        return -math.inf

    def sample(self, rng):
        return rng.uniform(self.lo, self.hi)

    def variance(self):
        return (self.hi - self.lo) ** 2 / 12.0

    def mean(self):
        return 0.5 * (self.lo + self.hi)


@dataclass(frozen=True)
class DiscretePrior:
    """Probabilities over levels ``1..G`` of a categorical parameter."""

    weights: tuple

    def __post_init__(self):
        w = tuple(float(x) for x in self.weights)
        object.__setattr__(self, "weights", w)
        if any(x < 0 for x in w) or abs(sum(w) - 1.0) > 1e-9:
            raise ConfigError("discrete prior weights must be nonnegative and sum to 1")

    @classmethod
    def uniform(cls, n_levels):
        return cls((1.0 / n_levels,) * n_levels)

    def logpdf(self, level):
        level = int(round(level))
        if 1 <= level <= len(self.weights) and self.weights[level - 1] > 0:
            return math.log(self.weights[level - 1])
        return -math.inf

    def sample(self, rng):
        return float(rng.choice(len(self.weights), p=self.weights) + 1)


@dataclass(frozen=True, eq=False)
class WishartPrior:
    """Inverse-Wishart prior with scale ``P`` and degrees of freedom ``df``.

    The prior mean is ``P / (df - C - 1)`` (defined for ``df > C + 1``).
    """

    scale: np.ndarray
    df: float

    def __post_init__(self):
        scale = np.atleast_2d(np.asarray(self.scale, dtype=float))
        object.__setattr__(self, "scale", scale)
        c = scale.shape[0]
        if scale.shape != (c, c):
            raise ConfigError("Wishart scale matrix must be square")
        if self.df <= c - 1:
            raise ConfigError(f"Wishart degrees of freedom must exceed {c - 1}")
        check_spd(scale, "Wishart scale matrix", error=ConfigError)

    @classmethod
    def from_mean(cls, mean, df):
        mean = np.atleast_2d(np.asarray(mean, dtype=float))
        c = mean.shape[0]
        if df <= c + 1:
            raise ConfigError(f"prior mean undefined for df={df} <= C+1={c + 1}")
        return cls(mean * (df - c - 1), df)

    @property
    def dim(self):
        return self.scale.shape[0]

    def mean(self):
        c = self.dim
        if self.df <= c + 1:
            raise ConfigError(f"prior mean undefined for df={self.df} <= C+1={c + 1}")
        return self.scale / (self.df - c - 1)


@dataclass(frozen=True, eq=False)
class PriorSpec:
    theta: tuple
    lam: WishartPrior
    omega: WishartPrior
    sigma: WishartPrior
    upsilon: WishartPrior

    def __post_init__(self):
        object.__setattr__(self, "theta", tuple(self.theta))
        dims = {w.dim for w in (self.lam, self.omega, self.sigma, self.upsilon)}
        if len(dims) != 1:
            raise ConfigError("all Wishart priors must share the output dimension")

    @classmethod
    def default(cls, catalog: ModelCatalog, n_outputs, sigma_mean=None, df_noise=20.0, df_var=4.0):
        """Vague defaults: identity-mean Lambda/Omega and noise means from ``sigma_mean``."""
        theta = []
        for spec in catalog.parameters:
            if spec.is_categorical:
                theta.append(DiscretePrior.uniform(spec.n_levels))
            else:
                theta.append(UniformPrior(spec.lo, spec.hi))
        eye = np.eye(n_outputs)
        noise = eye * 0.01 if sigma_mean is None else np.atleast_2d(sigma_mean)
        return cls(
            tuple(theta),
            WishartPrior.from_mean(eye, df_var),
            WishartPrior.from_mean(eye, df_var),
            WishartPrior.from_mean(noise, df_noise),
            WishartPrior.from_mean(noise, df_noise),
        )

    def check_against(self, catalog: ModelCatalog):
        if len(self.theta) != catalog.n_params:
            raise ConfigError(f"{len(self.theta)} theta priors for {catalog.n_params} parameters")
        for spec, prior in zip(catalog.parameters, self.theta):
            if spec.is_categorical != isinstance(prior, DiscretePrior):
                raise ConfigError(f"prior type does not match variable kind for {spec.name!r}")
            if spec.is_categorical and len(prior.weights) != spec.n_levels:
                raise ConfigError(f"prior for {spec.name!r} has wrong number of levels")


def theta_log_prior(priors: PriorSpec, catalog: ModelCatalog, theta_unit) -> float:
    """Log prior density of theta expressed on the unit scale."""
    total = 0.0
    for spec, prior, u in zip(catalog.parameters, priors.theta, theta_unit):
        if spec.is_categorical:
            total += prior.logpdf(u)
        else:
            if not 0.0 <= u <= 1.0:
                return -math.inf
            span = spec.hi - spec.lo
            total += prior.logpdf(spec.lo + u * span) + math.log(span)
        if total == -math.inf:
            return total
    return total


def sample_theta_prior(priors: PriorSpec, catalog: ModelCatalog, rng):
    out = np.empty(catalog.n_params)
    for q, (spec, prior) in enumerate(zip(catalog.parameters, priors.theta)):
        v = prior.sample(rng)
        out[q] = v if spec.is_categorical else (v - spec.lo) / (spec.hi - spec.lo)
    return out


def theta_to_native(theta_unit, catalog: ModelCatalog):
    return np.array([unscale_from_unit(u, s) for u, s in zip(theta_unit, catalog.parameters)])


# --------------------------------------------------------------------------
# state
# --------------------------------------------------------------------------

def check_spd(mat, name="matrix", error=NumericalError):
    mat = np.asarray(mat, dtype=float)
    if not np.all(np.isfinite(mat)):
        raise error(f"{name} has non-finite entries")
    sym = 0.5 * (mat + mat.T)
    if np.max(np.abs(mat - sym)) > 1e-8 * max(1.0, np.max(np.abs(mat))):
        raise error(f"{name} is not symmetric")
    w = np.linalg.eigvalsh(sym)
    if w[-1] <= 0 or w[0] <= 1e-12 * w[-1]:
        raise error(f"{name} is not positive definite (eigenvalues {w[0]:.3g}..{w[-1]:.3g})")
    return sym


@dataclass
class ParameterState:
    """Complete MCMC state.  ``theta`` is on the unit scale (levels for
    categorical entries); ``y_exp`` is the transformed experimental output
    matrix with missing cells holding their current imputations."""

    theta: np.ndarray
    B: list
    C: list
    Lambda: list
    Omega: list
    Sigma: np.ndarray
    Upsilon: np.ndarray
    y_exp: np.ndarray
    missing: np.ndarray = field(default=None, repr=False)

    def copy(self):
        return ParameterState(
            self.theta.copy(),
            [b.copy() for b in self.B],
            [c.copy() for c in self.C],
            [m.copy() for m in self.Lambda],
            [m.copy() for m in self.Omega],
            self.Sigma.copy(),
            self.Upsilon.copy(),
            self.y_exp.copy(),
            None if self.missing is None else self.missing.copy(),
        )

    @property
    def imputed(self):
        return self.y_exp[self.missing] if self.missing is not None else np.empty(0)

    def covariances(self):
        yield "Sigma", self.Sigma
        yield "Upsilon", self.Upsilon
        for j, m in enumerate(self.Lambda):
            yield f"Lambda[{j}]", m
        for k, m in enumerate(self.Omega):
            yield f"Omega[{k}]", m

    def check(self):
        for name, m in self.covariances():
            check_spd(m, name)

    def to_arrays(self, prefix="state/"):
        out = {
            prefix + "theta": self.theta,
            prefix + "Sigma": self.Sigma,
            prefix + "Upsilon": self.Upsilon,
            prefix + "y_exp": self.y_exp,
            prefix + "missing": self.missing,
        }
        for j, (b, lam) in enumerate(zip(self.B, self.Lambda)):
            out[f"{prefix}B/{j}"] = b
            out[f"{prefix}Lambda/{j}"] = lam
        for k, (c, om) in enumerate(zip(self.C, self.Omega)):
            out[f"{prefix}C/{k}"] = c
            out[f"{prefix}Omega/{k}"] = om
        return out

    @classmethod
    def from_arrays(cls, arrays, n_emulator, n_discrepancy, prefix="state/"):
        get = lambda k: np.array(arrays[prefix + k])
        return cls(
            get("theta"),
            [get(f"B/{j}") for j in range(n_emulator)],
            [get(f"C/{k}") for k in range(n_discrepancy)],
            [get(f"Lambda/{j}") for j in range(n_emulator)],
            [get(f"Omega/{k}") for k in range(n_discrepancy)],
            get("Sigma"),
            get("Upsilon"),
            get("y_exp"),
            get("missing").astype(bool),
        )


def init_state(data: PreparedData, priors: PriorSpec, catalog: ModelCatalog, seed=None, rng=None):
    """Prior draw for theta, zero coefficients, prior-mean covariances.

    Missing experimental cells start at the observed per-output mean.
    """
    rng = rng if rng is not None else np.random.default_rng(seed)
    priors.check_against(catalog)
    n_out = data.n_outputs
    if priors.sigma.dim != n_out:
        raise ConfigError(f"priors are {priors.sigma.dim}-dimensional but data has {n_out} outputs")
    theta = sample_theta_prior(priors, catalog, rng)
    y = data.y_exp.copy()
    for c in range(n_out):
        col = y[:, c]
        obs = ~data.missing[:, c]
        fill = col[obs].mean() if obs.any() else data.y_sim[:, c].mean()
        col[~obs] = fill
    return ParameterState(
        theta=theta,
        B=[np.zeros((comp.term_count, n_out)) for comp in catalog.emulator],
        C=[np.zeros((comp.term_count, n_out)) for comp in catalog.discrepancy],
        Lambda=[priors.lam.mean().copy() for _ in catalog.emulator],
        Omega=[priors.omega.mean().copy() for _ in catalog.discrepancy],
        Sigma=priors.sigma.mean().copy(),
        Upsilon=priors.upsilon.mean().copy(),
        y_exp=y,
        missing=data.missing.copy(),
    )


__all__ = [
    "CATEGORICAL",
    "CONTINUOUS",
    "Dataset",
    "DiscretePrior",
    "OutputTransform",
    "ParameterState",
    "PreparedData",
    "PriorSpec",
    "ScaledBeta",
    "UniformPrior",
    "VariableSpec",
    "WishartPrior",
    "apply_transform",
    "check_spd",
    "init_state",
    "invert_transform",
    "prepare_data",
    "sample_theta_prior",
    "scale_to_unit",
    "theta_log_prior",
    "theta_to_native",
    "unscale_from_unit",
    "validate_dataset",
]
