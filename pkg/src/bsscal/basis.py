"""BSS-ANOVA covariance functions and their basis representation.

The main-effect covariance on [0, 1] is

    K1(u, u') = B1(u) B1(u') + B2(u) B2(u') - B4(|u - u'|) / 24

whose first two pieces are rank one (bases B1 and B2) and whose third piece is
expanded once, numerically, on a dense grid (Karhunen-Loeve).  Interactions use
products of main-effect bases; categorical variables use the sum-to-zero
indicator basis.  Everything here is immutable and computed once per run.
"""
from __future__ import annotations

import functools
import itertools
import math
import warnings
from dataclasses import dataclass, field

import numpy as np

from . import kernels
from .errors import NumericalError, ValidationError

CONTINUOUS = "continuous"
CATEGORICAL = "categorical"
INPUT = "input"
PARAMETER = "parameter"

# squared L2 norms of B1 and B2 on [0, 1]; used to rank interaction terms
_B1_NORM2 = 1.0 / 12.0
_B2_NORM2 = 1.0 / 180.0


# --------------------------------------------------------------------------
# scalar covariance functions
# --------------------------------------------------------------------------

def _check_unit(*values):
    for v in values:
        if not (0.0 <= v <= 1.0):
            raise ValueError(f"argument {v!r} outside [0, 1]")


def bernoulli(order, u):
    """Bernoulli polynomial of order 1, 2 or 4 evaluated at ``u``."""
    u = np.asarray(u, dtype=float)
    if np.any((u < 0.0) | (u > 1.0)):
        raise ValueError("bernoulli polynomials are evaluated on [0, 1]")
    if order == 1:
        out = u - 0.5
    elif order == 2:
        out = u * u - u + 1.0 / 6.0
    elif order == 4:
        out = u**4 - 2.0 * u**3 + u**2 - 1.0 / 30.0
    else:
        raise ValueError(f"unsupported Bernoulli order {order!r}; use 1, 2 or 4")
    return float(out) if out.ndim == 0 else out


def _b4(d):
    return d**4 - 2.0 * d**3 + d**2 - 1.0 / 30.0


def k1(u, v):
    """BSS-ANOVA main-effect covariance between two points of [0, 1]."""
    _check_unit(u, v)
    return (
        (u - 0.5) * (v - 0.5)
        + (u * u - u + 1.0 / 6.0) * (v * v - v + 1.0 / 6.0)
        - _b4(abs(u - v)) / 24.0
    )


def k2(pair, other):
    """Two-way interaction covariance: product of main-effect covariances."""
    (u, v), (u2, v2) = pair, other
    return k1(u, u2) * k1(v, v2)


def kd(u, v, n_levels):
    """Sum-to-zero covariance between categorical levels ``u`` and ``v`` (1-based)."""
    if n_levels < 2:
        raise ValueError("a categorical variable needs at least 2 levels")
    for level in (u, v):
        if int(level) != level or not 1 <= level <= n_levels:
            raise ValueError(f"level {level!r} outside 1..{n_levels}")
    return (n_levels - 1) / n_levels if u == v else -1.0 / n_levels


def kd_matrix(n_levels):
    g = n_levels
    return np.full((g, g), -1.0 / g) + np.eye(g)


# --------------------------------------------------------------------------
# variables and the Karhunen-Loeve basis
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class VariableSpec:
    """An input (``x``) or calibration parameter (``t``).

    Continuous variables carry a native range ``(lo, hi)``; categorical ones
    carry their level labels, mapped to levels ``1..G`` in that order.
    """

    name: str
    kind: str = CONTINUOUS
    lo: float = 0.0
    hi: float = 1.0
    levels: tuple = ()
    role: str = INPUT

    def __post_init__(self):
        if self.kind not in (CONTINUOUS, CATEGORICAL):
            raise ValidationError(f"variable {self.name!r}: unknown kind {self.kind!r}")
        if self.role not in (INPUT, PARAMETER):
            raise ValidationError(f"variable {self.name!r}: unknown role {self.role!r}")
        if self.kind == CONTINUOUS:
            if not (np.isfinite(self.lo) and np.isfinite(self.hi)) or not self.lo < self.hi:
                raise ValidationError(
                    f"variable {self.name!r}: degenerate range [{self.lo}, {self.hi}]"
                )
        else:
            object.__setattr__(self, "levels", tuple(self.levels))
            if len(self.levels) < 2:
                raise ValidationError(f"variable {self.name!r}: needs at least 2 levels")
            if len(set(self.levels)) != len(self.levels):
                raise ValidationError(f"variable {self.name!r}: duplicate level labels")

    @property
    def is_categorical(self):
        return self.kind == CATEGORICAL

    @property
    def n_levels(self):
        return len(self.levels)

    def level_of(self, label):
        """1-based level index of a label (labels are matched as strings too)."""
        for i, lab in enumerate(self.levels, start=1):
            if label == lab or str(label) == str(lab):
                return i
        raise ValidationError(f"variable {self.name!r}: unknown level {label!r}")


@dataclass(frozen=True, eq=False)
class KLBasis:
    """Dense-grid eigen-system of the B4 part of the main-effect covariance.

    ``eigenvalues`` approximate the operator eigenvalues (matrix eigenvalues
    divided by the grid size) and the columns of ``eigenfunctions`` are the
    eigenvectors scaled to unit mean square over the grid.
    """

    grid: np.ndarray
    eigenvalues: np.ndarray
    eigenfunctions: np.ndarray
    eigen_scaling: str = "sqrt"
    _tables: dict = field(default_factory=dict, repr=False, compare=False)

    @property
    def grid_size(self):
        return self.grid.shape[0]

    @property
    def max_terms(self):
        """Largest number of main-effect bases (B1, B2 plus all eigenpairs)."""
        return self.grid_size + 2

    def amplitudes(self):
        if self.eigen_scaling == "sqrt":
            return np.sqrt(self.eigenvalues)
        return self.eigenvalues

    def scaled_table(self, n_terms):
        """Grid values of bases 3..n_terms as a contiguous (M, n_terms-2) array."""
        n_kl = max(n_terms - 2, 0)
        if n_kl > self.grid_size:
            raise ValueError(
                f"{n_terms} main-effect bases requested but only {self.max_terms} exist"
            )
        table = self._tables.get(n_kl)
        if table is None:
            table = np.ascontiguousarray(
                self.eigenfunctions[:, :n_kl] * self.amplitudes()[:n_kl]
            )
            table.flags.writeable = False
            self._tables[n_kl] = table
        return table

    def weights(self, n_terms):
        """Squared L2 norm of each of the first ``n_terms`` main-effect bases."""
        kl = self.amplitudes()[: max(n_terms - 2, 0)] ** 2
        return np.concatenate([[_B1_NORM2, _B2_NORM2], kl])[:n_terms]


def _canonicalize(values, vectors):
    """Fix signs and rotate degenerate pairs so the basis is reproducible.

    The B4 kernel is periodic, so its eigenvalues come in (numerically) equal
    cosine/sine pairs and LAPACK may return any rotation of each pair.
    """
    m = vectors.shape[0]
    out = vectors.copy()
    i = 0
    n = len(values)
    while i < n:
        tied = (
            i + 1 < n
            and values[i] > 0
            and abs(values[i] - values[i + 1]) <= 1e-6 * values[i]
        )
        if tied:
            pair = out[:, i : i + 2]
            a = pair[0].copy()
            norm = math.hypot(a[0], a[1])
            if norm > 1e-12 * math.sqrt(m):
                first = pair @ (a / norm)
                second = pair @ (np.array([-a[1], a[0]]) / norm)
                if second[1] < 0:
                    second = -second
                out[:, i], out[:, i + 1] = first, second
            i += 2
            continue
        col = out[:, i]
        pivot = col[0] if abs(col[0]) > 1e-8 else col[np.argmax(np.abs(col))]
        if pivot < 0:
            out[:, i] = -col
        i += 1
    return out


@functools.lru_cache(maxsize=8)
def build_kl_basis(grid_size=300, eigen_scaling="sqrt"):
    """Eigen-decompose the grid matrix of -B4(|s - t|)/24.

    The grid is the midpoint grid ``(i + 1/2) / M``.  On it the kernel matrix
    is circulant, which makes every non-null eigenvector exactly mean zero.
    """
    if grid_size < 50:
        raise ValueError("grid_size must be at least 50")
    if eigen_scaling not in ("sqrt", "linear"):
        raise ValueError(f"eigen_scaling must be 'sqrt' or 'linear', not {eigen_scaling!r}")
    m = int(grid_size)
    grid = (np.arange(m) + 0.5) / m
    kmat = -_b4(np.abs(grid[:, None] - grid[None, :])) / 24.0
    try:
        vals, vecs = np.linalg.eigh(kmat)
    except np.linalg.LinAlgError as exc:
        raise NumericalError(f"eigen-decomposition of the {m}x{m} kernel failed") from exc
    order = np.argsort(vals, kind="stable")[::-1]
    vals = np.clip(vals[order], 0.0, None)
    vecs = _canonicalize(vals, vecs[:, order])
    eigenvalues = vals / m
    eigenfunctions = vecs * math.sqrt(m)
    for arr in (grid, eigenvalues, eigenfunctions):
        arr.flags.writeable = False
    return KLBasis(grid, eigenvalues, eigenfunctions, eigen_scaling)


def _clamp_unit(u):
    u = np.asarray(u, dtype=float)
    if np.any((u < 0.0) | (u > 1.0)):
        warnings.warn("basis evaluated outside [0, 1]; clamping to the boundary", RuntimeWarning)
        u = np.clip(u, 0.0, 1.0)
    return u


def main_basis_matrix(kl, u, n_terms):
    """Evaluate main-effect bases 1..n_terms at each point of ``u``."""
    u = _clamp_unit(np.atleast_1d(u))
    return kernels.main_basis(u, kl.scaled_table(n_terms), int(n_terms))


def eval_main_basis(kl, l, u):
    """Value of the ``l``-th (1-based) main-effect basis at ``u``."""
    if l < 1 or l > kl.max_terms:
        raise ValueError(f"basis index {l} outside 1..{kl.max_terms}")
    return float(main_basis_matrix(kl, [u], l)[0, l - 1])


def eval_categorical_basis(l, w, n_levels):
    """Categorical basis ``l`` at level ``w``: (G-1)/G on its own level, -1/G elsewhere."""
    for v in (l, w):
        if int(v) != v or not 1 <= v <= n_levels:
            raise ValueError(f"level {v!r} outside 1..{n_levels}")
    return (n_levels - 1) / n_levels if l == w else -1.0 / n_levels


def categorical_basis_matrix(levels, n_levels):
    levels = np.asarray(levels, dtype=float)
    if np.any((levels < 1) | (levels > n_levels) | (levels != np.round(levels))):
        raise ValidationError(f"categorical levels must be integers in 1..{n_levels}")
    onehot = levels[:, None].astype(int) == np.arange(1, n_levels + 1)[None, :]
    return onehot.astype(float) - 1.0 / n_levels


# --------------------------------------------------------------------------
# functional components
# --------------------------------------------------------------------------

_KIND_ARITY = {"constant": 0, "main": 1, "two-way": 2, "three-way": 3}


@dataclass(frozen=True)
class ComponentDescriptor:
    """One functional-ANOVA term with its selected product bases.

    ``basis_terms`` holds 1-based per-variable basis indices, one tuple per
    column of the component's design block.
    """

    kind: str
    variables: tuple
    basis_terms: tuple

    def __post_init__(self):
        if self.kind not in _KIND_ARITY:
            raise ValueError(f"unknown component kind {self.kind!r}")
        variables = tuple(int(v) for v in self.variables)
        terms = tuple(tuple(int(i) for i in t) for t in self.basis_terms)
        object.__setattr__(self, "variables", variables)
        object.__setattr__(self, "basis_terms", terms)
        if len(variables) != _KIND_ARITY[self.kind]:
            raise ValueError(f"{self.kind} component needs {_KIND_ARITY[self.kind]} variables")
        if any(b <= a for a, b in zip(variables, variables[1:])):
            raise ValueError("component variables must be strictly increasing")
        if not terms:
            raise ValueError("component has no basis terms")
        if len(set(terms)) != len(terms):
            raise ValueError("duplicate basis terms in component")
        if any(len(t) != len(variables) for t in terms):
            raise ValueError("basis term arity does not match the component variables")

    @property
    def term_count(self):
        return len(self.basis_terms)

    def label(self, variables=None):
        if not self.variables:
            return "const"
        names = [variables[v].name if variables else f"w{v + 1}" for v in self.variables]
        return "x".join(names)


@dataclass(frozen=True)
class CatalogPolicy:
    """How many components and basis terms the emulator/discrepancy use."""

    n_terms: int = 25
    n_terms_2way: int = 50
    n_terms_3way: int = 100
    grid_size: int = 300
    interactions: str = "two-way"
    discrepancy_interactions: str = "two-way"
    three_way: bool = False
    eigen_scaling: str = "sqrt"
    discrepancy_n_terms: int | None = None
    discrepancy_n_terms_2way: int | None = None

    def __post_init__(self):
        for name in ("interactions", "discrepancy_interactions"):
            if getattr(self, name) not in ("main", "two-way"):
                raise ValidationError(f"{name} must be 'main' or 'two-way'")
        if self.n_terms < 1 or self.n_terms_2way < 1 or self.n_terms_3way < 1:
            raise ValidationError("basis budgets must be positive")
        for extra in (self.discrepancy_n_terms, self.discrepancy_n_terms_2way):
            if extra is not None and extra < 1:
                raise ValidationError("basis budgets must be positive")
        if max(self.n_terms, self.discrepancy_n_terms or 0) > self.grid_size + 2:
            raise ValidationError("n_terms exceeds the number of available eigenpairs")

    def budgets(self, discrepancy=False):
        """(main-effect terms, two-way budget) for the emulator or discrepancy."""
        if not discrepancy:
            return self.n_terms, self.n_terms_2way
        return (self.discrepancy_n_terms or self.n_terms,
                self.discrepancy_n_terms_2way or self.n_terms_2way)


def _axis_sizes(variables, var_idx, n_terms):
    return [
        variables[v].n_levels if variables[v].is_categorical else n_terms for v in var_idx
    ]


def _axis_weights(variables, var_idx, kl, n_terms):
    out = []
    for v in var_idx:
        spec = variables[v]
        if spec.is_categorical:
            out.append(np.full(spec.n_levels, 1.0 / spec.n_levels))
        else:
            out.append(kl.weights(n_terms))
    return out


def select_interaction_terms(variables, var_idx, kl, budget, n_terms=25):
    """Keep the ``budget`` product bases with the largest weight products.

    Continuous index ``l`` weighs the squared norm of its basis (1/12, 1/180,
    then the KL eigenvalues); every categorical level weighs 1/G.  Weights are
    compared after rounding their logs to 9 decimals so that analytically tied
    eigenpairs fall back to lexicographic order.
    """
    if budget < 1:
        raise ValueError("budget must be at least 1")
    weights = _axis_weights(variables, var_idx, kl, n_terms)
    ranges = [range(1, len(w) + 1) for w in weights]
    scored = []
    for tup in itertools.product(*ranges):
        prod = 1.0
        for axis, i in enumerate(tup):
            prod *= weights[axis][i - 1]
        key = round(math.log(prod), 9) if prod > 0 else -math.inf
        scored.append((-key, tup))
    scored.sort()
    return [tup for _, tup in scored[:budget]]


def enumerate_components(variables, policy=None, kl=None, discrepancy=False):
    """Build the emulator (or discrepancy) component catalog.

    The emulator uses every variable of ``w = (x, t)``; the discrepancy uses
    inputs only.  Order: constant, main effects, two-way interactions, then
    (emulator only, when enabled) the x-x-t three-way interactions.
    """
    policy = policy or CatalogPolicy()
    if kl is None:
        kl = build_kl_basis(policy.grid_size, policy.eigen_scaling)
    variables = list(variables)
    if not variables:
        raise ValidationError("at least one variable is required")
    idx = [i for i, v in enumerate(variables) if not discrepancy or v.role == INPUT]
    order = policy.discrepancy_interactions if discrepancy else policy.interactions
    n_main, n_2way = policy.budgets(discrepancy)

    comps = [ComponentDescriptor("constant", (), ((),))]
    for v in idx:
        size = _axis_sizes(variables, [v], n_main)[0]
        comps.append(ComponentDescriptor("main", (v,), tuple((i,) for i in range(1, size + 1))))
    if order == "two-way":
        for a, b in itertools.combinations(idx, 2):
            terms = select_interaction_terms(variables, (a, b), kl, n_2way, n_main)
            comps.append(ComponentDescriptor("two-way", (a, b), tuple(terms)))
    if policy.three_way and not discrepancy:
        xs = [i for i in idx if variables[i].role == INPUT]
        ts = [i for i in idx if variables[i].role == PARAMETER]
        for a, b in itertools.combinations(xs, 2):
            for t in ts:
                trip = tuple(sorted((a, b, t)))
                terms = select_interaction_terms(variables, trip, kl, policy.n_terms_3way, policy.n_terms)
                comps.append(ComponentDescriptor("three-way", trip, tuple(terms)))
    return comps


# --------------------------------------------------------------------------
# design matrices
# --------------------------------------------------------------------------

def _needed_terms(components, n_vars):
    need = [0] * n_vars
    for comp in components:
        for axis, v in enumerate(comp.variables):
            need[v] = max(need[v], max(t[axis] for t in comp.basis_terms))
    return need


class BasisEvaluator:
    """Evaluates component design blocks for a fixed catalog.

    Per-variable basis columns are computed once per call and stacked into a
    single matrix; each component block is then a product over those columns
    (see ``kernels.product_columns``).
    """

    def __init__(self, variables, components, kl):
        self.variables = list(variables)
        self.components = list(components)
        self.kl = kl
        self.n_vars = len(self.variables)
        self.need = _needed_terms(self.components, self.n_vars)
        for v, spec in enumerate(self.variables):
            if spec.is_categorical and self.need[v] > spec.n_levels:
                raise ValidationError(f"component asks for level basis beyond G for {spec.name!r}")
        offsets = np.zeros(self.n_vars + 1, dtype=np.int64)
        offsets[1:] = np.cumsum(self.need)
        self.offsets = offsets
        self.index = []
        for comp in self.components:
            if comp.kind == "constant":
                self.index.append(None)
                continue
            ix = np.array(
                [[offsets[v] + t[a] - 1 for a, v in enumerate(comp.variables)] for t in comp.basis_terms],
                dtype=np.int64,
            )
            self.index.append(ix)
        self.sizes = [c.term_count for c in self.components]
        self.col_offsets = np.concatenate([[0], np.cumsum(self.sizes)]).astype(int)

    @property
    def n_columns(self):
        return int(self.col_offsets[-1])

    def variable_columns(self, points, variables=None):
        """Stacked per-variable basis evaluations, shape (n, sum(need))."""
        points = np.atleast_2d(np.asarray(points, dtype=float))
        if points.shape[1] != self.n_vars:
            raise ValidationError(
                f"points have {points.shape[1]} coordinates, catalog expects {self.n_vars}"
            )
        n = points.shape[0]
        out = np.zeros((n, int(self.offsets[-1])))
        wanted = range(self.n_vars) if variables is None else variables
        for v in wanted:
            k = self.need[v]
            if k == 0:
                continue
            spec = self.variables[v]
            if spec.is_categorical:
                cols = categorical_basis_matrix(points[:, v], spec.n_levels)[:, :k]
            else:
                cols = main_basis_matrix(self.kl, points[:, v], k)
            out[:, self.offsets[v] : self.offsets[v + 1]] = cols
        return out

    def block(self, j, stacked):
        ix = self.index[j]
        if ix is None:
            return np.ones((stacked.shape[0], 1))
        return kernels.product_columns(stacked, ix)

    def blocks(self, points):
        stacked = self.variable_columns(points)
        return [self.block(j, stacked) for j in range(len(self.components))]

    def matrix(self, points):
        return np.hstack(self.blocks(points))


def design_matrix(points, components, kl, variables):
    """Full design matrix: one column per basis term, components in catalog order.

    The constant component contributes the leading column of ones.
    """
    return BasisEvaluator(variables, components, kl).matrix(points)


@dataclass(frozen=True, eq=False)
class ModelCatalog:
    """Variables plus emulator and discrepancy component catalogs."""

    variables: tuple
    emulator: tuple
    discrepancy: tuple
    kl: KLBasis
    policy: CatalogPolicy = CatalogPolicy()

    @classmethod
    def build(cls, variables, policy=None):
        policy = policy or CatalogPolicy()
        variables = tuple(variables)
        roles = [v.role for v in variables]
        if roles != sorted(roles, key=lambda r: r != INPUT):
            raise ValidationError("inputs must precede parameters in the variable list")
        kl = build_kl_basis(policy.grid_size, policy.eigen_scaling)
        emu = tuple(enumerate_components(variables, policy, kl))
        disc = tuple(enumerate_components(variables, policy, kl, discrepancy=True))
        return cls(variables, emu, disc, kl, policy)

    @property
    def inputs(self):
        return [v for v in self.variables if v.role == INPUT]

    @property
    def parameters(self):
        return [v for v in self.variables if v.role == PARAMETER]

    @property
    def n_inputs(self):
        return len(self.inputs)

    @property
    def n_params(self):
        return len(self.parameters)

    def emulator_evaluator(self):
        return BasisEvaluator(self.variables, self.emulator, self.kl)

    def discrepancy_evaluator(self):
        return BasisEvaluator(self.variables[: self.n_inputs], self.discrepancy, self.kl)


def component_counts(catalog: ModelCatalog) -> dict:
    return {
        "J": len(catalog.emulator),
        "K": len(catalog.discrepancy),
        "emulator_columns": sum(c.term_count for c in catalog.emulator),
        "discrepancy_columns": sum(c.term_count for c in catalog.discrepancy),
    }


__all__ = [
    "CATEGORICAL",
    "CONTINUOUS",
    "INPUT",
    "PARAMETER",
    "BasisEvaluator",
    "CatalogPolicy",
    "ComponentDescriptor",
    "KLBasis",
    "ModelCatalog",
    "VariableSpec",
    "bernoulli",
    "build_kl_basis",
    "categorical_basis_matrix",
    "component_counts",
    "design_matrix",
    "enumerate_components",
    "eval_categorical_basis",
    "eval_main_basis",
    "k1",
    "k2",
    "kd",
    "kd_matrix",
    "main_basis_matrix",
    "select_interaction_terms",
]
