"""Hybrid Gibbs / Metropolis-Hastings sampler for the calibration model.

Per iteration (fixed scan): emulator blocks B_j, discrepancy blocks C_k,
Lambda_j, Omega_k, Sigma, Upsilon, missing outputs, one logit-normal MH step
per continuous theta_q, and one joint MH step for the categorical theta
together with the whole discrepancy.  All coefficient updates are conjugate
Gaussian draws whose cost is linear in the number of data rows.
"""
from __future__ import annotations

import json
import math
import os
import time
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy import linalg, special

from .basis import ModelCatalog
from .errors import NumericalError, ValidationError
from .model import (
    Dataset,
    OutputTransform,
    ParameterState,
    PreparedData,
    PriorSpec,
    init_state,
    prepare_data,
    theta_log_prior,
    theta_to_native,
)

ALL_BLOCKS = frozenset(
    {"B", "C", "Lambda", "Omega", "Sigma", "Upsilon", "missing", "theta", "categorical"}
)
CHECKPOINT_VERSION = 1
_LOG_2PI = math.log(2.0 * math.pi)
_EDGE = 1e-12


@dataclass
class ChainConfig:
    iterations: int = 20000
    burn_in: int = 10000
    thin: int = 1
    seed: int = 0
    target_acceptance: float = 0.30
    adapt_during_burnin: bool = True
    initial_proposal_sd: float = 0.5
    checkpoint_every: int = 1000
    checkpoint_path: str | None = None
    update: frozenset = ALL_BLOCKS

    def __post_init__(self):
        self.update = frozenset(self.update)
        unknown = self.update - ALL_BLOCKS
        if unknown:
            raise ValidationError(f"unknown update blocks {sorted(unknown)}")
        if self.iterations < 1 or self.thin < 1:
            raise ValidationError("iterations and thin must be positive")
        if not 0 <= self.burn_in < self.iterations:
            raise ValidationError("burn_in must satisfy 0 <= burn_in < iterations")
        if not 0.0 < self.target_acceptance < 1.0:
            raise ValidationError("target_acceptance must lie in (0, 1)")

    @property
    def n_samples(self):
        return -(-(self.iterations - self.burn_in) // self.thin)

    def to_dict(self):
        d = asdict(self)
        d["update"] = sorted(self.update)
        return d

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        if "update" in d:
            d["update"] = frozenset(d["update"])
        return cls(**d)


# --------------------------------------------------------------------------
# Gaussian / Wishart primitives
# --------------------------------------------------------------------------

def cholesky_jittered(mat, where="matrix"):
    """Lower Cholesky factor; one bounded diagonal jitter on failure."""
    try:
        return linalg.cholesky(mat, lower=True, check_finite=False)
    except linalg.LinAlgError:
        pass
    dim = mat.shape[0]
    jitter = 1e-10 * np.trace(mat) / dim
    try:
        return linalg.cholesky(mat + jitter * np.eye(dim), lower=True, check_finite=False)
    except linalg.LinAlgError as exc:
        raise NumericalError(f"{where}: Cholesky factorization failed") from exc


def gaussian_from_precision(prec, rhs, where="block"):
    """Mean and precision Cholesky factor of N(prec^-1 rhs, prec^-1)."""
    chol = cholesky_jittered(prec, where)
    mean = linalg.cho_solve((chol, True), rhs, check_finite=False)
    return mean, chol


def sample_from_precision(mean, chol, rng):
    z = rng.standard_normal(mean.shape[0])
    return mean + linalg.solve_triangular(chol.T, z, lower=False, check_finite=False)


def logpdf_from_precision(x, mean, chol):
    d = mean.shape[0]
    r = chol.T @ (x - mean)
    return float(-0.5 * d * _LOG_2PI + np.sum(np.log(np.diag(chol))) - 0.5 * r @ r)


def covariance_from_precision(chol):
    inv = linalg.solve_triangular(chol, np.eye(chol.shape[0]), lower=True, check_finite=False)
    return inv.T @ inv


def sample_inv_wishart(scale, df, rng):
    """Draw from the inverse-Wishart with scale ``scale`` and ``df`` degrees of freedom.

    Uses the Bartlett decomposition of the matching Wishart on the inverse.
    """
    scale = np.atleast_2d(scale)
    c = scale.shape[0]
    if df <= c - 1:
        raise NumericalError(f"inverse-Wishart needs df > {c - 1}, got {df}")
    U = cholesky_jittered(scale, "inverse-Wishart scale")
    A = np.zeros((c, c))
    for i in range(c):
        A[i, i] = math.sqrt(rng.chisquare(df - i))
        A[i, :i] = rng.standard_normal(i)
    # Sigma = U A^{-T} A^{-1} U^T
    T = U @ linalg.solve_triangular(A, np.eye(c), lower=True, check_finite=False).T
    out = T @ T.T
    return 0.5 * (out + out.T)


def inv_wishart_posterior(resid, prior):
    """Scale and df of the conjugate inverse-Wishart update for zero-mean rows."""
    resid = np.atleast_2d(resid)
    return resid.T @ resid + prior.scale, resid.shape[0] + prior.df


def impute_conditional(sigma, eps_obs, miss_idx, obs_idx):
    """Mean and covariance of the missing error components given the observed ones."""
    s_mm = sigma[np.ix_(miss_idx, miss_idx)]
    if len(obs_idx) == 0:
        return np.zeros((np.atleast_2d(eps_obs).shape[0], len(miss_idx))), s_mm
    s_mo = sigma[np.ix_(miss_idx, obs_idx)]
    s_oo = sigma[np.ix_(obs_idx, obs_idx)]
    try:
        cf = linalg.cho_factor(s_oo, lower=True, check_finite=False)
    except linalg.LinAlgError as exc:
        raise NumericalError("observed block of Sigma is singular") from exc
    gain = linalg.cho_solve(cf, s_mo.T, check_finite=False).T  # S_mo S_oo^-1
    mean = np.atleast_2d(eps_obs) @ gain.T
    cov = s_mm - gain @ s_mo.T
    return mean, 0.5 * (cov + cov.T)


def _vec(mat):
    return mat.ravel(order="F")


def _unvec(v, rows, cols):
    return v.reshape((rows, cols), order="F")


# --------------------------------------------------------------------------
# the sampler
# --------------------------------------------------------------------------

class FactoredDesign:
    """Emulator design at fixed inputs, as a function of the parameters.

    With t shared by every row, each component block factors into an
    x-only part (computed once) times a row vector depending on theta only.
    """

    def __init__(self, evaluator, n_inputs, x_unit):
        from .kernels import product_columns

        self.evaluator = evaluator
        self.n_inputs = p = n_inputs
        self.n_params = len(evaluator.variables) - p
        x_unit = np.atleast_2d(np.asarray(x_unit, dtype=float)).reshape(-1, p)
        self.n_rows = n = x_unit.shape[0]
        x_pts = np.hstack([x_unit, np.full((n, self.n_params), 0.5)])
        x_cols = evaluator.variable_columns(x_pts, variables=range(p)) if n and p else None
        self.xfactor, self.tindex = [], []
        self.components_of_param = [[] for _ in range(self.n_params)]
        for j, comp in enumerate(evaluator.components):
            x_axes = [a for a, v in enumerate(comp.variables) if v < p]
            t_axes = [a for a, v in enumerate(comp.variables) if v >= p]
            ix = evaluator.index[j]
            if x_axes and n:
                xf = product_columns(x_cols, np.ascontiguousarray(ix[:, x_axes]))
            else:
                xf = np.ones((n, comp.term_count))
            self.xfactor.append(xf)
            self.tindex.append(np.ascontiguousarray(ix[:, t_axes]) if t_axes else None)
            for a in t_axes:
                self.components_of_param[comp.variables[a] - p].append(j)

    def _theta_columns(self, thetas):
        thetas = np.atleast_2d(np.asarray(thetas, dtype=float))
        pts = np.hstack([np.full((thetas.shape[0], self.n_inputs), 0.5), thetas])
        return self.evaluator.variable_columns(
            pts, variables=range(self.n_inputs, self.n_inputs + self.n_params)
        )

    def blocks(self, theta, which=None):
        """Design blocks {j: N x L_j} at one parameter vector."""
        row = self._theta_columns(theta)[0]
        which = range(len(self.xfactor)) if which is None else which
        out = {}
        for j in which:
            ix = self.tindex[j]
            out[j] = self.xfactor[j] if ix is None else self.xfactor[j] * np.prod(row[ix], axis=1)
        return out

    def xmatrix(self):
        return np.hstack(self.xfactor)

    def theta_factors(self, thetas):
        """S x (total columns) multipliers, one row per parameter vector."""
        cols = self._theta_columns(thetas)
        parts = []
        for j, ix in enumerate(self.tindex):
            if ix is None:
                parts.append(np.ones((cols.shape[0], self.xfactor[j].shape[1])))
            else:
                parts.append(np.prod(cols[:, ix], axis=2))
        return np.hstack(parts)


class Sampler:
    """Holds the fixed design quantities and the mutable state of one chain."""

    def __init__(self, data: PreparedData, priors: PriorSpec, catalog: ModelCatalog,
                 config: ChainConfig, state: ParameterState | None = None, rng=None):
        self.data = data
        self.priors = priors
        self.catalog = catalog
        self.config = config
        self.rng = rng if rng is not None else np.random.default_rng(config.seed)
        self.n_out = data.n_outputs
        self.sim_residual_evaluations = 0
        priors.check_against(catalog)

        self.emu = catalog.emulator_evaluator()
        self.disc = catalog.discrepancy_evaluator()
        self.J = len(catalog.emulator)
        self.K = len(catalog.discrepancy)
        p = catalog.n_inputs

        self.phi_sim = self.emu.blocks(data.w_sim)
        self.gram_sim = [b.T @ b for b in self.phi_sim]
        self.psi = self.disc.blocks(data.x_exp) if data.n_exp else [
            np.zeros((0, c.term_count)) for c in catalog.discrepancy
        ]
        self.gram_psi = [b.T @ b for b in self.psi]

        self.design = FactoredDesign(self.emu, p, data.x_exp)
        self.components_of_param = self.design.components_of_param
        self.theta_components = sorted({j for js in self.components_of_param for j in js})

        self.state = state if state is not None else init_state(data, priors, catalog, rng=self.rng)
        self.continuous = [q for q, s in enumerate(catalog.parameters) if not s.is_categorical]
        self.categorical = [q for q, s in enumerate(catalog.parameters) if s.is_categorical]
        self.log_sd = np.full(catalog.n_params, math.log(config.initial_proposal_sd))
        self.attempts = np.zeros(catalog.n_params, dtype=np.int64)
        self.accepts = np.zeros(catalog.n_params, dtype=np.int64)
        self.attempts_post = np.zeros(catalog.n_params, dtype=np.int64)
        self.accepts_post = np.zeros(catalog.n_params, dtype=np.int64)
        self.cat_attempts = np.zeros(2, dtype=np.int64)  # [burn-in, post]
        self.cat_accepts = np.zeros(2, dtype=np.int64)
        self.phi_exp = [None] * self.J
        self._set_theta_blocks(self.state.theta)
        self.refresh()

    # ---------------------------------------------------------------- design
    def exp_blocks(self, theta, which=None):
        return self.design.blocks(theta, which)

    def _set_theta_blocks(self, theta, which=None):
        for j, blk in self.exp_blocks(theta, which).items():
            self.phi_exp[j] = blk
        self.gram_exp = [b.T @ b for b in self.phi_exp]

    # ------------------------------------------------------------- residuals
    def refresh(self):
        s = self.state
        n, c = self.data.n_exp, self.n_out
        self.eta_exp = np.zeros((n, c))
        for j in range(self.J):
            self.eta_exp += self.phi_exp[j] @ s.B[j]
        self.delta_exp = np.zeros((n, c))
        for k in range(self.K):
            self.delta_exp += self.psi[k] @ s.C[k]
        self.eta_sim = np.zeros((self.data.n_sim, c))
        for j in range(self.J):
            self.eta_sim += self.phi_sim[j] @ s.B[j]

    def _sim_residual(self):
        self.sim_residual_evaluations += 1
        return self.data.y_sim - self.eta_sim

    def exp_residual(self):
        return self.state.y_exp - self.eta_exp - self.delta_exp

    def _inverse(self, mat, name):
        chol = cholesky_jittered(mat, name)
        inv = linalg.cho_solve((chol, True), np.eye(mat.shape[0]), check_finite=False)
        return 0.5 * (inv + inv.T)

    # --------------------------------------------------------- conditionals
    def b_conditional(self, j):
        """Precision-form conditional of vec(B_j): returns (mean, precision chol)."""
        s = self.state
        L = self.catalog.emulator[j].term_count
        s_inv = self._inverse(s.Sigma, "Sigma")
        u_inv = self._inverse(s.Upsilon, "Upsilon")
        l_inv = self._inverse(s.Lambda[j], f"Lambda[{j}]")
        r_exp = self.exp_residual() + self.phi_exp[j] @ s.B[j]
        r_sim = self._sim_residual() + self.phi_sim[j] @ s.B[j]
        prec = (np.kron(s_inv, self.gram_exp[j]) + np.kron(u_inv, self.gram_sim[j])
                + np.kron(l_inv, np.eye(L)))
        rhs = _vec(self.phi_exp[j].T @ r_exp @ s_inv + self.phi_sim[j].T @ r_sim @ u_inv)
        return gaussian_from_precision(prec, rhs, f"B[{j}] conditional")

    def c_conditional(self, k, s_inv=None):
        s = self.state
        L = self.catalog.discrepancy[k].term_count
        s_inv = self._inverse(s.Sigma, "Sigma") if s_inv is None else s_inv
        o_inv = self._inverse(s.Omega[k], f"Omega[{k}]")
        r = self.exp_residual() + self.psi[k] @ s.C[k]
        prec = np.kron(s_inv, self.gram_psi[k]) + np.kron(o_inv, np.eye(L))
        rhs = _vec(self.psi[k].T @ r @ s_inv)
        return gaussian_from_precision(prec, rhs, f"C[{k}] conditional")

    def lambda_posterior(self, j):
        return inv_wishart_posterior(self.state.B[j], self.priors.lam)

    def omega_posterior(self, k):
        return inv_wishart_posterior(self.state.C[k], self.priors.omega)

    def sigma_posterior(self):
        return inv_wishart_posterior(self.exp_residual(), self.priors.sigma)

    def upsilon_posterior(self):
        return inv_wishart_posterior(self._sim_residual(), self.priors.upsilon)

    # ------------------------------------------------------------ Gibbs steps
    def update_B(self, j):
        s = self.state
        L = self.catalog.emulator[j].term_count
        mean, chol = self.b_conditional(j)
        new = _unvec(sample_from_precision(mean, chol, self.rng), L, self.n_out)
        diff = new - s.B[j]
        self.eta_exp += self.phi_exp[j] @ diff
        self.eta_sim += self.phi_sim[j] @ diff
        s.B[j] = new

    def update_C(self, k):
        s = self.state
        L = self.catalog.discrepancy[k].term_count
        mean, chol = self.c_conditional(k)
        new = _unvec(sample_from_precision(mean, chol, self.rng), L, self.n_out)
        self.delta_exp += self.psi[k] @ (new - s.C[k])
        s.C[k] = new

    def update_lambda(self, j):
        scale, df = self.lambda_posterior(j)
        self.state.Lambda[j] = sample_inv_wishart(scale, df, self.rng)

    def update_omega(self, k):
        scale, df = self.omega_posterior(k)
        self.state.Omega[k] = sample_inv_wishart(scale, df, self.rng)

    def update_sigma(self):
        scale, df = self.sigma_posterior()
        self.state.Sigma = sample_inv_wishart(scale, df, self.rng)

    def update_upsilon(self):
        scale, df = self.upsilon_posterior()
        self.state.Upsilon = sample_inv_wishart(scale, df, self.rng)

    def impute_missing(self):
        s = self.state
        miss = s.missing
        if miss is None or not miss.any():
            return
        mean_rows = self.eta_exp + self.delta_exp
        patterns = {}
        for r in np.flatnonzero(miss.any(axis=1)):
            patterns.setdefault(tuple(miss[r]), []).append(r)
        for pattern, rows in sorted(patterns.items()):
            rows = np.array(rows)
            mis = np.flatnonzero(pattern)
            obs = np.flatnonzero(~np.array(pattern))
            eps_obs = s.y_exp[np.ix_(rows, obs)] - mean_rows[np.ix_(rows, obs)]
            cmean, ccov = impute_conditional(s.Sigma, eps_obs, mis, obs)
            chol = cholesky_jittered(ccov, "imputation covariance")
            draw = cmean + self.rng.standard_normal((len(rows), len(mis))) @ chol.T
            s.y_exp[np.ix_(rows, mis)] = mean_rows[np.ix_(rows, mis)] + draw

    # -------------------------------------------------------------- MH steps
    def exp_loglik(self, eta_exp=None, delta_exp=None):
        """Experimental-data log likelihood (the simulator term is theta-free)."""
        eta = self.eta_exp if eta_exp is None else eta_exp
        delta = self.delta_exp if delta_exp is None else delta_exp
        resid = self.state.y_exp - eta - delta
        chol = cholesky_jittered(self.state.Sigma, "Sigma")
        linv = linalg.solve_triangular(chol, np.eye(self.n_out), lower=True, check_finite=False)
        from .kernels import row_quadform
        quad = row_quadform(resid, np.ascontiguousarray(linv))
        n = resid.shape[0]
        return -0.5 * quad - n * float(np.sum(np.log(np.diag(chol)))) - 0.5 * n * self.n_out * _LOG_2PI

    def _eta_at(self, theta, which):
        blocks = self.exp_blocks(theta, which)
        eta = self.eta_exp.copy()
        for j, blk in blocks.items():
            eta += (blk - self.phi_exp[j]) @ self.state.B[j]
        return eta, blocks

    def mh_continuous_theta(self, q, post_burn=False):
        s = self.state
        u = min(max(s.theta[q], _EDGE), 1.0 - _EDGE)
        sd = math.exp(self.log_sd[q])
        u_new = float(special.expit(special.logit(u) + sd * self.rng.standard_normal()))
        self.attempts[q] += 1
        self.attempts_post[q] += post_burn
        if not 0.0 < u_new < 1.0:
            return False
        theta_new = s.theta.copy()
        theta_new[q] = u_new
        lp_new = theta_log_prior(self.priors, self.catalog, theta_new)
        if lp_new == -math.inf:
            return False
        lp_old = theta_log_prior(self.priors, self.catalog, s.theta)
        if lp_old == -math.inf:
            raise NumericalError(f"current theta[{q}] has zero prior density")
        which = self.components_of_param[q]
        eta_new, blocks = self._eta_at(theta_new, which)
        log_ratio = (self.exp_loglik(eta_new) + lp_new + math.log(u_new * (1.0 - u_new))
                     - self.exp_loglik() - lp_old - math.log(u * (1.0 - u)))
        if math.log(self.rng.uniform()) < log_ratio:
            s.theta = theta_new
            self.eta_exp = eta_new
            for j, blk in blocks.items():
                self.phi_exp[j] = blk
                self.gram_exp[j] = blk.T @ blk
            self.accepts[q] += 1
            self.accepts_post[q] += post_burn
            return True
        return False

    def _discrepancy_log_prior(self, C, omega):
        total = 0.0
        for ck, om in zip(C, omega):
            chol = cholesky_jittered(om, "Omega")
            z = linalg.solve_triangular(chol, ck.T, lower=True, check_finite=False)
            total += (-0.5 * float(np.sum(z * z)) - ck.shape[0] * float(np.sum(np.log(np.diag(chol))))
                      - 0.5 * ck.size * _LOG_2PI)
        return total

    def _sequential_discrepancy(self, eta_exp, start_C, target_C=None):
        """Sequential C_k conditionals at a fixed emulator fit.

        Draws a proposal when ``target_C`` is None; otherwise evaluates the
        density of moving from ``start_C`` to ``target_C``.  Returns the
        proposed blocks and the log proposal density.
        """
        s = self.state
        saved = (s.C, self.eta_exp, self.delta_exp)
        work = [c.copy() for c in start_C]
        s.C = work
        self.eta_exp = eta_exp
        self.delta_exp = sum((self.psi[k] @ work[k] for k in range(self.K)),
                             np.zeros_like(eta_exp))
        s_inv = self._inverse(s.Sigma, "Sigma")
        logq = 0.0
        try:
            for k in range(self.K):
                L = self.catalog.discrepancy[k].term_count
                mean, chol = self.c_conditional(k, s_inv)
                if target_C is None:
                    x = sample_from_precision(mean, chol, self.rng)
                else:
                    x = _vec(target_C[k])
                logq += logpdf_from_precision(x, mean, chol)
                new = _unvec(x, L, self.n_out)
                self.delta_exp = self.delta_exp + self.psi[k] @ (new - work[k])
                work[k] = new
            delta = self.delta_exp
        finally:
            s.C, self.eta_exp, self.delta_exp = saved
        return work, delta, logq

    def mh_categorical_block(self, post_burn=False):
        s = self.state
        if not self.categorical:
            return False
        theta_new = s.theta.copy()
        for q in self.categorical:
            g = self.catalog.parameters[q].n_levels
            theta_new[q] = float(self.rng.integers(1, g + 1))
        which = sorted({j for q in self.categorical for j in self.components_of_param[q]})
        eta_new, blocks = self._eta_at(theta_new, which)
        C_new, delta_new, log_fwd = self._sequential_discrepancy(eta_new, s.C)
        _, _, log_rev = self._sequential_discrepancy(self.eta_exp, C_new, target_C=s.C)
        lp_new = theta_log_prior(self.priors, self.catalog, theta_new)
        lp_old = theta_log_prior(self.priors, self.catalog, s.theta)
        log_ratio = (
            self.exp_loglik(eta_new, delta_new) + lp_new + self._discrepancy_log_prior(C_new, s.Omega)
            - self.exp_loglik() - lp_old - self._discrepancy_log_prior(s.C, s.Omega)
            + log_rev - log_fwd
        )
        self.cat_attempts[int(post_burn)] += 1
        if lp_new > -math.inf and math.log(self.rng.uniform()) < log_ratio:
            s.theta = theta_new
            s.C = C_new
            self.eta_exp = eta_new
            self.delta_exp = delta_new
            for j, blk in blocks.items():
                self.phi_exp[j] = blk
                self.gram_exp[j] = blk.T @ blk
            self.cat_accepts[int(post_burn)] += 1
            return True
        return False

    # ------------------------------------------------------------ iteration
    def iterate(self, i, timings=None):
        """One full scan.  ``i`` is the 0-based iteration index."""
        upd = self.config.update
        post = i >= self.config.burn_in
        clock = time.perf_counter
        t = clock()

        def mark(name):
            nonlocal t
            if timings is not None:
                now = clock()
                timings[name] = timings.get(name, 0.0) + now - t
                t = now

        self.refresh()
        if "B" in upd:
            for j in range(self.J):
                self.update_B(j)
        mark("B")
        if "C" in upd:
            for k in range(self.K):
                self.update_C(k)
        mark("C")
        if "Lambda" in upd:
            for j in range(self.J):
                self.update_lambda(j)
        if "Omega" in upd:
            for k in range(self.K):
                self.update_omega(k)
        if "Sigma" in upd:
            self.update_sigma()
        if "Upsilon" in upd:
            self.update_upsilon()
        mark("covariances")
        if "missing" in upd:
            self.impute_missing()
        mark("missing")
        if "theta" in upd:
            for q in self.continuous:
                accepted = self.mh_continuous_theta(q, post)
                if self.config.adapt_during_burnin and not post:
                    gamma = (i + 1) ** -0.6
                    self.log_sd[q] += gamma * (float(accepted) - self.config.target_acceptance)
        mark("theta")
        if "categorical" in upd:
            self.mh_categorical_block(post)
        mark("categorical")


# --------------------------------------------------------------------------
# chains
# --------------------------------------------------------------------------

@dataclass(eq=False)
class Chain:
    """Post-burn-in draws of one chain plus tuning diagnostics."""

    config: ChainConfig
    catalog: ModelCatalog
    priors: PriorSpec
    transform: OutputTransform
    iteration: np.ndarray
    theta: np.ndarray          # S x Q, unit scale / levels
    B: np.ndarray              # S x (emulator columns) x C
    C: np.ndarray              # S x (discrepancy columns) x C
    Sigma: np.ndarray          # S x C x C
    Upsilon: np.ndarray
    Lambda: np.ndarray         # S x J x C x C
    Omega: np.ndarray          # S x K x C x C
    imputed: np.ndarray        # S x (missing cells)
    loglik: np.ndarray
    attempts: np.ndarray = None
    accepts: np.ndarray = None
    proposal_sd: np.ndarray = None
    categorical_acceptance: float = float("nan")
    timings: dict = field(default_factory=dict)
    final_state: ParameterState | None = None
    output_names: tuple = ()
    missing_cells: np.ndarray | None = None

    @property
    def n_samples(self):
        return self.theta.shape[0]

    def theta_native(self):
        return np.array([theta_to_native(t, self.catalog) for t in self.theta]).reshape(self.theta.shape)

    def acceptance_rates(self):
        with np.errstate(invalid="ignore", divide="ignore"):
            return self.accepts / self.attempts

    def per_iteration_time(self):
        return self.timings.get("total", float("nan")) / self.config.iterations

    def state(self, s):
        """Snapshot of recorded sample ``s`` as a :class:`ParameterState`."""
        y = np.array(self.final_state.y_exp, copy=True)
        miss = self.final_state.missing
        if miss is not None and miss.any():
            y[miss] = self.imputed[s]
        return ParameterState(
            self.theta[s].copy(),
            [b.copy() for b in self.emulator_coefficients(s)],
            [c.copy() for c in self.discrepancy_coefficients(s)],
            list(self.Lambda[s].copy()),
            list(self.Omega[s].copy()),
            self.Sigma[s].copy(),
            self.Upsilon[s].copy(),
            y,
            None if miss is None else miss.copy(),
        )

    def emulator_coefficients(self, s):
        return _split_blocks(self.B[s], self.catalog.emulator)

    def discrepancy_coefficients(self, s):
        return _split_blocks(self.C[s], self.catalog.discrepancy)


def _split_blocks(flat, components):
    out, start = [], 0
    for comp in components:
        out.append(flat[start : start + comp.term_count])
        start += comp.term_count
    return out


class _Recorder:
    def __init__(self, sampler: Sampler, n_samples):
        s = sampler.state
        c = sampler.n_out
        q = sampler.catalog.n_params
        nb = sum(b.shape[0] for b in s.B)
        nc = sum(m.shape[0] for m in s.C)
        nm = int(s.missing.sum()) if s.missing is not None else 0
        self.arrays = {
            "iteration": np.zeros(n_samples, dtype=np.int64),
            "theta": np.zeros((n_samples, q)),
            "B": np.zeros((n_samples, nb, c)),
            "C": np.zeros((n_samples, nc, c)),
            "Sigma": np.zeros((n_samples, c, c)),
            "Upsilon": np.zeros((n_samples, c, c)),
            "Lambda": np.zeros((n_samples, sampler.J, c, c)),
            "Omega": np.zeros((n_samples, sampler.K, c, c)),
            "imputed": np.zeros((n_samples, nm)),
            "loglik": np.zeros(n_samples),
        }
        self.count = 0

    def record(self, i, sampler: Sampler):
        s, a, r = sampler.state, self.arrays, self.count
        a["iteration"][r] = i
        a["theta"][r] = s.theta
        a["B"][r] = np.vstack(s.B)
        a["C"][r] = np.vstack(s.C)
        a["Sigma"][r] = s.Sigma
        a["Upsilon"][r] = s.Upsilon
        a["Lambda"][r] = np.stack(s.Lambda)
        a["Omega"][r] = np.stack(s.Omega)
        a["imputed"][r] = s.imputed
        a["loglik"][r] = sampler.exp_loglik()
        self.count += 1


def save_checkpoint(path, sampler: Sampler, recorder: _Recorder, next_iteration):
    meta = {
        "version": CHECKPOINT_VERSION,
        "config": sampler.config.to_dict(),
        "next_iteration": int(next_iteration),
        "recorded": recorder.count,
        "rng": sampler.rng.bit_generator.state,
        "rng_name": type(sampler.rng.bit_generator).__name__,
    }
    arrays = sampler.state.to_arrays()
    arrays.update({f"chain/{k}": v for k, v in recorder.arrays.items()})
    arrays.update({
        "tuning/log_sd": sampler.log_sd,
        "tuning/attempts": sampler.attempts,
        "tuning/accepts": sampler.accepts,
        "tuning/attempts_post": sampler.attempts_post,
        "tuning/accepts_post": sampler.accepts_post,
        "tuning/cat_attempts": sampler.cat_attempts,
        "tuning/cat_accepts": sampler.cat_accepts,
    })
    tmp = f"{path}.tmp.npz"
    np.savez(tmp, meta=np.array(json.dumps(meta, sort_keys=True)), **arrays)
    os.replace(tmp, path)


def load_checkpoint(path):
    """Return (meta dict, arrays dict) from a checkpoint file."""
    with np.load(path, allow_pickle=False) as z:
        arrays = {k: z[k] for k in z.files}
    meta = json.loads(str(arrays.pop("meta")))
    if meta.get("version") != CHECKPOINT_VERSION:
        raise ValidationError(f"unsupported checkpoint version {meta.get('version')!r}")
    return meta, arrays


def run_chain(data, priors: PriorSpec, catalog: ModelCatalog, config: ChainConfig,
              transform: OutputTransform | None = None, state: ParameterState | None = None,
              resume: str | None = None, progress=None):
    """Run one chain and return its post-burn-in draws.

    ``data`` may be a raw :class:`Dataset` (validated, scaled and transformed
    here) or an already prepared :class:`PreparedData`.  With ``resume`` the
    chain continues from a checkpoint written by an earlier call with the same
    inputs; the result is identical to an uninterrupted run.
    """
    if isinstance(data, Dataset):
        transform = transform or OutputTransform.identity(data.n_outputs)
        output_names = data.output_names
        prepared = prepare_data(data, catalog, transform)
    else:
        prepared = data
        transform = transform or OutputTransform.identity(prepared.n_outputs)
        output_names = tuple(f"y{c + 1}" for c in range(prepared.n_outputs))

    rng = np.random.default_rng(config.seed)
    start = 0
    meta = arrays = None
    if resume is not None:
        meta, arrays = load_checkpoint(resume)
        state = ParameterState.from_arrays(arrays, len(catalog.emulator), len(catalog.discrepancy))
        rng.bit_generator.state = meta["rng"]
        start = meta["next_iteration"]
    sampler = Sampler(prepared, priors, catalog, config, state=state, rng=rng)
    recorder = _Recorder(sampler, config.n_samples)
    if meta is not None:
        for k in recorder.arrays:
            recorder.arrays[k][:] = arrays[f"chain/{k}"]
        recorder.count = meta["recorded"]
        for k in ("log_sd", "attempts", "accepts", "attempts_post", "accepts_post",
                  "cat_attempts", "cat_accepts"):
            getattr(sampler, k)[:] = arrays[f"tuning/{k}"]

    timings = {}
    t0 = time.perf_counter()
    for i in range(start, config.iterations):
        try:
            sampler.iterate(i, timings)
        except NumericalError as exc:
            raise NumericalError(f"iteration {i}: {exc}") from exc
        if i >= config.burn_in and (i - config.burn_in) % config.thin == 0:
            recorder.record(i, sampler)
        if (config.checkpoint_path and config.checkpoint_every
                and (i + 1) % config.checkpoint_every == 0):
            save_checkpoint(config.checkpoint_path, sampler, recorder, i + 1)
        if progress is not None:
            progress(i)
    timings["total"] = time.perf_counter() - t0
    sampler.state.check()

    a = recorder.arrays
    post = sampler.cat_attempts[1]
    return Chain(
        config=config,
        catalog=catalog,
        priors=priors,
        transform=transform,
        iteration=a["iteration"],
        theta=a["theta"],
        B=a["B"],
        C=a["C"],
        Sigma=a["Sigma"],
        Upsilon=a["Upsilon"],
        Lambda=a["Lambda"],
        Omega=a["Omega"],
        imputed=a["imputed"],
        loglik=a["loglik"],
        attempts=sampler.attempts_post.copy(),
        accepts=sampler.accepts_post.copy(),
        proposal_sd=np.exp(sampler.log_sd),
        categorical_acceptance=float(sampler.cat_accepts[1] / post) if post else float("nan"),
        timings=timings,
        final_state=sampler.state.copy(),
        output_names=tuple(output_names),
        missing_cells=np.argwhere(prepared.missing),
    )


def chain_seeds(seed, n_chains):
    """Independent per-chain seeds derived from one master seed."""
    children = np.random.SeedSequence(seed).spawn(n_chains)
    return [int(c.generate_state(1, dtype=np.uint64)[0]) for c in children]


def _run_one(args):
    data, priors, catalog, config, transform = args
    return run_chain(data, priors, catalog, config, transform)


def run_chains(data, priors, catalog, config: ChainConfig, n_chains=1, transform=None, workers=None):
    """Run ``n_chains`` independent chains (optionally in worker processes)."""
    configs = []
    for s in chain_seeds(config.seed, n_chains):
        d = config.to_dict()
        d["seed"] = s
        d["checkpoint_path"] = None
        configs.append(ChainConfig.from_dict(d))
    if workers is None:
        workers = int(os.environ.get("BSSCAL_THREADS", "1"))
    jobs = [(data, priors, catalog, c, transform) for c in configs]
    if workers <= 1 or n_chains == 1:
        return [_run_one(j) for j in jobs]
    from concurrent.futures import ProcessPoolExecutor

    with ProcessPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(_run_one, jobs))


__all__ = [
    "ALL_BLOCKS",
    "Chain",
    "ChainConfig",
    "FactoredDesign",
    "Sampler",
    "chain_seeds",
    "covariance_from_precision",
    "gaussian_from_precision",
    "impute_conditional",
    "inv_wishart_posterior",
    "load_checkpoint",
    "logpdf_from_precision",
    "run_chain",
    "run_chains",
    "sample_from_precision",
    "sample_inv_wishart",
    "save_checkpoint",
]
