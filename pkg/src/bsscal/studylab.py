"""Truth-known synthetic studies: designs, truths, datasets and the study loop."""
from __future__ import annotations

import csv
import json
import time
from dataclasses import dataclass, field

import numpy as np

from .analysis import predict, r_squared, study_metrics
from .basis import ModelCatalog, VariableSpec
from .errors import BSSCalError, ValidationError
from .mcmc import ChainConfig, run_chain, sample_inv_wishart
from .model import Dataset, OutputTransform, PriorSpec, sample_theta_prior, scale_columns, theta_to_native


def lhs(n, dims, seed=None, rng=None):
    """Latin hypercube design in native units.

    Continuous columns get one uniform point per equal-width stratum,
    independently permuted.  Categorical columns get a balanced assignment
    of levels (each used floor(n/G) or ceil(n/G) times), shuffled.
    """
    if n < 1:
        raise ValidationError("LHS needs n >= 1")
    rng = rng if rng is not None else np.random.default_rng(seed)
    out = np.empty((n, len(dims)))
    for d, spec in enumerate(dims):
        if spec.is_categorical:
            g = spec.n_levels
            # random choice of which levels get the extra runs
            base = rng.permutation(g)[np.arange(n) % g] + 1
            out[:, d] = rng.permutation(base)
        else:
            u = (rng.permutation(n) + rng.uniform(size=n)) / n
            out[:, d] = spec.lo + u * (spec.hi - spec.lo)
    return out


def _psd_sqrt(mat):
    mat = np.atleast_2d(np.asarray(mat, dtype=float))
    w, v = np.linalg.eigh(0.5 * (mat + mat.T))
    if w.min() < -1e-10 * max(1.0, abs(w).max()):
        raise ValidationError("covariance matrix is not positive semidefinite")
    return v * np.sqrt(np.clip(w, 0.0, None))


@dataclass(eq=False)
class SyntheticTruth:
    """Known model ingredients from which synthetic data are generated."""

    catalog: ModelCatalog
    B: list
    C: list
    theta: np.ndarray       # unit scale / levels
    Sigma: np.ndarray
    Upsilon: np.ndarray

    @property
    def n_outputs(self):
        return self.Sigma.shape[0]

    def theta_native(self):
        return theta_to_native(self.theta, self.catalog)

    def eta(self, x, t=None):
        """True emulator at native inputs ``x`` and parameters ``t`` (default theta)."""
        cat = self.catalog
        x = np.atleast_2d(np.asarray(x, dtype=float)).reshape(-1, cat.n_inputs)
        if t is None:
            t = np.repeat(self.theta_native()[None, :], x.shape[0], axis=0)
        t = np.atleast_2d(np.asarray(t, dtype=float)).reshape(-1, cat.n_params)
        w = np.hstack([scale_columns(x, cat.inputs), scale_columns(t, cat.parameters)])
        return cat.emulator_evaluator().matrix(w) @ np.vstack(self.B)

    def delta(self, x):
        cat = self.catalog
        x = np.atleast_2d(np.asarray(x, dtype=float)).reshape(-1, cat.n_inputs)
        return cat.discrepancy_evaluator().matrix(scale_columns(x, cat.inputs)) @ np.vstack(self.C)


def draw_truth(catalog: ModelCatalog, lam=None, omega=None, sigma=None, upsilon=None,
               priors: PriorSpec | None = None, seed=None, component_scales=None,
               discrepancy_scales=None, theta=None, n_outputs=None):
    """Draw a synthetic truth from the BSS-ANOVA prior.

    ``lam``/``omega`` are C x C component covariances (default identity),
    multiplied per component by ``component_scales`` / ``discrepancy_scales``
    (dicts keyed by component label; a scale of 0 silences a component).
    ``theta`` (native units) fixes the true parameters, otherwise they are
    drawn from the theta prior.  ``sigma``/``upsilon`` default to draws from
    their priors.
    """
    rng = np.random.default_rng(seed)
    if n_outputs is None:
        for m in (lam, omega, sigma, upsilon):
            if m is not None:
                n_outputs = np.atleast_2d(m).shape[0]
                break
        else:
            n_outputs = priors.sigma.dim if priors is not None else 1
    c = n_outputs
    lam = np.eye(c) if lam is None else np.atleast_2d(np.asarray(lam, dtype=float))
    omega = np.eye(c) if omega is None else np.atleast_2d(np.asarray(omega, dtype=float))
    priors = priors or PriorSpec.default(catalog, c)
    comp_scales = component_scales or {}
    disc_scales = discrepancy_scales or {}

    def coefs(components, base, scales):
        root = _psd_sqrt(base)
        out = []
        for comp in components:
            s = float(scales.get(comp.label(catalog.variables), 1.0))
            z = rng.standard_normal((comp.term_count, c))
            out.append(np.sqrt(s) * z @ root.T)
        return out

    B = coefs(catalog.emulator, lam, comp_scales)
    C = coefs(catalog.discrepancy, omega, disc_scales)
    if theta is None:
        th = sample_theta_prior(priors, catalog, rng)
    else:
        th = np.asarray(theta, dtype=float).copy()
        for q, spec in enumerate(catalog.parameters):
            if not spec.is_categorical:
                th[q] = scale_columns(th[q : q + 1, None], [spec])[0, 0]
    if sigma is None:
        sigma = sample_inv_wishart(priors.sigma.scale, priors.sigma.df, rng)
    if upsilon is None:
        upsilon = sample_inv_wishart(priors.upsilon.scale, priors.upsilon.df, rng)
    return SyntheticTruth(catalog, B, C, th, np.atleast_2d(sigma).astype(float),
                          np.atleast_2d(upsilon).astype(float))


def generate_dataset(truth: SyntheticTruth, x_exp, sim_design, seed=None, missing_mask=None,
                     transform: OutputTransform | None = None):
    """Synthetic experimental and simulator data from a known truth.

    ``sim_design`` holds native (x, t) rows.  ``missing_mask`` (N x C
    booleans) blanks experimental cells.  With a non-identity ``transform``
    the model is generated on the transformed scale and mapped back.
    """
    cat = truth.catalog
    rng = np.random.default_rng(seed)
    x_exp = np.atleast_2d(np.asarray(x_exp, dtype=float)).reshape(-1, cat.n_inputs)
    sim = np.atleast_2d(np.asarray(sim_design, dtype=float))
    if sim.shape[1] != cat.n_inputs + cat.n_params:
        raise ValidationError("simulator design must have one column per input and parameter")
    if len(sim) == 0:
        raise ValidationError("simulator design is empty")
    c = truth.n_outputs
    x_sim, t_sim = sim[:, : cat.n_inputs], sim[:, cat.n_inputs :]
    ye = truth.eta(x_exp) + truth.delta(x_exp) + rng.standard_normal((len(x_exp), c)) @ _psd_sqrt(truth.Sigma).T
    ys = truth.eta(x_sim, t_sim) + rng.standard_normal((len(sim), c)) @ _psd_sqrt(truth.Upsilon).T
    if transform is not None:
        ye, ys = transform.inverse(ye), transform.inverse(ys)
    if missing_mask is not None:
        mask = np.asarray(missing_mask, dtype=bool)
        if mask.shape != ye.shape:
            raise ValidationError(f"missing mask has shape {mask.shape}, expected {ye.shape}")
        ye = ye.copy()
        ye[mask] = np.nan
    return Dataset(x_exp, ye, x_sim, t_sim, ys)


def dataset_seeds(seed, n):
    """Per-dataset seeds derived from a master seed (data seed, chain seed)."""
    children = np.random.SeedSequence(seed).spawn(n)
    out = []
    for ch in children:
        a, b = ch.generate_state(2, dtype=np.uint64)
        out.append((int(a), int(b)))
    return out


@dataclass(eq=False)
class StudyReport:
    metrics: list
    records: list
    failures: list
    mean_iteration_time: float
    manifest: dict = field(default_factory=dict)

    def table(self):
        rows = [(m.metric, m.parameter, m.estimate, m.stderr) for m in self.metrics]
        rows.append(("seconds_per_iteration", "", self.mean_iteration_time, float("nan")))
        return rows

    def write_csv(self, path):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["metric", "parameter", "estimate", "standard_error"])
            for r in self.table():
                w.writerow([r[0], r[1], repr(float(r[2])), repr(float(r[3]))])

    def write_manifest(self, path):
        with open(path, "w") as fh:
            json.dump(self.manifest, fh, indent=2, sort_keys=True)


def run_study(n_datasets, truth: SyntheticTruth, x_exp, sim_design, config: ChainConfig,
              priors: PriorSpec | None = None, seed=0, missing_mask=None, x_holdout=None,
              transform: OutputTransform | None = None, progress=None):
    """Generate, calibrate and score ``n_datasets`` independent datasets.

    ``x_holdout`` adds fresh experimental rows (never used for fitting) on
    which out-of-sample R^2 is computed with and without the discrepancy.
    Failing datasets are recorded and skipped.
    """
    if n_datasets < 1:
        raise ValidationError("n_datasets must be >= 1")
    cat = truth.catalog
    priors = priors or PriorSpec.default(cat, truth.n_outputs)
    x_exp = np.atleast_2d(np.asarray(x_exp, dtype=float)).reshape(-1, cat.n_inputs)
    n_fit = len(x_exp)
    x_all = x_exp if x_holdout is None else np.vstack(
        [x_exp, np.atleast_2d(np.asarray(x_holdout, dtype=float)).reshape(-1, cat.n_inputs)]
    )
    mask_all = None
    if missing_mask is not None:
        mask_all = np.zeros((len(x_all), truth.n_outputs), dtype=bool)
        mask_all[:n_fit] = missing_mask
    chains, truths, records, failures, times = [], [], [], [], []
    seeds = dataset_seeds(seed, n_datasets)
    for d, (data_seed, chain_seed) in enumerate(seeds):
        cfg = ChainConfig.from_dict({**config.to_dict(), "seed": chain_seed, "checkpoint_path": None})
        try:
            full = generate_dataset(truth, x_all, sim_design, seed=data_seed,
                                    missing_mask=mask_all, transform=transform)
            data = full.subset_experimental(np.arange(n_fit))
            t0 = time.perf_counter()
            chain = run_chain(data, priors, cat, cfg, transform)
            times.append(chain.per_iteration_time())
            rec = {
                "dataset": d,
                "data_seed": data_seed,
                "chain_seed": chain_seed,
                "seconds": time.perf_counter() - t0,
                "theta_mean": chain.theta_native().mean(axis=0).tolist(),
                "acceptance": chain.acceptance_rates().tolist(),
                "categorical_acceptance": chain.categorical_acceptance,
            }
            if x_holdout is not None:
                y_hold = full.y_exp[n_fit:]
                pred = predict(chain, x_all[n_fit:], n_realizations=0)
                rec["r2_eta"] = r_squared(y_hold, pred.eta_mean).tolist()
                rec["r2_zeta"] = r_squared(y_hold, pred.zeta_mean).tolist()
            chains.append(chain)
            truths.append(truth.theta_native())
            records.append(rec)
        except BSSCalError as exc:
            failures.append({"dataset": d, "data_seed": data_seed, "error": str(exc)})
        if progress is not None:
            progress(d)
    metrics = study_metrics(chains, truths) if chains else []
    manifest = {
        "master_seed": seed,
        "n_datasets": n_datasets,
        "config": config.to_dict(),
        "datasets": [{"dataset": d, "data_seed": a, "chain_seed": b} for d, (a, b) in enumerate(seeds)],
        "failures": failures,
        "variables": [_spec_dict(v) for v in cat.variables],
        "true_theta": truth.theta_native().tolist(),
    }
    return StudyReport(
        metrics=metrics,
        records=records,
        failures=failures,
        mean_iteration_time=float(np.mean(times)) if times else float("nan"),
        manifest=manifest,
    )


def _spec_dict(spec: VariableSpec):
    return {
        "name": spec.name,
        "kind": spec.kind,
        "role": spec.role,
        "lo": spec.lo,
        "hi": spec.hi,
        "levels": list(spec.levels) if spec.levels else None,
    }


__all__ = [
    "StudyReport",
    "SyntheticTruth",
    "dataset_seeds",
    "draw_truth",
    "generate_dataset",
    "lhs",
    "run_study",
]
