"""Command-line interface.

Commands: ``calibrate``, ``predict``, ``sa``, ``cv``, ``study`` and
``basis dump``.  Exit codes: 0 success, 1 validation or usage error,
2 numerical failure, 3 I/O failure.
"""
from __future__ import annotations

import argparse
import csv
import io
import itertools
import json
import os
import sys
import zipfile
from dataclasses import dataclass, field

import numpy as np

from . import __version__
from .analysis import (
    cross_validate,
    discrepancy_effects,
    predict,
    summarize_theta,
    total_sensitivity,
)
from .basis import CATEGORICAL, CONTINUOUS, INPUT, PARAMETER, CatalogPolicy, ModelCatalog, VariableSpec, build_kl_basis
from .errors import BSSCalError, ConfigError, NumericalError, ValidationError
from .mcmc import Chain, ChainConfig, run_chains
from .model import (
    Dataset,
    DiscretePrior,
    OutputTransform,
    PriorSpec,
    ScaledBeta,
    UniformPrior,
    WishartPrior,
)
from .studylab import draw_truth, lhs, run_study

FORMAT_VERSION = 1

EXIT_OK, EXIT_VALIDATION, EXIT_NUMERICAL, EXIT_IO = 0, 1, 2, 3


# --------------------------------------------------------------------------
# configuration
# --------------------------------------------------------------------------

_POLICY_KEYS = {f for f in CatalogPolicy.__dataclass_fields__}
_CHAIN_KEYS = {f for f in ChainConfig.__dataclass_fields__}


def _matrix(value, dim, what):
    arr = np.asarray(value, dtype=float)
    if arr.ndim == 0:
        return float(arr) * np.eye(dim)
    if arr.ndim == 1:
        if arr.shape[0] != dim:
            raise ConfigError(f"{what}: expected {dim} diagonal entries, got {arr.shape[0]}")
        return np.diag(arr)
    if arr.shape != (dim, dim):
        raise ConfigError(f"{what}: expected a {dim}x{dim} matrix, got shape {arr.shape}")
    return arr


def _wishart(entry, dim, what, default_mean, default_df):
    entry = dict(entry or {})
    unknown = set(entry) - {"mean", "scale", "df"}
    if unknown:
        raise ConfigError(f"{what}: unknown keys {sorted(unknown)}")
    df = float(entry.get("df", default_df))
    if "scale" in entry and "mean" in entry:
        raise ConfigError(f"{what}: give either 'mean' or 'scale', not both")
    if "scale" in entry:
        return WishartPrior(_matrix(entry["scale"], dim, what), df)
    return WishartPrior.from_mean(_matrix(entry.get("mean", default_mean), dim, what), df)


def _theta_prior(spec: VariableSpec, entry):
    if entry is None:
        if spec.is_categorical:
            return DiscretePrior.uniform(spec.n_levels)
        return UniformPrior(spec.lo, spec.hi)
    kind = entry.get("type")
    if kind == "uniform":
        return UniformPrior(float(entry.get("lo", spec.lo)), float(entry.get("hi", spec.hi)))
    if kind == "beta":
        return ScaledBeta(float(entry["a"]), float(entry["b"]),
                          float(entry.get("lo", spec.lo)), float(entry.get("hi", spec.hi)))
    if kind == "discrete":
        weights = entry.get("weights")
        if weights is None:
            return DiscretePrior.uniform(spec.n_levels)
        return DiscretePrior(tuple(float(w) for w in weights))
    raise ConfigError(f"prior for {spec.name!r}: unknown type {kind!r}")


@dataclass
class OutputSpec:
    name: str
    transform: str = "identity"
    simulator_column: str = ""

    def __post_init__(self):
        if not self.simulator_column:
            self.simulator_column = "ystar" + self.name[1:] if self.name.startswith("y") else self.name


@dataclass
class RunConfig:
    """Validated contents of a JSON run configuration."""

    variables: tuple
    outputs: tuple
    theta_priors: dict
    wishart: dict
    catalog: dict
    chain: dict
    prediction: dict = field(default_factory=dict)
    paths: dict = field(default_factory=dict)
    study: dict = field(default_factory=dict)
    raw: dict = field(default_factory=dict)

    @classmethod
    def from_dict(cls, d):
        if not isinstance(d, dict):
            raise ConfigError("configuration must be a JSON object")
        known = {"variables", "outputs", "theta_priors", "wishart", "catalog", "chain",
                 "prediction", "paths", "study", "version"}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown configuration keys {sorted(unknown)}")
        if "variables" not in d or "outputs" not in d:
            raise ConfigError("configuration needs 'variables' and 'outputs'")
        variables = []
        for i, v in enumerate(d["variables"]):
            if "name" not in v:
                raise ConfigError(f"variables[{i}] has no name")
            kind = v.get("kind", CONTINUOUS)
            role = v.get("role", INPUT)
            if kind == CATEGORICAL:
                variables.append(VariableSpec(v["name"], kind, levels=tuple(str(x) for x in v.get("levels", ())),
                                              role=role))
            else:
                variables.append(VariableSpec(v["name"], kind, float(v.get("lo", 0.0)),
                                              float(v.get("hi", 1.0)), role=role))
        names = [v.name for v in variables]
        if len(set(names)) != len(names):
            raise ConfigError("variable names must be unique")
        outputs = []
        for i, o in enumerate(d["outputs"]):
            o = {"name": o} if isinstance(o, str) else dict(o)
            if "name" not in o:
                raise ConfigError(f"outputs[{i}] has no name")
            outputs.append(OutputSpec(o["name"], o.get("transform", "identity"), o.get("simulator_column", "")))
        OutputTransform(tuple(o.transform for o in outputs))
        priors = dict(d.get("theta_priors", {}))
        params = {v.name for v in variables if v.role == PARAMETER}
        stray = set(priors) - params
        if stray:
            raise ConfigError(f"theta_priors given for unknown parameters {sorted(stray)}")
        catalog = dict(d.get("catalog", {}))
        bad = set(catalog) - _POLICY_KEYS
        if bad:
            raise ConfigError(f"unknown catalog keys {sorted(bad)}")
        chain = dict(d.get("chain", {}))
        bad = set(chain) - _CHAIN_KEYS
        if bad:
            raise ConfigError(f"unknown chain keys {sorted(bad)}")
        wishart = dict(d.get("wishart", {}))
        bad = set(wishart) - {"lambda", "omega", "sigma", "upsilon"}
        if bad:
            raise ConfigError(f"unknown wishart keys {sorted(bad)}")
        cfg = cls(tuple(variables), tuple(outputs), priors, wishart, catalog, chain,
                  dict(d.get("prediction", {})), dict(d.get("paths", {})), dict(d.get("study", {})), d)
        cfg.build_catalog()
        cfg.priors(cfg.build_catalog())
        cfg.chain_config()
        return cfg

    @classmethod
    def load(cls, path):
        with open(path) as fh:
            try:
                d = json.load(fh)
            except json.JSONDecodeError as exc:
                raise ConfigError(f"{path}: invalid JSON ({exc})") from exc
        return cls.from_dict(d)

    @property
    def output_names(self):
        return tuple(o.name for o in self.outputs)

    @property
    def transform(self):
        return OutputTransform(tuple(o.transform for o in self.outputs))

    def build_catalog(self):
        if not hasattr(self, "_catalog"):
            self._catalog = ModelCatalog.build(self.variables, CatalogPolicy(**self.catalog))
        return self._catalog

    def priors(self, catalog=None):
        catalog = catalog or self.build_catalog()
        c = len(self.outputs)
        theta = tuple(_theta_prior(s, self.theta_priors.get(s.name)) for s in catalog.parameters)
        w = self.wishart
        pri = PriorSpec(
            theta,
            _wishart(w.get("lambda"), c, "wishart.lambda", 1.0, 4.0),
            _wishart(w.get("omega"), c, "wishart.omega", 1.0, 4.0),
            _wishart(w.get("sigma"), c, "wishart.sigma", 0.01, 20.0),
            _wishart(w.get("upsilon"), c, "wishart.upsilon", 0.01, 20.0),
        )
        pri.check_against(catalog)
        return pri

    def chain_config(self, **overrides):
        d = {**self.chain, **{k: v for k, v in overrides.items() if v is not None}}
        return ChainConfig.from_dict(d)


# --------------------------------------------------------------------------
# CSV input
# --------------------------------------------------------------------------

def _read_table(path, what):
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows:
        raise ValidationError(f"{what} file {path} is empty")
    header = [h.strip() for h in rows[0]]
    body = [r for r in rows[1:] if any(cell.strip() for cell in r)]
    for i, r in enumerate(body):
        if len(r) != len(header):
            raise ValidationError(f"{what} row {i + 1}: {len(r)} fields, header has {len(header)}")
    return header, body


def _column(header, body, name, what, spec=None, allow_missing=False):
    if name not in header:
        raise ValidationError(f"{what} file has no column {name!r}")
    j = header.index(name)
    out = np.empty(len(body))
    problems = []
    for i, r in enumerate(body):
        cell = r[j].strip()
        if cell == "":
            if allow_missing:
                out[i] = np.nan
                continue
            problems.append(f"{what} row {i + 1}, column {name!r}: empty value")
            out[i] = np.nan
        elif spec is not None and spec.is_categorical:
            if cell not in spec.levels:
                problems.append(f"{what} row {i + 1}, column {name!r}: unknown level {cell!r}"
                                f" (expected one of {list(spec.levels)})")
                out[i] = np.nan
            else:
                out[i] = spec.levels.index(cell) + 1
        else:
            try:
                out[i] = float(cell)
            except ValueError:
                problems.append(f"{what} row {i + 1}, column {name!r}: not a number: {cell!r}")
                out[i] = np.nan
    return out, problems


def read_dataset(cfg: RunConfig, exp_path, sim_path):
    """Experimental (x*, y*) and simulator (x*, t*, ystar*) CSVs as a :class:`Dataset`."""
    cat = cfg.build_catalog()
    problems = []

    def cols(header, body, names, what, specs=None, allow_missing=False):
        out = []
        for k, name in enumerate(names):
            col, p = _column(header, body, name, what, None if specs is None else specs[k], allow_missing)
            problems.extend(p)
            out.append(col)
        return np.column_stack(out) if out else np.empty((len(body), 0))

    h, b = _read_table(exp_path, "experimental")
    x_exp = cols(h, b, [s.name for s in cat.inputs], "experimental", cat.inputs)
    y_exp = cols(h, b, cfg.output_names, "experimental", allow_missing=True)
    h, b = _read_table(sim_path, "simulator")
    x_sim = cols(h, b, [s.name for s in cat.inputs], "simulator", cat.inputs)
    t_sim = cols(h, b, [s.name for s in cat.parameters], "simulator", cat.parameters)
    y_sim = cols(h, b, [o.simulator_column for o in cfg.outputs], "simulator")
    if problems:
        raise ValidationError(problems[0], problems)
    return Dataset(x_exp, y_exp, x_sim, t_sim, y_sim, cfg.output_names)


def parse_grid(cfg: RunConfig, specs=None, points=None, path=None):
    """Prediction locations: a CSV of input columns, per-input value lists, or a full factorial."""
    cat = cfg.build_catalog()
    if path:
        h, b = _read_table(path, "grid")
        problems, out = [], []
        for s in cat.inputs:
            col, p = _column(h, b, s.name, "grid", s)
            problems.extend(p)
            out.append(col)
        if problems:
            raise ValidationError(problems[0], problems)
        return np.column_stack(out)
    values = {}
    for item in specs or []:
        if "=" not in item:
            raise ValidationError(f"grid spec {item!r} must look like name=v1,v2,...")
        name, vals = item.split("=", 1)
        spec = next((s for s in cat.inputs if s.name == name), None)
        if spec is None:
            raise ValidationError(f"grid spec names unknown input {name!r}")
        if spec.is_categorical:
            values[name] = [float(spec.levels.index(v) + 1) for v in vals.split(",")]
        else:
            values[name] = [float(v) for v in vals.split(",")]
    n = int(points or cfg.prediction.get("points", 11))
    axes = []
    for s in cat.inputs:
        if s.name in values:
            axes.append(values[s.name])
        elif s.is_categorical:
            axes.append([float(g) for g in range(1, s.n_levels + 1)])
        else:
            axes.append(np.linspace(s.lo, s.hi, n).tolist())
    return np.array(list(itertools.product(*axes)), dtype=float).reshape(-1, len(axes))


# --------------------------------------------------------------------------
# deterministic output
# --------------------------------------------------------------------------

def _fmt(v):
    if isinstance(v, (str, bytes)):
        return v
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    return repr(float(v))


def write_csv(path, header, rows):
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for r in rows:
        w.writerow([_fmt(v) for v in r])
    with open(path, "w", newline="") as fh:
        fh.write(buf.getvalue())


def save_npz(path, arrays):
    """Like ``np.savez`` but byte-reproducible (fixed member timestamps)."""
    tmp = f"{path}.tmp"
    with zipfile.ZipFile(tmp, "w", compression=zipfile.ZIP_STORED) as zf:
        for name in sorted(arrays):
            info = zipfile.ZipInfo(f"{name}.npy", date_time=(1980, 1, 1, 0, 0, 0))
            with zf.open(info, "w", force_zip64=True) as fh:
                np.lib.format.write_array(fh, np.asanyarray(arrays[name]), allow_pickle=False)
    os.replace(tmp, path)


_CHAIN_ARRAYS = ("iteration", "theta", "B", "C", "Sigma", "Upsilon", "Lambda", "Omega",
                 "imputed", "loglik", "attempts", "accepts", "proposal_sd")


def save_samples(path, cfg: RunConfig, chains):
    arrays = {"meta": np.array(json.dumps({"format_version": FORMAT_VERSION, "bsscal": __version__,
                                            "n_chains": len(chains), "config": cfg.raw},
                                           sort_keys=True))}
    for c, ch in enumerate(chains):
        for k in _CHAIN_ARRAYS:
            arrays[f"chain{c}/{k}"] = getattr(ch, k)
        arrays[f"chain{c}/seed"] = np.array(ch.config.seed, dtype=np.uint64)
        arrays[f"chain{c}/categorical_acceptance"] = np.array(ch.categorical_acceptance)
    save_npz(path, arrays)


def load_samples(path):
    """Rebuild (config, chains) from a samples file written by ``calibrate``."""
    with np.load(path, allow_pickle=False) as z:
        arrays = {k: z[k] for k in z.files}
    meta = json.loads(str(arrays["meta"]))
    if meta.get("format_version") != FORMAT_VERSION:
        raise ValidationError(f"unsupported samples file version {meta.get('format_version')!r}")
    cfg = RunConfig.from_dict(meta["config"])
    cat, priors = cfg.build_catalog(), cfg.priors()
    chains = []
    for c in range(meta["n_chains"]):
        get = {k: arrays[f"chain{c}/{k}"] for k in _CHAIN_ARRAYS}
        chains.append(Chain(
            config=cfg.chain_config(seed=int(arrays[f"chain{c}/seed"])),
            catalog=cat, priors=priors, transform=cfg.transform,
            categorical_acceptance=float(arrays[f"chain{c}/categorical_acceptance"]),
            output_names=cfg.output_names, **get,
        ))
    return cfg, chains


def pool_chains(chains):
    """Concatenate the draws of several chains into one :class:`Chain`."""
    if len(chains) == 1:
        return chains[0]
    first = chains[0]
    merged = {k: np.concatenate([getattr(ch, k) for ch in chains]) for k in
              ("iteration", "theta", "B", "C", "Sigma", "Upsilon", "Lambda", "Omega", "imputed", "loglik")}
    return Chain(config=first.config, catalog=first.catalog, priors=first.priors, transform=first.transform,
                 output_names=first.output_names, **merged)


# --------------------------------------------------------------------------
# table builders
# --------------------------------------------------------------------------

def _native_label(value, spec):
    if spec.is_categorical:
        return spec.levels[int(value) - 1]
    return float(value)


def theta_rows(chains):
    for c, ch in enumerate(chains):
        native = ch.theta_native()
        specs = ch.catalog.parameters
        for s in range(ch.n_samples):
            yield [int(ch.iteration[s]), c] + [_native_label(v, sp) for v, sp in zip(native[s], specs)]


def variance_trace(chains):
    ch0 = chains[0]
    cat, names = ch0.catalog, ch0.output_names
    n = len(names)
    pairs = [(i, j) for i in range(n) for j in range(i, n)]
    header = ["iteration", "chain"]
    header += [f"Sigma[{names[i]},{names[j]}]" for i, j in pairs]
    header += [f"Upsilon[{names[i]},{names[j]}]" for i, j in pairs]
    header += [f"Lambda[{comp.label(cat.variables)}][{names[i]}]"
               for comp in cat.emulator for i in range(n)]
    header += [f"Omega[{comp.label(cat.variables)}][{names[i]}]"
               for comp in cat.discrepancy for i in range(n)]
    rows = []
    for c, ch in enumerate(chains):
        for s in range(ch.n_samples):
            r = [int(ch.iteration[s]), c]
            r += [ch.Sigma[s, i, j] for i, j in pairs]
            r += [ch.Upsilon[s, i, j] for i, j in pairs]
            r += [ch.Lambda[s, k, i, i] for k in range(ch.Lambda.shape[1]) for i in range(n)]
            r += [ch.Omega[s, k, i, i] for k in range(ch.Omega.shape[1]) for i in range(n)]
            rows.append(r)
    return header, rows


def summary_rows(chains):
    pooled = pool_chains(chains)
    summ = summarize_theta(pooled)
    rows = [["theta", name, stat, val] for name, stat, val in summ.rows()]
    for c, ch in enumerate(chains):
        rates = ch.acceptance_rates()
        k = 0
        for spec in ch.catalog.parameters:
            if spec.is_categorical:
                continue
            rows.append(["acceptance", spec.name, f"chain{c}", rates[k]])
            k += 1
        rows.append(["acceptance", "categorical", f"chain{c}", ch.categorical_acceptance])
    for name in ("Sigma", "Upsilon"):
        mean = getattr(pooled, name).mean(axis=0)
        for i, a in enumerate(pooled.output_names):
            for j, b in enumerate(pooled.output_names):
                if j >= i:
                    rows.append(["covariance", name, f"{a},{b}", mean[i, j]])
    if summ.continuous and len(summ.continuous) > 1:
        rows.append(["theta", "max_abs_correlation", "value", summ.max_abs_correlation])
    return rows


def prediction_rows(chain, grid, level):
    res = predict(chain, grid, n_realizations=0, level=level)
    specs = chain.catalog.inputs
    for p in range(res.n_points):
        x = [_native_label(v, s) for v, s in zip(res.x[p], specs)]
        for c, name in enumerate(res.output_names):
            yield x + [name, res.eta_mean[p, c], res.eta_lower[p, c], res.eta_upper[p, c],
                       res.zeta_mean[p, c], res.zeta_lower[p, c], res.zeta_upper[p, c]]


def prediction_header(chain):
    return [s.name for s in chain.catalog.inputs] + [
        "output", "eta_mean", "eta_lower", "eta_upper", "zeta_mean", "zeta_lower", "zeta_upper"]


def effect_rows(chain, points, level):
    for curve in discrepancy_effects(chain, grid=points, level=level):
        for g, m, lo, hi in zip(curve.grid, curve.mean, curve.lower, curve.upper):
            yield [curve.input_name, curve.output_name, g, m, lo, hi, int(lo > 0 or hi < 0)]


# --------------------------------------------------------------------------
# commands
# --------------------------------------------------------------------------

def _out_dir(path):
    os.makedirs(path, exist_ok=True)
    return path


def cmd_calibrate(args):
    cfg = RunConfig.load(args.config)
    exp = args.exp or cfg.paths.get("experimental")
    sim = args.sim or cfg.paths.get("simulator")
    out = args.out or cfg.paths.get("output_dir")
    if not exp or not sim or not out:
        raise _Usage("calibrate needs experimental and simulator CSVs and an output directory")
    data = read_dataset(cfg, exp, sim)
    chain_cfg = cfg.chain_config(seed=args.seed, iterations=args.iterations, burn_in=args.burn_in)
    chains = run_chains(data, cfg.priors(), cfg.build_catalog(), chain_cfg, n_chains=args.chains,
                        transform=cfg.transform)
    out = _out_dir(out)
    params = [s.name for s in cfg.build_catalog().parameters]
    write_csv(os.path.join(out, "theta_samples.csv"), ["iteration", "chain"] + params, theta_rows(chains))
    header, rows = variance_trace(chains)
    write_csv(os.path.join(out, "variance_traces.csv"), header, rows)
    write_csv(os.path.join(out, "summary.csv"), ["section", "name", "statistic", "value"], summary_rows(chains))
    pooled = pool_chains(chains)
    level = float(cfg.prediction.get("level", 0.95))
    grid = parse_grid(cfg, points=cfg.prediction.get("points"), path=cfg.prediction.get("grid_file"))
    write_csv(os.path.join(out, "predictions.csv"), prediction_header(pooled), prediction_rows(pooled, grid, level))
    write_csv(os.path.join(out, "discrepancy_effects.csv"),
              ["input", "output", "value", "mean", "lower", "upper", "significant"],
              effect_rows(pooled, int(cfg.prediction.get("effect_points", 50)), level))
    save_samples(os.path.join(out, "samples.npz"), cfg, chains)
    return EXIT_OK


def cmd_predict(args):
    cfg, chains = load_samples(args.samples)
    chain = pool_chains(chains)
    grid = parse_grid(cfg, args.grid, args.points, args.grid_file)
    write_csv(args.out, prediction_header(chain), prediction_rows(chain, grid, args.level))
    return EXIT_OK


def cmd_sa(args):
    cfg, chains = load_samples(args.samples)
    chain = pool_chains(chains)
    grid = parse_grid(cfg, args.grid, args.points, args.grid_file)
    res = total_sensitivity(chain, grid, n_mc=args.n_mc, seed=args.seed,
                            full_posterior=args.full_posterior, n_draws=args.draws)
    specs = chain.catalog.inputs
    header = ["output"] + [s.name for s in specs] + ["parameter", "total_index"]
    rows = []
    for c, out in enumerate(res.output_names):
        for i in range(res.T.shape[0]):
            x = [_native_label(v, s) for v, s in zip(res.x[i], specs)]
            for q, par in enumerate(res.parameter_names):
                rows.append([out] + x + [par, res.T[i, c, q]])
    write_csv(args.out, header, rows)
    for loc, out, par in res.negative:
        print(f"warning: negative total index estimate at location {loc}, output {out}, "
              f"parameter {par}", file=sys.stderr)
    return EXIT_OK


def cmd_cv(args):
    cfg = RunConfig.load(args.config)
    exp = args.exp or cfg.paths.get("experimental")
    sim = args.sim or cfg.paths.get("simulator")
    if not exp or not sim:
        raise _Usage("cv needs experimental and simulator CSVs")
    data = read_dataset(cfg, exp, sim)
    cat = cfg.build_catalog()
    res = cross_validate(data, cfg.priors(), cat, cfg.chain_config(seed=args.seed), args.fold_by, cfg.transform)
    out = _out_dir(args.out)
    write_csv(os.path.join(out, "cv_summary.csv"), ["output", "scope", "model", "r2"], res.summary_rows())
    rows = []
    for f in res.folds:
        for k, r in enumerate(f.rows):
            for c, name in enumerate(res.output_names):
                rows.append([int(r) + 1, f.value, name, data.y_exp[r, c], f.eta[k, c], f.zeta[k, c]])
    write_csv(os.path.join(out, "cv_predictions.csv"),
              ["row", res.fold_key, "output", "observed", "eta", "zeta"], rows)
    for f in res.folds:
        for note in f.notes:
            print(f"note: fold {res.fold_key}={f.value!r}: {note}", file=sys.stderr)
    return EXIT_OK


def cmd_study(args):
    cfg = RunConfig.load(args.config)
    st = dict(cfg.study)
    if not st:
        raise ConfigError("study needs a 'study' section in the configuration")
    cat = cfg.build_catalog()
    c = len(cfg.outputs)
    tr = dict(st.get("truth", {}))
    rng = np.random.default_rng(int(st.get("design_seed", 0)))
    truth = draw_truth(
        cat,
        lam=_matrix(tr.get("lambda", 1.0), c, "truth.lambda"),
        omega=_matrix(tr.get("omega", 1.0), c, "truth.omega"),
        sigma=_matrix(tr.get("sigma", 0.01), c, "truth.sigma"),
        upsilon=_matrix(tr.get("upsilon", 1e-4), c, "truth.upsilon"),
        seed=int(tr.get("seed", 0)),
        component_scales=tr.get("component_scales"),
        discrepancy_scales=tr.get("discrepancy_scales"),
        theta=_native_theta(cat, tr.get("theta")),
    )
    x_exp = lhs(int(st.get("n_exp", 20)), cat.inputs, rng=rng)
    sim = lhs(int(st.get("n_sim", 200)), list(cat.variables), rng=rng)
    n_hold = int(st.get("n_holdout", 0))
    x_hold = lhs(n_hold, cat.inputs, rng=rng) if n_hold else None
    mask = None
    missing = st.get("missing", {})
    if missing:
        mask = np.zeros((len(x_exp), c), dtype=bool)
        for name, frac in missing.items():
            if name not in cfg.output_names:
                raise ConfigError(f"study.missing names unknown output {name!r}")
            j = cfg.output_names.index(name)
            k = int(round(float(frac) * len(x_exp)))
            mask[rng.choice(len(x_exp), size=k, replace=False), j] = True
    seed = args.seed if args.seed is not None else int(st.get("seed", 0))
    rep = run_study(int(args.datasets or st.get("n_datasets", 10)), truth, x_exp, sim,
                    cfg.chain_config(), cfg.priors(), seed=seed, missing_mask=mask,
                    x_holdout=x_hold, transform=cfg.transform)
    out = _out_dir(args.out)
    rep.write_csv(os.path.join(out, "study.csv"))
    rep.manifest["config"] = cfg.raw
    rep.write_manifest(os.path.join(out, "manifest.json"))
    for f in rep.failures:
        print(f"warning: dataset {f['dataset']} failed: {f['error']}", file=sys.stderr)
    return EXIT_OK


def _native_theta(cat, values):
    if values is None:
        return None
    if len(values) != cat.n_params:
        raise ConfigError(f"truth.theta needs {cat.n_params} values")
    out = []
    for v, spec in zip(values, cat.parameters):
        if spec.is_categorical and isinstance(v, str):
            if v not in spec.levels:
                raise ConfigError(f"truth.theta: unknown level {v!r} for {spec.name!r}")
            out.append(float(spec.levels.index(v) + 1))
        else:
            out.append(float(v))
    return out


def cmd_basis(args):
    if args.L > args.grid:
        raise ValidationError(f"--L {args.L} exceeds the grid size {args.grid}")
    kl = build_kl_basis(args.grid, args.eigen_scaling)
    out = _out_dir(args.out)
    write_csv(os.path.join(out, "eigenvalues.csv"), ["index", "eigenvalue", "amplitude"],
              ([l + 1, kl.eigenvalues[l], kl.amplitudes()[l]] for l in range(args.L)))
    write_csv(os.path.join(out, "eigenfunctions.csv"),
              ["u"] + [f"phi{l + 1}" for l in range(args.L)],
              ([u] + list(kl.eigenfunctions[i, : args.L]) for i, u in enumerate(kl.grid)))
    return EXIT_OK


# --------------------------------------------------------------------------
# parser
# --------------------------------------------------------------------------

class _Usage(BSSCalError):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_VALIDATION, f"{self.prog}: error: {message}\n")


def build_parser():
    p = _Parser(prog="bsscal", description="Calibrate computer models with BSS-ANOVA emulators.")
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = p.add_subparsers(dest="command", parser_class=_Parser, required=True)

    c = sub.add_parser("calibrate", help="run MCMC and write samples and summary tables")
    c.add_argument("--config", required=True)
    c.add_argument("--exp", help="experimental CSV (x* and y* columns)")
    c.add_argument("--sim", help="simulator CSV (x*, t* and ystar* columns)")
    c.add_argument("--out", help="output directory")
    c.add_argument("--chains", type=int, default=1)
    c.add_argument("--seed", type=int)
    c.add_argument("--iterations", type=int)
    c.add_argument("--burn-in", type=int)
    c.set_defaults(func=cmd_calibrate)

    def grid_args(q):
        q.add_argument("--samples", required=True, help="samples.npz written by calibrate")
        q.add_argument("--grid", action="append", metavar="NAME=V1,V2,...",
                       help="values for one input (repeatable); other inputs use --points")
        q.add_argument("--points", type=int, help="points per continuous input for the default grid")
        q.add_argument("--grid-file", help="CSV with one column per input")
        q.add_argument("--out", required=True)

    q = sub.add_parser("predict", help="posterior predictions on a grid")
    grid_args(q)
    q.add_argument("--level", type=float, default=0.95)
    q.set_defaults(func=cmd_predict)

    s = sub.add_parser("sa", help="total sensitivity indices of the parameters")
    grid_args(s)
    s.add_argument("--n-mc", type=int, default=10000)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--full-posterior", action="store_true")
    s.add_argument("--draws", type=int, default=100)
    s.set_defaults(func=cmd_sa)

    v = sub.add_parser("cv", help="leave-one-value-out cross-validation")
    v.add_argument("--config", required=True)
    v.add_argument("--exp")
    v.add_argument("--sim")
    v.add_argument("--fold-by", required=True, help="input whose distinct values define folds")
    v.add_argument("--seed", type=int)
    v.add_argument("--out", required=True)
    v.set_defaults(func=cmd_cv)

    t = sub.add_parser("study", help="truth-known synthetic study")
    t.add_argument("--config", required=True)
    t.add_argument("--datasets", type=int)
    t.add_argument("--seed", type=int)
    t.add_argument("--out", required=True)
    t.set_defaults(func=cmd_study)

    b = sub.add_parser("basis", help="basis utilities")
    bsub = b.add_subparsers(dest="basis_command", parser_class=_Parser, required=True)
    d = bsub.add_parser("dump", help="write eigenvalues and eigenfunctions")
    d.add_argument("--grid", type=int, default=300)
    d.add_argument("--L", type=int, default=25)
    d.add_argument("--eigen-scaling", choices=("sqrt", "linear"), default="sqrt")
    d.add_argument("--out", required=True)
    d.set_defaults(func=cmd_basis)
    return p


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return exc.code if isinstance(exc.code, int) else EXIT_VALIDATION
    try:
        return args.func(args)
    except _Usage as exc:
        parser.print_usage(sys.stderr)
        print(f"bsscal: error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except NumericalError as exc:
        print(f"bsscal: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    except ValidationError as exc:
        print(f"bsscal: invalid input: {exc}", file=sys.stderr)
        for p in exc.problems[1:]:
            print(f"  {p}", file=sys.stderr)
        return EXIT_VALIDATION
    except (ValueError, KeyError, TypeError) as exc:
        print(f"bsscal: invalid input: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except OSError as exc:
        print(f"bsscal: I/O error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
