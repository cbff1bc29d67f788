"""Command line entry point: ``compolattice {simulate,fit,predict,regions,cv}``.

Exit codes: 0 success, 2 configuration error, 3 data error, 4 numerical
failure (a ``postmortem.json`` is written to the output directory).
"""
from __future__ import annotations

import argparse
import copy
import json
import logging
import sys
from pathlib import Path
from typing import Optional

import numpy as np

from . import __version__
from .inference import (
    confidence_region,
    posterior_mean_compositions,
    prediction_region,
    ternary_bounds,
)
from .io import DataError, config_hash, emit, ingest, read_table, write_csv, write_json
from .lattice import NotPositiveDefiniteError
from .likelihood import HyperParams
from .sampler import McmcTrace, SamplerConfig, SamplerError, run_chain
from .validation import compare_to_reference, cross_validate, make_synthetic_problem

logger = logging.getLogger("compolattice")

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC = 0, 2, 3, 4

DEFAULTS = {
    "data": {"grid": None, "observations": None, "covariates": None,
             "alr_columns": None, "unit_spacing": 1.0},
    "hyperparameters": HyperParams().to_dict(),
    "sampler": SamplerConfig().to_dict(),
    "cv": {"folds": 6, "repeats": 10, "variant": "both"},
    "regions": {"level": 0.95, "kind": "both"},
    "predict": {"summary": "mean_z", "reference": None},
    "simulate": {"rows": 27, "cols": 40, "n_obs": 180, "parts": 3, "covariates": 1,
                 "alpha": 8.0, "kappa": 0.25, "rho": None, "beta": None},
}

VARIANT_NAMES = {"full": "full", "rm": "regression_only", "regression_only": "regression_only"}
VARIANT_LABELS = {"full": "Full", "regression_only": "RM"}


class ConfigError(ValueError):
    """Invalid or inconsistent configuration."""


def _merge(base: dict, override: dict, where: str = "") -> dict:
    out = copy.deepcopy(base)
    for key, value in override.items():
        if key not in out:
            raise ConfigError(f"unknown configuration key {where + key!r}")
        if isinstance(out[key], dict):
            if not isinstance(value, dict):
                raise ConfigError(f"configuration key {where + key!r} must be an object")
            out[key] = _merge(out[key], value, f"{where}{key}.")
        else:
            out[key] = value
    return out


def load_config(path) -> dict:
    """Defaults overlaid with the JSON file at ``path`` (if any)."""
    if path is None:
        return copy.deepcopy(DEFAULTS)
    try:
        with open(path) as fh:
            user = json.load(fh)
    except FileNotFoundError:
        raise ConfigError(f"config file {path} not found") from None
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config file {path}: {exc}") from None
    if not isinstance(user, dict):
        raise ConfigError("config file must hold a JSON object")
    return _merge(DEFAULTS, user)


def _apply_flags(cfg: dict, args) -> dict:
    flags = {
        ("sampler", "seed"): args.seed,
        ("sampler", "n_iter"): args.iters,
        ("sampler", "burn_in"): args.burn_in,
        ("sampler", "thin"): args.thin,
        ("cv", "folds"): args.folds,
        ("cv", "repeats"): args.repeats,
        ("regions", "level"): args.level,
        ("data", "grid"): args.grid,
        ("data", "observations"): args.obs,
        ("data", "covariates"): args.cov,
    }
    for (section, key), value in flags.items():
        if value is not None:
            cfg[section][key] = value
    if args.variant is not None:
        if args.command == "cv":
            cfg["cv"]["variant"] = args.variant
        else:
            cfg["sampler"]["model_variant"] = args.variant
    for name in ("rows", "cols", "n_obs", "parts", "covariates", "alpha", "kappa"):
        value = getattr(args, name, None)
        if value is not None:
            cfg["simulate"][name] = value
    if getattr(args, "summary", None) is not None:
        cfg["predict"]["summary"] = args.summary
    if getattr(args, "reference", None) is not None:
        cfg["predict"]["reference"] = args.reference
    if getattr(args, "kind", None) is not None:
        cfg["regions"]["kind"] = args.kind
    return cfg


def _hyperparams(cfg, d: Optional[int] = None) -> HyperParams:
    try:
        hp = HyperParams(**{k: float(v) for k, v in cfg["hyperparameters"].items()})
        return hp.validate(d)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"hyperparameters: {exc}") from None


def _sampler_config(cfg, variant=None) -> SamplerConfig:
    params = dict(cfg["sampler"])
    if variant is not None:
        params["model_variant"] = variant
    if params["model_variant"] == "both":
        raise ConfigError("variant 'both' is only meaningful for the cv subcommand")
    params["model_variant"] = VARIANT_NAMES.get(params["model_variant"], params["model_variant"])
    try:
        for key in ("n_iter", "burn_in", "thin", "seed"):
            params[key] = int(params[key])
        if params["seed"] < 0:
            raise ValueError("seed must be non-negative")
        return SamplerConfig(**params)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"sampler: {exc}") from None


def _load_data(cfg):
    data = cfg["data"]
    if not data["grid"] or not data["observations"]:
        raise ConfigError("need --grid and --obs (or data.grid / data.observations in the config)")
    for key in ("grid", "observations", "covariates"):
        if data[key] and not Path(data[key]).is_file():
            raise ConfigError(f"data.{key}: {data[key]} does not exist")
    return ingest(data["grid"], data["observations"], data["covariates"],
                  alr_columns=data["alr_columns"], unit_spacing=float(data["unit_spacing"]))


def _out_dir(args) -> Path:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------

def cmd_simulate(cfg, args, digest):
    sim = cfg["simulate"]
    seed = int(cfg["sampler"]["seed"])
    try:
        ds = make_synthetic_problem(
            int(sim["rows"]), int(sim["cols"]), int(sim["n_obs"]), D=int(sim["parts"]),
            n_covariates=int(sim["covariates"]), alpha=float(sim["alpha"]),
            kappa=float(sim["kappa"]),
            rho=None if sim["rho"] is None else np.asarray(sim["rho"], dtype=float),
            beta=None if sim["beta"] is None else np.asarray(sim["beta"], dtype=float),
            seed=seed)
    except ValueError as exc:
        raise ConfigError(f"simulate: {exc}") from None
    out = _out_dir(args)
    paths = emit(ds.lattice, ds.Y, out)
    lat = ds.lattice
    write_csv(out / "truth_compositions.csv",
              ["cell_id", "row", "col"] + [f"z_{k + 1}" for k in range(ds.z_all.shape[1])],
              ([cid, r, c, *z] for cid, r, c, z in
               zip(lat.cell_ids.tolist(), lat.rows.tolist(), lat.cols.tolist(), ds.z_all)),
              config_digest=digest, seed=seed)
    t = ds.truth
    write_json(out / "truth.json", dict(
        alpha=t.alpha, kappa=t.kappa, rho=t.rho, beta=t.beta,
        files={k: str(v) for k, v in paths.items()}, config=cfg),
        config_digest=digest, seed=seed)
    logger.info("wrote synthetic dataset (%d cells, %d observed) to %s", lat.N, lat.n_obs, out)
    return EXIT_OK


def _trace_rows(trace: McmcTrace):
    table = trace.scalar_table()
    first = trace.burn_in + trace.thin
    for i, row in enumerate(table):
        yield [first + i * trace.thin, *row]


def cmd_fit(cfg, args, digest):
    config = _sampler_config(cfg)
    lattice, Y = _load_data(cfg)
    hp = _hyperparams(cfg, Y.shape[1] - 1)
    out = _out_dir(args)
    seed = config.seed
    try:
        trace = run_chain(lattice, Y, hp, config)
    except SamplerError as exc:
        write_json(out / "postmortem.json", dict(
            error=str(exc), iteration=exc.iteration, state=exc.state_summary, config=cfg),
            config_digest=digest, seed=seed)
        raise
    trace.meta.update(config_hash=digest, covariate_names=list(lattice.covariate_names))
    trace.save(out / "trace.npz")
    summary = trace.parameter_summary(0.95)
    write_csv(out / "params_summary.csv", ["parameter", "estimate", "ci_low", "ci_high"],
              ([s["parameter"], s["estimate"], s["ci_low"], s["ci_high"]] for s in summary),
              config_digest=digest, seed=seed)
    write_csv(out / "params_trace.csv", ["iteration"] + trace.scalar_names(),
              _trace_rows(trace), config_digest=digest, seed=seed)
    meta = dict(
        model_variant=config.model_variant, n_iter=config.n_iter, burn_in=config.burn_in,
        thin=config.thin, n_samples=trace.n_samples, N=lattice.N, n_obs=lattice.n_obs,
        D=Y.shape[1], p=lattice.p, covariate_names=lattice.covariate_names,
        acceptance=dict(mala=trace.acceptance_rate("mala"),
                        kappa=trace.acceptance_rate("kappa")),
        final_step_sizes=dict(eps=float(trace.eps_history[-1]),
                              sigma_kappa=(None if trace.sigma_kappa_history is None
                                           else float(trace.sigma_kappa_history[-1]))),
        elapsed_seconds=trace.elapsed_seconds,
        iterations_per_second=trace.iterations_per_second,
        hyperparameters=hp.to_dict(), config=cfg)
    write_json(out / "fit_meta.json", meta, config_digest=digest, seed=seed)
    print(f"{trace.iterations_per_second:.2f} iterations/second "
          f"({config.n_iter} iterations in {trace.elapsed_seconds:.1f} s)", file=sys.stderr)
    return EXIT_OK


def _load_trace(args) -> McmcTrace:
    if not args.trace:
        raise ConfigError("--trace is required")
    try:
        return McmcTrace.load(args.trace)
    except (OSError, KeyError, ValueError) as exc:
        raise DataError(f"cannot read trace {args.trace}: {exc}") from None


def _read_reference(path, trace):
    head, rows = read_table(path)
    ids = [r[0] for r in rows]
    values = np.array([[float(v) for v in r[1:]] for r in rows])
    cols = [i for i, h in enumerate(head[1:]) if h not in ("row", "col")]
    values = values[:, cols]
    index = {str(c): i for i, c in enumerate(trace.cell_ids.tolist())}
    try:
        nodes = np.array([index[str(c)] for c in ids])
    except KeyError as exc:
        raise DataError(f"{path}: cell_id {exc.args[0]} is not in the trace") from None
    return nodes, values


def cmd_predict(cfg, args, digest):
    trace = _load_trace(args)
    summary = cfg["predict"]["summary"]
    if summary not in ("mean_z", "inv_alr_mean_eta"):
        raise ConfigError("predict.summary must be 'mean_z' or 'inv_alr_mean_eta'")
    out = _out_dir(args)
    seed = trace.seed
    z = posterior_mean_compositions(trace, summary=summary)
    write_csv(out / "predictions.csv",
              ["cell_id", "row", "col"] + [f"z_{k + 1}" for k in range(z.shape[1])],
              ([cid, r, c, *row] for cid, r, c, row in
               zip(trace.cell_ids.tolist(), trace.rows.tolist(), trace.cols.tolist(), z)),
              config_digest=digest, seed=seed)
    payload = dict(summary=summary, model_variant=trace.model_variant,
                   n_samples=trace.n_samples, trace_config_hash=trace.meta.get("config_hash"),
                   cell_id=trace.cell_ids, compositions=z)
    ref = cfg["predict"]["reference"]
    if ref:
        nodes, values = _read_reference(ref, trace)
        if values.shape[1] != z.shape[1]:
            raise DataError(f"{ref}: expected {z.shape[1]} composition columns")
        payload["mean_acd_to_reference"] = compare_to_reference(z[nodes], values)
        print(f"mean ACD to reference: {payload['mean_acd_to_reference']:.6f}", file=sys.stderr)
    write_json(out / "predictions.json", payload, config_digest=digest, seed=seed)
    return EXIT_OK


def _region_record(region, bounds):
    rec = dict(mu=region.mu, sigma=region.sigma, c=region.c_quantile)
    return dict(ellipse=rec, ternary_bounds=None if bounds is None else bounds.to_dict())


def cmd_regions(cfg, args, digest):
    trace = _load_trace(args)
    level = float(cfg["regions"]["level"])
    kind = cfg["regions"]["kind"]
    if not 0 < level <= 1:
        raise ConfigError("level must lie in (0, 1]")
    if kind not in ("confidence", "prediction", "both"):
        raise ConfigError("regions.kind must be confidence, prediction or both")
    kinds = ["confidence", "prediction"] if kind == "both" else [kind]
    out = _out_dir(args)
    seed = trace.seed
    rng = np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(7,)))
    z_mean = posterior_mean_compositions(trace)
    D = trace.d + 1
    records, flat = [], []
    if trace.d != 2:
        logger.warning("ternary bounds need three parts; emitting ellipses only")
    for node in range(trace.N):
        rec = dict(node=node, cell_id=trace.cell_ids[node].item(),
                   row=int(trace.rows[node]), col=int(trace.cols[node]),
                   mean_composition=z_mean[node])
        for k in kinds:
            region = (confidence_region(trace, node, level) if k == "confidence"
                      else prediction_region(trace, node, level, rng))
            bounds = ternary_bounds(region) if trace.d == 2 else None
            rec[k] = _region_record(region, bounds)
            iu = np.triu_indices(trace.d)
            row = [rec["cell_id"], rec["row"], rec["col"], k, level, *z_mean[node],
                   *region.mu, *region.sigma[iu], region.c_quantile]
            if bounds is not None:
                row += [*bounds.minimum, *bounds.maximum]
            flat.append(row)
        records.append(rec)
    iu = np.triu_indices(trace.d)
    header = (["cell_id", "row", "col", "kind", "level"]
              + [f"mean_z{k + 1}" for k in range(D)]
              + [f"mu_{k + 1}" for k in range(trace.d)]
              + [f"sigma_{i + 1}{j + 1}" for i, j in zip(*iu)] + ["c"])
    if trace.d == 2:
        header += [f"min_z{k + 1}" for k in range(D)] + [f"max_z{k + 1}" for k in range(D)]
    write_csv(out / "regions.csv", header, flat, config_digest=digest, seed=seed)
    write_json(out / "regions.json", dict(level=level, kinds=kinds, summary="mean_z",
                                          nodes=records),
               config_digest=digest, seed=seed)
    return EXIT_OK


def cmd_cv(cfg, args, digest):
    variant = cfg["cv"]["variant"]
    if variant == "both":
        variants = ("full", "regression_only")
    elif variant in VARIANT_NAMES:
        variants = (VARIANT_NAMES[variant],)
    else:
        raise ConfigError("cv.variant must be full, rm or both")
    config = _sampler_config(cfg, variant=variants[0])
    k, repeats = int(cfg["cv"]["folds"]), int(cfg["cv"]["repeats"])
    lattice, Y = _load_data(cfg)
    hp = _hyperparams(cfg, Y.shape[1] - 1)
    if not 1 <= k <= lattice.n_obs or repeats < 1:
        raise ConfigError(f"need 1 <= folds <= {lattice.n_obs} and repeats >= 1")
    out = _out_dir(args)
    report = cross_validate(lattice, Y, hp, config, k=k, repeats=repeats, variants=variants)
    seed = config.seed
    write_json(out / "cv_report.json", dict(report.to_dict(), config=cfg),
               config_digest=digest, seed=seed)
    labels = [VARIANT_LABELS[v] for v in variants]
    rows = [[r + 1, *(report.repeat_errors[v][r] for v in variants)] for r in range(repeats)]
    rows.append(["mean", *(report.mean(v) for v in variants)])
    rows.append(["sd", *(report.std(v) for v in variants)])
    write_csv(out / "cv_table.csv", ["repeat"] + labels, rows, config_digest=digest, seed=seed)
    for v, label in zip(variants, labels):
        print(f"{label}: {report.mean(v):.4f} ({report.std(v):.4f})", file=sys.stderr)
    return EXIT_OK


COMMANDS = dict(simulate=cmd_simulate, fit=cmd_fit, predict=cmd_predict,
                regions=cmd_regions, cv=cmd_cv)


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON configuration file")
    common.add_argument("--seed", type=int, help="master seed")
    common.add_argument("--out", default=".", help="output directory")
    common.add_argument("--iters", type=int, help="MCMC iterations")
    common.add_argument("--burn-in", type=int, dest="burn_in", help="burn-in iterations")
    common.add_argument("--thin", type=int, help="keep every n-th post-burn-in sample")
    common.add_argument("--variant", choices=["full", "rm", "both"], help="model variant")
    common.add_argument("--level", type=float, help="region level, e.g. 0.95")
    common.add_argument("--folds", type=int, help="cross-validation folds")
    common.add_argument("--repeats", type=int, help="cross-validation repeats")
    common.add_argument("--grid", help="grid CSV (cell_id,row,col)")
    common.add_argument("--obs", help="observations CSV (cell_id,y_1..y_D)")
    common.add_argument("--cov", help="covariates CSV (cell_id,b_1..)")
    common.add_argument("-q", "--quiet", action="store_true", help="only log warnings")

    parser = argparse.ArgumentParser(prog="compolattice", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)
    sim = sub.add_parser("simulate", parents=[common], help="write a synthetic dataset")
    sim.add_argument("--rows", type=int)
    sim.add_argument("--cols", type=int)
    sim.add_argument("--n-obs", type=int, dest="n_obs")
    sim.add_argument("--parts", type=int, help="number of composition parts D")
    sim.add_argument("--covariates", type=int, help="covariates besides the intercept")
    sim.add_argument("--alpha", type=float)
    sim.add_argument("--kappa", type=float)
    sub.add_parser("fit", parents=[common], help="run the sampler and write a trace")
    pred = sub.add_parser("predict", parents=[common], help="posterior composition maps")
    pred.add_argument("--trace", help="trace.npz written by fit")
    pred.add_argument("--summary", choices=["mean_z", "inv_alr_mean_eta"])
    pred.add_argument("--reference", help="CSV of reference compositions to score against")
    reg = sub.add_parser("regions", parents=[common], help="confidence/prediction regions")
    reg.add_argument("--trace", help="trace.npz written by fit")
    reg.add_argument("--kind", choices=["confidence", "prediction", "both"])
    sub.add_parser("cv", parents=[common], help="repeated k-fold cross-validation")
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.WARNING if args.quiet else logging.INFO,
                        format="%(asctime)s %(name)s %(levelname)s: %(message)s",
                        stream=sys.stderr)
    try:
        cfg = _apply_flags(load_config(args.config), args)
        digest = config_hash(dict(command=args.command, config=cfg,
                                  trace=getattr(args, "trace", None)))
        return COMMANDS[args.command](cfg, args, digest)
    except ConfigError as exc:
        logger.error("configuration error: %s", exc)
        return EXIT_CONFIG
    except DataError as exc:
        logger.error("data error: %s", exc)
        return EXIT_DATA
    except (SamplerError, NotPositiveDefiniteError, FloatingPointError) as exc:
        logger.error("numerical failure: %s", exc)
        out = Path(args.out)
        if not (out / "postmortem.json").exists():
            out.mkdir(parents=True, exist_ok=True)
            (out / "postmortem.json").write_text(
                json.dumps(dict(command=args.command, error=str(exc)), indent=2) + "\n")
        return EXIT_NUMERIC
    except ValueError as exc:
        logger.error("data error: %s", exc)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
