"""Command-line front end: ``edid {estimate,simulate,test,weights}``.

Settings come from an optional INI file and flags; flags win. Every JSON
artifact embeds a digest of the resolved settings and is byte-identical across
reruns with the same settings.
"""

from __future__ import annotations

import argparse
import configparser
import hashlib
import json
import math
import os
import sys
import warnings
from pathlib import Path
from typing import Optional

import numpy as np

from .errors import EdidError, EdidWarning, EstimationError, ValidationError

EXIT_VALIDATION = 1
EXIT_ESTIMATION = 2

# section -> key -> type
CONFIG_KEYS = {
    "data": {"unit": str, "period": str, "outcome": str, "cohort": str, "covariates": str,
             "treatment": str, "iv_cohort": str},
    "estimate": {"regime": str, "mode": str, "estimator": str, "level": float},
    "nuisance": {"outcome_degree": int, "ratio_grid": str, "criterion": str, "ratio_floor": float,
                 "bandwidth": float, "min_cell": int},
    "bootstrap": {"replications": int, "seed": int, "ci": str, "multiplier": str},
    "simulation": {"dgp": str, "n": int, "rho": float, "reps": int, "seed": int, "target": str,
                   "variant": str, "residual_pool": str},
    "test": {"kind": str, "alpha": float},
}

DEFAULTS = {
    "data": {"unit": "unit", "period": "period", "outcome": "outcome", "cohort": "cohort", "covariates": "",
             "treatment": "", "iv_cohort": ""},
    "estimate": {"regime": "pt-all", "mode": "uncond", "estimator": "efficient", "level": 0.95},
    "nuisance": {"outcome_degree": 2, "ratio_grid": "", "criterion": "aic", "ratio_floor": 1e-6,
                 "bandwidth": None, "min_cell": 2},
    "bootstrap": {"replications": 0, "seed": 0, "ci": "normal", "multiplier": "normal"},
    "simulation": {"dgp": "staggered", "n": None, "rho": 0.0, "reps": 100, "seed": 0, "target": "avg",
                   "variant": "baseline", "residual_pool": ""},
    "test": {"kind": "hausman", "alpha": 0.05},
}

ESTIMATORS = ("efficient", "cs-never", "cs-notyet", "twfe", "dtwfe", "imputation")


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_VALIDATION, f"{self.prog}: error: {message}\n")


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="edid", description="Efficient difference-in-differences estimation.")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def common(sp, data=True):
        if data:
            sp.add_argument("--input", help="long-format CSV (unit, period, outcome, cohort columns)")
        sp.add_argument("--config", help="INI file with [data], [estimate], [nuisance], ... sections")
        sp.add_argument("--seed", type=int, help="random seed (default 0)")
        sp.add_argument("--threads", type=int, help="worker threads (default: available cores)")
        sp.add_argument("--out", help="output directory (default: current directory)")

    def targets(sp):
        g = sp.add_mutually_exclusive_group()
        g.add_argument("--att", nargs=2, type=int, metavar=("G", "T"), help="ATT(g, t) in period labels")
        g.add_argument("--es", type=int, metavar="E", help="event-study horizon e")
        g.add_argument("--es-avg", action="store_true", help="average of post-treatment ES(e) (default)")
        g.add_argument("--latt", nargs=2, type=int, metavar=("G", "T"), help="instrumented LATT(g, t)")
        sp.add_argument("--regime", choices=("pt-all", "pt-post"), help="parallel-trends regime")
        sp.add_argument("--mode", choices=("uncond", "cond"), help="covariate-free or covariate-conditional")

    est = sub.add_parser("estimate", help="estimate a target and write result.json")
    common(est)
    targets(est)
    est.add_argument("--estimator", choices=ESTIMATORS, help="estimator (default efficient)")
    est.add_argument("--bootstrap", type=int, metavar="B", help="clustered bootstrap replications")
    est.add_argument("--weights", action="store_true", help="also write weights.csv")

    sim = sub.add_parser("simulate", help="Monte Carlo comparison of estimators")
    common(sim, data=False)
    sim.add_argument("--dgp", choices=("staggered", "single", "iv"))
    sim.add_argument("--rho", type=float, help="AR(1) coefficient (staggered design)")
    sim.add_argument("--n", type=int, help="units per panel")
    sim.add_argument("--reps", type=int, help="replications (>= 2)")
    sim.add_argument("--target", help="event time or 'avg' (staggered design)")
    sim.add_argument("--variant", help="single-date variant: baseline, no_corr, no_M, no_F, only_noise")

    tst = sub.add_parser("test", help="specification tests")
    common(tst)
    tst.add_argument("--test", dest="kind", choices=("hausman", "holm", "placebo"))
    tst.add_argument("--alpha", type=float)
    tst.add_argument("--placebo", nargs=2, type=int, metavar=("G", "T"), help="placebo target with T < G")
    tst.add_argument("--mode", choices=("uncond", "cond"))

    wts = sub.add_parser("weights", help="export efficiency weights to weights.csv")
    common(wts)
    targets(wts)
    return p


# ---------------------------------------------------------------------------
# Settings
# ---------------------------------------------------------------------------


def load_config(path: Optional[str]) -> dict:
    cfg = {s: dict(v) for s, v in DEFAULTS.items()}
    if not path:
        return cfg
    if not Path(path).exists():
        raise ValidationError("FILE_NOT_FOUND", str(path))
    cp = configparser.ConfigParser(interpolation=None)
    cp.optionxform = str
    try:
        cp.read(path)
    except configparser.Error as exc:
        raise ValidationError("CONFIG", f"cannot parse {path}: {exc}") from None
    for section in cp.sections():
        if section not in CONFIG_KEYS:
            raise ValidationError("CONFIG", f"unknown section [{section}]")
        for key, raw in cp.items(section):
            if key not in CONFIG_KEYS[section]:
                raise ValidationError("CONFIG", f"unknown key {key!r} in [{section}]")
            typ = CONFIG_KEYS[section][key]
            try:
                cfg[section][key] = typ(raw.strip())
            except ValueError:
                raise ValidationError("CONFIG", f"bad value for {section}.{key}: {raw!r}") from None
    return cfg


def _override(cfg, section, key, value):
    if value is not None:
        cfg[section][key] = value


def resolve(args) -> dict:
    cfg = load_config(args.config)
    run = {"command": args.command}
    if args.command in ("estimate", "weights"):
        _override(cfg, "estimate", "regime", args.regime)
        _override(cfg, "estimate", "mode", args.mode)
        if args.command == "estimate":
            _override(cfg, "estimate", "estimator", args.estimator)
            _override(cfg, "bootstrap", "replications", args.bootstrap)
        if args.att:
            run["target"] = ["att", *args.att]
        elif args.es is not None:
            run["target"] = ["es", args.es]
        elif args.latt:
            run["target"] = ["latt", *args.latt]
        else:
            run["target"] = ["es_avg"]
    if args.command == "simulate":
        for k in ("dgp", "rho", "n", "reps", "target", "variant"):
            _override(cfg, "simulation", k, getattr(args, k))
        _override(cfg, "simulation", "seed", args.seed)
    if args.command == "test":
        _override(cfg, "test", "kind", args.kind)
        _override(cfg, "test", "alpha", args.alpha)
        _override(cfg, "estimate", "mode", args.mode)
        run["placebo"] = list(args.placebo) if args.placebo else None
    _override(cfg, "bootstrap", "seed", args.seed)
    if getattr(args, "input", None):
        run["input"] = os.path.basename(args.input)
        run["input_sha256"] = _file_digest(args.input)
    run["config"] = cfg
    return run


def _file_digest(path) -> str:
    if not Path(path).exists():
        raise ValidationError("FILE_NOT_FOUND", str(path))
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def config_digest(run: dict) -> str:
    return hashlib.sha256(json.dumps(run, sort_keys=True, default=str).encode()).hexdigest()


def _round(obj):
    if isinstance(obj, (float, np.floating)):
        v = float(obj)
        if not math.isfinite(v):
            return None if math.isnan(v) else ("inf" if v > 0 else "-inf")
        return float(f"{v:.12g}")
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, (np.bool_,)):
        return bool(obj)
    if isinstance(obj, dict):
        return {str(k): _round(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple, np.ndarray)):
        return [_round(v) for v in obj]
    return obj


def write_json(path: Path, payload: dict) -> None:
    path.write_text(json.dumps(_round(payload), sort_keys=True, indent=2) + "\n")


# ---------------------------------------------------------------------------
# Commands
# ---------------------------------------------------------------------------


def _load(args, cfg):
    from .panel import CsvSchema, load_long_csv, validate

    if not args.input:
        raise ValidationError("SCHEMA", "--input is required")
    d = cfg["data"]
    cov = tuple(c.strip() for c in d["covariates"].split(",") if c.strip())
    schema = CsvSchema(d["unit"], d["period"], d["outcome"], d["cohort"], cov, d["treatment"] or None,
                       d["iv_cohort"] or None)
    ds = load_long_csv(args.input, schema)
    rep = validate(ds, min_cell=cfg["nuisance"]["min_cell"])
    rep.raise_if_failed()
    return ds


def _nuisance_config(cfg):
    from .nuisance import NuisanceConfig

    nc = cfg["nuisance"]
    grid = tuple(int(k) for k in nc["ratio_grid"].replace(",", " ").split()) if nc["ratio_grid"] else None
    crit = nc["criterion"]
    try:
        crit = float(crit)
    except ValueError:
        pass
    return NuisanceConfig(mode=cfg["estimate"]["mode"], outcome_degree=nc["outcome_degree"], ratio_grid=grid,
                          criterion=crit, ratio_floor=nc["ratio_floor"], bandwidth=nc["bandwidth"],
                          min_cell=nc["min_cell"])


def _period_index(ds, label: int, what: str) -> int:
    if label not in ds.periods:
        raise ValidationError("INVALID_COHORT", f"{what} {label} is not an observed period")
    return ds.periods.index(label) + 1


def _estimator_fn(cfg, target, ds):
    from .estimators import (CsModel, EfficientModel, estimate_imputation, estimate_twfe_dynamic,
                             estimate_twfe_static)

    kind = cfg["estimate"]["estimator"]
    if kind not in ESTIMATORS:
        raise ValidationError("CONFIG", f"unknown estimator {kind!r}")
    g = t = e = None
    if target[0] == "att":
        g = _period_index(ds, target[1], "cohort")
        t = _period_index(ds, target[2], "period")
    elif target[0] == "es":
        e = int(target[1])
    elif target[0] == "es_avg":
        e = "avg"
    nconf = _nuisance_config(cfg)
    regime = cfg["estimate"]["regime"]

    def fn(d):
        if kind == "efficient":
            return EfficientModel(d, regime, config=nconf).target(g, t, e)
        if kind in ("cs-never", "cs-notyet"):
            return CsModel(d, kind[3:], config=nconf).target(g, t, e)
        if kind == "imputation":
            return estimate_imputation(d, g, t, e)
        if kind == "twfe":
            return estimate_twfe_static(d)
        if e is None:
            return estimate_twfe_dynamic(d, t - g)
        return estimate_twfe_dynamic(d, e)

    return fn


def _print_table(rows, header):
    widths = [max(len(str(h)), *(len(str(r[i])) for r in rows)) for i, h in enumerate(header)]
    print("  ".join(str(h).ljust(w) for h, w in zip(header, widths)))
    for r in rows:
        print("  ".join(str(v).ljust(w) for v, w in zip(r, widths)))


def _g4(v):
    return f"{v:.4g}" if isinstance(v, (float, np.floating)) else str(v)


def cmd_estimate(args, run, out: Path) -> int:
    from .estimators import estimate_latt
    from .inference import BootstrapConfig, attach_bootstrap, cluster_bootstrap

    cfg = run["config"]
    ds = _load(args, cfg)
    target = run["target"]
    if target[0] == "latt":
        g = _period_index(ds, target[1], "exposure date")
        t = _period_index(ds, target[2], "period")
        fn = lambda d: estimate_latt(d, g, t).as_estimate(g, t)  # noqa: E731
    else:
        fn = _estimator_fn(cfg, target, ds)
    est = fn(ds)
    B = cfg["bootstrap"]["replications"]
    if B:
        bc = BootstrapConfig(B=B, seed=cfg["bootstrap"]["seed"], ci=cfg["bootstrap"]["ci"],
                             multiplier=cfg["bootstrap"]["multiplier"], min_cell=cfg["nuisance"]["min_cell"],
                             threads=args.threads or os.cpu_count() or 1)
        attach_bootstrap(est, cluster_bootstrap(ds, fn, bc), bc.ci)
    payload = est.to_dict(ds.periods)
    payload["config_digest"] = config_digest(run)
    payload["metadata"] = {k: v for k, v in est.metadata.items() if k != "nuisance"}
    write_json(out / "result.json", payload)
    if args.weights:
        _write_weights(est, ds, out / "weights.csv")
    rows = [(est.estimand, _g4(est.point), _g4(est.se), _g4(payload["ci_lo"]), _g4(payload["ci_hi"]), est.n)]
    _print_table(rows, ("estimand", "point", "se", "ci_lo", "ci_hi", "n"))
    return 0


def _write_weights(est, ds, path):
    import csv

    def lab(v):
        return "inf" if math.isinf(v) else str(ds.periods[int(v) - 1])

    with open(path, "w", newline="") as fh:
        wr = csv.writer(fh)
        wr.writerow(["target_g", "target_t", "comp_g", "base_t", "mean_weight"])
        for r in est.weights:
            wr.writerow([lab(r["target_g"]), lab(r["target_t"]), lab(r["comp_g"]), lab(r["base_t"]),
                         f"{r['weight']:.12g}"])


def cmd_weights(args, run, out: Path) -> int:
    cfg = run["config"]
    ds = _load(args, cfg)
    target = run["target"]
    if target[0] == "latt":
        raise ValidationError("CONFIG", "weights export covers the efficient estimator only")
    cfg["estimate"]["estimator"] = "efficient"
    est = _estimator_fn(cfg, target, ds)(ds)
    _write_weights(est, ds, out / "weights.csv")
    print(f"wrote {len(est.weights)} weight rows to {out / 'weights.csv'}")
    return 0


def cmd_simulate(args, run, out: Path) -> int:
    from . import simulation as sim
    from .estimators import estimate_latt

    sc = run["config"]["simulation"]
    reps, seed = int(sc["reps"]), int(sc["seed"])
    if reps < 2:
        raise ValidationError("CONFIG", "--reps must be at least 2")
    threads = args.threads or os.cpu_count() or 1
    dgp_name = sc["dgp"]
    if dgp_name == "staggered":
        pool = sim.load_residual_pool(sc["residual_pool"]) if sc["residual_pool"] else None
        dgp = sim.StaggeredDgp(n=sc["n"] or 400, rho=sc["rho"], residual_pool=pool)
        target = sc["target"]
        target = "avg" if target == "avg" else int(target)
        truth = dgp.truth()
        truth_val = truth["es_avg"] if target == "avg" else truth["es"][target]
        gen = lambda s: sim.gen_staggered(dgp, s)  # noqa: E731
        ests = sim.staggered_estimators(target)
    elif dgp_name == "single":
        dgp = sim.SingleDateDgp(n=sc["n"] or 50, variant=sc["variant"])
        t = dgp.T if sc["target"] == "avg" else dgp.g + int(sc["target"])
        truth_val = 0.0
        gen = lambda s: sim.gen_single_date(dgp, s)  # noqa: E731
        ests = sim.single_date_estimators(t)
    elif dgp_name == "iv":
        dgp = sim.IvDgp(n=sc["n"] or 400, rho=sc["rho"])
        t = dgp.T
        truth_val = dgp.effect
        gen = lambda s: sim.gen_iv(dgp, s)  # noqa: E731
        ests = {"latt": lambda ds: estimate_latt(ds, dgp.g, t).as_estimate(dgp.g, t)}
    else:
        raise ValidationError("CONFIG", f"unknown dgp {dgp_name!r}")
    rep = sim.run_monte_carlo(gen, ests, reps, seed=seed, truth=truth_val, threads=threads)
    rep.write_csv(out / "mc_report.csv")
    rep.write_heatmap(out / "heatmap.csv")
    payload = rep.to_dict()
    payload["config_digest"] = config_digest(run)
    write_json(out / "mc_report.json", payload)
    rows = [(r.estimator, _g4(r.bias), _g4(r.rmse), _g4(r.rel_rmse), _g4(r.coverage), _g4(r.rel_ci_length))
            for r in rep.rows]
    _print_table(rows, ("estimator", "bias", "rmse", "rel_rmse", "coverage", "rel_ci_len"))
    return 0


def cmd_test(args, run, out: Path) -> int:
    from .inference import hausman_test, holm_incremental_selection, placebo_pretrends

    cfg = run["config"]
    ds = _load(args, cfg)
    nconf = _nuisance_config(cfg)
    kind, alpha = cfg["test"]["kind"], cfg["test"]["alpha"]
    if kind == "hausman":
        res = hausman_test(ds, config=nconf, alpha=alpha)
        payload = res.to_dict()
        summary = [("hausman", _g4(res.statistic), res.df, _g4(res.pvalue))]
    elif kind == "holm":
        res = holm_incremental_selection(ds, alpha, config=nconf)
        payload = res.to_dict()
        for item in payload["tests"] + payload["selected"]:
            item["comp_g"] = ds.periods[item["comp_g"] - 1]
            item["base_t"] = ds.periods[item["base_t"] - 1]
        summary = [(f"({c['comp_g']},{c['base_t']})", "", "", _g4(c["pvalue"])) for c in payload["tests"]]
    elif kind == "placebo":
        if not run.get("placebo"):
            raise ValidationError("CONFIG", "--placebo G T is required")
        g = _period_index(ds, run["placebo"][0], "cohort")
        t = _period_index(ds, run["placebo"][1], "period")
        est = placebo_pretrends(ds, g, t, config=nconf)
        payload = est.to_dict(ds.periods)
        summary = [(est.estimand, _g4(est.point), "", _g4(est.se))]
    else:
        raise ValidationError("CONFIG", f"unknown test {kind!r}")
    payload["config_digest"] = config_digest(run)
    write_json(out / "test.json", payload)
    _print_table(summary, ("test", "stat", "df", "pvalue/se"))
    return 0


COMMANDS = {"estimate": cmd_estimate, "simulate": cmd_simulate, "test": cmd_test, "weights": cmd_weights}


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        run = resolve(args)
        out = Path(args.out or ".")
        out.mkdir(parents=True, exist_ok=True)
        with warnings.catch_warnings():
            warnings.simplefilter("default", EdidWarning)
            return COMMANDS[args.command](args, run, out)
    except ValidationError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except EstimationError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_ESTIMATION
    except EdidError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_ESTIMATION


if __name__ == "__main__":
    sys.exit(main())
