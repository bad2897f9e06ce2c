"""Command-line harness: spherical | moments | clt | osc | verify.

Every output document embeds the resolved configuration (seed included),
the sample counts and the package version. Primary outputs are
byte-reproducible; wall-clock metadata goes to ``<out>.meta.json``.
"""
from __future__ import annotations

import argparse
import csv
import io
import json
import platform
import sys
import time
from pathlib import Path

import numpy as np
import yaml

from . import __version__
from .errors import ConfigError, NumericalError
from .haar import Seed
from .lemmas import FAULTS, LemmaConfig, run_lemma_suite
from .linalg import Field
from .measures import definiteness, load_measure, measure_moments
from .spherical import chamber_profiles
from .walk import clt_curve, gaussian_compare, oscillation_ratio_scan, parse_lambda_grid

EXIT_OK, EXIT_VERIFY, EXIT_CONFIG, EXIT_NUMERIC = 0, 1, 2, 3

DEFAULTS = {
    "common": {"field": "real", "seed": 0, "threads": 1, "format": "json", "out": None},
    "spherical": {"chamber": None, "n": None, "lambda_grid": "log:1e-2:10:20x4", "samples": 10_000},
    "moments": {"chamber": None, "measure": None, "n": None, "samples": 100_000,
                "outer_samples": 200},
    "clt": {"measure": None, "k": "5,50,200", "trials": 1000, "samples": 10_000,
            "emit_trials": False},
    "osc": {"chamber": None, "n": None, "lambda_grid": "log:1e-3:10:40x8", "samples": 20_000},
    "verify": {"samples": 1000, "neg_moment_samples": 200_000, "inject_fault": None},
}


# -- config resolution ------------------------------------------------------------

def _load_config_file(path):
    try:
        doc = yaml.safe_load(Path(path).read_text())
    except (OSError, yaml.YAMLError) as exc:
        raise ConfigError(f"cannot read config file {path}: {exc}") from None
    if doc is None:
        return {}
    if not isinstance(doc, dict):
        raise ConfigError("config file must contain a mapping")
    return {str(k).replace("-", "_"): v for k, v in doc.items()}


def resolve_config(cmd, args) -> dict:
    """Defaults, then the config file, then explicit command-line flags."""
    cfg = dict(DEFAULTS["common"], **DEFAULTS[cmd])
    if args.config:
        filed = _load_config_file(args.config)
        unknown = set(filed) - set(cfg)
        if unknown:
            raise ConfigError(f"unknown config keys for '{cmd}': {sorted(unknown)}")
        cfg.update(filed)
    for key in cfg:
        val = getattr(args, key, None)
        if val is not None:
            cfg[key] = val
    cfg["command"] = cmd
    try:
        cfg["field"] = Field.parse(cfg["field"]).value
        cfg["seed"] = Seed.of(cfg["seed"]).value
        cfg["threads"] = int(cfg["threads"])
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from None
    if cfg["threads"] < 1:
        raise ConfigError("threads must be at least 1")
    if cfg["format"] not in ("csv", "json"):
        raise ConfigError("format must be csv or json")
    for key in ("samples", "outer_samples", "trials", "neg_moment_samples"):
        if key in cfg and (not isinstance(cfg[key], int) or cfg[key] < 2):
            raise ConfigError(f"{key} must be an integer >= 2")
    return cfg


def _chamber(cfg):
    spec = cfg.get("chamber")
    if spec is None:
        raise ConfigError("a chamber point is required (--chamber x1,...,xn)")
    try:
        x = np.array([float(v) for v in spec] if isinstance(spec, list) else
                     [float(v) for v in str(spec).split(",")])
    except ValueError:
        raise ConfigError(f"malformed chamber point {spec!r}") from None
    if not np.all(np.isfinite(x)) or np.any(np.diff(x) > 0):
        raise ConfigError("chamber point must be finite and in descending order")
    if cfg.get("n") is not None and cfg["n"] != x.size:
        raise ConfigError(f"chamber point has {x.size} entries but n={cfg['n']}")
    cfg["chamber"] = x.tolist()
    cfg["n"] = int(x.size)
    return x


def _group_element(x, field):
    """Double-coset representative ``diag(e^{x/2})``, so ``2 ln sigma_sing = x``."""
    with np.errstate(over="ignore"):
        # overflow surfaces downstream as a numerical failure
        return np.diag(np.exp(0.5 * x)).astype(Field.parse(field).dtype)


def _measure(cfg):
    if cfg.get("measure") is None:
        raise ConfigError("a measure is required (--measure <path|inline json>)")
    src = cfg["measure"]
    if isinstance(src, str) and not src.lstrip().startswith(("{", "[")):
        p = Path(src)
        if not p.is_file():
            raise ConfigError(f"measure file not found: {src}")
        src = p.read_text()
    doc = yaml.safe_load(src) if isinstance(src, str) else src
    if isinstance(doc, dict) and "field" not in doc:
        doc = dict(doc, field=cfg["field"])
    nu = load_measure(doc)
    cfg["measure"] = nu.to_dict()
    cfg["field"] = nu.field.value
    return nu


def _ks(spec):
    try:
        ks = sorted({int(k) for k in (spec if isinstance(spec, list) else str(spec).split(","))})
    except ValueError:
        raise ConfigError(f"malformed k list {spec!r}") from None
    if not ks or ks[0] < 1:
        raise ConfigError("k values must be positive")
    return ks


# -- commands -------------------------------------------------------------------

def cmd_spherical(cfg):
    x = _chamber(cfg)
    grid = parse_lambda_grid(cfg["lambda_grid"], x.size)
    ps = chamber_profiles(x, cfg["samples"], cfg["seed"], cfg["threads"], cfg["field"])
    est = ps.phi(grid)
    mean = np.atleast_1d(est.mean)
    se = np.atleast_1d(est.std_error)
    header = [f"lambda_{i + 1}" for i in range(x.size)] + ["re", "im", "std_error"]
    rows = [list(lam) + [float(m.real), float(m.imag), float(s)] for lam, m, s in zip(grid, mean, se)]
    result = {"samples": est.samples, "rows": [dict(zip(header, r)) for r in rows]}
    return result, (header, rows), EXIT_OK


def _definiteness_dict(sigma2):
    evals, pd, lmin, kernel = definiteness(sigma2)
    top = max(evals[-1], 0.0)
    rank = int(np.sum(evals > 1e-8 * top)) if top > 0 else 0
    return {"sigma2_eigenvalues": evals.tolist(), "positive_definite": pd,
            "min_eigenvalue": lmin, "rank": rank,
            "kernel_direction": None if kernel is None else kernel.tolist()}


def _matrix_rows(name, m, se):
    n = m.shape[0]
    return [[name, i + 1, j + 1, float(m[i, j]), float(se[i, j]) if se is not None else ""]
            for i in range(n) for j in range(n)]


def cmd_moments(cfg):
    if cfg.get("chamber") is not None and cfg.get("measure") is not None:
        raise ConfigError("give either --chamber or --measure, not both")
    if cfg.get("measure") is not None:
        nu = _measure(cfg)
        cfg["n"] = nu.n
        mm = measure_moments(nu, cfg["outer_samples"], cfg["samples"], cfg["seed"], cfg["threads"])
        result = mm.as_dict()
        m1, m1_se, m2, m2_se, s2 = mm.m1, mm.m1_se, mm.m2, mm.m2_se, mm.sigma2
        result.update(_definiteness_dict(s2))
    else:
        x = _chamber(cfg)
        ps = chamber_profiles(x, cfg["samples"], cfg["seed"], cfg["threads"], cfg["field"])
        summ = ps.summary()
        result = summ.as_dict()
        m1, m1_se, m2, m2_se, s2 = summ.m1, summ.m1_se, summ.m2, summ.m2_se, summ.sigma2
        result.update(_definiteness_dict(s2))
    header = ["quantity", "i", "j", "value", "std_error"]
    rows = [["m1", i + 1, "", float(v), float(e)] for i, (v, e) in enumerate(zip(m1, m1_se))]
    rows += _matrix_rows("m2", m2, m2_se) + _matrix_rows("sigma2", s2, None)
    rows += [["sigma2_eigenvalue", i + 1, "", float(v), ""]
             for i, v in enumerate(result["sigma2_eigenvalues"])]
    return result, (header, rows), EXIT_OK


def cmd_clt(cfg):
    nu = _measure(cfg)
    ks = _ks(cfg["k"])
    cfg["k"] = ",".join(str(k) for k in ks)
    cfg["n"] = nu.n
    if cfg["trials"] < 100:
        raise ConfigError("trials must be at least 100")
    curve = clt_curve(nu, ks, cfg["trials"], cfg["seed"], cfg["threads"])
    mom = curve[0].nu_moments
    points = []
    rows = []
    for c in curve:
        rep = gaussian_compare(c)
        d = {"k": c.k, **rep.as_dict()}
        if cfg["emit_trials"]:
            d["statistics"] = c.statistics.tolist()
        points.append(d)
        rows.append([c.k, c.trials, rep.mean_norm, rep.cov_frobenius_rel_err, rep.mardia_skewness,
                     rep.mardia_kurtosis_z, rep.min_ks_p, rep.degenerate])
    result = {"nu_moments": mom.as_dict(), "m1_target_std_error": curve[0].m1_target_se,
              "m1_precision_met": curve[0].m1_precision_met, "curve": points}
    header = ["k", "trials", "mean_norm", "cov_frobenius_rel_err", "mardia_skewness",
              "mardia_kurtosis_z", "min_ks_p", "degenerate"]
    return result, (header, rows), EXIT_OK


def cmd_osc(cfg):
    x = _chamber(cfg)
    grid = parse_lambda_grid(cfg["lambda_grid"], x.size)
    rep = oscillation_ratio_scan(_group_element(x, cfg["field"]), grid, cfg["samples"],
                                 cfg["seed"], cfg["threads"], field=cfg["field"])
    header = [f"lambda_{i + 1}" for i in range(x.size)] + [
        "norm", "ratio2", "ratio2_std_error", "ratio1", "ratio1_std_error", "ratio1_literal"]
    rows = [list(lam) + [float(v) for v in vals] for lam, *vals in zip(
        rep.grid, rep.norms, rep.ratios2, rep.ratios2_se, rep.ratios1, rep.ratios1_se,
        rep.ratios1_literal)]
    return rep.as_dict(), (header, rows), EXIT_OK


def cmd_verify(cfg):
    lc = LemmaConfig(instances=cfg["samples"], neg_moment_samples=cfg["neg_moment_samples"],
                     seed=cfg["seed"], inject_fault=cfg["inject_fault"])
    if lc.inject_fault not in (None,) + FAULTS:
        raise ConfigError(f"unknown fault {lc.inject_fault!r}")
    results = run_lemma_suite(lc)
    ok = all(r.passed for r in results)
    header = ["lemma", "passed", "max_deviation", "tolerance", "instances"]
    rows = [[r.name, r.passed, r.max_deviation, r.tolerance, r.instances] for r in results]
    return ({"all_passed": ok, "lemmas": [r.as_dict() for r in results]}, (header, rows),
            EXIT_OK if ok else EXIT_VERIFY)


COMMANDS = {"spherical": cmd_spherical, "moments": cmd_moments, "clt": cmd_clt,
            "osc": cmd_osc, "verify": cmd_verify}


# -- output -----------------------------------------------------------------------

def _jsonable(obj):
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    if isinstance(obj, (np.floating, np.integer, np.bool_)):
        return obj.item()
    raise TypeError(f"cannot serialise {type(obj).__name__}")


def render(cfg, result, table) -> str:
    # the destination is not part of the data; reruns into other paths stay identical
    cfg = {k: v for k, v in cfg.items() if k != "out"}
    if cfg["format"] == "json":
        doc = {"artifact": "glspherical", "version": __version__, "command": cfg["command"],
               "config": cfg, "result": result}
        return json.dumps(doc, sort_keys=True, indent=2, default=_jsonable) + "\n"
    buf = io.StringIO()
    buf.write(f"# artifact: glspherical\n# version: {__version__}\n# command: {cfg['command']}\n")
    buf.write("# config: " + json.dumps(cfg, sort_keys=True, default=_jsonable) + "\n")
    w = csv.writer(buf, lineterminator="\n")
    header, rows = table
    w.writerow(header)
    for row in rows:
        w.writerow([repr(float(v)) if isinstance(v, (float, np.floating)) else v for v in row])
    return buf.getvalue()


def write_outputs(cfg, text, elapsed):
    if cfg["out"] is None:
        sys.stdout.write(text)
        return
    out = Path(cfg["out"])
    out.write_text(text)
    meta = {"timestamp": time.strftime("%Y-%m-%dT%H:%M:%S%z"), "elapsed_seconds": elapsed,
            "python": platform.python_version(), "numpy": np.__version__,
            "platform": platform.platform(), "version": __version__}
    Path(str(out) + ".meta.json").write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")


# -- argument parsing -------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="glspherical", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON/YAML file of option values")
    common.add_argument("--field", choices=["real", "complex"])
    common.add_argument("--seed", type=int)
    common.add_argument("--samples", type=int, help="Haar (inner) sample count")
    common.add_argument("--threads", type=int, help="partition count; part of the seed contract")
    common.add_argument("--format", choices=["csv", "json"])
    common.add_argument("--out", help="output path (default: stdout)")

    p = sub.add_parser("spherical", parents=[common], help="spherical function over a lambda grid")
    p.add_argument("--chamber", help="chamber point x = 2 ln sigma_sing, descending, comma separated")
    p.add_argument("--n", type=int)
    p.add_argument("--lambda-grid", dest="lambda_grid",
                   help="'log:LO:HI:COUNTxDIRS', JSON list of vectors, or 'a,b;c,d'")

    p = sub.add_parser("moments", parents=[common], help="m_1, m_2 and Sigma^2 for g or nu")
    p.add_argument("--chamber")
    p.add_argument("--measure", help="measure spec: path or inline JSON/YAML")
    p.add_argument("--n", type=int)
    p.add_argument("--outer-samples", dest="outer_samples", type=int)

    p = sub.add_parser("clt", parents=[common], help="CLT statistics and Gaussian diagnostics")
    p.add_argument("--measure")
    p.add_argument("--k", help="walk length or comma-separated list")
    p.add_argument("--trials", type=int)
    p.add_argument("--emit-trials", dest="emit_trials", action="store_const", const=True)

    p = sub.add_parser("osc", parents=[common], help="oscillation ratio scan")
    p.add_argument("--chamber")
    p.add_argument("--n", type=int)
    p.add_argument("--lambda-grid", dest="lambda_grid")

    p = sub.add_parser("verify", parents=[common], help="matrix lemma verification suite")
    p.add_argument("--neg-moment-samples", dest="neg_moment_samples", type=int)
    p.add_argument("--inject-fault", dest="inject_fault", help=argparse.SUPPRESS)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    t0 = time.perf_counter()
    try:
        cfg = resolve_config(args.command, args)
        result, table, code = COMMANDS[args.command](cfg)
        text = render(cfg, result, table)
        write_outputs(cfg, text, time.perf_counter() - t0)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except NumericalError as exc:
        print(f"numerical failure: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (OSError, ValueError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    if code == EXIT_VERIFY:
        print("verification failed", file=sys.stderr)
    return code


if __name__ == "__main__":
    sys.exit(main())
