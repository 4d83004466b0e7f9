"""Command-line experiment runner.

Each subcommand runs one experiment over its refinement ladder and writes a
run directory::

    OUT/manifest.json      config hash, catalog versions, verdicts (hashed)
    OUT/manifest.sha256    digest of manifest.json
    OUT/timings.json       wall times (kept out of the manifest)
    OUT/results/NAME.json  full result of each experiment
    OUT/tables/*.csv       symbol tables and sample fields
    OUT/figures/*.png      written by ``report``

The exit status is 1 when any verdict fails, 2 on usage errors, 0 otherwise.
"""

from __future__ import annotations

import argparse
import hashlib
import inspect
import json
import logging
import math
import multiprocessing
import os
import sys
import time
from concurrent.futures import FIRST_COMPLETED, ProcessPoolExecutor, wait
from concurrent.futures.process import BrokenProcessPool
from contextlib import ExitStack
from pathlib import Path

import numpy as np

from degenlab import __version__
from degenlab.discretization import solver_defaults
from degenlab.errors import HypothesisViolation, InadmissibleInput
from degenlab.experiments import EXPERIMENTS, MAX_2D, MAX_3D, STATEMENTS
from degenlab.geometry import CATALOG, make_domain
from degenlab.measures import DEFAULT_MEASURE, default_weight

log = logging.getLogger("degenlab")

SCHEMA_VERSION = 1
CONFIG_KEYS = {"schema", "experiments", "domain", "gamma", "grid", "levels", "tol", "seed",
               "strict", "out", "params"}

SUBCOMMANDS = {
    "audit": "audit", "solve": "solve", "hm": "hm", "green": "green", "trace-ext": "trace-ext",
    "poincare": "poincare", "regularity": "regularity", "compare": "compare",
    "fractional": "fractional", "study": "study",
}
ORDER = list(EXPERIMENTS)

# which shared flags each experiment understands
TAKES_DOMAIN = {"solve", "audit", "doubling", "regularity"}
TAKES_GAMMA = {"solve", "audit", "doubling", "fractional"}
SINGLE_GRID = {"hm", "fractional"}
LADDER = {"solve", "doubling", "compare", "green", "trace-ext", "poincare", "regularity", "study"}


class ConfigError(ValueError):
    """Invalid configuration; the message names the offending key."""

    def __init__(self, key, message):
        super().__init__(f"config key {key!r}: {message}")
        self.key = key


# --- configuration ------------------------------------------------------------------------------

def load_config(path):
    try:
        with open(path) as fh:
            cfg = json.load(fh)
    except json.JSONDecodeError as exc:
        raise ConfigError("<file>", f"not valid JSON ({exc})") from None
    if not isinstance(cfg, dict):
        raise ConfigError("<root>", "must be a JSON object")
    return cfg


def _default_param(name, param):
    sig = inspect.signature(EXPERIMENTS[name])
    return sig.parameters[param].default if param in sig.parameters else None


def _ladder(name, grid, levels):
    default = _default_param(name, "levels")
    count = len(default) if levels is None else levels
    finest = default[-1] if grid is None else grid
    if count < 1:
        raise ConfigError("levels", "must be at least 1")
    if finest % 2 ** (count - 1):
        raise ConfigError("grid", f"{finest} is not divisible by 2^(levels-1) = {2 ** (count - 1)}")
    ladder = [finest // 2 ** (count - 1 - i) for i in range(count)]
    if ladder[0] < 8:
        raise ConfigError("levels", f"coarsest grid {ladder[0]} is below 8")
    return tuple(ladder)


def _ladder_dim(name, kwargs):
    if name == "solve":
        return make_domain(kwargs.get("domain_id", "axis3d")).n
    if name == "doubling":
        return max(make_domain(d).n for d, _ in kwargs.get("cases", _default_param(name, "cases")))
    return 2


def validate(cfg):
    """Normalize a config dict; raises ConfigError naming the first bad key."""
    unknown = sorted(set(cfg) - CONFIG_KEYS)
    if unknown:
        raise ConfigError(unknown[0], f"unknown key; allowed: {sorted(CONFIG_KEYS)}")
    schema = cfg.get("schema", SCHEMA_VERSION)
    if schema != SCHEMA_VERSION:
        raise ConfigError("schema", f"version {schema!r} is not supported (expected {SCHEMA_VERSION})")
    exps = cfg.get("experiments", ORDER)
    if isinstance(exps, str):
        exps = ORDER if exps == "all" else [exps]
    bad = [e for e in exps if e not in EXPERIMENTS]
    if bad:
        raise ConfigError("experiments", f"unknown experiment {bad[0]!r}; known: {ORDER}")
    out = {"schema": SCHEMA_VERSION, "experiments": [e for e in ORDER if e in exps]}
    for key, typ in (("grid", int), ("levels", int), ("seed", int)):
        v = cfg.get(key)
        if v is not None and (isinstance(v, bool) or not isinstance(v, int)):
            raise ConfigError(key, f"expected an integer, got {v!r}")
        out[key] = v
    for key in ("gamma", "tol"):
        v = cfg.get(key)
        if v is not None and (isinstance(v, bool) or not isinstance(v, (int, float))):
            raise ConfigError(key, f"expected a number, got {v!r}")
        out[key] = None if v is None else float(v)
    if out["tol"] is not None and not 0 < out["tol"] < 1:
        raise ConfigError("tol", "must lie in (0, 1)")
    if out["seed"] is None:
        out["seed"] = 0
    out["strict"] = bool(cfg.get("strict", False))
    dom = cfg.get("domain")
    if dom is not None and dom not in CATALOG:
        raise ConfigError("domain", f"unknown domain {dom!r}; known: {sorted(CATALOG)}")
    out["domain"] = dom
    params = cfg.get("params", {})
    if not isinstance(params, dict):
        raise ConfigError("params", "must map experiment names to keyword objects")
    out["params"] = {}
    for name, kw in sorted(params.items()):
        if name not in EXPERIMENTS:
            raise ConfigError("params", f"unknown experiment {name!r}")
        sig = inspect.signature(EXPERIMENTS[name]).parameters
        for k in kw:
            if k not in sig or k in ("out", "_"):
                raise ConfigError(f"params.{name}.{k}", f"not a parameter of {name}")
        out["params"][name] = dict(sorted(kw.items()))
    for name in out["experiments"]:
        experiment_kwargs(name, out)        # surfaces range and cap errors at load
    return out


def experiment_kwargs(name, cfg):
    """Translate shared flags into keyword arguments for one experiment."""
    kw = {}
    if cfg["domain"] is not None and name in TAKES_DOMAIN:
        dom = cfg["domain"]
        if name == "doubling":
            d = make_domain(dom)
            kw["cases"] = ((dom, "dirichlet" if d.bounded_omega else "neumann"),)
        elif name == "regularity":
            kw["holder_domains"] = (dom,)
        else:
            kw["domain_id"] = dom
    if cfg["gamma"] is not None and name in TAKES_GAMMA:
        g = cfg["gamma"]
        if name == "fractional":
            if not -1 < g < 1:
                raise ConfigError("gamma", f"{g} outside (-1, 1) for the extension problem")
            kw["gammas"] = (g,)
        else:
            kw["gamma"] = g
    if name in ("solve", "audit", "doubling") and "gamma" in kw:
        doms = ([c[0] for c in kw.get("cases", _default_param(name, "cases"))] if name == "doubling"
                else [kw.get("domain_id", _default_param(name, "domain_id"))])
        for dom in doms:
            try:
                default_weight(make_domain(dom), kw["gamma"])
            except InadmissibleInput as exc:
                raise ConfigError("gamma", str(exc)) from None
    if name in SINGLE_GRID:
        if cfg["levels"] not in (None, 1) and cfg["experiments"] == [name]:
            raise ConfigError("levels", f"{name} runs on a single grid")
        if cfg["grid"] is not None:
            if cfg["grid"] > MAX_2D:
                raise ConfigError("grid", f"{cfg['grid']} exceeds the cap {MAX_2D} for 2D grids")
            kw["N"] = cfg["grid"]
    elif name in LADDER and (cfg["grid"] is not None or cfg["levels"] is not None):
        kw["levels"] = _ladder(name, cfg["grid"], cfg["levels"])
    if name in LADDER:
        cap = MAX_2D if _ladder_dim(name, kw) == 2 else MAX_3D
        top = max(kw.get("levels", _default_param(name, "levels")))
        if top > cap:
            raise ConfigError("grid", f"{top} exceeds the cap {cap} for {name}")
    if "seed" in inspect.signature(EXPERIMENTS[name]).parameters:
        kw["seed"] = cfg["seed"]
    kw.update(cfg["params"].get(name, {}))
    return kw


def config_hash(cfg):
    return hashlib.sha256(canonical(cfg)).hexdigest()


# --- serialization --------------------------------------------------------------------------------

def _plain(obj):
    if isinstance(obj, dict):
        return {str(k): _plain(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_plain(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _plain(obj.tolist())
    if isinstance(obj, (np.bool_, bool)):
        return bool(obj)
    if isinstance(obj, np.integer):
        return int(obj)
    if isinstance(obj, (np.floating, float)):
        v = float(obj)
        return v if math.isfinite(v) else None
    return obj


def canonical(obj):
    return json.dumps(_plain(obj), sort_keys=True, separators=(",", ":")).encode()


def _write_json(path, obj):
    data = canonical(obj) + b"\n"
    Path(path).write_bytes(data)
    return hashlib.sha256(data).hexdigest()


# --- running ------------------------------------------------------------------------------------------

def _run_experiment(name, kwargs, tol, strict, tables):
    """Worker body: returns (name, result, wall time, error, partial)."""
    t0 = time.perf_counter()
    with ExitStack() as stack:
        stack.enter_context(solver_defaults(strict=strict, **({} if tol is None else {"tol": tol})))
        if strict:
            from threadpoolctl import threadpool_limits
            stack.enter_context(threadpool_limits(limits=1))
        if "out" in inspect.signature(EXPERIMENTS[name]).parameters:
            kwargs = {**kwargs, "out": tables}
        try:
            res = EXPERIMENTS[name](**kwargs)
            return name, res, time.perf_counter() - t0, None, False
        except MemoryError as exc:
            return name, None, time.perf_counter() - t0, f"resource exhaustion: {exc}", True
        except (InadmissibleInput, HypothesisViolation) as exc:
            return name, None, time.perf_counter() - t0, f"{type(exc).__name__}: {exc}", False


def _isolated(args, n_workers):
    """Run each job in a fresh spawned process, at most n_workers at a time.

    A worker that dies (for instance killed for memory) yields a partial,
    failed entry instead of bringing the run down.
    """
    ctx = multiprocessing.get_context("spawn")
    finished = [None] * len(args)
    queue = list(enumerate(args))
    pending = {}

    def launch():
        while queue and len(pending) < n_workers:
            i, a = queue.pop(0)
            ex = ProcessPoolExecutor(max_workers=1, mp_context=ctx)
            pending[ex.submit(_run_experiment, *a)] = (i, ex, a[0], time.perf_counter())

    launch()
    while pending:
        done, _ = wait(pending, return_when=FIRST_COMPLETED)
        for fut in done:
            i, ex, name, t0 = pending.pop(fut)
            try:
                finished[i] = fut.result()
            except BrokenProcessPool:
                finished[i] = (name, None, time.perf_counter() - t0,
                               "resource exhaustion: worker process terminated", True)
            ex.shutdown()
        launch()
    return finished


def run(cfg, out, workers=None):
    """Run the configured experiments and write the run directory; returns the manifest."""
    out = Path(out)
    (out / "results").mkdir(parents=True, exist_ok=True)
    (out / "tables").mkdir(exist_ok=True)
    jobs = [(name, experiment_kwargs(name, cfg)) for name in cfg["experiments"]]
    tables = str(out / "tables")
    args = [(n, kw, cfg["tol"], cfg["strict"], tables) for n, kw in jobs]
    if cfg["strict"]:
        workers = 1
    finished = _isolated(args, workers or min(len(jobs), os.cpu_count() or 1))
    verdicts, timings = [], {}
    for (name, kw), (_, res, wall, err, partial) in zip(jobs, finished):
        timings[name] = wall
        entry = {"experiment": name, "statement": STATEMENTS[name], "parameters": kw,
                 "pass": bool(res is not None and res.get("pass", False))}
        if res is not None:
            entry["result"] = f"results/{name}.json"
            entry["sha256"] = _write_json(out / "results" / f"{name}.json", res)
        if err is not None:
            entry["error"] = err
            entry["partial"] = partial
        verdicts.append(entry)
        log.info("%s: %s (%.1fs)", name, "pass" if entry["pass"] else "FAIL", wall)
    manifest = {
        "schema": SCHEMA_VERSION,
        "package": {"name": "degenlab", "version": __version__},
        "catalogs": {"domains": sorted(CATALOG), "measures": sorted(set(DEFAULT_MEASURE.values()))},
        "config": cfg,
        "config_hash": config_hash(cfg),
        "strict": cfg["strict"],
        "verdicts": verdicts,
        "partial": any(v.get("partial", False) for v in verdicts),
        "pass": all(v["pass"] for v in verdicts),
    }
    digest = _write_json(out / "manifest.json", manifest)
    (out / "manifest.sha256").write_text(f"{digest}  manifest.json\n")
    (out / "timings.json").write_text(json.dumps(timings, indent=2, sort_keys=True) + "\n")
    return manifest


# --- report -----------------------------------------------------------------------------------------

def _load_results(out):
    res = {}
    for p in sorted((Path(out) / "results").glob("*.json")):
        res[p.stem] = json.loads(p.read_text())
    return res


def render_report(out):
    """Draw figures from a finished run directory; returns the written paths."""
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    out = Path(out)
    manifest = json.loads((out / "manifest.json").read_text())
    results = _load_results(out)
    figdir = out / "figures"
    figdir.mkdir(exist_ok=True)
    written = []

    def save(fig, name):
        path = figdir / name
        fig.tight_layout()
        fig.savefig(path, dpi=120)
        plt.close(fig)
        written.append(str(path))

    names = [v["experiment"] for v in manifest["verdicts"]]
    ok = [v["pass"] for v in manifest["verdicts"]]
    fig, ax = plt.subplots(figsize=(6, 0.4 * len(names) + 1))
    ax.barh(names, [1] * len(names), color=["tab:green" if p else "tab:red" for p in ok])
    ax.set_xticks([])
    ax.invert_yaxis()
    ax.set_title("verdicts (green = pass)")
    save(fig, "verdicts.png")

    curves = []
    if "solve" in results:
        curves.append(("solve: delta^alpha", results["solve"]["h"], results["solve"]["error"]))
    if "study" in results:
        for q, rec in results["study"]["quantities"].items():
            if all(e is not None and e > 0 for e in rec["error"]):
                curves.append((f"study: {q}", results["study"]["h"], rec["error"]))
    if "trace-ext" in results:
        curves.append(("trace of extension", results["trace-ext"]["h"], results["trace-ext"]["sup_error"]))
    if curves:
        fig, ax = plt.subplots(figsize=(6, 4.5))
        for label, h, e in curves:
            ax.loglog(h, e, "o-", label=label)
        ax.set_xlabel("h")
        ax.set_ylabel("error")
        ax.legend(fontsize=8)
        ax.set_title("convergence under refinement")
        save(fig, "convergence.png")

    if "fractional" in results:
        fig, ax = plt.subplots(figsize=(6, 4.5))
        for tab in results["fractional"]["tables"]:
            k = np.array(tab["k"], float)
            kk = np.linspace(1, k.max(), 100)
            line, = ax.plot(k, tab["normalized"], "o", label=f"gamma={tab['gamma']:+.2f}")
            ax.plot(kk, kk ** (2 * tab["s"]), "-", color=line.get_color(), lw=0.8)
        ax.set_xlabel("k")
        ax.set_ylabel("sigma(k) / sigma(1)")
        ax.legend(fontsize=8)
        ax.set_title("recovered symbol against |k|^(2s)")
        save(fig, "symbol.png")

    field_csv = out / "tables" / "omega_interval.csv"
    if field_csv.exists():
        data = np.loadtxt(field_csv, delimiter=",", skiprows=1)
        xs, ys, vals = data[:, 1], data[:, 2], data[:, 3]
        ux, uy = np.unique(xs), np.unique(ys)
        img = np.full((len(uy), len(ux)), np.nan)
        img[np.searchsorted(uy, ys), np.searchsorted(ux, xs)] = vals
        fig, ax = plt.subplots(figsize=(6, 3.5))
        im = ax.imshow(img, origin="lower", extent=(ux[0], ux[-1], uy[0], uy[-1]), cmap="viridis")
        fig.colorbar(im, ax=ax, label="omega")
        ax.set_title("harmonic measure of an interval")
        save(fig, "omega.png")

    stab = {}
    if "doubling" in results:
        for c in results["doubling"]["cases"]:
            stab[f"doubling {c['domain']}"] = c["constants"]
    if "compare" in results:
        stab["green vs omega"] = results["compare"]["green_vs_hm"]["constants"]
    if "green" in results:
        stab["green far field"] = results["green"]["far_constant"]
    if "regularity" in results:
        stab["boundary Moser"] = results["regularity"]["moser_boundary"]["constants"]
    if stab:
        fig, ax = plt.subplots(figsize=(6, 4.5))
        for label, cs in stab.items():
            ax.semilogy(range(1, len(cs) + 1), cs, "o-", label=label)
        ax.set_xlabel("refinement level")
        ax.set_ylabel("worst constant")
        ax.legend(fontsize=8)
        ax.set_title("constants across refinements")
        save(fig, "constants.png")
    return written


# --- entry point ---------------------------------------------------------------------------------------

def build_parser():
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", metavar="PATH", help="JSON config (schema version %d)" % SCHEMA_VERSION)
    common.add_argument("--domain", metavar="ID", help="catalog domain id")
    common.add_argument("--gamma", type=float, metavar="F", help="weight exponent")
    common.add_argument("--grid", type=int, metavar="N", help="finest grid: h = 1/N")
    common.add_argument("--levels", type=int, metavar="K", help="number of refinement levels")
    common.add_argument("--tol", type=float, metavar="F", help="solver tolerance")
    common.add_argument("--seed", type=int, metavar="N", help="random seed")
    common.add_argument("--out", metavar="DIR", help="run directory (default runs/<command>)")
    common.add_argument("--strict", action="store_true", default=None,
                        help="sequential, single-threaded run with bit-identical manifests")
    p = argparse.ArgumentParser(prog="degenlab", description=__doc__.split("\n")[0])
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True)
    for name in SUBCOMMANDS:
        sub.add_parser(name, parents=[common], help=STATEMENTS[SUBCOMMANDS[name]])
    sub.add_parser("report", parents=[common],
                   help="run the configured experiments (or reuse --out) and draw figures")
    return p


def _merge(args):
    cfg = load_config(args.config) if args.config else {}
    for key in ("domain", "gamma", "grid", "levels", "tol", "seed", "strict"):
        v = getattr(args, key)
        if v is not None:
            cfg[key] = v
    if args.command != "report":
        cfg["experiments"] = [SUBCOMMANDS[args.command]]
    out = args.out or cfg.pop("out", None) or f"runs/{args.command}"
    cfg.pop("out", None)
    return cfg, out


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        raw, out = _merge(args)
        reuse = (args.command == "report" and not args.config
                 and (Path(out) / "manifest.json").exists())
        cfg = None if reuse else validate(raw)
    except (ConfigError, OSError) as exc:
        parser.error(str(exc))
    if reuse:
        manifest = json.loads((Path(out) / "manifest.json").read_text())
    else:
        manifest = run(cfg, out)
    for v in manifest["verdicts"]:
        print(f"{'PASS' if v['pass'] else 'FAIL'}  {v['experiment']:<11} {v['statement']}"
              + (f"  [{v['error']}]" if "error" in v else ""))
    if args.command == "report":
        for path in render_report(out):
            print(f"wrote {path}")
    print(f"manifest: {Path(out) / 'manifest.json'}")
    return 0 if manifest["pass"] else 1


if __name__ == "__main__":
    sys.exit(main())
