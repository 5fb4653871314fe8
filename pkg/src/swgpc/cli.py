"""Command-line entry point: ``swgpc {simulate,ether,analyze,grid-list}``."""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from importlib import metadata
from pathlib import Path

import numpy as np
import pandas as pd
import scipy

from . import harness
from .estimators import METHODS, MethodError, run_method
from .io import (SchemaError, frame_to_csv, read_dataset, read_design, read_hierarchy,
                 write_dataset, write_json)

log = logging.getLogger("swgpc")

OUT_ENV = "SWGPC_OUT"
EXIT_OK, EXIT_USAGE, EXIT_RUNTIME = 0, 1, 2

# option name -> default; also the set of keys accepted in --config files
DEFAULTS = {
    "out": None, "threads": None, "seed": 0, "reps": 500, "methods": None,
    "grid": None, "p0": None, "icc": None, "cac": None, "beta_t": None, "delta": None,
    "n_per_cell": 10, "save_datasets": False, "data": None, "hierarchy": None,
    "design": None, "output": None, "endpoints": None,
}


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _methods(text: str) -> list[str]:
    out = [m.strip() for m in text.split(",") if m.strip()]
    if out == ["all"]:
        return list(METHODS)
    bad = [m for m in out if m not in METHODS]
    if bad:
        raise argparse.ArgumentTypeError(f"unknown methods {bad}; choose from {','.join(METHODS)}")
    return out


def _floats(text: str) -> list[float]:
    return [float(v) for v in text.split(",")]


def build_parser() -> argparse.ArgumentParser:
    S = argparse.SUPPRESS
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON file of option values; flags take precedence")
    common.add_argument("--threads", type=int, default=S,
                        help="worker processes (default: available CPUs)")
    common.add_argument("--seed", type=int, default=S, help="master seed (default 0)")
    common.add_argument("-v", "--verbose", action="store_true")

    p = _Parser(prog="swgpc", description="Win-odds analyses of stepped-wedge cluster trials.")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    sim = sub.add_parser("simulate", parents=[common], help="run generic binary-endpoint scenarios")
    sim.add_argument("--grid", choices=["paper"], default=S, help="run the full factorial grid")
    for name in ("p0", "icc", "cac", "beta-t", "delta"):
        sim.add_argument(f"--{name}", type=_floats, default=S,
                         help="value or comma-separated values")
    sim.add_argument("--reps", type=int, default=S)
    sim.add_argument("--methods", type=_methods, default=S, help="comma list or 'all'")
    sim.add_argument("--n-per-cell", type=int, default=S)
    sim.add_argument("--out", default=S, help=f"output directory (env {OUT_ENV})")
    sim.add_argument("--save-datasets", action="store_true", default=S,
                     help="also write every simulated replicate as CSV")

    eth = sub.add_parser("ether", parents=[common], help="run the ETHER composite-endpoint grid")
    for name in ("icc", "cac", "beta-t"):
        eth.add_argument(f"--{name}", type=_floats, default=S, help="restrict the grid")
    eth.add_argument("--endpoints", type=lambda s: [int(v) for v in s.split(",")], default=S,
                     help="endpoint-set sizes to run, e.g. 1,4")
    eth.add_argument("--reps", type=int, default=S)
    eth.add_argument("--methods", type=_methods, default=S)
    eth.add_argument("--out", default=S)
    eth.add_argument("--save-datasets", action="store_true", default=S)

    ana = sub.add_parser("analyze", parents=[common], help="analyse one dataset CSV")
    ana.add_argument("--data", default=S, help="dataset CSV")
    ana.add_argument("--hierarchy", default=S, help="hierarchy JSON (default: <data>.hierarchy.json)")
    ana.add_argument("--design", default=S, help="design JSON (default: sidecar or inferred)")
    ana.add_argument("--methods", type=_methods, default=S)
    ana.add_argument("--output", default=S, help="write JSON here instead of standard output")

    gl = sub.add_parser("grid-list", parents=[common], help="print a scenario table")
    gl.add_argument("--grid", choices=["paper", "ether"], default=S)
    return p


def resolve(args: argparse.Namespace) -> dict:
    """Merge defaults < config file < command-line flags."""
    cfg = dict(DEFAULTS)
    if getattr(args, "config", None):
        with open(args.config) as fh:
            from_file = json.load(fh)
        unknown = set(from_file) - set(DEFAULTS)
        if unknown:
            raise UsageError(f"unknown config keys: {sorted(unknown)}")
        cfg.update(from_file)
    for k, v in vars(args).items():
        if k in DEFAULTS:
            cfg[k] = v
    if cfg["out"] is None:
        cfg["out"] = os.environ.get(OUT_ENV, "results")
    for k in ("p0", "icc", "cac", "beta_t", "delta"):
        if cfg[k] is not None and not isinstance(cfg[k], list):
            cfg[k] = [float(cfg[k])]
    if isinstance(cfg["methods"], str):
        cfg["methods"] = _methods(cfg["methods"])
    cfg["command"] = args.command
    return cfg


def _progress(done: int, total: int) -> None:
    if done == total or done % max(1, total // 20) == 0:
        print(f"\r{done}/{total} replicates", end="\n" if done == total else "",
              file=sys.stderr, flush=True)


def _manifest(cfg: dict, scenarios) -> dict:
    versions = {}
    for pkg in ("artifact",):
        try:
            versions[pkg] = metadata.version(pkg)
        except metadata.PackageNotFoundError:
            versions[pkg] = None
    versions.update(numpy=np.__version__, scipy=scipy.__version__, pandas=pd.__version__)
    return {
        "command": cfg["command"],
        "master_seed": cfg["seed"],
        "n_replicates": cfg["reps"],
        "versions": versions,
        "scenarios": [{"label": s.label, "seed": s.seed, "methods": list(s.methods)}
                      for s in scenarios],
    }


def _out_dir(cfg: dict) -> Path:
    out = Path(cfg["out"])
    if out.exists() and not out.is_dir():
        raise UsageError(f"output path {out} exists and is not a directory")
    out.mkdir(parents=True, exist_ok=True)
    if not os.access(out, os.W_OK):
        raise UsageError(f"output directory {out} is not writable")
    return out


def _run_and_write(cfg: dict, scenarios, stem: str) -> int:
    out = _out_dir(cfg)
    ocs = harness.run_scenarios(scenarios, cfg["threads"], progress=_progress)
    frame_to_csv(harness.results_frame(ocs), out / f"{stem}.csv")
    write_json(_manifest(cfg, scenarios), out / f"{stem}_manifest.json")
    if cfg["save_datasets"]:
        for i, s in enumerate(scenarios):
            for r in range(s.n_replicates):
                write_dataset(s.dataset(r), out / "datasets" / f"s{i:04d}_r{r:04d}.csv")
    print(out / f"{stem}.csv")
    return EXIT_OK


def simulation_scenarios(cfg: dict):
    methods = cfg["methods"] or list(METHODS)
    if cfg["grid"] == "paper":
        return harness.paper_grid(cfg["reps"], cfg["seed"], methods)
    single = {k: cfg[k] for k in ("p0", "icc", "cac", "beta_t", "delta")}
    missing = [k.replace("_", "-") for k, v in single.items() if v is None]
    if missing:
        raise UsageError(f"give --grid paper or all of: --{', --'.join(missing)}")
    import itertools
    return [harness.binary_scenario(p0, icc, cac, bt, d, n_replicates=cfg["reps"],
                                    master_seed=cfg["seed"], methods=methods,
                                    n_per_cell=cfg["n_per_cell"])
            for p0, icc, cac, bt, d in itertools.product(*single.values())]


def ether_grid(cfg: dict):
    keep = {"icc": cfg["icc"], "cac": cfg["cac"], "beta_t": cfg["beta_t"]}
    sets = cfg["endpoints"] or [1, 2, 3, 4]
    scen = harness.ether_scenarios(cfg["reps"], cfg["seed"],
                                   cfg["methods"] or list(harness.ETHER_METHODS))
    out = []
    for s in scen:
        if any(v is not None and s.meta[k] not in v for k, v in keep.items()):
            continue
        if len(s.hierarchy) in sets:
            out.append(s)
    if not out:
        raise UsageError("the ETHER filters select no scenario")
    return out


def cmd_simulate(cfg: dict) -> int:
    return _run_and_write(cfg, simulation_scenarios(cfg), "results")


def cmd_ether(cfg: dict) -> int:
    return _run_and_write(cfg, ether_grid(cfg), "ether_results")


def cmd_analyze(cfg: dict) -> int:
    if not cfg["data"]:
        raise UsageError("analyze needs --data")
    if not Path(cfg["data"]).is_file():
        raise UsageError(f"no such dataset: {cfg['data']}")
    hier = read_hierarchy(cfg["hierarchy"]) if cfg["hierarchy"] else None
    design = read_design(cfg["design"]) if cfg["design"] else None
    ds = read_dataset(cfg["data"], hier, design)
    results = []
    for m in cfg["methods"] or list(METHODS):
        try:
            results.append(run_method(m, ds).to_dict())
        except MethodError as e:
            results.append({"method": m, "error": str(e)})
    text = json.dumps({"results": results}, indent=2, default=float) + "\n"
    if cfg["output"]:
        from .io import atomic_write_text
        atomic_write_text(cfg["output"], text)
    else:
        sys.stdout.write(text)
    return EXIT_OK


def cmd_grid_list(cfg: dict) -> int:
    if cfg["grid"] == "ether":
        scen = harness.ether_scenarios(cfg["reps"], cfg["seed"])
    else:
        scen = harness.paper_grid(cfg["reps"], cfg["seed"])
    rows = [{"scenario_label": s.label, **{k: s.meta.get(k) for k in
                                            ("p0", "icc", "cac", "beta_t", "delta", "endpoint_set")},
             "seed": s.seed} for s in scen]
    pd.DataFrame(rows).to_csv(sys.stdout, index=False, lineterminator="\n")
    return EXIT_OK


COMMANDS = {"simulate": cmd_simulate, "ether": cmd_ether, "analyze": cmd_analyze,
            "grid-list": cmd_grid_list}


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        stream=sys.stderr, format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = resolve(args)
        return COMMANDS[args.command](cfg)
    except (UsageError, json.JSONDecodeError) as e:
        print(f"swgpc: error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except (SchemaError, OSError, ValueError, RuntimeError) as e:
        print(f"swgpc: {type(e).__name__}: {e}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
