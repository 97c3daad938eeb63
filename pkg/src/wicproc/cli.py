"""Command-line driver.

Subcommands run one pipeline stage each (``estimate-demand``,
``recover-costs``, ``fit-bids``, ``calibrate-rho``, ``simulate``) or all of
them (``pipeline``).  Each stage writes its artifacts to the output directory
and records input and output hashes in ``manifest.json``.  A stage is skipped
when its inputs, parameters and outputs are unchanged and no earlier stage
ran in the same invocation.

Exit codes: 0 success, 1 computational failure, 2 usage error.
"""
from __future__ import annotations

import argparse
import csv
import dataclasses
import hashlib
import io
import json
import logging
import os
import sys
from dataclasses import dataclass
from pathlib import Path
from typing import Callable

import numpy as np

from . import market_data as md
from .bidding import RebateModel, fit_rebate_model
from .counterfactual import MarketModel, outcomes_from_json, outcomes_to_json, program_size_sweep, \
    run_mechanisms
from .demand import DemandEstimate, DemandParams, GMMOptions, NONLINEAR, build_instruments, gmm_estimate, \
    make_draws
from .parallel import default_threads, rng_for
from .report import sweep_from_json, sweep_to_json, write_report
from .supply import OZ_PER_INFANT, RHO_GRID, CostRecovery, SupplyParams, WonMarket, calibrate_rho, \
    cost_observations, fit_cost_function, recover_costs, remove_wic_costs
from .synthetic import SyntheticSpec, generate_world

log = logging.getLogger("wicproc")

OUT_ENV = "WICPROC_OUT"
PIPELINE = ("estimate-demand", "recover-costs", "fit-bids", "calibrate-rho", "simulate")

DEFAULTS = {
    "seed": 0,
    "draws": 50,
    "consumer_draws": 200,
    "rebate_rate": 0.55,
    "threads": None,
    "format": "csv",
    "oz_per_infant": OZ_PER_INFANT,
    "rho_init": RHO_GRID[0],
    "nonlinear": ",".join(NONLINEAR),
    "scales": "0.9,1.0,1.1",
    "n_markets": None,
}


class UsageError(Exception):
    pass


class StageError(Exception):
    pass


# ----------------------------------------------------------------------
# config

def read_config(path) -> dict[str, str]:
    """``key = value`` lines; ``#`` starts a comment; keys may use - or _."""
    p = Path(path)
    if not p.is_file():
        raise UsageError(f"config file not found: {p}")
    out = {}
    for n, line in enumerate(p.read_text().splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise UsageError(f"{p}:{n}: expected key = value")
        k, v = line.split("=", 1)
        out[k.strip().replace("-", "_")] = v.strip()
    return out


def effective_config(args: argparse.Namespace) -> dict:
    """Explicit flags override the config file, which overrides defaults."""
    file_cfg = read_config(args.config) if getattr(args, "config", None) else {}
    cfg = {}
    keys = set(DEFAULTS) | set(file_cfg) | {k for k in vars(args) if k not in ("command", "config", "func")}
    for k in sorted(keys):
        explicit = getattr(args, k, None)
        if explicit is not None and explicit is not False:
            cfg[k] = explicit
        elif k in file_cfg:
            cfg[k] = file_cfg[k]
        else:
            cfg[k] = DEFAULTS.get(k, explicit)
    casts = {"seed": int, "draws": int, "consumer_draws": int, "rebate_rate": float,
             "oz_per_infant": float, "rho_init": float}
    for k, fn in casts.items():
        try:
            cfg[k] = fn(cfg[k])
        except (TypeError, ValueError):
            raise UsageError(f"invalid value for {k}: {cfg[k]!r}") from None
    if cfg.get("threads") is not None:
        cfg["threads"] = int(cfg["threads"])
    if not 0 <= cfg["rebate_rate"] <= 1:
        raise UsageError("--rebate-rate must lie in [0, 1]")
    if cfg["draws"] < 1 or cfg["consumer_draws"] < 1:
        raise UsageError("draw counts must be >= 1")
    if cfg["format"] not in ("csv", "json", "text"):
        raise UsageError("--format must be csv, json or text")
    if not cfg.get("out"):
        cfg["out"] = os.environ.get(OUT_ENV, "wicproc_out")
    return cfg


def echo_config(cfg: dict) -> None:
    for k in sorted(cfg):
        print(f"# {k} = {cfg[k]}", file=sys.stderr)


# ----------------------------------------------------------------------
# file helpers

def sha256(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def read_json(path: Path):
    if not path.is_file():
        raise UsageError(f"missing input: {path}")
    try:
        return json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise StageError(f"{path}: invalid JSON ({exc})") from None


def read_text(path: Path) -> str:
    if not path.is_file():
        raise UsageError(f"missing input: {path}")
    return path.read_text()


def write_csv(path: Path, columns, rows) -> None:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(columns)
    for r in rows:
        w.writerow([repr(float(v)) if isinstance(v, (float, np.floating)) else v for v in r])
    path.write_text(buf.getvalue())


def recovery_rows(markets, recoveries):
    for m, rec in zip(markets, recoveries):
        for j, p in enumerate(m.products):
            yield [m.market_id, p.product_id, float(rec.marginal_costs[j]), float(rec.markups[j]),
                   rec.method_tag[j]]


def read_costs(path: Path, markets) -> list[np.ndarray]:
    text = read_text(path)
    table = {}
    try:
        for row in csv.DictReader(io.StringIO(text)):
            table[(row["market_id"], row["product_id"])] = float(row["cost"])
        return [np.array([table[(m.market_id, p.product_id)] for p in m.products]) for m in markets]
    except (KeyError, ValueError) as exc:
        raise StageError(f"{path}: malformed cost table ({exc})") from None


# ----------------------------------------------------------------------
# stages

@dataclass
class Paths:
    markets: Path
    auctions: Path
    out: Path

    def o(self, name: str) -> Path:
        return self.out / name


STAGE_FILES = {
    "estimate-demand": (("markets",), ("demand.json",)),
    "recover-costs": (("markets", "demand.json"), ("costs.csv", "supply.json")),
    "fit-bids": (("markets", "auctions"), ("bids.json",)),
    "calibrate-rho": (("markets", "auctions", "demand.json", "costs.csv", "supply.json"),
                      ("rho.json", "costs_final.csv", "supply_final.json")),
    "simulate": (("markets", "demand.json", "costs_final.csv", "supply_final.json", "bids.json"),
                 ("outcomes.json", "sweep.json")),
}
STAGE_PARAMS = {
    "estimate-demand": ("seed", "consumer_draws", "nonlinear"),
    "recover-costs": ("seed", "consumer_draws", "rho_init"),
    "fit-bids": (),
    "calibrate-rho": ("seed", "consumer_draws", "oz_per_infant"),
    "simulate": ("seed", "consumer_draws", "draws", "rebate_rate", "oz_per_infant", "scales"),
}


def _input_path(paths: Paths, name: str) -> Path:
    if name == "markets":
        return paths.markets
    if name == "auctions":
        return paths.auctions
    return paths.o(name)


def load_markets(paths: Paths):
    if not paths.markets.is_file():
        raise UsageError(f"missing input: {paths.markets}")
    return md.load_markets(paths.markets)


def consumer_draws(markets, cfg) -> list:
    return [make_draws(cfg["consumer_draws"], rng_for(cfg["seed"], "consumer-draws", i),
                       income_median=m.demographics.get("median_income", 1.0))
            for i, m in enumerate(markets)]


def load_demand(paths: Paths) -> DemandEstimate:
    path = paths.o("demand.json")
    read_json(path)
    try:
        return DemandEstimate.from_json(path.read_text())
    except (KeyError, ValueError, TypeError) as exc:
        raise StageError(f"{path}: {exc}") from None


def load_supply(path: Path) -> SupplyParams:
    d = read_json(path)
    try:
        return SupplyParams(**{**d, "unidentified": tuple(d.get("unidentified", ()))})
    except TypeError as exc:
        raise StageError(f"{path}: {exc}") from None


def stage_estimate_demand(paths: Paths, cfg) -> None:
    markets = load_markets(paths)
    draws = consumer_draws(markets, cfg)
    nonlinear = tuple(n.strip() for n in str(cfg["nonlinear"]).split(",") if n.strip())
    bad = [n for n in nonlinear if n not in NONLINEAR]
    if bad:
        raise UsageError(f"unknown nonlinear parameters {bad}")
    kx = markets[0].X.shape[1]
    init = DemandParams(alpha=1.0, beta=np.zeros(kx), sigma=[0.2 if "sigma_price" in nonlinear else 0.0,
                                                              0.2 if "sigma_const" in nonlinear else 0.0],
                        pi_income=0.0)
    inst = build_instruments(markets)
    est = gmm_estimate(markets, inst, draws, init, GMMOptions(nonlinear=nonlinear, threads=cfg["threads"]))
    paths.o("demand.json").write_text(est.to_json())
    print(f"estimate-demand: {len(markets)} markets, objective {est.objective:.6g}")


def _recover_all(markets, est: DemandEstimate, draws, rho: dict, threads) -> list[CostRecovery]:
    from .parallel import pmap

    def one(args):
        m, d = args
        from .demand import DemandContext
        ctx = DemandContext.build(est.params, m, est.xi_for(m), d, winner=m.winner)
        r = rho.get(m.winner, 0.0) if m.winner is not None else 0.0
        return recover_costs(m.prices, ctx, m.winner, r)

    return pmap(one, list(zip(markets, draws)), threads)


def _fit_supply(markets, recs, rho) -> SupplyParams:
    panel = []
    for m, rec in zip(markets, recs):
        names = m.char_names or ()
        keep = [n for n in names if n.lower() not in ("const", "constant", "intercept")]
        panel.extend(cost_observations(m, rec, keep))
    return fit_cost_function(panel, rho=rho)


def stage_recover_costs(paths: Paths, cfg) -> None:
    markets = load_markets(paths)
    est = load_demand(paths)
    draws = consumer_draws(markets, cfg)
    firms = sorted({f for m in markets for f in m.firms})
    rho = {f: cfg["rho_init"] for f in firms}
    recs = _recover_all(markets, est, draws, rho, cfg["threads"])
    write_csv(paths.o("costs.csv"), ["market_id", "product_id", "cost", "markup", "method_tag"],
              recovery_rows(markets, recs))
    supply = _fit_supply(markets, recs, rho)
    paths.o("supply.json").write_text(supply.to_json())
    print(f"recover-costs: {sum(m.n_products for m in markets)} products, omega_sd {supply.omega_sd:.4g}")


def stage_fit_bids(paths: Paths, cfg) -> None:
    markets = {m.market_id: m for m in load_markets(paths)}
    if not paths.auctions.is_file():
        raise UsageError(f"missing input: {paths.auctions}")
    records = md.load_auctions(paths.auctions)
    model = fit_rebate_model(records, markets)
    paths.o("bids.json").write_text(model.to_json())
    print(f"fit-bids: {len(records)} bids, R^2 {model.r2:.4f}")


def stage_calibrate_rho(paths: Paths, cfg) -> None:
    from .demand import DemandContext
    markets = load_markets(paths)
    est = load_demand(paths)
    draws = consumer_draws(markets, cfg)
    supply = load_supply(paths.o("supply.json"))
    read_costs(paths.o("costs.csv"), markets)
    if not paths.auctions.is_file():
        raise UsageError(f"missing input: {paths.auctions}")
    auctions = md.auctions_by_market(md.load_auctions(paths.auctions))
    won = []
    for m, d in zip(markets, draws):
        if m.winner is None:
            continue
        rec = auctions.get(m.market_id, {}).get(m.winner)
        if rec is None:
            raise StageError(f"market {m.market_id}: no auction record for winner {m.winner}")
        won.append(WonMarket(DemandContext.build(est.params, m, est.xi_for(m), d, winner=m.winner), rec.rebate))
    cal = calibrate_rho(won, supply, oz_per_infant=cfg["oz_per_infant"], threads=cfg["threads"])
    paths.o("rho.json").write_text(cal.to_json())
    recs = _recover_all(markets, est, draws, cal.bounds, cfg["threads"])
    write_csv(paths.o("costs_final.csv"), ["market_id", "product_id", "cost", "markup", "method_tag"],
              recovery_rows(markets, recs))
    final = _fit_supply(markets, recs, cal.bounds)
    paths.o("supply_final.json").write_text(final.to_json())
    print("calibrate-rho: " + ", ".join(f"{f}={r:g}" for f, r in sorted(cal.bounds.items())))


def stage_simulate(paths: Paths, cfg) -> None:
    markets = load_markets(paths)
    est = load_demand(paths)
    draws = consumer_draws(markets, cfg)
    supply = load_supply(paths.o("supply_final.json"))
    costs = read_costs(paths.o("costs_final.csv"), markets)
    bids_text = read_text(paths.o("bids.json"))
    read_json(paths.o("bids.json"))
    try:
        bids = RebateModel.from_json(bids_text)
    except (KeyError, ValueError) as exc:
        raise StageError(f"{paths.o('bids.json')}: {exc}") from None
    models = [MarketModel(m, est.params, est.xi_for(m), d, remove_wic_costs(c, m, supply, m.winner), supply)
              for m, d, c in zip(markets, draws, costs)]
    kw = dict(rebate_rate=cfg["rebate_rate"], oz_per_infant=cfg["oz_per_infant"])
    res = run_mechanisms(models, bids, cfg["draws"], cfg["seed"], cfg["threads"], **kw)
    paths.o("outcomes.json").write_text(outcomes_to_json(res, [m.market_id for m in markets]))
    scales = [float(s) for s in str(cfg["scales"]).split(",") if s.strip()]
    sweep = program_size_sweep(models, bids, scales, cfg["draws"], cfg["seed"], cfg["threads"],
                               oz_per_infant=cfg["oz_per_infant"])
    paths.o("sweep.json").write_text(sweep_to_json(sweep))
    print(f"simulate: {len(markets)} markets x {cfg['draws']} draws")


STAGE_FUNCS: dict[str, Callable] = {
    "estimate-demand": stage_estimate_demand,
    "recover-costs": stage_recover_costs,
    "fit-bids": stage_fit_bids,
    "calibrate-rho": stage_calibrate_rho,
    "simulate": stage_simulate,
}


# ----------------------------------------------------------------------
# manifest

def _manifest_path(paths: Paths) -> Path:
    return paths.o("manifest.json")


def load_manifest(paths: Paths) -> dict:
    p = _manifest_path(paths)
    if not p.is_file():
        return {}
    try:
        return json.loads(p.read_text())
    except json.JSONDecodeError:
        log.warning("%s is not valid JSON; starting a fresh manifest", p)
        return {}


def _stage_state(stage: str, paths: Paths, cfg) -> dict:
    ins, outs = STAGE_FILES[stage]
    inputs = {}
    for name in ins:
        p = _input_path(paths, name)
        inputs[name] = sha256(p) if p.is_file() else None
    params = {k: str(cfg[k]) for k in STAGE_PARAMS[stage]}
    return {"inputs": inputs, "params": params}


def _outputs(stage: str, paths: Paths) -> dict:
    return {name: sha256(paths.o(name)) if paths.o(name).is_file() else None for name in STAGE_FILES[stage][1]}


def run_stage(stage: str, paths: Paths, cfg, manifest: dict, force: bool) -> bool:
    """Run ``stage`` unless the manifest shows it current; returns True if it ran."""
    state = _stage_state(stage, paths, cfg)
    entry = manifest.get(stage)
    current = (not force and entry is not None and entry.get("inputs") == state["inputs"]
               and entry.get("params") == state["params"]
               and entry.get("outputs") == _outputs(stage, paths)
               and all(v is not None for v in entry.get("outputs", {}).values()))
    if current:
        print(f"{stage}: up to date, skipped")
        return False
    try:
        STAGE_FUNCS[stage](paths, cfg)
    except UsageError:
        raise
    except (StageError, md.DataError) as exc:
        raise StageError(f"stage {stage} failed: {exc}") from exc
    except Exception as exc:
        raise StageError(f"stage {stage} failed: {type(exc).__name__}: {exc}") from exc
    manifest[stage] = {**state, "outputs": _outputs(stage, paths)}
    _manifest_path(paths).write_text(json.dumps({k: manifest[k] for k in PIPELINE if k in manifest},
                                                indent=1, sort_keys=True) + "\n")
    return True


def _paths(cfg) -> Paths:
    out = Path(cfg["out"])
    out.mkdir(parents=True, exist_ok=True)
    markets = Path(cfg["markets"]) if cfg.get("markets") else out / "markets.csv"
    auctions = Path(cfg["auctions"]) if cfg.get("auctions") else out / "auctions.csv"
    return Paths(markets, auctions, out)


# ----------------------------------------------------------------------
# commands

def cmd_generate(cfg) -> int:
    spec = SyntheticSpec()
    if cfg.get("spec"):
        spec_path = Path(cfg["spec"])
        if not spec_path.is_file():
            raise UsageError(f"spec file not found: {spec_path}")
        try:
            spec = SyntheticSpec.from_mapping(read_config(spec_path))
        except ValueError as exc:
            raise UsageError(f"{spec_path}: {exc}") from None
    if cfg.get("n_markets"):
        spec = dataclasses.replace(spec, n_markets=int(cfg["n_markets"]))
    world = generate_world(spec, cfg["seed"])
    out = Path(cfg["out"])
    out.mkdir(parents=True, exist_ok=True)
    fmt = "json" if cfg["format"] == "json" else "csv"
    md.write_markets(world.markets, out / f"markets.{fmt}", fmt)
    md.write_auctions(world.auctions, out / f"auctions.{fmt}", fmt)
    (out / "truth.json").write_text(world.truth_json())
    winners = {}
    for m in world.markets:
        winners[m.winner] = winners.get(m.winner, 0) + 1
    print(f"generate: {len(world.markets)} markets, {sum(m.n_products for m in world.markets)} products, "
          f"{len(world.auctions)} bids; wins " + ", ".join(f"{f}={n}" for f, n in sorted(winners.items())))
    return 0


def cmd_stage(stage: str):
    def run(cfg) -> int:
        paths = _paths(cfg)
        manifest = load_manifest(paths)
        run_stage(stage, paths, cfg, manifest, force=True)
        return 0
    return run


def cmd_pipeline(cfg) -> int:
    paths = _paths(cfg)
    manifest = load_manifest(paths)
    start = cfg.get("from_stage")
    if start is not None and start not in PIPELINE:
        raise UsageError(f"--from must be one of {', '.join(PIPELINE)}")
    dirty = bool(cfg.get("force"))
    for stage in PIPELINE:
        if stage == start:
            dirty = True
        dirty = run_stage(stage, paths, cfg, manifest, force=dirty) or dirty
    cmd_report({**cfg, "format": cfg["format"]})
    print(f"pipeline: {len(manifest)} stages recorded in {_manifest_path(paths)}")
    return 0


def cmd_report(cfg) -> int:
    out = Path(cfg["out"])
    outcomes_path = out / "outcomes.json"
    sweep_path = out / "sweep.json"
    read_json(outcomes_path)
    try:
        outcomes = outcomes_from_json(outcomes_path.read_text())
        sweep = sweep_from_json(sweep_path.read_text()) if sweep_path.is_file() else None
    except (KeyError, ValueError, TypeError) as exc:
        raise StageError(f"{outcomes_path}: {exc}") from None
    if sweep_path.is_file():
        read_json(sweep_path)
    first = next(iter(outcomes.values()))
    firms = tuple(first[0].profits)
    written = write_report(outcomes, sweep, firms, out / "report", cfg["format"], figures=not cfg.get("no_figures"))
    if cfg["format"] == "text":
        sys.stdout.write(written["text"].read_text())
    else:
        for name, path in written.items():
            print(f"report: {name} -> {path}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--markets", help="markets file (csv or json)")
    common.add_argument("--auctions", help="auction records file (csv or json)")
    common.add_argument("--out", help=f"output directory (default ${OUT_ENV} or ./wicproc_out)")
    common.add_argument("--seed", type=int, help="root seed (default 0)")
    common.add_argument("--draws", type=int, help="auction residual draws per market (default 50)")
    common.add_argument("--consumer-draws", type=int, help="simulation draws per market (default 200)")
    common.add_argument("--rebate-rate", type=float, help="predetermined rebate rate (default 0.55)")
    common.add_argument("--threads", type=int, help="worker threads (default: all cores)")
    common.add_argument("--format", choices=("csv", "json", "text"), help="table format (default csv)")
    common.add_argument("--config", help="key = value file with defaults for any option")
    common.add_argument("--oz-per-infant", type=float, help="formula ounces per infant per month (default 400)")
    common.add_argument("-v", "--verbose", action="store_true", help="log progress")

    p = argparse.ArgumentParser(prog="wicproc", description=__doc__.split("\n\n")[0])
    sub = p.add_subparsers(dest="command", metavar="command")
    sub.required = True
    g = sub.add_parser("generate", parents=[common], help="write a synthetic market panel")
    g.add_argument("--spec", help="key = value synthetic spec file")
    g.add_argument("--n-markets", type=int, help="number of markets")
    g.set_defaults(func=cmd_generate)
    for stage in PIPELINE:
        s = sub.add_parser(stage, parents=[common], help=f"run the {stage} stage")
        if stage == "estimate-demand":
            s.add_argument("--nonlinear", help="comma-separated nonlinear parameters to estimate")
        if stage == "recover-costs":
            s.add_argument("--rho-init", type=float, help="rho used before calibration (default 0.01)")
        if stage == "simulate":
            s.add_argument("--scales", help="WIC population scale factors (default 0.9,1.0,1.1)")
        s.set_defaults(func=cmd_stage(stage))
    r = sub.add_parser("report", parents=[common], help="render comparison tables and figures")
    r.add_argument("--no-figures", action="store_true", help="skip PNG figures")
    r.set_defaults(func=cmd_report)
    pl = sub.add_parser("pipeline", parents=[common], help="run every stage, resuming where possible")
    pl.add_argument("--force", action="store_true", help="rerun every stage")
    pl.add_argument("--from", dest="from_stage", help="rerun from this stage on")
    pl.add_argument("--nonlinear", help="comma-separated nonlinear parameters to estimate")
    pl.add_argument("--rho-init", type=float, help="rho used before calibration (default 0.01)")
    pl.add_argument("--scales", help="WIC population scale factors (default 0.9,1.0,1.1)")
    pl.add_argument("--no-figures", action="store_true", help="skip PNG figures")
    pl.set_defaults(func=cmd_pipeline)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = effective_config(args)
        if cfg.get("threads") is None:
            cfg["threads"] = default_threads()
        echo_config(cfg)
        return args.func(cfg)
    except UsageError as exc:
        parser.print_usage(sys.stderr)
        print(f"wicproc: error: {exc}", file=sys.stderr)
        return 2
    except (StageError, md.DataError) as exc:
        print(f"wicproc: error: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:   # computational failure outside a stage
        print(f"wicproc: error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
