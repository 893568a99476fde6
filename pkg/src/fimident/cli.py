"""Command-line entry point: ``fimident <subcommand> [options]``.

Exit codes: 0 success, 1 configuration error, 2 numerical failure,
3 study failure threshold exceeded.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from .dynsim import ChannelSpec, Trace, simulate
from .errors import ConfigError, FimIdentError, StudyFailure
from .estimator import fit
from .fisher import empirical_nfim
from .harness import (StudyConfig, _context, derive_seed, export_report, monte_carlo_study,
                      perturbation_sweep, rises_then_plateaus, run_algorithm1)
from .measure import MeasurementSet, noise_sigma_from_snr, synthesize
from .model import init_load_flow

log = logging.getLogger("fimident")

EXIT_OK, EXIT_CONFIG, EXIT_NUMERIC, EXIT_STUDY = 0, 1, 2, 3


def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="study configuration JSON (defaults: built-in 9-bus study)")
    p.add_argument("--seed", type=int, help="master seed (unsigned 64-bit)")
    p.add_argument("--snr-db", type=float, help="measurement SNR in dB")
    p.add_argument("--out", default="out", help="output directory")
    p.add_argument("--trials", type=int, help="Monte-Carlo trial count")
    p.add_argument("--parallel", type=int, default=1, help="worker processes")
    p.add_argument("--channel", action="append",
                   help="channel such as SM1.omega_m (repeatable; overrides the config)")
    p.add_argument("-v", "--verbose", action="store_true")


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="fimident", description=__doc__.splitlines()[0])
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("simulate", help="simulate the scenario and write trace CSVs")
    _common(p)
    p.add_argument("--at", choices=("true", "p0"), default="true",
                   help="parameter set to simulate with")

    p = sub.add_parser("measure", help="add Gaussian noise to a trace CSV")
    _common(p)
    p.add_argument("--trace", required=True, help="noiseless trace CSV")

    p = sub.add_parser("fim", help="numerical FIM report for one channel")
    _common(p)
    p.add_argument("--at", choices=("true", "p0"), default="p0")
    p.add_argument("--realizations", type=int)

    p = sub.add_parser("fit", help="fit target parameters to measurements")
    _common(p)
    p.add_argument("--measurements", help="measurement CSV (with JSON sidecar); "
                                          "synthesized from the true parameters if omitted")

    p = sub.add_parser("select", help="choose a channel by ellipsoid volume, then fit")
    _common(p)

    p = sub.add_parser("study", help="Monte-Carlo coherency study")
    _common(p)
    p.add_argument("--mode", choices=("single", "multi"))

    p = sub.add_parser("sweep", help="nFIM versus relative perturbation")
    _common(p)
    p.add_argument("--parameter", action="append", help="parameter path (repeatable; default all)")
    p.add_argument("--alphas", help="comma-separated relative perturbations")
    return ap


def _config(args) -> StudyConfig:
    cfg = StudyConfig.load(args.config) if args.config else StudyConfig()
    upd = {}
    if args.seed is not None:
        if not 0 <= args.seed < 2 ** 64:
            raise ConfigError("--seed must be an unsigned 64-bit integer")
        upd["seed"] = args.seed
    if args.snr_db is not None:
        upd["snr_db"] = args.snr_db
    if args.trials is not None:
        upd["trials"] = args.trials
    if args.channel:
        upd["channels"] = tuple(args.channel)
    if getattr(args, "mode", None):
        upd["mode"] = args.mode
    if getattr(args, "realizations", None):
        upd["realizations"] = args.realizations
    return StudyConfig.from_json({**cfg.to_json(), **upd}) if upd else cfg


def _write(path: Path, text: str) -> None:
    path.write_text(text)
    log.info("wrote %s", path)


def cmd_simulate(cfg: StudyConfig, args, out: Path) -> None:
    model = cfg.model()
    values = {p.path: getattr(p, args.at) for p in cfg.parameters}
    scen = cfg.scenario_obj(model)
    chans = [ChannelSpec.parse(c) for c in cfg.channels]
    op = init_load_flow(model)
    for tr in simulate(model, op, values, scen, chans):
        _write(out / f"trace_{tr.channel.label}.csv", tr.to_csv())


def cmd_measure(cfg: StudyConfig, args, out: Path) -> None:
    tr = Trace.from_csv(args.trace)
    sigma = noise_sigma_from_snr(tr, cfg.snr_db)
    z = synthesize(tr, sigma, derive_seed(cfg.seed, 0, 0, 0), snr_db=cfg.snr_db)
    z.save(out / f"meas_{tr.channel.label}.csv", base_path=out / f"base_{tr.channel.label}.csv")
    log.info("sigma_n = %.6g %s", sigma, tr.unit)


def cmd_fim(cfg: StudyConfig, args, out: Path) -> None:
    cfg_text = json.dumps(cfg.to_json(), sort_keys=True)
    for ci, ch in enumerate(cfg.channels):
        ctx = _context(cfg_text, ci, tuple(cfg.paths))
        p = ctx.truth if args.at == "true" else ctx.p0
        seeds = [derive_seed(cfg.seed, 2, ci, r) for r in range(cfg.realizations)]
        rep = empirical_nfim(ctx.oracle, p, ctx.sigma_n, seeds, C=cfg.C)
        _write(out / f"fim_{ch}.json", rep.dumps())


def cmd_fit(cfg: StudyConfig, args, out: Path) -> None:
    cfg_text = json.dumps(cfg.to_json(), sort_keys=True)
    ch = cfg.channels[0]
    ctx = _context(cfg_text, 0, tuple(cfg.paths))
    if args.measurements:
        z = MeasurementSet.load(args.measurements)
        if z.channel.label != ch:
            raise ConfigError(f"measurements are for {z.channel.label}, config channel is {ch}")
    else:
        z = ctx.measurement(0)
    res = fit(ctx.oracle, z, ctx.p0, cfg.zeta, cfg.eta, cfg.max_iter)
    _write(out / "estimation.json", res.dumps())
    _write(out / "fit_log.csv", res.log_csv())


def cmd_select(cfg: StudyConfig, args, out: Path) -> None:
    res = run_algorithm1(cfg)
    _write(out / "select.json", json.dumps(res.to_json(), indent=2, sort_keys=True) + "\n")
    _write(out / "fit_log.csv", res.estimation.log_csv())
    print(res.selected)


def cmd_study(cfg: StudyConfig, args, out: Path) -> None:
    try:
        rep = monte_carlo_study(cfg, parallel=args.parallel)
    except StudyFailure as exc:
        if exc.report is not None:
            export_report(exc.report, out)
        raise
    export_report(rep, out)


def cmd_sweep(cfg: StudyConfig, args, out: Path) -> None:
    alphas = ([float(a) for a in args.alphas.split(",")] if args.alphas
              else list(np.geomspace(1e-3, 1.0, 25)))
    summary = {}
    for path in args.parameter or cfg.paths:
        res = perturbation_sweep(cfg, path, alphas)
        _write(out / f"sweep_{path}.csv", res.to_csv())
        ok, info = rises_then_plateaus(res.alphas, res.normalized)
        summary[path] = {"rises_then_plateaus": ok, **info}
    _write(out / "sweep.json", json.dumps(summary, indent=2, sort_keys=True) + "\n")


COMMANDS = {
    "simulate": cmd_simulate, "measure": cmd_measure, "fim": cmd_fim, "fit": cmd_fit,
    "select": cmd_select, "study": cmd_study, "sweep": cmd_sweep,
}


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s")
    try:
        cfg = _config(args)
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        COMMANDS[args.command](cfg, args, out)
    except StudyFailure as exc:
        print(f"study failed: {exc}", file=sys.stderr)
        return EXIT_STUDY
    except (ConfigError, FileNotFoundError, KeyError, json.JSONDecodeError) as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (FimIdentError, np.linalg.LinAlgError, FloatingPointError) as exc:
        print(f"numerical failure: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
