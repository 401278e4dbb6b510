"""Command-line entry point: ``varjoint {simulate,fit,sim-study,compare,ppc}``.

Settings come from defaults, then ``--config`` (JSON), then flags.  Every
output file starts with a ``# config_hash: ...`` line and every run writes
a manifest from which it can be reproduced.
"""

from __future__ import annotations

import argparse
import logging
import os
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import __version__
from .config import (ConfigError, config_hash, load_config, prior_config, sampler_config,
                     scaling_config)
from .data import DataError, SchemaError, load_long_csv, save_long_csv
from .diagnostics import summarize
from .ppc import ppc_longitudinal, ppc_outcome
from .sampler import SubjectDraws, run_chains, save_manifest
from .simulate import SCALES, SimTruth, run_study, setting_truth, simulate_dataset

log = logging.getLogger("varjoint")

WORKERS_ENV = "VARJOINT_WORKERS"
RHAT_LIMIT = 1.1
EXIT_RHAT = 3
EXIT_INPUT = 2


def default_workers() -> int:
    env = os.environ.get(WORKERS_ENV)
    if env:
        try:
            return max(1, int(env))
        except ValueError:
            log.warning("ignoring non-integer %s=%r", WORKERS_ENV, env)
    return os.cpu_count() or 1


def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", type=Path, help="JSON configuration file")
    p.add_argument("--seed", type=int, help="master seed (overrides the config)")
    p.add_argument("--workers", type=int, default=None,
                   help=f"parallel workers (default: ${WORKERS_ENV} or CPU count)")
    p.add_argument("--out-dir", type=Path, default=Path("."), help="output directory")


def _sim_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--setting", type=int, choices=(1, 2), help="simulation setting")
    p.add_argument("--scale", choices=tuple(SCALES), help="study size preset")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="varjoint", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=__version__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("simulate", help="generate a synthetic dataset")
    _common(p)
    _sim_flags(p)

    p = sub.add_parser("fit", help="fit the joint model by MCMC")
    _common(p)
    p.add_argument("--data", type=Path, required=True, help="long-format CSV")
    p.add_argument("--outcomes", type=Path, help="outcome CSV (subject_id,outcome[,z...])")
    p.add_argument("--setting", type=int, choices=(1, 2),
                   help="use the outcome scaling constants of a simulation setting")
    p.add_argument("--no-strict", action="store_true",
                   help=f"exit 0 even if some R-hat >= {RHAT_LIMIT}")

    for name, helptext in (("sim-study", "replicate simulation study"),
                           ("compare", "joint model versus two-stage on the same replicates")):
        p = sub.add_parser(name, help=helptext)
        _common(p)
        _sim_flags(p)
        p.add_argument("--replicates", type=int, help="number of replicates")
        if name == "sim-study":
            p.add_argument("--model", choices=("joint", "twostage"), action="append",
                           help="model(s) to fit (repeatable; default joint)")

    p = sub.add_parser("ppc", help="posterior predictive checks")
    _common(p)
    p.add_argument("--data", type=Path, required=True)
    p.add_argument("--outcomes", type=Path)
    p.add_argument("--draws", type=Path, required=True, help="subject_draws.csv from fit")
    p.add_argument("--setting", type=int, choices=(1, 2))
    p.add_argument("--n-rep", type=int, help="posterior draws used")
    return parser


def _overrides(args) -> dict:
    o: dict = {}
    if args.seed is not None:
        o["seed"] = args.seed
    sim = {}
    if getattr(args, "setting", None) is not None:
        sim["setting"] = args.setting
        o["scaling"] = {"c_w": 10.0 if args.setting == 1 else 1.0, "c_b": 10.0}
    if getattr(args, "scale", None) is not None:
        sim["scale"] = args.scale
    if sim:
        o["simulate"] = sim
    if getattr(args, "replicates", None) is not None:
        o["study"] = {"replicates": args.replicates}
    if getattr(args, "n_rep", None) is not None:
        o["ppc"] = {"n_rep": args.n_rep}
    return o


def _truth(cfg: dict) -> SimTruth:
    s = cfg["simulate"]
    truth = setting_truth(int(s["setting"]), s["scale"])
    if s["truth"]:
        truth = SimTruth.from_dict({**truth.to_dict(), **s["truth"]})
    return truth


def _header(h: str) -> str:
    return f"config_hash: {h}"


def _write_json(path: Path, payload: dict) -> None:
    save_manifest(path, payload)


def _load(cfg: dict, data: Path, outcomes: Path | None):
    d = cfg["data"]
    return load_long_csv(data, outcomes, min_obs=int(d["min_obs"]),
                         percentile_step=float(d["percentile_step"]), degree=int(d["degree"]),
                         use_regimes=bool(d["use_regimes"]))


def cmd_simulate(args, cfg) -> int:
    h = config_hash(cfg)
    truth = _truth(cfg)
    ds, lat = simulate_dataset(truth, np.random.default_rng(np.random.SeedSequence(cfg["seed"])))
    out = args.out_dir
    save_long_csv(ds, out / "long.csv", out / "outcomes.csv", header_comment=_header(h))
    _write_json(out / "truth.json", {
        "config_hash": h, "config": cfg, "truth": truth.to_dict(),
        "subjects": {sid: {"log_sigma2_b": lat.log_sigma2_b[i].tolist(),
                           "log_sigma2_w": lat.log_sigma2_w[i].tolist(),
                           "eta": None if lat.eta is None else float(lat.eta[i])}
                     for i, sid in enumerate(ds.subject_ids)}})
    print(f"wrote {ds.n_subjects} subjects to {out}")
    return 0


def cmd_fit(args, cfg) -> int:
    h = config_hash(cfg)
    ds = _load(cfg, args.data, args.outcomes)
    scfg = replace(sampler_config(cfg), seed=int(cfg["seed"]))
    if scfg.n_subject_draws == 0:
        scfg = replace(scfg, n_subject_draws=int(cfg["ppc"]["n_rep"]))
    workers = args.workers or default_workers()
    fit = run_chains(ds, prior_config(cfg), scfg, scaling_config(cfg), workers=workers)
    out = args.out_dir
    hdr = _header(h)
    fit.draws.to_csv(out / "draws.csv", hdr)
    summ = summarize(fit.draws)
    summ.to_csv(out / "summary.csv", hdr)
    if fit.subject_draws is not None:
        fit.subject_draws.to_csv(out / "subject_draws.csv", hdr)
    max_rhat = summ.max_rhat()
    bad = sorted(n for n, s in summ.items() if not s.rhat < RHAT_LIMIT)
    _write_json(out / "manifest.json", {
        "config_hash": h, "config": cfg, "data": str(args.data),
        "outcomes": None if args.outcomes is None else str(args.outcomes),
        "chain_seeds": [[scfg.seed, c] for c in range(scfg.n_chains)],
        "acceptance": fit.acceptance, "max_rhat": max_rhat, "rhat_failures": bad,
        "rejected_subjects": ds.rejected, "basis": ds.basis.to_dict(),
        "regimes": list(ds.regimes.regime_names), "version": __version__})
    for s in summ.values():
        print(f"{s.name:<18}{s.mean:>10.4f}{s.sd:>9.4f}  [{s.lo95:.4f}, {s.hi95:.4f}]  "
              f"rhat={s.rhat:.3f}")
    if bad:
        msg = f"R-hat >= {RHAT_LIMIT} for: {', '.join(bad)}"
        if not args.no_strict:
            print(msg, file=sys.stderr)
            return EXIT_RHAT
        log.warning(msg)
    return 0


def _study(args, cfg, models) -> int:
    h = config_hash(cfg)
    truth = _truth(cfg)
    scale = SCALES[cfg["simulate"]["scale"]]
    reps = cfg["study"]["replicates"] or scale["replicates"]
    study = cfg["study"]
    scfg = replace(sampler_config(cfg), n_iter=int(study["n_iter"] or scale["n_iter"]),
                   n_burnin=int(study["n_burnin"] or scale["n_burnin"]))
    workers = args.workers or default_workers()

    def progress(r, out):
        log.info("replicate %d done: %s", r,
                 ", ".join(f"{m}={'ok' if e.ok else 'failed'}" for m, e in out.items()))

    report = run_study(truth, reps, models, scfg, seed=int(cfg["seed"]), workers=workers,
                       progress=progress)
    out = args.out_dir
    name = "compare" if args.command == "compare" else "study"
    report.to_csv(out / f"{name}.csv", _header(h))
    rhats = {m: [float(e.max_rhat) for e in report.estimates[m]] for m in models}
    _write_json(out / f"{name}_manifest.json", {
        "config_hash": h, "config": cfg, "truth": truth.to_dict(), "replicates": reps,
        "failures": {m: {str(k): v for k, v in f.items()} for m, f in report.failures.items()},
        "max_rhat": rhats})
    print(report.format_table())
    return 0


def cmd_sim_study(args, cfg) -> int:
    return _study(args, cfg, tuple(args.model or ("joint",)))


def cmd_compare(args, cfg) -> int:
    return _study(args, cfg, ("joint", "twostage"))


def cmd_ppc(args, cfg) -> int:
    h = config_hash(cfg)
    ds = _load(cfg, args.data, args.outcomes)
    draws = SubjectDraws.from_csv(args.draws)
    if draws.subject_ids != ds.subject_ids:
        raise DataError("subject draws do not match the dataset's subjects")
    n_rep = int(cfg["ppc"]["n_rep"])
    ss = np.random.SeedSequence(cfg["seed"])
    lng_ss, out_ss = ss.spawn(2)
    lp = ppc_longitudinal(ds, draws, n_rep, np.random.default_rng(lng_ss))
    out = args.out_dir
    lp.to_csv(out / "ppc_longitudinal.csv", _header(h))
    print(f"longitudinal: median p = {np.median(lp.p_values):.3f}, "
          f"{100 * lp.fraction_inside():.1f}% in (0.05, 0.95)")
    if ds.has_outcome:
        op = ppc_outcome(ds, draws, scaling_config(cfg), n_rep, np.random.default_rng(out_ss))
        op.to_csv(out / "ppc_outcome.csv", _header(h))
        print(f"outcome: observed events = {op.observed_events}, p = {op.p_value:.3f}")
    return 0


COMMANDS = {"simulate": cmd_simulate, "fit": cmd_fit, "sim-study": cmd_sim_study,
            "compare": cmd_compare, "ppc": cmd_ppc}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = load_config(args.config, _overrides(args))
        args.out_dir.mkdir(parents=True, exist_ok=True)
        return COMMANDS[args.command](args, cfg)
    except (ConfigError, DataError, SchemaError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
