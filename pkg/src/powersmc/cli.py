"""Command-line entry point.

Every command reads an optional JSON config (``--config``), applies flag
overrides, runs, and writes CSV/JSON artifacts into ``--out``. Pass
``--figures`` to also render PNG figures next to them.

Exit codes: 0 success, 1 input error, 2 capacity error, 3 numerical or
assertion failure.
"""
from __future__ import annotations

import argparse
import csv
import io
import json
import math
import sys
from pathlib import Path

import numpy as np

from powersmc.cost import (
    CostParams,
    ThroughputTable,
    compute_ratio,
    global_factor,
    lastblock_factor,
    mh_cost_global,
    mh_cost_lastblock,
    overhead_floor,
    reconcile,
    smc_cost,
    wallclock_ratio,
)
from powersmc.errors import InputError, PowerSMCError
from powersmc.io import write_artifacts
from powersmc.lm import load_model, mismatch_model, uniform_model
from powersmc.mh import MHConfig, run_mh_power
from powersmc.resampling import SCHEMES
from powersmc.smc import EngineConfig, RampSchedule, estimate_normalizer, run_power_smc, run_sis
from powersmc.target import ExactTarget, enumerate_target, seq_key, temperature_joint, tv_distance

COMMANDS = ("run-smc", "run-sis", "run-mh", "run-exact", "compare", "cost-report", "temp-mismatch")

# config keys that command-line flags may override
OVERRIDES = {
    "alpha": float,
    "particles": int,
    "ess_threshold": float,
    "ramp_tokens": int,
    "resampler": str,
    "block": int,
    "moves": int,
    "regime": str,
    "horizon": int,
    "tau_prop": float,
    "runs": int,
}


def _load_config(args) -> dict:
    cfg: dict = {}
    base = Path.cwd()
    if args.config:
        path = Path(args.config)
        if not path.exists():
            raise InputError(f"config {path} not found")
        try:
            cfg = json.loads(path.read_text())
        except json.JSONDecodeError as exc:
            raise InputError(f"config {path} is not valid JSON: {exc}") from None
        cfg = {k.replace("-", "_"): v for k, v in cfg.items()}
        base = path.parent
        if cfg.get("command") not in (None, args.command):
            raise InputError(f"config is for {cfg['command']!r}, not {args.command!r}")
    for key in OVERRIDES:
        val = getattr(args, key, None)
        if val is not None:
            cfg[key] = val
    if args.seed is not None:
        cfg["seed"] = args.seed
    if args.model is not None:
        cfg["model"] = args.model
        base = Path.cwd()
    if "seed" not in cfg:
        raise InputError("a seed is required (--seed or config 'seed')")
    if int(cfg["seed"]) < 0:
        raise InputError("seed must be unsigned")
    if cfg.get("model") is not None:
        cfg["model"] = str((base / cfg["model"]) if not Path(cfg["model"]).is_absolute() else cfg["model"])
    return cfg


def _model(cfg, required=True):
    if cfg.get("model") is None:
        if required:
            raise InputError("a model spec is required (--model or config 'model')")
        return None
    return load_model(cfg["model"])


def _engine(cfg, default_particles=64) -> EngineConfig:
    alpha = float(cfg.get("alpha", 4.0))
    ramp_tokens = int(cfg.get("ramp_tokens", 0) or 0)
    ramp = RampSchedule.linear(alpha, ramp_tokens) if ramp_tokens and alpha > 1 else None
    return EngineConfig(
        n_particles=int(cfg.get("particles", default_particles)),
        alpha=alpha,
        kappa=float(cfg.get("ess_threshold", 0.5)),
        t_max=cfg.get("horizon"),
        resampler=cfg.get("resampler", "systematic"),
        seed=int(cfg["seed"]),
        ramp=ramp,
    )


def _table_csv(header, rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    w.writerows(rows)
    return buf.getvalue()


def cmd_run_exact(cfg, figures=False) -> dict:
    model = _model(cfg)
    target = enumerate_target(model, float(cfg.get("alpha", 4.0)))
    return {"exact.csv": target.to_csv(), "exact.json": target.sidecar()}


def _smc_summary(cfg, engine, ens, trace, ledger, log_z) -> dict:
    return {
        "command": cfg["command"],
        "alpha": engine.alpha,
        "n_particles": engine.n_particles,
        "kappa": engine.kappa,
        "resampler": engine.resampler,
        "ramp_tokens": int(cfg.get("ramp_tokens", 0) or 0),
        "seed": engine.seed,
        "num_resamples": trace.num_resamples,
        "num_terminated": int(ens.done.sum()),
        "log_normalizer_estimate": log_z,
        "token_evals": ledger.token_evals,
        "worst_case_evals": ledger.worst_case_evals,
    }


def cmd_run_smc(cfg, figures=False) -> dict:
    model = _model(cfg)
    engine = _engine(cfg)
    res = run_power_smc(model, engine)
    summary = _smc_summary(cfg, engine, res.ensemble, res.trace, res.ledger,
                           estimate_normalizer(res.trace, log=True))
    idx = res.ensemble.prefixes.index(res.sample)
    summary["sample"] = seq_key(res.sample)
    summary["sample_terminated"] = bool(res.ensemble.done[idx])
    out = {
        "samples.csv": res.ensemble.sample_set().to_csv(),
        "trace.csv": res.trace.to_csv(),
        "summary.json": summary,
    }
    if figures:
        from powersmc import plots

        out["ess.png"] = plots.ess_trace(res.trace, engine.n_particles, engine.kappa)
    return out


def cmd_run_sis(cfg, figures=False) -> dict:
    model = _model(cfg)
    engine = _engine(cfg)
    res = run_sis(model, engine)
    summary = _smc_summary(cfg, engine, res.ensemble, res.trace, res.ledger, res.samples.log_normalizer())
    summary["normalizer_estimate"] = res.normalizer
    summary["normalizer_stderr"] = res.samples.normalizer_stderr()
    return {
        "samples.csv": res.samples.to_csv(),
        "trace.csv": res.trace.to_csv(),
        "summary.json": summary,
    }


def _mh_config(cfg, model) -> MHConfig:
    horizon = int(cfg.get("horizon", model.t_cap if model is not None else 0))
    return MHConfig(
        block=int(cfg.get("block", horizon)),
        moves=int(cfg.get("moves", 10)),
        horizon=horizon,
        regime=cfg.get("regime", "global"),
        tau_prop=float(cfg.get("tau_prop", 1.0)),
        seed=int(cfg["seed"]),
    )


def cmd_run_mh(cfg, figures=False) -> dict:
    model = _model(cfg)
    mh = _mh_config(cfg, model)
    alpha = float(cfg.get("alpha", 4.0))
    res = run_mh_power(model, alpha, mh)
    chain = res.chain
    summary = {
        "command": "run-mh",
        "alpha": alpha,
        "regime": mh.regime,
        "T": mh.horizon,
        "B": mh.block,
        "K": mh.n_blocks,
        "M": mh.moves,
        "tau_prop": mh.tau_prop,
        "seed": mh.seed,
        "token_evals": res.ledger.token_evals,
        "extension_tokens": chain.extension_tokens,
        "suffix_total": chain.suffix_total,
        "num_moves": len(chain.moves),
        "acceptance_rate": chain.acceptance_rate,
        "sample": seq_key(res.sequence),
        "sample_terminated": chain.terminated,
    }
    return {
        "mh_moves.csv": chain.moves_csv(),
        "samples.csv": chain.visit_samples(model).to_csv(),
        "summary.json": summary,
    }


def _parse_runs(specs) -> list:
    runs = []
    for spec in specs or ():
        name, sep, path = spec.partition("=")
        if not sep:
            name, path = Path(spec).name, spec
        runs.append((name, Path(path)))
    return runs


def cmd_compare(cfg, figures=False) -> dict:
    exact_path = cfg.get("exact")
    runs = _parse_runs(cfg.get("runs_in"))
    if not exact_path or not runs:
        raise InputError("compare needs --exact and at least one --run")
    target = ExactTarget.load(exact_path)
    rows, report = [], []
    ref_evals = None
    columns = {"target": np.exp(target.log_pi)}
    for name, path in runs:
        samples_path = path / "samples.csv" if path.is_dir() else path
        if not samples_path.exists():
            raise InputError(f"{samples_path} not found")
        emp = ExactTarget.from_csv(samples_path.read_text())
        masses = dict(zip(emp.sequences, np.exp(emp.log_pi)))
        total = sum(masses.values())
        masses = {s: m / total for s, m in masses.items()}
        tv = tv_distance(masses, target)
        summary_path = (path if path.is_dir() else path.parent) / "summary.json"
        summary = json.loads(summary_path.read_text()) if summary_path.exists() else {}
        evals = summary.get("token_evals")
        if ref_evals is None and evals:
            ref_evals = evals
        ratio = evals / ref_evals if evals and ref_evals else float("nan")
        log_z = summary.get("log_normalizer_estimate")
        z_err = (log_z - target.log_Z) if log_z is not None and not math.isnan(target.log_Z) else float("nan")
        rows.append([name, repr(tv), repr(z_err), evals if evals is not None else "", repr(ratio)])
        report.append({"method": name, "tv": tv, "log_normalizer_error": z_err,
                       "token_evals": evals, "ledger_ratio": ratio})
        columns[name] = [masses.get(s, 0.0) for s in target.sequences]
    out = {
        "compare.csv": _table_csv(["method", "tv", "log_normalizer_error", "token_evals", "ledger_ratio"], rows),
        "compare.json": {"exact": str(Path(exact_path).name), "alpha": target.alpha, "runs": report},
    }
    if figures:
        from powersmc import plots

        out["compare.png"] = plots.distributions([seq_key(s) for s in target.sequences], columns)
    return out


def cmd_cost_report(cfg, figures=False) -> dict:
    T = int(cfg.get("horizon", 512))
    B = int(cfg.get("block", 32))
    M = int(cfg.get("moves", 10))
    N = int(cfg.get("particles", 64))
    n_runs = int(cfg.get("runs", 50))
    alpha = float(cfg.get("alpha", 4.0))
    seed = int(cfg["seed"])
    table = cfg.get("throughput")
    s = ThroughputTable({int(k): float(v) for k, v in table.items()}) if table else None
    params = CostParams(T, B, M, N, s)
    model = _model(cfg, required=False) or uniform_model(4, T + 1, allow_eos=False)

    analytic = {
        "T": T, "B": B, "K": params.K, "M": M, "N": N,
        "global_factor": global_factor(params.K, M),
        "lastblock_factor": lastblock_factor(M),
        "overhead_floor": overhead_floor(M),
        "smc_cost": smc_cost(N, T),
        "mh_cost_global": mh_cost_global(T, B, M),
        "mh_cost_lastblock": mh_cost_lastblock(T, M),
        "compute_ratio": compute_ratio(params),
    }
    if s is not None:
        analytic["wallclock_ratio_global"] = wallclock_ratio(params, "global")
        analytic["wallclock_ratio_lastblock"] = wallclock_ratio(params, "last-block")

    run_rows, reports = [], []
    for regime, expected in (("global", analytic["mh_cost_global"]),
                             ("last-block", analytic["mh_cost_lastblock"])):
        ledgers = []
        for r in range(n_runs):
            mh = MHConfig(block=B, moves=M, horizon=T, regime=regime, seed=seed + r)
            res = run_mh_power(model, alpha, mh)
            ledgers.append(res.ledger)
            run_rows.append([regime, r, seed + r, res.ledger.token_evals,
                             res.chain.extension_tokens, res.chain.suffix_total])
        reports.append(reconcile(ledgers, expected, regime=regime).as_dict())
    engine = EngineConfig(n_particles=N, alpha=alpha, t_max=T, seed=seed)
    smc = run_power_smc(model, engine)
    run_rows.append(["smc", 0, seed, smc.ledger.token_evals, T * N, 0])
    reports.append(reconcile(smc.ledger, analytic["smc_cost"], regime="smc", exact=True).as_dict())

    out = {
        "cost_report.json": {"analytic": analytic, "reports": reports,
                             "throughput": s.as_dict() if s is not None else None},
        "cost_runs.csv": _table_csv(["regime", "run", "seed", "token_evals", "extension_tokens",
                                     "suffix_total"], run_rows),
    }
    if figures:
        from powersmc import plots

        out["cost.png"] = plots.cost_ledgers(reports)
    return out


def cmd_temp_mismatch(cfg, figures=False) -> dict:
    model = _model(cfg, required=False) or mismatch_model()
    alpha = float(cfg.get("alpha", 4.0))
    target = enumerate_target(model, alpha)
    temp = temperature_joint(model, 1.0 / alpha)
    engine = _engine(cfg, default_particles=20000)
    res = run_power_smc(model, engine)
    smc_masses = res.ensemble.sample_set().masses()
    tv_temp = tv_distance(temp.masses(), target)
    tv_smc = tv_distance(smc_masses, target)
    rows = []
    for s, lp, lpi, lq in zip(target.sequences, target.log_p, target.log_pi, temp.log_pi):
        rows.append([seq_key(s), repr(float(lp)), repr(float(math.exp(lpi))),
                     repr(float(math.exp(lq))), repr(smc_masses.get(s, 0.0))])
    out = {
        "mismatch.json": {"alpha": alpha, "tv_temperature": tv_temp, "tv_smc": tv_smc,
                          "n_particles": engine.n_particles, "seed": engine.seed,
                          "num_resamples": res.trace.num_resamples},
        "mismatch.csv": _table_csv(["sequence", "log_p", "target", "temperature", "smc"], rows),
    }
    if figures:
        from powersmc import plots

        out["mismatch.png"] = plots.distributions(
            [r[0] for r in rows],
            {"power target": [float(r[2]) for r in rows],
             "temperature 1/alpha": [float(r[3]) for r in rows],
             "SMC": [float(r[4]) for r in rows]})
    return out


HANDLERS = {
    "run-exact": cmd_run_exact,
    "run-smc": cmd_run_smc,
    "run-sis": cmd_run_sis,
    "run-mh": cmd_run_mh,
    "compare": cmd_compare,
    "cost-report": cmd_cost_report,
    "temp-mismatch": cmd_temp_mismatch,
}


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="powersmc", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        sp = sub.add_parser(name)
        sp.add_argument("--config", help="JSON run configuration")
        sp.add_argument("--out", required=True, help="output directory")
        sp.add_argument("--seed", type=int)
        sp.add_argument("--model", help="toy model specification (JSON)")
        sp.add_argument("--figures", action="store_true", help="also render PNG figures")
        sp.add_argument("--alpha", type=float)
        sp.add_argument("--particles", type=int)
        sp.add_argument("--ess-threshold", dest="ess_threshold", type=float)
        sp.add_argument("--ramp-tokens", dest="ramp_tokens", type=int)
        sp.add_argument("--resampler", choices=SCHEMES)
        sp.add_argument("--block", type=int)
        sp.add_argument("--moves", type=int)
        sp.add_argument("--regime", choices=("global", "last-block"))
        sp.add_argument("--horizon", type=int)
        sp.add_argument("--tau-prop", dest="tau_prop", type=float)
        sp.add_argument("--runs", type=int, help="Monte Carlo runs (cost-report)")
        if name == "compare":
            sp.add_argument("--exact", help="exact.csv from run-exact")
            sp.add_argument("--run", dest="runs_in", action="append",
                            help="NAME=DIR of a run output (repeatable)")
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = _load_config(args)
        cfg["command"] = args.command
        if args.command == "compare":
            cfg["exact"] = args.exact or cfg.get("exact")
            cfg["runs_in"] = args.runs_in or cfg.get("runs_in")
        files = HANDLERS[args.command](cfg, figures=args.figures)
        write_artifacts(args.out, files)
    except PowerSMCError as exc:
        print(f"powersmc: {type(exc).__name__}: {exc}", file=sys.stderr)
        return exc.exit_code
    except AssertionError as exc:
        print(f"powersmc: assertion failed: {exc}", file=sys.stderr)
        return 3
    for name in files:
        print(Path(args.out) / name)
    return 0


if __name__ == "__main__":
    sys.exit(main())
