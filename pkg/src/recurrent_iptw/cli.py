"""Command-line entry point.

Every subcommand reads its inputs from files, writes its outputs under
``--out``, and is a pure function of (config, inputs, seed).
"""

from __future__ import annotations

import argparse
import csv
import json
import math
import sys
from pathlib import Path

import numpy as np

from .cohort import Cohort, SchemaError, fmt, read_cohort, write_cohort
from .config import ConfigError, RunConfig
from .iptw import (Propensities, StabilizedWeightSet, emit_propensities, phase1_weights, propensity_weight_report,
                   truncate_weights)
from .metrics import rmse, spearman_rho
from .msm import (NotConverged, build_ate_design, build_factual_design, build_hte_design, conditional_or,
                  ate_odds_ratios, empirical_ate, fit_hte, fit_weighted_logistic, is_monotone_increasing)
from .nets import ModelCheckpoint
from .outcome import (InterventionQuery, TaskSpec, comparison_entry, predict_potential_outcomes, read_predictions,
                      train_end_to_end, train_phase2, write_predictions)
from .simulator import GroundTruth, generate_msm_cohort, simulate
from .sweep import aggregate, run_sweep, summarize, write_cells_csv, write_sweep_csv
from .training import TrainingDiverged


class CommandError(RuntimeError):
    pass


def write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=1, sort_keys=True) + "\n", encoding="utf-8")


def write_history(path: Path, history: list[dict]) -> None:
    extra = sorted({k for e in history for k in e} - {"step", "train_loss", "val_loss", "val_task_losses"})
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["step", "train_loss", "val_loss"] + extra)
        for e in history:
            cells = [e["step"], "" if e.get("train_loss") is None else fmt(e["train_loss"]), fmt(e["val_loss"])]
            cells += ["" if e.get(k) is None else fmt(e[k]) for k in extra]
            w.writerow(cells)


class Run:
    """Resolved configuration plus path helpers for one invocation."""

    def __init__(self, cfg: RunConfig, out: Path):
        self.cfg = cfg
        self.out = out
        out.mkdir(parents=True, exist_ok=True)

    def path(self, name: str | None) -> Path | None:
        if name is None:
            return None
        p = Path(name)
        return p if p.is_absolute() else self.out / p

    def need(self, name: str | None, what: str) -> Path:
        p = self.path(name)
        if p is None or not p.exists():
            raise CommandError(f"missing input {what}: {p}")
        return p

    def cohort(self) -> Cohort:
        return read_cohort(self.need(self.cfg.paths.cohort, "cohort"))

    def weights(self, cohort: Cohort) -> StabilizedWeightSet | None:
        if self.cfg.paths.weights is None:
            return None
        ws = StabilizedWeightSet.from_csv(self.need(self.cfg.paths.weights, "weights"))
        missing = set(cohort.ids) - set(ws.ids)
        if missing:
            raise CommandError(f"weights file lacks {len(missing)} cohort record(s), e.g. {sorted(missing, key=str)[:3]}")
        return ws

    def tasks(self, cohort: Cohort) -> TaskSpec:
        if self.cfg.tasks is not None:
            return TaskSpec(list(self.cfg.tasks))
        y = cohort.arrays().y
        links = ["logistic" if np.all((y[:, j] == 0) | (y[:, j] == 1)) else "identity" for j in range(cohort.K)]
        return TaskSpec(links)


def _position_weights(cohort: Cohort, ws: StabilizedWeightSet | None) -> np.ndarray:
    if ws is None:
        return np.ones(len(cohort))
    lookup = ws.by_id()
    return np.array([lookup[i] for i in cohort.ids])


def _queries(T: int) -> list[InterventionQuery]:
    return [InterventionQuery.never(T)] + [InterventionQuery.initiate_at(T, m) for m in range(T)]


# --- subcommands --------------------------------------------------------------------

def cmd_simulate(run: Run) -> list[str]:
    cfg = run.cfg
    if cfg.msm_sim is not None:
        cohort = generate_msm_cohort(cfg.msm_sim)
        write_cohort(cohort, run.path(cfg.paths.cohort))
        write_json(run.path(cfg.paths.truth), cohort.truth)
        return [f"cohort: {len(cohort)} records ({int(np.sum(cohort.arrays().init > 0))} treated)"]
    randomized, biased, truth = simulate(cfg.sim)
    write_cohort(randomized, run.path(cfg.paths.randomized))
    write_cohort(biased, run.path(cfg.paths.cohort))
    write_json(run.path(cfg.paths.truth), truth.to_json())
    lines = []
    for name, c in (("randomized", randomized), ("biased", biased)):
        init = c.arrays().init
        lines.append(f"{name}: {len(c)} records, {int(np.sum(init > 0))} treated, {int(np.sum(init == 0))} control")
    lines += [f"warning: {w}" for w in biased.warnings]
    return lines


def cmd_train_iptw(run: Run) -> list[str]:
    cfg = run.cfg
    cohort = run.cohort()
    ckpt, ws = phase1_weights(cohort, cfg.phase1)
    if cfg.truncate is not None:
        ws = truncate_weights(ws, *cfg.truncate)
    if not np.all(np.isfinite(ws.weights)):
        raise CommandError("non-finite stabilized weights")
    ckpt.save(run.path(cfg.paths.iptw_checkpoint))
    write_history(run.out / "iptw_loss.csv", ckpt.meta["history"])
    ws.to_csv(run.path(cfg.paths.weights or "weights.csv"))
    emit_propensities(cohort, ckpt).to_csv(run.path(cfg.paths.propensities))
    diag = propensity_weight_report(ws)
    write_json(run.out / "diagnostics.json", diag)
    w = diag["weight"]
    return [f"phase I: {ckpt.meta['steps_run']} steps (best {ckpt.meta['best_step']}); "
            f"weights min {w['min']:.4g} mean {w['mean']:.4g} max {w['max']:.4g}"]


def cmd_diagnostics(run: Run) -> list[str]:
    """Recompute the weight/propensity summary from the written CSV files."""
    cfg = run.cfg
    cohort = run.cohort()
    ws = StabilizedWeightSet.from_csv(run.need(cfg.paths.weights or "weights.csv", "weights"))
    if ws.ids != cohort.ids:
        raise CommandError("weights file and cohort list different records")
    props_path = run.path(cfg.paths.propensities)
    if props_path.exists():
        props = Propensities.from_csv(props_path, cohort)
        ws.treat_prob, ws.at_risk = props.treat, props.at_risk
    diag = propensity_weight_report(ws)
    write_json(run.out / "diagnostics_recomputed.json", diag)
    return [json.dumps(diag, sort_keys=True)]


def cmd_train_outcome(run: Run) -> list[str]:
    cfg = run.cfg
    cohort = run.cohort()
    tasks = run.tasks(cohort)
    ws = run.weights(cohort)
    ckpt = train_phase2(cohort, ws, tasks, cfg.phase2)
    ckpt.save(run.path(cfg.paths.outcome_checkpoint))
    write_history(run.out / "outcome_loss.csv", ckpt.meta["history"])
    results = {"observed": predict_potential_outcomes(ckpt, cohort)}
    for q in _queries(cohort.T):
        results[q.label] = predict_potential_outcomes(ckpt, cohort, q)
    if not all(np.all(np.isfinite(v)) for v in results.values()):
        raise CommandError("non-finite predictions")
    write_predictions(run.path(cfg.paths.predictions), cohort.ids, results, tasks.names)
    return [f"phase II: {ckpt.meta['steps_run']} steps (best {ckpt.meta['best_step']}), "
            f"tasks {tasks.links}, weights {'none' if ws is None else ws.flag}"]


def cmd_train_e2e(run: Run) -> list[str]:
    cfg = run.cfg
    cohort = run.cohort()
    tasks = run.tasks(cohort)
    ip_ckpt, ws = phase1_weights(cohort, cfg.phase1)
    pipe = train_phase2(cohort, ws, tasks, cfg.phase2)
    e2e = train_end_to_end(cohort, tasks, cfg.phase2, ip_hyper_l2=cfg.phase1.l2)
    e2e.save(run.out / "e2e_checkpoint.json")
    write_history(run.out / "e2e_loss.csv", e2e.meta["history"])
    write_history(run.out / "pipeline_outcome_loss.csv", pipe.meta["history"])
    entries = [comparison_entry("pipeline", pipe, cfg.threshold, offset=ip_ckpt.meta["steps_run"]),
               comparison_entry("end_to_end", e2e, cfg.threshold)]
    write_json(run.out / "comparison.json", entries)
    return [json.dumps(e, sort_keys=True) for e in entries]


def _msm_targets(run: Run, cohort: Cohort, kind: str, weights: np.ndarray, task: int = 0):
    cfg = run.cfg
    if cfg.msm.source == "observed":
        return build_factual_design(cohort, weights, kind=kind, task=task)
    preds = read_predictions(run.need(cfg.paths.predictions, "predictions"))
    by_query = {}
    for q in _queries(cohort.T):
        rows = preds.get(q.label)
        if rows is None:
            raise CommandError(f"predictions file lacks query {q.label!r}")
        key = -1 if q.label == "never" else int(q.label.split("_")[1])
        by_query[key] = np.array([rows[i][task] for i in cohort.ids])
    builder = build_ate_design if kind == "ate" else build_hte_design
    return builder(cohort, by_query, weights)


def cmd_estimate_ate(run: Run) -> list[str]:
    cfg = run.cfg
    cohort = run.cohort()
    ws = run.weights(cohort)
    w = _position_weights(cohort, ws)
    report: dict = {"n": len(cohort), "weights": "none" if ws is None else ws.flag}
    lines = []

    truth_path = run.path(cfg.paths.truth)
    truth = json.loads(truth_path.read_text(encoding="utf-8")) if truth_path.exists() else None
    if truth is not None and "ate_by_time" in truth:
        target = GroundTruth.from_json(truth).ate_by_time[:cohort.T]
        adj, unadj = empirical_ate(cohort, w), empirical_ate(cohort)
        report["ground_truth"] = target.tolist()
        report["empirical_adjusted"] = {str(t): v for t, v in adj.items()}
        report["empirical_unadjusted"] = {str(t): v for t, v in unadj.items()}
        report["rmse_adjusted"] = rmse(list(adj.values()), target)
        report["rmse_unadjusted"] = rmse(list(unadj.values()), target)
        rand_path = run.path(cfg.paths.randomized)
        if rand_path.exists():
            report["rmse_randomized"] = rmse(list(empirical_ate(read_cohort(rand_path)).values()), target)
        lines.append(f"rmse adjusted {report['rmse_adjusted']:.4g}, unadjusted {report['rmse_unadjusted']:.4g}")
        pred_path = run.path(cfg.paths.predictions)
        if pred_path.exists():
            preds = read_predictions(pred_path)
            never = np.array([preds["never"][i][0] for i in cohort.ids])
            cf = {str(m + 1): float(np.mean(np.array([preds[f"init_{m}"][i][0] for i in cohort.ids]) - never))
                  for m in range(cohort.T)}
            report["counterfactual"] = cf
            report["rmse_counterfactual"] = rmse(list(cf.values()), target)

    binary = cfg.msm.source == "observed" or all(l == "logistic" for l in run.tasks(cohort).links)
    if binary:
        fit = fit_weighted_logistic(_msm_targets(run, cohort, "ate", w), cfg.msm.l2)
        report["msm"] = fit.to_json()
        if not fit.converged:
            write_json(run.out / "ate.json", report)
            raise NotConverged(f"ATE MSM did not converge after {fit.iterations} iterations")
        odds = ate_odds_ratios(fit)
        report["odds_ratios"] = {str(m): v for m, v in odds.items()}
        report["monotone_increasing"] = is_monotone_increasing(odds)
        with open(run.out / "odds_ratios.csv", "w", newline="", encoding="utf-8") as fh:
            wr = csv.writer(fh, lineterminator="\n")
            wr.writerow(["m", "odds_ratio"])
            for m, v in odds.items():
                wr.writerow([m, fmt(v)])
        lines.append("odds ratios " + ", ".join(f"m={m}: {v:.4g}" for m, v in odds.items())
                     + f"; monotone={report['monotone_increasing']}")
    write_json(run.out / "ate.json", report)
    return lines


def cmd_estimate_hte(run: Run) -> list[str]:
    cfg = run.cfg
    cohort = run.cohort()
    ws = run.weights(cohort)
    w = _position_weights(cohort, ws)
    fit = fit_hte(_msm_targets(run, cohort, "hte", w), cfg.msm.l2)
    report: dict = {"msm": fit.to_json(), "weights": "none" if ws is None else ws.flag}
    if not fit.converged:
        write_json(run.out / "hte.json", report)
        raise NotConverged(f"HTE MSM did not converge after {fit.iterations} iterations")
    estimated = [conditional_or(fit, 0), conditional_or(fit, 1)]
    report["groups"] = [{"group": g, "conditional_or": v} for g, v in enumerate(estimated)]
    true_or = (cohort.truth or {}).get("conditional_or")
    report["rank_rho"] = spearman_rho(true_or, estimated) if true_or is not None else None
    write_json(run.out / "hte.json", report)
    return [f"conditional OR group 0 {estimated[0]:.4g}, group 1 {estimated[1]:.4g}; rank rho {report['rank_rho']}"]


def cmd_sweep(run: Run) -> list[str]:
    cfg = run.cfg
    sw = cfg.sweep
    seeds = sw.seeds if sw.seeds is not None else [cfg.seed]
    cells = run_sweep(cfg.sim, cfg.phase1, sw.lambdas, sw.rhos, seeds, sw.workers)
    write_cells_csv(run.out / "sweep_cells.csv", cells)
    summary = summarize(cells, sw.lambdas, sw.rhos)
    summary["lambdas"] = [fmt(v) for v in sw.lambdas]
    summary["rhos"] = [fmt(v) for v in sw.rhos]
    summary["seeds"] = list(seeds)
    failed = [c for c in cells if c.status != "ok"]
    if not failed:
        write_sweep_csv(run.out / "sweep.csv", aggregate(cells), sw.lambdas, sw.rhos)
    write_json(run.out / "sweep_summary.json", summary)
    lines = [f"seed {c.seed} lambda {fmt(c.lam)} rho {fmt(c.rho)}: {c.status}" for c in cells]
    if failed:
        raise CommandError("\n".join(lines + [f"{len(failed)} of {len(cells)} cells failed"]))
    return [f"{len(cells)} cells ok; adjusted <= unadjusted in "
            f"{summary['adjusted_not_worse_fraction']:.0%} of grid cells"]


HELP = {
    "simulate": "draw randomized and biased cohorts (or a binary-outcome cohort)",
    "train-iptw": "fit the propensity network and write stabilized weights",
    "train-outcome": "fit the weighted outcome network and write counterfactual predictions",
    "train-e2e": "compare two-stage and jointly trained models",
    "estimate-ate": "empirical ATE against ground truth and the time-varying MSM",
    "estimate-hte": "group-conditional odds ratios from the interaction MSM",
    "sweep": "bias-grid RMSE sweep over lambda and rho",
    "diagnostics": "recompute weight and propensity summaries from files",
}

COMMANDS = {
    "simulate": cmd_simulate,
    "train-iptw": cmd_train_iptw,
    "train-outcome": cmd_train_outcome,
    "train-e2e": cmd_train_e2e,
    "estimate-ate": cmd_estimate_ate,
    "estimate-hte": cmd_estimate_hte,
    "sweep": cmd_sweep,
    "diagnostics": cmd_diagnostics,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="recurrent-iptw", description="Recurrent IPTW causal-effect pipeline")
    parser.add_argument("--config", type=Path, help="JSON run configuration")
    parser.add_argument("--seed", type=int, help="root seed (overrides the config)")
    parser.add_argument("--out", type=Path, default=Path("."), help="output directory (default: current)")
    sub = parser.add_subparsers(dest="command", required=True)
    for name, fn in COMMANDS.items():
        sub.add_parser(name, help=HELP[name])
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = RunConfig.load(args.config, args.seed)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    try:
        lines = COMMANDS[args.command](Run(cfg, args.out))
    except (CommandError, SchemaError, NotConverged, TrainingDiverged, KeyError, ValueError, OSError) as exc:
        print(f"{args.command} failed: {exc}", file=sys.stderr)
        return 1
    for line in lines:
        print(line)
    return 0


if __name__ == "__main__":
    sys.exit(main())
