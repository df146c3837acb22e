"""Bias-grid sweep: re-bias a shared randomized cohort per cell, weight, and score.

Each cell is independent. Removal draws depend only on the seed and record id,
so every cell sees the same random numbers, and the grid can be computed in
any order or in parallel with identical results.
"""

from __future__ import annotations

import csv
import math
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, replace
from functools import lru_cache

import numpy as np

from .cohort import fmt
from .iptw import phase1_weights
from .metrics import rmse, spearman_rho
from .msm import empirical_ate
from .simulator import SimConfig, apply_selection_bias, generate_randomized_cohort, sample_coefficients
from .training import TrainHyper


@dataclass
class CellResult:
    seed: int
    lam: float
    rho: float
    treated_count: int
    control_count: int
    rmse_adjusted: float
    rmse_unadjusted: float
    rmse_randomized: float
    status: str = "ok"


@lru_cache(maxsize=4)
def _randomized(sim_items: tuple, seed: int):
    config = replace(SimConfig(**dict(sim_items)), seed=seed)
    truth = sample_coefficients(config.d, seed, config.C, config.T)
    return generate_randomized_cohort(config, truth), truth


def run_cell(sim: dict, hyper: dict, seed: int, lam: float, rho: float) -> CellResult:
    """One (seed, lambda, rho) cell: bias, fit Phase I, compare weighted and plain ATE."""
    sim_items = tuple(sorted((k, v) for k, v in sim.items() if k != "seed"))
    try:
        randomized, truth = _randomized(sim_items, seed)
        T = randomized.T
        target = truth.ate_by_time[:T]
        r_rand = rmse(list(empirical_ate(randomized).values()), target)
        biased = apply_selection_bias(randomized, truth, lam, rho, seed)
        init = biased.arrays().init
        treated, control = int(np.sum(init > 0)), int(np.sum(init == 0))
        _, ws = phase1_weights(biased, TrainHyper.from_dict({**hyper, "seed": seed}))
        r_adj = rmse(list(empirical_ate(biased, ws.weights).values()), target)
        r_unadj = rmse(list(empirical_ate(biased).values()), target)
        if not all(map(math.isfinite, (r_adj, r_unadj))):
            raise ValueError("non-finite RMSE")
        return CellResult(seed, lam, rho, treated, control, r_adj, r_unadj, r_rand)
    except Exception as exc:  # reported per cell; the sweep finishes the rest
        return CellResult(seed, lam, rho, -1, -1, math.nan, math.nan, math.nan, f"failed: {type(exc).__name__}: {exc}")


def _star(args):
    return run_cell(*args)


def run_sweep(sim: SimConfig, hyper: TrainHyper, lambdas, rhos, seeds, workers: int | None = None) -> list[CellResult]:
    """All cells in grid order (seed, lambda, rho)."""
    sim_d = {k: v for k, v in asdict(sim).items() if k not in ("seed", "lam", "rho")}
    hyper_d = {k: v for k, v in hyper.to_dict().items() if k != "seed"}
    jobs = [(sim_d, hyper_d, int(s), float(lam), float(rho)) for s in seeds for lam in lambdas for rho in rhos]
    workers = workers or os.cpu_count() or 1
    if workers <= 1 or len(jobs) == 1:
        return [_star(j) for j in jobs]
    with ProcessPoolExecutor(max_workers=min(workers, len(jobs))) as pool:
        return list(pool.map(_star, jobs))


def aggregate(cells: list[CellResult]) -> dict[tuple[float, float], dict]:
    """Seed-averaged adjusted/unadjusted RMSE and treated count per (lambda, rho)."""
    grid: dict[tuple[float, float], list[CellResult]] = {}
    for c in cells:
        grid.setdefault((c.lam, c.rho), []).append(c)
    out = {}
    for key, group in grid.items():
        ok = [c for c in group if c.status == "ok"]
        complete = len(ok) == len(group)
        out[key] = {
            "rmse_adjusted": float(np.mean([c.rmse_adjusted for c in ok])) if complete else math.nan,
            "rmse_unadjusted": float(np.mean([c.rmse_unadjusted for c in ok])) if complete else math.nan,
            "treated_count": float(np.mean([c.treated_count for c in ok])) if complete else math.nan,
        }
    return out


def axis_spearman(agg: dict, lambdas, rhos, method: str = "rmse_unadjusted") -> dict[str, float]:
    """Rank correlation of each bias parameter with RMSE averaged over the other axis."""
    out = {}
    if len(lambdas) > 1:
        by_lam = [np.mean([agg[(lam, r)][method] for r in rhos]) for lam in lambdas]
        out["lambda"] = spearman_rho(lambdas, by_lam)
    if len(rhos) > 1:
        by_rho = [np.mean([agg[(lam, r)][method] for lam in lambdas]) for r in rhos]
        out["rho"] = spearman_rho(rhos, by_rho)
    return out


def summarize(cells: list[CellResult], lambdas, rhos) -> dict:
    agg = aggregate(cells)
    failed = [c for c in cells if c.status != "ok"]
    summary = {"cells": len(agg), "failed_cells": len(failed)}
    if not failed:
        wins = sum(v["rmse_adjusted"] <= v["rmse_unadjusted"] for v in agg.values())
        summary["adjusted_not_worse_fraction"] = wins / len(agg)
        summary["spearman_unadjusted"] = _safe(lambda: axis_spearman(agg, lambdas, rhos, "rmse_unadjusted"))
        summary["spearman_adjusted"] = _safe(lambda: axis_spearman(agg, lambdas, rhos, "rmse_adjusted"))
        summary["rmse_randomized"] = float(np.mean([c.rmse_randomized for c in cells]))
    return summary


def _safe(fn):
    try:
        return fn()
    except ValueError as exc:
        return {"error": str(exc)}


def write_sweep_csv(path, agg: dict, lambdas, rhos) -> None:
    """Long format: lambda, rho, method, rmse."""
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["lambda", "rho", "method", "rmse"])
        for lam in lambdas:
            for rho in rhos:
                cell = agg[(float(lam), float(rho))]
                w.writerow([fmt(lam), fmt(rho), "adjusted", fmt(cell["rmse_adjusted"])])
                w.writerow([fmt(lam), fmt(rho), "unadjusted", fmt(cell["rmse_unadjusted"])])


def write_cells_csv(path, cells: list[CellResult]) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["seed", "lambda", "rho", "treated_count", "control_count", "rmse_adjusted", "rmse_unadjusted",
                    "rmse_randomized", "status"])
        for c in cells:
            w.writerow([c.seed, fmt(c.lam), fmt(c.rho), c.treated_count, c.control_count, fmt(c.rmse_adjusted),
                        fmt(c.rmse_unadjusted), fmt(c.rmse_randomized), c.status])
