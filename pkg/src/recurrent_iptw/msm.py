"""Marginal structural models over predicted potential outcomes.

ATE model, one row per (record, intervention)::

    logit Pr(Y(a) = 1) = b0 * m + sum_j beta_j * [initiated at j] + beta_b . h(b)

HTE model adds an intercept, a group indicator and its interaction with
treatment; the conditional odds ratio in group g is exp(beta_a + g * beta_ag).

``m`` is the 0-based initiation step, and T for never-treated rows. No
separate intercept is added: with the per-step indicators an intercept would
be collinear with the time column, and the time term already carries the
never-treated level.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np
from scipy.optimize import minimize

from .cohort import Cohort


class NotConverged(RuntimeError):
    pass


# |coef| beyond this means the likelihood has no finite maximizer (separation)
DIVERGED = 30.0


@dataclass
class MsmDesign:
    X: np.ndarray            # (rows, p)
    target: np.ndarray       # (rows,) in [0, 1]
    weight: np.ndarray       # (rows,) > 0
    columns: list[str]
    ids: list
    query: list[int]         # 0-based initiation step, -1 = never

    def __post_init__(self):
        if np.any((self.target < 0) | (self.target > 1)):
            raise ValueError("MSM targets must be likelihoods in [0, 1]")
        if np.any(self.weight <= 0) or not np.all(np.isfinite(self.weight)):
            raise ValueError("MSM weights must be finite and positive")


@dataclass
class MsmFit:
    coef: np.ndarray
    columns: list[str]
    converged: bool
    iterations: int
    grad_norm: float
    method: str = "irls"

    def get(self, name: str) -> float:
        return float(self.coef[self.columns.index(name)])

    def to_json(self) -> dict:
        return {"coefficients": dict(zip(self.columns, map(float, self.coef))), "converged": self.converged,
                "iterations": self.iterations, "grad_norm": self.grad_norm, "method": self.method}


def identity_summary(b: np.ndarray) -> np.ndarray:
    return b


def never_query(T: int) -> np.ndarray:
    return np.zeros(T, dtype=np.int64)


def initiate_query(T: int, m: int) -> np.ndarray:
    """Treatment sequence starting at 0-based step m."""
    a = np.zeros(T, dtype=np.int64)
    a[m:] = 1
    return a


def build_ate_design(cohort: Cohort, predictions: dict[int, np.ndarray], weights,
                     summary: Callable[[np.ndarray], np.ndarray] = identity_summary) -> MsmDesign:
    """Rows for every record under every query.

    ``predictions`` maps a query key (0-based initiation step, or -1 for never)
    to per-record predicted probabilities.
    """
    T = cohort.T
    needed = list(range(T)) + [-1]
    missing = [q for q in needed if q not in predictions]
    if missing:
        raise KeyError(f"missing predictions for queries {missing} (-1 = never treat)")
    arr = cohort.arrays()
    hb = np.atleast_2d(np.stack([summary(b) for b in arr.b]))
    w = np.asarray(weights, dtype=np.float64)
    blocks, targets, ws, ids, qs = [], [], [], [], []
    n = len(cohort)
    for q in needed:
        onehot = np.zeros((n, T))
        if q >= 0:
            onehot[:, q] = 1.0
        time = np.full((n, 1), float(q if q >= 0 else T))
        blocks.append(np.hstack([time, onehot, hb]))
        targets.append(np.asarray(predictions[q], dtype=np.float64).reshape(n))
        ws.append(w)
        ids.extend(cohort.ids)
        qs.extend([q] * n)
    columns = ["time"] + [f"a_{m}" for m in range(T)] + [f"h_{j}" for j in range(hb.shape[1])]
    return MsmDesign(np.vstack(blocks), np.concatenate(targets), np.concatenate(ws), columns, ids, qs)


def build_hte_design(cohort: Cohort, predictions: dict[int, np.ndarray], weights, groups=None,
                     summary: Callable[[np.ndarray], np.ndarray] = identity_summary) -> MsmDesign:
    T = cohort.T
    needed = list(range(T)) + [-1]
    missing = [q for q in needed if q not in predictions]
    if missing:
        raise KeyError(f"missing predictions for queries {missing} (-1 = never treat)")
    arr = cohort.arrays()
    g = np.asarray(groups if groups is not None else arr.group, dtype=np.float64)
    if g is None or g.shape != (len(cohort),):
        raise ValueError("HTE design needs one group indicator per record")
    if len(np.unique(g)) < 2:
        raise ValueError("HTE design needs both groups represented")
    hb = np.atleast_2d(np.stack([summary(b) for b in arr.b]))
    w = np.asarray(weights, dtype=np.float64)
    n = len(cohort)
    blocks, targets, ws, ids, qs = [], [], [], [], []
    for q in needed:
        a = np.full(n, 1.0 if q >= 0 else 0.0)
        time = np.full(n, float(q if q >= 0 else T))
        blocks.append(np.column_stack([np.ones(n), time, a, g, a * g, hb]))
        targets.append(np.asarray(predictions[q], dtype=np.float64).reshape(n))
        ws.append(w)
        ids.extend(cohort.ids)
        qs.extend([q] * n)
    columns = ["intercept", "time", "a", "group", "a_group"] + [f"h_{j}" for j in range(hb.shape[1])]
    return MsmDesign(np.vstack(blocks), np.concatenate(targets), np.concatenate(ws), columns, ids, qs)


def build_factual_design(cohort: Cohort, weights=None, kind: str = "ate", task: int = 0,
                         summary: Callable[[np.ndarray], np.ndarray] = identity_summary) -> MsmDesign:
    """One row per record at its observed treatment history, target = observed outcome."""
    arr = cohort.arrays()
    y = arr.y[:, task]
    w = np.ones(len(cohort)) if weights is None else np.asarray(weights, dtype=np.float64)
    preds = {q: y for q in list(range(cohort.T)) + [-1]}
    full = (build_ate_design if kind == "ate" else build_hte_design)(cohort, preds, w, summary=summary)
    n = len(cohort)
    # blocks are ordered queries 0..T-1 then never; pick each record's observed block
    block = np.where(arr.init == 0, cohort.T, arr.init - 1)
    rows = block * n + np.arange(n)
    return MsmDesign(full.X[rows], full.target[rows], full.weight[rows], full.columns,
                     [full.ids[i] for i in rows], [full.query[i] for i in rows])


# --- weighted soft-target logistic regression -------------------------------------

def _objective(beta, X, y, w, l2):
    z = X @ beta
    # sum_i w_i [log(1 + e^z) - y z] + l2 |beta|^2
    loss = float(np.sum(w * (np.logaddexp(0.0, z) - y * z)) + l2 * beta @ beta)
    p = 0.5 * (1.0 + np.tanh(0.5 * z))
    grad = X.T @ (w * (p - y)) + 2.0 * l2 * beta
    return loss, grad, p


def fit_weighted_logistic(design: MsmDesign, l2: float = 0.0, max_iter: int = 100,
                          tol: float = 1e-10, method: str = "irls") -> MsmFit:
    """Maximize the weighted Bernoulli log-likelihood with fractional targets.

    Newton/IRLS by default; falls back to quasi-Newton descent when the
    Hessian is not positive definite or a Newton step fails to descend.
    """
    X, y, w = design.X, design.target, design.weight
    scale = w.mean()
    w = w / scale
    l2 = l2 / scale
    beta = np.zeros(X.shape[1])
    if method == "irls":
        loss, grad, p = _objective(beta, X, y, w, l2)
        for it in range(1, max_iter + 1):
            H = (X * (w * p * (1.0 - p))[:, None]).T @ X + 2.0 * l2 * np.eye(X.shape[1])
            try:
                L = np.linalg.cholesky(H)
            except np.linalg.LinAlgError:
                break
            step = np.linalg.solve(L.T, np.linalg.solve(L, grad))
            t = 1.0
            while True:
                cand = beta - t * step
                c_loss, c_grad, c_p = _objective(cand, X, y, w, l2)
                if c_loss <= loss + 1e-4 * t * -(grad @ step) or t < 1e-8:
                    break
                t *= 0.5
            if c_loss > loss + 1e-12 * max(1.0, abs(loss)):
                break
            beta, loss, grad, p = cand, c_loss, c_grad, c_p
            gnorm, moved = float(np.linalg.norm(grad)), float(np.linalg.norm(t * step))
            # under separation the gradient vanishes while Newton keeps taking unit steps
            if gnorm < tol * max(1.0, float(np.sum(w))) and moved < 1e-6 or moved < 1e-12:
                return MsmFit(beta, design.columns, _finite(beta), it, gnorm, "irls")
        else:
            return MsmFit(beta, design.columns, False, max_iter, float(np.linalg.norm(grad)), "irls")
    return _fit_descent(X, y, w, l2, beta, design.columns)


def _finite(beta) -> bool:
    return bool(np.all(np.isfinite(beta)) and np.max(np.abs(beta), initial=0.0) < DIVERGED)


def _fit_descent(X, y, w, l2, beta0, columns) -> MsmFit:
    res = minimize(lambda b: _objective(b, X, y, w, l2)[:2], beta0, jac=True, method="L-BFGS-B",
                   options={"maxiter": 20_000, "gtol": 1e-12, "ftol": 1e-16, "maxcor": 30})
    gnorm = float(np.linalg.norm(res.jac))
    ok = _finite(res.x) and gnorm < 1e-5 * max(1.0, float(np.sum(w)))
    return MsmFit(res.x, columns, ok, int(res.nit), gnorm, "descent")


def ate_odds_ratios(fit: MsmFit, T: int | None = None) -> dict[int, float]:
    """exp(beta_m) for each 0-based initiation step m."""
    if not fit.converged:
        raise NotConverged(f"MSM fit did not converge (iterations={fit.iterations}, |grad|={fit.grad_norm:.3g})")
    steps = [int(c[2:]) for c in fit.columns if c.startswith("a_") and c[2:].isdigit()]
    return {m: math.exp(fit.get(f"a_{m}")) for m in sorted(steps)}


def is_monotone_increasing(odds: dict[int, float]) -> bool:
    values = [odds[m] for m in sorted(odds)]
    return all(b >= a for a, b in zip(values, values[1:]))


def fit_hte(design: MsmDesign, l2: float = 0.0) -> MsmFit:
    if "a_group" not in design.columns:
        raise ValueError("fit_hte needs a design built with group indicators")
    g = design.X[:, design.columns.index("group")]
    if len(np.unique(g)) < 2:
        raise ValueError("fit_hte: both groups must be represented")
    return fit_weighted_logistic(design, l2)


def conditional_or(fit: MsmFit, g: int) -> float:
    if not fit.converged:
        raise NotConverged("HTE fit did not converge")
    return math.exp(fit.get("a") + (fit.get("a_group") if g else 0.0))


# --- plain difference of means ----------------------------------------------------

def empirical_ate(cohort: Cohort, weights=None, times=None, task: int = 0) -> dict[int, float]:
    """(Weighted) mean outcome initiated at t minus (weighted) mean never-treated."""
    arr = cohort.arrays()
    y = arr.y[:, task]
    w = np.ones(len(cohort)) if weights is None else np.asarray(weights, dtype=np.float64)
    if w.shape != y.shape:
        raise ValueError("empirical_ate: one weight per record required")
    times = list(range(1, cohort.T + 1)) if times is None else list(times)
    control = arr.init == 0
    empty = [t for t in times if not np.any(arr.init == t) or not np.any(control)]
    if empty:
        raise ValueError(f"empirical_ate: empty treated or control group for t in {empty}")

    def wmean(mask):
        ww = w[mask]
        if ww.sum() <= 0:
            raise ValueError("empirical_ate: group weights sum to zero")
        return float(np.sum(ww * y[mask]) / ww.sum())

    base = wmean(control)
    return {t: wmean(arr.init == t) - base for t in times}
