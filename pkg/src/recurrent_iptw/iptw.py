"""Recurrent stabilized inverse-probability-of-treatment weights.

Numerators are empirical probabilities of each action given the treatment
prefix. Denominators come from an LSTM over (covariates, treatment) history
feeding a logistic head together with the baseline; the probability at step m
only sees history through m - 1. Weights are assembled in log space over the
steps up to and including treatment initiation: after initiation the action
is determined and contributes nothing.
"""

from __future__ import annotations

import csv
import math
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .cohort import Cohort, SchemaError, fmt
from .metrics import nearest_rank_quantile
from .nets import ModelCheckpoint, head_forward, init_head, init_lstm, l2_penalty, lstm_forward
from .rng import stream
from .training import TrainHyper, TrainResult, dropout_mask, split_indices, train_loop

PROB_FLOOR = 1e-6


# --- numerators -----------------------------------------------------------------

@dataclass
class NumeratorTable:
    """Counts of (step, treatment prefix, action) with the derived conditionals."""

    counts: dict[tuple[int, tuple[int, ...]], Counter]
    k: int = 1

    def total(self, m: int, prefix: tuple[int, ...]) -> int:
        c = self.counts.get((m, tuple(prefix)))
        return sum(c.values()) if c else 0

    def probability(self, m: int, prefix, action: int) -> float:
        """Empirical Pr(a_m = action | prefix); m is 1-based."""
        c = self.counts.get((m, tuple(prefix)))
        if not c:
            raise KeyError(f"prefix {tuple(prefix)} never observed at step {m}")
        return c.get(int(action), 0) / sum(c.values())

    def log_probability(self, m: int, prefix, action: int) -> float:
        """Log numerator with an add-one floor for unseen prefixes or actions."""
        c = self.counts.get((m, tuple(prefix)), Counter())
        n, hit = sum(c.values()), c.get(int(action), 0)
        if hit == 0:
            return math.log(1.0 / (n + self.k + 1))
        return math.log(hit / n)


def estimate_numerators(cohort: Cohort) -> NumeratorTable:
    if len(cohort) == 0:
        raise ValueError("estimate_numerators: empty cohort")
    counts: dict[tuple[int, tuple[int, ...]], Counter] = {}
    for r in cohort.records:
        a = tuple(int(v) for v in r.a)
        for m in range(1, cohort.T + 1):
            counts.setdefault((m, a[:m - 1]), Counter())[a[m - 1]] += 1
    return NumeratorTable(counts, cohort.k)


# --- model -----------------------------------------------------------------------------

def step_features(cohort: Cohort) -> np.ndarray:
    """(n, T, p + k): covariates then one-hot treatment (classes 1..k)."""
    arr = cohort.arrays()
    onehot = (arr.a[:, :, None] == np.arange(1, cohort.k + 1)[None, None, :]).astype(np.float64)
    return np.concatenate([arr.x, onehot], axis=2)


def new_propensity_model(cohort: Cohort, hyper: TrainHyper) -> ModelCheckpoint:
    # always causal: the step-m propensity may only see history through m - 1
    enc = init_lstm(cohort.p + cohort.k, hyper.hidden_size, seed=0, num_layers=hyper.num_layers,
                    bidirectional=False, rng=stream(hyper.seed, "init"))
    n_out = 1 if cohort.k == 1 else cohort.k + 1
    head = init_head(enc.output_size, cohort.d, n_out, link="logistic", l2=hyper.l2, softmax=cohort.k > 1)
    return ModelCheckpoint("propensity", enc, {"ip": head}, hyper.to_dict(),
                           {"d": cohort.d, "p": cohort.p, "k": cohort.k, "T": cohort.T})


def propensity_logits(P, ckpt: ModelCheckpoint, feats: np.ndarray, baseline: np.ndarray,
                      head_name: str = "ip", hidden: list | None = None, mask_rng=None,
                      dropout: float = 0.0) -> list[ad.Tensor]:
    """Per-step head logits; step m uses h_{m-1} with h_0 = 0."""
    tape = next(iter(P.values())).tape
    T = feats.shape[1]
    if hidden is None:
        hidden = lstm_forward(P, "enc", ckpt.encoder, [feats[:, t] for t in range(T - 1)]) if T > 1 else []
    prev = [tape.constant(np.zeros((feats.shape[0], ckpt.encoder.output_size)))] + list(hidden[:T - 1])
    head = ckpt.heads[head_name]
    out = []
    for m in range(T):
        mask = dropout_mask(mask_rng, prev[m].shape, dropout) if mask_rng is not None else None
        out.append(head_forward(P, head_name, head, prev[m], baseline, dropout_mask=mask))
    return out


def action_log_probs(logits: list[ad.Tensor], actions: np.ndarray, softmax: bool, k: int) -> list[ad.Tensor]:
    """log Pr(a_m = observed action) per step, each (B,)."""
    out = []
    for m, z in enumerate(logits):
        if softmax:
            onehot = (actions[:, m][:, None] == np.arange(k + 1)[None, :]).astype(np.float64)
            out.append(ad.sum(ad.log_softmax(z) * onehot, axis=1))
        else:
            a = actions[:, m:m + 1].astype(np.float64)
            z = z * (2.0 * a - 1.0)  # log sigmoid(z) if treated, log sigmoid(-z) if not
            out.append(ad.sum(ad.log_sigmoid(z), axis=1))
    return out


def ip_loss(P, ckpt: ModelCheckpoint, feats, baseline, actions, at_risk, head_name: str = "ip",
            hidden=None, mask_rng=None, dropout: float = 0.0, penalize: bool = True) -> ad.Tensor:
    """Mean per-record cross-entropy of observed actions over at-risk steps, plus L2."""
    head = ckpt.heads[head_name]
    logits = propensity_logits(P, ckpt, feats, baseline, head_name, hidden, mask_rng, dropout)
    logp = action_log_probs(logits, actions, head.softmax, ckpt.meta.get("k", 1))
    total = None
    for m, lp in enumerate(logp):
        term = ad.sum(lp * at_risk[:, m].astype(np.float64))
        total = term if total is None else total + term
    loss = total * (-1.0 / feats.shape[0])
    if penalize:
        pen = l2_penalty(P, head_name, head)
        if pen is not None:
            loss = loss + pen
    return loss


def check_schema(cohort: Cohort, ckpt: ModelCheckpoint) -> None:
    meta = ckpt.meta
    if (meta.get("d"), meta.get("p"), meta.get("k")) != (cohort.d, cohort.p, cohort.k):
        raise SchemaError(f"checkpoint dims d={meta.get('d')}, p={meta.get('p')}, k={meta.get('k')} "
                          f"do not match cohort d={cohort.d}, p={cohort.p}, k={cohort.k}")
    if ckpt.encoder.input_size != cohort.p + cohort.k:
        raise SchemaError("checkpoint encoder input size does not match cohort covariates + treatments")


def _const_params(ckpt: ModelCheckpoint):
    tape = ad.Tape()
    return {k: tape.constant(v) for k, v in ckpt.flat_params().items()}


def train_phase1(cohort: Cohort, hyper: TrainHyper) -> ModelCheckpoint:
    """Fit the propensity network by minimizing the action cross-entropy."""
    if len(cohort) == 0:
        raise ValueError("train_phase1 needs a non-empty cohort")
    ckpt = new_propensity_model(cohort, hyper)
    feats, arr = step_features(cohort), cohort.arrays()
    risk = arr.at_risk()
    train_idx, val_idx = split_indices(len(cohort), hyper.val_fraction, hyper.seed)

    def batch_loss(P, batch, step, rng):
        return ip_loss(P, ckpt, feats[batch], arr.b[batch], arr.a[batch], risk[batch],
                       mask_rng=rng if hyper.dropout else None, dropout=hyper.dropout)

    def val_loss(params):
        idx = val_idx if len(val_idx) else train_idx
        tape = ad.Tape()
        P = {k: tape.constant(v) for k, v in params.items()}
        return float(ip_loss(P, ckpt, feats[idx], arr.b[idx], arr.a[idx], risk[idx], penalize=False).value)

    result: TrainResult = train_loop(ckpt.flat_params(), batch_loss, val_loss, train_idx, hyper, cohort.ids)
    out = ckpt.with_flat(result.params)
    out.meta.update({"history": result.history, "best_step": result.best_step, "steps_run": result.steps_run,
                     "n_train": int(len(train_idx)), "n_val": int(len(val_idx))})
    return out


@dataclass
class Propensities:
    """Denominator probabilities per record and step."""

    ids: list
    observed: np.ndarray      # (n, T) Pr(a_m = observed a_m | history)
    treat: np.ndarray         # (n, T) Pr(a_m != 0 | history)
    at_risk: np.ndarray       # (n, T) bool

    def to_csv(self, path) -> None:
        T = self.observed.shape[1]
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["id"] + [f"p_observed_{m}" for m in range(1, T + 1)] + [f"p_treat_{m}" for m in range(1, T + 1)])
            for i, rid in enumerate(self.ids):
                w.writerow([rid] + [fmt(v) for v in self.observed[i]] + [fmt(v) for v in self.treat[i]])

    @classmethod
    def from_csv(cls, path, cohort: Cohort) -> "Propensities":
        with open(path, newline="", encoding="utf-8") as fh:
            rows = list(csv.reader(fh))[1:]
        ids = [int(r[0]) if r[0].lstrip("-").isdigit() else r[0] for r in rows]
        if ids != cohort.ids:
            raise SchemaError(f"{path}: records do not match the cohort")
        T = cohort.T
        vals = np.array([[float(v) for v in r[1:]] for r in rows]).reshape(len(rows), 2 * T)
        return cls(ids, vals[:, :T], vals[:, T:], cohort.arrays().at_risk())


def emit_propensities(cohort: Cohort, ckpt: ModelCheckpoint, head_name: str = "ip") -> Propensities:
    check_schema(cohort, ckpt)
    feats, arr = step_features(cohort), cohort.arrays()
    P = _const_params(ckpt)
    logits = propensity_logits(P, ckpt, feats, arr.b, head_name)
    head = ckpt.heads[head_name]
    n, T = arr.a.shape
    observed, treat = np.empty((n, T)), np.empty((n, T))
    for m, z in enumerate(logits):
        zv = z.value
        if head.softmax:
            e = np.exp(zv - zv.max(axis=1, keepdims=True))
            probs = e / e.sum(axis=1, keepdims=True)
            observed[:, m] = probs[np.arange(n), arr.a[:, m]]
            treat[:, m] = 1.0 - probs[:, 0]
        else:
            p1 = ad._sigmoid(zv[:, 0])
            treat[:, m] = p1
            observed[:, m] = np.where(arr.a[:, m] != 0, p1, 1.0 - p1)
    clip = lambda v: np.clip(v, PROB_FLOOR, 1.0 - PROB_FLOOR)
    return Propensities(cohort.ids, clip(observed), clip(treat), arr.at_risk())


# --- weights -----------------------------------------------------------------------------

@dataclass
class StabilizedWeightSet:
    ids: list
    weights: np.ndarray           # (n,)
    log_num: np.ndarray           # (n, T), zero beyond initiation
    log_den: np.ndarray           # (n, T)
    flag: str = "raw"
    treat_prob: np.ndarray | None = None
    at_risk: np.ndarray | None = None

    def recompute(self) -> np.ndarray:
        return np.exp(self.log_num.sum(axis=1) - self.log_den.sum(axis=1))

    def by_id(self) -> dict:
        return dict(zip(self.ids, self.weights))

    def to_csv(self, path) -> None:
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["id", "W_s", "flag"])
            for rid, v in zip(self.ids, self.weights):
                w.writerow([rid, fmt(v), self.flag])

    @classmethod
    def from_csv(cls, path) -> "StabilizedWeightSet":
        ids, ws, flags = [], [], set()
        with open(path, newline="", encoding="utf-8") as fh:
            for row in csv.DictReader(fh):
                rid = row["id"]
                ids.append(int(rid) if rid.lstrip("-").isdigit() else rid)
                ws.append(float(row["W_s"]))
                flags.add(row["flag"])
        w = np.asarray(ws, dtype=np.float64)
        if np.any(~np.isfinite(w)) or np.any(w < 0):
            raise SchemaError(f"{path}: weights must be finite and non-negative")
        empty = np.zeros((len(ids), 0))
        return cls(ids, w, empty, empty, flags.pop() if len(flags) == 1 else "mixed")


def compute_stabilized_weights(numerators: NumeratorTable, propensities: Propensities,
                               cohort: Cohort, flag: str = "raw") -> StabilizedWeightSet:
    if list(propensities.ids) != cohort.ids:
        raise SchemaError("propensities and cohort list different records")
    arr = cohort.arrays()
    n, T = arr.a.shape
    risk = arr.at_risk()
    log_num, log_den = np.zeros((n, T)), np.zeros((n, T))
    for i, r in enumerate(cohort.records):
        a = tuple(int(v) for v in r.a)
        for m in range(T):
            if not risk[i, m]:
                continue
            den = propensities.observed[i, m]
            if not den > 0:
                raise ValueError(f"zero denominator probability for record {r.id!r} at step {m + 1}")
            log_num[i, m] = numerators.log_probability(m + 1, a[:m], a[m])
            log_den[i, m] = math.log(den)
    w = np.exp(log_num.sum(axis=1) - log_den.sum(axis=1))
    return StabilizedWeightSet(cohort.ids, w, log_num, log_den, flag, propensities.treat, risk)


def truncate_weights(ws: StabilizedWeightSet, q_lo: float, q_hi: float) -> StabilizedWeightSet:
    """Clamp weights to their [q_lo, q_hi] nearest-rank quantiles."""
    if not 0.0 <= q_lo < q_hi <= 1.0:
        raise ValueError(f"need 0 <= q_lo < q_hi <= 1, got ({q_lo}, {q_hi})")
    lo, hi = nearest_rank_quantile(ws.weights, q_lo), nearest_rank_quantile(ws.weights, q_hi)
    return StabilizedWeightSet(ws.ids, np.clip(ws.weights, lo, hi), ws.log_num, ws.log_den,
                               f"truncated({q_lo:g},{q_hi:g})", ws.treat_prob, ws.at_risk)


def weight_diagnostics(weights) -> dict:
    w = np.asarray(weights, dtype=np.float64)
    if w.size == 0:
        raise ValueError("weight_diagnostics: empty weights")
    return {"q01": nearest_rank_quantile(w, 0.01), "mean": float(w.mean()),
            "q99": nearest_rank_quantile(w, 0.99), "min": float(w.min()), "max": float(w.max())}


def propensity_weight_report(ws: StabilizedWeightSet) -> dict:
    """Propensity (at-risk steps) and weight summaries."""
    out = {"flag": ws.flag, "n": int(ws.weights.size)}
    if ws.treat_prob is not None and ws.treat_prob.size:
        p = ws.treat_prob[ws.at_risk] if ws.at_risk is not None else ws.treat_prob.ravel()
        out["propensity"] = {"q01": nearest_rank_quantile(p, 0.01), "mean": float(p.mean()),
                             "q99": nearest_rank_quantile(p, 0.99)}
    wd = weight_diagnostics(ws.weights)
    out["weight"] = {"min": wd["min"], "mean": wd["mean"], "max": wd["max"], "q01": wd["q01"], "q99": wd["q99"]}
    return out


def phase1_weights(cohort: Cohort, hyper: TrainHyper) -> tuple[ModelCheckpoint, StabilizedWeightSet]:
    """Train Phase I and return the checkpoint with the raw (or smoothed) weights."""
    ckpt = train_phase1(cohort, hyper)
    props = emit_propensities(cohort, ckpt)
    flag = "raw" if hyper.l2 == 0 else f"smoothed({hyper.l2:g})"
    return ckpt, compute_stabilized_weights(estimate_numerators(cohort), props, cohort, flag)
