"""Weighted outcome progression, counterfactual prediction and joint training.

The outcome network encodes the full (covariate, treatment) history, and its
head combines the last hidden state with the baseline and the last treatment.
Each record's loss is scaled by its stabilized weight; weights are constants
(no gradient flows into them).
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .cohort import Cohort, SchemaError, fmt, is_absorbing
from .iptw import (StabilizedWeightSet, action_log_probs, check_schema, estimate_numerators, ip_loss,
                   propensity_logits, step_features, PROB_FLOOR)
from .metrics import auc_roc
from .nets import ModelCheckpoint, head_forward, init_head, init_lstm, l2_penalty, lstm_forward
from .rng import stream
from .training import TrainHyper, dropout_mask, split_indices, train_loop

LOSS_FOR_LINK = {"logistic": "bce", "identity": "mse"}


@dataclass
class TaskSpec:
    links: list[str]
    losses: list[str] | None = None
    names: list[str] | None = None

    def __post_init__(self):
        if not self.links:
            raise ValueError("TaskSpec needs at least one task")
        if self.losses is None:
            self.losses = [LOSS_FOR_LINK[link] for link in self.links]
        for link, loss in zip(self.links, self.losses):
            if LOSS_FOR_LINK.get(link) != loss:
                raise ValueError(f"link {link!r} must pair with loss {LOSS_FOR_LINK.get(link)!r}, got {loss!r}")
        if len(self.losses) != len(self.links):
            raise ValueError("one loss per task required")
        if self.names is None:
            self.names = [f"task{j}" for j in range(len(self.links))]

    @property
    def K(self) -> int:
        return len(self.links)

    @classmethod
    def uniform(cls, K: int, link: str) -> "TaskSpec":
        return cls([link] * K)

    def to_json(self) -> dict:
        return {"links": list(self.links), "losses": list(self.losses), "names": list(self.names)}


@dataclass
class InterventionQuery:
    sequence: np.ndarray
    label: str = ""
    use_observed_covariates: bool = True

    def __post_init__(self):
        self.sequence = np.asarray(self.sequence, dtype=np.int64)
        if self.sequence.ndim != 1 or np.any(self.sequence < 0):
            raise ValueError(f"malformed treatment sequence {self.sequence.tolist()}")
        if not is_absorbing(self.sequence):
            raise ValueError(f"query sequence {self.sequence.tolist()} is not absorbing")
        if not self.use_observed_covariates:
            raise ValueError("only observed-covariate queries are supported")

    @classmethod
    def initiate_at(cls, T: int, m: int) -> "InterventionQuery":
        """Start treatment at 0-based step m."""
        a = np.zeros(T, dtype=np.int64)
        a[m:] = 1
        return cls(a, f"init_{m}")

    @classmethod
    def never(cls, T: int) -> "InterventionQuery":
        return cls(np.zeros(T, dtype=np.int64), "never")


# --- model --------------------------------------------------------------------------

def _target_stats(y: np.ndarray, tasks: TaskSpec, standardize: bool) -> tuple[list[float], list[float]]:
    means, stds = [], []
    for j, link in enumerate(tasks.links):
        if link == "identity" and standardize and len(y):
            s = float(y[:, j].std())
            means.append(float(y[:, j].mean()))
            stds.append(s if s > 0 else 1.0)
        else:
            means.append(0.0)
            stds.append(1.0)
    return means, stds


def new_outcome_model(cohort: Cohort, tasks: TaskSpec, hyper: TrainHyper, kind: str = "outcome",
                      bidirectional: bool | None = None) -> ModelCheckpoint:
    if tasks.K != cohort.K:
        raise SchemaError(f"TaskSpec has K={tasks.K} but cohort outcomes have K={cohort.K}")
    bidi = hyper.bidirectional if bidirectional is None else bidirectional
    enc = init_lstm(cohort.p + cohort.k, hyper.hidden_size, seed=0, num_layers=hyper.num_layers,
                    bidirectional=bidi, rng=stream(hyper.seed, "init"))
    link = tasks.links[0] if len(set(tasks.links)) == 1 else "logistic"
    head = init_head(enc.output_size, cohort.d, tasks.K, treatment_size=cohort.k, link=link)
    meta = {"d": cohort.d, "p": cohort.p, "k": cohort.k, "T": cohort.T, "tasks": tasks.to_json()}
    return ModelCheckpoint(kind, enc, {"y": head}, hyper.to_dict(), meta)


def _last_treatment(a: np.ndarray, k: int) -> np.ndarray:
    return (a[:, -1][:, None] == np.arange(1, k + 1)[None, :]).astype(np.float64)


def outcome_logits(P, ckpt: ModelCheckpoint, feats, baseline, actions, hidden=None, mask_rng=None,
                   dropout: float = 0.0) -> ad.Tensor:
    if hidden is None:
        hidden = lstm_forward(P, "enc", ckpt.encoder, [feats[:, t] for t in range(feats.shape[1])])
    g_last = hidden[-1]
    mask = dropout_mask(mask_rng, g_last.shape, dropout) if mask_rng is not None else None
    return head_forward(P, "y", ckpt.heads["y"], g_last, baseline, _last_treatment(actions, ckpt.meta["k"]),
                        dropout_mask=mask)


def per_record_loss(z: ad.Tensor, y: np.ndarray, tasks: TaskSpec, means, stds) -> ad.Tensor:
    """(B,) summed task losses; real targets compared on the standardized scale."""
    total = None
    for j, loss in enumerate(tasks.losses):
        zj = z * np.eye(tasks.K)[j]
        zj = ad.sum(zj, axis=1)
        if loss == "bce":
            sign = 2.0 * y[:, j] - 1.0
            term = -ad.log_sigmoid(zj * sign)
        else:
            r = zj - (y[:, j] - means[j]) / stds[j]
            term = r * r
        total = term if total is None else total + term
    return total


def task_losses(z: np.ndarray, y: np.ndarray, tasks: TaskSpec, means, stds) -> np.ndarray:
    """(B, K) per-task losses evaluated without the tape."""
    out = np.empty_like(z)
    for j, loss in enumerate(tasks.losses):
        if loss == "bce":
            out[:, j] = np.logaddexp(0.0, z[:, j]) - y[:, j] * z[:, j]
        else:
            out[:, j] = (z[:, j] - (y[:, j] - means[j]) / stds[j]) ** 2
    return out


def y_loss(P, ckpt, feats, baseline, actions, y, w, tasks, means, stds, hidden=None, mask_rng=None,
           dropout=0.0, normalize=False, penalize=True) -> ad.Tensor:
    z = outcome_logits(P, ckpt, feats, baseline, actions, hidden, mask_rng, dropout)
    per = per_record_loss(z, y, tasks, means, stds)
    if normalize and w.mean() > 0:
        w = w / w.mean()
    loss = ad.sum(per * w) * (1.0 / feats.shape[0])
    if penalize:
        pen = l2_penalty(P, "y", ckpt.heads["y"])
        if pen is not None:
            loss = loss + pen
    return loss


def _weights_by_position(cohort: Cohort, weights) -> np.ndarray:
    if weights is None:
        return np.ones(len(cohort))
    if isinstance(weights, StabilizedWeightSet):
        lookup = weights.by_id()
    elif isinstance(weights, dict):
        lookup = weights
    else:
        arr = np.asarray(weights, dtype=np.float64)
        if arr.shape != (len(cohort),):
            raise ValueError("weights must cover every record")
        lookup = dict(zip(cohort.ids, arr))
    missing = [rid for rid in cohort.ids if rid not in lookup]
    if missing:
        raise KeyError(f"no weight for record(s) {missing[:5]}{'...' if len(missing) > 5 else ''}")
    w = np.array([lookup[rid] for rid in cohort.ids], dtype=np.float64)
    if np.any(w < 0) or not np.all(np.isfinite(w)):
        raise ValueError("weights must be finite and non-negative")
    return w


def _metric(tasks: TaskSpec, y: np.ndarray, pred: np.ndarray) -> tuple[str, float]:
    """Threshold metric on the first task: AUC-ROC (binary) or R^2 (real)."""
    if tasks.links[0] == "logistic":
        labels = y[:, 0]
        if labels.min() == labels.max():
            return "auc", float("nan")
        return "auc", auc_roc(pred[:, 0], labels)
    resid = np.sum((y[:, 0] - pred[:, 0]) ** 2)
    tot = np.sum((y[:, 0] - y[:, 0].mean()) ** 2)
    return "r2", float(1.0 - resid / tot) if tot > 0 else float("nan")


def train_phase2(cohort: Cohort, weights, tasks: TaskSpec, hyper: TrainHyper) -> ModelCheckpoint:
    """Minimize the weight-scaled outcome loss summed over tasks."""
    w_all = _weights_by_position(cohort, weights)
    ckpt = new_outcome_model(cohort, tasks, hyper)
    feats, arr = step_features(cohort), cohort.arrays()
    train_idx, val_idx = split_indices(len(cohort), hyper.val_fraction, hyper.seed)
    eval_idx = val_idx if len(val_idx) else train_idx
    means, stds = _target_stats(arr.y[train_idx], tasks, hyper.standardize)
    ckpt.meta.update({"target_mean": means, "target_std": stds})
    task_curves: list[dict] = []

    def batch_loss(P, batch, step, rng):
        return y_loss(P, ckpt, feats[batch], arr.b[batch], arr.a[batch], arr.y[batch], w_all[batch], tasks,
                      means, stds, mask_rng=rng if hyper.dropout else None, dropout=hyper.dropout,
                      normalize=hyper.normalize_weights)

    def val_loss(params):
        tape = ad.Tape()
        P = {k: tape.constant(v) for k, v in params.items()}
        idx = eval_idx
        return float(y_loss(P, ckpt, feats[idx], arr.b[idx], arr.a[idx], arr.y[idx], w_all[idx], tasks,
                            means, stds, penalize=False).value)

    def on_eval(step, params, entry):
        pred = _predict_arrays(ckpt.with_flat(params), feats[eval_idx], arr.b[eval_idx], arr.a[eval_idx])
        name, value = _metric(tasks, arr.y[eval_idx], pred)
        entry[f"val_{name}"] = value
        tape = ad.Tape()
        P = {k: tape.constant(v) for k, v in params.items()}
        z = outcome_logits(P, ckpt, feats[eval_idx], arr.b[eval_idx], arr.a[eval_idx]).value
        per = task_losses(z, arr.y[eval_idx], tasks, means, stds)
        entry["val_task_losses"] = [float(v) for v in (w_all[eval_idx] @ per) / len(eval_idx)]

    result = train_loop(ckpt.flat_params(), batch_loss, val_loss, train_idx, hyper, cohort.ids, on_eval)
    out = ckpt.with_flat(result.params)
    out.meta.update({"history": result.history, "best_step": result.best_step, "steps_run": result.steps_run,
                     "n_train": int(len(train_idx)), "n_val": int(len(val_idx))})
    return out


# --- prediction ----------------------------------------------------------------------------

def _predict_arrays(ckpt: ModelCheckpoint, feats, baseline, actions) -> np.ndarray:
    tape = ad.Tape()
    P = {k: tape.constant(v) for k, v in ckpt.flat_params().items()}
    z = outcome_logits(P, ckpt, feats, baseline, actions).value
    links = ckpt.meta["tasks"]["links"]
    means, stds = ckpt.meta.get("target_mean"), ckpt.meta.get("target_std")
    out = np.empty_like(z)
    for j, link in enumerate(links):
        if link == "logistic":
            out[:, j] = ad._sigmoid(z[:, j])
        else:
            out[:, j] = z[:, j] * (stds[j] if stds else 1.0) + (means[j] if means else 0.0)
    return out


def predict_potential_outcomes(ckpt: ModelCheckpoint, cohort: Cohort,
                               query: InterventionQuery | None = None) -> np.ndarray:
    """(n, K) predictions with the treatment history replaced by ``query``.

    Covariates and baselines stay as observed. ``query=None`` gives the
    factual prediction.
    """
    check_schema(cohort, ckpt)
    if "tasks" not in ckpt.meta:
        raise SchemaError("checkpoint has no outcome head")
    arr = cohort.arrays()
    actions = arr.a
    if query is not None:
        if query.sequence.shape != (cohort.T,):
            raise ValueError(f"query length {query.sequence.shape[0]} does not match horizon T={cohort.T}")
        if query.sequence.max(initial=0) > cohort.k:
            raise ValueError("query uses a treatment outside the cohort's treatment set")
        actions = np.broadcast_to(query.sequence, arr.a.shape)
    feats = np.concatenate([arr.x, (actions[:, :, None] == np.arange(1, cohort.k + 1)).astype(np.float64)], axis=2)
    return _predict_arrays(ckpt, feats, arr.b, actions)


def write_predictions(path, ids: Sequence, results: dict[str, np.ndarray], task_names: Sequence[str]) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["id", "query"] + list(task_names))
        for label, pred in results.items():
            for rid, row in zip(ids, pred):
                w.writerow([rid, label] + [fmt(v) for v in row])


def read_predictions(path) -> dict[str, dict]:
    """query label -> {id: row array}."""
    out: dict[str, dict] = {}
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        for row in reader:
            rid = int(row[0]) if row[0].lstrip("-").isdigit() else row[0]
            out.setdefault(row[1], {})[rid] = np.array([float(v) for v in row[2:]])
    return out


# --- joint training ---------------------------------------------------------------------------

def _batch_weights(P, ckpt, feats, baseline, actions, risk, log_num, hidden) -> np.ndarray:
    """Current-model stabilized weights for a batch, as constants."""
    logits = propensity_logits(P, ckpt, feats, baseline, "ip", hidden=hidden)
    logp = action_log_probs(logits, actions, ckpt.heads["ip"].softmax, ckpt.meta["k"])
    log_den = np.stack([np.clip(lp.value, np.log(PROB_FLOOR), np.log1p(-PROB_FLOOR)) for lp in logp], axis=1)
    return np.exp(np.sum(np.where(risk, log_num - log_den, 0.0), axis=1))


def _log_numerators(cohort: Cohort) -> np.ndarray:
    table = estimate_numerators(cohort)
    arr = cohort.arrays()
    n, T = arr.a.shape
    out = np.zeros((n, T))
    for i, r in enumerate(cohort.records):
        a = tuple(int(v) for v in r.a)
        for m in range(T):
            out[i, m] = table.log_probability(m + 1, a[:m], a[m])
    return out


def train_end_to_end(cohort: Cohort, tasks: TaskSpec, hyper: TrainHyper, ip_hyper_l2: float | None = None,
                     ip_steps: bool = True, y_steps: bool = True) -> ModelCheckpoint:
    """One causal encoder with a propensity head and an outcome head.

    Batches alternate between the propensity loss and the outcome loss; the
    outcome loss uses weights recomputed from the current propensity head
    and held constant within the step.
    """
    if not (ip_steps or y_steps):
        raise ValueError("at least one of the two losses must be trained")
    ckpt = new_outcome_model(cohort, tasks, hyper, kind="end_to_end", bidirectional=False)
    n_ip = 1 if cohort.k == 1 else cohort.k + 1
    ckpt.heads["ip"] = init_head(ckpt.encoder.output_size, cohort.d, n_ip, link="logistic",
                                 l2=hyper.l2 if ip_hyper_l2 is None else ip_hyper_l2, softmax=cohort.k > 1)
    feats, arr = step_features(cohort), cohort.arrays()
    risk = arr.at_risk()
    log_num = _log_numerators(cohort)
    train_idx, val_idx = split_indices(len(cohort), hyper.val_fraction, hyper.seed)
    eval_idx = val_idx if len(val_idx) else train_idx
    means, stds = _target_stats(arr.y[train_idx], tasks, hyper.standardize)
    ckpt.meta.update({"target_mean": means, "target_std": stds, "ip_steps": ip_steps, "y_steps": y_steps})

    def encode(P, idx):
        return lstm_forward(P, "enc", ckpt.encoder, [feats[idx, t] for t in range(cohort.T)])

    def batch_loss(P, batch, step, rng):
        hidden = encode(P, batch)
        use_ip = ip_steps and (not y_steps or step % 2 == 1)
        if use_ip:
            return ip_loss(P, ckpt, feats[batch], arr.b[batch], arr.a[batch], risk[batch], hidden=hidden)
        w = _batch_weights(P, ckpt, feats[batch], arr.b[batch], arr.a[batch], risk[batch], log_num[batch], hidden)
        return y_loss(P, ckpt, feats[batch], arr.b[batch], arr.a[batch], arr.y[batch], w, tasks, means, stds,
                      hidden=hidden, mask_rng=rng if hyper.dropout else None, dropout=hyper.dropout,
                      normalize=hyper.normalize_weights)

    def val_loss(params):
        tape = ad.Tape()
        P = {k: tape.constant(v) for k, v in params.items()}
        idx = eval_idx
        hidden = encode(P, idx)
        total = 0.0
        if ip_steps:
            total += float(ip_loss(P, ckpt, feats[idx], arr.b[idx], arr.a[idx], risk[idx], hidden=hidden,
                                   penalize=False).value)
        if y_steps:
            w = _batch_weights(P, ckpt, feats[idx], arr.b[idx], arr.a[idx], risk[idx], log_num[idx], hidden)
            total += float(y_loss(P, ckpt, feats[idx], arr.b[idx], arr.a[idx], arr.y[idx], w, tasks, means, stds,
                                  hidden=hidden, penalize=False).value)
        return total

    def on_eval(step, params, entry):
        pred = _predict_arrays(ckpt.with_flat(params), feats[eval_idx], arr.b[eval_idx], arr.a[eval_idx])
        name, value = _metric(tasks, arr.y[eval_idx], pred)
        entry[f"val_{name}"] = value

    result = train_loop(ckpt.flat_params(), batch_loss, val_loss, train_idx, hyper, cohort.ids, on_eval)
    out = ckpt.with_flat(result.params)
    out.meta.update({"history": result.history, "best_step": result.best_step, "steps_run": result.steps_run,
                     "n_train": int(len(train_idx)), "n_val": int(len(val_idx))})
    return out


def steps_to_threshold(history: list[dict], threshold: float) -> tuple[str, int | None, float | None]:
    """First evaluated step whose validation metric reaches ``threshold``."""
    key = next((k for e in history for k in e if k in ("val_auc", "val_r2")), None)
    if key is None:
        return "none", None, None
    hit = next((e["step"] for e in history if e.get(key) is not None and e[key] >= threshold), None)
    final = history[-1].get(key)
    return key[4:], hit, final


def comparison_entry(mode: str, ckpt: ModelCheckpoint, threshold: float, offset: int = 0) -> dict:
    metric, hit, final = steps_to_threshold(ckpt.meta["history"], threshold)
    return {"mode": mode, "steps_to_threshold": None if hit is None else hit + offset,
            "threshold_metric": f"{metric}>={threshold:g}", "final_metric": final}
