"""Mini-batch Adam loop with validation-based early stopping."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field, fields
from typing import Callable

import numpy as np

from . import autodiff as ad
from .rng import stream


class TrainingDiverged(RuntimeError):
    """Loss became non-finite. Carries the batch and parameter norms."""

    def __init__(self, step: int, batch_ids: list, param_norms: dict[str, float]):
        self.step = step
        self.batch_ids = batch_ids
        self.param_norms = param_norms
        worst = sorted(param_norms.items(), key=lambda kv: -kv[1] if math.isfinite(kv[1]) else -math.inf)[:3]
        super().__init__(f"non-finite loss at step {step}; last batch ids {batch_ids[:10]}"
                         f"{'...' if len(batch_ids) > 10 else ''}; largest parameter norms {worst}")


@dataclass
class TrainHyper:
    steps: int = 2000               # batch updates (N1 / N2)
    batch_size: int = 128
    lr: float = 1e-3
    l2: float = 0.0                 # smoothing on the regression-head weights
    hidden_size: int = 32
    num_layers: int = 1
    bidirectional: bool = False
    dropout: float = 0.0
    seed: int = 0
    eval_every: int = 25
    patience: int = 20              # evaluations without improvement
    val_fraction: float = 0.25
    clip_norm: float | None = None  # e.g. 5.0
    normalize_weights: bool = False  # divide outcome-loss weights by their batch mean
    standardize: bool = True        # z-score real-valued targets internally

    @classmethod
    def from_dict(cls, d: dict) -> "TrainHyper":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown hyperparameter(s): {sorted(unknown)}")
        return cls(**d)

    def to_dict(self) -> dict:
        return asdict(self)

    def validate(self) -> None:
        if self.steps < 0 or self.batch_size <= 0 or self.lr <= 0 or self.l2 < 0:
            raise ValueError("invalid training hyperparameters")
        if not 0.0 <= self.dropout < 1.0 or not 0.0 <= self.val_fraction < 1.0:
            raise ValueError("dropout and val_fraction must lie in [0, 1)")


def split_indices(n: int, val_fraction: float, seed: int) -> tuple[np.ndarray, np.ndarray]:
    """Shuffled train/validation positions (75/25 by default)."""
    perm = stream(seed, "split").permutation(n)
    n_val = int(round(n * val_fraction))
    if n - n_val < 1:
        n_val = n - 1
    return np.sort(perm[n_val:]), np.sort(perm[:n_val])


@dataclass
class TrainResult:
    params: dict[str, np.ndarray]
    history: list[dict] = field(default_factory=list)
    best_step: int = 0
    steps_run: int = 0


LossFn = Callable[[dict[str, ad.Tensor], np.ndarray, int, np.random.Generator], ad.Tensor]


def train_loop(init: dict[str, np.ndarray], batch_loss: LossFn, val_loss: Callable[[dict[str, np.ndarray]], float],
               train_idx: np.ndarray, hyper: TrainHyper, ids: list | None = None,
               on_eval: Callable[[int, dict[str, np.ndarray], dict], None] | None = None) -> TrainResult:
    """Run up to ``hyper.steps`` Adam updates, keeping the best validation parameters.

    ``batch_loss(P, batch, step, rng)`` builds the scalar loss for positions
    ``batch`` from tape tensors ``P``. ``val_loss(params)`` scores a parameter
    set; it is evaluated at step 0 and every ``eval_every`` steps.
    """
    hyper.validate()
    rng = stream(hyper.seed, "shuffle")
    state = ad.AdamState(lr=hyper.lr)
    params = {k: np.array(v, dtype=np.float64) for k, v in init.items()}
    result = TrainResult(params=params)

    def evaluate(step: int, train_value: float | None):
        v = float(val_loss(params))
        entry = {"step": step, "train_loss": train_value, "val_loss": v}
        result.history.append(entry)
        if on_eval is not None:
            on_eval(step, params, entry)
        return v

    best = evaluate(0, None)
    best_params, stale = params, 0
    order, cursor = rng.permutation(train_idx), 0
    B = min(hyper.batch_size, len(train_idx))
    for step in range(1, hyper.steps + 1):
        if cursor + B > len(order):
            order, cursor = rng.permutation(train_idx), 0
        batch = np.sort(order[cursor:cursor + B])
        cursor += B
        tape = ad.Tape()
        P = {k: tape.param(k, v) for k, v in params.items()}
        loss = batch_loss(P, batch, step, rng)
        value = float(loss.value)
        if not math.isfinite(value):
            raise TrainingDiverged(step, [ids[i] for i in batch] if ids else batch.tolist(),
                                   {k: float(np.linalg.norm(v)) for k, v in params.items()})
        grads = ad.backward(loss)
        if hyper.clip_norm is not None:
            grads, _ = ad.clip_grad_norm(grads, hyper.clip_norm)
        params, state = ad.adam_step(params, grads, state)
        result.steps_run = step
        if step % hyper.eval_every == 0 or step == hyper.steps:
            v = evaluate(step, value)
            if v < best - 1e-12:
                best, best_params, stale, result.best_step = v, params, 0, step
            else:
                stale += 1
                if stale >= hyper.patience:
                    break
    result.params = best_params
    return result


def dropout_mask(rng: np.random.Generator, shape: tuple[int, ...], rate: float) -> np.ndarray | None:
    if rate <= 0.0:
        return None
    return (rng.random(shape) >= rate) / (1.0 - rate)
