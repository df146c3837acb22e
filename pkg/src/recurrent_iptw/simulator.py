"""Synthetic longitudinal cohorts with known treatment effects.

Baselines are multivariate normal. Covariates start at the baseline and decay
by a fixed amount per step; initiating treatment at step t adds (C - t) * beta
to the covariates from step t onwards. The outcome is
``N(beta_b . b + beta . x_T, noise_sd^2)``, so the effect of initiating at t
versus never is exactly C - t when ||beta||_2 = 1.

Selection bias is injected afterwards by discarding treated records: first
those with ``beta_b . b < lambda``, then each remaining treated record with
probability (t - 1) / (rho * T).
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field

import numpy as np

from .cohort import Cohort, PatientRecord
from .rng import record_stream, stream

COEF_POOL = np.array([0.0, 1.0, 2.0, 3.0, 4.0])
COEF_PROBS = np.array([0.3, 0.25, 0.2, 0.15, 0.1])


@dataclass
class SimConfig:
    n: int = 10_000
    d: int = 20
    T: int = 3
    C: float = 4.0
    lam: float = -math.inf
    rho: float = 1.0
    decay_rate: float = 0.1
    noise_sd: float = 1.0
    seed: int = 0

    def validate(self) -> None:
        if self.n <= 0 or self.d <= 0 or self.T < 1:
            raise ValueError("SimConfig needs n > 0, d > 0, T >= 1")
        if not self.C > self.T:
            raise ValueError(f"SimConfig needs C > T so every effect is positive (C={self.C}, T={self.T})")
        if not self.rho >= 1:
            raise ValueError(f"rho must be >= 1, got {self.rho}")
        if self.noise_sd < 0:
            raise ValueError("noise_sd must be non-negative")


@dataclass
class GroundTruth:
    beta_b: np.ndarray
    beta: np.ndarray
    ate_by_time: np.ndarray
    C: float = 4.0

    def to_json(self) -> dict:
        return {"beta_b": self.beta_b.tolist(), "beta": self.beta.tolist(),
                "ate_by_time": self.ate_by_time.tolist(), "C": float(self.C)}

    @classmethod
    def from_json(cls, obj: dict) -> "GroundTruth":
        return cls(np.asarray(obj["beta_b"], dtype=np.float64), np.asarray(obj["beta"], dtype=np.float64),
                   np.asarray(obj["ate_by_time"], dtype=np.float64), float(obj.get("C", 4.0)))


def ground_truth_ate(C: float, t: int, T: int | None = None) -> float:
    """Effect of initiating at step t versus never: C - t."""
    if t < 1 or (T is not None and t > T):
        raise ValueError(f"initiation step {t} outside 1..{T if T is not None else 'T'}")
    return float(C - t)


def sample_coefficients(d: int, seed: int, C: float = 4.0, T: int = 3) -> GroundTruth:
    if d <= 0:
        raise ValueError("d must be positive")
    rng = stream(seed, "coefficients")
    beta_b = rng.choice(COEF_POOL, size=d, p=COEF_PROBS)
    while True:
        beta = rng.choice(COEF_POOL, size=d, p=COEF_PROBS)
        if np.any(beta):  # all-zero draw cannot be normalized
            break
    beta = beta / np.linalg.norm(beta)
    ate = np.array([ground_truth_ate(C, t, T) for t in range(1, T + 1)])
    return GroundTruth(beta_b, beta, ate, C)


def random_covariance(d: int, seed: int) -> np.ndarray:
    """(G G^T) / d + 0.1 I with standard normal G; always positive definite."""
    G = stream(seed, "covariance").standard_normal((d, d))
    return G @ G.T / d + 0.1 * np.eye(d)


def covariate_path(b: np.ndarray, init: int, beta: np.ndarray, C: float, T: int, decay: float) -> np.ndarray:
    steps = np.arange(1, T + 1)[:, None]
    x = b[None, :] - decay * steps
    if init:
        x[init - 1:] += (C - init) * beta
    return x


def generate_randomized_cohort(config: SimConfig, truth: GroundTruth) -> Cohort:
    config.validate()
    d, T = config.d, config.T
    chol = np.linalg.cholesky(random_covariance(d, config.seed))
    records = []
    for i in range(config.n):
        rng = record_stream(config.seed, "simulate", i)
        b = chol @ rng.standard_normal(d)
        init = int(rng.integers(0, T + 1))  # 0 = never, each option 1/(T+1)
        x = covariate_path(b, init, truth.beta, config.C, T, config.decay_rate)
        y = float(truth.beta_b @ b + truth.beta @ x[-1] + config.noise_sd * rng.standard_normal())
        a = np.zeros(T, dtype=np.int64)
        if init:
            a[init - 1:] = 1
        records.append(PatientRecord(i, b, x, a, y))
    meta = {**truth.to_json(), "seed": config.seed, "decay_rate": config.decay_rate,
            "noise_sd": config.noise_sd, "lambda": -math.inf, "rho": math.inf}
    return Cohort(records, d=d, T=T, K=1, p=d, k=1, truth=meta)


def apply_selection_bias(cohort: Cohort, truth: GroundTruth, lam: float, rho: float, seed: int) -> Cohort:
    """Drop treated records; controls are always kept.

    Each record's removal draw comes from its own stream keyed by its id, so
    one randomized cohort can be re-biased at many (lambda, rho) settings with
    nested outcomes.
    """
    if not rho >= 1:
        raise ValueError(f"rho must be >= 1, got {rho}")
    T = cohort.T
    keep = []
    for pos, r in enumerate(cohort.records):
        t = r.initiation
        if t == 0:
            keep.append(pos)
            continue
        if truth.beta_b @ r.b < lam:
            continue
        index = r.id if isinstance(r.id, (int, np.integer)) else pos
        u = record_stream(seed, "bias", int(index)).random()
        if u < (t - 1) / (rho * T):
            continue
        keep.append(pos)
    out = cohort.subset(keep)
    if out.truth is not None:
        out.truth = {**out.truth, "lambda": float(lam), "rho": float(rho)}
    if not any(cohort.records[i].initiation for i in keep):
        out.warnings.append("empty treated group after selection bias")
    return out


def simulate(config: SimConfig) -> tuple[Cohort, Cohort, GroundTruth]:
    """Randomized cohort plus its biased version at (config.lam, config.rho)."""
    truth = sample_coefficients(config.d, config.seed, config.C, config.T)
    randomized = generate_randomized_cohort(config, truth)
    biased = apply_selection_bias(randomized, truth, config.lam, config.rho, config.seed)
    return randomized, biased, truth


# --- binary-outcome cohorts for the structural models ------------------------------

@dataclass
class MsmSimConfig:
    """Binary outcome drawn from a logistic structural model.

    ``logit P(Y=1) = time_slope * m + beta_m[m] * treated + group_effect * g
    + interaction * treated * g + baseline_weights . b`` where m is the 0-based
    initiation step (T for never-treated). Treatment is randomized, so the
    planted coefficients are the causal log odds ratios.
    """

    n: int = 5000
    d: int = 4
    T: int = 3
    beta_m: list[float] = field(default_factory=lambda: [1.0, 0.5, -0.5])
    time_slope: float = -0.1
    baseline_scale: float = 0.5
    group_effect: float = 0.0
    interaction: float = 0.0
    with_groups: bool = False
    decay_rate: float = 0.1
    seed: int = 0


def generate_msm_cohort(config: MsmSimConfig) -> Cohort:
    T, d = config.T, config.d
    if len(config.beta_m) != T:
        raise ValueError("beta_m needs one coefficient per initiation step")
    w = stream(config.seed, "msm-baseline-weights").normal(0.0, config.baseline_scale, size=d)
    records = []
    for i in range(config.n):
        rng = record_stream(config.seed, "msm-simulate", i)
        b = rng.standard_normal(d)
        g = int(rng.random() < 0.5) if config.with_groups else 0
        init = int(rng.integers(0, T + 1))
        m = T if init == 0 else init - 1
        treated = 1 if init else 0
        z = config.time_slope * m + (config.beta_m[m] if treated else 0.0) + w @ b
        if config.with_groups:
            z += config.group_effect * g + config.interaction * treated * g
        y = float(rng.random() < 1.0 / (1.0 + math.exp(-z)))
        x = b[None, :] - config.decay_rate * np.arange(1, T + 1)[:, None]
        a = np.zeros(T, dtype=np.int64)
        if init:
            a[init - 1:] = 1
        records.append(PatientRecord(i, b, x, a, y, g if config.with_groups else None))
    truth = {"kind": "msm", **{k: v for k, v in asdict(config).items() if k != "seed"},
             "baseline_weights": w.tolist()}
    if config.with_groups:
        base = config.beta_m[0]
        truth["conditional_or"] = [math.exp(base), math.exp(base + config.interaction)]
    return Cohort(records, d=d, T=T, K=1, p=d, k=1, truth=truth)
