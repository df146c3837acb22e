"""Run configuration: strict JSON loading with a mandatory root seed."""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

from .simulator import MsmSimConfig, SimConfig
from .training import TrainHyper


class ConfigError(ValueError):
    pass


def parse_float(v) -> float:
    """Numbers or the strings "inf" / "-inf" / "infinity"."""
    if isinstance(v, bool):
        raise ConfigError(f"expected a number, got {v!r}")
    if isinstance(v, (int, float)):
        return float(v)
    if isinstance(v, str):
        try:
            return float(v.strip())
        except ValueError:
            pass
    raise ConfigError(f"expected a number or 'inf'/'-inf', got {v!r}")


def _strict(cls, d: dict | None, where: str):
    d = dict(d or {})
    known = {f.name for f in fields(cls)}
    unknown = sorted(set(d) - known)
    if unknown:
        raise ConfigError(f"unknown key(s) in {where}: {unknown}")
    return d


@dataclass
class MsmOptions:
    l2: float = 0.0
    source: str = "predictions"      # "predictions" or "observed" outcomes as MSM targets

    def validate(self) -> None:
        if self.source not in ("predictions", "observed"):
            raise ConfigError(f"msm.source must be 'predictions' or 'observed', got {self.source!r}")
        if self.l2 < 0:
            raise ConfigError("msm.l2 must be non-negative")


@dataclass
class SweepOptions:
    lambdas: list[float] = field(default_factory=lambda: [-math.inf, 0.0, 5.0, 10.0])
    rhos: list[float] = field(default_factory=lambda: [1.0, 2.0, 4.0, 8.0])
    seeds: list[int] | None = None   # defaults to [root seed]
    workers: int | None = None       # defaults to available cores

    def validate(self) -> None:
        if not self.lambdas or not self.rhos:
            raise ConfigError("sweep grids must be non-empty")
        if any(r < 1 for r in self.rhos):
            raise ConfigError("sweep rho values must be >= 1")
        if self.workers is not None and self.workers < 1:
            raise ConfigError("sweep.workers must be >= 1")


@dataclass
class Paths:
    """Inputs and outputs; relative paths resolve against the output directory."""

    cohort: str = "biased.jsonl"
    randomized: str = "randomized.jsonl"
    truth: str = "truth.json"
    weights: str | None = "weights.csv"   # null trains the outcome model unweighted
    propensities: str = "propensities.csv"
    iptw_checkpoint: str = "iptw_checkpoint.json"
    outcome_checkpoint: str = "outcome_checkpoint.json"
    predictions: str = "predictions.csv"


@dataclass
class RunConfig:
    seed: int
    sim: SimConfig = field(default_factory=SimConfig)
    msm_sim: MsmSimConfig | None = None   # when set, simulate draws a binary-outcome cohort instead
    phase1: TrainHyper = field(default_factory=TrainHyper)
    phase2: TrainHyper = field(default_factory=TrainHyper)
    tasks: list[str] | None = None        # per-task links; inferred from outcomes when absent
    msm: MsmOptions = field(default_factory=MsmOptions)
    truncate: list[float] | None = None   # [q_lo, q_hi] quantile clamp applied when weights are written
    threshold: float = 0.9                # end-to-end comparison target on the validation metric
    sweep: SweepOptions = field(default_factory=SweepOptions)
    paths: Paths = field(default_factory=Paths)

    @classmethod
    def from_dict(cls, d: dict, seed_override: int | None = None) -> "RunConfig":
        d = _strict(cls, d, "config")
        seed = seed_override if seed_override is not None else d.get("seed")
        if seed is None:
            raise ConfigError("a seed is required (config 'seed' or --seed)")
        if isinstance(seed, bool) or not isinstance(seed, int) or seed < 0:
            raise ConfigError(f"seed must be a non-negative integer, got {seed!r}")

        sim = _strict(SimConfig, d.get("sim"), "sim")
        for key in ("lam", "rho", "C", "decay_rate", "noise_sd"):
            if key in sim:
                sim[key] = parse_float(sim[key])
        sim["seed"] = seed
        msm_sim = None
        if d.get("msm_sim") is not None:
            ms = _strict(MsmSimConfig, d["msm_sim"], "msm_sim")
            ms["seed"] = seed
            msm_sim = MsmSimConfig(**ms)

        def hyper(key):
            h = _strict(TrainHyper, d.get(key), key)
            h["seed"] = seed
            try:
                return TrainHyper.from_dict(h)
            except TypeError as exc:
                raise ConfigError(f"{key}: {exc}") from None

        sweep = _strict(SweepOptions, d.get("sweep"), "sweep")
        if "lambdas" in sweep:
            sweep["lambdas"] = [parse_float(v) for v in sweep["lambdas"]]
        if "rhos" in sweep:
            sweep["rhos"] = [parse_float(v) for v in sweep["rhos"]]
        tasks = d.get("tasks")
        if tasks is not None and (not isinstance(tasks, list) or any(t not in ("logistic", "identity") for t in tasks)):
            raise ConfigError(f"tasks must be a list of 'logistic'/'identity', got {tasks!r}")
        cfg = cls(seed=seed, sim=SimConfig(**sim), msm_sim=msm_sim, phase1=hyper("phase1"), phase2=hyper("phase2"),
                  tasks=tasks, msm=MsmOptions(**_strict(MsmOptions, d.get("msm"), "msm")),
                  truncate=d.get("truncate"), threshold=parse_float(d.get("threshold", 0.9)), sweep=SweepOptions(**sweep),
                  paths=Paths(**_strict(Paths, d.get("paths"), "paths")))
        cfg.validate()
        return cfg

    @classmethod
    def load(cls, path: str | Path | None, seed_override: int | None = None) -> "RunConfig":
        data = {}
        if path is not None:
            try:
                data = json.loads(Path(path).read_text(encoding="utf-8"))
            except FileNotFoundError:
                raise ConfigError(f"config file not found: {path}") from None
            except json.JSONDecodeError as exc:
                raise ConfigError(f"{path}: invalid JSON ({exc})") from None
            if not isinstance(data, dict):
                raise ConfigError(f"{path}: top level must be an object")
        return cls.from_dict(data, seed_override)

    def validate(self) -> None:
        try:
            self.sim.validate()
            self.phase1.validate()
            self.phase2.validate()
        except ValueError as exc:
            raise ConfigError(str(exc)) from None
        self.msm.validate()
        self.sweep.validate()
        t = self.truncate
        if t is not None and (not isinstance(t, list) or len(t) != 2 or not 0 <= t[0] < t[1] <= 1):
            raise ConfigError(f"truncate must be [q_lo, q_hi] with 0 <= q_lo < q_hi <= 1, got {t!r}")

    def to_dict(self) -> dict:
        return asdict(self)
