"""Patient records, cohorts and the JSONL cohort file format."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Iterable, Sequence

import numpy as np


class SchemaError(ValueError):
    """Cohort, checkpoint or file contents disagree with the declared schema."""


@dataclass
class PatientRecord:
    id: Any
    b: np.ndarray                 # (d,)
    x: np.ndarray                 # (T, p)
    a: np.ndarray                 # (T,) ints, 0 = untreated, 1..k = treatment
    y: float | np.ndarray         # scalar, or (K,) for multi-task
    group: int | None = None

    @property
    def initiation(self) -> int:
        """1-based step at which treatment starts, 0 if never treated."""
        nz = np.flatnonzero(self.a)
        return int(nz[0]) + 1 if nz.size else 0

    def to_json(self) -> dict:
        out = {
            "id": self.id,
            "b": [float(v) for v in self.b],
            "x": [[float(v) for v in row] for row in self.x],
            "a": [int(v) for v in self.a],
            "y": float(self.y) if np.ndim(self.y) == 0 else [float(v) for v in self.y],
        }
        if self.group is not None:
            out["group"] = int(self.group)
        return out

    @classmethod
    def from_json(cls, obj: dict) -> "PatientRecord":
        y = obj["y"]
        return cls(
            id=obj["id"],
            b=np.asarray(obj["b"], dtype=np.float64),
            x=np.asarray(obj["x"], dtype=np.float64).reshape(len(obj["x"]), -1),
            a=np.asarray(obj["a"], dtype=np.int64),
            y=float(y) if np.ndim(y) == 0 else np.asarray(y, dtype=np.float64),
            group=obj.get("group"),
        )


def is_absorbing(a: Sequence[int]) -> bool:
    """True for 0...0 v...v sequences (treatment, once started, persists)."""
    a = np.asarray(a)
    nz = np.flatnonzero(a)
    if nz.size == 0:
        return True
    return bool(np.all(a[nz[0]:] == a[nz[0]]))


@dataclass
class Cohort:
    records: list[PatientRecord]
    d: int
    T: int
    K: int = 1
    p: int | None = None
    k: int = 1
    truth: dict | None = None
    warnings: list[str] = field(default_factory=list)

    def __post_init__(self):
        if self.p is None:
            self.p = self.d
        self._arrays = None

    def __len__(self) -> int:
        return len(self.records)

    @property
    def ids(self) -> list:
        return [r.id for r in self.records]

    def validate(self) -> None:
        seen = set()
        for r in self.records:
            if r.id in seen:
                raise SchemaError(f"duplicate record id {r.id!r}")
            seen.add(r.id)
            if r.b.shape != (self.d,):
                raise SchemaError(f"record {r.id!r}: baseline has shape {r.b.shape}, expected ({self.d},)")
            if r.x.shape != (self.T, self.p):
                raise SchemaError(f"record {r.id!r}: covariates have shape {r.x.shape}, expected ({self.T}, {self.p})")
            if r.a.shape != (self.T,) or r.a.min(initial=0) < 0 or r.a.max(initial=0) > self.k:
                raise SchemaError(f"record {r.id!r}: treatments {r.a.tolist()} invalid for T={self.T}, k={self.k}")
            if not is_absorbing(r.a):
                raise SchemaError(f"record {r.id!r}: treatment sequence {r.a.tolist()} is not absorbing")
            if np.ndim(r.y) == 0 and self.K != 1 or np.ndim(r.y) == 1 and np.shape(r.y) != (self.K,):
                raise SchemaError(f"record {r.id!r}: outcome shape {np.shape(r.y)} does not match K={self.K}")
            if not np.all(np.isfinite(r.b)) or not np.all(np.isfinite(r.x)) or not np.all(np.isfinite(r.y)):
                raise SchemaError(f"record {r.id!r}: non-finite values")

    def arrays(self) -> "CohortArrays":
        if self._arrays is None:
            self._arrays = CohortArrays.from_records(self.records, self.T, self.K)
        return self._arrays

    def subset(self, keep: Iterable[int]) -> "Cohort":
        """New cohort with the records at the given positions."""
        return Cohort([self.records[i] for i in keep], self.d, self.T, self.K, self.p, self.k,
                      self.truth, list(self.warnings))

    def header(self) -> dict:
        schema = {"d": self.d, "T": self.T, "K": self.K, "p": self.p, "k": self.k}
        if self.truth is not None:
            schema["truth"] = self.truth
        if self.warnings:
            schema["warnings"] = list(self.warnings)
        return {"schema": schema}


@dataclass
class CohortArrays:
    """Dense views of a cohort for batched computation."""

    b: np.ndarray        # (n, d)
    x: np.ndarray        # (n, T, p)
    a: np.ndarray        # (n, T) int
    y: np.ndarray        # (n, K)
    init: np.ndarray     # (n,) 1-based initiation step, 0 = never
    group: np.ndarray | None

    @classmethod
    def from_records(cls, records: list[PatientRecord], T: int, K: int) -> "CohortArrays":
        n = len(records)
        b = np.stack([r.b for r in records]) if n else np.zeros((0, 0))
        x = np.stack([r.x for r in records]) if n else np.zeros((0, T, 0))
        a = np.stack([r.a for r in records]).astype(np.int64) if n else np.zeros((0, T), np.int64)
        y = np.array([np.atleast_1d(r.y) for r in records], dtype=np.float64).reshape(n, K)
        init = np.array([r.initiation for r in records], dtype=np.int64)
        groups = [r.group for r in records]
        group = None if any(g is None for g in groups) else np.array(groups, dtype=np.int64)
        return cls(b, x, a, y, init, group)

    def at_risk(self) -> np.ndarray:
        """(n, T) mask of steps up to and including treatment initiation."""
        T = self.a.shape[1]
        steps = np.arange(1, T + 1)[None, :]
        last = np.where(self.init == 0, T, self.init)[:, None]
        return steps <= last


def _float_or_inf(v):
    if isinstance(v, str) and v.lower() in ("inf", "-inf", "infinity", "-infinity", "nan"):
        return float(v)
    return v


def write_cohort(cohort: Cohort, path: str | Path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(json.dumps(cohort.header(), allow_nan=True) + "\n")
        for r in cohort.records:
            fh.write(json.dumps(r.to_json()) + "\n")


def read_cohort(path: str | Path) -> Cohort:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"cohort file not found: {path}")
    with open(path, encoding="utf-8") as fh:
        lines = [ln for ln in fh if ln.strip()]
    if not lines:
        raise SchemaError(f"{path}: empty cohort file")
    head = json.loads(lines[0])
    if "schema" not in head:
        raise SchemaError(f"{path}: first line must carry the schema header")
    s = head["schema"]
    truth = s.get("truth")
    if truth is not None:
        truth = {k: _float_or_inf(v) for k, v in truth.items()}
    cohort = Cohort(
        records=[PatientRecord.from_json(json.loads(ln)) for ln in lines[1:]],
        d=int(s["d"]), T=int(s["T"]), K=int(s.get("K", 1)), p=s.get("p"), k=int(s.get("k", 1)),
        truth=truth, warnings=list(s.get("warnings", [])),
    )
    cohort.validate()
    return cohort


def fmt(v: float) -> str:
    """Shortest round-tripping text for a float (CSV cells)."""
    v = float(v)
    if math.isinf(v):
        return "inf" if v > 0 else "-inf"
    return repr(v)
