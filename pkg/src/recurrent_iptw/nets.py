"""LSTM encoders, regression heads and checkpoint serialization.

Parameters live in plain dataclasses of numpy arrays. For training they are
flattened into ``"<prefix>.<key>"`` names and registered on a tape; the
``*_forward`` functions build the graph from those tape tensors.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .cohort import SchemaError

GATES = ("i", "f", "o", "g")
LINKS = ("logistic", "identity")
FORMAT_VERSION = 1


@dataclass
class LstmParams:
    input_size: int
    hidden_size: int
    num_layers: int = 1
    bidirectional: bool = False
    weights: dict[str, np.ndarray] = field(default_factory=dict)

    @property
    def directions(self) -> tuple[str, ...]:
        return ("fwd", "bwd") if self.bidirectional else ("fwd",)

    @property
    def output_size(self) -> int:
        return self.hidden_size * len(self.directions)

    def layer_input_size(self, layer: int) -> int:
        return self.input_size if layer == 0 else self.output_size

    def expected_shapes(self) -> dict[str, tuple[int, ...]]:
        H = self.hidden_size
        shapes = {}
        for layer in range(self.num_layers):
            n_in = self.layer_input_size(layer)
            for direction in self.directions:
                for g in GATES:
                    key = f"l{layer}.{direction}"
                    shapes[f"{key}.W_{g}"] = (n_in, H)
                    shapes[f"{key}.U_{g}"] = (H, H)
                    shapes[f"{key}.b_{g}"] = (H,)
        return shapes

    def check(self) -> None:
        expected = self.expected_shapes()
        if set(expected) != set(self.weights):
            raise SchemaError(f"LSTM weights mismatch: missing {sorted(set(expected) - set(self.weights))}, "
                              f"unexpected {sorted(set(self.weights) - set(expected))}")
        for k, shape in expected.items():
            if self.weights[k].shape != shape:
                raise SchemaError(f"LSTM weight {k} has shape {self.weights[k].shape}, expected {shape}")


@dataclass
class HeadParams:
    """Affine head ``f(w_h.h + w_b.b + w_a.a + c)`` with K outputs."""

    w_h: np.ndarray                 # (H, K)
    w_b: np.ndarray                 # (d, K)
    c: np.ndarray                   # (K,)
    w_a: np.ndarray | None = None   # (k, K), outcome heads only
    link: str = "logistic"
    l2: float = 0.0
    softmax: bool = False           # multi-class propensity head (k + 1 classes)

    def __post_init__(self):
        if self.link not in LINKS:
            raise ValueError(f"unknown link {self.link!r}")
        if self.l2 < 0:
            raise ValueError("L2 coefficient must be non-negative")

    @property
    def n_out(self) -> int:
        return self.c.shape[0]

    def arrays(self) -> dict[str, np.ndarray]:
        out = {"w_h": self.w_h, "w_b": self.w_b, "c": self.c}
        if self.w_a is not None:
            out["w_a"] = self.w_a
        return out

    def with_arrays(self, arrays: dict[str, np.ndarray]) -> "HeadParams":
        return HeadParams(arrays["w_h"], arrays["w_b"], arrays["c"], arrays.get("w_a"),
                          self.link, self.l2, self.softmax)

    @property
    def penalized(self) -> tuple[str, ...]:
        """Regression weights subject to L2 smoothing (intercept excluded)."""
        return ("w_h", "w_b", "w_a") if self.w_a is not None else ("w_h", "w_b")


# --- initialization ---------------------------------------------------------

def init_lstm(input_size: int, hidden_size: int, seed: int, num_layers: int = 1,
              bidirectional: bool = False, rng: np.random.Generator | None = None) -> LstmParams:
    """Uniform(-1/sqrt(H), 1/sqrt(H)) matrices, zero biases, forget bias 1.0."""
    if input_size <= 0 or hidden_size <= 0 or num_layers <= 0:
        raise ValueError("LSTM sizes must be positive")
    rng = rng if rng is not None else np.random.default_rng(seed)
    params = LstmParams(input_size, hidden_size, num_layers, bidirectional)
    bound = 1.0 / np.sqrt(hidden_size)
    for key, shape in params.expected_shapes().items():
        if ".b_" in key:
            params.weights[key] = np.full(shape, 1.0 if key.endswith("b_f") else 0.0)
        else:
            params.weights[key] = rng.uniform(-bound, bound, size=shape)
    return params


def init_head(hidden_size: int, baseline_size: int, n_out: int = 1, treatment_size: int = 0,
              link: str = "logistic", l2: float = 0.0, softmax: bool = False) -> HeadParams:
    """All-zero head: emits 0.5 (logistic) or 0.0 (identity) until trained."""
    if hidden_size <= 0 or baseline_size < 0 or n_out <= 0:
        raise ValueError("head sizes must be positive")
    return HeadParams(
        w_h=np.zeros((hidden_size, n_out)),
        w_b=np.zeros((baseline_size, n_out)),
        c=np.zeros(n_out),
        w_a=np.zeros((treatment_size, n_out)) if treatment_size else None,
        link=link, l2=l2, softmax=softmax,
    )


def zero_lstm(input_size: int, hidden_size: int, num_layers: int = 1, bidirectional: bool = False) -> LstmParams:
    params = LstmParams(input_size, hidden_size, num_layers, bidirectional)
    params.weights = {k: np.zeros(s) for k, s in params.expected_shapes().items()}
    return params


# --- graph builders -----------------------------------------------------------

def flatten(prefix: str, arrays: dict[str, np.ndarray]) -> dict[str, np.ndarray]:
    return {f"{prefix}.{k}": v for k, v in arrays.items()}


def unflatten(prefix: str, flat: dict[str, np.ndarray]) -> dict[str, np.ndarray]:
    cut = len(prefix) + 1
    return {k[cut:]: v for k, v in flat.items() if k.startswith(prefix + ".")}


def _cell(P: dict[str, Tensor], key: str, x, h, c):
    pre = {g: x @ P[f"{key}.W_{g}"] + h @ P[f"{key}.U_{g}"] + P[f"{key}.b_{g}"] for g in GATES}
    i, f, o = ad.sigmoid(pre["i"]), ad.sigmoid(pre["f"]), ad.sigmoid(pre["o"])
    g = ad.tanh(pre["g"])
    c = f * c + i * g
    return o * ad.tanh(c), c


def lstm_forward(P: dict[str, Tensor], prefix: str, lstm: LstmParams, steps: Sequence) -> list[Tensor]:
    """Encode a batch. ``steps`` holds T arrays/tensors of shape (B, input_size)."""
    if len(steps) == 0:
        raise ValueError("lstm: empty sequence")
    tape = next(iter(P.values())).tape
    first = steps[0].value if isinstance(steps[0], Tensor) else np.asarray(steps[0])
    batch = first.shape[0] if first.ndim == 2 else None
    zeros = np.zeros((batch, lstm.hidden_size) if batch is not None else (lstm.hidden_size,))
    layer_in = [s if isinstance(s, Tensor) else tape.constant(s) for s in steps]
    for s in layer_in:
        if s.shape[-1] != lstm.input_size:
            raise ad.ShapeError("lstm", s.shape, (lstm.input_size,), detail="step size mismatch")
    T = len(layer_in)
    for layer in range(lstm.num_layers):
        outs = {}
        for direction in lstm.directions:
            key = f"{prefix}.l{layer}.{direction}"
            order = range(T) if direction == "fwd" else range(T - 1, -1, -1)
            h, c = tape.constant(zeros), tape.constant(zeros)
            seq = [None] * T
            for t in order:
                h, c = _cell(P, key, layer_in[t], h, c)
                seq[t] = h
            outs[direction] = seq
        if lstm.bidirectional:
            layer_in = [ad.concat([outs["fwd"][t], outs["bwd"][t]]) for t in range(T)]
        else:
            layer_in = outs["fwd"]
    return layer_in


def head_forward(P: dict[str, Tensor], prefix: str, head: HeadParams, hidden, baseline,
                 treatment=None, dropout_mask: np.ndarray | None = None) -> Tensor:
    """Pre-activation logits (B, K) of an affine head."""
    if dropout_mask is not None:
        hidden = hidden * dropout_mask
    z = hidden @ P[f"{prefix}.w_h"] + baseline @ P[f"{prefix}.w_b"] + P[f"{prefix}.c"]
    if head.w_a is not None:
        if treatment is None:
            raise ValueError("outcome head needs the last treatment input")
        z = z + treatment @ P[f"{prefix}.w_a"]
    return z


def l2_penalty(P: dict[str, Tensor], prefix: str, head: HeadParams) -> Tensor | None:
    if head.l2 == 0.0:
        return None
    total = None
    for name in head.penalized:
        w = P[f"{prefix}.{name}"]
        term = ad.sum(w * w)
        total = term if total is None else total + term
    return total * head.l2


# --- single-record conveniences ----------------------------------------------

def _register(tape: ad.Tape, prefix: str, arrays: dict[str, np.ndarray]) -> dict[str, Tensor]:
    return {f"{prefix}.{k}": tape.constant(v) for k, v in arrays.items()}


def lstm_encode(sequence: Sequence[Sequence[float]], params: LstmParams) -> list[np.ndarray]:
    """Hidden state per step for one sequence of step vectors."""
    if len(sequence) == 0:
        raise ValueError("lstm_encode: empty sequence")
    steps = [np.asarray(s, dtype=np.float64) for s in sequence]
    for s in steps:
        if s.shape != (params.input_size,):
            raise ad.ShapeError("lstm_encode", s.shape, (params.input_size,))
    tape = ad.Tape()
    P = _register(tape, "enc", params.weights)
    return [h.value[0] for h in lstm_forward(P, "enc", params, [s[None, :] for s in steps])]


def _head_value(hidden, baseline, params: HeadParams, treatment=None) -> np.ndarray:
    hidden = np.asarray(hidden, dtype=np.float64)
    baseline = np.asarray(baseline, dtype=np.float64)
    if hidden.shape != (params.w_h.shape[0],) or baseline.shape != (params.w_b.shape[0],):
        raise ad.ShapeError("head", hidden.shape, baseline.shape,
                            detail=f"expected ({params.w_h.shape[0]},), ({params.w_b.shape[0]},)")
    z = hidden @ params.w_h + baseline @ params.w_b + params.c
    if params.w_a is not None:
        treatment = np.atleast_1d(np.asarray(treatment, dtype=np.float64))
        if treatment.shape != (params.w_a.shape[0],):
            raise ad.ShapeError("head", treatment.shape, (params.w_a.shape[0],))
        z = z + treatment @ params.w_a
    return z


def propensity_head(hidden, baseline, params: HeadParams) -> float | np.ndarray:
    """Probability of treatment (binary), or class probabilities over k + 1 options."""
    if params.link != "logistic":
        raise ValueError("propensity head needs a logistic link: propensities must be probabilities")
    z = _head_value(hidden, baseline, params)
    if params.softmax:
        e = np.exp(z - z.max())
        return e / e.sum()
    return float(ad._sigmoid(z)[0])


def outcome_head(hidden, baseline, last_treatment, params: HeadParams) -> np.ndarray:
    """Per-task predicted outcome: probability (logistic) or real value (identity)."""
    z = _head_value(hidden, baseline, params, last_treatment)
    return ad._sigmoid(z) if params.link == "logistic" else z


# --- checkpoints ----------------------------------------------------------------

@dataclass
class ModelCheckpoint:
    kind: str                                   # "propensity" | "outcome" | "end_to_end"
    encoder: LstmParams
    heads: dict[str, HeadParams]
    hyper: dict[str, Any] = field(default_factory=dict)
    meta: dict[str, Any] = field(default_factory=dict)

    def flat_params(self) -> dict[str, np.ndarray]:
        flat = flatten("enc", self.encoder.weights)
        for name, head in self.heads.items():
            flat.update(flatten(name, head.arrays()))
        return flat

    def with_flat(self, flat: dict[str, np.ndarray]) -> "ModelCheckpoint":
        enc = LstmParams(self.encoder.input_size, self.encoder.hidden_size, self.encoder.num_layers,
                         self.encoder.bidirectional, unflatten("enc", flat))
        heads = {n: h.with_arrays(unflatten(n, flat)) for n, h in self.heads.items()}
        return ModelCheckpoint(self.kind, enc, heads, dict(self.hyper), dict(self.meta))

    def to_json(self) -> dict:
        return {
            "format_version": FORMAT_VERSION,
            "kind": self.kind,
            "encoder": {"input_size": self.encoder.input_size, "hidden_size": self.encoder.hidden_size,
                        "num_layers": self.encoder.num_layers, "bidirectional": self.encoder.bidirectional},
            "heads": {n: {"link": h.link, "l2": h.l2, "softmax": h.softmax, "has_treatment": h.w_a is not None}
                      for n, h in self.heads.items()},
            "hyper": self.hyper,
            "meta": self.meta,
            "params": {k: {"shape": list(v.shape), "values": [float(x) for x in np.ravel(v)]}
                       for k, v in self.flat_params().items()},
        }

    @classmethod
    def from_json(cls, obj: dict) -> "ModelCheckpoint":
        if obj.get("format_version") != FORMAT_VERSION:
            raise SchemaError(f"unsupported checkpoint format_version {obj.get('format_version')!r}")
        flat = {k: np.asarray(v["values"], dtype=np.float64).reshape(v["shape"]) for k, v in obj["params"].items()}
        e = obj["encoder"]
        enc = LstmParams(e["input_size"], e["hidden_size"], e["num_layers"], e["bidirectional"], unflatten("enc", flat))
        enc.check()
        heads = {}
        for name, h in obj["heads"].items():
            arr = unflatten(name, flat)
            heads[name] = HeadParams(arr["w_h"], arr["w_b"], arr["c"], arr.get("w_a"), h["link"], h["l2"], h["softmax"])
        return cls(obj["kind"], enc, heads, obj.get("hyper", {}), obj.get("meta", {}))

    def save(self, path: str | Path) -> None:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(json.dumps(self.to_json(), indent=1) + "\n", encoding="utf-8")

    @classmethod
    def load(cls, path: str | Path) -> "ModelCheckpoint":
        return cls.from_json(json.loads(Path(path).read_text(encoding="utf-8")))
