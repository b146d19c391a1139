"""Discrete routing gate: one GateBlock per backbone layer.

A GateBlock projects the visual tokens ``[main; subject]`` of its layer to a
narrow width, runs one pre-norm transformer encoder layer over all of them,
and emits a logit at each subject index through a zero-initialised head. The
routing bit is ``p >= 0.5`` with a straight-through backward, so a fresh gate
emits p = 0.5 everywhere and routes every subject token to its base
coordinates.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np

from . import nn
from . import tensor as T


@dataclass(frozen=True)
class GateConfig:
    hidden: int = 64
    heads: int = 4
    ff: int = 64
    bias: bool = True

    def __post_init__(self):
        if self.hidden % self.heads:
            raise ValueError(f"gate hidden {self.hidden} not divisible by heads {self.heads}")


def count_gate_params(model_dim: int, layers: int, cfg: GateConfig = GateConfig()) -> int:
    """Exact trainable parameter count of ``layers`` GateBlocks."""
    h, f, b = cfg.hidden, cfg.ff, int(cfg.bias)
    proj = model_dim * h + b * h
    attn = (h * 3 * h + b * 3 * h) + (h * h + b * h)
    norms = 2 * (2 * h)
    ffn = (h * f + b * f) + (f * h + b * h)
    head = h + b
    return layers * (proj + attn + norms + ffn + head)


def init_gate_params(rng: np.random.Generator, model_dim: int, layers: int, cfg: GateConfig, dtype) -> dict:
    params = {}
    h = cfg.hidden
    for layer in range(layers):
        pre = f"gate.{layer}."
        params[pre + "proj.w"], params[pre + "proj.b"] = nn.dense_init(rng, model_dim, h, dtype)
        params[pre + "qkv.w"], params[pre + "qkv.b"] = nn.dense_init(rng, h, 3 * h, dtype)
        params[pre + "out.w"], params[pre + "out.b"] = nn.dense_init(rng, h, h, dtype)
        params[pre + "ff1.w"], params[pre + "ff1.b"] = nn.dense_init(rng, h, cfg.ff, dtype)
        params[pre + "ff2.w"], params[pre + "ff2.b"] = nn.dense_init(rng, cfg.ff, h, dtype)
        for n in ("norm1", "norm2"):
            params[pre + n + ".g"] = np.ones(h, dtype=dtype)
            params[pre + n + ".b"] = np.zeros(h, dtype=dtype)
        params[pre + "head.w"], params[pre + "head.b"] = nn.dense_init(rng, h, 1, dtype, zero=True)
        if not cfg.bias:
            for k in [k for k in params if k.startswith(pre) and k.endswith(".b") and "norm" not in k]:
                del params[k]
    return params


def _lin(P, name, x):
    return T.linear(x, P[name + ".w"], P.get(name + ".b"))


def gate_forward(P: dict, layer: int, H: T.Tensor, subject_range: range, cfg: GateConfig) -> T.Tensor:
    """Routing probabilities ``sigmoid(logit)`` at the subject indices of ``H``."""
    n = H.shape[0]
    if len(subject_range) == 0:
        return T.Tensor(np.zeros((0,), dtype=H.dtype))
    if subject_range.start < 0 or subject_range.stop > n:
        raise IndexError(f"gate_forward: subject range {subject_range} outside {n} tokens")
    pre = f"gate.{layer}."
    h = _lin(P, pre + "proj", H)
    a = nn.norm(h, P[pre + "norm1.g"], P[pre + "norm1.b"])
    qkv = _lin(P, pre + "qkv", a)
    d = cfg.hidden
    q, k, v = (nn.split_heads(qkv[:, i * d : (i + 1) * d], cfg.heads) for i in range(3))
    att, _ = nn.attention(q, k, v)
    h = T.add(h, _lin(P, pre + "out", nn.merge_heads(att)))
    f = nn.norm(h, P[pre + "norm2.g"], P[pre + "norm2.b"])
    h = T.add(h, _lin(P, pre + "ff2", T.silu(_lin(P, pre + "ff1", f))))
    logits = _lin(P, pre + "head", h[subject_range.start : subject_range.stop])
    return T.sigmoid(T.reshape(logits, (len(subject_range),)))


def ste_threshold(p: T.Tensor, straight_through: bool = True) -> T.Tensor:
    """Hard routing bit ``G = 1 if p >= 0.5 else 0``; gradient passes unchanged."""
    return T.ste_threshold(p, straight_through)


def pe_select(G, pe_base: np.ndarray, pe_swap: np.ndarray) -> np.ndarray:
    """Per-token coordinates: base where ``G == 1``, swap where ``G == 0``."""
    g = np.asarray(getattr(G, "data", G))
    pe_base, pe_swap = np.asarray(pe_base), np.asarray(pe_swap)
    if not (len(g) == len(pe_base) == len(pe_swap)):
        raise ValueError(f"pe_select: lengths {len(g)}, {len(pe_base)}, {len(pe_swap)} differ")
    if not np.all((g == 0) | (g == 1)):
        raise ValueError("pe_select: routing decisions must be binary")
    return np.where(g[:, None] == 1, pe_base, pe_swap)


@dataclass
class GateTrace:
    """Per-layer routing probabilities and hard decisions for subject tokens."""

    p: list[np.ndarray] = field(default_factory=list)
    G: list[np.ndarray] = field(default_factory=list)

    def record(self, p, G) -> None:
        self.p.append(np.asarray(p, dtype=np.float64).copy())
        self.G.append(np.asarray(G).astype(np.int64))

    def __len__(self) -> int:
        return len(self.p)

    def mean_p(self) -> list[float]:
        return [float(p.mean()) if p.size else float("nan") for p in self.p]

    def rows(self, step: int | None = None):
        for layer, (p, g) in enumerate(zip(self.p, self.G)):
            for i, (pi, gi) in enumerate(zip(p, g)):
                row = {"layer": layer, "token_index": i, "p": f"{pi:.9g}", "G": int(gi)}
                yield row if step is None else {"step": step, **row}


def write_traces_csv(path, traces) -> None:
    """Write one trace (or a list of per-step traces) as CSV rows."""
    if isinstance(traces, GateTrace):
        rows = list(traces.rows())
        fields = ["layer", "token_index", "p", "G"]
    else:
        rows = [r for step, tr in enumerate(traces) for r in tr.rows(step)]
        fields = ["step", "layer", "token_index", "p", "G"]
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=fields)
        w.writeheader()
        w.writerows(rows)
