"""Flow-matching training of the backbone and gates.

The clean endpoint ``Z_0`` concatenates the Main Path target (the full target
image) and the Subject Path target (the target cropped to the bbox support).
Noise ``Z_1`` has the same shape, ``Z_t = t Z_1 + (1 - t) Z_0`` and the model
regresses the constant velocity ``Z_1 - Z_0``.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np

from . import backbone as bb
from . import layout as lay
from . import tensor as T

NULL_TOKEN = 14
TRAIN_ROUTINGS = ("adaptive", "fixed_base", "fixed_swap", "no_subject")


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.99
    adam_eps: float = 1e-8
    steps: int = 2000
    batch_size: int = 8
    text_drop: float = 0.10
    routing_mode: str = "adaptive"
    seed: int = 0
    main_target: str = "target"

    def __post_init__(self):
        if not 0.0 <= self.text_drop <= 1.0:
            raise ValueError(f"text_drop must lie in [0, 1], got {self.text_drop}")
        if self.routing_mode not in TRAIN_ROUTINGS:
            raise ValueError(f"routing_mode must be one of {TRAIN_ROUTINGS}, got {self.routing_mode!r}")
        if self.main_target not in ("target", "source"):
            raise ValueError(f"main_target must be 'target' or 'source', got {self.main_target!r}")
        if self.steps < 0 or self.batch_size < 1:
            raise ValueError("steps must be >= 0 and batch_size >= 1")


def model_routing(routing_mode: str) -> str:
    """Backbone routing for a training/ablation mode (``no_subject`` has no gate to run)."""
    return "fixed_base" if routing_mode == "no_subject" else routing_mode


def sample_layout(sample, patch: int, routing_mode: str = "adaptive") -> lay.PathLayout:
    bbox = lay.mask_to_bbox(sample.mask, patch)
    return lay.build_layout(sample.source.shape[-2:], bbox, patch, with_subject=routing_mode != "no_subject")


def make_targets(sample, layout: lay.PathLayout, main_target: str = "target") -> np.ndarray:
    """``Z_0 = [patchify(main canvas); patchify(crop(target, bbox))]``."""
    main = sample.target if main_target == "target" else sample.source
    parts = [lay.patchify(main, layout.patch)]
    if layout.n_sub:
        parts.append(lay.patchify(lay.crop(sample.target, layout.bbox), layout.patch))
    return np.concatenate(parts, axis=0)


def interpolate(z0, z1, t: float):
    z0, z1 = np.asarray(z0), np.asarray(z1)
    if z0.shape != z1.shape:
        raise ValueError(f"interpolate: shape mismatch {z0.shape} vs {z1.shape}")
    if not 0.0 <= t <= 1.0:
        raise ValueError(f"interpolate: t={t} outside [0, 1]")
    return t * z1 + (1 - t) * z0


def fm_loss(v_pred, z0, z1) -> T.Tensor:
    """Mean squared error to the velocity ``Z_1 - Z_0``."""
    v = T._as_tensor(v_pred)
    target = np.asarray(z1) - np.asarray(z0)
    if v.shape != target.shape:
        raise ValueError(f"fm_loss: prediction {v.shape} vs target {target.shape}")
    return T.mean(T.square(T.sub(v, target.astype(v.dtype))))


def text_dropout(rng: np.random.Generator, n: int, p: float) -> np.ndarray:
    """Boolean per sample: replace the instruction with null tokens."""
    return rng.random(n) < p


# ---------------------------------------------------------------- optimizer


@dataclass
class AdamState:
    m: dict
    v: dict
    step: int = 0

    @classmethod
    def zeros(cls, params: dict) -> "AdamState":
        return cls({k: np.zeros_like(p) for k, p in params.items()}, {k: np.zeros_like(p) for k, p in params.items()})


def adam_update(params: dict, grads: dict, state: AdamState, cfg: TrainConfig) -> None:
    """In-place adaptive-moment update; parameters without a gradient keep their moments decaying."""
    state.step += 1
    b1, b2 = cfg.beta1, cfg.beta2
    c1 = 1 - b1**state.step
    c2 = 1 - b2**state.step
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            g = np.zeros_like(p)
        m, v = state.m[name], state.v[name]
        m *= b1
        m += (1 - b1) * g
        v *= b2
        v += (1 - b2) * g * g
        if cfg.lr:
            p -= (cfg.lr * (m / c1) / (np.sqrt(v / c2) + cfg.adam_eps)).astype(p.dtype)


# ---------------------------------------------------------------- training


@dataclass
class StepResult:
    loss: float
    text_drop_count: int
    gate_mean_p: list


def batch_loss(model: bb.DiT, batch, layouts, cfg: TrainConfig, rng: np.random.Generator, tape: T.Tape | None = None):
    """Mean per-sample flow-matching loss over ``batch`` and the per-sample traces.

    Draws, in this order: the text-dropout flags, one timestep per sample, then
    each sample's noise.
    """
    dtype = next(iter(model.params.values())).dtype
    P = model.bind(tape)
    n = len(batch)
    drops = text_dropout(rng, n, cfg.text_drop)
    ts = rng.random(n)
    routing = model_routing(cfg.routing_mode)
    losses, traces = [], []
    for i, (sample, layout) in enumerate(zip(batch, layouts)):
        z0 = make_targets(sample, layout, cfg.main_target).astype(dtype)
        z1 = rng.standard_normal(z0.shape).astype(dtype)
        t = float(ts[i])
        zt = interpolate(z0, z1, t).astype(dtype)
        ids = [NULL_TOKEN] * model.config.text_len if drops[i] else sample.instruction
        v, trace = bb.dit_forward(model, zt, t, ids, sample.source, layout, routing_mode=routing, tape=tape, bound=P)
        losses.append(fm_loss(v, z0, z1))
        traces.append(trace)
    loss = T.affine(T.sum(T.concat([T.reshape(l, (1,)) for l in losses])), 1.0 / n)
    return loss, P, drops, traces


def train_step(model: bb.DiT, batch, layouts, cfg: TrainConfig, state: AdamState, rng: np.random.Generator) -> StepResult:
    """One optimizer update on ``batch``.

    A non-finite loss aborts before any mutation: parameters, optimizer state
    and the generator state are left as they were and the error propagates.
    """
    if not batch:
        raise ValueError("train_step: empty batch")
    rng_state = rng.bit_generator.state
    tape = T.Tape()
    loss, P, drops, traces = batch_loss(model, batch, layouts, cfg, rng, tape)
    value = float(loss.data)
    if not np.isfinite(value):
        rng.bit_generator.state = rng_state
        raise T.NonFiniteError(f"train_step: non-finite loss {value}")
    raw = T.backward(tape, loss)
    grads = {name: raw[t.node] for name, t in P.items() if t.node in raw}
    if not all(np.all(np.isfinite(g)) for g in grads.values()):
        rng.bit_generator.state = rng_state
        raise T.NonFiniteError("train_step: non-finite gradient")
    adam_update(model.params, grads, state, cfg)
    mean_p = []
    for l in range(model.config.layers):
        ps = [tr.p[l] for tr in traces if tr.p[l].size]
        mean_p.append(float(np.concatenate(ps).mean()) if ps else float("nan"))
    return StepResult(value, int(drops.sum()), mean_p)


def batch_order(rng: np.random.Generator, n: int, steps: int, batch_size: int) -> list[np.ndarray]:
    """Minibatch indices: consecutive slices of fresh permutations (epoch shuffling)."""
    out, pool = [], np.empty(0, dtype=np.int64)
    for _ in range(steps):
        while pool.size < batch_size:
            pool = np.concatenate([pool, rng.permutation(n)])
        out.append(pool[:batch_size])
        pool = pool[batch_size:]
    return out


def train(model: bb.DiT, samples, cfg: TrainConfig, log_path=None, progress=None) -> list[StepResult]:
    """Run ``cfg.steps`` updates; writes the per-step CSV log when ``log_path`` is given."""
    if not samples:
        raise ValueError("train: no samples")
    if cfg.routing_mode == "adaptive" and not model.has_gate:
        raise ValueError("train: adaptive routing needs a model with gate parameters")
    rng = np.random.default_rng(cfg.seed)
    layouts = [sample_layout(s, model.config.patch, cfg.routing_mode) for s in samples]
    order = batch_order(rng, len(samples), cfg.steps, cfg.batch_size)
    state = AdamState.zeros(model.params)
    history = []
    for step, idx in enumerate(order):
        res = train_step(model, [samples[i] for i in idx], [layouts[i] for i in idx], cfg, state, rng)
        history.append(res)
        if progress is not None:
            progress(step, res)
    model.meta.update(
        routing=cfg.routing_mode, steps=str(cfg.steps), seed=str(cfg.seed), batch_size=str(cfg.batch_size)
    )
    if log_path is not None:
        write_log(log_path, history, model.config.layers)
    return history


def write_log(path, history, layers: int) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["step", "loss", "text_drop_count"] + [f"gate_mean_p_{l}" for l in range(layers)])
        for step, r in enumerate(history):
            w.writerow([step, f"{r.loss:.9g}", r.text_drop_count] + [f"{p:.6g}" for p in r.gate_mean_p])
