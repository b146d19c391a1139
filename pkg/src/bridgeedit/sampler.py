"""Euler sampling of the learned flow with guidance, norm rescaling and background blending."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import backbone as bb
from . import flow
from . import layout as lay
from .gate import GateTrace


@dataclass(frozen=True)
class SampleConfig:
    steps: int = 20
    cfg_scale: float = 2.0
    rescale: bool = True
    support: str = "bbox"
    alpha: float = 0.1
    seed: int = 0
    emit_subject: bool = False

    def __post_init__(self):
        if self.steps < 1:
            raise ValueError(f"steps must be >= 1, got {self.steps}")
        if not 0.0 <= self.alpha <= 1.0:
            raise ValueError(f"alpha must lie in [0, 1], got {self.alpha}")
        if self.cfg_scale < 0:
            raise ValueError(f"cfg_scale must be >= 0, got {self.cfg_scale}")
        if self.support not in ("bbox", "mask"):
            raise ValueError(f"support must be 'bbox' or 'mask', got {self.support!r}")


def cfg_combine(v_pos: np.ndarray, v_neg: np.ndarray, s: float, rescale: bool = True) -> np.ndarray:
    """Guided velocity ``v_neg + s (v_pos - v_neg)``, optionally rescaled to the norm of ``v_pos``.

    A guided prediction of norm zero is returned unscaled.
    """
    v_pos, v_neg = np.asarray(v_pos), np.asarray(v_neg)
    if v_pos.shape != v_neg.shape:
        raise ValueError(f"cfg_combine: shapes {v_pos.shape} and {v_neg.shape} differ")
    if s < 0:
        raise ValueError(f"cfg_combine: scale must be >= 0, got {s}")
    if s == 1:
        return v_pos.copy()
    guided = v_neg + s * (v_pos - v_neg)
    if rescale:
        norm = np.linalg.norm(guided)
        if norm > 0:
            guided = guided * (np.linalg.norm(v_pos) / norm)
    return guided


def noised_source(z0_src, z1_fixed, t: float) -> np.ndarray:
    return flow.interpolate(z0_src, z1_fixed, t)


def blend_step(z: np.ndarray, z_orig: np.ndarray, support: np.ndarray, alpha: float) -> np.ndarray:
    """``z M + ((1 - alpha) z + alpha z_orig)(1 - M)``."""
    z, z_orig, support = np.asarray(z), np.asarray(z_orig), np.asarray(support)
    if support.shape != z.shape or z_orig.shape != z.shape:
        raise ValueError(f"blend_step: support {support.shape} / source {z_orig.shape} do not match tokens {z.shape}")
    if not 0.0 <= alpha <= 1.0:
        raise ValueError(f"blend_step: alpha={alpha} outside [0, 1]")
    outside = 1 - support
    return z * support + ((1 - alpha) * z + alpha * z_orig) * outside


@dataclass
class SampleResult:
    output: np.ndarray
    subject: np.ndarray | None
    traces: list[GateTrace] = field(default_factory=list)
    layout: lay.PathLayout | None = None


def sampling_routing(model: bb.DiT) -> str:
    return model.meta.get("routing", "adaptive" if model.has_gate else "fixed_base")


def sample(model: bb.DiT, edit, cfg: SampleConfig = SampleConfig(), routing_mode: str | None = None,
           noise: np.ndarray | None = None) -> SampleResult:
    """Integrate from pure noise at t = 1 to t = 0 and decode the Main Path.

    Each step evaluates the conditional and null-instruction velocities,
    combines them, takes an Euler step and blends the Main Path outside the
    support towards the source noised to the next timestep. The source is
    noised with the initial Main Path noise, drawn once per run.
    """
    if model is None or not model.params:
        raise ValueError("sample: no trained model")
    routing = routing_mode or sampling_routing(model)
    c = model.config
    layout = flow.sample_layout(edit, c.patch, routing)
    net_routing = flow.model_routing(routing)
    dtype = next(iter(model.params.values())).dtype
    rng = np.random.default_rng(cfg.seed)
    z = rng.standard_normal((layout.n_visual, c.patch_dim)).astype(dtype) if noise is None else np.array(noise, dtype=dtype)
    z0_src = lay.patchify(edit.source, c.patch).astype(dtype)
    z1_fixed = z[: layout.n_main].copy()
    support = lay.token_support(layout, edit.mask if cfg.support == "mask" else None, c.channels).astype(dtype)
    P = model.bind()
    null = [flow.NULL_TOKEN] * c.text_len
    ts = np.linspace(1.0, 0.0, cfg.steps + 1)
    traces = []
    for i in range(cfg.steps):
        t, t_next = float(ts[i]), float(ts[i + 1])
        v_pos, trace = bb.dit_forward(model, z, t, edit.instruction, edit.source, layout, net_routing, bound=P)
        traces.append(trace)
        v = v_pos.data
        if cfg.cfg_scale != 1:
            v_neg, _ = bb.dit_forward(model, z, t, null, edit.source, layout, net_routing, bound=P)
            v = cfg_combine(v, v_neg.data, cfg.cfg_scale, cfg.rescale)
        z = (z - (t - t_next) * v).astype(dtype)
        main = blend_step(z[: layout.n_main], noised_source(z0_src, z1_fixed, t_next), support, cfg.alpha)
        z[: layout.n_main] = main
    out = np.clip(lay.depatchify(z[: layout.n_main], layout.main_grid, c.patch, c.channels), 0.0, 1.0)
    subject = None
    if cfg.emit_subject and layout.n_sub:
        subject = np.clip(lay.depatchify(z[layout.n_main :], layout.sub_grid, c.patch, c.channels), 0.0, 1.0)
    return SampleResult(out.astype(np.float64), subject, traces, layout)
