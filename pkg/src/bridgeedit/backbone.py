"""Tiny joint-attention diffusion transformer with three-axis rotary embeddings.

Instruction tokens, clean source (context) tokens, Main Path tokens and
Subject Path tokens share one bidirectional attention stack. Conditioning on
the timestep goes through zero-initialised scale/shift/gate modulation, and
the velocity head is zero-initialised, so a fresh model predicts exactly zero
velocity. Only the Main and Subject outputs are decoded.

Rotary layout: each head splits its channel pairs into three contiguous
blocks ``[frame | row | col]``. By default the frame block takes a quarter of
the pairs (at least one) and the rest is split between row and col.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import gate as gate_mod
from . import io as bio
from . import layout as lay
from . import nn
from . import tensor as T

ROUTING_MODES = ("adaptive", "fixed_base", "fixed_swap")


class CheckpointError(ValueError):
    pass


@dataclass(frozen=True)
class BackboneConfig:
    dim: int = 64
    layers: int = 4
    heads: int = 2
    head_dim: int = 32
    mlp_ratio: int = 4
    patch: int = 2
    context_patch: int = 4
    channels: int = 3
    image_size: int = 32
    rope_base: float = 10000.0
    rope_axes: tuple[int, int, int] | None = None
    zero_init_final: bool = True
    vocab: int = 15
    text_len: int = 3
    coord_budget: int = 4096
    gate_hidden: int = 64
    gate_heads: int = 1
    gate_ff: int = 64

    def __post_init__(self):
        if self.dim != self.heads * self.head_dim:
            raise ValueError(f"dim {self.dim} != heads {self.heads} x head_dim {self.head_dim}")
        if self.image_size % self.patch:
            raise ValueError(f"patch {self.patch} does not divide image size {self.image_size}")
        if self.context_patch % self.patch or self.image_size % self.context_patch:
            raise ValueError(f"context patch {self.context_patch} must be a multiple of patch {self.patch} "
                             f"and divide image size {self.image_size}")
        axes = self.axis_pairs
        if min(axes) < 1 or sum(axes) * 2 != self.head_dim:
            raise ValueError(f"rotary partition {axes} does not cover head_dim {self.head_dim}")

    @property
    def axis_pairs(self) -> tuple[int, int, int]:
        """Channel pairs per axis ``(frame, row, col)``."""
        if self.rope_axes is not None:
            return tuple(d // 2 for d in self.rope_axes)
        pairs = self.head_dim // 2
        frame = max(1, pairs // 4)
        row = (pairs - frame) // 2
        return (frame, row, pairs - frame - row)

    @property
    def patch_dim(self) -> int:
        return self.patch * self.patch * self.channels

    @property
    def context_dim(self) -> int:
        return self.context_patch * self.context_patch * self.channels

    @property
    def gate_config(self) -> gate_mod.GateConfig:
        return gate_mod.GateConfig(self.gate_hidden, self.gate_heads, self.gate_ff)

    def to_manifest(self) -> dict[str, str]:
        out = {}
        for f in dataclasses.fields(self):
            v = getattr(self, f.name)
            out[f.name] = "none" if v is None else (",".join(map(str, v)) if isinstance(v, tuple) else str(v))
        return out

    @classmethod
    def from_manifest(cls, kv: dict[str, str]) -> "BackboneConfig":
        vals = {}
        for f in dataclasses.fields(cls):
            if f.name not in kv:
                continue
            raw = kv[f.name]
            default = f.default
            if f.name == "rope_axes":
                vals[f.name] = None if raw == "none" else tuple(int(x) for x in raw.split(","))
            elif isinstance(default, bool):
                vals[f.name] = raw == "True"
            elif isinstance(default, int):
                vals[f.name] = int(raw)
            else:
                vals[f.name] = float(raw)
        return cls(**vals)


@dataclass(frozen=True)
class PECoord:
    frame: int
    row: int
    col: int

    def __post_init__(self):
        if min(self.frame, self.row, self.col) < 0:
            raise ValueError(f"PECoord components must be nonnegative, got {self}")


def coords_array(coords) -> np.ndarray:
    if len(coords) and isinstance(coords[0], PECoord):
        return np.array([(c.frame, c.row, c.col) for c in coords], dtype=np.int64)
    return np.asarray(coords, dtype=np.int64).reshape(-1, 3)


def rope_tables(coords, cfg: BackboneConfig) -> tuple[np.ndarray, np.ndarray]:
    """Per-token cos/sin tables of shape ``(N, head_dim // 2)``."""
    c = coords_array(coords)
    if c.size and (c.min() < 0 or c.max() >= cfg.coord_budget):
        raise ValueError(f"rope: coordinates outside [0, {cfg.coord_budget})")
    angles = []
    for axis, n_pairs in enumerate(cfg.axis_pairs):
        freqs = cfg.rope_base ** (-np.arange(n_pairs) / n_pairs)
        angles.append(c[:, axis : axis + 1] * freqs[None, :])
    a = np.concatenate(angles, axis=1)
    return np.cos(a), np.sin(a)


def rope_rotate(x, coords, cfg: BackboneConfig) -> T.Tensor:
    """Rotate queries or keys ``(..., N, head_dim)`` by their token coordinates."""
    x = T._as_tensor(x)
    if len(coords) != x.shape[-2]:
        raise ValueError(f"rope_rotate: {len(coords)} coordinates for {x.shape[-2]} tokens")
    cos, sin = rope_tables(coords, cfg)
    return T.rope(x, cos, sin)


# ---------------------------------------------------------------- parameters


def init_params(cfg: BackboneConfig, seed: int = 0, dtype=np.float32, with_gate: bool = True) -> dict:
    rng = np.random.default_rng(seed)
    D = cfg.dim
    p: dict[str, np.ndarray] = {}
    p["text.embed"] = (rng.standard_normal((cfg.vocab, D)) * 0.02).astype(dtype)
    p["ctx.w"], p["ctx.b"] = nn.dense_init(rng, cfg.context_dim, D, dtype)
    p["patch.w"], p["patch.b"] = nn.dense_init(rng, cfg.patch_dim, D, dtype)
    p["time1.w"], p["time1.b"] = nn.dense_init(rng, D, D, dtype)
    p["time2.w"], p["time2.b"] = nn.dense_init(rng, D, D, dtype)
    for l in range(cfg.layers):
        pre = f"blocks.{l}."
        p[pre + "mod.w"], p[pre + "mod.b"] = nn.dense_init(rng, D, 6 * D, dtype, zero=True)
        p[pre + "qkv.w"], p[pre + "qkv.b"] = nn.dense_init(rng, D, 3 * D, dtype)
        p[pre + "out.w"], p[pre + "out.b"] = nn.dense_init(rng, D, D, dtype)
        p[pre + "mlp1.w"], p[pre + "mlp1.b"] = nn.dense_init(rng, D, cfg.mlp_ratio * D, dtype)
        p[pre + "mlp2.w"], p[pre + "mlp2.b"] = nn.dense_init(rng, cfg.mlp_ratio * D, D, dtype)
    p["final.mod.w"], p["final.mod.b"] = nn.dense_init(rng, D, 2 * D, dtype, zero=True)
    p["final.out.w"], p["final.out.b"] = nn.dense_init(rng, D, cfg.patch_dim, dtype, zero=cfg.zero_init_final)
    if with_gate:
        p.update(gate_mod.init_gate_params(rng, D, cfg.layers, cfg.gate_config, dtype))
    return p


@dataclass
class DiT:
    config: BackboneConfig
    params: dict = field(default_factory=dict)
    meta: dict = field(default_factory=dict)

    @classmethod
    def create(cls, config: BackboneConfig, seed: int = 0, dtype=np.float32, with_gate: bool = True) -> "DiT":
        return cls(config, init_params(config, seed, dtype, with_gate))

    @property
    def has_gate(self) -> bool:
        return "gate.0.head.w" in self.params

    def bind(self, tape: T.Tape | None = None) -> dict[str, T.Tensor]:
        if tape is None:
            return {k: T.Tensor(v) for k, v in self.params.items()}
        return tape.watch(self.params)

    def num_params(self, prefix: str = "") -> int:
        return int(sum(v.size for k, v in self.params.items() if k.startswith(prefix)))

    def save(self, path, extra: dict | None = None) -> None:
        """Checkpoint directory: ``manifest.txt`` plus one TNSR file per parameter."""
        with bio.atomic_dir(path) as tmp:
            (tmp / "params").mkdir()
            names = sorted(self.params)
            for name in names:
                bio.write_tensor(tmp / "params" / f"{name}.tnsr", self.params[name])
            manifest = {"format": "bridgeedit-checkpoint-v1", **self.config.to_manifest()}
            manifest["has_gate"] = str(self.has_gate)
            manifest["params"] = ",".join(names)
            manifest.update({f"meta.{k}": v for k, v in {**self.meta, **(extra or {})}.items()})
            bio.write_kv(tmp / "manifest.txt", manifest)

    @classmethod
    def load(cls, path) -> "DiT":
        path = Path(path)
        if not (path / "manifest.txt").is_file():
            raise CheckpointError(f"no checkpoint manifest under {path}")
        kv = bio.read_kv(path / "manifest.txt")
        cfg = BackboneConfig.from_manifest(kv)
        try:
            params = {n: bio.read_tensor(path / "params" / f"{n}.tnsr") for n in kv["params"].split(",")}
        except (KeyError, OSError, bio.FormatError) as exc:
            raise CheckpointError(f"incomplete checkpoint under {path}: {exc}") from exc
        meta = {k[5:]: v for k, v in kv.items() if k.startswith("meta.")}
        return cls(cfg, params, meta)


# ---------------------------------------------------------------- blocks


def _lin(P, name, x):
    return T.linear(x, P[name + ".w"], P[name + ".b"])


def _rotate(x: T.Tensor, tables, routing=None) -> T.Tensor:
    """Rotary on ``(heads, N, hd)``.

    ``routing = (rows, alt_tables, G)`` lets the tokens in ``rows`` pick per
    token between ``tables`` (G = 1) and ``alt_tables`` (G = 0).
    """
    if routing is None:
        return T.rope(x, *tables)
    rows, alt, G = routing
    return T.rope_routed(x, *tables, rows, *alt, G)


def block_forward(P, layer: int, x: T.Tensor, c: T.Tensor | None, cfg: BackboneConfig,
                  tables, routing=None, mask=None, return_weights: bool = False):
    """One pre-norm attention + MLP block with timestep modulation."""
    D = cfg.dim
    pre = f"blocks.{layer}."
    if c is None:
        c = T.Tensor(np.zeros((1, D), dtype=x.dtype))
    mod = _lin(P, pre + "mod", T.silu(c))
    shift1, scale1, gate1, shift2, scale2, gate2 = (mod[:, i * D : (i + 1) * D] for i in range(6))
    h = T.add(T.mul(T.rms_norm(x), T.add(scale1, 1.0)), shift1)
    qkv = _lin(P, pre + "qkv", h)
    q, k, v = (nn.split_heads(qkv[:, i * D : (i + 1) * D], cfg.heads) for i in range(3))
    q = _rotate(T.rms_norm(q), tables, routing)
    k = _rotate(T.rms_norm(k), tables, routing)
    att, weights = nn.attention(q, k, v, mask)
    x = T.add(x, T.mul(gate1, _lin(P, pre + "out", nn.merge_heads(att))))
    h = T.add(T.mul(T.rms_norm(x), T.add(scale2, 1.0)), shift2)
    x = T.add(x, T.mul(gate2, _lin(P, pre + "mlp2", T.silu(_lin(P, pre + "mlp1", h)))))
    return (x, weights) if return_weights else x


def attention_layer(P, layer: int, seq: lay.TokenSequence, cfg: BackboneConfig, cond=None,
                    pe_override=None, return_weights: bool = False):
    """Apply block ``layer`` to a token sequence.

    ``pe_override`` replaces the coordinates of the subject-labelled tokens
    only (one triple per subject token, in order).
    """
    coords = seq.coords.copy()
    if pe_override is not None:
        sub = np.flatnonzero(seq.labels == lay.SUBJECT)
        override = coords_array(pe_override)
        if len(override) != len(sub):
            raise ValueError(f"attention_layer: {len(override)} overrides for {len(sub)} subject tokens")
        coords[sub] = override
    if seq.attn_mask is not None and seq.attn_mask.shape[0] != seq.attn_mask.shape[1]:
        raise ValueError("attention_layer: attention mask must be square")
    out = block_forward(P, layer, seq.features, cond, cfg, rope_tables(coords, cfg),
                        mask=seq.attn_mask, return_weights=return_weights)
    if return_weights:
        x, w = out
        return dataclasses.replace(seq, features=x, coords=coords), w
    return dataclasses.replace(seq, features=out, coords=coords)


# ---------------------------------------------------------------- full forward


def _check_instruction(ids, cfg: BackboneConfig) -> np.ndarray:
    ids = np.asarray(ids, dtype=np.int64).reshape(-1)
    if ids.size != cfg.text_len:
        raise ValueError(f"instruction must have {cfg.text_len} tokens, got {ids.size}")
    if ids.min() < 0 or ids.max() >= cfg.vocab:
        raise ValueError(f"instruction id out of vocabulary [0, {cfg.vocab}): {ids.tolist()}")
    return ids


def dit_forward(model: DiT, z_noisy, t: float, instruction, z_edit: np.ndarray, layout: lay.PathLayout,
                routing_mode: str = "adaptive", clamp: int | None = None, tape: T.Tape | None = None,
                bound: dict | None = None, straight_through: bool = True, gate_values=None,
                diagnostic_mask: bool = False):
    """Velocity for every Main and Subject token, plus the routing trace.

    ``z_noisy`` is ``(n_main + n_sub, patch_dim)``; ``z_edit`` the clean
    source grid. In adaptive mode each layer's GateBlock decides per subject
    token between base and swap coordinates; ``clamp`` (0 or 1) forces every
    decision, ``gate_values`` (callable ``layer -> Tensor``) supplies them
    directly. ``bound`` reuses parameter tensors already attached to ``tape``.
    """
    cfg = model.config
    if routing_mode not in ROUTING_MODES:
        raise ValueError(f"unknown routing mode {routing_mode!r}")
    if not 0.0 <= t <= 1.0:
        raise ValueError(f"timestep {t} outside [0, 1]")
    ids = _check_instruction(instruction, cfg)
    P = bound if bound is not None else model.bind(tape)
    z = T._as_tensor(z_noisy)
    if z.shape != (layout.n_visual, cfg.patch_dim):
        raise ValueError(
            f"dit_forward: noisy tokens {z.shape} but layout needs ({layout.n_visual}, {cfg.patch_dim})"
        )
    dtype = z.dtype
    use_gate = routing_mode == "adaptive" and layout.n_sub > 0
    if use_gate and clamp is None and gate_values is None and not model.has_gate:
        raise ValueError("adaptive routing needs gate parameters")

    ctx = T.Tensor(lay.patchify(z_edit, cfg.context_patch).astype(dtype))
    seq = lay.assemble_sequence(
        T.embedding(P["text.embed"], ids),
        _lin(P, "ctx", ctx),
        _lin(P, "patch", z[: layout.n_main]),
        _lin(P, "patch", z[layout.n_main :]),
        layout,
        diagnostic_mask=diagnostic_mask,
        context_patch=cfg.context_patch,
    )
    x = seq.features
    n_pre = seq.segments[lay.MAIN][0]
    base = seq.coords
    swap = base.copy()
    swap[seq.segments[lay.SUBJECT][0] :] = layout.pe_swap
    tables_base, tables_swap = rope_tables(base, cfg), rope_tables(swap, cfg)

    temb = T.Tensor(T.sinusoidal(t, cfg.dim, dtype))
    c = _lin(P, "time2", T.silu(_lin(P, "time1", temb)))

    trace = gate_mod.GateTrace()
    sub_rows = slice(seq.segments[lay.SUBJECT][0], len(seq))
    swap_sub = tuple(tab[sub_rows] for tab in tables_swap)
    for l in range(cfg.layers):
        tables, routing = tables_base, None
        if routing_mode == "fixed_swap":
            tables = tables_swap
            trace.record(np.zeros(layout.n_sub), np.zeros(layout.n_sub))
        elif routing_mode == "fixed_base" or layout.n_sub == 0:
            trace.record(np.ones(layout.n_sub), np.ones(layout.n_sub))
        else:
            if gate_values is not None:
                G = T._as_tensor(gate_values(l))
                trace.record(G.data, (G.data >= 0.5).astype(np.int64))
            elif clamp is not None:
                G = T.Tensor(np.full(layout.n_sub, float(clamp), dtype=dtype))
                trace.record(G.data, G.data)
            else:
                p = gate_mod.gate_forward(P, l, x[n_pre:], layout.subject_range, cfg.gate_config)
                G = gate_mod.ste_threshold(p, straight_through)
                trace.record(p.data, G.data)
            routing = (sub_rows, swap_sub, G)
        x = block_forward(P, l, x, c, cfg, tables, routing, mask=seq.attn_mask)

    mod = _lin(P, "final.mod", T.silu(c))
    shift, scale = mod[:, : cfg.dim], mod[:, cfg.dim :]
    h = T.add(T.mul(T.rms_norm(x[n_pre:]), T.add(scale, 1.0)), shift)
    return _lin(P, "final.out", h), trace
