"""Finite-difference suite over tiny random configurations (64-bit)."""

from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np

from . import backbone as bb
from . import flow
from . import layout as lay
from . import tensor as T

TINY = bb.BackboneConfig(dim=16, layers=2, heads=2, head_dim=8, mlp_ratio=2, patch=2, context_patch=4, image_size=8,
                         gate_hidden=8, gate_heads=2, gate_ff=8)


@dataclass
class CheckResult:
    name: str
    error: float
    seconds: float


def _random_model(rng: np.random.Generator, cfg: bb.BackboneConfig) -> bb.DiT:
    model = bb.DiT.create(cfg, int(rng.integers(2**31)), dtype=np.float64)
    for k, v in model.params.items():
        model.params[k] = v + 0.2 * rng.standard_normal(v.shape)
    return model


def _random_case(rng: np.random.Generator, cfg: bb.BackboneConfig):
    s = cfg.image_size
    p = cfg.patch
    top, left = (int(v) * p for v in rng.integers(0, s // p - 1, size=2))
    bottom = top + p * int(rng.integers(1, (s - top) // p + 1))
    right = left + p * int(rng.integers(1, (s - left) // p + 1))
    layout = lay.build_layout((s, s), lay.BBox(top, left, bottom, right), p)
    z0 = rng.uniform(-1, 1, (layout.n_visual, cfg.patch_dim))
    z1 = rng.standard_normal(z0.shape)
    t = float(rng.uniform(0.05, 0.95))
    ids = [int(rng.integers(cfg.vocab)) for _ in range(cfg.text_len)]
    src = rng.random((cfg.channels, s, s))
    return layout, z0, z1, t, ids, src


def forward_loss_check(rng: np.random.Generator, cfg: bb.BackboneConfig = TINY, eps: float = 1e-5,
                       per_param: int = 2, margin: float = 1e-3, routing: str = "adaptive") -> float:
    """``fm_loss(dit_forward(...))`` against central differences over sampled parameter coordinates.

    The hard routing bit has zero derivative almost everywhere, so the check
    uses the exact step backward and redraws the point while any routing
    probability sits within ``margin`` of the threshold.
    """
    for _ in range(50):
        model = _random_model(rng, cfg)
        layout, z0, z1, t, ids, src = _random_case(rng, cfg)
        zt = flow.interpolate(z0, z1, t)
        _, trace = bb.dit_forward(model, zt, t, ids, src, layout, routing)
        if all(np.all(np.abs(p - 0.5) > margin) for p in trace.p):
            break
    else:
        raise RuntimeError("could not find a parameter point away from the routing threshold")

    def loss_fn(P):
        v, _ = bb.dit_forward(model, zt, t, ids, src, layout, routing, bound=P, straight_through=False)
        return flow.fm_loss(v, z0, z1)

    err, _ = T.params_fd_check(loss_fn, model.params, eps=eps, per_param=per_param, rng=rng)
    return err


def routed_rotation_check(rng: np.random.Generator, eps: float = 1e-6) -> float:
    """Gradient of the per-token rotary choice with respect to a continuous ``G`` and to ``x``."""
    n, hd, n_r = 7, 8, 3
    rows = slice(n - n_r, n)
    ang = rng.uniform(-3, 3, (n, hd // 2))
    alt = rng.uniform(-3, 3, (n_r, hd // 2))
    x = rng.standard_normal((2, n, hd))
    G = rng.uniform(0.1, 0.9, n_r)
    w = rng.standard_normal((2, n, hd))

    def fx(xt):
        return T.sum(T.mul(T.rope_routed(xt, np.cos(ang), np.sin(ang), rows, np.cos(alt), np.sin(alt), G), w))

    def fg(gt):
        return T.sum(T.mul(T.rope_routed(T.Tensor(x), np.cos(ang), np.sin(ang), rows, np.cos(alt), np.sin(alt), gt), w))

    return max(T.finite_diff_check(fx, x, eps), T.finite_diff_check(fg, G, eps))


def primitive_checks(rng: np.random.Generator, eps: float = 1e-5) -> dict[str, float]:
    """Each primitive at a random point, composed with a random linear read-out."""
    out = {}
    x = rng.standard_normal((3, 4))
    wt = rng.standard_normal((4, 5))
    mask = np.where(rng.random((3, 4)) < 0.3, -np.inf, 0.0)
    mask[:, 0] = 0.0

    def readout(y):
        r = np.random.default_rng(1).standard_normal(y.shape)
        return T.sum(T.mul(y, r))

    cases = {
        "matmul": lambda a: readout(T.matmul(a, wt)),
        "bmm": lambda a: readout(T.matmul(T.reshape(a, (1, 3, 4)), T.Tensor(np.ones((1, 4, 2))))),
        "add_mul": lambda a: readout(T.mul(T.add(a, a), a)),
        "affine": lambda a: readout(T.affine(a, 1.7, -0.3)),
        "exp": lambda a: readout(T.exp(a)),
        "sigmoid": lambda a: readout(T.sigmoid(a)),
        "silu": lambda a: readout(T.silu(a)),
        "softmax": lambda a: readout(T.softmax(a)),
        "softmax_masked": lambda a: readout(T.softmax(a, mask)),
        "rms_norm": lambda a: readout(T.rms_norm(a)),
        "sum_mean": lambda a: T.add(T.sum(T.square(a), axis=1)[0], T.mean(a)),
        "reshape_transpose": lambda a: readout(T.transpose(T.reshape(a, (2, 6)))),
        "slice_concat": lambda a: readout(T.concat([a[1:], a[:1]], axis=0)),
        "embedding": lambda a: readout(T.embedding(a, [2, 0, 2])),
        "rope": lambda a: readout(T.rope(a, np.cos(x[:, :2]), np.sin(x[:, :2]))),
    }
    for name, f in cases.items():
        out[name] = T.finite_diff_check(f, rng.standard_normal((3, 4)), eps)
    return out


def run_suite(n_configs: int = 25, seed: int = 0) -> list[CheckResult]:
    """Primitive checks, the routed rotation, then ``n_configs`` full forward-loss compositions."""
    rng = np.random.default_rng(seed)
    results = []
    t0 = time.perf_counter()
    prim = primitive_checks(rng)
    results.extend(CheckResult(f"primitive.{k}", v, 0.0) for k, v in prim.items())
    results.append(CheckResult("rope_routed", routed_rotation_check(rng), 0.0))
    results[-1].seconds = time.perf_counter() - t0
    for i in range(n_configs):
        t0 = time.perf_counter()
        routing = ("adaptive", "fixed_base", "fixed_swap")[i % 3] if i % 5 == 4 else "adaptive"
        err = forward_loss_check(rng, routing=routing)
        results.append(CheckResult(f"dit_forward.{i}.{routing}", err, time.perf_counter() - t0))
    return results
