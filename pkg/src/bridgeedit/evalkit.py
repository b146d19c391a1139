"""Region metrics, a patch-statistics embedding, benchmark score mapping, average ranks."""

from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np
from scipy.stats import rankdata

from . import layout as lay
from .masks import gradient_magnitude

EMBED_VERSION = "patchstats-v1"


def region_metrics(generated: np.ndarray, reference: np.ndarray, bbox: lay.BBox) -> dict[str, float]:
    """Mean absolute and squared pixel error inside ``bbox`` (local) and over the image (global)."""
    g, r = np.asarray(generated, dtype=np.float64), np.asarray(reference, dtype=np.float64)
    if g.shape != r.shape:
        raise ValueError(f"region_metrics: shapes {g.shape} and {r.shape} differ")
    d = g - r
    loc = lay.crop(d, bbox)
    return {
        "local_l1": float(np.abs(loc).mean()),
        "local_l2": float((loc * loc).mean()),
        "global_l1": float(np.abs(d).mean()),
        "global_l2": float((d * d).mean()),
    }


# ---------------------------------------------------------------- embedding


def patch_embed(grid: np.ndarray, cells: int = 4) -> np.ndarray:
    """Per-cell channel means, standard deviations and mean gradient magnitudes.

    The image is split into a ``cells x cells`` grid (uneven splits allowed);
    single-channel input is replicated to three channels, so the vector always
    has ``cells * cells * 9`` entries.
    """
    g = np.asarray(grid, dtype=np.float64)
    if g.ndim == 2:
        g = g[None]
    if g.shape[0] == 1:
        g = np.repeat(g, 3, axis=0)
    grad = gradient_magnitude(g)
    feats = []
    for rows in np.array_split(np.arange(g.shape[1]), cells):
        for cols in np.array_split(np.arange(g.shape[2]), cells):
            cell = g[:, rows[:, None], cols[None, :]]
            gcell = grad[:, rows[:, None], cols[None, :]]
            # statistics about the first pixel keep constant cells exact
            ref = cell[:, :1, :1]
            centred = cell - ref
            mean = ref[:, 0, 0] + centred.mean(axis=(1, 2))
            feats.append(np.concatenate([mean, centred.std(axis=(1, 2)), gcell.mean(axis=(1, 2))]))
    return np.concatenate(feats)


def cosine_distance(a: np.ndarray, b: np.ndarray) -> float:
    """``1 - cos(a, b)`` clamped to [0, 1]; two zero vectors are at distance 0."""
    if np.array_equal(a, b):
        return 0.0
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0 and nb == 0:
        return 0.0
    if na == 0 or nb == 0:
        return 1.0
    return float(np.clip(1.0 - np.dot(a, b) / (na * nb), 0.0, 1.0))


def audit_distances(source: np.ndarray, target: np.ndarray, mask) -> tuple[float, float]:
    """``(d_obj, d_bg)``: embedding distance over the mask's bbox crop and over the unmasked pixels."""
    m = lay._as_2d(mask) > 0
    if not m.any() or m.all():
        raise ValueError("audit_distances: mask must be neither empty nor full")
    box = lay.mask_to_bbox(m.astype(np.float64), 1)
    d_obj = cosine_distance(patch_embed(lay.crop(source, box)), patch_embed(lay.crop(target, box)))
    keep = ~m
    d_bg = cosine_distance(patch_embed(source * keep), patch_embed(target * keep))
    return d_obj, d_bg


# ---------------------------------------------------------------- benchmark scores


@dataclass(frozen=True)
class RawMetrics:
    aesthetic: float
    imaging: float
    clip_cap: float
    vllm_qa: float
    clip_src: float
    l1_src: float

    def __post_init__(self):
        limits = {"aesthetic": 10.0, "imaging": 100.0}
        for name in ("aesthetic", "imaging", "clip_cap", "vllm_qa", "clip_src", "l1_src"):
            v, hi = getattr(self, name), limits.get(name, 1.0)
            if not 0.0 <= v <= hi:
                raise ValueError(f"RawMetrics: {name}={v} outside [0, {hi:g}]")


@dataclass(frozen=True)
class ScoreRecord:
    s_aes: float
    s_img: float
    s_pf: float
    s_src: float

    @property
    def task_score(self) -> float:
        return 0.3 * (self.s_aes + self.s_img + self.s_pf) + 0.1 * self.s_src


def ice_dimensions(raw: RawMetrics) -> ScoreRecord:
    """Map raw metrics onto the four [0, 1] dimensions."""
    return ScoreRecord(
        s_aes=raw.aesthetic / 10.0,
        s_img=raw.imaging / 100.0,
        s_pf=(2.0 * raw.clip_cap + raw.vllm_qa) / 3.0,
        s_src=(raw.clip_src + (1.0 - raw.l1_src)) / 2.0,
    )


def avg_rank(table: dict[str, list], directions: list[str]) -> dict[str, float]:
    """Mean per-metric rank (1 = best) with mid-ranks for ties.

    ``directions`` holds ``'+'`` where higher is better and ``'-'`` where lower is.
    """
    names = list(table)
    if len(names) < 2:
        raise ValueError("avg_rank: need at least two methods")
    if any(d not in "+-" or len(d) != 1 for d in directions):
        raise ValueError(f"avg_rank: directions must be '+' or '-', got {directions}")
    rows = []
    for n in names:
        row = table[n]
        if len(row) != len(directions) or any(v is None or (isinstance(v, float) and np.isnan(v)) for v in row):
            raise ValueError(f"avg_rank: missing cell for {n}")
        rows.append([float(v) for v in row])
    x = np.array(rows)
    ranks = np.stack([rankdata(-x[:, j] if d == "+" else x[:, j], method="average") for j, d in enumerate(directions)], 1)
    return {n: float(r) for n, r in zip(names, ranks.mean(axis=1))}


def read_metric_table(path) -> tuple[list[str], list[str], dict[str, list]]:
    """CSV: header ``method,<metric>...``, a direction row of ``+``/``-``, then one row per method."""
    with open(path, newline="") as fh:
        rows = [r for r in csv.reader(fh) if r]
    if len(rows) < 3:
        raise ValueError(f"{path}: need a header, a direction row and at least one method")
    header, dirs = rows[0][1:], rows[1][1:]
    if len(dirs) != len(header):
        raise ValueError(f"{path}: direction row has {len(dirs)} entries for {len(header)} metrics")
    table = {}
    for r in rows[2:]:
        if len(r) != len(header) + 1:
            raise ValueError(f"{path}: row {r[0]!r} has {len(r) - 1} cells for {len(header)} metrics")
        table[r[0]] = [float(v) if v.strip() else None for v in r[1:]]
    return header, [d.strip() for d in dirs], table
