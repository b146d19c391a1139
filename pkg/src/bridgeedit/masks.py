"""Coarse-mask manufacture and curation.

Morphology uses the Chebyshev ball (a ``(2r+1) x (2r+1)`` square). Pixels
outside the image count as background for dilation and as foreground for
erosion, which makes ``dilate(m, r) == ~erode(~m, r)`` hold exactly at the
border.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from .layout import _as_2d


def _binary(mask) -> np.ndarray:
    m = _as_2d(mask)
    if not np.all((m == 0) | (m == 1)):
        raise ValueError("mask must be binary (values 0 or 1)")
    return m.astype(bool)


def dilate(mask, r: int) -> np.ndarray:
    m = _binary(mask)
    if r < 0:
        raise ValueError(f"dilate: radius must be >= 0, got {r}")
    if r == 0:
        return m.copy()
    return ndimage.maximum_filter(m, size=2 * r + 1, mode="constant", cval=0)


def erode(mask, r: int) -> np.ndarray:
    m = _binary(mask)
    if r < 0:
        raise ValueError(f"erode: radius must be >= 0, got {r}")
    if r == 0:
        return m.copy()
    return ndimage.minimum_filter(m, size=2 * r + 1, mode="constant", cval=1)


def gaussian_disk(sigma: float) -> np.ndarray:
    """Normalised Gaussian kernel truncated to the Euclidean disk of radius 3 sigma."""
    rad = int(np.floor(3 * sigma))
    yy, xx = np.mgrid[-rad : rad + 1, -rad : rad + 1]
    d2 = (yy * yy + xx * xx).astype(np.float64)
    k = np.exp(-d2 / (2 * sigma * sigma))
    k[d2 > (3 * sigma) ** 2] = 0.0
    return k / k.sum()


def feather(mask, sigma: float) -> np.ndarray:
    """Soft alpha in [0, 1]; exactly 0 farther than 3 sigma from every mask pixel."""
    m = _as_2d(mask).astype(np.float64)
    if sigma < 0:
        raise ValueError(f"feather: sigma must be >= 0, got {sigma}")
    if sigma == 0:
        return m.copy()
    # edge replication never brings a mask pixel closer than its in-image copy
    a = ndimage.convolve(m, gaussian_disk(sigma), mode="nearest")
    return np.clip(a, 0.0, 1.0)


# ---------------------------------------------------------------- perturbation


@dataclass(frozen=True)
class PerturbParams:
    dilate_min: int = 1
    dilate_max: int = 3
    erode_min: int = 0
    erode_max: int = 1
    jitter: int = 1
    feather_sigma: float = 1.0
    seed: int = 0

    def __post_init__(self):
        if min(self.dilate_min, self.dilate_max, self.erode_min, self.erode_max, self.jitter) < 0:
            raise ValueError("perturbation radii must be >= 0")
        if self.dilate_min > self.dilate_max or self.erode_min > self.erode_max:
            raise ValueError("perturbation ranges need min <= max")
        if self.feather_sigma < 0:
            raise ValueError("feather_sigma must be >= 0")

    @property
    def is_zero(self) -> bool:
        return self.dilate_max == 0 and self.erode_max == 0 and self.jitter == 0 and self.feather_sigma == 0

    def halved(self) -> "PerturbParams":
        return PerturbParams(self.dilate_min // 2, self.dilate_max // 2, self.erode_min // 2, self.erode_max // 2,
                             self.jitter // 2, self.feather_sigma / 2, self.seed)


class PerturbError(ValueError):
    pass


def _perturb_once(m: np.ndarray, core: np.ndarray, p: PerturbParams, rng: np.random.Generator) -> np.ndarray:
    out = dilate(m, int(rng.integers(p.dilate_min, p.dilate_max + 1)))
    out = erode(out, int(rng.integers(p.erode_min, p.erode_max + 1)))
    if p.jitter:
        band = dilate(out, p.jitter) & ~erode(out, p.jitter)
        flips = band & (rng.random(out.shape) < 0.5)
        out = out ^ flips
    if p.feather_sigma:
        out = feather(out, p.feather_sigma) >= 0.5
    return out | core


def perturb_mask(mask, params: PerturbParams, rng: np.random.Generator | None = None) -> np.ndarray:
    """Coarse hint around a true mask: random dilation and erosion, boundary flips, smoothing.

    The result always contains ``erode(mask, 1)``. An empty result is retried
    with halved magnitudes, at most 8 attempts in total.
    """
    m = _binary(mask)
    if not m.any():
        raise PerturbError("perturb_mask: mask is empty")
    rng = np.random.default_rng(params.seed) if rng is None else rng
    core = erode(m, 1)
    p = params
    for _ in range(8):
        out = _perturb_once(m, core, p, rng)
        if out.any():
            return out.astype(np.float64)
        p = p.halved()
    raise PerturbError("perturb_mask: perturbation emptied the mask after 8 attempts")


# ---------------------------------------------------------------- compositing


def forced_composite(source: np.ndarray, target: np.ndarray, mask, sigma: float) -> np.ndarray:
    """``a * target + (1 - a) * source`` with ``a`` the feathered mask.

    Evaluated as ``source + a (target - source)`` so that ``a == 0`` and
    ``target == source`` return the source bit-exactly; ``a == 1`` returns the target.
    """
    if source.shape != target.shape:
        raise ValueError(f"forced_composite: shapes {source.shape} and {target.shape} differ")
    a = feather(_binary(mask), sigma)
    out = source + a * (target - source)
    return np.where(a == 1.0, target, out)


def gradient_magnitude(grid: np.ndarray) -> np.ndarray:
    """Per-channel central-difference gradient magnitude (one-sided at the border)."""
    g = np.asarray(grid, dtype=np.float64)
    gy, gx = np.gradient(g, axis=(-2, -1))
    return np.sqrt(gy * gy + gx * gx)


def seam_band(mask, width: int) -> np.ndarray:
    if width < 1:
        raise ValueError(f"seam band width must be >= 1, got {width}")
    m = _binary(mask)
    return dilate(m, width) & ~erode(m, width)


def seam_score(composited: np.ndarray, source: np.ndarray, mask, width: int = 2) -> float:
    """Mean |grad mag(composited) - grad mag(source)| over the band around the mask boundary."""
    band = seam_band(mask, width)
    if not band.any():
        raise ValueError("seam_score: boundary band is empty")
    diff = np.abs(gradient_magnitude(composited) - gradient_magnitude(source))
    return float(diff[..., band].mean())


# ---------------------------------------------------------------- audit and ranking


@dataclass(frozen=True)
class AuditThresholds:
    d_obj_min: float = 0.25
    d_bg_max: float = 0.6
    confidence_min: float = 0.95

    def __post_init__(self):
        for v in (self.d_obj_min, self.d_bg_max, self.confidence_min):
            if not 0.0 <= v <= 1.0:
                raise ValueError(f"audit thresholds must lie in [0, 1], got {v}")


def dual_audit_filter(d_obj: float, d_bg: float, th: AuditThresholds = AuditThresholds(),
                      confidence: float | None = None) -> tuple[bool, str]:
    """Keep iff ``d_obj > d_obj_min`` and ``d_bg < d_bg_max`` (both strict).

    Returns ``(keep, reason)``; the reason is empty for kept records.
    """
    for name, v in (("d_obj", d_obj), ("d_bg", d_bg)):
        if not 0.0 <= v <= 1.0:
            raise ValueError(f"dual_audit_filter: {name}={v} outside [0, 1]")
    if confidence is not None and confidence < th.confidence_min:
        return False, "low_confidence"
    if not d_obj > th.d_obj_min:
        return False, "object_unchanged"
    if not d_bg < th.d_bg_max:
        return False, "background_drift"
    return True, ""


@dataclass
class Ranking:
    order: list[int]
    scores: dict[int, float]
    top: list[int]
    rest: list[int]
    dropped: list[int]
    warning: bool = False


def _minmax(x: np.ndarray) -> np.ndarray:
    span = x.max() - x.min()
    return np.zeros_like(x) if span == 0 else (x - x.min()) / span


def rank_candidates(records, k: int, bg_prefilter: float = 0.4, seam_weight: float = 0.5) -> Ranking:
    """Rank ``(seam, d_bg)`` records by a composite of min-max normalised terms.

    Candidates with ``d_bg >= bg_prefilter`` are dropped first. The score is
    ``seam_weight * (1 - seam_n) + (1 - seam_weight) * (1 - bg_n)``; ties keep
    input order. When fewer than ``k`` survive, all survivors are returned
    with ``warning`` set.
    """
    if not len(records):
        raise ValueError("rank_candidates: no candidates")
    recs = np.asarray(records, dtype=np.float64).reshape(-1, 2)
    keep = np.flatnonzero(recs[:, 1] < bg_prefilter)
    dropped = [int(i) for i in np.flatnonzero(recs[:, 1] >= bg_prefilter)]
    scores = {}
    if keep.size:
        seam_n = _minmax(recs[keep, 0])
        bg_n = _minmax(recs[keep, 1])
        comp = seam_weight * (1 - seam_n) + (1 - seam_weight) * (1 - bg_n)
        scores = {int(i): float(c) for i, c in zip(keep, comp)}
    order = sorted(scores, key=lambda i: (-scores[i], i))
    return Ranking(order, scores, order[:k], order[k:], dropped, warning=k > len(order))
