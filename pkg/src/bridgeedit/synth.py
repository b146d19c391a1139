"""Seeded local-edit triplets on smooth synthetic scenes.

Every sample holds a source image, a target that differs from it only around
one object, the true change mask, a perturbed coarse mask and a three-token
instruction ``(op, shape, color)``. The target is force-composited onto the
source with a feathered alpha, so pixels farther than three feather sigmas from
the change region are bit-identical between source and target.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import io as bio
from . import layout as lay
from . import masks

OPS = ("add", "remove", "recolor")
SHAPES = ("circle", "square", "triangle")
PALETTE = np.array([
    [0.90, 0.10, 0.10],
    [0.10, 0.75, 0.15],
    [0.15, 0.25, 0.95],
    [0.95, 0.85, 0.10],
    [0.85, 0.15, 0.85],
    [0.10, 0.85, 0.85],
    [0.98, 0.98, 0.98],
    [0.05, 0.05, 0.05],
])
COLOR_NAMES = ("red", "green", "blue", "yellow", "magenta", "cyan", "white", "black")
OP_BASE, SHAPE_BASE, COLOR_BASE, NULL_ID = 0, 3, 6, 14
VOCAB = 15

COMPOSITE_SIGMA = 1.0
MARGIN = 2
MAX_HALF = 5.5
MIN_SIZE = 16  # largest object plus margins


class PlacementError(RuntimeError):
    pass


def instruction_ids(op: str, shape: str, color: int) -> list[int]:
    return [OP_BASE + OPS.index(op), SHAPE_BASE + SHAPES.index(shape), COLOR_BASE + int(color)]


def describe(ids) -> str:
    op, shape, color = (int(i) for i in ids)
    if NULL_ID in (op, shape, color):
        return "<null>"
    return f"{OPS[op - OP_BASE]} {COLOR_NAMES[color - COLOR_BASE]} {SHAPES[shape - SHAPE_BASE]}"


@dataclass
class SceneObject:
    shape: str
    color: int
    center: tuple[float, float]
    half: float

    def mask(self, size: int) -> np.ndarray:
        yy, xx = np.mgrid[0:size, 0:size] + 0.5
        cy, cx = self.center
        dy, dx = yy - cy, xx - cx
        if self.shape == "circle":
            return dy * dy + dx * dx <= self.half * self.half
        if self.shape == "square":
            return (np.abs(dy) <= self.half) & (np.abs(dx) <= self.half)
        # upright triangle inscribed in the square of side 2 * half
        t = (dy + self.half) / (2 * self.half)
        return (t >= 0) & (t <= 1) & (np.abs(dx) <= t * self.half)


@dataclass
class SceneSpec:
    size: int
    amplitudes: np.ndarray
    freqs: np.ndarray
    phases: np.ndarray
    offset: np.ndarray
    noise: np.ndarray
    objects: list = field(default_factory=list)


def random_background(rng: np.random.Generator, size: int) -> SceneSpec:
    """Up to four low-frequency sinusoids per channel plus a small uniform noise floor."""
    k = int(rng.integers(1, 5))
    amplitudes = rng.uniform(0.04, 0.12, size=(3, k))
    freqs = rng.uniform(0.3, 2.0, size=(3, k, 2)) * rng.choice([-1, 1], size=(3, k, 2))
    phases = rng.uniform(0, 2 * np.pi, size=(3, k))
    offset = rng.uniform(0.3, 0.7, size=3)
    noise = rng.uniform(-0.02, 0.02, size=(3, size, size))
    return SceneSpec(size, amplitudes, freqs, phases, offset, noise)


def render_background(spec: SceneSpec) -> np.ndarray:
    s = spec.size
    yy, xx = np.mgrid[0:s, 0:s] / s
    img = np.empty((3, s, s))
    for c in range(3):
        field_ = np.full((s, s), spec.offset[c])
        for a, (fy, fx), ph in zip(spec.amplitudes[c], spec.freqs[c], spec.phases[c]):
            field_ += a * np.sin(2 * np.pi * (fy * yy + fx * xx) + ph)
        img[c] = field_
    return np.clip(img + spec.noise, 0.0, 1.0)


def paint(img: np.ndarray, obj: SceneObject) -> np.ndarray:
    out = img.copy()
    m = obj.mask(img.shape[-1])
    out[:, m] = PALETTE[obj.color][:, None]
    return out


def place_object(rng: np.random.Generator, size: int, avoid: np.ndarray | None = None, tries: int = 16) -> SceneObject:
    """Random object fully inside the image with a MARGIN-pixel border, clear of ``avoid``."""
    for _ in range(tries):
        shape = SHAPES[int(rng.integers(len(SHAPES)))]
        half = float(rng.uniform(3.0, MAX_HALF))
        lo, hi = MARGIN + half, size - MARGIN - half
        obj = SceneObject(shape, int(rng.integers(len(PALETTE))), (float(rng.uniform(lo, hi)), float(rng.uniform(lo, hi))), half)
        m = obj.mask(size)
        rows, cols = np.flatnonzero(m.any(1)), np.flatnonzero(m.any(0))
        inside = rows.size and rows[0] >= MARGIN and cols[0] >= MARGIN and rows[-1] < size - MARGIN and cols[-1] < size - MARGIN
        if inside and (avoid is None or not (masks.dilate(m, 3) & avoid).any()):
            return obj
    raise PlacementError(f"could not place an object after {tries} tries")


# ---------------------------------------------------------------- samples


@dataclass
class EditSample:
    id: str
    source: np.ndarray
    target: np.ndarray
    mask: np.ndarray
    instruction: list
    op: str
    shape: str
    color: int
    seed: int
    true_mask: np.ndarray | None = None

    def bbox(self, patch: int = 2) -> lay.BBox:
        return lay.mask_to_bbox(self.mask, patch)


DEFAULT_PERTURB = masks.PerturbParams(dilate_min=1, dilate_max=2, erode_min=0, erode_max=1, jitter=1, feather_sigma=1.0)


def gen_triplet(seed: int, op: str, size: int = 32, patch: int = 2, perturb: masks.PerturbParams = DEFAULT_PERTURB,
                sample_id: str | None = None, tries: int = 16) -> EditSample:
    """One deterministic edit triplet.

    Candidates whose in-mask mean absolute change is at most 0.05, or whose
    coarse mask equals the true mask, are redrawn (up to ``tries`` times).
    """
    if op not in OPS:
        raise ValueError(f"unknown edit op {op!r}")
    if size % patch:
        raise ValueError(f"patch {patch} does not divide image size {size}")
    if size < MIN_SIZE:
        raise ValueError(f"image size {size} is below the minimum {MIN_SIZE} for the object sizes used")
    rng = np.random.default_rng(seed)
    for _ in range(tries):
        spec = random_background(rng, size)
        bg = render_background(spec)
        obj = place_object(rng, size)
        true = obj.mask(size)
        base = bg
        if rng.random() < 0.5:
            # an untouched second object; skipped when it does not fit
            try:
                base = paint(bg, place_object(rng, size, avoid=true))
            except PlacementError:
                pass
        if op == "add":
            source, edited, color = base, paint(base, obj), obj.color
        elif op == "remove":
            source, edited, color = paint(base, obj), base, obj.color
        else:
            new = int((obj.color + rng.integers(1, len(PALETTE))) % len(PALETTE))
            source = paint(base, obj)
            edited = paint(base, SceneObject(obj.shape, new, obj.center, obj.half))
            color = new
        source = bio.quantize(source)
        target = bio.quantize(masks.forced_composite(source, edited, true, COMPOSITE_SIGMA))
        if np.abs(target - source)[:, true].mean() <= 0.05:
            continue
        coarse = masks.perturb_mask(true, perturb, rng)
        if not perturb.is_zero and np.array_equal(coarse > 0, true):
            continue
        return EditSample(
            id=sample_id or f"s{seed}",
            source=source,
            target=target,
            mask=coarse,
            instruction=instruction_ids(op, obj.shape, color),
            op=op,
            shape=obj.shape,
            color=color,
            seed=int(seed),
            true_mask=true.astype(np.float64),
        )
    raise PlacementError(f"seed {seed}: no valid {op} sample after {tries} candidates")


def sample_seeds(seed: int, n: int) -> np.ndarray:
    return np.random.SeedSequence(seed).generate_state(n).astype(np.int64)


def split_indices(seed: int, n: int, ratio: float) -> tuple[list[int], list[int]]:
    if n < 2:
        raise ValueError("need at least two samples to split")
    if not 0.0 < ratio < 1.0:
        raise ValueError(f"split ratio must lie in (0, 1), got {ratio}")
    perm = np.random.default_rng(seed).permutation(n)
    n_train = min(n - 1, max(1, int(round(n * ratio))))
    return sorted(int(i) for i in perm[:n_train]), sorted(int(i) for i in perm[n_train:])


def gen_samples(seed: int, n: int, size: int = 32, patch: int = 2) -> list[EditSample]:
    """``n`` samples with ops assigned round-robin (add, remove, recolor, ...)."""
    return [gen_triplet(int(s), OPS[i % 3], size, patch, sample_id=f"{i:05d}") for i, s in enumerate(sample_seeds(seed, n))]


MANIFEST_FIELDS = ["id", "source", "target", "mask", "op", "shape", "color", "seed", "instruction", "true_mask"]


def write_sample(root: Path, s: EditSample) -> dict:
    img = root / "images"
    paths = {
        "source": f"images/{s.id}_src.ppm",
        "target": f"images/{s.id}_tgt.ppm",
        "mask": f"images/{s.id}_mask.pgm",
        "true_mask": f"images/{s.id}_true.pgm",
    }
    img.mkdir(exist_ok=True)
    bio.write_ppm(root / paths["source"], s.source)
    bio.write_ppm(root / paths["target"], s.target)
    bio.write_pgm(root / paths["mask"], s.mask)
    bio.write_pgm(root / paths["true_mask"], s.true_mask)
    return {"id": s.id, **paths, "op": s.op, "shape": s.shape, "color": COLOR_NAMES[s.color], "seed": s.seed,
            "instruction": " ".join(map(str, s.instruction))}


def gen_dataset(seed: int, n: int = 576, ratio: float = 8 / 9, out=None, size: int = 32, patch: int = 2):
    """Generate, split and optionally write a dataset; returns ``(train, test)`` sample lists."""
    samples = gen_samples(seed, n, size, patch)
    tr, te = split_indices(seed, n, ratio)
    train, test = [samples[i] for i in tr], [samples[i] for i in te]
    if out is not None:
        with bio.atomic_dir(out) as tmp:
            for name, part in (("train", train), ("test", test)):
                rows = [write_sample(tmp, s) for s in part]
                with open(tmp / f"{name}.csv", "w", newline="") as fh:
                    w = csv.DictWriter(fh, fieldnames=MANIFEST_FIELDS)
                    w.writeheader()
                    w.writerows(rows)
    return train, test


def load_manifest(path) -> list[EditSample]:
    path = Path(path)
    root = path.parent
    out = []
    with open(path, newline="") as fh:
        for row in csv.DictReader(fh):
            missing = [k for k in ("id", "source", "target", "mask", "op", "instruction") if not row.get(k)]
            if missing:
                raise ValueError(f"{path}: row {row.get('id')!r} lacks {missing}")
            ids = [int(x) for x in row["instruction"].split()]
            true = bio.read_pgm(root / row["true_mask"]) if row.get("true_mask") else None
            out.append(EditSample(
                id=row["id"],
                source=bio.read_ppm(root / row["source"]),
                target=bio.read_ppm(root / row["target"]),
                mask=bio.read_pgm(root / row["mask"]),
                instruction=ids,
                op=row["op"],
                shape=row.get("shape", ""),
                color=COLOR_NAMES.index(row["color"]) if row.get("color") in COLOR_NAMES else -1,
                seed=int(row.get("seed") or 0),
                true_mask=true,
            ))
    return out
