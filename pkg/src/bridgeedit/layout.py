"""Dual-path token layout: bbox support, Subject Path allocation, coordinates.

Sequence order is ``[text | context | main | subject]``. Coordinates are
``(frame, row, col)`` triples: main tokens live on frame 0, subject tokens on
frame 1 with a bbox-local origin, context (clean source) tokens on frame 2 and
instruction tokens on frames ``3, 4, ...`` with zero spatial coordinates.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import tensor as T

MAIN_FRAME, SUBJECT_FRAME, CONTEXT_FRAME, TEXT_FRAME = 0, 1, 2, 3

TEXT, CONTEXT, MAIN, SUBJECT = "text", "context", "main", "subject"


class EmptyMaskError(ValueError):
    """The mask has no nonzero pixel, so no edit support can be derived."""


class LayoutError(ValueError):
    pass


@dataclass(frozen=True)
class BBox:
    """Half-open pixel box ``[top, bottom) x [left, right)``."""

    top: int
    left: int
    bottom: int
    right: int

    @property
    def height(self) -> int:
        return self.bottom - self.top

    @property
    def width(self) -> int:
        return self.right - self.left

    @property
    def area(self) -> int:
        return self.height * self.width

    def as_tuple(self) -> tuple[int, int, int, int]:
        return (self.top, self.left, self.bottom, self.right)

    def contains_mask(self, mask: np.ndarray) -> bool:
        m = _as_2d(mask) > 0
        inside = np.zeros_like(m)
        inside[self.top : self.bottom, self.left : self.right] = True
        return not np.any(m & ~inside)


def _as_2d(mask: np.ndarray) -> np.ndarray:
    m = np.asarray(mask)
    if m.ndim == 3:
        if m.shape[0] != 1:
            raise ValueError(f"mask must have one channel, got shape {m.shape}")
        m = m[0]
    if m.ndim != 2:
        raise ValueError(f"mask must be 2-D, got shape {m.shape}")
    return m


def mask_to_bbox(mask: np.ndarray, patch: int) -> BBox:
    """Tight box around the nonzero pixels, rounded outward to patch multiples."""
    m = _as_2d(mask)
    if not np.all((m == 0) | (m == 1)):
        raise ValueError("mask_to_bbox: mask must be binary (values 0 or 1)")
    h, w = m.shape
    if h % patch or w % patch:
        raise ValueError(f"mask_to_bbox: patch {patch} does not divide image {h}x{w}")
    rows = np.flatnonzero(m.any(axis=1))
    cols = np.flatnonzero(m.any(axis=0))
    if rows.size == 0:
        raise EmptyMaskError("mask_to_bbox: mask is empty")
    top = (rows[0] // patch) * patch
    left = (cols[0] // patch) * patch
    bottom = -(-(rows[-1] + 1) // patch) * patch
    right = -(-(cols[-1] + 1) // patch) * patch
    return BBox(int(top), int(left), int(bottom), int(right))


@dataclass
class PathLayout:
    image_hw: tuple[int, int]
    patch: int
    bbox: BBox
    main_grid: tuple[int, int]
    sub_grid: tuple[int, int]
    main_coords: np.ndarray
    pe_base: np.ndarray
    pe_swap: np.ndarray

    @property
    def n_main(self) -> int:
        return self.main_grid[0] * self.main_grid[1]

    @property
    def n_sub(self) -> int:
        return self.sub_grid[0] * self.sub_grid[1]

    @property
    def n_visual(self) -> int:
        return self.n_main + self.n_sub

    @property
    def subject_range(self) -> range:
        """Subject token indices within the visual sequence ``[main; subject]``."""
        return range(self.n_main, self.n_main + self.n_sub)

    def bbox_token_mask(self) -> np.ndarray:
        """Boolean per main token: inside the bbox support."""
        p = self.patch
        m = np.zeros(self.main_grid, dtype=bool)
        m[self.bbox.top // p : self.bbox.bottom // p, self.bbox.left // p : self.bbox.right // p] = True
        return m.reshape(-1)


def build_layout(image_hw, bbox: BBox, patch: int, with_subject: bool = True) -> PathLayout:
    h, w = image_hw
    if h % patch or w % patch:
        raise LayoutError(f"build_layout: patch {patch} does not divide image {h}x{w}")
    if any(v % patch for v in bbox.as_tuple()):
        raise LayoutError(f"build_layout: bbox {bbox.as_tuple()} not aligned to patch {patch}")
    if not (0 <= bbox.top < bbox.bottom <= h and 0 <= bbox.left < bbox.right <= w):
        raise LayoutError(f"build_layout: bbox {bbox.as_tuple()} outside image {h}x{w}")
    gh, gw = h // patch, w // patch
    rr, cc = np.meshgrid(np.arange(gh), np.arange(gw), indexing="ij")
    main = np.stack([np.full(gh * gw, MAIN_FRAME), rr.ravel(), cc.ravel()], axis=1)
    if with_subject:
        sh, sw = bbox.height // patch, bbox.width // patch
    else:
        sh, sw = 0, 0
    sr, sc = np.meshgrid(np.arange(sh), np.arange(sw), indexing="ij")
    sr, sc = sr.ravel(), sc.ravel()
    base = np.stack([np.full(sr.size, SUBJECT_FRAME), sr, sc], axis=1)
    swap = np.stack([np.full(sr.size, MAIN_FRAME), bbox.top // patch + sr, bbox.left // patch + sc], axis=1)
    return PathLayout(
        image_hw=(h, w),
        patch=patch,
        bbox=bbox,
        main_grid=(gh, gw),
        sub_grid=(sh, sw),
        main_coords=main.astype(np.int64),
        pe_base=base.astype(np.int64).reshape(-1, 3),
        pe_swap=swap.astype(np.int64).reshape(-1, 3),
    )


# ---------------------------------------------------------------- patches


def patchify(grid: np.ndarray, patch: int) -> np.ndarray:
    """``(C, H, W)`` pixels in [0, 1] to row-major tokens in [-1, 1].

    Each token holds its ``patch x patch x C`` block ordered ``(py, px, c)``.
    """
    c, h, w = grid.shape
    if h % patch or w % patch:
        raise ValueError(f"patchify: patch {patch} does not divide {h}x{w}")
    x = grid.reshape(c, h // patch, patch, w // patch, patch).transpose(1, 3, 2, 4, 0)
    return x.reshape((h // patch) * (w // patch), patch * patch * c) * 2.0 - 1.0


def depatchify(tokens: np.ndarray, grid_hw: tuple[int, int], patch: int, channels: int = 3) -> np.ndarray:
    gh, gw = grid_hw
    x = np.asarray(tokens).reshape(gh, gw, patch, patch, channels).transpose(4, 0, 2, 1, 3)
    return (x.reshape(channels, gh * patch, gw * patch) + 1.0) * 0.5


def crop(grid: np.ndarray, bbox: BBox) -> np.ndarray:
    h, w = grid.shape[-2:]
    if not (0 <= bbox.top < bbox.bottom <= h and 0 <= bbox.left < bbox.right <= w):
        raise LayoutError(f"crop: bbox {bbox.as_tuple()} outside image {h}x{w}")
    return grid[..., bbox.top : bbox.bottom, bbox.left : bbox.right]


def token_support(layout: PathLayout, pixel_mask: np.ndarray | None = None, channels: int = 3) -> np.ndarray:
    """Main Path blend support at token-entry resolution.

    Without ``pixel_mask`` every entry of a token inside the bbox is 1. With a
    pixel mask each token entry takes the value of the pixel it encodes.
    """
    p = layout.patch
    if pixel_mask is None:
        inside = layout.bbox_token_mask().astype(np.float64)
        return np.repeat(inside[:, None], p * p * channels, axis=1)
    m = _as_2d(pixel_mask).astype(np.float64)
    if m.shape != tuple(layout.image_hw):
        raise ValueError(f"token_support: mask {m.shape} does not match image {layout.image_hw}")
    return (patchify(np.repeat(m[None], channels, axis=0), p) + 1.0) * 0.5


# ---------------------------------------------------------------- sequences


@dataclass
class TokenSequence:
    features: T.Tensor
    coords: np.ndarray
    labels: np.ndarray
    attn_mask: np.ndarray | None = None
    segments: dict = field(default_factory=dict)

    def __post_init__(self):
        n = self.features.shape[0]
        if self.coords.shape != (n, 3) or self.labels.shape != (n,):
            raise LayoutError(
                f"TokenSequence: {n} tokens but coords {self.coords.shape}, labels {self.labels.shape}"
            )
        if self.attn_mask is not None and self.attn_mask.shape != (n, n):
            raise LayoutError(f"TokenSequence: attention mask {self.attn_mask.shape} is not {n}x{n}")

    def __len__(self) -> int:
        return self.features.shape[0]


def text_coords(n_text: int) -> np.ndarray:
    return np.stack([TEXT_FRAME + np.arange(n_text), np.zeros(n_text), np.zeros(n_text)], axis=1).astype(np.int64)


def context_coords(layout: PathLayout, context_patch: int | None = None) -> np.ndarray:
    """Coordinates of the clean-source tokens on the context frame.

    A coarser ``context_patch`` (a multiple of the layout patch) yields fewer
    tokens, placed at the main-grid position of their top-left block so that
    row and col stay in main-grid units.
    """
    cp = layout.patch if context_patch is None else context_patch
    if cp % layout.patch:
        raise LayoutError(f"context patch {cp} is not a multiple of patch {layout.patch}")
    k = cp // layout.patch
    h, w = layout.image_hw
    rr, cc = np.meshgrid(np.arange(h // cp) * k, np.arange(w // cp) * k, indexing="ij")
    return np.stack([np.full(rr.size, CONTEXT_FRAME), rr.ravel(), cc.ravel()], axis=1).astype(np.int64)


def assemble_sequence(text, context, main, subject, layout: PathLayout, diagnostic_mask: bool = False,
                      context_patch: int | None = None) -> TokenSequence:
    """Concatenate the four segments in ``[text | context | main | subject]`` order.

    Inputs are tensors of shape ``(n_segment, D)``; context tokens come from
    patches of side ``context_patch`` (the layout patch by default). With ``diagnostic_mask``
    a cross-region mask forbids attention between Main and Subject tokens in
    both directions; otherwise attention is fully bidirectional.
    """
    parts = [T._as_tensor(x) for x in (text, context, main, subject)]
    n_text, n_ctx, n_main, n_sub = (p.shape[0] for p in parts)
    ctx_coords = context_coords(layout, context_patch)
    if n_ctx != len(ctx_coords) or n_main != layout.n_main or n_sub != layout.n_sub:
        raise LayoutError(
            f"assemble_sequence: counts (context {n_ctx}, main {n_main}, subject {n_sub}) do not match "
            f"layout (context {len(ctx_coords)}, main {layout.n_main}, subject {layout.n_sub})"
        )
    segs = [(TEXT, n_text), (CONTEXT, n_ctx), (MAIN, n_main), (SUBJECT, n_sub)]
    present = [p for p, (_, n) in zip(parts, segs) if n > 0]
    feats = T.concat(present, axis=0)
    coords = np.concatenate([text_coords(n_text), ctx_coords, layout.main_coords, layout.pe_base])
    labels = np.concatenate([np.full(n, name, dtype=object) for name, n in segs])
    bounds, start = {}, 0
    for name, n in segs:
        bounds[name] = (start, start + n)
        start += n
    mask = None
    if diagnostic_mask and n_sub:
        total = start
        mask = np.zeros((total, total))
        (m0, m1), (s0, s1) = bounds[MAIN], bounds[SUBJECT]
        mask[m0:m1, s0:s1] = -np.inf
        mask[s0:s1, m0:m1] = -np.inf
    return TokenSequence(feats, coords, labels, mask, bounds)


def disassemble(seq: TokenSequence) -> dict[str, np.ndarray]:
    return {name: seq.features.data[a:b] for name, (a, b) in seq.segments.items()}
