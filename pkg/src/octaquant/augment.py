"""Training-set augmentation: 90 degree rotations, contrast remaps and strip shuffles.

Geometric operations are always applied to the image and its mask together;
intensity operations touch the image only.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

CONTRAST_OPS = ("clahe", "percentile_remap")


def rotate90(image: np.ndarray, k: int = 1) -> np.ndarray:
    """Clockwise rotation by ``k`` quarter turns; for k=1 pixel (r, c) of an HxW image moves to (c, H-1-r)."""
    return np.ascontiguousarray(np.rot90(image, -(k % 4)))


# --------------------------------------------------------------------------
# contrast


def _tile_luts(padded: np.ndarray, ty: int, tx: int, clip_limit: float) -> np.ndarray:
    h, w = padded.shape
    th, tw = h // ty, w // tx
    npx = th * tw
    blocks = padded.reshape(ty, th, tx, tw).transpose(0, 2, 1, 3).reshape(ty, tx, npx)
    hist = np.zeros((ty, tx, 256), np.float64)
    for i in range(ty):
        for j in range(tx):
            hist[i, j] = np.bincount(blocks[i, j], minlength=256)
    if np.isfinite(clip_limit):
        limit = max(clip_limit * npx / 256.0, 1.0)
        excess = np.maximum(hist - limit, 0).sum(axis=2, keepdims=True)
        hist = np.minimum(hist, limit) + excess / 256.0
    cdf = np.cumsum(hist, axis=2)
    # round half up, the usual histogram-equalization convention
    return np.clip(np.floor(cdf * (255.0 / npx) + 0.5), 0, 255)


def _interp_axis(n: int, tiles: int):
    size = n // tiles
    pos = (np.arange(n) + 0.5) / size - 0.5
    lo = np.clip(np.floor(pos), 0, tiles - 1).astype(int)
    hi = np.minimum(lo + 1, tiles - 1)
    wgt = np.clip(pos - lo, 0, 1)
    return lo, hi, wgt


def clahe(image: np.ndarray, tiles=(8, 8), clip_limit: float = 2.0) -> np.ndarray:
    """Contrast-limited adaptive histogram equalization of an 8-bit image.

    ``tiles`` is (tiles along x, tiles along y). Each tile's histogram is
    clipped at ``clip_limit`` times the uniform bin height, the excess is
    spread evenly over all bins, and the tile mappings are blended
    bilinearly between tile centres. Images not divisible by the tile grid
    are reflect-padded and cropped back.
    """
    img = np.asarray(image)
    if img.dtype != np.uint8:
        raise ValueError("clahe expects an 8-bit image")
    if clip_limit < 1:
        raise ValueError("clip_limit must be >= 1")
    tx, ty = tiles
    h, w = img.shape
    ph, pw = -(-h // ty) * ty, -(-w // tx) * tx
    padded = np.pad(img, ((0, ph - h), (0, pw - w)), mode="reflect" if (ph - h < h and pw - w < w) else "edge")
    luts = _tile_luts(padded, ty, tx, clip_limit)
    r0, r1, wr = _interp_axis(ph, ty)
    c0, c1, wc = _interp_axis(pw, tx)
    v = padded
    R0, R1, WR = r0[:, None], r1[:, None], wr[:, None]
    C0, C1, WC = c0[None, :], c1[None, :], wc[None, :]
    out = ((1 - WR) * ((1 - WC) * luts[R0, C0, v] + WC * luts[R0, C1, v])
           + WR * ((1 - WC) * luts[R1, C0, v] + WC * luts[R1, C1, v]))
    return np.clip(np.rint(out), 0, 255).astype(np.uint8)[:h, :w]


def percentile_remap(image: np.ndarray, low: float = 1.0, high: float = 99.0) -> np.ndarray:
    """Linear stretch sending the ``low`` percentile to 0 and ``high`` to 255, clamped."""
    if not low < high:
        raise ValueError("low percentile must be below high percentile")
    img = np.asarray(image)
    lo, hi = np.percentile(img, [low, high])
    if hi <= lo:
        return img.copy()
    out = (img.astype(np.float64) - lo) * (255.0 / (hi - lo))
    return np.clip(np.rint(out), 0, 255).astype(np.uint8)


# --------------------------------------------------------------------------
# motion


def strip_bounds(height: int, count: int, rng: np.random.Generator) -> list:
    count = int(np.clip(count, 1, height))
    cuts = np.sort(rng.choice(np.arange(1, height), size=count - 1, replace=False)) if count > 1 else []
    edges = [0, *[int(c) for c in cuts], height]
    return list(zip(edges[:-1], edges[1:]))


def strip_shuffle(image, mask, seed=None, strip_count_range=(4, 12), strip_count: int | None = None):
    """Cut rows into random horizontal strips and reorder them, identically for image and mask."""
    image, mask = np.asarray(image), np.asarray(mask)
    if image.shape[:2] != mask.shape[:2]:
        raise ValueError(f"image {image.shape} and mask {mask.shape} differ in extent")
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    if strip_count is None:
        strip_count = int(rng.integers(strip_count_range[0], strip_count_range[1] + 1))
    strips = strip_bounds(image.shape[0], strip_count, rng)
    order = rng.permutation(len(strips))
    rows = np.concatenate([np.arange(*strips[i]) for i in order])
    return image[rows], mask[rows]


# --------------------------------------------------------------------------
# plans


@dataclass(frozen=True)
class AugmentPlan:
    seed: int = 0
    plain_rotations: int = 3
    contrast_rotations: int = 5
    strip_count_range: tuple = (4, 12)
    contrast_ops: tuple = CONTRAST_OPS
    shuffle_plain: bool = True
    shuffle_contrast: bool = False
    clahe_tiles: tuple = (8, 8)
    clahe_clip: float = 2.0

    def __post_init__(self):
        bad = [op for op in self.contrast_ops if op not in CONTRAST_OPS]
        if bad:
            raise ValueError(f"unknown contrast ops {bad}")
        if self.contrast_rotations and not self.contrast_ops:
            raise ValueError("contrast_rotations needs at least one contrast op")
        lo, hi = self.strip_count_range
        if not 1 <= lo <= hi:
            raise ValueError("strip_count_range must satisfy 1 <= min <= max")

    def expansion_factor(self) -> int:
        n = 1 + self.plain_rotations + self.contrast_rotations
        if self.shuffle_plain:
            n += 1 + self.plain_rotations
        if self.shuffle_contrast:
            n += self.contrast_rotations
        return n


def _contrast(op: str, image, plan: AugmentPlan):
    if op == "clahe":
        return clahe(image, plan.clahe_tiles, plan.clahe_clip)
    return percentile_remap(image)


def expand(pair, plan: AugmentPlan = AugmentPlan(), seed: int | None = None):
    """Augmented copies of one (image, mask) pair, original first.

    Order: original, ``plain_rotations`` plain quarter turns, then
    ``contrast_rotations`` copies at cycling orientations 1, 2, 3, 0, ...
    each with the next contrast op, then one strip-shuffled variant per
    plain orientation (and per contrast copy if ``shuffle_contrast``).
    """
    image, mask = (np.asarray(a) for a in pair)
    rng = np.random.default_rng([plan.seed if seed is None else seed])
    plain = [(rotate90(image, k), rotate90(mask, k)) for k in range(plan.plain_rotations + 1)]
    contrast = []
    for i in range(plan.contrast_rotations):
        k = (i + 1) % 4
        op = plan.contrast_ops[i % len(plan.contrast_ops)]
        contrast.append((_contrast(op, rotate90(image, k), plan), rotate90(mask, k)))
    out = list(plain) + contrast
    sources = (plain if plan.shuffle_plain else []) + (contrast if plan.shuffle_contrast else [])
    for img, msk in sources:
        out.append(strip_shuffle(img, msk, rng, plan.strip_count_range))
    return out
