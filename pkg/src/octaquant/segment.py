"""Tiled inference, binarization and mask clean-up, plus the Otsu baseline."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from . import unet


@dataclass(frozen=True)
class PostProcessConfig:
    binarize_threshold: float = 0.5
    min_cluster_px: int = 30
    connectivity: int = 8
    artifact_radius_px: int = 6

    def __post_init__(self):
        if not 0 < self.binarize_threshold < 1:
            raise ValueError("binarize_threshold must be in (0, 1)")
        if self.min_cluster_px < 1:
            raise ValueError("min_cluster_px must be >= 1")
        if self.connectivity not in (4, 8):
            raise ValueError("connectivity must be 4 or 8")
        if self.artifact_radius_px < 1:
            raise ValueError("artifact_radius_px must be >= 1")


def structure(connectivity: int) -> np.ndarray:
    if connectivity == 8:
        return np.ones((3, 3), bool)
    if connectivity == 4:
        return ndimage.generate_binary_structure(2, 1)
    raise ValueError("connectivity must be 4 or 8")


# --------------------------------------------------------------------------
# inference


def _tile_origins(extent: int, tile: int):
    return list(range(0, extent, tile))


def infer_tiled(weights: unet.ModelWeights, image: np.ndarray, tile=None, batch: int = 4) -> np.ndarray:
    """Vessel probability map for an arbitrarily sized image.

    The image is reflect-padded up to a multiple of ``tile`` (default: the
    whole image rounded up to the network divisor), cut into non-overlapping
    tiles that are segmented independently and stitched back together.
    """
    image = np.asarray(image)
    h, w = image.shape
    d = weights.config.divisor
    if tile is None:
        tile = (-(-h // d) * d, -(-w // d) * d)
    th, tw = (tile, tile) if np.isscalar(tile) else tuple(tile)
    unet.check_extents(weights.config, th, tw)
    ph, pw = -(-h // th) * th, -(-w // tw) * tw
    padded = np.pad(image, ((0, ph - h), (0, pw - w)), mode="reflect" if (ph - h < h and pw - w < w) else "edge")
    out = np.empty((ph, pw), np.float32)
    origins = [(r, c) for r in _tile_origins(ph, th) for c in _tile_origins(pw, tw)]
    for i in range(0, len(origins), batch):
        chunk = origins[i:i + batch]
        stack = np.stack([padded[r:r + th, c:c + tw] for r, c in chunk])
        probs = unet.forward(weights, stack, mode="infer")
        for (r, c), p in zip(chunk, probs):
            out[r:r + th, c:c + tw] = p
    return out[:h, :w]


def seam_discontinuity(prob: np.ndarray, tile) -> float:
    """Mean absolute probability jump across tile seams (NaN if there are none)."""
    th, tw = (tile, tile) if np.isscalar(tile) else tuple(tile)
    jumps = []
    for r in range(th, prob.shape[0], th):
        jumps.append(np.abs(prob[r] - prob[r - 1]))
    for c in range(tw, prob.shape[1], tw):
        jumps.append(np.abs(prob[:, c] - prob[:, c - 1]))
    if not jumps:
        return float("nan")
    return float(np.concatenate(jumps).mean())


# --------------------------------------------------------------------------
# post-processing


def binarize(prob: np.ndarray, threshold: float = 0.5) -> np.ndarray:
    """``prob >= threshold``; a pixel exactly at the threshold counts as vessel."""
    return np.asarray(prob) >= threshold


def remove_small_components(mask: np.ndarray, min_px: int = 30, connectivity: int = 8) -> np.ndarray:
    mask = np.asarray(mask, bool)
    labels, n = ndimage.label(mask, structure=structure(connectivity))
    if n == 0:
        return mask.copy()
    sizes = np.bincount(labels.ravel())
    keep = sizes >= min_px
    keep[0] = False
    return keep[labels]


def postprocess(prob: np.ndarray, config: PostProcessConfig = PostProcessConfig()) -> np.ndarray:
    return remove_small_components(binarize(prob, config.binarize_threshold), config.min_cluster_px,
                                   config.connectivity)


def segment_image(weights, image, config: PostProcessConfig = PostProcessConfig(), tile=None):
    """Probability map and cleaned binary mask for one image."""
    prob = infer_tiled(weights, image, tile)
    return prob, postprocess(prob, config)


# --------------------------------------------------------------------------
# Otsu baseline


def otsu_threshold(image: np.ndarray) -> int:
    """Grey level ``t`` maximizing between-class variance of {< t} vs {>= t}.

    Evaluated in exact integer arithmetic; the smallest maximizing ``t`` wins.
    A constant image returns its single grey level.
    """
    a = np.asarray(image)
    if a.dtype != np.uint8:
        raise ValueError("otsu expects an 8-bit image")
    hist = np.bincount(a.ravel(), minlength=256)
    levels = np.nonzero(hist)[0]
    if len(levels) == 1:
        return int(levels[0])
    n_total = int(hist.sum())
    s_total = int((hist * np.arange(256)).sum())
    best_t, best_num, best_den = None, -1, 1
    n0 = s0 = 0
    for t in range(1, 256):
        n0 += int(hist[t - 1])
        s0 += (t - 1) * int(hist[t - 1])
        n1 = n_total - n0
        if n0 == 0 or n1 == 0:
            continue
        # between-class variance * N^2 = (S0*n1 - S1*n0)^2 / (n0*n1)
        num = (s0 * n1 - (s_total - s0) * n0) ** 2
        den = n0 * n1
        if num * best_den > best_num * den:
            best_t, best_num, best_den = t, num, den
    return int(best_t)


def otsu(image: np.ndarray) -> np.ndarray:
    return np.asarray(image) >= otsu_threshold(image)


# --------------------------------------------------------------------------
# morphology


def disk_offsets(radius: int):
    r = int(radius)
    return [(dr, dc) for dr in range(-r, r + 1) for dc in range(-r, r + 1) if dr * dr + dc * dc <= r * r]


def _shifted(mask, dr, dc, fill):
    h, w = mask.shape
    out = np.full((h, w), fill, bool)
    rs, re = max(dr, 0), h + min(dr, 0)
    cs, ce = max(dc, 0), w + min(dc, 0)
    # out[r, c] = mask[r + dr, c + dc]
    out[rs - dr:re - dr, cs - dc:ce - dc] = mask[rs:re, cs:ce]
    return out


def erode(mask: np.ndarray, radius: int) -> np.ndarray:
    """Binary erosion by a disk; pixels outside the image count as background."""
    mask = np.asarray(mask, bool)
    out = np.ones_like(mask)
    for dr, dc in disk_offsets(radius):
        out &= _shifted(mask, dr, dc, False)
    return out


def dilate(mask: np.ndarray, radius: int) -> np.ndarray:
    mask = np.asarray(mask, bool)
    out = np.zeros_like(mask)
    for dr, dc in disk_offsets(radius):
        out |= _shifted(mask, dr, dc, False)
    return out


def opening(mask: np.ndarray, radius: int) -> np.ndarray:
    return dilate(erode(mask, radius), radius)


def remove_projection_artifacts(mask: np.ndarray, radius: int = 6):
    """Split a vessel mask into (cleaned, artifact) parts.

    The artifact part is the disk opening of the mask: only structures wider
    than about ``2 * radius`` survive it, which isolates projected large
    vessels from capillaries.
    """
    if radius < 1:
        raise ValueError("radius must be >= 1")
    mask = np.asarray(mask, bool)
    artifact = opening(mask, radius)
    return mask & ~artifact, artifact
