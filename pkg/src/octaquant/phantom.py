"""Synthetic OCT-A phantoms with known vessel masks.

SCP-style truth is a set of recursively bifurcating trees whose calibre
shrinks with branching depth, laid over a sparse capillary mesh. DVC-style
truth is a dense lobular mesh (relaxed Voronoi cell boundaries) of uniform
calibre, optionally crossed by thick horizontal projection bands that are
rendered into the images but are *not* part of the truth mask.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, replace

import numpy as np
from scipy import ndimage
from scipy.spatial import cKDTree

SCP = "SCP"
DVC = "DVC"
# default log-density spread of the DVC capillary mesh
SPREAD_DVC = 0.8
# peak flow signal of projection bands above the background floor
BAND_GAIN = 150.0


@dataclass(frozen=True)
class PhantomSpec:
    plexus_style: str = SCP
    size: tuple = (512, 512)
    seed: int = 0
    vessel_density_target: float = 0.30
    speckle_snr: float | None = None
    frames_to_average: int = 10
    faz_radius_px: float | None = None
    projection_band_count: int | None = None
    dropout_lesions: tuple = ()
    capillary_width_px: int | None = None
    band_width_px: int | None = None
    cell_size_spread: float | None = None

    def __post_init__(self):
        if self.plexus_style not in (SCP, DVC):
            raise ValueError(f"plexus_style must be SCP or DVC, got {self.plexus_style!r}")
        if not 0 < self.vessel_density_target < 1:
            raise ValueError("vessel_density_target must be in (0, 1)")
        if self.frames_to_average < 1:
            raise ValueError("frames_to_average must be >= 1")
        object.__setattr__(self, "size", tuple(int(s) for s in self.size))
        object.__setattr__(self, "dropout_lesions",
                           tuple((tuple(float(v) for v in c), float(r)) for c, r in self.dropout_lesions))

    # resolved defaults scale with the raster so the same spec works at 64 px and 512 px
    @property
    def side(self) -> int:
        return min(self.size)

    @property
    def snr(self) -> float:
        if self.speckle_snr is not None:
            return self.speckle_snr
        return 2.5 if self.plexus_style == SCP else 3.0

    @property
    def spread(self) -> float:
        """Log-scale spread of the local capillary seed density (0 = homogeneous mesh)."""
        if self.cell_size_spread is not None:
            return self.cell_size_spread
        return 0.0 if self.plexus_style == SCP else SPREAD_DVC

    @property
    def faz_radius(self) -> float:
        # the constant keeps the FAZ larger than any mesh cell at small rasters
        return self.faz_radius_px if self.faz_radius_px is not None else 0.05 * self.side + 5.0

    @property
    def faz_center(self) -> tuple:
        return ((self.size[0] - 1) / 2.0, (self.size[1] - 1) / 2.0)

    @property
    def bands(self) -> int:
        if self.projection_band_count is not None:
            return self.projection_band_count if self.plexus_style == DVC else 0
        return 2 if self.plexus_style == DVC else 0

    @property
    def capillary_width(self) -> int:
        return self.capillary_width_px or max(1, round(self.side / 256))

    @property
    def band_width(self) -> int:
        return self.band_width_px or max(3, round(0.03 * self.side))


@dataclass
class Phantom:
    spec: PhantomSpec
    truth: np.ndarray
    bands: np.ndarray
    single: np.ndarray
    averaged: np.ndarray
    tag: str = "control"


# --------------------------------------------------------------------------
# geometry helpers


def _segment_pixels(shape, p0, p1, radius):
    """Row/col arrays of pixel centres within ``radius`` of the segment p0-p1."""
    r = max(radius, 0.5)
    rmin = max(int(math.floor(min(p0[0], p1[0]) - r)), 0)
    rmax = min(int(math.ceil(max(p0[0], p1[0]) + r)), shape[0] - 1)
    cmin = max(int(math.floor(min(p0[1], p1[1]) - r)), 0)
    cmax = min(int(math.ceil(max(p0[1], p1[1]) + r)), shape[1] - 1)
    if rmin > rmax or cmin > cmax:
        return np.empty(0, int), np.empty(0, int)
    rr, cc = np.mgrid[rmin:rmax + 1, cmin:cmax + 1]
    d = np.array(p1, float) - np.array(p0, float)
    L2 = float(d @ d)
    pr, pc = rr - p0[0], cc - p0[1]
    t = np.clip((pr * d[0] + pc * d[1]) / L2, 0, 1) if L2 > 0 else np.zeros_like(pr, dtype=float)
    dist2 = (pr - t * d[0]) ** 2 + (pc - t * d[1]) ** 2
    sel = dist2 <= r * r + 1e-9
    return rr[sel], cc[sel]


def _radial(shape, center):
    rr, cc = np.indices(shape)
    return np.hypot(rr - center[0], cc - center[1])


def _forbidden(spec: PhantomSpec) -> np.ndarray:
    shape = spec.size
    out = _radial(shape, spec.faz_center) < spec.faz_radius
    for (cr, cc), rad in spec.dropout_lesions:
        out |= _radial(shape, (cr, cc)) < rad
    return out


def _voronoi_edges(shape, points, width):
    rr, cc = np.indices(shape)
    tree = cKDTree(points)
    _, lab = tree.query(np.column_stack([rr.ravel(), cc.ravel()]))
    lab = lab.reshape(shape)
    edge = np.zeros(shape, bool)
    edge[:, :-1] |= lab[:, :-1] != lab[:, 1:]
    edge[:-1, :] |= lab[:-1, :] != lab[1:, :]
    if width > 1:
        edge = dilate_disk(edge, (width - 1) / 2.0)
    return edge, lab


def _lloyd(shape, points, iterations, weight=None):
    """Lloyd relaxation; with ``weight`` the centroids are density-weighted so dense zones stay dense."""
    rr, cc = np.indices(shape)
    coords = np.column_stack([rr.ravel(), cc.ravel()]).astype(float)
    wt = np.ones(len(coords)) if weight is None else weight.ravel()
    for _ in range(iterations):
        _, lab = cKDTree(points).query(coords)
        cnt = np.bincount(lab, wt, minlength=len(points))
        keep = cnt > 0
        sr = np.bincount(lab, wt * coords[:, 0], minlength=len(points))
        sc = np.bincount(lab, wt * coords[:, 1], minlength=len(points))
        points = points.copy()
        points[keep, 0] = sr[keep] / cnt[keep]
        points[keep, 1] = sc[keep] / cnt[keep]
    return points


def dilate_disk(mask: np.ndarray, radius: float) -> np.ndarray:
    r = int(math.floor(radius))
    out = mask.copy()
    for dr in range(-r, r + 1):
        for dc in range(-r, r + 1):
            if dr * dr + dc * dc <= radius * radius and (dr or dc):
                out |= np.roll(np.pad(mask, r), (dr, dc), axis=(0, 1))[r:r + mask.shape[0], r:r + mask.shape[1]]
    return out


def _seed_density(shape, spread, rng):
    """Smooth log-normal field (unit max) modulating where capillary cells are small."""
    g = ndimage.gaussian_filter(rng.standard_normal(shape), sigma=min(shape) / 10.0, mode="wrap")
    g = (g - g.mean()) / (g.std() + 1e-12)
    f = np.exp(spread * g)
    return f / f.max()


def _mesh_for_density(shape, base, forbidden, target, width, rng, relax, spread=0.0):
    """Add a Voronoi capillary mesh to ``base`` choosing the cell count that best hits ``target``.

    With ``spread > 0`` seeds are thinned against a smooth random density so
    cell sizes vary across the field the way capillary density does.
    """
    area = shape[0] * shape[1]
    weight = None
    if spread > 0:
        weight = _seed_density(shape, spread, rng)
        cand = rng.random((int(area / 4 / weight.mean()) + 64, 2)) * np.array(shape, float)
        idx = np.minimum(cand.astype(int), np.array(shape) - 1)
        pool = cand[rng.random(len(cand)) < weight[idx[:, 0], idx[:, 1]]]
    else:
        pool = rng.random((area // 4 + 16, 2)) * np.array(shape, float)
    allowed = ~forbidden

    def density(n):
        pts = _lloyd(shape, pool[:n], relax, weight) if relax else pool[:n]
        edges, _ = _voronoi_edges(shape, pts, width)
        m = base | (edges & allowed)
        return m.mean(), m

    # initial guess from hexagonal-cell edge length, then bracketed bisection on the count
    need = max(target - base.mean(), 1e-3)
    guess = int(np.clip(area * (need / (1.86 * width)) ** 2, 2, len(pool)))
    lo, hi = 2, len(pool)
    best = None
    n = guess
    for _ in range(12):
        d, m = density(n)
        if best is None or abs(d - target) < abs(best[0] - target):
            best = (d, m)
        if abs(d - target) <= 0.02 * target:
            break
        if d < target:
            lo = n + 1
        else:
            hi = n - 1
        if lo > hi:
            break
        n = (lo + hi) // 2
    return best[1]


def _grow_trees(spec: PhantomSpec, mask, forbidden, budget, rng):
    """Draw bifurcating trees from the image border until ``budget`` vessel pixels are set."""
    h, w = spec.size
    side = spec.side
    w0 = max(3.0, side / 45.0)
    count = int(mask.sum())
    center = np.array(spec.faz_center)
    guard = 0
    while count < budget and guard < 64:
        guard += 1
        edge = rng.integers(4)
        t = rng.random()
        start = [(0.0, t * (w - 1)), (h - 1.0, t * (w - 1)), (t * (h - 1), 0.0), (t * (h - 1), w - 1.0)][edge]
        aim = center - np.array(start)
        angle = math.atan2(aim[1], aim[0]) + rng.uniform(-0.5, 0.5)
        queue = [(np.array(start), angle, 0.28 * side, w0, 0)]
        while queue and count < budget:
            p, ang, length, width, depth = queue.pop(0)
            pts = [p]
            a = ang
            for _ in range(3):
                a += rng.uniform(-0.2, 0.2)
                pts.append(pts[-1] + (length / 3.0) * np.array([math.cos(a), math.sin(a)]))
            for p0, p1 in zip(pts[:-1], pts[1:]):
                rr, cc = _segment_pixels(mask.shape, p0, p1, width / 2.0)
                keep = ~forbidden[rr, cc] & ~mask[rr, cc]
                mask[rr[keep], cc[keep]] = True
                count += int(keep.sum())
            end = pts[-1]
            if depth < 6 and length > 4 and 0 <= end[0] < h and 0 <= end[1] < w:
                spread = rng.uniform(0.35, 0.7)
                for sgn in (-1, 1):
                    queue.append((end, a + sgn * spread, length * rng.uniform(0.65, 0.8),
                                  max(1.0, width * 0.72), depth + 1))
    return mask


def generate_truth(spec: PhantomSpec) -> np.ndarray:
    """Vessel mask for ``spec``; deterministic in ``spec.seed``."""
    rng = np.random.default_rng([spec.seed, 0])
    shape = spec.size
    forbidden = _forbidden(spec)
    mask = np.zeros(shape, bool)
    wcap = spec.capillary_width
    target = spec.vessel_density_target
    if spec.plexus_style == SCP:
        mask = _grow_trees(spec, mask, forbidden, int(0.6 * target * mask.size), rng)
        mask = _mesh_for_density(shape, mask, forbidden, target, wcap, rng, relax=1)
    else:
        mask = _mesh_for_density(shape, mask, forbidden, target, wcap, rng, relax=2, spread=spec.spread)
    # capillary ring closing the foveal avascular zone
    rad = _radial(shape, spec.faz_center)
    ring = (rad >= spec.faz_radius) & (rad < spec.faz_radius + wcap)
    mask[rad < spec.faz_radius] = False
    mask |= ring
    for (cr, cc), r in spec.dropout_lesions:
        mask[_radial(shape, (cr, cc)) < r] = False
    return mask


def projection_bands(spec: PhantomSpec) -> np.ndarray:
    """Thick, nearly horizontal bands standing in for projected superficial vessels."""
    rng = np.random.default_rng([spec.seed, 2])
    h, w = spec.size
    out = np.zeros(spec.size, bool)
    n = spec.bands
    for i in range(n):
        y0 = (i + 0.5 + rng.uniform(-0.25, 0.25)) * h / n
        slope = rng.uniform(-0.08, 0.08)
        pts = [(y0 - slope * w / 2, 0.0), (y0 + slope * w / 2, w - 1.0)]
        rr, cc = _segment_pixels(spec.size, pts[0], pts[1], spec.band_width / 2.0)
        out[rr, cc] = True
    return out


# --------------------------------------------------------------------------
# rendering


def _illumination(spec: PhantomSpec, rng) -> np.ndarray:
    coarse = rng.uniform(0.5, 1.15, size=(4, 4))
    h, w = spec.size
    field_ = ndimage.zoom(coarse, (h / 4.0, w / 4.0), order=1, mode="nearest", grid_mode=True)
    return field_[:h, :w]


def render_clean(truth: np.ndarray, spec: PhantomSpec, bands: np.ndarray | None = None) -> np.ndarray:
    """Noise-free flow signal: thin capillaries dimmer than large vessels, smooth illumination."""
    rng = np.random.default_rng([spec.seed, 1])
    profile = ndimage.gaussian_filter(truth.astype(float), sigma=0.8)
    signal = 28.0 + 190.0 * profile ** 0.8
    if bands is not None and bands.any():
        b = ndimage.gaussian_filter(bands.astype(float), sigma=1.5)
        signal = np.maximum(signal, 28.0 + BAND_GAIN * b)
    return signal * _illumination(spec, rng)


def render_frames(truth: np.ndarray, spec: PhantomSpec, bands: np.ndarray | None = None):
    """Return ``(single_frame, averaged)`` uint8 images.

    Each frame is the clean signal times independent multiplicative gamma
    speckle with unit mean and ``1/snr`` relative spread (exponential for
    snr = 1). The single frame is frame 0; the average uses all frames.
    """
    clean = render_clean(truth, spec, bands)
    rng = np.random.default_rng([spec.seed, 3])
    k = spec.snr ** 2
    acc = np.zeros_like(clean)
    single = None
    for i in range(spec.frames_to_average):
        frame = clean * rng.gamma(k, 1.0 / k, size=clean.shape)
        if i == 0:
            single = frame
        acc += frame
    avg = acc / spec.frames_to_average
    to8 = lambda a: np.clip(np.rint(a), 0, 255).astype(np.uint8)  # noqa: E731
    return to8(single), to8(avg)


def generate(spec: PhantomSpec, tag: str = "control") -> Phantom:
    truth = generate_truth(spec)
    bands = projection_bands(spec)
    single, avg = render_frames(truth, spec, bands)
    return Phantom(spec, truth, bands, single, avg, tag)


# --------------------------------------------------------------------------
# cohorts


def random_lesions(spec: PhantomSpec, rng, count: int | None = None, radius: float | None = None):
    """Nonperfusion patches placed in the parafoveal annulus, away from the FAZ."""
    count = count if count is not None else int(rng.integers(1, 3))
    radius = radius if radius is not None else 0.09 * spec.side
    cr, cc = spec.faz_center
    out = []
    for _ in range(count):
        dist = rng.uniform(spec.faz_radius + radius + 2, 0.42 * spec.side - radius * 0.5)
        ang = rng.uniform(0, 2 * math.pi)
        out.append(((cr + dist * math.sin(ang), cc + dist * math.cos(ang)), radius))
    return tuple(out)


def item_seeds(seed: int, count: int) -> list[int]:
    return [int(s) for s in np.random.SeedSequence(seed).generate_state(count)]


def generate_dataset(template: PhantomSpec, count: int, seed: int, pathology_fraction: float = 0.0) -> list[Phantom]:
    """Cohort of phantoms with per-item derived seeds.

    The first ``round(count * (1 - pathology_fraction))`` items are controls
    (no lesions); the rest are DR-like with random nonperfusion lesions.
    """
    if count < 1:
        raise ValueError("count must be >= 1")
    seeds = item_seeds(seed, count)
    n_ctrl = count - int(round(count * pathology_fraction))
    out = []
    for i, s in enumerate(seeds):
        if i < n_ctrl:
            spec = replace(template, seed=s, dropout_lesions=())
            out.append(generate(spec, "control"))
        else:
            spec = replace(template, seed=s)
            spec = replace(spec, dropout_lesions=random_lesions(spec, np.random.default_rng([s, 9])))
            out.append(generate(spec, "dr"))
    return out
