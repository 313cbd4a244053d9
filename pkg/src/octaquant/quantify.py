"""Inter-capillary area (ICA) quantification on binary vessel masks.

Pipeline: label background regions, find the foveal avascular zone (FAZ),
centre an ETDRS grid on it, measure each ICA's area and maximum ischemic
point (MIP, the largest distance to the nearest vessel), then compare the
ICAs against a normative database to produce standard-deviation maps.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

REGIONS = ("outside", "center",
           "inner-S", "inner-N", "inner-I", "inner-T",
           "outer-S", "outer-N", "outer-I", "outer-T")
ETDRS_REGIONS = REGIONS[1:]
BINS = ("<1", "1-2", "2-3", ">3")
BIN_COLORS = {"<1": (0, 170, 0), "1-2": (235, 220, 0), "2-3": (255, 130, 0), ">3": (220, 0, 0)}
FOUR = ndimage.generate_binary_structure(2, 1)


class QuantifyError(ValueError):
    pass


# --------------------------------------------------------------------------
# regions and FAZ


def label_icas(mask: np.ndarray):
    """4-connected components of the non-vessel pixels; returns ``(labels, count)``."""
    labels, n = ndimage.label(~np.asarray(mask, bool), structure=FOUR)
    return labels.astype(np.int32), int(n)


@dataclass
class FazResult:
    label: int
    centroid: tuple
    area_px: int
    mask: np.ndarray          # vessel mask after clearing pixels enclosed by the FAZ
    labels: np.ndarray        # ICA labels recomputed on that mask
    count: int


def _central_window(shape, fraction):
    h, w = shape
    side_r, side_c = max(1, round(h * fraction)), max(1, round(w * fraction))
    r0, c0 = (h - side_r) // 2, (w - side_c) // 2
    return slice(r0, r0 + side_r), slice(c0, c0 + side_c)


def detect_faz(mask: np.ndarray, labels: np.ndarray | None = None, window_fraction: float = 0.2) -> FazResult:
    """Largest ICA touching the central window, with its enclosed vessel pixels cleared.

    Holes of the FAZ component (anything it fully encloses) are reset to
    non-vessel before the centroid is taken.
    """
    mask = np.asarray(mask, bool)
    if labels is None:
        labels, _ = label_icas(mask)
    win = _central_window(mask.shape, window_fraction)
    cand = np.unique(labels[win])
    cand = cand[cand > 0]
    if cand.size == 0:
        raise QuantifyError("no inter-capillary area intersects the central window; widen window_fraction")
    sizes = np.bincount(labels.ravel())
    best = int(cand[np.argmax(sizes[cand])])
    faz = labels == best
    filled = ndimage.binary_fill_holes(faz, structure=np.ones((3, 3), bool))
    cleaned = mask & ~filled
    new_labels, n = label_icas(cleaned)
    rr, cc = np.nonzero(filled)
    centroid = (float(rr.mean()), float(cc.mean()))
    new_label = int(new_labels[rr[0], cc[0]])
    return FazResult(new_label, centroid, int(filled.sum()), cleaned, new_labels, n)


# --------------------------------------------------------------------------
# distance transform and MIPs


def _lower_envelope(f: list, inf: int) -> list:
    """Exact squared 1-D distance transform of sampled function ``f`` (lower envelope of parabolas)."""
    n = len(f)
    sites = [q for q in range(n) if f[q] < inf]
    if not sites:
        return [inf] * n
    v = [sites[0]]
    z = [-math.inf, math.inf]
    for q in sites[1:]:
        fq = f[q] + q * q
        while True:
            p = v[-1]
            s = (fq - (f[p] + p * p)) / (2.0 * (q - p))
            if s <= z[-2]:
                v.pop()
                z.pop()
                if not v:
                    break
            else:
                break
        if not v:
            v = [q]
            z = [-math.inf, math.inf]
            continue
        v.append(q)
        z[-1] = s
        z.append(math.inf)
    out = [0] * n
    k = 0
    for q in range(n):
        while z[k + 1] < q:
            k += 1
        p = v[k]
        out[q] = (q - p) * (q - p) + f[p]
    return out


def squared_distance_transform(mask: np.ndarray) -> np.ndarray:
    """Exact squared Euclidean distance (integer) from every pixel to the nearest True pixel."""
    mask = np.asarray(mask, bool)
    h, w = mask.shape
    inf = (h + w) ** 2 + 1
    # column pass: vertical distance to the nearest feature in the same column
    g = np.empty((h, w), np.int64)
    big = h + w
    g[0] = np.where(mask[0], 0, big)
    for r in range(1, h):
        g[r] = np.where(mask[r], 0, np.minimum(g[r - 1] + 1, big))
    for r in range(h - 2, -1, -1):
        g[r] = np.minimum(g[r], g[r + 1] + 1)
    f = np.where(g >= big, inf, g * g)
    out = np.empty((h, w), np.int64)
    for r in range(h):
        out[r] = _lower_envelope(f[r].tolist(), inf)
    return out


def distance_transform(mask: np.ndarray) -> np.ndarray:
    """Euclidean distance from each pixel to the nearest vessel pixel (0 on vessels)."""
    mask = np.asarray(mask, bool)
    if not mask.any():
        raise QuantifyError("distance transform needs at least one vessel pixel")
    return np.sqrt(squared_distance_transform(mask).astype(np.float64))


def compute_mips(labels: np.ndarray, dist: np.ndarray, count: int | None = None):
    """Per-label maximum distance and its location (first in row-major order on ties).

    Returns ``(values, rows, cols)`` arrays indexed by label (index 0 unused).
    """
    lab = labels.ravel()
    d = dist.ravel()
    if count is None:
        count = int(lab.max(initial=0))
    idx = np.arange(lab.size)
    sel = lab > 0
    lab, d, idx = lab[sel], d[sel], idx[sel]
    order = np.lexsort((idx, -d, lab))
    lab_sorted = lab[order]
    first = np.ones(lab_sorted.size, bool)
    first[1:] = lab_sorted[1:] != lab_sorted[:-1]
    winners = order[first]
    values = np.zeros(count + 1)
    rows = np.full(count + 1, -1)
    cols = np.full(count + 1, -1)
    values[lab[winners]] = d[winners]
    rows[lab[winners]] = idx[winners] // labels.shape[1]
    cols[lab[winners]] = idx[winners] % labels.shape[1]
    return values, rows, cols


# --------------------------------------------------------------------------
# ETDRS grid


@dataclass(frozen=True)
class EtdrsGrid:
    center: tuple
    px_per_mm: float
    diameters_mm: tuple = (1.0, 3.0, 6.0)
    laterality: str = "OD"

    def radii_px(self):
        return tuple(d / 2.0 * self.px_per_mm for d in self.diameters_mm)


def default_px_per_mm(shape, field_mm: float = 6.0) -> float:
    return min(shape) / field_mm


def place_etdrs(centroid, px_per_mm: float, shape, laterality: str = "OD"):
    """Grid centred on ``centroid`` and a per-pixel map of indices into :data:`REGIONS`.

    Quadrants are split on the diagonals; superior is up (decreasing row).
    Nasal points to increasing column for a right eye (OD) and to decreasing
    column for a left eye (OS).
    """
    if px_per_mm <= 0:
        raise ValueError("px_per_mm must be positive")
    if laterality not in ("OD", "OS"):
        raise ValueError("laterality must be OD or OS")
    grid = EtdrsGrid(tuple(float(c) for c in centroid), float(px_per_mm), laterality=laterality)
    r1, r2, r3 = grid.radii_px()
    rr, cc = np.indices(shape, dtype=np.float64)
    dy = grid.center[0] - rr  # up is positive
    dx = cc - grid.center[1]
    if laterality == "OS":
        dx = -dx
    rad = np.hypot(dy, dx)
    # sector: S when |dy| > |dx| and dy > 0; ties (diagonals) go to the horizontal sectors
    sector = np.where(np.abs(dy) > np.abs(dx), np.where(dy > 0, 0, 2), np.where(dx >= 0, 1, 3))
    region = np.zeros(shape, np.int8)
    region[rad <= r1] = 1
    inner = (rad > r1) & (rad <= r2)
    outer = (rad > r2) & (rad <= r3)
    region[inner] = 2 + sector[inner]
    region[outer] = 6 + sector[outer]
    if not (region > 0).any():
        raise QuantifyError("ETDRS grid does not overlap the image")
    return grid, region


def analytic_region_areas(px_per_mm: float) -> dict:
    r1, r2, r3 = (d / 2.0 * px_per_mm for d in (1.0, 3.0, 6.0))
    out = {"center": math.pi * r1 * r1}
    for q in "SNIT":
        out[f"inner-{q}"] = math.pi * (r2 * r2 - r1 * r1) / 4
        out[f"outer-{q}"] = math.pi * (r3 * r3 - r2 * r2) / 4
    return out


def vessel_density(mask: np.ndarray, artifact_mask: np.ndarray | None, region_map: np.ndarray) -> dict:
    """Fraction of vessel pixels per ETDRS region, ignoring artifact pixels in numerator and denominator."""
    mask = np.asarray(mask, bool)
    valid = np.ones_like(mask) if artifact_mask is None else ~np.asarray(artifact_mask, bool)
    total = np.bincount(region_map[valid].ravel(), minlength=len(REGIONS))
    vessel = np.bincount(region_map[valid & mask].ravel(), minlength=len(REGIONS))
    out = {}
    for i, name in enumerate(REGIONS):
        if i == 0:
            continue
        out[name] = float(vessel[i] / total[i]) if total[i] else float("nan")
    return out


# --------------------------------------------------------------------------
# reports


@dataclass
class IcaRegion:
    label: int
    pixel_count: int
    mip_value: float
    mip_location: tuple
    etdrs_region: str


@dataclass
class IcaReport:
    image_id: str
    plexus: str
    regions: list
    faz_label: int
    faz_centroid: tuple
    densities: dict
    grid: EtdrsGrid
    labels: np.ndarray = field(repr=False)
    mask: np.ndarray = field(repr=False)

    def icas(self, include_faz: bool = False):
        return [r for r in self.regions if include_faz or r.label != self.faz_label]

    def region_of(self, label: int) -> IcaRegion:
        for r in self.regions:
            if r.label == label:
                return r
        raise KeyError(label)

    def area_mm2(self, px) -> float:
        return px / self.grid.px_per_mm ** 2

    def mip_um(self, px) -> float:
        return px * 1000.0 / self.grid.px_per_mm


def quantify(mask: np.ndarray, plexus: str = "DVC", image_id: str = "", px_per_mm: float | None = None,
             artifact_mask: np.ndarray | None = None, window_fraction: float = 0.2,
             laterality: str = "OD") -> IcaReport:
    mask = np.asarray(mask, bool)
    if px_per_mm is None:
        px_per_mm = default_px_per_mm(mask.shape)
    faz = detect_faz(mask, window_fraction=window_fraction)
    grid, region_map = place_etdrs(faz.centroid, px_per_mm, mask.shape, laterality)
    dist = distance_transform(faz.mask)
    values, rows, cols = compute_mips(faz.labels, dist, faz.count)
    sizes = np.bincount(faz.labels.ravel(), minlength=faz.count + 1)
    regions = []
    for lab in range(1, faz.count + 1):
        loc = (int(rows[lab]), int(cols[lab]))
        regions.append(IcaRegion(lab, int(sizes[lab]), float(values[lab]), loc, REGIONS[region_map[loc]]))
    densities = vessel_density(faz.mask, artifact_mask, region_map)
    return IcaReport(image_id, plexus, regions, faz.label, faz.centroid, densities, grid, faz.labels, faz.mask)


# --------------------------------------------------------------------------
# normative database

METRICS = ("area_px", "mip_px")
DB_HEADER = "octaquant-normdb 1"


@dataclass
class NormativeDb:
    # (plexus, region, metric) -> (mean, sd, n)
    stats: dict = field(default_factory=dict)

    def get(self, plexus, region, metric):
        return self.stats.get((plexus, region, metric))

    def dumps(self) -> str:
        lines = [DB_HEADER, "plexus,region,metric,mean,sd,n"]
        for (plexus, region, metric), (mean, sd, n) in sorted(self.stats.items()):
            lines.append(f"{plexus},{region},{metric},{mean!r},{sd!r},{n}")
        return "\n".join(lines) + "\n"

    @classmethod
    def loads(cls, text: str) -> "NormativeDb":
        lines = [ln.strip() for ln in text.splitlines() if ln.strip()]
        if not lines or lines[0] != DB_HEADER:
            raise QuantifyError(f"not a normative database (expected header {DB_HEADER!r})")
        stats = {}
        for i, ln in enumerate(lines[1:], 2):
            if ln.startswith("plexus,"):
                continue
            parts = ln.split(",")
            if len(parts) != 6:
                raise QuantifyError(f"normative database line {i}: expected 6 fields")
            try:
                stats[(parts[0], parts[1], parts[2])] = (float(parts[3]), float(parts[4]), int(parts[5]))
            except ValueError as exc:
                raise QuantifyError(f"normative database line {i}: {exc}") from None
        return cls(stats)

    def merged(self, other: "NormativeDb") -> "NormativeDb":
        return NormativeDb({**self.stats, **other.stats})


def build_normative_db(reports) -> NormativeDb:
    """Pooled per-(plexus, region) mean and sample SD of ICA area and MIP over control reports."""
    pools: dict = {}
    for rep in reports:
        for ica in rep.icas():
            key = (rep.plexus, ica.etdrs_region)
            pools.setdefault(key, ([], []))
            pools[key][0].append(ica.pixel_count)
            pools[key][1].append(ica.mip_value)
    stats = {}
    for (plexus, region), (areas, mips) in pools.items():
        for metric, vals in zip(METRICS, (areas, mips)):
            a = np.asarray(vals, float)
            sd = float(a.std(ddof=1)) if a.size >= 2 else float("nan")
            stats[(plexus, region, metric)] = (float(a.mean()), sd, int(a.size))
    return NormativeDb(stats)


def zscore(value: float, mean: float, sd: float) -> float:
    if math.isnan(sd):
        return float("nan")
    if sd == 0:
        return 0.0 if value == mean else math.copysign(math.inf, value - mean)
    return (value - mean) / sd


def sd_bin(z: float) -> str:
    if math.isnan(z):
        return "n/a"
    if z < 1:
        return "<1"
    if z < 2:
        return "1-2"
    if z < 3:
        return "2-3"
    return ">3"


@dataclass
class SdRow:
    ica_id: int
    region: str
    area_px: int
    area_mm2: float
    mip_px: float
    mip_um: float
    z_area: float | None
    z_mip: float | None
    bin: str

    def as_list(self):
        return [self.ica_id, self.region, self.area_px, self.area_mm2, self.mip_px, self.mip_um,
                self.z_area, self.z_mip, self.bin]


REPORT_COLUMNS = ("ica_id", "region", "area_px", "area_mm2", "mip_px", "mip_um", "z_area", "z_mip", "bin")


def sd_rows(report: IcaReport, db: NormativeDb | None):
    """One row per ICA (FAZ included, binned as 'faz'); z columns are None without a database."""
    if db is not None and not any(key[0] == report.plexus for key in db.stats):
        raise QuantifyError(f"normative database has no {report.plexus} entries")
    rows = []
    for ica in report.regions:
        z_a = z_m = None
        if ica.label == report.faz_label:
            label = "faz"
        elif db is None:
            label = ""
        else:
            sa = db.get(report.plexus, ica.etdrs_region, "area_px")
            sm = db.get(report.plexus, ica.etdrs_region, "mip_px")
            if sa is None or sm is None:
                # no control ICA fell in this region: no reference, like n < 2
                label = "n/a"
            else:
                z_a = zscore(ica.pixel_count, sa[0], sa[1])
                z_m = zscore(ica.mip_value, sm[0], sm[1])
                label = sd_bin(max(z_a, z_m)) if not (math.isnan(z_a) or math.isnan(z_m)) else "n/a"
        rows.append(SdRow(ica.label, ica.etdrs_region, ica.pixel_count, report.area_mm2(ica.pixel_count),
                          ica.mip_value, report.mip_um(ica.mip_value), z_a, z_m, label))
    return rows


def sd_map(report: IcaReport, db: NormativeDb, image: np.ndarray | None = None, alpha: float = 0.55):
    """Colour-coded RGB overlay of every ICA's SD bin plus the per-ICA rows."""
    rows = sd_rows(report, db)
    shape = report.labels.shape
    base = np.zeros(shape, np.uint8) if image is None else np.asarray(image, np.uint8)
    rgb = np.repeat(base[..., None], 3, axis=2).astype(np.float64)
    lut = np.zeros((report.labels.max() + 1, 3))
    painted = np.zeros(report.labels.max() + 1, bool)
    for row in rows:
        if row.bin in BIN_COLORS:
            lut[row.ica_id] = BIN_COLORS[row.bin]
            painted[row.ica_id] = True
    sel = painted[report.labels]
    rgb[sel] = (1 - alpha) * rgb[sel] + alpha * lut[report.labels[sel]]
    return np.clip(np.rint(rgb), 0, 255).astype(np.uint8), rows
