"""Geospatial feature engineering: parcels -> per-cell treatment dataset.

Parcel polygons are clipped to an axis-aligned grid (Sutherland-Hodgman plus
the shoelace formula) to get per-(cell, year, crop) abundance fractions. Crop
diversification is the count of crops with non-zero abundance; averaged over
the study years and binarized at its median it becomes the treatment. The
assembled dataset inner-joins abundance, environmental covariates, and the
outcome on cell id.

Coordinates are planar and pre-projected; rings are simple (no holes).
"""

from __future__ import annotations

import re
from dataclasses import dataclass
from typing import Dict, Iterable, Optional, Sequence, Tuple

import numpy as np

from .core import (
    CANONICAL_COLUMNS,
    FeatureMatrix,
    LabeledDataset,
    Scaler,
    median_binarize,
    standardize,
    temporal_aggregate,
)
from .errors import GeometryError, ValidationError

# abundance below this is "zero" for diversification counting
ABUNDANCE_EPS = 1e-9


# ---------------------------------------------------------------------------
# geometry primitives
# ---------------------------------------------------------------------------


def shoelace_area(ring: np.ndarray) -> float:
    """Signed area of a ring (positive when counterclockwise)."""
    x = ring[:, 0]
    y = ring[:, 1]
    return 0.5 * float(np.sum(x * np.roll(y, -1) - np.roll(x, -1) * y))


def _cross(o, a, b) -> float:
    return (a[0] - o[0]) * (b[1] - o[1]) - (a[1] - o[1]) * (b[0] - o[0])


def _on_segment(p, q, r) -> bool:
    # r collinear with pq: is it within the segment's bounding box?
    return (min(p[0], q[0]) <= r[0] <= max(p[0], q[0])
            and min(p[1], q[1]) <= r[1] <= max(p[1], q[1]))


def _segments_intersect(p1, p2, p3, p4) -> bool:
    d1 = _cross(p3, p4, p1)
    d2 = _cross(p3, p4, p2)
    d3 = _cross(p1, p2, p3)
    d4 = _cross(p1, p2, p4)
    if ((d1 > 0) != (d2 > 0)) and ((d3 > 0) != (d4 > 0)) and d1 != 0 and d2 != 0 \
            and d3 != 0 and d4 != 0:
        return True
    if d1 == 0 and _on_segment(p3, p4, p1):
        return True
    if d2 == 0 and _on_segment(p3, p4, p2):
        return True
    if d3 == 0 and _on_segment(p1, p2, p3):
        return True
    if d4 == 0 and _on_segment(p1, p2, p4):
        return True
    return False


def _is_simple_ring(ring: np.ndarray) -> bool:
    """True when no two non-adjacent edges intersect or touch."""
    k = ring.shape[0]
    edges = [(ring[i], ring[(i + 1) % k]) for i in range(k)]
    for i in range(k):
        for j in range(i + 1, k):
            if j == i + 1 or (i == 0 and j == k - 1):
                continue  # adjacent edges share a vertex by construction
            if _segments_intersect(edges[i][0], edges[i][1],
                                   edges[j][0], edges[j][1]):
                return False
    return True


@dataclass(frozen=True)
class ParcelRecord:
    """One crop parcel: a simple counterclockwise ring with positive area.

    The ring is stored without the closing repeat of the first vertex;
    orientation is normalized on construction.
    """

    parcel_id: str
    year: int
    crop_code: str
    polygon: np.ndarray

    def __post_init__(self):
        ring = np.asarray(self.polygon, dtype=np.float64)
        if ring.ndim != 2 or ring.shape[1] != 2:
            raise GeometryError("polygon must be an (n, 2) vertex array",
                                parcel_id=self.parcel_id)
        if not np.isfinite(ring).all():
            raise GeometryError("polygon has non-finite vertices",
                                parcel_id=self.parcel_id)
        if ring.shape[0] >= 2 and np.array_equal(ring[0], ring[-1]):
            ring = ring[:-1]
        if np.unique(ring, axis=0).shape[0] < 3:
            raise GeometryError("ring needs at least 3 distinct vertices",
                                parcel_id=self.parcel_id)
        area = shoelace_area(ring)
        if area < 0:
            ring = ring[::-1].copy()
            area = -area
        if area <= 0:
            raise GeometryError("polygon area must be positive",
                                parcel_id=self.parcel_id)
        if not _is_simple_ring(ring):
            raise GeometryError("polygon ring is self-intersecting",
                                parcel_id=self.parcel_id)
        ring = np.ascontiguousarray(ring)
        ring.setflags(write=False)
        object.__setattr__(self, "polygon", ring)
        object.__setattr__(self, "parcel_id", str(self.parcel_id))
        object.__setattr__(self, "crop_code", str(self.crop_code))
        object.__setattr__(self, "year", int(self.year))

    @property
    def area(self) -> float:
        return shoelace_area(self.polygon)


_WKT_RE = re.compile(r"\s*POLYGON\s*\(\s*\(([^()]*)\)\s*\)\s*$", re.IGNORECASE)


def parse_wkt_polygon(text: str) -> np.ndarray:
    """Vertices of a single-ring ``POLYGON((x y, ...))`` string."""
    if re.search(r"\)\s*,\s*\(", text):
        raise GeometryError("polygons with holes are not supported")
    match = _WKT_RE.match(text)
    if not match:
        raise GeometryError("malformed WKT polygon", wkt=text[:80])
    points = []
    for token in match.group(1).split(","):
        parts = token.split()
        if len(parts) != 2:
            raise GeometryError("WKT vertex must be 'x y'", vertex=token.strip())
        try:
            points.append((float(parts[0]), float(parts[1])))
        except ValueError:
            raise GeometryError("WKT vertex is not numeric",
                                vertex=token.strip()) from None
    if len(points) < 3:
        raise GeometryError("WKT ring needs at least 3 vertices")
    return np.array(points, dtype=np.float64)


def format_wkt_polygon(ring: np.ndarray) -> str:
    """WKT text for a ring, closing it with a repeat of the first vertex."""
    ring = np.asarray(ring, dtype=np.float64)
    pts = [f"{float(x)!r} {float(y)!r}" for x, y in ring]
    pts.append(pts[0])
    return "POLYGON((" + ", ".join(pts) + "))"


@dataclass(frozen=True)
class GridSpec:
    """Axis-aligned analysis grid, row-major cell ids, origin at the top-left.

    Cell (i, j) covers [origin_x + j*s, origin_x + (j+1)*s] x
    [origin_y - (i+1)*s, origin_y - i*s].
    """

    origin_x: float
    origin_y: float
    cell_size: float
    n_cols: int
    n_rows: int

    def __post_init__(self):
        if self.cell_size <= 0:
            raise ValidationError("cell_size must be positive",
                                  cell_size=self.cell_size)
        if self.n_cols < 1 or self.n_rows < 1:
            raise ValidationError("grid must have positive dimensions",
                                  n_cols=self.n_cols, n_rows=self.n_rows)

    @property
    def n_cells(self) -> int:
        return self.n_cols * self.n_rows

    @property
    def cell_area(self) -> float:
        return self.cell_size * self.cell_size

    def cell_id(self, i: int, j: int) -> int:
        if not (0 <= i < self.n_rows and 0 <= j < self.n_cols):
            raise ValidationError("cell index out of range", i=i, j=j)
        return i * self.n_cols + j

    def cell_index(self, cell_id: int) -> Tuple[int, int]:
        if not 0 <= cell_id < self.n_cells:
            raise ValidationError("cell id out of range", cell_id=cell_id)
        return divmod(int(cell_id), self.n_cols)

    def cell_bounds(self, cell_id: int) -> Tuple[float, float, float, float]:
        """(xmin, ymin, xmax, ymax) of one cell."""
        i, j = self.cell_index(cell_id)
        s = self.cell_size
        xmin = self.origin_x + j * s
        ymax = self.origin_y - i * s
        return (xmin, ymax - s, xmin + s, ymax)

    def cell_center(self, cell_id: int) -> Tuple[float, float]:
        xmin, ymin, xmax, ymax = self.cell_bounds(cell_id)
        return ((xmin + xmax) / 2.0, (ymin + ymax) / 2.0)


def clip_polygon_to_cell(ring: np.ndarray,
                         bounds: Tuple[float, float, float, float]) -> float:
    """Area of ring ∩ axis-aligned cell, by Sutherland-Hodgman clipping.

    The ring must be a validated counterclockwise simple ring (see
    ParcelRecord); returns 0.0 when they are disjoint.
    """
    xmin, ymin, xmax, ymax = bounds
    if xmin >= xmax or ymin >= ymax:
        raise ValidationError("cell bounds are empty", bounds=bounds)
    poly = [(float(x), float(y)) for x, y in np.asarray(ring, dtype=np.float64)]

    def clip_half_plane(points, inside, intersect):
        out = []
        if not points:
            return out
        prev = points[-1]
        prev_in = inside(prev)
        for cur in points:
            cur_in = inside(cur)
            if cur_in:
                if not prev_in:
                    out.append(intersect(prev, cur))
                out.append(cur)
            elif prev_in:
                out.append(intersect(prev, cur))
            prev, prev_in = cur, cur_in
        return out

    def x_cut(level):
        def intersect(a, b):
            t = (level - a[0]) / (b[0] - a[0])
            return (level, a[1] + t * (b[1] - a[1]))
        return intersect

    def y_cut(level):
        def intersect(a, b):
            t = (level - a[1]) / (b[1] - a[1])
            return (a[0] + t * (b[0] - a[0]), level)
        return intersect

    poly = clip_half_plane(poly, lambda p: p[0] >= xmin, x_cut(xmin))
    poly = clip_half_plane(poly, lambda p: p[0] <= xmax, x_cut(xmax))
    poly = clip_half_plane(poly, lambda p: p[1] >= ymin, y_cut(ymin))
    poly = clip_half_plane(poly, lambda p: p[1] <= ymax, y_cut(ymax))
    if len(poly) < 3:
        return 0.0
    return max(shoelace_area(np.array(poly, dtype=np.float64)), 0.0)


# ---------------------------------------------------------------------------
# abundance and diversification
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class AbundanceTable:
    """Per-(cell, year) crop abundance fractions and clamped total coverage.

    Each crop's abundance is the summed clipped area of its parcels divided
    by the cell area, clamped to [0, 1] independently of other crops; the
    totals clamp the all-parcel sum, so overlapping parcels never report a
    cell as more than fully covered.
    """

    entries: Dict[Tuple[int, int], Dict[str, float]]
    total_coverage: Dict[Tuple[int, int], float]

    def abundance(self, cell_id: int, year: int, crop_code: str) -> float:
        return self.entries.get((int(cell_id), int(year)), {}).get(str(crop_code), 0.0)

    def crops(self, cell_id: int, year: int) -> Dict[str, float]:
        key = (int(cell_id), int(year))
        if key not in self.entries:
            raise ValidationError("cell/year not present in abundance table",
                                  cell_id=cell_id, year=year)
        return dict(self.entries[key])

    def keys(self):
        return self.entries.keys()

    @property
    def cell_ids(self) -> tuple:
        return tuple(sorted({cell for cell, _ in self.entries}))

    @property
    def years(self) -> tuple:
        return tuple(sorted({year for _, year in self.entries}))


def compute_abundance(parcels: Iterable[ParcelRecord],
                      grid: GridSpec) -> AbundanceTable:
    """Clip every parcel to the grid and accumulate per-crop cell fractions.

    Cells never touched by any parcel are absent from the table. Accumulation
    is keyed on (cell, year, crop), so the result is independent of parcel
    order up to float addition order; parcels are processed in input order
    for reproducibility.
    """
    sums: Dict[Tuple[int, int], Dict[str, float]] = {}
    totals: Dict[Tuple[int, int], float] = {}
    s = grid.cell_size
    for parcel in parcels:
        ring = parcel.polygon
        j_lo = int(np.floor((ring[:, 0].min() - grid.origin_x) / s))
        j_hi = int(np.floor((ring[:, 0].max() - grid.origin_x) / s))
        i_lo = int(np.floor((grid.origin_y - ring[:, 1].max()) / s))
        i_hi = int(np.floor((grid.origin_y - ring[:, 1].min()) / s))
        for i in range(max(i_lo, 0), min(i_hi, grid.n_rows - 1) + 1):
            for j in range(max(j_lo, 0), min(j_hi, grid.n_cols - 1) + 1):
                cell = grid.cell_id(i, j)
                area = clip_polygon_to_cell(ring, grid.cell_bounds(cell))
                if area <= 0.0:
                    continue
                key = (cell, parcel.year)
                sums.setdefault(key, {})
                sums[key][parcel.crop_code] = sums[key].get(parcel.crop_code, 0.0) + area
                totals[key] = totals.get(key, 0.0) + area
    cell_area = grid.cell_area
    entries = {
        key: {crop: min(raw / cell_area, 1.0)
              for crop, raw in sorted(crop_sums.items())}
        for key, crop_sums in sorted(sums.items())
    }
    total_coverage = {key: min(raw / cell_area, 1.0)
                      for key, raw in sorted(totals.items())}
    return AbundanceTable(entries=entries, total_coverage=total_coverage)


def diversification_count(table: AbundanceTable, cell_id: int, year: int) -> int:
    """Number of crops with abundance above the zero guard."""
    crops = table.crops(cell_id, year)  # raises when absent
    return int(sum(1 for frac in crops.values() if frac > ABUNDANCE_EPS))


def agricultural_mask(table: AbundanceTable, study_years: Optional[Sequence[int]] = None,
                      threshold: float = 0.5) -> set:
    """Cells whose mean total parcel coverage over the study years >= threshold.

    Years with no parcel record in a cell contribute zero coverage to its
    mean. The boundary is inclusive.
    """
    if not 0.0 <= threshold <= 1.0:
        raise ValidationError("threshold must lie in [0, 1]", threshold=threshold)
    years = tuple(sorted(set(int(y) for y in study_years))) if study_years \
        else table.years
    if not years:
        return set()
    mask = set()
    for cell in table.cell_ids:
        mean_cover = float(np.mean([table.total_coverage.get((cell, y), 0.0)
                                    for y in years]))
        if mean_cover >= threshold:
            mask.add(cell)
    return mask


# ---------------------------------------------------------------------------
# covariate / outcome tables and the join
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class EnvTable:
    """Environmental covariates per (cell, year), canonical column order."""

    cell_ids: tuple
    years: tuple
    values: np.ndarray  # shape (n, len(CANONICAL_COLUMNS))

    def __post_init__(self):
        values = np.asarray(self.values, dtype=np.float64)
        n = len(self.cell_ids)
        if values.shape != (n, len(CANONICAL_COLUMNS)):
            raise ValidationError(
                "environmental table must have one row per record and the "
                f"{len(CANONICAL_COLUMNS)} canonical columns",
                shape=tuple(values.shape), rows=n)
        if len(self.years) != n:
            raise ValidationError("years misaligned with cell ids")
        if not np.isfinite(values).all():
            raise ValidationError("environmental values contain non-finite entries")
        object.__setattr__(self, "cell_ids", tuple(int(c) for c in self.cell_ids))
        object.__setattr__(self, "years", tuple(int(y) for y in self.years))
        values = np.ascontiguousarray(values)
        values.setflags(write=False)
        object.__setattr__(self, "values", values)


@dataclass(frozen=True)
class OutcomeTable:
    """Outcome (net primary productivity) per (cell, year)."""

    cell_ids: tuple
    years: tuple
    npp: np.ndarray

    def __post_init__(self):
        npp = np.asarray(self.npp, dtype=np.float64)
        n = len(self.cell_ids)
        if npp.shape != (n,) or len(self.years) != n:
            raise ValidationError("outcome table misaligned",
                                  rows=n, npp=tuple(npp.shape))
        if not np.isfinite(npp).all():
            raise ValidationError("outcome contains non-finite values")
        object.__setattr__(self, "cell_ids", tuple(int(c) for c in self.cell_ids))
        object.__setattr__(self, "years", tuple(int(y) for y in self.years))
        npp = np.ascontiguousarray(npp)
        npp.setflags(write=False)
        object.__setattr__(self, "npp", npp)


@dataclass(frozen=True)
class JoinReport:
    """Accounting of the inner join; each dropped cell has exactly one cause."""

    n_rows: int
    dropped_missing_parcels: int
    dropped_missing_env: int
    dropped_missing_outcome: int
    dropped_non_agricultural: int
    study_years: tuple
    treatment_threshold: float


@dataclass(frozen=True)
class AssembledData:
    """The analysis-ready dataset plus cell metadata and join accounting."""

    dataset: LabeledDataset
    scaler: Scaler
    cell_ids: tuple
    centers: np.ndarray  # (n, 2) cell-center coordinates
    diversification: np.ndarray  # mean crop count per cell over study years
    report: JoinReport


def assemble_dataset(abundance: AbundanceTable, env: EnvTable,
                     outcome: OutcomeTable, grid: GridSpec, *,
                     study_years: Optional[Sequence[int]] = None,
                     agricultural_threshold: Optional[float] = None) -> AssembledData:
    """Inner-join abundance, covariates, and outcome into a LabeledDataset.

    Covariates and outcome are averaged over the study years (cells missing
    any year are dropped and attributed to that source); diversification
    counts missing (cell, year) pairs as zero. The treatment is the median
    binarization of mean diversification; covariates are standardized.
    ``study_years`` defaults to the years the env and outcome tables share.
    """
    if study_years is None:
        years = sorted(set(env.years) & set(outcome.years))
        if not years:
            raise ValidationError(
                "env and outcome tables share no years; pass study_years")
    else:
        years = sorted(set(int(y) for y in study_years))
        if not years:
            raise ValidationError("study_years must be nonempty")

    env_cells, env_values, _ = temporal_aggregate(
        env.cell_ids, env.years, env.values, years)
    out_cells, out_values, _ = temporal_aggregate(
        outcome.cell_ids, outcome.years, outcome.npp, years)
    env_index = {cell: k for k, cell in enumerate(env_cells)}
    out_index = {cell: k for k, cell in enumerate(out_cells)}
    parcel_cells = set(abundance.cell_ids)

    universe = sorted(parcel_cells | set(env.cell_ids) | set(outcome.cell_ids))
    kept, miss_parcels, miss_env, miss_out = [], 0, 0, 0
    for cell in universe:
        if cell not in parcel_cells:
            miss_parcels += 1
        elif cell not in env_index:
            miss_env += 1
        elif cell not in out_index:
            miss_out += 1
        else:
            kept.append(cell)

    non_agri = 0
    if agricultural_threshold is not None:
        mask = agricultural_mask(abundance, years, agricultural_threshold)
        non_agri = sum(1 for cell in kept if cell not in mask)
        kept = [cell for cell in kept if cell in mask]

    if not kept:
        raise ValidationError("join produced an empty dataset",
                              universe=len(universe))

    div = np.array([
        np.mean([
            diversification_count(abundance, cell, y)
            if (cell, y) in abundance.entries else 0
            for y in years
        ])
        for cell in kept
    ], dtype=np.float64)
    treatment, threshold = median_binarize(div)
    X_raw = FeatureMatrix(
        CANONICAL_COLUMNS,
        np.vstack([env_values[env_index[cell]] for cell in kept]),
        tuple(kept))
    X_std, scaler = standardize(X_raw)
    y = np.array([out_values[out_index[cell], 0] for cell in kept])
    dataset = LabeledDataset(X_std, y, treatment)
    centers = np.array([grid.cell_center(cell) for cell in kept])
    report = JoinReport(
        n_rows=len(kept), dropped_missing_parcels=miss_parcels,
        dropped_missing_env=miss_env, dropped_missing_outcome=miss_out,
        dropped_non_agricultural=non_agri, study_years=tuple(years),
        treatment_threshold=threshold)
    return AssembledData(dataset=dataset, scaler=scaler, cell_ids=tuple(kept),
                         centers=centers, diversification=div, report=report)
