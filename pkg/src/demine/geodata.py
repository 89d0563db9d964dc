"""Mine/region ingestion, local metric projection, and square-tile grids.

Geographic input is projected onto a local tangent plane around a region
origin (equirectangular approximation, valid for small regions); metric
input is taken as-is. A region is abstracted as a grid of square tiles,
and every mine of a dataset is assigned to exactly one tile.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

M_PER_DEG_LAT = 110574.0
M_PER_DEG_LON_AT_EQUATOR = 111320.0
PROJECTION_RANGE_DEG = 2.0
DEFAULT_TILE_SIZE = 25.0


class ProjectionRangeError(ValueError):
    """Point too far from the origin for the tangent-plane approximation."""


class OutOfBoundsError(ValueError):
    """One or more mines fall outside the grid bounds."""

    def __init__(self, indices: Sequence[int]):
        self.indices = list(indices)
        super().__init__(f"mines outside grid bounds at dataset indices {self.indices}")


@dataclass(frozen=True)
class GeoPoint:
    """WGS84 coordinate in degrees."""

    lon: float
    lat: float

    def __post_init__(self):
        if not (-180.0 <= self.lon <= 180.0):
            raise ValueError(f"longitude {self.lon} outside [-180, 180]")
        if not (-90.0 <= self.lat <= 90.0):
            raise ValueError(f"latitude {self.lat} outside [-90, 90]")


@dataclass(frozen=True)
class MetricPoint:
    """Meters east/north of the region origin."""

    x: float
    y: float

    def __post_init__(self):
        if not (math.isfinite(self.x) and math.isfinite(self.y)):
            raise ValueError(f"non-finite metric coordinate ({self.x}, {self.y})")

    def as_array(self) -> np.ndarray:
        return np.array([self.x, self.y], dtype=float)


@dataclass(frozen=True)
class Bounds:
    min_x: float
    min_y: float
    max_x: float
    max_y: float

    def __post_init__(self):
        if not (self.max_x > self.min_x and self.max_y > self.min_y):
            raise ValueError(f"degenerate bounds {self}")

    def contains(self, x: float, y: float) -> bool:
        return self.min_x <= x <= self.max_x and self.min_y <= y <= self.max_y


@dataclass
class MinefieldDataset:
    """Found-mine coordinates in metric space with optional per-mine attributes.

    Duplicate coordinates are permitted (two mines may share a tile).
    """

    mines: list[MetricPoint]
    attributes: list[dict | None] = field(default_factory=list)

    def __post_init__(self):
        if not self.attributes:
            self.attributes = [None] * len(self.mines)
        if len(self.attributes) != len(self.mines):
            raise ValueError("attributes length must match mines length")

    def __len__(self) -> int:
        return len(self.mines)

    def coords(self) -> np.ndarray:
        """Mine coordinates as an (n, 2) float array."""
        if not self.mines:
            return np.zeros((0, 2))
        return np.array([[m.x, m.y] for m in self.mines], dtype=float)


@dataclass(frozen=True)
class Tile:
    col: int
    row: int
    center: MetricPoint
    mine_indices: tuple[int, ...] = ()


@dataclass
class Grid:
    """Row-major collection of non-overlapping square tiles covering a region.

    Tile index = row * n_cols + col. Immutable after mine assignment.
    """

    origin: MetricPoint
    tile_size: float
    n_cols: int
    n_rows: int
    tiles: list[Tile]

    @property
    def n_tiles(self) -> int:
        return self.n_cols * self.n_rows

    def index(self, col: int, row: int) -> int:
        if not (0 <= col < self.n_cols and 0 <= row < self.n_rows):
            raise IndexError(f"tile ({col}, {row}) outside {self.n_cols}x{self.n_rows} grid")
        return row * self.n_cols + col

    def locate(self, x: float, y: float) -> tuple[int, int]:
        """Map a metric point to its (col, row); raises OutOfBoundsError outside.

        A point exactly on a shared edge belongs to the tile with the lower
        index along that axis.
        """
        col = _axis_index(x - self.origin.x, self.tile_size)
        row = _axis_index(y - self.origin.y, self.tile_size)
        if not (0 <= col < self.n_cols and 0 <= row < self.n_rows):
            raise OutOfBoundsError([])
        return col, row

    def centers(self) -> np.ndarray:
        """Tile centers as an (n_tiles, 2) array in row-major order."""
        cols = np.arange(self.n_cols)
        rows = np.arange(self.n_rows)
        cx = self.origin.x + (cols + 0.5) * self.tile_size
        cy = self.origin.y + (rows + 0.5) * self.tile_size
        xx, yy = np.meshgrid(cx, cy)
        return np.column_stack([xx.ravel(), yy.ravel()])


@dataclass(frozen=True)
class Region:
    """Region record: explicit bounds, optional geographic origin, tile size."""

    mode: str  # "metric" | "geo"
    bounds: Bounds
    origin: GeoPoint | None = None
    tile_size_m: float = DEFAULT_TILE_SIZE

    def __post_init__(self):
        if self.mode not in ("metric", "geo"):
            raise ValueError(f"unknown region mode {self.mode!r}")
        if self.mode == "geo" and self.origin is None:
            raise ValueError("geo-mode region requires an origin")
        if self.tile_size_m <= 0:
            raise ValueError("tile_size_m must be positive")


def project_to_metric(points: Iterable[GeoPoint], origin: GeoPoint) -> list[MetricPoint]:
    """Project geographic points onto the local tangent plane at `origin`.

    x = (lon - lon0) * cos(lat0) * 111320 m, y = (lat - lat0) * 110574 m.
    Valid for points within ~2 degrees of the origin; farther points are
    rejected with a ProjectionRangeError.
    """
    cos_lat0 = math.cos(math.radians(origin.lat))
    out = []
    for i, p in enumerate(points):
        if abs(p.lon - origin.lon) > PROJECTION_RANGE_DEG or abs(p.lat - origin.lat) > PROJECTION_RANGE_DEG:
            raise ProjectionRangeError(
                f"point {i} at ({p.lon}, {p.lat}) farther than {PROJECTION_RANGE_DEG} deg from origin"
            )
        x = (p.lon - origin.lon) * cos_lat0 * M_PER_DEG_LON_AT_EQUATOR
        y = (p.lat - origin.lat) * M_PER_DEG_LAT
        out.append(MetricPoint(x, y))
    return out


def build_grid(bounds: Bounds, tile_size: float = DEFAULT_TILE_SIZE) -> Grid:
    """Tile the bounds with squares of side `tile_size`, ceiling on both axes."""
    if tile_size <= 0:
        raise ValueError("tile_size must be positive")
    # tiny epsilon so an exact multiple of tile_size is not rounded up by float noise
    n_cols = int(math.ceil((bounds.max_x - bounds.min_x) / tile_size - 1e-9))
    n_rows = int(math.ceil((bounds.max_y - bounds.min_y) / tile_size - 1e-9))
    n_cols = max(n_cols, 1)
    n_rows = max(n_rows, 1)
    origin = MetricPoint(bounds.min_x, bounds.min_y)
    tiles = []
    for row in range(n_rows):
        for col in range(n_cols):
            center = MetricPoint(
                origin.x + (col + 0.5) * tile_size,
                origin.y + (row + 0.5) * tile_size,
            )
            tiles.append(Tile(col=col, row=row, center=center))
    return Grid(origin=origin, tile_size=tile_size, n_cols=n_cols, n_rows=n_rows, tiles=tiles)


def assign_mines(grid: Grid, dataset: MinefieldDataset) -> Grid:
    """Return a copy of `grid` with every dataset mine assigned to its tile.

    Raises OutOfBoundsError listing the offending dataset indices if any mine
    falls outside the grid.
    """
    per_tile: dict[int, list[int]] = {}
    bad: list[int] = []
    for i, m in enumerate(dataset.mines):
        col = _axis_index(m.x - grid.origin.x, grid.tile_size)
        row = _axis_index(m.y - grid.origin.y, grid.tile_size)
        if not (0 <= col < grid.n_cols and 0 <= row < grid.n_rows):
            bad.append(i)
            continue
        per_tile.setdefault(row * grid.n_cols + col, []).append(i)
    if bad:
        raise OutOfBoundsError(bad)
    tiles = [
        replace(t, mine_indices=tuple(per_tile.get(idx, ())))
        for idx, t in enumerate(grid.tiles)
    ]
    return Grid(
        origin=grid.origin,
        tile_size=grid.tile_size,
        n_cols=grid.n_cols,
        n_rows=grid.n_rows,
        tiles=tiles,
    )


def _axis_index(delta: float, tile_size: float) -> int:
    q = delta / tile_size
    i = math.floor(q)
    if i == q and i > 0:  # exactly on a shared edge: lower tile wins
        i -= 1
    return int(i)


# ---------------------------------------------------------------------------
# File formats: GeoJSON / CSV mines, JSON region record, normalized dataset.
# ---------------------------------------------------------------------------


def load_region(path: str | Path) -> Region:
    with open(path) as fh:
        raw = json.load(fh)
    return region_from_dict(raw)


def region_from_dict(raw: dict) -> Region:
    try:
        b = raw["bounds"]
        bounds = Bounds(b["min_x"], b["min_y"], b["max_x"], b["max_y"])
    except KeyError as e:
        raise ValueError(f"region record missing bounds field: {e}") from e
    origin = None
    if raw.get("origin") is not None:
        o = raw["origin"]
        origin = GeoPoint(o["lon"], o["lat"])
    return Region(
        mode=raw.get("mode", "metric"),
        bounds=bounds,
        origin=origin,
        tile_size_m=float(raw.get("tile_size_m", DEFAULT_TILE_SIZE)),
    )


def region_to_dict(region: Region) -> dict:
    out: dict = {
        "mode": region.mode,
        "bounds": {
            "min_x": region.bounds.min_x,
            "min_y": region.bounds.min_y,
            "max_x": region.bounds.max_x,
            "max_y": region.bounds.max_y,
        },
        "tile_size_m": region.tile_size_m,
    }
    if region.origin is not None:
        out["origin"] = {"lon": region.origin.lon, "lat": region.origin.lat}
    return out


def load_mines_geojson(path: str | Path) -> tuple[list[GeoPoint], list[dict | None]]:
    """Read a GeoJSON FeatureCollection of Point features.

    Recognized properties: type, model, depth_m. Any non-Point feature is an
    error naming the feature.
    """
    with open(path) as fh:
        raw = json.load(fh)
    if raw.get("type") != "FeatureCollection":
        raise ValueError("expected a GeoJSON FeatureCollection")
    points: list[GeoPoint] = []
    attrs: list[dict | None] = []
    for i, feat in enumerate(raw.get("features", [])):
        geom = feat.get("geometry") or {}
        if geom.get("type") != "Point":
            raise ValueError(f"feature {i} is {geom.get('type')!r}, expected Point")
        lon, lat = geom["coordinates"][:2]
        points.append(GeoPoint(float(lon), float(lat)))
        props = feat.get("properties") or {}
        kept = {k: props[k] for k in ("type", "model", "depth_m") if k in props}
        attrs.append(kept or None)
    return points, attrs


def load_mines_csv(path: str | Path) -> tuple[str, list]:
    """Read mines from CSV. Header `x,y` means metric mode, `lon,lat` geographic.

    Returns ("metric", [MetricPoint...]) or ("geo", [GeoPoint...]).
    """
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        fields = [f.strip().lower() for f in (reader.fieldnames or [])]
        if fields[:2] == ["x", "y"]:
            pts = [MetricPoint(float(row["x"]), float(row["y"])) for row in reader]
            return "metric", pts
        if fields[:2] == ["lon", "lat"]:
            pts = [GeoPoint(float(row["lon"]), float(row["lat"])) for row in reader]
            return "geo", pts
        raise ValueError(f"unrecognized CSV header {fields}; expected x,y or lon,lat")


def load_mine_file(path: str | Path) -> tuple[str, list, list[dict | None]]:
    """Dispatch on extension: .geojson/.json -> GeoJSON, .csv -> CSV."""
    p = Path(path)
    if p.suffix.lower() in (".geojson", ".json"):
        points, attrs = load_mines_geojson(p)
        return "geo", points, attrs
    if p.suffix.lower() == ".csv":
        mode, points = load_mines_csv(p)
        return mode, points, [None] * len(points)
    raise ValueError(f"unsupported mine file extension {p.suffix!r}")


def ingest(region: Region, mine_path: str | Path) -> tuple[Grid, MinefieldDataset]:
    """Load mines, project if the region is geographic, grid and assign."""
    mode, points, attrs = load_mine_file(mine_path)
    if mode == "geo":
        if region.mode != "geo":
            raise ValueError("geographic mines require a geo-mode region with an origin")
        metric = project_to_metric(points, region.origin)
    else:
        metric = points
    dataset = MinefieldDataset(mines=list(metric), attributes=attrs)
    grid = build_grid(region.bounds, region.tile_size_m)
    return assign_mines(grid, dataset), dataset


def dataset_summary(grid: Grid, dataset: MinefieldDataset) -> dict:
    """Tile count, mine count and share of tiles with at least one mine."""
    mined = sum(1 for t in grid.tiles if t.mine_indices)
    return {
        "n_tiles": grid.n_tiles,
        "n_mines": len(dataset),
        "mined_tile_share": mined / grid.n_tiles if grid.n_tiles else 0.0,
    }


def save_dataset(path: str | Path, region: Region, grid: Grid, dataset: MinefieldDataset) -> dict:
    """Write the normalized dataset file (metric mines + region + summary)."""
    summary = dataset_summary(grid, dataset)
    doc = {
        "region": region_to_dict(region),
        "mines": [[m.x, m.y] for m in dataset.mines],
        "attributes": dataset.attributes,
        "summary": summary,
    }
    with open(path, "w") as fh:
        json.dump(doc, fh, sort_keys=True, indent=2)
        fh.write("\n")
    return summary


def load_dataset(path: str | Path) -> tuple[Region, Grid, MinefieldDataset]:
    """Read a normalized dataset file and rebuild the assigned grid."""
    with open(path) as fh:
        doc = json.load(fh)
    region = region_from_dict(doc["region"])
    mines = [MetricPoint(x, y) for x, y in doc["mines"]]
    dataset = MinefieldDataset(mines=mines, attributes=doc.get("attributes") or [])
    grid = build_grid(region.bounds, region.tile_size_m)
    return region, assign_mines(grid, dataset), dataset
