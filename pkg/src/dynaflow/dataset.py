"""Speed-record ingestion and aggregation, tile splits, and a synthetic city.

The synthetic world stands in for proprietary imagery and probe data: a
procedural street grid with twinned one-way segments, a deterministic
ground-truth speed function over (segment, day-of-week, hour-of-day), and a
seeded texture renderer whose road appearance (width, albedo) correlates with
the speed class.
"""

from __future__ import annotations

import csv
import datetime
import io
import json
import math
import random
from dataclasses import dataclass

import numpy as np

from . import geo
from .geo import GeoPoint, RoadSegment, TileIndex


class FormatError(ValueError):
    """Input file does not match the expected schema."""


class DomainError(ValueError):
    """Value outside the operation's domain."""


DAYS = 7
HOURS = 24
SLOTS_PER_SEGMENT = DAYS * HOURS  # 168


@dataclass(frozen=True)
class SpeedRecord:
    segment_id: str
    day_of_week: int  # 0 = Monday
    hour_of_day: int
    speed_kmh: float
    n_samples: int = 1

    def __post_init__(self):
        if not 0 <= self.day_of_week <= 6:
            raise DomainError(f"day_of_week {self.day_of_week} outside 0..6")
        if not 0 <= self.hour_of_day <= 23:
            raise DomainError(f"hour_of_day {self.hour_of_day} outside 0..23")
        if not self.speed_kmh > 0:
            raise DomainError(f"speed_kmh must be > 0, got {self.speed_kmh}")
        if self.n_samples < 1:
            raise DomainError(f"n_samples must be >= 1, got {self.n_samples}")


class SpeedTable:
    """Mean speed and sample count per (segment, day-of-week, hour-of-day)."""

    def __init__(self, entries: dict[tuple[str, int, int], tuple[float, int]] | None = None):
        self._entries: dict[tuple[str, int, int], tuple[float, int]] = dict(entries or {})

    def get(self, segment_id: str, day: int, hour: int) -> tuple[float, int] | None:
        return self._entries.get((segment_id, day, hour))

    def __len__(self) -> int:
        return len(self._entries)

    def __contains__(self, key) -> bool:
        return key in self._entries

    def items(self):
        return self._entries.items()

    def segment_ids(self) -> set[str]:
        return {k[0] for k in self._entries}

    def slots_for(self, segment_ids) -> set[tuple[int, int]]:
        """All (day, hour) slots with data for any of the given segments."""
        wanted = set(segment_ids)
        return {(d, h) for (sid, d, h) in self._entries if sid in wanted}

    def to_csv(self, stream) -> None:
        w = csv.writer(stream)
        w.writerow(["segment_id", "day", "hour", "speed_kmh", "n_samples"])
        for (sid, d, h) in sorted(self._entries):
            speed, n = self._entries[(sid, d, h)]
            w.writerow([sid, d, h, repr(speed), n])

    @classmethod
    def from_csv(cls, stream) -> "SpeedTable":
        r = csv.reader(stream)
        header = next(r, None)
        if header != ["segment_id", "day", "hour", "speed_kmh", "n_samples"]:
            raise FormatError(f"unexpected speed table header: {header}")
        entries = {}
        for row in r:
            sid, d, h, speed, n = row
            entries[(sid, int(d), int(h))] = (float(speed), int(n))
        return cls(entries)

    def save(self, path) -> None:
        with open(path, "w", newline="", encoding="utf-8") as f:
            self.to_csv(f)

    @classmethod
    def load(cls, path) -> "SpeedTable":
        with open(path, "r", newline="", encoding="utf-8") as f:
            return cls.from_csv(f)


@dataclass(frozen=True)
class RawSpeedRecord:
    """One hourly observation as it appears in a movement-style CSV."""

    segment_id: str
    year: int
    month: int
    day: int
    hour: int
    speed_kmh: float

    def day_of_week(self) -> int:
        return datetime.date(self.year, self.month, self.day).weekday()


@dataclass(frozen=True)
class RowError:
    line: int
    reason: str


@dataclass
class IngestResult:
    records: list[RawSpeedRecord]
    errors: list[RowError]


_SPEED_COLUMNS = {"speed_kmh": 1.0, "speed": 1.0, "speed_mph_mean": 1.609344}


def ingest_movement_csv(stream) -> IngestResult:
    """Parse hourly speed records from a movement-style CSV.

    Requires columns segment_id, year, month, day, hour and one speed column
    (speed_kmh, speed, or speed_mph_mean; mph values are converted). Rows
    that fail to parse are collected as errors with their line number rather
    than aborting the ingest.
    """
    if isinstance(stream, (str, bytes)):
        stream = io.StringIO(stream if isinstance(stream, str) else stream.decode())
    r = csv.reader(stream)
    header = next(r, None)
    if header is None:
        raise FormatError("empty input: no header row")
    cols = {name.strip(): i for i, name in enumerate(header)}
    required = ["segment_id", "year", "month", "day", "hour"]
    missing = [c for c in required if c not in cols]
    speed_col = next((c for c in _SPEED_COLUMNS if c in cols), None)
    if missing or speed_col is None:
        if speed_col is None:
            missing.append("speed_kmh")
        raise FormatError(f"missing required column(s): {', '.join(missing)}")
    scale = _SPEED_COLUMNS[speed_col]

    records: list[RawSpeedRecord] = []
    errors: list[RowError] = []
    for line_no, row in enumerate(r, start=2):
        if not row:
            continue
        try:
            speed = float(row[cols[speed_col]]) * scale
            if not math.isfinite(speed) or speed <= 0:
                raise ValueError(f"speed out of range: {row[cols[speed_col]]}")
            rec = RawSpeedRecord(
                segment_id=row[cols["segment_id"]],
                year=int(row[cols["year"]]),
                month=int(row[cols["month"]]),
                day=int(row[cols["day"]]),
                hour=int(row[cols["hour"]]),
                speed_kmh=speed,
            )
            if not 0 <= rec.hour <= 23:
                raise ValueError(f"hour out of range: {rec.hour}")
            datetime.date(rec.year, rec.month, rec.day)  # validates the date
        except (ValueError, IndexError) as e:
            errors.append(RowError(line=line_no, reason=str(e)))
            continue
        records.append(rec)
    return IngestResult(records=records, errors=errors)


def aggregate_speeds(records: list[RawSpeedRecord]) -> SpeedTable:
    """Collapse hourly observations to per-(segment, day-of-week, hour) means."""
    sums: dict[tuple[str, int, int], float] = {}
    counts: dict[tuple[str, int, int], int] = {}
    for rec in records:
        key = (rec.segment_id, rec.day_of_week(), rec.hour)
        sums[key] = sums.get(key, 0.0) + rec.speed_kmh
        counts[key] = counts.get(key, 0) + 1
    return SpeedTable({k: (sums[k] / counts[k], counts[k]) for k in sums})


def free_flow_speed(speeds: list[float]) -> float:
    """Nearest-rank 85th percentile of recorded speeds."""
    if not speeds:
        raise DomainError("free_flow_speed needs a non-empty list")
    ordered = sorted(speeds)
    rank = math.ceil(0.85 * len(ordered))  # 1-based
    return ordered[rank - 1]


@dataclass
class DatasetSplit:
    train: list[TileIndex]
    val: list[TileIndex]
    test: list[TileIndex]


def split_tiles(tiles, ratios=(0.85, 0.05, 0.10), seed: int = 0) -> DatasetSplit:
    """Deterministically partition tiles into train/val/test.

    Sizes are floors of ratio*n with the remainder assigned to train.
    """
    if abs(sum(ratios) - 1.0) > 1e-9:
        raise DomainError(f"ratios must sum to 1, got {ratios}")
    ordered = sorted(tiles, key=lambda t: (t.zoom, t.x, t.y))
    rng = random.Random(seed)
    rng.shuffle(ordered)
    n = len(ordered)
    n_tr = int(math.floor(ratios[0] * n + 1e-9))
    n_va = int(math.floor(ratios[1] * n + 1e-9))
    n_te = int(math.floor(ratios[2] * n + 1e-9))
    n_tr += n - (n_tr + n_va + n_te)
    return DatasetSplit(
        train=ordered[:n_tr],
        val=ordered[n_tr:n_tr + n_va],
        test=ordered[n_tr + n_va:],
    )


# --- synthetic city ---------------------------------------------------------

CLASS_BASE_KMH = {"highway": 80.0, "residential": 40.0}
CLASS_VISUAL_HALF_WIDTH_M = {"highway": 5.0, "residential": 2.5}
CLASS_ALBEDO = {"highway": (0.62, 0.62, 0.64), "residential": (0.45, 0.45, 0.47)}
SPEED_MIN_KMH = 5.0
SPEED_MAX_KMH = 110.0

_DEFAULT_CENTER = (40.7549, -73.984)


def _weekday_dip(hour: int, center: float, depth: float, width: float = 1.4) -> float:
    return depth * math.exp(-((hour - center) ** 2) / (2.0 * width * width))


def diurnal_profile(road_class: str, day: int, hour: int) -> float:
    """Relative speed multiplier; weekday rush hours dip at 8h and 17h."""
    if day <= 4:
        depth = 0.45 if road_class == "residential" else 0.30
        dip = _weekday_dip(hour, 8.0, depth) + _weekday_dip(hour, 17.0, depth)
    else:
        dip = _weekday_dip(hour, 13.0, 0.12, width=2.5)
    return 1.0 - dip


@dataclass
class SynthWorld:
    """Procedural street grid with deterministic ground-truth speeds."""

    grid_n: int
    tile_zoom: int
    seed: int
    spacing_m: float
    segments: list[RoadSegment]
    classes: dict[str, str]           # undirected edge id -> class
    edge_factor: dict[str, float]     # undirected edge id -> speed factor
    directional_asymmetry: float
    center: tuple[float, float]
    texture_seed: int

    def segment_class(self, segment_id: str) -> str:
        return self.classes[_undirected_id(segment_id)]

    def segment_direction(self, segment_id: str) -> tuple[float, float]:
        seg = self.segment_by_id(segment_id)
        ref_lat = seg.points[0].lat
        x0, y0 = geo.local_xy_m(seg.points[0], ref_lat, seg.points[0].lon)
        x1, y1 = geo.local_xy_m(seg.points[-1], ref_lat, seg.points[0].lon)
        ln = math.hypot(x1 - x0, y1 - y0)
        return (x1 - x0) / ln, (y1 - y0) / ln

    def segment_by_id(self, segment_id: str) -> RoadSegment:
        return self._by_id[segment_id]

    def __post_init__(self):
        self._by_id = {s.id: s for s in self.segments}

    def speed_fn(self, segment_id: str, day: int, hour: int) -> float:
        """Ground-truth mean traffic speed in km/h for a segment and slot."""
        if segment_id not in self._by_id:
            raise DomainError(f"unknown segment {segment_id}")
        if not (0 <= day <= 6 and 0 <= hour <= 23):
            raise DomainError(f"slot ({day}, {hour}) out of range")
        uid = _undirected_id(segment_id)
        cls = self.classes[uid]
        speed = CLASS_BASE_KMH[cls] * self.edge_factor[uid]
        speed *= diurnal_profile(cls, day, hour)
        if self.directional_asymmetry:
            de, dn = self.segment_direction(segment_id)
            sign = 1.0 if de + dn > 0 else -1.0
            speed *= 1.0 + self.directional_asymmetry * sign
        return min(max(speed, SPEED_MIN_KMH), SPEED_MAX_KMH)

    def ground_truth_table(self, coverage: float = 1.0, seed: int = 0) -> SpeedTable:
        """Sample the speed function into a table, optionally dropping slots."""
        rng = random.Random(seed)
        entries = {}
        for s in self.segments:
            for day in range(DAYS):
                for hour in range(HOURS):
                    if coverage < 1.0 and rng.random() >= coverage:
                        continue
                    n = 1 + (5 if day <= 4 and 7 <= hour <= 19 else 1)
                    entries[(s.id, day, hour)] = (self.speed_fn(s.id, day, hour), n)
        return SpeedTable(entries)

    def node_point(self, i: int, j: int) -> GeoPoint:
        lat0, lon0 = self.center
        half = (self.grid_n - 1) / 2.0
        x = (j - half) * self.spacing_m
        y = (i - half) * self.spacing_m
        return geo.local_geo(x, y, lat0, lon0)

    def tiles(self, margin_m: float = 12.0) -> list[TileIndex]:
        """All tiles at tile_zoom overlapping the street grid plus a margin."""
        lat0, lon0 = self.center
        half_span = (self.grid_n - 1) / 2.0 * self.spacing_m + margin_m
        sw = geo.local_geo(-half_span, -half_span, lat0, lon0)
        ne = geo.local_geo(half_span, half_span, lat0, lon0)
        t_sw = geo.latlon_to_tile(sw, self.tile_zoom)
        t_ne = geo.latlon_to_tile(ne, self.tile_zoom)
        out = []
        for x in range(min(t_sw.x, t_ne.x), max(t_sw.x, t_ne.x) + 1):
            for y in range(min(t_sw.y, t_ne.y), max(t_sw.y, t_ne.y) + 1):
                out.append(TileIndex(x=x, y=y, zoom=self.tile_zoom))
        return out

    def sidecar(self) -> dict:
        return {
            "grid_n": self.grid_n,
            "tile_zoom": self.tile_zoom,
            "seed": self.seed,
            "spacing_m": self.spacing_m,
            "classes": self.classes,
            "edge_factor": self.edge_factor,
            "directional_asymmetry": self.directional_asymmetry,
            "center": list(self.center),
            "texture_seed": self.texture_seed,
        }

    def save(self, geojson_path, sidecar_path) -> None:
        geo.write_segments_geojson(geojson_path, self.segments)
        with open(sidecar_path, "w", encoding="utf-8") as f:
            json.dump(self.sidecar(), f, sort_keys=True, indent=1)
            f.write("\n")

    @classmethod
    def load(cls, geojson_path, sidecar_path) -> "SynthWorld":
        segments = geo.read_segments_geojson(geojson_path)
        with open(sidecar_path, "r", encoding="utf-8") as f:
            meta = json.load(f)
        return cls(
            grid_n=meta["grid_n"], tile_zoom=meta["tile_zoom"], seed=meta["seed"],
            spacing_m=meta["spacing_m"], segments=segments,
            classes=meta["classes"],
            edge_factor={k: float(v) for k, v in meta["edge_factor"].items()},
            directional_asymmetry=float(meta["directional_asymmetry"]),
            center=tuple(meta["center"]), texture_seed=meta["texture_seed"],
        )


def _undirected_id(segment_id: str) -> str:
    if segment_id.endswith("_f") or segment_id.endswith("_r"):
        return segment_id[:-2]
    return segment_id


def synth_city(
    grid_n: int,
    tile_zoom: int = 18,
    seed: int = 0,
    spacing_m: float = 80.0,
    directional_asymmetry: float = 0.0,
    center: tuple[float, float] = _DEFAULT_CENTER,
) -> SynthWorld:
    """Build a deterministic synthetic street grid.

    grid_n x grid_n nodes joined by twinned one-way streets. Every third
    gridline is a highway, the rest are residential. Per-street speed factors
    come from the seed; the diurnal profile dips at weekday rush hours.
    """
    if grid_n < 2:
        raise DomainError(f"grid_n must be >= 2, got {grid_n}")
    rng = random.Random(seed)
    lat0, lon0 = center
    half = (grid_n - 1) / 2.0

    def node(i, j):
        # small deterministic jitter keeps streets off exact pixel boundaries
        jx = (((i * 131 + j * 17 + seed) % 7) - 3) * 0.11
        jy = (((i * 29 + j * 113 + seed) % 7) - 3) * 0.11
        return geo.local_geo((j - half) * spacing_m + jx, (i - half) * spacing_m + jy, lat0, lon0)

    segments: list[RoadSegment] = []
    classes: dict[str, str] = {}
    edge_factor: dict[str, float] = {}

    def add_street(uid: str, a: GeoPoint, b: GeoPoint, road_class: str):
        classes[uid] = road_class
        edge_factor[uid] = rng.uniform(0.85, 1.15)
        fwd = RoadSegment(id=uid + "_f", points=[a, b], twin_id=uid + "_r")
        rev = RoadSegment(id=uid + "_r", points=[b, a], twin_id=uid + "_f")
        segments.append(fwd)
        segments.append(rev)

    for i in range(grid_n):
        row_class = "highway" if i % 3 == 1 else "residential"
        for j in range(grid_n - 1):
            add_street(f"h{i}_{j}", node(i, j), node(i, j + 1), row_class)
    for j in range(grid_n):
        col_class = "highway" if j % 3 == 1 else "residential"
        for i in range(grid_n - 1):
            add_street(f"v{i}_{j}", node(i, j), node(i + 1, j), col_class)

    return SynthWorld(
        grid_n=grid_n, tile_zoom=tile_zoom, seed=seed, spacing_m=spacing_m,
        segments=segments, classes=classes, edge_factor=edge_factor,
        directional_asymmetry=directional_asymmetry, center=center,
        texture_seed=rng.randrange(2**31),
    )


def render_image(world: SynthWorld, tile: TileIndex, size_px: int) -> np.ndarray:
    """Deterministic 3-channel raster for a tile, values in [0, 1].

    Background is seeded low/high-frequency noise; roads are drawn as flat
    albedo bands, wider and brighter for highways than residential streets.
    """
    if size_px < 16:
        raise DomainError(f"size_px must be >= 16, got {size_px}")
    frame = geo.tile_pixel_frame(tile, size_px)
    tile_seed = (world.texture_seed * 1000003 + tile.zoom * 10007 + tile.x * 101 + tile.y) % (2**31)
    rng = np.random.default_rng(tile_seed)

    coarse = rng.uniform(0.18, 0.38, size=(size_px // 8 + 1, size_px // 8 + 1, 3))
    img = np.kron(coarse, np.ones((8, 8, 1)))[:size_px, :size_px, :]
    img += rng.uniform(-0.03, 0.03, size=(size_px, size_px, 3))
    img = np.clip(img, 0.0, 1.0)

    # residential first so highways stay on top at intersections
    order = sorted(world.segments, key=lambda s: (world.segment_class(s.id) == "highway", s.id))
    for s in order:
        cls = world.segment_class(s.id)
        hw = CLASS_VISUAL_HALF_WIDTH_M[cls]
        albedo = CLASS_ALBEDO[cls]
        for (r, c) in geo.buffer_segment(s, frame, hw):
            img[r, c, :] = albedo
    return np.ascontiguousarray(img.transpose(2, 0, 1))
