"""Geographic primitives shared across the pipeline.

Spherical-Mercator (XYZ / slippy-map) tiling, a local planar projection per
tile, polyline geometry in meters, pixel buffering, arc-length sampling, and
angle/bin conversion. All meter math inside a tile uses an equirectangular
projection about a reference point; at tile scale the error is negligible and
every operation stays exactly reproducible.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np

EARTH_RADIUS_M = 6378137.0
EARTH_CIRCUMFERENCE_M = 2.0 * math.pi * EARTH_RADIUS_M
MERCATOR_LAT_LIMIT = 85.0511


class GeoError(ValueError):
    """A geographic quantity is outside its valid domain."""


@dataclass(frozen=True)
class GeoPoint:
    """Latitude/longitude pair in degrees, validated on construction."""

    lat: float
    lon: float

    def __post_init__(self):
        if not -90.0 <= self.lat <= 90.0:
            raise GeoError(f"latitude {self.lat} outside [-90, 90]")
        if not -180.0 <= self.lon < 180.0:
            raise GeoError(f"longitude {self.lon} outside [-180, 180)")


@dataclass(frozen=True)
class TileIndex:
    """XYZ spherical-Mercator tile address."""

    x: int
    y: int
    zoom: int

    def __post_init__(self):
        if not 0 <= self.zoom <= 22:
            raise GeoError(f"zoom {self.zoom} outside [0, 22]")
        n = 1 << self.zoom
        if not (0 <= self.x < n and 0 <= self.y < n):
            raise GeoError(f"tile ({self.x},{self.y}) out of range for zoom {self.zoom}")


def local_xy_m(p: GeoPoint, ref_lat: float, ref_lon: float) -> tuple[float, float]:
    """Project a point to east/north meters about a reference coordinate."""
    x = EARTH_RADIUS_M * math.radians(p.lon - ref_lon) * math.cos(math.radians(ref_lat))
    y = EARTH_RADIUS_M * math.radians(p.lat - ref_lat)
    return x, y


def local_geo(x_m: float, y_m: float, ref_lat: float, ref_lon: float) -> GeoPoint:
    """Inverse of :func:`local_xy_m`."""
    lat = ref_lat + math.degrees(y_m / EARTH_RADIUS_M)
    lon = ref_lon + math.degrees(x_m / (EARTH_RADIUS_M * math.cos(math.radians(ref_lat))))
    return GeoPoint(lat, lon)


def polyline_length_m(points: list[GeoPoint]) -> float:
    """Length of a polyline in meters (equirectangular about its mean latitude)."""
    ref_lat = sum(p.lat for p in points) / len(points)
    ref_lon = points[0].lon
    xy = [local_xy_m(p, ref_lat, ref_lon) for p in points]
    total = 0.0
    for (x0, y0), (x1, y1) in zip(xy, xy[1:]):
        total += math.sqrt((x1 - x0) ** 2 + (y1 - y0) ** 2)
    return total


@dataclass
class RoadSegment:
    """Directed polyline road geometry.

    Direction of travel runs from the first point to the last. Bidirectional
    roads appear as two segments linked through ``twin_id``.
    """

    id: str
    points: list[GeoPoint]
    twin_id: str | None = None
    length_m: float = field(default=None)  # type: ignore[assignment]

    def __post_init__(self):
        if len(self.points) < 2:
            raise GeoError(f"segment {self.id}: needs at least 2 points")
        computed = polyline_length_m(self.points)
        if computed <= 0.0:
            raise GeoError(f"segment {self.id}: zero length")
        if self.length_m is None:
            self.length_m = computed
        elif abs(self.length_m - computed) > 1e-6 * max(computed, 1.0):
            raise GeoError(
                f"segment {self.id}: stated length {self.length_m} differs from "
                f"geometry length {computed}"
            )

    def reversed(self, new_id: str) -> "RoadSegment":
        """The same geometry traversed in the opposite direction."""
        return RoadSegment(
            id=new_id, points=list(reversed(self.points)), twin_id=self.id,
            length_m=self.length_m,
        )


@dataclass(frozen=True)
class DirectedSample:
    """A raster pixel annotated with the local direction of travel."""

    pixel: tuple[int, int]  # (row, col)
    theta: float  # radians in (-pi, pi], east = 0, counterclockwise
    segment_id: str


def latlon_to_tile(p: GeoPoint, zoom: int) -> TileIndex:
    """Standard XYZ spherical-Mercator tile containing a point."""
    if not 0 <= zoom <= 22:
        raise GeoError(f"zoom {zoom} outside [0, 22]")
    if abs(p.lat) > MERCATOR_LAT_LIMIT:
        raise GeoError(f"latitude {p.lat} outside Mercator limit +-{MERCATOR_LAT_LIMIT}")
    n = 1 << zoom
    lat_rad = math.radians(p.lat)
    xf = (p.lon + 180.0) / 360.0 * n
    yf = (1.0 - math.asinh(math.tan(lat_rad)) / math.pi) / 2.0 * n
    x = min(n - 1, max(0, int(math.floor(xf))))
    y = min(n - 1, max(0, int(math.floor(yf))))
    return TileIndex(x=x, y=y, zoom=zoom)


def tile_center(t: TileIndex) -> GeoPoint:
    """Geographic center of a tile."""
    n = 1 << t.zoom
    lon = (t.x + 0.5) / n * 360.0 - 180.0
    lat = math.degrees(math.atan(math.sinh(math.pi * (1.0 - 2.0 * (t.y + 0.5) / n))))
    return GeoPoint(lat, lon)


def tile_bounds(t: TileIndex) -> tuple[float, float, float, float]:
    """(lat_south, lon_west, lat_north, lon_east) of the Mercator tile."""
    n = 1 << t.zoom
    lon_w = t.x / n * 360.0 - 180.0
    lon_e = (t.x + 1) / n * 360.0 - 180.0
    lat_n = math.degrees(math.atan(math.sinh(math.pi * (1.0 - 2.0 * t.y / n))))
    lat_s = math.degrees(math.atan(math.sinh(math.pi * (1.0 - 2.0 * (t.y + 1) / n))))
    return lat_s, lon_w, lat_n, lon_e


@dataclass(frozen=True)
class PixelFrame:
    """Raster frame with a local planar (equirectangular) georeference.

    ``(ref_lat, ref_lon)`` projects to local meters (0, 0), which sits at
    fractional pixel coordinates ``(origin_row, origin_col)``. Rows grow
    southward, columns eastward; one pixel spans ``meters_per_pixel`` meters.
    """

    ref_lat: float
    ref_lon: float
    meters_per_pixel: float
    height: int
    width: int
    origin_row: float
    origin_col: float

    def xy_m(self, p: GeoPoint) -> tuple[float, float]:
        return local_xy_m(p, self.ref_lat, self.ref_lon)

    def xy_to_pixel(self, x_m: float, y_m: float) -> tuple[float, float]:
        row = self.origin_row - y_m / self.meters_per_pixel
        col = self.origin_col + x_m / self.meters_per_pixel
        return row, col

    def geo_to_pixel(self, p: GeoPoint) -> tuple[float, float]:
        return self.xy_to_pixel(*self.xy_m(p))

    def pixel_center_xy(self, row: float, col: float) -> tuple[float, float]:
        x = (col - self.origin_col) * self.meters_per_pixel
        y = (self.origin_row - row) * self.meters_per_pixel
        return x, y

    def pixel_to_geo(self, row: float, col: float) -> GeoPoint:
        x, y = self.pixel_center_xy(row, col)
        return local_geo(x, y, self.ref_lat, self.ref_lon)

    def contains(self, row: int, col: int) -> bool:
        return 0 <= row < self.height and 0 <= col < self.width

    def crop(self, row0: int, col0: int, height: int, width: int) -> "PixelFrame":
        """Sub-frame sharing this frame's projection and resolution."""
        return PixelFrame(
            ref_lat=self.ref_lat, ref_lon=self.ref_lon,
            meters_per_pixel=self.meters_per_pixel,
            height=height, width=width,
            origin_row=self.origin_row - row0, origin_col=self.origin_col - col0,
        )


def ground_resolution(lat: float, zoom: int, size_px: int) -> float:
    """Meters per pixel of a ``size_px``-wide Mercator tile at a latitude."""
    return EARTH_CIRCUMFERENCE_M * math.cos(math.radians(lat)) / (1 << zoom) / size_px


def tile_pixel_frame(t: TileIndex, size_px: int) -> PixelFrame:
    """Square pixel frame covering one tile, centered on the tile center."""
    if size_px < 1:
        raise GeoError(f"size_px must be >= 1, got {size_px}")
    c = tile_center(t)
    mpp = ground_resolution(c.lat, t.zoom, size_px)
    half = (size_px - 1) / 2.0
    return PixelFrame(
        ref_lat=c.lat, ref_lon=c.lon, meters_per_pixel=mpp,
        height=size_px, width=size_px, origin_row=half, origin_col=half,
    )


def _segment_xy(s: RoadSegment, frame: PixelFrame) -> list[tuple[float, float]]:
    return [frame.xy_m(p) for p in s.points]


def buffer_segment(s: RoadSegment, frame: PixelFrame, half_width_m: float) -> set[tuple[int, int]]:
    """Raster pixels whose centers lie within ``half_width_m`` of the polyline.

    A segment entirely outside the frame yields an empty set.
    """
    if half_width_m <= 0:
        raise GeoError(f"half_width_m must be > 0, got {half_width_m}")
    xy = _segment_xy(s, frame)
    w2 = half_width_m * half_width_m
    mpp = frame.meters_per_pixel

    pixels: set[tuple[int, int]] = set()
    for (ax, ay), (bx, by) in zip(xy, xy[1:]):
        # candidate pixel window around this piece, inflated by the buffer
        rows = [frame.xy_to_pixel(ax, ay)[0], frame.xy_to_pixel(bx, by)[0]]
        cols = [frame.xy_to_pixel(ax, ay)[1], frame.xy_to_pixel(bx, by)[1]]
        pad = half_width_m / mpp + 1.0
        r0 = max(0, int(math.floor(min(rows) - pad)))
        r1 = min(frame.height - 1, int(math.ceil(max(rows) + pad)))
        c0 = max(0, int(math.floor(min(cols) - pad)))
        c1 = min(frame.width - 1, int(math.ceil(max(cols) + pad)))
        if r0 > r1 or c0 > c1:
            continue
        rr, cc = np.meshgrid(np.arange(r0, r1 + 1), np.arange(c0, c1 + 1), indexing="ij")
        px = (cc - frame.origin_col) * mpp
        py = (frame.origin_row - rr) * mpp
        d2 = _point_segment_dist2(px, py, ax, ay, bx, by)
        hit = d2 <= w2
        for r, c in zip(rr[hit].ravel(), cc[hit].ravel()):
            pixels.add((int(r), int(c)))
    return pixels


def _point_segment_dist2(px, py, ax, ay, bx, by):
    """Squared distance from point(s) to the segment a-b; numpy-friendly."""
    dx = bx - ax
    dy = by - ay
    den = dx * dx + dy * dy
    if den == 0.0:
        ex = px - ax
        ey = py - ay
        return ex * ex + ey * ey
    t = ((px - ax) * dx + (py - ay) * dy) / den
    t = np.clip(t, 0.0, 1.0)
    ex = px - (ax + t * dx)
    ey = py - (ay + t * dy)
    return ex * ex + ey * ey


def direction_to_angle(d: tuple[float, float]) -> float:
    """Angle of an east/north meter vector, east = 0, CCW positive, in (-pi, pi]."""
    de, dn = d
    if de == 0.0 and dn == 0.0:
        raise GeoError("direction vector must be nonzero")
    ang = math.atan2(dn, de)
    if ang == -math.pi:
        ang = math.pi
    return ang


def angle_to_bin(theta: float, n_bins: int) -> int:
    """Bin index of ``theta`` under a uniform partition of (-pi, pi].

    Bin ``i`` covers the half-open interval (-pi + i*step, -pi + (i+1)*step].
    """
    if n_bins < 1:
        raise GeoError(f"n_bins must be >= 1, got {n_bins}")
    if not (-math.pi < theta <= math.pi):
        raise GeoError(f"theta {theta} outside (-pi, pi]")
    step = 2.0 * math.pi / n_bins
    idx = int(math.ceil((theta + math.pi) / step)) - 1
    return min(max(idx, 0), n_bins - 1)


def bin_center(i: int, n_bins: int) -> float:
    """Midpoint angle of bin ``i``."""
    step = 2.0 * math.pi / n_bins
    return -math.pi + (i + 0.5) * step


def bin_centers(n_bins: int) -> np.ndarray:
    return np.array([bin_center(i, n_bins) for i in range(n_bins)])


def sample_along(
    s: RoadSegment,
    frame: PixelFrame,
    spacing_m: float,
    lateral_m: float,
) -> list[DirectedSample]:
    """Directed samples along a segment, replicated at lateral offsets.

    Samples sit at arc-length multiples of ``spacing_m`` (both endpoints
    included when the length is an exact multiple) and are copied at
    integer-meter perpendicular offsets in [-lateral_m, +lateral_m]. Each
    carries the tangent angle of its generating piece; samples whose pixel
    falls outside the frame are dropped.
    """
    if spacing_m <= 0:
        raise GeoError(f"spacing_m must be > 0, got {spacing_m}")
    if lateral_m < 0:
        raise GeoError(f"lateral_m must be >= 0, got {lateral_m}")

    xy = _segment_xy(s, frame)
    pieces = []  # (cum_start, length, ax, ay, ux, uy, theta)
    cum = 0.0
    for (ax, ay), (bx, by) in zip(xy, xy[1:]):
        dx = bx - ax
        dy = by - ay
        ln = math.sqrt(dx * dx + dy * dy)
        if ln == 0.0:
            continue
        ux, uy = dx / ln, dy / ln
        pieces.append((cum, ln, ax, ay, ux, uy, direction_to_angle((ux, uy))))
        cum += ln
    total = cum
    if not pieces:
        return []

    n_steps = int(math.floor(total / spacing_m + 1e-9))
    offsets = range(-int(math.floor(lateral_m + 1e-9)), int(math.floor(lateral_m + 1e-9)) + 1)

    out: list[DirectedSample] = []
    at = 0
    for k in range(n_steps + 1):
        t = min(k * spacing_m, total)
        while at + 1 < len(pieces) and t > pieces[at][0] + pieces[at][1] + 1e-12:
            at += 1
        cum0, ln, ax, ay, ux, uy, theta = pieces[at]
        local = min(max(t - cum0, 0.0), ln)
        x = ax + ux * local
        y = ay + uy * local
        nx, ny = -uy, ux  # left normal
        for off in offsets:
            row_f, col_f = frame.xy_to_pixel(x + off * nx, y + off * ny)
            row = int(math.floor(row_f + 0.5))
            col = int(math.floor(col_f + 0.5))
            if frame.contains(row, col):
                out.append(DirectedSample(pixel=(row, col), theta=theta, segment_id=s.id))
    return out


def segments_to_geojson(segments: list[RoadSegment]) -> dict:
    """GeoJSON FeatureCollection of LineStrings with {id, twin_id} properties."""
    features = []
    for s in segments:
        features.append({
            "type": "Feature",
            "geometry": {
                "type": "LineString",
                "coordinates": [[p.lon, p.lat] for p in s.points],
            },
            "properties": {"id": s.id, "twin_id": s.twin_id},
        })
    return {"type": "FeatureCollection", "features": features}


def segments_from_geojson(doc: dict) -> list[RoadSegment]:
    """Parse road segments from a FeatureCollection of LineStrings."""
    if doc.get("type") != "FeatureCollection":
        raise GeoError("expected a GeoJSON FeatureCollection")
    segments = []
    for feat in doc.get("features", []):
        geom = feat.get("geometry") or {}
        if geom.get("type") != "LineString":
            continue
        props = feat.get("properties") or {}
        points = [GeoPoint(lat, lon) for lon, lat in geom["coordinates"]]
        segments.append(RoadSegment(
            id=str(props["id"]), points=points,
            twin_id=props.get("twin_id"),
        ))
    return segments


def write_segments_geojson(path, segments: list[RoadSegment]) -> None:
    with open(path, "w", encoding="utf-8") as f:
        json.dump(segments_to_geojson(segments), f, sort_keys=True)
        f.write("\n")


def read_segments_geojson(path) -> list[RoadSegment]:
    with open(path, "r", encoding="utf-8") as f:
        return segments_from_geojson(json.load(f))
