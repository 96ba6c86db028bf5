"""Per-tile training targets from segments and a speed table.

Dense road masks from buffered geometry, sparse orientation labels from
arc-length samples, and per-segment speed supervision sets for region
aggregation. Targets are produced on demand for a sampled (day, hour), so
training can draw times dynamically instead of pre-rendering all 168 slots.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from . import geo
from .dataset import SpeedTable
from .geo import PixelFrame, RoadSegment

SAMPLE_SPACING_M = 1.0
SAMPLE_LATERAL_M = 2.0
ROAD_HALF_WIDTH_M = 2.0
SPEED_SCALE_MAX_KMH = 110.0


def road_mask(frame: PixelFrame, segments: list[RoadSegment],
              half_width_m: float = ROAD_HALF_WIDTH_M) -> np.ndarray:
    """Binary H x W union of buffered segments."""
    mask = np.zeros((frame.height, frame.width), dtype=np.float64)
    for s in segments:
        for r, c in geo.buffer_segment(s, frame, half_width_m):
            mask[r, c] = 1.0
    return mask


def orientation_labels(frame: PixelFrame, segments: list[RoadSegment],
                       n_bins: int = 16,
                       spacing_m: float = SAMPLE_SPACING_M,
                       lateral_m: float = SAMPLE_LATERAL_M) -> list[tuple[int, int, int]]:
    """(row, col, bin) label instances; duplicate pixels may carry several bins."""
    labels = []
    for s in segments:
        for d in geo.sample_along(s, frame, spacing_m, lateral_m):
            labels.append((d.pixel[0], d.pixel[1], geo.angle_to_bin(d.theta, n_bins)))
    return labels


@dataclass
class SpeedSupervisionEntry:
    """One segment's in-frame pixels, target mean speed, and per-pixel angles."""

    segment_id: str
    pixels: np.ndarray       # (n, 2) int rows/cols, deduplicated
    target_kmh: float
    thetas: np.ndarray       # (n,) tangent angle at each pixel


def speed_supervision(frame: PixelFrame, segments: list[RoadSegment],
                      table: SpeedTable, day: int, hour: int,
                      spacing_m: float = SAMPLE_SPACING_M,
                      lateral_m: float = SAMPLE_LATERAL_M) -> list[SpeedSupervisionEntry]:
    """Supervision entries for segments with table coverage at (day, hour).

    Segments without a table value at the slot are omitted (loss masking), as
    are segments with no in-frame sample pixels.
    """
    entries = []
    for s in segments:
        rec = table.get(s.id, day, hour)
        if rec is None:
            continue
        samples = geo.sample_along(s, frame, spacing_m, lateral_m)
        if not samples:
            continue
        seen: dict[tuple[int, int], float] = {}
        for d in samples:
            seen.setdefault(d.pixel, d.theta)
        pixels = np.array(sorted(seen.keys()), dtype=np.int64)
        thetas = np.array([seen[(r, c)] for r, c in pixels])
        entries.append(SpeedSupervisionEntry(
            segment_id=s.id, pixels=pixels, target_kmh=rec[0], thetas=thetas))
    return entries


def render_speed_raster(speed_kmh: np.ndarray, valid: np.ndarray | None = None) -> np.ndarray:
    """RGBA uint8 raster on a fixed green-to-red scale over 0..110 km/h.

    0 km/h maps to pure red, 110 km/h to pure green; pixels outside ``valid``
    are fully transparent.
    """
    speed = np.asarray(speed_kmh, dtype=np.float64)
    frac = np.clip(speed / SPEED_SCALE_MAX_KMH, 0.0, 1.0)
    h, w = speed.shape
    rgba = np.zeros((h, w, 4), dtype=np.uint8)
    rgba[..., 0] = np.round(255.0 * (1.0 - frac)).astype(np.uint8)
    rgba[..., 1] = np.round(255.0 * frac).astype(np.uint8)
    rgba[..., 3] = 255
    if valid is not None:
        rgba[~np.asarray(valid, dtype=bool)] = 0
    return rgba


def save_png(path, raster: np.ndarray) -> None:
    """Write an image array as PNG; accepts HxW grayscale, HxWx3, or HxWx4."""
    from PIL import Image

    arr = np.asarray(raster)
    if arr.dtype != np.uint8:
        arr = np.round(np.clip(arr, 0.0, 1.0) * 255.0).astype(np.uint8)
    Image.fromarray(arr).save(path, format="PNG")


def chw_to_png_array(img: np.ndarray) -> np.ndarray:
    """(C, H, W) float image in [0,1] to HxWxC uint8."""
    return np.round(np.clip(img.transpose(1, 2, 0), 0.0, 1.0) * 255.0).astype(np.uint8)


def supervision_sidecar(labels: list[tuple[int, int, int]],
                        entries: list[SpeedSupervisionEntry]) -> dict:
    """JSON-serializable cache of orientation labels and speed supervision."""
    return {
        "orientation": [[int(r), int(c), int(b)] for r, c, b in labels],
        "speed": [
            {
                "segment_id": e.segment_id,
                "pixels": e.pixels.tolist(),
                "target_kmh": e.target_kmh,
                "thetas": e.thetas.tolist(),
            }
            for e in entries
        ],
    }


def supervision_from_sidecar(doc: dict) -> tuple[list[tuple[int, int, int]],
                                                 list[SpeedSupervisionEntry]]:
    labels = [(r, c, b) for r, c, b in doc["orientation"]]
    entries = [
        SpeedSupervisionEntry(
            segment_id=e["segment_id"],
            pixels=np.array(e["pixels"], dtype=np.int64).reshape(-1, 2),
            target_kmh=float(e["target_kmh"]),
            thetas=np.array(e["thetas"], dtype=np.float64),
        )
        for e in doc["speed"]
    ]
    return labels, entries


def write_supervision(path, labels, entries) -> None:
    with open(path, "w", encoding="utf-8") as f:
        json.dump(supervision_sidecar(labels, entries), f, sort_keys=True)
        f.write("\n")


def read_supervision(path):
    with open(path, "r", encoding="utf-8") as f:
        return supervision_from_sidecar(json.load(f))
