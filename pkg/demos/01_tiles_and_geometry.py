"""Tile math and segment geometry on a small frame.

Walks through the geographic primitives: locating the Mercator tile for a
coordinate, building a pixel frame, buffering a road polyline into pixels,
and sampling directed points along it.
"""

import math

from dynaflow import geo
from dynaflow.geo import GeoPoint, RoadSegment

times_square = GeoPoint(40.758, -73.9855)

for zoom in (12, 15, 17):
    tile = geo.latlon_to_tile(times_square, zoom)
    frame = geo.tile_pixel_frame(tile, 256)
    print(f"zoom {zoom:2d}: tile (x={tile.x}, y={tile.y}), "
          f"{frame.meters_per_pixel:.2f} m/px over a 256 px tile")

tile = geo.latlon_to_tile(times_square, 17)
frame = geo.tile_pixel_frame(tile, 128)

# a short diagonal street through the tile center, expressed in local meters
a = frame.pixel_to_geo(*frame.xy_to_pixel(-40.0, -25.0))
b = frame.pixel_to_geo(*frame.xy_to_pixel(40.0, 30.0))
street = RoadSegment(id="demo_street", points=[a, b])
print(f"\nstreet length: {street.length_m:.2f} m")

pixels = geo.buffer_segment(street, frame, half_width_m=2.0)
print(f"2 m buffer covers {len(pixels)} pixels at {frame.meters_per_pixel:.2f} m/px")

samples = geo.sample_along(street, frame, spacing_m=1.0, lateral_m=2.0)
theta = samples[0].theta
print(f"{len(samples)} directed samples; travel angle {math.degrees(theta):.1f} deg "
      f"-> bin {geo.angle_to_bin(theta, 16)} of 16")

rev = street.reversed("demo_street_rev")
rev_theta = geo.sample_along(rev, frame, 1.0, 0.0)[0].theta
print(f"twin direction angle {math.degrees(rev_theta):.1f} deg "
      f"-> bin {geo.angle_to_bin(rev_theta, 16)}")
