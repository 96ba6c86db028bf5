"""Time-dependent routing and isochrones on the synthetic street grid.

Uses the ground-truth speed function as the prediction source so the demo
runs instantly; swap in a predictions CSV from `dynaflow predict` to route
on model output instead.
"""

from dynaflow.dataset import synth_city
from dynaflow.graphapp import (
    assign_speeds,
    build_graph,
    isochrone,
    isochrone_to_geojson,
    route_to_geojson,
    shortest_path,
)

world = synth_city(grid_n=5, tile_zoom=18, seed=11, spacing_m=100.0)
graph = build_graph(world.segments)
nodes = sorted(graph.nodes)
src, dst = nodes[0], nodes[-1]
print(f"graph: {len(graph.nodes)} nodes, {len(graph.edges)} edges; "
      f"routing {src} -> {dst}")

for day, hour, label in [(0, 4, "Monday 4am"), (0, 8, "Monday 8am")]:
    speeds = {s.id: world.speed_fn(s.id, day, hour) for s in world.segments}
    assign_speeds(graph, speeds)
    by_len = shortest_path(graph, src, dst, weight="length")
    by_time = shortest_path(graph, src, dst, weight="time")
    print(f"\n{label}:")
    print(f"  shortest length: {by_len.total_length_m:7.1f} m via {len(by_len.nodes)} nodes")
    print(f"  fastest time:    {by_time.total_time_s:7.1f} s via {len(by_time.nodes)} nodes")

    iso = isochrone(graph, src, [30.0, 60.0, 120.0])
    reach = [f"{int(b)}s: {len(s)} nodes" for b, s in iso.levels]
    print(f"  isochrone reach: {', '.join(reach)}")

# exportable artifacts
doc = route_to_geojson(graph, by_time, {"day": 0, "hour": 8})
iso_doc = isochrone_to_geojson(graph, iso, {"day": 0, "hour": 8})
print(f"\nroute GeoJSON has {len(doc['features'][0]['geometry']['coordinates'])} points; "
      f"isochrone document has {len(iso_doc['features'])} levels")
