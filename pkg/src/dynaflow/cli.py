"""Command-line pipeline: synth, rasterize, train, eval, predict, route,
isochrone, render.

Every command takes an optional JSON config file plus flag overrides (flags
win) and produces byte-identical outputs when rerun with the same seed.
Exit codes: 0 success, 2 usage or config error, 3 missing artifact, 4 bad
reference (unknown node, tile, or segment).
"""

from __future__ import annotations

import argparse
import csv
import json
import math
import os
import sys
from pathlib import Path

import numpy as np

from . import geo, graphapp, raster, trainer
from .dataset import SpeedTable, SynthWorld, split_tiles, synth_city
from .geo import TileIndex
from .losses import LossConfig
from .model import (
    ModelConfig,
    bin_centers,
    build_model,
    compose_speed,
    load_checkpoint,
    save_checkpoint,
)

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_MISSING = 3
EXIT_BAD_REF = 4


class CommandError(Exception):
    def __init__(self, code: int, message: str):
        super().__init__(message)
        self.code = code


def thread_count() -> int:
    """Worker-thread cap from DYNAFLOW_THREADS (default 1)."""
    try:
        return max(1, int(os.environ.get("DYNAFLOW_THREADS", "1")))
    except ValueError:
        return 1


# --- config plumbing -----------------------------------------------------------

def _merge_config(args: argparse.Namespace, known: dict) -> dict:
    """File values, overridden by explicitly passed flags, then defaults."""
    cfg = dict(known)
    if getattr(args, "config", None):
        path = Path(args.config)
        if not path.exists():
            raise CommandError(EXIT_MISSING, f"config file not found: {path}")
        with open(path, "r", encoding="utf-8") as f:
            try:
                loaded = json.load(f)
            except json.JSONDecodeError as e:
                raise CommandError(EXIT_USAGE, f"bad config JSON: {e}")
        unknown = sorted(set(loaded) - set(known))
        if unknown:
            raise CommandError(EXIT_USAGE, f"unknown config key(s): {', '.join(unknown)}")
        cfg.update(loaded)
    for key in known:
        val = getattr(args, key, None)
        if val is not None:
            cfg[key] = val
    return cfg


def _require_dir(path, what) -> Path:
    p = Path(path)
    if not p.is_dir():
        raise CommandError(EXIT_MISSING, f"{what} directory not found: {p}")
    return p


def _require_file(path, what) -> Path:
    p = Path(path)
    if not p.is_file():
        raise CommandError(EXIT_MISSING, f"{what} not found: {p}")
    return p


def _prepare_out_dir(path, force: bool) -> Path:
    p = Path(path)
    if p.exists() and any(p.iterdir()) and not force:
        raise CommandError(EXIT_USAGE, f"output directory {p} exists; pass --force to overwrite")
    p.mkdir(parents=True, exist_ok=True)
    return p


def _load_world(world_dir) -> tuple[SynthWorld, SpeedTable]:
    d = _require_dir(world_dir, "world")
    gj = _require_file(d / "world.geojson", "world geometry")
    sc = _require_file(d / "world_meta.json", "world sidecar")
    table_path = _require_file(d / "speeds.csv", "speed table")
    world = SynthWorld.load(gj, sc)
    table = SpeedTable.load(table_path)
    return world, table


def _parse_slots(text: str) -> list[tuple[int, int]]:
    slots = []
    for part in text.split(","):
        part = part.strip()
        if not part:
            continue
        try:
            day_s, hour_s = part.split(":")
            day, hour = int(day_s), int(hour_s)
        except ValueError:
            raise CommandError(EXIT_USAGE, f"bad slot spec {part!r}; use day:hour")
        if not (0 <= day <= 6 and 0 <= hour <= 23):
            raise CommandError(EXIT_USAGE, f"slot out of range: {part}")
        slots.append((day, hour))
    if not slots:
        raise CommandError(EXIT_USAGE, "no slots given")
    return slots


def _split_for(data: trainer.TileData, seed: int):
    tiles = [r.index for r in data.records]
    return split_tiles(tiles, seed=seed)


def _pick_tiles(data, split_name: str, seed: int) -> list[TileIndex]:
    if split_name == "all":
        return [r.index for r in data.records]
    split = _split_for(data, seed)
    try:
        return getattr(split, split_name)
    except AttributeError:
        raise CommandError(EXIT_USAGE, f"unknown split {split_name}")


# --- commands -----------------------------------------------------------------------

def cmd_synth(args) -> int:
    cfg = _merge_config(args, {
        "out": None, "grid_n": 6, "zoom": 18, "seed": 0, "spacing_m": 80.0,
        "asymmetry": 0.0, "tile_px": 128, "coverage": 1.0, "force": False,
    })
    if not cfg["out"]:
        raise CommandError(EXIT_USAGE, "synth needs --out")
    out = _prepare_out_dir(cfg["out"], cfg["force"])
    world = synth_city(int(cfg["grid_n"]), tile_zoom=int(cfg["zoom"]), seed=int(cfg["seed"]),
                       spacing_m=float(cfg["spacing_m"]),
                       directional_asymmetry=float(cfg["asymmetry"]))
    world.save(out / "world.geojson", out / "world_meta.json")
    table = world.ground_truth_table(coverage=float(cfg["coverage"]), seed=int(cfg["seed"]))
    table.save(out / "speeds.csv")
    tile_dir = out / "tiles"
    tile_dir.mkdir(exist_ok=True)
    from .dataset import render_image

    for tile in world.tiles():
        img = render_image(world, tile, int(cfg["tile_px"]))
        raster.save_png(tile_dir / f"z{tile.zoom}_x{tile.x}_y{tile.y}.png",
                        raster.chw_to_png_array(img))
    print(f"synth: {len(world.segments)} segments, {len(world.tiles())} tiles -> {out}")
    return EXIT_OK


def cmd_rasterize(args) -> int:
    cfg = _merge_config(args, {
        "world": None, "out": None, "tile_px": 128, "day": 0, "hour": 8,
        "bins": 16, "force": False,
    })
    if not cfg["world"] or not cfg["out"]:
        raise CommandError(EXIT_USAGE, "rasterize needs --world and --out")
    world, table = _load_world(cfg["world"])
    out = _prepare_out_dir(cfg["out"], cfg["force"])
    day, hour = int(cfg["day"]), int(cfg["hour"])
    n_bins = int(cfg["bins"])
    jobs = []
    for tile in world.tiles():
        frame = geo.tile_pixel_frame(tile, int(cfg["tile_px"]))
        jobs.append((tile, frame))

    def work(job):
        tile, frame = job
        mask = raster.road_mask(frame, world.segments)
        labels = raster.orientation_labels(frame, world.segments, n_bins)
        sup = raster.speed_supervision(frame, world.segments, table, day, hour)
        return tile, mask, labels, sup

    workers = thread_count()
    if workers > 1:
        from concurrent.futures import ThreadPoolExecutor

        with ThreadPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(work, jobs))
    else:
        results = [work(j) for j in jobs]

    for tile, mask, labels, sup in results:
        stem = f"z{tile.zoom}_x{tile.x}_y{tile.y}"
        raster.save_png(out / f"{stem}_road.png", mask)
        raster.write_supervision(out / f"{stem}_labels.json", labels, sup)
        speed_map = np.zeros_like(mask)
        valid = np.zeros_like(mask, dtype=bool)
        for e in sup:
            speed_map[e.pixels[:, 0], e.pixels[:, 1]] = e.target_kmh
            valid[e.pixels[:, 0], e.pixels[:, 1]] = True
        raster.save_png(out / f"{stem}_speed.png", raster.render_speed_raster(speed_map, valid))
    print(f"rasterize: {len(results)} tiles at ({day}, {hour}) -> {out}")
    return EXIT_OK


def _model_config_from(cfg) -> ModelConfig:
    return ModelConfig(
        in_channels=3,
        base_channels=int(cfg["base_channels"]),
        encoder_depth=int(cfg["depth"]),
        n_bins=int(cfg["bins"]),
        embed_dim=int(cfg["embed_dim"]),
        context_into_last_n_convs=int(cfg["context"]),
    )


def cmd_train(args) -> int:
    cfg = _merge_config(args, {
        "world": None, "out": None, "epochs": 20, "batch": 4, "crop": 64,
        "seed": 0, "split_seed": 0, "tile_px": 128, "base_channels": 16,
        "depth": 4, "bins": 16, "embed_dim": 3, "context": 2, "lr": 1e-3,
        "crops_per_tile": 4, "speed_mode": "aggregate", "alpha_r": 1e-2,
        "delta": 2.0, "concentration": 25.0, "force": False,
    })
    if not cfg["world"] or not cfg["out"]:
        raise CommandError(EXIT_USAGE, "train needs --world and --out")
    world, table = _load_world(cfg["world"])
    out = _prepare_out_dir(cfg["out"], cfg["force"])
    data = trainer.build_tile_data(world, int(cfg["tile_px"]), table)
    split = _split_for(data, int(cfg["split_seed"]))
    model = build_model(_model_config_from(cfg), seed=int(cfg["seed"]))
    train_cfg = trainer.TrainConfig(
        batch_size=int(cfg["batch"]), epochs=int(cfg["epochs"]),
        crop_size=int(cfg["crop"]), seed=int(cfg["seed"]), lr=float(cfg["lr"]),
        crops_per_tile=int(cfg["crops_per_tile"]), speed_mode=str(cfg["speed_mode"]),
    )
    loss_cfg = LossConfig(alpha_r=float(cfg["alpha_r"]), delta=float(cfg["delta"]),
                          concentration=float(cfg["concentration"]))
    result = trainer.train(model, data, split.train, split.val, train_cfg, loss_cfg)
    save_checkpoint(out / "checkpoint.bin", result.model)
    with open(out / "training_log.csv", "w", newline="", encoding="utf-8") as f:
        trainer.training_log_to_csv(result.log, f)
    with open(out / "split.json", "w", encoding="utf-8") as f:
        json.dump({
            name: [[t.zoom, t.x, t.y] for t in getattr(split, name)]
            for name in ("train", "val", "test")
        }, f, sort_keys=True)
        f.write("\n")
    best = result.best_val_rmse
    print(f"train: {len(result.log)} steps, best val RMSE "
          f"{best if math.isfinite(best) else 'n/a'} -> {out}")
    return EXIT_OK


def cmd_eval(args) -> int:
    cfg = _merge_config(args, {
        "world": None, "checkpoint": None, "out": None, "split": "test",
        "split_seed": 0, "seed": 0, "tile_px": 128, "policy": "fixed_random_per_image",
        "slots": "", "angle_source": "true_angles", "composition": "orientation",
    })
    if not cfg["world"] or not cfg["checkpoint"]:
        raise CommandError(EXIT_USAGE, "eval needs --world and --checkpoint")
    world, table = _load_world(cfg["world"])
    model = load_checkpoint(_require_file(cfg["checkpoint"], "checkpoint"))
    data = trainer.build_tile_data(world, int(cfg["tile_px"]), table)
    tiles = _pick_tiles(data, str(cfg["split"]), int(cfg["split_seed"]))
    slots = _parse_slots(cfg["slots"]) if cfg["slots"] else None
    report = trainer.evaluate(
        model, data, tiles, policy=str(cfg["policy"]), seed=int(cfg["seed"]),
        slots=slots, angle_source=str(cfg["angle_source"]),
        composition=str(cfg["composition"]))
    rows = report.rows()
    for row in rows:
        print("eval:", ",".join(str(v) for v in row))
    if cfg["out"]:
        with open(cfg["out"], "w", newline="", encoding="utf-8") as f:
            w = csv.writer(f)
            w.writerow(["scope", "speed_rmse", "speed_mae", "speed_r2",
                        "road_f1", "orient_top1", "n_pairs"])
            for row in rows:
                w.writerow([row[0]] + [repr(v) if isinstance(v, float) else v for v in row[1:]])
    return EXIT_OK


def cmd_predict(args) -> int:
    cfg = _merge_config(args, {
        "world": None, "checkpoint": None, "out": None, "slots": "0:4,0:8",
        "split": "all", "split_seed": 0, "tile_px": 128,
        "angle_source": "true_angles",
    })
    if not cfg["world"] or not cfg["checkpoint"] or not cfg["out"]:
        raise CommandError(EXIT_USAGE, "predict needs --world, --checkpoint, --out")
    world, table = _load_world(cfg["world"])
    model = load_checkpoint(_require_file(cfg["checkpoint"], "checkpoint"))
    data = trainer.build_tile_data(world, int(cfg["tile_px"]), table)
    tiles = _pick_tiles(data, str(cfg["split"]), int(cfg["split_seed"]))
    slots = _parse_slots(str(cfg["slots"]))
    preds = trainer.predict_segment_speeds(model, data, tiles, slots,
                                           angle_source=str(cfg["angle_source"]))
    with open(cfg["out"], "w", newline="", encoding="utf-8") as f:
        w = csv.writer(f)
        w.writerow(["segment_id", "day", "hour", "speed_kmh"])
        for (sid, day, hour) in sorted(preds):
            w.writerow([sid, day, hour, repr(preds[(sid, day, hour)])])
    print(f"predict: {len(preds)} rows -> {cfg['out']}")
    return EXIT_OK


def _graph_with_speeds(world_dir, pred_path, day, hour):
    world, _ = _load_world(world_dir)
    graph = graphapp.build_graph(world.segments)
    with open(_require_file(pred_path, "predictions CSV"), "r", encoding="utf-8") as f:
        preds = graphapp.predictions_from_csv(f, day, hour)
    if not preds:
        raise CommandError(EXIT_USAGE, f"no predictions for slot ({day}, {hour})")
    graphapp.assign_speeds(graph, preds)
    return world, graph


def cmd_route(args) -> int:
    cfg = _merge_config(args, {
        "world": None, "pred": None, "src": None, "dst": None, "weight": "time",
        "day": 0, "hour": 8, "out": None,
    })
    for key in ("world", "pred", "src", "dst", "out"):
        if not cfg[key]:
            raise CommandError(EXIT_USAGE, f"route needs --{key}")
    day, hour = int(cfg["day"]), int(cfg["hour"])
    world, graph = _graph_with_speeds(cfg["world"], cfg["pred"], day, hour)
    try:
        route = graphapp.shortest_path(graph, str(cfg["src"]), str(cfg["dst"]),
                                       weight=str(cfg["weight"]))
    except graphapp.GraphError as e:
        raise CommandError(EXIT_BAD_REF, str(e))
    doc = graphapp.route_to_geojson(graph, route, {
        "day": day, "hour": hour, "weight": cfg["weight"], "found": route.found})
    graphapp.write_geojson(cfg["out"], doc)
    print(f"route: {cfg['src']} -> {cfg['dst']} length {route.total_length_m:.1f} m "
          f"time {route.total_time_s} s -> {cfg['out']}")
    return EXIT_OK


def cmd_isochrone(args) -> int:
    cfg = _merge_config(args, {
        "world": None, "pred": None, "src": None, "budgets": "60,120,300",
        "day": 0, "hour": 8, "out": None,
    })
    for key in ("world", "pred", "src", "out"):
        if not cfg[key]:
            raise CommandError(EXIT_USAGE, f"isochrone needs --{key}")
    day, hour = int(cfg["day"]), int(cfg["hour"])
    try:
        budgets = sorted(float(b) for b in str(cfg["budgets"]).split(",") if b.strip())
    except ValueError:
        raise CommandError(EXIT_USAGE, f"bad budgets: {cfg['budgets']}")
    if not budgets:
        raise CommandError(EXIT_USAGE, "no budgets given")
    world, graph = _graph_with_speeds(cfg["world"], cfg["pred"], day, hour)
    try:
        result = graphapp.isochrone(graph, str(cfg["src"]), budgets)
    except graphapp.GraphError as e:
        raise CommandError(EXIT_BAD_REF, str(e))
    doc = graphapp.isochrone_to_geojson(graph, result, {"day": day, "hour": hour})
    graphapp.write_geojson(cfg["out"], doc)
    sizes = [len(s) for _, s in result.levels]
    print(f"isochrone: {cfg['src']} budgets {budgets} reach {sizes} -> {cfg['out']}")
    return EXIT_OK


def cmd_render(args) -> int:
    cfg = _merge_config(args, {
        "world": None, "checkpoint": None, "tile": None, "day": 0, "hour": 8,
        "tile_px": 128, "out": None, "stride": 8, "force": False,
    })
    for key in ("world", "checkpoint", "tile", "out"):
        if not cfg[key]:
            raise CommandError(EXIT_USAGE, f"render needs --{key}")
    world, table = _load_world(cfg["world"])
    model = load_checkpoint(_require_file(cfg["checkpoint"], "checkpoint"))
    try:
        z, x, y = (int(v) for v in str(cfg["tile"]).split("/"))
        tile = TileIndex(x=x, y=y, zoom=z)
    except (ValueError, geo.GeoError):
        raise CommandError(EXIT_USAGE, f"bad tile spec {cfg['tile']!r}; use z/x/y")
    if tile not in set(world.tiles()):
        raise CommandError(EXIT_BAD_REF, f"tile {cfg['tile']} not part of this world")
    out = _prepare_out_dir(cfg["out"], cfg["force"])
    day, hour = int(cfg["day"]), int(cfg["hour"])

    from .dataset import render_image

    size = int(cfg["tile_px"])
    frame = geo.tile_pixel_frame(tile, size)
    image = render_image(world, tile, size)
    model.eval()
    ctx = (model.context_batch([geo.tile_center(tile)], [day], [hour])
           if model.cfg.context_into_last_n_convs > 0 else None)
    road, orient, speed_raw = model.forward(image[None], ctx)
    prob = 1.0 / (1.0 + np.exp(-road.data[0, 0]))
    road_pred = prob > 0.5

    centers = bin_centers(model.cfg.n_bins)
    theta = centers[orient.data[0].argmax(axis=0)]
    speed_map = compose_speed(speed_raw.data[0], theta, 25.0)
    raster.save_png(out / f"speed_d{day}_h{hour}.png",
                    raster.render_speed_raster(speed_map, road_pred))

    flow = _flow_field_png(image, road_pred, theta, int(cfg["stride"]))
    raster.save_png(out / "orientation_flow.png", flow)

    mask = raster.road_mask(frame, world.segments) > 0.5
    raster.save_png(out / "road_error.png", _error_map(image, mask, road_pred))
    print(f"render: tile {cfg['tile']} slot ({day}, {hour}) -> {out}")
    return EXIT_OK


def _flow_field_png(image: np.ndarray, road: np.ndarray, theta: np.ndarray,
                    stride: int) -> np.ndarray:
    """Gray base image with short direction strokes colored by angle."""
    h, w = road.shape
    gray = image.mean(axis=0)
    rgb = np.stack([gray, gray, gray], axis=-1)
    half_len = max(2, stride // 2)
    for r in range(stride // 2, h, stride):
        for c in range(stride // 2, w, stride):
            if not road[r, c]:
                continue
            ang = theta[r, c]
            color = _angle_color(ang)
            for t in np.linspace(-half_len, half_len, 2 * half_len + 1):
                rr = int(round(r - t * math.sin(ang)))
                cc = int(round(c + t * math.cos(ang)))
                if 0 <= rr < h and 0 <= cc < w:
                    rgb[rr, cc] = color
    return np.round(np.clip(rgb, 0, 1) * 255).astype(np.uint8)


def _angle_color(ang: float) -> np.ndarray:
    """Cyclic RGB coloring of an angle in (-pi, pi]."""
    third = 2.0 * math.pi / 3.0
    return np.array([
        0.5 + 0.5 * math.cos(ang),
        0.5 + 0.5 * math.cos(ang - third),
        0.5 + 0.5 * math.cos(ang + third),
    ])


def _error_map(image: np.ndarray, truth: np.ndarray, pred: np.ndarray) -> np.ndarray:
    """False positives purple, false negatives yellow, over the gray image."""
    gray = image.mean(axis=0)
    rgb = np.stack([gray, gray, gray], axis=-1)
    fp = pred & ~truth
    fn = truth & ~pred
    rgb[fp] = (0.6, 0.1, 0.7)
    rgb[fn] = (0.95, 0.9, 0.1)
    return np.round(np.clip(rgb, 0, 1) * 255).astype(np.uint8)


# --- parser ---------------------------------------------------------------------------

def _add_common(p):
    p.add_argument("--config", help="JSON config file; flags override its values")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="dynaflow",
        description="Desk-scale dynamic traffic modeling pipeline")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic world")
    _add_common(p)
    p.add_argument("--out")
    p.add_argument("--grid-n", dest="grid_n", type=int)
    p.add_argument("--zoom", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--spacing-m", dest="spacing_m", type=float)
    p.add_argument("--asymmetry", type=float)
    p.add_argument("--tile-px", dest="tile_px", type=int)
    p.add_argument("--coverage", type=float)
    p.add_argument("--force", action="store_const", const=True)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("rasterize", help="write target rasters for one slot")
    _add_common(p)
    p.add_argument("--world")
    p.add_argument("--out")
    p.add_argument("--tile-px", dest="tile_px", type=int)
    p.add_argument("--day", type=int)
    p.add_argument("--hour", type=int)
    p.add_argument("--bins", type=int)
    p.add_argument("--force", action="store_const", const=True)
    p.set_defaults(func=cmd_rasterize)

    p = sub.add_parser("train", help="train the multi-task model")
    _add_common(p)
    p.add_argument("--world")
    p.add_argument("--out")
    p.add_argument("--epochs", type=int)
    p.add_argument("--batch", type=int)
    p.add_argument("--crop", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--split-seed", dest="split_seed", type=int)
    p.add_argument("--tile-px", dest="tile_px", type=int)
    p.add_argument("--base-channels", dest="base_channels", type=int)
    p.add_argument("--depth", type=int)
    p.add_argument("--bins", type=int)
    p.add_argument("--embed-dim", dest="embed_dim", type=int)
    p.add_argument("--context", type=int, help="context into last N speed convs (0-2)")
    p.add_argument("--lr", type=float)
    p.add_argument("--crops-per-tile", dest="crops_per_tile", type=int)
    p.add_argument("--speed-mode", dest="speed_mode", choices=["aggregate", "replicate"])
    p.add_argument("--alpha-r", dest="alpha_r", type=float)
    p.add_argument("--delta", type=float)
    p.add_argument("--concentration", type=float)
    p.add_argument("--force", action="store_const", const=True)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint")
    _add_common(p)
    p.add_argument("--world")
    p.add_argument("--checkpoint")
    p.add_argument("--out")
    p.add_argument("--split", choices=["train", "val", "test", "all"])
    p.add_argument("--split-seed", dest="split_seed", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--tile-px", dest="tile_px", type=int)
    p.add_argument("--policy", choices=["fixed_random_per_image", "slot_list"])
    p.add_argument("--slots", help="comma list of day:hour for slot_list policy")
    p.add_argument("--angle-source", dest="angle_source",
                   choices=["true_angles", "predicted_argmax"])
    p.add_argument("--composition", choices=["orientation", "uniform"])
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("predict", help="emit per-segment speed predictions")
    _add_common(p)
    p.add_argument("--world")
    p.add_argument("--checkpoint")
    p.add_argument("--out")
    p.add_argument("--slots")
    p.add_argument("--split", choices=["train", "val", "test", "all"])
    p.add_argument("--split-seed", dest="split_seed", type=int)
    p.add_argument("--tile-px", dest="tile_px", type=int)
    p.add_argument("--angle-source", dest="angle_source",
                   choices=["true_angles", "predicted_argmax"])
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("route", help="shortest route at a time slot")
    _add_common(p)
    p.add_argument("--world")
    p.add_argument("--pred", help="segment-speed CSV from predict")
    p.add_argument("--src")
    p.add_argument("--dst")
    p.add_argument("--weight", choices=["time", "length"])
    p.add_argument("--day", type=int)
    p.add_argument("--hour", type=int)
    p.add_argument("--out")
    p.set_defaults(func=cmd_route)

    p = sub.add_parser("isochrone", help="travel-time reach from a node")
    _add_common(p)
    p.add_argument("--world")
    p.add_argument("--pred")
    p.add_argument("--src")
    p.add_argument("--budgets", help="comma list of seconds, ascending")
    p.add_argument("--day", type=int)
    p.add_argument("--hour", type=int)
    p.add_argument("--out")
    p.set_defaults(func=cmd_isochrone)

    p = sub.add_parser("render", help="visualization rasters for one tile")
    _add_common(p)
    p.add_argument("--world")
    p.add_argument("--checkpoint")
    p.add_argument("--tile", help="z/x/y")
    p.add_argument("--day", type=int)
    p.add_argument("--hour", type=int)
    p.add_argument("--tile-px", dest="tile_px", type=int)
    p.add_argument("--stride", type=int)
    p.add_argument("--out")
    p.add_argument("--force", action="store_const", const=True)
    p.set_defaults(func=cmd_render)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except CommandError as e:
        print(f"dynaflow: error: {e}", file=sys.stderr)
        return e.code


if __name__ == "__main__":
    sys.exit(main())
