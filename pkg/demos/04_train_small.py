"""Train a small model end to end and watch it pick up time structure.

Uses a compact configuration so the run finishes in a few minutes on a
laptop CPU. The full-size settings live in the CLI defaults.
"""

from dynaflow.dataset import synth_city
from dynaflow.model import ModelConfig, build_model
from dynaflow.trainer import TrainConfig, build_tile_data, evaluate, train

world = synth_city(grid_n=4, tile_zoom=18, seed=3, spacing_m=80.0)
data = build_tile_data(world, tile_px=64)
tiles = [r.index for r in data.records]
train_tiles, val_tiles, test_tiles = tiles[:-2], tiles[-2:-1], tiles[-1:]
print(f"{len(tiles)} tiles: {len(train_tiles)} train, 1 val, 1 test")

model = build_model(ModelConfig(base_channels=8, encoder_depth=3, n_bins=16), seed=0)
# lr raised from the 1e-3 default: desk-scale runs take hundreds of steps,
# not the tens of thousands the default is tuned for
cfg = TrainConfig(batch_size=4, epochs=12, crop_size=64, seed=0, crops_per_tile=8,
                  lr=3e-2)
result = train(model, data, train_tiles, val_tiles, cfg)
print("val RMSE by epoch:", [f"{v:.1f}" for v in result.val_history])

report = evaluate(result.model, data, test_tiles, seed=9)
print(f"test: RMSE {report.speed_rmse:.2f} km/h, MAE {report.speed_mae:.2f}, "
      f"R2 {report.speed_r2 if report.speed_r2 is None else round(report.speed_r2, 3)}, "
      f"road F1 {report.road_f1:.3f}, orientation top-1 {report.orient_top1:.3f}")

# the injected rush hour: predictions for one residential segment over Monday
from dynaflow.trainer import predict_segment_speeds

seg = next(s for s in data.records[0].segments
           if world.segment_class(s.id) == "residential")
slots = [(0, h) for h in (4, 8, 12)]
preds = predict_segment_speeds(result.model, data, tiles, slots)
for h in (4, 8, 12):
    key = (seg.id, 0, h)
    if key in preds:
        truth = world.speed_fn(seg.id, 0, h)
        print(f"Mon {h:2d}h  predicted {preds[key]:6.2f}  truth {truth:6.2f} km/h")
