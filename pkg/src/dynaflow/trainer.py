"""Optimization and the dynamic-time training loop.

RAdam (variance-rectified Adam) wrapped in Lookahead drives the parameters.
Each training step draws a tile, a random crop, and a (day, hour) slot with
supervision on that tile, rasterizes the targets on the fly, and applies one
update. Model selection keeps the checkpoint with the best validation speed
RMSE. Everything is deterministic given the seed.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import geo, losses, raster
from .autodiff import Tensor
from .dataset import DomainError, SpeedTable, SynthWorld
from .geo import PixelFrame, RoadSegment, TileIndex
from .losses import LossConfig
from .model import TrafficModel, bin_centers


# --- optimizers ---------------------------------------------------------------

class RAdam:
    """Rectified Adam. The adaptive step engages only once the variance
    rectification term rho_t exceeds 4; earlier steps are unadapted."""

    def __init__(self, params: list[Tensor], lr: float = 1e-3,
                 betas: tuple[float, float] = (0.9, 0.999), eps: float = 1e-8):
        self.params = list(params)
        self.lr = lr
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.t = 0
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]

    def zero_grad(self):
        for p in self.params:
            p.zero_grad()

    def step(self):
        self.t += 1
        t = self.t
        b1, b2 = self.beta1, self.beta2
        rho_inf = 2.0 / (1.0 - b2) - 1.0
        b2_t = b2 ** t
        rho_t = rho_inf - 2.0 * t * b2_t / (1.0 - b2_t)
        bias1 = 1.0 - b1 ** t
        if rho_t > 4.0:
            rect = math.sqrt(
                ((rho_t - 4.0) * (rho_t - 2.0) * rho_inf)
                / ((rho_inf - 4.0) * (rho_inf - 2.0) * rho_t))
        else:
            rect = None
        for p, m, v in zip(self.params, self.m, self.v):
            g = p.grad if p.grad is not None else 0.0
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * (g * g if isinstance(g, np.ndarray) else 0.0)
            m_hat = m / bias1
            if rect is not None:
                p.data -= self.lr * rect * math.sqrt(1.0 - b2_t) * m_hat / (np.sqrt(v) + self.eps)
            else:
                p.data -= self.lr * m_hat


class Lookahead:
    """Slow/fast weight interpolation around an inner optimizer.

    Every ``sync_period`` inner steps: slow += alpha * (fast - slow), then the
    fast weights restart from the slow weights.
    """

    def __init__(self, inner, sync_period: int = 5, alpha: float = 0.5):
        self.inner = inner
        self.sync_period = sync_period
        self.alpha = alpha
        self.counter = 0
        self.slow = [p.data.copy() for p in inner.params]

    @property
    def params(self):
        return self.inner.params

    def zero_grad(self):
        self.inner.zero_grad()

    def step(self):
        self.inner.step()
        self.counter += 1
        if self.counter % self.sync_period == 0:
            for p, s in zip(self.inner.params, self.slow):
                s += self.alpha * (p.data - s)
                p.data[...] = s


# --- metrics -------------------------------------------------------------------

def rmse(y, yhat) -> float:
    y, yhat = _pair(y, yhat)
    return float(np.sqrt(np.mean((y - yhat) ** 2)))


def mae(y, yhat) -> float:
    y, yhat = _pair(y, yhat)
    return float(np.mean(np.abs(y - yhat)))


def r2(y, yhat) -> float:
    y, yhat = _pair(y, yhat)
    ss_tot = float(np.sum((y - y.mean()) ** 2))
    if ss_tot == 0.0:
        raise DomainError("r2 undefined for zero-variance targets")
    ss_res = float(np.sum((y - yhat) ** 2))
    return 1.0 - ss_res / ss_tot


def f1_score(target_mask, prob_mask, threshold: float = 0.5) -> float:
    t = np.asarray(target_mask).astype(bool).ravel()
    p = (np.asarray(prob_mask).ravel() > threshold)
    if t.size == 0:
        raise DomainError("f1 on empty input")
    tp = int(np.sum(t & p))
    fp = int(np.sum(~t & p))
    fn = int(np.sum(t & ~p))
    if tp + fp + fn == 0:
        return 1.0
    return 2.0 * tp / (2.0 * tp + fp + fn)


def top1_accuracy(true_bins, predicted_bins) -> float:
    t = np.asarray(true_bins)
    p = np.asarray(predicted_bins)
    if t.size == 0:
        raise DomainError("top1 on empty input")
    return float(np.mean(t == p))


def _pair(y, yhat):
    y = np.asarray(y, dtype=np.float64)
    yhat = np.asarray(yhat, dtype=np.float64)
    if y.size == 0:
        raise DomainError("metric on empty input")
    if y.shape != yhat.shape:
        raise DomainError(f"metric shape mismatch: {y.shape} vs {yhat.shape}")
    return y, yhat


# --- tile data -------------------------------------------------------------------

@dataclass
class TileRecord:
    index: TileIndex
    frame: PixelFrame
    image: np.ndarray                    # (C, size, size)
    segments: list[RoadSegment]          # segments whose buffer can touch the tile
    slots: list[tuple[int, int]]         # sorted supervised (day, hour) slots


@dataclass
class TileData:
    records: list[TileRecord]
    table: SpeedTable
    tile_px: int

    def by_index(self) -> dict[TileIndex, TileRecord]:
        return {r.index: r for r in self.records}


def build_tile_data(world: SynthWorld, tile_px: int,
                    table: SpeedTable | None = None,
                    margin_m: float = 8.0) -> TileData:
    """Render per-tile imagery and attach intersecting segments and slots."""
    from .dataset import render_image

    table = table if table is not None else world.ground_truth_table()
    records = []
    for tile in world.tiles():
        frame = geo.tile_pixel_frame(tile, tile_px)
        half_extent = tile_px / 2.0 * frame.meters_per_pixel + margin_m
        segs = []
        for s in world.segments:
            xs, ys = zip(*(frame.xy_m(p) for p in s.points))
            if (min(xs) <= half_extent and max(xs) >= -half_extent
                    and min(ys) <= half_extent and max(ys) >= -half_extent):
                segs.append(s)
        slots = sorted(table.slots_for([s.id for s in segs]))
        records.append(TileRecord(
            index=tile, frame=frame, image=render_image(world, tile, tile_px),
            segments=segs, slots=slots,
        ))
    return TileData(records=records, table=table, tile_px=tile_px)


# --- configuration -----------------------------------------------------------------

@dataclass(frozen=True)
class TrainConfig:
    batch_size: int = 4
    epochs: int = 20
    crop_size: int = 64
    seed: int = 0
    lr: float = 1e-3
    lookahead_sync: int = 5
    lookahead_alpha: float = 0.5
    crops_per_tile: int = 4
    speed_mode: str = "aggregate"   # or "replicate" for the naive baseline


@dataclass
class EvalReport:
    speed_rmse: float
    speed_mae: float
    speed_r2: float | None
    road_f1: float
    orient_top1: float
    n_pairs: int
    per_slot: list[dict] = field(default_factory=list)

    def rows(self) -> list[list]:
        out = [["overall", self.speed_rmse, self.speed_mae,
                "" if self.speed_r2 is None else self.speed_r2,
                self.road_f1, self.orient_top1, self.n_pairs]]
        for s in self.per_slot:
            out.append([f"slot_{s['day']}_{s['hour']}", s["rmse"], s["mae"],
                        "" if s.get("r2") is None else s["r2"],
                        s.get("f1", ""), s.get("top1", ""), s["n_pairs"]])
        return out


@dataclass
class TrainResult:
    model: TrafficModel
    log: list[dict]
    best_val_rmse: float
    val_history: list[float]


# --- target rasterization -------------------------------------------------------------

def rasterize_targets(frame: PixelFrame, segments: list[RoadSegment],
                      table: SpeedTable, day: int, hour: int, n_bins: int):
    mask = raster.road_mask(frame, segments)[None, :, :]
    labels = raster.orientation_labels(frame, segments, n_bins)
    supervision = raster.speed_supervision(frame, segments, table, day, hour)
    return mask, labels, supervision


# --- training loop -----------------------------------------------------------------------

def _snapshot(model: TrafficModel):
    params = [p.data.copy() for _, p in model.parameters()]
    stats = [(st.running_mean.copy(), st.running_var.copy()) for _, st in model.bn_states()]
    return params, stats


def _restore(model: TrafficModel, snap):
    params, stats = snap
    for (_, p), data in zip(model.parameters(), params):
        p.data = data.copy()
    for (_, st), (rm, rv) in zip(model.bn_states(), stats):
        st.running_mean = rm.copy()
        st.running_var = rv.copy()


def train(model: TrafficModel, data: TileData, train_tiles: list[TileIndex],
          val_tiles: list[TileIndex], cfg: TrainConfig,
          loss_cfg: LossConfig = LossConfig()) -> TrainResult:
    """Optimize the model on random crops with dynamically sampled times."""
    stride = 2 ** model.cfg.encoder_depth
    if cfg.crop_size % stride:
        raise DomainError(f"crop_size {cfg.crop_size} not divisible by {stride}")
    by_index = data.by_index()
    train_records = [by_index[t] for t in train_tiles if by_index[t].slots]
    if not train_records:
        raise DomainError("no supervised slots on any training tile")

    # location normalization from the training tiles' centers
    centers = [geo.tile_center(r.index) for r in train_records]
    lats = np.array([c.lat for c in centers])
    lons = np.array([c.lon for c in centers])
    model.set_location_normalization(lats.mean(), lats.std(), lons.mean(), lons.std())

    rng = np.random.default_rng(cfg.seed)
    inner = RAdam([p for _, p in model.parameters()], lr=cfg.lr)
    opt = Lookahead(inner, sync_period=cfg.lookahead_sync, alpha=cfg.lookahead_alpha)

    log: list[dict] = []
    val_history: list[float] = []
    best_rmse = math.inf
    best_snap = _snapshot(model)
    step = 0

    for epoch in range(cfg.epochs):
        order = np.repeat(np.arange(len(train_records)), cfg.crops_per_tile)
        rng.shuffle(order)
        model.train()
        for lo in range(0, len(order), cfg.batch_size):
            batch_ids = order[lo:lo + cfg.batch_size]
            images, points, days, hours = [], [], [], []
            masks, label_lists, sup_lists = [], [], []
            for rec_id in batch_ids:
                rec = train_records[rec_id]
                max_off = data.tile_px - cfg.crop_size
                r0 = int(rng.integers(0, max_off + 1)) if max_off > 0 else 0
                c0 = int(rng.integers(0, max_off + 1)) if max_off > 0 else 0
                day, hour = rec.slots[int(rng.integers(0, len(rec.slots)))]
                sub = rec.frame.crop(r0, c0, cfg.crop_size, cfg.crop_size)
                mask, labels, sup = rasterize_targets(
                    sub, rec.segments, data.table, day, hour, model.cfg.n_bins)
                images.append(rec.image[:, r0:r0 + cfg.crop_size, c0:c0 + cfg.crop_size])
                points.append(sub.pixel_to_geo((cfg.crop_size - 1) / 2, (cfg.crop_size - 1) / 2))
                days.append(day)
                hours.append(hour)
                masks.append(mask)
                label_lists.append(labels)
                sup_lists.append(sup)

            image_batch = np.stack(images)
            mask_batch = np.stack(masks)
            contexts = (model.context_batch(points, days, hours)
                        if model.cfg.context_into_last_n_convs > 0 else None)
            road, orient, speed_raw = model.forward(image_batch, contexts)
            total, report = losses.total_loss(
                road, orient, speed_raw, mask_batch, label_lists, sup_lists,
                loss_cfg, speed_mode=cfg.speed_mode)
            opt.zero_grad()
            total.backward()
            opt.step()
            step += 1
            log.append({
                "epoch": epoch, "step": step, "road": report.road,
                "orientation": report.orientation, "speed": report.speed,
                "reg": report.reg, "total": report.total,
            })

        if val_tiles:
            val_report = evaluate(model, data, val_tiles, seed=cfg.seed)
            val_history.append(val_report.speed_rmse)
            if val_report.speed_rmse < best_rmse:
                best_rmse = val_report.speed_rmse
                best_snap = _snapshot(model)

    if val_tiles and math.isfinite(best_rmse):
        _restore(model, best_snap)
    return TrainResult(model=model, log=log, best_val_rmse=best_rmse,
                       val_history=val_history)


# --- evaluation ----------------------------------------------------------------------------

def predict_segment_speeds(model: TrafficModel, data: TileData,
                           tiles: list[TileIndex], slots: list[tuple[int, int]],
                           angle_source: str = "true_angles",
                           concentration: float = 25.0) -> dict:
    """(segment_id, day, hour) -> mean predicted speed over the segment pixels."""
    by_index = data.by_index()
    model.eval()
    sums: dict[tuple[str, int, int], float] = {}
    counts: dict[tuple[str, int, int], int] = {}
    for tile in tiles:
        rec = by_index[tile]
        center = geo.tile_center(rec.index)
        for (day, hour) in slots:
            sup = raster.speed_supervision(rec.frame, rec.segments, data.table, day, hour)
            if not sup:
                continue
            ctx = (model.context_batch([center], [day], [hour])
                   if model.cfg.context_into_last_n_convs > 0 else None)
            _, orient, speed_raw = model.forward(rec.image[None], ctx)
            raw = speed_raw.data[0]
            if angle_source == "predicted_argmax":
                centers_k = bin_centers(model.cfg.n_bins)
                theta_map = centers_k[orient.data[0].argmax(axis=0)]
            for e in sup:
                if angle_source == "true_angles":
                    thetas = e.thetas
                else:
                    thetas = theta_map[e.pixels[:, 0], e.pixels[:, 1]]
                w = compose_speed_at(raw, e.pixels, thetas, concentration)
                key = (e.segment_id, day, hour)
                sums[key] = sums.get(key, 0.0) + float(w.sum())
                counts[key] = counts.get(key, 0) + len(w)
    return {k: sums[k] / counts[k] for k in sums}


def compose_speed_at(raw: np.ndarray, pixels: np.ndarray, thetas: np.ndarray,
                     concentration: float) -> np.ndarray:
    """Orientation-weighted composition at listed pixels (pure numpy)."""
    from .model import von_mises_weights

    k_bins = raw.shape[0]
    w = von_mises_weights(thetas, bin_centers(k_bins), concentration)
    vals = raw[:, pixels[:, 0], pixels[:, 1]]
    return (w * vals).sum(axis=0)


def compose_uniform_at(raw: np.ndarray, pixels: np.ndarray) -> np.ndarray:
    return raw[:, pixels[:, 0], pixels[:, 1]].mean(axis=0)


def evaluate(model: TrafficModel, data: TileData, tiles: list[TileIndex],
             policy: str = "fixed_random_per_image", seed: int = 0,
             slots: list[tuple[int, int]] | None = None,
             angle_source: str = "true_angles",
             composition: str = "orientation",
             concentration: float = 25.0) -> EvalReport:
    """Segment-mean speed metrics plus road F1 and orientation accuracy.

    ``fixed_random_per_image`` draws one supervised slot per tile from a
    seeded generator, matching the single-timestep protocol; ``slot_list``
    computes metrics per requested slot and averages them equally (macro).
    """
    if policy not in ("fixed_random_per_image", "slot_list"):
        raise DomainError(f"unknown eval policy: {policy}")
    if composition not in ("orientation", "uniform"):
        raise DomainError(f"unknown composition: {composition}")
    by_index = data.by_index()
    was_training = model.training
    model.eval()
    try:
        if policy == "fixed_random_per_image":
            rng = np.random.default_rng(seed)
            plan = []
            for tile in tiles:
                rec = by_index[tile]
                if rec.slots:
                    plan.append((tile, rec.slots[int(rng.integers(0, len(rec.slots)))]))
            groups = [plan]  # one micro-averaged group
        else:
            if not slots:
                raise DomainError("slot_list policy needs slots")
            groups = [[(tile, slot) for tile in tiles if by_index[tile].slots]
                      for slot in slots]

        per_slot = []
        all_y, all_yhat = [], []
        f1s, top1s = [], []
        for group in groups:
            ys, yhats = [], []
            for tile, (day, hour) in group:
                rec = by_index[tile]
                pairs = _tile_pairs(model, data, rec, day, hour, angle_source,
                                    composition, concentration)
                for y, yhat in pairs:
                    ys.append(y)
                    yhats.append(yhat)
                f1, top1 = _tile_dense_metrics(model, rec, day, hour)
                f1s.append(f1)
                top1s.append(top1)
            if policy == "slot_list" and group:
                day, hour = group[0][1]
                entry = {"day": day, "hour": hour, "n_pairs": len(ys)}
                if ys:
                    entry["rmse"] = rmse(ys, yhats)
                    entry["mae"] = mae(ys, yhats)
                    try:
                        entry["r2"] = r2(ys, yhats)
                    except DomainError:
                        entry["r2"] = None
                per_slot.append(entry)
            all_y.extend(ys)
            all_yhat.extend(yhats)

        if policy == "slot_list" and per_slot:
            have = [s for s in per_slot if "rmse" in s]
            speed_rmse = float(np.mean([s["rmse"] for s in have])) if have else math.nan
            speed_mae = float(np.mean([s["mae"] for s in have])) if have else math.nan
            r2_vals = [s["r2"] for s in have if s.get("r2") is not None]
            speed_r2 = float(np.mean(r2_vals)) if r2_vals else None
        else:
            speed_rmse = rmse(all_y, all_yhat) if all_y else math.nan
            speed_mae = mae(all_y, all_yhat) if all_y else math.nan
            try:
                speed_r2 = r2(all_y, all_yhat) if all_y else None
            except DomainError:
                speed_r2 = None

        return EvalReport(
            speed_rmse=speed_rmse, speed_mae=speed_mae, speed_r2=speed_r2,
            road_f1=float(np.mean(f1s)) if f1s else math.nan,
            orient_top1=float(np.mean([t for t in top1s if not math.isnan(t)]))
            if any(not math.isnan(t) for t in top1s) else math.nan,
            n_pairs=len(all_y), per_slot=per_slot,
        )
    finally:
        model.training = was_training


def _tile_pairs(model, data, rec, day, hour, angle_source, composition, concentration):
    sup = raster.speed_supervision(rec.frame, rec.segments, data.table, day, hour)
    if not sup:
        return []
    center = geo.tile_center(rec.index)
    ctx = (model.context_batch([center], [day], [hour])
           if model.cfg.context_into_last_n_convs > 0 else None)
    _, orient, speed_raw = model.forward(rec.image[None], ctx)
    raw = speed_raw.data[0]
    if angle_source == "predicted_argmax":
        centers_k = bin_centers(model.cfg.n_bins)
        theta_map = centers_k[orient.data[0].argmax(axis=0)]
    pairs = []
    for e in sup:
        if composition == "uniform":
            composed = compose_uniform_at(raw, e.pixels)
        else:
            thetas = (e.thetas if angle_source == "true_angles"
                      else theta_map[e.pixels[:, 0], e.pixels[:, 1]])
            composed = compose_speed_at(raw, e.pixels, thetas, concentration)
        pairs.append((e.target_kmh, float(composed.mean())))
    return pairs


def _tile_dense_metrics(model, rec, day, hour):
    ctx = (model.context_batch([geo.tile_center(rec.index)], [day], [hour])
           if model.cfg.context_into_last_n_convs > 0 else None)
    road, orient, _ = model.forward(rec.image[None], ctx)
    mask = raster.road_mask(rec.frame, rec.segments)
    prob = 1.0 / (1.0 + np.exp(-road.data[0, 0]))
    f1 = f1_score(mask, prob)
    labels = raster.orientation_labels(rec.frame, rec.segments, model.cfg.n_bins)
    if labels:
        pred_bins = orient.data[0].argmax(axis=0)
        true_b = np.array([b for _, _, b in labels])
        pred_b = np.array([pred_bins[r, c] for r, c, _ in labels])
        top1 = top1_accuracy(true_b, pred_b)
    else:
        top1 = math.nan
    return f1, top1


def training_log_to_csv(log: list[dict], stream) -> None:
    import csv

    w = csv.writer(stream)
    w.writerow(["epoch", "step", "road", "orientation", "speed", "reg", "total"])
    for row in log:
        w.writerow([row["epoch"], row["step"], repr(row["road"]), repr(row["orientation"]),
                    repr(row["speed"]), repr(row["reg"]), repr(row["total"])])
