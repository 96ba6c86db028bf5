"""Training objectives.

Road loss is binary cross entropy plus a soft-dice term; orientation is
categorical cross entropy over sparse label instances; speed combines
orientation-weighted composition, differentiable region aggregation over
segment pixel sets, and a Charbonnier penalty; an anisotropic total-variation
term regularizes the raw speed channels. The total is their unit-weight sum
with the regularizer scaled by ``alpha_r``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import ShapeError, Tensor
from .model import compose_at_pixels
from .raster import SpeedSupervisionEntry

DICE_EPS = 1e-6


@dataclass(frozen=True)
class LossConfig:
    alpha_r: float = 1e-2      # total-variation weight
    delta: float = 2.0         # Charbonnier steepness
    concentration: float = 25.0  # orientation-weighting concentration

    def __post_init__(self):
        if self.alpha_r < 0:
            raise ValueError("alpha_r must be >= 0")
        if self.delta <= 0:
            raise ValueError("delta must be > 0")
        if self.concentration < 0:
            raise ValueError("concentration must be >= 0")


@dataclass
class LossReport:
    road: float
    orientation: float
    speed: float
    reg: float
    total: float

    def csv_row(self) -> list[float]:
        return [self.road, self.orientation, self.speed, self.reg, self.total]


def road_loss(logits: Tensor, mask: np.ndarray) -> Tensor:
    """BCE (pixel mean) + (1 - soft dice) on sigmoid probabilities."""
    if logits.data.shape != mask.shape:
        raise ShapeError(f"road_loss: {logits.data.shape} vs {mask.shape}")
    target = Tensor(mask)
    # stable BCE from logits: mean(softplus(x) - x*y)
    bce = ad.tmean(ad.sub(ad.softplus(logits), ad.mul(logits, target)))
    p = ad.sigmoid(logits)
    inter = ad.tsum(ad.mul(p, target))
    denom = ad.add(ad.tsum(p), ad.tsum(target))
    dice = ad.div(ad.add(ad.scale(inter, 2.0), DICE_EPS), ad.add(denom, DICE_EPS))
    return ad.add(bce, ad.sub(ad.scale(dice, -1.0), -1.0))


def orientation_loss(orient_logits: Tensor, labels: list[tuple[int, int, int]] | list[list]) -> Tensor:
    """Mean negative log softmax at labeled bins; empty labels give 0.

    ``orient_logits`` is (N, K, H, W); ``labels`` is one list of
    (row, col, bin) instances per batch item. Duplicate pixels count once per
    instance.
    """
    n, k, h, w = orient_logits.data.shape
    if n >= 1 and labels and isinstance(labels[0], tuple):
        labels = [labels]  # single-image convenience
    ns, rs, cs, bs = [], [], [], []
    for i, lab in enumerate(labels):
        for (r, c, b) in lab:
            if not (0 <= r < h and 0 <= c < w and 0 <= b < k):
                raise ShapeError(f"label out of range: {(r, c, b)}")
            ns.append(i)
            rs.append(r)
            cs.append(c)
            bs.append(b)
    if not ns:
        return Tensor(0.0)
    ns = np.array(ns)
    rs = np.array(rs)
    cs = np.array(cs)
    bs = np.array(bs)
    lse = ad.channel_logsumexp(orient_logits)             # (N, 1, H, W)
    lse_at = ad.take(lse, (ns, np.zeros_like(ns), rs, cs))
    logit_at = ad.take(orient_logits, (ns, bs, rs, cs))
    return ad.tmean(ad.sub(lse_at, logit_at))


def charbonnier(a: Tensor | np.ndarray | float, delta: float = 2.0) -> Tensor:
    """delta^2 * (sqrt(1 + (a/delta)^2) - 1), elementwise."""
    if delta <= 0:
        raise ValueError("delta must be > 0")
    t = a if isinstance(a, Tensor) else Tensor(np.asarray(a, dtype=np.float64))
    scaled = ad.scale(t, 1.0 / delta)
    inner = ad.add(ad.mul(scaled, scaled), 1.0)
    return ad.scale(ad.sub(ad.sqrt(inner), 1.0), delta * delta)


def region_aggregate(speed: Tensor, regions: list[np.ndarray]) -> Tensor:
    """Mean of an H x W map over each pixel region; gradient is 1/|R| inside.

    Regions are (n, 2) integer arrays of (row, col); empty regions are a
    domain error.
    """
    if speed.data.ndim != 2:
        raise ShapeError(f"region_aggregate expects H x W, got {speed.data.shape}")
    for r in regions:
        if len(r) == 0:
            raise ValueError("region_aggregate: empty region")
    h, w = speed.data.shape
    # one gather over flat indices, then per-region means
    all_idx = np.concatenate([np.asarray(r)[:, 0] * w + np.asarray(r)[:, 1] for r in regions])
    gathered = ad.take(_as_1d(speed), all_idx)
    offsets = np.cumsum([0] + [len(r) for r in regions])
    subregions = [np.arange(lo, hi) for lo, hi in zip(offsets[:-1], offsets[1:])]
    return ad.region_mean(gathered, subregions)


def speed_loss(speed_raw: Tensor, supervision: list[list[SpeedSupervisionEntry]] | list[SpeedSupervisionEntry],
               cfg: LossConfig = LossConfig(), mode: str = "aggregate") -> Tensor:
    """Charbonnier on per-segment means of orientation-composed speeds.

    ``speed_raw`` is (N, K, H, W); ``supervision`` holds one entry list per
    batch item. ``mode="aggregate"`` matches segment means (region
    aggregation); ``mode="replicate"`` instead penalizes every pixel against
    the segment target, the naive label-replication baseline. Empty
    supervision yields 0 (a fully masked slot).
    """
    if mode not in ("aggregate", "replicate"):
        raise ValueError(f"unknown speed loss mode: {mode}")
    n = speed_raw.data.shape[0]
    if supervision and isinstance(supervision[0], SpeedSupervisionEntry):
        supervision = [supervision]
    per_segment = []
    for i in range(n):
        entries = supervision[i] if i < len(supervision) else []
        if not entries:
            continue
        img_raw = speed_raw[i]  # (K, H, W)
        for e in entries:
            composed = compose_at_pixels(img_raw, e.pixels, e.thetas, cfg.concentration)
            if mode == "aggregate":
                seg_mean = ad.tmean(composed)
                per_segment.append(charbonnier(ad.sub(seg_mean, e.target_kmh), cfg.delta))
            else:
                resid = ad.sub(composed, e.target_kmh)
                per_segment.append(ad.tmean(charbonnier(resid, cfg.delta)))
    if not per_segment:
        return Tensor(0.0)
    stack = ad.concat([_as_1d(t) for t in per_segment], axis=0)
    return ad.tmean(stack)


def _as_1d(t: Tensor) -> Tensor:
    """Flat view as a graph node; backward restores the original shape."""
    if t.data.ndim == 1:
        return t
    data = t.data.reshape(-1)

    def backward(g):
        t._accum(g.reshape(t.data.shape))
    out = Tensor(data, requires_grad=t.requires_grad, _parents=(t,) if t.requires_grad else ())
    if out.requires_grad:
        out._backward = backward
    return out


def tv_reg(speed_raw: Tensor) -> Tensor:
    """Anisotropic total variation: mean of squared forward differences.

    Input is (K, H, W) or (N, K, H, W). Differences are taken only where
    defined (no wraparound); the mean divides by the count of summed
    difference terms.
    """
    x = speed_raw
    if x.data.ndim == 3:
        x = _expand0(x)
    n, k, h, w = x.data.shape
    if h < 2 or w < 2:
        raise ShapeError("tv_reg needs H, W >= 2")
    dv = ad.sub(x[:, :, 1:, :], x[:, :, :-1, :])
    dh = ad.sub(x[:, :, :, 1:], x[:, :, :, :-1])
    total = ad.add(ad.tsum(ad.mul(dv, dv)), ad.tsum(ad.mul(dh, dh)))
    count = n * k * ((h - 1) * w + h * (w - 1))
    return ad.scale(total, 1.0 / count)


def _expand0(t: Tensor) -> Tensor:
    data = t.data[None]

    def backward(g):
        t._accum(g[0])
    out = Tensor(data, requires_grad=t.requires_grad, _parents=(t,) if t.requires_grad else ())
    if out.requires_grad:
        out._backward = backward
    return out


def total_loss(road_logits: Tensor, orient_logits: Tensor, speed_raw: Tensor,
               mask: np.ndarray, labels, supervision,
               cfg: LossConfig = LossConfig(), speed_mode: str = "aggregate"):
    """Weighted sum of the four terms; returns (scalar tensor, report)."""
    l_road = road_loss(road_logits, mask)
    l_orient = orientation_loss(orient_logits, labels)
    l_speed = speed_loss(speed_raw, supervision, cfg, mode=speed_mode)
    l_reg = tv_reg(speed_raw)
    total = ad.add(ad.add(l_road, l_orient), ad.add(l_speed, ad.scale(l_reg, cfg.alpha_r)))
    report = LossReport(
        road=float(l_road.data), orientation=float(l_orient.data),
        speed=float(l_speed.data), reg=float(l_reg.data), total=float(total.data),
    )
    return total, report
