"""Multi-task traffic network.

A shared residual encoder feeds three decoders (road presence, travel
orientation over angular bins, per-bin traffic speed). Location and time
context is tiled and concatenated into the final convolutions of the speed
decoder only; road and orientation outputs never see it. Desk-scale stage
widths double per stage from ``base_channels``.
"""

from __future__ import annotations

import json
import math
import struct
from dataclasses import dataclass, asdict

import numpy as np

from . import autodiff as ad
from .autodiff import BatchNormState, BoundsError, ShapeError, Tensor
from .geo import GeoPoint, bin_centers


@dataclass(frozen=True)
class ModelConfig:
    in_channels: int = 3
    base_channels: int = 16
    encoder_depth: int = 4
    n_bins: int = 16
    embed_dim: int = 3
    context_into_last_n_convs: int = 2

    def __post_init__(self):
        if self.n_bins < 1:
            raise ValueError(f"n_bins must be >= 1, got {self.n_bins}")
        if self.encoder_depth < 2:
            raise ValueError(f"encoder_depth must be >= 2, got {self.encoder_depth}")
        if not 0 <= self.context_into_last_n_convs <= 2:
            raise ValueError("context_into_last_n_convs must be 0, 1, or 2")

    @property
    def context_dim(self) -> int:
        return 2 + 2 * self.embed_dim


class _Registry:
    def __init__(self):
        self.params: list[tuple[str, Tensor]] = []
        self.bn_states: list[tuple[str, BatchNormState]] = []

    def add(self, name, tensor):
        self.params.append((name, tensor))
        return tensor

    def add_state(self, name, state):
        self.bn_states.append((name, state))
        return state


class Conv:
    def __init__(self, reg, name, in_ch, out_ch, k, rng, pad=None, bias_init=0.0):
        fan_in = in_ch * k * k
        std = math.sqrt(2.0 / fan_in)
        self.w = reg.add(f"{name}.w", Tensor(rng.normal(0.0, std, (out_ch, in_ch, k, k)),
                                             requires_grad=True))
        self.b = reg.add(f"{name}.b", Tensor(np.full(out_ch, float(bias_init)),
                                             requires_grad=True))
        self.pad = (k - 1) // 2 if pad is None else pad

    def __call__(self, x):
        return ad.conv2d(x, self.w, self.b, pad=self.pad)


class BatchNorm:
    def __init__(self, reg, name, ch):
        self.gamma = reg.add(f"{name}.gamma", Tensor(np.ones(ch), requires_grad=True))
        self.beta = reg.add(f"{name}.beta", Tensor(np.zeros(ch), requires_grad=True))
        self.state = reg.add_state(f"{name}", BatchNormState(ch))

    def __call__(self, x, training):
        return ad.batchnorm2d(x, self.gamma, self.beta, self.state, training)


class ResidualBlock:
    """Two 3x3 convs with batchnorm and an additive skip."""

    def __init__(self, reg, name, in_ch, out_ch, rng):
        self.conv1 = Conv(reg, f"{name}.conv1", in_ch, out_ch, 3, rng)
        self.bn1 = BatchNorm(reg, f"{name}.bn1", out_ch)
        self.conv2 = Conv(reg, f"{name}.conv2", out_ch, out_ch, 3, rng)
        self.bn2 = BatchNorm(reg, f"{name}.bn2", out_ch)
        self.proj = Conv(reg, f"{name}.proj", in_ch, out_ch, 1, rng) if in_ch != out_ch else None

    def __call__(self, x, training):
        h = ad.relu(self.bn1(self.conv1(x), training))
        h = self.bn2(self.conv2(h), training)
        skip = self.proj(x) if self.proj is not None else x
        return ad.relu(ad.add(h, skip))


class _Decoder:
    """Upsampling path with additive encoder skips and a two-conv head."""

    def __init__(self, reg, name, cfg: ModelConfig, out_ch: int, ctx_convs: int, rng,
                 out_bias_init: float = 0.0):
        widths = [cfg.base_channels * (2 ** i) for i in range(cfg.encoder_depth + 1)]
        self.stages = []
        for i in range(cfg.encoder_depth, 0, -1):
            conv = Conv(reg, f"{name}.up{i}.conv", widths[i], widths[i - 1], 3, rng)
            bn = BatchNorm(reg, f"{name}.up{i}.bn", widths[i - 1])
            self.stages.append((conv, bn))
        b = widths[0]
        f = cfg.context_dim
        self.ctx_convs = ctx_convs
        c1_in = b + (f if ctx_convs >= 2 else 0)
        c2_in = b + (f if ctx_convs >= 1 else 0)
        self.head_conv = Conv(reg, f"{name}.head.conv", c1_in, b, 3, rng)
        self.head_bn = BatchNorm(reg, f"{name}.head.bn", b)
        self.head_out = Conv(reg, f"{name}.head.out", c2_in, out_ch, 1, rng,
                             bias_init=out_bias_init)

    def __call__(self, feats, context_tiled, training):
        x = feats[-1]
        for (conv, bn), skip in zip(self.stages, reversed(feats[:-1])):
            x = ad.upsample_nearest2x(x)
            x = ad.relu(bn(conv(x), training))
            x = ad.add(x, skip)
        if self.ctx_convs >= 2:
            x = ad.concat([x, context_tiled], axis=1)
        h = ad.relu(self.head_bn(self.head_conv(x), training))
        if self.ctx_convs >= 1:
            h = ad.concat([h, context_tiled], axis=1)
        return self.head_out(h)


class TrafficModel:
    """Shared encoder, three task decoders, and time/location embeddings."""

    def __init__(self, cfg: ModelConfig, seed: int = 0):
        self.cfg = cfg
        self.training = True
        rng = np.random.default_rng(seed)
        reg = _Registry()

        widths = [cfg.base_channels * (2 ** i) for i in range(cfg.encoder_depth + 1)]
        self.stem_conv = Conv(reg, "stem.conv", cfg.in_channels, widths[0], 3, rng)
        self.stem_bn = BatchNorm(reg, "stem.bn", widths[0])
        self.enc_blocks = [
            ResidualBlock(reg, f"enc{i}", widths[i - 1], widths[i], rng)
            for i in range(1, cfg.encoder_depth + 1)
        ]
        self.road_decoder = _Decoder(reg, "road", cfg, 1, 0, rng)
        self.orient_decoder = _Decoder(reg, "orient", cfg, cfg.n_bins, 0, rng)
        # the speed head starts at a plausible urban speed; softplus(30) is
        # 30 km/h, so learning perturbs around the citywide scale instead of
        # climbing from zero against the saturated Charbonnier gradient
        self.speed_decoder = _Decoder(reg, "speed", cfg, cfg.n_bins,
                                      cfg.context_into_last_n_convs, rng,
                                      out_bias_init=30.0)

        self.day_embedding = reg.add(
            "embed.day", Tensor(rng.normal(0.0, 1.0, (7, cfg.embed_dim)) * 0.01,
                                requires_grad=True))
        self.hour_embedding = reg.add(
            "embed.hour", Tensor(rng.normal(0.0, 1.0, (24, cfg.embed_dim)) * 0.01,
                                 requires_grad=True))

        # frozen from the training tiles before optimization starts
        self.lat_mean, self.lat_std = 0.0, 1.0
        self.lon_mean, self.lon_std = 0.0, 1.0

        self._registry = reg

    # -- bookkeeping ---------------------------------------------------------
    def parameters(self) -> list[tuple[str, Tensor]]:
        return list(self._registry.params)

    def bn_states(self) -> list[tuple[str, BatchNormState]]:
        return list(self._registry.bn_states)

    def parameter_count(self) -> int:
        return sum(p.data.size for _, p in self.parameters())

    def zero_grad(self):
        for _, p in self.parameters():
            p.zero_grad()

    def train(self):
        self.training = True

    def eval(self):
        self.training = False

    def set_location_normalization(self, lat_mean, lat_std, lon_mean, lon_std):
        self.lat_mean = float(lat_mean)
        self.lat_std = float(lat_std) if lat_std > 0 else 1.0
        self.lon_mean = float(lon_mean)
        self.lon_std = float(lon_std) if lon_std > 0 else 1.0

    # -- context ----------------------------------------------------------------
    def context_batch(self, points: list[GeoPoint], days, hours) -> Tensor:
        """(N, 2 + 2*embed_dim) context rows; gradients reach one row per table."""
        days = np.asarray(days)
        hours = np.asarray(hours)
        if np.any(days < 0) or np.any(days > 6):
            raise BoundsError(f"day out of range 0..6: {days}")
        if np.any(hours < 0) or np.any(hours > 23):
            raise BoundsError(f"hour out of range 0..23: {hours}")
        loc = np.array([
            [(p.lat - self.lat_mean) / self.lat_std, (p.lon - self.lon_mean) / self.lon_std]
            for p in points
        ])
        d = ad.embedding_lookup(self.day_embedding, days)
        h = ad.embedding_lookup(self.hour_embedding, hours)
        return ad.concat([Tensor(loc), d, h], axis=1)

    def context_feature(self, p: GeoPoint, day: int, hour: int) -> Tensor:
        """Single context row of dimension 2 + 2*embed_dim."""
        batch = self.context_batch([p], [day], [hour])
        return batch[0]

    # -- forward ------------------------------------------------------------------
    def forward(self, images, contexts: Tensor | None = None):
        """(road_logits N1HW, orient_logits NKHW, speed_raw NKHW >= 0)."""
        x = images if isinstance(images, Tensor) else Tensor(images)
        if x.data.ndim != 4:
            raise ShapeError(f"images must be NCHW, got {x.data.shape}")
        n, c, h, w = x.data.shape
        stride = 2 ** self.cfg.encoder_depth
        if h % stride or w % stride:
            raise ShapeError(f"H and W must be divisible by {stride}, got {h}x{w}")

        feats = [ad.relu(self.stem_bn(self.stem_conv(x), self.training))]
        for block in self.enc_blocks:
            feats.append(block(ad.maxpool2x(feats[-1]), self.training))

        ctx_tiled = None
        if self.cfg.context_into_last_n_convs > 0:
            if contexts is None:
                raise ShapeError("this configuration requires context features")
            if contexts.data.shape != (n, self.cfg.context_dim):
                raise ShapeError(
                    f"contexts must be ({n}, {self.cfg.context_dim}), got {contexts.data.shape}")
            ctx_tiled = ad.tile_spatial(contexts, h, w)

        road = self.road_decoder(feats, None, self.training)
        orient = self.orient_decoder(feats, None, self.training)
        speed = ad.softplus(self.speed_decoder(feats, ctx_tiled, self.training))
        return road, orient, speed


def build_model(cfg: ModelConfig, seed: int = 0) -> TrafficModel:
    """Deterministic construction: He fan-in convs, zero biases, 0.01-scaled embeddings."""
    return TrafficModel(cfg, seed=seed)


# --- orientation-weighted composition --------------------------------------------

def von_mises_weights(theta, centers: np.ndarray, concentration: float) -> np.ndarray:
    """exp(k*cos(theta - mu)) per bin center, normalized to sum to one.

    ``theta`` may be a scalar or an array; the bin axis comes first in the
    result. Stabilized by subtracting the max exponent before exponentiation.
    """
    th = np.asarray(theta, dtype=np.float64)
    logits = concentration * np.cos(th[None, ...] - centers.reshape((-1,) + (1,) * th.ndim))
    logits = logits - logits.max(axis=0, keepdims=True)
    w = np.exp(logits)
    return w / w.sum(axis=0, keepdims=True)


def compose_speed(speed_raw: np.ndarray, theta, concentration: float = 25.0) -> np.ndarray:
    """Convex combination of per-bin speed channels at the given angle(s).

    speed_raw is (K, H, W); theta broadcasts over (H, W). concentration = 0
    reduces to the unweighted channel mean.
    """
    k_bins = speed_raw.shape[0]
    th = np.broadcast_to(np.asarray(theta, dtype=np.float64), speed_raw.shape[1:])
    w = von_mises_weights(th, bin_centers(k_bins), concentration)
    return (w * speed_raw).sum(axis=0)


def compose_speed_uniform(speed_raw: np.ndarray) -> np.ndarray:
    """Equal-weighted average over the bin channels."""
    return speed_raw.mean(axis=0)


def compose_at_pixels(speed_raw: Tensor, pixels: np.ndarray, thetas: np.ndarray,
                      concentration: float = 25.0) -> Tensor:
    """Differentiable orientation-weighted speed at listed pixels.

    speed_raw is a (K, H, W) tensor, pixels an (n, 2) array of (row, col),
    thetas the per-pixel true angles. Returns an (n,) tensor.
    """
    k_bins = speed_raw.data.shape[0]
    w = von_mises_weights(np.asarray(thetas), bin_centers(k_bins), concentration)  # (K, n)
    kk = np.arange(k_bins)[:, None]
    rr = pixels[:, 0][None, :]
    cc = pixels[:, 1][None, :]
    vals = ad.take(speed_raw, (kk, rr, cc))  # (K, n)
    return ad.tsum(ad.mul(vals, Tensor(w)), axis=0)


def predict_with_angle_source(model: TrafficModel, image: np.ndarray, context,
                              source: str, true_theta: np.ndarray | None = None,
                              concentration: float = 25.0):
    """Per-pixel speed map using true angles or the predicted argmax bin."""
    if source not in ("true_angles", "predicted_argmax"):
        raise ValueError(f"unknown angle source: {source}")
    if source == "true_angles" and true_theta is None:
        raise ValueError("true_angles source requires a theta raster")
    was_training = model.training
    model.eval()
    try:
        images = image[None] if image.ndim == 3 else image
        _, orient, speed = model.forward(images, context)
    finally:
        model.training = was_training
    speed_raw = speed.data[0]
    if source == "true_angles":
        theta = true_theta
    else:
        centers = bin_centers(model.cfg.n_bins)
        theta = centers[orient.data[0].argmax(axis=0)]
    return compose_speed(speed_raw, theta, concentration)


# --- checkpoints -------------------------------------------------------------------

_CKPT_MAGIC = b"DYFW0001"


def save_checkpoint(path, model: TrafficModel) -> None:
    """Versioned header plus named parameter table and batchnorm statistics."""
    params = model.parameters()
    states = model.bn_states()
    header = {
        "version": 1,
        "config": asdict(model.cfg),
        "normalization": {
            "lat_mean": model.lat_mean, "lat_std": model.lat_std,
            "lon_mean": model.lon_mean, "lon_std": model.lon_std,
        },
        "parameters": [{"name": n, "shape": list(p.data.shape)} for n, p in params],
        "bn_states": [n for n, _ in states],
    }
    blob = json.dumps(header, sort_keys=True).encode()
    with open(path, "wb") as f:
        f.write(_CKPT_MAGIC)
        f.write(struct.pack("<I", len(blob)))
        f.write(blob)
        for _, p in params:
            ad.write_array(f, p.data)
        for _, st in states:
            ad.write_array(f, st.running_mean)
            ad.write_array(f, st.running_var)


def load_checkpoint(path) -> TrafficModel:
    with open(path, "rb") as f:
        magic = f.read(8)
        if magic != _CKPT_MAGIC:
            raise ValueError(f"not a checkpoint file: {magic!r}")
        (hlen,) = struct.unpack("<I", f.read(4))
        header = json.loads(f.read(hlen).decode())
        cfg = ModelConfig(**header["config"])
        model = TrafficModel(cfg, seed=0)
        norm = header["normalization"]
        model.set_location_normalization(norm["lat_mean"], norm["lat_std"],
                                         norm["lon_mean"], norm["lon_std"])
        by_name = dict(model.parameters())
        for spec in header["parameters"]:
            arr = ad.read_array(f)
            p = by_name[spec["name"]]
            if list(arr.shape) != list(p.data.shape):
                raise ValueError(f"shape mismatch for {spec['name']}")
            p.data = arr
        states = dict(model.bn_states())
        for name in header["bn_states"]:
            states[name].running_mean = ad.read_array(f)
            states[name].running_var = ad.read_array(f)
    return model
