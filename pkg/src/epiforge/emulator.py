"""Dilated causal convolutional emulator written directly in numpy.

The network maps a window of H daily frames (data channels plus parameter
planes) to the next day's data channels. Temporal convolutions are causal:
the output at time t reads inputs t, t-d, t-2d, ... only, with zero padding
on the left. Spatial convolutions use symmetric zero padding and keep the
grid size.

Activations are kept channels-last, ``(batch, time, row, col, channel)``.
Only the final time step feeds the prediction, so forward and backward
passes evaluate each layer only at the time indices that step depends on.
The result is identical to evaluating every time index and then taking the
last one.
"""

from __future__ import annotations

import copy
import json
import logging
import math
import struct
import time
import zlib
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .dataset import ChannelNormalizer, WindowSet, param_planes
from .heatmap import HeatmapSequence, ParamTrack

log = logging.getLogger(__name__)

CONV, POINTWISE, ACTIVATION = "dilated_causal_conv", "pointwise_conv", "activation"
_KIND_TAGS = {CONV: 0, POINTWISE: 1, ACTIVATION: 2}
_ACT_TAGS = {"relu": 0, "identity": 1}

EMW_MAGIC = b"EMW1"
EMW_VERSION = 1


class ShapeError(ValueError):
    pass


class WeightsFormatError(ValueError):
    pass


class TrainingDiverged(RuntimeError):
    pass


@dataclass(frozen=True)
class LayerSpec:
    kind: str
    in_channels: int = 0
    out_channels: int = 0
    temporal_kernel: int = 1
    spatial_kernel: int = 1
    dilation: int = 1
    activation: str = "relu"

    def __post_init__(self):
        if self.kind not in _KIND_TAGS:
            raise ValueError(f"unknown layer kind {self.kind!r}")
        if self.dilation < 1 or self.temporal_kernel < 1 or self.spatial_kernel < 1:
            raise ValueError("kernel sizes and dilation must be >= 1")
        if self.kind != ACTIVATION and self.spatial_kernel % 2 == 0:
            raise ValueError("spatial kernel must be odd for same-size output")
        if self.kind == POINTWISE and (self.temporal_kernel != 1 or self.spatial_kernel != 1):
            raise ValueError("pointwise layers have 1x1x1 kernels")
        if self.kind == ACTIVATION and self.activation not in _ACT_TAGS:
            raise ValueError(f"unknown activation {self.activation!r}")

    @property
    def has_weights(self) -> bool:
        return self.kind != ACTIVATION

    @property
    def weight_shape(self) -> tuple[int, ...]:
        k = self.spatial_kernel
        return (self.temporal_kernel, k, k, self.in_channels, self.out_channels)

    def to_dict(self) -> dict:
        return {f: getattr(self, f) for f in self.__dataclass_fields__}


@dataclass(frozen=True)
class ArchConfig:
    lookback: int = 5
    n_data: int = 3
    n_params: int = 3
    features: int = 32
    dilations: tuple[int, ...] = (1, 2, 4)
    temporal_kernel: int = 2
    spatial_kernel: int = 3
    residual: bool = True

    def layers(self) -> list[LayerSpec]:
        specs = []
        c_in = self.n_data + self.n_params
        for d in self.dilations:
            specs.append(LayerSpec(CONV, c_in, self.features, self.temporal_kernel, self.spatial_kernel, d))
            specs.append(LayerSpec(ACTIVATION, activation="relu"))
            c_in = self.features
        specs.append(LayerSpec(POINTWISE, c_in, self.n_data))
        return specs


def receptive_field(specs: Sequence[LayerSpec]) -> int:
    return 1 + sum((s.temporal_kernel - 1) * s.dilation for s in specs if s.kind == CONV)


# --- convolution kernels ---------------------------------------------------------------


def _spatial_cols_backward(dcols: np.ndarray, k: int, C: int) -> np.ndarray:
    if k == 1:
        return dcols
    p = k // 2
    B, T, h, w, _ = dcols.shape
    dxp = np.zeros((B, T, h + 2 * p, w + 2 * p, C), dtype=dcols.dtype)
    i = 0
    for dy in range(k):
        for dx in range(k):
            dxp[:, :, dy:dy + h, dx:dx + w] += dcols[..., i * C:(i + 1) * C]
            i += 1
    return dxp[:, :, p:p + h, p:p + w]


def _tap_index(in_times: Sequence[int], out_times: Sequence[int], kt: int, d: int) -> np.ndarray:
    """Index into the input time axis for every (tap, output time); -1 means zero padding."""
    pos = {t: i for i, t in enumerate(in_times)}
    idx = np.empty((kt, len(out_times)), dtype=np.int64)
    for j in range(kt):
        lag = (kt - 1 - j) * d
        for o, t in enumerate(out_times):
            src = t - lag
            if src < 0:
                idx[j, o] = -1
            else:
                idx[j, o] = pos[src]
    return idx


def _conv_cols(x, spec: LayerSpec, idx: np.ndarray) -> np.ndarray:
    """Patch matrix (B, T_out, h, w, k_t*k*k*C), ordered (tap, dy, dx, c) like the weights."""
    B, Ti, h, w, C = x.shape
    k, p = spec.spatial_kernel, spec.spatial_kernel // 2
    padded = np.zeros((B, Ti + 1, h + 2 * p, w + 2 * p, C), dtype=x.dtype)
    padded[:, :Ti, p:p + h, p:p + w] = x
    src = np.where(idx < 0, Ti, idx)  # slot Ti is the zero frame
    # (B, T, h, w, dy, dx, C), then one contiguous copy per tap
    windows = sliding_window_view(padded, (k, k), axis=(2, 3)).transpose(0, 1, 2, 3, 5, 6, 4)
    cols = np.empty((B, src.shape[1], h, w, spec.temporal_kernel, k, k, C), dtype=x.dtype)
    for j in range(spec.temporal_kernel):
        cols[:, :, :, :, j] = windows[:, src[j]]
    return cols.reshape(B, src.shape[1], h, w, -1)


def _conv_apply(cols: np.ndarray, W: np.ndarray, b: np.ndarray) -> np.ndarray:
    K = cols.shape[-1]
    out = cols.reshape(-1, K) @ W.reshape(K, -1)
    out += b
    return out.reshape(cols.shape[:-1] + (W.shape[-1],))


def causal_dilated_conv(x: np.ndarray, W: np.ndarray, b: np.ndarray | None = None, dilation: int = 1) -> np.ndarray:
    """Full-length causal dilated convolution.

    ``x`` has shape (T, C_in, h, w) or (B, T, C_in, h, w); ``W`` has shape
    (k_t, k_s, k_s, C_in, C_out) where tap ``k_t - 1`` reads the current time.
    Returns the same layout with C_out channels and every time index.
    """
    batched = x.ndim == 5
    xb = x if batched else x[None]
    kt, ks, _, cin, cout = W.shape
    if xb.shape[2] != cin:
        raise ShapeError(f"expected {cin} input channels, got {xb.shape[2]}")
    b = np.zeros(cout, W.dtype) if b is None else b
    xl = np.moveaxis(xb, 2, -1)
    times = list(range(xl.shape[1]))
    spec = LayerSpec(CONV, cin, cout, kt, ks, dilation)
    out = _conv_apply(_conv_cols(xl, spec, _tap_index(times, times, kt, dilation)), W, b)
    out = np.moveaxis(out, -1, 2)
    return out if batched else out[0]


# --- the network ------------------------------------------------------------------------


def _plan(specs: Sequence[LayerSpec], H: int) -> list[tuple[list[int], list[int]]]:
    """(input times, output times) per layer for producing time H-1 at the end."""
    needed = [H - 1]
    plan = []
    for s in reversed(specs):
        out_times = sorted(needed)
        if s.kind == CONV:
            ins = {t - j * s.dilation for t in out_times for j in range(s.temporal_kernel)}
            in_times = sorted(t for t in ins if t >= 0)
        else:
            in_times = out_times
        plan.append((in_times, out_times))
        needed = in_times
    return plan[::-1]


@dataclass
class EmulatorNet:
    """Layer stack, weights and (optionally) Adam state of one emulator.

    ``scale`` divides raw data channels into network units; ``cumulative``
    flags channels that must be non-decreasing during rollout.
    """

    specs: list[LayerSpec]
    weights: list[np.ndarray | None]
    biases: list[np.ndarray | None]
    lookback: int
    n_data: int
    n_params: int
    channel_names: tuple[str, ...]
    scale: np.ndarray
    active: np.ndarray
    cumulative: np.ndarray
    residual: bool = True
    use_population: bool = False
    population_scale: float = 1.0
    adam_m: list | None = None
    adam_v: list | None = None
    adam_step: int = 0

    def __post_init__(self):
        first = next(s for s in self.specs if s.has_weights)
        if first.in_channels != self.n_data + self.n_params:
            raise ShapeError(
                f"first layer takes {first.in_channels} channels, layout declares {self.n_data + self.n_params}")
        last = [s for s in self.specs if s.has_weights][-1]
        if last.out_channels != self.n_data:
            raise ShapeError("last layer must emit one channel per data channel")
        self._plan = _plan(self.specs, self.lookback)
        self._taps = [
            _tap_index(i, o, s.temporal_kernel, s.dilation) if s.kind == CONV else None
            for s, (i, o) in zip(self.specs, self._plan)
        ]

    @classmethod
    def build(cls, arch: ArchConfig, normalizer: ChannelNormalizer | None = None,
              channel_names: Sequence[str] = (), seed: int = 0, dtype=np.float32,
              use_population: bool = False, population_scale: float = 1.0) -> "EmulatorNet":
        rng = np.random.Generator(np.random.PCG64(seed))
        specs = arch.layers()
        weights, biases = [], []
        for s in specs:
            if not s.has_weights:
                weights.append(None)
                biases.append(None)
                continue
            fan_in = s.temporal_kernel * s.spatial_kernel ** 2 * s.in_channels
            bound = math.sqrt(6.0 / fan_in)
            weights.append(rng.uniform(-bound, bound, s.weight_shape).astype(dtype))
            biases.append(np.zeros(s.out_channels, dtype))
        if not channel_names:
            channel_names = tuple(f"channel_{i}" for i in range(arch.n_data))
        if normalizer is None:
            scale, active = np.ones(arch.n_data), np.ones(arch.n_data, bool)
        else:
            scale, active = normalizer.scale.astype(np.float64), normalizer.active.copy()
        cumulative = np.array([n.startswith("cumulative") for n in channel_names], bool)
        return cls(specs, weights, biases, arch.lookback, arch.n_data, arch.n_params, tuple(channel_names),
                   scale, active, cumulative, arch.residual, use_population, population_scale)

    @property
    def receptive_field(self) -> int:
        """Days of history the prediction can see; a deeper stack is capped by the window."""
        return min(receptive_field(self.specs), self.lookback)

    @property
    def dtype(self):
        return next(w for w in self.weights if w is not None).dtype

    def parameters(self) -> list[np.ndarray]:
        out = []
        for w, b in zip(self.weights, self.biases):
            if w is not None:
                out.extend([w, b])
        return out

    def copy(self) -> "EmulatorNet":
        return copy.deepcopy(self)

    # -- forward / backward ----------------------------------------------------------

    def _check(self, x: np.ndarray):
        want = (self.lookback, None, None, self.n_data + self.n_params)
        if x.ndim != 5 or x.shape[1] != want[0] or x.shape[4] != want[3]:
            raise ShapeError(f"expected window (B, {self.lookback}, h, w, {want[3]}), got {x.shape}")

    def forward_batch(self, x: np.ndarray, keep: bool = False):
        """Predict next-day frames for windows ``x`` of shape (B, H, h, w, C)."""
        self._check(x)
        x = x.astype(self.dtype, copy=False)
        first_in = self._plan[0][0]
        a = x[:, first_in] if len(first_in) != x.shape[1] else x
        cache = []
        for s, W, b, idx in zip(self.specs, self.weights, self.biases, self._taps):
            if s.kind == ACTIVATION:
                if s.activation == "relu":
                    if keep:
                        mask = a > 0
                        cache.append(mask)
                        a = a * mask
                    else:
                        np.maximum(a, 0, out=a)
                        cache.append(None)
                else:
                    cache.append(None)
                continue
            if s.kind == POINTWISE:
                cols = a
            else:
                cols = _conv_cols(a, s, idx)
            cache.append((cols, a.shape) if keep else None)
            a = _conv_apply(cols, W, b)
        out = a[:, -1]
        # a window with no recorded cases anywhere cannot produce new ones
        alive = np.any(x[..., : self.n_data] != 0, axis=(1, 2, 3, 4))
        if not alive.all():
            out = out * alive[:, None, None, None]
        if self.residual:
            out = out + x[:, -1, :, :, : self.n_data]
        if keep:
            cache.append(alive)
            return out, cache
        return out

    def backward_batch(self, cache, dout: np.ndarray) -> list[np.ndarray]:
        """Gradients (weight, bias per weighted layer) given d(loss)/d(output)."""
        grads_w = [None] * len(self.specs)
        grads_b = [None] * len(self.specs)
        alive = cache[len(self.specs)]
        g = (dout * alive[:, None, None, None])[:, None]
        for li in range(len(self.specs) - 1, -1, -1):
            s = self.specs[li]
            if s.kind == ACTIVATION:
                if s.activation == "relu":
                    g = g * cache[li]
                continue
            cols, in_shape = cache[li]
            W = self.weights[li]
            K = cols.shape[-1]
            g2 = g.reshape(-1, s.out_channels)
            grads_w[li] = (cols.reshape(-1, K).T @ g2).reshape(W.shape)
            grads_b[li] = g2.sum(axis=0)
            if li == 0:
                break
            dcols = (g2 @ W.reshape(K, -1).T).reshape(cols.shape)
            if s.kind == POINTWISE:
                g = dcols
                continue
            idx = self._taps[li]
            width = dcols.shape[-1] // s.temporal_kernel
            B, Ti, h, w, C = in_shape
            dsp = np.zeros((B, Ti + 1, h, w, width), dtype=dcols.dtype)
            for j in range(s.temporal_kernel):
                dsp[:, idx[j]] += dcols[..., j * width:(j + 1) * width]
            g = _spatial_cols_backward(dsp[:, :Ti], s.spatial_kernel, C)
        out = []
        for gw, gb in zip(grads_w, grads_b):
            if gw is not None:
                out.extend([gw, gb])
        return out

    def loss_and_grads(self, x: np.ndarray, y: np.ndarray, channel_weight: np.ndarray | None = None,
                       loss_scale: float = 1.0):
        pred, cache = self.forward_batch(x, keep=True)
        diff = pred - y.astype(pred.dtype)
        if channel_weight is not None:
            diff = diff * channel_weight
        n = diff.size
        loss = loss_scale * float(np.mean(diff.astype(np.float64) ** 2))
        dout = (2.0 * loss_scale / n) * diff
        if channel_weight is not None:
            dout = dout * channel_weight
        return loss, self.backward_batch(cache, dout.astype(pred.dtype))

    # -- channels-first convenience ----------------------------------------------------

    def forward(self, window: np.ndarray) -> np.ndarray:
        """Window (H, n_data + n_params, h, w) -> prediction (1, n_data, h, w)."""
        if window.ndim != 4:
            raise ShapeError(f"expected a (H, C, h, w) window, got shape {window.shape}")
        x = np.moveaxis(window, 1, -1)[None]
        out = self.forward_batch(x)
        return np.moveaxis(out, -1, 1)


def forward(net: EmulatorNet, window: np.ndarray) -> np.ndarray:
    return net.forward(window)


def loss_mse(pred: np.ndarray, target: np.ndarray) -> float:
    pred = np.asarray(pred, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    if pred.shape != target.shape:
        raise ShapeError(f"prediction shape {pred.shape} differs from target shape {target.shape}")
    return float(np.mean((pred - target) ** 2))


def backward(net: EmulatorNet, window: np.ndarray, target: np.ndarray) -> list[np.ndarray]:
    """Exact gradients of ``loss_mse(forward(net, window), target)`` w.r.t. ``net.parameters()``."""
    x = np.moveaxis(window, 1, -1)[None]
    y = np.moveaxis(np.asarray(target).reshape((net.n_data,) + window.shape[2:]), 0, -1)[None]
    return net.loss_and_grads(x, y)[1]


# --- training ---------------------------------------------------------------------------


@dataclass(frozen=True)
class TrainSchedule:
    learning_rate: float = 1e-3
    batch_size: int = 32
    max_epochs: int = 200
    patience: int = 10
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    seed: int = 0
    max_seconds: float | None = None
    # step size is multiplied by decay_factor after decay_patience epochs without improvement
    decay_factor: float = 0.1
    decay_patience: int = 5
    max_decays: int = 2


@dataclass
class TrainHistory:
    train_loss: list[float] = field(default_factory=list)
    val_loss: list[float] = field(default_factory=list)
    best_val: list[float] = field(default_factory=list)
    best_epoch: int = -1
    seconds: float = 0.0
    stopped: str = ""
    learning_rates: list[float] = field(default_factory=list)


def adam_update(net: EmulatorNet, grads: list[np.ndarray], sch: TrainSchedule, lr: float | None = None) -> None:
    params = net.parameters()
    if net.adam_m is None:
        net.adam_m = [np.zeros_like(p) for p in params]
        net.adam_v = [np.zeros_like(p) for p in params]
    net.adam_step += 1
    t = net.adam_step
    c1 = 1 - sch.beta1 ** t
    c2 = 1 - sch.beta2 ** t
    for p, g, m, v in zip(params, grads, net.adam_m, net.adam_v):
        m *= sch.beta1
        m += (1 - sch.beta1) * g
        v *= sch.beta2
        v += (1 - sch.beta2) * g * g
        p -= ((sch.learning_rate if lr is None else lr) * (m / c1) / (np.sqrt(v / c2) + sch.eps)).astype(p.dtype)


def evaluate(net: EmulatorNet, windows: WindowSet, batch: int = 256) -> float:
    cw = net.active.astype(net.dtype)
    total, n = 0.0, 0
    for i in range(0, len(windows), batch):
        pred = net.forward_batch(windows.predictors[i:i + batch])
        diff = (pred - windows.targets[i:i + batch]) * cw
        total += float(np.sum(diff.astype(np.float64) ** 2))
        n += diff.size
    return total / max(n, 1)


def persistence_mse(windows: WindowSet) -> float:
    """MSE of predicting each target by the last predictor frame."""
    last = windows.predictors[:, -1, :, :, : windows.n_data]
    return float(np.mean((last.astype(np.float64) - windows.targets) ** 2))


def train(net: EmulatorNet, train_windows: WindowSet, val_windows: WindowSet,
          schedule: TrainSchedule = TrainSchedule()) -> tuple[EmulatorNet, TrainHistory]:
    """Mini-batch Adam with early stopping; returns the best-on-validation weights."""
    if len(train_windows) == 0 or len(val_windows) == 0:
        raise ValueError("training and validation windows must be nonempty")
    rng = np.random.Generator(np.random.PCG64(schedule.seed))
    hist = TrainHistory()
    cw = net.active.astype(net.dtype)
    best = net.copy()
    best_val = evaluate(net, val_windows)
    since_best = 0
    lr = schedule.learning_rate
    decays = 0
    start = time.perf_counter()
    for epoch in range(schedule.max_epochs):
        order = rng.permutation(len(train_windows))
        running, seen = 0.0, 0
        for i in range(0, order.size, schedule.batch_size):
            sel = np.sort(order[i:i + schedule.batch_size])
            loss, grads = net.loss_and_grads(train_windows.predictors[sel], train_windows.targets[sel], cw)
            if not math.isfinite(loss):
                raise TrainingDiverged(
                    f"loss became {loss} at epoch {epoch}, batch {i // schedule.batch_size}; "
                    f"last train losses {hist.train_loss[-3:]}, best val {best_val:.4g}")
            adam_update(net, grads, schedule, lr)
            running += loss * sel.size
            seen += sel.size
        val = evaluate(net, val_windows)
        if not math.isfinite(val):
            raise TrainingDiverged(f"validation loss became {val} at epoch {epoch}")
        hist.train_loss.append(running / seen)
        hist.val_loss.append(val)
        if val < best_val:
            best_val = val
            best = net.copy()
            hist.best_epoch = epoch
            since_best = 0
        else:
            since_best += 1
        hist.best_val.append(best_val)
        hist.learning_rates.append(lr)
        log.info("epoch %d train %.5g val %.5g best %.5g lr %.1e", epoch, hist.train_loss[-1], val, best_val, lr)
        if since_best >= schedule.decay_patience and decays < schedule.max_decays:
            # resume from the best weights with a smaller step
            lr *= schedule.decay_factor
            decays += 1
            since_best = 0
            net = best.copy()
            continue
        if since_best >= schedule.patience:
            hist.stopped = "patience"
            break
        if schedule.max_seconds is not None and time.perf_counter() - start > schedule.max_seconds:
            hist.stopped = "time budget"
            break
    else:
        hist.stopped = "max epochs"
    hist.seconds = time.perf_counter() - start
    return best, hist


# --- rollout ----------------------------------------------------------------------------


def rollout_batch(net: EmulatorNet, seed_frames: np.ndarray, tracks: Sequence[ParamTrack], T: int) -> np.ndarray:
    """Autoregressive rollout of a batch.

    ``seed_frames`` are raw (B, H, L, h, w) frames; returns raw (B, T, L, h, w)
    values whose first H days are the seed frames. Predictions are clamped to
    be nonnegative and cumulative channels to be non-decreasing.
    """
    B, H, L, h, w = seed_frames.shape
    if H != net.lookback or L != net.n_data:
        raise ShapeError(f"seed frames {seed_frames.shape} do not match lookback {net.lookback} / {net.n_data} channels")
    if len(tracks) != B:
        raise ValueError("one parameter track per rollout required")
    for tr in tracks:
        if tr.T < T:
            raise ValueError(f"parameter track covers {tr.T} days, rollout needs {T}")
    if T < H:
        raise ValueError("rollout length shorter than lookback")
    dt = net.dtype
    scale = net.scale.astype(dt)
    active = net.active
    buf = np.zeros((B, T, h, w, L + net.n_params), dtype=dt)
    for i, tr in enumerate(tracks):
        buf[i, :, :, :, L:] = param_planes(tr, (h, w), net.use_population, net.population_scale)[:T]
    seeds = np.moveaxis(seed_frames, 2, -1).astype(dt)
    buf[:, :H, :, :, :L] = np.where(active, seeds / scale, 0)
    cum = net.cumulative
    for t in range(H, T):
        pred = net.forward_batch(buf[:, t - H:t])
        np.maximum(pred, 0, out=pred)
        if cum.any():
            pred[..., cum] = np.maximum(pred[..., cum], buf[:, t - 1, :, :, :L][..., cum])
        pred[..., ~active] = 0
        buf[:, t, :, :, :L] = pred
    out = buf[..., :L] * scale
    out[:, :H] = seeds
    return np.moveaxis(out, -1, 2).astype(np.float32)


def rollout(net: EmulatorNet, seed_frames: np.ndarray, track: ParamTrack, T: int) -> HeatmapSequence:
    """Single-trajectory rollout; ``seed_frames`` is (H, L, h, w) raw values."""
    values = rollout_batch(net, np.asarray(seed_frames)[None], [track], T)[0]
    return HeatmapSequence(values, net.channel_names)


# --- weights file -----------------------------------------------------------------------
#
# b"EMW1" | u16 version | u32 meta_len | meta JSON | u32 n_layers |
#   per layer: u8 kind | u8 activation | u32 in | u32 out | u32 k_t | u32 k_s | u32 dilation
#              | f32[k_t*k_s*k_s*in*out] weights | f32[out] biases
# | u32 CRC32 of everything before it.  All little-endian.

_LAYER = struct.Struct("<BBIIIII")


def _meta(net: EmulatorNet) -> dict:
    return {
        "lookback": net.lookback, "n_data": net.n_data, "n_params": net.n_params,
        "channel_names": list(net.channel_names), "scale": [float(x) for x in net.scale],
        "active": [bool(x) for x in net.active], "cumulative": [bool(x) for x in net.cumulative],
        "residual": net.residual, "use_population": net.use_population,
        "population_scale": float(net.population_scale),
    }


def weights_bytes(net: EmulatorNet) -> bytes:
    meta = json.dumps(_meta(net), sort_keys=True).encode()
    parts = [EMW_MAGIC, struct.pack("<HI", EMW_VERSION, len(meta)), meta, struct.pack("<I", len(net.specs))]
    for s, W, b in zip(net.specs, net.weights, net.biases):
        parts.append(_LAYER.pack(_KIND_TAGS[s.kind], _ACT_TAGS[s.activation], s.in_channels, s.out_channels,
                                 s.temporal_kernel, s.spatial_kernel, s.dilation))
        if s.has_weights:
            parts.append(np.ascontiguousarray(W, dtype="<f4").tobytes())
            parts.append(np.ascontiguousarray(b, dtype="<f4").tobytes())
    body = b"".join(parts)
    return body + struct.pack("<I", zlib.crc32(body))


def weights_from_bytes(blob: bytes) -> EmulatorNet:
    if len(blob) < 14 or blob[:4] != EMW_MAGIC:
        raise WeightsFormatError("not an EMW1 weights file")
    body, (crc,) = blob[:-4], struct.unpack("<I", blob[-4:])
    if zlib.crc32(body) != crc:
        raise WeightsFormatError("CRC mismatch: weights file is corrupt or truncated")
    version, meta_len = struct.unpack_from("<HI", body, 4)
    if version != EMW_VERSION:
        raise WeightsFormatError(f"unsupported EMW1 version {version}")
    pos = 10
    meta = json.loads(body[pos:pos + meta_len])
    pos += meta_len
    (n_layers,) = struct.unpack_from("<I", body, pos)
    pos += 4
    kinds = {v: k for k, v in _KIND_TAGS.items()}
    acts = {v: k for k, v in _ACT_TAGS.items()}
    specs, weights, biases = [], [], []
    for _ in range(n_layers):
        kind, act, cin, cout, kt, ks, d = _LAYER.unpack_from(body, pos)
        pos += _LAYER.size
        s = LayerSpec(kinds[kind], cin, cout, kt, ks, d, acts[act])
        specs.append(s)
        if s.has_weights:
            n = int(np.prod(s.weight_shape))
            W = np.frombuffer(body, "<f4", n, pos).astype(np.float32).reshape(s.weight_shape)
            pos += 4 * n
            b = np.frombuffer(body, "<f4", cout, pos).astype(np.float32)
            pos += 4 * cout
            weights.append(W)
            biases.append(b)
        else:
            weights.append(None)
            biases.append(None)
    if pos != len(body):
        raise WeightsFormatError("trailing bytes in weights file")
    return EmulatorNet(
        specs, weights, biases, meta["lookback"], meta["n_data"], meta["n_params"], tuple(meta["channel_names"]),
        np.asarray(meta["scale"], dtype=np.float64), np.asarray(meta["active"], bool),
        np.asarray(meta["cumulative"], bool), meta["residual"], meta["use_population"], meta["population_scale"],
    )


def save_weights(net: EmulatorNet, path) -> None:
    Path(path).write_bytes(weights_bytes(net))


def load_weights(path) -> EmulatorNet:
    return weights_from_bytes(Path(path).read_bytes())
