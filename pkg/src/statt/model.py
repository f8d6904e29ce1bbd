"""Segmentation network over image time series.

Per time step, a shared convolutional encoder (conv-relu pairs with 2x2
max pooling, channel width doubling per block) produces a bottleneck map
and per-block skip maps.  A bidirectional LSTM runs over the time axis
independently at every bottleneck pixel.  A small scorer turns each time
step's recurrent features into one attention weight; the weights collapse
the time axis of both the recurrent features and the skip maps.  A
decoder (stride-2 transposed convolutions, skip concatenation, conv-relu
pairs) maps the aggregate back to full resolution, and a 1x1 classifier
plus center crop yields per-pixel class logits.

``mode="mean"`` replaces the learned weights with the uniform 1/T
profile; everything else is identical, so both modes share one parameter
schema.
"""

from __future__ import annotations

import dataclasses
import math
from collections.abc import Mapping
from dataclasses import dataclass, replace
from typing import Sequence

import numpy as np

from . import autograd as ag
from .autograd import Tensor
from .errors import ConfigError, ContractError, ShapeError

IGNORE_LABEL = 255
PROB_FLOOR = 1e-12

_MODES = ("attention", "mean")


@dataclass(frozen=True)
class ModelConfig:
    """Architecture hyperparameters.

    ``in_size`` must be divisible by 2**blocks; the decoder output is
    center-cropped from ``in_size`` to ``out_size`` (the difference must
    be even so the crop is symmetric).
    """

    time_steps: int
    in_channels: int
    num_classes: int
    in_size: int = 32
    out_size: int = 16
    blocks: int = 3
    base_channels: int = 32
    lstm_hidden: int = 256
    attn_hidden: int = 64
    mode: str = "attention"

    def __post_init__(self):
        if self.time_steps < 2:
            raise ConfigError(f"time_steps must be >= 2, got {self.time_steps}")
        if self.in_channels < 1:
            raise ConfigError(f"in_channels must be >= 1, got {self.in_channels}")
        if self.num_classes < 2:
            raise ConfigError(f"num_classes must be >= 2, got {self.num_classes}")
        if self.blocks < 1:
            raise ConfigError(f"blocks must be >= 1, got {self.blocks}")
        if self.base_channels < 1 or self.lstm_hidden < 1 or self.attn_hidden < 1:
            raise ConfigError("base_channels, lstm_hidden and attn_hidden must be >= 1")
        if self.in_size % (1 << self.blocks) != 0:
            raise ConfigError(
                f"in_size {self.in_size} not divisible by 2**blocks = {1 << self.blocks}"
            )
        if self.in_size >> self.blocks < 1:
            raise ConfigError(f"in_size {self.in_size} collapses below 1 px at depth "
                              f"{self.blocks}")
        if not 1 <= self.out_size <= self.in_size:
            raise ConfigError(
                f"out_size must be in [1, in_size={self.in_size}], got {self.out_size}"
            )
        if (self.in_size - self.out_size) % 2 != 0:
            raise ConfigError(
                f"in_size - out_size must be even for a centered crop, "
                f"got {self.in_size} - {self.out_size}"
            )
        if self.mode not in _MODES:
            raise ConfigError(f"mode must be one of {_MODES}, got {self.mode!r}")

    @property
    def bottleneck_channels(self) -> int:
        return self.base_channels << (self.blocks - 1)

    @property
    def bottleneck_size(self) -> int:
        return self.in_size >> self.blocks

    def block_channels(self, k: int) -> int:
        return self.base_channels << k


def default_model_config(time_steps: int = 12, in_channels: int = 4,
                         num_classes: int = 4) -> ModelConfig:
    """Desk-scale preset: trains on one core in minutes while keeping the
    full architecture (3 encoder blocks, 32->16 crop geometry)."""
    return ModelConfig(
        time_steps=time_steps,
        in_channels=in_channels,
        num_classes=num_classes,
        in_size=32,
        out_size=16,
        blocks=3,
        base_channels=8,
        lstm_hidden=16,
        attn_hidden=16,
        mode="attention",
    )


def gradcheck_model_config() -> ModelConfig:
    """Minimal config used by the finite-difference gradient audit."""
    return ModelConfig(
        time_steps=4,
        in_channels=2,
        num_classes=3,
        in_size=16,
        out_size=8,
        blocks=2,
        base_channels=4,
        lstm_hidden=8,
        attn_hidden=8,
        mode="attention",
    )


class ModelParams(Mapping):
    """Ordered, named collection of learnable tensors."""

    def __init__(self, tensors: dict[str, Tensor]):
        self._tensors = dict(tensors)

    def __getitem__(self, name: str) -> Tensor:
        return self._tensors[name]

    def __iter__(self):
        return iter(self._tensors)

    def __len__(self) -> int:
        return len(self._tensors)

    @property
    def dtype(self):
        return next(iter(self._tensors.values())).dtype

    def param_count(self) -> int:
        return sum(t.size for t in self._tensors.values())

    def copy_values(self) -> dict[str, np.ndarray]:
        return {name: t.data.copy() for name, t in self._tensors.items()}

    def set_values(self, values: Mapping[str, np.ndarray]) -> None:
        for name, t in self._tensors.items():
            v = np.asarray(values[name], dtype=t.dtype)
            if v.shape != t.shape:
                raise ShapeError(
                    f"parameter {name!r}: value shape {v.shape} != {t.shape}"
                )
            t.data = v.copy()
            t.grad = None

    def astype(self, dtype) -> "ModelParams":
        return ModelParams({
            name: Tensor(t.data.astype(dtype), requires_grad=True)
            for name, t in self._tensors.items()
        })


def _params_dtype(params) -> np.dtype:
    """dtype shared by a parameter mapping (ModelParams or plain dict)."""
    return next(iter(params.values())).dtype


def _param_shapes(config: ModelConfig):
    """Yield (name, shape, init) in deterministic construction order.

    ``init`` is ("glorot", fan_in, fan_out), ("zeros",) or ("ones",).
    Conv fans count the full receptive field (channels * k * k).
    """
    out = []

    def conv(name, c_out, c_in, k):
        out.append((f"{name}.weight", (c_out, c_in, k, k),
                    ("glorot", c_in * k * k, c_out * k * k)))
        out.append((f"{name}.bias", (c_out,), ("zeros",)))

    ch_in = config.in_channels
    for k in range(config.blocks):
        ch = config.block_channels(k)
        conv(f"encoder.block{k}.conv1", ch, ch_in, 3)
        conv(f"encoder.block{k}.conv2", ch, ch, 3)
        ch_in = ch

    cb = config.bottleneck_channels
    u = config.lstm_hidden
    for dirn in ("fw", "bw"):
        for gate in ("forget", "input", "output", "cell"):
            out.append((f"lstm_{dirn}.{gate}.weight_h", (u, u), ("glorot", u, u)))
            out.append((f"lstm_{dirn}.{gate}.weight_x", (u, cb), ("glorot", cb, u)))
            init = ("ones",) if gate == "forget" else ("zeros",)
            out.append((f"lstm_{dirn}.{gate}.bias", (u,), init))

    a = config.attn_hidden
    out.append(("attention.fc1.weight", (a, 2 * u), ("glorot", 2 * u, a)))
    out.append(("attention.fc1.bias", (a,), ("zeros",)))
    out.append(("attention.fc2.weight", (1, a), ("glorot", a, 1)))
    out.append(("attention.fc2.bias", (1,), ("zeros",)))

    conv("decoder.bottleneck_proj", cb, 2 * u, 1)
    cur = cb
    for k in range(config.blocks - 1, -1, -1):
        ch = config.block_channels(k)
        out.append((f"decoder.level{k}.upsample.weight", (cur, ch, 2, 2),
                    ("glorot", cur * 4, ch * 4)))
        conv(f"decoder.level{k}.conv1", ch, 2 * ch, 3)
        conv(f"decoder.level{k}.conv2", ch, ch, 3)
        cur = ch
    conv("classifier", config.num_classes, config.base_channels, 1)
    return out


def param_count(config: ModelConfig) -> int:
    """Total scalar parameter count, derivable from the config alone."""
    return sum(int(np.prod(shape)) for _, shape, _ in _param_shapes(config))


def init_params(config: ModelConfig, seed: int, dtype=np.float32) -> ModelParams:
    """Deterministic initialization.

    Weights draw from uniform(-a, a) with a = sqrt(6 / (fan_in + fan_out));
    biases start at zero except the LSTM forget-gate biases, which start
    at one so early training does not dump cell state.
    """
    rng = np.random.default_rng(seed)
    tensors: dict[str, Tensor] = {}
    for name, shape, init in _param_shapes(config):
        if init[0] == "glorot":
            _, fan_in, fan_out = init
            bound = math.sqrt(6.0 / (fan_in + fan_out))
            values = rng.uniform(-bound, bound, size=shape)
        elif init[0] == "ones":
            values = np.ones(shape)
        else:
            values = np.zeros(shape)
        tensors[name] = Tensor(values.astype(dtype), requires_grad=True)
    return ModelParams(tensors)


# ---------------------------------------------------------------------------
# forward pieces
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class GateWeights:
    w_h: Tensor
    w_x: Tensor
    b: Tensor


@dataclass(frozen=True)
class LstmWeights:
    forget: GateWeights
    input: GateWeights
    output: GateWeights
    cell: GateWeights


def lstm_weights(params: ModelParams, direction: str) -> LstmWeights:
    if direction not in ("fw", "bw"):
        raise ContractError(f"direction must be 'fw' or 'bw', got {direction!r}")

    def gate(name):
        p = f"lstm_{direction}.{name}"
        return GateWeights(params[f"{p}.weight_h"], params[f"{p}.weight_x"],
                           params[f"{p}.bias"])

    return LstmWeights(gate("forget"), gate("input"), gate("output"), gate("cell"))


def lstm_cell(h_prev: Tensor, c_prev: Tensor, x: Tensor,
              weights: LstmWeights) -> tuple[Tensor, Tensor]:
    """One LSTM step on feature vectors (leading axes are batched).

    Gates: f,i,o = sigmoid(W_h h + W_x x + b), g = tanh(...);
    c = f*c_prev + i*g; h = o*tanh(c).
    """

    def gate(gw: GateWeights, act):
        return act(ag.add(ag.affine(h_prev, gw.w_h), ag.affine(x, gw.w_x, gw.b)))

    f = gate(weights.forget, ag.sigmoid)
    i = gate(weights.input, ag.sigmoid)
    o = gate(weights.output, ag.sigmoid)
    g = gate(weights.cell, ag.tanh)
    c = ag.add(ag.hadamard(f, c_prev), ag.hadamard(i, g))
    h = ag.hadamard(o, ag.tanh(c))
    return h, c


def encoder_forward(x, params: ModelParams, config: ModelConfig):
    """One time step through the shared encoder.

    ``x`` is [C,in,in] or batched [B,C,in,in].  Returns the pooled
    bottleneck map and the per-block pre-pool skip maps (shallowest
    first), matching the input's rank.
    """
    cur = x if isinstance(x, Tensor) else Tensor(x)
    skips = []
    for k in range(config.blocks):
        w1 = params[f"encoder.block{k}.conv1.weight"]
        b1 = params[f"encoder.block{k}.conv1.bias"]
        w2 = params[f"encoder.block{k}.conv2.weight"]
        b2 = params[f"encoder.block{k}.conv2.bias"]
        cur = ag.relu(ag.conv2d(cur, w1, b1, "same"))
        cur = ag.relu(ag.conv2d(cur, w2, b2, "same"))
        skips.append(cur)
        cur = ag.maxpool2d(cur)
    return cur, skips


def _pixel_matrix(t: Tensor) -> Tensor:
    """[B,C,h,w] -> [B*h*w, C] (or [C,h,w] -> [h*w, C]), pixels row-major."""
    if t.ndim == 4:
        b, c, h, w = t.shape
        return ag.reshape(ag.transpose(t, (0, 2, 3, 1)), (b * h * w, c))
    c, h, w = t.shape
    return ag.reshape(ag.transpose(t, (1, 2, 0)), (h * w, c))


def _matrix_to_map(t: Tensor, spatial, batch: int | None) -> Tensor:
    """Inverse of :func:`_pixel_matrix` for a [N, C] matrix."""
    h, w = spatial
    c = t.shape[1]
    if batch is None:
        return ag.transpose(ag.reshape(t, (h, w, c)), (2, 0, 1))
    return ag.transpose(ag.reshape(t, (batch, h, w, c)), (0, 3, 1, 2))


def _bilstm_matrices(z_mats: list[Tensor], params: ModelParams,
                     config: ModelConfig) -> list[Tensor]:
    """Run both directions over per-step [N, C'] matrices; concat to [N, 2U].

    The backward direction consumes the series reversed, and its output at
    index t is the state after reading steps T-1 .. t, so both halves of
    the concatenation describe the same time step.
    """
    steps = len(z_mats)
    if steps < 2:
        raise ContractError(f"bidirectional LSTM needs >= 2 time steps, got {steps}")
    n = z_mats[0].shape[0]
    u = config.lstm_hidden
    dtype = _params_dtype(params)
    fw = lstm_weights(params, "fw")
    bw = lstm_weights(params, "bw")

    def run(weights, order):
        h = Tensor(np.zeros((n, u), dtype=dtype))
        c = Tensor(np.zeros((n, u), dtype=dtype))
        out = {}
        for t in order:
            h, c = lstm_cell(h, c, z_mats[t], weights)
            out[t] = h
        return out

    fwd = run(fw, range(steps))
    bwd = run(bw, range(steps - 1, -1, -1))
    return [ag.concat([fwd[t], bwd[t]], axis=1) for t in range(steps)]


def bilstm_forward(z_seq: Sequence, params: ModelParams,
                   config: ModelConfig) -> list[Tensor]:
    """Per-pixel bidirectional LSTM over a list of [C',h,w] (or batched
    [B,C',h,w]) bottleneck maps; returns [2U,h,w]-shaped maps."""
    maps = [z if isinstance(z, Tensor) else Tensor(z) for z in z_seq]
    batched = maps[0].ndim == 4
    spatial = maps[0].shape[-2:]
    batch = maps[0].shape[0] if batched else None
    mats = [_pixel_matrix(z) for z in maps]
    h_mats = _bilstm_matrices(mats, params, config)
    return [_matrix_to_map(h, spatial, batch) for h in h_mats]


def _attention_alpha(h_mats: list[Tensor], spatial, batch: int | None,
                     params: ModelParams) -> Tensor:
    """Scores from per-step [N, 2U] matrices -> softmax over time.

    Returns [T] (unbatched) or [T, B]: per-pixel scorer output is averaged
    spatially, then normalized across time.
    """
    w1 = params["attention.fc1.weight"]
    b1 = params["attention.fc1.bias"]
    w2 = params["attention.fc2.weight"]
    b2 = params["attention.fc2.bias"]
    scores = []
    hw = spatial[0] * spatial[1]
    for h in h_mats:
        s = ag.affine(ag.tanh(ag.affine(h, w1, b1)), w2, b2)  # [N, 1]
        if batch is None:
            scores.append(ag.reshape(ag.mean(s), ()))
        else:
            scores.append(ag.mean(ag.reshape(s, (batch, hw)), axes=(1,)))
    return ag.softmax(ag.stack(scores), axis=0)


def attention_weights(h_seq: Sequence, params: ModelParams) -> Tensor:
    """Attention over time from a list of [2U,h,w] (or [B,2U,h,w]) maps.

    Output is [T] (or [T,B]); each column is a softmax, so weights are
    positive and sum to one.
    """
    maps = [h if isinstance(h, Tensor) else Tensor(h) for h in h_seq]
    batched = maps[0].ndim == 4
    spatial = maps[0].shape[-2:]
    batch = maps[0].shape[0] if batched else None
    mats = [_pixel_matrix(h) for h in maps]
    return _attention_alpha(mats, spatial, batch, params)


def _check_alpha(alpha: Tensor, steps: int) -> None:
    if alpha.shape[0] != steps:
        raise ShapeError(f"{steps} time steps but {alpha.shape[0]} weights")
    sums = alpha.data.sum(axis=0)
    if not np.all(np.abs(sums - 1.0) <= 1e-6):
        raise ContractError(
            f"attention weights must sum to 1 within 1e-6, got {np.asarray(sums)}"
        )


def aggregate(h_seq: Sequence, alpha: Tensor) -> Tensor:
    """Collapse the time axis: sum_t alpha_t * H_t."""
    maps = [h if isinstance(h, Tensor) else Tensor(h) for h in h_seq]
    _check_alpha(alpha, len(maps))
    return ag.time_weighted_sum(ag.stack(maps), alpha)


def aggregate_skips(skips_per_step: Sequence[Sequence], alpha: Tensor) -> list[Tensor]:
    """Collapse the time axis of every skip level with the same weights.

    ``skips_per_step`` is indexed [t][k] as produced by running the
    encoder per step; the result is one aggregated map per level k.
    """
    steps = len(skips_per_step)
    _check_alpha(alpha, steps)
    levels = len(skips_per_step[0])
    out = []
    for k in range(levels):
        maps = [skips_per_step[t][k] for t in range(steps)]
        maps = [m if isinstance(m, Tensor) else Tensor(m) for m in maps]
        out.append(ag.time_weighted_sum(ag.stack(maps), alpha))
    return out


def center_crop(t: Tensor, size: int) -> Tensor:
    """Symmetric crop of the two trailing spatial axes to size x size."""
    h, w = t.shape[-2], t.shape[-1]
    if size > h or size > w:
        raise ShapeError(f"cannot crop {h}x{w} map to {size}x{size}")
    if (h - size) % 2 or (w - size) % 2:
        raise ShapeError(f"crop {h}x{w} -> {size} is not symmetric")
    t = ag.narrow(t, t.ndim - 2, (h - size) // 2, size)
    return ag.narrow(t, t.ndim - 1, (w - size) // 2, size)


def decoder_forward(c: Tensor, skips: Sequence[Tensor], params: ModelParams,
                    config: ModelConfig) -> Tensor:
    """Aggregated bottleneck + aggregated skips -> cropped class logits.

    A 1x1 conv first projects the 2U-channel aggregate onto the encoder's
    bottleneck width; each level then upsamples 2x, concatenates the
    matching skip map, and halves channels with two 3x3 convs.
    """
    c = c if isinstance(c, Tensor) else Tensor(c)
    if len(skips) != config.blocks:
        raise ShapeError(f"expected {config.blocks} skip maps, got {len(skips)}")
    cur = ag.conv2d(c, params["decoder.bottleneck_proj.weight"],
                    params["decoder.bottleneck_proj.bias"], "same")
    for k in range(config.blocks - 1, -1, -1):
        cur = ag.transposed_conv2d(cur, params[f"decoder.level{k}.upsample.weight"])
        skip = skips[k] if isinstance(skips[k], Tensor) else Tensor(skips[k])
        cur = ag.concat([cur, skip], axis=cur.ndim - 3)
        cur = ag.relu(ag.conv2d(cur, params[f"decoder.level{k}.conv1.weight"],
                                params[f"decoder.level{k}.conv1.bias"], "same"))
        cur = ag.relu(ag.conv2d(cur, params[f"decoder.level{k}.conv2.weight"],
                                params[f"decoder.level{k}.conv2.bias"], "same"))
    logits = ag.conv2d(cur, params["classifier.weight"], params["classifier.bias"],
                       "same")
    return center_crop(logits, config.out_size)


@dataclass
class _BatchForward:
    """Graph handles from one batched forward pass."""
    alpha: Tensor                      # [T, B]
    h_maps: list[Tensor]               # per t: [B, 2U, h', w']
    skips_per_step: list[list[Tensor]]  # [t][k]: [B, ch_k, s_k, s_k]
    aggregated: Tensor | None          # [B, 2U, h', w']
    skip_aggregates: list[Tensor] | None
    logits: Tensor | None              # [B, L, out, out]
    probs: Tensor | None


def _uniform_alpha(steps: int, batch: int, dtype) -> Tensor:
    return Tensor(np.full((steps, batch), 1.0 / steps, dtype=dtype))


def forward_batch(x, params: ModelParams, config: ModelConfig,
                  want_probs: bool = True, upto: str = "logits") -> _BatchForward:
    """Batched forward pass over [B,T,C,in,in] input.

    ``upto="alpha"`` stops after the attention weights (used when only the
    temporal profile is needed).  The time axis is folded into the batch
    for the encoder since its weights are shared across steps.
    """
    xt = x if isinstance(x, Tensor) else Tensor(x, dtype=_params_dtype(params))
    if xt.ndim != 5:
        raise ShapeError(f"forward_batch: expected [B,T,C,H,W], got {xt.shape}")
    b, steps, chans, hh, ww = xt.shape
    if steps != config.time_steps or chans != config.in_channels \
            or hh != config.in_size or ww != config.in_size:
        raise ShapeError(
            f"input {xt.shape[1:]} does not match config "
            f"(T={config.time_steps}, C={config.in_channels}, "
            f"in_size={config.in_size})"
        )
    pdt = _params_dtype(params)
    if xt.dtype != pdt:
        raise ShapeError(f"input dtype {xt.dtype} != parameter dtype {pdt}")

    folded = ag.reshape(ag.transpose(xt, (1, 0, 2, 3, 4)),
                        (steps * b, chans, hh, ww))
    z_all, skips_all = encoder_forward(folded, params, config)
    z_steps = [ag.narrow(z_all, 0, t * b, b) for t in range(steps)]
    skips_per_step = [
        [ag.narrow(s, 0, t * b, b) for s in skips_all] for t in range(steps)
    ]

    hs = config.bottleneck_size
    z_mats = [_pixel_matrix(z) for z in z_steps]
    h_mats = _bilstm_matrices(z_mats, params, config)

    if config.mode == "attention":
        alpha = _attention_alpha(h_mats, (hs, hs), b, params)
    else:
        alpha = _uniform_alpha(steps, b, _params_dtype(params))

    h_maps = [_matrix_to_map(h, (hs, hs), b) for h in h_mats]
    if upto == "alpha":
        return _BatchForward(alpha, h_maps, skips_per_step, None, None, None, None)

    aggregated = ag.time_weighted_sum(ag.stack(h_maps), alpha)
    skip_aggs = []
    for k in range(config.blocks):
        stacked = ag.stack([skips_per_step[t][k] for t in range(steps)])
        skip_aggs.append(ag.time_weighted_sum(stacked, alpha))
    logits = decoder_forward(aggregated, skip_aggs, params, config)
    probs = ag.softmax(logits, axis=1) if want_probs else None
    return _BatchForward(alpha, h_maps, skips_per_step, aggregated, skip_aggs,
                         logits, probs)


@dataclass
class ForwardTrace:
    """Everything one patch's forward pass computed, as plain arrays."""

    alpha: np.ndarray                  # [T]
    hidden: np.ndarray                 # [T, 2U, h', w']
    skips: list[np.ndarray]            # per level: [T, ch_k, s_k, s_k]
    aggregated: np.ndarray             # [2U, h', w']
    skip_aggregates: list[np.ndarray]  # per level: [ch_k, s_k, s_k]
    logits: np.ndarray                 # [L, out, out]
    probs: np.ndarray                  # [L, out, out]


def statt_forward(x, params: ModelParams, config: ModelConfig) -> ForwardTrace:
    """Forward pass for a single [T,C,in,in] patch."""
    arr = x.data if isinstance(x, Tensor) else np.asarray(x, dtype=_params_dtype(params))
    if arr.ndim != 4:
        raise ShapeError(f"statt_forward: expected [T,C,H,W], got {arr.shape}")
    parts = forward_batch(arr[None], params, config, want_probs=True)
    steps = config.time_steps
    return ForwardTrace(
        alpha=parts.alpha.data[:, 0].copy(),
        hidden=np.stack([m.data[0] for m in parts.h_maps]),
        skips=[
            np.stack([parts.skips_per_step[t][k].data[0] for t in range(steps)])
            for k in range(config.blocks)
        ],
        aggregated=parts.aggregated.data[0].copy(),
        skip_aggregates=[s.data[0].copy() for s in parts.skip_aggregates],
        logits=parts.logits.data[0].copy(),
        probs=parts.probs.data[0].copy(),
    )


def cross_entropy_loss(probs: Tensor, labels, ignore_label: int = IGNORE_LABEL) -> Tensor:
    """Mean negative log-probability of the true class over labeled pixels.

    ``probs`` is [L,H,W] or batched [B,L,H,W]; ``labels`` is the matching
    integer map with ``ignore_label`` marking pixels that contribute
    nothing (to the value or the gradient).  Probabilities are floored at
    1e-12 before the log.
    """
    labels = np.asarray(labels)
    if probs.ndim == 3:
        pb = ag.reshape(probs, (1,) + probs.shape)
        lb = labels.reshape((1,) + labels.shape)
    elif probs.ndim == 4:
        pb, lb = probs, labels
    else:
        raise ShapeError(f"cross_entropy_loss: probs must be 3-d or 4-d, got {probs.shape}")
    b, l, h, w = pb.shape
    if lb.shape != (b, h, w):
        raise ShapeError(
            f"cross_entropy_loss: labels shape {lb.shape} != {(b, h, w)}"
        )
    valid = lb != ignore_label
    if np.any((lb >= l) & valid) or np.any((lb < 0) & valid):
        raise ContractError(
            f"cross_entropy_loss: labels outside [0, {l}) present"
        )
    n_valid = int(valid.sum())
    if n_valid == 0:
        raise ContractError("cross_entropy_loss: every pixel is ignored")

    safe = np.where(valid, lb, 0)
    onehot = np.zeros((b, l, h, w), dtype=pb.dtype)
    bi = np.arange(b)[:, None, None]
    hi = np.arange(h)[None, :, None]
    wi = np.arange(w)[None, None, :]
    onehot[bi, safe, hi, wi] = 1.0
    onehot *= valid[:, None, :, :]

    p_true = ag.reduce_sum(ag.hadamard(pb, Tensor(onehot)), axes=(1,))
    logp = ag.log(ag.clamp_min(p_true, PROB_FLOOR))
    masked = ag.hadamard(logp, Tensor(valid.astype(pb.dtype)))
    return ag.scale(ag.reduce_sum(masked), -1.0 / n_valid)


def with_mode(config: ModelConfig, mode: str | None) -> ModelConfig:
    """Config with the aggregation mode swapped (parameters are unaffected)."""
    if mode is None or mode == config.mode:
        return config
    return replace(config, mode=mode)


def model_config_to_dict(config: ModelConfig) -> dict:
    return dataclasses.asdict(config)


def model_config_from_dict(d: Mapping) -> ModelConfig:
    """Build a config from a plain mapping, rejecting unknown keys."""
    fields = {f.name for f in dataclasses.fields(ModelConfig)}
    unknown = set(d) - fields
    if unknown:
        raise ConfigError(f"unknown model config keys: {sorted(unknown)}")
    try:
        return ModelConfig(**dict(d))
    except TypeError as e:
        raise ConfigError(f"invalid model config: {e}") from None
