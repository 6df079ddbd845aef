"""Two-stream multi-scale quality network.

One stream sees the grayscale distorted patch, the other the residual map
``|distorted - reference|``.  Each stream is five conv/BN/ELU blocks with
2x2 max pooling after the first four, followed by spatial pyramid pooling.
The ``full`` variant also runs a feature pyramid over the distorted stream's
conv3..conv5 activations and appends its pooled features before the fully
connected head.
"""
from __future__ import annotations

import itertools
import json
import struct
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from . import numerics as nx
from .data import grid_anchors
from .errors import (CheckpointMismatchError, CheckpointTruncatedError,
                     CheckpointVersionError, ShapeError, StaleCacheError)

VARIANTS = ("full", "distorted_only", "residual_only", "direct_concat")
STREAMS_BY_VARIANT = {
    "full": ("distorted", "residual"),
    "direct_concat": ("distorted", "residual"),
    "distorted_only": ("distorted",),
    "residual_only": ("residual",),
}

CHECKPOINT_MAGIC = b"PIQA"
CHECKPOINT_VERSION = 1

_model_ids = itertools.count()


@dataclass
class ModelConfig:
    variant: str = "full"
    conv_channels: tuple = (8, 8, 16, 16, 32)
    fc_sizes: tuple = (2048, 1024, 1)
    elu_alpha: float = 1.0
    seed: int = 0
    patch_size: int = 128
    spp_bins: tuple = nx.SPP_BINS
    fpn_channels: int = 32
    dtype: str = "float32"
    # optional explicit width of the first FC layer, checked against the architecture
    fc_in: int | None = None

    def __post_init__(self):
        self.conv_channels = tuple(int(c) for c in self.conv_channels)
        self.fc_sizes = tuple(int(c) for c in self.fc_sizes)
        self.spp_bins = tuple(int(b) for b in self.spp_bins)
        if self.variant not in VARIANTS:
            raise ValueError(f"unknown variant {self.variant!r}; choose from {VARIANTS}")
        if len(self.conv_channels) != 5:
            raise ValueError("conv_channels must list exactly five layers")
        if not self.fc_sizes or self.fc_sizes[-1] != 1:
            raise ValueError("fc_sizes must end in 1 (scalar score)")
        if self.dtype not in ("float32", "float64"):
            raise ValueError(f"dtype must be float32 or float64, got {self.dtype!r}")
        final = self.patch_size // 16
        if self.patch_size % 16 or final < 1:
            raise ValueError(f"patch_size must be a positive multiple of 16, got {self.patch_size}")
        for b in self.spp_bins:
            if final % b:
                raise ValueError(
                    f"spp bin {b} does not divide the {final}x{final} conv5 map "
                    f"of a {self.patch_size}px patch")
        if self.fc_in is not None and self.fc_in != self.head_input_width:
            raise ValueError(
                f"fc_in={self.fc_in} inconsistent with architecture width {self.head_input_width}")

    @classmethod
    def slim(cls, **overrides) -> "ModelConfig":
        """Tiny architecture for fast gradient checks and overfit runs."""
        kw = dict(conv_channels=(2, 2, 2, 2, 4), fc_sizes=(16, 8, 1), patch_size=64,
                  spp_bins=(1, 2, 4), fpn_channels=4)
        kw.update(overrides)
        return cls(**kw)

    @property
    def streams(self) -> tuple:
        return STREAMS_BY_VARIANT[self.variant]

    @property
    def has_fpn(self) -> bool:
        return self.variant == "full"

    @property
    def head_input_width(self) -> int:
        width = nx.spp_width(self.conv_channels[-1], self.spp_bins) * len(self.streams)
        if self.has_fpn:
            width += 3 * self.fpn_channels
        return width

    def to_json(self) -> str:
        d = asdict(self)
        d["conv_channels"] = list(self.conv_channels)
        d["fc_sizes"] = list(self.fc_sizes)
        d["spp_bins"] = list(self.spp_bins)
        return json.dumps(d, sort_keys=True)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown model config keys: {sorted(unknown)}")
        return cls(**d)


@dataclass
class Stream:
    convs: list
    bns: list


@dataclass
class Model:
    config: ModelConfig
    streams: dict
    fpn: nx.FpnParams | None
    head: list
    version: int = 0
    uid: int = field(default_factory=lambda: next(_model_ids))

    @property
    def elu_cfg(self) -> nx.EluConfig:
        return nx.EluConfig(self.config.elu_alpha)

    @property
    def dtype(self):
        return np.dtype(self.config.dtype)

    def parameters(self) -> dict:
        """Trainable arrays by name, in a fixed order.  Arrays are live references."""
        out = {}
        for sname, stream in self.streams.items():
            for i, (conv, bn) in enumerate(zip(stream.convs, stream.bns), start=1):
                out[f"{sname}.conv{i}.weights"] = conv.weights
                out[f"{sname}.conv{i}.bias"] = conv.bias
                out[f"{sname}.bn{i}.gamma"] = bn.gamma
                out[f"{sname}.bn{i}.beta"] = bn.beta
        if self.fpn is not None:
            for lvl, lat, sm in zip((3, 4, 5), self.fpn.lateral, self.fpn.smooth):
                out[f"fpn.lateral{lvl}.weights"] = lat.weights
                out[f"fpn.lateral{lvl}.bias"] = lat.bias
                out[f"fpn.smooth{lvl}.weights"] = sm.weights
                out[f"fpn.smooth{lvl}.bias"] = sm.bias
        for i, fc in enumerate(self.head, start=1):
            out[f"fc{i}.weights"] = fc.weights
            out[f"fc{i}.bias"] = fc.bias
        return out

    def buffers(self) -> dict:
        """Batch-norm running statistics by name."""
        out = {}
        for sname, stream in self.streams.items():
            for i, bn in enumerate(stream.bns, start=1):
                out[f"{sname}.bn{i}.running_mean"] = bn.running_mean
                out[f"{sname}.bn{i}.running_var"] = bn.running_var
        return out

    def state(self) -> dict:
        return {**self.parameters(), **self.buffers()}

    def touch(self):
        """Mark parameters as modified, invalidating outstanding forward caches."""
        self.version += 1


def build_model(config: ModelConfig) -> Model:
    rng = np.random.default_rng(config.seed)
    dtype = np.dtype(config.dtype)
    streams = {}
    for name in config.streams:
        convs, bns = [], []
        in_ch = 1
        for out_ch in config.conv_channels:
            convs.append(nx.init_conv(in_ch, out_ch, rng, dtype=dtype))
            bns.append(nx.init_batchnorm(out_ch, dtype=dtype))
            in_ch = out_ch
        streams[name] = Stream(convs, bns)
    fpn = None
    if config.has_fpn:
        fpn = nx.init_fpn(config.conv_channels[2:], rng, channels=config.fpn_channels, dtype=dtype)
    head = []
    width = config.head_input_width
    for size in config.fc_sizes:
        head.append(nx.init_linear(width, size, rng, dtype=dtype))
        width = size
    return Model(config, streams, fpn, head)


# ---------------------------------------------------------------------------
# forward / backward
# ---------------------------------------------------------------------------

@dataclass
class ForwardCache:
    model_uid: int
    version: int
    mode: str
    batch: int
    streams: dict
    spp_shapes: dict
    fpn: dict | None
    head_inputs: list
    head_pre: list
    consumed: bool = False


def _check_patch(x, name, config, dtype):
    p = config.patch_size
    if x is None:
        raise ShapeError(f"{name} patch is required by variant {config.variant!r}")
    x = np.asarray(x)
    if x.ndim != 4 or x.shape[1:] != (1, p, p):
        raise ShapeError(f"{name} patch must have shape (B, 1, {p}, {p}), got {x.shape}")
    return x.astype(dtype, copy=False)


def _stream_forward(stream: Stream, x, mode, elu_cfg):
    recs = []
    h = x
    taps = []
    last = len(stream.convs) - 1
    for i, (conv, bn) in enumerate(zip(stream.convs, stream.bns)):
        z = nx.conv2d_forward(h, conv)
        u = nx.batchnorm_forward(z, bn, mode)
        a = nx.elu(u, elu_cfg)
        rec = {"h": h, "z": z, "u": u, "argmax": None}
        taps.append(a)
        if i < last:
            h, rec["argmax"] = nx.maxpool2x2(a)
        else:
            h = a
        recs.append(rec)
    return h, taps, recs


def _stream_backward(stream: Stream, recs, grad_h, tap_grads, mode, elu_cfg, grads, prefix):
    g = grad_h
    for i in reversed(range(len(stream.convs))):
        rec = recs[i]
        if rec["argmax"] is not None:
            g = nx.maxpool2x2_backward(g, rec["argmax"])
        if tap_grads.get(i) is not None:
            g = g + tap_grads[i]
        gu = nx.elu_backward(rec["u"], g, elu_cfg)
        gz, ggamma, gbeta = nx.batchnorm_backward(rec["z"], stream.bns[i], gu, mode)
        gh, gw, gb = nx.conv2d_backward(rec["h"], stream.convs[i], gz, need_input_grad=i > 0)
        grads[f"{prefix}.conv{i + 1}.weights"] = gw
        grads[f"{prefix}.conv{i + 1}.bias"] = gb
        grads[f"{prefix}.bn{i + 1}.gamma"] = ggamma
        grads[f"{prefix}.bn{i + 1}.beta"] = gbeta
        g = gh


def forward(model: Model, d_patch, r_patch, mode: str = "eval"):
    """Score a batch of aligned patches.  Returns ``(scores, cache)``."""
    cfg = model.config
    dtype = model.dtype
    inputs = {}
    if "distorted" in cfg.streams:
        inputs["distorted"] = _check_patch(d_patch, "distorted", cfg, dtype)
    if "residual" in cfg.streams:
        inputs["residual"] = _check_patch(r_patch, "residual", cfg, dtype)
    batch = next(iter(inputs.values())).shape[0]
    if any(x.shape[0] != batch for x in inputs.values()):
        raise ShapeError("distorted and residual batches differ in size")

    elu_cfg = model.elu_cfg
    feats, stream_recs, spp_shapes, taps_d = [], {}, {}, None
    for name in cfg.streams:
        h, taps, recs = _stream_forward(model.streams[name], inputs[name], mode, elu_cfg)
        stream_recs[name] = recs
        spp_shapes[name] = h.shape
        feats.append(nx.spp_forward(h, cfg.spp_bins))
        if name == "distorted":
            taps_d = taps
    fpn_cache = None
    if model.fpn is not None:
        f, fpn_cache = nx.fpn_forward(taps_d[2], taps_d[3], taps_d[4], model.fpn)
        feats.append(f)
    x = np.concatenate(feats, axis=1) if len(feats) > 1 else feats[0]

    head_inputs, head_pre = [], []
    last = len(model.head) - 1
    for i, fc in enumerate(model.head):
        head_inputs.append(x)
        y = nx.linear_forward(x, fc)
        if i < last:
            head_pre.append(y)
            x = nx.elu(y, elu_cfg)
        else:
            x = y
    scores = x[:, 0]
    cache = ForwardCache(model.uid, model.version, mode, batch, stream_recs, spp_shapes,
                         fpn_cache, head_inputs, head_pre)
    return scores, cache


def backward(model: Model, cache: ForwardCache, grad_scores) -> dict:
    """Gradients of ``sum(grad_scores * scores)`` keyed like ``model.parameters()``."""
    if cache.model_uid != model.uid:
        raise StaleCacheError("forward cache belongs to a different model")
    if cache.version != model.version:
        raise StaleCacheError(
            f"forward cache is stale (model version {model.version}, cache {cache.version})")
    if cache.consumed:
        raise StaleCacheError("forward cache was already consumed by a backward pass")
    if cache.mode != "train":
        raise StaleCacheError("backward needs a cache from a train-mode forward")
    grad_scores = np.asarray(grad_scores, dtype=model.dtype)
    if grad_scores.shape != (cache.batch,):
        raise ShapeError(f"grad_scores shape {grad_scores.shape} != ({cache.batch},)")
    cache.consumed = True

    cfg = model.config
    elu_cfg = model.elu_cfg
    grads = {}
    g = grad_scores[:, None]
    for i in reversed(range(len(model.head))):
        if i < len(model.head) - 1:
            g = nx.elu_backward(cache.head_pre[i], g, elu_cfg)
        g, gw, gb = nx.linear_backward(cache.head_inputs[i], model.head[i], g)
        grads[f"fc{i + 1}.weights"] = gw
        grads[f"fc{i + 1}.bias"] = gb

    offset = 0
    spp_grads = {}
    for name in cfg.streams:
        shape = cache.spp_shapes[name]
        w = nx.spp_width(shape[1], cfg.spp_bins)
        spp_grads[name] = nx.spp_backward(g[:, offset:offset + w], shape, cfg.spp_bins)
        offset += w
    tap_grads = {}
    if model.fpn is not None:
        g3, g4, g5, fg = nx.fpn_backward(cache.fpn, model.fpn, g[:, offset:])
        tap_grads = {2: g3, 3: g4, 4: g5}
        for lvl, lat, sm in zip((3, 4, 5), fg.lateral, fg.smooth):
            grads[f"fpn.lateral{lvl}.weights"] = lat.weights
            grads[f"fpn.lateral{lvl}.bias"] = lat.bias
            grads[f"fpn.smooth{lvl}.weights"] = sm.weights
            grads[f"fpn.smooth{lvl}.bias"] = sm.bias
    for name in cfg.streams:
        _stream_backward(model.streams[name], cache.streams[name], spp_grads[name],
                         tap_grads if name == "distorted" else {}, cache.mode, elu_cfg,
                         grads, name)
    return {k: grads[k] for k in model.parameters()}


# ---------------------------------------------------------------------------
# whole-image prediction
# ---------------------------------------------------------------------------

def predict_image(model: Model, d_image, r_image, batch_size: int = 32) -> float:
    """Mean eval-mode score over the non-overlapping patch grid."""
    d_image = np.asarray(d_image)
    r_image = np.asarray(r_image)
    if d_image.shape != r_image.shape or d_image.ndim != 2:
        raise ShapeError(
            f"distorted {d_image.shape} and residual {r_image.shape} must be aligned 2-D images")
    p = model.config.patch_size
    anchors = grid_anchors(*d_image.shape, p)
    scores = []
    for start in range(0, len(anchors), batch_size):
        chunk = anchors[start:start + batch_size]
        d = np.stack([d_image[y:y + p, x:x + p] for y, x in chunk])[:, None]
        r = np.stack([r_image[y:y + p, x:x + p] for y, x in chunk])[:, None]
        s, _ = forward(model, d, r, mode="eval")
        scores.append(s.astype(np.float64))
    return float(np.mean(np.concatenate(scores)))


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------

def save_checkpoint(model: Model, path) -> None:
    """Little-endian binary: magic, u32 version, u32-length JSON config, tensor records.

    Each record is u32 name length, UTF-8 name, u32 rank, u32 dims, raw floats
    in the model dtype (float32 unless the config says float64).
    """
    dtype = model.dtype.newbyteorder("<")
    cfg = model.config.to_json().encode("utf-8")
    parts = [CHECKPOINT_MAGIC, struct.pack("<I", CHECKPOINT_VERSION),
             struct.pack("<I", len(cfg)), cfg]
    for name, arr in model.state().items():
        raw = name.encode("utf-8")
        parts.append(struct.pack("<I", len(raw)))
        parts.append(raw)
        parts.append(struct.pack("<I", arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(np.ascontiguousarray(arr, dtype=dtype).tobytes())
    Path(path).write_bytes(b"".join(parts))


class _Reader:
    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0

    def take(self, n: int, what: str) -> bytes:
        if self.pos + n > len(self.data):
            raise CheckpointTruncatedError(
                f"checkpoint truncated while reading {what} at byte {self.pos}")
        out = self.data[self.pos:self.pos + n]
        self.pos += n
        return out

    def u32(self, what: str) -> int:
        return struct.unpack("<I", self.take(4, what))[0]

    @property
    def done(self) -> bool:
        return self.pos >= len(self.data)


def load_checkpoint(path, expected_config: ModelConfig | None = None) -> Model:
    r = _Reader(Path(path).read_bytes())
    magic = r.take(4, "magic")
    if magic != CHECKPOINT_MAGIC:
        raise CheckpointVersionError(f"{path}: bad magic {magic!r}, not a checkpoint")
    version = r.u32("version")
    if version != CHECKPOINT_VERSION:
        raise CheckpointVersionError(f"{path}: unsupported checkpoint version {version}")
    cfg_raw = r.take(r.u32("config length"), "config")
    try:
        config = ModelConfig.from_dict(json.loads(cfg_raw.decode("utf-8")))
    except (ValueError, TypeError) as exc:
        raise CheckpointMismatchError(f"{path}: invalid stored config: {exc}") from exc
    if expected_config is not None and config != expected_config:
        raise CheckpointMismatchError(
            f"{path}: stored config {config.to_json()} does not match expected "
            f"{expected_config.to_json()}")

    model = build_model(config)
    state = model.state()
    dtype = model.dtype.newbyteorder("<")
    seen = set()
    while not r.done:
        name = r.take(r.u32("name length"), "tensor name").decode("utf-8")
        rank = r.u32(f"rank of {name}")
        dims = struct.unpack(f"<{rank}I", r.take(4 * rank, f"dims of {name}"))
        if name not in state:
            raise CheckpointMismatchError(f"{path}: unexpected tensor {name!r}")
        if tuple(dims) != state[name].shape:
            raise CheckpointMismatchError(
                f"{path}: tensor {name} has dims {dims}, architecture expects {state[name].shape}")
        n = int(np.prod(dims)) * dtype.itemsize
        state[name][...] = np.frombuffer(r.take(n, f"data of {name}"), dtype=dtype).reshape(dims)
        seen.add(name)
    missing = set(state) - seen
    if missing:
        raise CheckpointTruncatedError(f"{path}: missing tensors {sorted(missing)}")
    return model
