"""Encoder-decoder segmentation networks with optional attention gates.

Four variants are built from one constructor: a full network with 4
max-pooling stages or a truncated one with 3, each with or without
attention gates on the skip connections. Blocks are two 3x3 convolutions
with ReLU, batch normalization after the second convolution only; spatial
dropout follows every encoder block and the bottleneck; additive Gaussian
noise is applied to the input during training. The single-channel output
passes through a sigmoid.
"""

from __future__ import annotations

import dataclasses
import json
import struct

import numpy as np

from . import tensor as T

CHECKPOINT_MAGIC = b"WCSM1"
CHECKPOINT_VERSION = 1

# variant name -> (number of pooling stages, attention gates on skips)
VARIANTS = {
    "unet": (4, False),
    "attn-unet": (4, True),
    "trunc-unet": (3, False),
    "trunc-attn-unet": (3, True),
}


class CheckpointError(ValueError):
    """Raised for unreadable or corrupt checkpoint files."""


@dataclasses.dataclass
class ModelConfig:
    depth: int = 4                 # number of max-pooling stages
    base_channels: int = 8
    attention: bool = False
    dropout_p: float = 0.0
    noise_level: float = 0.0
    input_size: int = 64

    def __post_init__(self):
        if self.depth not in (3, 4):
            raise ValueError(f"depth must be 3 or 4, got {self.depth}")
        if self.base_channels < 2:
            raise ValueError(f"base_channels must be >= 2, got {self.base_channels}")
        if not 0.0 <= self.dropout_p < 1.0:
            raise ValueError(f"dropout_p must be in [0, 1), got {self.dropout_p}")
        if not 0.0 <= self.noise_level <= 0.5:
            raise ValueError(f"noise_level must be in [0, 0.5], got {self.noise_level}")
        if self.input_size <= 0 or self.input_size % (1 << self.depth):
            raise ValueError(
                f"input_size {self.input_size} not divisible by 2^depth = {1 << self.depth}")

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


def _he_uniform(rng: np.random.Generator, shape, fan_in: int, dtype) -> np.ndarray:
    limit = np.sqrt(6.0 / fan_in)
    return rng.uniform(-limit, limit, size=shape).astype(dtype)


class Conv2d:
    def __init__(self, rng, in_ch: int, out_ch: int, k: int, dtype,
                 stride: int = 1, padding: int = 0, bias: bool = True):
        self.stride = stride
        self.padding = padding
        self.weight = T.Tensor(_he_uniform(rng, (out_ch, in_ch, k, k), in_ch * k * k, dtype))
        self.weight.requires_grad = True
        self.bias = None
        if bias:
            self.bias = T.Tensor(np.zeros(out_ch, dtype=dtype))
            self.bias.requires_grad = True

    def __call__(self, x: T.Tensor) -> T.Tensor:
        return T.conv2d(x, self.weight, self.bias, stride=self.stride, padding=self.padding)

    def params(self):
        yield "weight", self.weight
        if self.bias is not None:
            yield "bias", self.bias


class BatchNorm2d:
    def __init__(self, channels: int, dtype):
        self.gamma = T.Tensor(np.ones(channels, dtype=dtype))
        self.gamma.requires_grad = True
        self.beta = T.Tensor(np.zeros(channels, dtype=dtype))
        self.beta.requires_grad = True
        self.running_mean = np.zeros(channels, dtype=dtype)
        self.running_var = np.ones(channels, dtype=dtype)

    def __call__(self, x: T.Tensor, training: bool) -> T.Tensor:
        return T.batchnorm(x, self.gamma, self.beta, self.running_mean, self.running_var, training)

    def params(self):
        yield "gamma", self.gamma
        yield "beta", self.beta


class ConvBlock:
    """conv3x3 -> ReLU -> conv3x3 -> BN -> ReLU."""

    def __init__(self, rng, in_ch: int, out_ch: int, dtype):
        self.conv1 = Conv2d(rng, in_ch, out_ch, 3, dtype, padding=1)
        self.conv2 = Conv2d(rng, out_ch, out_ch, 3, dtype, padding=1)
        self.bn = BatchNorm2d(out_ch, dtype)

    def __call__(self, x: T.Tensor, training: bool) -> T.Tensor:
        h = T.relu(self.conv1(x))
        return T.relu(self.bn(self.conv2(h), training))

    def params(self):
        for sub, layer in (("conv1", self.conv1), ("conv2", self.conv2), ("bn", self.bn)):
            for name, p in layer.params():
                yield f"{sub}.{name}", p


class AttentionGate:
    """Soft gating of skip features by coarser decoder features.

    The skip map x [N,F,H,W] is strided down and the gating map g
    [N,2F,H/2,W/2] projected, both to F/2 channels by 1x1 convolutions;
    their ReLU-ed sum collapses to a single channel, and its sigmoid,
    bilinearly upsampled back to HxW, multiplies x elementwise. No batch
    normalization inside the gate. ``force_alpha`` overrides the
    coefficient map with a constant (diagnostics only).
    """

    def __init__(self, rng, skip_ch: int, dtype):
        inter = max(skip_ch // 2, 1)
        self.wx = Conv2d(rng, skip_ch, inter, 1, dtype, stride=2, bias=False)
        self.wg = Conv2d(rng, 2 * skip_ch, inter, 1, dtype)
        self.psi = Conv2d(rng, inter, 1, 1, dtype)
        self.skip_ch = skip_ch
        self.force_alpha: float | None = None

    def __call__(self, x: T.Tensor, g: T.Tensor) -> T.Tensor:
        n, f, h, w = x.shape
        if f != self.skip_ch:
            raise ValueError(f"gate built for {self.skip_ch} skip channels, got {f}")
        if g.shape[1] != 2 * f or g.shape[2] != h // 2 or g.shape[3] != w // 2:
            raise ValueError(
                f"gating features {g.shape} misaligned with skip features {x.shape}")
        if self.force_alpha is not None:
            # cast keeps the override from promoting the feature dtype
            return x * T.Tensor(np.asarray(self.force_alpha, dtype=x.data.dtype))
        a = T.relu(self.wx(x) + self.wg(g))
        alpha = T.upsample_bilinear(T.sigmoid(self.psi(a)))
        return x * alpha

    def alpha_map(self, x: T.Tensor, g: T.Tensor) -> np.ndarray:
        """Coefficient map [N,1,H,W] before broadcasting, for inspection."""
        with T.no_grad():
            a = T.relu(self.wx(x) + self.wg(g))
            return T.upsample_bilinear(T.sigmoid(self.psi(a))).data

    def params(self):
        for sub, layer in (("wx", self.wx), ("wg", self.wg), ("psi", self.psi)):
            for name, p in layer.params():
                yield f"{sub}.{name}", p


class Model:
    """Segmentation network; see module docstring for the layout."""

    def __init__(self, config: ModelConfig, rng: np.random.Generator, dtype=np.float32):
        self.config = config
        b, d = config.base_channels, config.depth
        self.encoders = []
        in_ch = 1
        for i in range(d):
            out_ch = b << i
            self.encoders.append(ConvBlock(rng, in_ch, out_ch, dtype))
            in_ch = out_ch
        self.bottleneck = ConvBlock(rng, in_ch, b << d, dtype)
        self.gates = []
        self.decoders = []
        for i in reversed(range(d)):
            f = b << i
            if config.attention:
                self.gates.append(AttentionGate(rng, f, dtype))
            self.decoders.append(ConvBlock(rng, 3 * f, f, dtype))
        self.head = Conv2d(rng, b, 1, 1, dtype)

    def named_parameters(self):
        """Trainable tensors in a fixed registry order."""
        for i, blk in enumerate(self.encoders):
            for name, p in blk.params():
                yield f"enc{i}.{name}", p
        for name, p in self.bottleneck.params():
            yield f"bottleneck.{name}", p
        d = self.config.depth
        for j in range(d):
            level = d - 1 - j
            if self.config.attention:
                for name, p in self.gates[j].params():
                    yield f"gate{level}.{name}", p
            for name, p in self.decoders[j].params():
                yield f"dec{level}.{name}", p
        for name, p in self.head.params():
            yield f"head.{name}", p

    def parameters(self):
        return [p for _, p in self.named_parameters()]

    def batchnorms(self):
        for blk in self.encoders + [self.bottleneck] + self.decoders:
            yield blk.bn

    def zero_grad(self):
        for p in self.parameters():
            p.grad = None

    def forward(self, batch, training: bool = False,
                rng: np.random.Generator | None = None) -> T.Tensor:
        x = batch if isinstance(batch, T.Tensor) else T.Tensor(batch)
        if x.data.ndim != 4 or x.shape[1] != 1:
            raise ValueError(f"expected [N,1,S,S] input, got {x.shape}")
        s = self.config.input_size
        if x.shape[2] != s or x.shape[3] != s:
            raise ValueError(f"model expects {s}x{s} input, got {x.shape[2]}x{x.shape[3]}")
        if training and rng is None:
            raise ValueError("training-mode forward needs an rng for noise and dropout")
        if not training:
            with T.no_grad():
                return self._run(x, False, None)
        return self._run(x, True, rng)

    def _run(self, x: T.Tensor, training: bool, rng) -> T.Tensor:
        cfg = self.config
        h = T.gaussian_noise(x, cfg.noise_level, training, rng)
        skips = []
        for blk in self.encoders:
            h = T.spatial_dropout(blk(h, training), cfg.dropout_p, training, rng)
            skips.append(h)
            h = T.maxpool2d(h)
        h = T.spatial_dropout(self.bottleneck(h, training), cfg.dropout_p, training, rng)
        for j, blk in enumerate(self.decoders):
            skip = skips[-1 - j]
            gated = self.gates[j](skip, h) if cfg.attention else skip
            h = blk(T.concat([gated, T.upsample_bilinear(h)], axis=1), training)
        return T.sigmoid(self.head(h))

    def __call__(self, batch, training: bool = False, rng=None) -> T.Tensor:
        return self.forward(batch, training, rng)


def build_model(config: ModelConfig, rng: np.random.Generator, dtype=np.float32) -> Model:
    return Model(config, rng, dtype=dtype)


def parameter_count(model: Model) -> int:
    return int(sum(p.data.size for p in model.parameters()))


def binarize(probabilities, threshold: float = 0.5) -> np.ndarray:
    """Threshold probability maps to a byte mask; strictly greater wins."""
    arr = probabilities.data if isinstance(probabilities, T.Tensor) else np.asarray(probabilities)
    return (arr > threshold).astype(np.uint8)


def save_checkpoint(model: Model, path) -> None:
    """Write magic, version, config JSON, then parameter and batch-norm
    buffer payloads as little-endian float32 in registry order."""
    cfg_json = json.dumps(model.config.to_dict(), sort_keys=True).encode()
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(bytes([CHECKPOINT_VERSION]))
        fh.write(struct.pack("<I", len(cfg_json)))
        fh.write(cfg_json)
        for _, p in model.named_parameters():
            fh.write(np.ascontiguousarray(p.data, dtype="<f4").tobytes())
        for bn in model.batchnorms():
            fh.write(np.ascontiguousarray(bn.running_mean, dtype="<f4").tobytes())
            fh.write(np.ascontiguousarray(bn.running_var, dtype="<f4").tobytes())


def load_checkpoint(path) -> Model:
    with open(path, "rb") as fh:
        blob = fh.read()
    if len(blob) < 10:
        raise CheckpointError(f"{path}: truncated header ({len(blob)} bytes)")
    if blob[:5] != CHECKPOINT_MAGIC:
        raise CheckpointError(f"{path}: bad magic {blob[:5]!r}")
    if blob[5] != CHECKPOINT_VERSION:
        raise CheckpointError(f"{path}: unsupported version {blob[5]}")
    (cfg_len,) = struct.unpack_from("<I", blob, 6)
    try:
        cfg = ModelConfig(**json.loads(blob[10:10 + cfg_len]))
    except (ValueError, TypeError) as exc:
        raise CheckpointError(f"{path}: bad config block: {exc}") from None
    model = Model(cfg, np.random.default_rng(0))
    off = 10 + cfg_len

    def take(n: int) -> np.ndarray:
        nonlocal off
        if off + 4 * n > len(blob):
            raise CheckpointError(f"{path}: truncated payload at byte {off}")
        vals = np.frombuffer(blob, dtype="<f4", count=n, offset=off)
        off += 4 * n
        return vals.astype(np.float32)

    for _, p in model.named_parameters():
        p.data = take(p.data.size).reshape(p.data.shape)
    for bn in model.batchnorms():
        c = bn.running_mean.size
        bn.running_mean = take(c).copy()
        bn.running_var = take(c).copy()
    if off != len(blob):
        raise CheckpointError(f"{path}: payload length mismatch ({len(blob) - off} trailing bytes)")
    return model
