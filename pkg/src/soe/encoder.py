"""Four-block 3D convolutional encoder mapping an n^3 volume to a flat feature vector."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterator

import numpy as np

from . import autodiff as ad
from .autodiff import BatchNormState, Parameter, Tensor


class Module:
    """Minimal container: named parameters, batchnorm buffers, train/eval flag."""

    training = True

    def children(self) -> Iterator[tuple[str, "Module"]]:
        return iter(())

    def own_parameters(self) -> list[Parameter]:
        return []

    def parameters(self) -> list[Parameter]:
        out = list(self.own_parameters())
        for _, child in self.children():
            out.extend(child.parameters())
        return out

    def named_parameters(self) -> dict[str, Parameter]:
        return {p.name: p for p in self.parameters()}

    def batchnorm_states(self) -> dict[str, BatchNormState]:
        out = {}
        for _, child in self.children():
            out.update(child.batchnorm_states())
        return out

    def train(self, mode: bool = True):
        self.training = mode
        for _, child in self.children():
            child.train(mode)
        return self

    def eval(self):
        return self.train(False)

    def astype(self, dtype):
        for p in self.parameters():
            p.astype(dtype)
        return self

    def num_parameters(self) -> int:
        return sum(p.data.size for p in self.parameters())


class EncoderError(ValueError):
    pass


@dataclass
class EncoderConfig:
    channels: list[int] = field(default_factory=lambda: [16, 32, 64, 16])
    input_dim: int = 64
    dropout_p: float = 0.1
    slope: float = 0.2

    def validate(self):
        if len(self.channels) != 4 or any(int(c) < 1 for c in self.channels):
            raise EncoderError(f"need 4 block widths >= 1, got {self.channels}")
        if self.input_dim < 2:
            raise EncoderError(f"input_dim must be >= 2, got {self.input_dim}")
        if not 0.0 <= self.dropout_p < 1.0:
            raise EncoderError(f"dropout_p must lie in [0, 1), got {self.dropout_p}")
        return self

    @property
    def feature_dim(self) -> int:
        s = self.input_dim
        for _ in range(4):
            s = -(-s // 2)  # ceil-mode pooling
        return self.channels[3] * s ** 3


def conv_param_count(channels, in_channels: int = 1) -> int:
    """Closed form: sum over blocks of c_in*c_out*27 + c_out (bias) + 2*c_out (bn)."""
    total, c_in = 0, in_channels
    for c_out in channels:
        total += c_in * c_out * 27 + 3 * c_out
        c_in = c_out
    return total


class ConvBlock(Module):
    """Conv3d(k=3, pad=1) -> BatchNorm3d -> LeakyReLU -> Dropout -> MaxPool3d(2)."""

    def __init__(self, name: str, c_in: int, c_out: int, rng: np.random.Generator,
                 slope: float, dropout_p: float, layer_id: int):
        fan_in = c_in * 27
        self.conv_w = Parameter(ad.kaiming_uniform(rng, (c_out, c_in, 3, 3, 3), fan_in, slope),
                                f"{name}.conv.weight")
        bound = 1.0 / np.sqrt(fan_in)
        self.conv_b = Parameter(rng.uniform(-bound, bound, c_out).astype(np.float32),
                                f"{name}.conv.bias")
        self.bn_w = Parameter(np.ones(c_out, np.float32), f"{name}.bn.weight")
        self.bn_b = Parameter(np.zeros(c_out, np.float32), f"{name}.bn.bias")
        self.bn = BatchNormState(c_out)
        self.name = name
        self.slope = slope
        self.dropout_p = dropout_p
        self.layer_id = layer_id

    def own_parameters(self):
        return [self.conv_w, self.conv_b, self.bn_w, self.bn_b]

    def batchnorm_states(self):
        return {f"{self.name}.bn": self.bn}

    def __call__(self, x: Tensor, dropout_key: tuple[int, int] | None = None) -> Tensor:
        x = ad.conv3d(x, self.conv_w, self.conv_b)
        x = ad.batchnorm3d(x, self.bn_w, self.bn_b, self.bn, self.training)
        x = ad.leaky_relu(x, self.slope)
        if self.training and self.dropout_p > 0:
            seed, step = dropout_key or (0, 0)
            x = ad.dropout(x, self.dropout_p, (seed, self.layer_id, step))
        return ad.maxpool3d(x)


class Encoder(Module):
    def __init__(self, cfg: EncoderConfig, seed: int = 0):
        self.cfg = cfg.validate()
        rng = np.random.default_rng(seed)
        self.blocks = []
        c_in = 1
        for b, c_out in enumerate(cfg.channels, start=1):
            self.blocks.append(ConvBlock(f"encoder.block{b}", c_in, int(c_out), rng,
                                         cfg.slope, cfg.dropout_p, layer_id=b))
            c_in = int(c_out)
        self.dropout_seed = seed
        self.step = 0

    def children(self):
        return ((blk.name, blk) for blk in self.blocks)

    def __call__(self, x) -> Tensor:
        return forward(self, x)


def build(cfg: EncoderConfig, seed: int = 0) -> Encoder:
    return Encoder(cfg, seed)


def forward(enc: Encoder, volumes, mode: str | None = None) -> Tensor:
    """Encode a batch of volumes, shape (B, n, n, n) or (n, n, n), to (B, d).

    Flattening is channel-major, then spatial row-major. ``mode`` ("train" or
    "eval") overrides the module flag for this call only.
    """
    data = volumes.data if isinstance(volumes, Tensor) else np.asarray(volumes)
    if data.ndim == 3:
        data = data[None]
    n = enc.cfg.input_dim
    if data.ndim != 4 or data.shape[1:] != (n, n, n):
        raise EncoderError(f"expected volumes of shape (B, {n}, {n}, {n}), got {data.shape}")
    prev = enc.training
    if mode is not None:
        enc.train(mode == "train")
    try:
        if isinstance(volumes, Tensor):
            x = ad.reshape(volumes, (data.shape[0], 1, n, n, n))
        else:
            x = Tensor(data[:, None])
        if enc.training:
            enc.step += 1
        for blk in enc.blocks:
            x = blk(x, (enc.dropout_seed, enc.step))
        return ad.reshape(x, (x.shape[0], int(np.prod(x.shape[1:]))))
    finally:
        enc.train(prev)
