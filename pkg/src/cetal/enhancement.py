"""Channel-wise enhancement blocks.

* :class:`AdaptiveChannelEnhancement` squeezes time with an adaptive average
  pool, scores channels through a swish bottleneck and reweights the input
  before a trailing 1x1 convolution.
* :class:`MaxPoolChannelEnhancement` keeps a coarse time axis (local max
  pooling), scores channels per pooled step and interpolates the weights back
  to full length.
* :class:`SqueezeExcitation` is the classic ReLU bottleneck used by the SE
  ablation variants.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .nn import Conv1d, Module, parameter
from .tensor import (
    ConfigurationError,
    DimensionError,
    adaptive_avg_pool1d_to_one,
    linear_interpolate,
    max_pool1d,
    relu,
    sigmoid,
    swish,
)


def bottleneck_width(channels, reduction):
    return max(1, math.ceil(channels / reduction))


@dataclass(frozen=True)
class AceConfig:
    channels: int
    reduction: int = 16
    beta_mode: str = "fixed"  # "fixed" | "learnable"
    beta: float = 1.0

    def __post_init__(self):
        if self.channels < 1 or self.reduction < 1:
            raise ConfigurationError(f"channels and reduction must be >= 1, got {self.channels}, {self.reduction}")
        if self.beta_mode not in ("fixed", "learnable"):
            raise ConfigurationError(f"beta_mode must be 'fixed' or 'learnable', got {self.beta_mode!r}")

    @property
    def hidden(self):
        return bottleneck_width(self.channels, self.reduction)


@dataclass(frozen=True)
class MceConfig:
    channels: int
    reduction: int = 16
    kernel: int = 3
    stride: int = 2
    beta_mode: str = "fixed"
    beta: float = 1.0

    def __post_init__(self):
        if self.channels < 1 or self.reduction < 1:
            raise ConfigurationError(f"channels and reduction must be >= 1, got {self.channels}, {self.reduction}")
        if self.kernel < 1 or self.stride < 1:
            raise ConfigurationError(f"max-pool kernel and stride must be >= 1, got k={self.kernel}, s={self.stride}")
        if self.beta_mode not in ("fixed", "learnable"):
            raise ConfigurationError(f"beta_mode must be 'fixed' or 'learnable', got {self.beta_mode!r}")

    @property
    def hidden(self):
        return bottleneck_width(self.channels, self.reduction)


@dataclass(frozen=True)
class SeConfig:
    channels: int
    reduction: int = 16

    @property
    def hidden(self):
        return bottleneck_width(self.channels, self.reduction)


def _check_channels(x, channels, what):
    if x.ndim != 3 or x.shape[1] != channels:
        raise DimensionError(f"{what} expects [B,{channels},T], got {x.shape}")


class _Bottleneck(Module):
    """conv1x1 (C -> hidden) -> activation -> conv1x1 (hidden -> C) -> sigmoid."""

    def __init__(self, channels, hidden, beta_mode, beta, rng, dtype):
        self.conv1 = Conv1d(channels, hidden, 1, rng=rng, dtype=dtype)
        self.conv2 = Conv1d(hidden, channels, 1, rng=rng, dtype=dtype)
        if beta_mode == "learnable":
            self.beta = parameter(np.asarray(beta, dtype=dtype))
        else:
            self.beta = float(beta)

    def forward(self, pooled):
        return sigmoid(self.conv2(swish(self.conv1(pooled), self.beta)))


class AdaptiveChannelEnhancement(Module):
    def __init__(self, cfg, rng=None, dtype=np.float64, identity_noise=1e-2):
        rng = rng if rng is not None else np.random.default_rng(0)
        self.cfg = cfg
        self.excite = _Bottleneck(cfg.channels, cfg.hidden, cfg.beta_mode, cfg.beta, rng, dtype)
        self.out_conv = Conv1d(cfg.channels, cfg.channels, 1, rng=rng, dtype=dtype)
        C = cfg.channels
        self.out_conv.weight.data = (np.eye(C) + identity_noise * rng.standard_normal((C, C))).astype(dtype)[:, :, None]
        self.out_conv.bias.data = np.zeros(C, dtype=dtype)

    def channel_weights(self, x):
        """Per-channel weights in (0, 1), shape ``[B, C, 1]``."""
        _check_channels(x, self.cfg.channels, "adaptive channel enhancement")
        return self.excite(adaptive_avg_pool1d_to_one(x))

    def forward(self, x):
        return self.out_conv(x * self.channel_weights(x))


class MaxPoolChannelEnhancement(Module):
    def __init__(self, cfg, rng=None, dtype=np.float64):
        rng = rng if rng is not None else np.random.default_rng(0)
        self.cfg = cfg
        self.excite = _Bottleneck(cfg.channels, cfg.hidden, cfg.beta_mode, cfg.beta, rng, dtype)

    def channel_weights(self, x):
        """Weights per pooled step, shape ``[B, C, L']`` before interpolation."""
        _check_channels(x, self.cfg.channels, "max-pool channel enhancement")
        return self.excite(max_pool1d(x, self.cfg.kernel, self.cfg.stride))

    def forward(self, x):
        weights = linear_interpolate(self.channel_weights(x), x.shape[-1])
        return x * weights


class SqueezeExcitation(Module):
    def __init__(self, cfg, rng=None, dtype=np.float64):
        rng = rng if rng is not None else np.random.default_rng(0)
        self.cfg = cfg
        self.fc1 = Conv1d(cfg.channels, cfg.hidden, 1, rng=rng, dtype=dtype)
        self.fc2 = Conv1d(cfg.hidden, cfg.channels, 1, rng=rng, dtype=dtype)

    def channel_weights(self, x):
        _check_channels(x, self.cfg.channels, "squeeze-excitation")
        return sigmoid(self.fc2(relu(self.fc1(adaptive_avg_pool1d_to_one(x)))))

    def forward(self, x):
        return x * self.channel_weights(x)


def build_enhancement(cfg, rng=None, dtype=np.float64):
    if isinstance(cfg, AceConfig):
        return AdaptiveChannelEnhancement(cfg, rng=rng, dtype=dtype)
    if isinstance(cfg, MceConfig):
        return MaxPoolChannelEnhancement(cfg, rng=rng, dtype=dtype)
    if isinstance(cfg, SeConfig):
        return SqueezeExcitation(cfg, rng=rng, dtype=dtype)
    raise ConfigurationError(f"unknown enhancement config {cfg!r}")


def count_parameters(cfg, include_trailing=True):
    """Trainable scalar count for an enhancement config.

    ``include_trailing=False`` drops the trailing 1x1 conv of the adaptive
    block (bottleneck only). Model configs are delegated to the backbone.
    """
    if isinstance(cfg, (AceConfig, MceConfig, SeConfig)):
        C, h = cfg.channels, cfg.hidden
        count = (C * h + h) + (h * C + C)
        if isinstance(cfg, (AceConfig, MceConfig)) and cfg.beta_mode == "learnable":
            count += 1
        if isinstance(cfg, AceConfig) and include_trailing:
            count += C * C + C
        return count
    from .backbone import ModelConfig, count_model_parameters

    if isinstance(cfg, ModelConfig):
        return count_model_parameters(cfg)
    raise ConfigurationError(f"cannot count parameters for {cfg!r}")
