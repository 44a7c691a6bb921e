"""Projection + transformer-block encoder producing a feature pyramid.

Variants differ only in where channel-enhancement units sit:

=================  ==========================================================
``baseline``       no enhancement, ReLU projection
``afse``           SE unit after every block
``afswish``        baseline with swish (SiLU) in the projection
``afsesswish``     SE after every block and swish projection
``ce_interleaved`` enhancement module (adaptive or max-pool) after every block
``ce_bridged``     modules on even blocks; each output is max-pool aligned and
                   added to the input of the block two levels up
=================  ==========================================================
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import asdict, dataclass, field, fields

import numpy as np

from .enhancement import AceConfig, MceConfig, SeConfig, build_enhancement, count_parameters
from .nn import Conv1d, LayerNorm, Linear, Module
from .tensor import (
    ConfigurationError,
    DimensionError,
    concat,
    gelu,
    max_pool1d,
    multi_head_self_attention,
    relu,
    silu,
    transpose,
)

VARIANTS = ("baseline", "afse", "afswish", "afsesswish", "ce_interleaved", "ce_bridged")
VARIANT_ALIASES = {"ce": "ce_interleaved", "afseswish": "afsesswish", "ce_bridge": "ce_bridged"}


def canonical_variant(name):
    name = VARIANT_ALIASES.get(name, name)
    if name not in VARIANTS:
        raise ConfigurationError(f"unknown variant {name!r}; expected one of {', '.join(VARIANTS)}")
    return name


def default_strides(num_blocks):
    return [1] + [2] * (num_blocks - 1)


def default_regression_ranges(level_strides):
    """Half-open ranges in input samples: level l learns max-offsets in [4*s_(l-1), 4*s_l]."""
    ranges = []
    lo = 0.0
    for i, s in enumerate(level_strides):
        hi = math.inf if i == len(level_strides) - 1 else 4.0 * s
        ranges.append([lo, hi])
        lo = hi
    return ranges


@dataclass
class ModelConfig:
    input_channels: int
    num_classes: int
    embed_dim: int = 512
    num_blocks: int = 7
    block_strides: list = None
    num_heads: int = 4
    mlp_ratio: float = 4.0
    local_window: int = None  # None is global; k restricts to |i - j| <= k
    variant: str = "ce_interleaved"
    enhancement: str = "ace"  # "ace" | "mce"
    reduction: int = 16
    beta_mode: str = "fixed"
    beta: float = 1.0
    mce_kernel: int = 3
    mce_stride: int = 2
    head_kernel: int = 3
    prior_prob: float = 0.01
    regression_ranges: list = None

    def __post_init__(self):
        self.variant = canonical_variant(self.variant)
        if self.block_strides is None:
            self.block_strides = default_strides(self.num_blocks)
        self.block_strides = [int(s) for s in self.block_strides]
        if len(self.block_strides) != self.num_blocks:
            raise ConfigurationError(
                f"block_strides has {len(self.block_strides)} entries for {self.num_blocks} blocks"
            )
        if any(s not in (1, 2) for s in self.block_strides):
            raise ConfigurationError(f"block strides must be 1 or 2, got {self.block_strides}")
        if self.embed_dim % self.num_heads:
            raise ConfigurationError(f"embed_dim {self.embed_dim} not divisible by num_heads {self.num_heads}")
        if self.local_window is not None and self.local_window < 0:
            raise ConfigurationError(f"local_window must be >= 0 or null, got {self.local_window}")
        if self.enhancement not in ("ace", "mce"):
            raise ConfigurationError(f"enhancement must be 'ace' or 'mce', got {self.enhancement!r}")
        if self.input_channels < 1 or self.num_classes < 1 or self.num_blocks < 1:
            raise ConfigurationError("input_channels, num_classes and num_blocks must be positive")
        if self.regression_ranges is None:
            self.regression_ranges = default_regression_ranges(self.level_strides)
        self.regression_ranges = [[float(lo), float(hi)] for lo, hi in self.regression_ranges]
        if len(self.regression_ranges) != self.num_blocks:
            raise ConfigurationError("regression_ranges needs one [lo, hi] pair per pyramid level")

    @property
    def level_strides(self):
        return [int(v) for v in np.cumprod(self.block_strides)]

    @property
    def mlp_hidden(self):
        return int(round(self.embed_dim * self.mlp_ratio))

    def enhancement_config(self):
        if self.enhancement == "mce":
            return MceConfig(self.embed_dim, self.reduction, self.mce_kernel, self.mce_stride, self.beta_mode, self.beta)
        return AceConfig(self.embed_dim, self.reduction, self.beta_mode, self.beta)

    def enhanced_levels(self):
        """Block indices carrying an enhancement/SE unit."""
        if self.variant in ("afse", "afsesswish", "ce_interleaved"):
            return list(range(self.num_blocks))
        if self.variant == "ce_bridged":
            return list(range(0, self.num_blocks, 2))
        return []

    def unit_config(self):
        if self.variant in ("afse", "afsesswish"):
            return SeConfig(self.embed_dim, self.reduction)
        if self.variant in ("ce_interleaved", "ce_bridged"):
            return self.enhancement_config()
        return None

    @property
    def swish_projection(self):
        return self.variant in ("afswish", "afsesswish")

    def to_dict(self):
        d = asdict(self)
        d["regression_ranges"] = [[lo, "inf" if math.isinf(hi) else hi] for lo, hi in self.regression_ranges]
        return d

    @classmethod
    def from_dict(cls, d):
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(d) - known)
        if unknown:
            raise ConfigurationError(f"unknown model config keys: {', '.join(unknown)}")
        d = dict(d)
        if d.get("regression_ranges") is not None:
            d["regression_ranges"] = [[float(lo), float(hi)] for lo, hi in d["regression_ranges"]]
        return cls(**d)

    def fingerprint(self):
        blob = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()[:16]


@dataclass
class PyramidFeatures:
    levels: list
    level_strides: list = field(default_factory=list)

    @property
    def lengths(self):
        return [lv.shape[-1] for lv in self.levels]


class Projection(Module):
    """conv(k=3) -> activation -> conv(k=3), length preserving."""

    def __init__(self, cin, dim, swish_act=False, rng=None, dtype=np.float64):
        self.conv1 = Conv1d(cin, dim, 3, padding=1, rng=rng, dtype=dtype)
        self.conv2 = Conv1d(dim, dim, 3, padding=1, rng=rng, dtype=dtype)
        self.swish_act = swish_act
        self.input_channels = cin

    def forward(self, x):
        if x.ndim != 3 or x.shape[1] != self.input_channels:
            raise DimensionError(f"projection expects [B,{self.input_channels},T], got {x.shape}")
        h = self.conv1(x)
        h = silu(h) if self.swish_act else relu(h)
        return self.conv2(h)


class SelfAttention(Module):
    def __init__(self, dim, num_heads, local_window=None, rng=None, dtype=np.float64):
        qkv = Linear(dim, 3 * dim, rng=rng, dtype=dtype)
        out = Linear(dim, dim, rng=rng, dtype=dtype)
        self.w_qkv, self.b_qkv = qkv.weight, qkv.bias
        self.w_out, self.b_out = out.weight, out.bias
        self.num_heads = num_heads
        self.local_window = local_window

    def forward(self, x):
        return multi_head_self_attention(
            x, self.num_heads, self.w_qkv, self.b_qkv, self.w_out, self.b_out, self.local_window
        )


class TransformerBlock(Module):
    """Pre-norm attention and MLP residuals, then optional 2x downsampling.

    Downsampling is a depthwise conv (k=3, stride 2, pad 1) so T' = ceil(T/2).
    """

    def __init__(self, dim, num_heads, mlp_hidden, stride=1, local_window=None, rng=None, dtype=np.float64):
        if stride not in (1, 2):
            raise ConfigurationError(f"block stride must be 1 or 2, got {stride}")
        self.norm1 = LayerNorm(dim, dtype=dtype)
        self.attn = SelfAttention(dim, num_heads, local_window, rng=rng, dtype=dtype)
        self.norm2 = LayerNorm(dim, dtype=dtype)
        self.fc1 = Linear(dim, mlp_hidden, rng=rng, dtype=dtype)
        self.fc2 = Linear(mlp_hidden, dim, rng=rng, dtype=dtype)
        self.stride = stride
        self.downsample = Conv1d(dim, dim, 3, stride=2, padding=1, groups=dim, rng=rng, dtype=dtype) if stride == 2 else None

    def forward(self, x):
        h = transpose(x, (0, 2, 1))  # [B,T,D]
        h = h + self.attn(self.norm1(h))
        h = h + self.fc2(gelu(self.fc1(self.norm2(h))))
        y = transpose(h, (0, 2, 1))
        return self.downsample(y) if self.downsample is not None else y


def align_by_max_pool(x, target_len):
    """Parameter-free 2x reduction; an odd tail keeps its last sample."""
    T = x.shape[-1]
    if T == target_len:
        return x
    if T < 2 or (T + 1) // 2 != target_len:
        raise DimensionError(f"cannot align length {T} to {target_len}")
    pooled = max_pool1d(x, 2, 2)
    if T % 2:
        pooled = concat([pooled, x[:, :, T - 1 :]], axis=-1)
    return pooled


class Backbone(Module):
    def __init__(self, cfg, rng=None, dtype=np.float64):
        rng = rng if rng is not None else np.random.default_rng(0)
        self.cfg = cfg
        D = cfg.embed_dim
        self.projection = Projection(cfg.input_channels, D, cfg.swish_projection, rng=rng, dtype=dtype)
        self.blocks = [
            TransformerBlock(D, cfg.num_heads, cfg.mlp_hidden, s, cfg.local_window, rng=rng, dtype=dtype)
            for s in cfg.block_strides
        ]
        unit_cfg = cfg.unit_config()
        enhanced = set(cfg.enhanced_levels())
        self.units = [
            build_enhancement(unit_cfg, rng=rng, dtype=dtype) if i in enhanced else None
            for i in range(cfg.num_blocks)
        ]

    @property
    def num_units(self):
        return sum(u is not None for u in self.units)

    def forward(self, x):
        cfg = self.cfg
        h = self.projection(x)
        levels = []
        bridged = cfg.variant == "ce_bridged"
        pending = None  # bridge output waiting to join the next level
        for i, block in enumerate(self.blocks):
            y = block(h)
            unit = self.units[i]
            if bridged:
                if pending is not None:
                    y = y + align_by_max_pool(pending, y.shape[-1])
                    pending = None
                if unit is not None:
                    if i + 1 < cfg.num_blocks:
                        pending = unit(y)
                    else:
                        y = y + unit(y)
            elif unit is not None:
                y = unit(y)
            levels.append(y)
            h = y
        return PyramidFeatures(levels, cfg.level_strides)


def count_model_parameters(cfg):
    """Closed-form trainable scalar count for backbone plus heads."""
    D, C, K = cfg.embed_dim, cfg.num_classes, cfg.head_kernel
    H = cfg.mlp_hidden
    total = cfg.input_channels * D * 3 + D + D * D * 3 + D
    for s in cfg.block_strides:
        total += 2 * D + (3 * D * D + 3 * D) + (D * D + D) + 2 * D + (D * H + H) + (H * D + D)
        if s == 2:
            total += 3 * D + D
    unit_cfg = cfg.unit_config()
    if unit_cfg is not None:
        total += len(cfg.enhanced_levels()) * count_parameters(unit_cfg)
    total += cfg.num_blocks * 2 * D  # neck norms
    head_trunk = 2 * (D * D * K + D)
    total += head_trunk + D * C * K + C
    total += head_trunk + D * 2 * K + 2
    return total
