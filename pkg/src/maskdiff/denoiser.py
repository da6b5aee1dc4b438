"""Conditional U-Net noise predictor.

Input is the noisy image with the binary mask appended as an extra channel;
output is the predicted noise for the image channels only. The network is a
standard width-multiplier U-Net:

- encoder: per level, two residual blocks (optionally followed by spatial
  self-attention), then a stride-2 downsample except at the coarsest level;
- bottleneck: residual block, attention, residual block;
- decoder: mirror of the encoder, each residual block consuming the matching
  encoder activation by channel concatenation, nearest-neighbor upsample
  between levels;
- head: GroupNorm -> SiLU -> 3x3 conv to the output channels.

Each residual block is GroupNorm -> SiLU -> conv, plus a learned per-channel
bias projected from the timestep embedding, then GroupNorm -> SiLU -> conv,
with an identity (or 1x1 projection) residual connection. The timestep enters
through a sinusoidal embedding expanded by a two-layer MLP.

Parameters live in plain ``name -> tensor`` dicts (the module state_dict),
so they serialize through the checkpoint format without framework baggage.
``init_params`` draws fan-in-scaled uniform weights from a seeded numpy
generator and zero-initializes the output convolution, which makes the
untrained predictor exactly zero.
"""

import math
from dataclasses import dataclass
from typing import Mapping, OrderedDict as OrderedDictT

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

_INIT_STREAM = 0xD1F


@dataclass(frozen=True)
class DenoiserConfig:
    """Architecture hyperparameters; everything else is derived from these."""

    in_channels: int
    base_channels: int = 64
    channel_mults: tuple[int, ...] = (1, 2, 4, 8)
    attention_levels: frozenset[int] = frozenset({2, 3})
    groups: int = 8
    time_embed_dim: int = 0  # 0 -> 4 * base_channels

    def __post_init__(self):
        object.__setattr__(self, "channel_mults", tuple(self.channel_mults))
        object.__setattr__(self, "attention_levels", frozenset(self.attention_levels))
        if self.time_embed_dim == 0:
            object.__setattr__(self, "time_embed_dim", 4 * self.base_channels)
        if self.in_channels < 2:
            raise ValueError("in_channels must be >= 2 (image channels + mask)")
        if self.base_channels < 1 or self.base_channels % self.groups != 0:
            raise ValueError(
                f"base_channels ({self.base_channels}) must be a positive "
                f"multiple of groups ({self.groups})"
            )
        if not self.channel_mults or any(m < 1 for m in self.channel_mults):
            raise ValueError("channel_mults must be a nonempty list of positive ints")
        bad = [l for l in self.attention_levels if not 0 <= l < self.levels]
        if bad:
            raise ValueError(f"attention_levels {bad} outside 0..{self.levels - 1}")
        if self.time_embed_dim < 2 or self.time_embed_dim % 2 != 0:
            raise ValueError("time_embed_dim must be even and >= 2")

    @property
    def out_channels(self) -> int:
        return self.in_channels - 1

    @property
    def levels(self) -> int:
        return len(self.channel_mults)

    @property
    def level_channels(self) -> tuple[int, ...]:
        return tuple(self.base_channels * m for m in self.channel_mults)

    @property
    def spatial_divisor(self) -> int:
        return 2 ** (self.levels - 1)


def sinusoidal_embedding(t, dim: int) -> torch.Tensor:
    """Sinusoidal timestep embedding of even dimension ``dim``.

    First half sin(t * w_k), second half cos(t * w_k), with frequencies
    w_k = 10000^(-2k/dim) for k = 0..dim/2-1. Accepts a scalar t or a 1-D
    batch of timesteps.
    """
    if dim < 2 or dim % 2 != 0:
        raise ValueError(f"embedding dim must be even and >= 2, got {dim}")
    t = torch.as_tensor(t, dtype=torch.float64)
    scalar = t.ndim == 0
    if scalar:
        t = t[None]
    if torch.any(t < 0):
        raise ValueError("timesteps must be >= 0")
    k = torch.arange(dim // 2, dtype=torch.float64)
    freqs = torch.pow(10000.0, -2.0 * k / dim)
    phases = t[:, None] * freqs[None, :]
    emb = torch.cat([torch.sin(phases), torch.cos(phases)], dim=1)
    return emb[0] if scalar else emb


class TimeEmbedding(nn.Module):
    """Two-layer expansion of the sinusoidal embedding."""

    def __init__(self, base_channels: int, embed_dim: int):
        super().__init__()
        self.base_channels = base_channels
        self.fc1 = nn.Linear(base_channels, embed_dim)
        self.fc2 = nn.Linear(embed_dim, embed_dim)

    def forward(self, t: torch.Tensor) -> torch.Tensor:
        dtype = self.fc1.weight.dtype
        emb = sinusoidal_embedding(t, self.base_channels).to(dtype)
        if emb.ndim == 1:
            emb = emb[None]
        return self.fc2(F.silu(self.fc1(emb)))


class ResidualBlock(nn.Module):
    def __init__(self, in_ch: int, out_ch: int, time_dim: int, groups: int):
        super().__init__()
        self.norm1 = nn.GroupNorm(groups, in_ch)
        self.conv1 = nn.Conv2d(in_ch, out_ch, 3, padding=1)
        self.time_proj = nn.Linear(time_dim, out_ch)
        self.norm2 = nn.GroupNorm(groups, out_ch)
        self.conv2 = nn.Conv2d(out_ch, out_ch, 3, padding=1)
        self.skip = nn.Conv2d(in_ch, out_ch, 1) if in_ch != out_ch else nn.Identity()

    def forward(self, x: torch.Tensor, temb: torch.Tensor) -> torch.Tensor:
        h = self.conv1(F.silu(self.norm1(x)))
        h = h + self.time_proj(F.silu(temb))[:, :, None, None]
        h = self.conv2(F.silu(self.norm2(h)))
        return h + self.skip(x)


class AttentionBlock(nn.Module):
    """Single-head self-attention over flattened spatial positions."""

    def __init__(self, channels: int, groups: int):
        super().__init__()
        self.channels = channels
        self.norm = nn.GroupNorm(groups, channels)
        self.q = nn.Conv2d(channels, channels, 1)
        self.k = nn.Conv2d(channels, channels, 1)
        self.v = nn.Conv2d(channels, channels, 1)
        self.proj = nn.Conv2d(channels, channels, 1)

    def attention_probs(self, x: torch.Tensor) -> torch.Tensor:
        """Softmax weights, shape (B, query positions, key positions)."""
        b, c, h, w = x.shape
        y = self.norm(x)
        q = self.q(y).reshape(b, c, h * w)
        k = self.k(y).reshape(b, c, h * w)
        scores = torch.einsum("bci,bcj->bij", q, k) / math.sqrt(c)
        return torch.softmax(scores, dim=-1)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        b, c, h, w = x.shape
        probs = self.attention_probs(x)
        v = self.v(self.norm(x)).reshape(b, c, h * w)
        out = torch.einsum("bij,bcj->bci", probs, v).reshape(b, c, h, w)
        return x + self.proj(out)


class Downsample(nn.Module):
    def __init__(self, channels: int):
        super().__init__()
        self.conv = nn.Conv2d(channels, channels, 3, stride=2, padding=1)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.conv(x)


class Upsample(nn.Module):
    """Nearest-neighbor 2x upsample followed by a 3x3 conv."""

    def __init__(self, in_ch: int, out_ch: int):
        super().__init__()
        self.conv = nn.Conv2d(in_ch, out_ch, 3, padding=1)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.conv(F.interpolate(x, scale_factor=2, mode="nearest"))


class _EncoderLevel(nn.Module):
    def __init__(self, in_ch, out_ch, time_dim, groups, attn, down):
        super().__init__()
        self.block1 = ResidualBlock(in_ch, out_ch, time_dim, groups)
        self.block2 = ResidualBlock(out_ch, out_ch, time_dim, groups)
        self.attn = AttentionBlock(out_ch, groups) if attn else None
        self.down = Downsample(out_ch) if down else None


class _DecoderLevel(nn.Module):
    def __init__(self, ch, up_ch, time_dim, groups, attn, up):
        super().__init__()
        self.block1 = ResidualBlock(2 * ch, ch, time_dim, groups)
        self.block2 = ResidualBlock(2 * ch, ch, time_dim, groups)
        self.attn = AttentionBlock(ch, groups) if attn else None
        self.up = Upsample(ch, up_ch) if up else None


class ConditionalUNet(nn.Module):
    """The epsilon predictor: (image + mask channel, timestep) -> noise."""

    def __init__(self, cfg: DenoiserConfig):
        super().__init__()
        self.cfg = cfg
        chans = cfg.level_channels
        tdim = cfg.time_embed_dim

        self.time_mlp = TimeEmbedding(cfg.base_channels, tdim)
        self.stem = nn.Conv2d(cfg.in_channels, chans[0], 3, padding=1)

        self.enc = nn.ModuleList()
        for lvl in range(cfg.levels):
            in_ch = chans[lvl - 1] if lvl > 0 else chans[0]
            self.enc.append(
                _EncoderLevel(
                    in_ch,
                    chans[lvl],
                    tdim,
                    cfg.groups,
                    attn=lvl in cfg.attention_levels,
                    down=lvl < cfg.levels - 1,
                )
            )

        mid_ch = chans[-1]
        self.mid_block1 = ResidualBlock(mid_ch, mid_ch, tdim, cfg.groups)
        self.mid_attn = AttentionBlock(mid_ch, cfg.groups)
        self.mid_block2 = ResidualBlock(mid_ch, mid_ch, tdim, cfg.groups)

        self.dec = nn.ModuleList()
        for lvl in reversed(range(cfg.levels)):
            self.dec.append(
                _DecoderLevel(
                    chans[lvl],
                    chans[lvl - 1] if lvl > 0 else chans[0],
                    tdim,
                    cfg.groups,
                    attn=lvl in cfg.attention_levels,
                    up=lvl > 0,
                )
            )

        self.head_norm = nn.GroupNorm(cfg.groups, chans[0])
        self.head_conv = nn.Conv2d(chans[0], cfg.out_channels, 3, padding=1)

    def forward(self, x: torch.Tensor, t) -> torch.Tensor:
        cfg = self.cfg
        squeeze = x.ndim == 3
        if squeeze:
            x = x[None]
        if x.ndim != 4 or x.shape[1] != cfg.in_channels:
            raise ValueError(
                f"expected input with {cfg.in_channels} channels, got shape "
                f"{tuple(x.shape)}"
            )
        h_px, w_px = x.shape[2], x.shape[3]
        d = cfg.spatial_divisor
        if h_px % d != 0 or w_px % d != 0:
            raise ValueError(
                f"spatial dims {h_px}x{w_px} must be divisible by {d} "
                f"for {cfg.levels} levels"
            )
        t = torch.as_tensor(t)
        if t.ndim == 0:
            t = t.expand(x.shape[0])
        temb = self.time_mlp(t)

        h = self.stem(x)
        skips = []
        for level in self.enc:
            h = level.block1(h, temb)
            skips.append(h)
            h = level.block2(h, temb)
            if level.attn is not None:
                h = level.attn(h)
            skips.append(h)
            if level.down is not None:
                h = level.down(h)

        h = self.mid_block1(h, temb)
        h = self.mid_attn(h)
        h = self.mid_block2(h, temb)

        for level in self.dec:
            h = level.block1(torch.cat([h, skips.pop()], dim=1), temb)
            h = level.block2(torch.cat([h, skips.pop()], dim=1), temb)
            if level.attn is not None:
                h = level.attn(h)
            if level.up is not None:
                h = level.up(h)

        out = self.head_conv(F.silu(self.head_norm(h)))
        return out[0] if squeeze else out


def init_params(
    cfg: DenoiserConfig, seed: int, zero_head: bool = True
) -> "OrderedDictT[str, torch.Tensor]":
    """Deterministic fan-in-scaled uniform initialization.

    Weights and biases are drawn uniformly from [-1/sqrt(fan_in), 1/sqrt(fan_in)];
    GroupNorm scales start at 1 with zero shift. With ``zero_head`` the final
    convolution is zeroed, so a freshly initialized denoiser predicts exactly
    zero noise.
    """
    rng = np.random.default_rng((seed, _INIT_STREAM))
    model = ConditionalUNet(cfg)
    state = model.state_dict()

    def fill_uniform(tensor, fan_in):
        bound = 1.0 / math.sqrt(fan_in)
        arr = rng.uniform(-bound, bound, size=tuple(tensor.shape))
        return torch.from_numpy(arr).to(torch.float32)

    for name, module in model.named_modules():
        if isinstance(module, nn.Conv2d):
            fan_in = module.in_channels * module.kernel_size[0] * module.kernel_size[1]
            state[f"{name}.weight"] = fill_uniform(module.weight, fan_in)
            state[f"{name}.bias"] = fill_uniform(module.bias, fan_in)
        elif isinstance(module, nn.Linear):
            fan_in = module.in_features
            state[f"{name}.weight"] = fill_uniform(module.weight, fan_in)
            state[f"{name}.bias"] = fill_uniform(module.bias, fan_in)
        elif isinstance(module, nn.GroupNorm):
            state[f"{name}.weight"] = torch.ones_like(module.weight)
            state[f"{name}.bias"] = torch.zeros_like(module.bias)

    if zero_head:
        state["head_conv.weight"] = torch.zeros_like(state["head_conv.weight"])
        state["head_conv.bias"] = torch.zeros_like(state["head_conv.bias"])
    return state


def build_denoiser(
    cfg: DenoiserConfig,
    params: Mapping[str, torch.Tensor] | None = None,
    dtype: torch.dtype = torch.float32,
) -> ConditionalUNet:
    """Construct the module and optionally load a parameter set into it."""
    model = ConditionalUNet(cfg).to(dtype)
    if params is not None:
        model.load_state_dict({k: v.to(dtype) for k, v in params.items()})
    return model


def denoiser_forward(
    params: Mapping[str, torch.Tensor], cfg: DenoiserConfig, x: torch.Tensor, t
) -> torch.Tensor:
    """Functional forward pass for a named parameter set."""
    dtype = next(iter(params.values())).dtype
    return build_denoiser(cfg, params, dtype)(x, t)
