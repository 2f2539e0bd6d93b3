"""Noise-prediction UNet with cross-attention over the conditioning sequence."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .conditioning import ConditioningBundle, collate_bundles, sinusoidal_table
from .errors import ArgumentError, ConfigError


@dataclass
class DenoiserConfig:
    image_size: int = 64
    in_channels: int = 3
    base_channels: int = 32
    channel_multipliers: tuple = (1, 2, 4)
    attention_resolutions: tuple = (16, 8)
    num_heads: int = 4
    cond_dim: int = 64
    time_embed_dim: int = 128
    aggregation_resolution: int = 16
    # network output head: "eps" directly, or "v" converted to eps with the schedule
    prediction: str = "v"

    def __post_init__(self):
        self.channel_multipliers = tuple(int(m) for m in self.channel_multipliers)
        self.attention_resolutions = tuple(int(r) for r in self.attention_resolutions)

    @property
    def resolutions(self) -> list[int]:
        """Spatial size of each down level followed by the middle block."""
        n = len(self.channel_multipliers)
        return [self.image_size >> i for i in range(n + 1)]

    def validate(self):
        if self.image_size < 1 or self.base_channels < 1 or not self.channel_multipliers:
            raise ConfigError("image_size, base_channels and channel_multipliers must be positive")
        if self.image_size % (1 << len(self.channel_multipliers)):
            raise ConfigError(
                f"image_size {self.image_size} not divisible by 2^{len(self.channel_multipliers)}",
                key="image_size",
            )
        if self.cond_dim <= 0:
            raise ConfigError("cond_dim must be positive", key="cond_dim")
        if self.prediction not in ("eps", "v"):
            raise ConfigError(f"prediction must be 'eps' or 'v', got {self.prediction!r}", key="prediction")
        for r in self.attention_resolutions:
            if r <= 0 or self.image_size % r:
                raise ConfigError(f"attention resolution {r} does not divide {self.image_size}",
                                  key="attention_resolutions")
            if r not in self.resolutions:
                raise ConfigError(f"no UNet level at resolution {r}; levels are {self.resolutions}",
                                  key="attention_resolutions")
        for r in self.resolutions:
            if r in self.attention_resolutions and (self.level_channels(r) % self.num_heads):
                raise ConfigError(f"num_heads {self.num_heads} does not divide {self.level_channels(r)}",
                                  key="num_heads")
        if self.aggregation_resolution not in self.attention_resolutions:
            raise ConfigError(
                f"aggregation resolution {self.aggregation_resolution} has no attention layer",
                key="aggregation_resolution",
            )
        return self

    def level_channels(self, res: int) -> int:
        i = self.resolutions.index(res)
        mults = self.channel_multipliers
        return self.base_channels * mults[min(i, len(mults) - 1)]

    def to_dict(self) -> dict:
        d = asdict(self)
        d["channel_multipliers"] = list(self.channel_multipliers)
        d["attention_resolutions"] = list(self.attention_resolutions)
        return d


@dataclass
class AttentionRecord:
    layer_id: str
    probs: torch.Tensor  # (B, heads, Q, K), post-softmax
    resolution: tuple

    @property
    def head_count(self) -> int:
        return self.probs.shape[1]

    def map(self, b: int = 0) -> torch.Tensor:
        return self.probs[b]


@dataclass
class DenoiserOutput:
    eps_pred: torch.Tensor
    attention: list = field(default_factory=list)


def _groups(ch: int) -> int:
    for g in (8, 4, 2, 1):
        if ch % g == 0:
            return g
    return 1


def timestep_embedding(t: torch.Tensor, dim: int) -> torch.Tensor:
    half = dim // 2
    freq = torch.exp(-math.log(10000.0) * torch.arange(half, dtype=torch.float64) / half)
    args = t.double()[:, None] * freq[None]
    emb = torch.cat([torch.sin(args), torch.cos(args)], dim=1)
    if dim % 2:
        emb = F.pad(emb, (0, 1))
    return emb


class ResBlock(nn.Module):
    def __init__(self, cin, cout, tdim):
        super().__init__()
        self.norm1 = nn.GroupNorm(_groups(cin), cin)
        self.conv1 = nn.Conv2d(cin, cout, 3, padding=1)
        self.time = nn.Linear(tdim, cout)
        self.norm2 = nn.GroupNorm(_groups(cout), cout)
        self.conv2 = nn.Conv2d(cout, cout, 3, padding=1)
        self.skip = nn.Conv2d(cin, cout, 1) if cin != cout else nn.Identity()

    def forward(self, x, temb):
        h = self.conv1(F.silu(self.norm1(x)))
        h = h + self.time(F.silu(temb))[:, :, None, None]
        h = self.conv2(F.silu(self.norm2(h)))
        return h + self.skip(x)


class CrossAttention(nn.Module):
    """Multi-head attention of spatial queries over conditioning keys/values."""

    def __init__(self, query_dim, cond_dim, heads):
        super().__init__()
        if query_dim % heads:
            raise ConfigError(f"{heads} heads do not divide inner dim {query_dim}")
        self.heads = heads
        self.to_q = nn.Linear(query_dim, query_dim, bias=False)
        self.to_k = nn.Linear(cond_dim, query_dim, bias=False)
        self.to_v = nn.Linear(cond_dim, query_dim, bias=False)
        self.to_out = nn.Linear(query_dim, query_dim)

    def forward(self, x, cond, key_valid=None):
        # x: (B, Q, C), cond: (B, K, d) -> out (B, Q, C), probs (B, heads, Q, K)
        B, Q, C = x.shape
        h, dh = self.heads, C // self.heads
        q = self.to_q(x).view(B, Q, h, dh).transpose(1, 2)
        k = self.to_k(cond).view(B, -1, h, dh).transpose(1, 2)
        v = self.to_v(cond).view(B, -1, h, dh).transpose(1, 2)
        logits = q @ k.transpose(-1, -2) / math.sqrt(dh)
        if key_valid is not None:
            logits = logits.masked_fill(~key_valid[:, None, None, :], float("-inf"))
        probs = logits.softmax(dim=-1)
        out = (probs @ v).transpose(1, 2).reshape(B, Q, C)
        return self.to_out(out), probs


class CrossAttnBlock(nn.Module):
    """Pre-norm cross-attention with a fixed 2-D positional code added to the queries."""

    def __init__(self, channels, cond_dim, heads, res):
        super().__init__()
        self.res = res
        self.norm = nn.GroupNorm(_groups(channels), channels)
        self.attn = CrossAttention(channels, cond_dim, heads)
        self.register_buffer("pos", _grid_positions(res, channels), persistent=False)

    def forward(self, x, cond, key_valid):
        B, C, H, W = x.shape
        hq = self.norm(x).flatten(2).transpose(1, 2) + self.pos.to(x.dtype)
        out, probs = self.attn(hq, cond, key_valid)
        return x + out.transpose(1, 2).reshape(B, C, H, W), probs


def _grid_positions(res: int, channels: int) -> torch.Tensor:
    # half the channels encode rows, half columns
    half = channels // 2
    rows = sinusoidal_table(res, half)
    cols = sinusoidal_table(res, channels - half)
    grid = torch.cat(
        [rows[:, None, :].expand(res, res, half), cols[None, :, :].expand(res, res, channels - half)], -1
    )
    # sinusoid scale ~1 would swamp normalized features at small widths
    return (0.5 * grid.reshape(res * res, channels)).float()


class UNet(nn.Module):
    """Noise predictor.

    With ``prediction="v"`` the raw output is read as v = sqrt(abar) eps - sqrt(1 - abar) x0
    and returned as eps = sqrt(abar) v + sqrt(1 - abar) z_t, so ``alpha_bars`` of the
    training schedule is required. At high noise eps is then close to z_t by construction
    instead of having to be learned as a near-identity map.
    """

    def __init__(self, config: DenoiserConfig, alpha_bars=None):
        super().__init__()
        self.config = config.validate()
        c = config
        if c.prediction == "v":
            if alpha_bars is None:
                raise ConfigError("v prediction needs the schedule's alpha_bars", key="prediction")
            ab = torch.as_tensor(np.asarray(alpha_bars, dtype=np.float64))
            self.register_buffer("sqrt_abar", ab.sqrt(), persistent=False)
            self.register_buffer("sqrt_one_minus_abar", (1 - ab).sqrt(), persistent=False)
        tdim = c.time_embed_dim
        self.time_mlp = nn.Sequential(nn.Linear(tdim, tdim), nn.SiLU(), nn.Linear(tdim, tdim))
        # token tables are kept small for handle mobility; attention sees them at unit scale
        self.cond_norm = nn.LayerNorm(c.cond_dim)
        self.conv_in = nn.Conv2d(c.in_channels, c.base_channels, 3, padding=1)

        res = c.image_size
        ch = c.base_channels
        skips = [ch]
        self.down = nn.ModuleList()
        for mult in c.channel_multipliers:
            cout = c.base_channels * mult
            level = nn.ModuleDict({"res": ResBlock(ch, cout, tdim)})
            if res in c.attention_resolutions:
                level["attn"] = CrossAttnBlock(cout, c.cond_dim, c.num_heads, res)
            level["downsample"] = nn.Conv2d(cout, cout, 3, stride=2, padding=1)
            self.down.append(level)
            ch = cout
            skips.append(ch)
            res //= 2

        self.mid = nn.ModuleDict({"res1": ResBlock(ch, ch, tdim), "res2": ResBlock(ch, ch, tdim)})
        if res in c.attention_resolutions:
            self.mid["attn"] = CrossAttnBlock(ch, c.cond_dim, c.num_heads, res)

        self.up = nn.ModuleList()
        for mult in reversed(c.channel_multipliers):
            res *= 2
            cout = c.base_channels * mult
            level = nn.ModuleDict({"upsample": nn.Conv2d(ch, ch, 3, padding=1)})
            level["res"] = ResBlock(ch + skips.pop(), cout, tdim)
            if res in c.attention_resolutions:
                level["attn"] = CrossAttnBlock(cout, c.cond_dim, c.num_heads, res)
            self.up.append(level)
            ch = cout
        self.norm_out = nn.GroupNorm(_groups(ch), ch)
        self.conv_out = nn.Conv2d(ch, c.in_channels, 3, padding=1)

    def forward(self, x, t, cond, key_valid=None, capture_attention=False) -> DenoiserOutput:
        c = self.config
        if cond.shape[-1] != c.cond_dim:
            raise ConfigError(f"conditioning dim {cond.shape[-1]} != network cond_dim {c.cond_dim}",
                              key="cond_dim")
        if x.ndim != 4 or x.shape[1] != c.in_channels or x.shape[-1] != c.image_size or x.shape[-2] != c.image_size:
            raise ArgumentError(f"input shape {tuple(x.shape)} does not match config")
        cond = self.cond_norm(cond)
        t = torch.as_tensor(t).reshape(-1)
        if t.numel() == 1:
            t = t.expand(x.shape[0])
        temb = self.time_mlp(timestep_embedding(t, c.time_embed_dim).to(x.dtype))
        records = []

        def attend(block, h, name):
            h, probs = block(h, cond, key_valid)
            if capture_attention:
                records.append(AttentionRecord(name, probs, (block.res, block.res)))
            return h

        h = self.conv_in(x)
        hs = [h]
        for i, level in enumerate(self.down):
            h = level["res"](h, temb)
            if "attn" in level:
                h = attend(level["attn"], h, f"down.{i}")
            hs.append(h)
            h = level["downsample"](h)
        h = self.mid["res1"](h, temb)
        if "attn" in self.mid:
            h = attend(self.mid["attn"], h, "mid")
        h = self.mid["res2"](h, temb)
        for i, level in enumerate(self.up):
            h = level["upsample"](F.interpolate(h, scale_factor=2, mode="nearest"))
            h = level["res"](torch.cat([h, hs.pop()], 1), temb)
            if "attn" in level:
                h = attend(level["attn"], h, f"up.{i}")
        out = self.conv_out(F.silu(self.norm_out(h)))
        if c.prediction == "v":
            if int(t.min()) < 0 or int(t.max()) >= len(self.sqrt_abar):
                raise ArgumentError(f"timestep outside [0, {len(self.sqrt_abar)})")
            shape = (-1, 1, 1, 1)
            a = self.sqrt_abar[t.long()].to(x.dtype).view(shape)
            b = self.sqrt_one_minus_abar[t.long()].to(x.dtype).view(shape)
            out = a * out + b * x
        return DenoiserOutput(out, records)


def denoise(net: UNet, z_t, t, cond, capture_attention: bool = False) -> DenoiserOutput:
    """Predict noise for one latent or a batch.

    ``cond`` is a ConditioningBundle (single latent) or a list of bundles
    (one per batch element); bundles are right-padded and padded keys are
    excluded from the softmax.
    """
    single = z_t.ndim == 3
    if single:
        z_t = z_t[None]
    bundles = [cond] if isinstance(cond, ConditioningBundle) else list(cond)
    if len(bundles) != z_t.shape[0]:
        raise ArgumentError(f"{len(bundles)} bundles for batch of {z_t.shape[0]}")
    emb, valid = collate_bundles(bundles)
    out = net(z_t, t, emb.to(z_t.dtype), valid, capture_attention)
    if single:
        out.eps_pred = out.eps_pred[0]
    return out


def aggregate_attention(records, token_index: int, target_resolution=None,
                        aggregation_resolution: int = 16, batch_index: int = 0) -> torch.Tensor:
    """Mean over heads and aggregation-resolution layers of one token's attention column.

    Returns an (h, w) map min-max normalized to [0, 1]; a constant map
    becomes all zeros.
    """
    chosen = [r for r in records if r.resolution == (aggregation_resolution, aggregation_resolution)]
    if not chosen:
        raise ConfigError(f"no attention layer at resolution {aggregation_resolution}",
                          key="aggregation_resolution")
    cols = []
    for r in chosen:
        p = r.probs[batch_index]
        if token_index >= p.shape[-1]:
            raise ArgumentError(f"token index {token_index} >= sequence length {p.shape[-1]}")
        cols.append(p[:, :, token_index].mean(0))
    m = torch.stack(cols).mean(0).reshape(aggregation_resolution, aggregation_resolution)
    m = minmax_normalize(m)
    if target_resolution is not None and tuple(target_resolution) != tuple(m.shape):
        m = F.interpolate(m[None, None], size=tuple(target_resolution), mode="nearest")[0, 0]
    return m


def minmax_normalize(m: torch.Tensor) -> torch.Tensor:
    lo, hi = m.min(), m.max()
    span = hi - lo
    if span <= 0:
        return torch.zeros_like(m)
    return (m - lo) / span
