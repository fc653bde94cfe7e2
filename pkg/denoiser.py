"""
Conditional UNet noise predictor with a ladder-side encoder and masked fusion.

Data flow for one call::

    x_t ──► main encoder ──► skips F_enc[l] ─┐
    I_bg ─► ladder-side encoder ─► F_side[l] ├─► masked_fuse ─► decoder level l
                          decoder state F_dec ┘        │
                                 context tokens ──► cross-attention (attn_levels)

The side encoder has the same architecture as the main encoder and reads raw
pixels. The patch embedder that produces the context tokens lives in the
same module so its weights train together with the UNet.
"""

import logging
import math
from typing import List, Optional, Tuple, Union

import torch
import torch.nn as nn
import torch.nn.functional as F

from config import DenoiserConfig
from embedder import PatchEmbedder, PatchTokens
from errors import ShapeError
from mask_engine import downsample_mask
from utils import as_mask_batch

logger = logging.getLogger(__name__)


def timestep_embedding(t: torch.Tensor, dim: int) -> torch.Tensor:
    """Sinusoidal embedding of integer timesteps, shape (B, dim)."""
    half = dim // 2
    freqs = torch.exp(-math.log(10000.0) * torch.arange(half, dtype=torch.float64) / max(half, 1))
    args = t.to(torch.float64).unsqueeze(1) * freqs.unsqueeze(0)
    emb = torch.cat([torch.cos(args), torch.sin(args)], dim=1)
    if dim % 2:
        emb = F.pad(emb, (0, 1))
    return emb


def _groups(channels: int) -> int:
    return math.gcd(8, channels)


class ResBlock(nn.Module):
    """GroupNorm/SiLU/conv residual block with an additive timestep bias."""

    def __init__(self, in_ch: int, out_ch: int, temb_dim: int):
        super().__init__()
        self.norm1 = nn.GroupNorm(_groups(in_ch), in_ch)
        self.conv1 = nn.Conv2d(in_ch, out_ch, 3, padding=1)
        self.temb = nn.Linear(temb_dim, out_ch)
        self.norm2 = nn.GroupNorm(_groups(out_ch), out_ch)
        self.conv2 = nn.Conv2d(out_ch, out_ch, 3, padding=1)
        self.skip = nn.Conv2d(in_ch, out_ch, 1) if in_ch != out_ch else nn.Identity()

    def forward(self, x: torch.Tensor, temb: torch.Tensor) -> torch.Tensor:
        h = self.conv1(F.silu(self.norm1(x)))
        h = h + self.temb(F.silu(temb))[:, :, None, None]
        h = self.conv2(F.silu(self.norm2(h)))
        return self.skip(x) + h


class Downsample(nn.Module):
    def __init__(self, ch: int):
        super().__init__()
        self.conv = nn.Conv2d(ch, ch, 3, stride=2, padding=1)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.conv(x)


class Upsample(nn.Module):
    def __init__(self, ch: int):
        super().__init__()
        self.conv = nn.Conv2d(ch, ch, 3, padding=1)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.conv(F.interpolate(x, scale_factor=2, mode="nearest"))


# ---------------------------------------------------------------------------
# Fusion and attention
# ---------------------------------------------------------------------------

def masked_fuse(F_side: torch.Tensor, F_enc: torch.Tensor, F_dec: torch.Tensor,
                m: torch.Tensor) -> torch.Tensor:
    """
    Blend side-branch and skip features by mask, then append decoder features.

    ``F = cat[F_side * (1 - M) + F_enc * M, F_dec]`` along channels. ``m`` may be
    given at the feature resolution or at any power-of-two multiple of it; it
    is brought down with ``downsample_mask`` and broadcast over channels.
    """
    if F_side.shape != F_enc.shape:
        raise ShapeError(f"F_side {tuple(F_side.shape)} and F_enc {tuple(F_enc.shape)} differ")
    if F_dec.shape[0] != F_enc.shape[0] or F_dec.shape[-2:] != F_enc.shape[-2:]:
        raise ShapeError(f"F_dec {tuple(F_dec.shape)} is not aligned with F_enc {tuple(F_enc.shape)}")
    M = _mask_at(m, F_enc)
    return torch.cat([F_side * (1.0 - M) + F_enc * M, F_dec], dim=1)


def _mask_at(m: torch.Tensor, features: torch.Tensor) -> torch.Tensor:
    """Mask as (B, 1, h, w) matching ``features`` spatially."""
    m = as_mask_batch(m, features.shape[0])
    h, w = features.shape[-2:]
    H, W = m.shape[-2:]
    if H % h or W % w or H // h != W // w:
        raise ShapeError(f"mask size {H}x{W} cannot be reduced to feature size {h}x{w}")
    return downsample_mask(m, H // h).to(features.dtype)


class CrossAttention(nn.Module):
    """Single-head projections for attending spatial features to context tokens."""

    def __init__(self, channels: int, context_dim: int):
        super().__init__()
        self.scale = channels ** -0.5
        self.to_q = nn.Linear(channels, channels)
        self.to_k = nn.Linear(context_dim, channels)
        self.to_v = nn.Linear(context_dim, channels)

    def forward(self, x: torch.Tensor, context: PatchTokens) -> torch.Tensor:
        return cross_attend(x, context, self)


def cross_attend(q_features: torch.Tensor, context: PatchTokens, attn: CrossAttention) -> torch.Tensor:
    """
    Residual single-head attention from spatial positions to valid tokens.

    Invalid tokens receive zero weight. A set with no valid token contributes
    nothing, so the output equals ``q_features``.
    """
    B, C, H, W = q_features.shape
    tokens, valid = context.tokens, context.valid
    if tokens.shape[0] == 1 and B > 1:
        tokens, valid = tokens.expand(B, -1, -1), valid.expand(B, -1)
    elif tokens.shape[0] != B:
        raise ShapeError(f"context batch {tokens.shape[0]} does not match features batch {B}")

    x = q_features.flatten(2).transpose(1, 2)              # (B, HW, C)
    q = attn.to_q(x)
    k = attn.to_k(tokens)                                  # (B, N, C)
    v = attn.to_v(tokens)
    logits = torch.bmm(q, k.transpose(1, 2)) * attn.scale  # (B, HW, N)
    mask = (valid > 0).unsqueeze(1)
    logits = torch.where(mask, logits, torch.full_like(logits, torch.finfo(logits.dtype).min))
    weights = torch.softmax(logits, dim=-1) * mask.to(logits.dtype)
    out = torch.bmm(weights, v)
    return q_features + out.transpose(1, 2).reshape(B, C, H, W)


# ---------------------------------------------------------------------------
# Network
# ---------------------------------------------------------------------------

class Encoder(nn.Module):
    """Downsampling path; returns the feature map at the end of every level."""

    def __init__(self, cfg: DenoiserConfig, temb_dim: int):
        super().__init__()
        self.conv_in = nn.Conv2d(cfg.image_channels, cfg.channels(0), 3, padding=1)
        self.levels = nn.ModuleList()
        self.downs = nn.ModuleList()
        ch = cfg.channels(0)
        for level in range(cfg.levels):
            out_ch = cfg.channels(level)
            blocks = nn.ModuleList()
            for _ in range(cfg.blocks_per_level):
                blocks.append(ResBlock(ch, out_ch, temb_dim))
                ch = out_ch
            self.levels.append(blocks)
            self.downs.append(Downsample(ch) if level < cfg.levels - 1 else nn.Identity())

    def forward(self, x: torch.Tensor, temb: torch.Tensor) -> List[torch.Tensor]:
        h = self.conv_in(x)
        skips = []
        for blocks, down in zip(self.levels, self.downs):
            for block in blocks:
                h = block(h, temb)
            skips.append(h)
            h = down(h)
        return skips


class DecoderLevel(nn.Module):
    def __init__(self, cfg: DenoiserConfig, level: int, dec_ch: int, temb_dim: int):
        super().__init__()
        ch = cfg.channels(level)
        self.blocks = nn.ModuleList([ResBlock(ch + dec_ch, ch, temb_dim)] +
                                    [ResBlock(ch, ch, temb_dim) for _ in range(cfg.blocks_per_level - 1)])
        self.attn = CrossAttention(ch, cfg.embed_dim) if level in cfg.attn_levels else None
        self.up = Upsample(ch) if level > 0 else nn.Identity()


class RefPaintModel(nn.Module):
    """
    All learnable tensors: embedder, timestep MLP, main encoder, ladder-side
    encoder, decoder with fusion and cross-attention, output head.

    ``state_dict()`` is the named tensor table stored in checkpoints.
    """

    def __init__(self, cfg: DenoiserConfig):
        super().__init__()
        self.cfg = cfg
        temb_dim = cfg.base_channels * 4
        self.embedder = PatchEmbedder(cfg)
        self.time_mlp = nn.Sequential(
            nn.Linear(cfg.base_channels, temb_dim), nn.SiLU(), nn.Linear(temb_dim, temb_dim))
        self.encoder = Encoder(cfg, temb_dim)
        self.side_encoder = Encoder(cfg, temb_dim) if cfg.enable_ladder_side else None
        deep = cfg.channels(cfg.levels - 1)
        self.middle = ResBlock(deep, deep, temb_dim)

        self.decoder = nn.ModuleList()
        dec_ch = deep
        for level in reversed(range(cfg.levels)):
            self.decoder.append(DecoderLevel(cfg, level, dec_ch, temb_dim))
            dec_ch = cfg.channels(level)
        self.out_norm = nn.GroupNorm(_groups(dec_ch), dec_ch)
        self.out_conv = nn.Conv2d(dec_ch, cfg.image_channels, 3, padding=1)
        self.reset_parameters()

    def reset_parameters(self) -> None:
        """Truncated-normal weights (std ``init_std``), zero biases, zero output conv."""
        std = self.cfg.init_std
        for module in self.modules():
            if isinstance(module, (nn.Conv2d, nn.Linear)):
                nn.init.trunc_normal_(module.weight, std=std, a=-2 * std, b=2 * std)
                if module.bias is not None:
                    nn.init.zeros_(module.bias)
        nn.init.zeros_(self.out_conv.weight)
        nn.init.zeros_(self.out_conv.bias)

    def _fuse(self, F_side: Optional[torch.Tensor], F_enc: torch.Tensor, F_dec: torch.Tensor,
              mask: torch.Tensor) -> torch.Tensor:
        if F_side is None:
            F_side = torch.zeros_like(F_enc)
        if not self.cfg.enable_mask_fusion:
            return torch.cat([F_side + F_enc, F_dec], dim=1)
        if self.cfg.fusion_mask_invert:
            mask = 1.0 - mask
        return masked_fuse(F_side, F_enc, F_dec, mask)

    def forward(self, x_t: torch.Tensor, t: Union[int, torch.Tensor], context: PatchTokens,
                side_input: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
        """
        Predict the noise in ``x_t``.

        Args:
            x_t (torch.Tensor): (B, C, R, R) noisy images.
            t (int | torch.Tensor): Shared timestep or (B,) timesteps.
            context (PatchTokens): Reference tokens (B or 1 sets).
            side_input (torch.Tensor): (B, C, R, R) masked background I_bg.
            mask (torch.Tensor): Background mask M_bg, (R, R) or (B, 1, R, R).

        Returns:
            torch.Tensor: Noise estimate shaped like ``x_t``.
        """
        cfg = self.cfg
        if x_t.dim() != 4 or tuple(x_t.shape[1:]) != (cfg.image_channels, cfg.resolution, cfg.resolution):
            raise ShapeError(
                f"x_t must be (B, {cfg.image_channels}, {cfg.resolution}, {cfg.resolution}), got {tuple(x_t.shape)}")
        if side_input.shape != x_t.shape:
            raise ShapeError(f"side_input {tuple(side_input.shape)} must match x_t {tuple(x_t.shape)}")
        B = x_t.shape[0]
        mask = as_mask_batch(mask, B).to(x_t.dtype)
        if tuple(mask.shape[-2:]) != (cfg.resolution, cfg.resolution):
            raise ShapeError(f"mask size {tuple(mask.shape[-2:])} does not match resolution {cfg.resolution}")
        if not isinstance(t, torch.Tensor) or t.dim() == 0:
            t = torch.full((B,), int(t), dtype=torch.long)

        temb = self.time_mlp(timestep_embedding(t, cfg.base_channels).to(x_t.dtype))
        enc = self.encoder(x_t, temb)
        side = self.side_encoder(side_input, temb) if self.side_encoder is not None else [None] * len(enc)

        h = self.middle(enc[-1], temb)
        for level_module, level in zip(self.decoder, reversed(range(cfg.levels))):
            h = self._fuse(side[level], enc[level], h, mask)
            for block in level_module.blocks:
                h = block(h, temb)
            if level_module.attn is not None:
                h = level_module.attn(h, context)
            h = level_module.up(h)
        return self.out_conv(F.silu(self.out_norm(h)))


def init_params(cfg: DenoiserConfig, seed: int = 0) -> RefPaintModel:
    """Build a model with a reproducible initialization that leaves the global RNG untouched."""
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        model = RefPaintModel(cfg)
    n_params = sum(p.numel() for p in model.parameters())
    logger.debug("init_params: %d tensors, %d scalars (seed=%d)", len(model.state_dict()), n_params, seed)
    return model
