"""Noise-prediction U-Net in two variants.

The attention variant conditions on local reference tokens through
cross-attention; the CLS variant replaces cross-attention with a linear
projection of the CLS token added alongside the timestep embedding. Sketches
are downscaled to the latent resolution by a small conv stack and added to
the stem features. Null conditions are all-zero inputs.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from . import checkpointio
from .errors import ParameterError, ShapeError

VARIANT_CLS = "cls"
VARIANT_ATTENTION = "attention"


@dataclass
class DenoiserConfig:
    variant: str = VARIANT_ATTENTION
    latent_channels: int = 4
    latent_size: int = 16
    image_size: int = 64
    f: int = 4
    base: int = 64
    channel_mult: tuple[int, ...] = (1, 2, 3)
    num_res_blocks: int = 1
    heads: int = 4
    token_dim: int = 64
    n_tokens: int = 64
    cross_levels: tuple[int, ...] = (1, 2)
    T: int = 1000
    beta_start: float = 1e-4
    beta_end: float = 2e-2
    latent_scale: float = 1.0  # set at training time so diffused latents are ~unit std

    def __post_init__(self):
        if self.variant not in (VARIANT_CLS, VARIANT_ATTENTION):
            raise ParameterError(f"unknown denoiser variant {self.variant!r}")

    def to_dict(self) -> dict:
        return {"kind": "denoiser", "variant": self.variant,
                "latent_channels": self.latent_channels, "latent_size": self.latent_size,
                "image_size": self.image_size, "f": self.f, "base": self.base,
                "channel_mult": list(self.channel_mult),
                "num_res_blocks": self.num_res_blocks, "heads": self.heads,
                "token_dim": self.token_dim, "n_tokens": self.n_tokens,
                "cross_levels": list(self.cross_levels), "T": self.T,
                "beta_start": self.beta_start, "beta_end": self.beta_end,
                "latent_scale": self.latent_scale}

    @staticmethod
    def from_dict(d: dict) -> "DenoiserConfig":
        return DenoiserConfig(
            variant=d["variant"], latent_channels=d["latent_channels"],
            latent_size=d["latent_size"], image_size=d["image_size"], f=d["f"],
            base=d["base"], channel_mult=tuple(d["channel_mult"]),
            num_res_blocks=d["num_res_blocks"], heads=d["heads"],
            token_dim=d["token_dim"], n_tokens=d["n_tokens"],
            cross_levels=tuple(d["cross_levels"]), T=d["T"],
            beta_start=d["beta_start"], beta_end=d["beta_end"],
            latent_scale=d.get("latent_scale", 1.0))


def timestep_embedding(t: torch.Tensor, dim: int, max_period: float = 10000.0) -> torch.Tensor:
    half = dim // 2
    freqs = torch.exp(-math.log(max_period) * torch.arange(half, dtype=torch.float32) / half)
    args = t.float()[:, None] * freqs[None]
    return torch.cat([torch.cos(args), torch.sin(args)], dim=-1)


def inject_attention(generation_hidden: torch.Tensor,
                     reference_hidden: torch.Tensor) -> torch.Tensor:
    """K/V source for injected self-attention: reference states concatenated
    ahead of the generation states. Queries stay on the generation side."""
    if reference_hidden.shape[-1] != generation_hidden.shape[-1]:
        raise ShapeError(
            f"hidden widths differ: {reference_hidden.shape[-1]} vs {generation_hidden.shape[-1]}")
    return torch.cat([reference_hidden, generation_hidden], dim=-2)


def adain(features: torch.Tensor, reference_features: torch.Tensor,
          eps: float = 1e-5) -> torch.Tensor:
    """Renormalize per-channel mean/std of features to the reference's.

    Zero-variance channels are stabilized by flooring both stds at eps; the
    floor applies symmetrically so adain(x, x) stays an identity.
    """
    if features.shape[-3] != reference_features.shape[-3]:
        raise ShapeError(
            f"channel mismatch: {features.shape[-3]} vs {reference_features.shape[-3]}")
    dims = (-2, -1)
    mu_f = features.mean(dim=dims, keepdim=True)
    sd_f = features.std(dim=dims, keepdim=True, unbiased=False).clamp(min=eps)
    mu_r = reference_features.mean(dim=dims, keepdim=True)
    sd_r = reference_features.std(dim=dims, keepdim=True, unbiased=False).clamp(min=eps)
    return (features - mu_f) / sd_f * sd_r + mu_r


class ResBlock(nn.Module):
    def __init__(self, in_ch: int, out_ch: int, emb_dim: int):
        super().__init__()
        self.norm1 = nn.GroupNorm(8, in_ch)
        self.conv1 = nn.Conv2d(in_ch, out_ch, 3, padding=1)
        self.emb_proj = nn.Linear(emb_dim, out_ch)
        self.norm2 = nn.GroupNorm(8, out_ch)
        self.conv2 = nn.Conv2d(out_ch, out_ch, 3, padding=1)
        self.skip = nn.Conv2d(in_ch, out_ch, 1) if in_ch != out_ch else nn.Identity()

    def forward(self, x, emb):
        h = self.conv1(F.silu(self.norm1(x)))
        h = h + self.emb_proj(emb)[:, :, None, None]
        h = self.conv2(F.silu(self.norm2(h)))
        return self.skip(x) + h


class SelfAttention2d(nn.Module):
    """Spatial self-attention; K/V may be extended with injected reference states."""

    def __init__(self, ch: int, heads: int):
        super().__init__()
        self.heads = heads
        self.norm = nn.GroupNorm(8, ch)
        self.to_q = nn.Linear(ch, ch, bias=False)
        self.to_k = nn.Linear(ch, ch, bias=False)
        self.to_v = nn.Linear(ch, ch, bias=False)
        self.proj = nn.Linear(ch, ch)

    def hidden_state(self, x: torch.Tensor) -> torch.Tensor:
        b, c, h, w = x.shape
        return self.norm(x).reshape(b, c, h * w).transpose(1, 2)

    def forward(self, x, ref_hidden: Optional[torch.Tensor] = None):
        b, c, h, w = x.shape
        seq = self.hidden_state(x)
        kv = seq if ref_hidden is None or ref_hidden.shape[-2] == 0 \
            else inject_attention(seq, ref_hidden)
        q = self.to_q(seq).reshape(b, -1, self.heads, c // self.heads).transpose(1, 2)
        k = self.to_k(kv).reshape(b, -1, self.heads, c // self.heads).transpose(1, 2)
        v = self.to_v(kv).reshape(b, -1, self.heads, c // self.heads).transpose(1, 2)
        attn = torch.softmax(q @ k.transpose(-2, -1) / math.sqrt(c // self.heads), dim=-1)
        out = (attn @ v).transpose(1, 2).reshape(b, -1, c)
        out = self.proj(out).transpose(1, 2).reshape(b, c, h, w)
        return x + out


class CrossAttention2d(nn.Module):
    """Queries from spatial features, keys/values from the token context.

    No positional encoding is applied to the context, so the output is
    invariant to token order.
    """

    def __init__(self, ch: int, ctx_dim: int, heads: int):
        super().__init__()
        self.heads = heads
        self.norm = nn.GroupNorm(8, ch)
        self.to_q = nn.Linear(ch, ch, bias=False)
        self.to_k = nn.Linear(ctx_dim, ch, bias=False)
        self.to_v = nn.Linear(ctx_dim, ch, bias=False)
        self.proj = nn.Linear(ch, ch)

    def forward(self, x, context):
        b, c, h, w = x.shape
        seq = self.norm(x).reshape(b, c, h * w).transpose(1, 2)
        q = self.to_q(seq).reshape(b, -1, self.heads, c // self.heads).transpose(1, 2)
        k = self.to_k(context).reshape(b, -1, self.heads, c // self.heads).transpose(1, 2)
        v = self.to_v(context).reshape(b, -1, self.heads, c // self.heads).transpose(1, 2)
        attn = torch.softmax(q @ k.transpose(-2, -1) / math.sqrt(c // self.heads), dim=-1)
        out = (attn @ v).transpose(1, 2).reshape(b, -1, c)
        out = self.proj(out).transpose(1, 2).reshape(b, c, h, w)
        return x + out


class SketchEncoder(nn.Module):
    """Three convs whose strides multiply to the scale factor f."""

    def __init__(self, out_ch: int, f: int):
        super().__init__()
        strides = {1: (1, 1, 1), 2: (2, 1, 1), 4: (2, 2, 1), 8: (2, 2, 2)}[f]
        mid = max(out_ch // 2, 8)
        chans = (1, mid, mid, out_ch)
        layers = []
        for i, s in enumerate(strides):
            layers.append(nn.Conv2d(chans[i], chans[i + 1], 3, stride=s, padding=1))
            if i < 2:
                layers.append(nn.SiLU())
        self.net = nn.Sequential(*layers)

    def forward(self, sketch):
        return self.net(sketch)


class UNetDenoiser(nn.Module):
    """Noise predictor; see module docstring for the conditioning pathways."""

    def __init__(self, cfg: DenoiserConfig):
        super().__init__()
        self.cfg = cfg
        base = cfg.base
        emb_dim = base * 4
        self.time_mlp = nn.Sequential(nn.Linear(base, emb_dim), nn.SiLU(),
                                      nn.Linear(emb_dim, emb_dim))
        if cfg.variant == VARIANT_CLS:
            self.cls_proj = nn.Linear(cfg.token_dim, emb_dim)
        self.sketch_encoder = SketchEncoder(base, cfg.f)
        self.stem = nn.Conv2d(cfg.latent_channels, base, 3, padding=1)

        chans = [base * m for m in cfg.channel_mult]
        self.down_blocks = nn.ModuleList()
        self.down_cross = nn.ModuleList()
        self.downsamples = nn.ModuleList()
        ch = base
        self.skip_chans = [ch]
        for level, out_ch in enumerate(chans):
            blocks = nn.ModuleList()
            crosses = nn.ModuleList()
            for _ in range(cfg.num_res_blocks):
                blocks.append(ResBlock(ch, out_ch, emb_dim))
                ch = out_ch
                if cfg.variant == VARIANT_ATTENTION and level in cfg.cross_levels:
                    crosses.append(CrossAttention2d(ch, cfg.token_dim, cfg.heads))
                else:
                    crosses.append(nn.Identity())
                self.skip_chans.append(ch)
            self.down_blocks.append(blocks)
            self.down_cross.append(crosses)
            if level < len(chans) - 1:
                self.downsamples.append(nn.Conv2d(ch, ch, 3, stride=2, padding=1))
                self.skip_chans.append(ch)
            else:
                self.downsamples.append(nn.Identity())

        self.mid_block1 = ResBlock(ch, ch, emb_dim)
        self.mid_attn = SelfAttention2d(ch, cfg.heads)
        self.mid_cross = (CrossAttention2d(ch, cfg.token_dim, cfg.heads)
                          if cfg.variant == VARIANT_ATTENTION else nn.Identity())
        self.mid_block2 = ResBlock(ch, ch, emb_dim)

        self.up_blocks = nn.ModuleList()
        self.up_cross = nn.ModuleList()
        self.upsamples = nn.ModuleList()
        skip_stack = list(self.skip_chans)
        for level in reversed(range(len(chans))):
            out_ch = chans[level]
            blocks = nn.ModuleList()
            crosses = nn.ModuleList()
            for _ in range(cfg.num_res_blocks + 1):
                blocks.append(ResBlock(ch + skip_stack.pop(), out_ch, emb_dim))
                ch = out_ch
                if cfg.variant == VARIANT_ATTENTION and level in cfg.cross_levels:
                    crosses.append(CrossAttention2d(ch, cfg.token_dim, cfg.heads))
                else:
                    crosses.append(nn.Identity())
            self.up_blocks.append(blocks)
            self.up_cross.append(crosses)
            self.upsamples.append(
                nn.Upsample(scale_factor=2, mode="nearest") if level > 0 else nn.Identity())

        self.out_norm = nn.GroupNorm(8, base)
        self.out_conv = nn.Conv2d(base, cfg.latent_channels, 3, padding=1)
        nn.init.zeros_(self.out_conv.weight)
        nn.init.zeros_(self.out_conv.bias)

    # -- condition plumbing --------------------------------------------------

    def _embed(self, t: torch.Tensor, tokens: Optional[torch.Tensor]):
        emb = self.time_mlp(timestep_embedding(t, self.cfg.base))
        context = None
        if self.cfg.variant == VARIANT_CLS:
            if tokens is not None and tokens.ndim != 2:
                raise ParameterError("CLS variant conditions on a (B, d) CLS token, "
                                     f"got shape {tuple(tokens.shape)}")
            cls = tokens if tokens is not None else torch.zeros(
                emb.shape[0], self.cfg.token_dim)
            emb = emb + self.cls_proj(cls)
        else:
            if tokens is not None and tokens.ndim != 3:
                raise ParameterError("attention variant conditions on (B, n, d) local "
                                     f"tokens, got shape {tuple(tokens.shape)}")
            context = tokens if tokens is not None else torch.zeros(
                emb.shape[0], self.cfg.n_tokens, self.cfg.token_dim)
        return emb, context

    def forward(self, z_t: torch.Tensor, t: torch.Tensor,
                sketch: Optional[torch.Tensor] = None,
                tokens: Optional[torch.Tensor] = None,
                ref_hidden: Optional[dict] = None,
                capture: Optional[dict] = None) -> torch.Tensor:
        """Predict the noise for z_t at (fractional) timestep t.

        ``ref_hidden`` maps self-attention names to injected hidden states;
        ``capture`` (a dict) collects this forward's own hidden states so a
        reference chain can be recorded.
        """
        if z_t.ndim != 4 or z_t.shape[1] != self.cfg.latent_channels:
            raise ShapeError(f"expected (B, {self.cfg.latent_channels}, h, w) latents, "
                             f"got {tuple(z_t.shape)}")
        if t.ndim == 0:
            t = t[None]
        emb, context = self._embed(t, tokens)
        if sketch is None:
            sketch = torch.zeros(z_t.shape[0], 1,
                                 z_t.shape[2] * self.cfg.f, z_t.shape[3] * self.cfg.f)
        h = self.stem(z_t) + self.sketch_encoder(sketch)

        skips = [h]
        for blocks, crosses, down in zip(self.down_blocks, self.down_cross, self.downsamples):
            for block, cross in zip(blocks, crosses):
                h = block(h, emb)
                if not isinstance(cross, nn.Identity):
                    h = cross(h, context)
                skips.append(h)
            if not isinstance(down, nn.Identity):
                h = down(h)
                skips.append(h)

        h = self.mid_block1(h, emb)
        if capture is not None:
            capture["mid"] = self.mid_attn.hidden_state(h)
        h = self.mid_attn(h, ref_hidden.get("mid") if ref_hidden else None)
        if not isinstance(self.mid_cross, nn.Identity):
            h = self.mid_cross(h, context)
        h = self.mid_block2(h, emb)

        for blocks, crosses, up in zip(self.up_blocks, self.up_cross, self.upsamples):
            for block, cross in zip(blocks, crosses):
                h = block(torch.cat([h, skips.pop()], dim=1), emb)
                if not isinstance(cross, nn.Identity):
                    h = cross(h, context)
            h = up(h)

        return self.out_conv(F.silu(self.out_norm(h)))


def save_denoiser(path, model: UNetDenoiser, extra: Optional[dict] = None):
    config = model.cfg.to_dict()
    if extra:
        config.update(extra)
    checkpointio.save_module(path, config, model)


def load_denoiser(path) -> tuple[UNetDenoiser, dict]:
    header = checkpointio.read_header(path)
    model = UNetDenoiser(DenoiserConfig.from_dict(header["config"]))
    config = checkpointio.load_into_module(path, model)
    model.eval()
    for p in model.parameters():
        p.requires_grad_(False)
    return model, config
