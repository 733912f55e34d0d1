"""Perceptual compression between pixel and latent space.

A small convolutional VAE with deterministic (mean) encoding for diffusion
training, plus an identity mode (f = 1) so downstream code can run without
trained weights.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from . import checkpointio
from .errors import DataError, ParameterError, ShapeError
from .latents import LatentTensor


@dataclass
class AutoencoderConfig:
    f: int = 4
    latent_channels: int = 4
    base_width: int = 32
    kl_weight: float = 1e-6
    image_size: int = 64

    def to_dict(self) -> dict:
        return {"kind": "vae", "f": self.f, "latent_channels": self.latent_channels,
                "base_width": self.base_width, "kl_weight": self.kl_weight,
                "image_size": self.image_size}

    @staticmethod
    def from_dict(d: dict) -> "AutoencoderConfig":
        return AutoencoderConfig(f=d["f"], latent_channels=d["latent_channels"],
                                 base_width=d["base_width"], kl_weight=d["kl_weight"],
                                 image_size=d["image_size"])


class IdentityAutoencoder:
    """f = 1 pass-through codec; latents are the images themselves."""

    f = 1
    latent_channels = 3

    def encode(self, image: np.ndarray) -> LatentTensor:
        _check_image(image, self.f)
        return LatentTensor(np.asarray(image, dtype=np.float32).copy(), f=1)

    def decode(self, z: LatentTensor) -> np.ndarray:
        if z.channels != 3:
            raise ShapeError(f"identity latents must have 3 channels, got {z.channels}")
        return np.clip(np.asarray(z.data, dtype=np.float32), 0.0, 1.0)

    def encode_batch(self, images: torch.Tensor) -> torch.Tensor:
        return images

    def decode_batch(self, z: torch.Tensor) -> torch.Tensor:
        return z.clamp(0.0, 1.0)


def _check_image(image: np.ndarray, f: int):
    if image.ndim != 3 or image.shape[0] != 3:
        raise ShapeError(f"expected (3, H, W) image, got {image.shape}")
    _, h, w = image.shape
    if h % f or w % f:
        raise ShapeError(f"image size ({h}, {w}) not divisible by scale factor {f}")


class _VAEBlock(nn.Module):
    def __init__(self, in_ch: int, out_ch: int):
        super().__init__()
        self.norm1 = nn.GroupNorm(8, in_ch)
        self.conv1 = nn.Conv2d(in_ch, out_ch, 3, padding=1)
        self.norm2 = nn.GroupNorm(8, out_ch)
        self.conv2 = nn.Conv2d(out_ch, out_ch, 3, padding=1)
        self.skip = nn.Conv2d(in_ch, out_ch, 1) if in_ch != out_ch else nn.Identity()

    def forward(self, x):
        h = self.conv1(F.silu(self.norm1(x)))
        h = self.conv2(F.silu(self.norm2(h)))
        return self.skip(x) + h


class ConvVAE(nn.Module):
    """Residual conv encoder/decoder pair sized by the scale factor.

    The first encoder conv strides immediately so every residual block runs
    at reduced resolution; the decoder mirrors that with a final plain conv
    at full resolution.
    """

    def __init__(self, cfg: AutoencoderConfig):
        super().__init__()
        if cfg.f not in (2, 4, 8):
            raise ParameterError(f"trainable autoencoder needs f in (2, 4, 8), got {cfg.f}")
        self.cfg = cfg
        w = cfg.base_width
        downs = int(np.log2(cfg.f))
        enc = [nn.Conv2d(3, w, 4, stride=2, padding=1)]
        ch = w
        for _ in range(downs - 1):
            enc += [_VAEBlock(ch, ch), nn.Conv2d(ch, min(ch * 2, 4 * w), 4,
                                                 stride=2, padding=1)]
            ch = min(ch * 2, 4 * w)
        head = nn.Conv2d(ch, 2 * cfg.latent_channels, 1)
        # start the posterior tight so reconstructions aren't noise-dominated
        nn.init.constant_(head.bias[cfg.latent_channels:], -6.0)
        enc += [_VAEBlock(ch, ch), _VAEBlock(ch, ch), nn.GroupNorm(8, ch),
                nn.SiLU(), head]
        self.encoder = nn.Sequential(*enc)

        dec = [nn.Conv2d(cfg.latent_channels, ch, 3, padding=1),
               _VAEBlock(ch, ch), _VAEBlock(ch, ch)]
        for _ in range(downs - 1):
            nxt = max(ch // 2, w)
            dec += [nn.Upsample(scale_factor=2, mode="nearest"),
                    nn.Conv2d(ch, nxt, 3, padding=1), _VAEBlock(nxt, nxt)]
            ch = nxt
        dec += [nn.Upsample(scale_factor=2, mode="nearest"),
                nn.GroupNorm(8, ch), nn.SiLU(), nn.Conv2d(ch, 3, 3, padding=1)]
        self.decoder = nn.Sequential(*dec)

    @property
    def f(self) -> int:
        return self.cfg.f

    @property
    def latent_channels(self) -> int:
        return self.cfg.latent_channels

    def moments(self, images: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        mean, logvar = self.encoder(images).chunk(2, dim=1)
        return mean, logvar.clamp(-30.0, 10.0)

    def encode_batch(self, images: torch.Tensor) -> torch.Tensor:
        """Deterministic latent (posterior mean)."""
        return self.moments(images)[0]

    def decode_batch(self, z: torch.Tensor) -> torch.Tensor:
        return self.decoder(z)

    @torch.no_grad()
    def encode(self, image: np.ndarray) -> LatentTensor:
        _check_image(image, self.cfg.f)
        self.eval()
        x = torch.from_numpy(np.ascontiguousarray(image, dtype=np.float32))[None]
        return LatentTensor(self.encode_batch(x)[0].numpy(), f=self.cfg.f)

    @torch.no_grad()
    def decode(self, z: LatentTensor) -> np.ndarray:
        if z.channels != self.cfg.latent_channels:
            raise ShapeError(
                f"latent has {z.channels} channels, model expects {self.cfg.latent_channels}")
        self.eval()
        x = torch.from_numpy(np.ascontiguousarray(z.data, dtype=np.float32))[None]
        out = self.decode_batch(x)[0].clamp(0.0, 1.0).numpy()
        return out

    def loss(self, images: torch.Tensor, generator: Optional[torch.Generator] = None):
        mean, logvar = self.moments(images)
        noise = torch.randn(mean.shape, generator=generator, dtype=mean.dtype)
        z = mean + torch.exp(0.5 * logvar) * noise
        recon = self.decode_batch(z)
        rec_loss = F.mse_loss(recon, images)
        kl = 0.5 * torch.mean(mean ** 2 + logvar.exp() - 1.0 - logvar)
        return rec_loss + self.cfg.kl_weight * kl, rec_loss


def train_autoencoder(images: Sequence[np.ndarray], cfg: AutoencoderConfig,
                      epochs: int = 20, batch_size: int = 32, lr: float = 2e-3,
                      seed: int = 0, log=None) -> tuple[ConvVAE, list[float]]:
    """Train the VAE on an image corpus; returns the model and per-epoch loss."""
    if len(images) == 0:
        raise DataError("autoencoder training corpus is empty")
    torch.manual_seed(seed)
    model = ConvVAE(cfg)
    opt = torch.optim.Adam(model.parameters(), lr=lr)
    data = torch.from_numpy(np.stack([np.asarray(im, dtype=np.float32) for im in images]))
    rng = np.random.RandomState(seed)
    gen = torch.Generator().manual_seed(seed)

    history = []
    model.train()
    for epoch in range(epochs):
        order = rng.permutation(len(data))
        losses = []
        for start in range(0, len(order), batch_size):
            idx = order[start:start + batch_size]
            total, rec = model.loss(data[idx], generator=gen)
            opt.zero_grad()
            total.backward()
            opt.step()
            losses.append(float(rec.detach()))
        mean_loss = float(np.mean(losses))
        history.append(mean_loss)
        if log is not None:
            log({"epoch": epoch, "recon_loss": mean_loss})
    model.eval()
    for p in model.parameters():
        p.requires_grad_(False)
    return model, history


def reconstruction_psnr(model, image: np.ndarray) -> float:
    recon = model.decode(model.encode(image))
    mse = float(np.mean((recon - image) ** 2))
    if mse == 0:
        return float("inf")
    return -10.0 * float(np.log10(mse))


def save_autoencoder(path, model):
    if isinstance(model, IdentityAutoencoder):
        checkpointio.save_checkpoint(path, {"kind": "identity"}, {})
    else:
        checkpointio.save_module(path, model.cfg.to_dict(), model)


def load_autoencoder(path):
    header = checkpointio.read_header(path)
    if header["config"].get("kind") == "identity":
        return IdentityAutoencoder()
    model = ConvVAE(AutoencoderConfig.from_dict(header["config"]))
    checkpointio.load_into_module(path, model)
    model.eval()
    for p in model.parameters():
        p.requires_grad_(False)
    return model
