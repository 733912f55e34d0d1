"""Toy joint image/text encoder.

Produces a CLS token plus a grid of local tokens from images, and unit-norm
text embeddings from captions built on the synthetic vocabulary. Trained
contrastively on (image, caption) pairs, then frozen.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Iterable, Optional, Sequence

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from . import checkpointio
from .errors import DataError, ParameterError, ShapeError

UNIT_NORM_TOL = 1e-6


@dataclass
class TextEmbedding:
    """Unit-norm caption embedding."""

    vec: np.ndarray

    def __post_init__(self):
        self.vec = np.asarray(self.vec, dtype=np.float64)
        if self.vec.ndim != 1:
            raise ShapeError(f"text embedding must be a vector, got shape {self.vec.shape}")
        norm = float(np.linalg.norm(self.vec))
        if abs(norm - 1.0) > UNIT_NORM_TOL:
            raise ParameterError(f"text embedding must be unit norm, got |v| = {norm}")

    @property
    def dim(self) -> int:
        return self.vec.shape[0]


@dataclass
class TokenSet:
    """One CLS vector plus a row-major grid of local token vectors."""

    cls: np.ndarray
    locals: np.ndarray
    grid: int

    def __post_init__(self):
        self.cls = np.asarray(self.cls)
        self.locals = np.asarray(self.locals)
        if self.cls.ndim != 1 or self.locals.ndim != 2:
            raise ShapeError("cls must be (d,), locals must be (n, d)")
        if self.locals.shape[1] != self.cls.shape[0]:
            raise ShapeError("cls and locals dimension mismatch")
        if self.locals.shape[0] != self.grid ** 2:
            raise ShapeError(f"expected {self.grid ** 2} local tokens, got {self.locals.shape[0]}")
        if not (np.isfinite(self.cls).all() and np.isfinite(self.locals).all()):
            raise ParameterError("token set contains non-finite entries")

    @property
    def n(self) -> int:
        return self.locals.shape[0]

    @property
    def dim(self) -> int:
        return self.cls.shape[0]

    def copy(self) -> "TokenSet":
        return TokenSet(self.cls.copy(), self.locals.copy(), self.grid)

    @staticmethod
    def zeros(grid: int, dim: int) -> "TokenSet":
        return TokenSet(np.zeros(dim, dtype=np.float32),
                        np.zeros((grid * grid, dim), dtype=np.float32), grid)


def correlation(tokens: TokenSet, text: TextEmbedding) -> np.ndarray:
    """Dot products of every token against the text embedding, CLS entry first."""
    if tokens.dim != text.dim:
        raise ShapeError(f"token dim {tokens.dim} != text dim {text.dim}")
    cls_corr = float(tokens.cls.astype(np.float64) @ text.vec)
    local_corr = tokens.locals.astype(np.float64) @ text.vec
    return np.concatenate([[cls_corr], local_corr])


# ---------------------------------------------------------------------------
# Networks
# ---------------------------------------------------------------------------

@dataclass
class TokenEncoderConfig:
    image_size: int = 64
    grid: int = 8
    dim: int = 64
    depth: int = 4
    heads: int = 4
    mlp_ratio: float = 2.0
    vocab: tuple[str, ...] = ()

    @property
    def patch(self) -> int:
        return self.image_size // self.grid

    def to_dict(self) -> dict:
        return {"image_size": self.image_size, "grid": self.grid, "dim": self.dim,
                "depth": self.depth, "heads": self.heads, "mlp_ratio": self.mlp_ratio,
                "vocab": list(self.vocab)}

    @staticmethod
    def from_dict(d: dict) -> "TokenEncoderConfig":
        return TokenEncoderConfig(image_size=d["image_size"], grid=d["grid"], dim=d["dim"],
                                  depth=d["depth"], heads=d["heads"],
                                  mlp_ratio=d["mlp_ratio"], vocab=tuple(d["vocab"]))


class _Block(nn.Module):
    def __init__(self, dim: int, heads: int, mlp_ratio: float):
        super().__init__()
        self.norm1 = nn.LayerNorm(dim)
        self.attn = nn.MultiheadAttention(dim, heads, batch_first=True)
        self.norm2 = nn.LayerNorm(dim)
        hidden = int(dim * mlp_ratio)
        self.mlp = nn.Sequential(nn.Linear(dim, hidden), nn.GELU(), nn.Linear(hidden, dim))

    def forward(self, x):
        h = self.norm1(x)
        x = x + self.attn(h, h, h, need_weights=False)[0]
        return x + self.mlp(self.norm2(x))


class ImageTokenEncoder(nn.Module):
    """4-layer ViT-style patch encoder emitting CLS + grid tokens."""

    def __init__(self, cfg: TokenEncoderConfig):
        super().__init__()
        self.cfg = cfg
        self.patch_embed = nn.Conv2d(3, cfg.dim, kernel_size=cfg.patch, stride=cfg.patch)
        n = cfg.grid ** 2
        self.cls_token = nn.Parameter(torch.zeros(1, 1, cfg.dim))
        self.pos_embed = nn.Parameter(torch.zeros(1, n + 1, cfg.dim))
        nn.init.trunc_normal_(self.pos_embed, std=0.02)
        nn.init.trunc_normal_(self.cls_token, std=0.02)
        self.blocks = nn.ModuleList(
            [_Block(cfg.dim, cfg.heads, cfg.mlp_ratio) for _ in range(cfg.depth)])
        self.norm = nn.LayerNorm(cfg.dim)

    def forward(self, images: torch.Tensor) -> torch.Tensor:
        if images.shape[1] != 3:
            raise ShapeError(f"expected 3-channel images, got {images.shape[1]}")
        if images.shape[-1] != self.cfg.image_size:
            images = F.interpolate(images, size=(self.cfg.image_size, self.cfg.image_size),
                                   mode="bilinear", align_corners=False)
        x = self.patch_embed(images)                      # (B, d, g, g)
        x = x.flatten(2).transpose(1, 2)                  # (B, n, d) row-major
        cls = self.cls_token.expand(x.shape[0], -1, -1)
        x = torch.cat([cls, x], dim=1) + self.pos_embed
        for blk in self.blocks:
            x = blk(x)
        return self.norm(x)                               # (B, n + 1, d)


class CaptionEncoder(nn.Module):
    """Bag-of-words embedding followed by a 2-layer mixer; unit-norm output."""

    def __init__(self, cfg: TokenEncoderConfig):
        super().__init__()
        self.cfg = cfg
        self.word_index = {w: i for i, w in enumerate(cfg.vocab)}
        # last row is the shared slot for out-of-vocabulary words
        self.embed = nn.Embedding(len(cfg.vocab) + 1, cfg.dim)
        self.mixer = nn.Sequential(nn.Linear(cfg.dim, cfg.dim), nn.GELU(),
                                   nn.Linear(cfg.dim, cfg.dim))

    def word_ids(self, caption: str) -> list[int]:
        words = caption.lower().split()
        if not words:
            raise ParameterError("caption is empty")
        unk = len(self.word_index)
        return [self.word_index.get(w, unk) for w in words]

    def forward(self, captions: Sequence[str]) -> torch.Tensor:
        device = self.embed.weight.device
        rows = []
        for cap in captions:
            ids = torch.tensor(self.word_ids(cap), dtype=torch.long, device=device)
            rows.append(self.embed(ids).sum(dim=0))
        x = self.mixer(torch.stack(rows))
        return F.normalize(x, dim=-1)


class TokenModel(nn.Module):
    """Joint encoder pair plus the contrastive temperature; frozen after training."""

    def __init__(self, cfg: TokenEncoderConfig):
        super().__init__()
        self.cfg = cfg
        self.image_encoder = ImageTokenEncoder(cfg)
        self.text_encoder = CaptionEncoder(cfg)
        self.logit_scale = nn.Parameter(torch.zeros(()))

    # -- inference API ------------------------------------------------------

    @torch.no_grad()
    def extract_tokens(self, image: np.ndarray) -> TokenSet:
        """Deterministic TokenSet from an RGB (3, H, W) image in [0, 1]."""
        if image.ndim != 3 or image.shape[0] != 3:
            raise ShapeError(f"expected (3, H, W) image, got {image.shape}")
        self.eval()
        x = torch.from_numpy(np.ascontiguousarray(image, dtype=np.float32))[None]
        out = self.image_encoder(x)[0].numpy()
        return TokenSet(out[0], out[1:], self.cfg.grid)

    @torch.no_grad()
    def extract_tokens_batch(self, images: torch.Tensor) -> torch.Tensor:
        self.eval()
        return self.image_encoder(images)

    @torch.no_grad()
    def embed_text(self, caption: str) -> TextEmbedding:
        self.eval()
        vec = self.text_encoder([caption])[0].numpy().astype(np.float64)
        return TextEmbedding(vec / np.linalg.norm(vec))

    # -- training -----------------------------------------------------------

    def contrastive_loss(self, images: torch.Tensor, captions: Sequence[str]) -> torch.Tensor:
        img_tokens = self.image_encoder(images)
        img_feat = F.normalize(img_tokens[:, 0], dim=-1)
        txt_feat = self.text_encoder(captions)
        logits = img_feat @ txt_feat.T * torch.exp(self.logit_scale)
        labels = torch.arange(len(captions))
        return 0.5 * (F.cross_entropy(logits, labels) + F.cross_entropy(logits.T, labels))


# ---------------------------------------------------------------------------
# Contrastive training and evaluation
# ---------------------------------------------------------------------------

def train_contrastive(pairs: Sequence[tuple[np.ndarray, str]],
                      cfg: Optional[TokenEncoderConfig] = None,
                      epochs: int = 8, batch_size: int = 32, lr: float = 2e-3,
                      seed: int = 0, log=None) -> tuple[TokenModel, list[float]]:
    """Symmetric contrastive training on (image, caption) pairs.

    Batches are built with one caption per image; duplicate captions within a
    batch are avoided where possible so the InfoNCE labels stay meaningful.
    """
    captions_all = {c for _, c in pairs}
    if len(captions_all) < 2:
        raise DataError("contrastive training needs at least 2 distinct captions")
    if cfg is None:
        cfg = TokenEncoderConfig(vocab=tuple(sorted(
            {w for c in captions_all for w in c.lower().split()})))
    torch.manual_seed(seed)
    model = TokenModel(cfg)
    opt = torch.optim.AdamW(model.parameters(), lr=lr, betas=(0.9, 0.999), weight_decay=0.01)
    rng = np.random.RandomState(seed)
    images = torch.from_numpy(np.stack([np.asarray(img, dtype=np.float32) for img, _ in pairs]))
    caps = [c for _, c in pairs]

    history = []
    model.train()
    for epoch in range(epochs):
        order = rng.permutation(len(pairs))
        epoch_losses = []
        for start in range(0, len(order) - 1, batch_size):
            idx = order[start:start + batch_size]
            if len(idx) < 2:
                continue
            batch_caps = [caps[i] for i in idx]
            loss = model.contrastive_loss(images[idx], batch_caps)
            opt.zero_grad()
            loss.backward()
            opt.step()
            epoch_losses.append(float(loss.detach()))
        mean_loss = float(np.mean(epoch_losses))
        history.append(mean_loss)
        if log is not None:
            log({"epoch": epoch, "loss": mean_loss})
    model.eval()
    for p in model.parameters():
        p.requires_grad_(False)
    return model, history


@torch.no_grad()
def retrieval_accuracy(model: TokenModel, pairs: Sequence[tuple[np.ndarray, str]],
                       candidates: Optional[Sequence[str]] = None,
                       valid: Optional[Sequence[Iterable[str]]] = None) -> float:
    """Top-1 caption retrieval. A hit is the argmax candidate being the pair's
    caption, or any member of the pair's valid caption set when given."""
    model.eval()
    if candidates is None:
        candidates = sorted({c for _, c in pairs})
    txt = model.text_encoder(list(candidates))
    images = torch.from_numpy(np.stack([np.asarray(img, dtype=np.float32) for img, _ in pairs]))
    img_feat = F.normalize(model.image_encoder(images)[:, 0], dim=-1)
    best = (img_feat @ txt.T).argmax(dim=1)
    hits = 0
    for i, (_, cap) in enumerate(pairs):
        predicted = candidates[int(best[i])]
        truth = set(valid[i]) if valid is not None else {cap}
        hits += predicted in truth
    return hits / len(pairs)


# ---------------------------------------------------------------------------
# Persistence
# ---------------------------------------------------------------------------

def save_token_model(path, model: TokenModel):
    checkpointio.save_module(path, {"kind": "token_model", **model.cfg.to_dict()}, model)


def load_token_model(path) -> TokenModel:
    header = checkpointio.read_header(path)
    cfg = TokenEncoderConfig.from_dict(header["config"])
    model = TokenModel(cfg)
    checkpointio.load_into_module(path, model)
    model.eval()
    for p in model.parameters():
        p.requires_grad_(False)
    return model
