"""Training strategies and losses for the denoiser.

Reference preparation composes as shuffle -> drop -> noise so that dropping
sees the post-shuffle set and the token noising shares its timestep with the
latent diffusion of the same sample.
"""
from __future__ import annotations

import json
import time
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
import torch

from . import data as data_mod
from .denoiser import DenoiserConfig, UNetDenoiser, VARIANT_ATTENTION, VARIANT_CLS, save_denoiser
from .errors import DataError, DependencyError, ParameterError, TrainingError
from .schedules import NoiseSchedule
from .tokens import TokenSet

STRATEGY_DEFORM = "deform"
STRATEGY_SHUFFLE = "shuffle"

# Reference drop rates: 0.75 for deformation training, 0.8 for shuffle training.
DEFAULT_DROP_RATES = {STRATEGY_DEFORM: 0.75, STRATEGY_SHUFFLE: 0.8}
DEFAULT_LAMBDA = 4.0


@dataclass
class StrategyConfig:
    strategy: str = STRATEGY_SHUFFLE
    drop_rate: float = 0.0
    noisy: bool = False
    dual: bool = False
    lam: float = DEFAULT_LAMBDA
    seed: int = 0

    def __post_init__(self):
        if self.strategy not in (STRATEGY_DEFORM, STRATEGY_SHUFFLE):
            raise ParameterError(f"unknown strategy {self.strategy!r}")
        if not (0.0 <= self.drop_rate <= 1.0):
            raise ParameterError(f"drop_rate must be in [0, 1], got {self.drop_rate}")
        if self.dual and self.lam <= 0:
            raise ParameterError("dual training requires lambda > 0")

    def tag(self) -> str:
        parts = [self.strategy]
        if self.noisy:
            parts.append("noisy")
        if self.dual:
            parts.append("dual")
        parts.append(f"drop{self.drop_rate:g}")
        return "-".join(parts)


# ---------------------------------------------------------------------------
# Token-set level reference operations
# ---------------------------------------------------------------------------

def shuffle_tokens(tokens: TokenSet, rng: np.random.Generator) -> TokenSet:
    """Permute the local tokens with a fresh uniform permutation; CLS unchanged."""
    perm = rng.permutation(tokens.n)
    return TokenSet(tokens.cls.copy(), tokens.locals[perm].copy(), tokens.grid)


def noise_tokens(tokens: TokenSet, t: int, sched: NoiseSchedule,
                 eps_r: Optional[np.ndarray] = None,
                 rng: Optional[np.random.Generator] = None) -> TokenSet:
    """Diffuse CLS and locals with the same alpha_t/beta_t as the latents.

    ``eps_r`` stacks the CLS noise in row 0 over the local-token noise; when
    omitted it is drawn fresh from ``rng``.
    """
    if not (0 <= t <= sched.T):
        raise ParameterError(f"t must be in [0, {sched.T}], got {t}")
    stacked = np.concatenate([tokens.cls[None], tokens.locals], axis=0).astype(np.float64)
    if eps_r is None:
        if rng is None:
            raise ParameterError("need eps_r or rng")
        eps_r = rng.standard_normal(stacked.shape)
    eps_r = np.broadcast_to(np.asarray(eps_r, dtype=np.float64), stacked.shape)
    noised = sched.alpha[t] * stacked + sched.beta[t] * eps_r
    return TokenSet(noised[0], noised[1:], tokens.grid)


def drop_reference(tokens: TokenSet, drop_rate: float, rng: np.random.Generator) -> TokenSet:
    """Whole-set drop: with probability drop_rate return the zero condition."""
    if not (0.0 <= drop_rate <= 1.0):
        raise ParameterError(f"drop_rate must be in [0, 1], got {drop_rate}")
    if drop_rate > 0.0 and rng.random() < drop_rate:
        return TokenSet.zeros(tokens.grid, tokens.dim)
    return tokens


# ---------------------------------------------------------------------------
# Batched torch equivalents used by the training loop
# ---------------------------------------------------------------------------

def shuffle_context(ctx: torch.Tensor, generator: torch.Generator) -> torch.Tensor:
    """Independent fresh permutation of the token axis per batch row."""
    b, n, _ = ctx.shape
    order = torch.argsort(torch.rand(b, n, generator=generator), dim=1)
    return torch.gather(ctx, 1, order[..., None].expand_as(ctx))


def drop_context(ctx: torch.Tensor, drop_rate: float, generator: torch.Generator) -> torch.Tensor:
    if drop_rate <= 0.0:
        return ctx
    keep = (torch.rand(ctx.shape[0], generator=generator) >= drop_rate).float()
    return ctx * keep.reshape(-1, *([1] * (ctx.ndim - 1)))


def noise_context(ctx: torch.Tensor, t: torch.Tensor, sched: NoiseSchedule,
                  generator: torch.Generator) -> torch.Tensor:
    alpha = torch.from_numpy(sched.alpha).to(ctx.dtype)[t]
    beta = torch.from_numpy(sched.beta).to(ctx.dtype)[t]
    shape = (-1, *([1] * (ctx.ndim - 1)))
    eps = torch.randn(ctx.shape, generator=generator, dtype=ctx.dtype)
    return alpha.reshape(shape) * ctx + beta.reshape(shape) * eps


def prepare_reference(ctx: torch.Tensor, t: torch.Tensor, sched: NoiseSchedule,
                      strategy: StrategyConfig, generator: torch.Generator) -> torch.Tensor:
    if strategy.strategy == STRATEGY_SHUFFLE and ctx.ndim == 3:
        ctx = shuffle_context(ctx, generator)
    ctx = drop_context(ctx, strategy.drop_rate, generator)
    if strategy.noisy:
        ctx = noise_context(ctx, t, sched, generator)
    return ctx


# ---------------------------------------------------------------------------
# Losses
# ---------------------------------------------------------------------------

def _q_sample_torch(z0: torch.Tensor, t: torch.Tensor, eps: torch.Tensor,
                    sched: NoiseSchedule) -> torch.Tensor:
    alpha = torch.from_numpy(sched.alpha).to(z0.dtype)[t].reshape(-1, 1, 1, 1)
    beta = torch.from_numpy(sched.beta).to(z0.dtype)[t].reshape(-1, 1, 1, 1)
    return alpha * z0 + beta * eps


def diffusion_loss(model, z0: torch.Tensor, sketch: Optional[torch.Tensor],
                   ctx: Optional[torch.Tensor], sched: NoiseSchedule,
                   strategy: StrategyConfig, generator: torch.Generator,
                   t: Optional[torch.Tensor] = None,
                   eps: Optional[torch.Tensor] = None) -> torch.Tensor:
    """Mean squared error between the drawn noise and the model's prediction.

    The reference context runs through the strategy pipeline with the same t
    as the latent diffusion. t and eps are drawn internally unless injected.
    """
    b = z0.shape[0]
    if t is None:
        t = torch.randint(1, sched.T + 1, (b,), generator=generator)
    if eps is None:
        eps = torch.randn(z0.shape, generator=generator, dtype=z0.dtype)
    z_t = _q_sample_torch(z0, t, eps, sched)
    if ctx is not None:
        ctx = prepare_reference(ctx, t, sched, strategy, generator)
    pred = model(z_t, t, sketch, ctx)
    loss = torch.mean((eps - pred) ** 2)
    if not torch.isfinite(loss):
        raise TrainingError(
            "non-finite diffusion loss; diagnostics: "
            + json.dumps({"t": t.tolist(),
                          "z_t_absmax": float(z_t.abs().max()),
                          "pred_absmax": float(pred.abs().max())}))
    return loss


def dual_loss(model, z0: torch.Tensor, sketch: Optional[torch.Tensor],
              ctx: Optional[torch.Tensor], sched: NoiseSchedule,
              strategy: StrategyConfig, generator: torch.Generator,
              t: Optional[torch.Tensor] = None,
              eps: Optional[torch.Tensor] = None,
              eps2: Optional[torch.Tensor] = None) -> torch.Tensor:
    """Reference-conditioned term plus lambda times a sketch-only term.

    The two terms diffuse z0 with independent noises at the shared t; the
    second term's reference is the null (zero) condition.
    """
    if strategy.lam <= 0:
        raise ParameterError("dual loss requires lambda > 0")
    b = z0.shape[0]
    if t is None:
        t = torch.randint(1, sched.T + 1, (b,), generator=generator)
    loss_ref = diffusion_loss(model, z0, sketch, ctx, sched, strategy, generator,
                              t=t, eps=eps)
    if eps2 is None:
        eps2 = torch.randn(z0.shape, generator=generator, dtype=z0.dtype)
    z_t2 = _q_sample_torch(z0, t, eps2, sched)
    pred2 = model(z_t2, t, sketch, None)
    loss_sketch = torch.mean((eps2 - pred2) ** 2)
    if not torch.isfinite(loss_sketch):
        raise TrainingError("non-finite sketch-only term in dual loss")
    return loss_ref + strategy.lam * loss_sketch


# ---------------------------------------------------------------------------
# Full training loop
# ---------------------------------------------------------------------------

def _load_corpus(manifest_path, use_deformed_refs: bool):
    header, records = data_mod.load_manifest(manifest_path)
    root = Path(manifest_path).parent
    colors, sketches, refs = [], [], []
    for rec in records:
        colors.append(data_mod.load_image(root / rec["color"]))
        sketches.append(data_mod.load_image(root / rec["sketch"]))
        ref_name = rec["reference"] if use_deformed_refs else rec["color"]
        refs.append(data_mod.load_image(root / ref_name))
    if not colors:
        raise DataError(f"manifest {manifest_path} has no samples")
    stack = lambda xs: torch.from_numpy(np.stack(xs).astype(np.float32))
    return header, stack(colors), stack(sketches), stack(refs)


@torch.no_grad()
def _precompute_latents(vae, images: torch.Tensor, batch: int = 64) -> torch.Tensor:
    outs = [vae.encode_batch(images[i:i + batch]) for i in range(0, len(images), batch)]
    return torch.cat(outs)


@torch.no_grad()
def _precompute_tokens(token_model, images: torch.Tensor, batch: int = 64) -> torch.Tensor:
    outs = [token_model.extract_tokens_batch(images[i:i + batch])
            for i in range(0, len(images), batch)]
    return torch.cat(outs)


def train_denoiser(manifest_path, vae, token_model, strategy: StrategyConfig,
                   denoiser_cfg: DenoiserConfig, epochs: int = 2, batch_size: int = 16,
                   lr: float = 1e-4, weight_decay: float = 0.1,
                   betas=(0.9, 0.999), checkpoint_dir=None, log_path=None,
                   max_steps: Optional[int] = None,
                   model: Optional[UNetDenoiser] = None):
    """Train a denoiser under a strategy; returns (model, log records).

    The published optimizer settings are AdamW with lr 1e-5, betas (0.9,
    0.999), weight decay 0.1; the toy default raises lr to 1e-4 so desk-scale
    runs converge in minutes.
    """
    if vae is None or token_model is None:
        raise DependencyError("train_denoiser needs autoencoder and token-encoder models")
    use_deformed = strategy.strategy == STRATEGY_DEFORM
    header, colors, sketches, refs = _load_corpus(manifest_path, use_deformed)

    torch.manual_seed(strategy.seed)
    if model is None:
        model = UNetDenoiser(denoiser_cfg)
    sched = _schedule_for(denoiser_cfg)
    frozen = _param_fingerprint(vae) + _param_fingerprint(token_model)

    z0 = _precompute_latents(vae, colors)
    if denoiser_cfg.latent_scale == 1.0:
        # normalize so the diffused latents are roughly unit std
        denoiser_cfg.latent_scale = model.cfg.latent_scale = round(
            float(1.0 / z0.std().clamp(min=1e-6)), 6)
    z0 = z0 * denoiser_cfg.latent_scale
    token_batch = _precompute_tokens(token_model, refs)
    if denoiser_cfg.variant == VARIANT_ATTENTION:
        ctx_all = token_batch[:, 1:].contiguous()
    else:
        ctx_all = token_batch[:, 0].contiguous()

    opt = torch.optim.AdamW(model.parameters(), lr=lr, betas=betas,
                            weight_decay=weight_decay)
    generator = torch.Generator().manual_seed(strategy.seed)
    rng = np.random.RandomState(strategy.seed)
    records = []
    log_fh = Path(log_path).open("w", encoding="utf-8") if log_path else None

    step = 0
    model.train()
    start = time.time()
    try:
        for epoch in range(epochs):
            order = rng.permutation(len(z0))
            for lo in range(0, len(order), batch_size):
                idx = order[lo:lo + batch_size]
                ctx = ctx_all[idx]
                loss_fn = dual_loss if strategy.dual else diffusion_loss
                loss = loss_fn(model, z0[idx], sketches[idx], ctx, sched, strategy, generator)
                opt.zero_grad()
                loss.backward()
                opt.step()
                rec = {"step": step, "epoch": epoch,
                       "loss": round(float(loss.detach()), 6),
                       "strategy": strategy.tag(), "lr": lr}
                records.append(rec)
                if log_fh:
                    log_fh.write(json.dumps(rec) + "\n")
                step += 1
                if max_steps is not None and step >= max_steps:
                    break
            if checkpoint_dir is not None:
                save_denoiser(Path(checkpoint_dir) / f"denoiser_{strategy.tag()}_ep{epoch}.ckpt",
                              model, extra=_strategy_extra(strategy, epoch))
            if max_steps is not None and step >= max_steps:
                break
    finally:
        if log_fh:
            log_fh.close()
    model.eval()

    if frozen != _param_fingerprint(vae) + _param_fingerprint(token_model):
        raise TrainingError("frozen encoder parameters changed during denoiser training")
    if checkpoint_dir is not None:
        save_denoiser(Path(checkpoint_dir) / f"denoiser_{strategy.tag()}.ckpt", model,
                      extra=_strategy_extra(strategy, epochs - 1,
                                            seconds=round(time.time() - start, 1)))
    return model, records


def _strategy_extra(strategy: StrategyConfig, epoch: int, **more) -> dict:
    return {"strategy": strategy.tag(), "strategy_config": asdict(strategy),
            "epoch": epoch, **more}


def _schedule_for(cfg: DenoiserConfig) -> NoiseSchedule:
    from .schedules import build_vp_schedule

    return build_vp_schedule(cfg.T, cfg.beta_start, cfg.beta_end)


def _param_fingerprint(model) -> bytes:
    if not isinstance(model, torch.nn.Module):
        return b""
    return b"".join(p.detach().numpy().tobytes() for p in model.parameters())
