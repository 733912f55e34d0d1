"""Inference-time denoising.

Solvers integrate the probability-flow ODE in the noise-to-signal domain
(x_sigma = z0 + sigma * eps): the trained VP denoiser is wrapped with
c_in = 1 / sqrt(1 + sigma^2) and its fractional-timestep lookup. Both the
Euler reference solver and the multistep second-order solver share that
wrapping, as do dual classifier-free guidance and noisy sampling.
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Optional, Sequence, Union

import numpy as np
import torch

from . import data as data_mod
from .autoencoder import load_autoencoder
from .denoiser import UNetDenoiser, VARIANT_ATTENTION, adain, load_denoiser
from .errors import DependencyError, ParameterError, ShapeError
from .latents import LatentTensor
from .manipulation import StepSpec, apply_steps, resolve_steps
from .schedules import (NoiseSchedule, build_karras_sigmas, build_vp_schedule,
                        vp_sigmas)
from .tokens import TokenSet, load_token_model

SOLVER_EULER = "euler"
SOLVER_DPMPP_2M = "dpmpp_2m"
SCHEDULER_KARRAS = "karras"
SCHEDULER_VP = "vp"

NOISY_GATE_OFFSET = 1e-4


@dataclass
class SamplerConfig:
    """Full determinism contract for one inference job."""

    steps: int = 20
    gs: float = 2.0
    sgs: float = 1.0
    noise_level: float = 0.0
    scheduler: str = SCHEDULER_KARRAS
    seed: int = 0
    solver: str = SOLVER_DPMPP_2M
    sigma_min: float = 0.1
    sigma_max: float = 10.0
    rho: float = 7.0
    inject: bool = False
    adain: bool = False

    def __post_init__(self):
        if self.steps < 1:
            raise ParameterError(f"steps must be >= 1, got {self.steps}")
        if not (0.0 <= self.noise_level <= 1.0):
            raise ParameterError(f"noise_level must be in [0, 1], got {self.noise_level}")
        if self.scheduler not in (SCHEDULER_KARRAS, SCHEDULER_VP):
            raise ParameterError(f"unknown scheduler {self.scheduler!r}")
        if self.solver not in (SOLVER_EULER, SOLVER_DPMPP_2M):
            raise ParameterError(f"unknown solver {self.solver!r}")

    def to_dict(self) -> dict:
        return asdict(self)


def build_sigmas(cfg: SamplerConfig, sched: NoiseSchedule) -> np.ndarray:
    """Sigma ladder for the configured scheduler, without the terminal zero."""
    if cfg.scheduler == SCHEDULER_KARRAS:
        return build_karras_sigmas(cfg.steps, cfg.sigma_min, cfg.sigma_max, cfg.rho)
    return vp_sigmas(sched, cfg.steps)


# ---------------------------------------------------------------------------
# ODE solvers over data predictions
# ---------------------------------------------------------------------------

def solve_euler(denoise_fn: Callable, x: torch.Tensor, sigmas: Sequence[float]) -> torch.Tensor:
    """First-order probability-flow stepping: x += (s' - s) * (x - D) / s."""
    for i in range(len(sigmas) - 1):
        sigma, sigma_next = float(sigmas[i]), float(sigmas[i + 1])
        d = denoise_fn(x, sigma, i)
        x = x + (sigma_next - sigma) * (x - d) / sigma
    return x


def solve_dpmpp_2m(denoise_fn: Callable, x: torch.Tensor, sigmas: Sequence[float]) -> torch.Tensor:
    """Multistep second-order update in the log-SNR domain.

    With h_i = lambda_{i+1} - lambda_i and r_i = h_{i-1} / h_i the correction
    is D_hat = (1 + 1/(2 r)) D_i - 1/(2 r) D_{i-1}; the update is
    x <- (s'/s) x - (exp(-h) - 1) D_hat. The first step and the terminal
    sigma = 0 step fall back to first order (exact for the final step).
    """
    old_d = None
    old_h = None
    for i in range(len(sigmas) - 1):
        sigma, sigma_next = float(sigmas[i]), float(sigmas[i + 1])
        d = denoise_fn(x, sigma, i)
        if sigma_next == 0.0:
            x = d
            break
        h = np.log(sigma) - np.log(sigma_next)
        ratio = sigma_next / sigma
        if old_d is None:
            x = ratio * x - (ratio - 1.0) * d
        else:
            r = old_h / h
            d_hat = (1.0 + 1.0 / (2.0 * r)) * d - (1.0 / (2.0 * r)) * old_d
            x = ratio * x - (ratio - 1.0) * d_hat
        old_d, old_h = d, h
    return x


SOLVERS = {SOLVER_EULER: solve_euler, SOLVER_DPMPP_2M: solve_dpmpp_2m}


# ---------------------------------------------------------------------------
# Dual classifier-free guidance
# ---------------------------------------------------------------------------

def dual_cfg_eps(model, z_t: torch.Tensor, t: torch.Tensor,
                 sketch: Optional[torch.Tensor], tokens: Optional[torch.Tensor],
                 gs: float, sgs: float,
                 ref_hidden: Optional[dict] = None) -> torch.Tensor:
    """eps(0,0) + SGS * (eps(s,0) - eps(0,0)) + GS * (eps(s,r) - eps(s,0)).

    Null conditions are zeros. Each distinct branch is evaluated at most
    once, and branches with zero net coefficient are skipped, which makes the
    GS = SGS = 1 reduction exact at the bit level.
    """
    coeff_uncond = 1.0 - sgs
    coeff_sketch = sgs - gs
    coeff_full = gs
    total = None
    for coeff, use_sketch, use_tokens, hidden in (
            (coeff_uncond, False, False, None),
            (coeff_sketch, True, False, None),
            (coeff_full, True, True, ref_hidden)):
        if coeff == 0.0:
            continue
        eps = model(z_t, t,
                    sketch if use_sketch else None,
                    tokens if use_tokens else None,
                    ref_hidden=hidden) if hidden is not None else model(
            z_t, t, sketch if use_sketch else None, tokens if use_tokens else None)
        term = coeff * eps if coeff != 1.0 else eps
        total = term if total is None else total + term
    if total is None:  # all coefficients zero (gs = 0, sgs = 0 degenerate)
        total = torch.zeros_like(z_t)
    return total


# ---------------------------------------------------------------------------
# Noisy sampling
# ---------------------------------------------------------------------------

def noisy_gate(t: int, total_steps: int, noise_level: float) -> bool:
    """The early-step gate: noise while (1 - t/(T + 0.0001)) < noise_level,
    where t counts down from total_steps to 1 over the sampling run."""
    return (1.0 - t / (total_steps + NOISY_GATE_OFFSET)) < noise_level


def noisy_sampling_tokens(tokens: TokenSet, t: int, total_steps: int, noise_level: float,
                          sched: NoiseSchedule, rng: np.random.Generator,
                          sigma: Optional[float] = None) -> TokenSet:
    """Return schedule-noised tokens when the gate opens, else the tokens unchanged.

    The train-time timestep comes from the sigma at this sampling step when
    given, else from the t/total_steps fraction of the train horizon.
    """
    if not (0 <= t <= total_steps):
        raise ParameterError(f"t must be in [0, {total_steps}], got {t}")
    if not (0.0 <= noise_level <= 1.0):
        raise ParameterError(f"noise_level must be in [0, 1], got {noise_level}")
    if not noisy_gate(t, total_steps, noise_level):
        return tokens
    from .training import noise_tokens

    if sigma is not None:
        train_t = int(round(float(sched.sigma_to_t(sigma))))
    else:
        train_t = int(round(sched.T * t / total_steps))
    train_t = min(max(train_t, 0), sched.T)
    return noise_tokens(tokens, train_t, sched, rng=rng)


# ---------------------------------------------------------------------------
# Latent sampling with the trained denoiser
# ---------------------------------------------------------------------------

def sample_latents(model, sched: NoiseSchedule, cfg: SamplerConfig,
                   shape: tuple[int, int, int, int],
                   sketch: Optional[torch.Tensor] = None,
                   tokens: Optional[torch.Tensor] = None,
                   generator: Optional[torch.Generator] = None,
                   ref_latent: Optional[torch.Tensor] = None,
                   ref_sketch: Optional[torch.Tensor] = None) -> torch.Tensor:
    """Run the configured solver; returns the final latent (B, C, h, w).

    Deterministic given cfg.seed: the generator seeds the initial noise, the
    per-step token noising, and the injection chain's noise.
    """
    if generator is None:
        generator = torch.Generator().manual_seed(cfg.seed)
    sigmas = np.concatenate([build_sigmas(cfg, sched), [0.0]])
    x = torch.randn(shape, generator=generator) * float(sigmas[0])

    inject = cfg.inject and ref_latent is not None
    eps_ref = torch.randn(shape, generator=generator) if inject else None
    use_adain = cfg.adain and ref_latent is not None
    total_steps = cfg.steps

    # pre-draw per-step token noise so the draw order is fixed regardless of
    # solver internals
    step_token_noise = []
    if tokens is not None and cfg.noise_level > 0:
        for i in range(total_steps):
            if noisy_gate(total_steps - i, total_steps, cfg.noise_level):
                step_token_noise.append(
                    torch.randn(tokens.shape, generator=generator, dtype=tokens.dtype))
            else:
                step_token_noise.append(None)

    def denoise_fn(x_cur: torch.Tensor, sigma: float, step: int) -> torch.Tensor:
        t_train = float(sched.sigma_to_t(sigma))
        t_b = torch.full((shape[0],), t_train)
        c_in = 1.0 / np.sqrt(1.0 + sigma ** 2)
        z_in = (x_cur * c_in).float()

        ctx = tokens
        if tokens is not None and cfg.noise_level > 0 and step_token_noise[step] is not None:
            tt = int(round(t_train))
            ctx = (float(sched.alpha[tt]) * tokens
                   + float(sched.beta[tt]) * step_token_noise[step])

        hidden = None
        if inject:
            x_ref = ref_latent + sigma * eps_ref
            capture: dict = {}
            model(x_ref.float() * c_in, t_b, ref_sketch, ctx, capture=capture)
            hidden = capture

        eps = dual_cfg_eps(model, z_in, t_b, sketch, ctx, cfg.gs, cfg.sgs,
                           ref_hidden=hidden)
        d = x_cur - sigma * eps
        if use_adain:
            d = adain(d, ref_latent)
        return d

    return SOLVERS[cfg.solver](denoise_fn, x, sigmas)


def sample_euler(model, sched, cfg: SamplerConfig, shape, **kw) -> torch.Tensor:
    cfg = SamplerConfig(**{**cfg.to_dict(), "solver": SOLVER_EULER})
    return sample_latents(model, sched, cfg, shape, **kw)


def sample_dpmpp_2m(model, sched, cfg: SamplerConfig, shape, **kw) -> torch.Tensor:
    cfg = SamplerConfig(**{**cfg.to_dict(), "solver": SOLVER_DPMPP_2M})
    return sample_latents(model, sched, cfg, shape, **kw)


# ---------------------------------------------------------------------------
# Whole pipeline
# ---------------------------------------------------------------------------

@dataclass
class Pipeline:
    vae: object
    token_model: object
    denoiser: UNetDenoiser
    sched: NoiseSchedule
    meta: dict = field(default_factory=dict)

    @property
    def variant(self) -> str:
        return self.denoiser.cfg.variant

    def context_from_tokens(self, tokens: TokenSet) -> torch.Tensor:
        if self.variant == VARIANT_ATTENTION:
            return torch.from_numpy(tokens.locals.astype(np.float32))[None]
        return torch.from_numpy(tokens.cls.astype(np.float32))[None]


DEFAULT_CKPT_NAMES = {
    "autoencoder": "autoencoder.ckpt",
    "token_model": "token_model.ckpt",
    "denoiser": "denoiser.ckpt",
}


def load_pipeline(checkpoint_dir, denoiser_name: Optional[str] = None) -> Pipeline:
    root = Path(checkpoint_dir)
    paths = {k: root / v for k, v in DEFAULT_CKPT_NAMES.items()}
    if denoiser_name:
        paths["denoiser"] = root / denoiser_name
    for k, p in paths.items():
        if not p.exists():
            raise DependencyError(f"missing {k} checkpoint: {p}")
    vae = load_autoencoder(paths["autoencoder"])
    token_model = load_token_model(paths["token_model"])
    den, den_cfg = load_denoiser(paths["denoiser"])
    sched = build_vp_schedule(den.cfg.T, den.cfg.beta_start, den.cfg.beta_end)
    return Pipeline(vae, token_model, den, sched,
                    meta={"denoiser_config": den_cfg,
                          "checkpoints": {k: str(p) for k, p in paths.items()}})


def colorize_with_tokens(pipe: Pipeline, sketch: np.ndarray, tokens: TokenSet,
                         cfg: Optional[SamplerConfig] = None,
                         reference: Optional[np.ndarray] = None) -> tuple[np.ndarray, dict]:
    """Sample a colorization from an already-prepared token set.

    A reference image is only needed when injection or latent-statistic
    matching is enabled.
    """
    cfg = cfg or SamplerConfig()
    if sketch.ndim != 3 or sketch.shape[0] != 1:
        raise ShapeError(f"sketch must be (1, H, W), got {sketch.shape}")
    h, w = sketch.shape[1:]
    f = pipe.denoiser.cfg.f
    if h % f or w % f:
        raise ShapeError(f"sketch resolution ({h}, {w}) not divisible by f = {f}")

    ctx = pipe.context_from_tokens(tokens)
    sketch_t = torch.from_numpy(sketch.astype(np.float32))[None]

    ref_latent = None
    ref_sketch = None
    if cfg.inject or cfg.adain:
        if reference is None:
            raise ParameterError("inject/adain need the reference image")
        ref_latent = torch.from_numpy(
            pipe.vae.encode(reference).data.astype(np.float32))[None] \
            * pipe.denoiser.cfg.latent_scale
        ref_sketch = torch.from_numpy(
            data_mod.extract_sketch(reference).astype(np.float32))[None]

    shape = (1, pipe.denoiser.cfg.latent_channels, h // f, w // f)
    z = sample_latents(pipe.denoiser, pipe.sched, cfg, shape, sketch=sketch_t,
                       tokens=ctx, ref_latent=ref_latent, ref_sketch=ref_sketch)
    z = z / pipe.denoiser.cfg.latent_scale
    image = pipe.vae.decode(LatentTensor(z[0].numpy(), f=f))
    info = {"sampler": cfg.to_dict(), "variant": pipe.variant}
    return np.clip(image, 0.0, 1.0), info


def colorize(pipe: Pipeline, sketch: np.ndarray, reference: np.ndarray,
             manipulation_steps: Sequence[StepSpec] = (),
             cfg: Optional[SamplerConfig] = None) -> tuple[np.ndarray, dict]:
    """Sketch + reference -> colorized RGB image, deterministic per seed.

    Tokens are extracted from the reference, edited by the manipulation
    steps, then drive dual-CFG sampling; the final latent is decoded and
    clamped to [0, 1].
    """
    tokens = pipe.token_model.extract_tokens(reference)
    if manipulation_steps:
        steps = resolve_steps(list(manipulation_steps), pipe.token_model.embed_text)
        tokens = apply_steps(tokens, steps)
    image, info = colorize_with_tokens(pipe, sketch, tokens, cfg, reference=reference)
    info["manipulation_steps"] = [s.to_dict() for s in manipulation_steps]
    return image, info


@torch.no_grad()
def colorize_batch(pipe: Pipeline, sketches: torch.Tensor, references: torch.Tensor,
                   cfg: Optional[SamplerConfig] = None) -> np.ndarray:
    """Vectorized plain colorization (no manipulation) for evaluation runs."""
    cfg = cfg or SamplerConfig()
    token_batch = pipe.token_model.extract_tokens_batch(references)
    if pipe.variant == VARIANT_ATTENTION:
        ctx = token_batch[:, 1:].contiguous()
    else:
        ctx = token_batch[:, 0].contiguous()
    f = pipe.denoiser.cfg.f
    b, _, h, w = sketches.shape
    shape = (b, pipe.denoiser.cfg.latent_channels, h // f, w // f)
    z = sample_latents(pipe.denoiser, pipe.sched, cfg, shape, sketch=sketches, tokens=ctx)
    images = pipe.vae.decode_batch(z / pipe.denoiser.cfg.latent_scale).clamp(0.0, 1.0)
    return images.numpy()


def write_output(out_path, image: np.ndarray, info: dict):
    """PNG plus a sidecar record of the fully resolved configuration."""
    out_path = Path(out_path)
    data_mod.save_image(out_path, image)
    sidecar = out_path.with_suffix(out_path.suffix + ".config.json")
    sidecar.write_text(json.dumps(info, indent=2, sort_keys=True) + "\n", encoding="utf-8")
