"""Builds and caches the trained artifacts the acceptance suite runs against.

Two profiles: the default smoke profile trains desk-scale models on CPU in
tens of minutes; the full profile matches the large configuration and is
selected with REFCOLOR_ACCEPT_SCALE=full. Either way the thresholds asserted
by the acceptance tests are identical.
"""
from __future__ import annotations

import json
import os
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch

from refcolor import data as data_mod
from refcolor.autoencoder import (AutoencoderConfig, load_autoencoder,
                                  save_autoencoder, train_autoencoder)
from refcolor.denoiser import DenoiserConfig
from refcolor.sampler import SamplerConfig
from refcolor.tokens import (TokenEncoderConfig, load_token_model, save_token_model,
                             train_contrastive)
from refcolor.training import StrategyConfig, train_denoiser

REPO_ROOT = Path(__file__).resolve().parent.parent


@dataclass(frozen=True)
class Profile:
    name: str
    train_n: int
    eval_n: int
    vae_steps: int
    vae_base: int
    vae_channels: int
    tok_epochs: int
    den_steps: int
    den_base: int
    den_batch: int
    den_lr: float
    sampler_gs: float
    sampler_sgs: float
    sampler_steps: int


PROFILES = {
    "smoke": Profile(name="smoke", train_n=1500, eval_n=200, vae_steps=3000,
                     vae_base=48, vae_channels=8, tok_epochs=40, den_steps=2600,
                     den_base=48, den_batch=16, den_lr=2e-4, sampler_gs=2.0,
                     sampler_sgs=1.0, sampler_steps=20),
    "full": Profile(name="full", train_n=5000, eval_n=200, vae_steps=12000,
                    vae_base=64, vae_channels=8, tok_epochs=60, den_steps=20000,
                    den_base=64, den_batch=16, den_lr=1e-4, sampler_gs=2.0,
                    sampler_sgs=1.0, sampler_steps=20),
}


def active_profile() -> Profile:
    return PROFILES[os.environ.get("REFCOLOR_ACCEPT_SCALE", "smoke")]


def workspace(profile: Profile) -> Path:
    root = Path(os.environ.get("REFCOLOR_ACCEPT_DIR",
                               REPO_ROOT / "artifacts" / f"acceptance-{profile.name}"))
    root.mkdir(parents=True, exist_ok=True)
    return root


def _log(msg: str):
    print(f"[acceptance-build] {msg}", flush=True)


def ensure_datasets(ws: Path, profile: Profile):
    train_dir = ws / "train_data"
    eval_dir = ws / "eval_data"
    if not (train_dir / "manifest.jsonl").exists():
        _log(f"building train corpus ({profile.train_n} triples)")
        data_mod.build_dataset(profile.train_n, train_dir, deform=True, size=64, seed=0)
    if not (eval_dir / "manifest.jsonl").exists():
        _log(f"building eval corpus ({profile.eval_n} triples)")
        data_mod.build_dataset(profile.eval_n, eval_dir, deform=True, size=64,
                               seed=1_000_000)
    return train_dir / "manifest.jsonl", eval_dir / "manifest.jsonl"


def ensure_autoencoder(ws: Path, profile: Profile, train_manifest: Path):
    path = ws / "checkpoints" / "autoencoder.ckpt"
    if path.exists():
        return load_autoencoder(path)
    _log(f"training autoencoder ({profile.vae_steps} steps)")
    header, records = data_mod.load_manifest(train_manifest)
    root = train_manifest.parent
    images = [data_mod.load_image(root / r["color"]) for r in records]
    cfg = AutoencoderConfig(f=4, latent_channels=profile.vae_channels,
                            base_width=profile.vae_base, image_size=64)
    batch = 32
    epochs = max(1, profile.vae_steps * batch // max(len(images), 1))
    model, history = train_autoencoder(images, cfg, epochs=epochs, batch_size=batch,
                                       lr=3e-3, seed=0)
    save_autoencoder(path, model)
    (ws / "autoencoder_history.json").write_text(json.dumps(history))
    _log(f"autoencoder loss {history[0]:.4f} -> {history[-1]:.5f}")
    return load_autoencoder(path)


def ensure_token_model(ws: Path, profile: Profile, train_manifest: Path):
    path = ws / "checkpoints" / "token_model.ckpt"
    if path.exists():
        return load_token_model(path)
    _log(f"training token encoder ({profile.tok_epochs} epochs)")
    header, records = data_mod.load_manifest(train_manifest)
    root = train_manifest.parent
    rng = np.random.RandomState(0)
    pairs = []
    for rec in records:
        img = data_mod.load_image(root / rec["color"])
        pairs.append((img, rec["captions"][rng.randint(len(rec["captions"]))]))
    cfg = TokenEncoderConfig(image_size=64, grid=8, dim=64, depth=4,
                             vocab=tuple(header["vocabulary"]))
    model, history = train_contrastive(pairs, cfg, epochs=profile.tok_epochs,
                                       batch_size=32, lr=2e-3, seed=0)
    save_token_model(path, model)
    (ws / "token_history.json").write_text(json.dumps(history))
    _log(f"contrastive loss {history[0]:.3f} -> {history[-1]:.3f}")
    return load_token_model(path)


STRATEGIES = {
    "noisy": StrategyConfig(strategy="shuffle", drop_rate=0.0, noisy=True, seed=0),
    "shuffle-0drop": StrategyConfig(strategy="shuffle", drop_rate=0.0, noisy=False,
                                    seed=0),
}


def denoiser_path(ws: Path, name: str) -> Path:
    return ws / "checkpoints" / f"denoiser_{STRATEGIES[name].tag()}.ckpt"


def ensure_denoiser(ws: Path, profile: Profile, train_manifest: Path, vae, token_model,
                    name: str) -> Path:
    path = denoiser_path(ws, name)
    if path.exists():
        return path
    strategy = STRATEGIES[name]
    _log(f"training denoiser [{name}] ({profile.den_steps} steps)")
    cfg = DenoiserConfig(variant="attention", latent_channels=vae.latent_channels,
                         latent_size=64 // vae.f, image_size=64, f=vae.f,
                         base=profile.den_base, token_dim=token_model.cfg.dim,
                         n_tokens=token_model.cfg.grid ** 2)
    header, _ = data_mod.load_manifest(train_manifest)
    epochs = max(1, profile.den_steps * profile.den_batch // max(header["n"], 1) + 1)
    model, records = train_denoiser(
        train_manifest, vae, token_model, strategy, cfg, epochs=epochs,
        batch_size=profile.den_batch, lr=profile.den_lr,
        checkpoint_dir=ws / "checkpoints", log_path=ws / f"train_{name}.jsonl",
        max_steps=profile.den_steps)
    _log(f"denoiser [{name}] loss {records[0]['loss']:.4f} -> "
         f"{np.mean([r['loss'] for r in records[-50:]]):.4f}")
    return path


def sampler_config(profile: Profile, seed: int = 0) -> SamplerConfig:
    return SamplerConfig(steps=profile.sampler_steps, gs=profile.sampler_gs,
                         sgs=profile.sampler_sgs, seed=seed)


def build_all(profile: Profile | None = None) -> dict:
    profile = profile or active_profile()
    ws = workspace(profile)
    train_manifest, eval_manifest = ensure_datasets(ws, profile)
    vae = ensure_autoencoder(ws, profile, train_manifest)
    token_model = ensure_token_model(ws, profile, train_manifest)
    noisy = ensure_denoiser(ws, profile, train_manifest, vae, token_model, "noisy")
    shuffle0 = ensure_denoiser(ws, profile, train_manifest, vae, token_model,
                               "shuffle-0drop")
    return {"profile": profile, "workspace": ws, "train_manifest": train_manifest,
            "eval_manifest": eval_manifest, "vae": vae, "token_model": token_model,
            "noisy_ckpt": noisy, "shuffle0_ckpt": shuffle0,
            "checkpoint_dir": ws / "checkpoints"}


if __name__ == "__main__":
    build_all()
