import numpy as np
import pytest
import torch

from refcolor import data as data_mod
from refcolor.autoencoder import IdentityAutoencoder, save_autoencoder
from refcolor.denoiser import DenoiserConfig, UNetDenoiser, save_denoiser
from refcolor.tokens import TokenEncoderConfig, TokenModel, save_token_model

SMALL_SIZE = 32


@pytest.fixture(scope="session")
def corpus_dir(tmp_path_factory):
    out = tmp_path_factory.mktemp("corpus")
    data_mod.build_dataset(12, out, deform=True, size=64, seed=7)
    return out


@pytest.fixture(scope="session")
def small_token_model():
    torch.manual_seed(11)
    cfg = TokenEncoderConfig(image_size=SMALL_SIZE, grid=8, dim=32, depth=2, heads=4,
                             vocab=tuple(data_mod.caption_vocabulary()))
    model = TokenModel(cfg)
    model.eval()
    for p in model.parameters():
        p.requires_grad_(False)
    return model


def make_denoiser(variant="attention", latent_channels=3, latent_size=SMALL_SIZE, f=1,
                  base=16, token_dim=32, n_tokens=64, seed=3, image_size=SMALL_SIZE,
                  randomize_out=True):
    torch.manual_seed(seed)
    cfg = DenoiserConfig(variant=variant, latent_channels=latent_channels,
                         latent_size=latent_size, image_size=image_size, f=f, base=base,
                         channel_mult=(1, 2, 2), token_dim=token_dim, n_tokens=n_tokens)
    model = UNetDenoiser(cfg)
    if randomize_out:
        # the output conv is zero-initialized for training; tests that probe
        # conditioning need it live
        torch.nn.init.normal_(model.out_conv.weight, std=0.05)
        torch.nn.init.normal_(model.out_conv.bias, std=0.05)
    model.eval()
    for p in model.parameters():
        p.requires_grad_(False)
    return model


@pytest.fixture(scope="session")
def small_denoiser():
    return make_denoiser()


@pytest.fixture(scope="session")
def pipeline_dir(tmp_path_factory, small_token_model, small_denoiser):
    """Checkpoint directory with identity VAE + untrained (seeded) models."""
    out = tmp_path_factory.mktemp("ckpts")
    save_autoencoder(out / "autoencoder.ckpt", IdentityAutoencoder())
    save_token_model(out / "token_model.ckpt", small_token_model)
    save_denoiser(out / "denoiser.ckpt", small_denoiser, extra={"strategy": "untrained"})
    return out


@pytest.fixture(scope="session")
def small_scene():
    img, spec = data_mod.generate_scene(5, size=SMALL_SIZE)
    return img, spec


def flat_image(color, size=SMALL_SIZE):
    return np.ones((3, size, size), dtype=np.float32) * np.asarray(color, np.float32)[:, None, None]
