import numpy as np
import pytest
import torch

from refcolor.autoencoder import (AutoencoderConfig, ConvVAE, IdentityAutoencoder,
                                  load_autoencoder, reconstruction_psnr,
                                  save_autoencoder, train_autoencoder)
from refcolor.data import generate_scene
from refcolor.errors import DataError, ParameterError, ShapeError
from refcolor.latents import LatentTensor


class TestIdentityMode:
    def test_roundtrip_exact(self):
        img, _ = generate_scene(1, size=32)
        ae = IdentityAutoencoder()
        z = ae.encode(img)
        assert z.f == 1
        out = ae.decode(z)
        assert np.array_equal(out, img)

    def test_decode_encode_identity(self):
        ae = IdentityAutoencoder()
        z = LatentTensor(np.random.RandomState(0).rand(3, 8, 8).astype(np.float32), 1)
        assert np.array_equal(ae.encode(ae.decode(z)).data, z.data)


class TestShapes:
    def test_latent_shape_contract(self):
        torch.manual_seed(0)
        vae = ConvVAE(AutoencoderConfig(f=4, image_size=64))
        img, _ = generate_scene(0, size=64)
        z = vae.encode(img)
        assert z.data.shape == (4, 16, 16)
        assert z.f == 4
        assert z.source_resolution == (64, 64)

    def test_non_divisible_rejected(self):
        torch.manual_seed(0)
        vae = ConvVAE(AutoencoderConfig(f=4))
        with pytest.raises(ShapeError):
            vae.encode(np.zeros((3, 30, 30), dtype=np.float32))

    def test_invalid_f_rejected(self):
        with pytest.raises(ParameterError):
            ConvVAE(AutoencoderConfig(f=3))

    def test_decode_clamps_to_unit_range(self):
        torch.manual_seed(0)
        vae = ConvVAE(AutoencoderConfig(f=4))
        out = vae.decode(LatentTensor(np.random.RandomState(1).randn(4, 16, 16) * 10, 4))
        assert out.min() >= 0.0 and out.max() <= 1.0
        assert np.isfinite(out).all()

    def test_zero_latent_decodes_finite(self):
        torch.manual_seed(0)
        vae = ConvVAE(AutoencoderConfig(f=4))
        out = vae.decode(LatentTensor(np.zeros((4, 16, 16)), 4))
        assert np.isfinite(out).all()


class TestTraining:
    def test_empty_corpus_rejected(self):
        with pytest.raises(DataError):
            train_autoencoder([], AutoencoderConfig())

    def test_single_image_overfit(self):
        img, _ = generate_scene(7, size=32)
        cfg = AutoencoderConfig(f=2, latent_channels=8, base_width=16, image_size=32)
        model, history = train_autoencoder([img] * 8, cfg, epochs=700, batch_size=8,
                                           lr=4e-3, seed=0)
        assert history[-1] < 1e-3
        assert history[-1] < 0.5 * history[0]

    def test_loss_trend_decreases(self):
        images = [generate_scene(s, size=32)[0] for s in range(24)]
        cfg = AutoencoderConfig(f=2, latent_channels=8, base_width=16, image_size=32)
        model, history = train_autoencoder(images, cfg, epochs=60, batch_size=8,
                                           lr=3e-3, seed=0)
        smoothed = np.convolve(history, np.ones(3) / 3, mode="valid")
        assert smoothed[-1] < smoothed[0]
        assert history[-1] < 0.5 * history[0]
        psnr = reconstruction_psnr(model, images[0])
        assert psnr > 15.0  # loose smoke bound; the trained bound is in acceptance


class TestPersistence:
    def test_roundtrip(self, tmp_path):
        torch.manual_seed(3)
        vae = ConvVAE(AutoencoderConfig(f=2, base_width=16, image_size=32))
        path = tmp_path / "vae.ckpt"
        save_autoencoder(path, vae)
        loaded = load_autoencoder(path)
        img, _ = generate_scene(2, size=32)
        assert np.allclose(vae.encode(img).data, loaded.encode(img).data, atol=1e-6)

    def test_identity_checkpoint(self, tmp_path):
        path = tmp_path / "id.ckpt"
        save_autoencoder(path, IdentityAutoencoder())
        loaded = load_autoencoder(path)
        assert isinstance(loaded, IdentityAutoencoder)
