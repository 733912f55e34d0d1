"""Command-line surface: one subcommand per pipeline stage.

Every run writes a resolved-config sidecar next to its primary output so any
artifact can be reproduced from its recorded flags.
"""
from __future__ import annotations

import json
import sys
from dataclasses import asdict
from pathlib import Path

import click
import numpy as np

from . import data as data_mod
from .errors import ParameterError


def _write_sidecar(target: Path, payload: dict):
    target = Path(target)
    target.parent.mkdir(parents=True, exist_ok=True)
    path = target.with_suffix(target.suffix + ".config.json") \
        if target.suffix != ".json" else target
    path.write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return path


def _fail(exc: Exception):
    click.echo(json.dumps({"error": str(exc), "type": type(exc).__name__}), err=True)
    sys.exit(1)


@click.group()
def main():
    """Reference-based sketch colorization toolkit."""


@main.command("synth-data")
@click.option("--n", type=int, required=True, help="Number of triples to generate.")
@click.option("--out", "out_dir", type=click.Path(), required=True)
@click.option("--size", type=int, default=64, show_default=True)
@click.option("--seed", type=int, default=0, show_default=True)
@click.option("--deform/--no-deform", default=True, show_default=True,
              help="Generate MLS-deformed reference images.")
@click.option("--max-shift", type=float, default=6.0, show_default=True)
def synth_data(n, out_dir, size, seed, deform, max_shift):
    """Generate the procedural (color, sketch, reference) corpus."""
    try:
        manifest = data_mod.build_dataset(n, out_dir, deform=deform, size=size, seed=seed,
                                          deform_max_shift=max_shift)
    except Exception as exc:  # noqa: BLE001
        _fail(exc)
    _write_sidecar(Path(out_dir) / "synth-data.config.json",
                   {"command": "synth-data", "n": n, "out": str(out_dir), "size": size,
                    "seed": seed, "deform": deform, "max_shift": max_shift})
    click.echo(str(manifest))


@main.command("train-autoencoder")
@click.option("--manifest", type=click.Path(exists=True), required=True)
@click.option("--out", "out_path", type=click.Path(), required=True)
@click.option("--f", "scale_factor", type=int, default=4, show_default=True)
@click.option("--latent-channels", type=int, default=4, show_default=True)
@click.option("--base-width", type=int, default=32, show_default=True)
@click.option("--epochs", type=int, default=30, show_default=True)
@click.option("--batch-size", type=int, default=32, show_default=True)
@click.option("--lr", type=float, default=2e-3, show_default=True)
@click.option("--seed", type=int, default=0, show_default=True)
@click.option("--identity", is_flag=True, help="Write an identity (f=1) checkpoint.")
def train_autoencoder_cmd(manifest, out_path, scale_factor, latent_channels, base_width,
                          epochs, batch_size, lr, seed, identity):
    """Train the perceptual-compression autoencoder."""
    from .autoencoder import (AutoencoderConfig, IdentityAutoencoder, save_autoencoder,
                              train_autoencoder)

    flags = {"command": "train-autoencoder", "manifest": manifest, "out": out_path,
             "f": scale_factor, "latent_channels": latent_channels,
             "base_width": base_width, "epochs": epochs, "batch_size": batch_size,
             "lr": lr, "seed": seed, "identity": identity}
    try:
        if identity:
            save_autoencoder(out_path, IdentityAutoencoder())
        else:
            header, records = data_mod.load_manifest(manifest)
            root = Path(manifest).parent
            images = [data_mod.load_image(root / r["color"]) for r in records]
            cfg = AutoencoderConfig(f=scale_factor, latent_channels=latent_channels,
                                    base_width=base_width, image_size=header["size"])
            model, history = train_autoencoder(images, cfg, epochs=epochs,
                                               batch_size=batch_size, lr=lr, seed=seed,
                                               log=lambda r: click.echo(json.dumps(r)))
            save_autoencoder(out_path, model)
    except Exception as exc:  # noqa: BLE001
        _fail(exc)
    _write_sidecar(Path(out_path), flags)
    click.echo(out_path)


@main.command("train-encoder")
@click.option("--manifest", type=click.Path(exists=True), required=True)
@click.option("--out", "out_path", type=click.Path(), required=True)
@click.option("--grid", type=int, default=8, show_default=True)
@click.option("--dim", type=int, default=64, show_default=True)
@click.option("--epochs", type=int, default=8, show_default=True)
@click.option("--batch-size", type=int, default=32, show_default=True)
@click.option("--lr", type=float, default=2e-3, show_default=True)
@click.option("--seed", type=int, default=0, show_default=True)
def train_encoder_cmd(manifest, out_path, grid, dim, epochs, batch_size, lr, seed):
    """Contrastively train the image/text token encoder."""
    from .tokens import TokenEncoderConfig, save_token_model, train_contrastive

    flags = {"command": "train-encoder", "manifest": manifest, "out": out_path,
             "grid": grid, "dim": dim, "epochs": epochs, "batch_size": batch_size,
             "lr": lr, "seed": seed}
    try:
        header, records = data_mod.load_manifest(manifest)
        root = Path(manifest).parent
        rng = np.random.RandomState(seed)
        pairs = []
        for rec in records:
            img = data_mod.load_image(root / rec["color"])
            caption = rec["captions"][rng.randint(len(rec["captions"]))]
            pairs.append((img, caption))
        cfg = TokenEncoderConfig(image_size=header["size"], grid=grid, dim=dim,
                                 vocab=tuple(header["vocabulary"]))
        model, history = train_contrastive(pairs, cfg, epochs=epochs,
                                           batch_size=batch_size, lr=lr, seed=seed,
                                           log=lambda r: click.echo(json.dumps(r)))
        save_token_model(out_path, model)
    except Exception as exc:  # noqa: BLE001
        _fail(exc)
    _write_sidecar(Path(out_path), flags)
    click.echo(out_path)


@main.command("train-denoiser")
@click.option("--manifest", type=click.Path(exists=True), required=True)
@click.option("--checkpoints", "ckpt_dir", type=click.Path(), required=True,
              help="Directory holding autoencoder.ckpt and token_model.ckpt; "
                   "denoiser checkpoints land here too.")
@click.option("--variant", type=click.Choice(["attention", "cls"]), default="attention",
              show_default=True)
@click.option("--strategy", type=click.Choice(["shuffle", "deform"]), default="shuffle",
              show_default=True)
@click.option("--drop-rate", type=float, default=None,
              help="Reference drop rate; defaults to 0.8 (shuffle) / 0.75 (deform) "
                   "when --paper-drop is set, else 0.")
@click.option("--paper-drop", is_flag=True, help="Use the published default drop rate.")
@click.option("--noisy/--no-noisy", default=False, show_default=True)
@click.option("--dual/--no-dual", default=False, show_default=True)
@click.option("--lam", type=float, default=4.0, show_default=True)
@click.option("--epochs", type=int, default=4, show_default=True)
@click.option("--max-steps", type=int, default=None)
@click.option("--batch-size", type=int, default=16, show_default=True)
@click.option("--lr", type=float, default=1e-4, show_default=True)
@click.option("--base", type=int, default=64, show_default=True)
@click.option("--seed", type=int, default=0, show_default=True)
@click.option("--name", "out_name", default=None, help="Final checkpoint filename.")
def train_denoiser_cmd(manifest, ckpt_dir, variant, strategy, drop_rate, paper_drop,
                       noisy, dual, lam, epochs, max_steps, batch_size, lr, base,
                       seed, out_name):
    """Train a denoiser with the selected strategy."""
    from .autoencoder import load_autoencoder
    from .denoiser import DenoiserConfig
    from .tokens import load_token_model
    from .training import DEFAULT_DROP_RATES, StrategyConfig, train_denoiser

    if drop_rate is None:
        drop_rate = DEFAULT_DROP_RATES[strategy] if paper_drop else 0.0
    flags = {"command": "train-denoiser", "manifest": manifest, "checkpoints": ckpt_dir,
             "variant": variant, "strategy": strategy, "drop_rate": drop_rate,
             "noisy": noisy, "dual": dual, "lam": lam, "epochs": epochs,
             "max_steps": max_steps, "batch_size": batch_size, "lr": lr,
             "base": base, "seed": seed, "name": out_name}
    try:
        ckpt_dir = Path(ckpt_dir)
        vae = load_autoencoder(ckpt_dir / "autoencoder.ckpt")
        token_model = load_token_model(ckpt_dir / "token_model.ckpt")
        header, _ = data_mod.load_manifest(manifest)
        size = header["size"]
        strat = StrategyConfig(strategy=strategy, drop_rate=drop_rate, noisy=noisy,
                               dual=dual, lam=lam, seed=seed)
        den_cfg = DenoiserConfig(
            variant=variant, latent_channels=getattr(vae, "latent_channels", 3),
            latent_size=size // vae.f, image_size=size, f=vae.f, base=base,
            token_dim=token_model.cfg.dim, n_tokens=token_model.cfg.grid ** 2)
        model, records = train_denoiser(
            manifest, vae, token_model, strat, den_cfg, epochs=epochs,
            batch_size=batch_size, lr=lr, checkpoint_dir=ckpt_dir,
            log_path=ckpt_dir / f"train_{strat.tag()}.jsonl", max_steps=max_steps)
        final = ckpt_dir / (out_name or f"denoiser_{strat.tag()}.ckpt")
        if out_name:
            from .denoiser import save_denoiser

            save_denoiser(final, model, extra={"strategy": strat.tag(),
                                               "strategy_config": asdict(strat)})
    except Exception as exc:  # noqa: BLE001
        _fail(exc)
    _write_sidecar(final, flags)
    click.echo(str(final))


def _load_pipeline_opts(ckpt_dir, denoiser_name):
    from .sampler import load_pipeline

    return load_pipeline(ckpt_dir, denoiser_name=denoiser_name)


@main.command("colorize")
@click.option("--sketch", "sketch_path", type=click.Path(exists=True), required=True)
@click.option("--reference", "reference_path", type=click.Path(exists=True), required=True)
@click.option("--checkpoints", "ckpt_dir", type=click.Path(exists=True), required=True)
@click.option("--denoiser", "denoiser_name", default=None,
              help="Denoiser checkpoint filename inside --checkpoints.")
@click.option("--out", "out_path", type=click.Path(), required=True)
@click.option("--gs", type=float, default=2.0, show_default=True)
@click.option("--sgs", type=float, default=1.0, show_default=True)
@click.option("--steps", type=int, default=20, show_default=True)
@click.option("--noise-level", type=float, default=0.0, show_default=True)
@click.option("--seed", type=int, default=0, show_default=True)
@click.option("--scheduler", type=click.Choice(["karras", "vp"]), default="karras",
              show_default=True)
@click.option("--solver", type=click.Choice(["dpmpp_2m", "euler"]), default="dpmpp_2m",
              show_default=True)
@click.option("--manip", "manip_path", type=click.Path(exists=True), default=None,
              help="Manipulation step file to apply before sampling.")
@click.option("--inject", is_flag=True, help="Enable reference attention injection.")
@click.option("--adain", is_flag=True, help="Match latent statistics to the reference.")
def colorize_cmd(sketch_path, reference_path, ckpt_dir, denoiser_name, out_path, gs, sgs,
                 steps, noise_level, seed, scheduler, solver, manip_path, inject, adain):
    """Colorize a sketch from a reference image."""
    from .manipulation import load_steps
    from .sampler import SamplerConfig, colorize, write_output

    try:
        pipe = _load_pipeline_opts(ckpt_dir, denoiser_name)
        sketch = data_mod.load_image(sketch_path)
        if sketch.shape[0] == 3:
            sketch = sketch[:1]
        reference = data_mod.load_image(reference_path)
        specs = load_steps(manip_path) if manip_path else []
        cfg = SamplerConfig(steps=steps, gs=gs, sgs=sgs, noise_level=noise_level,
                            scheduler=scheduler, seed=seed, solver=solver,
                            inject=inject, adain=adain)
        image, info = colorize(pipe, sketch, reference, specs, cfg)
        info.update({"command": "colorize", "sketch": str(sketch_path),
                     "reference": str(reference_path), "checkpoints": str(ckpt_dir),
                     "denoiser": denoiser_name, "manip": manip_path})
        write_output(out_path, image, info)
    except Exception as exc:  # noqa: BLE001
        _fail(exc)
    click.echo(str(out_path))


@main.command("manipulate")
@click.option("--reference", "reference_path", type=click.Path(exists=True), required=True)
@click.option("--checkpoints", "ckpt_dir", type=click.Path(exists=True), required=True)
@click.option("--steps", "steps_path", type=click.Path(exists=True), required=True)
@click.option("--out", "out_path", type=click.Path(), required=True,
              help="Edited token set checkpoint; heatmaps land beside it.")
@click.option("--heatmaps/--no-heatmaps", default=True, show_default=True)
def manipulate_cmd(reference_path, ckpt_dir, steps_path, out_path, heatmaps):
    """Apply a manipulation step file to a reference's token set."""
    from collections import OrderedDict

    from . import checkpointio, viz
    from .manipulation import (LocalStep, apply_steps, compute_m, load_steps,
                               resolve_steps)
    from .tokens import load_token_model

    try:
        token_model = load_token_model(Path(ckpt_dir) / "token_model.ckpt")
        reference = data_mod.load_image(reference_path)
        tokens = token_model.extract_tokens(reference)
        specs = load_steps(steps_path)
        steps = resolve_steps(specs, token_model.embed_text)
        out = Path(out_path)
        if heatmaps:
            cur = tokens
            for i, step in enumerate(steps):
                if isinstance(step, LocalStep):
                    m = compute_m(cur, step.control)
                    viz.save_heatmap_png(m.reshape(cur.grid, cur.grid),
                                         out.with_name(out.stem + f"_m{i}.png"))
                cur = apply_steps(cur, [step])
            edited = cur
        else:
            edited = apply_steps(tokens, steps)
        checkpointio.save_checkpoint(
            out, {"kind": "token_set", "grid": edited.grid, "dim": edited.dim},
            OrderedDict([("cls", edited.cls), ("locals", edited.locals)]))
    except Exception as exc:  # noqa: BLE001
        _fail(exc)
    _write_sidecar(out, {"command": "manipulate", "reference": str(reference_path),
                         "checkpoints": str(ckpt_dir), "steps": str(steps_path),
                         "out": str(out_path)})
    click.echo(str(out_path))


@main.command("probe")
@click.option("--manifest", type=click.Path(exists=True), required=True)
@click.option("--checkpoints", "ckpt_dir", type=click.Path(exists=True), required=True)
@click.option("--denoiser", "denoisers", multiple=True, required=True,
              help="Denoiser checkpoint filename; repeat to compare.")
@click.option("--out", "out_dir", type=click.Path(), required=True)
@click.option("--n-samples", type=int, default=50, show_default=True)
@click.option("--gs", type=float, default=2.0, show_default=True)
@click.option("--sgs", type=float, default=1.0, show_default=True)
@click.option("--steps", type=int, default=20, show_default=True)
@click.option("--seed", type=int, default=0, show_default=True)
def probe_cmd(manifest, ckpt_dir, denoisers, out_dir, n_samples, gs, sgs, steps, seed):
    """Compare trained checkpoints on aligned and cross-paired references."""
    from .diagnostics import strategy_probe, write_probe_report
    from .sampler import SamplerConfig

    try:
        cfg = SamplerConfig(steps=steps, gs=gs, sgs=sgs, seed=seed)
        report = strategy_probe(list(denoisers), manifest, ckpt_dir, cfg=cfg,
                                n_samples=n_samples)
        paths = write_probe_report(report, out_dir)
    except Exception as exc:  # noqa: BLE001
        _fail(exc)
    _write_sidecar(Path(out_dir) / "probe.config.json",
                   {"command": "probe", "manifest": str(manifest),
                    "checkpoints": str(ckpt_dir), "denoisers": list(denoisers),
                    "n_samples": n_samples, "gs": gs, "sgs": sgs, "steps": steps,
                    "seed": seed})
    click.echo(json.dumps(paths))


@main.command("serve")
@click.option("--checkpoints", "ckpt_dir", type=click.Path(exists=True), required=True,
              envvar="REFCOLOR_CHECKPOINTS")
@click.option("--denoiser", "denoiser_name", default=None)
@click.option("--host", default="127.0.0.1", show_default=True)
@click.option("--port", type=int, default=8951, show_default=True, envvar="REFCOLOR_PORT")
@click.option("--workers", type=int, default=1, show_default=True,
              help="Sampling worker threads.")
def serve_cmd(ckpt_dir, denoiser_name, host, port, workers):
    """Run the HTTP service that powers the interactive studio."""
    import uvicorn

    from .service import create_app

    try:
        app = create_app(ckpt_dir, denoiser_name=denoiser_name, workers=workers)
    except Exception as exc:  # noqa: BLE001
        _fail(exc)
    uvicorn.run(app, host=host, port=port, log_level="warning")


if __name__ == "__main__":
    main()
