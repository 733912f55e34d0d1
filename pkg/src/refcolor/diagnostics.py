"""Desk-scale proxies for output quality.

Sketch fidelity re-extracts edges from the output and intersects them with
the input sketch; palette similarity compares saturation-weighted hue
histograms under a circular earth-mover distance. The strategy probe runs
matched colorization over aligned and cross-paired references and ranks
checkpoints by the two metrics.
"""
from __future__ import annotations

import csv
import io
import json
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
import torch

from . import data as data_mod
from .errors import ParameterError
from .sampler import SamplerConfig, colorize_batch, load_pipeline

HUE_BINS = 12
SATURATION_FLOOR = 1e-3  # below this total weight the hue histogram is meaningless


def sketch_fidelity(output: np.ndarray, sketch: np.ndarray) -> float:
    """IoU between the output's re-extracted line mask and the input sketch's.

    A blank sketch scores 1.0 against a blank-edged output and 0.0 otherwise.
    """
    if output.shape[-2:] != sketch.shape[-2:]:
        raise ParameterError(
            f"resolution mismatch: output {output.shape[-2:]} vs sketch {sketch.shape[-2:]}")
    out_lines = data_mod.binarize_lines(data_mod.extract_sketch(output))
    in_lines = data_mod.binarize_lines(sketch)
    union = np.logical_or(out_lines, in_lines).sum()
    if union == 0:
        return 1.0
    if in_lines.sum() == 0 or out_lines.sum() == 0:
        return 0.0
    inter = np.logical_and(out_lines, in_lines).sum()
    return float(inter / union)


# ---------------------------------------------------------------------------
# Palette similarity
# ---------------------------------------------------------------------------

@dataclass
class PaletteScore:
    value: float
    luminance_fallback: bool = False

    def __float__(self) -> float:
        return self.value


def _rgb_to_hsv(img: np.ndarray):
    r, g, b = img[0], img[1], img[2]
    maxc = np.maximum(np.maximum(r, g), b)
    minc = np.minimum(np.minimum(r, g), b)
    delta = maxc - minc
    sat = np.where(maxc > 0, delta / np.maximum(maxc, 1e-12), 0.0)
    hue = np.zeros_like(maxc)
    nz = delta > 1e-12
    rc = np.where(nz, (maxc - r) / np.maximum(delta, 1e-12), 0.0)
    gc = np.where(nz, (maxc - g) / np.maximum(delta, 1e-12), 0.0)
    bc = np.where(nz, (maxc - b) / np.maximum(delta, 1e-12), 0.0)
    hue = np.where(maxc == r, bc - gc, hue)
    hue = np.where(maxc == g, 2.0 + rc - bc, hue)
    hue = np.where(maxc == b, 4.0 + gc - rc, hue)
    hue = (hue / 6.0) % 1.0
    hue = np.where(nz, hue, 0.0)
    return hue, sat


def hue_histogram(img: np.ndarray, bins: int = HUE_BINS):
    """Saturation-weighted hue histogram; returns (normalized hist, total weight)."""
    hue, sat = _rgb_to_hsv(np.clip(img, 0.0, 1.0))
    idx = np.minimum((hue * bins).astype(int), bins - 1)
    hist = np.bincount(idx.ravel(), weights=sat.ravel(), minlength=bins)
    total = float(hist.sum())
    if total > 0:
        hist = hist / total
    return hist, total / hue.size


def circular_emd(h1: np.ndarray, h2: np.ndarray) -> float:
    """Earth-mover distance between histograms on a circle, in bin units.

    Classic prefix-sum form: the optimal transport cost is the L1 distance of
    the cumulative difference to its median.
    """
    diff = np.asarray(h1, dtype=np.float64) - np.asarray(h2, dtype=np.float64)
    prefix = np.cumsum(diff)
    return float(np.abs(prefix - np.median(prefix)).sum())


def _luminance_histogram(img: np.ndarray, bins: int = HUE_BINS) -> np.ndarray:
    lum = 0.299 * img[0] + 0.587 * img[1] + 0.114 * img[2]
    hist, _ = np.histogram(lum, bins=bins, range=(0.0, 1.0))
    total = hist.sum()
    return hist / total if total else hist


def palette_similarity(output: np.ndarray, reference: np.ndarray) -> PaletteScore:
    """1 - normalized circular EMD between 12-bin hue histograms.

    Opposite-hue spikes are half a circle apart, so the normalizer is
    bins / 2. Fully desaturated inputs fall back to a luminance histogram
    (linear EMD, normalizer bins - 1) and flag the result.
    """
    h_out, w_out = hue_histogram(output)
    h_ref, w_ref = hue_histogram(reference)
    if w_out < SATURATION_FLOOR or w_ref < SATURATION_FLOOR:
        l_out = _luminance_histogram(output)
        l_ref = _luminance_histogram(reference)
        emd = float(np.abs(np.cumsum(l_out - l_ref))[:-1].sum())
        return PaletteScore(1.0 - emd / (HUE_BINS - 1), luminance_fallback=True)
    emd = circular_emd(h_out, h_ref)
    return PaletteScore(1.0 - emd / (HUE_BINS / 2.0), luminance_fallback=False)


# ---------------------------------------------------------------------------
# Strategy probe
# ---------------------------------------------------------------------------

@dataclass
class ProbeReport:
    rows: list[dict]
    config: dict

    def ranked(self) -> list[dict]:
        return sorted(self.rows, key=lambda r: -r["cross_sketch_fidelity"])

    def to_csv(self) -> str:
        buf = io.StringIO()
        fields = ["checkpoint", "strategy", "aligned_sketch_fidelity",
                  "aligned_palette_similarity", "cross_sketch_fidelity",
                  "cross_palette_similarity", "n_samples"]
        writer = csv.DictWriter(buf, fieldnames=fields, lineterminator="\n")
        writer.writeheader()
        for row in self.ranked():
            writer.writerow({k: row[k] for k in fields})
        return buf.getvalue()

    def to_text(self) -> str:
        lines = ["strategy probe report", f"config: {json.dumps(self.config, sort_keys=True)}",
                 ""]
        for i, row in enumerate(self.ranked(), 1):
            lines.append(
                f"{i}. {row['strategy']:<24} aligned fid={row['aligned_sketch_fidelity']:.4f} "
                f"pal={row['aligned_palette_similarity']:.4f} | cross "
                f"fid={row['cross_sketch_fidelity']:.4f} pal={row['cross_palette_similarity']:.4f}")
        return "\n".join(lines) + "\n"


def _mean_metrics(outputs: np.ndarray, sketches: np.ndarray, references: np.ndarray):
    fids, pals = [], []
    for out, sk, ref in zip(outputs, sketches, references):
        fids.append(sketch_fidelity(out, sk))
        pals.append(palette_similarity(out, ref).value)
    return float(np.mean(fids)), float(np.mean(pals))


def evaluate_checkpoint(pipe, sketches: torch.Tensor, references: torch.Tensor,
                        cfg: SamplerConfig, batch_size: int = 50):
    """Mean (sketch_fidelity, palette_similarity) for one reference pairing."""
    outs = []
    for lo in range(0, len(sketches), batch_size):
        outs.append(colorize_batch(pipe, sketches[lo:lo + batch_size],
                                   references[lo:lo + batch_size], cfg))
    outputs = np.concatenate(outs)
    return _mean_metrics(outputs, sketches.numpy(), references.numpy()), outputs


def strategy_probe(checkpoints: Sequence, manifest_path, checkpoint_dir,
                   cfg: Optional[SamplerConfig] = None, n_samples: int = 50,
                   cross_shift: int = 1, batch_size: int = 50) -> ProbeReport:
    """Compare checkpoints under matched seeds/configs on aligned and
    cross-paired references; returns a ranked report."""
    if len(checkpoints) < 1:
        raise ParameterError("probe needs at least one checkpoint")
    cfg = cfg or SamplerConfig()
    header, records = data_mod.load_manifest(manifest_path)
    root = Path(manifest_path).parent
    records = records[:n_samples]
    if not records:
        raise ParameterError("probe needs at least one sample")
    sketches = torch.from_numpy(np.stack(
        [data_mod.load_image(root / r["sketch"]) for r in records]).astype(np.float32))
    refs = torch.from_numpy(np.stack(
        [data_mod.load_image(root / r["reference"]) for r in records]).astype(np.float32))
    cross_refs = torch.roll(refs, shifts=cross_shift, dims=0)

    rows = []
    expected_shape = None
    for ckpt in checkpoints:
        pipe = load_pipeline(checkpoint_dir, denoiser_name=Path(ckpt).name)
        shape_key = (pipe.denoiser.cfg.latent_channels, pipe.denoiser.cfg.latent_size,
                     pipe.denoiser.cfg.f)
        if expected_shape is None:
            expected_shape = shape_key
        elif shape_key != expected_shape:
            raise ParameterError(
                f"checkpoint {ckpt} config {shape_key} does not match {expected_shape}")
        (fid_a, pal_a), _ = evaluate_checkpoint(pipe, sketches, refs, cfg, batch_size)
        (fid_x, pal_x), _ = evaluate_checkpoint(pipe, sketches, cross_refs, cfg, batch_size)
        strategy = pipe.meta["denoiser_config"].get("strategy", "untagged")
        rows.append({"checkpoint": str(ckpt), "strategy": strategy,
                     "aligned_sketch_fidelity": round(fid_a, 6),
                     "aligned_palette_similarity": round(pal_a, 6),
                     "cross_sketch_fidelity": round(fid_x, 6),
                     "cross_palette_similarity": round(pal_x, 6),
                     "n_samples": len(records)})
    return ProbeReport(rows=rows, config={"sampler": cfg.to_dict(),
                                          "n_samples": len(records),
                                          "cross_shift": cross_shift})


def write_probe_report(report: ProbeReport, out_dir) -> dict:
    """CSV + text + bar-figure rendering of a probe report; returns the paths."""
    from . import viz

    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    paths = {"csv": out_dir / "probe_report.csv",
             "text": out_dir / "probe_report.txt",
             "figure": out_dir / "probe_report.png"}
    paths["csv"].write_text(report.to_csv(), encoding="utf-8")
    paths["text"].write_text(report.to_text(), encoding="utf-8")
    viz.probe_figure(report, paths["figure"])
    return {k: str(v) for k, v in paths.items()}
